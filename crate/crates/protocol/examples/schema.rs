fn main() {
    println!("{}", serde_json::to_string_pretty(&twofe_protocol::wire::schema_json()).unwrap());
}
