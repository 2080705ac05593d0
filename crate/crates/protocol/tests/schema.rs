use twofe_protocol::wire::schema_json;

#[test]
fn checked_in_schema_is_current() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/messages.json");
    let text = std::fs::read_to_string(path).expect("schema/messages.json exists");
    let on_disk: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(
        on_disk,
        schema_json(),
        "regenerate with: cargo run -p twofe-protocol --example schema > schema/messages.json"
    );
}
