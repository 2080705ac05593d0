use twofe_agent::bench::{run_bench, DEFAULT_SIZES};

#[test]
fn report_structure() {
    let r = run_bench(DEFAULT_SIZES, 10, 1).unwrap();
    print!("{}", r.table());
    assert_eq!(r.samples.len(), 2 * 2 * DEFAULT_SIZES.len() * 10);
    assert!(r.samples.iter().all(|s| s.compute_ms <= s.total_ms));
    assert_eq!(r.encrypt_messages.len(), 5);
    assert_eq!(r.decrypt_messages.len(), 2);
    for line in r.json_lines().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["record"].is_string());
    }
}
