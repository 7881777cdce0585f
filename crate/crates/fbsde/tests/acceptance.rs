use fbsde::selftest::run_all;

#[test]
fn acceptance() {
    let results = run_all();
    let mut failed = 0;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("[{status}] criterion {:2}: {} ({})", r.id, r.name, r.detail);
        if !r.pass {
            failed += 1;
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
