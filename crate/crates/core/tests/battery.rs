use snpla_core::checks::run_battery;

#[test]
fn engine_battery_passes() {
    let report = run_battery(0);
    let failed: Vec<_> = report.failures().collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(report.checks.len() > 20);
}
