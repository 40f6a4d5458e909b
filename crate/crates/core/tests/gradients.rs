use condensery::gradcheck::run_suite;

#[test]
fn suite_passes_within_tolerance() {
    let report = run_suite(7).unwrap();
    for c in &report.checks {
        println!("{:<24} coords {:>4}  rel {:.2e}  abs {:.2e}", c.name, c.coords_checked, c.max_rel_err, c.max_abs_err);
    }
    let failed: Vec<_> = report.failures().map(|c| (&c.name, &c.mismatch)).collect();
    assert!(failed.is_empty(), "{failed:?}");
    assert!(report.seconds < 30.0, "suite took {:.1}s", report.seconds);
}
