use std::time::Instant;

use attnseg_core::autodiff::fault;
use attnseg_core::gradcheck::{run_suite, suite_names};

#[test]
fn suite_passes_within_a_minute() {
    let start = Instant::now();
    let entries = run_suite(None, |e| {
        println!("{:<26} max rel err {:.3e} over {} coords in {:.2}s", e.name, e.report.max_rel_error, e.report.coords_checked, e.report.seconds)
    })
    .unwrap();
    assert_eq!(entries.len(), suite_names().len());
    for e in &entries {
        assert!(e.passed(), "{}: {:?}", e.name, e.report);
        assert!(e.report.kinks_skipped * 10 <= e.report.coords_checked, "{}", e.name);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn corrupted_rule_is_caught_and_named() {
    fault::corrupt_rule(Some("conv2d"));
    let entries = run_suite(Some("conv2d"), |_| {});
    fault::corrupt_rule(None);
    let entries = entries.unwrap();
    assert_eq!(entries.len(), 1);
    assert!(!entries[0].passed());
    assert!(entries[0].report.max_rel_error > 0.01);

    fault::corrupt_rule(Some("sigmoid"));
    let failing: Vec<_> = run_suite(Some("sig"), |_| {}).unwrap().into_iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    fault::corrupt_rule(None);
    assert_eq!(failing, ["sigmoid"]);
}
