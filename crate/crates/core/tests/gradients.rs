//! Finite-difference checks of the scan, each block and the full network.

mod common;

#[test]
fn blocks_match_central_differences() {
    let reports = common::block_suite().unwrap();
    for (name, err) in &reports {
        assert!(*err < common::GRAD_TOL, "{name}: max rel err {err:e}");
    }
    assert!(reports.len() >= 14);
}
