//! Trace summaries shared by the acceptance suite and the CLI.

use crate::engine::RoundTrace;

/// Simulated time of the first round whose test accuracy reaches `target`.
pub fn time_to_accuracy(trace: &[RoundTrace], target: f64) -> Option<f64> {
    trace
        .iter()
        .find(|r| r.test_acc >= target)
        .map(|r| r.sim_time)
}

/// `baseline / candidate`; `None` unless both reached the target.
pub fn speedup(candidate: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    match (candidate, baseline) {
        (Some(c), Some(b)) if c > 0.0 => Some(b / c),
        _ => None,
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
