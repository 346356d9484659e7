//! Small shared numeric helpers.

/// Max-shifted log-sum-exp; `-inf` for an empty or all-`-inf` input.
pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = logs.iter().map(|&l| (l - m).exp()).sum();
    m + s.ln()
}

/// Normalizes log weights into probabilities. Returns the weights and a flag
/// that is true when every raw weight was zero (the weights then fall back to
/// uniform).
pub(crate) fn normalize_log_weights(logs: &[f64]) -> (Vec<f64>, bool) {
    let n = logs.len();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (vec![1.0 / n as f64; n], true);
    }
    let shifted: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = shifted.iter().sum();
    (shifted.iter().map(|&v| v / total).collect(), false)
}
