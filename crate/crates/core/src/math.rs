//! Small numeric helpers shared by the network and classifier code.

/// Logistic sigmoid, computed without overflow for large |x|.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// silu(x) = x * sigmoid(x).
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry_and_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[0.3, 1.7, 12.0, 300.0] {
            let lo = sigmoid(-x);
            let hi = sigmoid(x);
            assert!((lo + hi - 1.0).abs() < 1e-15);
            assert!(hi > 0.5 && lo < 0.5);
        }
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-800.0) == 0.0);
    }

    #[test]
    fn silu_matches_definition() {
        // silu(1) = 1 / (1 + e^-1) = 0.731058578630...
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(silu(0.0), 0.0);
    }

    #[test]
    fn silu_deriv_matches_central_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5, 9.0] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_deriv(x) - fd).abs() < 1e-8, "x = {x}");
        }
    }
}
