//! Stable scalar nonlinearities and their derivatives.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of softplus: x such that softplus(x) == y, y > 0.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-4, 0.01, 0.5, 1.0, 20.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn sigmoid_extremes_stable() {
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
    }
}
