//! Scalar helpers on top of `libm`.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Binary entropy in nats; `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * libm::log(q) } else { 0.0 };
    term(p) + term(1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(-10.0) - 4.5397868702434395e-5).abs() < 1e-18);
    }

    #[test]
    fn softplus_matches_naive_in_range() {
        for x in [-5.0, -0.3, 0.0, 0.7, 4.0] {
            let naive = libm::log(1.0 + libm::exp(x));
            assert!((softplus(x) - naive).abs() < 1e-14);
        }
        assert_eq!(softplus(1000.0), 1000.0);
    }
}
