//! Scalar helpers shared across modules.

use statrs::function::erf::erfc;

/// `ln(1 + e^x)` without overflow or cancellation.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 / (1 + e^{-x})`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus and logistic of `x` sharing one exponential.
#[inline]
pub(crate) fn softplus_logistic(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

/// `ln Σ exp(v)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Two-sided normal p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(-1.0) - 0.31326168751822283).abs() < 1e-15);
        for x in [-30.0, -2.5, -0.1, 0.3, 4.0, 40.0] {
            let (sp, sig) = softplus_logistic(x);
            assert_eq!(sp, softplus(x));
            assert_eq!(sig, logistic(x));
            // softplus(x) - softplus(-x) = x
            assert!((softplus(x) - softplus(-x) - x).abs() < 1e-13);
        }
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn normal_helpers() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-10);
    }
}
