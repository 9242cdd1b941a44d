//! Density and sampling helpers shared by the model and samplers.
//!
//! Conventions used throughout the crate: Gamma(a, b) is shape/rate with mean
//! a/b and variance a/b²; inverse-Gamma(a, b) is shape/scale, the law of 1/G
//! for G ~ Gamma(a, rate = b).

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal as NormalDist};
use statrs::distribution::{ContinuousCDF, Gamma as StatGamma};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837877066409345483560659472811235279723;

/// Log density of N(mean, var) at x.
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
}

/// Log density of Gamma(shape, rate) at x.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of inverse-Gamma(shape, scale) at x.
pub fn ln_inv_gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Draw from Gamma(shape, rate).
pub fn sample_gamma<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    GammaDist::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive")
        .sample(rng)
}

/// Draw from inverse-Gamma(shape, scale).
pub fn sample_inv_gamma<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    1.0 / sample_gamma(rng, shape, scale)
}

/// Draw from N(mean, var).
pub fn sample_normal<R: Rng>(rng: &mut R, mean: f64, var: f64) -> f64 {
    NormalDist::new(mean, var.sqrt())
        .expect("variance must be nonnegative")
        .sample(rng)
}

/// CDF of inverse-Gamma(shape, scale) at x.
pub fn inv_gamma_cdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let g = StatGamma::new(shape, scale).expect("inverse-gamma parameters must be positive");
    // If L ~ IG(a, s) then 1/L ~ Gamma(a, rate = s).
    1.0 - g.cdf(1.0 / x)
}

/// Quantile of inverse-Gamma(shape, scale).
pub fn inv_gamma_quantile(shape: f64, scale: f64, p: f64) -> f64 {
    let g = StatGamma::new(shape, scale).expect("inverse-gamma parameters must be positive");
    let q = g.inverse_cdf(1.0 - p);
    if q <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / q
    }
}

/// Outcome of a truncated inverse-Gamma draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncatedDraw {
    Sampled(f64),
    /// The admissible interval carried no usable probability mass (or had
    /// numerically collapsed width); the caller keeps the current value.
    Stalled,
}

/// Draw from inverse-Gamma(shape, scale) restricted to `(lower, upper)` by
/// inverse-CDF sampling. `lower` may be 0 and `upper` may be +inf.
pub fn sample_truncated_inv_gamma<R: Rng>(
    rng: &mut R,
    shape: f64,
    scale: f64,
    lower: f64,
    upper: f64,
    current: f64,
) -> TruncatedDraw {
    debug_assert!(lower <= upper);
    if upper.is_finite() && (upper - lower) < 1e-14 * current.abs() {
        return TruncatedDraw::Stalled;
    }
    let p_lo = if lower <= 0.0 {
        0.0
    } else {
        inv_gamma_cdf(shape, scale, lower)
    };
    let p_hi = if upper.is_finite() {
        inv_gamma_cdf(shape, scale, upper)
    } else {
        1.0
    };
    let mass = p_hi - p_lo;
    if !(mass > 1e-14) {
        return TruncatedDraw::Stalled;
    }
    let u: f64 = rng.random::<f64>();
    let p = p_lo + u * mass;
    let draw = inv_gamma_quantile(shape, scale, p.clamp(f64::MIN_POSITIVE, 1.0 - 1e-16));
    if !draw.is_finite() || draw <= 0.0 || draw < lower || (upper.is_finite() && draw > upper) {
        // Inverse-CDF landed outside the interval through rounding in an
        // extreme tail; treat as a stall rather than break the ordering.
        return TruncatedDraw::Stalled;
    }
    TruncatedDraw::Sampled(draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_logpdf_matches_closed_form() {
        // N(1, 4) at x=3: -0.5*ln(8*pi) - 4/8
        let expect = -0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((ln_normal_pdf(3.0, 1.0, 4.0) - expect).abs() < 1e-14);
    }

    #[test]
    fn gamma_logpdf_exponential_case() {
        // Gamma(1, b) is Exponential(b): log pdf = ln b - b x.
        let b = 0.7;
        let x = 2.3;
        assert!((ln_gamma_pdf(x, 1.0, b) - (b.ln() - b * x)).abs() < 1e-14);
    }

    #[test]
    fn inv_gamma_cdf_quantile_inverse_pair() {
        let (a, s) = (3.5, 2.0);
        for &p in &[0.01, 0.3, 0.5, 0.9, 0.99] {
            let x = inv_gamma_quantile(a, s, p);
            assert!((inv_gamma_cdf(a, s, x) - p).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_draw_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            match sample_truncated_inv_gamma(&mut rng, 4.0, 3.0, 0.5, 1.5, 1.0) {
                TruncatedDraw::Sampled(x) => assert!((0.5..=1.5).contains(&x)),
                TruncatedDraw::Stalled => panic!("interval with mass should sample"),
            }
        }
    }

    #[test]
    fn collapsed_interval_stalls() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = sample_truncated_inv_gamma(&mut rng, 4.0, 3.0, 1.0, 1.0 + 1e-16, 1.0);
        assert_eq!(out, TruncatedDraw::Stalled);
    }

    #[test]
    fn untruncated_moments_match_analytic() {
        // IG(a, s) mean = s/(a-1), var = s^2/((a-1)^2 (a-2)).
        let (a, s) = (6.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = sample_inv_gamma(&mut rng, a, s);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let true_mean = s / (a - 1.0);
        let true_var = s * s / ((a - 1.0) * (a - 1.0) * (a - 2.0));
        // 4 standard errors of the mean.
        let se = (true_var / n as f64).sqrt();
        assert!((mean - true_mean).abs() < 4.0 * se);
        assert!((var - true_var).abs() < 0.05 * true_var);
    }
}
