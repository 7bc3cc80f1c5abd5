//! Median smoothing bounds for l2-bounded observation perturbations.
//!
//! For the smoothed percentile `h_p(x)` of `f(x + G)`, `G ~ N(0, σ²I)`, any
//! perturbation with `‖δ‖₂ < ε` satisfies
//! `h_{p̲}(x) <= h_p(x + δ) <= h_{p̄}(x)` where
//! `p̲ = Φ(Φ⁻¹(p) - ε/σ)` and `p̄ = Φ(Φ⁻¹(p) + ε/σ)`. With `p = 1/2` the
//! median of every predicted feature gets an interval from two empirical
//! order statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bounds::BoxBounds;
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    if x < 0.0 {
        0.5 * libm::erfc(-t)
    } else {
        1.0 - 0.5 * libm::erfc(t)
    }
}

const ACKLAM_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const ACKLAM_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const ACKLAM_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const ACKLAM_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley step against [`phi`].
pub fn phi_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    const P_LOW: f64 = 0.02425;
    let (a, b, c, d) = (ACKLAM_A, ACKLAM_B, ACKLAM_C, ACKLAM_D);
    let tail = |q: f64| {
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    let e = phi(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Extra order statistics to step outward on each side. Zero uses the
    /// percentile bounds directly.
    pub index_offset: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sigma: 0.05, n_samples: 2000, seed: 0, index_offset: 0 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n_samples < 100 {
            return Err(Error::InvalidArgument(format!(
                "median smoothing needs at least 100 samples, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// Gaussian noise vector for sample `index`; depends only on `(seed, index)`.
pub fn noise_sample(seed: u64, index: u64, dim: usize, sigma: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

/// Sorted noisy predictions of `g` around one observation. Building this once
/// and querying [`SmoothedSamples::bounds`] for many budgets gives the same
/// result as calling [`median_smooth_bounds`] for each.
#[derive(Debug, Clone)]
pub struct SmoothedSamples {
    /// `sorted[k]` holds the `n` samples of output coordinate `k`, ascending.
    sorted: Vec<Vec<f64>>,
    cfg: SmoothingConfig,
}

impl SmoothedSamples {
    pub fn new(g: &Mlp, o: &[f64], cfg: &SmoothingConfig) -> Result<Self> {
        cfg.validate()?;
        if o.len() != g.input_dim() {
            return Err(Error::DimensionMismatch { expected: g.input_dim(), got: o.len() });
        }
        let mut sorted = vec![Vec::with_capacity(cfg.n_samples); g.output_dim()];
        let mut x = vec![0.0; o.len()];
        for i in 0..cfg.n_samples {
            let noise = noise_sample(cfg.seed, i as u64, o.len(), cfg.sigma);
            for ((xi, oi), ni) in x.iter_mut().zip(o).zip(&noise) {
                *xi = oi + ni;
            }
            for (k, y) in g.forward(&x)?.into_iter().enumerate() {
                sorted[k].push(y);
            }
        }
        for column in &mut sorted {
            column.sort_by(f64::total_cmp);
        }
        Ok(Self { sorted, cfg: cfg.clone() })
    }

    /// Order-statistic indices `(lower, upper)` used for budget `eps`.
    pub fn indices(&self, eps: f64) -> Result<(usize, usize)> {
        if eps < 0.0 || eps.is_nan() {
            return Err(Error::NegativeEpsilon(eps));
        }
        let n = self.cfg.n_samples;
        let shift = eps / self.cfg.sigma;
        let p_lo = phi(-shift);
        let p_hi = phi(shift);
        let nf = n as f64;
        let lo = (nf * p_lo).floor() as i64 - self.cfg.index_offset as i64;
        let hi = (nf * p_hi).ceil() as i64 - 1 + self.cfg.index_offset as i64;
        // the extreme samples do not bound any percentile
        if lo < 1 || hi > n as i64 - 2 {
            return Err(Error::SmoothingRangeExceeded { eps, sigma: self.cfg.sigma, n });
        }
        let (lo, hi) = (lo as usize, hi as usize);
        // for even n at eps = 0 the two formulas pick adjacent statistics in
        // reverse order
        Ok((lo.min(hi), lo.max(hi)))
    }

    pub fn bounds(&self, eps: f64) -> Result<BoxBounds> {
        let (lo, hi) = self.indices(eps)?;
        let lower = self.sorted.iter().map(|c| c[lo]).collect();
        let upper = self.sorted.iter().map(|c| c[hi]).collect();
        BoxBounds::new(lower, upper)
    }

    /// Empirical median of each coordinate.
    pub fn median(&self) -> Vec<f64> {
        let n = self.cfg.n_samples;
        self.sorted
            .iter()
            .map(|c| if n % 2 == 1 { c[n / 2] } else { 0.5 * (c[n / 2 - 1] + c[n / 2]) })
            .collect()
    }
}

/// Median-smoothing feature bounds of `g` at `o` for l2 budget `eps`.
pub fn median_smooth_bounds(g: &Mlp, o: &[f64], eps: f64, cfg: &SmoothingConfig) -> Result<BoxBounds> {
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::NegativeEpsilon(eps));
    }
    SmoothedSamples::new(g, o, cfg)?.bounds(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    /// Maclaurin series of erf, summed until terms vanish. Accurate to
    /// ~1e-15 for |x| <= 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    fn identity() -> Mlp {
        Mlp::new(vec![Layer::new(1, 1, vec![1.0], vec![0.0]).unwrap()]).unwrap()
    }

    #[test]
    fn phi_reference_values() {
        assert_eq!(phi(0.0), 0.5);
        assert!((phi(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((phi(-3.0) - 0.0013498980316300946).abs() < 1e-15);
        assert!((phi(2.5) - 0.9937903346742238).abs() < 1e-13);
    }

    #[test]
    fn phi_matches_series_oracle() {
        for i in -40..=40 {
            let x = f64::from(i) * 0.1;
            let oracle = 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((phi(x) - oracle).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn phi_inv_round_trips() {
        for i in -600..=600 {
            let x = f64::from(i) * 0.01;
            let back = phi_inv(phi(x)).unwrap();
            assert!((back - x).abs() < 1e-8, "x={x} back={back}");
        }
        for k in 0..=200 {
            let p = 1e-8 + (1.0 - 2e-8) * f64::from(k) / 200.0;
            let back = phi(phi_inv(p).unwrap());
            assert!((back - p).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn phi_inv_rejects_out_of_range() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(phi_inv(p), Err(Error::ProbabilityOutOfRange(_))));
        }
    }

    #[test]
    fn zero_budget_collapses_to_median() {
        let cfg = SmoothingConfig { n_samples: 2000, ..Default::default() };
        let samples = SmoothedSamples::new(&identity(), &[0.4], &cfg).unwrap();
        assert_eq!(samples.indices(0.0).unwrap(), (999, 1000));
        let b = samples.bounds(0.0).unwrap();
        let m = samples.median()[0];
        assert!(b.lower()[0] <= m && m <= b.upper()[0]);
        let odd = SmoothingConfig { n_samples: 2001, ..Default::default() };
        let b = median_smooth_bounds(&identity(), &[0.4], 0.0, &odd).unwrap();
        assert_eq!(b.lower(), b.upper());
    }

    #[test]
    fn identity_upper_bound_matches_closed_form() {
        let cfg = SmoothingConfig::default();
        let x = 0.3;
        let b = median_smooth_bounds(&identity(), &[x], 0.05, &cfg).unwrap();
        assert!((b.upper()[0] - (x + 0.05)).abs() < 0.01, "{:?}", b);
        assert!((b.lower()[0] - (x - 0.05)).abs() < 0.01, "{:?}", b);
    }

    #[test]
    fn widening_and_determinism() {
        let cfg = SmoothingConfig { n_samples: 500, seed: 9, ..Default::default() };
        let o = [0.2, 0.8];
        let g = Mlp::new(vec![
            Layer::new(2, 3, vec![1.0, -2.0, 0.5, 0.5, -1.0, 1.0], vec![0.0, 0.1, 0.0]).unwrap(),
            Layer::new(3, 2, vec![1.0, 1.0, -1.0, 0.3, 0.2, 2.0], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let samples = SmoothedSamples::new(&g, &o, &cfg).unwrap();
        let mut prev = samples.bounds(0.0).unwrap();
        for k in 1..=20 {
            let eps = f64::from(k) / 255.0;
            let b = samples.bounds(eps).unwrap();
            assert!(b.contains_box(&prev));
            assert_eq!(b, median_smooth_bounds(&g, &o, eps, &cfg).unwrap());
            prev = b;
        }
    }

    #[test]
    fn range_exceeded_and_bad_config() {
        let cfg = SmoothingConfig::default();
        assert!(matches!(
            median_smooth_bounds(&identity(), &[0.5], 0.5, &cfg),
            Err(Error::SmoothingRangeExceeded { .. })
        ));
        assert!(median_smooth_bounds(&identity(), &[0.5], -0.1, &cfg).is_err());
        let bad = SmoothingConfig { n_samples: 10, ..Default::default() };
        assert!(median_smooth_bounds(&identity(), &[0.5], 0.0, &bad).is_err());
        let bad = SmoothingConfig { sigma: 0.0, ..Default::default() };
        assert!(median_smooth_bounds(&identity(), &[0.5], 0.0, &bad).is_err());
    }

    #[test]
    fn twenty_over_255_is_within_range_at_defaults() {
        let cfg = SmoothingConfig::default();
        assert!(median_smooth_bounds(&identity(), &[0.5], 20.0 / 255.0, &cfg).is_ok());
    }
}
