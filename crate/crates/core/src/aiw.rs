//! Adversarial importance weighting.
//!
//! At the optimal discriminator `D* = p_data / (p_data + p_g)`, so with
//! `D = sigmoid(D~)` the density ratio is `p_data / p_g = exp(D~*)`. The
//! practical weight rescales `exp(D~)` by how far the batch embedding
//! statistic `dl` is from its optimum `2r`:
//!
//! `AIW(x^t) = (1 + (dl* - dl))^2 * exp(D~(x^t, a^t))`
//!
//! Weights leave this module as plain numbers, so no gradient can flow
//! through them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AiwConfig {
    /// Logits are clamped to `[-logit_clamp, logit_clamp]` before `exp`.
    pub logit_clamp: f64,
    /// Rescale final weights to mean 1 over the batch.
    pub self_normalize: bool,
}

impl Default for AiwConfig {
    fn default() -> Self {
        Self {
            logit_clamp: 4.0,
            self_normalize: true,
        }
    }
}

/// `exp(clamp(logit, -clamp, clamp))`.
pub fn raw_weight(logit: f64, clamp: f64) -> Result<f64> {
    if !logit.is_finite() {
        return Err(Error::NonFinite { op: "raw_weight" });
    }
    Ok(logit.clamp(-clamp, clamp).exp())
}

/// Embedding distance statistics of one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceStats {
    /// Row-major `k x k`, `e_ij = |phi(x^s_i) - phi(x^t_j)|`.
    pub matrix: Vec<f64>,
    pub k: usize,
    /// Mean of the diagonal (matched pairs).
    pub dl_p: f64,
    /// Mean of the off-diagonal (mismatched pairs).
    pub dl_n: f64,
    /// `dl_n - dl_p`.
    pub dl: f64,
    /// `2r`.
    pub dl_star: f64,
}

impl DistanceStats {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.k + j]
    }

    /// `(1 + dl* - dl)^2`.
    pub fn scale_factor(&self) -> f64 {
        (1.0 + self.dl_star - self.dl).powi(2)
    }
}

const SPHERE_TOL: f64 = 1e-4;

/// Distance matrix between source and generated embeddings on the
/// radius-`radius` sphere. Entries are clamped to the diameter `2r` to
/// absorb rounding.
pub fn distance_stats<T: Scalar>(src: &Tensor<T>, gen: &Tensor<T>, radius: f64) -> Result<DistanceStats> {
    if src.shape() != gen.shape() {
        return Err(Error::ShapeMismatch {
            op: "distance_stats",
            left: src.shape().to_vec(),
            right: gen.shape().to_vec(),
        });
    }
    let k = src.rows();
    if k < 2 {
        return Err(Error::invalid("distance statistics need at least 2 pairs"));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::invalid("radius must be > 0"));
    }
    let (src, gen) = (src.rows_f64(), gen.rows_f64());
    for row in src.iter().chain(&gen) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - radius).abs() > SPHERE_TOL * radius {
            return Err(Error::invalid(format!(
                "embedding norm {norm} is off the radius-{radius} sphere"
            )));
        }
    }
    let diameter = 2.0 * radius;
    let mut matrix = Vec::with_capacity(k * k);
    for s in &src {
        for t in &gen {
            let d = s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            matrix.push(d.min(diameter));
        }
    }
    let trace: f64 = (0..k).map(|i| matrix[i * k + i]).sum();
    let total: f64 = matrix.iter().sum();
    let dl_p = trace / k as f64;
    let dl_n = (total - trace) / (k * (k - 1)) as f64;
    Ok(DistanceStats {
        matrix,
        k,
        dl_p,
        dl_n,
        dl: dl_n - dl_p,
        dl_star: diameter,
    })
}

/// Per-batch weighting intermediates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightReport {
    pub logits: Vec<f64>,
    /// `exp(clamped logit)`.
    pub raw_weights: Vec<f64>,
    pub stats: DistanceStats,
    pub scale: f64,
    pub weights: Vec<f64>,
    /// Divisor applied by self-normalization, if enabled.
    pub normalization: Option<f64>,
}

impl WeightReport {
    pub fn min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Weights as a `[k, 1]` column.
    pub fn column<T: Scalar>(&self) -> Tensor<T> {
        Tensor::matrix(self.weights.len(), 1, self.weights.iter().map(|&w| T::lit(w)).collect()).expect("column shape")
    }
}

/// `scale * exp(clamped logit)` per sample, optionally renormalized to
/// mean 1.
pub fn aiw_weights(logits: &[f64], stats: DistanceStats, config: &AiwConfig) -> Result<WeightReport> {
    if logits.len() != stats.k {
        return Err(Error::invalid(format!(
            "{} logits for a batch of {} pairs",
            logits.len(),
            stats.k
        )));
    }
    let raw_weights = logits
        .iter()
        .map(|&l| raw_weight(l, config.logit_clamp))
        .collect::<Result<Vec<_>>>()?;
    let scale = stats.scale_factor();
    let mut weights: Vec<f64> = raw_weights.iter().map(|w| scale * w).collect();
    let normalization = if config.self_normalize {
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|w| *w /= mean);
        Some(mean)
    } else {
        None
    };
    Ok(WeightReport {
        logits: logits.to_vec(),
        raw_weights,
        stats,
        scale,
        weights,
        normalization,
    })
}

// ---- importance sampling --------------------------------------------------

pub trait Density<X> {
    fn density(&self, x: &X) -> f64;
}

pub trait Proposal<X>: Density<X> {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> X;
}

/// Adapts a closure into a [`Density`].
pub struct FnDensity<F>(pub F);

impl<X, F: Fn(&X) -> f64> Density<X> for FnDensity<F> {
    fn density(&self, x: &X) -> f64 {
        (self.0)(x)
    }
}

/// `N(mean, variance)` on the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normal1d {
    mean: f64,
    std: f64,
}

impl Normal1d {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if variance.is_nan() || variance <= 0.0 {
            return Err(Error::invalid("variance must be > 0"));
        }
        Ok(Self {
            mean,
            std: variance.sqrt(),
        })
    }
}

impl Density<f64> for Normal1d {
    fn density(&self, x: &f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl Proposal<f64> for Normal1d {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        Normal::new(self.mean, self.std).expect("validated").sample(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsEstimate {
    /// `(1/N) sum w_i f(x_i)`.
    pub estimate: f64,
    /// `sum w_i f(x_i) / sum w_i`.
    pub self_normalized: f64,
    /// Standard error of `estimate`.
    pub std_error: f64,
    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub ess: f64,
    pub samples: usize,
}

/// Importance-sampling estimate of `E_target[f]` from `samples` draws of
/// `proposal`.
pub fn is_estimate<X>(
    target: &impl Density<X>,
    proposal: &impl Proposal<X>,
    f: impl Fn(&X) -> f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<IsEstimate> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let (mut sum_wf, mut sum_wf2, mut sum_w, mut sum_w2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let x = proposal.sample(rng);
        let q = proposal.density(&x);
        let pf = target.density(&x) * f(&x);
        if q <= 0.0 {
            if pf != 0.0 {
                return Err(Error::SupportViolation);
            }
            continue;
        }
        let w = target.density(&x) / q;
        let wf = pf / q;
        sum_wf += wf;
        sum_wf2 += wf * wf;
        sum_w += w;
        sum_w2 += w * w;
    }
    let n = samples as f64;
    let estimate = sum_wf / n;
    let variance = if samples > 1 {
        ((sum_wf2 - n * estimate * estimate) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(IsEstimate {
        estimate,
        self_normalized: if sum_w > 0.0 { sum_wf / sum_w } else { f64::NAN },
        std_error: (variance / n).sqrt(),
        ess: if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn raw_weight_examples() {
        assert_eq!(raw_weight(0.0, 4.0).unwrap(), 1.0);
        assert!((raw_weight(3f64.ln(), 4.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(raw_weight(f64::NAN, 4.0).is_err());
        assert_eq!(raw_weight(10.0, 4.0).unwrap(), 4f64.exp());
    }

    #[test]
    fn optimal_discriminator_gives_density_ratio() {
        // p_data = 2 p_g at a point: D* = 2/3, logit ln 2, weight 2
        let d_star: f64 = 2.0 / (2.0 + 1.0);
        let logit = (d_star / (1.0 - d_star)).ln();
        assert!((logit - 2f64.ln()).abs() < 1e-12);
        assert!((raw_weight(logit, 4.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stats_orthogonal_pair() {
        let e = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = distance_stats(&e, &e, 1.0).unwrap();
        assert_eq!(s.dl_p, 0.0);
        assert!((s.dl_n - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.dl - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_identical_embeddings() {
        let e = m(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let s = distance_stats(&e, &e, 1.0).unwrap();
        assert_eq!((s.dl_p, s.dl_n, s.dl), (0.0, 0.0, 0.0));
    }

    #[test]
    fn stats_antipodal_worst_case() {
        let src = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let gen = m(&[&[-1.0, 0.0], &[1.0, 0.0]]);
        let s = distance_stats(&src, &gen, 1.0).unwrap();
        assert_eq!((s.dl_p, s.dl_n, s.dl), (2.0, 0.0, -2.0));
    }

    #[test]
    fn stats_reject_single_pair_and_off_sphere() {
        let one = m(&[&[1.0, 0.0]]);
        assert!(distance_stats(&one, &one, 1.0).is_err());
        let off = m(&[&[2.0, 0.0], &[0.0, 1.0]]);
        assert!(distance_stats(&off, &off, 1.0).is_err());
    }

    fn stats_with_dl(dl: f64, k: usize) -> DistanceStats {
        DistanceStats {
            matrix: vec![0.0; k * k],
            k,
            dl_p: 0.0,
            dl_n: dl,
            dl,
            dl_star: 2.0,
        }
    }

    #[test]
    fn scale_collapses_at_optimum() {
        let cfg = AiwConfig {
            self_normalize: false,
            ..Default::default()
        };
        let r = aiw_weights(&[0.7, -0.2], stats_with_dl(2.0, 2), &cfg).unwrap();
        assert_eq!(r.scale, 1.0);
        assert!((r.weights[0] - 0.7f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn half_gap_quadruples_weight() {
        let cfg = AiwConfig {
            self_normalize: false,
            ..Default::default()
        };
        let r = aiw_weights(&[0.0, 0.0], stats_with_dl(1.0, 2), &cfg).unwrap();
        assert_eq!(r.scale, 4.0);
        assert_eq!(r.weights, vec![4.0, 4.0]);
    }

    #[test]
    fn self_normalization_to_mean_one() {
        let r = aiw_weights(&[0.0, 3f64.ln()], stats_with_dl(2.0, 2), &AiwConfig::default()).unwrap();
        assert!((r.weights[0] - 0.5).abs() < 1e-12);
        assert!((r.weights[1] - 1.5).abs() < 1e-12);
        assert!((r.mean() - 1.0).abs() < 1e-12);
        assert!((r.normalization.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logit_count_must_match_batch() {
        assert!(aiw_weights(&[0.0], stats_with_dl(2.0, 2), &AiwConfig::default()).is_err());
    }

    #[test]
    fn identity_proposal_is_plain_monte_carlo() {
        let q = Normal1d::new(0.0, 1.0).unwrap();
        let mut rng = stream_rng(1, Stream::Check, 0);
        let est = is_estimate(&q, &q, |x| x * x, 1000, &mut rng).unwrap();
        let mut rng = stream_rng(1, Stream::Check, 0);
        let plain: f64 = (0..1000).map(|_| q.sample(&mut rng).powi(2)).sum::<f64>() / 1000.0;
        assert!((est.estimate - plain).abs() < 1e-12);
        assert!((est.ess - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn second_moment_from_wider_proposal() {
        let p = Normal1d::new(0.0, 1.0).unwrap();
        let q = Normal1d::new(0.0, 4.0).unwrap();
        let mut rng = stream_rng(2, Stream::Check, 0);
        let est = is_estimate(&p, &q, |x| x * x, 1_000_000, &mut rng).unwrap();
        assert!((est.estimate - 1.0).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn tail_probability_from_wider_proposal() {
        let p = Normal1d::new(0.0, 1.0).unwrap();
        let q = Normal1d::new(0.0, 4.0).unwrap();
        let mut rng = stream_rng(3, Stream::Check, 0);
        let est = is_estimate(&p, &q, |&x| (x > 1.0) as u8 as f64, 1_000_000, &mut rng).unwrap();
        // 1 - Phi(1)
        let truth = 0.158_655_253_931_457;
        assert!((est.estimate - truth).abs() / truth < 0.03, "{est:?}");
    }

    struct Uniform01;
    impl Density<f64> for Uniform01 {
        fn density(&self, x: &f64) -> f64 {
            if (0.0..1.0).contains(x) {
                1.0
            } else {
                0.0
            }
        }
    }
    impl Proposal<f64> for Uniform01 {
        fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
            // deliberately outside the support
            rng.random::<f64>() + 5.0
        }
    }

    #[test]
    fn support_violation_aborts() {
        let p = FnDensity(|_: &f64| 1.0);
        let mut rng = stream_rng(4, Stream::Check, 0);
        assert!(matches!(
            is_estimate(&p, &Uniform01, |_| 1.0, 10, &mut rng),
            Err(Error::SupportViolation)
        ));
    }

    proptest! {
        #[test]
        fn scale_is_monotone_and_nonnegative(a in -2.0f64..2.0, b in -2.0f64..2.0, logit in -6.0f64..6.0) {
            let cfg = AiwConfig { self_normalize: false, ..Default::default() };
            let wa = aiw_weights(&[logit, 0.0], stats_with_dl(a, 2), &cfg).unwrap();
            let wb = aiw_weights(&[logit, 0.0], stats_with_dl(b, 2), &cfg).unwrap();
            prop_assert!(wa.scale >= 0.0 && wb.scale >= 0.0);
            if a < b {
                prop_assert!(wa.weights[0] > wb.weights[0]);
            }
            prop_assert!(wa.weights.iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn normalized_weights_average_one(logits in prop::collection::vec(-10.0f64..10.0, 2..32)) {
            let k = logits.len();
            let r = aiw_weights(&logits, stats_with_dl(0.3, k), &AiwConfig::default()).unwrap();
            prop_assert!((r.mean() - 1.0).abs() < 1e-6);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
        }
    }
}
