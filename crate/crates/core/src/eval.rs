//! Evaluation metrics and the variant ablation harness.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Generator;
use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::synthdata::{
    attribute_tensor, bayes_classify, draw_target_attributes, sample_batch, sample_domain, AttributeVector, DomainSpec,
};
use crate::training::{train, TrainConfig};

pub const COV_REGULARIZER: f64 = 1e-6;

/// Sample mean and unbiased covariance (plus `1e-6 I`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

pub fn fit_gaussian(points: &[Vec<f64>]) -> Result<GaussianFit> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::invalid("cannot fit a Gaussian to an empty set"));
    }
    if points.len() < d + 1 {
        return Err(Error::invalid(format!(
            "need at least d+1 = {} points for a covariance, got {}",
            d + 1,
            points.len()
        )));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points have unequal dimension"));
    }
    let k = points.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += DVector::from_column_slice(p);
    }
    mean /= k;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = DVector::from_column_slice(p) - &mean;
        cov += &c * c.transpose();
    }
    cov /= k - 1.0;
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZER;
    }
    Ok(GaussianFit {
        mean,
        cov,
        count: points.len(),
    })
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetric(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// `Tr (S_a S_b)^{1/2}` is taken from the eigenvalues of the symmetric
/// `S_a^{1/2} S_b S_a^{1/2}`, which has the same spectrum.
pub fn frechet_from_fits(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid("Gaussian fits have different dimension"));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let sa = sqrt_psd(&a.cov);
    let inner = symmetric(&(&sa * &b.cov * &sa));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "frechet" });
    }
    Ok(value.max(0.0))
}

pub fn frechet_gaussian(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    frechet_from_fits(&fit_gaussian(set_a)?, &fit_gaussian(set_b)?)
}

/// Per-bit fraction of samples whose Bayes-oracle label matches the target.
pub fn transfer_accuracy(spec: &DomainSpec, generated: &[Vec<f64>], targets: &[AttributeVector]) -> Result<Vec<f64>> {
    if generated.len() != targets.len() || generated.is_empty() {
        return Err(Error::invalid(format!(
            "{} generated samples for {} targets",
            generated.len(),
            targets.len()
        )));
    }
    let mut hits = vec![0usize; spec.n()];
    for (x, t) in generated.iter().zip(targets) {
        if x.len() != spec.d() || t.len() != spec.n() {
            return Err(Error::invalid("sample or target has the wrong width"));
        }
        let pred = bayes_classify(spec, x);
        for (h, (p, q)) in hits.iter_mut().zip(pred.bits().iter().zip(t.bits())) {
            *h += (p == q) as usize;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / generated.len() as f64).collect())
}

/// Mean of `|(x^t - mu(a^t)) - (x^s - mu(a^s))|`.
pub fn content_error(
    spec: &DomainSpec,
    sources: &[Vec<f64>],
    source_attrs: &[AttributeVector],
    generated: &[Vec<f64>],
    targets: &[AttributeVector],
) -> Result<f64> {
    let k = sources.len();
    if k == 0 || source_attrs.len() != k || generated.len() != k || targets.len() != k {
        return Err(Error::invalid("content error inputs have inconsistent lengths"));
    }
    let mut total = 0.0;
    for i in 0..k {
        let (ms, mt) = (spec.domain_mean(&source_attrs[i])?, spec.domain_mean(&targets[i])?);
        let sq: f64 = (0..spec.d())
            .map(|j| ((generated[i][j] - mt[j]) - (sources[i][j] - ms[j])).powi(2))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainFid {
    pub domain: usize,
    pub count: usize,
    /// `None` when the domain has fewer than `d + 1` samples.
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub variant: Option<String>,
    pub seed: u64,
    pub samples: usize,
    pub fid: f64,
    pub fid_per_domain: Vec<DomainFid>,
    pub acc_per_bit: Vec<f64>,
    /// Macro average over bits.
    pub mean_acc: f64,
    pub content_err: f64,
}

impl MetricsReport {
    /// One header row and one value row.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["seed", "samples", "fid", "mean_acc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.acc_per_bit.len()).map(|i| format!("acc_bit_{i}")));
        header.push("content_err".into());
        wr.write_record(&header)?;
        let mut rec = vec![
            self.seed.to_string(),
            self.samples.to_string(),
            fmt(self.fid),
            fmt(self.mean_acc),
        ];
        rec.extend(self.acc_per_bit.iter().map(|&a| fmt(a)));
        rec.push(fmt(self.content_err));
        wr.write_record(&rec)?;
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    t.rows_f64()
}

/// Scores 1-hop translations of a fresh test stream against real samples
/// of the drawn target domains.
pub fn evaluate(spec: &DomainSpec, generator: &Generator<f32>, samples: usize, seed: u64) -> Result<MetricsReport> {
    if samples < spec.d() + 1 {
        return Err(Error::invalid(format!(
            "need at least d+1 = {} test samples",
            spec.d() + 1
        )));
    }
    let batch = sample_batch(spec, samples, &mut stream_rng(seed, Stream::EvalSource, 0))?;
    let mut trng = stream_rng(seed, Stream::EvalTargets, 0);
    let targets: Vec<AttributeVector> = (0..samples)
        .map(|_| draw_target_attributes(&mut trng, spec.n()))
        .collect();
    let generated = rows_of(&generator.apply(&batch.features, &attribute_tensor(&targets))?);
    if generated.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "evaluate" });
    }
    let mut rrng = stream_rng(seed, Stream::EvalReal, 0);
    let real = targets
        .iter()
        .map(|t| sample_domain(spec, t, &mut rrng))
        .collect::<Result<Vec<_>>>()?;
    let sources = rows_of(&batch.features);

    let fid = frechet_gaussian(&generated, &real)?;
    let mut fid_per_domain = Vec::with_capacity(spec.domain_count());
    for domain in 0..spec.domain_count() {
        let idx: Vec<usize> = (0..samples).filter(|&i| targets[i].index() == domain).collect();
        let fid = if idx.len() > spec.d() {
            let g: Vec<Vec<f64>> = idx.iter().map(|&i| generated[i].clone()).collect();
            let r: Vec<Vec<f64>> = idx.iter().map(|&i| real[i].clone()).collect();
            Some(frechet_gaussian(&g, &r)?)
        } else {
            None
        };
        fid_per_domain.push(DomainFid {
            domain,
            count: idx.len(),
            fid,
        });
    }
    let acc_per_bit = transfer_accuracy(spec, &generated, &targets)?;
    let mean_acc = acc_per_bit.iter().sum::<f64>() / acc_per_bit.len() as f64;
    let content_err = content_error(spec, &sources, &batch.attributes, &generated, &targets)?;
    Ok(MetricsReport {
        variant: None,
        seed,
        samples,
        fid,
        fid_per_domain,
        acc_per_bit,
        mean_acc,
        content_err,
    })
}

/// The five ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Variant {
    /// MST with 2 hops, no AIW.
    A,
    /// AIW with 3-hop MST.
    B,
    /// AIW with 2-hop MST.
    C,
    /// AIW only.
    D,
    /// Plain conditional GAN.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// `(aiw, mst, hops)`.
    pub fn flags(self) -> (bool, bool, usize) {
        match self {
            Variant::A => (false, true, 2),
            Variant::B => (true, true, 3),
            Variant::C => (true, true, 2),
            Variant::D => (true, false, 1),
            Variant::E => (false, false, 1),
        }
    }

    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let (aiw, mst, hops) = self.flags();
        TrainConfig {
            aiw,
            mst,
            hops,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub aiw: bool,
    pub mst: bool,
    pub hops: usize,
    /// `Err` holds the abort reason of a failed arm.
    pub result: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub n: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one arm; errors are returned, not recorded.
pub fn run_arm(base: &TrainConfig, variant: Variant, seed: u64) -> Result<MetricsReport> {
    let config = TrainConfig {
        seed,
        ..variant.configure(base)
    };
    let outcome = train(config.clone(), None)?;
    let mut report = evaluate(&outcome.state.spec, &outcome.state.generator, config.eval_samples, seed)?;
    report.variant = Some(variant.label().to_string());
    Ok(report)
}

/// Every variant for every seed, `threads` arms at a time. Arms on the same
/// seed share data, initialisation and evaluation streams.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64], threads: usize) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    base.validate()?;
    let arms: Vec<(Variant, u64)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.into_iter().map(move |v| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        arms.par_iter()
            .map(|&(variant, seed)| {
                let (aiw, mst, hops) = variant.flags();
                let result = run_arm(base, variant, seed).map_err(|e| {
                    log::warn!("arm ({}, seed {seed}) failed: {e}", variant.label());
                    e.to_string()
                });
                AblationRow {
                    variant,
                    seed,
                    aiw,
                    mst,
                    hops,
                    result,
                }
            })
            .collect()
    });
    Ok(AblationTable { n: base.n, rows })
}

/// Parallelism cap from `INIT_THREADS`, defaulting to the core count.
pub fn thread_cap() -> usize {
    std::env::var("INIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub aiw: bool,
    pub mst: bool,
    pub hops: usize,
    pub completed: usize,
    pub failed: usize,
    pub median_fid: Option<f64>,
    pub median_mean_acc: Option<f64>,
    pub median_content_err: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

impl AblationTable {
    /// Row for `(variant, seed)` if it completed.
    pub fn report(&self, variant: Variant, seed: u64) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .and_then(|r| r.result.as_ref().ok())
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["variant", "seed", "aiw", "mst", "hops", "fid", "mean_acc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.n).map(|i| format!("acc_bit_{i}")));
        header.push("content_err".into());
        header.push("status".into());
        wr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.variant.label().to_string(),
                row.seed.to_string(),
                row.aiw.to_string(),
                row.mst.to_string(),
                row.hops.to_string(),
            ];
            match &row.result {
                Ok(r) => {
                    rec.push(fmt(r.fid));
                    rec.push(fmt(r.mean_acc));
                    rec.extend(r.acc_per_bit.iter().map(|&a| fmt(a)));
                    rec.push(fmt(r.content_err));
                    rec.push("ok".into());
                }
                Err(reason) => {
                    rec.extend(std::iter::repeat_n(String::new(), self.n + 3));
                    rec.push(format!("failed: {reason}"));
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn summary(&self) -> Vec<VariantSummary> {
        Variant::ALL
            .into_iter()
            .map(|v| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let ok: Vec<&MetricsReport> = rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
                let (aiw, mst, hops) = v.flags();
                VariantSummary {
                    variant: v,
                    aiw,
                    mst,
                    hops,
                    completed: ok.len(),
                    failed: rows.len() - ok.len(),
                    median_fid: median(&mut ok.iter().map(|r| r.fid).collect::<Vec<_>>()),
                    median_mean_acc: median(&mut ok.iter().map(|r| r.mean_acc).collect::<Vec<_>>()),
                    median_content_err: median(&mut ok.iter().map(|r| r.content_err).collect::<Vec<_>>()),
                }
            })
            .collect()
    }

    /// Writes `ablation.csv` and `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("ablation.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)?;
        let json_path = dir.join("summary.json");
        let f = std::fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        serde_json::to_writer_pretty(f, &self.summary())?;
        Ok(())
    }
}
