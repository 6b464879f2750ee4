//! Synthetic multi-domain data: `n` binary attributes index `2^n` Gaussian
//! clouds in `R^d`. The known generative model gives an exact translation
//! oracle and an exact Bayes attribute classifier.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary attribute bits `a_1..a_n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeVector(Vec<u8>);

impl AttributeVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!("attribute bits must be 0 or 1: {bits:?}")));
        }
        Ok(Self(bits))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Bit `i` is bit `i` of `index`.
    pub fn from_index(index: usize, n: usize) -> Self {
        Self((0..n).map(|i| ((index >> i) & 1) as u8).collect())
    }

    pub fn index(&self) -> usize {
        self.0.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    /// Uniform draw from `{0,1}^n`.
    pub fn random(rng: &mut impl Rng, n: usize) -> Self {
        Self((0..n).map(|_| rng.random::<bool>() as u8).collect())
    }
}

/// Stacks attribute vectors into a `[k, n]` 0/1 tensor.
pub fn attribute_tensor(attrs: &[AttributeVector]) -> Tensor<f32> {
    let n = attrs.first().map_or(0, AttributeVector::len);
    let data = attrs.iter().flat_map(|a| a.bits().iter().map(|&b| b as f32)).collect();
    Tensor::matrix(attrs.len(), n, data).expect("attribute rows have equal length")
}

/// Ground-truth data model: domain `a` is `N(mu0 + sum_i a_i v_i, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    base_mean: Vec<f64>,
    directions: Vec<Vec<f64>>,
    sigma: f64,
    seed: u64,
}

const ORTHO_TOL: f64 = 1e-9;

impl DomainSpec {
    /// Assembles a spec from explicit parts; directions must be orthonormal.
    pub fn from_parts(base_mean: Vec<f64>, directions: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let d = base_mean.len();
        if directions.is_empty() {
            return Err(Error::invalid("need at least one attribute direction"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise scale must be >= 0, got {sigma}")));
        }
        for (i, v) in directions.iter().enumerate() {
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "direction {i} has length {}, expected {d}",
                    v.len()
                )));
            }
            for (j, w) in directions.iter().enumerate().take(i + 1) {
                let dot = dot(v, w);
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return Err(Error::invalid(format!(
                        "directions {i},{j} not orthonormal: dot = {dot}"
                    )));
                }
            }
        }
        Ok(Self {
            base_mean,
            directions,
            sigma,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.directions.len()
    }

    pub fn d(&self) -> usize {
        self.base_mean.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_mean(&self) -> &[f64] {
        &self.base_mean
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn domain_count(&self) -> usize {
        1 << self.n()
    }

    fn check_attrs(&self, a: &AttributeVector) -> Result<()> {
        if a.len() != self.n() {
            return Err(Error::invalid(format!(
                "attribute vector has {} bits, spec has {}",
                a.len(),
                self.n()
            )));
        }
        Ok(())
    }

    /// `mu(a) = mu0 + sum_i a_i v_i`.
    pub fn domain_mean(&self, a: &AttributeVector) -> Result<Vec<f64>> {
        self.check_attrs(a)?;
        let mut mu = self.base_mean.clone();
        for (v, _) in self.directions.iter().zip(a.bits()).filter(|(_, &b)| b == 1) {
            for (m, &vi) in mu.iter_mut().zip(v) {
                *m += vi;
            }
        }
        Ok(mu)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded spec with Gram–Schmidt orthonormal directions and a standard
/// normal base mean.
pub fn make_domain_spec(n: usize, d: usize, sigma: f64, seed: u64) -> Result<DomainSpec> {
    if n < 1 {
        return Err(Error::invalid("need n >= 1 attributes"));
    }
    if d < n {
        return Err(Error::invalid(format!(
            "feature dimension d={d} must be >= attribute count n={n}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise scale must be > 0, got {sigma}")));
    }
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Spec, 0);
    let base_mean: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n);
    while directions.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of modified Gram–Schmidt for orthogonality to 1e-15.
        for _ in 0..2 {
            for u in &directions {
                let p = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= p * ui;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        directions.push(v);
    }
    let mut spec = DomainSpec::from_parts(base_mean, directions, sigma)?;
    spec.seed = seed;
    Ok(spec)
}

/// Real samples `x^s` with their attributes `a^s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor<f32>,
    pub attributes: Vec<AttributeVector>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attribute_tensor(&self) -> Tensor<f32> {
        attribute_tensor(&self.attributes)
    }

    /// Writes `d` feature columns then `n` attribute columns, with a header.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let d = self.features.cols();
        let n = self.attributes.first().map_or(0, AttributeVector::len);
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (1..=d)
            .map(|i| format!("x{i}"))
            .chain((1..=n).map(|i| format!("a{i}")))
            .collect();
        out.write_record(&header)?;
        for (r, a) in self.attributes.iter().enumerate() {
            let record: Vec<String> = self
                .features
                .row(r)
                .iter()
                .map(|v| v.to_string())
                .chain(a.bits().iter().map(|b| b.to_string()))
                .collect();
            out.write_record(&record)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv(r: impl Read, d: usize, n: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut features = Vec::new();
        let mut attributes = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != d + n {
                return Err(Error::invalid(format!(
                    "csv row has {} columns, expected {}",
                    record.len(),
                    d + n
                )));
            }
            for field in record.iter().take(d) {
                let v: f32 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad feature value {field:?}")))?;
                features.push(v);
            }
            let bits = record
                .iter()
                .skip(d)
                .map(|f| {
                    f.trim()
                        .parse::<u8>()
                        .map_err(|_| Error::invalid(format!("bad attribute bit {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            attributes.push(AttributeVector::new(bits)?);
        }
        Ok(Batch {
            features: Tensor::matrix(attributes.len(), d, features)?,
            attributes,
        })
    }
}

/// Draws `x ~ N(mu(a), sigma^2 I)` for a uniformly drawn `a`, per row.
pub fn sample_batch(spec: &DomainSpec, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut features = Vec::with_capacity(batch_size * spec.d());
    let mut attributes = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let a = AttributeVector::random(rng, spec.n());
        features.extend(sample_domain(spec, &a, rng)?.into_iter().map(|v| v as f32));
        attributes.push(a);
    }
    Ok(Batch {
        features: Tensor::matrix(batch_size, spec.d(), features)?,
        attributes,
    })
}

/// One noisy sample from domain `a`.
pub fn sample_domain(spec: &DomainSpec, a: &AttributeVector, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut x = spec.domain_mean(a)?;
    for xi in x.iter_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *xi += spec.sigma * eps;
    }
    Ok(x)
}

/// Ground-truth translation `x + mu(a_t) - mu(a_s)`; the residual
/// `x - mu(a_s)` is carried over unchanged.
pub fn oracle_translate(
    spec: &DomainSpec,
    x: &[f64],
    source: &AttributeVector,
    target: &AttributeVector,
) -> Result<Vec<f64>> {
    if x.len() != spec.d() {
        return Err(Error::invalid(format!(
            "feature vector has length {}, spec has d={}",
            x.len(),
            spec.d()
        )));
    }
    let mu_s = spec.domain_mean(source)?;
    let mu_t = spec.domain_mean(target)?;
    Ok(x.iter()
        .zip(mu_s.iter().zip(&mu_t))
        .map(|(&xi, (&s, &t))| xi + t - s)
        .collect())
}

/// Bit `i` is set iff `v_i · (x - mu0) > 0.5`; ties go to 0.
pub fn bayes_classify(spec: &DomainSpec, x: &[f64]) -> AttributeVector {
    let bits = spec
        .directions
        .iter()
        .map(|v| {
            let proj: f64 = v
                .iter()
                .zip(x.iter().zip(&spec.base_mean))
                .map(|(vi, (xi, mi))| vi * (xi - mi))
                .sum();
            (proj > 0.5) as u8
        })
        .collect();
    AttributeVector(bits)
}

pub fn draw_target_attributes(rng: &mut impl Rng, n: usize) -> AttributeVector {
    AttributeVector::random(rng, n)
}

/// Attribute sequence for one `hops`-step rollout: `hops - 1` uniform
/// intermediates followed by `target`.
pub fn draw_intermediate_attributes(
    rng: &mut impl Rng,
    n: usize,
    hops: usize,
    target: &AttributeVector,
) -> Result<Vec<AttributeVector>> {
    if hops < 1 {
        return Err(Error::invalid("hop count must be >= 1"));
    }
    if target.len() != n {
        return Err(Error::invalid("target attribute length mismatch"));
    }
    let mut seq: Vec<AttributeVector> = (0..hops - 1).map(|_| AttributeVector::random(rng, n)).collect();
    seq.push(target.clone());
    Ok(seq)
}
