//! Conditional generator, conditional discriminator and the frozen
//! hypersphere embedding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, Graph, Scalar, Tensor, Var};
use crate::rng::{stream_rng, Stream};
use crate::synthdata::{sample_batch, DomainSpec};

/// Dense layer `y = x W + b`, `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar = f32> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// He-normal hidden layers; the output layer uses `N(0, gain^2 / fan_in)`.
    /// Biases start at zero.
    pub fn new(widths: &[usize], output_gain: f64, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = if i == last {
                    output_gain / (fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").weight.cols()
    }

    /// Weight and bias of each layer, in order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundMlp> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp { vars })
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.push(format!("{prefix}.{i}.weight"), l.weight.cast());
            ckpt.push(format!("{prefix}.{i}.bias"), l.bias.cast());
        }
    }

    fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, slot) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.{i}.{suffix}");
                let t = ckpt.require(&name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.cast();
            }
        }
        Ok(())
    }
}

/// An [`Mlp`]'s parameters placed in a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n_layers = self.vars.len() / 2;
        let mut h = x;
        for (i, pair) in self.vars.chunks(2).enumerate() {
            h = g.matmul(h, pair[0])?;
            h = g.add_row(h, pair[1])?;
            if i + 1 < n_layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Layer widths and sphere radius for the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub embedding_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub radius: f64,
    /// Output-layer init gain of the generator's residual head.
    pub generator_output_gain: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator_hidden: vec![64, 64, 64],
            discriminator_hidden: vec![64, 64, 64],
            embedding_hidden: vec![32, 32],
            embedding_dim: 8,
            radius: 1.0,
            generator_output_gain: 1.0,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

fn check_width<T: Scalar>(op: &'static str, g: &Graph<T>, v: Var, want: usize) -> Result<()> {
    let t = g.value(v);
    if t.cols() != want {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![t.rows(), want],
        });
    }
    Ok(())
}

/// `G(x, a) = x + head([x, a])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub net: Mlp<T>,
    d: usize,
    n: usize,
}

/// Parameters of a [`Generator`] placed in a graph.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub net: BoundMlp,
    d: usize,
    n: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn new(d: usize, n: usize, arch: &Architecture, rng: &mut impl Rng) -> Self {
        let net = Mlp::new(
            &widths(d + n, &arch.generator_hidden, d),
            arch.generator_output_gain,
            rng,
        );
        Self { net, d, n }
    }

    pub fn from_net(net: Mlp<T>, d: usize, n: usize) -> Result<Self> {
        if net.input_width() != d + n || net.output_width() != d {
            return Err(Error::invalid("generator widths must be d+n -> d"));
        }
        Ok(Self { net, d, n })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundGenerator> {
        Ok(BoundGenerator {
            net: self.net.bind(g, trainable)?,
            d: self.d,
            n: self.n,
        })
    }

    /// Graph-free forward.
    pub fn apply(&self, x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let (xv, av) = (g.constant(x.clone())?, g.constant(a.clone())?);
        let out = b.forward(&mut g, xv, av)?;
        Ok(g.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            net: self.net.cast(),
            d: self.d,
            n: self.n,
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        self.net.save_into(ckpt, prefix)
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.net.load_from(ckpt, prefix)
    }
}

impl BoundGenerator {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
        check_width("generator x", g, x, self.d)?;
        check_width("generator a", g, a, self.n)?;
        let input = g.concat_cols(x, a)?;
        let delta = self.net.forward(g, input)?;
        g.add(x, delta)
    }
}

/// Conditional discriminator returning the raw logit `D~(x, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub net: Mlp<T>,
    d: usize,
    n: usize,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    pub net: BoundMlp,
    d: usize,
    n: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(d: usize, n: usize, arch: &Architecture, rng: &mut impl Rng) -> Self {
        let net = Mlp::new(&widths(d + n, &arch.discriminator_hidden, 1), 1.0, rng);
        Self { net, d, n }
    }

    pub fn from_net(net: Mlp<T>, d: usize, n: usize) -> Result<Self> {
        if net.input_width() != d + n || net.output_width() != 1 {
            return Err(Error::invalid("discriminator widths must be d+n -> 1"));
        }
        Ok(Self { net, d, n })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundDiscriminator> {
        Ok(BoundDiscriminator {
            net: self.net.bind(g, trainable)?,
            d: self.d,
            n: self.n,
        })
    }

    /// Graph-free logits, one per row.
    pub fn logits(&self, x: &Tensor<T>, a: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let (xv, av) = (g.constant(x.clone())?, g.constant(a.clone())?);
        let out = b.forward(&mut g, xv, av)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            net: self.net.cast(),
            d: self.d,
            n: self.n,
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        self.net.save_into(ckpt, prefix)
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.net.load_from(ckpt, prefix)
    }
}

impl BoundDiscriminator {
    /// `[k, 1]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
        check_width("discriminator x", g, x, self.d)?;
        check_width("discriminator a", g, a, self.n)?;
        let input = g.concat_cols(x, a)?;
        self.net.forward(g, input)
    }
}

/// Embedding `phi(x) = r z / |z|` plus the per-bit attribute head used to
/// pretrain it.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T: Scalar = f32> {
    pub trunk: Mlp<T>,
    pub head: Mlp<T>,
    radius: f64,
}

#[derive(Clone, Debug)]
pub struct BoundEmbedding {
    pub trunk: BoundMlp,
    pub head: BoundMlp,
    radius: f64,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(d: usize, n: usize, arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        if arch.radius.is_nan() || arch.radius <= 0.0 {
            return Err(Error::invalid("embedding radius must be > 0"));
        }
        let trunk = Mlp::new(&widths(d, &arch.embedding_hidden, arch.embedding_dim), 1.0, rng);
        let head = Mlp::new(&[arch.embedding_dim, n], 1.0, rng);
        Ok(Self {
            trunk,
            head,
            radius: arch.radius,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn input_width(&self) -> usize {
        self.trunk.input_width()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundEmbedding> {
        Ok(BoundEmbedding {
            trunk: self.trunk.bind(g, trainable)?,
            head: self.head.bind(g, trainable)?,
            radius: self.radius,
        })
    }

    /// Points on the radius-`r` sphere, one per row of `x`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = b.embed(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Per-bit attribute logits of the pretraining head.
    pub fn attribute_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = b.attribute_logits(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut t = self.trunk.tensors();
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut t = self.trunk.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        self.trunk.save_into(ckpt, &format!("{prefix}.trunk"));
        self.head.save_into(ckpt, &format!("{prefix}.head"));
        ckpt.push(format!("{prefix}.radius"), Tensor::scalar(self.radius as f32));
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.trunk.load_from(ckpt, &format!("{prefix}.trunk"))?;
        self.head.load_from(ckpt, &format!("{prefix}.head"))?;
        let r = ckpt.require(&format!("{prefix}.radius"))?.item().unwrap_or(0.0);
        if r as f64 != self.radius as f32 as f64 {
            return Err(Error::Checkpoint(format!(
                "embedding radius {r} does not match {}",
                self.radius
            )));
        }
        Ok(())
    }
}

impl BoundEmbedding {
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.trunk.forward(g, x)?;
        g.sphere_project(z, T::lit(self.radius))
    }

    pub fn attribute_logits<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let e = self.embed(g, x)?;
        self.head.forward(g, e)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.trunk.vars().iter().chain(self.head.vars()).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Trains the embedding as a per-bit attribute classifier on real samples
/// (binary cross-entropy per bit); the sphere projection just before the
/// head is the embedding.
pub fn pretrain_embedding(spec: &DomainSpec, arch: &Architecture, config: &PretrainConfig) -> Result<Embedding<f32>> {
    let mut init_rng = stream_rng(config.seed, Stream::InitEmbedding, 0);
    let mut emb = Embedding::<f32>::new(spec.d(), spec.n(), arch, &mut init_rng)?;
    let adam_cfg = AdamConfig {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut adam = AdamState::new(adam_cfg, emb.tensors());
    let diverged = |step: usize, reason: String| Error::Divergence {
        step: step as u64,
        reason: format!("embedding pretraining: {reason}"),
        last_checkpoint: None,
    };

    for step in 0..config.steps {
        let mut rng = stream_rng(config.seed, Stream::Pretrain, step as u64);
        let batch = sample_batch(spec, config.batch_size, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let bound = emb.bind(&mut g, true)?;
        let x = g.constant(batch.features.clone())?;
        let y = g.constant(batch.attribute_tensor())?;
        let logits = bound
            .attribute_logits(&mut g, x)
            .map_err(|e| diverged(step, e.to_string()))?;
        // BCE with logits: softplus(l) - y l
        let sp = g.softplus(logits)?;
        let yl = g.mul(y, logits)?;
        let per = g.sub(sp, yl)?;
        let loss = g.mean(per)?;
        let value = g.scalar(loss).unwrap_or(f32::NAN);
        if !value.is_finite() {
            return Err(diverged(step, format!("loss {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads = grads.collect(&g, &bound.vars());
        adam.step(&mut emb.tensors_mut(), &grads)?;
        if step % 500 == 0 {
            log::debug!("embedding pretrain step {step}: loss {value:.4}");
        }
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_domain_spec;

    fn rng() -> crate::rng::Rng {
        stream_rng(11, Stream::Check, 0)
    }

    fn inputs(k: usize, d: usize, n: usize) -> (Tensor<f32>, Tensor<f32>) {
        let mut r = rng();
        let x = Tensor::matrix(k, d, (0..k * d).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap();
        let a = Tensor::matrix(k, n, (0..k * n).map(|i| (i % 2) as f32).collect()).unwrap();
        (x, a)
    }

    #[test]
    fn generator_output_shape() {
        let g = Generator::<f32>::new(8, 3, &Architecture::default(), &mut rng());
        let (x, a) = inputs(5, 8, 3);
        assert_eq!(g.apply(&x, &a).unwrap().shape(), &[5, 8]);
    }

    #[test]
    fn generator_rejects_wrong_width() {
        let g = Generator::<f32>::new(8, 3, &Architecture::default(), &mut rng());
        let (x, a) = inputs(5, 8, 2);
        assert!(matches!(g.apply(&x, &a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_final_layer_gives_bias_offset() {
        let mut g = Generator::<f32>::new(4, 2, &Architecture::default(), &mut rng());
        let last = g.net.layers_mut().last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let (x, a) = inputs(3, 4, 2);
        let y = g.apply(&x, &a).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                // residual head contributes exactly the bias
                assert!((y.get(r, c) - x.get(r, c) - [0.5, -1.0, 2.0, 0.0][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forwards_are_deterministic() {
        let arch = Architecture::default();
        let g1 = Generator::<f32>::new(8, 3, &arch, &mut rng());
        let g2 = Generator::<f32>::new(8, 3, &arch, &mut rng());
        let (x, a) = inputs(4, 8, 3);
        assert_eq!(g1.apply(&x, &a).unwrap(), g2.apply(&x, &a).unwrap());
    }

    #[test]
    fn zero_discriminator_logit_is_zero() {
        let mut d = Discriminator::<f32>::new(8, 3, &Architecture::default(), &mut rng());
        for t in d.net.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let (x, a) = inputs(6, 8, 3);
        let logits = d.logits(&x, &a).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
        assert_eq!(crate::numerics::sigmoid(logits[0]), 0.5);
    }

    #[test]
    fn discriminator_one_logit_per_sample() {
        let d = Discriminator::<f32>::new(8, 3, &Architecture::default(), &mut rng());
        let (x, a) = inputs(7, 8, 3);
        let logits = d.logits(&x, &a).unwrap();
        assert_eq!(logits.len(), 7);
        assert!(logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn embeddings_lie_on_sphere() {
        let arch = Architecture {
            radius: 1.5,
            ..Architecture::default()
        };
        let e = Embedding::<f32>::new(8, 3, &arch, &mut rng()).unwrap();
        let (x, _) = inputs(200, 8, 3);
        let out = e.embed(&x).unwrap();
        for r in 0..200 {
            let norm: f32 = out.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.5).abs() < 1.5e-5, "norm {norm}");
        }
        for i in 0..20 {
            let dist: f32 = out
                .row(i)
                .iter()
                .zip(out.row(i + 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
                .sqrt();
            assert!(dist <= 3.0 + 1e-5);
        }
    }

    #[test]
    fn antipodal_points_are_diameter_apart() {
        let mut g = Graph::<f64>::new();
        let z = g
            .constant(Tensor::matrix(2, 3, vec![0.3, -0.4, 1.2, -0.3, 0.4, -1.2]).unwrap())
            .unwrap();
        let p = g.sphere_project(z, 1.0).unwrap();
        let v = g.value(p);
        let dist: f64 = v
            .row(0)
            .iter()
            .zip(v.row(1))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::default();
        let g = Generator::<f32>::new(8, 3, &arch, &mut rng());
        let mut ckpt = Checkpoint::new();
        g.save_into(&mut ckpt, "generator");
        let mut other = Generator::<f32>::new(8, 3, &arch, &mut stream_rng(99, Stream::Check, 0));
        assert_ne!(other, g);
        other.load_from(&ckpt, "generator").unwrap();
        assert_eq!(other, g);
        let mut wrong = Generator::<f32>::new(4, 3, &arch, &mut rng());
        assert!(wrong.load_from(&ckpt, "generator").is_err());
    }

    #[test]
    fn pretrained_embedding_separates_domains() {
        let spec = make_domain_spec(3, 8, 0.1, 4).unwrap();
        let arch = Architecture::default();
        let emb = pretrain_embedding(
            &spec,
            &arch,
            &PretrainConfig {
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let mut r = stream_rng(4, Stream::EvalReal, 0);
        let held_out = sample_batch(&spec, 2000, &mut r).unwrap();
        let logits = emb.attribute_logits(&held_out.features).unwrap();
        let mut correct = [0usize; 3];
        for (i, a) in held_out.attributes.iter().enumerate() {
            for (bit, c) in correct.iter_mut().enumerate() {
                if (logits.get(i, bit) > 0.0) == a.bit(bit) {
                    *c += 1;
                }
            }
        }
        for c in correct {
            assert!(c as f64 / 2000.0 > 0.95, "per-bit accuracy {}", c as f64 / 2000.0);
        }

        let e = emb.embed(&held_out.features).unwrap();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..300 {
            for j in (i + 1)..300 {
                let dist: f32 = e
                    .row(i)
                    .iter()
                    .zip(e.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f32>()
                    .sqrt();
                if held_out.attributes[i] == held_out.attributes[j] {
                    same += dist;
                    ns += 1;
                } else {
                    diff += dist;
                    nd += 1;
                }
            }
        }
        assert!(same / (ns as f32) < diff / (nd as f32));
    }
}
