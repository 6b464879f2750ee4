//! Multi-hop sample training.
//!
//! An `N`-hop trace chains the generator through `N` attribute vectors,
//! `x^{t_i} = G(x^{t_{i-1}}, a^{t_i})` with `x^{t_0} = x^s`. The generator
//! loss sums the adversarial term over every hop of every trace length
//! `1..=N`, each sample scaled by its (detached) importance weight.

use crate::error::{Error, Result};
use crate::models::{BoundDiscriminator, BoundGenerator};
use crate::numerics::{Graph, Scalar, Var};

/// One rollout of `N` hops for a whole batch.
#[derive(Clone, Debug)]
pub struct HopTrace {
    pub source: Var,
    /// `a^{t_1} .. a^{t_N}`, each `[k, n]`.
    pub attrs: Vec<Var>,
    /// `x^{t_1} .. x^{t_N}`, each `[k, d]`.
    pub images: Vec<Var>,
}

impl HopTrace {
    pub fn hops(&self) -> usize {
        self.images.len()
    }

    pub fn last(&self) -> Var {
        *self.images.last().expect("non-empty trace")
    }
}

pub fn rollout<T: Scalar>(g: &mut Graph<T>, gen: &BoundGenerator, source: Var, attrs: &[Var]) -> Result<HopTrace> {
    if attrs.is_empty() {
        return Err(Error::invalid("rollout needs at least one attribute vector"));
    }
    let mut images = Vec::with_capacity(attrs.len());
    let mut x = source;
    for &a in attrs {
        x = gen.forward(g, x, a)?;
        images.push(x);
    }
    Ok(HopTrace {
        source,
        attrs: attrs.to_vec(),
        images,
    })
}

/// Form of the per-hop generator term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorObjective {
    /// `log(1 - D) = -softplus(D~)`, minimized by G.
    #[default]
    Minimax,
    /// `-log D = softplus(-D~)`, minimized by G.
    NonSaturating,
}

#[derive(Clone, Debug)]
pub struct MstLoss {
    pub loss: Var,
    /// Mean logit at hop position `i` over all traces that reach it.
    pub hop_mean_logits: Vec<f64>,
}

/// `sum_n mean_k[w_k * sum_{i<=n} term(D~(x^{t_i}, a^{t_i}))]`.
///
/// `traces[n - 1]` must have exactly `n` hops. `weights` is a `[k, 1]` node;
/// it is detached here regardless of how it was built.
pub fn mst_generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    disc: &BoundDiscriminator,
    traces: &[HopTrace],
    weights: Var,
    objective: GeneratorObjective,
) -> Result<MstLoss> {
    if traces.is_empty() {
        return Err(Error::invalid("no hop sets supplied"));
    }
    for (i, t) in traces.iter().enumerate() {
        if t.hops() != i + 1 || t.attrs.len() != i + 1 {
            return Err(Error::invalid(format!(
                "hop set {} has {} hops; expected one trace per hop count 1..={}",
                i + 1,
                t.hops(),
                traces.len()
            )));
        }
    }
    let k = g.value(traces[0].images[0]).rows();
    let ws = g.value(weights).shape().to_vec();
    if ws != [k, 1] {
        return Err(Error::ShapeMismatch {
            op: "mst weights",
            left: ws,
            right: vec![k, 1],
        });
    }
    let weights = g.detach(weights)?;

    let mut hop_sums = vec![0.0; traces.len()];
    let mut hop_counts = vec![0usize; traces.len()];
    let mut total: Option<Var> = None;
    for trace in traces {
        let mut per_sample: Option<Var> = None;
        for (i, (&x, &a)) in trace.images.iter().zip(&trace.attrs).enumerate() {
            let logit = disc.forward(g, x, a)?;
            let vals = g.value(logit).data();
            hop_sums[i] += vals.iter().map(|v| v.as_f64()).sum::<f64>() / vals.len() as f64;
            hop_counts[i] += 1;
            let term = match objective {
                GeneratorObjective::Minimax => {
                    let sp = g.softplus(logit)?;
                    g.neg(sp)?
                }
                GeneratorObjective::NonSaturating => {
                    let neg = g.neg(logit)?;
                    g.softplus(neg)?
                }
            };
            per_sample = Some(match per_sample {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let weighted = g.mul(per_sample.expect("non-empty trace"), weights)?;
        let mean = g.mean(weighted)?;
        total = Some(match total {
            None => mean,
            Some(acc) => g.add(acc, mean)?,
        });
    }
    Ok(MstLoss {
        loss: total.expect("non-empty traces"),
        hop_mean_logits: hop_sums.iter().zip(&hop_counts).map(|(s, &c)| s / c as f64).collect(),
    })
}

/// `mean_k log D(x^s, a^s) = mean_k -softplus(-D~)`.
pub fn data_loss<T: Scalar>(g: &mut Graph<T>, disc: &BoundDiscriminator, x: Var, a: Var) -> Result<Var> {
    let logit = disc.forward(g, x, a)?;
    let neg = g.neg(logit)?;
    let sp = g.softplus(neg)?;
    let term = g.neg(sp)?;
    g.mean(term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Discriminator, Generator, Mlp};
    use crate::numerics::{softplus, Tensor};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    const D: usize = 4;
    const N: usize = 2;

    fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    fn bits(rng: &mut impl Rng, rows: usize) -> Tensor<f64> {
        Tensor::matrix(rows, N, (0..rows * N).map(|_| rng.random_range(0..2) as f64).collect()).unwrap()
    }

    fn nets(seed: u64) -> (Generator<f64>, Discriminator<f64>) {
        let arch = Architecture::default();
        let mut rng = stream_rng(seed, Stream::Check, 0);
        (
            Generator::new(D, N, &arch, &mut rng),
            Discriminator::new(D, N, &arch, &mut rng),
        )
    }

    /// Discriminator whose logit is the first feature of `x`.
    fn first_feature_disc() -> Discriminator<f64> {
        let mut net = Mlp::<f64>::new(&[D + N, 1], 1.0, &mut stream_rng(0, Stream::Check, 0));
        let layer = &mut net.layers_mut()[0];
        layer.weight = Tensor::zeros(&[D + N, 1]);
        layer.weight.data_mut()[0] = 1.0;
        layer.bias = Tensor::zeros(&[1, 1]);
        Discriminator::from_net(net, D, N).unwrap()
    }

    fn point(first: f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[1, D]);
        t.data_mut()[0] = first;
        t
    }

    #[test]
    fn one_hop_rollout_is_generator_forward() {
        let (gen, _) = nets(1);
        let mut rng = stream_rng(1, Stream::Check, 1);
        let (x, a) = (randn(&mut rng, 5, D), bits(&mut rng, 5));
        let mut g = Graph::new();
        let bg = gen.bind(&mut g, true).unwrap();
        let (xv, av) = (g.constant(x.clone()).unwrap(), g.constant(a.clone()).unwrap());
        let trace = rollout(&mut g, &bg, xv, &[av]).unwrap();
        assert_eq!(trace.hops(), 1);
        assert_eq!(g.value(trace.last()), &gen.apply(&x, &a).unwrap());
    }

    #[test]
    fn two_hop_rollout_composes() {
        let (gen, _) = nets(2);
        let mut rng = stream_rng(2, Stream::Check, 1);
        let (x, a1, a2) = (randn(&mut rng, 3, D), bits(&mut rng, 3), bits(&mut rng, 3));
        let mut g = Graph::new();
        let bg = gen.bind(&mut g, true).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let attrs = [g.constant(a1.clone()).unwrap(), g.constant(a2.clone()).unwrap()];
        let trace = rollout(&mut g, &bg, xv, &attrs).unwrap();
        assert_eq!((trace.images.len(), trace.attrs.len()), (2, 2));
        let direct = gen.apply(&gen.apply(&x, &a1).unwrap(), &a2).unwrap();
        assert_eq!(g.value(trace.last()), &direct);
    }

    #[test]
    fn empty_rollout_rejected() {
        let (gen, _) = nets(3);
        let mut g = Graph::<f64>::new();
        let bg = gen.bind(&mut g, true).unwrap();
        let x = g.constant(Tensor::zeros(&[2, D])).unwrap();
        assert!(rollout(&mut g, &bg, x, &[]).is_err());
    }

    #[test]
    fn hand_evaluated_two_hop_loss() {
        let disc = first_feature_disc();
        let mut g = Graph::<f64>::new();
        let bd = disc.bind(&mut g, false).unwrap();
        let a = g.constant(Tensor::zeros(&[1, N])).unwrap();
        let src = g.constant(point(0.0)).unwrap();
        let one = HopTrace {
            source: src,
            attrs: vec![a],
            images: vec![g.constant(point(-1.0)).unwrap()],
        };
        let two = HopTrace {
            source: src,
            attrs: vec![a, a],
            images: vec![g.constant(point(0.0)).unwrap(), g.constant(point(1.0)).unwrap()],
        };
        let w = g.constant(Tensor::filled(&[1, 1], 1.0)).unwrap();
        let out = mst_generator_loss(&mut g, &bd, &[one, two], w, GeneratorObjective::Minimax).unwrap();
        let expected = -(0.313_261_687_518_222_8 + std::f64::consts::LN_2 + 1.313_261_687_518_222_8);
        assert!((g.scalar(out.loss).unwrap() - expected).abs() < 1e-12);
        assert!((softplus(-1.0f64) - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert_eq!(out.hop_mean_logits, vec![-0.5, 1.0]);
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let (gen, disc) = nets(4);
        let mut rng = stream_rng(4, Stream::Check, 1);
        let (x, a1, a2) = (randn(&mut rng, 6, D), bits(&mut rng, 6), bits(&mut rng, 6));
        let w = Tensor::matrix(6, 1, (0..6).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let value = |scale: f64| {
            let mut g = Graph::new();
            let (bg, bd) = (gen.bind(&mut g, true).unwrap(), disc.bind(&mut g, false).unwrap());
            let xv = g.constant(x.clone()).unwrap();
            let (av1, av2) = (g.constant(a1.clone()).unwrap(), g.constant(a2.clone()).unwrap());
            let t1 = rollout(&mut g, &bg, xv, &[av2]).unwrap();
            let t2 = rollout(&mut g, &bg, xv, &[av1, av2]).unwrap();
            let wv = g.constant(w.map(|v| v * scale)).unwrap();
            let out = mst_generator_loss(&mut g, &bd, &[t1, t2], wv, GeneratorObjective::Minimax).unwrap();
            g.scalar(out.loss).unwrap()
        };
        assert!((value(2.0) - 2.0 * value(1.0)).abs() < 1e-12);
    }

    #[test]
    fn missing_hop_set_and_bad_weights_rejected() {
        let (gen, disc) = nets(5);
        let mut g = Graph::<f64>::new();
        let (bg, bd) = (gen.bind(&mut g, true).unwrap(), disc.bind(&mut g, false).unwrap());
        let x = g.constant(Tensor::zeros(&[3, D])).unwrap();
        let a = g.constant(Tensor::zeros(&[3, N])).unwrap();
        let t2 = rollout(&mut g, &bg, x, &[a, a]).unwrap();
        let w = g.constant(Tensor::filled(&[3, 1], 1.0)).unwrap();
        assert!(mst_generator_loss(&mut g, &bd, std::slice::from_ref(&t2), w, GeneratorObjective::Minimax).is_err());
        let t1 = rollout(&mut g, &bg, x, &[a]).unwrap();
        let bad = g.constant(Tensor::filled(&[2, 1], 1.0)).unwrap();
        assert!(mst_generator_loss(&mut g, &bd, &[t1, t2], bad, GeneratorObjective::Minimax).is_err());
    }

    #[test]
    fn intermediate_hops_carry_gradient() {
        let (gen, disc) = nets(6);
        let mut rng = stream_rng(6, Stream::Check, 1);
        let (x, a1, a2) = (randn(&mut rng, 8, D), bits(&mut rng, 8), bits(&mut rng, 8));
        let grads = |detach: bool| {
            let mut g = Graph::new();
            let (bg, bd) = (gen.bind(&mut g, true).unwrap(), disc.bind(&mut g, false).unwrap());
            let xv = g.constant(x.clone()).unwrap();
            let (av1, av2) = (g.constant(a1.clone()).unwrap(), g.constant(a2.clone()).unwrap());
            let t1 = rollout(&mut g, &bg, xv, &[av2]).unwrap();
            let mut t2 = rollout(&mut g, &bg, xv, &[av1]).unwrap();
            let mid = if detach {
                g.detach(t2.images[0]).unwrap()
            } else {
                t2.images[0]
            };
            let x2 = bg.forward(&mut g, mid, av2).unwrap();
            t2.attrs.push(av2);
            t2.images.push(x2);
            let w = g.constant(Tensor::filled(&[8, 1], 1.0)).unwrap();
            let out = mst_generator_loss(&mut g, &bd, &[t1, t2], w, GeneratorObjective::Minimax).unwrap();
            let mut gr = g.backward(out.loss).unwrap();
            gr.collect(&g, bg.net.vars())
        };
        let (full, cut) = (grads(false), grads(true));
        let diff: f64 = full
            .iter()
            .zip(&cut)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .sum();
        assert!(diff > 1e-8, "detaching the intermediate hop changed nothing");
        assert!(full.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn zero_discriminator_data_loss_is_log_half() {
        let (_, mut disc) = nets(7);
        for t in disc.net.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::<f64>::new();
        let bd = disc.bind(&mut g, true).unwrap();
        let x = g.constant(Tensor::filled(&[4, D], 0.3)).unwrap();
        let a = g.constant(Tensor::zeros(&[4, N])).unwrap();
        let l = data_loss(&mut g, &bd, x, a).unwrap();
        assert!((g.scalar(l).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn data_loss_vanishes_for_confident_discriminator() {
        let disc = first_feature_disc();
        let mut g = Graph::<f64>::new();
        let bd = disc.bind(&mut g, false).unwrap();
        let x = g.constant(point(40.0)).unwrap();
        let a = g.constant(Tensor::zeros(&[1, N])).unwrap();
        let single = data_loss(&mut g, &bd, x, a).unwrap();
        assert!(g.scalar(single).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_batch_matches_single_sample() {
        let (_, disc) = nets(8);
        let row = [0.2, -0.4, 1.1, 0.0];
        let eval = |k: usize| {
            let mut g = Graph::<f64>::new();
            let bd = disc.bind(&mut g, false).unwrap();
            let x = g.constant(Tensor::from_rows(&vec![row; k]).unwrap()).unwrap();
            let a = g.constant(Tensor::from_rows(&vec![[1.0, 0.0]; k]).unwrap()).unwrap();
            let l = data_loss(&mut g, &bd, x, a).unwrap();
            g.scalar(l).unwrap()
        };
        assert!((eval(1) - eval(7)).abs() < 1e-14);
    }

    #[test]
    fn thousand_default_rollouts_stay_finite() {
        let arch = Architecture::default();
        let mut rng = stream_rng(9, Stream::Check, 0);
        let gen = Generator::<f32>::new(8, 3, &arch, &mut rng);
        for i in 0..1000 {
            let hops = 1 + i % 4;
            let mut g = Graph::<f32>::new();
            let bg = gen.bind(&mut g, false).unwrap();
            let x = randn(&mut rng, 4, 8).cast::<f32>();
            let xv = g.constant(x).unwrap();
            let attrs: Vec<Var> = (0..hops)
                .map(|_| {
                    let a = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(0..2) as f32).collect()).unwrap();
                    g.constant(a).unwrap()
                })
                .collect();
            let trace = rollout(&mut g, &bg, xv, &attrs).unwrap();
            assert!(trace.images.iter().all(|&v| g.value(v).is_finite()));
        }
    }
}
