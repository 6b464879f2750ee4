use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; parameters and moments are untouched.
    Skipped,
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// One bias-corrected Adam update, descending along `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("adam: non-finite gradient at step {}; update skipped", self.t + 1);
            return Ok(StepOutcome::Skipped);
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], &[one(4.0)]).unwrap();
        // m_hat = 4, sqrt(v_hat) = 4, so the step is lr * 4 / (4 + 1e-8)
        let delta = p.data()[0] - 1.0;
        assert!((delta + 1e-4 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15, "delta = {delta}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = one(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], &[one(0.0)]).unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = Tensor::<f32>::scalar(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let out = adam.step(&mut [&mut p], &[Tensor::scalar(f32::INFINITY)]).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(adam.t, 0);
        assert_eq!(p.data()[0], 0.7);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::<f32>::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap();
            let mut adam = AdamState::new(AdamConfig::default(), [&p]);
            for k in 0..50 {
                let g = p.map(|x| x * 2.0 + k as f32 * 0.01);
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            (p, adam)
        };
        let (p1, a1) = run();
        let (p2, a2) = run();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(a1, a2);
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let mut p = one(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        for g in [-3.0, 2.0, -0.5, 0.0, 7.0] {
            adam.step(&mut [&mut p], &[one(g)]).unwrap();
            assert!(adam.v[0].data()[0] >= 0.0);
        }
    }
}
