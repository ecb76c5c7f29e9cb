//! Glorot initialization, Adam and the ℓ2 weight penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Uniform samples on `(-L, L)` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::shape("glorot fans must be ≥ 1"));
    }
    let limit = glorot_limit(fan_in, fan_out);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-limit..limit);
            if v != -limit {
                break T::of(v);
            }
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    /// One Adam update at step `t` (1-based, already incremented).
    pub fn update(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, t: u64, cfg: &AdamConfig) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::shape(format!(
                "adam: parameter {:?}, gradient {:?}, moments {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(t as i32));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t as i32));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let one = T::one();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.data_mut())
            .zip(self.v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam state over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Adam {
            config,
            step: 0,
            moments: shapes.into_iter().map(Moments::zeros).collect(),
        }
    }

    /// Applies one step to every parameter. A non-finite gradient aborts
    /// before any parameter is touched, naming the offending tensor.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} parameters and {} gradients",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        self.step += 1;
        for ((p, g), mo) in params.into_iter().zip(grads).zip(&mut self.moments) {
            mo.update(p, g, self.step, &self.config)?;
        }
        Ok(())
    }
}

/// Returns `λ·Σw²` over `weights` and adds `2λ·w` into the matching gradients.
pub fn l2_penalty<T: Scalar>(weights: &[&Tensor<T>], grads: &mut [&mut Tensor<T>], lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("λ must be ≥ 0, got {lambda}")));
    }
    if weights.len() != grads.len() {
        return Err(Error::shape("l2 penalty: weights and gradients differ in count"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut loss = 0.0;
    let two_lambda = T::of(2.0 * lambda);
    for (w, g) in weights.iter().zip(grads.iter_mut()) {
        if w.shape() != g.shape() {
            return Err(Error::shape(format!(
                "l2 penalty: weight {:?} vs gradient {:?}",
                w.shape(),
                g.shape()
            )));
        }
        loss += w.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
            *gv += two_lambda * wv;
        }
    }
    Ok(lambda * loss)
}

/// Stops when the loss improves by less than `tolerance` (relative) for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct ConvergenceMonitor {
    pub tolerance: f64,
    pub patience: usize,
    best: Option<f64>,
    stalled: usize,
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        Self::new(1e-4, 10)
    }
}

impl ConvergenceMonitor {
    pub fn new(tolerance: f64, patience: usize) -> Self {
        ConvergenceMonitor {
            tolerance,
            patience,
            best: None,
            stalled: 0,
        }
    }

    /// Records an epoch loss; returns `true` once converged.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            None => self.best = Some(loss),
            Some(best) => {
                let improvement = (best - loss) / best.abs().max(f64::MIN_POSITIVE);
                if improvement < self.tolerance {
                    self.stalled += 1;
                } else {
                    self.stalled = 0;
                }
                if loss < best {
                    self.best = Some(loss);
                }
            }
        }
        self.stalled >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        assert_eq!(glorot_limit(2, 4), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = glorot_uniform(&[1000], 2, 4, &mut rng).unwrap();
        assert!(w.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn glorot_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Tensor<f64> = glorot_uniform(&[100_000], 30, 70, &mut rng).unwrap();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let l = glorot_limit(30, 70);
        let expected = l * l / 3.0;
        assert!((var - expected).abs() / expected < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn glorot_is_deterministic() {
        let a: Tensor<f32> = glorot_uniform(&[4, 5], 5, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor<f32> = glorot_uniform(&[4, 5], 5, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [&[3usize][..]]);
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        for _ in 0..50 {
            adam.step(vec![&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [&[1usize][..]]);
        let mut p = scalar(0.0);
        adam.step(vec![&mut p], &[scalar(1.0)]).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10, "{}", p.data()[0]);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let cfg = AdamConfig::default();
        let g = 0.3;
        let mut adam = Adam::<f64>::new(cfg, [&[1usize][..]]);
        let mut p = scalar(0.7);
        adam.step(vec![&mut p], &[scalar(g)]).unwrap();
        adam.step(vec![&mut p], &[scalar(g)]).unwrap();

        let (b1, b2) = (0.9f64, 0.999f64);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.7);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= 0.001 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [&[1usize][..], &[1usize][..]]);
        let mut a = scalar(1.0);
        let mut b = scalar(1.0);
        let err = adam
            .step(vec![&mut a, &mut b], &[scalar(0.1), scalar(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("parameter 1"));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn early_steps_are_bounded() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AdamConfig::default();
        let mut adam = Adam::<f64>::new(cfg, [&[64usize][..]]);
        let mut p = Tensor::<f64>::zeros(&[64]);
        for _ in 0..10 {
            let g = Tensor::new(&[64], (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let before = p.clone();
            adam.step(vec![&mut p], &[g]).unwrap();
            for (a, b) in p.data().iter().zip(before.data()) {
                assert!((a - b).abs() <= 2.0 * cfg.lr);
            }
        }
    }

    #[test]
    fn l2_examples() {
        let w = scalar(3.0);
        let mut g = scalar(0.0);
        let loss = l2_penalty(&[&w], &mut [&mut g], 0.0001).unwrap();
        assert!((loss - 0.0009).abs() < 1e-15);
        assert!((g.data()[0] - 0.0006).abs() < 1e-15);

        let mut g = scalar(0.0);
        assert_eq!(l2_penalty(&[&w], &mut [&mut g], 0.0).unwrap(), 0.0);
        assert_eq!(g.data()[0], 0.0);

        let m = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.0, 4.0, 0.5, -1.0]).unwrap();
        let flat = m.clone().reshape(&[6]).unwrap();
        let la = l2_penalty(&[&m], &mut [&mut Tensor::zeros(&[2, 3])], 0.01).unwrap();
        let lb = l2_penalty(&[&flat], &mut [&mut Tensor::zeros(&[6])], 0.01).unwrap();
        assert_eq!(la, lb);

        let zero = Tensor::<f64>::zeros(&[4]);
        assert_eq!(l2_penalty(&[&zero], &mut [&mut Tensor::zeros(&[4])], 0.5).unwrap(), 0.0);
        assert!(l2_penalty(&[&w], &mut [&mut scalar(0.0)], -1.0).is_err());
    }

    #[test]
    fn convergence_after_patience() {
        let mut mon = ConvergenceMonitor::new(1e-4, 3);
        assert!(!mon.observe(1.0));
        assert!(!mon.observe(0.5));
        assert!(!mon.observe(0.49999));
        assert!(!mon.observe(0.49999));
        assert!(mon.observe(0.49999));
    }
}
