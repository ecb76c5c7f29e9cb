//! Central finite-difference checks of every layer's backward pass.
//!
//! Runs at 64-bit precision with step `1e-5`. The numeric side only ever
//! calls forward functions, so it is independent of the analytic gradients
//! it is compared with.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::activation::{relu, relu_grad};
use crate::nn::conv::{conv1d, conv1d_grad, conv2d, conv2d_grad};
use crate::nn::head::{class_head, class_head_grad, dense, dense_grad, softmax_xent};
use crate::nn::pool::{maxpool1d, maxpool2d, maxpool_grad};
use crate::nn::{LayerSpec, Model, ModelConfig, Padding, ParamRole, INPUT_LEN};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Layer kinds covered by [`check`].
pub const KINDS: [&str; 11] = [
    "conv1d",
    "conv2d",
    "maxpool1d",
    "maxpool2d",
    "relu",
    "inception_nucleus",
    "reshape_channels_first",
    "class_head",
    "dense",
    "softmax_xent",
    "end_to_end",
];

/// `∂f/∂x` by central differences.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * STEP));
    }
    Tensor::new(x.shape(), grad).expect("shape preserved")
}

/// Largest `|a - b| / max(|a|, |b|, 1e-6)` over paired elements.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared gradients differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub kind: &'static str,
    /// Gradient tensors compared, e.g. `dx`, `dw`, `db`.
    pub checked: usize,
    /// Scalar coordinates probed by whole-model checks (0 for single layers).
    pub coords: usize,
    /// Coordinates left out because their probes crossed a relu or pooling kink;
    /// more than a tenth of `coords` fails the check.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.skipped * 10 <= self.coords
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    max_rel_err(a.data(), b.data())
}

fn eval_model(model: &Model<f64>, x: &Tensor<f64>, target: usize) -> Result<(f64, Vec<usize>)> {
    let (logits, trace) = model.forward_trace(x)?;
    Ok((softmax_xent(logits.data(), target)?.loss, model.activation_pattern(&trace)))
}

/// Whole-model check; returns `(tensors, coordinates, worst error, skipped)`.
///
/// A probe that changes any relu sign or pooling winner straddles a kink,
/// where central differences say nothing; the step shrinks and, failing that,
/// the coordinate is counted and skipped.
fn model_check(config: ModelConfig, seed: u64) -> Result<(usize, usize, f64, usize)> {
    let mut model = Model::<f64>::from_config(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    // nonzero biases keep dead windows off the relu kink
    let roles: Vec<ParamRole> = model.param_info().iter().map(|p| p.role).collect();
    for (k, (p, role)) in model.params_mut().into_iter().zip(roles).enumerate() {
        if role == ParamRole::Bias {
            *p = random_tensor(p.shape(), seed.wrapping_mul(31) + k as u64).map(|v| 0.1 * v);
        }
    }
    let classes = model.num_classes();
    let x = random_tensor(&[INPUT_LEN], seed + 1);
    let target = (seed as usize) % classes;
    let (logits, trace) = model.forward_trace(&x)?;
    let pattern = model.activation_pattern(&trace);
    let r = softmax_xent(logits.data(), target)?;
    let grads = model.backward(&trace, &r.dlogits)?;
    let (mut worst, mut skipped) = (0.0f64, 0usize);
    let mut probe = model.clone();
    for (i, analytic) in grads.tensors.iter().enumerate() {
        for (j, &a) in analytic.data().iter().enumerate() {
            let orig = probe.params()[i].data()[j];
            let mut numeric = None;
            // shrink the step until both probes stay on the same linear piece
            for h in [STEP, STEP * 1e-2, STEP * 1e-4] {
                probe.params_mut()[i].data_mut()[j] = orig + h;
                let (plus, p_plus) = eval_model(&probe, &x, target)?;
                probe.params_mut()[i].data_mut()[j] = orig - h;
                let (minus, p_minus) = eval_model(&probe, &x, target)?;
                probe.params_mut()[i].data_mut()[j] = orig;
                if p_plus == pattern && p_minus == pattern {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => worst = worst.max(max_rel_err(&[a], &[n])),
                None => skipped += 1,
            }
        }
    }
    let coords = grads.tensors.iter().map(Tensor::len).sum();
    Ok((grads.tensors.len(), coords, worst, skipped))
}

/// Checks one layer kind on a randomized small instance.
pub fn check(kind: &str, seed: u64) -> Result<CheckRow> {
    let (kind, checked, coords, worst, skipped): (&'static str, usize, usize, f64, usize) = match kind {
        "conv1d" => {
            let x = random_tensor(&[2, 13], seed);
            let w = random_tensor(&[3, 2, 4], seed + 1);
            let b = random_tensor(&[3], seed + 2);
            let (stride, pad) = (2, Padding::Same);
            let up = random_tensor(conv1d(&x, &w, &b, stride, pad)?.shape(), seed + 3);
            let g = conv1d_grad(&up, &x, &w, stride, pad, true)?;
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&conv1d(x, w, b, stride, pad).unwrap(), &up);
            let e = err(g.dx.as_ref().unwrap(), &numeric_grad(&x, |x| f(x, &w, &b)))
                .max(err(&g.dw, &numeric_grad(&w, |w| f(&x, w, &b))))
                .max(err(&g.db, &numeric_grad(&b, |b| f(&x, &w, b))));
            ("conv1d", 3, 0, e, 0)
        }
        "conv2d" => {
            let x = random_tensor(&[1, 5, 5], seed);
            let w = random_tensor(&[2, 1, 3, 3], seed + 1);
            let b = random_tensor(&[2], seed + 2);
            let (stride, pad) = ([1, 1], Padding::Same);
            let up = random_tensor(conv2d(&x, &w, &b, stride, pad)?.shape(), seed + 3);
            let g = conv2d_grad(&up, &x, &w, stride, pad, true)?;
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&conv2d(x, w, b, stride, pad).unwrap(), &up);
            let e = err(g.dx.as_ref().unwrap(), &numeric_grad(&x, |x| f(x, &w, &b)))
                .max(err(&g.dw, &numeric_grad(&w, |w| f(&x, w, &b))))
                .max(err(&g.db, &numeric_grad(&b, |b| f(&x, &w, b))));
            ("conv2d", 3, 0, e, 0)
        }
        "maxpool1d" => {
            let x = random_tensor(&[3, 20], seed);
            let p = maxpool1d(&x, 4, 1)?;
            let up = random_tensor(p.output.shape(), seed + 1);
            let dx = maxpool_grad(&up, &p.argmax, x.shape())?;
            let n = numeric_grad(&x, |x| dot(&maxpool1d(x, 4, 1).unwrap().output, &up));
            ("maxpool1d", 1, 0, err(&dx, &n), 0)
        }
        "maxpool2d" => {
            let x = random_tensor(&[2, 6, 7], seed);
            let p = maxpool2d(&x, [2, 2], [2, 2])?;
            let up = random_tensor(p.output.shape(), seed + 1);
            let dx = maxpool_grad(&up, &p.argmax, x.shape())?;
            let n = numeric_grad(&x, |x| dot(&maxpool2d(x, [2, 2], [2, 2]).unwrap().output, &up));
            ("maxpool2d", 1, 0, err(&dx, &n), 0)
        }
        "relu" => {
            let x = random_tensor(&[4, 9], seed);
            let up = random_tensor(x.shape(), seed + 1);
            let dx = relu_grad(&up, &x)?;
            let n = numeric_grad(&x, |x| dot(&relu(x), &up));
            ("relu", 1, 0, err(&dx, &n), 0)
        }
        "inception_nucleus" => {
            let config = ModelConfig::custom(
                vec![
                    LayerSpec::conv1d(2, 16, 16),
                    LayerSpec::InceptionNucleus {
                        branches: vec![
                            vec![LayerSpec::conv1d(2, 4, 4), LayerSpec::Relu],
                            vec![LayerSpec::conv1d(2, 8, 4), LayerSpec::Relu, LayerSpec::conv1d(2, 8, 1)],
                            vec![LayerSpec::conv1d(1, 16, 4), LayerSpec::Relu, LayerSpec::conv1d(2, 16, 1)],
                        ],
                    },
                    LayerSpec::ReshapeChannelsFirst,
                    LayerSpec::conv2d(2, 3),
                    LayerSpec::ClassHead,
                ],
                2,
            )?;
            let (n, c, e, skipped) = model_check(config, seed)?;
            ("inception_nucleus", n, c, e, skipped)
        }
        "reshape_channels_first" => {
            let config = ModelConfig::custom(
                vec![
                    LayerSpec::conv1d(3, 64, 64),
                    LayerSpec::ReshapeChannelsFirst,
                    LayerSpec::conv2d(2, 3),
                    LayerSpec::ClassHead,
                ],
                2,
            )?;
            let (n, c, e, skipped) = model_check(config, seed)?;
            ("reshape_channels_first", n, c, e, skipped)
        }
        "class_head" => {
            let x = random_tensor(&[3, 4, 5], seed);
            let up = random_tensor(&[3], seed + 1);
            let dx = class_head_grad(&up, x.shape())?;
            let n = numeric_grad(&x, |x| dot(&class_head(x).unwrap(), &up));
            ("class_head", 1, 0, err(&dx, &n), 0)
        }
        "dense" => {
            let x = random_tensor(&[2, 3, 2], seed);
            let w = random_tensor(&[4, 12], seed + 1);
            let b = random_tensor(&[4], seed + 2);
            let up = random_tensor(&[4], seed + 3);
            let (dx, dw, db) = dense_grad(&up, &x, &w)?;
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&dense(x, w, b).unwrap(), &up);
            let e = err(&dx, &numeric_grad(&x, |x| f(x, &w, &b)))
                .max(err(&dw, &numeric_grad(&w, |w| f(&x, w, &b))))
                .max(err(&db, &numeric_grad(&b, |b| f(&x, &w, b))));
            ("dense", 3, 0, e, 0)
        }
        "softmax_xent" => {
            let logits = random_tensor(&[5], seed);
            let target = (seed as usize) % 5;
            let r = softmax_xent(logits.data(), target)?;
            let n = numeric_grad(&logits, |l| softmax_xent(l.data(), target).unwrap().loss);
            ("softmax_xent", 1, 0, max_rel_err(&r.dlogits, n.data()), 0)
        }
        "end_to_end" => {
            let config = ModelConfig::custom(
                vec![
                    LayerSpec::Conv1d {
                        channels: 3,
                        kernel: 32,
                        stride: 16,
                        padding: Padding::Same,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool1d { kernel: 4, stride: 4 },
                    LayerSpec::ReshapeChannelsFirst,
                    LayerSpec::conv2d(4, 3),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d {
                        kernel: [2, 2],
                        stride: [2, 2],
                    },
                    LayerSpec::conv2d(3, 3),
                    LayerSpec::ClassHead,
                ],
                3,
            )?;
            let (n, c, e, skipped) = model_check(config, seed)?;
            ("end_to_end", n, c, e, skipped)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck layer {other:?}; expected one of {}",
                KINDS.join(", ")
            )))
        }
    };
    Ok(CheckRow {
        kind,
        checked,
        coords,
        skipped,
        max_rel_err: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_grad(&x, |x| x.data().iter().map(|v| v * v).sum());
        assert!(max_rel_err(g.data(), &[2.0, -4.0, 1.0]) < 1e-8);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(check("lstm", 0).is_err());
    }
}
