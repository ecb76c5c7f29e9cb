//! Classification heads and the softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Global average pooling: `[K, H, W]` → `[K]`.
pub fn class_head<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "class head expects [classes, height, width], got {:?}",
            x.shape()
        )));
    }
    x.reduce_mean(&[1, 2])
}

pub fn class_head_grad<T: Scalar>(upstream: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let k = input_shape[0];
    if upstream.shape() != [k] {
        return Err(Error::shape(format!(
            "class head upstream {:?}, expected [{k}]",
            upstream.shape()
        )));
    }
    let area: usize = input_shape[1..].iter().product();
    let inv = T::of(1.0 / area as f64);
    let mut data = Vec::with_capacity(k * area);
    for &g in upstream.data() {
        data.extend(std::iter::repeat_n(g * inv, area));
    }
    Tensor::new(input_shape, data)
}

/// Fully connected layer over the flattened input: `weight: [units, in]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [units, inputs] = [weight.shape()[0], weight.shape()[1]];
    if x.len() != inputs {
        return Err(Error::shape(format!(
            "dense layer expects {inputs} inputs, got {:?}",
            x.shape()
        )));
    }
    let mut out = bias.data().to_vec();
    matmul(units, inputs, 1, weight.data(), false, x.data(), false, T::one(), &mut out);
    Tensor::new(&[units], out)
}

/// Returns `(dx, dw, db)`; `dx` has the (unflattened) shape of `x`.
pub fn dense_grad<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [units, inputs] = [weight.shape()[0], weight.shape()[1]];
    if upstream.shape() != [units] {
        return Err(Error::shape(format!(
            "dense upstream {:?}, expected [{units}]",
            upstream.shape()
        )));
    }
    let mut dw = vec![T::zero(); units * inputs];
    matmul(units, 1, inputs, upstream.data(), false, x.data(), false, T::zero(), &mut dw);
    let mut dx = vec![T::zero(); inputs];
    matmul(inputs, units, 1, weight.data(), true, upstream.data(), false, T::zero(), &mut dx);
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        upstream.clone(),
    ))
}

#[derive(Clone, Debug)]
pub struct SoftmaxXent<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub dlogits: Vec<T>,
}

/// Numerically stable softmax over `logits` (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy of `softmax(logits)` against `true_class`, with its gradient.
pub fn softmax_xent<T: Scalar>(logits: &[T], true_class: usize) -> Result<SoftmaxXent<T>> {
    if logits.len() < 2 {
        return Err(Error::shape(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if true_class >= logits.len() {
        return Err(Error::shape(format!(
            "class {true_class} out of range for {} logits",
            logits.len()
        )));
    }
    let probs = softmax(logits)?;
    // log-sum-exp form avoids ln(0) when the true class underflows
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - logits[true_class];
    let mut dlogits = probs.clone();
    dlogits[true_class] -= T::one();
    Ok(SoftmaxXent {
        loss,
        probs,
        dlogits,
    })
}
