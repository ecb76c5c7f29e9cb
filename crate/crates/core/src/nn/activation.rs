use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_grad<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!(
            "relu upstream {:?} vs input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}
