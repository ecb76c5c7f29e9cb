use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max-pool result plus the flat input offset of every selected element.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

fn out_extent(len: usize, kernel: usize, stride: usize, axis: &str) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape("pool kernel and stride must be ≥ 1"));
    }
    if len < kernel {
        return Err(Error::shape(format!(
            "pool {axis} extent {len} is smaller than kernel {kernel}"
        )));
    }
    Ok((len - kernel) / stride + 1)
}

/// Valid max pooling over the trailing two axes of `[C, H, W]`.
fn pool_hw<T: Scalar>(
    data: &[T],
    channels: usize,
    [h, w]: [usize; 2],
    [kh, kw]: [usize; 2],
    [sh, sw]: [usize; 2],
) -> Result<(Vec<T>, Vec<usize>, [usize; 2])> {
    let oh = out_extent(h, kh, sh, "height")?;
    let ow = out_extent(w, kw, sw, "width")?;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + y * sh * w + x * sw;
                for a in 0..kh {
                    let row = base + (y * sh + a) * w + x * sw;
                    for idx in row..row + kw {
                        // strict comparison keeps the first maximum on ties
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax, [oh, ow]))
}

/// 1D max pooling of `x: [C, T]`.
pub fn maxpool1d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Pooled<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "maxpool1d expects [channels, time], got {:?}",
            x.shape()
        )));
    }
    let [c, t] = [x.shape()[0], x.shape()[1]];
    let (out, argmax, [_, ot]) = pool_hw(x.data(), c, [1, t], [1, kernel], [1, stride])?;
    Ok(Pooled {
        output: Tensor::new(&[c, ot], out)?,
        argmax,
    })
}

/// 2D max pooling of `x: [C, H, W]`.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: [usize; 2],
    stride: [usize; 2],
) -> Result<Pooled<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "maxpool2d expects [channels, height, width], got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    let (out, argmax, [oh, ow]) = pool_hw(x.data(), s[0], [s[1], s[2]], kernel, stride)?;
    Ok(Pooled {
        output: Tensor::new(&[s[0], oh, ow], out)?,
        argmax,
    })
}

/// Routes each upstream element to the input position that won the max.
pub fn maxpool_grad<T: Scalar>(
    upstream: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape(format!(
            "upstream has {} elements, pooling produced {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::full(input_shape, T::zero())?;
    let d = dx.data_mut();
    for (&g, &idx) in upstream.data().iter().zip(argmax) {
        d[idx] += g;
    }
    Ok(dx)
}
