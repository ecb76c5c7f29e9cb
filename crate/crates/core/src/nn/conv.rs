//! Convolutions as im2col + GEMM.
//!
//! Both 1D and 2D layers use the cross-correlation convention (no kernel
//! flip). A 1D convolution over `[C, T]` runs through the 2D path as a
//! `[C, 1, T]` image with a `1×k` kernel.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

use super::Padding;

/// Output extent and `(before, after)` padding of one spatial axis.
///
/// `Same` follows the usual convention: output extent `ceil(len / stride)`,
/// total padding `max((out - 1)·stride + kernel - len, 0)` with the odd
/// element placed after.
pub fn axis_geometry(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, (usize, usize))> {
    if kernel == 0 || stride == 0 || len == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if len < kernel {
                None
            } else {
                Some(((len - kernel) / stride + 1, (0, 0)))
            }
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Some((out, (total / 2, total - total / 2)))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(
        in_shape: [usize; 3],
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
    ) -> Result<Self> {
        let [channels, height, width] = in_shape;
        let (out_h, (pad_top, _)) = axis_geometry(height, kernel[0], stride[0], padding)
            .ok_or_else(|| {
                Error::shape(format!(
                    "height {height} too small for kernel {} ({padding:?})",
                    kernel[0]
                ))
            })?;
        let (out_w, (pad_left, _)) = axis_geometry(width, kernel[1], stride[1], padding)
            .ok_or_else(|| {
                Error::shape(format!(
                    "length {width} too small for kernel {} ({padding:?})",
                    kernel[1]
                ))
            })?;
        Ok(Geometry {
            channels,
            height,
            width,
            kh: kernel[0],
            kw: kernel[1],
            sh: stride[0],
            sw: stride[1],
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `[lo, hi)` whose input column for kernel offset `b`
    /// lies inside the image.
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        // ix = ox*sw + b - pad_left must satisfy 0 <= ix < width
        let lo = if b >= self.pad_left {
            0
        } else {
            (self.pad_left - b).div_ceil(self.sw)
        };
        let limit = self.width + self.pad_left;
        let hi = if limit <= b {
            0
        } else {
            ((limit - b - 1) / self.sw + 1).min(self.out_w)
        };
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, a: usize) -> Option<usize> {
        let iy = (oy * self.sh + a).checked_sub(self.pad_top)?;
        (iy < self.height).then_some(iy)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(b);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, a) else {
                        continue;
                    };
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst = &mut dst_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let first = lo * g.sw + b - g.pad_left;
                    if g.sw == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + k * g.sw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                let src_row = &cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(b);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, a) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let src = &src_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let first = lo * g.sw + b - g.pad_left;
                    for (k, &v) in src[lo..hi].iter().enumerate() {
                        dst[first + k * g.sw] += v;
                    }
                }
            }
        }
    }
    x
}

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not request the input gradient.
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn check_params<T: Scalar>(
    in_channels: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel_rank: usize,
) -> Result<usize> {
    if weight.rank() != 2 + kernel_rank {
        return Err(Error::shape(format!(
            "weight must have rank {}, got shape {:?}",
            2 + kernel_rank,
            weight.shape()
        )));
    }
    let out_channels = weight.shape()[0];
    if weight.shape()[1] != in_channels {
        return Err(Error::shape(format!(
            "channel mismatch: input has {in_channels} channels, weight {:?} expects {}",
            weight.shape(),
            weight.shape()[1]
        )));
    }
    if bias.shape() != [out_channels] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {out_channels} output channels",
            bias.shape()
        )));
    }
    Ok(out_channels)
}

fn forward_impl<T: Scalar>(
    x: &[T],
    g: &Geometry,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Vec<T> {
    let out_channels = weight.shape()[0];
    let n = g.cols();
    let cols = im2col(x, g);
    let mut out = vec![T::zero(); out_channels * n];
    for (row, &b) in out.chunks_exact_mut(n).zip(bias.data()) {
        row.fill(b);
    }
    matmul(
        out_channels,
        g.rows(),
        n,
        weight.data(),
        false,
        &cols,
        false,
        T::one(),
        &mut out,
    );
    out
}

fn backward_impl<T: Scalar>(
    upstream: &[T],
    x: &[T],
    g: &Geometry,
    weight: &Tensor<T>,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let out_channels = weight.shape()[0];
    let n = g.cols();
    let k = g.rows();
    let db: Vec<T> = upstream
        .chunks_exact(n)
        .map(|row| row.iter().copied().sum())
        .collect();
    let cols = im2col(x, g);
    let mut dw = vec![T::zero(); out_channels * k];
    matmul(out_channels, n, k, upstream, false, &cols, true, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = cols;
        matmul(
            k,
            out_channels,
            n,
            weight.data(),
            true,
            upstream,
            false,
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    (dx, dw, db)
}

fn check_upstream<T: Scalar>(upstream: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} does not match forward output {expected:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

fn geometry_1d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Geometry> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "conv1d expects [channels, time], got {:?}",
            x.shape()
        )));
    }
    if weight.rank() != 3 {
        return Err(Error::shape(format!(
            "conv1d weight must be [out, in, kernel], got {:?}",
            weight.shape()
        )));
    }
    Geometry::new(
        [x.shape()[0], 1, x.shape()[1]],
        [1, weight.shape()[2]],
        [1, stride],
        padding,
    )
}

/// 1D cross-correlation of `x: [in_ch, T]` with `weight: [out_ch, in_ch, k]`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry_1d(x, weight, stride, padding)?;
    let out_channels = check_params(g.channels, weight, bias, 1)?;
    let out = forward_impl(x.data(), &g, weight, bias);
    Tensor::new(&[out_channels, g.out_w], out)
}

pub fn conv1d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry_1d(x, weight, stride, padding)?;
    let out_channels = weight.shape()[0];
    check_upstream(upstream, &[out_channels, g.out_w])?;
    let (dx, dw, db) = backward_impl(upstream.data(), x.data(), &g, weight, need_dx);
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: Tensor::new(weight.shape(), dw)?,
        db: Tensor::new(&[out_channels], db)?,
    })
}

fn geometry_2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 2],
    padding: Padding,
) -> Result<Geometry> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "conv2d expects [channels, height, width], got {:?}",
            x.shape()
        )));
    }
    if weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d weight must be [out, in, kh, kw], got {:?}",
            weight.shape()
        )));
    }
    let s = x.shape();
    Geometry::new(
        [s[0], s[1], s[2]],
        [weight.shape()[2], weight.shape()[3]],
        stride,
        padding,
    )
}

/// 2D cross-correlation of `x: [in_ch, H, W]` with `weight: [out_ch, in_ch, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 2],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry_2d(x, weight, stride, padding)?;
    let out_channels = check_params(g.channels, weight, bias, 2)?;
    let out = forward_impl(x.data(), &g, weight, bias);
    Tensor::new(&[out_channels, g.out_h, g.out_w], out)
}

pub fn conv2d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 2],
    padding: Padding,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry_2d(x, weight, stride, padding)?;
    let out_channels = weight.shape()[0];
    check_upstream(upstream, &[out_channels, g.out_h, g.out_w])?;
    let (dx, dw, db) = backward_impl(upstream.data(), x.data(), &g, weight, need_dx);
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: Tensor::new(weight.shape(), dw)?,
        db: Tensor::new(&[out_channels], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{max_rel_err, numeric_grad, random_tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct-loop oracle: out[c,y,x] = b[c] + Σ w[c,i,a,b]·xpad[i, y·sh+a, x·sw+b].
    fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: [usize; 2],
        padding: Padding,
    ) -> Tensor<f64> {
        let [ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let (oh, (pt, _)) = axis_geometry(h, kh, stride[0], padding).unwrap();
        let (ow, (pl, _)) = axis_geometry(wd, kw, stride[1], padding).unwrap();
        let mut out = vec![0.0; co * oh * ow];
        for c in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.data()[c];
                    for i in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (y * stride[0] + a) as isize - pt as isize;
                                let ix = (xo * stride[1] + b) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.get(&[c, i, a, b]).unwrap()
                                    * x.get(&[i, iy as usize, ix as usize]).unwrap();
                            }
                        }
                    }
                    out[(c * oh + y) * ow + xo] = acc;
                }
            }
        }
        Tensor::new(&[co, oh, ow], out).unwrap()
    }

    #[test]
    fn delta_input_emits_reversed_kernel() {
        let x = t(&[1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let w = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[1], &[0.0]);
        let y = conv1d(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn box_filter_valid() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2], &[1.0, 1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv1d(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn first_layer_valid_length() {
        let x = Tensor::<f32>::zeros(&[1, 8000]);
        let w = Tensor::<f32>::zeros(&[32, 1, 80]);
        let b = Tensor::<f32>::zeros(&[32]);
        let y = conv1d(&x, &w, &b, 4, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[32, 1981]);
        assert_eq!(axis_geometry(8000, 80, 4, Padding::Valid).unwrap().0, 1981);
    }

    #[test]
    fn same_padding_geometry() {
        assert_eq!(axis_geometry(8000, 80, 4, Padding::Same), Some((2000, (38, 38))));
        assert_eq!(axis_geometry(500, 8, 1, Padding::Same), Some((500, (3, 4))));
        assert_eq!(axis_geometry(5, 3, 1, Padding::Same), Some((5, (1, 1))));
        assert_eq!(axis_geometry(3, 4, 1, Padding::Valid), None);
    }

    #[test]
    fn conv1d_errors() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::<f64>::zeros(&[1, 3, 2]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(conv1d(&x, &w, &b, 1, Padding::Valid)
            .unwrap_err()
            .to_string()
            .contains("channel mismatch"));
        let w = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(conv1d(&x, &w, &b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn one_element_grad_by_hand() {
        let x = t(&[1, 1], &[5.0]);
        let w = t(&[1, 1, 1], &[2.0]);
        let up = t(&[1, 1], &[1.0]);
        let g = conv1d_grad(&up, &x, &w, 1, Padding::Valid, true).unwrap();
        assert_eq!(g.dw.data(), &[5.0]);
        assert_eq!(g.db.data(), &[1.0]);
        assert_eq!(g.dx.unwrap().data(), &[2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = random_tensor(&[2, 9], 1);
        let w = random_tensor(&[3, 2, 4], 2);
        let up = Tensor::<f64>::zeros(&[3, 3]);
        let g = conv1d_grad(&up, &x, &w, 3, Padding::Same, true).unwrap();
        assert!(g.dw.data().iter().all(|&v| v == 0.0));
        assert!(g.db.data().iter().all(|&v| v == 0.0));
        assert!(g.dx.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_same_padding() {
        let x = random_tensor(&[1, 4, 6], 3);
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, [1, 1], Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_2x2_valid() {
        let x = t(&[1, 2, 2], &[1.0; 4]);
        let w = t(&[1, 1, 2, 2], &[1.0; 4]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &w, &b, [1, 1], Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn matches_direct_loops() {
        for (seed, stride, padding, shape, kernel) in [
            (10, [1, 1], Padding::Same, [2, 5, 7], [3, 3]),
            (11, [2, 2], Padding::Valid, [3, 7, 6], [3, 2]),
            (12, [1, 3], Padding::Same, [1, 4, 11], [2, 5]),
            (13, [2, 1], Padding::Same, [2, 6, 5], [1, 1]),
        ] {
            let x = random_tensor(&shape, seed);
            let w = random_tensor(&[4, shape[0], kernel[0], kernel[1]], seed + 100);
            let b = random_tensor(&[4], seed + 200);
            let fast = conv2d(&x, &w, &b, stride, padding).unwrap();
            let slow = naive_conv2d(&x, &w, &b, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            assert!(max_rel_err(fast.data(), slow.data()) < 1e-12);
        }
    }

    #[test]
    fn conv1d_grad_matches_finite_differences() {
        for (stride, padding) in [(1, Padding::Valid), (3, Padding::Same), (2, Padding::Same)] {
            let x = random_tensor(&[2, 11], 21);
            let w = random_tensor(&[3, 2, 4], 22);
            let b = random_tensor(&[3], 23);
            let y = conv1d(&x, &w, &b, stride, padding).unwrap();
            let up = random_tensor(y.shape(), 24);
            let g = conv1d_grad(&up, &x, &w, stride, padding, true).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv1d(x, w, b, stride, padding).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let ndx = numeric_grad(&x, |x| loss(x, &w, &b));
            let ndw = numeric_grad(&w, |w| loss(&x, w, &b));
            let ndb = numeric_grad(&b, |b| loss(&x, &w, b));
            assert!(max_rel_err(g.dx.unwrap().data(), ndx.data()) < 1e-4);
            assert!(max_rel_err(g.dw.data(), ndw.data()) < 1e-4);
            assert!(max_rel_err(g.db.data(), ndb.data()) < 1e-4);
        }
    }

    #[test]
    fn conv2d_grad_matches_finite_differences() {
        let x = random_tensor(&[1, 5, 5], 31);
        let w = random_tensor(&[2, 1, 3, 3], 32);
        let b = random_tensor(&[2], 33);
        for (stride, padding) in [([1, 1], Padding::Same), ([2, 1], Padding::Valid)] {
            let y = conv2d(&x, &w, &b, stride, padding).unwrap();
            let up = random_tensor(y.shape(), 34);
            let g = conv2d_grad(&up, &x, &w, stride, padding, true).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv2d(x, w, b, stride, padding).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!(max_rel_err(g.dx.unwrap().data(), numeric_grad(&x, |x| loss(x, &w, &b)).data()) < 1e-4);
            assert!(max_rel_err(g.dw.data(), numeric_grad(&w, |w| loss(&x, w, &b)).data()) < 1e-4);
            assert!(max_rel_err(g.db.data(), numeric_grad(&b, |b| loss(&x, &w, b)).data()) < 1e-4);
        }
    }
}
