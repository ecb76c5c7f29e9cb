//! Dense row-major n-dimensional arrays.
//!
//! [`Tensor`] is generic over [`Scalar`], which is implemented for `f32`
//! (training) and `f64` (finite-difference gradient checks). There is no
//! broadcasting: every binary operation requires identical shapes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type with a matching GEMM kernel.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand {what} out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa, "a");
                check_extent(b.len(), k, n, rsb, csb, "b");
                check_extent(c.len(), m, n, rsc, csc, "c");
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Row-major product `c (m×n) = op(a) · op(b) + beta·c`, where `a` is stored
/// as `m×k` (or `k×m` when `trans_a`) and `b` as `k×n` (or `n×k` when
/// `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("shape must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent of axis {axis} is 0 in {shape:?}; extents must be ≥ 1"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from row-major data.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = validate_shape(shape)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                data_len: data.len(),
                expected,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Zero tensor for shapes known to be valid. Panics on an invalid shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero()).expect("invalid shape for zeros")
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::new(&[len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the elements; used by in-place optimizer updates.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::shape(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut off = 0;
        for ((&i, &e), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= e {
                return Err(Error::shape(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            off += i * s;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    /// Relabels the shape; element order is unchanged.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn require_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// In-place elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.require_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Permutes axes so that `out.shape[i] == self.shape[perm[i]]`.
    pub fn transpose_axes(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "{perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        // Stride in the source for each output axis.
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();

        let mut data = Vec::with_capacity(self.len());
        let mut index = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                src += src_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                src -= src_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Arithmetic mean over `axes`; reduced axes are removed. Reducing every
    /// axis yields a shape of `[1]`.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::shape("reduce_mean of an empty tensor"));
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::shape(format!(
                    "axis {a} out of range for rank {rank}"
                )));
            }
            reduced[a] = true;
        }
        if !reduced.iter().any(|&r| r) {
            return Ok(self.clone());
        }
        let mut out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| self.shape[a])
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_len: usize = out_shape.iter().product();
        let count: usize = (0..rank)
            .filter(|&a| reduced[a])
            .map(|a| self.shape[a])
            .product();

        // Strides of the kept axes inside the output.
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1;
        for a in (0..rank).rev() {
            if !reduced[a] {
                out_strides[a] = acc;
                acc *= self.shape[a];
            }
        }
        let mut sums = vec![0f64; out_len];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let dst: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            sums[dst] += v.as_f64();
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < self.shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        let data = sums.into_iter().map(|s| T::of(s / count as f64)).collect();
        Tensor::new(&out_shape, data)
    }

    /// Pads each axis with `(before, after)` copies of `value`.
    pub fn pad(&self, amounts: &[(usize, usize)], value: T) -> Result<Self> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "pad amounts for {} axes given, tensor has rank {}",
                amounts.len(),
                self.rank()
            )));
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(amounts)
            .map(|(&e, &(b, a))| e + b + a)
            .collect();
        let mut out = Tensor::full(&out_shape, value)?;
        let offsets: Vec<usize> = amounts.iter().map(|&(b, _)| b).collect();
        copy_block(&self.data, &self.shape, &mut out.data, &out_shape, &offsets);
        Ok(out)
    }

    /// Removes `(before, after)` elements from each axis; inverse of [`pad`](Self::pad).
    pub fn crop(&self, amounts: &[(usize, usize)]) -> Result<Self> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "crop amounts for {} axes given, tensor has rank {}",
                amounts.len(),
                self.rank()
            )));
        }
        let mut out_shape = Vec::with_capacity(self.rank());
        for (&e, &(b, a)) in self.shape.iter().zip(amounts) {
            if b + a >= e {
                return Err(Error::shape(format!(
                    "cannot crop ({b}, {a}) from extent {e}"
                )));
            }
            out_shape.push(e - b - a);
        }
        let len: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let strides = self.strides();
        let mut index = vec![0usize; self.rank()];
        for _ in 0..len {
            let src: usize = index
                .iter()
                .zip(amounts)
                .zip(&strides)
                .map(|((i, (b, _)), s)| (i + b) * s)
                .sum();
            data.push(self.data[src]);
            for axis in (0..self.rank()).rev() {
                index[axis] += 1;
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Tensor::new(&out_shape, data)
    }
}

/// Copies a dense `src` block into `dst` at `offsets`.
fn copy_block<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    offsets: &[usize],
) {
    let rank = src_shape.len();
    let dst_strides = strides_of(dst_shape);
    let row = src_shape[rank - 1];
    let rows = src.len() / row;
    let mut index = vec![0usize; rank - 1];
    for r in 0..rows {
        let base: usize = (0..rank - 1)
            .map(|a| (index[a] + offsets[a]) * dst_strides[a])
            .sum::<usize>()
            + offsets[rank - 1];
        dst[base..base + row].copy_from_slice(&src[r * row..(r + 1) * row]);
        for axis in (0..rank - 1).rev() {
            index[axis] += 1;
            if index[axis] < src_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
}
