//! Dense multi-axis arrays in (B, D, H, W, C) layout.
//!
//! Storage is row-major with the last axis varying fastest, so channel
//! concatenation of two activations is a contiguous interleave per voxel.
//! `f32` is the training precision; `f64` exists for gradient checking.

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// All pointers must be valid for the given extents and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// Row-major `out (m x n) = a (m x k) * b (k x n) + beta * out`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension mismatch");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    // SAFETY: extents and strides were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Ordered list of positive extents; the last axis is fastest in memory.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent of axis {axis} is zero in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape(vec![1]), data: vec![value] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::Index(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &d)) in index.iter().zip(self.dims()).enumerate() {
            if i >= d {
                return Err(Error::Index(format!("index {i} out of range {d} on axis {axis}")));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Index of the largest element; ties resolve to the first.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.rank()];
        for (axis, &d) in self.dims().iter().enumerate().rev() {
            index[axis] = offset % d;
            offset /= d;
        }
        index
    }

    /// Copy of sample `b` along the leading axis, keeping that axis with extent 1.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let dims = self.dims();
        if b >= dims[0] {
            return Err(Error::Index(format!("batch index {b} out of range {}", dims[0])));
        }
        let per = self.len() / dims[0];
        let mut out_dims = dims.to_vec();
        out_dims[0] = 1;
        Tensor::from_vec(out_dims, self.data[b * per..(b + 1) * per].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    item.shape, first.shape
                )));
            }
            data.extend_from_slice(&item.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Tensor::from_vec(dims, data)
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != bd.len() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
            return Err(Error::shape(format!("cannot concat {:?} and {:?}", a.shape, b.shape)));
        }
        let (ca, cb) = (ad[ad.len() - 1], bd[bd.len() - 1]);
        let rows = a.len() / ca;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
        }
        let mut dims = ad.to_vec();
        *dims.last_mut().unwrap() = ca + cb;
        Tensor::from_vec(dims, data)
    }

    /// Inverse of [`Tensor::concat_channels`]: split the last axis at `at`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let dims = self.dims();
        let c = dims[dims.len() - 1];
        if at == 0 || at >= c {
            return Err(Error::shape(format!("cannot split {c} channels at {at}")));
        }
        let rows = self.len() / c;
        let mut left = Vec::with_capacity(rows * at);
        let mut right = Vec::with_capacity(rows * (c - at));
        for r in 0..rows {
            left.extend_from_slice(&self.data[r * c..r * c + at]);
            right.extend_from_slice(&self.data[r * c + at..(r + 1) * c]);
        }
        let mut ld = dims.to_vec();
        let mut rd = dims.to_vec();
        *ld.last_mut().unwrap() = at;
        *rd.last_mut().unwrap() = c - at;
        Ok((Tensor::from_vec(ld, left)?, Tensor::from_vec(rd, right)?))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl ElementwiseOp {
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Div => a / b,
            ElementwiseOp::Max => a.max(b),
        }
    }
}

/// Right-hand operand of [`elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

pub fn elementwise<'a, T: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: impl Into<Operand<'a, T>>,
) -> Result<Tensor<T>> {
    let data: Vec<T> = match b.into() {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(Error::shape(format!(
                    "{op:?}: shape mismatch {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)).collect()
        }
        Operand::Scalar(s) => a.data.iter().map(|&x| op.apply(x, s)).collect(),
    };
    if op == ElementwiseOp::Div && data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("division produced a non-finite value".into()));
    }
    Ok(Tensor { shape: a.shape.clone(), data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes`. Reduced axes are dropped unless `keep_dims`, in which
/// case they remain with extent 1. Reducing every axis without `keep_dims`
/// yields a single-element tensor of shape `[1]`.
pub fn reduce<T: Scalar>(
    op: ReduceOp,
    a: &Tensor<T>,
    axes: &[usize],
    keep_dims: bool,
) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        reduced[axis] = true;
    }

    let kept_dims: Vec<usize> =
        a.dims().iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
    let kept_shape = Shape(kept_dims.clone());
    let kept_strides = kept_shape.strides();
    let out_len = kept_shape.numel();
    let count = a.len() / out_len;

    let init = match op {
        ReduceOp::Max => T::neg_infinity(),
        _ => T::zero(),
    };
    let mut acc = vec![init; out_len];
    // Output stride per input axis; zero on reduced axes.
    let step: Vec<usize> =
        (0..rank).map(|i| if reduced[i] { 0 } else { kept_strides[i] }).collect();
    let dims = a.dims();
    let mut index = vec![0usize; rank];
    let mut out_off = 0usize;
    for &v in &a.data {
        match op {
            ReduceOp::Max => acc[out_off] = acc[out_off].max(v),
            _ => acc[out_off] += v,
        }
        for axis in (0..rank).rev() {
            index[axis] += 1;
            out_off += step[axis];
            if index[axis] < dims[axis] {
                break;
            }
            out_off -= step[axis] * dims[axis];
            index[axis] = 0;
        }
    }
    if op == ReduceOp::Mean {
        let n = T::from_f64(count as f64);
        for v in &mut acc {
            *v = *v / n;
        }
    }

    let out_dims = if keep_dims {
        kept_dims
    } else {
        let d: Vec<usize> =
            a.dims().iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        if d.is_empty() {
            vec![1]
        } else {
            d
        }
    };
    Tensor::from_vec(out_dims, acc)
}

/// Corner-aligned source coordinate for output index `i`.
fn corner_aligned(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Lower index and fractional weight of a coordinate, clamped to the grid.
fn lerp_index(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x = x.clamp(0.0, (n - 1) as f64);
    let lo = (x.floor() as usize).min(n - 2);
    (lo, lo + 1, x - lo as f64)
}

/// Trilinear resampling of a single-channel `(D, H, W)` volume with
/// corner-aligned sampling: the first and last voxel centres of each axis map
/// onto each other. A target extent of 1 samples the axis centre.
pub fn resample_trilinear<T: Scalar>(v: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    if v.rank() != 3 {
        return Err(Error::shape(format!("resample expects (D, H, W), got {:?}", v.shape)));
    }
    let out_shape = Shape::new(target.to_vec())?;
    let [d0, h0, w0] = [v.dims()[0], v.dims()[1], v.dims()[2]];
    let [d1, h1, w1] = target;

    let zs: Vec<_> = (0..d1).map(|i| lerp_index(corner_aligned(i, d1, d0), d0)).collect();
    let ys: Vec<_> = (0..h1).map(|i| lerp_index(corner_aligned(i, h1, h0), h0)).collect();
    let xs: Vec<_> = (0..w1).map(|i| lerp_index(corner_aligned(i, w1, w0), w0)).collect();

    let src = &v.data;
    let at = |z: usize, y: usize, x: usize| src[(z * h0 + y) * w0 + x].to_f64();
    let mut data = Vec::with_capacity(out_shape.numel());
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data.push(T::from_f64(c0 * (1.0 - fz) + c1 * fz));
            }
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective is non-finite around entry {i}")));
        }
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest relative discrepancy `|a - b| / max(|a|, |b|, floor)` between two
/// gradients. `floor` keeps entries that are both near zero from dominating.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_and_overflow() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![usize::MAX, 2]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(elementwise(ElementwiseOp::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);

        let x = t(&[3], &[0.1, -7.25, 1e-30]);
        let y = elementwise(ElementwiseOp::Mul, &x, Operand::Scalar(1.0)).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }

        let m = elementwise(ElementwiseOp::Max, &t(&[2], &[-1.0, 5.0]), &t(&[2], &[2.0, 3.0]))
            .unwrap();
        assert_eq!(m.data(), &[2.0, 5.0]);
    }

    #[test]
    fn elementwise_errors() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(elementwise(ElementwiseOp::Sub, &a, &b), Err(Error::Shape(_))));
        let z = t(&[2], &[0.0, 1.0]);
        assert!(matches!(elementwise(ElementwiseOp::Div, &a, &z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let m = reduce(ReduceOp::Mean, &a, &[0], false).unwrap();
        assert_eq!(m.dims(), &[2]);
        assert_eq!(m.data(), &[3.0, 5.0]);

        let ones = Tensor::<f64>::full(vec![2, 2, 2], 1.0).unwrap();
        let s = reduce(ReduceOp::Sum, &ones, &[0, 1, 2], false).unwrap();
        assert_eq!(s.data(), &[8.0]);

        let b = t(&[2, 2], &[1.0, 9.0, 4.0, 2.0]);
        let mx = reduce(ReduceOp::Max, &b, &[1], true).unwrap();
        assert_eq!(mx.dims(), &[2, 1]);
        assert_eq!(mx.data(), &[9.0, 4.0]);

        assert!(matches!(
            reduce(ReduceOp::Sum, &b, &[2], false),
            Err(Error::Axis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_matches_scalar_loop_on_middle_axes() {
        let dims = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(|i| ((i * 37) % 11) as f64 - 4.0).collect();
        let a = t(&dims, &data);
        let r = reduce(ReduceOp::Max, &a, &[1, 3], false).unwrap();
        assert_eq!(r.dims(), &[2, 4]);
        for b in 0..2 {
            for h in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for d in 0..3 {
                    for w in 0..5 {
                        best = best.max(a.get(&[b, d, h, w]).unwrap());
                    }
                }
                assert_eq!(r.get(&[b, h]).unwrap(), best);
            }
        }
    }

    #[test]
    fn resample_constant_and_identity() {
        let c = Tensor::<f64>::full(vec![3, 5, 4], 7.0).unwrap();
        let up = resample_trilinear(&c, [6, 2, 9]).unwrap();
        assert!(up.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));

        let v = t(&[2, 2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let same = resample_trilinear(&v, [2, 2, 3]).unwrap();
        for (a, b) in v.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_linear_ramp_halved() {
        // Ramp 0..8 along W with 9 samples; 5 corner-aligned samples hit 0,2,4,6,8.
        let ramp: Vec<f64> = (0..9).map(|x| x as f64).collect();
        let v = t(&[1, 1, 9], &ramp);
        let down = resample_trilinear(&v, [1, 1, 5]).unwrap();
        assert_eq!(down.data(), &[0.0, 2.0, 4.0, 6.0, 8.0]);
        // Endpoints preserved and the midpoint equals their mean.
        let d = down.data();
        assert_eq!(d[2], (d[0] + d[4]) / 2.0);
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let g = finite_diff_grad(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);

        let z = finite_diff_grad(|_| 3.5, &x, 1e-5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let nan = finite_diff_grad(|_| f64::NAN, &x, 1e-5);
        assert!(matches!(nan, Err(Error::NonFinite(_))));
    }

    #[test]
    fn finite_diff_bce_of_sigmoid_matches_chain_rule() {
        // loss(w) = -[y log s(w.x) + (1-y) log(1 - s(w.x))], dloss/dw = (s - y) x.
        let xs = [0.3, -1.2, 2.0];
        let y = 1.0;
        let w = t(&[3], &[0.5, 0.25, -0.1]);
        let loss = |w: &Tensor<f64>| {
            let z: f64 = w.data().iter().zip(&xs).map(|(a, b)| a * b).sum();
            let s = 1.0 / (1.0 + (-z).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        };
        let num = finite_diff_grad(loss, &w, 1e-6).unwrap();
        let z: f64 = w.data().iter().zip(&xs).map(|(a, b)| a * b).sum();
        let s = 1.0 / (1.0 + (-z).exp());
        let analytic: Vec<f64> = xs.iter().map(|x| (s - y) * x).collect();
        assert!(max_relative_error(num.data(), &analytic, 1e-8) < 1e-5);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let (l, r) = c.split_channels(2).unwrap();
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // Transposed view: (3x2)^T * ... using a as 3x2 transposed to 2x3.
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]; // a stored column-major
        let mut d = vec![0.0; 8];
        gemm(MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4), 0.0, &mut d);
        assert_eq!(c, d);
    }
}
