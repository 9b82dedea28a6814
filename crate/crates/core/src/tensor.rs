//! Dense row-major tensors and the handful of kernels the network needs:
//! matrix multiply, 2-D convolution, max-pooling and a central-difference
//! gradient checker.
//!
//! Feature maps are stored `H×W×C` with the channel index fastest, so a map
//! doubles as an `(H·W)×C` matrix and a 1×1 convolution is a single GEMM.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{CianError, Result};

/// Element type tag used by the `CIAN1` container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating point element type. `f32` is used for training, `f64` for
/// gradient checks and brute-force oracles.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// regions of the stated sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `exp` for arguments `≤ 0`, as used by shifted softmax.
    fn exp_nonpos(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    /// Branch-free range reduction plus a degree-6 polynomial; relative
    /// error below 3e-7 on `[-30, 0]`, exactly zero below -30 so that no
    /// subnormals reach the backward pass.
    #[inline]
    fn exp_nonpos(self) -> Self {
        const MAGIC: f32 = 12_582_912.0;
        let x = self.max(-87.0);
        let t = x * std::f32::consts::LOG2_E + MAGIC;
        let n = t - MAGIC;
        let k = (t.to_bits() as i32).wrapping_sub(MAGIC.to_bits() as i32);
        let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        let keep = if self >= -30.0 { 1.0 } else { 0.0 };
        keep * p * f32::from_bits(((k + 127) as u32) << 23)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Matrix operand description for [`gemm`]: row-major storage, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    /// Logical rows after the optional transpose.
    pub rows: usize,
    /// Logical columns after the optional transpose.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View of a row-major `rows×cols` buffer as its transpose.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`).
pub fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs size");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs size");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: sizes were checked above and `out` is an exclusive borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CianError::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CianError::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(CianError::invalid(format!(
                "expected an H×W×C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(CianError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CianError::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(CianError::shape("add_scaled", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Sum in flat index order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(CianError::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(CianError::NonFinite(op.to_string()))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Mirror a feature map left-right.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in (0..w).rev() {
                let base = (y * w + x) * c;
                out.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}

/// In-place softmax of one row with max subtraction. Returns `false` when
/// the row holds a non-finite value.
pub fn softmax_row<T: Real>(row: &mut [T]) -> bool {
    const L: usize = 8;
    let mut lanes = [T::neg_infinity(); L];
    let mut probe = [T::zero(); L];
    let mut chunks = row.chunks_exact(L);
    for c in &mut chunks {
        for i in 0..L {
            lanes[i] = if c[i] > lanes[i] { c[i] } else { lanes[i] };
            probe[i] += c[i] * T::zero();
        }
    }
    let mut max = T::neg_infinity();
    let mut bad = T::zero();
    for (&l, &p) in lanes.iter().zip(&probe) {
        max = if l > max { l } else { max };
        bad += p;
    }
    for &v in chunks.remainder() {
        max = if v > max { v } else { max };
        bad += v * T::zero();
    }
    if bad != T::zero() || !max.is_finite() {
        return false;
    }
    let mut sums = [T::zero(); L];
    let mut chunks = row.chunks_exact_mut(L);
    for c in &mut chunks {
        for i in 0..L {
            c[i] = (c[i] - max).exp_nonpos();
            sums[i] += c[i];
        }
    }
    let mut total = T::zero();
    for v in chunks.into_remainder() {
        *v = (*v - max).exp_nonpos();
        total += *v;
    }
    total += sums.iter().copied().sum::<T>();
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

/// `a·b` for rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(CianError::shape("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(CianError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        Mat::new(a.data(), m, k),
        Mat::new(b.data(), k, n),
        &mut out,
        false,
    );
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[h, w, cin], &[k, k2, kcin, cout]) = (input, kernel) else {
            return Err(CianError::shape("conv2d", input, kernel));
        };
        if k != k2 || kcin != cin {
            return Err(CianError::shape("conv2d", input, kernel));
        }
        if k % 2 == 0 {
            return Err(CianError::invalid(format!(
                "conv2d kernel size must be odd, got {k}"
            )));
        }
        if stride == 0 {
            return Err(CianError::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(CianError::shape("conv2d", input, kernel));
        }
        Ok(ConvGeometry {
            in_h: h,
            in_w: w,
            in_c: cin,
            out_c: cout,
            k,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.in_c
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold the input into an `(out_h·out_w) × (k·k·in_c)` patch matrix.
    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let (oh, ow, pl) = (self.out_h(), self.out_w(), self.patch_len());
        let c = self.in_c;
        let mut cols = vec![T::zero(); oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.in_w + ix as usize) * c;
                        let dst = (ky * self.k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], grad_input: &mut [T]) {
        let (oh, ow, pl) = (self.out_h(), self.out_w(), self.patch_len());
        let c = self.in_c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.in_w + ix as usize) * c;
                        let src = (ky * self.k + kx) * c;
                        for (g, &v) in grad_input[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// Saved forward state of a convolution: the unfolded input patches.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    geometry: ConvGeometry,
    cols: Option<Vec<T>>,
    input: Vec<T>,
}

/// 2-D convolution of an `H×W×Cin` map with a `k×k×Cin×Cout` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_cached(input, kernel, stride, pad).map(|(out, _)| out)
}

pub fn conv2d_cached<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); oh * ow * g.out_c];
    let cols = if g.is_pointwise() {
        None
    } else {
        Some(g.im2col(input.data()))
    };
    let lhs = cols.as_deref().unwrap_or(input.data());
    gemm(
        Mat::new(lhs, oh * ow, g.patch_len()),
        Mat::new(kernel.data(), g.patch_len(), g.out_c),
        &mut out,
        false,
    );
    let out = Tensor::from_parts(vec![oh, ow, g.out_c], out).ensure_finite("conv2d")?;
    let input = if cols.is_some() {
        Vec::new()
    } else {
        input.data().to_vec()
    };
    Ok((
        out,
        ConvCache {
            geometry: g,
            cols,
            input,
        },
    ))
}

/// Gradients of a convolution w.r.t. its input and kernel.
///
/// `grad_input` is skipped (returned as `None`) when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = cache.geometry;
    let (oh, ow) = (g.out_h(), g.out_w());
    if grad_out.shape() != [oh, ow, g.out_c] {
        return Err(CianError::shape(
            "conv2d_backward",
            grad_out.shape(),
            &[oh, ow, g.out_c],
        ));
    }
    let pl = g.patch_len();
    let lhs = cache.cols.as_deref().unwrap_or(&cache.input);
    let mut grad_kernel = vec![T::zero(); pl * g.out_c];
    gemm(
        Mat::t(lhs, oh * ow, pl),
        Mat::new(grad_out.data(), oh * ow, g.out_c),
        &mut grad_kernel,
        false,
    );
    let grad_kernel = Tensor::from_parts(vec![g.k, g.k, g.in_c, g.out_c], grad_kernel);
    if !need_input {
        return Ok((None, grad_kernel));
    }
    let mut grad_cols = vec![T::zero(); oh * ow * pl];
    gemm(
        Mat::new(grad_out.data(), oh * ow, g.out_c),
        Mat::t(kernel.data(), pl, g.out_c),
        &mut grad_cols,
        false,
    );
    let grad_input = if g.is_pointwise() {
        grad_cols
    } else {
        let mut gi = vec![T::zero(); g.in_h * g.in_w * g.in_c];
        g.col2im(&grad_cols, &mut gi);
        gi
    };
    Ok((
        Some(Tensor::from_parts(vec![g.in_h, g.in_w, g.in_c], grad_input)),
        grad_kernel,
    ))
}

/// Result of a max-pool: pooled values plus, for every output element, the
/// flat input index it was taken from.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

/// Max-pooling over `window×window` spatial windows, channels independent.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(input, window, stride).map(|p| p.output)
}

/// Max-pool that also records the winning input index. Ties go to the
/// lowest flat index.
pub fn maxpool2d_with_argmax<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Pooled<T>> {
    let (h, w, c) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(CianError::invalid(
            "maxpool2d window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(CianError::invalid(format!(
            "maxpool2d window {window} exceeds input {h}×{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let src = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((oy * stride) * w + ox * stride) * c + ch;
                let mut best = src[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_parts(vec![oh, ow, c], out).ensure_finite("maxpool2d")?,
        argmax,
        input_shape: input.shape().to_vec(),
    })
}

/// Route pooled gradients back to the winning input elements.
pub fn maxpool2d_backward<T: Real>(pooled: &Pooled<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != pooled.output.shape() {
        return Err(CianError::shape(
            "maxpool2d_backward",
            grad_out.shape(),
            pooled.output.shape(),
        ));
    }
    let mut grad = Tensor::zeros(&pooled.input_shape);
    let gd = grad.data_mut();
    for (&idx, &g) in pooled.argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error used by the gradient checker.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare an analytic gradient against central differences of `f` at
/// `params`, over every coordinate.
pub fn grad_check(
    f: impl FnMut(&Tensor<f64>) -> f64,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_at(f, params, analytic, eps, &all)
}

/// [`grad_check`] restricted to the listed flat indices.
pub fn grad_check_at(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if params.shape() != analytic.shape() {
        return Err(CianError::shape(
            "grad_check",
            params.shape(),
            analytic.shape(),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(CianError::invalid("grad_check eps must be positive"));
    }
    let mut worst: Option<GradCheckReport> = None;
    let mut probe = params.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CianError::NonFinite(format!(
                "grad_check objective at index {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = rel_error(a, numeric);
        if worst.is_none_or(|w| err > w.max_rel_error) {
            worst = Some(GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(worst.unwrap_or(GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    }))
}
