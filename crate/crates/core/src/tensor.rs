//! Dense row-major tensors and the convolution arithmetic every layer is
//! built on: output extents, matrix multiply and the 3D im2col/col2im pair.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest rank a tensor may have (N×C×T×H×W).
pub const MAX_RANK: usize = 5;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

/// Floating-point element type. Training runs in `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank must be in 1..={MAX_RANK}, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    /// Builds a tensor whose element at flat offset `i` is `f(i)`.
    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: (0..len).map(f).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Option<Vec<usize>> {
        if offset >= self.data.len() {
            return None;
        }
        let mut index = vec![0; self.dims.len()];
        for (slot, &d) in index.iter_mut().zip(&self.dims).rev() {
            *slot = offset % d;
            offset /= d;
        }
        Some(index)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "zip_map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    fn expect_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        self.expect_dims(&other.dims, what)
    }

    /// Splits a rank-5 N×C×T×H×W shape into `(n, c, [t, h, w])`.
    pub fn dims5(&self) -> Result<(usize, usize, [usize; 3])> {
        match *self.dims.as_slice() {
            [n, c, t, h, w] => Ok((n, c, [t, h, w])),
            _ => Err(Error::Shape(format!(
                "expected N×C×T×H×W, got {:?}",
                self.dims
            ))),
        }
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let [m, n] = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    fn dims2(&self) -> Result<[usize; 2]> {
        match *self.dims.as_slice() {
            [m, n] => Ok([m, n]),
            _ => Err(Error::Shape(format!("expected a matrix, got {:?}", self.dims))),
        }
    }

    /// Matrix product `self[m,k] · other[k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.dims, other.dims
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data, &other.data, &mut out, false);
        Self::new(vec![m, n], out)
    }

    /// Unrolls a C×T×H×W volume into a `[C·kT·kH·kW, L]` column matrix.
    pub fn im2col3d(&self, geom: &ConvGeometry) -> Result<Self> {
        let (c, extents) = match *self.dims.as_slice() {
            [c, t, h, w] => (c, [t, h, w]),
            _ => {
                return Err(Error::Shape(format!(
                    "im2col3d expects C×T×H×W, got {:?}",
                    self.dims
                )))
            }
        };
        let out = geom.output_extents(extents)?;
        let rows = c * geom.kernel_volume();
        let cols: usize = out.iter().product();
        let mut buf = vec![T::zero(); rows * cols];
        im2col3d(&self.data, c, extents, geom, out, &mut buf);
        Self::new(vec![rows, cols], buf)
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` m×k and `b`
/// k×n, all row-major. Each output row is reduced in k-major order on a
/// single thread, so the result does not depend on how rows are scheduled.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        if !accumulate {
            c_row.fill(T::zero());
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_MATMUL_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c = aᵀ · b` with `a` k×m and `b` k×n.
pub fn gemm_at_b<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut at = vec![T::zero(); m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    gemm(m, k, n, &at, b, c, false);
}

/// `c += a · bᵀ` with `a` m×k and `b` n×k.
pub fn gemm_a_bt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let fill = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m > 1 && m * k * n >= PAR_MATMUL_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        c.chunks_mut(n).enumerate().for_each(fill);
    }
}

/// Output extent of one convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Geometry("kernel and stride must be at least 1".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Geometry(format!(
            "kernel larger than padded input ({kernel} > {input} + 2·{pad})"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Kernel, stride and zero-padding of a 3D convolution, ordered (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::Geometry(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// Cubic kernel `k` with uniform stride and `k / 2` padding.
    pub fn cubic(k: usize, stride: usize) -> Result<Self> {
        Self::new([k; 3], [stride; 3], [k / 2; 3])
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_out_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])?;
        }
        Ok(out)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Slice-level im2col: `x` is C×T×H×W, `cols` receives
/// `[C·kT·kH·kW, oT·oH·oW]` with rows in channel-major, then kernel-offset
/// order. Out-of-range taps read as zero.
pub(crate) fn im2col3d<T: Scalar>(
    x: &[T],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    out: [usize; 3],
    cols: &mut [T],
) {
    let [it, ih, iw] = input;
    let [ot, oh, ow] = out;
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let l = ot * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    row += 1;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        let plane = &mut dst[t * oh * ow..(t + 1) * oh * ow];
                        if ti < 0 || ti >= it as isize {
                            plane.fill(T::zero());
                            continue;
                        }
                        let xt = &xc[ti as usize * ih * iw..(ti as usize + 1) * ih * iw];
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            let line = &mut plane[h * ow..(h + 1) * ow];
                            if hi < 0 || hi >= ih as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let xh = &xt[hi as usize * iw..(hi as usize + 1) * iw];
                            for (w, v) in line.iter_mut().enumerate() {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                *v = if wi < 0 || wi >= iw as isize {
                                    T::zero()
                                } else {
                                    xh[wi as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3d`]: scatters-adds columns back into `x`.
pub(crate) fn col2im3d<T: Scalar>(
    cols: &[T],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    out: [usize; 3],
    x: &mut [T],
) {
    let [it, ih, iw] = input;
    let [ot, oh, ow] = out;
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let l = ot * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * l..(row + 1) * l];
                    row += 1;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            continue;
                        }
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                continue;
                            }
                            let base = (ti as usize * ih + hi as usize) * iw;
                            let line = &src[(t * oh + h) * ow..(t * oh + h + 1) * ow];
                            for (w, &v) in line.iter().enumerate() {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < iw as isize {
                                    xc[base + wi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
