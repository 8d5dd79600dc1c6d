//! Dense N-d arrays, a Wengert-tape reverse-mode differentiator over a closed
//! operation set, SGD, finite-difference gradient checking and the binary
//! checkpoint container.
//!
//! Activations are laid out N×C×H×W and convolution weights Cout×Cin×Kh×Kw.
//! Everything is generic over [`Elem`] so that training can run in `f32`
//! while gradient checks run in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
pub mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tape::{Grads, ParamId, Tape, Var};

/// Floating point width of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Scalar element type of the engine.
pub trait Elem:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    /// `c ← alpha·a·b + beta·c` for strided row/column-major operands.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 always converts")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float always converts")
    }
}

macro_rules! impl_elem {
    ($t:ty, $prec:expr, $bytes:expr, $gemm:path) => {
        impl Elem for $t {
            const PRECISION: Precision = $prec;
            const BYTES: usize = $bytes;

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
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the asserts above bound every strided access.
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_elem!(f32, Precision::F32, 4, matrixmultiply::sgemm);
impl_elem!(f64, Precision::F64, 8, matrixmultiply::dgemm);

/// Contiguous row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Dims as N×C×H×W, or a shape error naming `layer`.
    pub fn nchw(&self, layer: &str) -> Result<[usize; 4]> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                layer,
                format!("expected N×C×H×W input, got {:?}", self.dims),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; dims must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff: dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum()
    }

    /// Rows `[start, end)` along the leading (batch) dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let n = self.dims[0];
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_batch",
                format!("range {start}..{end} outside batch {n}"),
            ));
        }
        let stride = self.data.len() / n;
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Ok(Tensor {
            dims,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Gathers batch rows in the given order.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Self> {
        let n = self.dims[0];
        if rows.is_empty() {
            return Err(Error::shape("gather_batch", "no rows requested"));
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather_batch", format!("row {r} >= {n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = rows.len();
        Ok(Tensor { dims, data })
    }

    /// Stacks tensors of equal trailing dims along the batch dimension.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_batch", "nothing to concatenate"))?;
        let mut dims = first.dims.clone();
        dims[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{:?} vs {:?}", p.dims, first.dims),
                ));
            }
            dims[0] += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { dims, data })
    }

    /// Channels `[start, end)` of an N×C×H×W tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.nchw("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} outside {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor {
            dims: vec![n, end - start, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f32>::from_vec(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn slice_channels_roundtrip() {
        let t = Tensor::<f32>::from_vec(vec![2, 3, 1, 2], (0..12).map(|x| x as f32).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.dims(), &[2, 2, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
