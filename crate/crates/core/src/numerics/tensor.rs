use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::config::Dtype;
use crate::error::{shape_err, Result};

/// Real scalar a model can be instantiated over.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `DTYPE.size_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp(self)` for `self <= 0`, as used by softmax after subtracting the
    /// row maximum. The f32 version is a branch-free polynomial so the loop
    /// vectorizes; its relative error stays below 2e-7.
    #[inline]
    fn exp_nonpos(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    #[inline]
    fn exp_nonpos(self) -> Self {
        // x = n·ln2 + r, |r| <= ln2/2; 2^n is built from the exponent bits.
        const ROUND: f32 = 12_582_912.0; // 1.5·2^23
        let x = self.clamp(-87.0, 0.0);
        let big = x * std::f32::consts::LOG2_E + ROUND;
        let n = big - ROUND;
        let ni = big.to_bits().wrapping_sub(ROUND.to_bits());
        let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (0.166_666_67
                        + r * (0.041_666_668
                            + r * (0.008_333_334 + r * (0.001_388_889 + r * 0.000_198_412_7))))));
        let e = p * f32::from_bits(ni.wrapping_add(127) << 23);
        // Zero rather than a subnormal-producing tiny value.
        if self < -87.0 {
            0.0
        } else {
            e
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::from_vec",
                format!("dims {dims:?} hold {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent for matrices; 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            _ => self.dims[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.expect_same_dims(other, op)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    /// Casts element-wise to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}
