//! Element type abstraction over `f32` / `f64`.
//!
//! Training runs in `f32`; gradient verification against central finite
//! differences needs `f64`, where truncation error is visible above the
//! rounding floor. Everything downstream is generic over [`Scalar`] so both
//! precisions share one code path.

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

/// Storage dtype tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn write_le(xs: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn write_le(xs: &[Self], out: &mut Vec<u8>) {
        let start = out.len();
        out.resize(start + 4 * xs.len(), 0);
        LittleEndian::write_f32_into(xs, &mut out[start..]);
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        let mut xs = vec![0.0f32; bytes.len() / 4];
        LittleEndian::read_f32_into(bytes, &mut xs);
        xs
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn write_le(xs: &[Self], out: &mut Vec<u8>) {
        let start = out.len();
        out.resize(start + 8 * xs.len(), 0);
        LittleEndian::write_f64_into(xs, &mut out[start..]);
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        let mut xs = vec![0.0f64; bytes.len() / 8];
        LittleEndian::read_f64_into(bytes, &mut xs);
        xs
    }
}
