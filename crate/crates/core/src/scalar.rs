//! Scalar abstraction: every numeric path in this crate is generic over a
//! floating point type so the same code can run in f32 (fast training) or
//! f64 (gradient checks, metrics).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type tag used by the binary container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
            Dtype::I64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::I64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

/// Floating point scalar usable everywhere in the crate.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    const DTYPE: Dtype;

    fn cast(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn cast_usize(x: usize) -> Self {
        Self::cast(x as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn cast(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn cast(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Nearest-neighbor resampling of a slice to a new length.
///
/// Index mapping follows `src = floor((i + 0.5) * n_src / n_dst)`, which is
/// the identity when lengths match.
pub fn resample_nearest<T: Copy>(src: &[T], dst_len: usize) -> Vec<T> {
    assert!(!src.is_empty(), "cannot resample an empty sequence");
    assert!(dst_len > 0, "cannot resample to length zero");
    let n = src.len();
    (0..dst_len)
        .map(|i| {
            let idx = ((i as f64 + 0.5) * n as f64 / dst_len as f64).floor() as usize;
            src[idx.min(n - 1)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_identity_when_lengths_match() {
        let v = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(resample_nearest(&v, 4), v);
    }

    #[test]
    fn resample_up_and_down() {
        let v = [1i64, 2, 3];
        assert_eq!(resample_nearest(&v, 6), vec![1, 1, 2, 2, 3, 3]);
        assert_eq!(resample_nearest(&v, 1), vec![2]);
    }

    #[test]
    fn scalar_round_trips_bytes() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        assert_eq!(<f32 as Scalar>::read_le(&buf), 1.25);
        buf.clear();
        (-7.5f64).write_le(&mut buf);
        assert_eq!(<f64 as Scalar>::read_le(&buf), -7.5);
    }
}
