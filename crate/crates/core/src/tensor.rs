//! Dense row-major `f32` tensors and the `TSR1` binary file format.
//!
//! File layout (all little-endian): the 8-byte magic `TSR1\0\0\0\0`, a `u32`
//! rank, `rank` `u32` dimensions, then the `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 8] = *b"TSR1\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a length mismatch and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Rounds `f64` values into a tensor.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Interprets the tensor as an image `(channels, height, width)`:
    /// rank 3 is `CHW`, rank 2 is a single-channel `HW` plane and rank 1 a
    /// single row.
    pub fn spatial_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [h, w] => Ok((1, *h, *w)),
            [n] => Ok((1, 1, *n)),
            other => Err(Error::Shape(format!("cannot interpret shape {other:?} as an image"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
        if bytes.len() < 12 || bytes[..8] != TENSOR_MAGIC {
            return Err("missing TSR1 magic".into());
        }
        let read_u32 = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated header".to_string())
        };
        let rank = read_u32(8)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(read_u32(12 + 4 * i)? as usize);
        }
        let start = 12 + 4 * rank;
        let n: usize = shape.iter().product();
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != 4 * n {
            return Err(format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                4 * n
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    pub fn read(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// Valid value interval per channel. A single interval applies to every
/// channel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<(f32, f32)>", into = "Vec<(f32, f32)>")]
pub struct ValueRange {
    channels: Vec<(f32, f32)>,
}

impl ValueRange {
    pub fn uniform(lo: f32, hi: f32) -> Result<Self> {
        ValueRange::per_channel(vec![(lo, hi)])
    }

    pub fn per_channel(channels: Vec<(f32, f32)>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("value range needs at least one channel".into()));
        }
        for &(lo, hi) in &channels {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("invalid value range [{lo}, {hi}]")));
            }
        }
        Ok(ValueRange { channels })
    }

    /// Per-channel `[min, max]` of `x`.
    pub fn from_data(x: &Tensor) -> Result<Self> {
        let (c, h, w) = x.spatial_dims()?;
        let plane = h * w;
        let channels = (0..c)
            .map(|ch| {
                x.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect();
        ValueRange::per_channel(channels)
    }

    pub fn channel(&self, c: usize) -> (f32, f32) {
        if self.channels.len() == 1 {
            self.channels[0]
        } else {
            self.channels[c]
        }
    }

    pub fn channels(&self) -> &[(f32, f32)] {
        &self.channels
    }

    /// Checks the range covers an image with `c` channels.
    pub fn check_channels(&self, c: usize) -> Result<()> {
        if self.channels.len() != 1 && self.channels.len() != c {
            return Err(Error::Shape(format!(
                "value range has {} channels, input has {c}",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<(f32, f32)>> for ValueRange {
    type Error = Error;

    fn try_from(channels: Vec<(f32, f32)>) -> Result<Self> {
        ValueRange::per_channel(channels)
    }
}

impl From<ValueRange> for Vec<(f32, f32)> {
    fn from(r: ValueRange) -> Self {
        r.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..8], b"TSR1\0\0\0\0");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Tensor::from_bytes(b"TSR2\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn spatial_dims_by_rank() {
        assert_eq!(Tensor::zeros(vec![3, 4, 5]).spatial_dims().unwrap(), (3, 4, 5));
        assert_eq!(Tensor::zeros(vec![4, 5]).spatial_dims().unwrap(), (1, 4, 5));
        assert_eq!(Tensor::zeros(vec![5]).spatial_dims().unwrap(), (1, 1, 5));
        assert!(Tensor::zeros(vec![1, 2, 3, 4]).spatial_dims().is_err());
    }
}
