//! Latent tensors (C×H×W, channel-major then row-major) and the flat-vector
//! numerics shared by every stage: dot products, cosine similarity, ℓ2.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    /// The 4×64×64 latent used by Stable Diffusion at 512×512.
    pub const fn sd_latent() -> Self {
        Self::new(4, 64, 64)
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidSpec(format!("shape {self} has a zero dimension")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Wraps `data`, rejecting wrong lengths and non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape} ({} values)", shape.len()),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees length and finiteness.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn ensure_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_string(),
                got: self.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        let k = k as f32;
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k·other`.
    pub fn add_scaled(&mut self, other: &LatentTensor, k: f64) -> Result<()> {
        other.ensure_shape(self.shape)?;
        let k = k as f32;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Divides by the population std; fails on constant input.
    pub fn unit_std(&self) -> Result<LatentTensor> {
        let s = self.std();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ZeroVariance);
        }
        let mut out = self.clone();
        out.scale(1.0 / s);
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        for d in [self.shape.c, self.shape.h, self.shape.w] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "tensor file",
            detail: detail.to_string(),
        };
        let mut header = [0u8; 4 + 2 + 2 + 12];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[0..4] != TENSOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != TENSOR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = u16::from_le_bytes([header[6], header[7]]);
        if dtype != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype tag {dtype}")));
        }
        let dim = |k: usize| u32::from_le_bytes(header[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2));
        if shape.is_empty() || shape.len() > (1 << 28) {
            return Err(bad(&format!("implausible shape {shape}")));
        }
        let mut payload = vec![0u8; shape.len() * 4];
        r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        LatentTensor::from_vec(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

pub const TENSOR_MAGIC: &[u8; 4] = b"WNDT";
pub const TENSOR_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;

const LANES: usize = 16;

/// Dot product with fixed lane-wise accumulation order, so results are
/// bit-identical across runs and thread counts.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (*x as f64) * (*y as f64);
    }
    acc.iter().map(|&v| v as f64).sum::<f64>() + tail
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity over flattened tensors.
pub fn cosine_similarity(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    b.ensure_shape(a.shape)?;
    cosine_slices(a.as_slice(), b.as_slice())
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Euclidean distance over flattened tensors.
pub fn l2_distance(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    b.ensure_shape(a.shape)?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> LatentTensor {
        let data = (0..shape.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        LatentTensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn cosine_and_l2_basics() {
        let a = ramp(Shape::new(2, 8, 8));
        let mut neg = a.clone();
        neg.scale(-1.0);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_rejected() {
        let a = ramp(Shape::new(1, 4, 4));
        let z = LatentTensor::zeros(a.shape());
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn non_finite_rejected() {
        let mut data = vec![0.0; 16];
        data[3] = f32::NAN;
        assert!(matches!(
            LatentTensor::from_vec(Shape::new(1, 4, 4), data),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn tensor_file_round_trip_and_corruption() {
        let a = ramp(Shape::new(3, 5, 7));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"WNDT");
        assert_eq!(LatentTensor::read_from(buf.as_slice()).unwrap(), a);

        let truncated = &buf[..buf.len() - 3];
        assert!(LatentTensor::read_from(truncated).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(LatentTensor::read_from(bad_magic.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(LatentTensor::read_from(extra.as_slice()).is_err());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..1003).map(|i| (i as f32).cos()).collect();
        let b: Vec<f32> = (0..1003).map(|i| (i as f32 * 0.5).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-3);
    }
}
