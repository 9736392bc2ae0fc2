//! Stage-1 key: the group index `g` written as sign-encoded concentric rings
//! in the carrier channel's centred spectrum.
//!
//! Ring `j` covers radii `[r_min + j·w, r_min + (j+1)·w)` and holds the real
//! constant `+A` when bit `j` of `g` is set, `-A` otherwise. Decoding takes
//! the sign of each ring's mean real part. Annulus means do not depend on
//! orientation, so rotations about the centre leave the decoded bits intact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_plane, paste_plane, rotate_plane};
use crate::spectrum::{radius_map, Spectrum};
use crate::tensor::{LatentTensor, Shape};

pub const DEFAULT_R_MIN: f64 = 1.0;
pub const DEFAULT_RING_WIDTH: f64 = 1.0;

/// Rings needed for `m` groups: `⌈log₂ m⌉`, at least one.
pub fn rings_for(m: u64) -> u32 {
    if m <= 2 {
        1
    } else {
        64 - (m - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingGeometry {
    pub channel: usize,
    pub r_min: f64,
    pub ring_width: f64,
    pub n_rings: u32,
    pub amplitude: f64,
}

impl RingGeometry {
    /// Default geometry for `m` groups with the power-preserving amplitude
    /// `√(H·W)` (the RMS magnitude of a unit white-noise DFT coefficient).
    pub fn for_groups(m: u64, shape: Shape) -> Self {
        Self {
            channel: 0,
            r_min: DEFAULT_R_MIN,
            ring_width: DEFAULT_RING_WIDTH,
            n_rings: rings_for(m),
            amplitude: ((shape.h * shape.w) as f64).sqrt(),
        }
    }

    pub fn outer_radius(&self) -> f64 {
        self.r_min + self.n_rings as f64 * self.ring_width
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if self.channel >= shape.c {
            return Err(Error::GeometryDoesNotFit(format!(
                "carrier channel {} but tensor has {} channels",
                self.channel, shape.c
            )));
        }
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::GeometryDoesNotFit("amplitude must be positive".into()));
        }
        if !(self.ring_width > 0.0) || self.r_min < 0.0 || self.n_rings == 0 {
            return Err(Error::GeometryDoesNotFit("rings must have positive width".into()));
        }
        let limit = shape.h.min(shape.w) as f64 / 2.0;
        if self.outer_radius() >= limit {
            return Err(Error::GeometryDoesNotFit(format!(
                "outer ring radius {} exceeds {}",
                self.outer_radius(),
                limit
            )));
        }
        Ok(())
    }

    /// Ring index of every spectrum bin (row-major), `None` outside all rings.
    pub fn ring_map(&self, h: usize, w: usize) -> Vec<Option<u32>> {
        radius_map(h, w)
            .into_iter()
            .map(|r| {
                if r < self.r_min {
                    return None;
                }
                let j = ((r - self.r_min) / self.ring_width).floor() as u32;
                (j < self.n_rings).then_some(j)
            })
            .collect()
    }

    fn ring_counts(map: &[Option<u32>], n_rings: u32) -> Vec<usize> {
        let mut counts = vec![0usize; n_rings as usize];
        for j in map.iter().flatten() {
            counts[*j as usize] += 1;
        }
        counts
    }
}

/// The bit pattern of one group under a geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPattern {
    pub g: u64,
    pub bits: Vec<bool>,
    pub geometry: RingGeometry,
}

impl GroupPattern {
    pub fn new(g: u64, m: u64, geometry: RingGeometry) -> Result<Self> {
        if g >= m {
            return Err(Error::GroupOutOfRange { group: g, m });
        }
        let bits = (0..geometry.n_rings).map(|j| (g >> j) & 1 == 1).collect();
        Ok(Self { g, bits, geometry })
    }

    pub fn value(&self) -> u64 {
        bits_value(&self.bits)
    }
}

fn bits_value(bits: &[bool]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0u64, |acc, (j, &b)| if b { acc | (1 << j) } else { acc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub rotation_step_deg: f64,
    pub window_size: usize,
    pub window_stride: usize,
    pub enable_rotation: bool,
    pub enable_window: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rotation_step_deg: 2.0,
            window_size: 32,
            window_stride: 8,
            enable_rotation: true,
            enable_window: true,
        }
    }
}

impl SearchConfig {
    /// Identity alignment only.
    pub fn none() -> Self {
        Self {
            enable_rotation: false,
            enable_window: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if !(self.rotation_step_deg > 0.0 && self.rotation_step_deg <= 90.0) {
            return Err(Error::InvalidSearch(format!(
                "rotation step {} outside (0, 90]",
                self.rotation_step_deg
            )));
        }
        if self.window_size == 0 || self.window_size > shape.h.min(shape.w) {
            return Err(Error::InvalidSearch(format!(
                "window size {} does not fit {}",
                self.window_size, shape
            )));
        }
        if self.window_stride == 0 {
            return Err(Error::InvalidSearch("window stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Rotation angles tried after the identity, ascending.
    pub fn rotation_angles(&self) -> Vec<f64> {
        if !self.enable_rotation {
            return Vec::new();
        }
        (1..)
            .map(|k| k as f64 * self.rotation_step_deg)
            .take_while(|&a| a < 360.0 - 1e-9)
            .collect()
    }

    fn window_origins(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        if !self.enable_window {
            return Vec::new();
        }
        let ws = self.window_size;
        let mut out = Vec::new();
        for top in (0..=h - ws).step_by(self.window_stride) {
            for left in (0..=w - ws).step_by(self.window_stride) {
                out.push((top, left));
            }
        }
        out
    }
}

/// Where the identifier was found during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IdentifierAlignment {
    Identity,
    Rotation { degrees: f64 },
    Window { top: usize, left: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extraction {
    pub group: u64,
    pub score: f64,
    pub alignment: IdentifierAlignment,
}

pub fn embed(z: &LatentTensor, g: u64, m: u64, geo: &RingGeometry) -> Result<LatentTensor> {
    let shape = z.shape();
    geo.validate(shape)?;
    let pattern = GroupPattern::new(g, m, *geo)?;
    let map = geo.ring_map(shape.h, shape.w);
    let mut spec = Spectrum::forward(z.channel(geo.channel), shape.h, shape.w);
    for (c, ring) in spec.coeffs.iter_mut().zip(&map) {
        if let Some(j) = ring {
            let sign = if pattern.bits[*j as usize] { 1.0 } else { -1.0 };
            *c = (sign * geo.amplitude).into();
        }
    }
    let mut out = z.clone();
    out.channel_mut(geo.channel).copy_from_slice(&spec.inverse());
    Ok(out)
}

/// Zeroes every ring coefficient of the carrier channel. The coefficients the
/// pattern overwrote are not recoverable, so nothing is restored.
pub fn remove_pattern(z: &LatentTensor, _g: u64, geo: &RingGeometry) -> Result<LatentTensor> {
    let shape = z.shape();
    geo.validate(shape)?;
    let map = geo.ring_map(shape.h, shape.w);
    let mut spec = Spectrum::forward(z.channel(geo.channel), shape.h, shape.w);
    for (c, ring) in spec.coeffs.iter_mut().zip(&map) {
        if ring.is_some() {
            *c = 0.0.into();
        }
    }
    let mut out = z.clone();
    out.channel_mut(geo.channel).copy_from_slice(&spec.inverse());
    Ok(out)
}

/// Mean real part of each ring.
pub fn ring_means(plane: &[f32], h: usize, w: usize, geo: &RingGeometry) -> Vec<f64> {
    let map = geo.ring_map(h, w);
    ring_means_with(plane, h, w, geo, &map)
}

fn ring_means_with(plane: &[f32], h: usize, w: usize, geo: &RingGeometry, map: &[Option<u32>]) -> Vec<f64> {
    let spec = Spectrum::forward(plane, h, w);
    let mut sums = vec![0f64; geo.n_rings as usize];
    for (c, ring) in spec.coeffs.iter().zip(map) {
        if let Some(j) = ring {
            sums[*j as usize] += c.re;
        }
    }
    let counts = RingGeometry::ring_counts(map, geo.n_rings);
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

fn decode(means: &[f64], amplitude: f64, m: u64) -> (u64, f64) {
    let bits: Vec<bool> = means.iter().map(|&v| v > 0.0).collect();
    let score = means
        .iter()
        .map(|v| v.abs() / amplitude)
        .fold(f64::INFINITY, f64::min);
    (bits_value(&bits) % m, if score.is_finite() { score } else { 0.0 })
}

/// Best-scoring decode over the configured alignments. Ties go to the
/// earliest alignment in enumeration order (identity, rotations, windows).
pub fn extract(z: &LatentTensor, m: u64, geo: &RingGeometry, cfg: &SearchConfig) -> Result<Extraction> {
    let shape = z.shape();
    geo.validate(shape)?;
    cfg.validate(shape)?;
    let (h, w) = (shape.h, shape.w);
    let plane = z.channel(geo.channel);
    let map = geo.ring_map(h, w);

    let mut alignments = vec![IdentifierAlignment::Identity];
    alignments.extend(
        cfg.rotation_angles()
            .into_iter()
            .map(|degrees| IdentifierAlignment::Rotation { degrees }),
    );
    alignments.extend(
        cfg.window_origins(h, w)
            .into_iter()
            .map(|(top, left)| IdentifierAlignment::Window { top, left }),
    );

    let ws = cfg.window_size;
    let scored: Vec<(u64, f64)> = alignments
        .par_iter()
        .map(|a| {
            let aligned = match *a {
                IdentifierAlignment::Identity => plane.to_vec(),
                IdentifierAlignment::Rotation { degrees } => rotate_plane(plane, h, w, degrees),
                IdentifierAlignment::Window { top, left } => {
                    // recentre the window so its centre sits on the pivot pixel
                    let patch = crop_plane(plane, w, top, left, ws, ws);
                    let mut canvas = vec![0f32; h * w];
                    paste_plane(&mut canvas, w, &patch, ws, ws, h / 2 - ws / 2, w / 2 - ws / 2);
                    canvas
                }
            };
            decode(&ring_means_with(&aligned, h, w, geo, &map), geo.amplitude, m)
        })
        .collect();

    let mut best = 0;
    for (k, s) in scored.iter().enumerate() {
        if s.1 > scored[best].1 {
            best = k;
        }
    }
    Ok(Extraction {
        group: scored[best].0,
        score: scored[best].1,
        alignment: alignments[best],
    })
}

/// Amplitude calibration: starting from the power-preserving `√(H·W)`, the
/// largest multiple `κ ∈ {1.0, 0.95, …, 0.5}` whose embeds keep the tensor
/// std within 5% of 1 and decode every trial correctly on a clean channel.
pub fn calibrate_amplitude(shape: Shape, m: u64, base: RingGeometry, trials: usize, seed: u64) -> Result<RingGeometry> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<(LatentTensor, u64)> = (0..trials.max(1))
        .map(|_| {
            let data = (0..shape.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            (LatentTensor::from_raw(shape, data), rng.random_range(0..m))
        })
        .collect();
    let a0 = ((shape.h * shape.w) as f64).sqrt();
    for step in 0..=10 {
        let kappa = 1.0 - 0.05 * step as f64;
        let geo = RingGeometry {
            amplitude: a0 * kappa,
            ..base
        };
        geo.validate(shape)?;
        let mut ok = true;
        for (z, g) in &samples {
            let e = embed(z, *g, m, &geo)?;
            let std = e.std();
            let ex = extract(&e, m, &geo, &SearchConfig::none())?;
            if (std - 1.0).abs() > 0.05 || ex.group != *g {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(geo);
        }
    }
    Err(Error::CalibrationDiverged {
        rounds: 11,
        detail: "no amplitude met the std and accuracy constraints".into(),
    })
}
