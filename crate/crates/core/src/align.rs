//! Stage-2 matching of a reconstructed tensor against codebook noises under
//! a set of candidate alignments.
//!
//! The query, not the candidate, is transformed: rotations rotate the query,
//! and crop candidates shrink the query back to the crop's size and slide it
//! over the noise. Slide scores are masked cosines computed for every offset
//! at once by FFT cross-correlation, with window energies from a summed-area
//! table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resize_plane, rotate_plane};
use crate::spectrum::{fft2_in_place, C64};
use crate::tensor::{dot, norm, LatentTensor, Shape};

pub fn default_crop_scales() -> Vec<f64> {
    (0..10).map(|k| 0.95 - 0.05 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub rotation: bool,
    pub rotation_step_deg: f64,
    pub crop: bool,
    pub crop_scales: Vec<f64>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            rotation: false,
            rotation_step_deg: 2.0,
            crop: false,
            crop_scales: default_crop_scales(),
        }
    }
}

impl Stage2Config {
    pub fn all() -> Self {
        Self {
            rotation: true,
            crop: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation && !(self.rotation_step_deg > 0.0 && self.rotation_step_deg <= 90.0) {
            return Err(Error::InvalidSearch(format!(
                "stage-2 rotation step {} outside (0, 90]",
                self.rotation_step_deg
            )));
        }
        if self.crop && self.crop_scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::InvalidSearch("crop scales must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchAlignment {
    Identity,
    /// The query was rotated by this angle before matching.
    Rotation { degrees: f64 },
    /// The query, shrunk to `height×width`, matched the noise window at
    /// `(top, left)`.
    Crop { height: usize, width: usize, top: usize, left: usize },
}

/// One crop hypothesis: the query resized down to `lh×lw`.
#[derive(Debug, Clone)]
pub struct CropTemplate {
    pub scale: f64,
    pub lh: usize,
    pub lw: usize,
    /// Per-channel `lh×lw` planes, jointly unit norm.
    pub patch: Vec<Vec<f32>>,
    /// Per-channel conjugate spectra of the patch zero-padded to `H×W`.
    spectra: Vec<Vec<C64>>,
}

/// A reconstructed tensor prepared for repeated stage-2 scoring.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub shape: Shape,
    /// Unit-norm query.
    pub identity: Vec<f32>,
    /// `(angle, unit-norm rotated query)`.
    pub rotations: Vec<(f64, Vec<f32>)>,
    pub crops: Vec<CropTemplate>,
}

fn unit(v: Vec<f32>) -> Result<Vec<f32>> {
    let n = norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let k = (1.0 / n) as f32;
    Ok(v.into_iter().map(|x| x * k).collect())
}

impl PreparedQuery {
    pub fn new(z: &LatentTensor, cfg: &Stage2Config) -> Result<Self> {
        cfg.validate()?;
        let shape = z.shape();
        let (h, w) = (shape.h, shape.w);
        let identity = unit(z.as_slice().to_vec())?;

        let mut rotations = Vec::new();
        if cfg.rotation {
            let angles = (1..)
                .map(|k| k as f64 * cfg.rotation_step_deg)
                .take_while(|&a| a < 360.0 - 1e-9);
            for degrees in angles {
                let mut v = Vec::with_capacity(shape.len());
                for c in 0..shape.c {
                    v.extend(rotate_plane(z.channel(c), h, w, degrees));
                }
                if let Ok(v) = unit(v) {
                    rotations.push((degrees, v));
                }
            }
        }

        let mut crops = Vec::new();
        if cfg.crop {
            for &scale in &cfg.crop_scales {
                let lh = ((scale * h as f64).round() as usize).clamp(1, h);
                let lw = ((scale * w as f64).round() as usize).clamp(1, w);
                if lh == h && lw == w {
                    continue;
                }
                let planes: Vec<Vec<f32>> = (0..shape.c).map(|c| resize_plane(z.channel(c), h, w, lh, lw)).collect();
                let total = planes.iter().map(|p| dot(p, p)).sum::<f64>().sqrt();
                if !(total > 0.0) {
                    continue;
                }
                let k = (1.0 / total) as f32;
                let patch: Vec<Vec<f32>> = planes.into_iter().map(|p| p.into_iter().map(|x| x * k).collect()).collect();
                let spectra = patch
                    .iter()
                    .map(|p| {
                        let mut buf = vec![C64::default(); h * w];
                        for y in 0..lh {
                            for x in 0..lw {
                                buf[y * w + x] = C64::new(p[y * lw + x] as f64, 0.0);
                            }
                        }
                        fft2_in_place(&mut buf, h, w, false);
                        buf.iter().map(|c| c.conj()).collect()
                    })
                    .collect();
                crops.push(CropTemplate {
                    scale,
                    lh,
                    lw,
                    patch,
                    spectra,
                });
            }
        }
        Ok(Self {
            shape,
            identity,
            rotations,
            crops,
        })
    }

    /// Alignment hypotheses per candidate, counting each crop offset.
    pub fn alignment_count(&self) -> usize {
        1 + self.rotations.len()
            + self
                .crops
                .iter()
                .map(|t| (self.shape.h - t.lh + 1) * (self.shape.w - t.lw + 1))
                .sum::<usize>()
    }

    /// Best cosine over all alignments. Ties keep the earliest alignment
    /// (identity, rotations by angle, crops by scale then offset).
    pub fn score(&self, z: &[f32]) -> (f64, MatchAlignment) {
        let zn = norm(z);
        if !(zn > 0.0) {
            return (0.0, MatchAlignment::Identity);
        }
        let mut best = (dot(&self.identity, z) / zn, MatchAlignment::Identity);
        for (degrees, q) in &self.rotations {
            let s = dot(q, z) / zn;
            if s > best.0 {
                best = (s, MatchAlignment::Rotation { degrees: *degrees });
            }
        }
        if !self.crops.is_empty() {
            self.score_crops(z, &mut best);
        }
        best
    }

    fn score_crops(&self, z: &[f32], best: &mut (f64, MatchAlignment)) {
        let Shape { c: nc, h, w } = self.shape;
        let plane = h * w;
        let spectra: Vec<Vec<C64>> = (0..nc)
            .map(|c| {
                let mut buf: Vec<C64> = z[c * plane..(c + 1) * plane].iter().map(|&v| C64::new(v as f64, 0.0)).collect();
                fft2_in_place(&mut buf, h, w, false);
                buf
            })
            .collect();
        // summed-area table of the channel-summed energy, (h+1)×(w+1)
        let mut sat = vec![0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0f64;
            for x in 0..w {
                let mut e = 0f64;
                for c in 0..nc {
                    let v = z[c * plane + y * w + x] as f64;
                    e += v * v;
                }
                row += e;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let energy = |t: usize, l: usize, lh: usize, lw: usize| -> f64 {
            let a = sat[(t + lh) * (w + 1) + l + lw];
            let b = sat[t * (w + 1) + l + lw];
            let c = sat[(t + lh) * (w + 1) + l];
            let d = sat[t * (w + 1) + l];
            a - b - c + d
        };
        let inv = 1.0 / plane as f64;
        let mut acc = vec![C64::default(); plane];
        for tpl in &self.crops {
            acc.iter_mut().for_each(|v| *v = C64::default());
            for c in 0..nc {
                for ((a, x), p) in acc.iter_mut().zip(&spectra[c]).zip(&tpl.spectra[c]) {
                    *a += x * p;
                }
            }
            fft2_in_place(&mut acc, h, w, true);
            for t in 0..=h - tpl.lh {
                for l in 0..=w - tpl.lw {
                    let e = energy(t, l, tpl.lh, tpl.lw);
                    if e <= 0.0 {
                        continue;
                    }
                    let s = acc[t * w + l].re * inv / e.sqrt();
                    if s > best.0 {
                        *best = (
                            s,
                            MatchAlignment::Crop {
                                height: tpl.lh,
                                width: tpl.lw,
                                top: t,
                                left: l,
                            },
                        );
                    }
                }
            }
        }
    }

    /// ℓ2 distance between the aligned query and the matching part of `z`,
    /// with the query rescaled to unit RMS over the compared elements.
    pub fn l2(&self, z: &[f32], alignment: MatchAlignment) -> f64 {
        let aligned_l2 = |q: &[f32]| -> f64 {
            let k = (q.len() as f64).sqrt();
            q.iter()
                .zip(z)
                .map(|(&a, &b)| {
                    let d = a as f64 * k - b as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        match alignment {
            MatchAlignment::Identity => aligned_l2(&self.identity),
            MatchAlignment::Rotation { degrees } => self
                .rotations
                .iter()
                .find(|(d, _)| *d == degrees)
                .map(|(_, q)| aligned_l2(q))
                .unwrap_or(f64::NAN),
            MatchAlignment::Crop { height, width, top, left } => {
                let Some(tpl) = self.crops.iter().find(|t| t.lh == height && t.lw == width) else {
                    return f64::NAN;
                };
                let Shape { c: nc, h, w } = self.shape;
                let k = ((nc * height * width) as f64).sqrt();
                let mut acc = 0f64;
                for c in 0..nc {
                    for y in 0..height {
                        for x in 0..width {
                            let q = tpl.patch[c][y * width + x] as f64 * k;
                            let v = z[c * h * w + (top + y) * w + left + x] as f64;
                            acc += (q - v) * (q - v);
                        }
                    }
                }
                acc.sqrt()
            }
        }
    }

    /// Number of elements compared under an alignment.
    pub fn compared_dim(&self, alignment: MatchAlignment) -> usize {
        match alignment {
            MatchAlignment::Crop { height, width, .. } => self.shape.c * height * width,
            _ => self.shape.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::gaussian_tensor;
    use crate::geometry::{crop_plane, resize_plane};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64) -> LatentTensor {
        gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(seed), Shape::sd_latent())
    }

    #[test]
    fn identity_score_is_cosine() {
        let a = noise(1);
        let b = noise(2);
        let q = PreparedQuery::new(&a, &Stage2Config::default()).unwrap();
        let (s, al) = q.score(b.as_slice());
        let direct = crate::tensor::cosine_similarity(&a, &b).unwrap();
        assert!((s - direct).abs() < 1e-6);
        assert_eq!(al, MatchAlignment::Identity);
        let (s, _) = q.score(a.as_slice());
        assert!((s - 1.0).abs() < 1e-6);
        // a self-match differs only by the RMS rescaling
        let expect = (a.norm() - (a.shape().len() as f64).sqrt()).abs();
        assert!((q.l2(a.as_slice(), MatchAlignment::Identity) - expect).abs() < 1e-3);
    }

    #[test]
    fn crop_search_finds_the_window() {
        let z = noise(3);
        let (h, w, lh, lw, top, left) = (64, 64, 48, 48, 5, 11);
        let mut attacked = z.clone();
        for c in 0..4 {
            let crop = crop_plane(z.channel(c), w, top, left, lh, lw);
            attacked.channel_mut(c).copy_from_slice(&resize_plane(&crop, lh, lw, h, w));
        }
        let q = PreparedQuery::new(&attacked, &Stage2Config { crop: true, ..Default::default() }).unwrap();
        let (s, al) = q.score(z.as_slice());
        assert_eq!(al, MatchAlignment::Crop { height: 48, width: 48, top, left });
        assert!(s > 0.7, "{s}");
        let (null, _) = q.score(noise(4).as_slice());
        assert!(null < 0.15, "{null}");
    }

    #[test]
    fn crop_scores_match_direct_masked_cosine() {
        let z = noise(5);
        let q = PreparedQuery::new(&noise(6), &Stage2Config { crop: true, crop_scales: vec![0.5], ..Default::default() }).unwrap();
        let tpl = &q.crops[0];
        let mut best = (f64::NEG_INFINITY, MatchAlignment::Identity);
        for t in 0..=64 - tpl.lh {
            for l in 0..=64 - tpl.lw {
                let mut num = 0f64;
                let mut e = 0f64;
                for c in 0..4 {
                    for y in 0..tpl.lh {
                        for x in 0..tpl.lw {
                            let v = z.channel(c)[(t + y) * 64 + l + x] as f64;
                            num += tpl.patch[c][y * tpl.lw + x] as f64 * v;
                            e += v * v;
                        }
                    }
                }
                let s = num / e.sqrt();
                if s > best.0 {
                    best = (s, MatchAlignment::Crop { height: 32, width: 32, top: t, left: l });
                }
            }
        }
        let mut got = (f64::NEG_INFINITY, MatchAlignment::Identity);
        q.score_crops(z.as_slice(), &mut got);
        assert_eq!(got.1, best.1);
        assert!((got.0 - best.0).abs() < 1e-6);
    }

    #[test]
    fn rotation_search_recovers_rotated_query() {
        let z = noise(7);
        let mut rotated = z.clone();
        for c in 0..4 {
            rotated.channel_mut(c).copy_from_slice(&rotate_plane(z.channel(c), 64, 64, 30.0));
        }
        let q = PreparedQuery::new(&rotated, &Stage2Config { rotation: true, ..Default::default() }).unwrap();
        let (s, al) = q.score(z.as_slice());
        assert_eq!(al, MatchAlignment::Rotation { degrees: 330.0 });
        assert!(s > 0.3, "{s}");
        assert_eq!(q.rotations.len(), 179);
    }

    #[test]
    fn zero_query_is_rejected() {
        let z = LatentTensor::zeros(Shape::sd_latent());
        assert!(matches!(PreparedQuery::new(&z, &Stage2Config::default()), Err(Error::ZeroNorm)));
    }
}
