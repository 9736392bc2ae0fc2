//! The attack battery. Every attack maps a [`ChannelImage`] to another of the
//! same shape; randomized ones draw from an explicit attack seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{mix, role_rng, Channel, ChannelImage, ChannelParams, Role};
use crate::error::{Error, Result};
use crate::geometry::{box_blur_plane, crop_plane, resize_plane, rotate_plane};
use crate::tensor::LatentTensor;

/// Quantization step at quality 50, in units of the latent std.
pub const JPEG_BASE_STEP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StegMode {
    Forge,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttackSpec {
    Rotate(f64),
    Jpeg(u32),
    CropScale(f64),
    Blur(usize),
    GaussNoise(f64),
    Brightness(f64),
    Regenerate(u32),
    Steganalysis(StegMode, usize),
    ReconstructionForgery,
}

impl AttackSpec {
    /// The six transformations of the robustness battery at their default
    /// severities.
    pub fn battery() -> [AttackSpec; 6] {
        [
            AttackSpec::Rotate(75.0),
            AttackSpec::Jpeg(25),
            AttackSpec::CropScale(0.75),
            AttackSpec::Blur(8),
            AttackSpec::GaussNoise(0.1),
            AttackSpec::Brightness(6.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidAttack(msg));
        match *self {
            AttackSpec::Rotate(d) if !(d > 0.0 && d <= 360.0) => bad(format!("rotation {d} outside (0, 360]")),
            AttackSpec::Jpeg(q) if !(1..=100).contains(&q) => bad(format!("quality {q} outside [1, 100]")),
            AttackSpec::CropScale(f) if !(f > 0.0 && f <= 1.0) => bad(format!("fraction {f} outside (0, 1]")),
            AttackSpec::Blur(0) => bad("kernel must be >= 1".into()),
            AttackSpec::GaussNoise(s) if !(s >= 0.0 && s.is_finite()) => bad(format!("sigma {s} must be >= 0")),
            AttackSpec::Brightness(m) if !(m > 0.0 && m.is_finite()) => bad(format!("max factor {m} must be > 0")),
            AttackSpec::Regenerate(0) => bad("iterations must be >= 1".into()),
            AttackSpec::Steganalysis(_, 0) => bad("pairs must be >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn is_transform(&self) -> bool {
        matches!(
            self,
            AttackSpec::Rotate(_)
                | AttackSpec::Jpeg(_)
                | AttackSpec::CropScale(_)
                | AttackSpec::Blur(_)
                | AttackSpec::GaussNoise(_)
                | AttackSpec::Brightness(_)
        )
    }

    /// Short column label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            AttackSpec::Rotate(_) => "rotate",
            AttackSpec::Jpeg(_) => "jpeg",
            AttackSpec::CropScale(_) => "cropscale",
            AttackSpec::Blur(_) => "blur",
            AttackSpec::GaussNoise(_) => "noise",
            AttackSpec::Brightness(_) => "bright",
            AttackSpec::Regenerate(_) => "regen",
            AttackSpec::Steganalysis(..) => "steg",
            AttackSpec::ReconstructionForgery => "reconforge",
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Rotate(d) => write!(f, "rotate:{d}"),
            AttackSpec::Jpeg(q) => write!(f, "jpeg:{q}"),
            AttackSpec::CropScale(x) => write!(f, "cropscale:{x}"),
            AttackSpec::Blur(k) => write!(f, "blur:{k}"),
            AttackSpec::GaussNoise(s) => write!(f, "noise:{s}"),
            AttackSpec::Brightness(m) => write!(f, "bright:{m}"),
            AttackSpec::Regenerate(n) => write!(f, "regen:{n}"),
            AttackSpec::Steganalysis(StegMode::Forge, k) => write!(f, "steg:forge:{k}"),
            AttackSpec::Steganalysis(StegMode::Remove, k) => write!(f, "steg:remove:{k}"),
            AttackSpec::ReconstructionForgery => write!(f, "reconforge"),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidAttack(format!("bad number '{v}' in '{s}'")))
        };
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| Error::InvalidAttack(format!("bad integer '{v}' in '{s}'")))
        };
        let spec = match parts.as_slice() {
            ["rotate", v] => AttackSpec::Rotate(num(v)?),
            ["jpeg", v] => AttackSpec::Jpeg(int(v)?.try_into().unwrap_or(u32::MAX)),
            ["cropscale", v] => AttackSpec::CropScale(num(v)?),
            ["blur", v] => AttackSpec::Blur(int(v)? as usize),
            ["noise", v] => AttackSpec::GaussNoise(num(v)?),
            ["bright", v] => AttackSpec::Brightness(num(v)?),
            ["regen", v] => AttackSpec::Regenerate(int(v)?.try_into().unwrap_or(u32::MAX)),
            ["steg", "forge", v] => AttackSpec::Steganalysis(StegMode::Forge, int(v)? as usize),
            ["steg", "remove", v] => AttackSpec::Steganalysis(StegMode::Remove, int(v)? as usize),
            ["reconforge"] => AttackSpec::ReconstructionForgery,
            _ => return Err(Error::InvalidAttack(format!("unknown attack '{s}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn map_planes(img: &ChannelImage, f: impl Fn(&[f32]) -> Vec<f32>) -> Result<ChannelImage> {
    let shape = img.data.shape();
    let mut out = img.data.clone();
    for c in 0..shape.c {
        let plane = f(img.data.channel(c));
        out.channel_mut(c).copy_from_slice(&plane);
    }
    ChannelImage::new(out)
}

/// Orthonormal 8-point DCT-II basis, `B[k][n]`.
fn dct8() -> [[f64; 8]; 8] {
    let mut b = [[0f64; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

fn jpeg_plane(src: &[f32], h: usize, w: usize, step: f64) -> Vec<f32> {
    let b = dct8();
    let mut out = src.to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut blk = [[0f64; 8]; 8];
            for (y, row) in blk.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = src[(by + y) * w + bx + x] as f64;
                }
            }
            // rows then columns: C = B·X·Bᵀ
            let mut tmp = [[0f64; 8]; 8];
            for y in 0..8 {
                for k in 0..8 {
                    tmp[y][k] = (0..8).map(|n| b[k][n] * blk[y][n]).sum();
                }
            }
            let mut coef = [[0f64; 8]; 8];
            for k in 0..8 {
                for x in 0..8 {
                    let c: f64 = (0..8).map(|n| b[k][n] * tmp[n][x]).sum();
                    coef[k][x] = (c / step).round() * step;
                }
            }
            // X = Bᵀ·C·B
            for k in 0..8 {
                for n in 0..8 {
                    tmp[k][n] = (0..8).map(|j| coef[k][j] * b[j][n]).sum();
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let v: f64 = (0..8).map(|k| b[k][y] * tmp[k][x]).sum();
                    out[(by + y) * w + bx + x] = v as f32;
                }
            }
        }
    }
    out
}

/// Applies one of the six transformations. `seed` drives the random crop
/// offset, the additive noise and the brightness factor.
pub fn apply_transform(img: &ChannelImage, spec: &AttackSpec, seed: u64) -> Result<ChannelImage> {
    spec.validate()?;
    let shape = img.data.shape();
    let (h, w) = (shape.h, shape.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        AttackSpec::Rotate(deg) => map_planes(img, |p| rotate_plane(p, h, w, deg)),
        AttackSpec::Jpeg(q) => {
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::InvalidAttack(format!("jpeg needs 8-aligned planes, got {shape}")));
            }
            let step = JPEG_BASE_STEP * 50.0 / q as f64;
            map_planes(img, |p| jpeg_plane(p, h, w, step))
        }
        AttackSpec::CropScale(f) => {
            let ch = ((f * h as f64).round() as usize).clamp(1, h);
            let cw = ((f * w as f64).round() as usize).clamp(1, w);
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            map_planes(img, |p| resize_plane(&crop_plane(p, w, top, left, ch, cw), ch, cw, h, w))
        }
        AttackSpec::Blur(k) => map_planes(img, |p| box_blur_plane(p, h, w, k)),
        AttackSpec::GaussNoise(sigma) => {
            let mut out = img.data.clone();
            if sigma > 0.0 {
                for v in out.as_mut_slice() {
                    *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
            }
            ChannelImage::new(out)
        }
        AttackSpec::Brightness(max) => {
            let f = rng.random::<f64>() * max;
            let mut out = img.data.clone();
            out.scale(f);
            ChannelImage::new(out)
        }
        _ => Err(Error::InvalidAttack(format!("{spec} is not a transformation"))),
    }
}

/// Mean difference between watermarked and clean images.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternEstimate {
    pub data: LatentTensor,
    pub k: usize,
}

pub fn steganalysis_estimate(watermarked: &[ChannelImage], clean: &[ChannelImage]) -> Result<PatternEstimate> {
    if watermarked.is_empty() || clean.is_empty() {
        return Err(Error::EmptySet);
    }
    if watermarked.len() != clean.len() {
        return Err(Error::InvalidAttack(format!(
            "{} watermarked vs {} clean images; pairs required",
            watermarked.len(),
            clean.len()
        )));
    }
    let shape = watermarked[0].data.shape();
    let k = watermarked.len();
    let mut acc = vec![0f64; shape.len()];
    for (wm, cl) in watermarked.iter().zip(clean) {
        wm.data.ensure_shape(shape)?;
        cl.data.ensure_shape(shape)?;
        for ((a, &x), &y) in acc.iter_mut().zip(wm.data.as_slice()).zip(cl.data.as_slice()) {
            *a += x as f64 - y as f64;
        }
    }
    let data = acc.into_iter().map(|v| (v / k as f64) as f32).collect();
    Ok(PatternEstimate {
        data: LatentTensor::from_vec(shape, data)?,
        k,
    })
}

pub fn steganalysis_forge(target: &ChannelImage, est: &PatternEstimate) -> Result<ChannelImage> {
    let mut out = target.data.clone();
    out.add_scaled(&est.data, 1.0)?;
    ChannelImage::new(out)
}

pub fn steganalysis_remove(img: &ChannelImage, est: &PatternEstimate) -> Result<ChannelImage> {
    let mut out = img.data.clone();
    out.add_scaled(&est.data, -1.0)?;
    ChannelImage::new(out)
}

/// Iterated noise-and-reconstruct: each step maps the image to
/// `decay·x̂ + √(1−decay²)·ε` with fresh noise keyed by the step number.
pub fn regenerate(img: &ChannelImage, iterations: u32, params: &ChannelParams, nonce: u64) -> Result<ChannelImage> {
    if iterations == 0 {
        return Err(Error::InvalidAttack("iterations must be >= 1".into()));
    }
    params.validate()?;
    let mut cur = img.data.clone();
    for k in 0..iterations {
        let mut rng = role_rng(params.channel_seed, nonce, Role::Regenerate(k));
        cur = mix(&cur, params.regen_decay, &mut rng)?;
    }
    ChannelImage::new(cur)
}

/// Attacker-side invert with the public model followed by a fresh generation
/// from the recovered noise.
pub fn reconstruction_forgery(img: &ChannelImage, channel: &dyn Channel, nonce: u64) -> Result<ChannelImage> {
    let stolen = channel.invert_public(img, nonce)?;
    channel.generate(&stolen, nonce)
}

/// Everything an attack beyond the plain transformations may need.
pub struct AttackContext<'a> {
    pub channel: &'a dyn Channel,
    pub params: ChannelParams,
    pub estimate: Option<&'a PatternEstimate>,
}

/// Dispatches any attack. Steganalysis needs a precomputed estimate.
pub fn apply(img: &ChannelImage, spec: &AttackSpec, seed: u64, ctx: &AttackContext<'_>) -> Result<ChannelImage> {
    spec.validate()?;
    match *spec {
        AttackSpec::Regenerate(n) => regenerate(img, n, &ctx.params, seed),
        AttackSpec::ReconstructionForgery => reconstruction_forgery(img, ctx.channel, seed),
        AttackSpec::Steganalysis(mode, _) => {
            let est = ctx
                .estimate
                .ok_or_else(|| Error::InvalidAttack("steganalysis needs a pattern estimate".into()))?;
            match mode {
                StegMode::Forge => steganalysis_forge(img, est),
                StegMode::Remove => steganalysis_remove(img, est),
            }
        }
        _ => apply_transform(img, spec, seed),
    }
}
