//! Synthetic generation/inversion round trip.
//!
//! `generate` is the identity in latent coordinates and all loss is charged
//! to inversion: `z̃ = ρ·x̂ + √(1−ρ²)·ε` with `x̂` the image at unit std, `ρ`
//! a per-image draw from a truncated normal and `ε` fresh Gaussian noise.
//! All randomness is keyed by `(channel_seed, nonce, role)`.

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, LatentTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub rho_private_mean: f64,
    pub rho_private_spread: f64,
    pub rho_public_mean: f64,
    pub rho_public_spread: f64,
    pub regen_decay: f64,
    pub channel_seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            rho_private_mean: 0.888,
            rho_private_spread: 0.05,
            rho_public_mean: 0.166,
            rho_public_spread: 0.06,
            regen_decay: 0.95,
            channel_seed: 0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidChannel(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("rho_private_mean", self.rho_private_mean)?;
        unit("rho_public_mean", self.rho_public_mean)?;
        for (name, v) in [
            ("rho_private_spread", self.rho_private_spread),
            ("rho_public_spread", self.rho_public_spread),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidChannel(format!("{name} = {v} outside [0, 1)")));
            }
        }
        if !(self.regen_decay > 0.0 && self.regen_decay <= 1.0) {
            return Err(Error::InvalidChannel(format!(
                "regen_decay = {} outside (0, 1]",
                self.regen_decay
            )));
        }
        Ok(())
    }
}

/// A "generated image" in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    pub data: LatentTensor,
}

impl ChannelImage {
    pub fn new(data: LatentTensor) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { data })
    }
}

/// Which randomness stream a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Private,
    Public,
    Regenerate(u32),
}

impl Role {
    fn tag(self) -> [u8; 5] {
        let (kind, extra) = match self {
            Role::Private => (0u8, 0u32),
            Role::Public => (1, 0),
            Role::Regenerate(k) => (2, k),
        };
        let mut out = [kind, 0, 0, 0, 0];
        out[1..].copy_from_slice(&extra.to_le_bytes());
        out
    }
}

/// The RNG for one `(channel_seed, nonce, role)` triple.
pub fn role_rng(channel_seed: u64, nonce: u64, role: Role) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"wind-channel-v1");
    h.update(channel_seed.to_le_bytes());
    h.update(nonce.to_le_bytes());
    h.update(role.tag());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Normal(mean, spread) restricted to (0, 1) by rejection. A zero spread
/// returns the mean itself.
pub fn truncated_rho(rng: &mut impl Rng, mean: f64, spread: f64) -> f64 {
    if spread == 0.0 {
        return mean;
    }
    let dist = Normal::new(mean, spread).expect("spread validated");
    for _ in 0..100_000 {
        let r = dist.sample(rng);
        if r > 0.0 && r < 1.0 {
            return r;
        }
    }
    mean.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

pub fn gaussian_tensor(rng: &mut impl Rng, shape: Shape) -> LatentTensor {
    let data = (0..shape.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentTensor::from_raw(shape, data)
}

/// `ρ·x̂ + √(1−ρ²)·ε`, with `x̂` the input at unit std.
pub fn mix(x: &LatentTensor, rho: f64, rng: &mut impl Rng) -> Result<LatentTensor> {
    let mut out = x.unit_std()?;
    out.scale(rho);
    let eps = gaussian_tensor(rng, x.shape());
    out.add_scaled(&eps, (1.0 - rho * rho).max(0.0).sqrt())?;
    Ok(out)
}

/// A generation/inversion backend.
pub trait Channel: Send + Sync {
    fn generate(&self, z_emb: &LatentTensor, nonce: u64) -> Result<ChannelImage>;
    fn invert_private(&self, img: &ChannelImage, nonce: u64) -> Result<LatentTensor>;
    fn invert_public(&self, img: &ChannelImage, nonce: u64) -> Result<LatentTensor>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticChannel {
    pub params: ChannelParams,
}

impl SyntheticChannel {
    pub fn new(params: ChannelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    fn invert(&self, img: &ChannelImage, nonce: u64, role: Role, mean: f64, spread: f64) -> Result<LatentTensor> {
        let mut rng = role_rng(self.params.channel_seed, nonce, role);
        let rho = truncated_rho(&mut rng, mean, spread);
        mix(&img.data, rho, &mut rng)
    }
}

impl Channel for SyntheticChannel {
    fn generate(&self, z_emb: &LatentTensor, _nonce: u64) -> Result<ChannelImage> {
        ChannelImage::new(z_emb.clone())
    }

    fn invert_private(&self, img: &ChannelImage, nonce: u64) -> Result<LatentTensor> {
        let p = &self.params;
        self.invert(img, nonce, Role::Private, p.rho_private_mean, p.rho_private_spread)
    }

    fn invert_public(&self, img: &ChannelImage, nonce: u64) -> Result<LatentTensor> {
        let p = &self.params;
        self.invert(img, nonce, Role::Public, p.rho_public_mean, p.rho_public_spread)
    }
}

/// Target cosine statistics per channel role. `regeneration` is optional:
/// a single decay cannot match both the one-step similarity and the long
/// tail of the iterated curve, so fitting it is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub private: (f64, f64),
    pub public_chain: (f64, f64),
    pub regeneration: Option<f64>,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            private: (0.888, 0.053),
            public_chain: (0.166, 0.063),
            regeneration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rounds: u32,
    pub private_observed: (f64, f64),
    pub public_chain_observed: (f64, f64),
    pub regeneration_observed: Option<f64>,
}

pub const MAX_CALIBRATION_ROUNDS: u32 = 30;
const MEAN_TOL: f64 = 0.004;
const STD_TOL: f64 = 0.004;

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

struct Probe {
    shape: Shape,
    trials: usize,
    seed: u64,
}

impl Probe {
    /// Cosine between a fresh noise and its round trip through `chain`.
    fn run(&self, params: ChannelParams, chain: impl Fn(&SyntheticChannel, &LatentTensor, u64) -> Result<LatentTensor>) -> Result<(f64, f64)> {
        let ch = SyntheticChannel::new(params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sims = Vec::with_capacity(self.trials);
        for t in 0..self.trials {
            let z = gaussian_tensor(&mut rng, self.shape);
            let out = chain(&ch, &z, t as u64)?;
            sims.push(cosine_similarity(&z, &out)?);
        }
        Ok(mean_std(&sims))
    }
}

fn private_chain(ch: &SyntheticChannel, z: &LatentTensor, nonce: u64) -> Result<LatentTensor> {
    ch.invert_private(&ch.generate(z, nonce)?, nonce)
}

fn public_chain(ch: &SyntheticChannel, z: &LatentTensor, nonce: u64) -> Result<LatentTensor> {
    let img = ch.generate(z, nonce)?;
    let stolen = ch.invert_public(&img, nonce)?;
    ch.invert_private(&ch.generate(&stolen, nonce)?, nonce)
}

fn regen_chain(ch: &SyntheticChannel, z: &LatentTensor, nonce: u64) -> Result<LatentTensor> {
    let img = ch.generate(z, nonce)?;
    let mut rng = role_rng(ch.params.channel_seed, nonce, Role::Regenerate(0));
    let regen = mix(&img.data, ch.params.regen_decay, &mut rng)?;
    ch.invert_private(&ChannelImage::new(regen)?, nonce)
}

/// Spread update toward `target_std`. The part of the observed spread not
/// explained by ρ jitter is the fixed-ρ floor `(1 − mean²)/d`.
fn refit_spread(current: f64, observed: (f64, f64), target_std: f64, gain: f64, d: usize) -> f64 {
    let floor = (1.0 - observed.0 * observed.0).max(0.0) / d as f64;
    let want = (target_std * target_std - floor).max(0.0);
    let have = observed.1 * observed.1 - floor;
    let next = if current > 0.0 && have > 1e-12 {
        current * (want / have).sqrt()
    } else {
        want.sqrt() / gain
    };
    next.clamp(0.0, 0.99)
}

/// Fits ChannelParams by Monte-Carlo fixed-point refinement until the
/// observed statistics sit within tolerance of the targets.
pub fn calibrate(base: ChannelParams, targets: &CalibrationTargets, shape: Shape, trials: usize, seed: u64) -> Result<(ChannelParams, CalibrationReport)> {
    if trials < 100 {
        return Err(Error::InvalidChannel(format!("calibration needs >= 100 trials, got {trials}")));
    }
    let probe = Probe { shape, trials, seed };
    let mut p = base;
    p.validate()?;

    let (tm, ts) = targets.private;
    let mut private_obs = (f64::NAN, f64::NAN);
    let mut rounds = 0;
    loop {
        if rounds == MAX_CALIBRATION_ROUNDS {
            return Err(Error::CalibrationDiverged {
                rounds,
                detail: format!("private role at {private_obs:?}, target ({tm}, {ts})"),
            });
        }
        rounds += 1;
        private_obs = probe.run(p, private_chain)?;
        let (om, os) = private_obs;
        if (om - tm).abs() <= MEAN_TOL && (os - ts).abs() <= STD_TOL {
            break;
        }
        p.rho_private_mean = (p.rho_private_mean + (tm - om)).clamp(0.0, 1.0);
        p.rho_private_spread = refit_spread(p.rho_private_spread, private_obs, ts, 1.0, shape.len());
        if p.rho_private_mean >= 1.0 && ts == 0.0 {
            p.rho_private_spread = 0.0;
        }
    }

    let (cm, cs) = targets.public_chain;
    let mut chain_obs;
    loop {
        if rounds == 2 * MAX_CALIBRATION_ROUNDS {
            return Err(Error::CalibrationDiverged {
                rounds,
                detail: format!("public role, target ({cm}, {cs})"),
            });
        }
        rounds += 1;
        chain_obs = probe.run(p, public_chain)?;
        let (om, os) = chain_obs;
        if (om - cm).abs() <= MEAN_TOL && (os - cs).abs() <= STD_TOL {
            break;
        }
        let gain = p.rho_private_mean.max(1e-3);
        p.rho_public_mean = (p.rho_public_mean + (cm - om) / gain).clamp(0.0, 1.0);
        p.rho_public_spread = refit_spread(p.rho_public_spread, chain_obs, cs, gain, shape.len());
    }

    let mut regen_obs = None;
    if let Some(target) = targets.regeneration {
        loop {
            if rounds == 3 * MAX_CALIBRATION_ROUNDS {
                return Err(Error::CalibrationDiverged {
                    rounds,
                    detail: format!("regeneration role, target {target}"),
                });
            }
            rounds += 1;
            let (om, _) = probe.run(p, regen_chain)?;
            regen_obs = Some(om);
            if (om - target).abs() <= MEAN_TOL {
                break;
            }
            p.regen_decay = (p.regen_decay * target / om.max(1e-6)).clamp(1e-3, 1.0);
        }
    }

    Ok((
        p,
        CalibrationReport {
            rounds,
            private_observed: private_obs,
            public_chain_observed: chain_obs,
            regeneration_observed: regen_obs,
        },
    ))
}
