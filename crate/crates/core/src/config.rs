//! On-disk configuration: codebook, ring geometry, channel and detection
//! parameters in one flat TOML table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::codebook::{CodebookSpec, Salt};
use crate::detector::{default_l2_gate, DetectionConfig, Variant};
use crate::error::{Error, Result};
use crate::group_identifier::{rings_for, RingGeometry, DEFAULT_RING_WIDTH, DEFAULT_R_MIN};
use crate::sim_index::DEFAULT_K_DIMS;
use crate::tensor::Shape;

pub const CONFIG_VERSION: u32 = 1;
/// Overrides `salt_file` when set.
pub const SALT_ENV: &str = "WIND_SALT_FILE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindConfig {
    pub version: u32,
    pub n: u64,
    pub m: u64,
    pub shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_hex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_file: Option<PathBuf>,
    pub ring_channel: usize,
    pub r_min: f64,
    pub ring_width: f64,
    pub amplitude: f64,
    pub rho_private_mean: f64,
    pub rho_private_spread: f64,
    pub rho_public_mean: f64,
    pub rho_public_spread: f64,
    pub regen_decay: f64,
    pub channel_seed: u64,
    pub tau_cos: f64,
    pub l2_gate: f64,
    #[serde(default)]
    pub stage2_rotation_search: bool,
    #[serde(default)]
    pub stage2_crop_search: bool,
    pub k_dims: usize,
    pub projection_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_path: Option<PathBuf>,
}

impl WindConfig {
    /// A configuration with default parameters around the given codebook.
    pub fn new(n: u64, m: u64, salt: &Salt) -> Self {
        let shape = Shape::sd_latent();
        let ch = ChannelParams::default();
        Self {
            version: CONFIG_VERSION,
            n,
            m,
            shape: [shape.c, shape.h, shape.w],
            salt_hex: Some(salt.to_hex()),
            salt_file: None,
            ring_channel: 0,
            r_min: DEFAULT_R_MIN,
            ring_width: DEFAULT_RING_WIDTH,
            amplitude: ((shape.h * shape.w) as f64).sqrt(),
            rho_private_mean: ch.rho_private_mean,
            rho_private_spread: ch.rho_private_spread,
            rho_public_mean: ch.rho_public_mean,
            rho_public_spread: ch.rho_public_spread,
            regen_decay: ch.regen_decay,
            channel_seed: ch.channel_seed,
            tau_cos: 0.5,
            l2_gate: default_l2_gate(shape.len()),
            stage2_rotation_search: false,
            stage2_crop_search: false,
            k_dims: DEFAULT_K_DIMS,
            projection_seed: 0,
            index_path: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.salt_file, &mut cfg.index_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Writes atomically: a sibling temp file renamed over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("toml.tmp");
        std::fs::write(&tmp, self.to_toml()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.shape[0], self.shape[1], self.shape[2])
    }

    /// The salt from `$WIND_SALT_FILE`, `salt_file`, or `salt_hex`, in that
    /// order. Salt files hold hex text.
    pub fn salt(&self) -> Result<Salt> {
        let from_env = std::env::var_os(SALT_ENV).map(PathBuf::from);
        if let Some(path) = from_env.as_ref().or(self.salt_file.as_ref()) {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Salt::from_hex(&text);
        }
        match &self.salt_hex {
            Some(h) => Salt::from_hex(h),
            None => Err(Error::Config("no salt: set salt_hex, salt_file or WIND_SALT_FILE".into())),
        }
    }

    pub fn codebook(&self) -> Result<CodebookSpec> {
        CodebookSpec::new(self.n, self.m, self.salt()?, self.shape())
    }

    pub fn geometry(&self) -> Result<RingGeometry> {
        let geo = RingGeometry {
            channel: self.ring_channel,
            r_min: self.r_min,
            ring_width: self.ring_width,
            n_rings: rings_for(self.m),
            amplitude: self.amplitude,
        };
        geo.validate(self.shape())?;
        Ok(geo)
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        let p = ChannelParams {
            rho_private_mean: self.rho_private_mean,
            rho_private_spread: self.rho_private_spread,
            rho_public_mean: self.rho_public_mean,
            rho_public_spread: self.rho_public_spread,
            regen_decay: self.regen_decay,
            channel_seed: self.channel_seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn set_channel_params(&mut self, p: &ChannelParams) {
        self.rho_private_mean = p.rho_private_mean;
        self.rho_private_spread = p.rho_private_spread;
        self.rho_public_mean = p.rho_public_mean;
        self.rho_public_spread = p.rho_public_spread;
        self.regen_decay = p.regen_decay;
        self.channel_seed = p.channel_seed;
    }

    pub fn detection(&self, variant: Variant) -> Result<DetectionConfig> {
        let mut d = DetectionConfig::for_shape(self.shape(), variant);
        d.tau_cos = self.tau_cos;
        d.l2_gate = self.l2_gate;
        d.stage2_rotation_search = self.stage2_rotation_search;
        d.stage2_crop_search = self.stage2_crop_search;
        d.validate(self.shape())?;
        Ok(d)
    }

    /// Hex codebook fingerprint, stored in log records.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(self.codebook()?.fingerprint()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn salt() -> Salt {
        Salt::new((0u8..32).collect()).unwrap()
    }

    #[test]
    fn toml_round_trip() {
        let cfg = WindConfig::new(1000, 32, &salt());
        let back = WindConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.codebook().unwrap().fingerprint(), cfg.codebook().unwrap().fingerprint());
        assert_eq!(back.geometry().unwrap().n_rings, 5);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        let text = WindConfig::new(10, 2, &salt()).to_toml().unwrap();
        assert!(WindConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
        let bumped = text.replace("version = 1", "version = 2");
        assert!(WindConfig::from_toml(&bumped).is_err());
    }

    #[test]
    fn salt_file_is_resolved_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("salt.hex"), salt().to_hex()).unwrap();
        let mut cfg = WindConfig::new(10, 2, &salt());
        cfg.salt_hex = None;
        cfg.salt_file = Some("salt.hex".into());
        let path = dir.path().join("wind.toml");
        cfg.save(&path).unwrap();
        let loaded = WindConfig::load(&path).unwrap();
        assert_eq!(loaded.salt().unwrap(), salt());
    }

    #[test]
    fn short_salt_is_rejected() {
        let mut cfg = WindConfig::new(10, 2, &salt());
        cfg.salt_hex = Some("abcd".into());
        assert!(matches!(cfg.codebook(), Err(Error::SaltTooShort { .. })));
    }
}
