//! The reproducible noise family: per-index seeds derived from a secret salt,
//! and the standard-normal initial noise each seed expands into.
//!
//! Seeds are `SHA-256(LE64(i) ‖ salt)`. A seed keys a ChaCha20 keystream
//! (zero nonce, block counter from 0) whose little-endian 64-bit words become
//! uniforms `((w >> 11) + 1)·2⁻⁵³ ∈ (0, 1]`, paired through Box–Muller. Values
//! fill the tensor channel-major, then row-major. Every step has a public
//! definition, so a codebook is portable across implementations.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

pub const MIN_SALT_LEN: usize = 32;

#[derive(Clone, PartialEq, Eq)]
pub struct Salt(Vec<u8>);

impl Salt {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < MIN_SALT_LEN {
            return Err(Error::SaltTooShort {
                got: bytes.len(),
                min: MIN_SALT_LEN,
            });
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::Config(format!("salt_hex: {e}")))?;
        Self::new(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Salt({} bytes)", self.0.len())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed32(pub [u8; 32]);

impl fmt::Debug for Seed32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed32({})", hex::encode(self.0))
    }
}

/// `N` noises split into `M` groups by `i mod M`, all keyed by one salt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookSpec {
    pub n: u64,
    pub m: u64,
    pub salt: Salt,
    pub shape: Shape,
}

impl CodebookSpec {
    pub fn new(n: u64, m: u64, salt: Salt, shape: Shape) -> Result<Self> {
        let spec = Self { n, m, salt, shape };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        if self.m == 0 || self.m > self.n {
            return Err(Error::InvalidSpec(format!(
                "m must satisfy 1 <= m <= n (m = {}, n = {})",
                self.m, self.n
            )));
        }
        if self.salt.as_bytes().len() < MIN_SALT_LEN {
            return Err(Error::SaltTooShort {
                got: self.salt.as_bytes().len(),
                min: MIN_SALT_LEN,
            });
        }
        self.shape.validate()
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn derive_seed(&self, i: u64) -> Result<Seed32> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, n: self.n });
        }
        Ok(derive_seed(i, &self.salt))
    }

    pub fn noise(&self, i: u64) -> Result<LatentTensor> {
        Ok(sample_noise(&self.derive_seed(i)?, self.shape))
    }

    pub fn group_of(&self, i: u64) -> u64 {
        group_of(i, self.m)
    }

    /// Number of indices in group `g`: ⌈N/M⌉ for `g < N mod M`, else ⌊N/M⌋.
    pub fn group_len(&self, g: u64) -> u64 {
        if g >= self.m {
            return 0;
        }
        (self.n - g).div_ceil(self.m)
    }

    /// Digest binding every field (salt included) that determines the noises.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"wind-codebook-v1");
        h.update(self.n.to_le_bytes());
        h.update(self.m.to_le_bytes());
        for d in [self.shape.c, self.shape.h, self.shape.w] {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.salt.as_bytes().len() as u64).to_le_bytes());
        h.update(self.salt.as_bytes());
        h.finalize().into()
    }

    /// Indices of group `g` with their regenerated noises, ascending.
    pub fn stream_group(&self, g: u64) -> Result<GroupStream<'_>> {
        self.stream_group_shard(g, 0, 1)
    }

    /// Every `shards`-th member of group `g`, starting at member `shard`.
    /// The union over `shard in 0..shards` is exactly `stream_group(g)`.
    pub fn stream_group_shard(&self, g: u64, shard: u64, shards: u64) -> Result<GroupStream<'_>> {
        if g >= self.m {
            return Err(Error::GroupOutOfRange { group: g, m: self.m });
        }
        if shards == 0 || shard >= shards {
            return Err(Error::InvalidSpec(format!("shard {shard} of {shards}")));
        }
        Ok(GroupStream {
            spec: self,
            next: g + shard * self.m,
            step: shards * self.m,
        })
    }
}

pub struct GroupStream<'a> {
    spec: &'a CodebookSpec,
    next: u64,
    step: u64,
}

impl Iterator for GroupStream<'_> {
    type Item = (u64, LatentTensor);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.spec.n {
            return None;
        }
        let i = self.next;
        self.next = self.next.saturating_add(self.step);
        Some((i, sample_noise(&derive_seed(i, &self.spec.salt), self.spec.shape)))
    }
}

pub fn derive_seed(i: u64, salt: &Salt) -> Seed32 {
    let mut h = Sha256::new();
    h.update(i.to_le_bytes());
    h.update(salt.as_bytes());
    Seed32(h.finalize().into())
}

pub fn group_of(i: u64, m: u64) -> u64 {
    i % m
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn open_unit(w: u64) -> f64 {
    ((w >> 11) + 1) as f64 * TWO_POW_M53
}

pub fn sample_noise(seed: &Seed32, shape: Shape) -> LatentTensor {
    let mut out = vec![0f32; shape.len()];
    fill_standard_normal(seed, &mut out);
    LatentTensor::from_raw(shape, out)
}

/// Fills `out` with the seed's Box–Muller stream.
pub fn fill_standard_normal(seed: &Seed32, out: &mut [f32]) {
    // rand_chacha's 64-bit block counter and stream id start at zero, which
    // matches the 32-bit counter / 96-bit zero nonce layout for every block
    // a tensor could need.
    let mut rng = ChaCha20Rng::from_seed(seed.0);
    let mut pairs = out.chunks_exact_mut(2);
    for pair in &mut pairs {
        let (z0, z1) = box_muller(open_unit(rng.next_u64()), open_unit(rng.next_u64()));
        pair[0] = z0 as f32;
        pair[1] = z1 as f32;
    }
    if let [last] = pairs.into_remainder() {
        let (z0, _) = box_muller(open_unit(rng.next_u64()), open_unit(rng.next_u64()));
        *last = z0 as f32;
    }
}

#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}
