//! Sketch shortlist over the whole codebook.
//!
//! A sketch is a fixed Gaussian random projection of a noise's low-frequency
//! band (`|fy|, |fx| ≤ BAND_FMAX` in every channel, as orthonormal real
//! coordinates). Low frequencies survive blur, resampling and small
//! misalignments, so a query can be compared against all `N` sketches under
//! many alignment hypotheses for the cost of a few hundred dot products each.
//! Hits are then verified exactly by regenerating the full noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::align::PreparedQuery;
use crate::codebook::CodebookSpec;
use crate::error::{Error, Result};
use crate::spectrum::C64;
use crate::tensor::{LatentTensor, Shape};

pub const INDEX_MAGIC: &[u8; 4] = b"WNDX";
pub const INDEX_VERSION: u16 = 1;
pub const BAND_FMAX: i64 = 5;
pub const DEFAULT_K_DIMS: usize = 256;
/// Crop offsets tried by aligned queries, in pixels.
pub const CROP_OFFSET_STRIDE: usize = 4;
/// Default memory cap for stored sketches.
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;

/// Band-limited real coordinates of an `H×W` multi-channel tensor.
#[derive(Debug, Clone)]
pub struct BandBasis {
    shape: Shape,
    fmax: i64,
    /// `ex[a][x] = e^{-2πi·fx·x/W}` for `fx = a - fmax`.
    ex: Vec<Vec<C64>>,
    ey: Vec<Vec<C64>>,
}

impl BandBasis {
    pub fn new(shape: Shape, fmax: i64) -> Result<Self> {
        if 2 * fmax as usize + 1 > shape.h.min(shape.w) {
            return Err(Error::InvalidSpec(format!("band radius {fmax} too large for {shape}")));
        }
        let table = |n: usize| -> Vec<Vec<C64>> {
            (-fmax..=fmax)
                .map(|f| {
                    (0..n)
                        .map(|x| C64::from_polar(1.0, -std::f64::consts::TAU * (f * x as i64) as f64 / n as f64))
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            shape,
            fmax,
            ex: table(shape.w),
            ey: table(shape.h),
        })
    }

    pub fn side(&self) -> usize {
        2 * self.fmax as usize + 1
    }

    /// Real coordinates per channel: the DC term plus a (Re, Im) pair for
    /// each frequency in the upper half-plane.
    pub fn dofs(&self) -> usize {
        let s = self.side();
        self.shape.c * (1 + (s * s - 1))
    }

    /// Band coefficients of a `ph×pw` plane placed at the origin of an
    /// `H×W` canvas, row-major over `(fy, fx)`.
    pub fn plane_band(&self, plane: &[f32], ph: usize, pw: usize) -> Vec<C64> {
        let s = self.side();
        let mut rows = vec![C64::default(); ph * s];
        for y in 0..ph {
            let src = &plane[y * pw..(y + 1) * pw];
            for a in 0..s {
                let ex = &self.ex[a];
                let mut acc = C64::default();
                for (x, &v) in src.iter().enumerate() {
                    acc += ex[x] * v as f64;
                }
                rows[y * s + a] = acc;
            }
        }
        let mut out = vec![C64::default(); s * s];
        for b in 0..s {
            let ey = &self.ey[b];
            for y in 0..ph {
                let e = ey[y];
                for a in 0..s {
                    out[b * s + a] += e * rows[y * s + a];
                }
            }
        }
        out
    }

    /// Orthonormal real coordinates from per-channel band coefficients.
    pub fn realify(&self, bands: &[Vec<C64>]) -> Vec<f32> {
        let s = self.side();
        let f = self.fmax;
        let norm = 1.0 / ((self.shape.h * self.shape.w) as f64).sqrt();
        let r2 = std::f64::consts::SQRT_2 * norm;
        let mut out = Vec::with_capacity(self.dofs());
        for band in bands {
            let at = |fy: i64, fx: i64| band[(fy + f) as usize * s + (fx + f) as usize];
            out.push((at(0, 0).re * norm) as f32);
            for fy in 0..=f {
                let lo = if fy == 0 { 1 } else { -f };
                for fx in lo..=f {
                    let c = at(fy, fx);
                    out.push((c.re * r2) as f32);
                    out.push((c.im * r2) as f32);
                }
            }
        }
        out
    }

    pub fn coords(&self, z: &[f32]) -> Vec<f32> {
        let Shape { c, h, w } = self.shape;
        let bands: Vec<Vec<C64>> = (0..c).map(|k| self.plane_band(&z[k * h * w..(k + 1) * h * w], h, w)).collect();
        self.realify(&bands)
    }

    /// Multiplies band coefficients by the phase of a `(top, left)` shift.
    fn shifted(&self, band: &[C64], top: usize, left: usize) -> Vec<C64> {
        let s = self.side();
        let mut out = band.to_vec();
        for b in 0..s {
            let py = self.ey[b][top % self.shape.h];
            for a in 0..s {
                out[b * s + a] *= py * self.ex[a][left % self.shape.w];
            }
        }
        out
    }
}

#[inline]
fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

fn normalize(v: &mut [f32]) {
    let n = dot32(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone)]
pub struct SketchIndex {
    k_dims: usize,
    projection_seed: u64,
    n: u64,
    fingerprint: [u8; 32],
    shape: Shape,
    basis: BandBasis,
    /// `k_dims × dofs`, row-major.
    projection: Vec<f32>,
    sketches: Vec<f32>,
    inv_norms: Vec<f32>,
}

fn projection_matrix(seed: u64, k: usize, dofs: usize) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (k as f64).sqrt();
    (0..k * dofs)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

impl SketchIndex {
    pub fn build(spec: &CodebookSpec, k_dims: usize, projection_seed: u64) -> Result<Self> {
        Self::build_capped(spec, k_dims, projection_seed, DEFAULT_MEMORY_CAP)
    }

    pub fn build_capped(spec: &CodebookSpec, k_dims: usize, projection_seed: u64, memory_cap: usize) -> Result<Self> {
        spec.validate()?;
        let mut idx = Self::empty(spec, k_dims, projection_seed, memory_cap)?;
        let per: Vec<Vec<f32>> = (0..spec.n)
            .into_par_iter()
            .map(|i| -> Result<Vec<f32>> { Ok(idx.sketch(&spec.noise(i)?)) })
            .collect::<Result<_>>()?;
        idx.sketches = per.into_iter().flatten().collect();
        idx.finish();
        Ok(idx)
    }

    fn empty(spec: &CodebookSpec, k_dims: usize, projection_seed: u64, memory_cap: usize) -> Result<Self> {
        let basis = BandBasis::new(spec.shape, BAND_FMAX)?;
        let dofs = basis.dofs();
        if k_dims == 0 || k_dims > dofs {
            return Err(Error::InvalidSpec(format!("k_dims {k_dims} outside [1, {dofs}]")));
        }
        let needed = (spec.n as usize)
            .checked_mul(k_dims)
            .and_then(|v| v.checked_mul(4))
            .unwrap_or(usize::MAX);
        if needed > memory_cap {
            return Err(Error::MemoryBudget {
                needed,
                budget: memory_cap,
            });
        }
        Ok(Self {
            k_dims,
            projection_seed,
            n: spec.n,
            fingerprint: spec.fingerprint(),
            shape: spec.shape,
            projection: projection_matrix(projection_seed, k_dims, dofs),
            basis,
            sketches: Vec::new(),
            inv_norms: Vec::new(),
        })
    }

    fn finish(&mut self) {
        self.inv_norms = self
            .sketches
            .chunks_exact(self.k_dims)
            .map(|s| {
                let n = dot32(s, s).sqrt();
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
    }

    pub fn k_dims(&self) -> usize {
        self.k_dims
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn sketch_of(&self, i: u64) -> &[f32] {
        let k = self.k_dims;
        &self.sketches[i as usize * k..(i as usize + 1) * k]
    }

    fn project(&self, coords: &[f32]) -> Vec<f32> {
        self.projection
            .chunks_exact(coords.len())
            .map(|row| dot32(row, coords))
            .collect()
    }

    pub fn sketch(&self, z: &LatentTensor) -> Vec<f32> {
        self.project(&self.basis.coords(z.as_slice()))
    }

    pub fn check(&self, spec: &CodebookSpec) -> Result<()> {
        if spec.fingerprint() != self.fingerprint || spec.n != self.n {
            return Err(Error::StaleIndex);
        }
        Ok(())
    }

    /// Unit sketches of every alignment hypothesis of a prepared query:
    /// identity, each rotation, and each crop template at offsets on a
    /// `CROP_OFFSET_STRIDE` grid (always including the last offset).
    pub fn query_candidates(&self, q: &PreparedQuery) -> Vec<Vec<f32>> {
        let Shape { c, h, w } = self.shape;
        let mut out = vec![self.project(&self.basis.coords(&q.identity))];
        for (_, r) in &q.rotations {
            out.push(self.project(&self.basis.coords(r)));
        }
        for tpl in &q.crops {
            let bands: Vec<Vec<C64>> = (0..c).map(|k| self.basis.plane_band(&tpl.patch[k], tpl.lh, tpl.lw)).collect();
            let offsets = |limit: usize| -> Vec<usize> {
                let mut v: Vec<usize> = (0..=limit).step_by(CROP_OFFSET_STRIDE).collect();
                if *v.last().unwrap() != limit {
                    v.push(limit);
                }
                v
            };
            for top in offsets(h - tpl.lh) {
                for left in offsets(w - tpl.lw) {
                    let shifted: Vec<Vec<C64>> = bands.iter().map(|b| self.basis.shifted(b, top, left)).collect();
                    out.push(self.project(&self.basis.realify(&shifted)));
                }
            }
        }
        for v in &mut out {
            normalize(v);
        }
        out
    }

    /// Top `top_k` indices by best sketch cosine over `candidates`, ties to
    /// the lower index. `filter` restricts to `i mod m == g`.
    pub fn shortlist(&self, spec: &CodebookSpec, candidates: &[Vec<f32>], top_k: usize, filter: Option<(u64, u64)>) -> Result<Vec<(u64, f32)>> {
        self.check(spec)?;
        if top_k == 0 {
            return Err(Error::InvalidSearch("top_k must be >= 1".into()));
        }
        let k = self.k_dims;
        let chunk = 1024usize;
        let mut scored: Vec<(u64, f32)> = self
            .sketches
            .par_chunks(chunk * k)
            .enumerate()
            .flat_map_iter(|(ci, block)| {
                let base = (ci * chunk) as u64;
                block.chunks_exact(k).enumerate().filter_map(move |(j, s)| {
                    let i = base + j as u64;
                    if let Some((m, g)) = filter {
                        if i % m != g {
                            return None;
                        }
                    }
                    let best = candidates
                        .iter()
                        .map(|c| dot32(s, c))
                        .fold(f32::NEG_INFINITY, f32::max);
                    Some((i, best * self.inv_norms[i as usize]))
                })
            })
            .collect();
        let order = |a: &(u64, f32), b: &(u64, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if scored.len() > top_k {
            scored.select_nth_unstable_by(top_k - 1, order);
            scored.truncate(top_k);
        }
        scored.sort_by(order);
        Ok(scored)
    }

    /// Identity-only shortlist of a reconstructed tensor.
    pub fn query(&self, spec: &CodebookSpec, z: &LatentTensor, top_k: usize) -> Result<Vec<u64>> {
        z.ensure_shape(self.shape)?;
        let mut s = self.sketch(z);
        normalize(&mut s);
        Ok(self.shortlist(spec, &[s], top_k, None)?.into_iter().map(|(i, _)| i).collect())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.k_dims as u32).to_le_bytes())?;
        w.write_all(&self.n.to_le_bytes())?;
        w.write_all(&self.projection_seed.to_le_bytes())?;
        w.write_all(&self.fingerprint)?;
        for v in &self.sketches {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an index built for `spec`; the stored fingerprint must match.
    pub fn read_from(r: impl Read, spec: &CodebookSpec, memory_cap: usize) -> Result<Self> {
        let mut r = BufReader::new(r);
        let fmt = |detail: String| Error::Format { what: "index", detail };
        let mut head = [0u8; 4 + 2 + 4 + 8 + 8 + 32];
        r.read_exact(&mut head).map_err(|_| fmt("truncated header".into()))?;
        if &head[0..4] != INDEX_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let k_dims = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(head[10..18].try_into().unwrap());
        let seed = u64::from_le_bytes(head[18..26].try_into().unwrap());
        let fingerprint: [u8; 32] = head[26..58].try_into().unwrap();
        if fingerprint != spec.fingerprint() || n != spec.n {
            return Err(Error::StaleIndex);
        }
        let mut idx = Self::empty(spec, k_dims, seed, memory_cap)?;
        let mut bytes = vec![0u8; n as usize * k_dims * 4];
        r.read_exact(&mut bytes).map_err(|_| fmt("truncated payload".into()))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(fmt("trailing bytes".into()));
        }
        idx.sketches = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if idx.sketches.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        idx.finish();
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(f)
    }

    pub fn load(path: &Path, spec: &CodebookSpec) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f, spec, DEFAULT_MEMORY_CAP)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Salt;
    use crate::spectrum::Spectrum;

    fn spec(n: u64) -> CodebookSpec {
        CodebookSpec::new(n, 4, Salt::new(vec![3u8; 32]).unwrap(), Shape::sd_latent()).unwrap()
    }

    #[test]
    fn band_matches_full_fft() {
        let sp = spec(4);
        let z = sp.noise(0).unwrap();
        let basis = BandBasis::new(sp.shape, BAND_FMAX).unwrap();
        let band = basis.plane_band(z.channel(0), 64, 64);
        // the centred spectrum differs from the raw one by a (-1)^(fy+fx) phase
        let full = Spectrum::forward(z.channel(0), 64, 64);
        let s = basis.side();
        for fy in -BAND_FMAX..=BAND_FMAX {
            for fx in -BAND_FMAX..=BAND_FMAX {
                let ky = fy.rem_euclid(64) as usize;
                let kx = fx.rem_euclid(64) as usize;
                let sign = if (fy + fx).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let got = band[(fy + BAND_FMAX) as usize * s + (fx + BAND_FMAX) as usize];
                assert!((got * sign - full.coeffs[ky * 64 + kx]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn real_coordinates_are_orthonormal() {
        // the coordinates of a band-limited signal preserve its energy
        let basis = BandBasis::new(Shape::new(1, 32, 32), 3).unwrap();
        let plane: Vec<f32> = (0..32 * 32)
            .map(|i| {
                let (y, x) = ((i / 32) as f64, (i % 32) as f64);
                let t = std::f64::consts::TAU / 32.0;
                (0.7 + (t * (2.0 * y + x)).cos() - 0.4 * (t * 3.0 * x).sin()) as f32
            })
            .collect();
        let coords = basis.coords(&plane);
        assert_eq!(coords.len(), basis.dofs());
        let e_space: f64 = plane.iter().map(|v| (*v as f64).powi(2)).sum();
        let e_band: f64 = coords.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((e_space - e_band).abs() < 1e-3 * e_space);
    }

    #[test]
    fn shift_phase_matches_moved_patch() {
        let basis = BandBasis::new(Shape::new(1, 64, 64), BAND_FMAX).unwrap();
        let patch: Vec<f32> = (0..16 * 16).map(|i| ((i * 7919) % 13) as f32 - 6.0).collect();
        let mut canvas = vec![0f32; 64 * 64];
        crate::geometry::paste_plane(&mut canvas, 64, &patch, 16, 16, 9, 21);
        let direct = basis.plane_band(&canvas, 64, 64);
        let moved = basis.shifted(&basis.plane_band(&patch, 16, 16), 9, 21);
        for (a, b) in direct.iter().zip(&moved) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn toy_index_shortlist_of_everything_contains_match() {
        let sp = spec(16);
        let idx = SketchIndex::build(&sp, 64, 9).unwrap();
        for i in 0..16 {
            let got = idx.query(&sp, &sp.noise(i).unwrap(), 16).unwrap();
            assert_eq!(got.len(), 16);
            assert!(got.contains(&i));
            assert_eq!(got[0], i);
        }
    }

    #[test]
    fn file_round_trip_and_staleness() {
        let sp = spec(8);
        let idx = SketchIndex::build(&sp, 32, 1).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 58 + 8 * 32 * 4);
        let back = SketchIndex::read_from(&buf[..], &sp, DEFAULT_MEMORY_CAP).unwrap();
        assert_eq!(back.sketches, idx.sketches);
        let mut again = Vec::new();
        SketchIndex::build(&sp, 32, 1).unwrap().write_to(&mut again).unwrap();
        assert_eq!(buf, again);

        let other = CodebookSpec::new(8, 4, Salt::new(vec![4u8; 32]).unwrap(), Shape::sd_latent()).unwrap();
        assert!(matches!(SketchIndex::read_from(&buf[..], &other, DEFAULT_MEMORY_CAP), Err(Error::StaleIndex)));
        assert!(matches!(idx.query(&other, &other.noise(0).unwrap(), 1), Err(Error::StaleIndex)));
        assert!(SketchIndex::read_from(&buf[..buf.len() - 1], &sp, DEFAULT_MEMORY_CAP).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(SketchIndex::read_from(&bad[..], &sp, DEFAULT_MEMORY_CAP).is_err());
    }

    #[test]
    fn memory_cap_and_dimension_checks() {
        let sp = spec(100);
        assert!(matches!(SketchIndex::build_capped(&sp, 256, 0, 1000), Err(Error::MemoryBudget { .. })));
        assert!(SketchIndex::build(&sp, 485, 0).is_err());
        assert!(SketchIndex::build(&sp, 0, 0).is_err());
    }
}
