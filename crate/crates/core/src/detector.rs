//! Two-stage detection: the ring identifier narrows the search to one group,
//! then the group's noises are matched against the reconstruction.
//!
//! `Fast` stops after the group. `Full` falls back to the rest of the
//! codebook when the group's best match is below `tau_cos`, either through a
//! [`SketchIndex`] shortlist with exact verification or by brute force.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{default_crop_scales, MatchAlignment, PreparedQuery, Stage2Config};
use crate::channel::{Channel, ChannelImage};
use crate::codebook::CodebookSpec;
use crate::error::{Error, Result};
use crate::group_identifier::{extract, remove_pattern, RingGeometry, SearchConfig};
use crate::sim_index::SketchIndex;
use crate::tensor::{LatentTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Watermarked,
    NotWatermarked,
}

/// The ℓ2 value below which a unit-RMS query and an unrelated noise fall
/// with probability 10⁻⁴. Under the null, `‖q − z‖²` has mean `2d` and
/// variance `6d`, so `‖q − z‖ ≈ N(√(2d), 3/4)` and the quantile sits
/// `3.719·√3/2 ≈ 3.22` below the mean.
pub fn default_l2_gate(d: usize) -> f64 {
    (2.0 * d as f64).sqrt() - 3.22
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub tau_cos: f64,
    pub l2_gate: f64,
    pub variant: Variant,
    pub search: SearchConfig,
    pub stage2_rotation_search: bool,
    pub stage2_crop_search: bool,
    pub crop_scales: Vec<f64>,
    /// Full only: scan the whole codebook by brute force even after a group hit.
    pub force_full_scan: bool,
    /// Shortlist length when a sketch index serves a scan.
    pub index_top_k: usize,
    /// Fast uses the index for its group only when the group is larger.
    pub index_crossover: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self::for_shape(Shape::sd_latent(), Variant::Fast)
    }
}

impl DetectionConfig {
    pub fn for_shape(shape: Shape, variant: Variant) -> Self {
        Self {
            tau_cos: 0.5,
            l2_gate: default_l2_gate(shape.len()),
            variant,
            search: SearchConfig::default(),
            stage2_rotation_search: false,
            stage2_crop_search: false,
            crop_scales: default_crop_scales(),
            force_full_scan: false,
            index_top_k: 64,
            index_crossover: 4096,
        }
    }

    /// Turns on both stage-2 searches.
    pub fn with_stage2_search(mut self) -> Self {
        self.stage2_rotation_search = true;
        self.stage2_crop_search = true;
        self
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            rotation: self.stage2_rotation_search,
            rotation_step_deg: self.search.rotation_step_deg,
            crop: self.stage2_crop_search,
            crop_scales: self.crop_scales.clone(),
        }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if !(self.tau_cos > 0.0 && self.tau_cos < 1.0) {
            return Err(Error::InvalidDetection(format!("tau_cos {} outside (0, 1)", self.tau_cos)));
        }
        if self.index_top_k == 0 {
            return Err(Error::InvalidDetection("index_top_k must be >= 1".into()));
        }
        self.search.validate(shape)?;
        self.stage2().validate()
    }
}

/// One scored codebook candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index: u64,
    pub score: f64,
    pub alignment: MatchAlignment,
}

impl Match {
    /// Higher score wins; equal scores go to the lower index.
    pub fn beats(&self, other: &Match) -> bool {
        self.score > other.score || (self.score == other.score && self.index < other.index)
    }
}

fn keep_best(a: Option<Match>, b: Option<Match>) -> Option<Match> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.beats(&x) { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Scores `count` codebook entries, the `k`-th being `index_at(k)`, against
/// every query. Each noise is generated once and shared by all queries.
pub fn scan_by(spec: &CodebookSpec, count: u64, index_at: impl Fn(u64) -> u64 + Sync, queries: &[&PreparedQuery]) -> Vec<Option<Match>> {
    let nq = queries.len();
    (0..count)
        .into_par_iter()
        .fold(
            || vec![None; nq],
            |mut acc: Vec<Option<Match>>, k| {
                let i = index_at(k);
                let z = spec.noise(i).expect("index in range");
                for (slot, q) in acc.iter_mut().zip(queries) {
                    let (score, alignment) = q.score(z.as_slice());
                    *slot = keep_best(*slot, Some(Match { index: i, score, alignment }));
                }
                acc
            },
        )
        .reduce(|| vec![None; nq], |a, b| a.into_iter().zip(b).map(|(x, y)| keep_best(x, y)).collect())
}

/// Exhaustive scan of all `N` noises; the reference the index is measured
/// against.
pub fn brute_force(spec: &CodebookSpec, queries: &[&PreparedQuery]) -> Vec<Option<Match>> {
    scan_by(spec, spec.n, |k| k, queries)
}

/// Scores an explicit list of indices.
pub fn scan_list(spec: &CodebookSpec, indices: &[u64], query: &PreparedQuery) -> Option<Match> {
    scan_by(spec, indices.len() as u64, |k| indices[k as usize], &[query])[0]
}

/// `exp(−c²·d/2)`: the Gaussian tail bound on a null cosine of `c` in
/// dimension `d`, clamped to `[0, 1]`. Non-positive scores give 1.
pub fn null_pvalue(c: f64, d: usize) -> f64 {
    let c = c.max(0.0);
    (-c * c * d as f64 / 2.0).exp().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub decision: Decision,
    pub index: Option<u64>,
    pub group: u64,
    pub score: f64,
    pub l2: f64,
    pub p_value: f64,
    pub candidates_scanned: u64,
    pub wall_time: f64,
    pub alignment: Option<MatchAlignment>,
    pub identifier_score: f64,
    pub fell_back: bool,
}

impl DetectionResult {
    /// The per-image report record.
    pub fn to_record(&self) -> serde_json::Value {
        serde_json::json!({
            "decision": match self.decision {
                Decision::Watermarked => "watermarked",
                Decision::NotWatermarked => "not_watermarked",
            },
            "index": self.index,
            "group": self.group,
            "cos": self.score,
            "l2": self.l2,
            "p_value": self.p_value,
            "scanned": self.candidates_scanned,
            "ms": self.wall_time * 1e3,
        })
    }

    pub fn is_watermarked(&self) -> bool {
        self.decision == Decision::Watermarked
    }
}

pub struct Detector<'a> {
    pub spec: &'a CodebookSpec,
    pub geometry: RingGeometry,
    pub config: DetectionConfig,
    pub channel: &'a dyn Channel,
    pub index: Option<&'a SketchIndex>,
}

/// Stage-1 output and the group scan, before any fallback.
struct Partial {
    group: u64,
    identifier_score: f64,
    query: PreparedQuery,
    best: Option<Match>,
    scanned: u64,
}

impl<'a> Detector<'a> {
    pub fn new(
        spec: &'a CodebookSpec,
        geometry: RingGeometry,
        config: DetectionConfig,
        channel: &'a dyn Channel,
        index: Option<&'a SketchIndex>,
    ) -> Result<Self> {
        spec.validate()?;
        geometry.validate(spec.shape)?;
        config.validate(spec.shape)?;
        if let Some(idx) = index {
            idx.check(spec)?;
        }
        Ok(Self {
            spec,
            geometry,
            config,
            channel,
            index,
        })
    }

    pub fn detect(&self, img: &ChannelImage, nonce: u64) -> Result<DetectionResult> {
        let z = self.channel.invert_private(img, nonce)?;
        self.detect_reconstructed(&z)
    }

    /// Detection from an already reconstructed tensor.
    pub fn detect_reconstructed(&self, z: &LatentTensor) -> Result<DetectionResult> {
        let t0 = Instant::now();
        let part = self.stage_one(z)?;
        let needs_fallback = self.needs_fallback(&part);
        let mut extra = None;
        let mut extra_scanned = 0;
        if needs_fallback {
            let (m, scanned) = self.fallback(&part)?;
            extra = m;
            extra_scanned = scanned;
        }
        self.finish(&part, extra, extra_scanned, needs_fallback, t0.elapsed().as_secs_f64())
    }

    /// Runs stage one once and reports the outcome under each variant, as if
    /// the configured variant had been each of `variants` in turn.
    pub fn detect_variants(&self, z: &LatentTensor, variants: &[Variant]) -> Result<Vec<DetectionResult>> {
        let t0 = Instant::now();
        let part = self.stage_one(z)?;
        let t_stage = t0.elapsed().as_secs_f64();
        let mut fallback: Option<(Option<Match>, u64, f64)> = None;
        let mut out = Vec::with_capacity(variants.len());
        for &v in variants {
            if self.fallback_due(v, &part) {
                if fallback.is_none() {
                    let t1 = Instant::now();
                    let (m, s) = self.fallback(&part)?;
                    fallback = Some((m, s, t1.elapsed().as_secs_f64()));
                }
                let (m, s, t) = fallback.unwrap();
                out.push(self.finish(&part, m, s, true, t_stage + t)?);
            } else {
                out.push(self.finish(&part, None, 0, false, t_stage)?);
            }
        }
        Ok(out)
    }

    /// Detects a batch of reconstructions. Brute-force fallbacks share one
    /// pass over the codebook, so each noise is generated once per batch.
    pub fn detect_batch_reconstructed(&self, zs: &[LatentTensor]) -> Result<Vec<DetectionResult>> {
        let t0 = Instant::now();
        let parts: Vec<Partial> = zs.iter().map(|z| self.stage_one(z)).collect::<Result<_>>()?;
        let t_stage = t0.elapsed().as_secs_f64();
        let flags: Vec<bool> = parts.iter().map(|p| self.needs_fallback(p)).collect();
        let mut extras: Vec<(Option<Match>, u64)> = vec![(None, 0); parts.len()];

        let shared = self.index.is_none() || self.config.force_full_scan;
        let t1 = Instant::now();
        if shared {
            let pending: Vec<usize> = (0..parts.len()).filter(|&k| flags[k]).collect();
            if !pending.is_empty() {
                let queries: Vec<&PreparedQuery> = pending.iter().map(|&k| &parts[k].query).collect();
                let all = brute_force(self.spec, &queries);
                for (&k, m) in pending.iter().zip(all) {
                    extras[k] = (m, self.spec.n - self.spec.group_len(parts[k].group));
                }
            }
        } else {
            for (k, p) in parts.iter().enumerate() {
                if flags[k] {
                    extras[k] = self.fallback(p)?;
                }
            }
        }
        let t_scan = t1.elapsed().as_secs_f64();
        let per = (t_stage + t_scan) / parts.len().max(1) as f64;
        parts
            .into_iter()
            .zip(extras)
            .zip(flags)
            .map(|((p, (m, s)), f)| self.finish(&p, m, s, f, per))
            .collect()
    }

    fn stage_one(&self, z: &LatentTensor) -> Result<Partial> {
        z.ensure_shape(self.spec.shape)?;
        let m = self.spec.m;
        let ex = extract(z, m, &self.geometry, &self.config.search)?;
        let clean = remove_pattern(z, ex.group, &self.geometry)?;
        let query = PreparedQuery::new(&clean, &self.config.stage2())?;
        let g = ex.group;
        let len = self.spec.group_len(g);
        let (best, scanned) = match self.index {
            Some(idx) if len > self.config.index_crossover => {
                let cands = idx.query_candidates(&query);
                let list: Vec<u64> = idx
                    .shortlist(self.spec, &cands, self.config.index_top_k, Some((m, g)))?
                    .into_iter()
                    .map(|(i, _)| i)
                    .collect();
                (scan_list(self.spec, &list, &query), list.len() as u64)
            }
            _ => (scan_by(self.spec, len, |k| g + k * m, &[&query])[0], len),
        };
        Ok(Partial {
            group: g,
            identifier_score: ex.score,
            query,
            best,
            scanned,
        })
    }

    fn needs_fallback(&self, p: &Partial) -> bool {
        self.fallback_due(self.config.variant, p)
    }

    fn fallback_due(&self, variant: Variant, p: &Partial) -> bool {
        variant == Variant::Full
            && (self.config.force_full_scan || p.best.is_none_or(|b| b.score < self.config.tau_cos))
    }

    /// Scans outside the identified group.
    fn fallback(&self, p: &Partial) -> Result<(Option<Match>, u64)> {
        let (m, g) = (self.spec.m, p.group);
        match self.index {
            Some(idx) if !self.config.force_full_scan => {
                let cands = idx.query_candidates(&p.query);
                let list: Vec<u64> = idx
                    .shortlist(self.spec, &cands, self.config.index_top_k, None)?
                    .into_iter()
                    .map(|(i, _)| i)
                    .filter(|i| i % m != g)
                    .collect();
                Ok((scan_list(self.spec, &list, &p.query), list.len() as u64))
            }
            _ => {
                let rest = self.spec.n - self.spec.group_len(g);
                // the k-th index outside group g
                let at = |k: u64| {
                    let per = m - 1;
                    let (round, off) = (k / per, k % per);
                    round * m + if off < g { off } else { off + 1 }
                };
                let best = if m == 1 { None } else { scan_by(self.spec, rest, at, &[&p.query])[0] };
                Ok((best, rest))
            }
        }
    }

    fn finish(&self, p: &Partial, extra: Option<Match>, extra_scanned: u64, fell_back: bool, wall_time: f64) -> Result<DetectionResult> {
        let best = keep_best(p.best, extra);
        let (score, l2, p_value, alignment) = match best {
            Some(b) => {
                let z = self.spec.noise(b.index)?;
                let d = p.query.compared_dim(b.alignment);
                (b.score, p.query.l2(z.as_slice(), b.alignment), null_pvalue(b.score, d), Some(b.alignment))
            }
            None => (0.0, f64::NAN, 1.0, None),
        };
        let decision = if best.is_some() && score >= self.config.tau_cos {
            Decision::Watermarked
        } else {
            Decision::NotWatermarked
        };
        Ok(DetectionResult {
            decision,
            index: best.map(|b| b.index),
            group: p.group,
            score,
            l2,
            p_value,
            candidates_scanned: (p.scanned + extra_scanned).min(self.spec.n),
            wall_time,
            alignment,
            identifier_score: p.identifier_score,
            fell_back,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelParams, SyntheticChannel};
    use crate::codebook::Salt;
    use crate::group_identifier::embed;

    fn setup(n: u64, m: u64) -> (CodebookSpec, RingGeometry, SyntheticChannel) {
        let spec = CodebookSpec::new(n, m, Salt::new(vec![1u8; 32]).unwrap(), Shape::sd_latent()).unwrap();
        let geo = RingGeometry::for_groups(m, spec.shape);
        (spec, geo, SyntheticChannel::new(ChannelParams::default()).unwrap())
    }

    fn watermarked(spec: &CodebookSpec, geo: &RingGeometry, ch: &SyntheticChannel, i: u64) -> ChannelImage {
        let z = embed(&spec.noise(i).unwrap(), spec.group_of(i), spec.m, geo).unwrap();
        ch.generate(&z, i).unwrap()
    }

    #[test]
    fn pvalue_bounds() {
        assert_eq!(null_pvalue(0.0, 16384), 1.0);
        assert_eq!(null_pvalue(-0.3, 16384), 1.0);
        assert!(null_pvalue(0.5, 16384) < 1e-19);
        assert!(null_pvalue(0.02, 16384) > null_pvalue(0.03, 16384));
    }

    #[test]
    fn l2_gate_default() {
        assert!((default_l2_gate(16384) - 177.80).abs() < 0.01);
    }

    #[test]
    fn fast_finds_clean_index_and_scans_its_group() {
        let (spec, geo, ch) = setup(200, 16);
        let cfg = DetectionConfig::for_shape(spec.shape, Variant::Fast);
        let det = Detector::new(&spec, geo, cfg, &ch, None).unwrap();
        for i in [0u64, 17, 199] {
            let r = det.detect(&watermarked(&spec, &geo, &ch, i), i).unwrap();
            assert_eq!(r.index, Some(i));
            assert!(r.is_watermarked());
            assert_eq!(r.group, i % 16);
            assert_eq!(r.candidates_scanned, spec.group_len(i % 16));
            assert!(!r.fell_back);
        }
    }

    #[test]
    fn full_falls_back_when_identifier_is_wrong() {
        let (spec, geo, ch) = setup(64, 8);
        let mut cfg = DetectionConfig::for_shape(spec.shape, Variant::Full);
        cfg.search = SearchConfig::none();
        let det = Detector::new(&spec, geo, cfg, &ch, None).unwrap();
        // embed the wrong group so stage 1 points elsewhere
        let i = 13;
        let z = embed(&spec.noise(i).unwrap(), 2, 8, &geo).unwrap();
        let r = det.detect(&ch.generate(&z, 0).unwrap(), 0).unwrap();
        assert_eq!(r.group, 2);
        assert!(r.fell_back);
        assert_eq!(r.index, Some(i));
        assert_eq!(r.candidates_scanned, 64);

        let fast = Detector::new(&spec, geo, DetectionConfig { variant: Variant::Fast, ..det.config.clone() }, &ch, None).unwrap();
        let r = fast.detect(&ch.generate(&z, 0).unwrap(), 0).unwrap();
        assert!(!r.is_watermarked());
        assert_eq!(r.index.unwrap() % 8, 2);
    }

    #[test]
    fn fallback_enumerates_everything_outside_the_group() {
        let (spec, geo, ch) = setup(23, 5);
        let cfg = DetectionConfig::for_shape(spec.shape, Variant::Full);
        let det = Detector::new(&spec, geo, cfg, &ch, None).unwrap();
        let z = crate::channel::gaussian_tensor(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3), spec.shape);
        let q = PreparedQuery::new(&z, &Stage2Config::default()).unwrap();
        for g in 0..5 {
            let p = Partial {
                group: g,
                identifier_score: 0.0,
                query: q.clone(),
                best: None,
                scanned: 0,
            };
            let (_, n) = det.fallback(&p).unwrap();
            assert_eq!(n, 23 - spec.group_len(g));
        }
        // brute force over the complement plus the group equals the global best
        let all = brute_force(&spec, &[&q])[0].unwrap();
        let g = all.index % 5;
        let p = Partial {
            group: (g + 1) % 5,
            identifier_score: 0.0,
            query: q,
            best: None,
            scanned: 0,
        };
        assert_eq!(det.fallback(&p).unwrap().0.unwrap().index, all.index);
    }

    #[test]
    fn batch_matches_single() {
        let (spec, geo, ch) = setup(40, 4);
        let mut cfg = DetectionConfig::for_shape(spec.shape, Variant::Full);
        cfg.force_full_scan = true;
        let det = Detector::new(&spec, geo, cfg, &ch, None).unwrap();
        let zs: Vec<LatentTensor> = [3u64, 9, 30]
            .iter()
            .map(|&i| ch.invert_private(&watermarked(&spec, &geo, &ch, i), i).unwrap())
            .collect();
        let batch = det.detect_batch_reconstructed(&zs).unwrap();
        for (z, b) in zs.iter().zip(&batch) {
            let s = det.detect_reconstructed(z).unwrap();
            assert_eq!(s.index, b.index);
            assert_eq!(s.score, b.score);
            assert_eq!(b.candidates_scanned, 40);
        }
    }

    #[test]
    fn variants_match_separate_detectors() {
        let (spec, geo, ch) = setup(40, 4);
        let fast = Detector::new(&spec, geo, DetectionConfig::for_shape(spec.shape, Variant::Fast), &ch, None).unwrap();
        let full = Detector::new(&spec, geo, DetectionConfig::for_shape(spec.shape, Variant::Full), &ch, None).unwrap();
        let img = watermarked(&spec, &geo, &ch, 7);
        // a foreign ring pattern sends stage one to the wrong group
        let z = embed(&spec.noise(7).unwrap(), 2, 4, &geo).unwrap();
        for z in [ch.invert_private(&img, 1).unwrap(), z] {
            let both = fast.detect_variants(&z, &[Variant::Fast, Variant::Full]).unwrap();
            let a = fast.detect_reconstructed(&z).unwrap();
            let b = full.detect_reconstructed(&z).unwrap();
            for (x, y) in [(&both[0], &a), (&both[1], &b)] {
                assert_eq!((x.index, x.score, x.fell_back, x.candidates_scanned), (y.index, y.score, y.fell_back, y.candidates_scanned));
            }
        }
    }

    #[test]
    fn config_validation() {
        let s = Shape::sd_latent();
        let mut c = DetectionConfig::for_shape(s, Variant::Fast);
        assert!(c.validate(s).is_ok());
        c.tau_cos = 1.0;
        assert!(c.validate(s).is_err());
        c.tau_cos = 0.5;
        c.index_top_k = 0;
        assert!(c.validate(s).is_err());
    }
}
