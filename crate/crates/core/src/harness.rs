//! Scripted experiments: robustness grid, similarity separation,
//! steganalysis forgery and removal, and the regeneration curve.
//!
//! Every random quantity is drawn from a per-trial seed derived from the
//! run seed, and trials are aggregated in trial order, so a report is a
//! pure function of its inputs. Wall-clock times are never recorded in
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{apply, reconstruction_forgery, steganalysis_estimate, steganalysis_forge, steganalysis_remove, AttackContext, AttackSpec};
use crate::channel::{gaussian_tensor, mean_std, mix, role_rng, Channel, ChannelImage, ChannelParams, Role, SyntheticChannel};
use crate::codebook::CodebookSpec;
use crate::detector::{DetectionConfig, DetectionResult, Detector, Variant};
use crate::error::{Error, Result};
use crate::group_identifier::{embed, extract, RingGeometry};
use crate::sim_index::SketchIndex;
use crate::tensor::{cosine_similarity, LatentTensor};

/// Everything an experiment runs against.
pub struct Bench<'a> {
    pub spec: &'a CodebookSpec,
    pub geometry: RingGeometry,
    pub channel: SyntheticChannel,
    pub index: Option<&'a SketchIndex>,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: u64,
    pub m: u64,
    pub shape: [usize; 3],
    pub fingerprint: String,
    pub geometry: RingGeometry,
    pub channel: ChannelParams,
    pub index: Option<(usize, u64)>,
    pub detection: Option<DetectionConfig>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub attack: String,
    pub trials: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AccuracyRow {
    pub fn new(variant: &str, attack: &str, correct: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson(correct, trials);
        Self {
            variant: variant.to_string(),
            attack: attack.to_string(),
            trials,
            correct,
            accuracy: if trials == 0 { 0.0 } else { correct as f64 / trials as f64 },
            ci_low,
            ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(name: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        Self {
            name: name.to_string(),
            lo,
            hi,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u32,
    pub similarity_mean: f64,
    pub similarity_std: f64,
    /// Detection accuracy, present at checkpoint iterations only.
    pub accuracy: Option<AccuracyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub run_seed: u64,
    pub snapshot: Snapshot,
    pub rows: Vec<AccuracyRow>,
    pub summary: BTreeMap<String, f64>,
    pub histograms: Vec<Histogram>,
    pub curve: Vec<CurvePoint>,
    pub trials: Vec<serde_json::Value>,
}

impl ExperimentReport {
    pub fn row(&self, variant: &str, attack: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.variant == variant && r.attack == attack)
    }

    pub fn stat(&self, key: &str) -> f64 {
        self.summary.get(key).copied().unwrap_or(f64::NAN)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Wilson score interval at 95%.
pub fn wilson(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// The seed of trial `t` of experiment `tag`.
pub fn trial_seed(run_seed: u64, tag: &str, t: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"wind-trial-v1");
    h.update(run_seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(t.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Fast => "fast",
        Variant::Full => "full",
    }
}

impl Bench<'_> {
    fn snapshot(&self, detection: Option<&DetectionConfig>, params: serde_json::Value) -> Snapshot {
        let s = self.spec.shape;
        Snapshot {
            n: self.spec.n,
            m: self.spec.m,
            shape: [s.c, s.h, s.w],
            fingerprint: hex::encode(self.spec.fingerprint()),
            geometry: self.geometry,
            channel: self.channel.params,
            index: self.index.map(|i| (i.k_dims(), i.projection_seed())),
            detection: detection.cloned(),
            params,
        }
    }

    fn report(&self, experiment: &str, snapshot: Snapshot) -> ExperimentReport {
        ExperimentReport {
            experiment: experiment.to_string(),
            run_seed: self.run_seed,
            snapshot,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            histograms: Vec::new(),
            curve: Vec::new(),
            trials: Vec::new(),
        }
    }

    /// The watermarked latent for index `i`: its noise with the group ring.
    pub fn embedded(&self, i: u64) -> Result<LatentTensor> {
        embed(&self.spec.noise(i)?, self.spec.group_of(i), self.spec.m, &self.geometry)
    }

    fn detector<'s>(&'s self, cfg: &DetectionConfig, index: Option<&'s SketchIndex>) -> Result<Detector<'s>> {
        Detector::new(self.spec, self.geometry, cfg.clone(), &self.channel, index)
    }
}

/// Accuracy of each variant on each attack. A trial counts as correct when
/// the best-scoring noise is the one generated, whatever its score. `None`
/// in `attacks` is the clean column. Summary keys `avg_<variant>` average
/// the attacked columns.
pub fn run_robustness(bench: &Bench<'_>, cfg: &DetectionConfig, variants: &[Variant], attacks: &[Option<AttackSpec>], trials: u64) -> Result<ExperimentReport> {
    if variants.is_empty() || attacks.is_empty() {
        return Err(Error::EmptySet);
    }
    for a in attacks.iter().flatten() {
        if !a.is_transform() {
            return Err(Error::InvalidAttack(format!("{a} is not a per-image transformation")));
        }
    }
    let labels: Vec<String> = attacks.iter().map(|a| a.map_or("clean".to_string(), |a| a.to_string())).collect();
    let params = serde_json::json!({ "trials": trials, "attacks": labels, "variants": variants });
    let mut report = bench.report("robustness", bench.snapshot(Some(cfg), params));
    let det = bench.detector(cfg, bench.index)?;
    let ctx = AttackContext {
        channel: &bench.channel,
        params: bench.channel.params,
        estimate: None,
    };

    let per_trial: Vec<Vec<Vec<DetectionResult>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(bench.run_seed, "robustness", t);
            let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..bench.spec.n);
            let img = bench.channel.generate(&bench.embedded(i)?, seed)?;
            attacks
                .iter()
                .map(|a| {
                    let attacked = match a {
                        Some(a) => apply(&img, a, seed, &ctx)?,
                        None => img.clone(),
                    };
                    let z = bench.channel.invert_private(&attacked, seed)?;
                    det.detect_variants(&z, variants)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    for (vi, &v) in variants.iter().enumerate() {
        let mut attacked_acc = Vec::new();
        for (ai, label) in labels.iter().enumerate() {
            let correct = (0..trials)
                .filter(|&t| {
                    let seed = trial_seed(bench.run_seed, "robustness", t);
                    let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..bench.spec.n);
                    per_trial[t as usize][ai][vi].index == Some(i)
                })
                .count() as u64;
            let row = AccuracyRow::new(variant_name(v), label, correct, trials);
            if attacks[ai].is_some() {
                attacked_acc.push(row.accuracy);
            }
            report.rows.push(row);
        }
        if !attacked_acc.is_empty() {
            let avg = attacked_acc.iter().sum::<f64>() / attacked_acc.len() as f64;
            report.summary.insert(format!("avg_{}", variant_name(v)), avg);
        }
    }
    for (t, results) in per_trial.iter().enumerate() {
        let seed = trial_seed(bench.run_seed, "robustness", t as u64);
        let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..bench.spec.n);
        for (ai, label) in labels.iter().enumerate() {
            for (vi, &v) in variants.iter().enumerate() {
                let r = &results[ai][vi];
                report.trials.push(serde_json::json!({
                    "trial": t, "seed": seed, "index": i, "attack": label,
                    "variant": variant_name(v), "found": r.index, "group": r.group,
                    "score": r.score, "identifier_score": r.identifier_score,
                    "scanned": r.candidates_scanned, "fell_back": r.fell_back,
                }));
            }
        }
    }
    Ok(report)
}

/// Cosine similarity distributions: the private reconstruction of a
/// watermarked latent, the reconstruction-forgery chain, and unrelated
/// codebook pairs.
pub fn run_separation(bench: &Bench<'_>, trials: u64, null_trials: u64, tau: f64) -> Result<ExperimentReport> {
    if trials < 2 || null_trials < 2 {
        return Err(Error::EmptySet);
    }
    let params = serde_json::json!({ "trials": trials, "null_trials": null_trials, "tau": tau });
    let mut report = bench.report("separation", bench.snapshot(None, params));
    let n = bench.spec.n;

    let pairs: Vec<(u64, u64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(bench.run_seed, "separation", t);
            let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
            let x = bench.embedded(i)?;
            let img = bench.channel.generate(&x, seed)?;
            let rec = cosine_similarity(&x, &bench.channel.invert_private(&img, seed)?)?;
            let forged = reconstruction_forgery(&img, &bench.channel, seed)?;
            let chain = cosine_similarity(&x, &bench.channel.invert_private(&forged, seed)?)?;
            Ok((seed, i, rec, chain))
        })
        .collect::<Result<_>>()?;
    let nulls: Vec<(u64, u64, f64)> = (0..null_trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(bench.run_seed, "separation-null", t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n.max(2))) % n;
            Ok((i, j, cosine_similarity(&bench.spec.noise(i)?, &bench.spec.noise(j)?)?))
        })
        .collect::<Result<_>>()?;

    let rec: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let chain: Vec<f64> = pairs.iter().map(|p| p.3).collect();
    let null: Vec<f64> = nulls.iter().map(|p| p.2).collect();
    let (rm, rs) = mean_std(&rec);
    let (cm, cs) = mean_std(&chain);
    let (nm, ns) = mean_std(&null);
    let d = bench.spec.dim() as f64;
    let s = &mut report.summary;
    s.insert("reconstructed_mean".into(), rm);
    s.insert("reconstructed_std".into(), rs);
    s.insert("chain_mean".into(), cm);
    s.insert("chain_std".into(), cs);
    s.insert("random_mean".into(), nm);
    s.insert("random_std".into(), ns);
    s.insert("z_gap".into(), (rm - nm) / ((rs * rs + ns * ns) / 2.0).sqrt());
    s.insert("chain_z_below_tau".into(), (tau - cm) / cs);
    s.insert("reconstructed_z_above_tau".into(), (rm - tau) / rs);
    s.insert("null_false_positives".into(), null.iter().filter(|&&c| c >= tau).count() as f64);
    s.insert("null_max".into(), null.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    s.insert("analytic_bound".into(), (-tau * tau * d / 2.0).exp());
    report.histograms = vec![
        Histogram::from_values("reconstructed", &rec, -0.2, 1.0, 120),
        Histogram::from_values("reconstruction_attack", &chain, -0.2, 1.0, 120),
        Histogram::from_values("random", &null, -0.2, 1.0, 120),
    ];
    for (t, (seed, i, r, c)) in pairs.iter().enumerate() {
        report.trials.push(serde_json::json!({ "trial": t, "seed": seed, "index": i, "reconstructed": r, "chain": c }));
    }
    Ok(report)
}

/// Averaging attack against one group per trial. The attacker holds
/// `k_pairs` watermarked images of the target group and as many clean ones.
/// Rates: identifier forgery (a clean image plus the estimate decodes to the
/// group), identifier removal (a watermarked image minus the estimate no
/// longer decodes to its group), full-watermark forgery (the forged image is
/// accepted by Full detection), and detection after removal (exhaustive
/// search still ranks the true noise first).
pub fn run_steganalysis(bench: &Bench<'_>, cfg: &DetectionConfig, k_pairs: usize, trials: u64) -> Result<ExperimentReport> {
    if k_pairs == 0 || trials == 0 {
        return Err(Error::EmptySet);
    }
    let params = serde_json::json!({ "k_pairs": k_pairs, "trials": trials });
    let mut report = bench.report("steganalysis", bench.snapshot(Some(cfg), params));
    let m = bench.spec.m;
    let shape = bench.spec.shape;

    struct Trial {
        seed: u64,
        i: u64,
        g: u64,
        forged: LatentTensor,
        removed: LatentTensor,
    }
    let per: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(bench.run_seed, "steganalysis", t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = rng.random_range(0..m);
            let len = bench.spec.group_len(g);
            let mut wm = Vec::with_capacity(k_pairs);
            let mut clean = Vec::with_capacity(k_pairs);
            for k in 0..k_pairs as u64 {
                let j = g + m * rng.random_range(0..len);
                wm.push(bench.channel.generate(&bench.embedded(j)?, seed ^ k)?);
                clean.push(bench.channel.generate(&gaussian_tensor(&mut rng, shape), seed ^ k)?);
            }
            let est = steganalysis_estimate(&wm, &clean)?;
            let i = g + m * rng.random_range(0..len);
            let target = bench.channel.generate(&gaussian_tensor(&mut rng, shape), seed)?;
            let victim = bench.channel.generate(&bench.embedded(i)?, seed)?;
            let forged = bench.channel.invert_private(&steganalysis_forge(&target, &est)?, seed)?;
            let removed = bench.channel.invert_private(&steganalysis_remove(&victim, &est)?, seed)?;
            Ok(Trial { seed, i, g, forged, removed })
        })
        .collect::<Result<_>>()?;

    let mut full_cfg = cfg.clone();
    full_cfg.variant = Variant::Full;
    full_cfg.force_full_scan = true;
    let det = bench.detector(&full_cfg, None)?;
    let mut zs: Vec<LatentTensor> = Vec::with_capacity(2 * per.len());
    for tr in &per {
        zs.push(tr.forged.clone());
        zs.push(tr.removed.clone());
    }
    let results = det.detect_batch_reconstructed(&zs)?;

    let (mut id_forge, mut id_remove, mut full_forge, mut after_removal) = (0u64, 0u64, 0u64, 0u64);
    for (t, tr) in per.iter().enumerate() {
        let f = &results[2 * t];
        let r = &results[2 * t + 1];
        let f_group = extract(&tr.forged, m, &bench.geometry, &cfg.search)?.group;
        let r_group = extract(&tr.removed, m, &bench.geometry, &cfg.search)?.group;
        id_forge += (f_group == tr.g) as u64;
        id_remove += (r_group != tr.g) as u64;
        full_forge += f.is_watermarked() as u64;
        after_removal += (r.index == Some(tr.i)) as u64;
        report.trials.push(serde_json::json!({
            "trial": t, "seed": tr.seed, "index": tr.i, "group": tr.g,
            "forged_group": f_group, "removed_group": r_group,
            "forged_score": f.score, "forged_found": f.index,
            "removed_score": r.score, "removed_found": r.index,
        }));
    }
    report.rows = vec![
        AccuracyRow::new("attacker", "identifier_forgery", id_forge, trials),
        AccuracyRow::new("attacker", "identifier_removal", id_remove, trials),
        AccuracyRow::new("attacker", "full_forgery", full_forge, trials),
        AccuracyRow::new("full", "detection_after_removal", after_removal, trials),
    ];
    Ok(report)
}

/// Similarity to the original latent after each of `max_iters` regeneration
/// steps, and Full exhaustive-search accuracy at `checkpoints`.
pub fn run_regeneration_curve(bench: &Bench<'_>, cfg: &DetectionConfig, max_iters: u32, checkpoints: &[u32], trials: u64) -> Result<ExperimentReport> {
    if max_iters == 0 || trials < 2 {
        return Err(Error::EmptySet);
    }
    if let Some(&c) = checkpoints.iter().find(|&&c| c == 0 || c > max_iters) {
        return Err(Error::InvalidAttack(format!("checkpoint {c} outside 1..={max_iters}")));
    }
    let params = serde_json::json!({ "max_iters": max_iters, "checkpoints": checkpoints, "trials": trials });
    let mut report = bench.report("regeneration", bench.snapshot(Some(cfg), params));
    let p = bench.channel.params;

    struct Trial {
        seed: u64,
        i: u64,
        sims: Vec<f64>,
        zs: Vec<LatentTensor>,
    }
    let per: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(bench.run_seed, "regeneration", t);
            let i = ChaCha8Rng::seed_from_u64(seed).random_range(0..bench.spec.n);
            let x = bench.embedded(i)?;
            let mut cur = bench.channel.generate(&x, seed)?.data;
            let mut sims = Vec::with_capacity(max_iters as usize);
            let mut zs = Vec::new();
            for it in 1..=max_iters {
                let mut rng = role_rng(p.channel_seed, seed, Role::Regenerate(it - 1));
                cur = mix(&cur, p.regen_decay, &mut rng)?;
                let z = bench.channel.invert_private(&ChannelImage::new(cur.clone())?, seed)?;
                sims.push(cosine_similarity(&x, &z)?);
                if checkpoints.contains(&it) {
                    zs.push(z);
                }
            }
            Ok(Trial { seed, i, sims, zs })
        })
        .collect::<Result<_>>()?;

    let mut full_cfg = cfg.clone();
    full_cfg.variant = Variant::Full;
    full_cfg.force_full_scan = true;
    let det = bench.detector(&full_cfg, None)?;
    let zs: Vec<LatentTensor> = per.iter().flat_map(|tr| tr.zs.iter().cloned()).collect();
    let results = det.detect_batch_reconstructed(&zs)?;
    let mut sorted: Vec<u32> = checkpoints.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let per_trial = sorted.len();

    for it in 1..=max_iters {
        let sims: Vec<f64> = per.iter().map(|tr| tr.sims[it as usize - 1]).collect();
        let (mean, std) = mean_std(&sims);
        let accuracy = sorted.iter().position(|&c| c == it).map(|k| {
            let correct = per
                .iter()
                .enumerate()
                .filter(|(t, tr)| results[t * per_trial + k].index == Some(tr.i))
                .count() as u64;
            AccuracyRow::new("full", &format!("regen:{it}"), correct, trials)
        });
        if let Some(row) = &accuracy {
            report.rows.push(row.clone());
        }
        report.curve.push(CurvePoint {
            iteration: it,
            similarity_mean: mean,
            similarity_std: std,
            accuracy,
        });
    }
    for (t, tr) in per.iter().enumerate() {
        let found: Vec<Option<u64>> = (0..per_trial).map(|k| results[t * per_trial + k].index).collect();
        report.trials.push(serde_json::json!({ "trial": t, "seed": tr.seed, "index": tr.i, "similarity": tr.sims, "found": found }));
    }
    Ok(report)
}

/// Writes `<experiment>.csv`, `<experiment>.json`, an SVG plot for
/// histograms and curves, and `manifest.json` listing each file's SHA-256.
pub fn write_outputs(reports: &[ExperimentReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.insert(name, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    };
    for r in reports {
        put(format!("{}.csv", r.experiment), to_csv(r).into_bytes())?;
        put(format!("{}.json", r.experiment), serde_json::to_vec_pretty(r)?)?;
        if !r.histograms.is_empty() {
            put(format!("{}.svg", r.experiment), histogram_svg(&r.histograms).into_bytes())?;
        }
        if !r.curve.is_empty() {
            put(format!("{}.svg", r.experiment), curve_svg(&r.curve).into_bytes())?;
        }
    }
    let manifest = serde_json::json!({
        "experiments": reports.iter().map(|r| serde_json::json!({
            "experiment": r.experiment,
            "run_seed": r.run_seed,
            "snapshot": r.snapshot,
            "seeds": r.trials.iter().filter_map(|t| t.get("seed").cloned()).collect::<Vec<_>>(),
            "content_hash": r.content_hash().unwrap_or_default(),
        })).collect::<Vec<_>>(),
        "files": files,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn to_csv(r: &ExperimentReport) -> String {
    let mut out = String::new();
    if !r.curve.is_empty() {
        out.push_str("iteration,similarity_mean,similarity_std,accuracy,ci_low,ci_high\n");
        for p in &r.curve {
            let (a, lo, hi) = p.accuracy.as_ref().map_or((String::new(), String::new(), String::new()), |a| {
                (a.accuracy.to_string(), a.ci_low.to_string(), a.ci_high.to_string())
            });
            let _ = writeln!(out, "{},{},{},{a},{lo},{hi}", p.iteration, p.similarity_mean, p.similarity_std);
        }
    } else if !r.rows.is_empty() {
        out.push_str("variant,attack,trials,correct,accuracy,ci_low,ci_high\n");
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.variant, row.attack, row.trials, row.correct, row.accuracy, row.ci_low, row.ci_high
            );
        }
    } else {
        out.push_str("statistic,value\n");
        for (k, v) in &r.summary {
            let _ = writeln!(out, "{k},{v}");
        }
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#7f7f7f", "#2ca02c"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = SVG_H - PAD,
        x2 = SVG_W - PAD
    )
}

pub fn histogram_svg(hists: &[Histogram]) -> String {
    let mut s = svg_open("cosine similarity");
    let peak = hists.iter().flat_map(|h| h.counts.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let plot_w = SVG_W - 2.0 * PAD;
    let plot_h = SVG_H - 2.0 * PAD;
    for (k, h) in hists.iter().enumerate() {
        let bw = plot_w / h.counts.len() as f64;
        let c = COLOURS[k % COLOURS.len()];
        for (b, &n) in h.counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let bh = plot_h * n as f64 / peak;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{bh:.2}\" fill=\"{c}\" fill-opacity=\"0.5\"/>",
                PAD + b as f64 * bw,
                SVG_H - PAD - bh
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{c}\">{}</text>",
            SVG_W - PAD - 150.0,
            40.0 + 16.0 * k as f64,
            h.name
        );
    }
    if let Some(h) = hists.first() {
        let _ = writeln!(
            s,
            "<text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            SVG_H - PAD + 16.0,
            h.lo,
            SVG_W - PAD - 20.0,
            SVG_H - PAD + 16.0,
            h.hi
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn curve_svg(curve: &[CurvePoint]) -> String {
    let mut s = svg_open("similarity after regeneration");
    let last = curve.last().map_or(1, |p| p.iteration).max(1) as f64;
    let plot_w = SVG_W - 2.0 * PAD;
    let plot_h = SVG_H - 2.0 * PAD;
    let pts: Vec<String> = curve
        .iter()
        .map(|p| {
            let x = PAD + plot_w * p.iteration as f64 / last;
            let y = SVG_H - PAD - plot_h * p.similarity_mean.clamp(0.0, 1.0);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>", COLOURS[0], pts.join(" "));
    s.push_str("</svg>\n");
    s
}
