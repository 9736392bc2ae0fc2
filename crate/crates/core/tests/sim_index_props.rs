use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wind_core::align::{PreparedQuery, Stage2Config};
use wind_core::channel::{gaussian_tensor, Channel, ChannelParams, SyntheticChannel};
use wind_core::codebook::{CodebookSpec, Salt};
use wind_core::detector::{brute_force, scan_list, DetectionConfig, Detector, Variant};
use wind_core::group_identifier::{embed, RingGeometry};
use wind_core::sim_index::SketchIndex;
use wind_core::tensor::{cosine_slices, Shape};

fn spec(n: u64, m: u64) -> CodebookSpec {
    CodebookSpec::new(n, m, Salt::new(vec![0x17; 32]).unwrap(), Shape::sd_latent()).unwrap()
}

#[test]
fn sketch_error_percentile_matches_analytic_value() {
    // Independent pairs: cos_full ≈ 0 while the sketch cosine carries the
    // band's sampling error (484 real dofs) plus the projection's (k = 256),
    // so the error is ≈ N(0, 1/484 + 1/256) with 99th |.| percentile
    // 2.576·√(1/484 + 1/256) ≈ 0.199.
    let s = spec(16, 1);
    let idx = SketchIndex::build(&s, 256, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut err: Vec<f64> = (0..10_000)
        .map(|_| {
            let a = gaussian_tensor(&mut rng, s.shape);
            let b = gaussian_tensor(&mut rng, s.shape);
            let full = cosine_slices(a.as_slice(), b.as_slice()).unwrap();
            let sk = cosine_slices(&idx.sketch(&a), &idx.sketch(&b)).unwrap();
            (sk - full).abs()
        })
        .collect();
    err.sort_by(f64::total_cmp);
    let p99 = err[9_899];
    let analytic = 2.576 * (1.0 / 484.0 + 1.0 / 256.0f64).sqrt();
    assert!((p99 / analytic - 1.0).abs() < 0.1, "p99 {p99} vs {analytic}");
}

#[test]
fn rebuild_is_byte_identical() {
    let s = spec(40, 4);
    let bytes = |idx: &SketchIndex| {
        let mut v = Vec::new();
        idx.write_to(&mut v).unwrap();
        v
    };
    assert_eq!(bytes(&SketchIndex::build(&s, 64, 9).unwrap()), bytes(&SketchIndex::build(&s, 64, 9).unwrap()));
    assert_ne!(bytes(&SketchIndex::build(&s, 64, 9).unwrap()), bytes(&SketchIndex::build(&s, 64, 10).unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn full_shortlist_equals_brute_force(seed in any::<u64>(), i in 0u64..24) {
        let s = spec(24, 4);
        let idx = SketchIndex::build(&s, 32, seed).unwrap();
        let ch = SyntheticChannel::new(ChannelParams::default()).unwrap();
        let rec = ch.invert_private(&ch.generate(&s.noise(i).unwrap(), seed).unwrap(), seed).unwrap();
        let q = PreparedQuery::new(&rec, &Stage2Config::default()).unwrap();
        let list = idx.query(&s, &rec, 24).unwrap();
        prop_assert_eq!(list.len(), 24);
        let composite = scan_list(&s, &list, &q).unwrap();
        let brute = brute_force(&s, &[&q])[0].unwrap();
        prop_assert_eq!(composite.index, brute.index);
        prop_assert_eq!(composite.score, brute.score);
    }

    #[test]
    fn index_backed_scans_regenerate_at_most_top_k(seed in any::<u64>(), i in 0u64..200, wrong in 0u64..8, top_k in 1usize..20) {
        let s = spec(200, 8);
        let idx = SketchIndex::build(&s, 64, 1).unwrap();
        let geo = RingGeometry::for_groups(8, s.shape);
        let ch = SyntheticChannel::new(ChannelParams::default()).unwrap();
        let mut cfg = DetectionConfig::for_shape(s.shape, Variant::Full);
        cfg.index_top_k = top_k;
        cfg.index_crossover = 0;
        let det = Detector::new(&s, geo, cfg, &ch, Some(&idx)).unwrap();
        let z = embed(&s.noise(i).unwrap(), wrong, 8, &geo).unwrap();
        let rec = ch.invert_private(&ch.generate(&z, seed).unwrap(), seed).unwrap();
        let r = det.detect_reconstructed(&rec).unwrap();
        let budget = if r.fell_back { 2 * top_k } else { top_k };
        prop_assert!(r.candidates_scanned as usize <= budget, "{} > {budget}", r.candidates_scanned);
    }
}
