use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wind_core::channel::{gaussian_tensor, truncated_rho, Channel, ChannelParams, SyntheticChannel};
use wind_core::tensor::{cosine_similarity, Shape};

fn params() -> impl Strategy<Value = ChannelParams> {
    (0.05f64..0.99, 0.0f64..0.2, 0.05f64..0.99, 0.0f64..0.2, any::<u64>()).prop_map(|(pm, ps, qm, qs, seed)| ChannelParams {
        rho_private_mean: pm,
        rho_private_spread: ps,
        rho_public_mean: qm,
        rho_public_spread: qs,
        regen_decay: 0.95,
        channel_seed: seed,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_seed_and_nonce_replay_bitwise(p in params(), nonce in any::<u64>(), zseed in any::<u64>()) {
        let ch = SyntheticChannel::new(p).unwrap();
        let z = gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(zseed), Shape::new(4, 16, 16));
        let img = ch.generate(&z, nonce).unwrap();
        prop_assert_eq!(ch.invert_private(&img, nonce).unwrap(), ch.invert_private(&img, nonce).unwrap());
        prop_assert_eq!(ch.invert_public(&img, nonce).unwrap(), ch.invert_public(&img, nonce).unwrap());
    }

    #[test]
    fn outputs_have_unit_scale(p in params(), nonce in any::<u64>(), zseed in any::<u64>(), gain in 0.01f64..100.0) {
        let ch = SyntheticChannel::new(p).unwrap();
        let mut z = gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(zseed), Shape::sd_latent());
        z.scale(gain);
        let img = ch.generate(&z, nonce).unwrap();
        for out in [ch.invert_private(&img, nonce).unwrap(), ch.invert_public(&img, nonce).unwrap()] {
            prop_assert!((out.std() - 1.0).abs() < 0.1, "std {}", out.std());
            prop_assert!(out.is_finite());
        }
    }

    #[test]
    fn rho_stays_in_the_open_unit_interval(mean in 0.0f64..=1.0, spread in 0.001f64..0.99, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let r = truncated_rho(&mut rng, mean, spread);
            prop_assert!(r > 0.0 && r < 1.0, "rho {r}");
        }
    }
}

#[test]
fn correct_and_wrong_matches_separate_by_five_pooled_sd() {
    let ch = SyntheticChannel::new(ChannelParams::default()).unwrap();
    let shape = Shape::sd_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut right, mut wrong) = (Vec::new(), Vec::new());
    for t in 0..200u64 {
        let z = gaussian_tensor(&mut rng, shape);
        let other = gaussian_tensor(&mut rng, shape);
        let rec = ch.invert_private(&ch.generate(&z, t).unwrap(), t).unwrap();
        right.push(cosine_similarity(&z, &rec).unwrap());
        wrong.push(cosine_similarity(&other, &rec).unwrap());
    }
    let (rm, rs) = wind_core::channel::mean_std(&right);
    let (wm, ws) = wind_core::channel::mean_std(&wrong);
    let z = (rm - wm) / ((rs * rs + ws * ws) / 2.0).sqrt();
    assert!(z >= 5.0, "pooled z {z}");
}
