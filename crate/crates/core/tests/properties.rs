//! Cross-module invariants checked against scalar re-computations.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualsr_core::backbone::{DenoiserArch, DenoiserConfig, DenoiserRole, DenoiserWeights, EpsModel};
use dualsr_core::checkpoint::Checkpoint;
use dualsr_core::codec::{CodecConfig, CodecWeights};
use dualsr_core::degrade::{degrade, replay, DegradationRecipe};
use dualsr_core::infer::{blend_eps, Bundle, GuidanceScales};
use dualsr_core::lora::{apply_adapters, init_lora, merge, AdapterRole, LoraAdapter};
use dualsr_core::losses::cfg_combine;
use dualsr_core::nn::gaussian_vec;
use dualsr_core::perception::Condition;
use dualsr_core::schedule::make_schedule;
use dualsr_core::tensor::{tensor_from_vec, ImageTensor, LatentTensor};

fn latent(data: Vec<f64>) -> LatentTensor {
    let n = data.len();
    LatentTensor::from_vec(data, (1, 1, 1, n)).unwrap()
}

fn pointwise(c: usize, k: usize) -> DenoiserConfig {
    DenoiserConfig {
        arch: DenoiserArch::Pointwise,
        latent_channels: c,
        num_classes: k,
    }
}

fn randomized(base: &DenoiserWeights, role: AdapterRole, rank: usize, seed: u64) -> LoraAdapter {
    let layers = base.config().layers();
    let mut table = init_lora(&layers, rank, seed, role).unwrap().params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(1));
    for v in table.values_mut() {
        *v = tensor_from_vec(gaussian_vec(&mut rng, v.elem_count(), 0.5), v.dims()).unwrap();
    }
    LoraAdapter::from_params(role, rank, &layers, &table).unwrap()
}

fn tiny_bundle(seed: u64) -> Bundle {
    let cfg = DenoiserConfig {
        arch: DenoiserArch::Unet {
            base_width: 4,
            channel_mults: vec![1, 2],
        },
        latent_channels: 4,
        num_classes: 8,
    };
    let base = DenoiserWeights::init(cfg, DenoiserRole::StudentBase, seed).unwrap();
    let pixel = randomized(&base, AdapterRole::Pixel, 2, seed + 1);
    let semantic = randomized(&base, AdapterRole::Semantic, 2, seed + 2);
    let codec = CodecWeights::init(
        CodecConfig {
            width: 4,
            ..CodecConfig::default()
        },
        seed + 3,
    )
    .unwrap();
    Bundle::new(make_schedule(100, 1e-4, 0.02).unwrap(), codec, base, pixel, semantic, None, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn blend_matches_scalar_formula(
        pix in prop::collection::vec(-3.0f64..3.0, 12),
        pisa in prop::collection::vec(-3.0f64..3.0, 12),
        lp in 0.0f64..2.0,
        ls in 0.0f64..2.0,
    ) {
        let got = blend_eps(&latent(pix.clone()), &latent(pisa.clone()), GuidanceScales::new(lp, ls))
            .unwrap()
            .to_vec()
            .unwrap();
        for ((g, a), b) in got.iter().zip(&pix).zip(&pisa) {
            let want = lp * a + ls * (b - a);
            prop_assert!((g - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn cfg_combine_is_affine_in_lambda(
        u in prop::collection::vec(-3.0f64..3.0, 12),
        c in prop::collection::vec(-3.0f64..3.0, 12),
        lambda in 0.0f64..10.0,
    ) {
        let got = cfg_combine(&latent(u.clone()), &latent(c.clone()), lambda).unwrap().to_vec().unwrap();
        for ((g, a), b) in got.iter().zip(&u).zip(&c) {
            let want = a + lambda * (b - a);
            prop_assert!((g - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn merged_adapters_match_the_adapter_path(
        seed in 0u64..1000,
        z in prop::collection::vec(-2.0f64..2.0, 3 * 9),
        t in 0usize..=100,
        class in 0usize..3,
    ) {
        let base = DenoiserWeights::init(pointwise(3, 2), DenoiserRole::StudentBase, seed).unwrap();
        let a = randomized(&base, AdapterRole::Pixel, 1, seed + 10);
        let b = randomized(&base, AdapterRole::Semantic, 2, seed + 20);
        let z = LatentTensor::from_vec(z, (1, 3, 3, 3)).unwrap();
        let cond = [if class == 2 { Condition::Null } else { Condition::Class(class) }];
        let merged = merge(&base, &[&a, &b]).unwrap().eps(&z, &[t], &cond).unwrap();
        let adapted = apply_adapters(&base, &[&a, &b]).unwrap().eps(&z, &[t], &cond).unwrap();
        prop_assert!(merged.rel_diff(&adapted).unwrap() <= 1e-10);
    }

    #[test]
    fn degradation_replays_from_its_record(
        seed in any::<u64>(),
        blur in 0.0f64..1.5,
        noise in 0.0f64..0.05,
        quality in 30u32..=100,
        factor in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let x = ImageTensor::from_vec(
            gaussian_vec(&mut ChaCha8Rng::seed_from_u64(seed), 3 * 16 * 16, 0.2).iter().map(|v| 0.5 + v).collect(),
            1, 16, 16,
        ).unwrap();
        let recipe = DegradationRecipe {
            blur_sigma_range: [0.0, blur],
            noise_sigma_range: [0.0, noise],
            downscale_factor: factor,
            compress_quality_range: [quality, 100],
            seed: 0,
        };
        let (lq, rec) = degrade(&x, &recipe, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(lq.dims(), (1, 16, 16));
        prop_assert_eq!(replay(&x, &rec).unwrap().to_vec().unwrap(), lq.to_vec().unwrap());
    }
}

#[test]
fn checkpoint_round_trip_preserves_restorations() {
    let bundle = tiny_bundle(5);
    let mut ck = Checkpoint::new(bundle.schedule().params(), 1, serde_json::json!({"note": "test"}));
    ck.codec = Some(bundle.codec().clone());
    ck.student_base = Some(bundle.student_base().clone());
    ck.pixel = Some(bundle.pixel().clone());
    ck.semantic = Some(bundle.semantic().clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().bundle().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = ImageTensor::from_vec(
        gaussian_vec(&mut rng, 3 * 16 * 16, 0.2).iter().map(|v| 0.5 + v).collect(),
        1,
        16,
        16,
    )
    .unwrap();
    for s in [GuidanceScales::new(1.0, 1.0), GuidanceScales::new(0.3, 1.7)] {
        assert_eq!(
            bundle.restore_adjustable(&x, s).unwrap().to_vec().unwrap(),
            loaded.restore_adjustable(&x, s).unwrap().to_vec().unwrap()
        );
    }
    assert_eq!(
        bundle.restore_default(&x).unwrap().to_vec().unwrap(),
        loaded.restore_default(&x).unwrap().to_vec().unwrap()
    );
}

#[test]
fn eval_counts_two_passes_per_image() {
    let bundle = tiny_bundle(6);
    let x = ImageTensor::constant(0.4, 16, 16).unwrap();
    let before = bundle.denoiser_evaluations();
    let cache = bundle.build_cache("x", &x).unwrap();
    assert_eq!(bundle.denoiser_evaluations() - before, 2);
    for lp in [0.0, 0.5, 1.0, 1.5] {
        bundle.blend_from_cache(&cache, GuidanceScales::new(lp, 1.0 - lp / 2.0)).unwrap();
    }
    assert_eq!(bundle.denoiser_evaluations() - before, 2);
}
