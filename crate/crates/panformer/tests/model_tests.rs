//! Model-level tests: output-shape law across fusion variants, parameter
//! counting, seeded-initialization determinism, and input validation.

use panformer::model::{FusionVariant, PanFormerConfig, PanFormerModel};
use panformer::tensor::{Eager, Engine, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(variant: FusionVariant) -> PanFormerConfig {
    PanFormerConfig {
        c: 8,
        heads: 2,
        window: 4,
        sab_per_path: 2,
        cab_count: 1,
        mlp_ratio: 2,
        bands: 4,
        fusion_variant: variant,
        ..PanFormerConfig::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn forward_shape(cfg: PanFormerConfig, ms_hw: usize) -> Vec<usize> {
    let model = PanFormerModel::init_seeded(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut e = Eager::new();
    let pan = rand_tensor(&mut rng, vec![1, 4 * ms_hw, 4 * ms_hw, 1]);
    let ms = rand_tensor(&mut rng, vec![1, ms_hw, ms_hw, cfg.bands]);
    let pan = e.constant(pan);
    let ms = e.constant(ms);
    let out = model.forward(&mut e, &pan, &ms).unwrap();
    e.shape(&out)
}

#[test]
fn output_is_4x_ms_for_every_variant_small_sizes() {
    for variant in FusionVariant::ALL {
        for &hw in &[16usize, 24] {
            let shape = forward_shape(tiny_cfg(variant), hw);
            assert_eq!(
                shape,
                vec![1, 4 * hw, 4 * hw, 4],
                "variant {} at MS {hw}x{hw}",
                variant.name()
            );
        }
    }
}

#[test]
fn test_geometry_400_from_100_all_variants() {
    for variant in FusionVariant::ALL {
        let shape = forward_shape(tiny_cfg(variant), 100);
        assert_eq!(shape, vec![1, 400, 400, 4], "variant {}", variant.name());
    }
}

#[test]
fn default_param_count_in_documented_band() {
    let model = PanFormerModel::init_seeded(PanFormerConfig::default(), 0).unwrap();
    let n = model.param_count();
    assert_eq!(n, 1_500_420, "documented default parameter count");
    assert!((1_380_000..=1_680_000).contains(&n));
}

#[test]
fn variant_param_counts_agree_within_2_percent() {
    let counts: Vec<usize> = FusionVariant::ALL
        .iter()
        .map(|&v| {
            let cfg = PanFormerConfig { fusion_variant: v, ..PanFormerConfig::default() };
            PanFormerModel::init_seeded(cfg, 0).unwrap().param_count()
        })
        .collect();
    let min = *counts.iter().min().unwrap() as f64;
    let max = *counts.iter().max().unwrap() as f64;
    assert!(
        (max - min) / max <= 0.02,
        "variant counts {counts:?} spread {:.4}",
        (max - min) / max
    );
}

#[test]
fn seeded_init_is_deterministic_and_seed_sensitive() {
    let cfg = tiny_cfg(FusionVariant::Bidirectional);
    let a = PanFormerModel::init_seeded(cfg, 7).unwrap();
    let b = PanFormerModel::init_seeded(cfg, 7).unwrap();
    let c = PanFormerModel::init_seeded(cfg, 8).unwrap();
    let flat = |m: &PanFormerModel| -> Vec<f64> {
        m.params.iter().flat_map(|p| p.value.data().to_vec()).collect()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn forward_rejects_mismatched_pan_geometry() {
    let cfg = tiny_cfg(FusionVariant::Concat);
    let model = PanFormerModel::init_seeded(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut e = Eager::new();
    let pan = e.constant(rand_tensor(&mut rng, vec![1, 32, 32, 1])); // should be 64x64
    let ms = e.constant(rand_tensor(&mut rng, vec![1, 16, 16, 4]));
    assert!(model.forward(&mut e, &pan, &ms).is_err());
}

#[test]
fn config_validation_catches_bad_settings() {
    let mut cfg = PanFormerConfig::default();
    cfg.sab_per_path = 3; // must be even
    assert!(cfg.validate().is_err());
    let mut cfg = PanFormerConfig::default();
    cfg.c = 30; // not a multiple of heads=8
    assert!(cfg.validate().is_err());
    let mut cfg = PanFormerConfig::default();
    cfg.scale = 2;
    assert!(cfg.validate().is_err());
    let mut cfg = PanFormerConfig::default();
    cfg.cab_count = 0;
    assert!(cfg.validate().is_err());
}
