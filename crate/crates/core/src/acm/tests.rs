use super::*;
use crate::model::{ViTConfig, ViTModel};
use crate::quant::{calibrate, quantized_forward, QuantConfig};
use crate::rng::SeedStream;

fn small_model(seed: u64) -> ViTModel {
    ViTModel::init(
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            hidden_dim: 8,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            use_cls_token: false,
        },
        seed,
    )
    .unwrap()
}

fn images(model: &ViTModel, n: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let mut s = SeedStream::new(seed + i as u64);
            crate::rng::gaussian_image(&mut s, 3, model.config.image_size, 0.5, 0.25, true)
        })
        .collect()
}

fn qcfg(bits_w: u8, bits_a: u8) -> QuantConfig {
    QuantConfig {
        bits_w,
        bits_a,
        quantize_patch_embed: true,
        act_percentile: 100.0,
    }
}

#[test]
fn hooks_resolve_in_order() {
    let cfg = small_model(1).config;
    let hooks = resolve_hooks(&cfg, None).unwrap();
    assert_eq!(hooks, vec![HookPoint::FinalFeatures, HookPoint::Logits]);
    let hooks = resolve_hooks(&cfg, Some(2)).unwrap();
    assert_eq!(
        hooks,
        vec![
            HookPoint::AfterBlock(1),
            HookPoint::AfterBlock(3),
            HookPoint::FinalFeatures,
            HookPoint::Logits
        ]
    );
    assert!(matches!(
        resolve_hooks(&cfg, Some(0)),
        Err(AcmError::BadGamma { .. })
    ));
    assert!(matches!(
        resolve_hooks(&cfg, Some(9)),
        Err(AcmError::BadGamma { .. })
    ));
}

#[test]
fn lossless_quantization_gives_vanishing_corrections() {
    let model = small_model(2);
    let samples = images(&model, 3, 10);
    let qm = calibrate(&model, &samples, &qcfg(32, 32)).unwrap();
    for gamma in [None, Some(2)] {
        let acm = compute_acm(&model, &qm, &samples, gamma).unwrap();
        for hook in &acm.hooks {
            for &v in &hook.values {
                assert!(v.abs() < 1e-6, "{} carries {v}", hook.hook.label());
            }
        }
    }
}

#[test]
fn zero_corrections_leave_quantized_forward_bit_identical() {
    let model = small_model(3);
    let samples = images(&model, 2, 20);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    let zero = AcmSet {
        hooks: resolve_hooks(&model.config, Some(1))
            .unwrap()
            .into_iter()
            .map(|hook| HookCorrection {
                values: vec![0.0; hook.dim(&model.config)],
                hook,
            })
            .collect(),
        sample_count: 1,
    };
    let img = &images(&model, 1, 30)[0];
    let plain = quantized_forward(&qm, img, true).unwrap();
    let corrected = corrected_forward(&qm, &zero, img, true).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain.logits), bits(&corrected.logits));
    for (p, c) in plain.msa_outputs.iter().zip(&corrected.msa_outputs) {
        assert_eq!(bits(p.data()), bits(c.data()));
    }
}

#[test]
fn single_sample_correction_is_exact_difference() {
    let model = small_model(4);
    let sample = images(&model, 1, 40);
    let qm = calibrate(&model, &sample, &qcfg(3, 6)).unwrap();
    let acm = compute_acm(&model, &qm, &sample, None).unwrap();
    assert_eq!(acm.sample_count, 1);

    let hooks = resolve_hooks(&model.config, None).unwrap();
    let fp = fp_hook_capture(&model, &sample[0], &hooks).unwrap();
    // Hook 0: no corrections active.
    let q0 = quantized_hook_capture(&qm, &sample[0], &[], &hooks[..1]).unwrap();
    let expect0: Vec<f64> = fp.hooks[0]
        .1
        .iter()
        .zip(&q0.hooks[0].1)
        .map(|(f, q)| f - q)
        .collect();
    assert_eq!(acm.hooks[0].values, expect0);

    // Hook 1: computed with hook 0's correction already applied.
    let q1 = quantized_hook_capture(&qm, &sample[0], &acm.hooks[..1], &hooks[1..]).unwrap();
    let expect1: Vec<f64> = fp.hooks[1]
        .1
        .iter()
        .zip(&q1.hooks[0].1)
        .map(|(f, q)| f - q)
        .collect();
    assert_eq!(acm.hooks[1].values, expect1);
}

#[test]
fn two_sample_correction_is_mean_of_sequential_singles() {
    let model = small_model(5);
    let samples = images(&model, 2, 50);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    let acm = compute_acm(&model, &qm, &samples, None).unwrap();

    let hooks = resolve_hooks(&model.config, None).unwrap();
    for (i, &hook) in hooks.iter().enumerate() {
        let mut mean = vec![0.0; hook.dim(&model.config)];
        for img in &samples {
            let fp = fp_hook_capture(&model, img, &[hook]).unwrap();
            let q = quantized_hook_capture(&qm, img, &acm.hooks[..i], &[hook]).unwrap();
            for ((m, f), qv) in mean.iter_mut().zip(&fp.hooks[0].1).zip(&q.hooks[0].1) {
                *m += (f - qv) / samples.len() as f64;
            }
        }
        for (a, b) in acm.hooks[i].values.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15, "hook {i}");
        }
    }
}

#[test]
fn first_hook_mean_alignment_holds_by_construction() {
    let model = small_model(6);
    let samples = images(&model, 4, 60);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    let acm = compute_acm(&model, &qm, &samples, Some(2)).unwrap();
    let first = acm.hooks[0].hook;

    let dim = first.dim(&model.config);
    let mut fp_mean = vec![0.0; dim];
    let mut corrected_mean = vec![0.0; dim];
    for img in &samples {
        let fp = fp_hook_capture(&model, img, &[first]).unwrap();
        // Corrected activation at the first hook: captured value (pre-hook
        // correction) plus the hook's own correction.
        let q = quantized_hook_capture(&qm, img, &[], &[first]).unwrap();
        for j in 0..dim {
            fp_mean[j] += fp.hooks[0].1[j] / samples.len() as f64;
            corrected_mean[j] +=
                (q.hooks[0].1[j] + acm.hooks[0].values[j]) / samples.len() as f64;
        }
    }
    for (a, b) in fp_mean.iter().zip(&corrected_mean) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn param_count_matches_hook_dims() {
    let model = small_model(7);
    assert_eq!(acm_param_count(&AcmSet::empty()), 0);

    let samples = images(&model, 1, 70);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    let acm = compute_acm(&model, &qm, &samples, None).unwrap();
    // Default hooks: final features (D) plus logits (C).
    assert_eq!(
        acm_param_count(&acm),
        model.config.hidden_dim + model.config.num_classes
    );
}

#[test]
fn toy_default_overhead_is_below_a_tenth_percent() {
    let model = ViTModel::init(ViTConfig::toy(), 8).unwrap();
    let acm = AcmSet {
        hooks: resolve_hooks(&model.config, None)
            .unwrap()
            .into_iter()
            .map(|hook| HookCorrection {
                values: vec![0.0; hook.dim(&model.config)],
                hook,
            })
            .collect(),
        sample_count: 16,
    };
    assert_eq!(acm_param_count(&acm), 64 + 10);
    let ratio = 100.0 * acm_param_count(&acm) as f64 / model.param_count() as f64;
    assert!(ratio < 0.1, "ratio {ratio}%");
}

#[test]
fn validation_rejects_bad_sets() {
    let cfg = small_model(9).config;
    let unordered = AcmSet {
        hooks: vec![
            HookCorrection {
                hook: HookPoint::Logits,
                values: vec![0.0; cfg.num_classes],
            },
            HookCorrection {
                hook: HookPoint::FinalFeatures,
                values: vec![0.0; cfg.hidden_dim],
            },
        ],
        sample_count: 1,
    };
    assert!(matches!(unordered.validate(&cfg), Err(AcmError::HookOrder)));

    let bad_dim = AcmSet {
        hooks: vec![HookCorrection {
            hook: HookPoint::FinalFeatures,
            values: vec![0.0; 3],
        }],
        sample_count: 1,
    };
    assert!(matches!(bad_dim.validate(&cfg), Err(AcmError::HookDim { .. })));
}

#[test]
fn empty_samples_error() {
    let model = small_model(10);
    let samples = images(&model, 1, 80);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    assert!(matches!(
        compute_acm(&model, &qm, &[], None),
        Err(AcmError::EmptySamples)
    ));
}

#[test]
fn acm_file_roundtrip() {
    let model = small_model(11);
    let samples = images(&model, 2, 90);
    let qm = calibrate(&model, &samples, &qcfg(4, 8)).unwrap();
    let acm = compute_acm(&model, &qm, &samples, Some(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acm.ckpt");
    save_acm(&path, &acm, &model.config).unwrap();
    let loaded = load_acm(&path, &model.config).unwrap();
    assert_eq!(acm, loaded);
}
