use super::*;
use crate::model::TrainConfig;
use crate::rng::SeedStream;
use crate::synth::SynthesisConfig;

/// Micro run config: everything small enough for second-scale tests.
fn micro_config(out_dir: std::path::PathBuf) -> RunConfig {
    let mut cfg = RunConfig::new(out_dir);
    cfg.model = ViTConfig {
        image_size: 8,
        patch_size: 4,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 10,
        use_cls_token: false,
    };
    cfg.data = DataConfig {
        seed: 7,
        train_count: 20,
        test_count: 10,
    };
    cfg.train = TrainConfig {
        epochs: 1,
        batch_size: 10,
        lr: 1e-3,
        weight_decay: 0.0,
        seed: 1,
    };
    cfg.synth = SynthesisConfig {
        iterations: 2,
        entropy_grid: 64,
        ..SynthesisConfig::default()
    };
    cfg.calib_samples = 4;
    cfg
}

#[test]
fn topk_perfect_oracle_scores_100() {
    let images: Vec<Tensor> = (0..5).map(|_| Tensor::zeros(vec![1, 2, 2])).collect();
    let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let mut i = 0;
    let acc = evaluate_topk(
        |_| {
            let mut logits = vec![0.0; 3];
            logits[labels[i]] = 1.0;
            i += 1;
            Ok(logits)
        },
        &images,
        &labels,
        &[1, 3],
    )
    .unwrap();
    assert_eq!(acc, vec![100.0, 100.0]);
}

#[test]
fn topk_uniform_random_is_near_chance() {
    let n = 1000;
    let classes = 10;
    let images: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(vec![1, 2, 2])).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut stream = SeedStream::new(11);
    let acc = evaluate_topk(
        |_| Ok((0..classes).map(|_| stream.gaussian(0.0, 1.0)).collect()),
        &images,
        &labels,
        &[1, 5],
    )
    .unwrap();
    // 3-sigma binomial bands around 10% and 50%.
    let sigma1 = 100.0 * (0.1f64 * 0.9 / n as f64).sqrt();
    let sigma5 = 100.0 * (0.5f64 * 0.5 / n as f64).sqrt();
    assert!((acc[0] - 10.0).abs() < 3.0 * sigma1, "top1 {}", acc[0]);
    assert!((acc[1] - 50.0).abs() < 3.0 * sigma5, "top5 {}", acc[1]);
    assert!(acc[1] >= acc[0]);
}

#[test]
fn topk_ties_prefer_lower_class() {
    let images = vec![Tensor::zeros(vec![1, 2, 2])];
    let acc = evaluate_topk(|_| Ok(vec![1.0, 1.0, 1.0]), &images, &[0], &[1]).unwrap();
    assert_eq!(acc[0], 100.0);
    let acc = evaluate_topk(|_| Ok(vec![1.0, 1.0, 1.0]), &images, &[2], &[1]).unwrap();
    assert_eq!(acc[0], 0.0);
}

#[test]
fn topk_rejects_bad_k() {
    let images = vec![Tensor::zeros(vec![1, 2, 2])];
    assert!(evaluate_topk(|_| Ok(vec![0.0; 3]), &images, &[0], &[4]).is_err());
    assert!(evaluate_topk(|_| Ok(vec![0.0; 3]), &images, &[0], &[0]).is_err());
    assert!(evaluate_topk(|_| Ok(vec![0.0; 3]), &[], &[], &[1]).is_err());
}

#[test]
fn median_of_odd_and_even() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn report_roundtrips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path().to_path_buf());
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        payload: ReportPayload {
            config: cfg,
            fp_top1: 93.359375,
            fp_top5: 99.21875,
            top1: 90.0000000001,
            top5: 98.5,
            model_params: 12345,
            acm_params: 74,
            acm_ratio_percent: 74.0 / 123.45,
        },
        timings: Timings::default(),
        generated_unix_ms: 123,
    };
    let path = dir.path().join("report.json");
    emit_report(&report, &path).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(report, back);
    assert_eq!(
        report.deterministic_payload_json(),
        back.deterministic_payload_json()
    );
}

#[test]
fn report_validation_orders_topk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path().to_path_buf());
    let mut report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        payload: ReportPayload {
            config: cfg,
            fp_top1: 90.0,
            fp_top5: 95.0,
            top1: 88.0,
            top5: 80.0,
            model_params: 1,
            acm_params: 0,
            acm_ratio_percent: 0.0,
        },
        timings: Timings::default(),
        generated_unix_ms: 0,
    };
    assert!(report.validate().is_err());
    report.payload.top5 = 101.0;
    assert!(report.validate().is_err());
}

#[test]
fn micro_pipeline_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(dir.path().join("run"));
    cfg.calib_source = CalibSource::Noise;
    cfg.bits_w = 32;
    cfg.bits_a = 32;
    cfg.acm = true;

    let first = run_pipeline(&cfg).unwrap();
    assert!(fp_checkpoint_path(&cfg.out_dir).exists());
    assert!(quant_params_path(&cfg.out_dir).exists());
    assert!(acm_path(&cfg.out_dir).exists());
    assert!(cfg.out_dir.join("report.json").exists());

    // Rerun reuses fp.ckpt and must reproduce the payload byte for byte.
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(
        first.deterministic_payload_json(),
        second.deterministic_payload_json()
    );

    // The report echoes a config sufficient to re-run the arm.
    let loaded = read_report(&cfg.out_dir.join("report.json")).unwrap();
    assert_eq!(loaded.payload.config, cfg);
}

#[test]
fn micro_synth_pipeline_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(dir.path().join("run"));
    cfg.calib_source = CalibSource::SynthesizedE2h;
    cfg.acm = false;
    run_pipeline(&cfg).unwrap();
    assert!(cfg.out_dir.join("manifest.txt").exists());
    assert!(cfg.out_dir.join("samples/sample_00.tensor").exists());
    assert!(cfg.out_dir.join("samples/sample_03.ppm").exists());
    assert!(!acm_path(&cfg.out_dir).exists());
}

#[test]
fn stage_errors_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(dir.path().join("run"));
    cfg.bits_w = 1;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, "config");

    let mut cfg = micro_config(dir.path().join("run2"));
    cfg.train_if_missing = false;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, "model");
    assert!(err.to_string().contains("stage model"));
}

#[test]
fn compare_pairs_share_initial_images() {
    // The pairing contract: with the same run seed the e2h and fixed arms
    // draw identical per-sample init streams.
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path().join("run"));
    let mut e2h_cfg = cfg.clone();
    e2h_cfg.calib_source = CalibSource::SynthesizedE2h;
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.calib_source = CalibSource::SynthesizedFixed;
    e2h_cfg.seed = 5;
    fixed_cfg.seed = 5;

    let se = e2h_cfg.synth_config();
    let sf = fixed_cfg.synth_config();
    assert_eq!(se.seed, sf.seed);
    let seed0 = crate::rng::derive_seed(se.seed, &[0x73616d_706c65, 0]);
    let mut a = SeedStream::new(seed0);
    let mut b = SeedStream::new(seed0);
    let ia = crate::rng::gaussian_image(&mut a, 3, 8, 0.5, 0.25, true);
    let ib = crate::rng::gaussian_image(&mut b, 3, 8, 0.5, 0.25, true);
    assert_eq!(ia.data(), ib.data());
}
