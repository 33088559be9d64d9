//! End-to-end orchestration: train (or load), synthesize calibration
//! samples, calibrate quantizers, compute corrections, evaluate, and emit a
//! machine-readable report. Each stage reads and writes run-directory
//! artifacts so subcommands can resume from a previous stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acm::{self, AcmSet};
use crate::ckpt;
use crate::data::{self, Split, ToyDataset};
use crate::model::{self, TrainConfig, ViTConfig, ViTModel};
use crate::quant::{self, QuantConfig, QuantizedModel};
use crate::synth::{self, CropStrategy, SynthesisConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

fn stage<T, E: std::error::Error + Send + Sync + 'static>(
    name: &'static str,
    r: Result<T, E>,
) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError {
        stage: name,
        source: Box::new(e),
    })
}

fn stage_msg(name: &'static str, msg: String) -> PipelineError {
    PipelineError {
        stage: name,
        source: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibSource {
    SynthesizedE2h,
    SynthesizedFixed,
    Real,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_count: 512,
            test_count: 256,
        }
    }
}

/// Everything one arm needs; serializing this back out of a report is
/// enough to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub synth: SynthesisConfig,
    pub bits_w: u8,
    pub bits_a: u8,
    pub quantize_patch_embed: bool,
    pub act_percentile: f64,
    pub calib_source: CalibSource,
    pub calib_samples: usize,
    pub acm: bool,
    pub acm_gamma: Option<usize>,
    /// Master seed for synthesis / subset / noise draws.
    pub seed: u64,
    pub train_if_missing: bool,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        Self {
            model: ViTConfig::toy(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            synth: SynthesisConfig::default(),
            bits_w: 8,
            bits_a: 8,
            quantize_patch_embed: true,
            act_percentile: 100.0,
            calib_source: CalibSource::SynthesizedE2h,
            calib_samples: 16,
            acm: true,
            acm_gamma: None,
            seed: 0,
            train_if_missing: true,
            out_dir,
        }
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            quantize_patch_embed: self.quantize_patch_embed,
            act_percentile: self.act_percentile,
        }
    }

    /// Synthesis config with the strategy implied by the calibration source
    /// and a stream derived from the run seed.
    pub fn synth_config(&self) -> SynthesisConfig {
        let mut s = self.synth;
        s.strategy = match self.calib_source {
            CalibSource::SynthesizedFixed => CropStrategy::Fixed,
            _ => CropStrategy::E2h,
        };
        s.seed = crate::rng::derive_seed(self.seed, &[0x73796e7468]);
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        stage("config", self.model.validate())?;
        for bits in [self.bits_w, self.bits_a] {
            if !(2..=32).contains(&bits) {
                return Err(stage_msg(
                    "config",
                    format!("bit widths must be in 2..=32, got {bits}"),
                ));
            }
        }
        if self.calib_samples == 0 {
            return Err(stage_msg("config", "calib_samples must be >= 1".into()));
        }
        stage("config", self.synth.validate())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportPayload {
    pub config: RunConfig,
    pub fp_top1: f64,
    pub fp_top5: f64,
    pub top1: f64,
    pub top5: f64,
    pub model_params: usize,
    pub acm_params: usize,
    pub acm_ratio_percent: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Timings {
    pub train_s: f64,
    pub synth_s: f64,
    pub calibrate_s: f64,
    pub acm_s: f64,
    pub eval_s: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The `payload` section is the determinism contract: identical configs
/// produce byte-identical payload JSON. Timings and the timestamp live
/// outside it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    pub payload: ReportPayload,
    pub timings: Timings,
    pub generated_unix_ms: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = &self.payload;
        for (name, v) in [
            ("top1", p.top1),
            ("top5", p.top5),
            ("fp_top1", p.fp_top1),
            ("fp_top5", p.fp_top5),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(stage_msg("report", format!("{name} = {v} out of range")));
            }
        }
        if p.top1 > p.top5 || p.fp_top1 > p.fp_top5 {
            return Err(stage_msg("report", "top-1 exceeds top-5".into()));
        }
        Ok(())
    }

    pub fn deterministic_payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), PipelineError> {
    report.validate()?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    stage("report", std::fs::write(path, text))
}

pub fn read_report(path: &Path) -> Result<EvalReport, PipelineError> {
    let text = stage("report", std::fs::read_to_string(path))?;
    stage("report", serde_json::from_str(&text))
}

/// Standard top-k accuracy in percent, one entry per k. Ties prefer the
/// lower class index.
pub fn evaluate_topk(
    mut forward: impl FnMut(&Tensor) -> Result<Vec<f64>, PipelineError>,
    images: &[Tensor],
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>, PipelineError> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(stage_msg("evaluate", "empty or mismatched dataset".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for (img, &label) in images.iter().zip(labels) {
        let logits = forward(img)?;
        for (&k, hit) in ks.iter().zip(&mut hits) {
            if k == 0 || k > logits.len() {
                return Err(stage_msg(
                    "evaluate",
                    format!("k = {k} invalid for {} classes", logits.len()),
                ));
            }
            // Rank by descending logit; stable sort keeps lower indices
            // first among ties.
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            if order[..k].contains(&label) {
                *hit += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| 100.0 * h as f64 / images.len() as f64)
        .collect())
}

pub struct Datasets {
    pub train: ToyDataset,
    pub test: ToyDataset,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets, PipelineError> {
    let train = stage(
        "dataset",
        data::generate(
            cfg.data.seed,
            cfg.data.train_count,
            cfg.model.image_size,
            Split::Train,
        ),
    )?;
    let test = stage(
        "dataset",
        data::generate(
            cfg.data.seed,
            cfg.data.test_count,
            cfg.model.image_size,
            Split::Test,
        ),
    )?;
    Ok(Datasets { train, test })
}

pub fn fp_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("fp.ckpt")
}

/// Loads `fp.ckpt` from the run directory, or trains and saves it.
pub fn obtain_model(cfg: &RunConfig, datasets: &Datasets) -> Result<ViTModel, PipelineError> {
    let path = fp_checkpoint_path(&cfg.out_dir);
    if path.exists() {
        let model = stage("model", ckpt::load_checkpoint(&path))?;
        if model.config != cfg.model {
            return Err(stage_msg(
                "model",
                format!(
                    "checkpoint config {:?} disagrees with run config {:?}",
                    model.config, cfg.model
                ),
            ));
        }
        return Ok(model);
    }
    if !cfg.train_if_missing {
        return Err(stage_msg(
            "model",
            format!("no checkpoint at {} and training disabled", path.display()),
        ));
    }
    let mut model = stage("model", ViTModel::init(cfg.model, cfg.train.seed))?;
    stage(
        "model",
        model::train_toy(
            &mut model,
            (&datasets.train.images, &datasets.train.labels),
            (&datasets.test.images, &datasets.test.labels),
            &cfg.train,
        ),
    )?;
    stage("model", std::fs::create_dir_all(&cfg.out_dir))?;
    stage("model", ckpt::save_checkpoint(&model, &path))?;
    Ok(model)
}

/// Produces the calibration images for the configured source; synthesized
/// sources also write samples plus manifest into the run directory.
pub fn calibration_images(
    cfg: &RunConfig,
    model: &ViTModel,
    datasets: &Datasets,
) -> Result<Vec<Tensor>, PipelineError> {
    match cfg.calib_source {
        CalibSource::SynthesizedE2h | CalibSource::SynthesizedFixed => {
            let outcomes = stage(
                "samples",
                synth::synthesize_batch(
                    model,
                    &cfg.synth_config(),
                    cfg.calib_samples,
                    Some(&cfg.out_dir),
                ),
            )?;
            Ok(outcomes.into_iter().map(|o| o.image).collect())
        }
        CalibSource::Real => stage(
            "samples",
            data::real_calibration_subset(
                &datasets.train,
                cfg.calib_samples,
                crate::rng::derive_seed(cfg.seed, &[0x7265616c]),
            ),
        ),
        CalibSource::Noise => Ok(data::gaussian_noise_images(
            cfg.calib_samples,
            cfg.model.image_size,
            crate::rng::derive_seed(cfg.seed, &[0x6e6f697365]),
            cfg.synth.init_mean,
            cfg.synth.init_std,
        )),
    }
}

pub fn quant_params_path(out_dir: &Path) -> PathBuf {
    out_dir.join("quant_params.txt")
}

pub fn acm_path(out_dir: &Path) -> PathBuf {
    out_dir.join("acm.ckpt")
}

/// Runs every stage in order and writes all artifacts plus `report.json`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    stage("config", std::fs::create_dir_all(&cfg.out_dir))?;
    let mut timings = Timings::default();

    let datasets = load_datasets(cfg)?;

    let t0 = Instant::now();
    let model = obtain_model(cfg, &datasets)?;
    timings.train_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let calib = calibration_images(cfg, &model, &datasets)?;
    timings.synth_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let qmodel = stage("calibrate", quant::calibrate(&model, &calib, &cfg.quant_config()))?;
    stage(
        "calibrate",
        quant::write_quant_params(&quant_params_path(&cfg.out_dir), &qmodel),
    )?;
    timings.calibrate_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let acm_set = if cfg.acm {
        let set = stage("acm", acm::compute_acm(&model, &qmodel, &calib, cfg.acm_gamma))?;
        stage("acm", acm::save_acm(&acm_path(&cfg.out_dir), &set, &cfg.model))?;
        Some(set)
    } else {
        None
    };
    timings.acm_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let report = evaluate_run(cfg, &model, &qmodel, acm_set.as_ref(), &datasets, timings.clone())?;
    let mut report = report;
    report.timings.eval_s = t0.elapsed().as_secs_f64();

    emit_report(&report, &cfg.out_dir.join("report.json"))?;
    Ok(report)
}

/// Evaluation stage shared by `run_pipeline` and the resume path.
pub fn evaluate_run(
    cfg: &RunConfig,
    model: &ViTModel,
    qmodel: &QuantizedModel,
    acm_set: Option<&AcmSet>,
    datasets: &Datasets,
    timings: Timings,
) -> Result<EvalReport, PipelineError> {
    let test = &datasets.test;
    let fp = evaluate_topk(
        |img| stage("evaluate", model::forward(model, img, false)).map(|t| t.logits),
        &test.images,
        &test.labels,
        &[1, 5],
    )?;
    let quantized = evaluate_topk(
        |img| {
            let trace = match acm_set {
                Some(set) => stage("evaluate", acm::corrected_forward(qmodel, set, img, false))?,
                None => stage("evaluate", quant::quantized_forward(qmodel, img, false))?,
            };
            Ok(trace.logits)
        },
        &test.images,
        &test.labels,
        &[1, 5],
    )?;

    let model_params = model.param_count();
    let acm_params = acm_set.map(acm::acm_param_count).unwrap_or(0);
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        payload: ReportPayload {
            config: cfg.clone(),
            fp_top1: fp[0],
            fp_top5: fp[1],
            top1: quantized[0],
            top5: quantized[1],
            model_params,
            acm_params,
            acm_ratio_percent: 100.0 * acm_params as f64 / model_params as f64,
        },
        timings,
        generated_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    report.validate()?;
    Ok(report)
}

// ── strategy comparison ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyPair {
    pub seed: u64,
    /// Mean over samples of the final-iteration total loss.
    pub e2h_final_loss: f64,
    pub fixed_final_loss: f64,
    pub e2h_top1: f64,
    pub fixed_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub pairs: Vec<StrategyPair>,
    /// Pairs where the easy-to-hard arm reached a final loss <= fixed.
    pub e2h_loss_wins: usize,
}

/// Matched-pair comparison of the easy-to-hard schedule against the fixed
/// strategy. Both arms of a pair share the run seed, so per-sample init,
/// class, and crop streams are identical.
pub fn compare_strategies(
    base: &RunConfig,
    seeds: &[u64],
) -> Result<StrategyComparison, PipelineError> {
    if seeds.len() < 2 {
        return Err(stage_msg("compare", "need at least 2 seeds".into()));
    }
    let datasets = load_datasets(base)?;
    let model = obtain_model(base, &datasets)?;
    let qcfg = base.quant_config();

    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let arm = |strategy: CropStrategy| -> Result<(f64, f64), PipelineError> {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.calib_source = match strategy {
                CropStrategy::E2h => CalibSource::SynthesizedE2h,
                CropStrategy::Fixed => CalibSource::SynthesizedFixed,
            };
            let outcomes = stage(
                "compare",
                synth::synthesize_batch(&model, &cfg.synth_config(), cfg.calib_samples, None),
            )?;
            let mean_final = outcomes
                .iter()
                .map(|o| o.final_loss().total)
                .sum::<f64>()
                / outcomes.len() as f64;
            let images: Vec<Tensor> = outcomes.into_iter().map(|o| o.image).collect();
            let qmodel = stage("compare", quant::calibrate(&model, &images, &qcfg))?;
            let top = evaluate_topk(
                |img| {
                    stage("compare", quant::quantized_forward(&qmodel, img, false))
                        .map(|t| t.logits)
                },
                &datasets.test.images,
                &datasets.test.labels,
                &[1],
            )?;
            Ok((mean_final, top[0]))
        };
        let (e2h_final_loss, e2h_top1) = arm(CropStrategy::E2h)?;
        let (fixed_final_loss, fixed_top1) = arm(CropStrategy::Fixed)?;
        pairs.push(StrategyPair {
            seed,
            e2h_final_loss,
            fixed_final_loss,
            e2h_top1,
            fixed_top1,
        });
    }
    let e2h_loss_wins = pairs
        .iter()
        .filter(|p| p.e2h_final_loss <= p.fixed_final_loss)
        .count();
    let cmp = StrategyComparison {
        pairs,
        e2h_loss_wins,
    };
    let text = serde_json::to_string_pretty(&cmp).expect("comparison serializes");
    stage("compare", std::fs::create_dir_all(&base.out_dir))?;
    stage(
        "compare",
        std::fs::write(base.out_dir.join("compare.json"), text),
    )?;
    Ok(cmp)
}

// ── ablation ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    Baseline,
    E2h,
    Acm,
    E2hAcm,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Baseline,
        AblationArm::E2h,
        AblationArm::Acm,
        AblationArm::E2hAcm,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationArm::Baseline => "baseline",
            AblationArm::E2h => "+e2h",
            AblationArm::Acm => "+acm",
            AblationArm::E2hAcm => "+e2h+acm",
        }
    }

    fn uses_e2h(&self) -> bool {
        matches!(self, AblationArm::E2h | AblationArm::E2hAcm)
    }

    fn uses_acm(&self) -> bool {
        matches!(self, AblationArm::Acm | AblationArm::E2hAcm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub bits_w: u8,
    pub bits_a: u8,
    pub per_seed_top1: Vec<f64>,
    pub median_top1: f64,
    pub acm_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub fp_top1: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Four arms (baseline, +E2H, +ACM, +E2H+ACM) at each bit setting, median
/// top-1 over the seeds. Synthesized batches are shared between the arms of
/// one seed that use the same strategy.
pub fn ablation(
    base: &RunConfig,
    seeds: &[u64],
    bit_settings: &[(u8, u8)],
) -> Result<AblationReport, PipelineError> {
    if seeds.is_empty() {
        return Err(stage_msg("ablate", "need at least 1 seed".into()));
    }
    let datasets = load_datasets(base)?;
    let model = obtain_model(base, &datasets)?;
    let fp = evaluate_topk(
        |img| stage("ablate", model::forward(&model, img, false)).map(|t| t.logits),
        &datasets.test.images,
        &datasets.test.labels,
        &[1],
    )?;

    struct SeedBatches {
        e2h: Vec<Tensor>,
        fixed: Vec<Tensor>,
    }
    let mut batches = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let make = |source: CalibSource| -> Result<Vec<Tensor>, PipelineError> {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.calib_source = source;
            Ok(stage(
                "ablate",
                synth::synthesize_batch(&model, &cfg.synth_config(), cfg.calib_samples, None),
            )?
            .into_iter()
            .map(|o| o.image)
            .collect())
        };
        batches.push(SeedBatches {
            e2h: make(CalibSource::SynthesizedE2h)?,
            fixed: make(CalibSource::SynthesizedFixed)?,
        });
    }

    let mut rows = Vec::new();
    for &(bits_w, bits_a) in bit_settings {
        let qcfg = QuantConfig {
            bits_w,
            bits_a,
            quantize_patch_embed: base.quantize_patch_embed,
            act_percentile: base.act_percentile,
        };
        for arm in AblationArm::ALL {
            let mut per_seed = Vec::with_capacity(seeds.len());
            let mut acm_params = 0usize;
            for batch in &batches {
                let images = if arm.uses_e2h() { &batch.e2h } else { &batch.fixed };
                let qmodel = stage("ablate", quant::calibrate(&model, images, &qcfg))?;
                let acm_set = if arm.uses_acm() {
                    let set = stage(
                        "ablate",
                        acm::compute_acm(&model, &qmodel, images, base.acm_gamma),
                    )?;
                    acm_params = acm::acm_param_count(&set);
                    Some(set)
                } else {
                    None
                };
                let top = evaluate_topk(
                    |img| {
                        let trace = match &acm_set {
                            Some(set) => {
                                stage("ablate", acm::corrected_forward(&qmodel, set, img, false))?
                            }
                            None => stage("ablate", quant::quantized_forward(&qmodel, img, false))?,
                        };
                        Ok(trace.logits)
                    },
                    &datasets.test.images,
                    &datasets.test.labels,
                    &[1],
                )?;
                per_seed.push(top[0]);
            }
            rows.push(AblationRow {
                arm,
                bits_w,
                bits_a,
                median_top1: median(&per_seed),
                per_seed_top1: per_seed,
                acm_params,
            });
        }
    }

    let report = AblationReport {
        fp_top1: fp[0],
        seeds: seeds.to_vec(),
        rows,
    };
    stage("ablate", std::fs::create_dir_all(&base.out_dir))?;
    stage(
        "ablate",
        std::fs::write(
            base.out_dir.join("ablation.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        ),
    )?;
    stage(
        "ablate",
        std::fs::write(base.out_dir.join("ablation.txt"), format_ablation(&report)),
    )?;
    Ok(report)
}

/// Plain-text table, one row per arm and bit setting.
pub fn format_ablation(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "full-precision top-1: {:.2} (seeds: {:?})\n",
        report.fp_top1, report.seeds
    ));
    out.push_str("arm        bits     median-top1  acm-params  per-seed\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{:<10} W{}/A{:<4} {:>10.2}  {:>10}  {:?}\n",
            row.arm.label(),
            row.bits_w,
            row.bits_a,
            row.median_top1,
            row.acm_params,
            row.per_seed_top1
        ));
    }
    out
}

#[cfg(test)]
mod tests;
