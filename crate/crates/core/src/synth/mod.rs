//! Calibration-sample synthesis by gradient descent on the total loss, with
//! the easy-to-hard crop schedule.

mod crop;
mod losses;
mod schedule;

pub use crop::{crop_and_resize, sample_crop, CropRecord, CropRect};
pub use losses::{
    differential_entropy, entropy_params_for_trace, kde_density, one_hot_loss, patch_similarity,
    pse_loss, pse_loss_on_tape, silverman_bandwidth, similarity_centers, total_loss,
    total_loss_on_tape, tv_loss, EntropyGrid, EntropyParams, LossParts, SIM_EPS,
};
pub use schedule::e2h_schedule;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt;
use crate::model::{build_tape_forward, ModelError, ViTModel};
use crate::rng::{derive_seed, gaussian_image, SeedStream};
use crate::tensor::{adam_update, AdamState, ShapeError, Tape, TapeError, Tensor};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} (pse {pse}, one_hot {one_hot}, tv {tv})")]
    NanLoss {
        iteration: usize,
        pse: f64,
        one_hot: f64,
        tv: f64,
    },
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("entropy grid does not cover the centers ± 4h")]
    GridTooNarrow,
    #[error("at least one kernel center is required")]
    EmptyCenters,
    #[error("trace has no MSA outputs")]
    MissingTraceLayers,
    #[error("schedule step {t} exceeds total iterations {total}")]
    ScheduleRange { t: usize, total: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassRange { class: usize, classes: usize },
    #[error(transparent)]
    Ckpt(#[from] ckpt::CkptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropStrategy {
    /// Cosine-decayed minimum crop scale.
    E2h,
    /// Minimum crop scale pinned at the maximum: δ_t = δ_u for all t.
    Fixed,
}

/// Target-class assignment for a synthesized batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassRule {
    /// Sample i gets class i mod C, guaranteeing coverage.
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub iterations: usize,
    pub crop_min: f64,
    pub crop_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub bandwidth_floor: f64,
    pub entropy_grid: usize,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub strategy: CropStrategy,
    pub class_rule: ClassRule,
    pub init_mean: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            crop_min: 0.08,
            crop_max: 1.0,
            alpha: 1.0,
            beta: 0.05,
            lr: 0.25,
            bandwidth_floor: 1e-3,
            entropy_grid: 512,
            aspect_min: 0.75,
            aspect_max: 4.0 / 3.0,
            strategy: CropStrategy::E2h,
            class_rule: ClassRule::RoundRobin,
            init_mean: 0.5,
            init_std: 0.25,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.iterations == 0 {
            return Err(SynthError::Config("iterations must be >= 1".into()));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(SynthError::Config(format!(
                "crop bounds must satisfy 0 < min <= max <= 1, got {} and {}",
                self.crop_min, self.crop_max
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(SynthError::Config("loss weights must be >= 0".into()));
        }
        if self.entropy_grid < 2 {
            return Err(SynthError::Config("entropy grid needs >= 2 points".into()));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(SynthError::Config("bad aspect bounds".into()));
        }
        Ok(())
    }
}

/// Mutable state of one sample's optimization.
#[derive(Debug, Clone)]
pub struct SynthesisState {
    pub image: Tensor,
    pub iteration: usize,
    pub class: usize,
    pub opt: AdamState,
    pub loss_history: Vec<LossParts>,
}

/// Finished sample.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub image: Tensor,
    pub class: usize,
    pub seed: u64,
    pub history: Vec<LossParts>,
}

impl SynthOutcome {
    pub fn final_loss(&self) -> &LossParts {
        self.history.last().expect("at least one iteration")
    }
}

/// Optimizes one sample from Gaussian noise: per iteration, crop at the
/// scheduled scale, take one Adam step on the cropped view, and carry the
/// rescaled view (and re-projected optimizer state) forward as the next
/// canvas.
pub fn synthesize_sample(
    model: &ViTModel,
    cfg: &SynthesisConfig,
    class: usize,
    sample_seed: u64,
) -> Result<SynthOutcome, SynthError> {
    cfg.validate()?;
    let classes = model.config.num_classes;
    if class >= classes {
        return Err(SynthError::ClassRange { class, classes });
    }
    let size = model.config.image_size;
    let mut stream = SeedStream::new(sample_seed);

    let mut state = SynthesisState {
        image: gaussian_image(&mut stream, 3, size, cfg.init_mean, cfg.init_std, true),
        iteration: 0,
        class,
        opt: AdamState::new(3 * size * size),
        loss_history: Vec::with_capacity(cfg.iterations),
    };

    for t in 0..cfg.iterations {
        let delta_t = match cfg.strategy {
            CropStrategy::E2h => e2h_schedule(t, cfg.iterations, cfg.crop_min, cfg.crop_max)?,
            CropStrategy::Fixed => cfg.crop_max,
        };
        let rec = sample_crop(
            &mut stream,
            size,
            size,
            delta_t,
            cfg.crop_max,
            cfg.aspect_min,
            cfg.aspect_max,
        );
        let mut view = crop_and_resize(&state.image, rec.rect, size, size);
        let m_view = crop_and_resize(
            &Tensor::new(vec![3, size, size], state.opt.m.clone())?,
            rec.rect,
            size,
            size,
        );
        let v_view = crop_and_resize(
            &Tensor::new(vec![3, size, size], state.opt.v.clone())?,
            rec.rect,
            size,
            size,
        );

        let mut tape = Tape::new();
        let vit = build_tape_forward(&mut tape, model, view.detached().with_grad(true), false, true)?;
        let params = {
            let msa_values: Vec<Tensor> = vit
                .msa_outputs
                .iter()
                .map(|&id| tape.value(id).detached())
                .collect();
            entropy_params_for_trace(&msa_values, cfg)?
        };
        let (total, parts) = total_loss_on_tape(
            &mut tape,
            vit.image,
            &vit.msa_outputs,
            vit.logits,
            class,
            cfg,
            &params,
        )?;
        if !parts.is_finite() {
            return Err(SynthError::NanLoss {
                iteration: t,
                pse: parts.pse,
                one_hot: parts.one_hot,
                tv: parts.tv,
            });
        }
        tape.backward(total)?;
        let grad = tape.grad(vit.image).expect("image gradient").to_vec();

        // Adam moments travel with the crop geometry: the warped view of m/v
        // is updated alongside the pixels and becomes the next canvas state.
        let mut opt = AdamState {
            m: m_view.data().to_vec(),
            v: v_view.data().to_vec(),
            step: state.opt.step,
        };
        adam_update(view.data_mut(), &grad, &mut opt, cfg.lr, 0.9, 0.999, 1e-8)
            .map_err(|e| SynthError::Config(e.to_string()))?;

        state.image = view;
        state.opt = opt;
        state.iteration = t + 1;
        state.loss_history.push(parts);
    }

    Ok(SynthOutcome {
        image: state.image,
        class,
        seed: sample_seed,
        history: state.loss_history,
    })
}

/// Synthesizes `count` samples with round-robin classes and independent
/// seed-derived streams; optionally writes tensors, previews, and a manifest
/// into `out_dir`.
pub fn synthesize_batch(
    model: &ViTModel,
    cfg: &SynthesisConfig,
    count: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<SynthOutcome>, SynthError> {
    if count == 0 {
        return Err(SynthError::Config("sample count must be >= 1".into()));
    }
    cfg.validate()?;
    let classes = model.config.num_classes;
    let mut outcomes = Vec::with_capacity(count);
    for idx in 0..count {
        let class = match cfg.class_rule {
            ClassRule::RoundRobin => idx % classes,
        };
        let sample_seed = derive_seed(cfg.seed, &[0x73616d_706c65, idx as u64]);
        outcomes.push(synthesize_sample(model, cfg, class, sample_seed)?);
    }
    if let Some(dir) = out_dir {
        write_samples(dir, &outcomes)?;
    }
    Ok(outcomes)
}

/// Writes `<run>/samples/sample_NN.tensor` plus a PPM preview each, and a
/// manifest of seeds, classes, and final component losses at
/// `<run>/manifest.txt`.
pub fn write_samples(run_dir: &Path, outcomes: &[SynthOutcome]) -> Result<(), SynthError> {
    let samples = run_dir.join("samples");
    std::fs::create_dir_all(&samples)?;
    let mut manifest = String::from("# sample seed class loss_total loss_pse loss_oh loss_tv\n");
    for (idx, out) in outcomes.iter().enumerate() {
        let name = format!("sample_{idx:02}");
        ckpt::write_tensors(
            &samples.join(format!("{name}.tensor")),
            &[(name.clone(), &out.image)],
        )?;
        write_ppm(&samples.join(format!("{name}.ppm")), &out.image)?;
        let parts = out.final_loss();
        manifest.push_str(&format!(
            "{name} {} {} {} {} {} {}\n",
            out.seed, out.class, parts.total, parts.pse, parts.one_hot, parts.tv
        ));
    }
    std::fs::write(run_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a batch written by `write_samples`, in index order.
pub fn read_samples(run_dir: &Path) -> Result<Vec<(Tensor, usize)>, SynthError> {
    let manifest = std::fs::read_to_string(run_dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.starts_with('#')) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            continue;
        }
        let name = fields[0];
        let class: usize = fields[2]
            .parse()
            .map_err(|_| SynthError::Config(format!("bad class in manifest line: {line}")))?;
        let tensors = ckpt::read_tensors(&run_dir.join("samples").join(format!("{name}.tensor")))?;
        let (_, image) = tensors
            .into_iter()
            .next()
            .ok_or_else(|| SynthError::Config(format!("{name}.tensor holds no tensor")))?;
        out.push((image, class));
    }
    Ok(out)
}

/// 8-bit binary PPM preview, values clamped to [0, 1].
fn write_ppm(path: &Path, image: &Tensor) -> Result<(), SynthError> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = if ch < c {
                    image.data()[(ch * h + y) * w + x]
                } else {
                    0.0
                };
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}
