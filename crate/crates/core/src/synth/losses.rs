//! Loss components for sample synthesis: patch-similarity entropy, one-hot
//! cross-entropy, and total variation.
//!
//! Each loss exists twice: a plain numeric form (reporting, oracles) and a
//! tape form (optimization). Both share the kernels in `tensor::kernels`.

use crate::model::ForwardTrace;
use crate::tensor::kernels;
use crate::tensor::{Tape, Tensor, VarId};

use super::{SynthError, SynthesisConfig};

/// Epsilon guarding zero-norm rows in cosine similarity (added as eps² under
/// the square root, so existing unit-norm rows stay unit to ~1e-24).
pub const SIM_EPS: f64 = 1e-12;

/// Cosine-similarity matrix between the rows of an MSA output.
pub fn patch_similarity(msa_out: &Tensor) -> Result<Tensor, SynthError> {
    let shape = msa_out.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(SynthError::Config(format!(
            "patch similarity needs at least 2 token rows, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut normed = vec![0.0; n * d];
    for r in 0..n {
        let row = &msa_out.data()[r * d..(r + 1) * d];
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + SIM_EPS * SIM_EPS).sqrt();
        for (dst, &v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
            *dst = v / norm;
        }
    }
    let nt = kernels::transpose(&normed, n, d);
    let gram = kernels::matmul(&normed, &nt, n, d, n);
    Ok(Tensor::new(vec![n, n], gram)?)
}

/// Gaussian-KDE density estimate at a test point.
pub fn kde_density(x: f64, centers: &[f64], h: f64) -> Result<f64, SynthError> {
    if centers.is_empty() {
        return Err(SynthError::EmptyCenters);
    }
    if h <= 0.0 {
        return Err(SynthError::BadBandwidth(h));
    }
    Ok(kernels::kde_at(x, centers, h))
}

/// Uniform integration grid for the entropy estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyGrid {
    pub min: f64,
    pub step: f64,
    pub len: usize,
}

impl EntropyGrid {
    pub fn max(&self) -> f64 {
        self.min + self.step * (self.len - 1) as f64
    }

    /// Grid spanning [min(centers) − 4h, max(centers) + 4h].
    pub fn covering(centers: &[f64], h: f64, len: usize) -> Self {
        let (lo, hi) = centers
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        let min = lo - 4.0 * h;
        let max = hi + 4.0 * h;
        Self {
            min,
            step: (max - min) / (len - 1) as f64,
            len,
        }
    }
}

/// Bandwidth plus grid, frozen per evaluation: gradients treat both as
/// constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyParams {
    pub h: f64,
    pub grid: EntropyGrid,
}

impl EntropyParams {
    pub fn for_centers(centers: &[f64], cfg: &SynthesisConfig) -> Self {
        let h = silverman_bandwidth(centers).max(cfg.bandwidth_floor);
        EntropyParams {
            h,
            grid: EntropyGrid::covering(centers, h, cfg.entropy_grid),
        }
    }
}

/// Silverman's rule of thumb, 1.06·σ̂·M^{−1/5} with sample standard
/// deviation.
pub fn silverman_bandwidth(centers: &[f64]) -> f64 {
    let m = centers.len();
    if m < 2 {
        return 0.0;
    }
    let mean = centers.iter().sum::<f64>() / m as f64;
    let var = centers.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    1.06 * var.sqrt() * (m as f64).powf(-0.2)
}

/// Differential entropy −∫ f̂ log f̂ of the KDE over `centers`, trapezoid
/// rule on the grid. The grid must cover centers ± 4h.
pub fn differential_entropy(
    centers: &[f64],
    h: f64,
    grid: &EntropyGrid,
) -> Result<f64, SynthError> {
    if centers.is_empty() {
        return Err(SynthError::EmptyCenters);
    }
    if h <= 0.0 {
        return Err(SynthError::BadBandwidth(h));
    }
    let (lo, hi) = centers
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    if grid.min > lo - 4.0 * h + 1e-12 || grid.max() < hi + 4.0 * h - 1e-12 {
        return Err(SynthError::GridTooNarrow);
    }
    Ok(kernels::entropy_forward(centers, h, grid.min, grid.step, grid.len).0)
}

/// Strict upper-triangle entries of the patch-similarity matrix, the KDE
/// center set (the diagonal is identically 1 and carries no information).
pub fn similarity_centers(gamma: &Tensor) -> Vec<f64> {
    let n = gamma.shape()[0];
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(gamma.at2(i, j));
        }
    }
    out
}

/// Numeric patch-similarity-entropy loss: −Σ_l D_ps^l.
pub fn pse_loss(trace: &ForwardTrace, cfg: &SynthesisConfig) -> Result<f64, SynthError> {
    if trace.msa_outputs.is_empty() {
        return Err(SynthError::MissingTraceLayers);
    }
    let mut sum = 0.0;
    for msa in &trace.msa_outputs {
        let gamma = patch_similarity(msa)?;
        let centers = similarity_centers(&gamma);
        let params = EntropyParams::for_centers(&centers, cfg);
        sum += differential_entropy(&centers, params.h, &params.grid)?;
    }
    Ok(-sum)
}

/// Entropy params per layer, computed from the current MSA outputs. Frozen
/// copies of these make the loss differentiable-with-constants, and let a
/// finite-difference oracle probe the same fixed function.
pub fn entropy_params_for_trace(
    msa_outputs: &[Tensor],
    cfg: &SynthesisConfig,
) -> Result<Vec<EntropyParams>, SynthError> {
    msa_outputs
        .iter()
        .map(|msa| {
            let gamma = patch_similarity(msa)?;
            let centers = similarity_centers(&gamma);
            Ok(EntropyParams::for_centers(&centers, cfg))
        })
        .collect()
}

/// Tape version of the PSE loss over per-layer MSA output vars.
pub fn pse_loss_on_tape(
    tape: &mut Tape,
    msa_outputs: &[VarId],
    params: &[EntropyParams],
) -> Result<VarId, SynthError> {
    if msa_outputs.is_empty() {
        return Err(SynthError::MissingTraceLayers);
    }
    if msa_outputs.len() != params.len() {
        return Err(SynthError::Config(format!(
            "{} msa outputs but {} entropy params",
            msa_outputs.len(),
            params.len()
        )));
    }
    let mut acc: Option<VarId> = None;
    for (&msa, p) in msa_outputs.iter().zip(params) {
        let normed = tape.row_normalize(msa, SIM_EPS)?;
        let nt = tape.transpose(normed)?;
        let gamma = tape.matmul(normed, nt)?;
        let centers = tape.upper_triangle(gamma)?;
        let ent = tape.entropy(centers, p.h, p.grid.min, p.grid.step, p.grid.len)?;
        acc = Some(match acc {
            None => ent,
            Some(a) => tape.add(a, ent)?,
        });
    }
    Ok(tape.scale(acc.expect("at least one layer"), -1.0)?)
}

/// Cross-entropy of softmax(logits) against the target class.
pub fn one_hot_loss(logits: &[f64], class: usize) -> Result<f64, SynthError> {
    if class >= logits.len() {
        return Err(SynthError::ClassRange {
            class,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

/// Anisotropic total variation normalized by pixel count.
pub fn tv_loss(image: &Tensor) -> Result<f64, SynthError> {
    let s = image.shape();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(SynthError::Config(format!(
            "tv loss needs a [c, h, w] image with h, w >= 2, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut acc = 0.0;
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w - 1 {
                acc += (plane[y * w + x + 1] - plane[y * w + x]).abs();
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                acc += (plane[(y + 1) * w + x] - plane[y * w + x]).abs();
            }
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub pse: f64,
    pub one_hot: f64,
    pub tv: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.pse.is_finite()
            && self.one_hot.is_finite()
            && self.tv.is_finite()
    }
}

/// Numeric total loss: L_PSE + α·L_OH + β·L_TV.
pub fn total_loss(
    trace: &ForwardTrace,
    image: &Tensor,
    class: usize,
    cfg: &SynthesisConfig,
) -> Result<LossParts, SynthError> {
    let pse = pse_loss(trace, cfg)?;
    let one_hot = one_hot_loss(&trace.logits, class)?;
    let tv = tv_loss(image)?;
    Ok(LossParts {
        total: pse + cfg.alpha * one_hot + cfg.beta * tv,
        pse,
        one_hot,
        tv,
    })
}

/// Tape total loss; entropy params must come from
/// `entropy_params_for_trace` at the same point (or a frozen earlier point
/// for finite-difference probing).
pub fn total_loss_on_tape(
    tape: &mut Tape,
    image: VarId,
    msa_outputs: &[VarId],
    logits: VarId,
    class: usize,
    cfg: &SynthesisConfig,
    params: &[EntropyParams],
) -> Result<(VarId, LossParts), SynthError> {
    let pse = pse_loss_on_tape(tape, msa_outputs, params)?;
    let oh = tape.cross_entropy(logits, class).map_err(|e| match e {
        crate::tensor::TapeError::ClassOutOfRange { class, classes } => {
            SynthError::ClassRange { class, classes }
        }
        other => SynthError::Tape(other),
    })?;
    let tv = tape.tv_loss(image)?;
    let oh_w = tape.scale(oh, cfg.alpha)?;
    let tv_w = tape.scale(tv, cfg.beta)?;
    let partial = tape.add(pse, oh_w)?;
    let total = tape.add(partial, tv_w)?;
    let parts = LossParts {
        total: tape.value(total).data()[0],
        pse: tape.value(pse).data()[0],
        one_hot: tape.value(oh).data()[0],
        tv: tape.value(tv).data()[0],
    };
    Ok((total, parts))
}
