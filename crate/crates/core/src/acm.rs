//! Activation correction: per-hook mean difference between full-precision
//! and quantized activations over the calibration set, added back during
//! quantized inference.

use std::path::Path;

use thiserror::Error;

use crate::ckpt::{self, CkptError};
use crate::model::{ForwardTrace, HookCorrection, HookPoint, ModelError, ViTConfig, ViTModel};
use crate::quant::{quantized_forward_with, QuantError, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AcmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("correction set needs at least one calibration sample")]
    EmptySamples,
    #[error("hook interval must satisfy 1 <= gamma <= {layers}, got {gamma}")]
    BadGamma { gamma: usize, layers: usize },
    #[error("hook points must be strictly increasing")]
    HookOrder,
    #[error("hook {hook} expects {expected} channels, found {found}")]
    HookDim {
        hook: String,
        expected: usize,
        found: usize,
    },
    #[error("stored hook position {0} does not fit the model")]
    BadStoredHook(usize),
    #[error("hook {0} was not captured by the forward pass")]
    MissingCapture(String),
}

/// Ordered per-hook correction vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AcmSet {
    pub hooks: Vec<HookCorrection>,
    pub sample_count: usize,
}

impl AcmSet {
    pub fn empty() -> Self {
        Self {
            hooks: Vec::new(),
            sample_count: 1,
        }
    }

    pub fn validate(&self, config: &ViTConfig) -> Result<(), AcmError> {
        if self.sample_count == 0 {
            return Err(AcmError::EmptySamples);
        }
        let mut prev = None;
        for c in &self.hooks {
            let pos = c.hook.position(config.num_layers);
            if prev.is_some_and(|p| pos <= p) {
                return Err(AcmError::HookOrder);
            }
            prev = Some(pos);
            if c.values.len() != c.hook.dim(config) {
                return Err(AcmError::HookDim {
                    hook: c.hook.label(),
                    expected: c.hook.dim(config),
                    found: c.values.len(),
                });
            }
        }
        Ok(())
    }
}

/// Hook placement: always the post-final-norm features and the logits;
/// `gamma` additionally inserts a hook after every gamma-th block.
pub fn resolve_hooks(config: &ViTConfig, gamma: Option<usize>) -> Result<Vec<HookPoint>, AcmError> {
    let mut hooks = Vec::new();
    if let Some(g) = gamma {
        if g == 0 || g > config.num_layers {
            return Err(AcmError::BadGamma {
                gamma: g,
                layers: config.num_layers,
            });
        }
        let mut b = g - 1;
        while b < config.num_layers {
            hooks.push(HookPoint::AfterBlock(b));
            b += g;
        }
    }
    hooks.push(HookPoint::FinalFeatures);
    hooks.push(HookPoint::Logits);
    Ok(hooks)
}

fn captured(trace: &ForwardTrace, hook: HookPoint) -> Result<&[f64], AcmError> {
    trace
        .hooks
        .iter()
        .find(|(h, _)| *h == hook)
        .map(|(_, v)| v.as_slice())
        .ok_or_else(|| AcmError::MissingCapture(hook.label()))
}

/// Builds the correction set hook by hook: the quantized activations for
/// hook i are measured with corrections 0..i already applied, so the
/// calibration-time forward matches the corrected inference path.
pub fn compute_acm(
    fp_model: &ViTModel,
    qmodel: &QuantizedModel,
    samples: &[Tensor],
    gamma: Option<usize>,
) -> Result<AcmSet, AcmError> {
    if samples.is_empty() {
        return Err(AcmError::EmptySamples);
    }
    let hooks = resolve_hooks(&fp_model.config, gamma)?;

    let mut fp_caps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(samples.len());
    for img in samples {
        let mut pass = crate::model::ForwardPass {
            capture_hooks: &hooks,
            ..crate::model::ForwardPass::float(fp_model)
        };
        let trace = pass.run(img)?;
        fp_caps.push(
            hooks
                .iter()
                .map(|&h| captured(&trace, h).map(|v| v.to_vec()))
                .collect::<Result<_, _>>()?,
        );
    }

    let mut corrections: Vec<HookCorrection> = Vec::with_capacity(hooks.len());
    for (i, &hook) in hooks.iter().enumerate() {
        let dim = hook.dim(&fp_model.config);
        let mut sum = vec![0.0; dim];
        for (img, fp) in samples.iter().zip(&fp_caps) {
            let trace = quantized_forward_with(qmodel, img, &corrections, false, &[hook])?;
            let q = captured(&trace, hook)?;
            for ((s, fp_v), q_v) in sum.iter_mut().zip(&fp[i]).zip(q) {
                *s += fp_v - q_v;
            }
        }
        let n = samples.len() as f64;
        for s in &mut sum {
            *s /= n;
        }
        corrections.push(HookCorrection { hook, values: sum });
    }

    let set = AcmSet {
        hooks: corrections,
        sample_count: samples.len(),
    };
    set.validate(&fp_model.config)?;
    Ok(set)
}

/// Quantized forward with every correction applied at its hook.
pub fn corrected_forward(
    qmodel: &QuantizedModel,
    acm: &AcmSet,
    image: &Tensor,
    trace_requested: bool,
) -> Result<ForwardTrace, AcmError> {
    acm.validate(&qmodel.model.config)?;
    Ok(quantized_forward_with(
        qmodel,
        image,
        &acm.hooks,
        trace_requested,
        &[],
    )?)
}

/// Total number of stored correction parameters.
pub fn acm_param_count(acm: &AcmSet) -> usize {
    acm.hooks.iter().map(|c| c.values.len()).sum()
}

/// Correction tensors are stored as `acm.hook{i}`; `acm.meta` records the
/// sample count and hook positions.
pub fn save_acm(path: &Path, acm: &AcmSet, config: &ViTConfig) -> Result<(), AcmError> {
    let meta_data: Vec<f64> = std::iter::once(acm.sample_count as f64)
        .chain(
            acm.hooks
                .iter()
                .map(|c| c.hook.position(config.num_layers) as f64),
        )
        .collect();
    let meta = Tensor::new(vec![meta_data.len()], meta_data).expect("meta shape");
    let values: Vec<Tensor> = acm
        .hooks
        .iter()
        .map(|c| Tensor::new(vec![c.values.len()], c.values.clone()).expect("hook shape"))
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = vec![("acm.meta".to_string(), &meta)];
    for (i, t) in values.iter().enumerate() {
        tensors.push((format!("acm.hook{i}"), t));
    }
    ckpt::write_tensors(path, &tensors)?;
    Ok(())
}

pub fn load_acm(path: &Path, config: &ViTConfig) -> Result<AcmSet, AcmError> {
    let tensors = ckpt::read_tensors(path)?;
    let meta = tensors
        .iter()
        .find(|(n, _)| n == "acm.meta")
        .ok_or(CkptError::MissingTensor("acm.meta".into()))?
        .1
        .data()
        .to_vec();
    if meta.is_empty() {
        return Err(CkptError::Corrupt {
            context: "acm.meta".into(),
            reason: "empty".into(),
        }
        .into());
    }
    let sample_count = meta[0] as usize;
    let layers = config.num_layers;
    let mut hooks = Vec::new();
    for (i, &pos) in meta[1..].iter().enumerate() {
        let pos = pos as usize;
        let hook = if pos < layers {
            HookPoint::AfterBlock(pos)
        } else if pos == layers {
            HookPoint::FinalFeatures
        } else if pos == layers + 1 {
            HookPoint::Logits
        } else {
            return Err(AcmError::BadStoredHook(pos));
        };
        let name = format!("acm.hook{i}");
        let values = tensors
            .iter()
            .find(|(n, _)| n == &name)
            .ok_or(CkptError::MissingTensor(name))?
            .1
            .data()
            .to_vec();
        hooks.push(HookCorrection { hook, values });
    }
    let set = AcmSet {
        hooks,
        sample_count,
    };
    set.validate(config)?;
    Ok(set)
}

/// FP forward helper used by tests comparing mean activations.
pub fn fp_hook_capture(
    model: &ViTModel,
    image: &Tensor,
    hooks: &[HookPoint],
) -> Result<ForwardTrace, AcmError> {
    let mut pass = crate::model::ForwardPass {
        capture_hooks: hooks,
        ..crate::model::ForwardPass::float(model)
    };
    Ok(pass.run(image)?)
}

/// Quantized forward that captures hooks while applying a correction prefix;
/// exposed for oracle-style tests that rebuild corrections by hand.
pub fn quantized_hook_capture(
    qmodel: &QuantizedModel,
    image: &Tensor,
    corrections: &[HookCorrection],
    hooks: &[HookPoint],
) -> Result<ForwardTrace, AcmError> {
    Ok(quantized_forward_with(
        qmodel, image, corrections, false, hooks,
    )?)
}

#[cfg(test)]
mod tests;
