//! Uniform fake quantization: symmetric per-tensor weights, asymmetric
//! per-tensor activations, calibrated from min/max statistics over a small
//! sample set.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::model::{ActMode, ForwardPass, ForwardTrace, ModelError, ViTModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("bit width {0} outside supported range 2..=32")]
    BadBits(u8),
    #[error("code {code} outside representable range {lo}..={hi}")]
    CodeOutOfRange { code: i64, lo: i64, hi: i64 },
    #[error("activation statistics must be finite and ordered, got min {min} max {max}")]
    BadStats { min: f64, max: f64 },
    #[error("calibration requires at least one sample")]
    EmptySamples,
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("params file: {0}")]
    ParamsFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::Symmetric => write!(f, "symmetric"),
            QuantMode::Asymmetric => write!(f, "asymmetric"),
        }
    }
}

/// Per-tensor quantizer state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i64,
    pub mode: QuantMode,
}

impl QuantParams {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=32).contains(&self.bits) {
            return Err(QuantError::BadBits(self.bits));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(QuantError::BadScale(self.scale));
        }
        Ok(())
    }

    /// Representable code range: [−2^{k−1}, 2^{k−1}−1] symmetric,
    /// [0, 2^k−1] asymmetric.
    pub fn code_range(&self) -> (i64, i64) {
        match self.mode {
            QuantMode::Symmetric => (-(1i64 << (self.bits - 1)), (1i64 << (self.bits - 1)) - 1),
            QuantMode::Asymmetric => (0, (1i64 << self.bits) - 1),
        }
    }
}

/// clip(round(x/Δ) + z, lo, hi); f64::round ties away from zero.
pub fn quantize(x: f64, p: &QuantParams) -> i64 {
    let (lo, hi) = p.code_range();
    let q = (x / p.scale).round() as i64 + p.zero_point;
    q.clamp(lo, hi)
}

/// (q − z)·Δ; the code must be representable.
pub fn dequantize(q: i64, p: &QuantParams) -> Result<f64, QuantError> {
    let (lo, hi) = p.code_range();
    if q < lo || q > hi {
        return Err(QuantError::CodeOutOfRange { code: q, lo, hi });
    }
    Ok((q - p.zero_point) as f64 * p.scale)
}

pub fn fake_quant(x: f64, p: &QuantParams) -> f64 {
    (quantize(x, p) - p.zero_point) as f64 * p.scale
}

pub fn fake_quant_tensor(t: &Tensor, p: &QuantParams) -> Tensor {
    let data = t.data().iter().map(|&x| fake_quant(x, p)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Symmetric weight fit: Δ = max|w| / (2^{k−1} − 1), Δ = 1 for all-zero
/// tensors.
pub fn fit_weight_params(w: &Tensor, bits: u8) -> Result<QuantParams, QuantError> {
    if !(2..=32).contains(&bits) {
        return Err(QuantError::BadBits(bits));
    }
    let max_abs = w.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let denom = ((1i64 << (bits - 1)) - 1) as f64;
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / denom };
    Ok(QuantParams {
        bits,
        scale,
        zero_point: 0,
        mode: QuantMode::Symmetric,
    })
}

/// Asymmetric activation fit from observed min/max:
/// Δ = (max − min)/(2^k − 1), z = clip(round(−min/Δ), 0, 2^k − 1).
pub fn fit_activation_params(
    observed_min: f64,
    observed_max: f64,
    bits: u8,
) -> Result<QuantParams, QuantError> {
    if !(2..=32).contains(&bits) {
        return Err(QuantError::BadBits(bits));
    }
    if !observed_min.is_finite() || !observed_max.is_finite() || observed_min > observed_max {
        return Err(QuantError::BadStats {
            min: observed_min,
            max: observed_max,
        });
    }
    let levels = ((1i64 << bits) - 1) as f64;
    let scale = if observed_max == observed_min {
        1.0
    } else {
        (observed_max - observed_min) / levels
    };
    let zero_point = ((-observed_min / scale).round() as i64).clamp(0, (1i64 << bits) - 1);
    Ok(QuantParams {
        bits,
        scale,
        zero_point,
        mode: QuantMode::Asymmetric,
    })
}

// ── activation sites ───────────────────────────────────────────────────

/// Inputs of the quantized matmuls, in network order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Site {
    PatchEmbed,
    AttnIn(usize),
    AttnProj(usize),
    MlpFc1(usize),
    MlpFc2(usize),
    Head,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::PatchEmbed => write!(f, "patch_embed.in"),
            Site::AttnIn(b) => write!(f, "block{b}.attn.in"),
            Site::AttnProj(b) => write!(f, "block{b}.attn.proj.in"),
            Site::MlpFc1(b) => write!(f, "block{b}.mlp.fc1.in"),
            Site::MlpFc2(b) => write!(f, "block{b}.mlp.fc2.in"),
            Site::Head => write!(f, "head.in"),
        }
    }
}

impl Site {
    pub fn parse(s: &str) -> Option<Site> {
        if s == "patch_embed.in" {
            return Some(Site::PatchEmbed);
        }
        if s == "head.in" {
            return Some(Site::Head);
        }
        let rest = s.strip_prefix("block")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        match &rest[dot..] {
            ".attn.in" => Some(Site::AttnIn(idx)),
            ".attn.proj.in" => Some(Site::AttnProj(idx)),
            ".mlp.fc1.in" => Some(Site::MlpFc1(idx)),
            ".mlp.fc2.in" => Some(Site::MlpFc2(idx)),
            _ => None,
        }
    }

    /// Ordering key following network position.
    fn order(&self) -> (usize, usize) {
        match self {
            Site::PatchEmbed => (0, 0),
            Site::AttnIn(b) => (b + 1, 0),
            Site::AttnProj(b) => (b + 1, 1),
            Site::MlpFc1(b) => (b + 1, 2),
            Site::MlpFc2(b) => (b + 1, 3),
            Site::Head => (usize::MAX, 0),
        }
    }

    pub fn all(num_layers: usize, include_patch_embed: bool) -> Vec<Site> {
        let mut sites = Vec::new();
        if include_patch_embed {
            sites.push(Site::PatchEmbed);
        }
        for b in 0..num_layers {
            sites.push(Site::AttnIn(b));
            sites.push(Site::AttnProj(b));
            sites.push(Site::MlpFc1(b));
            sites.push(Site::MlpFc2(b));
        }
        sites.push(Site::Head);
        sites
    }
}

/// Running min/max per site; raw values are kept only when a percentile
/// other than 100 is requested.
#[derive(Debug, Default)]
pub struct ActObserver {
    pub stats: BTreeMap<Site, (f64, f64)>,
    pub values: Option<BTreeMap<Site, Vec<f64>>>,
}

impl ActObserver {
    pub fn new(collect_values: bool) -> Self {
        Self {
            stats: BTreeMap::new(),
            values: collect_values.then(BTreeMap::new),
        }
    }

    pub fn record(&mut self, site: Site, data: &[f64]) {
        let entry = self.stats.entry(site).or_insert((f64::MAX, f64::MIN));
        for &v in data {
            entry.0 = entry.0.min(v);
            entry.1 = entry.1.max(v);
        }
        if let Some(values) = &mut self.values {
            values.entry(site).or_default().extend_from_slice(data);
        }
    }
}

/// Calibrated activation quantizers keyed by site.
#[derive(Debug, Clone)]
pub struct ActQuant {
    pub params: BTreeMap<Site, QuantParams>,
    pub patch_embed_enabled: bool,
}

impl ActQuant {
    /// Fake-quantizes if the site is calibrated; `None` means "no params",
    /// which the forward engine resolves (excluded patch site passes
    /// through, anything else is an error).
    pub fn transform(&self, site: Site, x: &Tensor) -> Option<Tensor> {
        self.params.get(&site).map(|p| fake_quant_tensor(x, p))
    }
}

/// Cached fake-quantized weight matrices.
#[derive(Debug, Clone)]
pub struct QuantWeights {
    pub patch_weight: Option<Tensor>,
    pub blocks: Vec<QuantBlockWeights>,
    pub head_weight: Tensor,
}

#[derive(Debug, Clone)]
pub struct QuantBlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub proj: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct QuantConfig {
    pub bits_w: u8,
    pub bits_a: u8,
    /// The patch projection is a matmul like any other; a flag exists to
    /// exclude it.
    pub quantize_patch_embed: bool,
    /// Percentile of observed activation values used for the range; 100
    /// keeps plain min/max.
    pub act_percentile: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits_w: 8,
            bits_a: 8,
            quantize_patch_embed: true,
            act_percentile: 100.0,
        }
    }
}

/// Full-precision model plus everything needed for fake-quantized inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: ViTModel,
    pub cfg: QuantConfig,
    pub weight_params: BTreeMap<String, QuantParams>,
    pub act_params: BTreeMap<Site, QuantParams>,
    pub qweights: QuantWeights,
}

fn build_qweights(
    model: &ViTModel,
    cfg: &QuantConfig,
    weight_params: &BTreeMap<String, QuantParams>,
) -> QuantWeights {
    let fq = |name: &str, t: &Tensor| fake_quant_tensor(t, &weight_params[name]);
    QuantWeights {
        patch_weight: cfg
            .quantize_patch_embed
            .then(|| fq("patch.weight", &model.patch_weight)),
        blocks: model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| QuantBlockWeights {
                wq: fq(&format!("block{i}.attn.wq"), &b.wq),
                wk: fq(&format!("block{i}.attn.wk"), &b.wk),
                wv: fq(&format!("block{i}.attn.wv"), &b.wv),
                proj: fq(&format!("block{i}.attn.proj.weight"), &b.proj_weight),
                fc1: fq(&format!("block{i}.mlp.fc1.weight"), &b.fc1_weight),
                fc2: fq(&format!("block{i}.mlp.fc2.weight"), &b.fc2_weight),
            })
            .collect(),
        head_weight: fq("head.weight", &model.head_weight),
    }
}

fn fit_all_weight_params(
    model: &ViTModel,
    cfg: &QuantConfig,
) -> Result<BTreeMap<String, QuantParams>, QuantError> {
    let named: BTreeMap<String, &Tensor> = model.named_tensors().into_iter().collect();
    let mut out = BTreeMap::new();
    for name in model.quantizable_weights() {
        if name == "patch.weight" && !cfg.quantize_patch_embed {
            continue;
        }
        out.insert(name.clone(), fit_weight_params(named[&name], cfg.bits_w)?);
    }
    Ok(out)
}

/// Fits weight quantizers from the weights alone, then fits activation
/// quantizers from min/max over the samples' forward traces (run with the
/// quantized weights in place).
pub fn calibrate(
    model: &ViTModel,
    samples: &[Tensor],
    cfg: &QuantConfig,
) -> Result<QuantizedModel, QuantError> {
    if samples.is_empty() {
        return Err(QuantError::EmptySamples);
    }
    if !(cfg.act_percentile > 0.0 && cfg.act_percentile <= 100.0) {
        return Err(QuantError::BadPercentile(cfg.act_percentile));
    }
    let weight_params = fit_all_weight_params(model, cfg)?;
    let qweights = build_qweights(model, cfg, &weight_params);

    let mut observer = ActObserver::new(cfg.act_percentile < 100.0);
    for sample in samples {
        let mut pass = ForwardPass {
            model,
            qweights: Some(&qweights),
            act: ActMode::Observe(&mut observer),
            corrections: &[],
            capture_hooks: &[],
            want_msa: false,
        };
        pass.run(sample)?;
    }

    let mut act_params = BTreeMap::new();
    for site in Site::all(model.config.num_layers, cfg.quantize_patch_embed) {
        let (min, max) = range_for(&observer, site, cfg.act_percentile)
            .ok_or_else(|| QuantError::ParamsFormat(format!("site {site} was never observed")))?;
        act_params.insert(site, fit_activation_params(min, max, cfg.bits_a)?);
    }

    Ok(QuantizedModel {
        model: model.clone(),
        cfg: *cfg,
        weight_params,
        act_params,
        qweights,
    })
}

fn range_for(observer: &ActObserver, site: Site, percentile: f64) -> Option<(f64, f64)> {
    if percentile >= 100.0 {
        return observer.stats.get(&site).copied();
    }
    let values = observer.values.as_ref()?.get(&site)?;
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - percentile / 100.0) / 2.0;
    let lo_idx = ((sorted.len() as f64 - 1.0) * tail).round() as usize;
    let hi_idx = ((sorted.len() as f64 - 1.0) * (1.0 - tail)).round() as usize;
    Some((sorted[lo_idx], sorted[hi_idx.max(lo_idx)]))
}

impl QuantizedModel {
    /// Rebuilds the quantized view from previously saved parameters.
    pub fn from_params(
        model: &ViTModel,
        cfg: &QuantConfig,
        weight_params: BTreeMap<String, QuantParams>,
        act_params: BTreeMap<Site, QuantParams>,
    ) -> Result<Self, QuantError> {
        for p in weight_params.values().chain(act_params.values()) {
            p.validate()?;
        }
        let qweights = build_qweights(model, cfg, &weight_params);
        Ok(Self {
            model: model.clone(),
            cfg: *cfg,
            weight_params,
            act_params,
            qweights,
        })
    }

    pub(crate) fn act_quant(&self) -> ActQuant {
        ActQuant {
            params: self.act_params.clone(),
            patch_embed_enabled: self.cfg.quantize_patch_embed,
        }
    }
}

/// Fake-quantized forward: weights and matmul inputs pass through
/// quantize→dequantize, everything else stays float.
pub fn quantized_forward(
    qmodel: &QuantizedModel,
    image: &Tensor,
    trace_requested: bool,
) -> Result<ForwardTrace, QuantError> {
    quantized_forward_with(qmodel, image, &[], trace_requested, &[])
}

/// Quantized forward with hook captures and (possibly partial) corrections;
/// the ACM module drives this.
pub(crate) fn quantized_forward_with(
    qmodel: &QuantizedModel,
    image: &Tensor,
    corrections: &[crate::model::HookCorrection],
    trace_requested: bool,
    capture_hooks: &[crate::model::HookPoint],
) -> Result<ForwardTrace, QuantError> {
    let act = qmodel.act_quant();
    let mut pass = ForwardPass {
        model: &qmodel.model,
        qweights: Some(&qmodel.qweights),
        act: ActMode::Quantize(&act),
        corrections,
        capture_hooks,
        want_msa: trace_requested,
    };
    Ok(pass.run(image)?)
}

// ── parameter file ─────────────────────────────────────────────────────

/// One record per quantized site, human-readable, exact round-trip (Rust's
/// float display is shortest-roundtrip).
pub fn write_quant_params(path: &Path, qmodel: &QuantizedModel) -> Result<(), QuantError> {
    let mut out = String::from("# quant params v1\n");
    for (name, p) in &qmodel.weight_params {
        out.push_str(&format!(
            "weight {name} mode {} bits {} scale {} zero_point {}\n",
            p.mode, p.bits, p.scale, p.zero_point
        ));
    }
    let mut acts: Vec<(&Site, &QuantParams)> = qmodel.act_params.iter().collect();
    acts.sort_by_key(|(site, _)| site.order());
    for (site, p) in acts {
        out.push_str(&format!(
            "act {site} mode {} bits {} scale {} zero_point {}\n",
            p.mode, p.bits, p.scale, p.zero_point
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub type SavedParams = (BTreeMap<String, QuantParams>, BTreeMap<Site, QuantParams>);

pub fn read_quant_params(path: &Path) -> Result<SavedParams, QuantError> {
    let text = std::fs::read_to_string(path)?;
    let mut weights = BTreeMap::new();
    let mut acts = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let fail = |msg: &str| QuantError::ParamsFormat(format!("line {}: {msg}", lineno + 1));
        if fields.len() != 10
            || fields[2] != "mode"
            || fields[4] != "bits"
            || fields[6] != "scale"
            || fields[8] != "zero_point"
        {
            return Err(fail("expected `kind name mode m bits k scale s zero_point z`"));
        }
        let mode = match fields[3] {
            "symmetric" => QuantMode::Symmetric,
            "asymmetric" => QuantMode::Asymmetric,
            other => return Err(fail(&format!("unknown mode {other}"))),
        };
        let params = QuantParams {
            bits: fields[5].parse().map_err(|_| fail("bad bits"))?,
            scale: fields[7].parse().map_err(|_| fail("bad scale"))?,
            zero_point: fields[9].parse().map_err(|_| fail("bad zero_point"))?,
            mode,
        };
        match fields[0] {
            "weight" => {
                weights.insert(fields[1].to_string(), params);
            }
            "act" => {
                let site = Site::parse(fields[1])
                    .ok_or_else(|| fail(&format!("unknown site {}", fields[1])))?;
                acts.insert(site, params);
            }
            other => return Err(fail(&format!("unknown record kind {other}"))),
        }
    }
    Ok((weights, acts))
}
