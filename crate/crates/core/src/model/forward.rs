//! Single forward engine used for full-precision inference, calibration
//! statistics, fake-quantized inference, and correction-augmented inference.
//!
//! The op order here mirrors `tape_forward` exactly and both call the same
//! kernels, so a plain forward and a tape forward of the same model are
//! bit-identical.

use crate::quant::{ActObserver, ActQuant, QuantWeights, Site};
use crate::tensor::kernels;
use crate::tensor::Tensor;

use super::{ModelError, ViTModel, LN_EPS};

/// Where activations can be captured and corrected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HookPoint {
    /// Output of transformer block `i` (after both residual adds).
    AfterBlock(usize),
    /// Features after the final layer norm, before pooling.
    FinalFeatures,
    /// Classifier output.
    Logits,
}

impl HookPoint {
    /// Position index used for the strictly-increasing ordering invariant.
    pub fn position(&self, num_layers: usize) -> usize {
        match self {
            HookPoint::AfterBlock(i) => *i,
            HookPoint::FinalFeatures => num_layers,
            HookPoint::Logits => num_layers + 1,
        }
    }

    /// Channel dimension of the captured vector.
    pub fn dim(&self, config: &super::ViTConfig) -> usize {
        match self {
            HookPoint::AfterBlock(_) | HookPoint::FinalFeatures => config.hidden_dim,
            HookPoint::Logits => config.num_classes,
        }
    }

    pub fn label(&self) -> String {
        match self {
            HookPoint::AfterBlock(i) => format!("after_block{i}"),
            HookPoint::FinalFeatures => "final_features".into(),
            HookPoint::Logits => "logits".into(),
        }
    }
}

/// Per-channel additive correction at one hook point.
#[derive(Debug, Clone, PartialEq)]
pub struct HookCorrection {
    pub hook: HookPoint,
    pub values: Vec<f64>,
}

/// How activations are treated at quantized matmul inputs.
pub enum ActMode<'a> {
    Float,
    Observe(&'a mut ActObserver),
    Quantize(&'a ActQuant),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Post-projection MSA output per layer, captured before the residual
    /// add; present when the trace was requested.
    pub msa_outputs: Vec<Tensor>,
    /// Token-averaged activations captured at hook points, before any
    /// correction at that same hook was applied.
    pub hooks: Vec<(HookPoint, Vec<f64>)>,
    pub logits: Vec<f64>,
}

pub struct ForwardPass<'a> {
    pub model: &'a ViTModel,
    pub qweights: Option<&'a QuantWeights>,
    pub act: ActMode<'a>,
    /// Corrections are applied at their hook points; may be a prefix of the
    /// full hook list during sequential correction construction.
    pub corrections: &'a [HookCorrection],
    pub capture_hooks: &'a [HookPoint],
    pub want_msa: bool,
}

impl<'a> ForwardPass<'a> {
    pub fn float(model: &'a ViTModel) -> Self {
        Self {
            model,
            qweights: None,
            act: ActMode::Float,
            corrections: &[],
            capture_hooks: &[],
            want_msa: false,
        }
    }

    fn site(&mut self, x: Tensor, site: Site) -> Result<Tensor, ModelError> {
        match &mut self.act {
            ActMode::Float => Ok(x),
            ActMode::Observe(obs) => {
                obs.record(site, x.data());
                Ok(x)
            }
            ActMode::Quantize(q) => match q.transform(site, &x) {
                Some(t) => Ok(t),
                None => {
                    if site == Site::PatchEmbed && !q.patch_embed_enabled {
                        Ok(x)
                    } else {
                        Err(ModelError::UncalibratedSite(site.to_string()))
                    }
                }
            },
        }
    }

    fn hook(&self, trace: &mut ForwardTrace, hook: HookPoint, x: &mut [f64], channels: usize) {
        let captured = if self.capture_hooks.contains(&hook) {
            Some(token_average(x, channels))
        } else {
            None
        };
        if let Some(v) = captured {
            trace.hooks.push((hook, v));
        }
        if let Some(c) = self.corrections.iter().find(|c| c.hook == hook) {
            for (i, v) in x.iter_mut().enumerate() {
                *v += c.values[i % channels];
            }
        }
    }

    /// Runs the configured forward pass on one image.
    pub fn run(&mut self, image: &Tensor) -> Result<ForwardTrace, ModelError> {
        let cfg = &self.model.config;
        if image.shape() != cfg.image_shape().as_slice() {
            return Err(ModelError::ImageShape {
                expected: cfg.image_shape(),
                found: image.shape().to_vec(),
            });
        }
        for c in self.corrections {
            if c.values.len() != c.hook.dim(cfg) {
                return Err(ModelError::HookMismatch(format!(
                    "{} expects {} channels, correction has {}",
                    c.hook.label(),
                    c.hook.dim(cfg),
                    c.values.len()
                )));
            }
        }

        let d = cfg.hidden_dim;
        let n_tokens = cfg.num_tokens();
        let mut trace = ForwardTrace::default();

        // Patch embedding.
        let patches = Tensor::new(
            vec![cfg.num_patches(), cfg.patch_features()],
            kernels::patchify(image.data(), 3, cfg.image_size, cfg.patch_size),
        )?;
        let patches = self.site(patches, Site::PatchEmbed)?;
        let pw = self
            .qweights
            .and_then(|q| q.patch_weight.as_ref())
            .unwrap_or(&self.model.patch_weight);
        let mut tokens = kernels::matmul(
            patches.data(),
            pw.data(),
            cfg.num_patches(),
            cfg.patch_features(),
            d,
        );
        add_row_vec(&mut tokens, self.model.patch_bias.data());
        if let Some(cls) = &self.model.cls_token {
            let mut with_cls = cls.data().to_vec();
            with_cls.extend_from_slice(&tokens);
            tokens = with_cls;
        }
        add_same(&mut tokens, self.model.pos_embed.data());
        let mut x = tokens; // [n_tokens, d] row-major

        for (b, block) in self.model.blocks.iter().enumerate() {
            let qb = self.qweights.map(|q| &q.blocks[b]);

            // Attention half.
            let ln1 = kernels::layer_norm(
                &x,
                d,
                block.ln1_gain.data(),
                block.ln1_bias.data(),
                LN_EPS,
            );
            let ln1 = self.site(Tensor::new(vec![n_tokens, d], ln1)?, Site::AttnIn(b))?;
            let wq = qb.map(|q| &q.wq).unwrap_or(&block.wq);
            let wk = qb.map(|q| &q.wk).unwrap_or(&block.wk);
            let wv = qb.map(|q| &q.wv).unwrap_or(&block.wv);
            let q = kernels::matmul(ln1.data(), wq.data(), n_tokens, d, d);
            let k = kernels::matmul(ln1.data(), wk.data(), n_tokens, d, d);
            let v = kernels::matmul(ln1.data(), wv.data(), n_tokens, d, d);
            let cat = msa_heads(&q, &k, &v, n_tokens, d, cfg.num_heads);
            let cat = self.site(Tensor::new(vec![n_tokens, d], cat)?, Site::AttnProj(b))?;
            let pw = qb.map(|q| &q.proj).unwrap_or(&block.proj_weight);
            let mut msa_out = kernels::matmul(cat.data(), pw.data(), n_tokens, d, d);
            add_row_vec(&mut msa_out, block.proj_bias.data());
            if self.want_msa {
                trace
                    .msa_outputs
                    .push(Tensor::new(vec![n_tokens, d], msa_out.clone())?);
            }
            add_same(&mut x, &msa_out);

            // MLP half.
            let ln2 = kernels::layer_norm(
                &x,
                d,
                block.ln2_gain.data(),
                block.ln2_bias.data(),
                LN_EPS,
            );
            let ln2 = self.site(Tensor::new(vec![n_tokens, d], ln2)?, Site::MlpFc1(b))?;
            let w1 = qb.map(|q| &q.fc1).unwrap_or(&block.fc1_weight);
            let mut h = kernels::matmul(ln2.data(), w1.data(), n_tokens, d, cfg.mlp_hidden());
            add_row_vec(&mut h, block.fc1_bias.data());
            for v in &mut h {
                *v = kernels::gelu(*v);
            }
            let h = self.site(
                Tensor::new(vec![n_tokens, cfg.mlp_hidden()], h)?,
                Site::MlpFc2(b),
            )?;
            let w2 = qb.map(|q| &q.fc2).unwrap_or(&block.fc2_weight);
            let mut h2 = kernels::matmul(h.data(), w2.data(), n_tokens, cfg.mlp_hidden(), d);
            add_row_vec(&mut h2, block.fc2_bias.data());
            add_same(&mut x, &h2);

            self.hook(&mut trace, HookPoint::AfterBlock(b), &mut x, d);
        }

        let mut feats = kernels::layer_norm(
            &x,
            d,
            self.model.ln_f_gain.data(),
            self.model.ln_f_bias.data(),
            LN_EPS,
        );
        self.hook(&mut trace, HookPoint::FinalFeatures, &mut feats, d);

        let pooled = if cfg.use_cls_token {
            feats[..d].to_vec()
        } else {
            mean_rows(&feats, n_tokens, d)
        };
        let pooled = self.site(Tensor::new(vec![1, d], pooled)?, Site::Head)?;
        let hw = self
            .qweights
            .map(|q| &q.head_weight)
            .unwrap_or(&self.model.head_weight);
        let mut logits = kernels::matmul(pooled.data(), hw.data(), 1, d, cfg.num_classes);
        add_row_vec(&mut logits, self.model.head_bias.data());
        self.hook(&mut trace, HookPoint::Logits, &mut logits, cfg.num_classes);

        trace.logits = logits;
        Ok(trace)
    }
}

/// Full-precision forward; `trace_requested` additionally records per-layer
/// MSA outputs.
pub fn forward(
    model: &ViTModel,
    image: &Tensor,
    trace_requested: bool,
) -> Result<ForwardTrace, ModelError> {
    let mut pass = ForwardPass {
        want_msa: trace_requested,
        ..ForwardPass::float(model)
    };
    pass.run(image)
}

/// Patch embedding: flattened patches, linear projection, optional class
/// token, positional embedding.
pub fn patch_embed(model: &ViTModel, image: &Tensor) -> Result<Tensor, ModelError> {
    let cfg = &model.config;
    if image.shape() != cfg.image_shape().as_slice() {
        return Err(ModelError::ImageShape {
            expected: cfg.image_shape(),
            found: image.shape().to_vec(),
        });
    }
    let patches = kernels::patchify(image.data(), 3, cfg.image_size, cfg.patch_size);
    let mut tokens = kernels::matmul(
        &patches,
        model.patch_weight.data(),
        cfg.num_patches(),
        cfg.patch_features(),
        cfg.hidden_dim,
    );
    add_row_vec(&mut tokens, model.patch_bias.data());
    if let Some(cls) = &model.cls_token {
        let mut with_cls = cls.data().to_vec();
        with_cls.extend_from_slice(&tokens);
        tokens = with_cls;
    }
    add_same(&mut tokens, model.pos_embed.data());
    Ok(Tensor::new(
        vec![cfg.num_tokens(), cfg.hidden_dim],
        tokens,
    )?)
}

/// softmax(Q Kᵀ · d^{-1/2}) V for one head.
pub fn attention_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, ModelError> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape().len() != 2 || t.shape() != q.shape() {
            return Err(crate::tensor::ShapeError::Mismatch {
                op: "attention_head",
                lhs: q.shape().to_vec(),
                rhs: t.shape().to_vec(),
            }
            .into());
        }
        let _ = name;
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let out = attention_one_head(q.data(), k.data(), v.data(), n, d);
    Ok(Tensor::new(vec![n, d], out)?)
}

/// Per-head attention over layer-normed tokens, concatenated and
/// output-projected.
pub fn msa(x: &Tensor, block: &super::BlockWeights, num_heads: usize) -> Result<Tensor, ModelError> {
    if x.shape().len() != 2 || x.shape()[1] != block.wq.shape()[0] {
        return Err(crate::tensor::ShapeError::Mismatch {
            op: "msa",
            lhs: x.shape().to_vec(),
            rhs: block.wq.shape().to_vec(),
        }
        .into());
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let q = kernels::matmul(x.data(), block.wq.data(), n, d, d);
    let k = kernels::matmul(x.data(), block.wk.data(), n, d, d);
    let v = kernels::matmul(x.data(), block.wv.data(), n, d, d);
    let cat = msa_heads(&q, &k, &v, n, d, num_heads);
    let mut out = kernels::matmul(&cat, block.proj_weight.data(), n, d, d);
    add_row_vec(&mut out, block.proj_bias.data());
    Ok(Tensor::new(vec![n, d], out)?)
}

pub(crate) fn attn_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Slice per head, run scaled dot-product attention, concatenate.
pub(crate) fn msa_heads(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    num_heads: usize,
) -> Vec<f64> {
    let hd = d / num_heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..num_heads {
        let qh = slice_cols(q, n, d, h * hd, hd);
        let kh = slice_cols(k, n, d, h * hd, hd);
        let vh = slice_cols(v, n, d, h * hd, hd);
        let out = attention_one_head(&qh, &kh, &vh, n, hd);
        for r in 0..n {
            cat[r * d + h * hd..r * d + (h + 1) * hd]
                .copy_from_slice(&out[r * hd..(r + 1) * hd]);
        }
    }
    cat
}

fn attention_one_head(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let kt = kernels::transpose(k, n, d);
    let mut scores = kernels::matmul(q, &kt, n, d, n);
    let scale = attn_scale(d);
    for s in &mut scores {
        *s *= scale;
    }
    let attn = kernels::softmax(&scores, &[n, n], 1);
    kernels::matmul(&attn, v, n, n, d)
}

pub(crate) fn slice_cols(data: &[f64], rows: usize, cols: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&data[r * cols + start..r * cols + start + len]);
    }
    out
}

pub(crate) fn add_row_vec(data: &mut [f64], v: &[f64]) {
    let cols = v.len();
    for (i, x) in data.iter_mut().enumerate() {
        *x += v[i % cols];
    }
}

pub(crate) fn add_same(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Column means of a [rows, cols] matrix.
pub(crate) fn mean_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += data[r * cols + c];
        }
    }
    for v in &mut out {
        *v /= rows as f64;
    }
    out
}

/// Token-averaged per-channel vector; for a single row this is the row
/// itself.
pub(crate) fn token_average(data: &[f64], channels: usize) -> Vec<f64> {
    let rows = data.len() / channels;
    mean_rows(data, rows, channels)
}
