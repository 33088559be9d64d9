//! Toy-scale plain vision transformer (pre-norm blocks, no windowing), with
//! activation hooks for calibration and correction.

mod forward;
mod tape_forward;
mod train;

pub use forward::{
    attention_head, forward, msa, patch_embed, ActMode, ForwardPass, ForwardTrace,
    HookCorrection, HookPoint,
};
pub use tape_forward::{build_tape_forward, TapeVit};
pub use train::{train_toy, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;
use crate::tensor::{ShapeError, TapeError, Tensor};

/// Shared layer-norm epsilon for every norm in the network.
pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image shape {found:?} does not match configured {expected:?}")]
    ImageShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("activation site {0} has no calibration parameters")]
    UncalibratedSite(String),
    #[error("hook {0} does not match the model architecture")]
    HookMismatch(String),
    #[error("training failed: {0}")]
    Train(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub use_cls_token: bool,
}

impl ViTConfig {
    /// Default toy model: 32x32 RGB, patch 4, D=64, 4 layers, 4 heads.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            use_cls_token: false,
        }
    }

    /// Small enough for finite-difference checks of the full loss path.
    pub fn reduced() -> Self {
        Self {
            image_size: 8,
            patch_size: 2,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 4,
            num_classes: 10,
            use_cls_token: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.image_size,
            self.patch_size,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_ratio,
            self.num_classes,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![3, self.image_size, self.image_size]
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Option<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ViTModel {
    /// All weights zero; layer-norm gains zero too, so the forward output is
    /// exactly the head bias. Mostly useful in tests.
    pub fn zeros(config: ViTConfig) -> Self {
        let d = config.hidden_dim;
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights {
                ln1_gain: Tensor::zeros(vec![d]),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: Tensor::zeros(vec![d, d]),
                wk: Tensor::zeros(vec![d, d]),
                wv: Tensor::zeros(vec![d, d]),
                proj_weight: Tensor::zeros(vec![d, d]),
                proj_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::zeros(vec![d]),
                ln2_bias: Tensor::zeros(vec![d]),
                fc1_weight: Tensor::zeros(vec![d, config.mlp_hidden()]),
                fc1_bias: Tensor::zeros(vec![config.mlp_hidden()]),
                fc2_weight: Tensor::zeros(vec![config.mlp_hidden(), d]),
                fc2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        Self {
            patch_weight: Tensor::zeros(vec![config.patch_features(), d]),
            patch_bias: Tensor::zeros(vec![d]),
            pos_embed: Tensor::zeros(vec![config.num_tokens(), d]),
            cls_token: config.use_cls_token.then(|| Tensor::zeros(vec![1, d])),
            blocks,
            ln_f_gain: Tensor::zeros(vec![d]),
            ln_f_bias: Tensor::zeros(vec![d]),
            head_weight: Tensor::zeros(vec![d, config.num_classes]),
            head_bias: Tensor::zeros(vec![config.num_classes]),
            config,
        }
    }

    /// Gaussian init (std 0.02) for projections and embeddings, unit gains.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self::zeros(config);
        let mut stream = SeedStream::new(crate::rng::derive_seed(seed, &[0x6d6f64656c]));
        for (name, t) in model.named_tensors_mut() {
            let is_gain = name.ends_with("gain");
            let is_bias = name.ends_with("bias");
            for v in t.data_mut() {
                *v = if is_gain {
                    1.0
                } else if is_bias {
                    0.0
                } else {
                    stream.gaussian(0.0, 0.02)
                };
            }
        }
        Ok(model)
    }

    /// Canonical (name, tensor) listing; also the checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch_weight),
            ("patch.bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
        ];
        if let Some(cls) = &self.cls_token {
            out.push(("cls_token".into(), cls));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gain"), &b.ln1_gain));
            out.push((format!("block{i}.ln1.bias"), &b.ln1_bias));
            out.push((format!("block{i}.attn.wq"), &b.wq));
            out.push((format!("block{i}.attn.wk"), &b.wk));
            out.push((format!("block{i}.attn.wv"), &b.wv));
            out.push((format!("block{i}.attn.proj.weight"), &b.proj_weight));
            out.push((format!("block{i}.attn.proj.bias"), &b.proj_bias));
            out.push((format!("block{i}.ln2.gain"), &b.ln2_gain));
            out.push((format!("block{i}.ln2.bias"), &b.ln2_bias));
            out.push((format!("block{i}.mlp.fc1.weight"), &b.fc1_weight));
            out.push((format!("block{i}.mlp.fc1.bias"), &b.fc1_bias));
            out.push((format!("block{i}.mlp.fc2.weight"), &b.fc2_weight));
            out.push((format!("block{i}.mlp.fc2.bias"), &b.fc2_bias));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch.weight".into(), &mut self.patch_weight),
            ("patch.bias".into(), &mut self.patch_bias),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        if let Some(cls) = &mut self.cls_token {
            out.push(("cls_token".into(), cls));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.gain"), &mut b.ln1_gain));
            out.push((format!("block{i}.ln1.bias"), &mut b.ln1_bias));
            out.push((format!("block{i}.attn.wq"), &mut b.wq));
            out.push((format!("block{i}.attn.wk"), &mut b.wk));
            out.push((format!("block{i}.attn.wv"), &mut b.wv));
            out.push((format!("block{i}.attn.proj.weight"), &mut b.proj_weight));
            out.push((format!("block{i}.attn.proj.bias"), &mut b.proj_bias));
            out.push((format!("block{i}.ln2.gain"), &mut b.ln2_gain));
            out.push((format!("block{i}.ln2.bias"), &mut b.ln2_bias));
            out.push((format!("block{i}.mlp.fc1.weight"), &mut b.fc1_weight));
            out.push((format!("block{i}.mlp.fc1.bias"), &mut b.fc1_bias));
            out.push((format!("block{i}.mlp.fc2.weight"), &mut b.fc2_weight));
            out.push((format!("block{i}.mlp.fc2.bias"), &mut b.fc2_bias));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f_bias));
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Names of the weight matrices that get quantized.
    pub fn quantizable_weights(&self) -> Vec<String> {
        let mut names = vec!["patch.weight".to_string()];
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.attn.wq"));
            names.push(format!("block{i}.attn.wk"));
            names.push(format!("block{i}.attn.wv"));
            names.push(format!("block{i}.attn.proj.weight"));
            names.push(format!("block{i}.mlp.fc1.weight"));
            names.push(format!("block{i}.mlp.fc2.weight"));
        }
        names.push("head.weight".into());
        names
    }
}
