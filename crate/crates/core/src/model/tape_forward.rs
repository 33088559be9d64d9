//! Differentiable forward pass recorded on a tape, mirroring the op order of
//! the plain engine in `forward.rs` exactly.

use crate::tensor::{Tape, Tensor, VarId};

use super::forward::attn_scale;
use super::{ModelError, ViTModel, LN_EPS};

pub struct TapeVit {
    /// Weight leaves in `named_tensors` order.
    pub weights: Vec<(String, VarId)>,
    pub image: VarId,
    /// Per-layer MSA outputs (post projection, pre residual).
    pub msa_outputs: Vec<VarId>,
    /// [1, num_classes].
    pub logits: VarId,
}

/// Records the full forward pass. `trainable_weights` marks the weight
/// leaves for gradients (training); otherwise only the image is a gradient
/// leaf if the caller marked it (synthesis).
pub fn build_tape_forward(
    tape: &mut Tape,
    model: &ViTModel,
    image: Tensor,
    trainable_weights: bool,
    want_msa: bool,
) -> Result<TapeVit, ModelError> {
    let cfg = &model.config;
    if image.shape() != cfg.image_shape().as_slice() {
        return Err(ModelError::ImageShape {
            expected: cfg.image_shape(),
            found: image.shape().to_vec(),
        });
    }
    let d = cfg.hidden_dim;

    let image_id = tape.leaf(image);
    let weights: Vec<(String, VarId)> = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let id = tape.leaf(t.clone().with_grad(trainable_weights));
            (name, id)
        })
        .collect();
    let w = |name: &str| -> VarId {
        weights
            .iter()
            .find(|(n, _)| n == name)
            .expect("known weight name")
            .1
    };

    let patches = tape.patchify(image_id, cfg.patch_size)?;
    let projected = tape.matmul(patches, w("patch.weight"))?;
    let tokens = tape.add_row_vec(projected, w("patch.bias"))?;
    let tokens = if cfg.use_cls_token {
        let cls = w("cls_token");
        tape.concat(&[cls, tokens], 0)?
    } else {
        tokens
    };
    let mut x = tape.add(tokens, w("pos_embed"))?;

    let mut msa_outputs = Vec::with_capacity(cfg.num_layers);
    for b in 0..cfg.num_layers {
        let ln1 = tape.layer_norm(
            x,
            w(&format!("block{b}.ln1.gain")),
            w(&format!("block{b}.ln1.bias")),
            LN_EPS,
        )?;
        let q = tape.matmul(ln1, w(&format!("block{b}.attn.wq")))?;
        let k = tape.matmul(ln1, w(&format!("block{b}.attn.wk")))?;
        let v = tape.matmul(ln1, w(&format!("block{b}.attn.wv")))?;
        let hd = cfg.head_dim();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice(q, 1, h * hd, hd)?;
            let kh = tape.slice(k, 1, h * hd, hd)?;
            let vh = tape.slice(v, 1, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, attn_scale(hd))?;
            let attn = tape.softmax(scaled, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let proj = tape.matmul(cat, w(&format!("block{b}.attn.proj.weight")))?;
        let msa_out = tape.add_row_vec(proj, w(&format!("block{b}.attn.proj.bias")))?;
        if want_msa {
            msa_outputs.push(msa_out);
        }
        x = tape.add(x, msa_out)?;

        let ln2 = tape.layer_norm(
            x,
            w(&format!("block{b}.ln2.gain")),
            w(&format!("block{b}.ln2.bias")),
            LN_EPS,
        )?;
        let h1 = tape.matmul(ln2, w(&format!("block{b}.mlp.fc1.weight")))?;
        let h1 = tape.add_row_vec(h1, w(&format!("block{b}.mlp.fc1.bias")))?;
        let act = tape.gelu(h1)?;
        let h2 = tape.matmul(act, w(&format!("block{b}.mlp.fc2.weight")))?;
        let h2 = tape.add_row_vec(h2, w(&format!("block{b}.mlp.fc2.bias")))?;
        x = tape.add(x, h2)?;
    }

    let feats = tape.layer_norm(x, w("ln_f.gain"), w("ln_f.bias"), LN_EPS)?;
    let pooled = if cfg.use_cls_token {
        tape.slice(feats, 0, 0, 1)?
    } else {
        let mean = tape.mean_rows(feats)?;
        tape.reshape(mean, vec![1, d])?
    };
    let scores = tape.matmul(pooled, w("head.weight"))?;
    let logits = tape.add_row_vec(scores, w("head.bias"))?;

    Ok(TapeVit {
        weights,
        image: image_id,
        msa_outputs,
        logits,
    })
}
