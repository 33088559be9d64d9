//! Adam training of the toy model on the procedural dataset.

use crate::rng::{derive_seed, SeedStream};
use crate::tensor::{adam_update, AdamState, Tape, Tensor};

use super::{build_tape_forward, forward, ModelError, ViTModel};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty folded into the gradient; keeps weight magnitudes tame,
    /// which matters later for low-bit weight quantization.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_top1: f64,
    pub test_top1: f64,
}

/// Trains in place; deterministic given the config seed.
pub fn train_toy(
    model: &mut ViTModel,
    train: (&[Tensor], &[usize]),
    test: (&[Tensor], &[usize]),
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    let (images, labels) = train;
    if images.is_empty() {
        return Err(ModelError::Train("empty dataset".into()));
    }
    if images.len() != labels.len() {
        return Err(ModelError::Train("images/labels length mismatch".into()));
    }
    let classes = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Train(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut states: Vec<AdamState> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.numel()))
        .collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffler = SeedStream::new(derive_seed(cfg.seed, &[0x747261696e, epoch as u64]));
        shuffler.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Vec<f64>> = model
                .named_tensors()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            for &idx in batch {
                let mut tape = Tape::new();
                let vit =
                    build_tape_forward(&mut tape, model, images[idx].detached(), true, false)?;
                let loss = tape.cross_entropy(vit.logits, labels[idx])?;
                let loss_val = tape.value(loss).data()[0];
                if !loss_val.is_finite() {
                    return Err(ModelError::Train(format!(
                        "non-finite loss at epoch {epoch}, sample {idx}"
                    )));
                }
                epoch_loss += loss_val;
                tape.backward(loss)?;
                for ((_, vid), acc) in vit.weights.iter().zip(&mut grad_acc) {
                    if let Some(g) = tape.grad(*vid) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let tensors = model.named_tensors_mut();
            for (((_, tensor), grads), state) in
                tensors.into_iter().zip(&mut grad_acc).zip(&mut states)
            {
                for (g, w) in grads.iter_mut().zip(tensor.data()) {
                    *g = *g * scale + cfg.weight_decay * w;
                }
                adam_update(tensor.data_mut(), grads, state, cfg.lr, 0.9, 0.999, 1e-8)
                    .map_err(|e| ModelError::Train(e.to_string()))?;
            }
        }
        epoch_losses.push(epoch_loss / images.len() as f64);
    }

    let train_top1 = top1(model, images, labels)?;
    let test_top1 = top1(model, test.0, test.1)?;
    Ok(TrainReport {
        epoch_losses,
        train_top1,
        test_top1,
    })
}

/// Percent of images whose argmax logit matches the label.
pub(crate) fn top1(model: &ViTModel, images: &[Tensor], labels: &[usize]) -> Result<f64, ModelError> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        let trace = forward(model, img, false)?;
        if argmax(&trace.logits) == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / images.len() as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
