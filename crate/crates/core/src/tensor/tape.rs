//! Append-only operation tape for reverse-mode differentiation.
//!
//! A forward pass records one node per op; `backward` replays the tape in
//! reverse exactly once and attaches gradients to every node on the path to
//! the loss. Inputs always precede their consumers, so the reverse sweep is
//! a valid topological order by construction.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use super::kernels;
use super::{ShapeError, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("backward already ran on this tape; re-record the forward pass")]
    BackwardReplay,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("{0}")]
    Unsupported(String),
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddRowVec { a: usize, v: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    MeanRows { a: usize },
    Abs { a: usize },
    Sqrt { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Gelu { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    RowNormalize { a: usize, eps_sq: f64 },
    UpperTriangle { a: usize },
    Patchify { a: usize, patch: usize },
    Entropy { centers: usize, h: f64, grid_min: f64, grid_step: f64, density: Vec<f64> },
    TvLoss { a: usize },
    CrossEntropy { logits: usize, class: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Handle to the n-th recorded node (used by tests that rebuild the
    /// same graph repeatedly).
    pub fn nth_var(&self, idx: usize) -> VarId {
        assert!(idx < self.nodes.len(), "node index out of range");
        VarId {
            tape: self.id,
            idx,
        }
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Gradient attached after `backward`, if this node was on the loss path.
    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.nodes[v.idx].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: VarId) -> Result<usize, TapeError> {
        if v.tape != self.id {
            return Err(TapeError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }
            .into());
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data).expect("matmul shape"),
            Op::Matmul { a, b },
            needs,
        ))
    }

    fn elementwise_pair(
        &mut self,
        op: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<(usize, usize), TapeError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(ShapeError::Mismatch {
                op,
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            }
            .into());
        }
        Ok((a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (a, b) = self.elementwise_pair("add", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (a, b) = self.elementwise_pair("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        let (a, b) = self.elementwise_pair("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Scale { a, c }, needs))
    }

    /// Adds a length-c vector to every row of an [r, c] matrix.
    pub fn add_row_vec(&mut self, a: VarId, v: VarId) -> Result<VarId, TapeError> {
        let (a, v) = (self.check(a)?, self.check(v)?);
        let sa = self.nodes[a].value.shape().to_vec();
        let sv = self.nodes[v].value.shape().to_vec();
        if sa.len() != 2 || sv.len() != 1 || sv[0] != sa[1] {
            return Err(ShapeError::Mismatch {
                op: "add_row_vec",
                lhs: sa,
                rhs: sv,
            }
            .into());
        }
        let cols = sa[1];
        let vd = self.nodes[v].value.data();
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vd[i % cols])
            .collect();
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::new(sa, data).unwrap(), Op::AddRowVec { a, v }, needs))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 {
            return Err(ShapeError::Invalid {
                op: "transpose",
                shape: s,
                reason: "expected rank 2".into(),
            }
            .into());
        }
        let data = kernels::transpose(self.nodes[a].value.data(), s[0], s[1]);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![s[1], s[0]], data).unwrap(),
            Op::Transpose { a },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].value.numel() {
            return Err(ShapeError::Invalid {
                op: "reshape",
                shape,
                reason: format!("element count changed from {}", self.nodes[a].value.numel()),
            }
            .into());
        }
        let data = self.nodes[a].value.data().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Reshape { a }, needs))
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, needs))
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let n = self.nodes[a].value.numel() as f64;
        let s: f64 = self.nodes[a].value.data().iter().sum::<f64>() / n;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { a }, needs))
    }

    /// Column means of an [r, c] matrix, producing a length-c vector.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 {
            return Err(ShapeError::Invalid {
                op: "mean_rows",
                shape: s,
                reason: "expected rank 2".into(),
            }
            .into());
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[a].value.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![c], out).unwrap(), Op::MeanRows { a }, needs))
    }

    fn unary(
        &mut self,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data).unwrap(), op(a), needs))
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId, TapeError> {
        self.unary(a, f64::abs, |a| Op::Abs { a })
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, TapeError> {
        self.unary(a, f64::sqrt, |a| Op::Sqrt { a })
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, TapeError> {
        self.unary(a, f64::exp, |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId, TapeError> {
        self.unary(a, f64::ln, |a| Op::Log { a })
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId, TapeError> {
        self.unary(a, kernels::gelu, |a| Op::Gelu { a })
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let shape = self.nodes[a].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(ShapeError::Axis {
                op: "softmax",
                axis,
                shape,
            }
            .into());
        }
        let data = kernels::softmax(self.nodes[a].value.data(), &shape, axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Softmax { a, axis },
            needs,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    ) -> Result<VarId, TapeError> {
        let (x, gain, bias) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let sx = self.nodes[x].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| ShapeError::Invalid {
            op: "layer_norm",
            shape: sx.clone(),
            reason: "rank 0".into(),
        })?;
        for (name, idx) in [("gain", gain), ("bias", bias)] {
            let s = self.nodes[idx].value.shape();
            if s != [d] {
                return Err(ShapeError::Mismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: sx,
                    rhs: s.to_vec(),
                }
                .into());
            }
        }
        let data = kernels::layer_norm(
            self.nodes[x].value.data(),
            d,
            self.nodes[gain].value.data(),
            self.nodes[bias].value.data(),
            eps,
        );
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(sx, data).unwrap(),
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    /// Concatenates rank-2 tensors along `axis` (0 or 1).
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Unsupported("concat of zero tensors".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_, _>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if first.len() != 2 || axis > 1 {
            return Err(ShapeError::Axis {
                op: "concat",
                axis,
                shape: first,
            }
            .into());
        }
        let keep = 1 - axis;
        let mut cat_dim = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != 2 || s[keep] != first[keep] {
                return Err(ShapeError::Mismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                }
                .into());
            }
            cat_dim += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = cat_dim;
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut row0 = 0;
            for &i in &idxs {
                let part = &self.nodes[i].value;
                let pr = part.shape()[0];
                data[row0 * cols..(row0 + pr) * cols].copy_from_slice(part.data());
                row0 += pr;
            }
        } else {
            let mut col0 = 0;
            for &i in &idxs {
                let part = &self.nodes[i].value;
                let pc = part.shape()[1];
                for r in 0..rows {
                    data[r * cols + col0..r * cols + col0 + pc]
                        .copy_from_slice(&part.data()[r * pc..(r + 1) * pc]);
                }
                col0 += pc;
            }
        }
        let needs = idxs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Concat { parts: idxs, axis },
            needs,
        ))
    }

    /// Contiguous slice of a rank-2 tensor along `axis`.
    pub fn slice(
        &mut self,
        a: VarId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(ShapeError::Axis {
                op: "slice",
                axis,
                shape: s,
            }
            .into());
        }
        if start + len > s[axis] || len == 0 {
            return Err(ShapeError::Invalid {
                op: "slice",
                shape: s,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            }
            .into());
        }
        let (rows, cols) = (s[0], s[1]);
        let data = if axis == 0 {
            self.nodes[a].value.data()[start * cols..(start + len) * cols].to_vec()
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&self.nodes[a].value.data()[r * cols + start..r * cols + start + len]);
            }
            out
        };
        let mut shape = s;
        shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Slice { a, axis, start },
            needs,
        ))
    }

    /// Rows scaled to unit L2 norm, with an epsilon guard in the denominator.
    pub fn row_normalize(&mut self, a: VarId, eps: f64) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 {
            return Err(ShapeError::Invalid {
                op: "row_normalize",
                shape: s,
                reason: "expected rank 2".into(),
            }
            .into());
        }
        let eps_sq = eps * eps;
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a].value.data()[r * cols..(r + 1) * cols];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps_sq).sqrt();
            for (dst, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *dst = v / norm;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(s, data).unwrap(),
            Op::RowNormalize { a, eps_sq },
            needs,
        ))
    }

    /// Strict upper-triangle entries (i < j) of a square matrix, row-major.
    pub fn upper_triangle(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
            return Err(ShapeError::Invalid {
                op: "upper_triangle",
                shape: s,
                reason: "expected square matrix of size >= 2".into(),
            }
            .into());
        }
        let n = s[0];
        let mut data = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                data.push(self.nodes[a].value.data()[i * n + j]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![n * (n - 1) / 2], data).unwrap(),
            Op::UpperTriangle { a },
            needs,
        ))
    }

    /// [c, s, s] image to [tokens, c·p·p] patch matrix.
    pub fn patchify(&mut self, a: VarId, patch: usize) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 3 || s[1] != s[2] || patch == 0 || s[1] % patch != 0 {
            return Err(ShapeError::Invalid {
                op: "patchify",
                shape: s,
                reason: format!("expected [c, s, s] with s divisible by patch {patch}"),
            }
            .into());
        }
        let (c, size) = (s[0], s[1]);
        let grid = size / patch;
        let data = kernels::patchify(self.nodes[a].value.data(), c, size, patch);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![grid * grid, c * patch * patch], data).unwrap(),
            Op::Patchify { a, patch },
            needs,
        ))
    }

    /// Differential entropy of a Gaussian KDE over the centers, integrated on
    /// a fixed uniform grid. Bandwidth and grid are captured as constants:
    /// gradients flow only through the centers.
    pub fn entropy(
        &mut self,
        centers: VarId,
        h: f64,
        grid_min: f64,
        grid_step: f64,
        grid_len: usize,
    ) -> Result<VarId, TapeError> {
        let centers = self.check(centers)?;
        if h <= 0.0 {
            return Err(TapeError::Unsupported(format!("bandwidth must be positive, got {h}")));
        }
        let (value, density) = kernels::entropy_forward(
            self.nodes[centers].value.data(),
            h,
            grid_min,
            grid_step,
            grid_len,
        );
        let needs = self.needs(centers);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Entropy {
                centers,
                h,
                grid_min,
                grid_step,
                density,
            },
            needs,
        ))
    }

    /// Anisotropic total variation of a [c, h, w] image, normalized by pixel
    /// count.
    pub fn tv_loss(&mut self, a: VarId) -> Result<VarId, TapeError> {
        let a = self.check(a)?;
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(ShapeError::Invalid {
                op: "tv_loss",
                shape: s,
                reason: "expected [c, h, w] with h, w >= 2".into(),
            }
            .into());
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.nodes[a].value.data();
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
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::scalar(acc / (h * w) as f64),
            Op::TvLoss { a },
            needs,
        ))
    }

    /// Cross-entropy of softmax(logits) against a class index; logits is a
    /// [1, c] or [c] tensor.
    pub fn cross_entropy(&mut self, logits: VarId, class: usize) -> Result<VarId, TapeError> {
        let logits = self.check(logits)?;
        let classes = self.nodes[logits].value.numel();
        let s = self.nodes[logits].value.shape();
        if !(s.len() == 1 || (s.len() == 2 && s[0] == 1)) {
            return Err(ShapeError::Invalid {
                op: "cross_entropy",
                shape: s.to_vec(),
                reason: "expected a single logit row".into(),
            }
            .into());
        }
        if class >= classes {
            return Err(TapeError::ClassOutOfRange { class, classes });
        }
        let d = self.nodes[logits].value.data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(lse - d[class]),
            Op::CrossEntropy { logits, class },
            needs,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates dLoss/dNode into every node on the path to `loss` and
    /// attaches the result to each node's tensor. One backward per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<(), TapeError> {
        let loss = self.check(loss)?;
        if self.backward_done {
            return Err(TapeError::BackwardReplay);
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(TapeError::NonScalarLoss(
                self.nodes[loss].value.shape().to_vec(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|node| {
                if node.needs_grad {
                    Some(vec![0.0; node.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = grads[loss].as_mut() {
            g[0] = 1.0;
        }

        for i in (0..n).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (before, at) = grads.split_at_mut(i);
            let g = at[0].as_ref().unwrap();
            self.backprop_node(i, g, before);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let Some(grad) = grad {
                node.value.set_grad(grad);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], before: &mut [Option<Vec<f64>>]) {
        fn acc(dst: &mut Option<Vec<f64>>, src: impl Iterator<Item = f64>) {
            if let Some(d) = dst.as_mut() {
                for (slot, v) in d.iter_mut().zip(src) {
                    *slot += v;
                }
            }
        }

        let val = |idx: usize| self.nodes[idx].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[*b].value.shape()[1];
                if before[*a].is_some() {
                    // dA[i,p] = sum_j G[i,j] * B[p,j]
                    let bd = val(*b);
                    let da = before[*a].as_mut().unwrap();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += gr[j] * brow[j];
                            }
                            da[r * k + p] += dot;
                        }
                    }
                }
                if before[*b].is_some() {
                    // dB[p,j] = sum_i A[i,p] * G[i,j]
                    let ad = val(*a);
                    let db = before[*b].as_mut().unwrap();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            let dbp = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbp[j] += arp * gr[j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                acc(&mut before[*a], g.iter().cloned());
                acc(&mut before[*b], g.iter().cloned());
            }
            Op::Sub { a, b } => {
                acc(&mut before[*a], g.iter().cloned());
                acc(&mut before[*b], g.iter().map(|v| -v));
            }
            Op::Mul { a, b } => {
                acc(&mut before[*a], g.iter().zip(val(*b)).map(|(g, b)| g * b));
                acc(&mut before[*b], g.iter().zip(val(*a)).map(|(g, a)| g * a));
            }
            Op::Scale { a, c } => {
                acc(&mut before[*a], g.iter().map(|v| v * c));
            }
            Op::AddRowVec { a, v } => {
                acc(&mut before[*a], g.iter().cloned());
                if let Some(dv) = before[*v].as_mut() {
                    let cols = dv.len();
                    for (idx, gv) in g.iter().enumerate() {
                        dv[idx % cols] += gv;
                    }
                }
            }
            Op::Transpose { a } => {
                if let Some(da) = before[*a].as_mut() {
                    let s = self.nodes[*a].value.shape();
                    let (rows, cols) = (s[0], s[1]);
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                acc(&mut before[*a], g.iter().cloned());
            }
            Op::SumAll { a } => {
                let gv = g[0];
                acc(&mut before[*a], std::iter::repeat(gv));
            }
            Op::MeanAll { a } => {
                let gv = g[0] / self.nodes[*a].value.numel() as f64;
                acc(&mut before[*a], std::iter::repeat(gv));
            }
            Op::MeanRows { a } => {
                if let Some(da) = before[*a].as_mut() {
                    let s = self.nodes[*a].value.shape();
                    let (rows, cols) = (s[0], s[1]);
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                }
            }
            Op::Abs { a } => {
                let ad = val(*a);
                acc(
                    &mut before[*a],
                    g.iter().zip(ad).map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Sqrt { a } => {
                let out = val(i);
                acc(&mut before[*a], g.iter().zip(out).map(|(g, &s)| g / (2.0 * s)));
            }
            Op::Exp { a } => {
                let out = val(i);
                acc(&mut before[*a], g.iter().zip(out).map(|(g, &e)| g * e));
            }
            Op::Log { a } => {
                let ad = val(*a);
                acc(&mut before[*a], g.iter().zip(ad).map(|(g, &x)| g / x));
            }
            Op::Gelu { a } => {
                let ad = val(*a);
                acc(
                    &mut before[*a],
                    g.iter().zip(ad).map(|(g, &x)| g * kernels::gelu_deriv(x)),
                );
            }
            Op::Softmax { a, axis } => {
                if let Some(da) = before[*a].as_mut() {
                    let out = val(i);
                    let shape = self.nodes[i].value.shape();
                    let axis_len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * axis_len * inner + ii;
                            let mut dot = 0.0;
                            for a_idx in 0..axis_len {
                                let f = base + a_idx * inner;
                                dot += g[f] * out[f];
                            }
                            for a_idx in 0..axis_len {
                                let f = base + a_idx * inner;
                                da[f] += out[f] * (g[f] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xd = val(*x);
                let gaind = val(*gain);
                let d = self.nodes[*gain].value.numel();
                let rows = xd.len() / d;
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    if let Some(dg) = before[*gain].as_mut() {
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(db) = before[*bias].as_mut() {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    if let Some(dx) = before[*x].as_mut() {
                        let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gaind[j]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let cols = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p].value.shape();
                    let (pr, pc) = (ps[0], ps[1]);
                    if let Some(dp) = before[p].as_mut() {
                        if *axis == 0 {
                            for (slot, gv) in dp
                                .iter_mut()
                                .zip(&g[offset * cols..(offset + pr) * cols])
                            {
                                *slot += gv;
                            }
                        } else {
                            for r in 0..pr {
                                for c in 0..pc {
                                    dp[r * pc + c] += g[r * cols + offset + c];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { a, axis, start } => {
                if let Some(da) = before[*a].as_mut() {
                    let sa = self.nodes[*a].value.shape();
                    let so = self.nodes[i].value.shape();
                    let cols = sa[1];
                    if *axis == 0 {
                        for (slot, gv) in da[start * cols..].iter_mut().zip(g) {
                            *slot += gv;
                        }
                    } else {
                        let (rows, len) = (so[0], so[1]);
                        for r in 0..rows {
                            for c in 0..len {
                                da[r * cols + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
            }
            Op::RowNormalize { a, eps_sq } => {
                if let Some(da) = before[*a].as_mut() {
                    let ad = val(*a);
                    let s = self.nodes[*a].value.shape();
                    let (rows, cols) = (s[0], s[1]);
                    for r in 0..rows {
                        let row = &ad[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let nsq = row.iter().map(|v| v * v).sum::<f64>() + eps_sq;
                        let norm = nsq.sqrt();
                        let dot: f64 = gr.iter().zip(row).map(|(g, u)| g * u).sum();
                        for j in 0..cols {
                            da[r * cols + j] += gr[j] / norm - row[j] * dot / (nsq * norm);
                        }
                    }
                }
            }
            Op::UpperTriangle { a } => {
                if let Some(da) = before[*a].as_mut() {
                    let n = self.nodes[*a].value.shape()[0];
                    let mut idx = 0;
                    for r in 0..n {
                        for c in r + 1..n {
                            da[r * n + c] += g[idx];
                            idx += 1;
                        }
                    }
                }
            }
            Op::Patchify { a, patch } => {
                if let Some(da) = before[*a].as_mut() {
                    let s = self.nodes[*a].value.shape();
                    kernels::unpatchify_acc(g, da, s[0], s[1], *patch);
                }
            }
            Op::Entropy {
                centers,
                h,
                grid_min,
                grid_step,
                density,
            } => {
                if let Some(dc) = before[*centers].as_mut() {
                    kernels::entropy_backward(
                        val(*centers),
                        *h,
                        *grid_min,
                        *grid_step,
                        density,
                        g[0],
                        dc,
                    );
                }
            }
            Op::TvLoss { a } => {
                if let Some(da) = before[*a].as_mut() {
                    let s = self.nodes[*a].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let d = val(*a);
                    let gv = g[0] / (h * w) as f64;
                    for ch in 0..c {
                        let base = ch * h * w;
                        for y in 0..h {
                            for x in 0..w - 1 {
                                let lo = base + y * w + x;
                                let s = (d[lo + 1] - d[lo]).signum_or_zero();
                                da[lo + 1] += gv * s;
                                da[lo] -= gv * s;
                            }
                        }
                        for y in 0..h - 1 {
                            for x in 0..w {
                                let lo = base + y * w + x;
                                let s = (d[lo + w] - d[lo]).signum_or_zero();
                                da[lo + w] += gv * s;
                                da[lo] -= gv * s;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, class } => {
                if let Some(dl) = before[*logits].as_mut() {
                    let d = val(*logits);
                    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = d.iter().map(|&x| (x - max).exp()).sum();
                    for (j, slot) in dl.iter_mut().enumerate() {
                        let p = (d[j] - max).exp() / sum;
                        let t = if j == *class { 1.0 } else { 0.0 };
                        *slot += g[0] * (p - t);
                    }
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
