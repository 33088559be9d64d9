//! Binary tensor container and model checkpoints.
//!
//! Layout (little-endian throughout):
//!   magic "DFQV" | u32 version=1 | u32 tensor count |
//!   per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] |
//!   f64 row-major payload
//!
//! Model checkpoints store the architecture as an extra tensor named
//! `meta.config` holding `[image_size, patch_size, hidden_dim, num_layers,
//! num_heads, mlp_ratio, num_classes, use_cls_token]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelError, ViTConfig, ViTModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DFQV";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("bad magic: expected {MAGIC:?}, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (this build reads version {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("tensor {name}: stored shape {found:?} disagrees with expected {expected:?}")]
    ShapeDisagreement {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint contains unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("invalid field in {context}: {reason}")]
    Corrupt { context: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes named tensors in the given order; byte-deterministic.
pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<(), CkptError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<(), CkptError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CkptError::Truncated {
                context: context.to_string(),
            }
        } else {
            CkptError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, context: &str) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, context: &str) -> Result<u64, CkptError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads all tensors, preserving file order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, CkptError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CkptError::BadMagic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CkptError::VersionMismatch { found: version });
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let ctx = format!("tensor {i} header");
        let name_len = read_u32(&mut r, &ctx)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &ctx)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CkptError::Corrupt {
            context: ctx.clone(),
            reason: "name is not UTF-8".into(),
        })?;
        let rank = read_u32(&mut r, &ctx)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, &ctx)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > (1 << 32) {
            return Err(CkptError::Corrupt {
                context: format!("tensor {name}"),
                reason: format!("implausible shape {shape:?}"),
            });
        }
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut r, &mut buf, &format!("tensor {name} payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CkptError::Corrupt {
            context: format!("tensor {name}"),
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Model checkpoint: config meta tensor first, weights after in canonical
/// order.
pub fn save_checkpoint(model: &ViTModel, path: &Path) -> Result<(), CkptError> {
    let c = &model.config;
    let meta = Tensor::new(
        vec![8],
        vec![
            c.image_size as f64,
            c.patch_size as f64,
            c.hidden_dim as f64,
            c.num_layers as f64,
            c.num_heads as f64,
            c.mlp_ratio as f64,
            c.num_classes as f64,
            f64::from(u8::from(c.use_cls_token)),
        ],
    )
    .expect("meta shape");
    let mut tensors: Vec<(String, &Tensor)> = vec![(CONFIG_TENSOR.to_string(), &meta)];
    tensors.extend(model.named_tensors());
    write_tensors(path, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<ViTModel, CkptError> {
    let tensors = read_tensors(path)?;
    let meta = tensors
        .iter()
        .find(|(n, _)| n == CONFIG_TENSOR)
        .ok_or_else(|| CkptError::MissingTensor(CONFIG_TENSOR.into()))?;
    let m = meta.1.data();
    if m.len() != 8 {
        return Err(CkptError::Corrupt {
            context: CONFIG_TENSOR.into(),
            reason: format!("expected 8 fields, found {}", m.len()),
        });
    }
    let as_dim = |v: f64, field: &str| -> Result<usize, CkptError> {
        if v.fract() != 0.0 || v < 0.0 || v > 1e9 {
            return Err(CkptError::Corrupt {
                context: CONFIG_TENSOR.into(),
                reason: format!("{field} = {v} is not a dimension"),
            });
        }
        Ok(v as usize)
    };
    let config = ViTConfig {
        image_size: as_dim(m[0], "image_size")?,
        patch_size: as_dim(m[1], "patch_size")?,
        hidden_dim: as_dim(m[2], "hidden_dim")?,
        num_layers: as_dim(m[3], "num_layers")?,
        num_heads: as_dim(m[4], "num_heads")?,
        mlp_ratio: as_dim(m[5], "mlp_ratio")?,
        num_classes: as_dim(m[6], "num_classes")?,
        use_cls_token: m[7] != 0.0,
    };
    config.validate()?;

    let mut model = ViTModel::zeros(config);
    let mut loaded: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    loaded.remove(CONFIG_TENSOR);
    for (name, slot) in model.named_tensors_mut() {
        let stored = loaded
            .remove(&name)
            .ok_or_else(|| CkptError::MissingTensor(name.clone()))?;
        if stored.shape() != slot.shape() {
            return Err(CkptError::ShapeDisagreement {
                name,
                expected: slot.shape().to_vec(),
                found: stored.shape().to_vec(),
            });
        }
        slot.data_mut().copy_from_slice(stored.data());
    }
    if let Some((name, _)) = loaded.into_iter().next() {
        return Err(CkptError::UnexpectedTensor(name));
    }
    Ok(model)
}
