//! Checkpoint container: a JSON header (config, tokenizer spec, step,
//! recipe fingerprint, tensor manifest) followed by raw little-endian f32
//! tensor data in the canonical parameter order, and optionally the AdamW
//! moment estimates in the same order.
//!
//! ```text
//! magic "WREPCKPT" | u32 version | u64 header_len | header JSON | f32 data
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerSpec;

const MAGIC: &[u8; 8] = b"WREPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub tokenizer: TokenizerSpec,
    pub step: u64,
    /// Identifies the training recipe (config hash + stage) that produced
    /// this checkpoint.
    pub recipe_fingerprint: String,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    opt_state: Option<OptInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptInfo {
    step: u64,
    tensors: Vec<TensorInfo>,
}

/// AdamW moment estimates, aligned with the canonical parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &Params<f32>) -> Self {
        let zeros: Vec<ArrayD<f32>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn write_tensor(w: &mut impl Write, data: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(r: &mut impl Read, len: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf).map_err(|_| {
        Error::CorruptCheckpoint(format!("{}: truncated tensor data", path.display()))
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    tokenizer: &TokenizerSpec,
    step: u64,
    recipe_fingerprint: &str,
    opt: Option<&AdamState>,
) -> Result<()> {
    let tensors: Vec<TensorInfo> = model
        .params
        .named_tensors()
        .iter()
        .map(|(n, t)| TensorInfo {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let meta = CheckpointMeta {
        config: model.cfg.clone(),
        tokenizer: tokenizer.clone(),
        step,
        recipe_fingerprint: recipe_fingerprint.to_string(),
        tensors: tensors.clone(),
        opt_state: opt.map(|o| OptInfo {
            step: o.step,
            tensors: tensors
                .iter()
                .flat_map(|t| {
                    ["m", "v"].into_iter().map(move |pfx| TensorInfo {
                        name: format!("{pfx}.{}", t.name),
                        shape: t.shape.clone(),
                    })
                })
                .collect(),
        }),
    };
    let header =
        serde_json::to_vec(&meta).map_err(|e| Error::Config(format!("checkpoint meta: {e}")))?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for (_, t) in model.params.named_tensors() {
        let owned;
        let slice = match t.as_slice() {
            Some(s) => s,
            None => {
                owned = t.to_owned();
                owned.as_slice().unwrap()
            }
        };
        write_tensor(&mut w, slice, path)?;
    }
    if let Some(o) = opt {
        for (m, v) in o.m.iter().zip(o.v.iter()) {
            write_tensor(&mut w, m.as_slice().unwrap(), path)?;
            write_tensor(&mut w, v.as_slice().unwrap(), path)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expect_tokenizer` is given, a spec mismatch is
/// an error: a model must decode with the vocabulary it was trained on.
pub fn load_checkpoint(
    path: &Path,
    expect_tokenizer: Option<&TokenizerSpec>,
) -> Result<(Model<f32>, CheckpointMeta, Option<AdamState>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |msg: &str| Error::CorruptCheckpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("too short"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| corrupt("missing version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| corrupt("missing header length"))?;
    let hlen = u64::from_le_bytes(u64buf) as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&header).map_err(|_| corrupt("unreadable header"))?;

    meta.config.validate()?;
    if let Some(expect) = expect_tokenizer {
        if *expect != meta.tokenizer {
            return Err(Error::CheckpointMismatch(
                "tokenizer spec differs from the one stored in the checkpoint".into(),
            ));
        }
    }

    let mut params = Params::<f32>::zeros(&meta.config);
    {
        let mut views = params.named_tensors_mut();
        if views.len() != meta.tensors.len() {
            return Err(corrupt("tensor manifest does not match config"));
        }
        for ((name, view), info) in views.iter_mut().zip(&meta.tensors) {
            if *name != info.name || view.shape() != info.shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {} has shape {:?}, checkpoint says {:?} for {}",
                    name,
                    view.shape(),
                    info.shape,
                    info.name
                )));
            }
            let data = read_tensor(&mut r, view.len(), path)?;
            view.as_slice_mut().unwrap().copy_from_slice(&data);
        }
    }

    let opt = match &meta.opt_state {
        None => None,
        Some(info) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for pair in info.tensors.chunks(2) {
                let shape = pair[0].shape.clone();
                let len: usize = shape.iter().product();
                let md = read_tensor(&mut r, len, path)?;
                let vd = read_tensor(&mut r, len, path)?;
                m.push(ArrayD::from_shape_vec(shape.clone(), md).map_err(|_| corrupt("bad shape"))?);
                v.push(ArrayD::from_shape_vec(shape, vd).map_err(|_| corrupt("bad shape"))?);
            }
            Some(AdamState { step: info.step, m, v })
        }
    };

    let model = Model::from_params(meta.config.clone(), params);
    Ok((model, meta, opt))
}
