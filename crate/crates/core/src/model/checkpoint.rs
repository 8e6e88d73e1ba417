//! Model checkpoint format: magic, version, JSON header (config, vocabulary
//! spans, frame spec), then named weight arrays as little-endian floats with
//! shape prefixes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::binio::*;
use crate::codec::FrameSpec;
use crate::midi_tok::MidiVocab;

pub const MODEL_MAGIC: &[u8; 8] = b"MSMODEL\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: ModelConfig,
    vocab: MidiVocab,
    frame_spec: FrameSpec,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write_model(model, &mut w).map_err(io_err)
}

fn write_model<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_u32(w, MODEL_VERSION)?;
    let header = Header {
        cfg: model.cfg,
        vocab: model.vocab.clone(),
        frame_spec: model.frame_spec,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    write_str(w, &json)?;
    let mut count = 0u32;
    model.visit_params(&mut |_| count += 1);
    write_u32(w, count)?;
    let mut result = Ok(());
    model.visit_params(&mut |p| {
        if result.is_err() {
            return;
        }
        result = (|| -> std::io::Result<()> {
            write_str(w, &p.name)?;
            write_u64(w, p.w.nrows() as u64)?;
            write_u64(w, p.w.ncols() as u64)?;
            write_f64_slice(w, p.w.as_slice().expect("params are contiguous"))
        })();
    });
    result
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    read_model(&mut r)
}

fn read_model<R: Read>(r: &mut R) -> Result<Model, ModelError> {
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = read_u32(r).map_err(|_| bad("truncated version"))?;
    if version != MODEL_VERSION {
        return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let json = read_str(r).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_str(&json)
        .map_err(|e| ModelError::BadCheckpoint(format!("bad header json: {e}")))?;

    let mut arrays = std::collections::HashMap::new();
    let count = read_u32(r).map_err(|_| bad("truncated array count"))? as usize;
    if count > 1 << 16 {
        return Err(bad("implausible array count"));
    }
    for _ in 0..count {
        let name = read_str(r).map_err(|_| bad("truncated array name"))?;
        let rows = read_u64(r).map_err(|_| bad("truncated shape"))? as usize;
        let cols = read_u64(r).map_err(|_| bad("truncated shape"))? as usize;
        if rows.checked_mul(cols).is_none_or(|n| n > 1 << 28) {
            return Err(bad("implausible array shape"));
        }
        let data = read_f64_vec(r, rows * cols).map_err(|_| bad("truncated array data"))?;
        let arr = Array2::from_shape_vec((rows, cols), data).expect("shape matches length");
        if arrays.insert(name.clone(), arr).is_some() {
            return Err(ModelError::BadCheckpoint(format!("duplicate array {name}")));
        }
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|_| bad("io"))? != 0 {
        return Err(bad("trailing bytes"));
    }

    // rebuild the skeleton from the header, then install arrays by name with
    // exact shape agreement
    let mut model = Model::new(header.cfg, header.vocab, header.frame_spec, 0)?;
    let mut err: Option<ModelError> = None;
    let mut used = 0usize;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match arrays.get(&p.name) {
            Some(arr) if arr.raw_dim() == p.w.raw_dim() => {
                p.w.assign(arr);
                used += 1;
            }
            Some(arr) => {
                err = Some(ModelError::BadCheckpoint(format!(
                    "array {} has shape {:?}, model expects {:?}",
                    p.name,
                    arr.dim(),
                    p.w.dim()
                )));
            }
            None => {
                err = Some(ModelError::BadCheckpoint(format!("missing array {}", p.name)));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != arrays.len() {
        return Err(ModelError::BadCheckpoint(format!(
            "checkpoint has {} arrays, model consumed {used}",
            arrays.len()
        )));
    }
    Ok(model)
}
