use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use fsar_tensor::Scalar;

use super::model::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCK";
const CHECKPOINT_VERSION: u32 = 1;

// Layout: magic, u32 version, 32-byte config hash, u32 config length, config
// JSON, u32 parameter count; per parameter: u16 name length, name, u32 rank,
// u32 dims, f64 values. All little-endian.

pub fn write_checkpoint<S: Scalar, W: Write>(mut w: W, model: &Model<S>) -> Result<()> {
    let io = |e| Error::Format(format!("checkpoint: {e}"));
    let json = serde_json::to_string(&model.config).expect("config serializes");
    w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_all(&model.config.hash()).map_err(io)?;
    w.write_u32::<LittleEndian>(json.len() as u32).map_err(io)?;
    w.write_all(json.as_bytes()).map_err(io)?;
    w.write_u32::<LittleEndian>(model.params.len() as u32).map_err(io)?;
    for (name, t) in model.params.iter() {
        w.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for v in t.data() {
            w.write_f64::<LittleEndian>(v.as_f64()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Model<S>> {
    let io = |e| Error::Format(format!("checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(io)?;
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let text = String::from_utf8(json).map_err(|_| Error::Format("checkpoint: config is not UTF-8".into()))?;
    let config = ModelConfig::from_json(&text)?;
    if config.hash() != hash {
        return Err(Error::Integrity("checkpoint: config hash does not match the stored config".into()));
    }
    let mut model = Model::<S>::new(config)?;
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if count != model.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {count} parameters, the config defines {}",
            model.params.len()
        )));
    }
    for index in 0..count {
        let n = r.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint parameter {name} is not part of the model")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Integrity(format!(
                "checkpoint parameter {name} has shape {shape:?}, model expects {:?}",
                model.params.get(id).shape()
            )));
        }
        let mut values = vec![0f64; shape.iter().product()];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(io)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data { index, message: format!("parameter {name} holds non-finite values") });
        }
        let data: Vec<S> = values.into_iter().map(S::lit).collect();
        model.params.set(id, &data)?;
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), model)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
