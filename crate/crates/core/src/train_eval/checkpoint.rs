//! Binary checkpoints: magic, version, a JSON header, then every parameter
//! as little-endian `f64` in registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::IdMap;
use crate::error::{DsppError, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"DSPPCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    time_scale: f64,
    interval: f64,
    users: Vec<String>,
    items: Vec<String>,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        time_scale: model.time_scale,
        interval: model.interval,
        users: model.ids.users.clone(),
        items: model.ids.items.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DsppError::Checkpoint(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in model.store.iter() {
        for x in p.value.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DsppError::Checkpoint(format!("truncated {what}")),
        _ => DsppError::Io(e),
    })?;
    Ok(buf)
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    if &read_array::<8, _>(&mut input, "magic")? != MAGIC {
        return Err(DsppError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input, "version")?);
    if version != VERSION {
        return Err(DsppError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(read_array(&mut input, "header length")?);
    let len = usize::try_from(len).map_err(|_| DsppError::Checkpoint("header too large".into()))?;
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| DsppError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| DsppError::Checkpoint(format!("header: {e}")))?;
    let ids = IdMap {
        users: header.users,
        items: header.items,
    };
    let mut model = Model::new(&header.config, ids, header.time_scale, header.interval)
        .map_err(|e| DsppError::Checkpoint(format!("header describes no valid model: {e}")))?;
    if model.store.len() != header.params.len() {
        return Err(DsppError::Checkpoint(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(DsppError::Checkpoint(format!(
                "parameter {} {:?} does not match model's {} {:?}",
                entry.name,
                entry.shape,
                model.store.name(id),
                model.store.get(id).shape()
            )));
        }
        for x in model.store.get_mut(id).data_mut() {
            *x = f64::from_le_bytes(read_array(&mut input, "parameter data")?);
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(DsppError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint(BufReader::new(File::open(path)?))
}
