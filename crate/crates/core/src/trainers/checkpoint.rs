use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMFCCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Offset into the payload, in floats.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    iteration: usize,
    adam: AdamConfig,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Layout: magic, little-endian `u64` manifest length, JSON manifest, then
/// little-endian `f32` payloads of every tensor listed in the manifest.
pub fn write_checkpoint(state: &TrainState, mut w: impl Write) -> Result<()> {
    let ps = &state.model.params;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, role: Role, t: &Tensor<f32>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for id in ps.ids() {
        push(ps.name(id), Role::Param, ps.get(id));
    }
    for (&id, (m, v)) in &state.opt.moments {
        push(ps.name(id), Role::AdamM, m);
        push(ps.name(id), Role::AdamV, v);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: state.cfg.clone(),
        iteration: state.iteration,
        adam: state.opt.config,
        adam_step: state.opt.step,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&payload)?;
    Ok(())
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<TrainState> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile("not a checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::CorruptFile("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.version != FORMAT_VERSION {
        return Err(incompatible(format!("format version {}", manifest.version)));
    }
    let payload = &bytes[16 + len..];
    let floats = payload.len() / 4;
    if payload.len() % 4 != 0 {
        return Err(Error::CorruptFile("payload is not a whole number of floats".into()));
    }
    let mut model = Model::<f32>::new(&manifest.config)?;
    let mut moments: BTreeMap<_, (Option<Tensor<f32>>, Option<Tensor<f32>>)> = BTreeMap::new();
    let mut seen = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > floats {
            return Err(Error::CorruptFile(format!("{}: payload out of range", e.name)));
        }
        let data = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data);
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| incompatible(format!("unknown tensor {}", e.name)))?;
        if model.params.get(id).shape() != t.shape() {
            return Err(incompatible(format!(
                "{}: shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        match e.role {
            Role::Param => {
                *model.params.get_mut(id) = t;
                seen += 1;
            }
            Role::AdamM => moments.entry(id).or_default().0 = Some(t),
            Role::AdamV => moments.entry(id).or_default().1 = Some(t),
        }
    }
    if seen != model.params.len() {
        return Err(incompatible(format!(
            "{seen} of {} parameters present",
            model.params.len()
        )));
    }
    let mut opt = Adam::new(manifest.adam);
    opt.step = manifest.adam_step;
    for (id, (m, v)) in moments {
        match (m, v) {
            (Some(m), Some(v)) => {
                opt.moments.insert(id, (m, v));
            }
            _ => return Err(incompatible(format!("{}: incomplete optimizer state", model.params.name(id)))),
        }
    }
    Ok(TrainState {
        cfg: manifest.config,
        model,
        opt,
        iteration: manifest.iteration,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(state, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_checkpoint(fs::File::open(path)?)
}
