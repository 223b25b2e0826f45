//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `UNITTABC`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then the payload
//! of little-endian `f64` values. Parameters are stored in name order,
//! followed by the optimizer moments in the same order. Offsets in the
//! manifest count `f64` values from the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unittab_core::model::{Model, ModelConfig, TaskKind};
use unittab_core::rng::{seeded, Rng, RngState};
use unittab_core::schema::Schema;
use unittab_core::training::{AdamW, Moments, TrainConfig};
use unittab_core::Tensor;

use crate::error::{Error, Result};
use crate::schema_io::schema_hash;

pub const MAGIC: &[u8; 8] = b"UNITTABC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentEntry {
    name: String,
    step: u64,
    /// First moments; the second follow immediately after.
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_hash: String,
    model: ModelConfig,
    task: Option<TaskKind>,
    target_scale: (f64, f64),
    step: u64,
    train: Option<TrainConfig>,
    rng: Option<RngState>,
    optimizer: Option<OptimizerEntry>,
    tensors: Vec<TensorEntry>,
    /// Total number of `f64` values in the payload.
    payload: u64,
}

/// Borrowed training state to be written.
#[derive(Clone, Copy)]
pub struct Snapshot<'a> {
    pub model: &'a Model,
    pub optimizer: Option<&'a AdamW>,
    pub rng: Option<&'a Rng>,
    pub step: u64,
    pub train: Option<&'a TrainConfig>,
}

impl<'a> Snapshot<'a> {
    /// A model without training state.
    pub fn model(model: &'a Model) -> Self {
        Snapshot {
            model,
            optimizer: None,
            rng: None,
            step: 0,
            train: None,
        }
    }
}

/// Restored training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub rng: Option<Rng>,
    pub step: u64,
    pub train: Option<TrainConfig>,
}

pub fn encode_checkpoint(schema: &Schema, snap: &Snapshot<'_>) -> Result<Vec<u8>> {
    let model = snap.model;
    let ids = model.store.sorted_ids();
    let mut payload: Vec<f64> = Vec::with_capacity(model.store.numel());
    let mut tensors = Vec::with_capacity(ids.len());
    for &id in &ids {
        let t = model.store.get(id);
        tensors.push(TensorEntry {
            name: model.store.entry(id).name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(t.data());
    }
    let optimizer = snap.optimizer.map(|opt| {
        let mut moments = Vec::new();
        for &id in &ids {
            let Some(m) = opt.moments.get(id.index()).filter(|m| !m.m.is_empty()) else {
                continue;
            };
            moments.push(MomentEntry {
                name: model.store.entry(id).name.clone(),
                step: m.step,
                offset: payload.len() as u64,
                len: m.m.len() as u64,
            });
            payload.extend_from_slice(&m.m);
            payload.extend_from_slice(&m.v);
        }
        OptimizerEntry {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            moments,
        }
    });
    let manifest = Manifest {
        schema_hash: schema_hash(schema)?,
        model: model.config.clone(),
        task: model.task(),
        target_scale: model.target_scale,
        step: snap.step,
        train: snap.train.cloned(),
        rng: snap.rng.map(RngState::capture),
        optimizer,
        tensors,
        payload: payload.len() as u64,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'b>(bytes: &mut &'b [u8], n: usize, what: &str) -> Result<&'b [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(format!(
            "{what} needs {n} bytes, {} left",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn slice(payload: &[f64], offset: u64, len: usize, name: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    payload
        .get(start..start + len)
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::Format(format!("`{name}` lies outside the payload")))
}

/// Decodes a checkpoint written for `schema`.
pub fn decode_checkpoint(mut bytes: &[u8], schema: &Schema) -> Result<Checkpoint> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().expect("8 bytes"));
    let json = take(
        &mut bytes,
        usize::try_from(len).map_err(|_| Error::Truncated("manifest length".into()))?,
        "manifest",
    )?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    let expected = schema_hash(schema)?;
    if manifest.schema_hash != expected {
        return Err(Error::SchemaMismatch {
            expected,
            found: manifest.schema_hash,
        });
    }
    let n = manifest.payload as usize;
    let raw = take(&mut bytes, n * 8, "payload")?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the payload",
            bytes.len()
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut init = seeded(0);
    let mut model = Model::new(manifest.model.clone(), schema, &mut init)?;
    if let Some(task) = manifest.task {
        model.attach_task_head(task, &mut init)?;
    }
    model.target_scale = manifest.target_scale;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for t in &manifest.tensors {
        let id = model
            .store
            .id(&t.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{}`", t.name)))?;
        let numel = t.shape.iter().product();
        let value = Tensor::new(t.shape.clone(), slice(&payload, t.offset, numel, &t.name)?)?;
        model.store.set(id, value)?;
    }
    let optimizer = match manifest.optimizer {
        Some(o) => {
            let mut moments = vec![Moments::default(); model.store.len()];
            for e in &o.moments {
                let id = model
                    .store
                    .id(&e.name)
                    .ok_or_else(|| Error::Format(format!("moments of unknown tensor `{}`", e.name)))?;
                let len = e.len as usize;
                if len != model.store.get(id).numel() {
                    return Err(Error::Format(format!("moments of `{}` have the wrong length", e.name)));
                }
                moments[id.index()] = Moments {
                    step: e.step,
                    m: slice(&payload, e.offset, len, &e.name)?,
                    v: slice(&payload, e.offset + e.len, len, &e.name)?,
                };
            }
            Some(AdamW {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                moments,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        rng: manifest.rng.map(|s| s.restore()),
        step: manifest.step,
        train: manifest.train,
    })
}

/// Writes through a temporary file and a rename, so an interrupted save
/// leaves any previous checkpoint at `path` intact.
pub fn save_checkpoint(path: &Path, schema: &Schema, snap: &Snapshot<'_>) -> Result<()> {
    let bytes = encode_checkpoint(schema, snap)?;
    let tmp = path.with_extension("partial");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, schema: &Schema) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, schema)
}
