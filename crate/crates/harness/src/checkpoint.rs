//! Checkpoints: a versioned header (magic, format version, config hash), the
//! canonical config text, and named little-endian f32 parameter blobs.
//! `load(save(x))` reproduces every value bit for bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use modnet_core::ee::ExecutionEngine;
use modnet_core::il::{snapshot_values, SnPolicy};
use modnet_core::pg::ProgramGenerator;
use modnet_tensor::{ParameterStore, Tensor};
use thiserror::Error;

use crate::config::{fnv1a64, RunConfig};

pub const MAGIC: [u8; 4] = *b"MNCK";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub config_text: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("config hash mismatch: header {header:#018x}, computed {computed:#018x}")]
    HashMismatch { header: u64, computed: u64 },
    #[error("embedded config: {0}")]
    BadConfig(#[from] crate::config::ConfigError),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("parameter {name}: {detail}")]
    BadParam { name: String, detail: String },
}

/// Serializes the run config plus the two parameter sets. `pg`/`ee` are the
/// raw store values; names keep their `pg.` / `ee.` prefixes so one flat
/// namespace holds both models.
pub fn save(
    path: &Path,
    config: &RunConfig,
    params: &[(String, Tensor<f32>)],
) -> Result<(), CkptError> {
    let text = config.echo();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&fnv1a64(text.as_bytes()).to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.at + n > self.buf.len() {
            return Err(CkptError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkptError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::BadVersion(version));
    }
    let header = r.u64()?;
    let text_len = r.u32()? as usize;
    let text = String::from_utf8(r.take(text_len)?.to_vec())
        .map_err(|_| CkptError::Truncated)?;
    let computed = fnv1a64(text.as_bytes());
    if computed != header {
        return Err(CkptError::HashMismatch { header, computed });
    }
    let config = RunConfig::parse(&text)?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CkptError::Truncated)?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.at != buf.len() {
        return Err(CkptError::BadParam {
            name: "<tail>".into(),
            detail: format!("{} trailing bytes", buf.len() - r.at),
        });
    }
    Ok(Checkpoint { config, config_text: text, params })
}

fn fill_store(
    store: &mut ParameterStore<f32>,
    prefix: &str,
    params: &[(String, Tensor<f32>)],
) -> Result<(), CkptError> {
    let mut expected: usize = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        expected += 1;
        let (_, t) = params.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            CkptError::BadParam { name: name.clone(), detail: "missing from checkpoint".into() }
        })?;
        if t.shape() != store.value(id).shape() {
            return Err(CkptError::BadParam {
                name,
                detail: format!(
                    "shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.value(id).shape()
                ),
            });
        }
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    let present = params.iter().filter(|(n, _)| n.starts_with(prefix)).count();
    if present != expected {
        return Err(CkptError::BadParam {
            name: format!("{prefix}*"),
            detail: format!("checkpoint has {present} entries, model has {expected}"),
        });
    }
    Ok(())
}

impl Checkpoint {
    /// Rebuilds the model pair the checkpoint describes. Under the full-run
    /// normalization policy the decoder weights are stored raw, so the
    /// spectral estimate is re-converged before any decoding.
    pub fn into_models(&self) -> Result<(ProgramGenerator<f32>, ExecutionEngine<f32>), CkptError> {
        let tc = self.config.to_trainer();
        let mut pg = ProgramGenerator::<f32>::new(tc.pg, 0);
        let mut ee = ExecutionEngine::<f32>::new(tc.ee, 0);
        fill_store(&mut pg.store, "pg.", &self.params)?;
        fill_store(&mut ee.store, "ee.", &self.params)?;
        if self.config.sn_policy == SnPolicy::FullSn {
            pg.sn_eval(30);
        }
        Ok((pg, ee))
    }
}

/// The flat parameter list for `save`: both stores, `pg.*` then `ee.*`.
pub fn model_params(
    pg: &ProgramGenerator<f32>,
    ee: &ExecutionEngine<f32>,
) -> Vec<(String, Tensor<f32>)> {
    let mut params = snapshot_values(&pg.store);
    params.extend(snapshot_values(&ee.store));
    params
}
