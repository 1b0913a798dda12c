//! Binary checkpoint: magic, a JSON header, then every parameter with its
//! Adam moments as little-endian `f32`.
//!
//! ```text
//! "HISGTCK1" | u64 header_len | header JSON | u64 n_params |
//!   per param: u32 name_len | name | u32 ndim | u64 dims.. | value | m | v
//! ```

use std::path::Path;

use hisgt_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::hashing::{sha256_hex, write_bytes};
use crate::model::{FrozenTables, HiSGTConfig, HiSGTModel};
use crate::tokenizer::Vocabulary;
use crate::trainer::TrainState;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HISGTCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: HiSGTConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub hier_hash: Option<String>,
    pub sem_hash: Option<String>,
    /// Optimizer step count.
    pub step: u64,
    pub train_state: TrainState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &HiSGTModel<f32>, train_state: TrainState) -> Self {
        Self {
            header: CheckpointHeader {
                config: model.config.clone(),
                config_hash: model.config.hash(),
                vocab_hash: model.vocab_hash.clone(),
                hier_hash: model.hier_hash.clone(),
                sem_hash: model.sem_hash.clone(),
                step: model.params.step(),
                train_state,
            },
            params: model.params.clone(),
        }
    }

    /// Rebuild the model, refusing a vocabulary or frozen table other than
    /// the ones it was trained with.
    pub fn into_model(self, vocab: &Vocabulary, tables: &FrozenTables) -> Result<HiSGTModel<f32>> {
        let h = &self.header;
        let mismatch = |what: &str, expected: &str, found: &str| Error::HashMismatch {
            what: what.into(),
            expected: expected.into(),
            found: found.into(),
        };
        if h.config.hash() != h.config_hash {
            return Err(mismatch("config", &h.config_hash, &h.config.hash()));
        }
        let vh = vocab.hash();
        if vh != h.vocab_hash {
            return Err(mismatch("vocabulary", &h.vocab_hash, &vh));
        }
        let check =
            |what: &str, used: bool, want: &Option<String>, have: &Option<(Vec<f64>, String)>| match (used, want, have)
            {
                (false, _, _) => Ok(()),
                (true, Some(w), Some((_, f))) if w == f => Ok(()),
                (true, w, f) => Err(mismatch(
                    what,
                    w.as_deref().unwrap_or("none"),
                    f.as_ref().map_or("none", |t| t.1.as_str()),
                )),
            };
        check("hierarchy table", h.config.use_hier, &h.hier_hash, &tables.hier)?;
        check("semantic table", h.config.use_sem, &h.sem_hash, &tables.sem)?;
        let mut params = self.params;
        params.set_step(self.header.step);
        HiSGTModel::with_params(self.header.config, vocab, tables, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 12 * self.params.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.value().shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [p.value(), &p.m, &p.v] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        let n = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let value = Tensor::new(shape.clone(), r.f32s(numel)?)?;
            params.insert(&name, value)?;
            let p = params.get_mut(&name)?;
            p.m = Tensor::new(shape.clone(), r.f32s(numel)?)?;
            p.v = Tensor::new(shape, r.f32s(numel)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        params.set_step(header.step);
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)?;
        let config = serde_json::to_string_pretty(&self.header.config)? + "\n";
        write_bytes(&path.with_extension("config.json"), config.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("bad shape".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
