//! On-disk archives: a directory holding `manifest.toml` and `tensors.bin`.
//!
//! The manifest carries the format version, an archive kind, a free-form
//! `meta` table (configs, counters) and one `[[tensor]]` entry per array with
//! its name, shape and element offset into `tensors.bin`. The blob is the
//! arrays back to back as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compressor::{ContextEmbedding, ContextTokenLookup};
use crate::error::{Error, Result};
use crate::frame::{FrameEncoder, Projector};
use crate::memory::{ContextMemory, MergeRecord};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParamSet;
use crate::pipeline::{FrameCompressor, Method};
use crate::tensor::Tensor;
use crate::tokenizer::QuestionHash;
use crate::transformer::{TransformerConfig, TransformerModel};

pub const FORMAT_VERSION: &str = "iqvic-ckpt-v1";
const MANIFEST: &str = "manifest.toml";
const BLOB: &str = "tensors.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    kind: String,
    #[serde(default)]
    meta: toml::Table,
    #[serde(default, rename = "tensor")]
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: toml::Table,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: toml::Table::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = toml::Value::try_from(value).map_err(|e| Error::format("archive meta", e))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::format("archive meta", format!("missing key {key:?}")))?;
        v.clone()
            .try_into()
            .map_err(|e| Error::format("archive meta", format!("{key}: {e}")))
    }

    pub fn insert_params(&mut self, prefix: &str, params: &dyn ParamSet) {
        params.visit_params(&mut |name, t| {
            self.tensors.insert(format!("{prefix}.{name}"), t.clone());
        });
    }

    /// Overwrites every parameter of `params` from `prefix.*`; all must be
    /// present with matching shapes.
    pub fn load_params(&self, prefix: &str, params: &mut dyn ParamSet) -> Result<()> {
        let mut err = None;
        params.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match self.tensors.get(&key) {
                None => err = Some(Error::format("archive", format!("missing tensor {key}"))),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Dimension {
                        op: "archive load",
                        left: src.shape().to_vec(),
                        right: t.shape().to_vec(),
                    })
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format("archive", format!("missing tensor {name}")))
    }

    /// Written to a sibling temp directory first, so an existing archive at
    /// `dir` survives a failed write.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION.to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e))?;
        write(&tmp.join(MANIFEST), text.as_bytes())?;
        write(&tmp.join(BLOB), &blob)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::format("manifest", format!("{}: {e}", mpath.display())))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                "manifest",
                format!("version {:?}, expected {FORMAT_VERSION:?}", manifest.version),
            ));
        }
        let bpath = dir.join(BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format("tensor blob", "length is not a multiple of 8"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::format("tensor blob", format!("{} runs past the end", e.name)))?;
            tensors.insert(e.name, Tensor::new(e.shape, data.to_vec())?);
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format("archive", format!("kind {:?}, expected {kind:?}", self.kind)));
        }
        Ok(self)
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from `model.*` tensors and the stored config.
pub fn model_from_archive(a: &Archive, prefix: &str) -> Result<TransformerModel> {
    let config: TransformerConfig = a.meta(prefix)?;
    let mut m = TransformerModel::new(config, 0)?;
    m.frozen_base = a.meta(&format!("{prefix}_frozen_base")).unwrap_or(false);
    a.load_params(prefix, &mut m)?;
    Ok(m)
}

/// Base model and the projector it was pretrained with.
pub fn save_base(dir: &Path, model: &TransformerModel, projector: &Projector) -> Result<()> {
    let mut a = Archive::new("base");
    a.set_meta("model", &model.config)?;
    a.set_meta("d_feature", &projector.d_feature())?;
    a.insert_params("model", model);
    a.insert_params("projector", projector);
    a.save(dir)
}

pub fn load_base(dir: &Path) -> Result<(TransformerModel, Projector)> {
    let a = Archive::load(dir)?.expect_kind("base")?;
    let model = model_from_archive(&a, "model")?;
    let mut projector = Projector::new(a.meta("d_feature")?, model.d_model(), 0);
    a.load_params("projector", &mut projector)?;
    Ok((model, projector))
}

/// Everything upstream of the memory: frozen encoder tables, projector, and
/// for IQViC the adapted compressor and its context-token lookup.
pub fn save_compressor_side(
    dir: &Path,
    encoder: &FrameEncoder,
    projector: &Projector,
    compressor: &FrameCompressor,
) -> Result<()> {
    let mut a = Archive::new("compressor-side");
    a.set_meta("method", &compressor.method())?;
    a.set_meta("context_tokens", &compressor.context_tokens())?;
    a.set_meta("d_feature", &projector.d_feature())?;
    a.set_meta("d_model", &projector.d_model())?;
    a.tensors.insert("encoder.enc_table".into(), encoder.enc_table.clone());
    a.tensors.insert("encoder.pos_table".into(), encoder.pos_table.clone());
    a.insert_params("projector", projector);
    if let FrameCompressor::Iqvic { model, lookup } = compressor {
        a.set_meta("compressor", &model.config)?;
        a.set_meta("compressor_frozen_base", &model.frozen_base)?;
        a.insert_params("compressor", model);
        a.insert_params("lookup", lookup);
    }
    a.save(dir)
}

pub fn load_compressor_side(dir: &Path) -> Result<(FrameEncoder, Projector, FrameCompressor)> {
    let a = Archive::load(dir)?.expect_kind("compressor-side")?;
    let encoder = FrameEncoder {
        enc_table: a.tensor("encoder.enc_table")?.clone(),
        pos_table: a.tensor("encoder.pos_table")?.clone(),
    };
    let mut projector = Projector::new(a.meta("d_feature")?, a.meta("d_model")?, 0);
    a.load_params("projector", &mut projector)?;
    let c: usize = a.meta("context_tokens")?;
    let compressor = match a.meta::<Method>("method")? {
        Method::Iqvic => {
            let model = model_from_archive(&a, "compressor")?;
            let mut lookup = ContextTokenLookup::new(c, model.d_model(), 0)?;
            a.load_params("lookup", &mut lookup)?;
            FrameCompressor::Iqvic { model, lookup }
        }
        Method::Avgpool => FrameCompressor::Avgpool { context_tokens: c },
        Method::Truncate => FrameCompressor::Truncate { context_tokens: c },
    };
    Ok((encoder, projector, compressor))
}

pub fn save_decoder_side(dir: &Path, decoder: &TransformerModel) -> Result<()> {
    let mut a = Archive::new("decoder-side");
    a.set_meta("decoder", &decoder.config)?;
    a.set_meta("decoder_frozen_base", &decoder.frozen_base)?;
    a.insert_params("decoder", decoder);
    a.save(dir)
}

pub fn load_decoder_side(dir: &Path) -> Result<TransformerModel> {
    let a = Archive::load(dir)?.expect_kind("decoder-side")?;
    model_from_archive(&a, "decoder")
}

pub fn save_optimizer(dir: &Path, state: &OptimizerState) -> Result<()> {
    let mut a = Archive::new("optimizer");
    a.set_meta("adamw", &state.config)?;
    a.set_meta("step", &state.step)?;
    for (k, t) in &state.m {
        a.tensors.insert(format!("m.{k}"), t.clone());
    }
    for (k, t) in &state.v {
        a.tensors.insert(format!("v.{k}"), t.clone());
    }
    a.save(dir)
}

pub fn load_optimizer(dir: &Path) -> Result<OptimizerState> {
    let a = Archive::load(dir)?.expect_kind("optimizer")?;
    let config: AdamWConfig = a.meta("adamw")?;
    let mut s = OptimizerState::new(config);
    s.step = a.meta("step")?;
    for (k, t) in &a.tensors {
        if let Some(name) = k.strip_prefix("m.") {
            s.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = k.strip_prefix("v.") {
            s.v.insert(name.to_string(), t.clone());
        }
    }
    Ok(s)
}

/// Debug dump of a memory: entries as `entry.{i:04}`, the rest in the manifest.
pub fn dump_memory(dir: &Path, memory: &ContextMemory) -> Result<()> {
    let mut a = Archive::new("memory");
    a.set_meta("capacity", &memory.capacity())?;
    a.set_meta("context_tokens", &memory.context_tokens().unwrap_or(0))?;
    let d = memory.entries().first().map_or(0, |e| e.tokens.last_dim());
    a.set_meta("d_model", &d)?;
    if let Some(h) = memory.question_hash() {
        a.set_meta("question_hash", &h.to_string())?;
    }
    a.set_meta("inserts", &memory.inserts())?;
    let sources: Vec<usize> = memory.entries().iter().map(|e| e.source_index).collect();
    a.set_meta("source_index", &sources)?;
    a.set_meta("merge_log", &memory.merge_log())?;
    for (i, e) in memory.entries().iter().enumerate() {
        a.tensors.insert(format!("entry.{i:04}"), e.tokens.clone());
    }
    a.save(dir)
}

pub fn load_memory(dir: &Path) -> Result<ContextMemory> {
    let a = Archive::load(dir)?.expect_kind("memory")?;
    let sources: Vec<usize> = a.meta("source_index")?;
    let merge_log: Vec<MergeRecord> = a.meta("merge_log")?;
    let hash = if sources.is_empty() {
        QuestionHash(0)
    } else {
        a.meta::<String>("question_hash")?.parse()?
    };
    let entries = sources
        .iter()
        .enumerate()
        .map(|(i, &source_index)| {
            Ok(ContextEmbedding {
                tokens: a.tensor(&format!("entry.{i:04}"))?.clone(),
                source_index,
                question_hash: hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ContextMemory::from_parts(a.meta("capacity")?, entries, merge_log, a.meta("inserts")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 10,
            max_positions: 12,
            lora_rank: 2,
            ..TransformerConfig::default()
        };
        let mut m = TransformerModel::new(cfg, 4).unwrap();
        m.frozen_base = true;
        m.layers[0].wq.data_mut()[3] = f64::MIN_POSITIVE;
        save_decoder_side(&dir.path().join("dec"), &m).unwrap();
        let back = load_decoder_side(&dir.path().join("dec")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn version_and_kind_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        Archive::new("optimizer").save(&p).unwrap();
        assert!(matches!(load_decoder_side(&p), Err(Error::Format { .. })));
        let text = fs::read_to_string(p.join(MANIFEST)).unwrap();
        fs::write(p.join(MANIFEST), text.replace(FORMAT_VERSION, "iqvic-ckpt-v0")).unwrap();
        assert!(matches!(Archive::load(&p), Err(Error::Format { .. })));
        assert!(matches!(Archive::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn memory_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ContextMemory::new(2).unwrap();
        for t in 0..5 {
            m.insert(ContextEmbedding {
                tokens: Tensor::new(vec![2, 2], vec![t as f64, 1.0, -0.5, (t * t) as f64]).unwrap(),
                source_index: t,
                question_hash: QuestionHash(0xabc),
            })
            .unwrap();
        }
        dump_memory(&dir.path().join("mem"), &m).unwrap();
        assert_eq!(load_memory(&dir.path().join("mem")).unwrap(), m);
    }
}
