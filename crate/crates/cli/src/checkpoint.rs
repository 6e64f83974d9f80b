//! Checkpoints: a versioned JSON document with every array spelled out, and a
//! binary sidecar holding the same floats as raw little-endian bits.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use varkernel::autodiff::ParamStore;
use varkernel::optim::{AdamConfig, AdamState};
use varkernel::{Seeds, Tensor, Trainer};

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;
const SIDECAR_MAGIC: &[u8; 8] = b"VKCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moments: Vec<NamedArray>,
    pub second_moments: Vec<NamedArray>,
}

/// Where the task and noise streams resume. Every draw is addressed by
/// `(seed, iteration, episode)`, so the seeds plus the next iteration are the
/// complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seeds: Seeds,
    pub next_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub file: String,
    pub sha256: String,
    pub values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub params: Vec<NamedArray>,
    pub optimizer: OptimizerState,
    /// LSTM state carried into the next iteration. The state is reset at every
    /// meta-batch, so at a checkpoint boundary this is always empty.
    pub lstm_state: Vec<NamedArray>,
    pub rng: RngState,
    pub sidecar: Option<Sidecar>,
}

fn named(names: &[String], tensors: &[Tensor]) -> Vec<NamedArray> {
    names
        .iter()
        .zip(tensors)
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn tensor_of(a: &NamedArray) -> anyhow::Result<Tensor> {
    Tensor::new(a.shape.clone(), a.data.clone()).with_context(|| format!("array {}", a.name))
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, trainer: &Trainer) -> Self {
        let names = trainer.params.names();
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            params: named(names, trainer.params.tensors()),
            optimizer: OptimizerState {
                config: trainer.adam.config,
                step: trainer.adam.step,
                first_moments: named(names, &trainer.adam.first_moments),
                second_moments: named(names, &trainer.adam.second_moments),
            },
            lstm_state: Vec::new(),
            rng: RngState {
                seeds: trainer.config.seeds,
                next_iteration: trainer.iteration,
            },
            sidecar: None,
        }
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = &mut NamedArray> {
        self.params
            .iter_mut()
            .chain(self.optimizer.first_moments.iter_mut())
            .chain(self.optimizer.second_moments.iter_mut())
    }

    fn sidecar_bytes(&mut self) -> Vec<u8> {
        let values: Vec<f64> = self.arrays_mut().flat_map(|a| a.data.clone()).collect();
        let mut bytes = Vec::with_capacity(16 + 8 * values.len());
        bytes.extend_from_slice(SIDECAR_MAGIC);
        bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes
    }

    /// Writes `path` (JSON) and `path.with_extension("bin")`.
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut doc = self.clone();
        let bytes = doc.sidecar_bytes();
        let bin = path.with_extension("bin");
        doc.sidecar = Some(Sidecar {
            file: bin
                .file_name()
                .context("checkpoint path has no file name")?
                .to_string_lossy()
                .into_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            values: (bytes.len() - 16) / 8,
        });
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&bin, &bytes).with_context(|| format!("writing {}", bin.display()))?;
        let json = serde_json::to_string_pretty(&doc)?;
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Reads a checkpoint, taking array values from the sidecar when present.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let raw: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let version = raw.get("format_version").and_then(Value::as_u64);
        if version != Some(FORMAT_VERSION as u64) {
            bail!(
                "checkpoint format version mismatch: file has {}, this build reads {FORMAT_VERSION}",
                version.map_or("none".to_string(), |v| v.to_string())
            );
        }
        let mut doc: Checkpoint = serde_json::from_value(raw).with_context(|| format!("decoding {}", path.display()))?;
        if let Some(side) = doc.sidecar.clone() {
            let bin = sidecar_path(path, &side);
            let bytes = fs::read(&bin).with_context(|| format!("reading sidecar {}", bin.display()))?;
            ensure!(
                hex::encode(Sha256::digest(&bytes)) == side.sha256,
                "sidecar {} does not match the checksum recorded in {}",
                bin.display(),
                path.display()
            );
            ensure!(bytes.len() >= 16 && &bytes[..8] == SIDECAR_MAGIC, "sidecar {} has a bad header", bin.display());
            let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
            ensure!(
                count == side.values && bytes.len() == 16 + 8 * count,
                "sidecar {} holds {} bytes for {count} values",
                bin.display(),
                bytes.len()
            );
            let mut values = bytes[16..]
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))));
            let expected: usize = doc.arrays_mut().map(|a| a.data.len()).sum();
            ensure!(
                expected == count,
                "sidecar has {count} values but the JSON arrays hold {expected}"
            );
            for array in doc.arrays_mut() {
                for v in array.data.iter_mut() {
                    *v = values.next().expect("count checked");
                }
            }
        }
        Ok(doc)
    }

    /// Rebuilds a trainer, refusing any mismatch in names or shapes against
    /// what the stored config would create.
    pub fn restore(&self) -> anyhow::Result<Trainer> {
        let fresh = Trainer::new(self.config.train_config(), self.config.generator())?;
        let diff = layout_diff(&fresh.params, &self.params);
        if !diff.is_empty() {
            bail!("checkpoint parameters do not match the configured model:\n  {}", diff.join("\n  "));
        }
        for moments in [&self.optimizer.first_moments, &self.optimizer.second_moments] {
            let diff = layout_diff(&fresh.params, moments);
            if !diff.is_empty() {
                bail!("checkpoint optimizer moments do not match the model:\n  {}", diff.join("\n  "));
            }
        }
        let mut params = ParamStore::new();
        for a in &self.params {
            params.add(a.name.clone(), tensor_of(a)?);
        }
        let adam = AdamState {
            config: self.optimizer.config,
            step: self.optimizer.step,
            first_moments: self.optimizer.first_moments.iter().map(tensor_of).collect::<anyhow::Result<_>>()?,
            second_moments: self.optimizer.second_moments.iter().map(tensor_of).collect::<anyhow::Result<_>>()?,
        };
        Ok(Trainer::resume(
            self.config.train_config(),
            self.config.generator(),
            params,
            adam,
            self.rng.next_iteration,
        )?)
    }

    /// Errors with a field-by-field diff unless `config` hashes the same as
    /// the config stored in the checkpoint.
    pub fn check_config(&self, config: &RunConfig) -> anyhow::Result<()> {
        if config.hash() == self.config_hash {
            return Ok(());
        }
        let mut diff = Vec::new();
        let saved = serde_json::to_value(&self.config)?;
        let given = serde_json::to_value(config)?;
        for section in ["task", "train", "seeds"] {
            json_diff(section, &saved[section], &given[section], &mut diff);
        }
        diff.retain(|line| !line.starts_with("train.iterations:"));
        if diff.is_empty() {
            diff.push(format!("stored hash {} does not match {}", self.config_hash, config.hash()));
        }
        bail!("config does not match checkpoint:\n  {}", diff.join("\n  "))
    }
}

fn sidecar_path(json: &Path, side: &Sidecar) -> PathBuf {
    json.parent().map_or_else(|| PathBuf::from(&side.file), |d| d.join(&side.file))
}

fn layout_diff(expected: &ParamStore, found: &[NamedArray]) -> Vec<String> {
    let mut diff = Vec::new();
    for (name, t) in expected.names().iter().zip(expected.tensors()) {
        match found.iter().find(|a| &a.name == name) {
            None => diff.push(format!("{name}: missing from checkpoint (expected shape {:?})", t.shape())),
            Some(a) if a.shape != t.shape() => {
                diff.push(format!("{name}: checkpoint shape {:?}, model shape {:?}", a.shape, t.shape()))
            }
            Some(_) => {}
        }
    }
    for a in found {
        if expected.find(&a.name).is_none() {
            diff.push(format!("{}: not part of the configured model", a.name));
        }
    }
    if diff.is_empty() && expected.names().iter().zip(found).any(|(n, a)| n != &a.name) {
        diff.push("parameters are stored in a different order".into());
    }
    diff
}

fn json_diff(path: &str, saved: &Value, given: &Value, out: &mut Vec<String>) {
    match (saved, given) {
        (Value::Object(a), Value::Object(b)) => {
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                json_diff(
                    &format!("{path}.{k}"),
                    a.get(k).unwrap_or(&Value::Null),
                    b.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        (a, b) if a != b => out.push(format!("{path}: checkpoint {a}, config {b}")),
        _ => {}
    }
}
