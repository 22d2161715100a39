//! Checkpoint directory format: a manifest describing every tensor, one
//! raw little-endian file per tensor, both vocabularies, and the metrics
//! history. Writing is deterministic, so identical training runs leave
//! byte-identical directories.

use super::{AdamOptimizer, MetricsRecord, TrainConfig};
use crate::data::AnswerVocab;
use crate::encoders::Vocabulary;
use crate::model::{ModelConfig, ModelParams, StreamState};
use crate::numeric::{Scalar, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const FORMAT_TAG: &str = "memvqa-checkpoint";
const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const WORD_VOCAB_FILE: &str = "word_vocab.json";
const ANSWER_VOCAB_FILE: &str = "answer_vocab.json";
const METRICS_FILE: &str = "metrics.jsonl";
const TENSOR_DIR: &str = "tensors";

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<T>,
    pub optimizer: AdamOptimizer<T>,
    /// Memory and controller state at the end of training; evaluation
    /// starts every example from this snapshot.
    pub stream: StreamState<T>,
    pub word_vocab: Vocabulary,
    pub answer_vocab: AnswerVocab,
    /// Fraction of labeled training examples the answer vocabulary covers.
    pub answer_coverage: f64,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    dtype: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epochs_completed: usize,
    global_step: u64,
    adam_step: u64,
    answer_coverage: f64,
    tensors: Vec<TensorEntry>,
}

fn tensor_file(name: &str) -> String {
    format!("{TENSOR_DIR}/{name}.bin")
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(dir: &Path, rel: &str) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

impl<T: Scalar> Checkpoint<T> {
    /// Collects every persisted tensor with its canonical name, in the
    /// manifest order.
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        self.params.visit(&mut |name, t| out.push((name, t)));
        let (m, v) = self.optimizer.moments();
        for (name, t) in m {
            out.push((format!("adam.m.{name}"), t));
        }
        for (name, t) in v {
            out.push((format!("adam.v.{name}"), t));
        }
        out.push(("state.memory".to_string(), &self.stream.memory.memory));
        out.push(("state.usage".to_string(), &self.stream.memory.usage));
        out.push(("state.read".to_string(), &self.stream.memory.read));
        out.push(("state.write".to_string(), &self.stream.memory.write));
        out.push(("state.h".to_string(), &self.stream.controller.h));
        out.push(("state.c".to_string(), &self.stream.controller.c));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(TENSOR_DIR))
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let tensors = self.tensors();
        let entries: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file: tensor_file(name),
            })
            .collect();
        let manifest = CheckpointManifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epochs_completed: self.epochs_completed,
            global_step: self.global_step,
            adam_step: self.optimizer.step_count(),
            answer_coverage: self.answer_coverage,
            tensors: entries,
        };
        let manifest_json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("encoding checkpoint manifest", e))?;
        write_file(dir, MANIFEST_FILE, format!("{manifest_json}\n").as_bytes())?;

        let words_json = serde_json::to_string_pretty(self.word_vocab.tokens())
            .map_err(|e| Error::json("encoding word vocabulary", e))?;
        write_file(dir, WORD_VOCAB_FILE, format!("{words_json}\n").as_bytes())?;
        write_file(
            dir,
            ANSWER_VOCAB_FILE,
            format!("{}\n", self.answer_vocab.to_json()?).as_bytes(),
        )?;

        let mut metrics = String::new();
        for record in &self.metrics {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::json("encoding metrics record", e))?;
            metrics.push_str(&line);
            metrics.push('\n');
        }
        write_file(dir, METRICS_FILE, metrics.as_bytes())?;

        for (name, t) in tensors {
            write_file(dir, &tensor_file(&name), &t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_bytes = read_file(dir, MANIFEST_FILE)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::json(format!("decoding {}", dir.join(MANIFEST_FILE).display()), e))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        if manifest.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but was opened as {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        manifest.model_config.validate()?;
        manifest.train_config.validate()?;

        let mut loaded: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for entry in &manifest.tensors {
            if loaded.contains_key(&entry.name) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} listed twice",
                    entry.name
                )));
            }
            let bytes = read_file(dir, &entry.file)?;
            let tensor = Tensor::from_le_bytes(entry.shape.clone(), &bytes).map_err(|e| {
                Error::Checkpoint(format!("tensor {}: {e}", entry.name))
            })?;
            if !tensor.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} holds non-finite values",
                    entry.name
                )));
            }
            loaded.insert(entry.name.clone(), tensor);
        }

        // Fill parameters by name; every expected tensor must be present
        // with the right shape, and nothing may be left over.
        let mut params = ModelParams::init(&manifest.model_config, 0)?;
        let mut problem: Option<String> = None;
        params.visit_mut(&mut |name, slot| match loaded.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem.get_or_insert(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }

        let mut take = |name: &str| {
            loaded
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let stream = StreamState {
            memory: crate::mann::MemoryState {
                memory: take("state.memory")?,
                usage: take("state.usage")?,
                read: take("state.read")?,
                write: take("state.write")?,
            },
            controller: crate::mann::ControllerState {
                h: take("state.h")?,
                c: take("state.c")?,
            },
        };
        stream.memory.validate().map_err(|e| {
            Error::Checkpoint(format!("memory state does not hold together: {e}"))
        })?;
        let expected = StreamState::<T>::init(&manifest.model_config);
        if stream.memory.memory.shape() != expected.memory.memory.shape()
            || stream.controller.h.shape() != expected.controller.h.shape()
        {
            return Err(Error::Checkpoint(
                "memory state shape does not match the model config".to_string(),
            ));
        }

        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        let names: Vec<String> = loaded.keys().cloned().collect();
        for name in names {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                adam_m.insert(rest.to_string(), loaded.remove(&name).unwrap());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                adam_v.insert(rest.to_string(), loaded.remove(&name).unwrap());
            }
        }
        if let Some(stray) = loaded.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {stray}")));
        }
        let optimizer = AdamOptimizer::from_state(adam_m, adam_v, manifest.adam_step)?;

        let words: Vec<String> = serde_json::from_slice(&read_file(dir, WORD_VOCAB_FILE)?)
            .map_err(|e| Error::json("decoding word vocabulary", e))?;
        let word_vocab = Vocabulary::from_tokens(words)?;
        let answer_json = String::from_utf8(read_file(dir, ANSWER_VOCAB_FILE)?)
            .map_err(|e| Error::Checkpoint(format!("answer vocabulary is not UTF-8: {e}")))?;
        let answer_vocab = AnswerVocab::from_json(&answer_json)?;
        if answer_vocab.len() != manifest.model_config.answer_count {
            return Err(Error::Checkpoint(format!(
                "answer vocabulary holds {} entries but the model expects {}",
                answer_vocab.len(),
                manifest.model_config.answer_count
            )));
        }
        if word_vocab.len() != manifest.model_config.word_vocab_size {
            return Err(Error::Checkpoint(format!(
                "word vocabulary holds {} entries but the model expects {}",
                word_vocab.len(),
                manifest.model_config.word_vocab_size
            )));
        }

        let metrics_text = String::from_utf8(read_file(dir, METRICS_FILE)?)
            .map_err(|e| Error::Checkpoint(format!("metrics log is not UTF-8: {e}")))?;
        let mut metrics = Vec::new();
        for (i, line) in metrics_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: dir.join(METRICS_FILE),
                line: i + 1,
                message: e.to_string(),
            })?;
            metrics.push(record);
        }

        Ok(Checkpoint {
            model_config: manifest.model_config,
            train_config: manifest.train_config,
            params,
            optimizer,
            stream,
            word_vocab,
            answer_vocab,
            answer_coverage: manifest.answer_coverage,
            epochs_completed: manifest.epochs_completed,
            global_step: manifest.global_step,
            metrics,
        })
    }
}
