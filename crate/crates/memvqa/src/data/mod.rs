//! Dataset handling: answer normalization, the answer vocabulary, the
//! agreement-based accuracy metric, question file parsing, and the
//! synthetic heavy-tailed task generator.

mod synth;

pub use synth::{generate_synth_task, ClassFreq, SynthManifest, SynthTaskConfig};

use crate::encoders::{FeatureGrid, Vocabulary};
use crate::numeric::Scalar;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Canonical answer form: lowercase, trimmed, inner whitespace collapsed,
/// trailing ASCII punctuation stripped.
pub fn normalize_answer(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let stripped = lower
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation());
    stripped
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Most frequent normalized answer; ties resolve to the lexicographically
/// smallest. Answers that normalize to the empty string are ignored; returns
/// None when nothing remains.
pub fn plurality_answer(human_answers: &[String]) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in human_answers {
        let n = normalize_answer(a);
        if !n.is_empty() {
            *counts.entry(n).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(answer, _)| answer)
}

/// Agreement accuracy for one prediction: the number of human answers that
/// match the normalized prediction, divided by 3 and capped at 1.
pub fn vqa_accuracy(predicted: &str, human_answers: &[String]) -> f64 {
    let p = normalize_answer(predicted);
    if p.is_empty() {
        return 0.0;
    }
    let matches = human_answers
        .iter()
        .filter(|a| normalize_answer(a) == p)
        .count();
    (matches as f64 / 3.0).min(1.0)
}

/// Top answers by frequency over training examples, in descending count
/// order with alphabetical tie-breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    counts: Vec<u64>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    answer: String,
    count: u64,
}

impl AnswerVocab {
    /// Builds from explicit (answer, count) pairs in their given order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("answer vocabulary cannot be empty"));
        }
        let mut index = BTreeMap::new();
        let mut answers = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (answer, count) in entries {
            if index.insert(answer.clone(), answers.len()).is_some() {
                return Err(Error::invalid(format!("duplicate answer {answer}")));
            }
            answers.push(answer);
            counts.push(count);
        }
        Ok(AnswerVocab {
            answers,
            counts,
            index,
        })
    }

    pub fn index_of(&self, normalized: &str) -> Option<usize> {
        self.index.get(normalized).copied()
    }

    pub fn answer(&self, index: usize) -> &str {
        &self.answers[index]
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.answers
            .iter()
            .map(String::as_str)
            .zip(self.counts.iter().copied())
    }

    pub fn to_json(&self) -> Result<String> {
        let entries: Vec<VocabEntry> = self
            .entries()
            .map(|(answer, count)| VocabEntry {
                answer: answer.to_string(),
                count,
            })
            .collect();
        serde_json::to_string_pretty(&entries)
            .map_err(|e| Error::json("encoding answer vocabulary", e))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_str(json)
            .map_err(|e| Error::json("decoding answer vocabulary", e))?;
        Self::from_entries(entries.into_iter().map(|e| (e.answer, e.count)).collect())
    }
}

/// Builds the top-k answer vocabulary from per-example human answer lists.
/// Each example contributes its plurality answer once. Returns the
/// vocabulary and the coverage: the fraction of labeled examples whose
/// plurality answer made the cut.
pub fn build_vocab(corpus: &[Vec<String>], k: usize) -> Result<(AnswerVocab, f64)> {
    if k == 0 {
        return Err(Error::invalid("vocabulary size must be at least 1"));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut labeled: u64 = 0;
    for answers in corpus {
        if let Some(p) = plurality_answer(answers) {
            labeled += 1;
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::invalid("no labeled examples to build a vocabulary"));
    }
    let mut ordered: Vec<(String, u64)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ordered.truncate(k);
    let covered: u64 = ordered.iter().map(|(_, c)| c).sum();
    let vocab = AnswerVocab::from_entries(ordered)?;
    Ok((vocab, covered as f64 / labeled as f64))
}

/// One line of a questions file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuestionRecord {
    pub question_id: u64,
    pub image_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiple_choices: Option<Vec<String>>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
}

/// A question resolved against both vocabularies and ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub question_id: u64,
    pub image_id: String,
    /// Word vocabulary indices; never empty.
    pub tokens: Vec<usize>,
    pub human_answers: Vec<String>,
    /// Normalized plurality answer, when any human answer survives
    /// normalization.
    pub plurality: Option<String>,
    /// Answer vocabulary index of the plurality answer; None makes the
    /// example unlabeled (skipped in training, still evaluated).
    pub label: Option<usize>,
    pub multiple_choices: Option<Vec<String>>,
    pub question_type: Option<String>,
}

/// Reads a JSONL questions file. Blank lines are allowed; any other
/// unparseable line is an error carrying its 1-based line number. Duplicate
/// question ids are rejected.
pub fn read_question_lines(path: &Path) -> Result<Vec<QuestionRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if let Some(first) = seen.insert(record.question_id, i + 1) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "duplicate question_id {} (first seen on line {first})",
                    record.question_id
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Resolves raw question records against the vocabularies.
pub fn to_examples(
    records: &[QuestionRecord],
    words: &Vocabulary,
    answers: &AnswerVocab,
) -> Vec<ExampleRecord> {
    records
        .iter()
        .map(|r| {
            let plurality = plurality_answer(&r.answers);
            let label = plurality.as_deref().and_then(|p| answers.index_of(p));
            ExampleRecord {
                question_id: r.question_id,
                image_id: r.image_id.clone(),
                tokens: words.encode(&r.question),
                human_answers: r.answers.clone(),
                plurality,
                label,
                multiple_choices: r.multiple_choices.clone(),
                question_type: r.question_type.clone(),
            }
        })
        .collect()
}

/// Path of the feature grid file for an image id.
pub fn feature_path(features_dir: &Path, image_id: &str) -> std::path::PathBuf {
    features_dir.join(format!("{image_id}.fgrid"))
}

/// Parses a questions file and verifies that every referenced feature grid
/// exists, without loading the grids.
pub fn parse_dataset(
    questions_path: &Path,
    features_dir: &Path,
    words: &Vocabulary,
    answers: &AnswerVocab,
) -> Result<Vec<ExampleRecord>> {
    let records = read_question_lines(questions_path)?;
    for r in &records {
        if !feature_path(features_dir, &r.image_id).is_file() {
            return Err(Error::MissingFeatures {
                image_id: r.image_id.clone(),
            });
        }
    }
    Ok(to_examples(&records, words, answers))
}

/// Questions file of a named split inside a task directory.
pub fn questions_path(task_dir: &Path, split: &str) -> std::path::PathBuf {
    task_dir.join(split).join("questions.jsonl")
}

/// Feature directory shared by every split of a task directory.
pub fn features_dir(task_dir: &Path) -> std::path::PathBuf {
    task_dir.join("features")
}

/// Builds both vocabularies from training records: words from the question
/// texts, answers from the top-k plurality answers. Returns the answer
/// coverage alongside.
pub fn build_vocabularies(
    records: &[QuestionRecord],
    vocab_k: usize,
) -> Result<(Vocabulary, AnswerVocab, f64)> {
    let tokens: Vec<String> = records
        .iter()
        .flat_map(|r| crate::encoders::tokenize(&r.question))
        .collect();
    let words = Vocabulary::build(tokens.iter().map(String::as_str));
    let answer_lists: Vec<Vec<String>> = records.iter().map(|r| r.answers.clone()).collect();
    let (answers, coverage) = build_vocab(&answer_lists, vocab_k)?;
    Ok((words, answers, coverage))
}

/// A task directory loaded end to end: vocabularies built from the train
/// split and both splits resolved against them.
#[derive(Debug, Clone)]
pub struct TaskData<T: Scalar> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub words: Vocabulary,
    pub answers: AnswerVocab,
    pub coverage: f64,
}

/// Loads a `generate_synth_task`-layout directory (train/, test/,
/// features/) and builds vocabularies from the train split.
pub fn load_task_dir<T: Scalar>(task_dir: &Path, vocab_k: usize) -> Result<TaskData<T>> {
    let records = read_question_lines(&questions_path(task_dir, "train"))?;
    let (words, answers, coverage) = build_vocabularies(&records, vocab_k)?;
    let features = features_dir(task_dir);
    let train = Dataset::load(&questions_path(task_dir, "train"), &features, &words, &answers)?;
    let test = Dataset::load(&questions_path(task_dir, "test"), &features, &words, &answers)?;
    Ok(TaskData {
        train,
        test,
        words,
        answers,
        coverage,
    })
}

/// Examples plus their feature grids, loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub examples: Vec<ExampleRecord>,
    pub features: BTreeMap<String, FeatureGrid<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Loads a questions file and every feature grid it references from
    /// `features_dir`.
    pub fn load(
        questions_path: &Path,
        features_dir: &Path,
        words: &Vocabulary,
        answers: &AnswerVocab,
    ) -> Result<Self> {
        let examples = parse_dataset(questions_path, features_dir, words, answers)?;
        let mut features = BTreeMap::new();
        for e in &examples {
            if !features.contains_key(&e.image_id) {
                let grid = FeatureGrid::load(&feature_path(features_dir, &e.image_id))?;
                features.insert(e.image_id.clone(), grid);
            }
        }
        Ok(Dataset { examples, features })
    }

    pub fn grid(&self, image_id: &str) -> Result<&FeatureGrid<T>> {
        self.features.get(image_id).ok_or_else(|| Error::MissingFeatures {
            image_id: image_id.to_string(),
        })
    }

    /// Width shared by every feature grid; an error if grids disagree.
    pub fn feature_dim(&self) -> Result<usize> {
        let mut dim = None;
        for (id, g) in &self.features {
            match dim {
                None => dim = Some(g.d()),
                Some(d) if d != g.d() => {
                    return Err(Error::invalid(format!(
                        "feature width mismatch: {id} has {} but earlier grids have {d}",
                        g.d()
                    )))
                }
                _ => {}
            }
        }
        dim.ok_or_else(|| Error::invalid("dataset has no feature grids"))
    }

    pub fn labeled_count(&self) -> usize {
        self.examples.iter().filter(|e| e.label.is_some()).count()
    }
}
