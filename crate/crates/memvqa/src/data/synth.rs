//! Synthetic task with a heavy-tailed answer distribution.
//!
//! Each class owns a unit signature vector. An example samples a class from
//! a Zipf distribution, hides the signature (plus noise) in a quarter of
//! its regions, and asks a templated question whose words are only weakly
//! informative: templates rotate by class modulo the template count, so the
//! image features, not the words, identify the class. Every example lists
//! ten identical human answers so agreement accuracy is exact, and four
//! multiple choice candidates.

use super::QuestionRecord;
use crate::encoders::FeatureGrid;
use crate::numeric::{Gaussian, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const TEMPLATE_COUNT: usize = 5;
const TEMPLATE_WORDS: usize = 4;
const SIGNAL_DIVISOR: usize = 4;
const ANSWERS_PER_QUESTION: usize = 10;
const CHOICES_PER_QUESTION: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskConfig {
    /// Number of answer classes.
    pub classes: usize,
    /// Zipf exponent; larger means heavier concentration on head classes.
    pub zipf_exponent: f64,
    /// Distinct pseudo-words available to questions.
    pub word_vocab: usize,
    /// Regions per image.
    pub regions: usize,
    /// Feature width per region.
    pub feature_dim: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Standard deviation of the Gaussian noise on every feature entry.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            classes: 50,
            zipf_exponent: 1.2,
            word_vocab: 50,
            regions: 16,
            feature_dim: 64,
            train_examples: 5000,
            test_examples: 1000,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("word_vocab", self.word_vocab),
            ("regions", self.regions),
            ("feature_dim", self.feature_dim),
            ("train_examples", self.train_examples),
            ("test_examples", self.test_examples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::invalid("zipf_exponent must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if self.classes < CHOICES_PER_QUESTION {
            return Err(Error::invalid(format!(
                "need at least {CHOICES_PER_QUESTION} classes for multiple choice"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassFreq {
    pub id: usize,
    pub answer: String,
    /// Occurrences in the training split.
    pub count: u64,
}

/// Ground truth about a generated task, written next to the data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthManifest {
    pub class_freqs: Vec<ClassFreq>,
    /// The bottom quartile of classes by training frequency (count
    /// ascending, id ascending on ties).
    pub rare_class_ids: Vec<usize>,
    pub seed: u64,
    pub config: SynthTaskConfig,
}

impl SynthManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("decoding {}", path.display()), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("encoding manifest", e))?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn answer_of(&self, class_id: usize) -> Option<&str> {
        self.class_freqs
            .iter()
            .find(|c| c.id == class_id)
            .map(|c| c.answer.as_str())
    }
}

/// Distinct pronounceable pseudo-words in a deterministic order.
fn pseudo_words(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    const SYLLABLES: [&str; 20] = [
        "ba", "ke", "di", "fo", "gu", "ha", "ji", "ko", "lu", "me", "na", "po", "qui", "ra",
        "su", "ta", "ve", "wo", "xi", "zu",
    ];
    let mut seen = std::collections::BTreeSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Cumulative Zipf probabilities over ranks 1..=classes.
fn zipf_cumulative(classes: usize, exponent: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=classes)
        .map(|r| (r as f64).powf(-exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

/// Inverse-CDF sample: the first class whose cumulative probability covers
/// the draw.
fn sample_class(cumulative: &[f64], draw: f64) -> usize {
    match cumulative.binary_search_by(|c| c.partial_cmp(&draw).unwrap()) {
        Ok(i) => i,
        Err(i) => i.min(cumulative.len() - 1),
    }
}

struct TaskDefinition {
    class_answers: Vec<String>,
    signatures: Vec<Vec<f64>>,
    templates: Vec<Vec<String>>,
    fillers: Vec<String>,
    cumulative: Vec<f64>,
}

fn build_definition(config: &SynthTaskConfig, rng: &mut ChaCha8Rng) -> TaskDefinition {
    // One contiguous word list keeps answer words and question words
    // globally distinct.
    let all = pseudo_words(rng, config.classes + config.word_vocab);
    let class_answers = all[..config.classes].to_vec();
    let pool = &all[config.classes..];

    let mut gauss = Gaussian::new();
    let signatures: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..config.feature_dim).map(|_| gauss.next(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect();

    let templates: Vec<Vec<String>> = (0..TEMPLATE_COUNT)
        .map(|t| {
            (0..TEMPLATE_WORDS)
                .map(|j| pool[(t * TEMPLATE_WORDS + j) % pool.len()].clone())
                .collect()
        })
        .collect();

    TaskDefinition {
        class_answers,
        signatures,
        templates,
        fillers: pool.to_vec(),
        cumulative: zipf_cumulative(config.classes, config.zipf_exponent),
    }
}

/// Writes one split; returns per-class counts.
fn generate_split(
    def: &TaskDefinition,
    config: &SynthTaskConfig,
    rng: &mut ChaCha8Rng,
    split: &str,
    count: usize,
    features_dir: &Path,
    questions_path: &Path,
) -> Result<Vec<u64>> {
    let mut gauss = Gaussian::new();
    let mut counts = vec![0u64; config.classes];
    let signal_count = (config.regions / SIGNAL_DIVISOR).max(1);
    let mut questions = std::io::BufWriter::new(
        std::fs::File::create(questions_path)
            .map_err(|e| Error::io(format!("creating {}", questions_path.display()), e))?,
    );

    for i in 0..count {
        let class = sample_class(&def.cumulative, rng.gen::<f64>());
        counts[class] += 1;
        let image_id = format!("{split}-{i:06}");

        // Choose which regions carry the signature.
        let mut positions: Vec<usize> = (0..config.regions).collect();
        positions.shuffle(rng);
        positions.truncate(signal_count);
        positions.sort_unstable();

        let mut data = vec![0.0f64; config.regions * config.feature_dim];
        for r in 0..config.regions {
            let signal = positions.binary_search(&r).is_ok();
            for c in 0..config.feature_dim {
                let base = if signal { def.signatures[class][c] } else { 0.0 };
                data[r * config.feature_dim + c] = base + config.noise_std * gauss.next(rng);
            }
        }
        let grid = FeatureGrid::new(
            image_id.clone(),
            Tensor::new(vec![config.regions, config.feature_dim], data)?,
        )?;
        grid.save(&super::feature_path(features_dir, &image_id))?;

        let template = &def.templates[class % TEMPLATE_COUNT];
        let filler = &def.fillers[rng.gen_range(0..def.fillers.len())];
        let question = format!("{} {filler}?", template.join(" "));

        let answer = &def.class_answers[class];
        let mut choices = vec![answer.clone()];
        while choices.len() < CHOICES_PER_QUESTION {
            let other = rng.gen_range(0..config.classes);
            let candidate = &def.class_answers[other];
            if !choices.contains(candidate) {
                choices.push(candidate.clone());
            }
        }
        choices.shuffle(rng);

        let record = QuestionRecord {
            question_id: (split_offset(split) + i) as u64,
            image_id,
            question,
            answers: vec![answer.clone(); ANSWERS_PER_QUESTION],
            multiple_choices: Some(choices),
            question_type: Some(format!("template{}", class % TEMPLATE_COUNT)),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::json("encoding question record", e))?;
        writeln!(questions, "{line}")
            .map_err(|e| Error::io(format!("writing {}", questions_path.display()), e))?;
    }
    questions
        .flush()
        .map_err(|e| Error::io(format!("writing {}", questions_path.display()), e))?;
    Ok(counts)
}

/// Question id ranges never collide across splits.
fn split_offset(split: &str) -> usize {
    match split {
        "train" => 0,
        _ => 10_000_000,
    }
}

/// Generates the full task under `out_dir`:
///
/// ```text
/// out_dir/
///   manifest.json
///   features/<image_id>.fgrid
///   train/questions.jsonl
///   test/questions.jsonl
/// ```
///
/// Output is a pure function of the config; rerunning with the same config
/// yields byte-identical files.
pub fn generate_synth_task(config: &SynthTaskConfig, out_dir: &Path) -> Result<SynthManifest> {
    config.validate()?;
    let features_dir = out_dir.join("features");
    let train_dir = out_dir.join("train");
    let test_dir = out_dir.join("test");
    for d in [out_dir, &features_dir, &train_dir, &test_dir] {
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let def = build_definition(config, &mut rng);

    // Independent streams per split so changing one count cannot reshuffle
    // the other split.
    let train_seed = rng.gen::<u64>();
    let test_seed = rng.gen::<u64>();

    let train_counts = generate_split(
        &def,
        config,
        &mut ChaCha8Rng::seed_from_u64(train_seed),
        "train",
        config.train_examples,
        &features_dir,
        &train_dir.join("questions.jsonl"),
    )?;
    generate_split(
        &def,
        config,
        &mut ChaCha8Rng::seed_from_u64(test_seed),
        "test",
        config.test_examples,
        &features_dir,
        &test_dir.join("questions.jsonl"),
    )?;

    let class_freqs: Vec<ClassFreq> = (0..config.classes)
        .map(|id| ClassFreq {
            id,
            answer: def.class_answers[id].clone(),
            count: train_counts[id],
        })
        .collect();

    let mut by_rarity: Vec<usize> = (0..config.classes).collect();
    by_rarity.sort_by_key(|&id| (train_counts[id], id));
    let rare_count = config.classes.div_ceil(SIGNAL_DIVISOR);
    let mut rare_class_ids: Vec<usize> = by_rarity[..rare_count].to_vec();
    rare_class_ids.sort_unstable();

    let manifest = SynthManifest {
        class_freqs,
        rare_class_ids,
        seed: config.seed,
        config: config.clone(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
