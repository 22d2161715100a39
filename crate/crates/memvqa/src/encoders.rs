//! Question and image inputs: tokenization, the word vocabulary, region
//! feature grids on disk, and the bidirectional LSTM question encoder.

use crate::numeric::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, LoadErrorKind, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Token reserved for out-of-vocabulary words, always at index 0. The angle
/// brackets cannot appear in tokenizer output, so it never collides with a
/// real word.
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Lowercases, removes ASCII punctuation, and splits on whitespace. An all
/// punctuation or empty question produces no tokens; callers substitute the
/// unknown token in that case.
pub fn tokenize(question: &str) -> Vec<String> {
    let cleaned: String = question
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Question word vocabulary. Index 0 is the unknown token; remaining words
/// are ordered by descending count, ties broken alphabetically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a stream of tokens (typically every token of every
    /// training question).
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(ordered.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens).expect("constructed tokens are distinct")
    }

    /// Rebuilds from an explicit token list, validating that entries are
    /// distinct and that index 0 is the unknown token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::invalid(format!(
                "vocabulary must start with {UNKNOWN_TOKEN}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Index of a token, falling back to the unknown index 0.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Maps a question to token indices, substituting the unknown index for
    /// an empty token stream so every question has at least one step.
    pub fn encode(&self, question: &str) -> Vec<usize> {
        let toks = tokenize(question);
        if toks.is_empty() {
            return vec![0];
        }
        toks.iter().map(|t| self.index_of(t)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    image_id: String,
    n: usize,
    d: usize,
    dtype: String,
}

/// Region features for one image: `n` regions of width `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T: Scalar> {
    pub image_id: String,
    regions: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(image_id: impl Into<String>, regions: Tensor<T>) -> Result<Self> {
        if !regions.is_matrix() {
            return Err(Error::invalid(format!(
                "feature grid must be a matrix, got {:?}",
                regions.shape()
            )));
        }
        Ok(FeatureGrid {
            image_id: image_id.into(),
            regions,
        })
    }

    pub fn n(&self) -> usize {
        self.regions.rows()
    }

    pub fn d(&self) -> usize {
        self.regions.cols()
    }

    pub fn regions(&self) -> &Tensor<T> {
        &self.regions
    }

    /// Writes a single-line JSON header followed by the rows as f32
    /// little-endian, regardless of the in-memory scalar width.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GridHeader {
            image_id: self.image_id.clone(),
            n: self.n(),
            d: self.d(),
            dtype: "f32le".to_string(),
        };
        let mut bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::json(format!("encoding header for {}", path.display()), e))?;
        bytes.push(b'\n');
        let narrow: Tensor<f32> = self.regions.cast();
        bytes.extend_from_slice(&narrow.to_le_bytes());
        std::fs::write(path, bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads a grid written by `save`, reporting malformed headers,
    /// truncated or oversized payloads, and non-finite values distinctly.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let err = |kind| Error::Load {
            path: path.to_path_buf(),
            kind,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(LoadErrorKind::MalformedHeader))?;
        let header: GridHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|_| err(LoadErrorKind::MalformedHeader))?;
        if header.dtype != "f32le" || header.n == 0 || header.d == 0 {
            return Err(err(LoadErrorKind::MalformedHeader));
        }
        let payload = &bytes[newline + 1..];
        let expected = header.n * header.d * 4;
        if payload.len() < expected {
            return Err(err(LoadErrorKind::TruncatedPayload));
        }
        if payload.len() > expected {
            return Err(err(LoadErrorKind::TrailingData));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(err(LoadErrorKind::NonFinite));
        }
        let narrow = Tensor::from_raw(vec![header.n, header.d], data);
        Ok(FeatureGrid {
            image_id: header.image_id,
            regions: narrow.cast(),
        })
    }
}

/// Weights for one LSTM gate: input projection [in, h], recurrent
/// projection [h, h], and bias [h].
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T: Scalar> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

/// Weights for one LSTM cell in gate order input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<T: Scalar> {
    pub input: GateParams<T>,
    pub forget: GateParams<T>,
    pub output: GateParams<T>,
    pub candidate: GateParams<T>,
    input_size: usize,
    hidden_size: usize,
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl<T: Scalar> LstmCellParams<T> {
    /// Uniform init with bound 1/sqrt(fan_in) per projection; biases zero.
    pub fn init(rng: &mut impl rand::Rng, input_size: usize, hidden_size: usize) -> Self {
        assert!(input_size > 0 && hidden_size > 0);
        let xb = 1.0 / (input_size as f64).sqrt();
        let hb = 1.0 / (hidden_size as f64).sqrt();
        let mut gate = || GateParams {
            w_x: Tensor::uniform(rng, &[input_size, hidden_size], xb),
            w_h: Tensor::uniform(rng, &[hidden_size, hidden_size], hb),
            b: Tensor::zeros(&[hidden_size]),
        };
        let input = gate();
        let forget = gate();
        let output = gate();
        let candidate = gate();
        LstmCellParams {
            input,
            forget,
            output,
            candidate,
            input_size,
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn gates(&self) -> [&GateParams<T>; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut GateParams<T>; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.output,
            &mut self.candidate,
        ]
    }

    /// Visits (name, tensor) pairs as `<prefix>.<gate>.<w_x|w_h|b>`.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        for (name, gate) in GATE_NAMES.iter().zip(self.gates()) {
            f(format!("{prefix}.{name}.w_x"), &gate.w_x);
            f(format!("{prefix}.{name}.w_h"), &gate.w_h);
            f(format!("{prefix}.{name}.b"), &gate.b);
        }
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &'a mut Tensor<T>),
    ) {
        for (name, gate) in GATE_NAMES.iter().zip(self.gates_mut()) {
            f(format!("{prefix}.{name}.w_x"), &mut gate.w_x);
            f(format!("{prefix}.{name}.w_h"), &mut gate.w_h);
            f(format!("{prefix}.{name}.b"), &mut gate.b);
        }
    }

    /// Registers every tensor as a graph parameter under `prefix`.
    pub fn register(&self, g: &mut Graph<T>, prefix: &str) -> Result<LstmCellNodes> {
        let mut reg = |gate: &GateParams<T>, name: &str| -> Result<GateNodes> {
            Ok(GateNodes {
                w_x: g.param(&format!("{prefix}.{name}.w_x"), &gate.w_x)?,
                w_h: g.param(&format!("{prefix}.{name}.w_h"), &gate.w_h)?,
                b: g.param(&format!("{prefix}.{name}.b"), &gate.b)?,
            })
        };
        Ok(LstmCellNodes {
            input: reg(&self.input, "input")?,
            forget: reg(&self.forget, "forget")?,
            output: reg(&self.output, "output")?,
            candidate: reg(&self.candidate, "candidate")?,
            hidden_size: self.hidden_size,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellNodes {
    pub input: GateNodes,
    pub forget: GateNodes,
    pub output: GateNodes,
    pub candidate: GateNodes,
    pub hidden_size: usize,
}

/// One LSTM step: returns (h, c) for input `x` and previous state
/// (`h_prev`, `c_prev`).
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    cell: &LstmCellNodes,
) -> Result<(NodeId, NodeId)> {
    let mut pre = |gate: &GateNodes| -> Result<NodeId> {
        let xt = g.vecmat(x, gate.w_x)?;
        let ht = g.vecmat(h_prev, gate.w_h)?;
        let s = g.add(xt, ht)?;
        g.add(s, gate.b)
    };
    let pi = pre(&cell.input)?;
    let pf = pre(&cell.forget)?;
    let po = pre(&cell.output)?;
    let pc = pre(&cell.candidate)?;
    let i = g.sigmoid(pi)?;
    let f = g.sigmoid(pf)?;
    let o = g.sigmoid(po)?;
    let cand = g.tanh(pc)?;
    let keep = g.mul(f, c_prev)?;
    let add = g.mul(i, cand)?;
    let c = g.add(keep, add)?;
    let ct = g.tanh(c)?;
    let h = g.mul(o, ct)?;
    Ok((h, c))
}

/// Embeds token indices as rows of the embedding table node.
pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    table: NodeId,
    indices: &[usize],
) -> Result<Vec<NodeId>> {
    let t = g.value(table);
    if !t.is_matrix() {
        return Err(Error::invalid("embedding table must be a matrix"));
    }
    let rows = t.rows();
    indices
        .iter()
        .map(|&i| {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "token index {i} outside vocabulary of {rows}"
                )));
            }
            g.row(table, i)
        })
        .collect()
}

/// Encoded question: one row per token, each the concatenation of the
/// forward and backward hidden states at that position.
pub struct QuestionNodes {
    /// [t, 2 * hidden] matrix of per-token codes.
    pub matrix: NodeId,
    pub steps: usize,
    pub width: usize,
}

/// Runs the bidirectional LSTM over embedded tokens. Both directions start
/// from zero state; row t is [forward h_t, backward h_t].
pub fn encode_question<T: Scalar>(
    g: &mut Graph<T>,
    table: NodeId,
    forward: &LstmCellNodes,
    backward: &LstmCellNodes,
    indices: &[usize],
) -> Result<QuestionNodes> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot encode an empty question"));
    }
    if forward.hidden_size != backward.hidden_size {
        return Err(Error::invalid(
            "forward and backward hidden sizes must match",
        ));
    }
    let xs = embed_tokens(g, table, indices)?;
    let steps = xs.len();
    let hidden = forward.hidden_size;

    let run = |g: &mut Graph<T>, cell: &LstmCellNodes, order: Vec<usize>| -> Result<Vec<NodeId>> {
        let mut h = g.constant(Tensor::zeros(&[hidden]));
        let mut c = g.constant(Tensor::zeros(&[hidden]));
        let mut out = vec![None; steps];
        for t in order {
            let (nh, nc) = lstm_step(g, xs[t], h, c, cell)?;
            h = nh;
            c = nc;
            out[t] = Some(nh);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    };

    let fwd = run(g, forward, (0..steps).collect())?;
    let bwd = run(g, backward, (0..steps).rev().collect())?;

    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        rows.push(g.concat(&[fwd[t], bwd[t]])?);
    }
    let matrix = g.stack_rows(&rows)?;
    Ok(QuestionNodes {
        matrix,
        steps,
        width: 2 * hidden,
    })
}
