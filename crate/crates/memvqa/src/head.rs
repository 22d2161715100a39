//! Answer head: two bias-free projections from the memory output to a
//! distribution over the answer vocabulary, the training loss, and answer
//! selection for open-ended and multiple-choice evaluation.

use crate::data::{normalize_answer, AnswerVocab};
use crate::numeric::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, Result};

/// Probabilities below this floor are clamped inside the log so the loss
/// stays finite; clamped entries contribute zero gradient.
pub const LOG_FLOOR: f64 = 1e-12;

/// Head weights: hidden projection [input, hidden] and answer projection
/// [hidden, answers]. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar> {
    pub w_o: Tensor<T>,
    pub w_h: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn init(
        rng: &mut impl rand::Rng,
        input_size: usize,
        hidden_size: usize,
        answers: usize,
    ) -> Self {
        assert!(input_size > 0 && hidden_size > 0 && answers > 0);
        HeadParams {
            w_o: Tensor::uniform(rng, &[input_size, hidden_size], 1.0 / (input_size as f64).sqrt()),
            w_h: Tensor::uniform(rng, &[hidden_size, answers], 1.0 / (hidden_size as f64).sqrt()),
        }
    }

    pub fn answer_count(&self) -> usize {
        self.w_h.cols()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.w_h"), &self.w_h);
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &'a mut Tensor<T>),
    ) {
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.w_h"), &mut self.w_h);
    }

    pub fn register(&self, g: &mut Graph<T>, prefix: &str) -> Result<HeadNodes> {
        Ok(HeadNodes {
            w_o: g.param(&format!("{prefix}.w_o"), &self.w_o)?,
            w_h: g.param(&format!("{prefix}.w_h"), &self.w_h)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w_o: NodeId,
    pub w_h: NodeId,
}

/// Answer distribution: softmax(tanh(o W_o) W_h).
pub fn predict<T: Scalar>(g: &mut Graph<T>, o: NodeId, head: &HeadNodes) -> Result<NodeId> {
    let hidden = g.vecmat(o, head.w_o)?;
    let hidden = g.tanh(hidden)?;
    let logits = g.vecmat(hidden, head.w_h)?;
    g.softmax(logits)
}

/// Negative log probability of the labeled answer.
pub fn loss_label<T: Scalar>(g: &mut Graph<T>, probs: NodeId, label: usize) -> Result<NodeId> {
    let n = g.value(probs).numel();
    if label >= n {
        return Err(Error::invalid(format!(
            "label {label} outside distribution of {n}"
        )));
    }
    let picked = g.slice(probs, label, 1)?;
    let logged = g.log_clamped(picked, LOG_FLOOR)?;
    g.affine(logged, -1.0, 0.0)
}

/// Cross-entropy against an explicit one-hot target vector.
pub fn loss_one_hot<T: Scalar>(g: &mut Graph<T>, probs: NodeId, target: &[T]) -> Result<NodeId> {
    let n = g.value(probs).numel();
    if target.len() != n {
        return Err(Error::invalid(format!(
            "target length {} does not match distribution of {n}",
            target.len()
        )));
    }
    let mut label = None;
    for (i, &t) in target.iter().enumerate() {
        if t == T::one() {
            if label.is_some() {
                return Err(Error::invalid("target has more than one hot entry"));
            }
            label = Some(i);
        } else if t != T::zero() {
            return Err(Error::invalid("target entries must be 0 or 1"));
        }
    }
    let label = label.ok_or_else(|| Error::invalid("target has no hot entry"))?;
    loss_label(g, probs, label)
}

/// A selected answer with its probability under the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub answer: String,
    pub index: usize,
    pub prob: f64,
    /// True when the choice was restricted to the provided candidates.
    pub candidates_used: bool,
}

/// Index of the maximum value, ties resolved to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Open-ended selection: the highest probability vocabulary answer.
pub fn select_open_ended<T: Scalar>(probs: &[T], vocab: &AnswerVocab) -> Result<Selection> {
    if probs.len() != vocab.len() {
        return Err(Error::invalid(format!(
            "distribution of {} against vocabulary of {}",
            probs.len(),
            vocab.len()
        )));
    }
    let index = argmax(probs);
    Ok(Selection {
        answer: vocab.answer(index).to_string(),
        index,
        prob: probs[index].as_f64(),
        candidates_used: false,
    })
}

/// Multiple-choice selection: the highest probability candidate that exists
/// in the vocabulary, ties resolved to the lowest vocabulary index. When no
/// candidate is in the vocabulary the selection falls back to open-ended
/// and reports `candidates_used: false`.
pub fn select_multiple_choice<T: Scalar>(
    probs: &[T],
    candidates: &[String],
    vocab: &AnswerVocab,
) -> Result<Selection> {
    if probs.len() != vocab.len() {
        return Err(Error::invalid(format!(
            "distribution of {} against vocabulary of {}",
            probs.len(),
            vocab.len()
        )));
    }
    let mut best: Option<usize> = None;
    for c in candidates {
        let normalized = normalize_answer(c);
        if let Some(i) = vocab.index_of(&normalized) {
            let better = match best {
                None => true,
                Some(b) => probs[i] > probs[b] || (probs[i] == probs[b] && i < b),
            };
            if better {
                best = Some(i);
            }
        }
    }
    match best {
        Some(index) => Ok(Selection {
            answer: vocab.answer(index).to_string(),
            index,
            prob: probs[index].as_f64(),
            candidates_used: true,
        }),
        None => select_open_ended(probs, vocab),
    }
}
