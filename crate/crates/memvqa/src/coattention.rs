//! Sequential co-attention over region features and question token codes.
//!
//! A base vector summarizing both inputs gates two attention passes: one
//! over image regions, one over question words. The attended region summary
//! passes through tanh; the attended word summary does not. Both passes
//! share the base projection weights.

use crate::numeric::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, Result};

/// Attention weights for the two branches plus the projections they share.
/// `w_v`, `w_q`, and `w_m` map inputs into the attention space; the two
/// score vectors collapse attention-space rows to scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionParams<T: Scalar> {
    pub w_v: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_m: Tensor<T>,
    pub w_h_visual: Tensor<T>,
    pub w_h_question: Tensor<T>,
}

impl<T: Scalar> CoAttentionParams<T> {
    /// `dim` is the shared width of region rows, token codes, and the
    /// attention space.
    pub fn init(rng: &mut impl rand::Rng, dim: usize, attention_dim: usize) -> Self {
        assert!(dim > 0 && attention_dim > 0);
        let mb = 1.0 / (dim as f64).sqrt();
        let ab = 1.0 / (attention_dim as f64).sqrt();
        CoAttentionParams {
            w_v: Tensor::uniform(rng, &[dim, attention_dim], mb),
            w_q: Tensor::uniform(rng, &[dim, attention_dim], mb),
            w_m: Tensor::uniform(rng, &[dim, attention_dim], mb),
            w_h_visual: Tensor::uniform(rng, &[attention_dim], ab),
            w_h_question: Tensor::uniform(rng, &[attention_dim], ab),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_m"), &self.w_m);
        f(format!("{prefix}.w_h_visual"), &self.w_h_visual);
        f(format!("{prefix}.w_h_question"), &self.w_h_question);
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &'a mut Tensor<T>),
    ) {
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_m"), &mut self.w_m);
        f(format!("{prefix}.w_h_visual"), &mut self.w_h_visual);
        f(format!("{prefix}.w_h_question"), &mut self.w_h_question);
    }

    pub fn register(&self, g: &mut Graph<T>, prefix: &str) -> Result<CoAttentionNodes> {
        Ok(CoAttentionNodes {
            w_v: g.param(&format!("{prefix}.w_v"), &self.w_v)?,
            w_q: g.param(&format!("{prefix}.w_q"), &self.w_q)?,
            w_m: g.param(&format!("{prefix}.w_m"), &self.w_m)?,
            w_h_visual: g.param(&format!("{prefix}.w_h_visual"), &self.w_h_visual)?,
            w_h_question: g.param(&format!("{prefix}.w_h_question"), &self.w_h_question)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoAttentionNodes {
    pub w_v: NodeId,
    pub w_q: NodeId,
    pub w_m: NodeId,
    pub w_h_visual: NodeId,
    pub w_h_question: NodeId,
}

/// One attention pass: normalized weights over rows and the weighted
/// row combination.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub weights: NodeId,
    pub attended: NodeId,
}

/// Base vector gating both attention passes: the tanh of the mean region
/// row, element-wise times the mean token code (no tanh on the question
/// side). Region rows and token codes must share a width.
pub fn base_vector<T: Scalar>(
    g: &mut Graph<T>,
    regions: NodeId,
    question: NodeId,
) -> Result<NodeId> {
    let (tr, tq) = (g.value(regions), g.value(question));
    if !tr.is_matrix() || !tq.is_matrix() || tr.cols() != tq.cols() {
        return Err(Error::invalid(format!(
            "base vector needs matrices of equal width, got {:?} and {:?}",
            tr.shape(),
            tq.shape()
        )));
    }
    let vm = g.mean_rows(regions)?;
    let v0 = g.tanh(vm)?;
    let q0 = g.mean_rows(question)?;
    g.mul(v0, q0)
}

/// Shared attention body: project rows, gate by the projected base vector,
/// score, normalize, and combine.
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    rows: NodeId,
    base: NodeId,
    w_proj: NodeId,
    w_m: NodeId,
    w_score: NodeId,
    tanh_output: bool,
) -> Result<AttentionNodes> {
    let n = g.value(rows).rows();
    let proj = g.matmul(rows, w_proj)?;
    let proj = g.tanh(proj)?;
    let mproj = g.vecmat(base, w_m)?;
    let mproj = g.tanh(mproj)?;
    // Tile the gate across rows via an outer product with ones.
    let ones = g.constant(Tensor::full(&[n], T::one()));
    let tiled = g.outer(ones, mproj)?;
    let gated = g.mul(proj, tiled)?;
    let scores = g.matvec(gated, w_score)?;
    let weights = g.softmax(scores)?;
    let combined = g.vecmat(weights, rows)?;
    let attended = if tanh_output {
        g.tanh(combined)?
    } else {
        combined
    };
    Ok(AttentionNodes { weights, attended })
}

/// Attention over region rows; the combined region vector passes through
/// tanh.
pub fn attend_visual<T: Scalar>(
    g: &mut Graph<T>,
    regions: NodeId,
    base: NodeId,
    p: &CoAttentionNodes,
) -> Result<AttentionNodes> {
    attend(g, regions, base, p.w_v, p.w_m, p.w_h_visual, true)
}

/// Attention over token codes; the combined code is the plain weighted sum.
pub fn attend_question<T: Scalar>(
    g: &mut Graph<T>,
    question: NodeId,
    base: NodeId,
    p: &CoAttentionNodes,
) -> Result<AttentionNodes> {
    attend(g, question, base, p.w_q, p.w_m, p.w_h_question, false)
}

/// Full co-attention output.
#[derive(Debug, Clone, Copy)]
pub struct CoattendNodes {
    /// Concatenation [attended regions, attended words].
    pub joint: NodeId,
    pub base: NodeId,
    pub visual: AttentionNodes,
    pub question: AttentionNodes,
}

pub fn coattend<T: Scalar>(
    g: &mut Graph<T>,
    regions: NodeId,
    question: NodeId,
    p: &CoAttentionNodes,
) -> Result<CoattendNodes> {
    let base = base_vector(g, regions, question)?;
    let visual = attend_visual(g, regions, base, p)?;
    let word = attend_question(g, question, base, p)?;
    let joint = g.concat(&[visual.attended, word.attended])?;
    Ok(CoattendNodes {
        joint,
        base,
        visual,
        question: word,
    })
}
