//! LSTM-controlled external memory with least-used slot writing.
//!
//! Per step: the controller consumes the joint attention code, the memory
//! is read by softmax over cosine similarities against the controller
//! state, write weights blend the previous step's read weights with a
//! least-used slot indicator under a learned sigmoid gate, the write adds
//! the controller state into the weighted slots, and usage decays and
//! accumulates both weight vectors. The step output is the concatenation
//! of controller state and read vector.

use crate::encoders::{lstm_step, LstmCellNodes, LstmCellParams};
use crate::numeric::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, Result};

/// Scale of the fresh-slot fill. Slots start with tiny distinct
/// pseudorandom values: a constant fill would leave every slot identical
/// forever (identical writes land on identical slots), while distinct
/// values let reads and the least-used selection differentiate. The tiny
/// scale defers to the first real write.
pub const MEMORY_INIT_EPSILON: f64 = 1e-6;

/// Deterministic fill value for entry `index` of a fresh memory, uniform
/// in (-epsilon, epsilon). Pure function of the index (splitmix64), so
/// initialization is identical across runs and platforms.
fn init_fill(index: u64) -> f64 {
    let mut z = index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let unit = (z >> 11) as f64 / (1u64 << 52) as f64;
    MEMORY_INIT_EPSILON * (unit - 1.0)
}

/// Persistent memory quantities carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T: Scalar> {
    /// Slot matrix [slots, width].
    pub memory: Tensor<T>,
    /// Usage per slot [slots].
    pub usage: Tensor<T>,
    /// Read weights from the latest step [slots].
    pub read: Tensor<T>,
    /// Write weights from the latest step [slots].
    pub write: Tensor<T>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn init(slots: usize, width: usize) -> Self {
        let data: Vec<T> = (0..slots * width)
            .map(|i| T::of(init_fill(i as u64)))
            .collect();
        MemoryState {
            memory: Tensor::new(vec![slots, width], data).expect("shape matches data"),
            usage: Tensor::zeros(&[slots]),
            read: Tensor::zeros(&[slots]),
            write: Tensor::zeros(&[slots]),
        }
    }

    pub fn slots(&self) -> usize {
        self.memory.rows()
    }

    pub fn width(&self) -> usize {
        self.memory.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.slots();
        for (name, t) in [("usage", &self.usage), ("read", &self.read), ("write", &self.write)] {
            if !t.is_vector() || t.numel() != s {
                return Err(Error::invalid(format!(
                    "memory state {name} has shape {:?}, want [{s}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Controller recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<T: Scalar> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> ControllerState<T> {
    pub fn init(hidden: usize) -> Self {
        ControllerState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

/// Controller and gate parameters. `decay_gamma` and `truncation_n` are
/// fixed hyperparameters, not learned.
#[derive(Debug, Clone, PartialEq)]
pub struct MannParams<T: Scalar> {
    pub controller: LstmCellParams<T>,
    /// Scalar gate pre-activation [1]; its sigmoid blends read weights
    /// against the least-used indicator when writing.
    pub gate_alpha: Tensor<T>,
    pub decay_gamma: f64,
    pub truncation_n: usize,
}

impl<T: Scalar> MannParams<T> {
    pub fn init(
        rng: &mut impl rand::Rng,
        input_size: usize,
        hidden_size: usize,
        decay_gamma: f64,
        truncation_n: usize,
    ) -> Result<Self> {
        validate_gamma(decay_gamma)?;
        if truncation_n == 0 {
            return Err(Error::invalid("truncation_n must be at least 1"));
        }
        Ok(MannParams {
            controller: LstmCellParams::init(rng, input_size, hidden_size),
            gate_alpha: Tensor::zeros(&[1]),
            decay_gamma,
            truncation_n,
        })
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        self.controller.visit(&format!("{prefix}.controller"), f);
        f(format!("{prefix}.gate_alpha"), &self.gate_alpha);
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &'a mut Tensor<T>),
    ) {
        self.controller.visit_mut(&format!("{prefix}.controller"), f);
        f(format!("{prefix}.gate_alpha"), &mut self.gate_alpha);
    }

    pub fn register(&self, g: &mut Graph<T>, prefix: &str) -> Result<MannNodes> {
        Ok(MannNodes {
            controller: self
                .controller
                .register(g, &format!("{prefix}.controller"))?,
            gate_alpha: g.param(&format!("{prefix}.gate_alpha"), &self.gate_alpha)?,
        })
    }
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!(
            "usage decay must lie strictly between 0 and 1, got {gamma}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct MannNodes {
    pub controller: LstmCellNodes,
    pub gate_alpha: NodeId,
}

/// Graph nodes holding the incoming state for one step.
#[derive(Debug, Clone, Copy)]
pub struct MannStateNodes {
    pub memory: NodeId,
    pub usage: NodeId,
    pub read: NodeId,
    pub h: NodeId,
    pub c: NodeId,
}

impl MannStateNodes {
    /// Registers a detached (constant) copy of the state on the graph.
    pub fn constants<T: Scalar>(
        g: &mut Graph<T>,
        memory: &MemoryState<T>,
        controller: &ControllerState<T>,
    ) -> Self {
        MannStateNodes {
            memory: g.constant(memory.memory.clone()),
            usage: g.constant(memory.usage.clone()),
            read: g.constant(memory.read.clone()),
            h: g.constant(controller.h.clone()),
            c: g.constant(controller.c.clone()),
        }
    }
}

/// Which memory paths run in a step. Training enables both; evaluation
/// keeps reads but freezes the memory; the no-memory arm disables both and
/// feeds the head zeros in place of the read vector.
#[derive(Debug, Clone, Copy)]
pub struct MannStepOptions {
    pub read_enabled: bool,
    pub write_enabled: bool,
}

impl MannStepOptions {
    pub const TRAIN: Self = MannStepOptions {
        read_enabled: true,
        write_enabled: true,
    };
    pub const FROZEN: Self = MannStepOptions {
        read_enabled: true,
        write_enabled: false,
    };
    pub const DISABLED: Self = MannStepOptions {
        read_enabled: false,
        write_enabled: false,
    };
}

/// Outputs of one step. Optional fields are present only when the
/// corresponding path ran.
#[derive(Debug, Clone, Copy)]
pub struct MannStepNodes {
    pub h: NodeId,
    pub c: NodeId,
    /// Concatenation [h, read vector] (read vector zero when reads are off).
    pub output: NodeId,
    pub read_weights: Option<NodeId>,
    pub read_vector: Option<NodeId>,
    pub write_weights: Option<NodeId>,
    pub usage: Option<NodeId>,
    pub memory: Option<NodeId>,
}

impl MannStepNodes {
    /// State nodes for the next step of an in-graph rollout, falling back
    /// to the previous state for paths that did not run.
    pub fn next_state(&self, prev: &MannStateNodes) -> MannStateNodes {
        MannStateNodes {
            memory: self.memory.unwrap_or(prev.memory),
            usage: self.usage.unwrap_or(prev.usage),
            read: self.read_weights.unwrap_or(prev.read),
            h: self.h,
            c: self.c,
        }
    }
}

/// Controller update; a plain LSTM step over the joint input.
pub fn controller_step<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    cell: &LstmCellNodes,
) -> Result<(NodeId, NodeId)> {
    lstm_step(g, x, h_prev, c_prev, cell)
}

/// Content read: softmax over cosine similarities of `h` against each slot,
/// then the weighted slot combination. Returns (read weights, read vector).
pub fn read_memory<T: Scalar>(
    g: &mut Graph<T>,
    h: NodeId,
    memory: NodeId,
) -> Result<(NodeId, NodeId)> {
    let sims = g.cosine_rows(h, memory)?;
    let weights = g.softmax(sims)?;
    let vector = g.vecmat(weights, memory)?;
    Ok((weights, vector))
}

/// Indicator of the `n` least-used slots: 1 where usage does not exceed the
/// n-th smallest usage value, else 0. Ties can mark more than `n` slots.
pub fn least_used_indicator<T: Scalar>(usage: &[T], n: usize) -> Result<Vec<T>> {
    if n == 0 || n > usage.len() {
        return Err(Error::invalid(format!(
            "least-used count {n} outside 1..={}",
            usage.len()
        )));
    }
    let mut sorted: Vec<T> = usage.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("usage values are finite"));
    let threshold = sorted[n - 1];
    Ok(usage
        .iter()
        .map(|&u| if u <= threshold { T::one() } else { T::zero() })
        .collect())
}

/// Write weights: sigmoid(alpha) times the previous read weights plus the
/// complement times the least-used indicator. The indicator is computed
/// from the previous usage values and enters the graph as a constant, so
/// gradients flow through the gate and the read weights but not through
/// the slot selection.
pub fn compute_write_weights<T: Scalar>(
    g: &mut Graph<T>,
    alpha: NodeId,
    read_prev: NodeId,
    usage_prev: NodeId,
    n: usize,
) -> Result<NodeId> {
    let indicator = least_used_indicator(g.value(usage_prev).data(), n)?;
    let indicator = g.constant(Tensor::vector(indicator)?);
    let gate = g.sigmoid(alpha)?;
    let complement = g.affine(gate, -1.0, 1.0)?;
    let from_read = g.mul_scalar(read_prev, gate)?;
    let from_indicator = g.mul_scalar(indicator, complement)?;
    g.add(from_read, from_indicator)
}

/// Usage update: decay previous usage by `gamma` and add the current read
/// and write weights.
pub fn update_usage<T: Scalar>(
    g: &mut Graph<T>,
    usage_prev: NodeId,
    read_weights: NodeId,
    write_weights: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    validate_gamma(gamma)?;
    let decayed = g.affine(usage_prev, gamma, 0.0)?;
    let with_read = g.add(decayed, read_weights)?;
    g.add(with_read, write_weights)
}

/// Additive write: each slot gains its write weight times the controller
/// state. Slots are never erased.
pub fn write_memory<T: Scalar>(
    g: &mut Graph<T>,
    memory: NodeId,
    write_weights: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let delta = g.outer(write_weights, h)?;
    g.add(memory, delta)
}

/// One full step in the order: controller, read (pre-write), write weights
/// from the previous step's read weights and usage, write, usage update.
#[allow(clippy::too_many_arguments)]
pub fn mann_step<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    state: &MannStateNodes,
    nodes: &MannNodes,
    gamma: f64,
    truncation_n: usize,
    opts: MannStepOptions,
) -> Result<MannStepNodes> {
    if opts.write_enabled && !opts.read_enabled {
        return Err(Error::invalid("memory writes require reads to be enabled"));
    }
    let (h, c) = controller_step(g, x, state.h, state.c, &nodes.controller)?;

    let (read_weights, read_vector) = if opts.read_enabled {
        let (w, v) = read_memory(g, h, state.memory)?;
        (Some(w), Some(v))
    } else {
        (None, None)
    };

    let (write_weights, memory, usage) = if opts.write_enabled {
        let ww = compute_write_weights(g, nodes.gate_alpha, state.read, state.usage, truncation_n)?;
        let mem = write_memory(g, state.memory, ww, h)?;
        let usage = update_usage(
            g,
            state.usage,
            read_weights.expect("reads run when writes do"),
            ww,
            gamma,
        )?;
        (Some(ww), Some(mem), Some(usage))
    } else {
        (None, None, None)
    };

    let r = match read_vector {
        Some(v) => v,
        None => {
            let width = g.value(state.memory).cols();
            g.constant(Tensor::zeros(&[width]))
        }
    };
    let output = g.concat(&[h, r])?;

    Ok(MannStepNodes {
        h,
        c,
        output,
        read_weights,
        read_vector,
        write_weights,
        usage,
        memory,
    })
}
