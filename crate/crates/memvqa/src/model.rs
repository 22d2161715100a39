//! Full model assembly: embedding, bidirectional question encoder,
//! co-attention, external memory, and answer head, plus the streaming state
//! carried between examples.

use crate::coattention::{coattend, CoAttentionNodes, CoAttentionParams};
use crate::encoders::{encode_question, FeatureGrid, LstmCellParams, LstmCellNodes};
use crate::head::{predict, HeadNodes, HeadParams};
use crate::mann::{
    mann_step, ControllerState, MannNodes, MannParams, MannStateNodes, MannStepNodes,
    MannStepOptions, MemoryState,
};
use crate::numeric::{Graph, NodeId, Scalar, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dimensions and fixed hyperparameters of one model instance. The encoder
/// hidden size per direction is half the feature width so that token codes
/// and region features share a width; the attention space matches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_vocab_size: usize,
    pub embed_dim: usize,
    /// Width of region feature rows and token codes.
    pub feature_dim: usize,
    /// Controller hidden size; also the memory slot width.
    pub controller_hidden: usize,
    pub memory_slots: usize,
    pub answer_count: usize,
    /// Usage decay per memory step.
    pub gamma: f64,
    /// Least-used slot count for writes.
    pub truncation_n: usize,
    /// Initial pre-activation of the learned write gate. Writes blend
    /// sigmoid(gate) of the previous read weights with the least-used
    /// indicator, so this sets where writes land early in training: 0
    /// splits them evenly, positive values favor read-following writes
    /// that cluster similar content into the same slots.
    #[serde(default)]
    pub write_gate_init: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_vocab_size == 0
            || self.embed_dim == 0
            || self.controller_hidden == 0
            || self.memory_slots == 0
            || self.answer_count == 0
        {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.feature_dim < 2 || self.feature_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "feature_dim must be even and at least 2, got {}",
                self.feature_dim
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie strictly between 0 and 1, got {}",
                self.gamma
            )));
        }
        if self.truncation_n == 0 || self.truncation_n > self.memory_slots {
            return Err(Error::invalid(format!(
                "truncation_n {} outside 1..={}",
                self.truncation_n, self.memory_slots
            )));
        }
        Ok(())
    }

    /// Hidden size of each encoder direction.
    pub fn direction_hidden(&self) -> usize {
        self.feature_dim / 2
    }

    /// Width of the joint attention code fed to the controller.
    pub fn joint_dim(&self) -> usize {
        2 * self.feature_dim
    }

    /// Width of the memory step output fed to the head.
    pub fn output_dim(&self) -> usize {
        2 * self.controller_hidden
    }
}

/// Every learned tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub encoder_fwd: LstmCellParams<T>,
    pub encoder_bwd: LstmCellParams<T>,
    pub coattention: CoAttentionParams<T>,
    pub mann: MannParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization. Projections draw uniformly within
    /// 1/sqrt(fan_in); biases and the write gate start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Tensor::uniform(
            &mut rng,
            &[config.word_vocab_size, config.embed_dim],
            1.0 / (config.embed_dim as f64).sqrt(),
        );
        let encoder_fwd =
            LstmCellParams::init(&mut rng, config.embed_dim, config.direction_hidden());
        let encoder_bwd =
            LstmCellParams::init(&mut rng, config.embed_dim, config.direction_hidden());
        let coattention = CoAttentionParams::init(&mut rng, config.feature_dim, config.feature_dim);
        let mut mann = MannParams::init(
            &mut rng,
            config.joint_dim(),
            config.controller_hidden,
            config.gamma,
            config.truncation_n,
        )?;
        mann.gate_alpha = Tensor::vector(vec![T::of(config.write_gate_init)])?;
        let mut head = HeadParams::init(
            &mut rng,
            config.output_dim(),
            config.controller_hidden,
            config.answer_count,
        );
        // The head input is [h, r]. The retrieved vector r is an unnormalized
        // sum over additive memory writes, so its magnitude grows with stream
        // length and a fan-in init saturates tanh before the read pathway can
        // learn. Start those rows at zero: the head begins at the
        // controller-only solution and grows memory reliance by gradient.
        let read_rows = config.controller_hidden * config.controller_hidden;
        for v in &mut head.w_o.data_mut()[read_rows..] {
            *v = T::zero();
        }
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            encoder_fwd,
            encoder_bwd,
            coattention,
            mann,
            head,
        })
    }

    /// Visits every tensor with its canonical name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        f("embedding".to_string(), &self.embedding);
        self.encoder_fwd.visit("encoder.fwd", f);
        self.encoder_bwd.visit("encoder.bwd", f);
        self.coattention.visit("coattention", f);
        self.mann.visit("mann", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor<T>)) {
        f("embedding".to_string(), &mut self.embedding);
        self.encoder_fwd.visit_mut("encoder.fwd", f);
        self.encoder_bwd.visit_mut("encoder.bwd", f);
        self.coattention.visit_mut("coattention", f);
        self.mann.visit_mut("mann", f);
        self.head.visit_mut("head", f);
    }

    /// Registers every tensor as a named graph parameter.
    pub fn register_all(&self, g: &mut Graph<T>) -> Result<ModelNodes> {
        Ok(ModelNodes {
            embedding: g.param("embedding", &self.embedding)?,
            encoder_fwd: self.encoder_fwd.register(g, "encoder.fwd")?,
            encoder_bwd: self.encoder_bwd.register(g, "encoder.bwd")?,
            coattention: self.coattention.register(g, "coattention")?,
            mann: self.mann.register(g, "mann")?,
            head: self.head.register(g, "head")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub embedding: NodeId,
    pub encoder_fwd: LstmCellNodes,
    pub encoder_bwd: LstmCellNodes,
    pub coattention: CoAttentionNodes,
    pub mann: MannNodes,
    pub head: HeadNodes,
}

/// Memory and controller state persisting across the example stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T: Scalar> {
    pub memory: MemoryState<T>,
    pub controller: ControllerState<T>,
}

impl<T: Scalar> StreamState<T> {
    pub fn init(config: &ModelConfig) -> Self {
        StreamState {
            memory: MemoryState::init(config.memory_slots, config.controller_hidden),
            controller: ControllerState::init(config.controller_hidden),
        }
    }
}

/// Which memory paths a forward pass uses. Training writes; evaluation
/// freezes the memory; the no-memory arm replaces reads with zeros.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub external_memory: bool,
    pub write_memory: bool,
}

impl ForwardOptions {
    pub fn mann_options(&self) -> MannStepOptions {
        if !self.external_memory {
            MannStepOptions::DISABLED
        } else if self.write_memory {
            MannStepOptions::TRAIN
        } else {
            MannStepOptions::FROZEN
        }
    }
}

/// Node handles produced by one forward pass.
pub struct ForwardPass {
    /// Answer distribution.
    pub probs: NodeId,
    /// Attention over regions.
    pub alpha_regions: NodeId,
    /// Attention over question words.
    pub alpha_words: NodeId,
    /// Joint attention code fed to the controller.
    pub joint: NodeId,
    /// Memory step handles (state outputs present per options).
    pub step: MannStepNodes,
}

/// Builds the full forward graph for one example. The incoming stream
/// state enters as constants, so gradients truncate at the example
/// boundary.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ModelNodes,
    config: &ModelConfig,
    grid: &FeatureGrid<T>,
    tokens: &[usize],
    state: &StreamState<T>,
    opts: ForwardOptions,
) -> Result<ForwardPass> {
    let state_nodes = MannStateNodes::constants(g, &state.memory, &state.controller);
    build_forward_on(g, nodes, config, grid, tokens, &state_nodes, opts)
}

/// Builds the forward graph for one example on top of explicit state nodes.
/// Chaining the returned step's `next_state` into another call keeps the
/// whole rollout differentiable, which is how windowed truncated
/// backpropagation trains the write path.
pub fn build_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ModelNodes,
    config: &ModelConfig,
    grid: &FeatureGrid<T>,
    tokens: &[usize],
    state_nodes: &MannStateNodes,
    opts: ForwardOptions,
) -> Result<ForwardPass> {
    if grid.d() != config.feature_dim {
        return Err(Error::invalid(format!(
            "feature width {} does not match model feature_dim {}",
            grid.d(),
            config.feature_dim
        )));
    }
    let regions = g.constant(grid.regions().clone());
    let question = encode_question(
        g,
        nodes.embedding,
        &nodes.encoder_fwd,
        &nodes.encoder_bwd,
        tokens,
    )?;
    let attention = coattend(g, regions, question.matrix, &nodes.coattention)?;

    let step = mann_step(
        g,
        attention.joint,
        state_nodes,
        &nodes.mann,
        config.gamma,
        config.truncation_n,
        opts.mann_options(),
    )?;
    let probs = predict(g, step.output, &nodes.head)?;

    Ok(ForwardPass {
        probs,
        alpha_regions: attention.visual.weights,
        alpha_words: attention.question.weights,
        joint: attention.joint,
        step,
    })
}

/// Reassembles node handles from a parameter name map. Finite-difference
/// checks register parameters themselves and need the same wiring that
/// `register_all` produces.
pub fn nodes_from_map(
    map: &std::collections::BTreeMap<String, NodeId>,
    config: &ModelConfig,
) -> ModelNodes {
    let gate = |prefix: &str| crate::encoders::GateNodes {
        w_x: map[&format!("{prefix}.w_x")],
        w_h: map[&format!("{prefix}.w_h")],
        b: map[&format!("{prefix}.b")],
    };
    let cell = |prefix: &str, hidden: usize| LstmCellNodes {
        input: gate(&format!("{prefix}.input")),
        forget: gate(&format!("{prefix}.forget")),
        output: gate(&format!("{prefix}.output")),
        candidate: gate(&format!("{prefix}.candidate")),
        hidden_size: hidden,
    };
    ModelNodes {
        embedding: map["embedding"],
        encoder_fwd: cell("encoder.fwd", config.direction_hidden()),
        encoder_bwd: cell("encoder.bwd", config.direction_hidden()),
        coattention: CoAttentionNodes {
            w_v: map["coattention.w_v"],
            w_q: map["coattention.w_q"],
            w_m: map["coattention.w_m"],
            w_h_visual: map["coattention.w_h_visual"],
            w_h_question: map["coattention.w_h_question"],
        },
        mann: MannNodes {
            controller: cell("mann.controller", config.controller_hidden),
            gate_alpha: map["mann.gate_alpha"],
        },
        head: HeadNodes {
            w_o: map["head.w_o"],
            w_h: map["head.w_h"],
        },
    }
}

/// Extracts the detached stream state after a forward pass, keeping
/// previous values for paths that did not run.
pub fn next_stream_state<T: Scalar>(
    g: &Graph<T>,
    pass: &ForwardPass,
    prev: &StreamState<T>,
) -> StreamState<T> {
    let take = |id: Option<NodeId>, fallback: &Tensor<T>| match id {
        Some(id) => g.value(id).clone(),
        None => fallback.clone(),
    };
    StreamState {
        memory: MemoryState {
            memory: take(pass.step.memory, &prev.memory.memory),
            usage: take(pass.step.usage, &prev.memory.usage),
            read: take(pass.step.read_weights, &prev.memory.read),
            write: take(pass.step.write_weights, &prev.memory.write),
        },
        controller: ControllerState {
            h: g.value(pass.step.h).clone(),
            c: g.value(pass.step.c).clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            word_vocab_size: 7,
            embed_dim: 4,
            feature_dim: 6,
            controller_hidden: 4,
            memory_slots: 5,
            answer_count: 3,
            gamma: 0.5,
            truncation_n: 2,
            write_gate_init: 0.0,
        }
    }

    fn tiny_grid(d: usize) -> FeatureGrid<f64> {
        let n = 4;
        let data = (0..n * d).map(|i| ((i as f64) * 0.61).sin() * 0.5).collect();
        FeatureGrid::new("img", Tensor::matrix(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_dimensions() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.feature_dim = 5;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.truncation_n = 6;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let params = ModelParams::<f64>::init(&tiny_config(), 0).unwrap();
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        let set: BTreeSet<_> = names.iter().cloned().collect();
        assert_eq!(set.len(), names.len(), "duplicate parameter names");
        // embedding + 2 encoders (12 each) + controller (12) + gate + 5
        // attention tensors + 2 head tensors.
        assert_eq!(names.len(), 1 + 12 + 12 + 12 + 1 + 5 + 2);
        assert!(set.contains("embedding"));
        assert!(set.contains("encoder.fwd.input.w_x"));
        assert!(set.contains("mann.gate_alpha"));
        assert!(set.contains("head.w_h"));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::<f64>::init(&tiny_config(), 11).unwrap();
        let b = ModelParams::<f64>::init(&tiny_config(), 11).unwrap();
        let c = ModelParams::<f64>::init(&tiny_config(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_produces_distribution_and_attention() {
        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 1).unwrap();
        let state = StreamState::init(&config);
        let grid = tiny_grid(config.feature_dim);
        let tokens = [1usize, 5, 2];

        let mut g = Graph::new();
        let nodes = params.register_all(&mut g).unwrap();
        let pass = build_forward(
            &mut g,
            &nodes,
            &config,
            &grid,
            &tokens,
            &state,
            ForwardOptions {
                external_memory: true,
                write_memory: true,
            },
        )
        .unwrap();

        let probs = g.value(pass.probs).data();
        assert_eq!(probs.len(), config.answer_count);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(g.value(pass.alpha_regions).numel(), grid.n());
        assert_eq!(g.value(pass.alpha_words).numel(), tokens.len());
        assert_eq!(g.value(pass.joint).numel(), config.joint_dim());

        // Every parameter appears in the gradient map.
        let loss = crate::head::loss_label(&mut g, pass.probs, 0).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut names = 0;
        params.visit(&mut |name, _| {
            assert!(grads.get(&name).is_some(), "no gradient entry for {name}");
            names += 1;
        });
        assert_eq!(grads.len(), names);
    }

    #[test]
    fn stream_state_advances_only_when_writing() {
        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 2).unwrap();
        let state = StreamState::init(&config);
        let grid = tiny_grid(config.feature_dim);
        let tokens = [3usize];

        let run = |opts: ForwardOptions| {
            let mut g = Graph::new();
            let nodes = params.register_all(&mut g).unwrap();
            let pass =
                build_forward(&mut g, &nodes, &config, &grid, &tokens, &state, opts).unwrap();
            let next = next_stream_state(&g, &pass, &state);
            (g.value(pass.probs).data().to_vec(), next)
        };

        let (probs_on, next_on) = run(ForwardOptions {
            external_memory: true,
            write_memory: true,
        });
        assert_ne!(next_on.memory.memory, state.memory.memory);
        assert_ne!(next_on.controller.h, state.controller.h);

        let (probs_frozen, next_frozen) = run(ForwardOptions {
            external_memory: true,
            write_memory: false,
        });
        assert_eq!(next_frozen.memory.memory, state.memory.memory);
        assert_eq!(next_frozen.memory.usage, state.memory.usage);
        // Reads still happen, so read weights update.
        assert_ne!(next_frozen.memory.read, state.memory.read);

        let (probs_off, _) = run(ForwardOptions {
            external_memory: false,
            write_memory: false,
        });
        // From a fresh state the frozen read returns the epsilon fill, which
        // is not the zero vector, so the two arms see different inputs; on a
        // fresh memory the difference is tiny but the distributions cannot
        // be expected to match bit for bit.
        assert_eq!(probs_on.len(), probs_off.len());
        assert_eq!(probs_on, probs_frozen);
    }

    #[test]
    fn forward_rejects_feature_width_mismatch() {
        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 3).unwrap();
        let state = StreamState::init(&config);
        let grid = tiny_grid(config.feature_dim + 2);
        let mut g = Graph::new();
        let nodes = params.register_all(&mut g).unwrap();
        assert!(build_forward(
            &mut g,
            &nodes,
            &config,
            &grid,
            &[1],
            &state,
            ForwardOptions {
                external_memory: true,
                write_memory: true,
            },
        )
        .is_err());
    }

    #[test]
    fn single_step_model_gradients_pass_finite_difference() {
        use crate::numeric::gradient_check_params;
        use std::collections::BTreeMap;

        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 5).unwrap();
        let grid = tiny_grid(config.feature_dim);
        let tokens = [2usize, 4];
        // A mid-training state: run two writing steps from init first.
        let mut state = StreamState::init(&config);
        for _ in 0..2 {
            let mut g = Graph::new();
            let nodes = params.register_all(&mut g).unwrap();
            let pass = build_forward(
                &mut g,
                &nodes,
                &config,
                &grid,
                &tokens,
                &state,
                ForwardOptions {
                    external_memory: true,
                    write_memory: true,
                },
            )
            .unwrap();
            state = next_stream_state(&g, &pass, &state);
        }

        let mut point = BTreeMap::new();
        params.visit(&mut |name, t| {
            point.insert(name, t.clone());
        });
        let config2 = config.clone();
        let report = gradient_check_params(
            |g, nodes| {
                let rebuilt = nodes_from_map(nodes, &config2);
                let pass = build_forward(
                    g,
                    &rebuilt,
                    &config2,
                    &grid,
                    &tokens,
                    &state,
                    ForwardOptions {
                        external_memory: true,
                        write_memory: true,
                    },
                )?;
                crate::head::loss_label(g, pass.probs, 1)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.flagged().first().map(|e| (&e.param, e.index))
        );
    }
}
