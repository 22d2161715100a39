//! Paired comparison of the full model against the no-memory arm over
//! several seeds. Each seed generates one task; both arms train on the
//! same data with the same seed, so the memory path is the only
//! difference.

use super::{evaluate, train, EvalMode, TrainConfig};
use crate::data::{generate_synth_task, load_task_dir, SynthManifest, SynthTaskConfig};
use crate::numeric::Scalar;
use crate::Result;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AblationConfig {
    /// Task template; the seed field is replaced per run.
    pub synth: SynthTaskConfig,
    /// Training template; seed and the memory flag are replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub mode: EvalMode,
}

/// Test accuracies of both arms for one seed.
#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub with_overall: f64,
    pub with_rare: f64,
    pub without_overall: f64,
    pub without_rare: f64,
}

/// Seed-averaged accuracies of one arm.
#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub mean_overall: f64,
    pub mean_rare: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub outcomes: Vec<SeedOutcome>,
    pub with_memory: ArmSummary,
    pub without_memory: ArmSummary,
    /// Mean rare-class accuracy advantage of the memory arm.
    pub rare_gap: f64,
    /// Mean overall accuracy advantage of the memory arm.
    pub overall_gap: f64,
}

/// Runs the paired comparison. Task data for seed `s` lands in
/// `work_dir/seed-{s}` and is shared by both arms.
pub fn run_ablation<T: Scalar>(config: &AblationConfig, work_dir: &Path) -> Result<AblationReport> {
    let mut outcomes = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut synth = config.synth.clone();
        synth.seed = seed;
        let task_dir = work_dir.join(format!("seed-{seed}"));
        generate_synth_task(&synth, &task_dir)?;
        let task = load_task_dir::<T>(&task_dir, config.train.vocab_k)?;
        let manifest = SynthManifest::load(&task_dir.join("manifest.json"))?;
        let rare: BTreeSet<String> = manifest
            .rare_class_ids
            .iter()
            .filter_map(|&id| manifest.answer_of(id).map(str::to_string))
            .collect();

        let run_arm = |memory: bool| -> Result<(f64, f64)> {
            let mut tc = config.train.clone();
            tc.seed = seed;
            tc.external_memory_enabled = memory;
            let ckpt = train(&tc, &task.train, &task.words, &task.answers, task.coverage)?;
            let report = evaluate(&ckpt, &task.test, config.mode, Some(&rare))?;
            let rare_acc = report.rare.as_ref().map_or(0.0, |g| g.accuracy);
            Ok((report.overall_accuracy, rare_acc))
        };
        let (with_overall, with_rare) = run_arm(true)?;
        let (without_overall, without_rare) = run_arm(false)?;
        outcomes.push(SeedOutcome {
            seed,
            with_overall,
            with_rare,
            without_overall,
            without_rare,
        });
    }

    let mean = |f: &dyn Fn(&SeedOutcome) -> f64| -> f64 {
        outcomes.iter().map(|o| f(o)).sum::<f64>() / outcomes.len().max(1) as f64
    };
    let with_memory = ArmSummary {
        mean_overall: mean(&|o| o.with_overall),
        mean_rare: mean(&|o| o.with_rare),
    };
    let without_memory = ArmSummary {
        mean_overall: mean(&|o| o.without_overall),
        mean_rare: mean(&|o| o.without_rare),
    };
    Ok(AblationReport {
        rare_gap: with_memory.mean_rare - without_memory.mean_rare,
        overall_gap: with_memory.mean_overall - without_memory.mean_overall,
        with_memory,
        without_memory,
        outcomes,
    })
}
