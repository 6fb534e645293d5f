//! Experiment configuration: one TOML document, unknown keys rejected.

use std::path::Path;

use motion_distill_core::bayesopt::{BoConfig, ObjectiveWeights, SearchSpace};
use motion_distill_core::diffusion::TeacherTrainConfig;
use motion_distill_core::distill::{DistillRunConfig, Stage};
use motion_distill_core::models::{StudentConfig, TeacherConfig};
use motion_distill_core::rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::DiffusionSetup;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub diffusion: DiffusionSection,
    pub teacher: TeacherSection,
    pub teacher_train: TrainSection,
    pub student: StudentSection,
    pub stage1: DistillSection,
    pub stage2: DistillSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub bayesopt: BayesOptSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub k_train: usize,
    pub schedule: String,
    /// Retained DCT rows `L`.
    pub retained: usize,
    /// Sampler steps of the teacher in distillation and evaluation.
    pub teacher_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub se_reduction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub se_reduction: usize,
    pub channel_expansion: usize,
    pub token_expansion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Samples `S` per observation.
    pub samples: usize,
    /// Multimodal ground-truth radius on the last observed frame.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub repeats: usize,
    pub warmup: usize,
    /// Futures drawn per timed run.
    pub batch: usize,
    /// Sampler steps when timing a multi-step model.
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    OneStep,
    MultiStep,
}

/// A named preset or an explicit list of dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceSpec {
    Preset(String),
    Custom(SearchSpace),
}

impl SpaceSpec {
    pub fn resolve(&self) -> CliResult<SearchSpace> {
        let space = match self {
            Self::Preset(p) if p == "primary" => SearchSpace::primary(),
            Self::Preset(p) if p == "secondary" => SearchSpace::secondary(),
            Self::Preset(p) => return Err(CliError::Usage(format!("unknown search-space preset {p:?}"))),
            Self::Custom(s) => s.clone(),
        };
        space.validate()?;
        let names: Vec<&str> = space.dims.iter().map(|d| d.name()).collect();
        if names != ["lr", "n_layers", "d_model"] {
            return Err(CliError::Usage(format!("search space must be [lr, n_layers, d_model], got {names:?}")));
        }
        Ok(space)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesOptSection {
    pub space: SpaceSpec,
    /// Total number of trials.
    pub budget: usize,
    pub parallel: usize,
    /// Stage-2 epochs per trial.
    pub trial_epochs: usize,
    pub trial_samples_per_epoch: usize,
    /// Held-out pairs for the objective.
    pub val_pairs: usize,
    pub reference: Reference,
    pub weights: ObjectiveWeights,
    pub n_init: usize,
    pub n_candidates: usize,
    pub n_refine: usize,
    pub restarts: usize,
}

/// Labels for seed derivation, one per consumer.
pub mod seeds {
    pub const TEACHER_INIT: u64 = 1;
    pub const TEACHER_TRAIN: u64 = 2;
    pub const STAGE1: u64 = 3;
    pub const STUDENT_INIT: u64 = 4;
    pub const STAGE2: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const BAYESOPT: u64 = 7;
    pub const BENCH: u64 = 8;
}

/// Sub-seed for one consumer of the experiment seed.
pub fn sub_seed(seed: u64, label: u64) -> u64 {
    rng::mix(seed ^ rng::mix(label))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = io::read_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.diffusion.teacher_steps == 0 || self.diffusion.teacher_steps > self.diffusion.k_train {
            return usage("diffusion.teacher_steps must be in 1..=k_train");
        }
        if self.eval.samples == 0 || !(self.eval.tau >= 0.0) {
            return usage("eval.samples must be positive and eval.tau non-negative");
        }
        if self.bench.repeats == 0 || self.bench.batch == 0 || self.bench.steps == 0 {
            return usage("bench.repeats, bench.batch and bench.steps must be positive");
        }
        let b = &self.bayesopt;
        if b.budget == 0 || b.parallel == 0 || b.trial_epochs == 0 || b.val_pairs == 0 {
            return usage("bayesopt budget, parallel, trial_epochs and val_pairs must be positive");
        }
        b.space.resolve()?;
        self.teacher_train(0).validate()?;
        self.distill(Stage::One).validate()?;
        self.distill(Stage::Two).validate()?;
        self.teacher_model(1).validate()?;
        self.student_model(1).validate()?;
        Ok(())
    }

    /// Canonical JSON rendering, used for `--print-config` and the hash.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        io::short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn setup(&self, observed: usize, future: usize) -> DiffusionSetup {
        DiffusionSetup {
            k_train: self.diffusion.k_train,
            schedule: self.diffusion.schedule.clone(),
            observed,
            future,
            retained: self.diffusion.retained,
            sampler_steps: self.diffusion.teacher_steps,
        }
    }

    pub fn teacher_model(&self, joints: usize) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            ffn_dim: t.ffn_dim,
            se_reduction: t.se_reduction,
            retained: self.diffusion.retained,
            joints,
        }
    }

    pub fn student_model(&self, joints: usize) -> StudentConfig {
        let s = &self.student;
        StudentConfig {
            n_layers: s.n_layers,
            d_model: s.d_model,
            se_reduction: s.se_reduction,
            retained: self.diffusion.retained,
            joints,
            channel_expansion: s.channel_expansion,
            token_expansion: s.token_expansion,
        }
    }

    pub fn teacher_train(&self, seed: u64) -> TeacherTrainConfig {
        let t = &self.teacher_train;
        TeacherTrainConfig {
            epochs: t.epochs,
            samples_per_epoch: t.samples_per_epoch,
            batch: t.batch,
            base_lr: t.base_lr,
            warmup_frac: t.warmup_frac,
            weight_decay: t.weight_decay,
            seed,
        }
    }

    pub fn distill(&self, stage: Stage) -> DistillRunConfig {
        let (s, label) = match stage {
            Stage::One => (&self.stage1, seeds::STAGE1),
            Stage::Two => (&self.stage2, seeds::STAGE2),
        };
        DistillRunConfig {
            stage,
            epochs: s.epochs,
            samples_per_epoch: s.samples_per_epoch,
            batch: s.batch,
            base_lr: s.base_lr,
            warmup_frac: s.warmup_frac,
            weight_decay: s.weight_decay,
            teacher_steps: self.diffusion.teacher_steps,
            val_fraction: s.val_fraction,
            seed: sub_seed(self.seed, label),
        }
    }

    pub fn bo_config(&self) -> BoConfig {
        let b = &self.bayesopt;
        BoConfig {
            n_init: b.n_init,
            n_candidates: b.n_candidates,
            n_refine: b.n_refine,
            restarts: b.restarts,
            seed: sub_seed(self.seed, seeds::BAYESOPT),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = include_str!("../../../configs/smoke.toml");

    #[test]
    fn shipped_configs_parse_and_validate() {
        for text in [SMOKE, include_str!("../../../configs/primary.toml"), include_str!("../../../configs/secondary.toml")] {
            let cfg: ExperimentConfig = toml::from_str(text).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SMOKE.replacen("seed =", "sede = 1\nseed =", 1);
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
        let text = SMOKE.replacen("[teacher]\n", "[teacher]\nwidth = 3\n", 1);
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let cfg: ExperimentConfig = toml::from_str(SMOKE).unwrap();
        let other = cfg.clone().with_seed(Some(cfg.seed + 1));
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(SpaceSpec::Preset("primary".into()).resolve().unwrap(), SearchSpace::primary());
        assert!(SpaceSpec::Preset("tertiary".into()).resolve().is_err());
    }
}
