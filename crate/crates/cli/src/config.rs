//! The run configuration document.
//!
//! Component seeds are not configured separately: each is derived from the
//! top-level `seed`, so one number reproduces a run.

use std::path::{Path, PathBuf};

use parpo_core::advantage::{AdvantageConfig, Estimator};
use parpo_core::reward_model::{CfConfig, Stage2TrainConfig};
use parpo_core::sim_env::{derive_seed, CompareConfig, EnvConfig, TrainConfig};
use parpo_core::skill_graph::RetrievalConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

const ENV_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const RM_STREAM: u64 = 2;
const BOUNDS_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Reward table to load instead of generating a world.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_file: Option<PathBuf>,
    pub env: EnvSection,
    pub train: TrainSection,
    pub advantage: AdvantageSection,
    pub compare: CompareConfig,
    pub bounds: BoundsSection,
    pub retrieval: RetrievalConfig,
    pub reward_model: RewardModelSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            world_file: None,
            env: EnvSection::default(),
            train: TrainSection::default(),
            advantage: AdvantageSection::default(),
            compare: CompareConfig::default(),
            bounds: BoundsSection::default(),
            retrieval: RetrievalConfig::default(),
            reward_model: RewardModelSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub alpha_mix: f64,
    pub noise_std: f64,
    pub heterogeneity_level: f64,
    pub population_size: usize,
    pub query_count: usize,
    pub candidate_count: usize,
    pub feature_dim: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        Self {
            alpha_mix: e.alpha_mix,
            noise_std: e.noise_std,
            heterogeneity_level: e.heterogeneity_level,
            population_size: e.population_size,
            query_count: e.query_count,
            candidate_count: e.candidate_count,
            feature_dim: e.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: Estimator,
    pub steps: usize,
    pub group_size: usize,
    pub queries_per_step: usize,
    pub step_size: f64,
    pub anchor_decay: f64,
    pub margin_coeff: f64,
    pub metric_decay: f64,
    /// One logit table for all users instead of one per user.
    pub shared_policy: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            steps: t.steps,
            group_size: t.group_size,
            queries_per_step: t.queries_per_step,
            step_size: t.step_size,
            anchor_decay: t.anchor_decay,
            margin_coeff: t.margin_coeff,
            metric_decay: t.metric_decay,
            shared_policy: false,
        }
    }
}

/// Advantage weights; defaults follow the training defaults rather than the
/// bare estimator defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageSection {
    pub w_base: f64,
    pub w_pers: f64,
    pub epsilon: f64,
    pub clip: f64,
}

impl Default for AdvantageSection {
    fn default() -> Self {
        let a = TrainConfig::default().advantage;
        Self {
            w_base: a.w_base,
            w_pers: a.w_pers,
            epsilon: a.epsilon,
            clip: a.clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub epsilon: f64,
    /// Uniform-policy batches used to warm the anchors.
    pub warmup_batches: usize,
    /// Users are split round-robin into this many groups for the group bound.
    pub groups: usize,
    /// Shift every anchor mean by this many anchor standard deviations.
    pub anchor_shift_sigma: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            warmup_batches: 20,
            groups: 2,
            anchor_shift_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelSection {
    /// Tab-separated `user_id item_id weight` file with a header row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub grad_check_h: f64,
    pub grad_check_rtol: f64,
    pub cf: CfConfig,
}

impl Default for RewardModelSection {
    fn default() -> Self {
        let t = Stage2TrainConfig::default();
        Self {
            interactions: None,
            steps: t.steps,
            step_size: t.step_size,
            batch_size: t.batch_size,
            grad_check_h: 1e-5,
            grad_check_rtol: 1e-4,
            cf: CfConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config file; relative paths inside it are taken relative to
    /// the file and made absolute so the resolved copy works from anywhere.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.absolutize(dir)?;
        Ok(cfg)
    }

    pub fn absolutize(&mut self, dir: &Path) -> Result<(), Failure> {
        let abs = |p: &Path| -> Result<PathBuf, Failure> {
            let joined = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
            std::path::absolute(&joined).map_err(|e| Failure::Usage(format!("bad path {}: {e}", p.display())))
        };
        self.out_dir = abs(&self.out_dir)?;
        if let Some(p) = &self.world_file {
            self.world_file = Some(abs(p)?);
        }
        if let Some(p) = &self.reward_model.interactions {
            self.reward_model.interactions = Some(abs(p)?);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn env_config(&self) -> EnvConfig {
        let e = &self.env;
        EnvConfig {
            alpha_mix: e.alpha_mix,
            noise_std: e.noise_std,
            heterogeneity_level: e.heterogeneity_level,
            population_size: e.population_size,
            query_count: e.query_count,
            candidate_count: e.candidate_count,
            feature_dim: e.feature_dim,
            seed: derive_seed(self.seed, ENV_STREAM),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let a = &self.advantage;
        TrainConfig {
            optimizer: t.optimizer,
            steps: t.steps,
            group_size: t.group_size,
            queries_per_step: t.queries_per_step,
            step_size: t.step_size,
            anchor_decay: t.anchor_decay,
            margin_coeff: t.margin_coeff,
            metric_decay: t.metric_decay,
            advantage: AdvantageConfig {
                w_base: a.w_base,
                w_pers: a.w_pers,
                epsilon: a.epsilon,
                clip: a.clip,
            },
            seed: derive_seed(self.seed, TRAIN_STREAM),
        }
    }

    pub fn rm_train_config(&self) -> Stage2TrainConfig {
        let r = &self.reward_model;
        Stage2TrainConfig {
            steps: r.steps,
            step_size: r.step_size,
            batch_size: r.batch_size,
            seed: derive_seed(self.seed, RM_STREAM),
        }
    }

    pub fn rm_init_seed(&self) -> u64 {
        derive_seed(derive_seed(self.seed, RM_STREAM), 1)
    }

    pub fn bounds_seed(&self) -> u64 {
        derive_seed(self.seed, BOUNDS_STREAM)
    }
}
