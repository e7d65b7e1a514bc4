use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seqlab::envs::{AmbiguityConfig, EnergyParams};
use seqlab::eval::{GridSpec, Setting, SupportPolicy, TaskSpec};
use seqlab::rollout::{ClientConfig, ModelChoice};
use seqlab::solvers::BeliefSolverConfig;
use seqlab::theory::E2Config;
use seqlab::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingKind {
    Mdp,
    Pomdp,
    Apomdp,
    Darkroom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Sft,
    Dpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSet {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    pub format: CorpusFormat,
    pub trajectories_per_task: usize,
    /// Demonstration policy: `oracle`, `random` or `qmdp`.
    pub policy: String,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            format: CorpusFormat::Sft,
            trajectories_per_task: 10,
            policy: "oracle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Defaults to 90 for APOMDPs and 30 otherwise.
    pub rollouts_per_task: Option<usize>,
    pub num_support: usize,
    pub support_policy: SupportPolicy,
    pub model: ModelChoice,
    /// When set, `eval` runs this grid instead of the generated tasks.
    pub grid: Option<GridSpec>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rollouts_per_task: None,
            num_support: 2,
            support_policy: SupportPolicy::Oracle,
            model: ModelChoice::Base,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DarkroomOptions {
    pub goals: GoalSet,
    pub rollouts_per_goal: usize,
}

impl Default for DarkroomOptions {
    fn default() -> Self {
        Self {
            goals: GoalSet::Test,
            rollouts_per_goal: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientOptions {
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        let c = ClientConfig::default();
        Self {
            timeout_secs: c.timeout.as_secs_f64(),
            retries: c.retries,
        }
    }
}

/// Effective configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub setting: SettingKind,
    pub num_tasks: usize,
    pub env: EnergyParams,
    /// Success probability drawn from `[p_low, p_high)`.
    pub p_low: f64,
    pub p_high: f64,
    pub ambiguity: AmbiguityConfig,
    pub alpha: f64,
    pub solver: BeliefSolverConfig,
    pub dataset: DatasetOptions,
    pub eval: EvalOptions,
    pub darkroom: DarkroomOptions,
    pub theory: E2Config,
    /// `oracle`, `random`, `qmdp` or `external:<endpoint>`.
    pub policy: String,
    pub client: ClientOptions,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setting: SettingKind::Mdp,
            num_tasks: 10,
            env: EnergyParams::default(),
            p_low: 0.5,
            p_high: 1.0,
            ambiguity: AmbiguityConfig::default(),
            alpha: 0.5,
            solver: BeliefSolverConfig::default(),
            dataset: DatasetOptions::default(),
            eval: EvalOptions::default(),
            darkroom: DarkroomOptions::default(),
            theory: E2Config::default(),
            policy: "oracle".into(),
            client: ClientOptions::default(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn task_spec(&self) -> Option<TaskSpec> {
        let setting = match self.setting {
            SettingKind::Mdp => Setting::Mdp,
            SettingKind::Pomdp => Setting::Pomdp,
            SettingKind::Apomdp => Setting::Apomdp,
            SettingKind::Darkroom => return None,
        };
        Some(TaskSpec {
            setting,
            base: self.env.clone(),
            p_low: self.p_low,
            p_high: self.p_high,
            ambiguity: self.ambiguity.clone(),
            alpha: self.alpha,
        })
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            timeout: std::time::Duration::from_secs_f64(self.client.timeout_secs),
            retries: self.client.retries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = self.task_spec() {
            spec.validate()?;
        }
        if self.num_tasks == 0 {
            return Err(Error::Config {
                field: "num_tasks".into(),
                message: "must be positive".into(),
            });
        }
        self.solver.validate()?;
        if self.dataset.trajectories_per_task == 0 {
            return Err(Error::Config {
                field: "dataset.trajectories_per_task".into(),
                message: "must be positive".into(),
            });
        }
        if !matches!(self.dataset.policy.as_str(), "oracle" | "random" | "qmdp") {
            return Err(Error::Config {
                field: "dataset.policy".into(),
                message: format!("unknown policy `{}`", self.dataset.policy),
            });
        }
        if self.eval.rollouts_per_task == Some(0) {
            return Err(Error::Config {
                field: "eval.rollouts_per_task".into(),
                message: "must be positive".into(),
            });
        }
        if let Some(grid) = &self.eval.grid {
            grid.validate()?;
        }
        if self.darkroom.rollouts_per_goal == 0 {
            return Err(Error::Config {
                field: "darkroom.rollouts_per_goal".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.client.timeout_secs > 0.0 && self.client.timeout_secs.is_finite()) {
            return Err(Error::Config {
                field: "client.timeout_secs".into(),
                message: "must be positive".into(),
            });
        }
        if self.jobs == Some(0) {
            return Err(Error::Config {
                field: "jobs".into(),
                message: "must be positive".into(),
            });
        }
        self.theory.validate()?;
        seqlab::eval::PolicySpec::parse_with(&self.policy, self.client_config())?;
        Ok(())
    }
}
