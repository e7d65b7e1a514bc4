//! Task union and the on-disk task file format.
//!
//! A task file is a single JSON object:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "task_id": "mdp-0003",
//!   "metadata": { "generator": "energy_mdp", "seed": 17, "params": { ... } },
//!   "task": { "kind": "mdp", "transition": [[[...]]], "reward": [[...]], ... }
//! }
//! ```
//!
//! Kernels are nested arrays indexed `[state][action][outcome]`. Floats are
//! written in shortest round-trip decimal form, so reading a file back
//! reproduces every value bit for bit.

use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::DarkroomTask;
use crate::error::{Error, Result};
use crate::model::{AmbiguousPomdp, Kernel, TabularMdp, TabularPomdp};

pub const TASK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Mdp(TabularMdp),
    Pomdp(TabularPomdp),
    Apomdp(AmbiguousPomdp),
    Darkroom(DarkroomTask),
}

/// Borrowed view of the dynamics a rollout samples from.
#[derive(Debug, Clone)]
pub struct EnvModel<'a> {
    pub transition: Cow<'a, Kernel>,
    /// `None` when the latent state is observed directly.
    pub observation: Option<Cow<'a, Kernel>>,
    pub reward: Cow<'a, [Vec<f64>]>,
    pub initial: Cow<'a, [f64]>,
    pub horizon: usize,
    pub discount: f64,
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Mdp(_) => "mdp",
            Task::Pomdp(_) => "pomdp",
            Task::Apomdp(_) => "apomdp",
            Task::Darkroom(_) => "darkroom",
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Task::Mdp(m) => m.num_actions(),
            Task::Pomdp(p) => p.mdp().num_actions(),
            Task::Apomdp(a) => a.num_actions(),
            Task::Darkroom(_) => DarkroomTask::NUM_ACTIONS,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Task::Mdp(m) => m.num_states(),
            Task::Pomdp(p) => p.mdp().num_states(),
            Task::Apomdp(a) => a.num_states(),
            Task::Darkroom(d) => d.num_cells(),
        }
    }

    /// Size of the agent-visible observation space.
    pub fn num_obs(&self) -> usize {
        match self {
            Task::Mdp(m) => m.num_states(),
            Task::Pomdp(p) => p.num_obs(),
            Task::Apomdp(a) => a.num_obs(),
            Task::Darkroom(d) => d.num_cells(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Task::Mdp(m) => m.horizon(),
            Task::Pomdp(p) => p.mdp().horizon(),
            Task::Apomdp(a) => a.horizon(),
            Task::Darkroom(d) => d.horizon,
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            Task::Mdp(m) => m.discount(),
            Task::Pomdp(p) => p.mdp().discount(),
            Task::Apomdp(a) => a.discount(),
            Task::Darkroom(_) => 1.0,
        }
    }

    /// Dynamics of model `model` (only meaningful for APOMDPs; other tasks
    /// have a single model).
    pub fn env_model(&self, model: usize) -> Result<EnvModel<'_>> {
        Ok(match self {
            Task::Mdp(m) => EnvModel {
                transition: Cow::Borrowed(m.transition()),
                observation: None,
                reward: Cow::Borrowed(m.rewards()),
                initial: Cow::Borrowed(m.initial_dist()),
                horizon: m.horizon(),
                discount: m.discount(),
            },
            Task::Pomdp(p) => EnvModel {
                transition: Cow::Borrowed(p.mdp().transition()),
                observation: Some(Cow::Borrowed(p.observation())),
                reward: Cow::Borrowed(p.mdp().rewards()),
                initial: Cow::Borrowed(p.mdp().initial_dist()),
                horizon: p.mdp().horizon(),
                discount: p.mdp().discount(),
            },
            Task::Apomdp(a) => {
                let pair = a.models().get(model).ok_or_else(|| {
                    Error::invalid(format!("model {model} outside ambiguity set of {}", a.models().len()))
                })?;
                EnvModel {
                    transition: Cow::Borrowed(&pair.transition),
                    observation: Some(Cow::Borrowed(&pair.observation)),
                    reward: Cow::Borrowed(a.rewards()),
                    initial: Cow::Borrowed(a.initial_dist()),
                    horizon: a.horizon(),
                    discount: a.discount(),
                }
            }
            Task::Darkroom(d) => {
                let mdp = d.to_mdp()?;
                EnvModel {
                    transition: Cow::Owned(mdp.transition().clone()),
                    observation: None,
                    reward: Cow::Owned(mdp.rewards().to_vec()),
                    initial: Cow::Owned(mdp.initial_dist().to_vec()),
                    horizon: mdp.horizon(),
                    discount: mdp.discount(),
                }
            }
        })
    }

    pub fn num_models(&self) -> usize {
        match self {
            Task::Apomdp(a) => a.models().len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskMetadata {
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub schema_version: u32,
    pub task_id: String,
    pub metadata: TaskMetadata,
    pub task: Task,
}

impl TaskFile {
    pub fn new(task_id: impl Into<String>, metadata: TaskMetadata, task: Task) -> Self {
        Self {
            schema_version: TASK_SCHEMA_VERSION,
            task_id: task_id.into(),
            metadata,
            task,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaskFile = serde_json::from_str(text)?;
        if file.schema_version != TASK_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported task schema version {}",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
