//! In-context sequential decision-making laboratory.

pub mod belief;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod solvers;
pub mod task;
pub mod theory;

pub use belief::{belief_predictive, belief_update, kl_divergence, Belief};
pub use error::{Error, Result};
pub use model::{AmbiguousPomdp, Kernel, ModelPair, Step, TabularMdp, TabularPomdp, Trajectory};
pub use rng::Rng;
pub use rollout::{rollout, FewShotContext, PolicyHandle};
pub use task::{Task, TaskFile, TaskMetadata};
