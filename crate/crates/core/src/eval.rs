//! Optimality-gap evaluation.
//!
//! For each test task the oracle and the evaluated policy are rolled out with
//! the same rollout seeds, so the oracle's own gap is exactly zero and
//! environment noise largely cancels. Returns are discounted with the task's
//! discount. The per-task gap is `(OPT - OPT_eval) / OPT`; tasks with
//! `OPT <= 1e-9` are excluded and counted. Intervals are two-sided 95%
//! Student t intervals over per-task gaps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{build_context, rollout_seed, task_seed};
use crate::envs::{
    gen_darkroom, gen_energy_apomdp, gen_energy_mdp, gen_energy_pomdp, AmbiguityConfig, EnergyParams,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rollout::{
    rollout, ClientConfig, Endpoint, ExternalClient, FewShotContext, ModelChoice, Policy, PolicyHandle,
    RolloutOptions,
};
use crate::solvers::{BeliefSolverConfig, Oracle};
use crate::task::{Task, TaskFile, TaskMetadata};

/// Tasks whose optimal return is at or below this are excluded from gap means.
pub const DEGENERATE_OPT: f64 = 1e-9;

const CONTEXT_STREAM: u64 = 0xc0;

/// A test task with its oracle.
#[derive(Clone)]
pub struct EvalTask {
    pub file: TaskFile,
    pub oracle: Oracle,
}

impl EvalTask {
    pub fn solve(file: TaskFile, cfg: &BeliefSolverConfig) -> Result<Self> {
        let oracle = crate::solvers::solve_task(&file.task, cfg, true)?;
        Ok(Self { file, oracle })
    }

    /// Solves many tasks in parallel, keeping input order.
    pub fn solve_all(files: Vec<TaskFile>, cfg: &BeliefSolverConfig) -> Result<Vec<Self>> {
        files.into_par_iter().map(|f| Self::solve(f, cfg)).collect()
    }

    pub fn oracle_policy(&self) -> PolicyHandle {
        PolicyHandle::Oracle(self.oracle.clone())
    }
}

/// Which policy to evaluate, resolved per task.
#[derive(Clone)]
pub enum PolicySpec {
    Oracle,
    Random,
    Qmdp,
    External(Arc<ExternalClient>),
    Custom(Arc<dyn Policy>),
}

impl fmt::Debug for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Oracle => "oracle".into(),
            PolicySpec::Random => "random".into(),
            PolicySpec::Qmdp => "qmdp".into(),
            PolicySpec::External(c) => format!("external:{}", c.endpoint()),
            PolicySpec::Custom(_) => "custom".into(),
        }
    }

    pub fn resolve(&self, task: &EvalTask) -> Result<PolicyHandle> {
        Ok(match self {
            PolicySpec::Oracle => task.oracle_policy(),
            PolicySpec::Random => PolicyHandle::Random,
            PolicySpec::Qmdp => PolicyHandle::qmdp_for(&task.file.task)?,
            PolicySpec::External(c) => PolicyHandle::External(c.clone()),
            PolicySpec::Custom(p) => PolicyHandle::Custom(p.clone()),
        })
    }

    /// Parses `oracle`, `random`, `qmdp`, or `external:<endpoint>`.
    pub fn parse_with(s: &str, client: ClientConfig) -> Result<Self> {
        match s {
            "oracle" => Ok(PolicySpec::Oracle),
            "random" => Ok(PolicySpec::Random),
            "qmdp" => Ok(PolicySpec::Qmdp),
            _ => match s.strip_prefix("external:") {
                Some(ep) => Ok(PolicySpec::External(Arc::new(ExternalClient::new(
                    ep.parse::<Endpoint>()?,
                    client,
                )))),
                None => Err(Error::config("policy", format!("unknown policy `{s}`"))),
            },
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with(s, ClientConfig::default())
    }
}

/// Policy that generates few-shot support trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPolicy {
    #[default]
    Oracle,
    Random,
}

impl fmt::Display for SupportPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupportPolicy::Oracle => "oracle",
            SupportPolicy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Rollouts per task; `None` means 90 for APOMDPs and 30 otherwise.
    pub rollouts_per_task: Option<usize>,
    pub seed: u64,
    pub model: ModelChoice,
    pub num_support: usize,
    pub support_policy: SupportPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts_per_task: None,
            seed: 0,
            model: ModelChoice::Base,
            num_support: 2,
            support_policy: SupportPolicy::Oracle,
        }
    }
}

impl EvalConfig {
    pub fn rollouts_for(&self, task: &Task) -> usize {
        self.rollouts_per_task.unwrap_or(match task {
            Task::Apomdp(_) => 90,
            _ => 30,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    /// Mean oracle return.
    pub opt_reward: f64,
    /// Mean return of the evaluated policy under the same seeds.
    pub eval_reward: f64,
    /// `None` when the task was excluded as degenerate.
    pub gap: Option<f64>,
    /// Exact oracle value, when available (MDPs).
    pub dp_value: Option<f64>,
    pub rollouts: usize,
    pub invalid_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub per_task: Vec<TaskResult>,
    pub mean_gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Tasks entering the mean.
    pub n_eval: usize,
    /// Tasks excluded because `OPT <= 1e-9`.
    pub degenerate: usize,
    pub invalid_action_count: usize,
    /// Mean gap more than two half-widths below zero, which points at broken
    /// seed pairing.
    pub pairing_warning: bool,
}

/// Mean and two-sided Student t interval with `n - 1` degrees of freedom.
/// Fewer than two samples give an unbounded interval.
pub fn t_interval(values: &[f64], level: f64) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NEG_INFINITY, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + level / 2.0);
    (mean, mean - t * se, mean + t * se)
}

fn dp_value(task: &EvalTask) -> Result<Option<f64>> {
    Ok(match (&task.oracle, &task.file.task) {
        (Oracle::Mdp(sol), Task::Mdp(m)) => Some(sol.initial_value(m.initial_dist())),
        (Oracle::Mdp(sol), Task::Darkroom(d)) => Some(sol.initial_value(d.to_mdp()?.initial_dist())),
        _ => None,
    })
}

fn context_for(task: &EvalTask, cfg: &EvalConfig, tseed: u64) -> Result<FewShotContext> {
    let support = match cfg.support_policy {
        SupportPolicy::Oracle => task.oracle_policy(),
        SupportPolicy::Random => PolicyHandle::Random,
    };
    build_context(
        &task.file.task,
        &task.file.task_id,
        cfg.num_support,
        &support,
        Rng::derive_seed(tseed, CONTEXT_STREAM),
        &RolloutOptions {
            model: cfg.model,
            ..Default::default()
        },
    )
}

fn evaluate_task(task: &EvalTask, index: usize, spec: &PolicySpec, cfg: &EvalConfig) -> Result<TaskResult> {
    let tseed = task_seed(cfg.seed, index);
    let n = cfg.rollouts_for(&task.file.task);
    let opts = RolloutOptions {
        model: cfg.model,
        ..Default::default()
    };
    let context = context_for(task, cfg, tseed)?;
    let oracle = task.oracle_policy();
    let policy = spec.resolve(task)?;
    let (mut opt, mut eval, mut invalid) = (0.0, 0.0, 0);
    for k in 0..n {
        let seed = rollout_seed(tseed, k);
        let id = &task.file.task_id;
        opt += rollout(&task.file.task, id, &oracle, seed, Some(&context), &opts)?.discounted_return;
        let out = rollout(&task.file.task, id, &policy, seed, Some(&context), &opts)?;
        eval += out.discounted_return;
        invalid += out.invalid_actions;
    }
    let (opt, eval) = (opt / n as f64, eval / n as f64);
    Ok(TaskResult {
        task_id: task.file.task_id.clone(),
        opt_reward: opt,
        eval_reward: eval,
        gap: (opt > DEGENERATE_OPT).then(|| (opt - eval) / opt),
        dp_value: dp_value(task)?,
        rollouts: n,
        invalid_actions: invalid,
    })
}

/// Gap of `spec` on every task, paired against each task's oracle.
pub fn optimality_gap(tasks: &[EvalTask], spec: &PolicySpec, cfg: &EvalConfig) -> Result<EvalReport> {
    let per_task = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| evaluate_task(t, i, spec, cfg))
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = per_task.iter().filter_map(|r| r.gap).collect();
    let (mean_gap, ci_low, ci_high) = t_interval(&gaps, 0.95);
    let half = (ci_high - ci_low) / 2.0;
    Ok(EvalReport {
        policy: spec.name(),
        n_eval: gaps.len(),
        degenerate: per_task.len() - gaps.len(),
        invalid_action_count: per_task.iter().map(|r| r.invalid_actions).sum(),
        pairing_warning: mean_gap < -2.0 * half,
        per_task,
        mean_gap,
        ci_low,
        ci_high,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Mdp,
    Pomdp,
    Apomdp,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Mdp => "mdp",
            Setting::Pomdp => "pomdp",
            Setting::Apomdp => "apomdp",
        })
    }
}

/// Task family parameters shared by generation and grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub setting: Setting,
    pub base: EnergyParams,
    /// Success probability drawn uniformly from `[p_low, p_high)`.
    pub p_low: f64,
    pub p_high: f64,
    pub ambiguity: AmbiguityConfig,
    pub alpha: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            setting: Setting::Mdp,
            base: EnergyParams::default(),
            p_low: 0.5,
            p_high: 1.0,
            ambiguity: AmbiguityConfig::default(),
            alpha: 0.5,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_low && self.p_low < self.p_high && self.p_high <= 1.0) {
            return Err(Error::config("p_low/p_high", "need 0 <= p_low < p_high <= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        self.base.validate()?;
        if self.setting == Setting::Apomdp {
            self.ambiguity.validate()?;
        }
        Ok(())
    }

    /// Task `index` of the family rooted at `seed`.
    pub fn generate(&self, prefix: &str, index: usize, seed: u64) -> Result<TaskFile> {
        let task_seed = Rng::derive_seed(seed, index as u64);
        let mut rng = Rng::new(task_seed);
        let params = EnergyParams {
            success_prob: rng.uniform_range(self.p_low, self.p_high),
            obs_prob: if self.setting == Setting::Mdp { 1.0 } else { self.base.obs_prob },
            ..self.base.clone()
        };
        let task = match self.setting {
            Setting::Mdp => Task::Mdp(gen_energy_mdp(&params)?),
            Setting::Pomdp => Task::Pomdp(gen_energy_pomdp(&params)?),
            Setting::Apomdp => Task::Apomdp(gen_energy_apomdp(&params, &self.ambiguity, self.alpha, &mut rng)?),
        };
        let generator = format!("energy_{}", self.setting);
        let mut meta_params = serde_json::to_value(&params)?;
        if self.setting == Setting::Apomdp {
            meta_params["ambiguity"] = serde_json::to_value(&self.ambiguity)?;
            meta_params["alpha"] = serde_json::json!(self.alpha);
        }
        Ok(TaskFile::new(
            format!("{prefix}{index:04}"),
            TaskMetadata {
                generator,
                seed: Some(task_seed),
                params: meta_params,
            },
            task,
        ))
    }

    pub fn generate_many(&self, prefix: &str, count: usize, seed: u64) -> Result<Vec<TaskFile>> {
        (0..count).into_par_iter().map(|i| self.generate(prefix, i, seed)).collect()
    }
}

/// Cartesian experiment grid. Observation accuracy applies to POMDP and
/// APOMDP cells, ambiguity-set size and alpha only to APOMDP cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub settings: Vec<Setting>,
    pub horizons: Vec<usize>,
    pub obs_probs: Vec<f64>,
    pub num_models: Vec<usize>,
    pub alphas: Vec<f64>,
    pub support_policies: Vec<SupportPolicy>,
    pub support_counts: Vec<usize>,
    /// Success-probability ranges `(low, high)`; shifted ranges give
    /// out-of-distribution cells.
    pub p_ranges: Vec<(f64, f64)>,
    pub tasks_per_cell: usize,
    pub base: EnergyParams,
    pub ambiguity: AmbiguityConfig,
    pub solver: BeliefSolverConfig,
    pub rollouts_per_task: Option<usize>,
    pub model: ModelChoice,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            settings: vec![Setting::Mdp],
            horizons: vec![5, 10, 15],
            obs_probs: vec![0.8],
            num_models: vec![3],
            alphas: vec![0.5],
            support_policies: vec![SupportPolicy::Oracle],
            support_counts: vec![2],
            p_ranges: vec![(0.5, 1.0)],
            tasks_per_cell: 100,
            base: EnergyParams::default(),
            ambiguity: AmbiguityConfig::default(),
            solver: BeliefSolverConfig::default(),
            rollouts_per_task: None,
            model: ModelChoice::Base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub setting: Setting,
    pub horizon: usize,
    pub obs_prob: f64,
    pub num_models: usize,
    pub alpha: f64,
    pub support_policy: SupportPolicy,
    pub num_support: usize,
    pub p_low: f64,
    pub p_high: f64,
}

impl GridSpec {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &setting in &self.settings {
            for &horizon in &self.horizons {
                let qs = if setting == Setting::Mdp { vec![1.0] } else { self.obs_probs.clone() };
                for &obs_prob in &qs {
                    let ms = if setting == Setting::Apomdp { self.num_models.clone() } else { vec![1] };
                    let alphas = if setting == Setting::Apomdp { self.alphas.clone() } else { vec![1.0] };
                    for &num_models in &ms {
                        for &alpha in &alphas {
                            for &support_policy in &self.support_policies {
                                for &num_support in &self.support_counts {
                                    for &(p_low, p_high) in &self.p_ranges {
                                        out.push(GridCell {
                                            setting,
                                            horizon,
                                            obs_prob,
                                            num_models,
                                            alpha,
                                            support_policy,
                                            num_support,
                                            p_low,
                                            p_high,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.horizons.is_empty() || self.support_policies.is_empty() {
            return Err(Error::config("grid", "settings, horizons and support_policies must be non-empty"));
        }
        if self.support_counts.is_empty() || self.p_ranges.is_empty() {
            return Err(Error::config("grid", "support_counts and p_ranges must be non-empty"));
        }
        if self.tasks_per_cell == 0 {
            return Err(Error::config("tasks_per_cell", "must be positive"));
        }
        self.solver.validate()?;
        for cell in self.cells() {
            self.task_spec(&cell).validate()?;
        }
        Ok(())
    }

    fn task_spec(&self, cell: &GridCell) -> TaskSpec {
        TaskSpec {
            setting: cell.setting,
            base: EnergyParams {
                horizon: cell.horizon,
                obs_prob: cell.obs_prob,
                ..self.base.clone()
            },
            p_low: cell.p_low,
            p_high: cell.p_high,
            ambiguity: AmbiguityConfig {
                num_models: cell.num_models,
                ..self.ambiguity.clone()
            },
            alpha: cell.alpha,
        }
    }

    /// Tasks of one cell, seeded by the cell's coordinates in the grid.
    pub fn cell_tasks(&self, index: usize, cell: &GridCell, seed: u64) -> Result<Vec<TaskFile>> {
        self.task_spec(cell)
            .generate_many(&format!("cell{index:03}-"), self.tasks_per_cell, Rng::derive_seed(seed, index as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cell: GridCell,
    pub report: EvalReport,
}

pub fn run_experiment_grid(grid: &GridSpec, spec: &PolicySpec, seed: u64) -> Result<Vec<GridResult>> {
    grid.validate()?;
    grid.cells()
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            let tasks = EvalTask::solve_all(grid.cell_tasks(i, &cell, seed)?, &grid.solver)?;
            let cfg = EvalConfig {
                rollouts_per_task: grid.rollouts_per_task,
                seed: Rng::derive_seed(seed, (1 << 32) + i as u64),
                model: grid.model,
                num_support: cell.num_support,
                support_policy: cell.support_policy,
            };
            Ok(GridResult {
                report: optimality_gap(&tasks, spec, &cfg)?,
                cell,
            })
        })
        .collect()
}

pub const GRID_CSV_HEADER: &str = "cell,setting,T,q,num_models,alpha,support_policy,num_support,p_low,p_high,\
n_eval,degenerate,mean_gap,ci_low,ci_high,invalid_actions";

pub fn write_grid_csv(mut w: impl Write, results: &[GridResult]) -> Result<()> {
    writeln!(w, "{GRID_CSV_HEADER}")?;
    for (i, r) in results.iter().enumerate() {
        let c = &r.cell;
        writeln!(
            w,
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.setting,
            c.horizon,
            c.obs_prob,
            c.num_models,
            c.alpha,
            c.support_policy,
            c.num_support,
            c.p_low,
            c.p_high,
            r.report.n_eval,
            r.report.degenerate,
            r.report.mean_gap,
            r.report.ci_low,
            r.report.ci_high,
            r.report.invalid_action_count
        )?;
    }
    Ok(())
}

pub fn save_grid_csv(path: &Path, results: &[GridResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_grid_csv(&mut f, results)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub goal: (usize, usize),
    pub mean_reward: f64,
    pub oracle_reward: f64,
    pub random_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkroomReport {
    pub policy: String,
    pub per_goal: Vec<GoalResult>,
    pub mean_reward: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub oracle_mean: f64,
    pub random_mean: f64,
    pub invalid_action_count: usize,
}

/// Cumulative reward of `spec` from `(0, 0)` on each goal, with oracle and
/// random baselines under the same seeds.
pub fn darkroom_eval(spec: &PolicySpec, goals: &[(usize, usize)], rollouts_per_goal: usize, seed: u64) -> Result<DarkroomReport> {
    if rollouts_per_goal == 0 {
        return Err(Error::config("rollouts_per_goal", "must be positive"));
    }
    let results = goals
        .par_iter()
        .enumerate()
        .map(|(i, &goal)| {
            let file = TaskFile::new(
                format!("darkroom-{}-{}", goal.0, goal.1),
                TaskMetadata {
                    generator: "darkroom".into(),
                    seed: None,
                    params: serde_json::json!({ "goal": [goal.0, goal.1] }),
                },
                Task::Darkroom(gen_darkroom(goal)?),
            );
            let task = EvalTask::solve(file, &BeliefSolverConfig::default())?;
            let policy = spec.resolve(&task)?;
            let oracle = task.oracle_policy();
            let tseed = task_seed(seed, i);
            let context = context_for(&task, &EvalConfig::default(), tseed)?;
            let opts = RolloutOptions::default();
            let (mut own, mut opt, mut rnd, mut invalid) = (0.0, 0.0, 0.0, 0);
            for k in 0..rollouts_per_goal {
                let s = rollout_seed(tseed, k);
                let id = &task.file.task_id;
                let out = rollout(&task.file.task, id, &policy, s, Some(&context), &opts)?;
                own += out.trajectory.total_reward();
                invalid += out.invalid_actions;
                opt += rollout(&task.file.task, id, &oracle, s, Some(&context), &opts)?.trajectory.total_reward();
                rnd += rollout(&task.file.task, id, &PolicyHandle::Random, s, None, &opts)?.trajectory.total_reward();
            }
            let n = rollouts_per_goal as f64;
            Ok((
                GoalResult {
                    goal,
                    mean_reward: own / n,
                    oracle_reward: opt / n,
                    random_reward: rnd / n,
                },
                invalid,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = results.iter().map(|r| r.0.mean_reward).collect();
    let (mean_reward, ci_low, ci_high) = t_interval(&means, 0.95);
    let avg = |f: fn(&GoalResult) -> f64| results.iter().map(|r| f(&r.0)).sum::<f64>() / results.len().max(1) as f64;
    Ok(DarkroomReport {
        policy: spec.name(),
        oracle_mean: avg(|g| g.oracle_reward),
        random_mean: avg(|g| g.random_reward),
        invalid_action_count: results.iter().map(|r| r.1).sum(),
        per_goal: results.into_iter().map(|r| r.0).collect(),
        mean_reward,
        ci_low,
        ci_high,
    })
}
