//! Oracle policies.
//!
//! * [`solve_mdp`]: exact finite-horizon backward induction.
//! * [`solve_pomdp`] / [`solve_apomdp`]: depth-first backward induction over
//!   reachable beliefs, memoized on `(t, quantized belief)`. The APOMDP
//!   recursion is the alpha-maximin expected utility (alpha-MEU) Bellman
//!   equation
//!
//!   ```text
//!   V_t(b)      = max_a U_t(b, a)
//!   U_t(b, a)   = b.R(., a) + alpha * g * min_m H(b, a, m) + (1 - alpha) * g * max_m H(b, a, m)
//!   H(b, a, m)  = sum_o P(o | b, a, m) V_{t+1}(B(b, a, o, m))
//!   V_{T+1}     = 0
//!   ```
//!
//!   and a POMDP is the singleton case.
//! * [`QmdpPolicy`]: belief-weighted latent-MDP Q-values, used as a fallback
//!   when the belief solver runs out of node budget.
//!
//! Time is 0-based in code: `values[t]` is the value with `T - t` periods left.
//! Ties always go to the lowest action index.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::belief::{
    condition, dequantize, initial_posterior, initial_predictive, predict_states,
    predictive_from_prediction, quantize, Belief,
};
use crate::error::{Error, Result};
use crate::model::{AmbiguousPomdp, ModelPair, TabularMdp, TabularPomdp};
use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    /// `values[t][s]` for `t in 0..=T`; `values[T]` is identically zero.
    pub values: Vec<Vec<f64>>,
    /// `policy[t][s]` for `t in 0..T`.
    pub policy: Vec<Vec<usize>>,
    /// `q_values[t][s][a]` for `t in 0..T`.
    pub q_values: Vec<Vec<Vec<f64>>>,
}

impl MdpSolution {
    pub fn horizon(&self) -> usize {
        self.policy.len()
    }

    pub fn action(&self, t: usize, state: usize) -> usize {
        self.policy[t][state]
    }

    /// Expected return from the initial distribution.
    pub fn initial_value(&self, initial: &[f64]) -> f64 {
        initial.iter().zip(&self.values[0]).map(|(p, v)| p * v).sum()
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn solve_mdp(mdp: &TabularMdp) -> MdpSolution {
    let (n, na, horizon, gamma) = (mdp.num_states(), mdp.num_actions(), mdp.horizon(), mdp.discount());
    let p = mdp.transition();
    let mut values = vec![vec![0.0; n]; horizon + 1];
    let mut policy = vec![vec![0; n]; horizon];
    let mut q_values = vec![vec![vec![0.0; na]; n]; horizon];
    for t in (0..horizon).rev() {
        let (head, tail) = values.split_at_mut(t + 1);
        let next = &tail[0];
        for s in 0..n {
            let q = &mut q_values[t][s];
            for (a, qa) in q.iter_mut().enumerate() {
                let cont: f64 = p.row(s, a).iter().zip(next).map(|(pr, v)| pr * v).sum();
                *qa = mdp.reward(s, a) + gamma * cont;
            }
            let best = argmax(q);
            policy[t][s] = best;
            head[t][s] = q[best];
        }
    }
    MdpSolution {
        values,
        policy,
        q_values,
    }
}

/// Exact expected return of a Markov policy given as per-step action
/// distributions `policy(t, s) -> probs over actions`. Returns `values[t][s]`.
pub fn evaluate_markov_policy(
    mdp: &TabularMdp,
    mut policy: impl FnMut(usize, usize) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    let (n, horizon, gamma) = (mdp.num_states(), mdp.horizon(), mdp.discount());
    let p = mdp.transition();
    let mut values = vec![vec![0.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..n {
            let dist = policy(t, s);
            let mut v = 0.0;
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let cont: f64 = p.row(s, a).iter().zip(&values[t + 1]).map(|(pr, v)| pr * v).sum();
                v += pa * (mdp.reward(s, a) + gamma * cont);
            }
            values[t][s] = v;
        }
    }
    values
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefSolverConfig {
    /// Memo-key grid spacing on the simplex.
    pub quantization: f64,
    /// Maximum number of distinct memo entries.
    pub node_budget: usize,
    /// Observations with smaller predictive probability are skipped.
    pub obs_prune: f64,
}

impl Default for BeliefSolverConfig {
    fn default() -> Self {
        Self {
            quantization: 1e-3,
            node_budget: 5_000_000,
            obs_prune: 1e-12,
        }
    }
}

impl BeliefSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantization > 0.0 && self.quantization <= 1.0) {
            return Err(Error::config("quantization", "must lie in (0, 1]"));
        }
        if (1.0 / self.quantization).round() > u32::MAX as f64 {
            return Err(Error::config("quantization", "finer than the supported 2^-32 grid"));
        }
        if self.node_budget == 0 {
            return Err(Error::config("node_budget", "must be positive"));
        }
        if !(self.obs_prune >= 0.0 && self.obs_prune < 1.0) {
            return Err(Error::config("obs_prune", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of grid units per unit of probability mass.
    pub fn units(&self) -> u32 {
        (1.0 / self.quantization).round().max(1.0) as u32
    }
}

type Key = (u32, Box<[u32]>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Node {
    value: f64,
    action: usize,
}

type Memo = HashMap<Key, Node>;

/// The static part of a belief-space problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BeliefProblem {
    models: Vec<ModelPair>,
    reward: Vec<Vec<f64>>,
    initial: Vec<f64>,
    horizon: usize,
    discount: f64,
    alpha: f64,
}

impl BeliefProblem {
    /// `alias[a]` is the lowest action with the same rewards and dynamics as `a`
    /// under every model.
    fn action_aliases(&self) -> Vec<usize> {
        let na = self.reward[0].len();
        let n = self.initial.len();
        let same = |a: usize, b: usize| {
            self.reward.iter().all(|r| r[a] == r[b])
                && self.models.iter().all(|m| {
                    (0..n).all(|s| {
                        m.transition.row(s, a) == m.transition.row(s, b)
                            && m.observation.row(s, a) == m.observation.row(s, b)
                    })
                })
        };
        (0..na).map(|a| (0..a).find(|&b| same(a, b)).unwrap_or(a)).collect()
    }
}

struct Search<'a> {
    problem: &'a BeliefProblem,
    aliases: Vec<usize>,
    cfg: &'a BeliefSolverConfig,
    units: u32,
    base: Option<&'a Memo>,
    memo: &'a mut Memo,
    budget: usize,
}

impl Search<'_> {
    fn lookup(&self, key: &Key) -> Option<Node> {
        self.memo
            .get(key)
            .or_else(|| self.base.and_then(|b| b.get(key)))
            .copied()
    }

    fn key(&self, t: usize, belief: &[f64]) -> Key {
        (t as u32, quantize(belief, self.units).into_boxed_slice())
    }

    fn value(&mut self, t: usize, belief: &[f64]) -> Result<f64> {
        if t >= self.problem.horizon {
            return Ok(0.0);
        }
        Ok(self.node(self.key(t, belief), belief)?.value)
    }

    fn node(&mut self, key: Key, exact: &[f64]) -> Result<Node> {
        if let Some(node) = self.lookup(&key) {
            return Ok(node);
        }
        let t = key.0 as usize;
        let belief = Belief::from_raw(exact.to_vec());
        let utilities = self.utilities(t, &belief)?;
        let action = argmax(&utilities);
        let node = Node {
            value: utilities[action],
            action,
        };
        if self.memo.len() >= self.budget {
            return Err(Error::BudgetExceeded { budget: self.budget });
        }
        self.memo.insert(key, node);
        Ok(node)
    }

    /// `U_t(b, a)` for every action.
    fn utilities(&mut self, t: usize, belief: &Belief) -> Result<Vec<f64>> {
        let problem = self.problem;
        let na = problem.reward[0].len();
        let last = t + 1 >= problem.horizon;
        let mut out = Vec::with_capacity(na);
        for a in 0..na {
            if self.aliases[a] != a {
                out.push(out[self.aliases[a]]);
                continue;
            }
            let immediate = belief.expect(|s| problem.reward[s][a]);
            if last {
                out.push(immediate);
                continue;
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut single = 0.0;
            for model in &problem.models {
                let h = self.continuation(t, belief, a, model)?;
                lo = lo.min(h);
                hi = hi.max(h);
                single = h;
            }
            let cont = if problem.models.len() == 1 {
                single
            } else {
                problem.alpha * lo + (1.0 - problem.alpha) * hi
            };
            out.push(immediate + problem.discount * cont);
        }
        Ok(out)
    }

    /// `H(b, a, m)`: expected next-period value under model `m`.
    fn continuation(&mut self, t: usize, belief: &Belief, action: usize, model: &ModelPair) -> Result<f64> {
        let next = predict_states(belief, action, &model.transition);
        let predictive = predictive_from_prediction(&next, action, &model.observation);
        let kept: f64 = predictive.iter().filter(|&&p| p >= self.cfg.obs_prune && p > 0.0).sum();
        if kept <= 0.0 {
            return Ok(0.0);
        }
        let mut h = 0.0;
        for (o, &p) in predictive.iter().enumerate() {
            if p < self.cfg.obs_prune || p <= 0.0 {
                continue;
            }
            let Some(post) = condition(&next, action, o, &model.observation) else {
                continue;
            };
            h += (p / kept) * self.value(t + 1, post.probs())?;
        }
        Ok(h)
    }
}

/// Solved belief-space problem: memo table plus the model needed to extend it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustSolution {
    problem: BeliefProblem,
    config: BeliefSolverConfig,
    #[serde(with = "memo_serde")]
    memo: Memo,
    initial_value: f64,
}

mod memo_serde {
    use super::{Key, Memo, Node};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        t: u32,
        key: Vec<u32>,
        value: f64,
        action: usize,
    }

    pub fn serialize<S: Serializer>(memo: &Memo, s: S) -> Result<S::Ok, S::Error> {
        let mut entries: Vec<Entry> = memo
            .iter()
            .map(|((t, key), n)| Entry {
                t: *t,
                key: key.to_vec(),
                value: n.value,
                action: n.action,
            })
            .collect();
        entries.sort_by(|a, b| (a.t, &a.key).cmp(&(b.t, &b.key)));
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Memo, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                let key: Key = (e.t, e.key.into_boxed_slice());
                (key, Node { value: e.value, action: e.action })
            })
            .collect())
    }
}

/// One stored node, for audits and export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeliefNode {
    pub t: usize,
    pub belief: Vec<f64>,
    pub value: f64,
    pub action: usize,
}

impl RobustSolution {
    fn solve(problem: BeliefProblem, config: BeliefSolverConfig) -> Result<Self> {
        config.validate()?;
        let mut memo = Memo::new();
        let initial_value = {
            let mut search = Search {
                problem: &problem,
                aliases: problem.action_aliases(),
                cfg: &config,
                units: config.units(),
                base: None,
                memo: &mut memo,
                budget: config.node_budget,
            };
            let first_obs = &problem.models[0].observation;
            let mut total = 0.0;
            for (o, p) in initial_predictive(&problem.initial, first_obs).into_iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let post = initial_posterior(&problem.initial, o, first_obs)?;
                total += p * search.value(0, post.probs())?;
            }
            total
        };
        Ok(Self {
            problem,
            config,
            memo,
            initial_value,
        })
    }

    pub fn config(&self) -> &BeliefSolverConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.problem.horizon
    }

    pub fn alpha(&self) -> f64 {
        self.problem.alpha
    }

    pub fn num_actions(&self) -> usize {
        self.problem.reward[0].len()
    }

    pub fn num_states(&self) -> usize {
        self.problem.initial.len()
    }

    pub fn num_models(&self) -> usize {
        self.problem.models.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.memo.len()
    }

    /// Expected value before the first observation, with the first emission
    /// drawn from the base model.
    pub fn initial_value(&self) -> f64 {
        self.initial_value
    }

    pub fn quantized(&self, belief: &Belief) -> Belief {
        let units = self.config.units();
        dequantize(&quantize(belief.probs(), units), units)
    }

    fn with_search<R>(&self, f: impl FnOnce(&mut Search<'_>) -> Result<R>) -> Result<R> {
        let mut overlay = Memo::new();
        let mut search = Search {
            problem: &self.problem,
            aliases: self.problem.action_aliases(),
            cfg: &self.config,
            units: self.config.units(),
            base: Some(&self.memo),
            memo: &mut overlay,
            budget: self.config.node_budget,
        };
        f(&mut search)
    }

    fn check_belief(&self, t: usize, belief: &Belief) -> Result<()> {
        if t >= self.problem.horizon {
            return Err(Error::invalid(format!("time {t} beyond horizon {}", self.problem.horizon)));
        }
        if belief.len() != self.problem.initial.len() {
            return Err(Error::DimensionMismatch("belief length".into()));
        }
        Ok(())
    }

    /// `V_t(b)`. A belief shares the stored value of the first belief solved in
    /// its quantization cell; cells not reached during solving are solved on
    /// demand without mutating `self`.
    pub fn value(&self, t: usize, belief: &Belief) -> Result<f64> {
        self.check_belief(t, belief)?;
        self.with_search(|s| s.value(t, belief.probs()))
    }

    /// Optimal action at `(t, belief)`.
    pub fn action(&self, t: usize, belief: &Belief) -> Result<usize> {
        self.check_belief(t, belief)?;
        self.with_search(|s| {
            let key = s.key(t, belief.probs());
            Ok(s.node(key, belief.probs())?.action)
        })
    }

    /// `U_t(b, a)` for every action, with continuation values from the memo.
    pub fn action_values(&self, t: usize, belief: &Belief) -> Result<Vec<f64>> {
        self.check_belief(t, belief)?;
        self.with_search(|s| s.utilities(t, belief))
    }

    /// Stored nodes in deterministic order.
    pub fn nodes(&self) -> Vec<BeliefNode> {
        let units = self.config.units();
        let mut out: Vec<_> = self
            .memo
            .iter()
            .map(|((t, key), n)| BeliefNode {
                t: *t as usize,
                belief: dequantize(key, units).probs().to_vec(),
                value: n.value,
                action: n.action,
            })
            .collect();
        out.sort_by(|a, b| {
            a.t.cmp(&b.t)
                .then_with(|| b.belief.iter().zip(&a.belief).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
        });
        out
    }
}

pub fn solve_pomdp(pomdp: &TabularPomdp, cfg: &BeliefSolverConfig) -> Result<RobustSolution> {
    let mdp = pomdp.mdp();
    RobustSolution::solve(
        BeliefProblem {
            models: vec![ModelPair {
                transition: mdp.transition().clone(),
                observation: pomdp.observation().clone(),
            }],
            reward: mdp.rewards().to_vec(),
            initial: mdp.initial_dist().to_vec(),
            horizon: mdp.horizon(),
            discount: mdp.discount(),
            alpha: 1.0,
        },
        cfg.clone(),
    )
}

pub fn solve_apomdp(apomdp: &AmbiguousPomdp, cfg: &BeliefSolverConfig) -> Result<RobustSolution> {
    RobustSolution::solve(
        BeliefProblem {
            models: apomdp.models().to_vec(),
            reward: apomdp.rewards().to_vec(),
            initial: apomdp.initial_dist().to_vec(),
            horizon: apomdp.horizon(),
            discount: apomdp.discount(),
            alpha: apomdp.alpha(),
        },
        cfg.clone(),
    )
}

/// Approximate POMDP control: `argmax_a sum_s b(s) Q_t^MDP(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmdpPolicy {
    q_values: Vec<Vec<Vec<f64>>>,
}

impl QmdpPolicy {
    pub fn new(pomdp: &TabularPomdp) -> Self {
        Self::from_mdp(pomdp.mdp())
    }

    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        Self {
            q_values: solve_mdp(mdp).q_values,
        }
    }

    pub fn horizon(&self) -> usize {
        self.q_values.len()
    }

    pub fn num_states(&self) -> usize {
        self.q_values.first().map_or(0, |q| q.len())
    }

    pub fn num_actions(&self) -> usize {
        self.q_values.first().map_or(0, |q| q[0].len())
    }

    pub fn action(&self, belief: &Belief, t: usize) -> usize {
        let q = &self.q_values[t];
        let na = q[0].len();
        let scores: Vec<f64> = (0..na).map(|a| belief.expect(|s| q[s][a])).collect();
        argmax(&scores)
    }
}

pub fn qmdp_policy(pomdp: &TabularPomdp) -> QmdpPolicy {
    QmdpPolicy::new(pomdp)
}

/// An oracle policy bound to one task.
#[derive(Debug, Clone)]
pub enum Oracle {
    Mdp(Arc<MdpSolution>),
    Belief(Arc<RobustSolution>),
    /// QMDP fallback used when the belief solver exceeded its budget.
    Qmdp(Arc<QmdpPolicy>),
}

impl Oracle {
    pub fn is_exact(&self) -> bool {
        !matches!(self, Oracle::Qmdp(_))
    }
}

/// Solves any task. With `fallback_to_qmdp`, a belief solver that runs out of
/// budget yields a QMDP policy on the (base-model) latent MDP instead of an error.
pub fn solve_task(task: &Task, cfg: &BeliefSolverConfig, fallback_to_qmdp: bool) -> Result<Oracle> {
    let outcome = match task {
        Task::Mdp(m) => return Ok(Oracle::Mdp(Arc::new(solve_mdp(m)))),
        Task::Darkroom(d) => return Ok(Oracle::Mdp(Arc::new(solve_mdp(&d.to_mdp()?)))),
        Task::Pomdp(p) => solve_pomdp(p, cfg),
        Task::Apomdp(a) => solve_apomdp(a, cfg),
    };
    match outcome {
        Ok(sol) => Ok(Oracle::Belief(Arc::new(sol))),
        Err(Error::BudgetExceeded { .. }) if fallback_to_qmdp => {
            let latent = match task {
                Task::Pomdp(p) => p.mdp().clone(),
                Task::Apomdp(a) => a.member(0)?.mdp().clone(),
                _ => unreachable!(),
            };
            Ok(Oracle::Qmdp(Arc::new(QmdpPolicy::from_mdp(&latent))))
        }
        Err(e) => Err(e),
    }
}

/// JSON audit record for a solved task.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionExport {
    pub task_id: String,
    pub kind: &'static str,
    pub initial_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<BeliefSolverConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<BeliefNode>>,
}

impl SolutionExport {
    pub fn new(task_id: &str, task: &Task, oracle: &Oracle, include_nodes: bool) -> Result<Self> {
        Ok(match oracle {
            Oracle::Mdp(sol) => {
                let initial = match task {
                    Task::Mdp(m) => m.initial_dist().to_vec(),
                    Task::Darkroom(d) => d.to_mdp()?.initial_dist().to_vec(),
                    _ => return Err(Error::invalid("MDP solution for a belief-space task")),
                };
                SolutionExport {
                    task_id: task_id.into(),
                    kind: "mdp",
                    initial_value: sol.initial_value(&initial),
                    values: Some(sol.values.clone()),
                    policy: Some(sol.policy.clone()),
                    config: None,
                    node_count: None,
                    nodes: None,
                }
            }
            Oracle::Belief(sol) => SolutionExport {
                task_id: task_id.into(),
                kind: "belief",
                initial_value: sol.initial_value(),
                values: None,
                policy: None,
                config: Some(sol.config().clone()),
                node_count: Some(sol.num_nodes()),
                nodes: include_nodes.then(|| sol.nodes()),
            },
            Oracle::Qmdp(_) => SolutionExport {
                task_id: task_id.into(),
                kind: "qmdp",
                initial_value: f64::NAN,
                values: None,
                policy: None,
                config: None,
                node_count: None,
                nodes: None,
            },
        })
    }
}
