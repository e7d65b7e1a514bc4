//! Finite task models shared by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when validating probability vectors.
pub const PROB_TOL: f64 = 1e-9;

const RENORM_SLACK: f64 = 1e-12;

/// Checks a probability vector and renormalizes it in place. Entries within
/// tolerance of zero from below are clamped.
pub fn normalize_checked(v: &mut [f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for x in v.iter_mut() {
        if !x.is_finite() {
            return Err(Error::invalid(format!("{what}: non-finite entry")));
        }
        if *x < 0.0 {
            if *x < -PROB_TOL {
                return Err(Error::invalid(format!("{what}: negative entry {x}")));
            }
            *x = 0.0;
        }
        sum += *x;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(format!("{what}: sums to {sum}, expected 1")));
    }
    // Rows already normalized up to rounding are left untouched so that
    // loading a saved model reproduces it bit for bit.
    if (sum - 1.0).abs() > RENORM_SLACK {
        v.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(())
}

/// Conditional distribution tensor `[state][action] -> distribution over outcomes`,
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct Kernel {
    states: usize,
    actions: usize,
    outcomes: usize,
    data: Vec<f64>,
}

impl Kernel {
    /// Builds a kernel from nested rows, validating and renormalizing each row.
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let states = rows.len();
        if states == 0 {
            return Err(Error::invalid("kernel has no states"));
        }
        let actions = rows[0].len();
        if actions == 0 {
            return Err(Error::invalid("kernel has no actions"));
        }
        let outcomes = rows[0][0].len();
        if outcomes == 0 {
            return Err(Error::invalid("kernel has empty rows"));
        }
        let mut data = Vec::with_capacity(states * actions * outcomes);
        for (s, per_action) in rows.into_iter().enumerate() {
            if per_action.len() != actions {
                return Err(Error::DimensionMismatch(format!(
                    "state {s} has {} actions, expected {actions}",
                    per_action.len()
                )));
            }
            for (a, mut row) in per_action.into_iter().enumerate() {
                if row.len() != outcomes {
                    return Err(Error::DimensionMismatch(format!(
                        "row ({s},{a}) has length {}, expected {outcomes}",
                        row.len()
                    )));
                }
                normalize_checked(&mut row, &format!("kernel row ({s},{a})"))?;
                data.extend(row);
            }
        }
        Ok(Self {
            states,
            actions,
            outcomes,
            data,
        })
    }

    /// Builds a kernel from a row generator.
    pub fn from_fn(
        states: usize,
        actions: usize,
        outcomes: usize,
        mut row: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let rows = (0..states)
            .map(|s| (0..actions).map(|a| row(s, a)).collect())
            .collect();
        let k = Self::from_rows(rows)?;
        if k.outcomes != outcomes {
            return Err(Error::DimensionMismatch(format!(
                "rows have length {}, expected {outcomes}",
                k.outcomes
            )));
        }
        Ok(k)
    }

    /// Kernel with `P(o|s,a) = 1{o = s}`.
    pub fn identity(states: usize, actions: usize) -> Self {
        let mut data = vec![0.0; states * actions * states];
        for s in 0..states {
            for a in 0..actions {
                data[(s * actions + a) * states + s] = 1.0;
            }
        }
        Self {
            states,
            actions,
            outcomes: states,
            data,
        }
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    pub fn num_outcomes(&self) -> usize {
        self.outcomes
    }

    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.actions + action) * self.outcomes;
        &self.data[start..start + self.outcomes]
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize, outcome: usize) -> f64 {
        self.row(state, action)[outcome]
    }

    pub fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.states)
            .map(|s| (0..self.actions).map(|a| self.row(s, a).to_vec()).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for Kernel {
    type Error = Error;
    fn try_from(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Kernel::from_rows(rows)
    }
}

impl From<Kernel> for Vec<Vec<Vec<f64>>> {
    fn from(k: Kernel) -> Self {
        k.to_rows()
    }
}

fn check_rewards(reward: &[Vec<f64>], states: usize, actions: usize) -> Result<()> {
    if reward.len() != states {
        return Err(Error::DimensionMismatch(format!(
            "reward has {} states, expected {states}",
            reward.len()
        )));
    }
    for (s, row) in reward.iter().enumerate() {
        if row.len() != actions {
            return Err(Error::DimensionMismatch(format!(
                "reward row {s} has {} actions, expected {actions}",
                row.len()
            )));
        }
        if row.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("reward row {s} has a non-finite entry")));
        }
    }
    Ok(())
}

fn check_horizon_discount(horizon: usize, discount: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::invalid(format!("discount {discount} outside (0, 1]")));
    }
    Ok(())
}

/// Finite-horizon tabular MDP with time-homogeneous kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct TabularMdp {
    transition: Kernel,
    reward: Vec<Vec<f64>>,
    initial: Vec<f64>,
    horizon: usize,
    discount: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMdp {
    transition: Kernel,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
    horizon: usize,
    discount: f64,
}

impl TryFrom<RawMdp> for TabularMdp {
    type Error = Error;
    fn try_from(r: RawMdp) -> Result<Self> {
        TabularMdp::new(r.transition, r.reward, r.initial_dist, r.horizon, r.discount)
    }
}

impl From<TabularMdp> for RawMdp {
    fn from(m: TabularMdp) -> Self {
        RawMdp {
            transition: m.transition,
            reward: m.reward,
            initial_dist: m.initial,
            horizon: m.horizon,
            discount: m.discount,
        }
    }
}

impl TabularMdp {
    pub fn new(
        transition: Kernel,
        reward: Vec<Vec<f64>>,
        mut initial: Vec<f64>,
        horizon: usize,
        discount: f64,
    ) -> Result<Self> {
        let n = transition.num_states();
        if transition.num_outcomes() != n {
            return Err(Error::DimensionMismatch(
                "transition rows must range over states".into(),
            ));
        }
        check_rewards(&reward, n, transition.num_actions())?;
        if initial.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "initial distribution has length {}, expected {n}",
                initial.len()
            )));
        }
        normalize_checked(&mut initial, "initial distribution")?;
        check_horizon_discount(horizon, discount)?;
        Ok(Self {
            transition,
            reward,
            initial,
            horizon,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.transition.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.transition.num_actions()
    }

    pub fn transition(&self) -> &Kernel {
        &self.transition
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state][action]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Same model with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        check_horizon_discount(horizon, self.discount)?;
        Ok(Self {
            horizon,
            ..self.clone()
        })
    }
}

/// Tabular POMDP: latent MDP plus an observation kernel `Q(o | s', a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPomdp", into = "RawPomdp")]
pub struct TabularPomdp {
    mdp: TabularMdp,
    observation: Kernel,
}

#[derive(Serialize, Deserialize)]
struct RawPomdp {
    mdp: TabularMdp,
    observation: Kernel,
}

impl TryFrom<RawPomdp> for TabularPomdp {
    type Error = Error;
    fn try_from(r: RawPomdp) -> Result<Self> {
        TabularPomdp::new(r.mdp, r.observation)
    }
}

impl From<TabularPomdp> for RawPomdp {
    fn from(p: TabularPomdp) -> Self {
        RawPomdp {
            mdp: p.mdp,
            observation: p.observation,
        }
    }
}

impl TabularPomdp {
    pub fn new(mdp: TabularMdp, observation: Kernel) -> Result<Self> {
        if observation.num_states() != mdp.num_states()
            || observation.num_actions() != mdp.num_actions()
        {
            return Err(Error::DimensionMismatch(
                "observation kernel must be indexed by the MDP's states and actions".into(),
            ));
        }
        Ok(Self { mdp, observation })
    }

    /// Fully observed POMDP equivalent to `mdp`.
    pub fn fully_observed(mdp: TabularMdp) -> Self {
        let observation = Kernel::identity(mdp.num_states(), mdp.num_actions());
        Self { mdp, observation }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn observation(&self) -> &Kernel {
        &self.observation
    }

    pub fn num_obs(&self) -> usize {
        self.observation.num_outcomes()
    }
}

/// One member of an ambiguity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub transition: Kernel,
    pub observation: Kernel,
}

/// POMDP whose kernels are only known to lie in a finite ambiguity set.
/// The first model is the base (nominal) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawApomdp", into = "RawApomdp")]
pub struct AmbiguousPomdp {
    models: Vec<ModelPair>,
    reward: Vec<Vec<f64>>,
    initial: Vec<f64>,
    horizon: usize,
    discount: f64,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct RawApomdp {
    models: Vec<ModelPair>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
    horizon: usize,
    discount: f64,
    alpha: f64,
}

impl TryFrom<RawApomdp> for AmbiguousPomdp {
    type Error = Error;
    fn try_from(r: RawApomdp) -> Result<Self> {
        AmbiguousPomdp::new(
            r.models,
            r.reward,
            r.initial_dist,
            r.horizon,
            r.discount,
            r.alpha,
        )
    }
}

impl From<AmbiguousPomdp> for RawApomdp {
    fn from(a: AmbiguousPomdp) -> Self {
        RawApomdp {
            models: a.models,
            reward: a.reward,
            initial_dist: a.initial,
            horizon: a.horizon,
            discount: a.discount,
            alpha: a.alpha,
        }
    }
}

impl AmbiguousPomdp {
    pub fn new(
        models: Vec<ModelPair>,
        reward: Vec<Vec<f64>>,
        mut initial: Vec<f64>,
        horizon: usize,
        discount: f64,
        alpha: f64,
    ) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::invalid("ambiguity set is empty"))?;
        let (n, na, no) = (
            first.transition.num_states(),
            first.transition.num_actions(),
            first.observation.num_outcomes(),
        );
        for (i, m) in models.iter().enumerate() {
            let t = &m.transition;
            let o = &m.observation;
            if t.num_states() != n
                || t.num_actions() != na
                || t.num_outcomes() != n
                || o.num_states() != n
                || o.num_actions() != na
                || o.num_outcomes() != no
            {
                return Err(Error::DimensionMismatch(format!(
                    "model {i} dimensions differ from model 0"
                )));
            }
        }
        check_rewards(&reward, n, na)?;
        if initial.len() != n {
            return Err(Error::DimensionMismatch("initial distribution length".into()));
        }
        normalize_checked(&mut initial, "initial distribution")?;
        check_horizon_discount(horizon, discount)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            models,
            reward,
            initial,
            horizon,
            discount,
            alpha,
        })
    }

    /// Singleton ambiguity set around `pomdp`.
    pub fn from_pomdp(pomdp: &TabularPomdp, alpha: f64) -> Result<Self> {
        let mdp = pomdp.mdp();
        Self::new(
            vec![ModelPair {
                transition: mdp.transition().clone(),
                observation: pomdp.observation().clone(),
            }],
            mdp.rewards().to_vec(),
            mdp.initial_dist().to_vec(),
            mdp.horizon(),
            mdp.discount(),
            alpha,
        )
    }

    pub fn models(&self) -> &[ModelPair] {
        &self.models
    }

    pub fn base(&self) -> &ModelPair {
        &self.models[0]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_states(&self) -> usize {
        self.models[0].transition.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.models[0].transition.num_actions()
    }

    pub fn num_obs(&self) -> usize {
        self.models[0].observation.num_outcomes()
    }

    /// POMDP view of model `m`.
    pub fn member(&self, m: usize) -> Result<TabularPomdp> {
        let pair = &self.models[m];
        let mdp = TabularMdp::new(
            pair.transition.clone(),
            self.reward.clone(),
            self.initial.clone(),
            self.horizon,
            self.discount,
        )?;
        TabularPomdp::new(mdp, pair.observation.clone())
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.models.clone(),
            self.reward.clone(),
            self.initial.clone(),
            self.horizon,
            self.discount,
            alpha,
        )
    }
}

/// One period of a trajectory: observation, chosen action, realized reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `sum_t discount^(t-1) r_t`, accumulated in step order.
    pub fn discounted_return(&self, discount: f64) -> f64 {
        let mut ret = 0.0;
        let mut weight = 1.0;
        for step in &self.steps {
            ret += weight * step.reward;
            weight *= discount;
        }
        ret
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Checks indices against the given space sizes.
    pub fn validate(&self, num_obs: usize, num_actions: usize) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            if s.obs >= num_obs || s.action >= num_actions {
                return Err(Error::invalid(format!(
                    "step {} out of range: obs {} / {num_obs}, action {} / {num_actions}",
                    t + 1,
                    s.obs,
                    s.action
                )));
            }
            if !s.reward.is_finite() {
                return Err(Error::invalid(format!("step {} has non-finite reward", t + 1)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rejects_bad_rows() {
        assert!(Kernel::from_rows(vec![vec![vec![0.5, 0.4]]]).is_err());
        assert!(Kernel::from_rows(vec![vec![vec![1.1, -0.1]]]).is_err());
        assert!(Kernel::from_rows(vec![vec![vec![1.0, 0.0]], vec![vec![1.0]]]).is_err());
    }

    #[test]
    fn kernel_renormalizes_within_tolerance() {
        let k = Kernel::from_rows(vec![vec![vec![0.5 + 4e-10, 0.5]]]).unwrap();
        let sum: f64 = k.row(0, 0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(Kernel::from_rows(vec![vec![vec![0.5 + 2e-9, 0.5]]]).is_err());
    }

    #[test]
    fn mdp_json_roundtrip_is_bit_exact() {
        let t = Kernel::from_rows(vec![
            vec![vec![1.0 / 3.0, 2.0 / 3.0]],
            vec![vec![0.1, 0.9]],
        ])
        .unwrap();
        let mdp = TabularMdp::new(t, vec![vec![0.3], vec![-0.02]], vec![0.5, 0.5], 4, 0.95).unwrap();
        let json = serde_json::to_string(&mdp).unwrap();
        let back: TabularMdp = serde_json::from_str(&json).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let mdp = TabularMdp::new(
            Kernel::identity(2, 1),
            vec![vec![0.0], vec![1.0]],
            vec![1.0, 0.0],
            2,
            1.0,
        )
        .unwrap();
        let pomdp = TabularPomdp::fully_observed(mdp);
        assert!(AmbiguousPomdp::from_pomdp(&pomdp, 1.5).is_err());
        assert!(AmbiguousPomdp::from_pomdp(&pomdp, 1.0).is_ok());
    }

    #[test]
    fn discounted_return_accumulates_in_order() {
        let mut t = Trajectory::new("x");
        for r in [1.0, 2.0, 3.0] {
            t.steps.push(Step { obs: 0, action: 0, reward: r });
        }
        assert_eq!(t.discounted_return(0.5), 1.0 + 1.0 + 0.75);
        assert_eq!(t.total_reward(), 6.0);
    }
}
