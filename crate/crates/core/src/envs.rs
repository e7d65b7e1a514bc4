//! Task generators: the energy-management MDP/POMDP/APOMDP family and the
//! Darkroom grid world.

use serde::{Deserialize, Serialize};

use crate::belief::kl_divergence;
use crate::error::{Error, Result};
use crate::model::{AmbiguousPomdp, Kernel, ModelPair, TabularMdp, TabularPomdp};
use crate::rng::Rng;

pub const CHARGE: usize = 0;
pub const WORK: usize = 1;
pub const CHARGE_ALT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDist {
    /// Uniform over `{0, ..., E}`.
    Uniform,
    /// Always start at the given energy level.
    State(usize),
}

/// Parameters of one energy-management task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    pub energy_cap: usize,
    pub charge_cost: f64,
    pub success_prob: f64,
    pub obs_prob: f64,
    pub horizon: usize,
    pub discount: f64,
    pub initial: InitialDist,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            energy_cap: 9,
            charge_cost: -0.02,
            success_prob: 0.75,
            obs_prob: 1.0,
            horizon: 10,
            discount: 0.95,
            initial: InitialDist::Uniform,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if self.energy_cap == 0 {
            return Err(Error::config("energy_cap", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.success_prob) {
            return Err(Error::config("success_prob", "must lie in [0, 1]"));
        }
        if !(self.obs_prob > 0.0 && self.obs_prob <= 1.0) {
            return Err(Error::config("obs_prob", "must lie in (0, 1]"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config("discount", "must lie in (0, 1]"));
        }
        if !self.charge_cost.is_finite() {
            return Err(Error::config("charge_cost", "must be finite"));
        }
        if let InitialDist::State(s) = self.initial {
            if s > self.energy_cap {
                return Err(Error::config("initial", "state exceeds energy_cap"));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.energy_cap + 1
    }
}

/// Draws task parameters: `success_prob ~ U[p_low, p_high)`, everything else
/// copied from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyTaskSampler {
    pub base: EnergyParams,
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for EnergyTaskSampler {
    fn default() -> Self {
        Self {
            base: EnergyParams::default(),
            p_low: 0.5,
            p_high: 1.0,
        }
    }
}

impl EnergyTaskSampler {
    pub fn sample(&self, rng: &mut Rng) -> EnergyParams {
        EnergyParams {
            success_prob: rng.uniform_range(self.p_low, self.p_high),
            ..self.base.clone()
        }
    }
}

fn energy_transition(params: &EnergyParams) -> Result<Kernel> {
    let e = params.energy_cap;
    let p = params.success_prob;
    Kernel::from_fn(e + 1, 3, e + 1, |s, a| {
        let mut row = vec![0.0; e + 1];
        let target = if a == WORK { s.saturating_sub(1) } else { (s + 1).min(e) };
        row[target] += p;
        row[s] += 1.0 - p;
        row
    })
}

/// Energy-management MDP. Actions 0 and 2 charge, action 1 works.
pub fn gen_energy_mdp(params: &EnergyParams) -> Result<TabularMdp> {
    params.validate()?;
    let e = params.energy_cap;
    let reward = (0..=e)
        .map(|s| {
            let mut r = vec![params.charge_cost; 3];
            r[WORK] = s as f64 / e as f64;
            r
        })
        .collect();
    let initial = match params.initial {
        InitialDist::Uniform => vec![1.0 / (e + 1) as f64; e + 1],
        InitialDist::State(s) => {
            let mut v = vec![0.0; e + 1];
            v[s] = 1.0;
            v
        }
    };
    TabularMdp::new(energy_transition(params)?, reward, initial, params.horizon, params.discount)
}

/// Action-independent emission: the true level with probability `q`, each
/// other level with `(1-q)/E`.
pub fn energy_observation(params: &EnergyParams) -> Result<Kernel> {
    let e = params.energy_cap;
    let q = params.obs_prob;
    let off = (1.0 - q) / e as f64;
    Kernel::from_fn(e + 1, 3, e + 1, |s, _| {
        let mut row = vec![off; e + 1];
        row[s] = q;
        row
    })
}

pub fn gen_energy_pomdp(params: &EnergyParams) -> Result<TabularPomdp> {
    TabularPomdp::new(gen_energy_mdp(params)?, energy_observation(params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmbiguityConfig {
    pub num_models: usize,
    pub kl_radius: f64,
    pub dirichlet_concentration: f64,
    pub max_attempts: usize,
    pub perturb_transition: bool,
    pub perturb_emission: bool,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self {
            num_models: 3,
            kl_radius: 0.2,
            dirichlet_concentration: 100.0,
            max_attempts: 10_000,
            perturb_transition: true,
            perturb_emission: true,
        }
    }
}

impl AmbiguityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_models == 0 {
            return Err(Error::config("num_models", "must be at least 1"));
        }
        if !(self.kl_radius >= 0.0) {
            return Err(Error::config("kl_radius", "must be non-negative"));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return Err(Error::config("dirichlet_concentration", "must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be positive"));
        }
        Ok(())
    }
}

/// Dirichlet draw with concentration `scale * base`. Zero entries stay zero.
pub fn dirichlet_around(base: &[f64], scale: f64, rng: &mut Rng) -> Option<Vec<f64>> {
    let mut out: Vec<f64> = base
        .iter()
        .map(|&b| if b > 0.0 { rng.gamma(scale * b) } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return None;
    }
    out.iter_mut().for_each(|x| *x /= z);
    Some(out)
}

/// Rejection-samples a perturbed row with `KL(base || candidate) <= radius`.
pub fn perturb_row(
    base: &[f64],
    cfg: &AmbiguityConfig,
    rng: &mut Rng,
) -> Option<Vec<f64>> {
    for _ in 0..cfg.max_attempts {
        let Some(cand) = dirichlet_around(base, cfg.dirichlet_concentration, rng) else {
            continue;
        };
        if matches!(kl_divergence(base, &cand), Ok(kl) if kl <= cfg.kl_radius) {
            return Some(cand);
        }
    }
    None
}

/// Largest row-wise `KL(base || candidate)` over both kernels.
pub fn max_row_kl(base: &ModelPair, cand: &ModelPair) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (kb, kc) in [
        (&base.transition, &cand.transition),
        (&base.observation, &cand.observation),
    ] {
        for s in 0..kb.num_states() {
            for a in 0..kb.num_actions() {
                worst = worst.max(kl_divergence(kb.row(s, a), kc.row(s, a))?);
            }
        }
    }
    Ok(worst)
}

/// Perturbs a kernel row-by-row. Rows of actions listed in `tied` copy the
/// row of the action they are tied to, so physically identical actions stay
/// identical in every model.
fn perturb_kernel(
    kernel: &Kernel,
    kind: &'static str,
    tied: &dyn Fn(usize) -> usize,
    cfg: &AmbiguityConfig,
    rng: &mut Rng,
) -> Result<Kernel> {
    let (ns, na) = (kernel.num_states(), kernel.num_actions());
    let mut rows = vec![vec![Vec::new(); na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let src = tied(a);
            if src != a {
                continue;
            }
            rows[s][a] = perturb_row(kernel.row(s, a), cfg, rng).ok_or(Error::SamplingExhausted {
                kernel: kind,
                state: s,
                action: a,
                attempts: cfg.max_attempts,
            })?;
        }
        for a in 0..na {
            let src = tied(a);
            if src != a {
                rows[s][a] = rows[s][src].clone();
            }
        }
    }
    Kernel::from_rows(rows)
}

/// Energy APOMDP: model 0 is the POMDP from `params`, further models are
/// Dirichlet perturbations accepted inside the KL ball.
pub fn gen_energy_apomdp(
    params: &EnergyParams,
    cfg: &AmbiguityConfig,
    alpha: f64,
    rng: &mut Rng,
) -> Result<AmbiguousPomdp> {
    cfg.validate()?;
    let pomdp = gen_energy_pomdp(params)?;
    let base = ModelPair {
        transition: pomdp.mdp().transition().clone(),
        observation: pomdp.observation().clone(),
    };
    let mut models = vec![base.clone()];
    let charge_tie = |a: usize| if a == CHARGE_ALT { CHARGE } else { a };
    // The emission kernel does not depend on the action.
    let emission_tie = |_: usize| 0;
    for _ in 1..cfg.num_models {
        let transition = if cfg.perturb_transition {
            perturb_kernel(&base.transition, "transition", &charge_tie, cfg, rng)?
        } else {
            base.transition.clone()
        };
        let observation = if cfg.perturb_emission {
            perturb_kernel(&base.observation, "emission", &emission_tie, cfg, rng)?
        } else {
            base.observation.clone()
        };
        models.push(ModelPair {
            transition,
            observation,
        });
    }
    let mdp = pomdp.mdp();
    AmbiguousPomdp::new(
        models,
        mdp.rewards().to_vec(),
        mdp.initial_dist().to_vec(),
        mdp.horizon(),
        mdp.discount(),
        alpha,
    )
}

pub const DARKROOM_SIZE: usize = 10;
pub const DARKROOM_HORIZON: usize = 100;

/// Darkroom moves. North decreases `y`, south increases it.
pub const NORTH: usize = 0;
pub const SOUTH: usize = 1;
pub const WEST: usize = 2;
pub const EAST: usize = 3;
pub const STAY: usize = 4;

/// Grid world with a hidden goal; reward 1 only for staying on the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkroomTask {
    pub grid_size: usize,
    pub goal: (usize, usize),
    pub horizon: usize,
}

impl DarkroomTask {
    pub const NUM_ACTIONS: usize = 5;

    pub fn new(grid_size: usize, goal: (usize, usize), horizon: usize) -> Result<Self> {
        if grid_size == 0 || horizon == 0 {
            return Err(Error::invalid("darkroom grid and horizon must be positive"));
        }
        if goal.0 >= grid_size || goal.1 >= grid_size {
            return Err(Error::invalid(format!("goal {goal:?} outside {grid_size}x{grid_size} grid")));
        }
        Ok(Self {
            grid_size,
            goal,
            horizon,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell_index(&self, (x, y): (usize, usize)) -> usize {
        y * self.grid_size + x
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.grid_size, index / self.grid_size)
    }

    /// Deterministic move; walls leave the position unchanged.
    pub fn step(&self, (x, y): (usize, usize), action: usize) -> (usize, usize) {
        let max = self.grid_size - 1;
        match action {
            NORTH => (x, y.saturating_sub(1)),
            SOUTH => (x, (y + 1).min(max)),
            WEST => (x.saturating_sub(1), y),
            EAST => ((x + 1).min(max), y),
            _ => (x, y),
        }
    }

    pub fn reward(&self, pos: (usize, usize), action: usize) -> f64 {
        if action == STAY && pos == self.goal {
            1.0
        } else {
            0.0
        }
    }

    /// Equivalent tabular MDP over cells, starting at `(0, 0)`, undiscounted.
    pub fn to_mdp(&self) -> Result<TabularMdp> {
        let n = self.num_cells();
        let transition = Kernel::from_fn(n, Self::NUM_ACTIONS, n, |s, a| {
            let mut row = vec![0.0; n];
            row[self.cell_index(self.step(self.cell(s), a))] = 1.0;
            row
        })?;
        let reward = (0..n)
            .map(|s| (0..Self::NUM_ACTIONS).map(|a| self.reward(self.cell(s), a)).collect())
            .collect();
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        TabularMdp::new(transition, reward, initial, self.horizon, 1.0)
    }
}

pub fn gen_darkroom(goal: (usize, usize)) -> Result<DarkroomTask> {
    DarkroomTask::new(DARKROOM_SIZE, goal, DARKROOM_HORIZON)
}

/// Seeded 80/20 split of the 100 Darkroom goal cells.
pub fn split_darkroom_goals(rng: &mut Rng) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut cells: Vec<(usize, usize)> = (0..DARKROOM_SIZE)
        .flat_map(|y| (0..DARKROOM_SIZE).map(move |x| (x, y)))
        .collect();
    rng.shuffle(&mut cells);
    let test = cells.split_off(80);
    (cells, test)
}
