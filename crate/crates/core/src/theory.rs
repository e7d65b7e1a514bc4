//! In-context Q-prediction with a single linear self-attention (LSA) layer.
//!
//! Tasks are linear: `Q*(s, a) = <phi(s, a), w*>` with `w* ~ N(0, I_d)` and
//! features `x ~ N(0, Lambda)`. A prompt holds `M` labelled pairs and a query.
//! The trained LSA layer predicts
//!
//! ```text
//! Q_hat(x_q) = x_q' Gamma^-1 (1/M) sum_i y_i x_i,
//! Gamma      = (1 + 1/N) Lambda + tr(Lambda)/N I_d
//! ```
//!
//! where `N` is the prompt length seen in training. This module samples
//! tasks and prompts, evaluates the closed form, the error and gap bounds,
//! trains an LSA layer by gradient descent, and runs the bound-validation
//! simulation over `(kappa, N, M)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest condition number accepted for a linear solve.
pub const CONDITION_LIMIT: f64 = 1e12;

fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    (eig.min(), eig.max())
}

/// `lambda_max / lambda_min` of a symmetric positive-definite matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eigen_extremes(m);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!("{what} must be a non-empty square matrix")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    if m.iter().any(|x| !x.is_finite()) || eigen_extremes(m).0 <= 0.0 {
        return Err(Error::invalid(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// Diagonal covariance with eigenvalues log-spaced from `1/kappa` to 1.
pub fn log_spaced_covariance(dim: usize, kappa: f64) -> DMatrix<f64> {
    let diag = (0..dim).map(|i| {
        if dim == 1 {
            1.0
        } else {
            (-(kappa.ln()) * (1.0 - i as f64 / (dim - 1) as f64)).exp()
        }
    });
    DMatrix::from_diagonal(&DVector::from_iterator(dim, diag))
}

/// A linear-Q task family member: weight `w*` and feature covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTask {
    pub dim: usize,
    pub weight: DVector<f64>,
    pub feature_cov: DMatrix<f64>,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    #[serde(skip)]
    cov_factor: Option<DMatrix<f64>>,
}

impl LinearTask {
    pub fn new(
        weight: DVector<f64>,
        feature_cov: DMatrix<f64>,
        num_actions: usize,
        horizon: usize,
        discount: f64,
    ) -> Result<Self> {
        check_spd(&feature_cov, "feature covariance")?;
        if weight.len() != feature_cov.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "weight of length {} for {}-dimensional features",
                weight.len(),
                feature_cov.nrows()
            )));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::invalid(format!("discount {discount} outside (0, 1]")));
        }
        let factor = Cholesky::new(feature_cov.clone())
            .ok_or_else(|| Error::invalid("feature covariance is not positive definite"))?
            .l();
        Ok(Self {
            dim: weight.len(),
            weight,
            feature_cov,
            num_actions,
            horizon,
            discount,
            cov_factor: Some(factor),
        })
    }

    /// Task with `w* ~ N(0, I_d)`.
    pub fn sample(feature_cov: DMatrix<f64>, num_actions: usize, horizon: usize, discount: f64, rng: &mut Rng) -> Result<Self> {
        let d = feature_cov.nrows();
        let w = DVector::from_fn(d, |_, _| rng.standard_normal());
        Self::new(w, feature_cov, num_actions, horizon, discount)
    }

    /// Feature vector `x ~ N(0, Lambda)`.
    pub fn sample_feature(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim, |_, _| rng.standard_normal());
        match &self.cov_factor {
            Some(l) => l * z,
            None => {
                let l = Cholesky::new(self.feature_cov.clone()).expect("validated covariance").l();
                l * z
            }
        }
    }

    pub fn q_value(&self, x: &DVector<f64>) -> f64 {
        self.weight.dot(x)
    }
}

/// In-context pairs `(x_i, y_i)` and a query feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    /// `d x M`, one column per example.
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub query: DVector<f64>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// `(1/M) sum_i y_i x_i`.
    pub fn moment(&self) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(self.xs.nrows());
        }
        (&self.xs * &self.ys) / self.len() as f64
    }
}

/// `m` noiseless pairs and a query, all features drawn from the task's Gaussian.
pub fn sample_prompt(task: &LinearTask, m: usize, rng: &mut Rng) -> Prompt {
    let mut xs = DMatrix::zeros(task.dim, m);
    let mut ys = DVector::zeros(m);
    for i in 0..m {
        let x = task.sample_feature(rng);
        ys[i] = task.q_value(&x);
        xs.set_column(i, &x);
    }
    let query = task.sample_feature(rng);
    Prompt { xs, ys, query }
}

/// `Gamma = (1 + 1/N) Lambda + tr(Lambda)/N I`.
pub fn gamma_matrix(feature_cov: &DMatrix<f64>, train_length: f64) -> DMatrix<f64> {
    let d = feature_cov.nrows();
    feature_cov * (1.0 + 1.0 / train_length) + DMatrix::identity(d, d) * (feature_cov.trace() / train_length)
}

/// Closed-form trained-LSA predictor.
#[derive(Debug, Clone)]
pub struct LsaPredictor {
    pub gamma_matrix: DMatrix<f64>,
    pub train_length: f64,
    chol: Cholesky<f64, Dyn>,
}

impl LsaPredictor {
    pub fn new(feature_cov: &DMatrix<f64>, train_length: f64) -> Result<Self> {
        check_spd(feature_cov, "feature covariance")?;
        if !(train_length >= 1.0) {
            return Err(Error::config("train_length", "must be at least 1"));
        }
        let gamma = gamma_matrix(feature_cov, train_length);
        let condition = condition_number(&gamma);
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::IllConditioned { condition });
        }
        let chol = Cholesky::new(gamma.clone()).ok_or(Error::IllConditioned { condition })?;
        Ok(Self {
            gamma_matrix: gamma,
            train_length,
            chol,
        })
    }

    /// `Gamma^-1 moment`, the implied linear weight.
    pub fn weights(&self, moment: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(moment)
    }

    pub fn predict_query(&self, moment: &DVector<f64>, query: &DVector<f64>) -> f64 {
        query.dot(&self.weights(moment))
    }
}

/// LSA prediction for a prompt.
pub fn lsa_predict(pred: &LsaPredictor, prompt: &Prompt) -> Result<f64> {
    let d = pred.gamma_matrix.nrows();
    if prompt.xs.nrows() != d || prompt.query.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "{}-dimensional prompt for a {d}-dimensional predictor",
            prompt.query.len()
        )));
    }
    Ok(pred.predict_query(&prompt.moment(), &prompt.query))
}

/// Q-error bound: `(d+1) tr / M + (1 + 2d + d^2 kappa) tr / N^2`.
pub fn q_error_bound(d: usize, feature_cov: &DMatrix<f64>, m: f64, n: f64) -> f64 {
    let tr = feature_cov.trace();
    let kappa = condition_number(feature_cov);
    let d = d as f64;
    (d + 1.0) * tr / m + (1.0 + 2.0 * d + d * d * kappa) * tr / (n * n)
}

/// `C_{T,gamma} = 2 (1 - gamma^T) / (1 - gamma)`, or `2T` when `gamma = 1`.
pub fn gap_constant(horizon: usize, discount: f64) -> f64 {
    if discount == 1.0 {
        2.0 * horizon as f64
    } else {
        2.0 * (1.0 - discount.powi(horizon as i32)) / (1.0 - discount)
    }
}

/// Gap bound: `C_{T,gamma} sqrt(C_on eps_q)`.
pub fn gap_bound(horizon: usize, discount: f64, c_on: f64, eps_q: f64) -> f64 {
    gap_constant(horizon, discount) * (c_on * eps_q).sqrt()
}

/// Smallest `(K_test, K)` guaranteeing an `eps`-optimal induced policy:
/// `K_test >= 8 C_on T (d+1) tr / eps^2`, `K >= sqrt(8 C_on (1+2d+d^2 kappa) tr) / eps`.
pub fn sample_complexity(eps: f64, horizon: usize, d: usize, feature_cov: &DMatrix<f64>, c_on: f64) -> Result<(u64, u64)> {
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let tr = feature_cov.trace();
    let kappa = condition_number(feature_cov);
    let df = d as f64;
    let k_test = 8.0 * c_on * horizon as f64 * (df + 1.0) * tr / (eps * eps);
    let k = (8.0 * c_on * (1.0 + 2.0 * df + df * df * kappa) * tr).sqrt() / eps;
    Ok((k_test.ceil() as u64, k.ceil() as u64))
}

/// One linear self-attention layer acting on the `(d+1) x (M+1)` embedding
/// `E = [x_1 .. x_M x_q; y_1 .. y_M 0]`:
/// `f(E) = E + W_PV E E' W_KQ E / M`. The prediction is the bottom-right entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaLayer {
    pub w_kq: DMatrix<f64>,
    pub w_pv: DMatrix<f64>,
}

impl LsaLayer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_kq: DMatrix::zeros(dim + 1, dim + 1),
            w_pv: DMatrix::zeros(dim + 1, dim + 1),
        }
    }

    /// Independent `N(0, init_scale^2)` entries.
    pub fn random(dim: usize, init_scale: f64, rng: &mut Rng) -> Self {
        let mut g = |_, _| init_scale * rng.standard_normal();
        let w_kq = DMatrix::from_fn(dim + 1, dim + 1, &mut g);
        let w_pv = DMatrix::from_fn(dim + 1, dim + 1, &mut g);
        Self { w_kq, w_pv }
    }

    pub fn dim(&self) -> usize {
        self.w_kq.nrows() - 1
    }

    /// `E E' / M`.
    fn gram(prompt: &Prompt) -> DMatrix<f64> {
        let d = prompt.xs.nrows();
        let mut g = DMatrix::zeros(d + 1, d + 1);
        let mut e = DVector::zeros(d + 1);
        for i in 0..prompt.len() {
            e.rows_mut(0, d).copy_from(&prompt.xs.column(i));
            e[d] = prompt.ys[i];
            g.ger(1.0, &e, &e, 1.0);
        }
        e.rows_mut(0, d).copy_from(&prompt.query);
        e[d] = 0.0;
        g.ger(1.0, &e, &e, 1.0);
        g / prompt.len().max(1) as f64
    }

    fn query_embedding(prompt: &Prompt) -> DVector<f64> {
        let d = prompt.query.len();
        let mut z = DVector::zeros(d + 1);
        z.rows_mut(0, d).copy_from(&prompt.query);
        z
    }

    pub fn predict(&self, prompt: &Prompt) -> f64 {
        let g = Self::gram(prompt);
        let z = Self::query_embedding(prompt);
        let p = self.w_pv.row(self.dim()).transpose();
        p.dot(&(&g * (&self.w_kq * z)))
    }

    /// Loss `(pred - target)^2 / 2` and its gradients `(dW_KQ, dW_PV)`.
    fn loss_and_grad(&self, prompt: &Prompt, target: f64) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let g = Self::gram(prompt);
        let z = Self::query_embedding(prompt);
        let p = self.w_pv.row(d).transpose();
        let gkz = &g * (&self.w_kq * &z);
        let r = p.dot(&gkz) - target;
        let gp = &g * &p;
        let d_kq = (&gp * z.transpose()) * r;
        let mut d_pv = DMatrix::zeros(d + 1, d + 1);
        d_pv.set_row(d, &(gkz.transpose() * r));
        (0.5 * r * r, d_kq, d_pv)
    }
}

/// Task distribution for training: fixed covariance, fresh `w*` per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTaskFamily {
    pub feature_cov: DMatrix<f64>,
}

impl LinearTaskFamily {
    pub fn sample(&self, rng: &mut Rng) -> Result<LinearTask> {
        LinearTask::sample(self.feature_cov.clone(), 1, 1, 1.0, rng)
    }

    /// Prompt of length `m` with its target `<w*, x_q>`.
    pub fn sample_labelled(&self, m: usize, rng: &mut Rng) -> Result<(Prompt, f64)> {
        let task = self.sample(rng)?;
        let prompt = sample_prompt(&task, m, rng);
        let target = task.q_value(&prompt.query);
        Ok((prompt, target))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Prompts per gradient step.
    pub batch: usize,
    /// Training prompt length `N`.
    pub prompt_len: usize,
    /// Fixed prompts on which the loss curve is monitored.
    pub validation_prompts: usize,
    /// Gradient steps per epoch; the validation loss is checked once per epoch.
    pub epoch_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 0.1,
            batch: 64,
            prompt_len: 20,
            validation_prompts: 4096,
            epoch_steps: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation loss of the kept parameters before training and after each epoch.
    pub losses: Vec<f64>,
    pub final_step_size: f64,
    pub rejected_epochs: usize,
}

fn mean_loss(layer: &LsaLayer, data: &[(Prompt, f64)]) -> f64 {
    data.iter().map(|(p, y)| 0.5 * (layer.predict(p) - y).powi(2)).sum::<f64>() / data.len() as f64
}

/// Mini-batch gradient descent on `(pred - <w, x_q>)^2 / 2` with fresh tasks
/// each step. After every epoch the loss on a fixed validation set is
/// compared with the last kept parameters; an epoch that raised it is undone
/// and the step size halved, so the recorded curve never increases.
pub fn train_lsa(
    mut layer: LsaLayer,
    family: &LinearTaskFamily,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LsaLayer, TrainLog)> {
    if cfg.batch == 0 || cfg.prompt_len == 0 || cfg.validation_prompts == 0 || cfg.epoch_steps == 0 {
        return Err(Error::config("train", "batch, prompt_len, validation_prompts and epoch_steps must be positive"));
    }
    if !(cfg.step_size > 0.0) {
        return Err(Error::config("step_size", "must be positive"));
    }
    if family.feature_cov.nrows() != layer.dim() {
        return Err(Error::DimensionMismatch("layer and task dimensions differ".into()));
    }
    let mut val_rng = rng.stream(u64::MAX);
    let validation = (0..cfg.validation_prompts)
        .map(|_| family.sample_labelled(cfg.prompt_len, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;
    let initial = mean_loss(&layer, &validation);
    let mut log = TrainLog {
        losses: vec![initial],
        final_step_size: cfg.step_size,
        rejected_epochs: 0,
    };
    let mut step_size = cfg.step_size;
    let mut kept = (layer.clone(), initial);
    let d = layer.dim();
    for step in 0..cfg.steps {
        let mut g_kq = DMatrix::zeros(d + 1, d + 1);
        let mut g_pv = DMatrix::zeros(d + 1, d + 1);
        for _ in 0..cfg.batch {
            let (prompt, target) = family.sample_labelled(cfg.prompt_len, rng)?;
            let (_, a, b) = layer.loss_and_grad(&prompt, target);
            g_kq += a;
            g_pv += b;
        }
        let scale = step_size / cfg.batch as f64;
        layer.w_kq -= g_kq * scale;
        layer.w_pv -= g_pv * scale;
        if (step + 1) % cfg.epoch_steps != 0 && step + 1 != cfg.steps {
            continue;
        }
        let loss = mean_loss(&layer, &validation);
        if !loss.is_finite() || loss > 1e3 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged { step, loss, initial });
        }
        if loss <= kept.1 {
            kept = (layer.clone(), loss);
        } else {
            layer = kept.0.clone();
            step_size *= 0.5;
            log.rejected_epochs += 1;
        }
        log.losses.push(kept.1);
    }
    log.final_step_size = step_size;
    Ok((kept.0, log))
}

/// Sum in pairs for an order-fixed, low-error reduction.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt() / n.sqrt())
}

/// Monte Carlo `eps_Q` of the closed-form predictor: per task, the mean
/// squared error over `queries` fresh query points. Returns `(mean, stderr)`
/// over tasks.
pub fn empirical_q_error(
    feature_cov: &DMatrix<f64>,
    m: usize,
    n: f64,
    tasks: usize,
    queries: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let pred = LsaPredictor::new(feature_cov, n)?;
    let per_task = (0..tasks)
        .into_par_iter()
        .map(|j| {
            let mut rng = Rng::substream(seed, &[j as u64]);
            let task = LinearTask::sample(feature_cov.clone(), 1, 1, 1.0, &mut rng)?;
            let prompt = sample_prompt(&task, m, &mut rng);
            let v = pred.weights(&prompt.moment());
            let errs: Vec<f64> = (0..queries)
                .map(|_| {
                    let x = task.sample_feature(&mut rng);
                    (x.dot(&v) - task.q_value(&x)).powi(2)
                })
                .collect();
            Ok(pairwise_sum(&errs) / queries as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_stderr(&per_task))
}

/// Empirical on-policy calibration ratio: the larger of the squared
/// prediction errors at the true-optimal and at the predicted-greedy
/// candidate, divided by the error averaged over all candidates. Each of
/// `steps` decisions draws `num_actions` i.i.d. candidates. Values near 1
/// mean the matched-query assumption holds; the ratio is not clamped.
pub fn empirical_c_on(
    feature_cov: &DMatrix<f64>,
    num_actions: usize,
    m: usize,
    n: f64,
    tasks: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if num_actions == 0 || tasks == 0 || steps == 0 {
        return Err(Error::config("c_on", "num_actions, tasks and steps must be positive"));
    }
    let pred = LsaPredictor::new(feature_cov, n)?;
    let per_task = (0..tasks)
        .into_par_iter()
        .map(|j| {
            let mut rng = Rng::substream(seed, &[j as u64]);
            let task = LinearTask::sample(feature_cov.clone(), num_actions, steps, 1.0, &mut rng)?;
            let prompt = sample_prompt(&task, m, &mut rng);
            let v = pred.weights(&prompt.moment());
            let (mut star, mut greedy, mut all) = (0.0, 0.0, 0.0);
            for _ in 0..steps {
                let (mut q_star, mut q_hat, mut sq) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..num_actions {
                    let x = task.sample_feature(&mut rng);
                    let (qs, qh) = (task.q_value(&x), x.dot(&v));
                    q_star.push(qs);
                    q_hat.push(qh);
                    sq.push((qh - qs).powi(2));
                }
                star += sq[crate::solvers::argmax(&q_star)];
                greedy += sq[crate::solvers::argmax(&q_hat)];
                all += pairwise_sum(&sq) / num_actions as f64;
            }
            Ok([star, greedy, all])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let total = |k: usize| pairwise_sum(&per_task.iter().map(|r| r[k]).collect::<Vec<_>>());
    let eps = total(2);
    if !(eps > 0.0) {
        return Ok(1.0);
    }
    Ok(total(0).max(total(1)) / eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2Config {
    pub dim: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    pub ms: Vec<usize>,
    pub ns: Vec<f64>,
    pub kappas: Vec<f64>,
    pub tasks: usize,
    pub c_on: f64,
    pub seed: u64,
}

impl Default for E2Config {
    fn default() -> Self {
        Self {
            dim: 10,
            num_actions: 5,
            horizon: 10,
            discount: 0.95,
            ms: vec![10, 20, 50, 100, 200, 500, 1000],
            ns: vec![100.0, 1000.0, 10000.0],
            kappas: vec![1.0, 5.0, 25.0],
            tasks: 500,
            c_on: 1.0,
            seed: 0,
        }
    }
}

impl E2Config {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_actions == 0 || self.horizon == 0 || self.tasks == 0 {
            return Err(Error::config("theory", "dim, num_actions, horizon and tasks must be positive"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config("discount", "must lie in (0, 1]"));
        }
        if self.ms.iter().any(|&m| m == 0) || self.ns.iter().any(|&n| !(n >= 1.0)) {
            return Err(Error::config("ms/ns", "prompt lengths must be at least 1"));
        }
        if self.kappas.iter().any(|&k| !(k >= 1.0)) {
            return Err(Error::config("kappas", "condition numbers must be at least 1"));
        }
        if !(self.c_on >= 1.0) {
            return Err(Error::config("c_on", "must be at least 1"));
        }
        Ok(())
    }
}

/// One `(kappa, N, M)` cell of the bound-validation simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2Row {
    pub kappa: f64,
    pub n: f64,
    pub m: usize,
    pub mean_gap: f64,
    pub gap_stderr: f64,
    pub mean_eps_q: f64,
    pub bound: f64,
    pub violated: bool,
}

/// `sum_{t=1}^T gamma^t [Q*(pi*) - Q*(pi_hat)]` and the mean squared
/// prediction error over all `T |A|` candidates, for one task.
fn e2_task(cfg: &E2Config, cov: &DMatrix<f64>, pred: &LsaPredictor, m: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let task = LinearTask::sample(cov.clone(), cfg.num_actions, cfg.horizon, cfg.discount, rng)?;
    let prompt = sample_prompt(&task, m, rng);
    let v = pred.weights(&prompt.moment());
    let mut gap = 0.0;
    let mut sq = Vec::with_capacity(cfg.horizon * cfg.num_actions);
    let mut weight = 1.0;
    for _ in 0..cfg.horizon {
        weight *= cfg.discount;
        let mut q_star = Vec::with_capacity(cfg.num_actions);
        let mut q_hat = Vec::with_capacity(cfg.num_actions);
        for _ in 0..cfg.num_actions {
            let x = task.sample_feature(rng);
            let (qs, qh) = (task.q_value(&x), x.dot(&v));
            sq.push((qh - qs).powi(2));
            q_star.push(qs);
            q_hat.push(qh);
        }
        let best = crate::solvers::argmax(&q_star);
        let chosen = crate::solvers::argmax(&q_hat);
        gap += weight * (q_star[best] - q_star[chosen]);
    }
    Ok((gap, pairwise_sum(&sq) / sq.len() as f64))
}

/// Runs every `(kappa, N, M)` cell in that nesting order.
pub fn run_e2_simulation(cfg: &E2Config) -> Result<Vec<E2Row>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (ki, &kappa) in cfg.kappas.iter().enumerate() {
        let cov = log_spaced_covariance(cfg.dim, kappa);
        for (ni, &n) in cfg.ns.iter().enumerate() {
            let pred = LsaPredictor::new(&cov, n)?;
            for (mi, &m) in cfg.ms.iter().enumerate() {
                let results = (0..cfg.tasks)
                    .into_par_iter()
                    .map(|j| {
                        let mut rng = Rng::substream(cfg.seed, &[ki as u64, ni as u64, mi as u64, j as u64]);
                        e2_task(cfg, &cov, &pred, m, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gaps: Vec<f64> = results.iter().map(|r| r.0).collect();
                let eps: Vec<f64> = results.iter().map(|r| r.1).collect();
                let (mean_gap, gap_stderr) = mean_and_stderr(&gaps);
                let mean_eps_q = pairwise_sum(&eps) / eps.len() as f64;
                let bound = gap_bound(cfg.horizon, cfg.discount, cfg.c_on, mean_eps_q);
                rows.push(E2Row {
                    kappa,
                    n,
                    m,
                    mean_gap,
                    gap_stderr,
                    mean_eps_q,
                    bound,
                    violated: !(mean_gap <= bound),
                });
            }
        }
    }
    Ok(rows)
}

pub const E2_CSV_HEADER: &str = "kappa,N,M,mean_gap,gap_stderr,mean_eps_q,bound,violated";

pub fn write_e2_csv(mut w: impl Write, rows: &[E2Row]) -> Result<()> {
    writeln!(w, "{E2_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.kappa, r.n, r.m, r.mean_gap, r.gap_stderr, r.mean_eps_q, r.bound, r.violated
        )?;
    }
    Ok(())
}

pub fn save_e2_csv(path: &Path, rows: &[E2Row]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_e2_csv(&mut f, rows)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_error_bound_substitution() {
        let id = DMatrix::<f64>::identity(1, 1);
        for (m, n) in [(10.0, 10.0), (100.0, 7.0)] {
            let expect = 2.0 / m + 4.0 / (n * n);
            assert!((q_error_bound(1, &id, m, n) - expect).abs() < 1e-15);
        }
        assert!(q_error_bound(1, &id, 1e300, 1e300) < 1e-290);
    }

    #[test]
    fn gap_constants() {
        assert_eq!(gap_constant(10, 1.0), 20.0);
        let series: f64 = 2.0 * (1..=10).map(|t| 0.95f64.powi(t - 1)).sum::<f64>();
        assert!((gap_constant(10, 0.95) - series).abs() < 1e-12);
        assert_eq!(gap_bound(10, 0.95, 1.0, 0.0), 0.0);
    }

    #[test]
    fn sample_complexity_substitution() {
        let id = DMatrix::<f64>::identity(10, 10);
        let (kt, _) = sample_complexity(1.0, 10, 10, &id, 1.0).unwrap();
        assert_eq!(kt, 8800);
    }

    #[test]
    fn zero_moment_predicts_zero() {
        let pred = LsaPredictor::new(&DMatrix::identity(3, 3), 10.0).unwrap();
        assert_eq!(pred.predict_query(&DVector::zeros(3), &DVector::from_element(3, 1.0)), 0.0);
    }

    #[test]
    fn ill_conditioned_gamma_rejected() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-15]));
        assert!(matches!(LsaPredictor::new(&cov, 1e15), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn zero_layer_predicts_zero() {
        let task = LinearTask::sample(DMatrix::identity(2, 2), 1, 1, 1.0, &mut Rng::new(1)).unwrap();
        let prompt = sample_prompt(&task, 5, &mut Rng::new(2));
        assert_eq!(LsaLayer::zeros(2).predict(&prompt), 0.0);
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let layer = LsaLayer::random(2, 0.5, &mut rng);
        let family = LinearTaskFamily {
            feature_cov: DMatrix::identity(2, 2),
        };
        let (prompt, y) = family.sample_labelled(6, &mut rng).unwrap();
        let (_, g_kq, g_pv) = layer.loss_and_grad(&prompt, y);
        let loss = |l: &LsaLayer| 0.5 * (l.predict(&prompt) - y).powi(2);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut a = layer.clone();
                a.w_kq[(i, j)] += h;
                let mut b = layer.clone();
                b.w_kq[(i, j)] -= h;
                assert!(((loss(&a) - loss(&b)) / (2.0 * h) - g_kq[(i, j)]).abs() < 1e-6);
                let mut a = layer.clone();
                a.w_pv[(i, j)] += h;
                let mut b = layer.clone();
                b.w_pv[(i, j)] -= h;
                assert!(((loss(&a) - loss(&b)) / (2.0 * h) - g_pv[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn small_e2_run_is_well_formed() {
        let cfg = E2Config {
            tasks: 4,
            ..Default::default()
        };
        let rows = run_e2_simulation(&cfg).unwrap();
        assert_eq!(rows.len(), 63);
        let mut buf = Vec::new();
        write_e2_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 64);
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 8));
    }
}
