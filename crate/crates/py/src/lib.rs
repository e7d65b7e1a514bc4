//! Python bindings for the seqlab task, solver, rollout and evaluation APIs.

use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqlab::dataset;
use seqlab::envs::{AmbiguityConfig, EnergyParams};
use seqlab::eval::{self, EvalConfig, EvalTask, PolicySpec, Setting, SupportPolicy, TaskSpec};
use seqlab::rollout::{Decision, ModelChoice, Policy, RolloutOptions};
use seqlab::solvers::{BeliefSolverConfig, SolutionExport};
use seqlab::theory::{self, E2Config};
use seqlab::{PolicyHandle, Rng, Step, Trajectory};

fn py_err(e: seqlab::Error) -> PyErr {
    use seqlab::Error::*;
    match e {
        Config { .. } | InvalidModel(_) | DimensionMismatch(_) | Parse { .. } | Json(_) | InvalidAction { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Timeout(_) => PyTimeoutError::new_err(e.to_string()),
        Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

fn py_to_json<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = py.import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A generated task with its id and metadata.
#[pyclass(name = "Task", module = "pyseqlab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTask {
    file: seqlab::TaskFile,
}

#[pymethods]
impl PyTask {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            file: seqlab::TaskFile::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.file.to_json().map_err(py_err)
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.file.task_id
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.file.task.kind()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.file.task.horizon()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.file.task.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.file.task.num_actions()
    }

    #[getter]
    fn num_obs(&self) -> usize {
        self.file.task.num_obs()
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &self.file.metadata)
    }

    fn __repr__(&self) -> String {
        format!("Task(id={:?}, kind={}, horizon={})", self.file.task_id, self.file.task.kind(), self.file.task.horizon())
    }
}

/// A solved task: its optimal policy and value.
#[pyclass(name = "Oracle", module = "pyseqlab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyOracle {
    task: EvalTask,
}

#[pymethods]
impl PyOracle {
    #[getter]
    fn initial_value(&self) -> PyResult<f64> {
        Ok(self.export(false)?.initial_value)
    }

    /// False when the belief solver ran out of budget and QMDP stands in.
    #[getter]
    fn exact(&self) -> bool {
        self.task.oracle.is_exact()
    }

    #[pyo3(signature = (include_nodes = false))]
    fn to_dict(&self, py: Python<'_>, include_nodes: bool) -> PyResult<Py<PyAny>> {
        json_to_py(py, &self.export(include_nodes)?)
    }
}

impl PyOracle {
    fn export(&self, include_nodes: bool) -> PyResult<SolutionExport> {
        SolutionExport::new(&self.task.file.task_id, &self.task.file.task, &self.task.oracle, include_nodes).map_err(py_err)
    }
}

/// Python callable `f(decision: dict) -> int`.
struct CallablePolicy(Py<PyAny>);

impl Policy for CallablePolicy {
    fn act(&self, d: &Decision<'_>, _: &mut Rng) -> seqlab::Result<usize> {
        Python::attach(|py| {
            let run = || -> PyResult<usize> {
                let dict = PyDict::new(py);
                dict.set_item("task_id", d.task_id)?;
                dict.set_item("t", d.t)?;
                dict.set_item("obs", d.obs)?;
                dict.set_item("num_actions", d.num_actions)?;
                dict.set_item("context", d.context)?;
                let history: Vec<(usize, usize, f64)> = d.history.iter().map(|s| (s.obs, s.action, s.reward)).collect();
                dict.set_item("history", history)?;
                dict.set_item("belief", d.belief.map(|b| b.probs().to_vec()))?;
                self.0.bind(py).call1((dict,))?.extract()
            };
            run().map_err(|e| seqlab::Error::Protocol(format!("python policy: {e}")))
        })
    }
}

fn policy_spec(obj: &Bound<'_, PyAny>) -> PyResult<PolicySpec> {
    if let Ok(name) = obj.extract::<String>() {
        return name.parse().map_err(py_err);
    }
    if obj.is_callable() {
        return Ok(PolicySpec::Custom(Arc::new(CallablePolicy(obj.clone().unbind()))));
    }
    Err(PyValueError::new_err("policy must be a name or a callable"))
}

fn solver_config(quantization: f64, node_budget: usize) -> PyResult<BeliefSolverConfig> {
    let cfg = BeliefSolverConfig {
        quantization,
        node_budget,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn model_choice(name: &str) -> PyResult<ModelChoice> {
    match name {
        "base" => Ok(ModelChoice::Base),
        "uniform_per_episode" => Ok(ModelChoice::UniformPerEpisode),
        _ => Err(PyValueError::new_err(format!("unknown model choice {name:?}"))),
    }
}

fn steps_to_py(steps: &[Step]) -> Vec<(usize, usize, f64)> {
    steps.iter().map(|s| (s.obs, s.action, s.reward)).collect()
}

/// Energy-management tasks of one setting (`mdp`, `pomdp` or `apomdp`).
#[pyfunction]
#[pyo3(signature = (setting, count, seed = 0, horizon = 10, obs_prob = 0.8, p_low = 0.5, p_high = 1.0, num_models = 3, alpha = 0.5, prefix = "task-"))]
#[allow(clippy::too_many_arguments)]
fn generate_tasks(
    setting: &str,
    count: usize,
    seed: u64,
    horizon: usize,
    obs_prob: f64,
    p_low: f64,
    p_high: f64,
    num_models: usize,
    alpha: f64,
    prefix: &str,
) -> PyResult<Vec<PyTask>> {
    let setting = match setting {
        "mdp" => Setting::Mdp,
        "pomdp" => Setting::Pomdp,
        "apomdp" => Setting::Apomdp,
        _ => return Err(PyValueError::new_err(format!("unknown setting {setting:?}"))),
    };
    let spec = TaskSpec {
        setting,
        base: EnergyParams {
            horizon,
            obs_prob,
            ..Default::default()
        },
        p_low,
        p_high,
        ambiguity: AmbiguityConfig {
            num_models,
            ..Default::default()
        },
        alpha,
    };
    spec.validate().map_err(py_err)?;
    let files = spec.generate_many(prefix, count, seed).map_err(py_err)?;
    Ok(files.into_iter().map(|file| PyTask { file }).collect())
}

/// Darkroom task with the goal at `(x, y)`.
#[pyfunction]
fn darkroom_task(x: usize, y: usize) -> PyResult<PyTask> {
    let room = seqlab::envs::gen_darkroom((x, y)).map_err(py_err)?;
    Ok(PyTask {
        file: seqlab::TaskFile::new(
            format!("darkroom-{x}-{y}"),
            seqlab::TaskMetadata {
                generator: "darkroom".into(),
                seed: None,
                params: serde_json::json!({ "goal": [x, y] }),
            },
            seqlab::Task::Darkroom(room),
        ),
    })
}

#[pyfunction]
#[pyo3(signature = (task, quantization = 1e-3, node_budget = 5_000_000))]
fn solve(py: Python<'_>, task: &PyTask, quantization: f64, node_budget: usize) -> PyResult<PyOracle> {
    let cfg = solver_config(quantization, node_budget)?;
    let file = task.file.clone();
    let task = py.detach(|| EvalTask::solve(file, &cfg)).map_err(py_err)?;
    Ok(PyOracle { task })
}

/// One episode. `policy` is an `Oracle`, a policy name, or a callable.
#[pyfunction]
#[pyo3(signature = (task, policy, seed, context = None, model = "base"))]
fn rollout(
    py: Python<'_>,
    task: &PyTask,
    policy: &Bound<'_, PyAny>,
    seed: u64,
    context: Option<&str>,
    model: &str,
) -> PyResult<Py<PyAny>> {
    let handle = if let Ok(o) = policy.cast::<PyOracle>() {
        o.get().task.oracle_policy()
    } else {
        match policy_spec(policy)? {
            PolicySpec::Random => PolicyHandle::Random,
            PolicySpec::Custom(p) => PolicyHandle::Custom(p),
            spec => {
                let file = task.file.clone();
                let t = py.detach(|| EvalTask::solve(file, &BeliefSolverConfig::default())).map_err(py_err)?;
                spec.resolve(&t).map_err(py_err)?
            }
        }
    };
    let ctx = match context {
        Some(text) => Some(seqlab::FewShotContext::new(dataset::decode_context(text).map_err(py_err)?)),
        None => None,
    };
    let opts = RolloutOptions {
        model: model_choice(model)?,
        ..Default::default()
    };
    let file = &task.file;
    let out = py
        .detach(|| seqlab::rollout(&file.task, &file.task_id, &handle, seed, ctx.as_ref(), &opts))
        .map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("steps", steps_to_py(&out.trajectory.steps))?;
    dict.set_item("discounted_return", out.discounted_return)?;
    dict.set_item("total_reward", out.trajectory.total_reward())?;
    dict.set_item("states", out.states)?;
    dict.set_item("invalid_actions", out.invalid_actions)?;
    Ok(dict.into_any().unbind())
}

/// Token string for `(obs, action, reward)` steps.
#[pyfunction]
fn encode(steps: Vec<(usize, usize, f64)>) -> String {
    let traj = Trajectory {
        task_id: String::new(),
        steps: steps.into_iter().map(|(obs, action, reward)| Step { obs, action, reward }).collect(),
    };
    dataset::encode(&traj).text
}

#[pyfunction]
fn decode(text: &str) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(steps_to_py(&dataset::decode(text).map_err(py_err)?.steps))
}

/// Optimality gap of `policy` against each oracle, paired on rollout seeds.
#[pyfunction]
#[pyo3(signature = (oracles, policy, seed = 0, rollouts_per_task = None, num_support = 2, support_policy = "oracle", model = "base"))]
#[allow(clippy::too_many_arguments)]
fn optimality_gap(
    py: Python<'_>,
    oracles: Vec<PyRef<'_, PyOracle>>,
    policy: &Bound<'_, PyAny>,
    seed: u64,
    rollouts_per_task: Option<usize>,
    num_support: usize,
    support_policy: &str,
    model: &str,
) -> PyResult<Py<PyAny>> {
    let spec = policy_spec(policy)?;
    let support_policy = match support_policy {
        "oracle" => SupportPolicy::Oracle,
        "random" => SupportPolicy::Random,
        _ => return Err(PyValueError::new_err(format!("unknown support policy {support_policy:?}"))),
    };
    let cfg = EvalConfig {
        rollouts_per_task,
        seed,
        model: model_choice(model)?,
        num_support,
        support_policy,
    };
    let tasks: Vec<EvalTask> = oracles.iter().map(|o| o.task.clone()).collect();
    let report = py.detach(|| eval::optimality_gap(&tasks, &spec, &cfg)).map_err(py_err)?;
    json_to_py(py, &report)
}

/// Cumulative Darkroom reward; `goals=None` uses the held-out split of `seed`.
#[pyfunction]
#[pyo3(signature = (policy, goals = None, rollouts_per_goal = 5, seed = 0))]
fn darkroom_eval(
    py: Python<'_>,
    policy: &Bound<'_, PyAny>,
    goals: Option<Vec<(usize, usize)>>,
    rollouts_per_goal: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let spec = policy_spec(policy)?;
    let goals = goals.unwrap_or_else(|| seqlab::envs::split_darkroom_goals(&mut Rng::new(seed)).1);
    let report = py
        .detach(|| eval::darkroom_eval(&spec, &goals, rollouts_per_goal, seed))
        .map_err(py_err)?;
    json_to_py(py, &report)
}

/// Predicted Q-error bound for `d` features with log-spaced covariance of condition `kappa`.
#[pyfunction]
fn q_error_bound(d: usize, kappa: f64, m: f64, n: f64) -> f64 {
    theory::q_error_bound(d, &theory::log_spaced_covariance(d, kappa), m, n)
}

#[pyfunction]
fn gap_bound(horizon: usize, discount: f64, c_on: f64, eps_q: f64) -> f64 {
    theory::gap_bound(horizon, discount, c_on, eps_q)
}

#[pyfunction]
fn sample_complexity(eps: f64, horizon: usize, d: usize, kappa: f64, c_on: f64) -> PyResult<(u64, u64)> {
    theory::sample_complexity(eps, horizon, d, &theory::log_spaced_covariance(d, kappa), c_on).map_err(py_err)
}

/// Monte Carlo Q-error `(mean, stderr)` of the closed-form predictor.
#[pyfunction]
#[pyo3(signature = (d, kappa, m, n, tasks = 500, queries = 50, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn empirical_q_error(
    py: Python<'_>,
    d: usize,
    kappa: f64,
    m: usize,
    n: f64,
    tasks: usize,
    queries: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let cov = theory::log_spaced_covariance(d, kappa);
    py.detach(|| theory::empirical_q_error(&cov, m, n, tasks, queries, seed)).map_err(py_err)
}

/// On-policy calibration ratio of the closed-form predictor.
#[pyfunction]
#[pyo3(signature = (d, kappa, m, n, num_actions = 5, tasks = 500, steps = 10, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn empirical_c_on(
    py: Python<'_>,
    d: usize,
    kappa: f64,
    m: usize,
    n: f64,
    num_actions: usize,
    tasks: usize,
    steps: usize,
    seed: u64,
) -> PyResult<f64> {
    let cov = theory::log_spaced_covariance(d, kappa);
    py.detach(|| theory::empirical_c_on(&cov, num_actions, m, n, tasks, steps, seed)).map_err(py_err)
}

/// Bound-validation grid; `config` overrides the default fields.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn theory_sim(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let cfg: E2Config = match config {
        Some(c) => py_to_json(py, c)?,
        None => E2Config::default(),
    };
    let rows = py.detach(|| theory::run_e2_simulation(&cfg)).map_err(py_err)?;
    json_to_py(py, &rows)
}

#[pymodule]
fn pyseqlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTask>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(generate_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(darkroom_task, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(optimality_gap, m)?)?;
    m.add_function(wrap_pyfunction!(darkroom_eval, m)?)?;
    m.add_function(wrap_pyfunction!(q_error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gap_bound, m)?)?;
    m.add_function(wrap_pyfunction!(sample_complexity, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_q_error, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_c_on, m)?)?;
    m.add_function(wrap_pyfunction!(theory_sim, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
