//! Trajectory generation under oracle, random, QMDP, and external policies,
//! plus the newline-delimited JSON protocol for out-of-process policies.
//!
//! Each rollout derives two generators from its seed: an environment stream
//! (initial state, transitions, emissions) and a policy stream. The
//! environment stream draws exactly one uniform per initial state, transition
//! and emission, so two policies rolled out with the same seed face the same
//! noise and diverge only through their actions.
//!
//! Timing: the first observation is emitted from the observation row of
//! action 0 before any action is taken. At step `t` the policy sees `o_t`,
//! chooses `a_t`, collects `R(s_t, a_t)`, then `s_{t+1} ~ P(. | s_t, a_t)` and
//! `o_{t+1} ~ Q(. | s_{t+1}, a_t)`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::belief::{belief_update, initial_posterior, Belief};
use crate::dataset::encode_context;
use crate::error::{Error, Result};
use crate::model::{Step, Trajectory};
use crate::rng::Rng;
use crate::solvers::{solve_task, BeliefSolverConfig, Oracle, QmdpPolicy};
use crate::task::Task;

const ENV_STREAM: u64 = 0;
const POLICY_STREAM: u64 = 1;

/// Few-shot support trajectories and their encoding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FewShotContext {
    pub support: Vec<Trajectory>,
    pub encoded: String,
}

impl FewShotContext {
    pub fn new(support: Vec<Trajectory>) -> Self {
        let encoded = encode_context(&support);
        Self { support, encoded }
    }
}

/// Everything a policy may condition on at one decision.
#[derive(Debug, Clone, Copy)]
pub struct Decision<'a> {
    pub task_id: &'a str,
    /// 0-based time index.
    pub t: usize,
    pub obs: usize,
    /// Running belief for partially observed tasks.
    pub belief: Option<&'a Belief>,
    pub history: &'a [Step],
    pub context: &'a str,
    pub num_actions: usize,
}

/// User-supplied policy.
pub trait Policy: Send + Sync {
    fn act(&self, decision: &Decision<'_>, rng: &mut Rng) -> Result<usize>;
}

#[derive(Clone)]
pub enum PolicyHandle {
    Oracle(Oracle),
    /// Uniform over actions, independently each step.
    Random,
    Qmdp(Arc<QmdpPolicy>),
    External(Arc<ExternalClient>),
    Custom(Arc<dyn Policy>),
}

impl fmt::Debug for PolicyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyHandle::External(c) => write!(f, "External({})", c.endpoint()),
            other => f.write_str(other.kind()),
        }
    }
}

impl PolicyHandle {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicyHandle::Oracle(_) => "oracle",
            PolicyHandle::Random => "random",
            PolicyHandle::Qmdp(_) => "qmdp",
            PolicyHandle::External(_) => "external",
            PolicyHandle::Custom(_) => "custom",
        }
    }

    /// Solves `task` and wraps the result. Belief solvers that exceed their
    /// budget fall back to QMDP.
    pub fn oracle_for(task: &Task, cfg: &BeliefSolverConfig) -> Result<Self> {
        Ok(PolicyHandle::Oracle(solve_task(task, cfg, true)?))
    }

    /// QMDP on the task's (base-model) latent MDP.
    pub fn qmdp_for(task: &Task) -> Result<Self> {
        let latent = match task {
            Task::Mdp(m) => m.clone(),
            Task::Pomdp(p) => p.mdp().clone(),
            Task::Apomdp(a) => a.member(0)?.mdp().clone(),
            Task::Darkroom(d) => d.to_mdp()?,
        };
        Ok(PolicyHandle::Qmdp(Arc::new(QmdpPolicy::from_mdp(&latent))))
    }

    /// Rejects handles whose bound solution does not fit `task`.
    pub fn check(&self, task: &Task) -> Result<()> {
        let mismatch = |what: String| Err(Error::DimensionMismatch(format!("{} policy: {what}", self.kind())));
        let observed = matches!(task, Task::Mdp(_) | Task::Darkroom(_));
        match self {
            PolicyHandle::Oracle(Oracle::Mdp(sol)) => {
                if !observed {
                    return mismatch(format!("MDP solution for a {} task", task.kind()));
                }
                if sol.horizon() < task.horizon()
                    || sol.values[0].len() != task.num_states()
                    || sol.q_values.first().is_some_and(|q| q[0].len() != task.num_actions())
                {
                    return mismatch("solution dimensions differ from the task".into());
                }
            }
            PolicyHandle::Oracle(Oracle::Belief(sol)) => {
                if observed {
                    return mismatch(format!("belief solution for a {} task", task.kind()));
                }
                if sol.horizon() < task.horizon()
                    || sol.num_states() != task.num_states()
                    || sol.num_actions() != task.num_actions()
                {
                    return mismatch("solution dimensions differ from the task".into());
                }
            }
            PolicyHandle::Oracle(Oracle::Qmdp(q)) | PolicyHandle::Qmdp(q) => {
                if q.horizon() < task.horizon() || q.num_states() != task.num_states() || q.num_actions() != task.num_actions() {
                    return mismatch("Q-table dimensions differ from the task".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn act(&self, d: &Decision<'_>, rng: &mut Rng) -> Result<usize> {
        match self {
            PolicyHandle::Oracle(Oracle::Mdp(sol)) => Ok(sol.action(d.t, d.obs)),
            PolicyHandle::Oracle(Oracle::Belief(sol)) => {
                let b = d.belief.ok_or_else(|| Error::invalid("belief oracle needs a running belief"))?;
                sol.action(d.t, b)
            }
            PolicyHandle::Oracle(Oracle::Qmdp(q)) | PolicyHandle::Qmdp(q) => Ok(match d.belief {
                Some(b) => q.action(b, d.t),
                None => q.action(&Belief::delta(q.num_states(), d.obs), d.t),
            }),
            PolicyHandle::Random => Ok(rng.below(d.num_actions)),
            PolicyHandle::External(client) => client.query(&Request::from_decision(d)),
            PolicyHandle::Custom(p) => p.act(d, rng),
        }
    }
}

/// Which member of an ambiguity set generates an APOMDP episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// The first (base) model.
    #[default]
    Base,
    /// A member drawn uniformly at the start of each episode.
    UniformPerEpisode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutOptions {
    pub model: ModelChoice,
    /// Keep the agent's belief before each decision.
    pub record_beliefs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    /// Discounted return accumulated online.
    pub discounted_return: f64,
    /// Latent state at each step.
    pub states: Vec<usize>,
    /// Agent belief at each step (when recorded and the task is partially observed).
    pub beliefs: Vec<Belief>,
    /// Out-of-range actions replaced by action 0.
    pub invalid_actions: usize,
    /// Ambiguity-set member that generated the episode.
    pub model: usize,
}

/// Rolls out one episode of `task` under `policy`.
///
/// The agent's belief is always filtered with the base model's kernels, even
/// when another member generates the episode.
pub fn rollout(
    task: &Task,
    task_id: &str,
    policy: &PolicyHandle,
    seed: u64,
    context: Option<&FewShotContext>,
    opts: &RolloutOptions,
) -> Result<RolloutOutcome> {
    policy.check(task)?;
    let mut env_rng = Rng::substream(seed, &[ENV_STREAM]);
    let mut policy_rng = Rng::substream(seed, &[POLICY_STREAM]);
    let model = match opts.model {
        ModelChoice::UniformPerEpisode if task.num_models() > 1 => env_rng.below(task.num_models()),
        _ => 0,
    };
    let env = task.env_model(model)?;
    let agent = task.env_model(0)?;
    let (horizon, discount, na) = (env.horizon, env.discount, task.num_actions());
    let ctx = context.map(|c| c.encoded.as_str()).unwrap_or("");

    let mut state = env_rng.categorical(&env.initial);
    let emit = |rng: &mut Rng, s: usize, a: usize| match &env.observation {
        Some(q) => rng.categorical(q.row(s, a)),
        None => s,
    };
    let mut obs = emit(&mut env_rng, state, 0);
    let mut belief = match &agent.observation {
        Some(q) => Some(initial_posterior(&agent.initial, obs, q)?),
        None => None,
    };

    let mut out = RolloutOutcome {
        trajectory: Trajectory {
            task_id: task_id.to_string(),
            steps: Vec::with_capacity(horizon),
        },
        discounted_return: 0.0,
        states: Vec::with_capacity(horizon),
        beliefs: Vec::new(),
        invalid_actions: 0,
        model,
    };
    let mut weight = 1.0;
    for t in 0..horizon {
        let decision = Decision {
            task_id,
            t,
            obs,
            belief: belief.as_ref(),
            history: &out.trajectory.steps,
            context: ctx,
            num_actions: na,
        };
        let action = match policy.act(&decision, &mut policy_rng) {
            Ok(a) if a < na => a,
            Ok(_) | Err(Error::InvalidAction { .. }) => {
                out.invalid_actions += 1;
                0
            }
            Err(e) => return Err(e),
        };
        let reward = env.reward[state][action];
        out.discounted_return += weight * reward;
        weight *= discount;
        out.states.push(state);
        if opts.record_beliefs {
            if let Some(b) = &belief {
                out.beliefs.push(b.clone());
            }
        }
        out.trajectory.steps.push(Step { obs, action, reward });
        if t + 1 < horizon {
            state = env_rng.categorical(env.transition.row(state, action));
            obs = emit(&mut env_rng, state, action);
            if let (Some(b), Some(q)) = (&belief, &agent.observation) {
                belief = Some(belief_update(b, action, obs, &agent.transition, q)?);
            }
        }
    }
    Ok(out)
}

/// Agent belief after each observation of a history, filtered with the base
/// model. `obs` holds `o_1..o_k`, `actions` holds `a_1..a_{k-1}`.
pub fn replay_beliefs(task: &Task, obs: &[usize], actions: &[usize]) -> Result<Vec<Belief>> {
    let agent = task.env_model(0)?;
    let Some(q) = &agent.observation else {
        return Err(Error::invalid(format!("{} tasks carry no belief", task.kind())));
    };
    if obs.is_empty() || actions.len() + 1 != obs.len() {
        return Err(Error::DimensionMismatch("history needs one more observation than actions".into()));
    }
    let mut out = vec![initial_posterior(&agent.initial, obs[0], q)?];
    for (&a, &o) in actions.iter().zip(&obs[1..]) {
        let next = belief_update(out.last().unwrap(), a, o, &agent.transition, q)?;
        out.push(next);
    }
    Ok(out)
}

/// One protocol request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub task_id: String,
    /// 1-based step number.
    pub step: usize,
    pub context: String,
    pub history: Vec<Step>,
    pub current_obs: usize,
    pub num_actions: usize,
}

impl Request {
    pub fn from_decision(d: &Decision<'_>) -> Self {
        Self {
            task_id: d.task_id.to_string(),
            step: d.t + 1,
            context: d.context.to_string(),
            history: d.history.to_vec(),
            current_obs: d.obs,
            num_actions: d.num_actions,
        }
    }
}

/// Parses a reply line into an in-range action.
pub fn parse_reply(line: &str, num_actions: usize) -> Result<usize> {
    let value: serde_json::Value =
        serde_json::from_str(line.trim()).map_err(|e| Error::Protocol(format!("reply is not JSON: {e}")))?;
    let action = value
        .get("action")
        .ok_or_else(|| Error::Protocol(format!("reply has no `action` field: {}", line.trim())))?;
    let action = if let Some(a) = action.as_i64() {
        a
    } else if action.as_u64().is_some() {
        i64::MAX
    } else {
        return Err(Error::Protocol(format!("`action` is not an integer: {action}")));
    };
    if action < 0 || action as u64 >= num_actions as u64 {
        return Err(Error::InvalidAction { action, num_actions });
    }
    Ok(action as usize)
}

/// Where an external policy lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`, optionally written `tcp://host:port`.
    Tcp(String),
    /// Child process speaking the protocol on stdin/stdout, written
    /// `cmd:program arg...`.
    Command(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(Error::config("endpoint", "empty command"));
            }
            return Ok(Endpoint::Command(argv));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.is_empty() || !addr.contains(':') {
            return Err(Error::config("endpoint", format!("expected host:port or cmd:<program>, got `{s}`")));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub timeout: Duration,
    /// Extra attempts after a timeout or I/O failure.
    pub retries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            retries: 2,
        }
    }
}

enum Connection {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Child {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    },
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| Error::Protocol(format!("cannot resolve {addr}")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)?;
                stream.set_read_timeout(Some(timeout))?;
                stream.set_write_timeout(Some(timeout))?;
                stream.set_nodelay(true)?;
                Ok(Connection::Tcp {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: stream,
                })
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stdout);
                    loop {
                        let mut line = String::new();
                        let res = reader.read_line(&mut line);
                        let done = !matches!(res, Ok(n) if n > 0);
                        if tx.send(res.map(|_| line)).is_err() || done {
                            break;
                        }
                    }
                });
                Ok(Connection::Child {
                    child,
                    stdin,
                    lines: rx,
                })
            }
        }
    }

    fn roundtrip(&mut self, line: &str, timeout: Duration) -> Result<String> {
        let eof = || Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "policy closed the stream"));
        match self {
            Connection::Tcp { reader, writer } => {
                writer.write_all(line.as_bytes())?;
                writer.flush()?;
                let mut reply = String::new();
                match reader.read_line(&mut reply) {
                    Ok(0) => Err(eof()),
                    Ok(_) => Ok(reply),
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                        Err(Error::Timeout(timeout))
                    }
                    Err(e) => Err(e.into()),
                }
            }
            Connection::Child { stdin, lines, .. } => {
                stdin.write_all(line.as_bytes())?;
                stdin.flush()?;
                match lines.recv_timeout(timeout) {
                    Ok(Ok(reply)) if !reply.is_empty() => Ok(reply),
                    Ok(Ok(_)) | Err(RecvTimeoutError::Disconnected) => Err(eof()),
                    Ok(Err(e)) => Err(e.into()),
                    Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
                }
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Connection::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client for an external policy. Each in-flight request holds its own
/// connection (or child process); idle connections are pooled for reuse.
pub struct ExternalClient {
    endpoint: Endpoint,
    config: ClientConfig,
    idle: Mutex<Vec<Connection>>,
}

impl ExternalClient {
    pub fn new(endpoint: Endpoint, config: ClientConfig) -> Self {
        Self {
            endpoint,
            config,
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// One request/reply round trip, retried on timeouts and I/O failures.
    pub fn query(&self, request: &Request) -> Result<usize> {
        let line = serde_json::to_string(request)? + "\n";
        let mut last = None;
        for _ in 0..=self.config.retries {
            let pooled = self.idle.lock().unwrap_or_else(|e| e.into_inner()).pop();
            let mut conn = match pooled {
                Some(c) => c,
                None => match Connection::open(&self.endpoint, self.config.timeout) {
                    Ok(c) => c,
                    Err(e) => {
                        last = Some(e);
                        continue;
                    }
                },
            };
            match conn.roundtrip(&line, self.config.timeout) {
                Ok(reply) => {
                    self.idle.lock().unwrap_or_else(|e| e.into_inner()).push(conn);
                    return parse_reply(&reply, request.num_actions);
                }
                Err(e @ (Error::Timeout(_) | Error::Io(_))) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Protocol("no attempts made".into())))
    }
}

/// Answers protocol requests for one task by rebuilding the belief from the
/// transmitted history. Wrapping an oracle reproduces in-process oracle
/// rollouts exactly.
pub struct HistoryPolicy {
    task: Arc<Task>,
    policy: PolicyHandle,
}

impl HistoryPolicy {
    pub fn new(task: Arc<Task>, policy: PolicyHandle) -> Result<Self> {
        policy.check(&task)?;
        Ok(Self { task, policy })
    }

    pub fn respond(&self, req: &Request) -> Result<usize> {
        let t = req.step.checked_sub(1).ok_or_else(|| Error::Protocol("step numbers start at 1".into()))?;
        if req.history.len() != t {
            return Err(Error::Protocol(format!("step {} with {} history entries", req.step, req.history.len())));
        }
        let belief = match self.task.as_ref() {
            Task::Pomdp(_) | Task::Apomdp(_) => {
                let obs: Vec<usize> = req.history.iter().map(|s| s.obs).chain([req.current_obs]).collect();
                let actions: Vec<usize> = req.history.iter().map(|s| s.action).collect();
                replay_beliefs(&self.task, &obs, &actions)?.pop()
            }
            _ => None,
        };
        let d = Decision {
            task_id: &req.task_id,
            t,
            obs: req.current_obs,
            belief: belief.as_ref(),
            history: &req.history,
            context: &req.context,
            num_actions: req.num_actions,
        };
        let mut rng = Rng::new(req.step as u64);
        self.policy.act(&d, &mut rng)
    }
}

/// Request handler used by the protocol servers.
pub type Handler = Arc<dyn Fn(&Request) -> Result<usize> + Send + Sync>;

fn answer(handler: &Handler, line: &str) -> String {
    let reply = match serde_json::from_str::<Request>(line) {
        Ok(req) => match handler(&req) {
            Ok(a) => serde_json::json!({ "action": a }),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        },
        Err(e) => serde_json::json!({ "error": format!("bad request: {e}") }),
    };
    reply.to_string() + "\n"
}

/// Serves the protocol over TCP on a background thread, one thread per
/// connection. Returns the bound address.
pub fn spawn_tcp_server(addr: impl ToSocketAddrs, handler: Handler) -> Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let handler = handler.clone();
            thread::spawn(move || {
                let Ok(write_half) = stream.try_clone() else { return };
                let mut writer = write_half;
                for line in BufReader::new(stream).lines() {
                    let Ok(line) = line else { break };
                    if writer.write_all(answer(&handler, &line).as_bytes()).is_err() {
                        break;
                    }
                }
            });
        }
    });
    Ok(local)
}

/// Serves the protocol on the given reader/writer pair until end of input.
pub fn serve_lines(input: impl BufRead, mut output: impl Write, handler: &Handler) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        output.write_all(answer(handler, &line).as_bytes())?;
        output.flush()?;
    }
    Ok(())
}
