//! Trajectory serialization and corpus export.
//!
//! Canonical text form of a trajectory (schema version 1):
//!
//! ```text
//! <O_1> 3, <A_1> 1, <R_1> 0.33, <O_2> 4, <A_2> 0, <R_2> -0.02
//! ```
//!
//! Observations and actions are unsigned decimal integers without leading
//! zeros, rewards are printed with exactly two decimals (`format!("{:.2}")`),
//! fields are separated by `", "`, and there is no trailing separator. A
//! few-shot context joins trajectories with `"\n"`, each prefixed `"TRAJ k: "`
//! with `k` counting from 1.
//!
//! Corpora are JSONL (UTF-8, LF line endings), one record per line, with a
//! JSON manifest alongside.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Step, Trajectory};
use crate::rng::Rng;
use crate::rollout::{rollout, FewShotContext, PolicyHandle, RolloutOptions};
use crate::solvers::Oracle;
use crate::task::{Task, TaskFile, TaskMetadata};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedTrajectory {
    pub text: String,
    pub schema_version: u32,
}

fn format_reward(r: f64) -> String {
    format!("{r:.2}")
}

pub fn encode_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let k = i + 1;
        out.push_str(&format!("<O_{k}> {}, <A_{k}> {}, <R_{k}> {}", s.obs, s.action, format_reward(s.reward)));
    }
    out
}

pub fn encode(traj: &Trajectory) -> SerializedTrajectory {
    SerializedTrajectory {
        text: encode_steps(&traj.steps),
        schema_version: SCHEMA_VERSION,
    }
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(format!("expected `{lit}`"))
        }
    }

    fn digits(&mut self) -> &'a str {
        let len = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        let s = &self.rest()[..len];
        self.pos += len;
        s
    }

    fn index(&mut self) -> Result<usize> {
        let start = self.pos;
        let d = self.digits();
        if d.is_empty() {
            return self.err("expected an integer");
        }
        if d.len() > 1 && d.starts_with('0') {
            self.pos = start;
            return self.err("leading zero");
        }
        d.parse().or_else(|_| {
            self.pos = start;
            self.err("integer out of range")
        })
    }

    fn reward(&mut self) -> Result<f64> {
        let start = self.pos;
        if self.rest().starts_with('-') {
            self.pos += 1;
        }
        let int = self.digits();
        if int.is_empty() || (int.len() > 1 && int.starts_with('0')) {
            self.pos = start;
            return self.err("malformed reward");
        }
        self.expect(".")?;
        if self.digits().len() != 2 {
            self.pos = start;
            return self.err("reward needs exactly two decimals");
        }
        let token = &self.text[start..self.pos];
        let value: f64 = token.parse().or_else(|_| {
            self.pos = start;
            self.err("malformed reward")
        })?;
        if format_reward(value) != token {
            self.pos = start;
            return self.err("reward not representable at two decimals");
        }
        Ok(value)
    }

    fn tag(&mut self, letter: char, k: usize) -> Result<()> {
        let tag = format!("<{letter}_{k}> ");
        self.expect(&tag)
    }
}

fn decode_at(text: &str, base: usize) -> Result<Vec<Step>> {
    let mut p = Parser { text, pos: 0 };
    let shift = |e: Error| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset: offset + base,
            message,
        },
        other => other,
    };
    let mut steps = Vec::new();
    while p.pos < text.len() {
        let k = steps.len() + 1;
        if k > 1 {
            p.expect(", ").map_err(shift)?;
        }
        let step = (|| {
            p.tag('O', k)?;
            let obs = p.index()?;
            p.expect(", ")?;
            p.tag('A', k)?;
            let action = p.index()?;
            p.expect(", ")?;
            p.tag('R', k)?;
            let reward = p.reward()?;
            Ok(Step { obs, action, reward })
        })()
        .map_err(shift)?;
        steps.push(step);
    }
    Ok(steps)
}

/// Parses the canonical text form. Accepts exactly the strings that
/// [`encode`] can produce.
pub fn decode(text: &str) -> Result<Trajectory> {
    Ok(Trajectory {
        task_id: String::new(),
        steps: decode_at(text, 0)?,
    })
}

/// Joins encodings as `"TRAJ 1: ...\nTRAJ 2: ..."`.
pub fn encode_context(support: &[Trajectory]) -> String {
    support
        .iter()
        .enumerate()
        .map(|(i, t)| format!("TRAJ {}: {}", i + 1, encode_steps(&t.steps)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn decode_context(text: &str) -> Result<Vec<Trajectory>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split('\n').enumerate() {
        let prefix = format!("TRAJ {}: ", i + 1);
        let Some(body) = line.strip_prefix(&prefix) else {
            return Err(Error::Parse {
                offset,
                message: format!("expected `{prefix}`"),
            });
        };
        out.push(Trajectory {
            task_id: String::new(),
            steps: decode_at(body, offset + prefix.len())?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Seed of rollout `index` in the family rooted at `seed`.
pub fn rollout_seed(seed: u64, index: usize) -> u64 {
    Rng::derive_seed(seed, index as u64)
}

/// Rolls out `num_support` trajectories under `support_policy` with seeds
/// `rollout_seed(seed, k)`.
pub fn build_context(
    task: &Task,
    task_id: &str,
    num_support: usize,
    support_policy: &PolicyHandle,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<FewShotContext> {
    let support = (0..num_support)
        .map(|k| Ok(rollout(task, task_id, support_policy, rollout_seed(seed, k), None, opts)?.trajectory))
        .collect::<Result<Vec<_>>>()?;
    Ok(FewShotContext::new(support))
}

/// A task together with the policy that generates its demonstrations.
#[derive(Clone)]
pub struct SourceTask {
    pub file: TaskFile,
    pub policy: PolicyHandle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub task_id: String,
    /// All demonstrations joined in context format.
    pub context: String,
    pub trajectories: Vec<String>,
    pub metadata: TaskMetadata,
    /// Per-trajectory rollout seeds, for replay.
    pub seeds: Vec<u64>,
    /// Undiscounted return of each demonstration.
    pub returns: Vec<f64>,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DptRecord {
    pub task_id: String,
    pub trajectory: usize,
    /// 1-based step of the query.
    pub step: usize,
    /// `(obs, action, next_obs, reward)` for every earlier step.
    pub context: Vec<(usize, usize, usize, f64)>,
    pub query_obs: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: String,
    pub schema_version: u32,
    pub seed: u64,
    pub num_tasks: usize,
    pub num_records: usize,
    pub trajectories_per_task: usize,
    pub task_ids: Vec<String>,
    pub task_seeds: Vec<u64>,
}

/// Seed of task `index`'s rollouts.
pub fn task_seed(seed: u64, index: usize) -> u64 {
    Rng::substream(seed, &[0x5f7, index as u64]).seed()
}

pub fn sft_records(tasks: &[SourceTask], trajectories_per_task: usize, seed: u64) -> Result<Vec<SftRecord>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let tseed = task_seed(seed, i);
            let seeds: Vec<u64> = (0..trajectories_per_task).map(|k| rollout_seed(tseed, k)).collect();
            let trajs = seeds
                .iter()
                .map(|&s| {
                    Ok(rollout(&src.file.task, &src.file.task_id, &src.policy, s, None, &RolloutOptions::default())?
                        .trajectory)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SftRecord {
                task_id: src.file.task_id.clone(),
                context: encode_context(&trajs),
                trajectories: trajs.iter().map(|t| encode_steps(&t.steps)).collect(),
                metadata: src.file.metadata.clone(),
                seeds,
                returns: trajs.iter().map(Trajectory::total_reward).collect(),
                schema_version: SCHEMA_VERSION,
            })
        })
        .collect()
}

/// Oracle action at the decision behind step `t` of a recorded rollout.
fn oracle_label(oracle: &Oracle, t: usize, obs: usize, belief: Option<&crate::Belief>) -> Result<usize> {
    match (oracle, belief) {
        (Oracle::Mdp(sol), _) => Ok(sol.action(t, obs)),
        (Oracle::Belief(sol), Some(b)) => sol.action(t, b),
        (Oracle::Qmdp(q), Some(b)) => Ok(q.action(b, t)),
        (Oracle::Qmdp(q), None) => Ok(q.action(&crate::Belief::delta(q.num_states(), obs), t)),
        (Oracle::Belief(_), None) => Err(Error::invalid("belief oracle needs a belief")),
    }
}

/// One record per (trajectory, step). Trajectories are rolled out under
/// `rollout_policy`; labels come from `oracle` at the visited decision.
pub fn dpt_records(
    tasks: &[(TaskFile, Oracle)],
    rollout_policy: Option<&PolicyHandle>,
    trajectories_per_task: usize,
    seed: u64,
) -> Result<Vec<DptRecord>> {
    let per_task: Vec<Vec<DptRecord>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, (file, oracle))| {
            let oracle_policy = PolicyHandle::Oracle(oracle.clone());
            let policy = rollout_policy.unwrap_or(&oracle_policy);
            let tseed = task_seed(seed, i);
            let opts = RolloutOptions {
                record_beliefs: true,
                ..Default::default()
            };
            let mut out = Vec::new();
            for k in 0..trajectories_per_task {
                let ro = rollout(&file.task, &file.task_id, policy, rollout_seed(tseed, k), None, &opts)?;
                let steps = &ro.trajectory.steps;
                for (t, step) in steps.iter().enumerate() {
                    let context = (0..t)
                        .map(|j| (steps[j].obs, steps[j].action, steps[j + 1].obs, steps[j].reward))
                        .collect();
                    out.push(DptRecord {
                        task_id: file.task_id.clone(),
                        trajectory: k,
                        step: t + 1,
                        context,
                        query_obs: step.obs,
                        label: oracle_label(oracle, t, step.obs, ro.beliefs.get(t))?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_manifest(dir: &Path, name: &str, manifest: &CorpusManifest) -> Result<()> {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Writes `sft.jsonl` and `sft_manifest.json` into `dir`.
pub fn build_sft_corpus(tasks: &[SourceTask], trajectories_per_task: usize, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let records = sft_records(tasks, trajectories_per_task, seed)?;
    write_jsonl(&dir.join("sft.jsonl"), &records)?;
    let manifest = CorpusManifest {
        kind: "sft".into(),
        schema_version: SCHEMA_VERSION,
        seed,
        num_tasks: tasks.len(),
        num_records: records.len(),
        trajectories_per_task,
        task_ids: tasks.iter().map(|t| t.file.task_id.clone()).collect(),
        task_seeds: (0..tasks.len()).map(|i| task_seed(seed, i)).collect(),
    };
    write_manifest(dir, "sft_manifest.json", &manifest)?;
    Ok(manifest)
}

/// Writes `dpt.jsonl` and `dpt_manifest.json` into `dir`.
pub fn build_dpt_dataset(
    tasks: &[(TaskFile, Oracle)],
    rollout_policy: Option<&PolicyHandle>,
    trajectories_per_task: usize,
    seed: u64,
    dir: &Path,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let records = dpt_records(tasks, rollout_policy, trajectories_per_task, seed)?;
    write_jsonl(&dir.join("dpt.jsonl"), &records)?;
    let manifest = CorpusManifest {
        kind: "dpt".into(),
        schema_version: SCHEMA_VERSION,
        seed,
        num_tasks: tasks.len(),
        num_records: records.len(),
        trajectories_per_task,
        task_ids: tasks.iter().map(|t| t.0.task_id.clone()).collect(),
        task_seeds: (0..tasks.len()).map(|i| task_seed(seed, i)).collect(),
    };
    write_manifest(dir, "dpt_manifest.json", &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(obs: usize, action: usize, reward: f64) -> Step {
        Step { obs, action, reward }
    }

    #[test]
    fn schema_example() {
        let t = Trajectory {
            task_id: "x".into(),
            steps: vec![step(3, 1, 1.0 / 3.0)],
        };
        assert_eq!(encode(&t).text, "<O_1> 3, <A_1> 1, <R_1> 0.33");
    }

    #[test]
    fn empty_roundtrip() {
        assert_eq!(encode(&Trajectory::default()).text, "");
        assert!(decode("").unwrap().steps.is_empty());
    }

    #[test]
    fn decodes_charge_cost() {
        assert_eq!(decode("<O_1> 0, <A_1> 2, <R_1> -0.02").unwrap().steps, vec![step(0, 2, -0.02)]);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "<X_1> 0, <A_1> 2, <R_1> -0.02",
            "<O_1> 0, <A_1> 2, <R_1> -0.020",
            "<O_1> 0, <A_1> 2, <R_1> 0.2",
            "<O_1> 00, <A_1> 2, <R_1> 0.20",
            "<O_1> 0, <A_1> 2, <R_1> 0.20, ",
            "<O_1> 0, <A_1> 2, <R_1> 0.20,<O_2> 0, <A_2> 2, <R_2> 0.20",
            "<O_1> 0, <A_1> 2, <R_1> 0.20, <O_3> 0, <A_3> 2, <R_3> 0.20",
            "<O_1> 0,  <A_1> 2, <R_1> 0.20",
            "<O_1> +1, <A_1> 2, <R_1> 0.20",
            "<O_1> 1, <A_1> 2, <R_1> 00.20",
            "<O_1> 1, <A_1> 2, <R_1> .20",
        ] {
            assert!(matches!(decode(bad), Err(Error::Parse { .. })), "{bad}");
        }
    }

    #[test]
    fn parse_error_offset_points_at_problem() {
        match decode("<O_1> 0, <B_1> 2, <R_1> 0.00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn context_roundtrip() {
        let a = Trajectory {
            task_id: String::new(),
            steps: vec![step(1, 0, -0.02), step(2, 1, 0.22)],
        };
        let b = Trajectory {
            task_id: String::new(),
            steps: vec![step(0, 1, 0.0)],
        };
        let text = encode_context(&[a.clone(), b.clone()]);
        assert_eq!(
            text,
            "TRAJ 1: <O_1> 1, <A_1> 0, <R_1> -0.02, <O_2> 2, <A_2> 1, <R_2> 0.22\nTRAJ 2: <O_1> 0, <A_1> 1, <R_1> 0.00"
        );
        assert_eq!(decode_context(&text).unwrap(), vec![a, b]);
        assert!(decode_context("").unwrap().is_empty());
        assert!(decode_context("TRAJ 2: <O_1> 0, <A_1> 1, <R_1> 0.00").is_err());
    }
}
