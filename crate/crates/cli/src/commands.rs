use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use seqlab::dataset::{build_dpt_dataset, build_sft_corpus, SourceTask};
use seqlab::envs::{gen_darkroom, split_darkroom_goals, DARKROOM_SIZE};
use seqlab::eval::{
    darkroom_eval, optimality_gap, run_experiment_grid, save_grid_csv, EvalConfig, EvalTask, PolicySpec,
};
use seqlab::rollout::{serve_lines, spawn_tcp_server, Handler, HistoryPolicy, PolicyHandle};
use seqlab::solvers::SolutionExport;
use seqlab::theory::{run_e2_simulation, save_e2_csv};
use seqlab::{Error, Rng, Task, TaskFile, TaskMetadata};

use crate::config::{CorpusFormat, GoalSet, RunConfig, SettingKind};
use crate::Failure;

type Artifacts = Vec<PathBuf>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs one command and records it in `<out>/manifest.json`.
pub fn run_logged(
    name: &str,
    cfg: &RunConfig,
    f: fn(&RunConfig) -> Result<(Artifacts, Option<String>), Failure>,
) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let (artifacts, failed_check) = f(cfg)?;
    let path = cfg.out.join("manifest.json");
    let mut manifest: Value = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_else(|| json!({}));
    manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
    let entry = json!({
        "config": cfg,
        "seed": cfg.seed,
        "started_unix": started,
        "wall_time_secs": clock.elapsed().as_secs_f64(),
        "artifacts": artifacts
            .iter()
            .map(|p| p.strip_prefix(&cfg.out).unwrap_or(p).display().to_string())
            .collect::<Vec<_>>(),
        "check_failed": failed_check,
    });
    if !manifest["runs"].is_object() {
        manifest["runs"] = json!({});
    }
    manifest["runs"][name] = entry;
    write_json(&path, &manifest)?;
    match failed_check {
        Some(msg) => Err(Failure::Check(msg)),
        None => Ok(()),
    }
}

fn darkroom_goals(cfg: &RunConfig) -> Vec<(usize, usize)> {
    let (train, test) = split_darkroom_goals(&mut Rng::new(cfg.seed));
    match cfg.darkroom.goals {
        GoalSet::All => (0..DARKROOM_SIZE).flat_map(|y| (0..DARKROOM_SIZE).map(move |x| (x, y))).collect(),
        GoalSet::Train => train,
        GoalSet::Test => test,
    }
}

fn clear_json(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

pub fn gen(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let dir = cfg.out.join("tasks");
    clear_json(&dir)?;
    let files = match cfg.task_spec() {
        Some(spec) => spec.generate_many("task-", cfg.num_tasks, cfg.seed)?,
        None => darkroom_goals(cfg)
            .into_iter()
            .map(|goal| {
                Ok(TaskFile::new(
                    format!("darkroom-{}-{}", goal.0, goal.1),
                    TaskMetadata {
                        generator: "darkroom".into(),
                        seed: None,
                        params: json!({ "goal": [goal.0, goal.1] }),
                    },
                    Task::Darkroom(gen_darkroom(goal)?),
                ))
            })
            .collect::<seqlab::Result<Vec<_>>>()?,
    };
    let mut out = Vec::new();
    for f in &files {
        let path = dir.join(format!("{}.json", f.task_id));
        f.write(&path)?;
        out.push(path);
    }
    println!("wrote {} tasks to {}", files.len(), dir.display());
    Ok((out, None))
}

fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskFile>, Failure> {
    let dir = cfg.out.join("tasks");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e} (run `gen` first)", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(format!("no task files in {} (run `gen` first)", dir.display())));
    }
    Ok(paths.iter().map(|p| TaskFile::read(p)).collect::<seqlab::Result<Vec<_>>>()?)
}

pub fn solve(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let tasks = load_tasks(cfg)?;
    let dir = cfg.out.join("solutions");
    clear_json(&dir)?;
    let solved = EvalTask::solve_all(tasks, &cfg.solver)?;
    let mut out = Vec::new();
    let mut summary = String::from("task_id,kind,initial_value,node_count\n");
    for t in &solved {
        let export = SolutionExport::new(&t.file.task_id, &t.file.task, &t.oracle, false)?;
        summary += &format!(
            "{},{},{},{}\n",
            export.task_id,
            export.kind,
            export.initial_value,
            export.node_count.map(|n| n.to_string()).unwrap_or_default()
        );
        let path = dir.join(format!("{}.json", t.file.task_id));
        write_json(&path, &export)?;
        out.push(path);
    }
    let path = dir.join("summary.csv");
    fs::write(&path, summary)?;
    out.push(path);
    let fallbacks = solved.iter().filter(|t| !t.oracle.is_exact()).count();
    println!("solved {} tasks ({fallbacks} QMDP fallbacks)", solved.len());
    Ok((out, None))
}

pub fn export(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let tasks = EvalTask::solve_all(load_tasks(cfg)?, &cfg.solver)?;
    let dir = cfg.out.join("corpus");
    fs::create_dir_all(&dir)?;
    let n = cfg.dataset.trajectories_per_task;
    let manifest = match cfg.dataset.format {
        CorpusFormat::Sft => {
            let spec: PolicySpec = cfg.dataset.policy.parse()?;
            let sources = tasks
                .iter()
                .map(|t| {
                    Ok(SourceTask {
                        file: t.file.clone(),
                        policy: spec.resolve(t)?,
                    })
                })
                .collect::<seqlab::Result<Vec<_>>>()?;
            build_sft_corpus(&sources, n, cfg.seed, &dir)?
        }
        CorpusFormat::Dpt => {
            let behaviour = match cfg.dataset.policy.as_str() {
                "oracle" => None,
                "random" => Some(PolicyHandle::Random),
                other => {
                    return Err(Failure::Validation(format!(
                        "invalid config field `dataset.policy`: `{other}` is not supported for dpt corpora"
                    )))
                }
            };
            let pairs: Vec<_> = tasks.into_iter().map(|t| (t.file, t.oracle)).collect();
            build_dpt_dataset(&pairs, behaviour.as_ref(), n, cfg.seed, &dir)?
        }
    };
    println!("wrote {} {} records to {}", manifest.num_records, manifest.kind, dir.display());
    Ok((
        vec![dir.join(format!("{}.jsonl", manifest.kind)), dir.join(format!("{}_manifest.json", manifest.kind))],
        None,
    ))
}

fn policy_spec(cfg: &RunConfig) -> Result<PolicySpec, Failure> {
    Ok(PolicySpec::parse_with(&cfg.policy, cfg.client_config())?)
}

fn per_task_csv(report: &seqlab::eval::EvalReport) -> String {
    let mut s = String::from("task_id,opt_reward,eval_reward,gap,dp_value,rollouts,invalid_actions\n");
    for r in &report.per_task {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.task_id,
            r.opt_reward,
            r.eval_reward,
            r.gap.map(|g| g.to_string()).unwrap_or_default(),
            r.dp_value.map(|g| g.to_string()).unwrap_or_default(),
            r.rollouts,
            r.invalid_actions
        );
    }
    s
}

pub fn eval(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let spec = policy_spec(cfg)?;
    let dir = cfg.out.join("reports");
    fs::create_dir_all(&dir)?;
    if let Some(grid) = &cfg.eval.grid {
        let results = run_experiment_grid(grid, &spec, cfg.seed)?;
        let csv = dir.join("grid.csv");
        let js = dir.join("grid.json");
        save_grid_csv(&csv, &results)?;
        write_json(&js, &results)?;
        for (i, r) in results.iter().enumerate() {
            println!(
                "cell {i}: {} T={} mean_gap={:.4} [{:.4}, {:.4}]",
                r.cell.setting, r.cell.horizon, r.report.mean_gap, r.report.ci_low, r.report.ci_high
            );
        }
        let flagged = results.iter().filter(|r| r.report.pairing_warning).count();
        let check = (flagged > 0).then(|| format!("{flagged} cells have a mean gap below -2 half-widths"));
        return Ok((vec![csv, js], check));
    }
    if cfg.setting == SettingKind::Darkroom {
        return Err(Failure::Validation(
            "invalid config field `setting`: use the `darkroom` command for Darkroom tasks".into(),
        ));
    }
    let tasks = EvalTask::solve_all(load_tasks(cfg)?, &cfg.solver)?;
    let ecfg = EvalConfig {
        rollouts_per_task: cfg.eval.rollouts_per_task,
        seed: cfg.seed,
        model: cfg.eval.model,
        num_support: cfg.eval.num_support,
        support_policy: cfg.eval.support_policy,
    };
    let report = optimality_gap(&tasks, &spec, &ecfg)?;
    let js = dir.join("eval.json");
    let csv = dir.join("eval.csv");
    write_json(&js, &report)?;
    fs::write(&csv, per_task_csv(&report))?;
    println!(
        "{}: mean gap {:.4} (95% CI [{:.4}, {:.4}]) over {} tasks, {} excluded, {} invalid actions",
        report.policy,
        report.mean_gap,
        report.ci_low,
        report.ci_high,
        report.n_eval,
        report.degenerate,
        report.invalid_action_count
    );
    let check = report
        .pairing_warning
        .then(|| "mean gap is below -2 half-widths; seed pairing looks broken".to_string());
    Ok((vec![js, csv], check))
}

pub fn theory_sim(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let mut theory = cfg.theory.clone();
    theory.seed = cfg.seed;
    let rows = run_e2_simulation(&theory)?;
    let dir = cfg.out.join("reports");
    fs::create_dir_all(&dir)?;
    let path = dir.join("theory_sim.csv");
    save_e2_csv(&path, &rows)?;
    let violated = rows.iter().filter(|r| r.violated).count();
    println!("{} cells, {violated} bound violations", rows.len());
    let check = (violated > 0).then(|| format!("{violated} of {} cells violate the gap bound", rows.len()));
    Ok((vec![path], check))
}

pub fn darkroom(cfg: &RunConfig) -> Result<(Artifacts, Option<String>), Failure> {
    let spec = policy_spec(cfg)?;
    let goals = darkroom_goals(cfg);
    let report = darkroom_eval(&spec, &goals, cfg.darkroom.rollouts_per_goal, cfg.seed)?;
    let dir = cfg.out.join("reports");
    fs::create_dir_all(&dir)?;
    let path = dir.join("darkroom.json");
    write_json(&path, &report)?;
    println!(
        "{}: mean reward {:.2} (95% CI [{:.2}, {:.2}]); oracle {:.2}, random {:.2} over {} goals",
        report.policy,
        report.mean_reward,
        report.ci_low,
        report.ci_high,
        report.oracle_mean,
        report.random_mean,
        goals.len()
    );
    Ok((vec![path], None))
}

pub fn serve(cfg: &RunConfig, addr: Option<&str>) -> Result<(), Failure> {
    let spec = policy_spec(cfg)?;
    if matches!(spec, PolicySpec::External(_)) {
        return Err(Failure::Validation("invalid config field `policy`: cannot serve an external policy".into()));
    }
    let tasks = EvalTask::solve_all(load_tasks(cfg)?, &cfg.solver)?;
    let mut table = BTreeMap::new();
    for t in &tasks {
        let policy = HistoryPolicy::new(Arc::new(t.file.task.clone()), spec.resolve(t)?)?;
        table.insert(t.file.task_id.clone(), policy);
    }
    let handler: Handler = Arc::new(move |req| {
        table
            .get(&req.task_id)
            .ok_or_else(|| Error::Protocol(format!("unknown task `{}`", req.task_id)))?
            .respond(req)
    });
    match addr {
        Some(addr) => {
            let local = spawn_tcp_server(addr, handler)?;
            println!("listening on {local}");
            std::io::stdout().flush()?;
            loop {
                std::thread::park();
            }
        }
        None => {
            let stdin = std::io::stdin();
            serve_lines(stdin.lock(), std::io::stdout().lock(), &handler)?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqlab::solvers::solve_task;

    #[test]
    fn goal_sets_partition() {
        let cfg = RunConfig::default();
        let test = darkroom_goals(&cfg);
        let train = darkroom_goals(&RunConfig {
            darkroom: crate::config::DarkroomOptions {
                goals: GoalSet::Train,
                ..Default::default()
            },
            ..Default::default()
        });
        assert_eq!((train.len(), test.len()), (80, 20));
        assert!(test.iter().all(|g| !train.contains(g)));
    }

    #[test]
    fn solve_uses_fallback_only_on_budget() {
        let t = solve_task(&Task::Darkroom(gen_darkroom((1, 1)).unwrap()), &Default::default(), false).unwrap();
        assert!(t.is_exact());
    }
}
