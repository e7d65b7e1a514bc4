//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use seqlab::dataset::{decode, encode};
use seqlab::envs::{gen_energy_apomdp, gen_energy_mdp, gen_energy_pomdp, max_row_kl, AmbiguityConfig, EnergyParams, InitialDist};
use seqlab::eval::{darkroom_eval, optimality_gap, EvalConfig, EvalTask, PolicySpec, Setting, TaskSpec};
use seqlab::rollout::{ModelChoice, RolloutOptions};
use seqlab::solvers::{solve_apomdp, solve_mdp, solve_pomdp, BeliefSolverConfig};
use seqlab::theory::{
    empirical_q_error, lsa_predict, q_error_bound, run_e2_simulation, train_lsa, E2Config, LinearTaskFamily, LsaLayer,
    LsaPredictor, TrainConfig,
};
use seqlab::{rollout, AmbiguousPomdp, Belief, PolicyHandle, Rng, Step, Task, Trajectory};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: seqlab::Error) -> String {
    e.to_string()
}

fn energy(e: usize, p: f64, q: f64, horizon: usize) -> EnergyParams {
    EnergyParams {
        energy_cap: e,
        success_prob: p,
        obs_prob: q,
        horizon,
        ..Default::default()
    }
}

fn e2_grid() -> Check {
    let rows = run_e2_simulation(&E2Config::default()).map_err(err)?;
    ensure(rows.len() == 63, || format!("{} cells instead of 63", rows.len()))?;
    let bad: Vec<_> = rows.iter().filter(|r| r.violated).collect();
    ensure(bad.is_empty(), || {
        let r = bad[0];
        format!("{} cells violate; first kappa={} N={} M={} gap={} bound={}", bad.len(), r.kappa, r.n, r.m, r.mean_gap, r.bound)
    })?;
    let tightest = rows.iter().map(|r| r.mean_gap / r.bound).fold(0.0, f64::max);
    Ok(format!("63/63 cells below the bound, largest gap/bound ratio {tightest:.3}"))
}

fn q_error_dominance() -> Check {
    let d = 10;
    let cov = DMatrix::identity(d, d);
    let mut worst = f64::NEG_INFINITY;
    for (ni, n) in [100.0, 1000.0, 10000.0].into_iter().enumerate() {
        for (mi, m) in [10usize, 20, 50, 100, 200, 500, 1000].into_iter().enumerate() {
            let (mean, se) = empirical_q_error(&cov, m, n, 500, 50, 1000 + (ni * 10 + mi) as u64).map_err(err)?;
            let bound = q_error_bound(d, &cov, m as f64, n);
            let z = (mean - bound) / se;
            worst = worst.max(z);
            ensure(mean <= bound + 2.0 * se, || {
                format!("N={n} M={m}: eps_Q {mean:.5} exceeds bound {bound:.5} by more than 2 SE ({se:.5})")
            })?;
        }
    }
    Ok(format!("21/21 cells within bound + 2 SE, largest (eps_Q - bound)/SE = {worst:.2}"))
}

fn random_baselines() -> Check {
    let targets = [(5, 0.576), (10, 0.496), (15, 0.464)];
    let mut parts = Vec::new();
    for (i, (horizon, target)) in targets.into_iter().enumerate() {
        let spec = TaskSpec {
            setting: Setting::Mdp,
            base: EnergyParams {
                horizon,
                ..Default::default()
            },
            p_low: 0.5,
            p_high: 1.0,
            ..Default::default()
        };
        let files = spec.generate_many("mdp-", 100, 500 + i as u64).map_err(err)?;
        let tasks = EvalTask::solve_all(files, &BeliefSolverConfig::default()).map_err(err)?;
        let cfg = EvalConfig {
            seed: 900 + i as u64,
            ..Default::default()
        };
        let report = optimality_gap(&tasks, &PolicySpec::Random, &cfg).map_err(err)?;
        ensure((report.mean_gap - target).abs() <= 0.03, || {
            format!("T={horizon}: gap {:.4} vs {target} (tolerance 0.03)", report.mean_gap)
        })?;
        parts.push(format!("T={horizon} {:.1}%", 100.0 * report.mean_gap));
    }
    Ok(parts.join(", "))
}

fn oracle_identity() -> Check {
    let solver = BeliefSolverConfig::default();
    let cases = [
        (Setting::Mdp, energy(9, 0.75, 1.0, 10), 20),
        (Setting::Pomdp, energy(9, 0.75, 0.8, 5), 8),
        (Setting::Apomdp, energy(9, 0.75, 0.8, 4), 4),
    ];
    let mut parts = Vec::new();
    for (i, (setting, base, count)) in cases.into_iter().enumerate() {
        let spec = TaskSpec {
            setting,
            base,
            ..Default::default()
        };
        let tasks = EvalTask::solve_all(spec.generate_many("t-", count, 40 + i as u64).map_err(err)?, &solver).map_err(err)?;
        for model in [ModelChoice::Base, ModelChoice::UniformPerEpisode] {
            let cfg = EvalConfig {
                seed: 7,
                model,
                ..Default::default()
            };
            let report = optimality_gap(&tasks, &PolicySpec::Oracle, &cfg).map_err(err)?;
            ensure(report.per_task.iter().all(|r| r.gap == Some(0.0)) && report.mean_gap == 0.0, || {
                format!("{setting}: oracle gap {} under {model:?}", report.mean_gap)
            })?;
            ensure(report.ci_low <= 0.0 && 0.0 <= report.ci_high, || format!("{setting}: CI excludes 0"))?;
        }
        parts.push(format!("{setting} ({count} tasks)"));
    }
    Ok(format!("gap exactly 0 on {}", parts.join(", ")))
}

fn solver_oracles() -> Check {
    // MDP: exhaustive enumeration of 3^(3*3) policies.
    let mdp = gen_energy_mdp(&energy(2, 0.8, 1.0, 3)).map_err(err)?;
    let sol = solve_mdp(&mdp);
    let (best_state, best_initial) = common::enumerate_policies(&mdp);
    ensure(sol.values[0] == best_state, || format!("V_1 {:?} vs enumeration {:?}", sol.values[0], best_state))?;
    let own = common::evaluate_policy(&mdp, &sol.policy);
    ensure(own[0] == best_state, || "solver policy does not attain the enumerated optimum".into())?;
    ensure(sol.initial_value(mdp.initial_dist()) == best_initial, || {
        format!("initial value {} vs {}", sol.initial_value(mdp.initial_dist()), best_initial)
    })?;

    // POMDP: unmemoized expectimax.
    let pomdp = gen_energy_pomdp(&energy(2, 0.8, 0.8, 3)).map_err(err)?;
    let psol = solve_pomdp(&pomdp, &BeliefSolverConfig::default()).map_err(err)?;
    let models = [seqlab::ModelPair {
        transition: pomdp.mdp().transition().clone(),
        observation: pomdp.observation().clone(),
    }];
    let r = pomdp.mdp().rewards();
    let brute = common::expectimax_initial(&models, r, pomdp.mdp().initial_dist(), 3, pomdp.mdp().discount(), 1.0);
    let pdiff = (psol.initial_value() - brute).abs();
    ensure(pdiff <= 1e-6, || format!("POMDP {} vs expectimax {brute}", psol.initial_value()))?;
    for o in 0..pomdp.num_obs() {
        let (_, b) = common::first_posterior(pomdp.mdp().initial_dist(), o, pomdp.observation());
        let v = psol.value(0, &Belief::new(b.clone()).map_err(err)?).map_err(err)?;
        let want = common::expectimax(&models, r, pomdp.mdp().discount(), 1.0, &b, 3);
        ensure((v - want).abs() <= 1e-6, || format!("POMDP V_1 after o={o}: {v} vs {want}"))?;
    }

    // APOMDP: explicit two-step enumeration with two models.
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let cfg = AmbiguityConfig {
            num_models: 2,
            ..Default::default()
        };
        let apomdp = gen_energy_apomdp(&energy(2, 0.8, 0.8, 2), &cfg, alpha, &mut Rng::new(11)).map_err(err)?;
        let asol = solve_apomdp(&apomdp, &BeliefSolverConfig::default()).map_err(err)?;
        let base = &apomdp.models()[0];
        for o in 0..apomdp.num_obs() {
            let (p, b) = common::first_posterior(apomdp.initial_dist(), o, &base.observation);
            if p == 0.0 {
                continue;
            }
            let v = asol.value(0, &Belief::new(b.clone()).map_err(err)?).map_err(err)?;
            let want = common::two_step_meu(apomdp.models(), apomdp.rewards(), apomdp.discount(), alpha, &b);
            worst = worst.max((v - want).abs());
            ensure((v - want).abs() <= 1e-9, || format!("APOMDP alpha={alpha} o={o}: {v} vs {want}"))?;
        }
    }
    Ok(format!("MDP exact; POMDP diff {pdiff:.1e}; APOMDP max diff {worst:.1e}"))
}

fn consistency() -> Check {
    let cfg = BeliefSolverConfig::default();
    // q = 1: beliefs stay at vertices.
    let params = energy(9, 0.7, 1.0, 6);
    let mdp_sol = solve_mdp(&gen_energy_mdp(&params).map_err(err)?);
    let psol = solve_pomdp(&gen_energy_pomdp(&params).map_err(err)?, &cfg).map_err(err)?;
    let mut worst: f64 = 0.0;
    for t in 0..params.horizon {
        for s in 0..params.num_states() {
            let v = psol.value(t, &Belief::delta(params.num_states(), s)).map_err(err)?;
            worst = worst.max((v - mdp_sol.values[t][s]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("q=1 POMDP differs from MDP by {worst}"))?;

    // Singleton ambiguity set.
    let pomdp = gen_energy_pomdp(&energy(9, 0.7, 0.8, 5)).map_err(err)?;
    let psol = solve_pomdp(&pomdp, &cfg).map_err(err)?;
    for alpha in [0.0, 0.5, 1.0] {
        let asol = solve_apomdp(&AmbiguousPomdp::from_pomdp(&pomdp, alpha).map_err(err)?, &cfg).map_err(err)?;
        ensure(asol.initial_value() == psol.initial_value() && asol.nodes() == psol.nodes(), || {
            format!("|M|=1 at alpha={alpha}: {} vs {}", asol.initial_value(), psol.initial_value())
        })?;
    }

    // Monotone pessimism.
    let amb = AmbiguityConfig {
        num_models: 3,
        ..Default::default()
    };
    let apomdp = gen_energy_apomdp(&energy(9, 0.7, 0.8, 4), &amb, 0.0, &mut Rng::new(5)).map_err(err)?;
    let mut values = Vec::new();
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let sol = solve_apomdp(&apomdp.with_alpha(alpha).map_err(err)?, &cfg).map_err(err)?;
        values.push(sol.initial_value());
    }
    ensure(values.windows(2).all(|w| w[1] <= w[0]), || format!("V(alpha) not non-increasing: {values:?}"))?;
    Ok(format!(
        "q=1 max diff {worst:.1e}; |M|=1 identical; V(alpha) {:.4} -> {:.4}",
        values[0],
        values[4]
    ))
}

fn darkroom() -> Check {
    let goals: Vec<(usize, usize)> = (0..10).flat_map(|y| (0..10).map(move |x| (x, y))).collect();
    let report = darkroom_eval(&PolicySpec::Random, &goals, 5, 3).map_err(err)?;
    for g in &report.per_goal {
        let want = 100.0 - (g.goal.0 + g.goal.1) as f64;
        ensure(g.oracle_reward == want, || format!("goal {:?}: oracle {} vs {want}", g.goal, g.oracle_reward))?;
    }
    ensure(report.oracle_mean == 91.0, || format!("oracle mean {}", report.oracle_mean))?;
    ensure(report.random_mean < 2.0, || format!("random mean {}", report.random_mean))?;
    Ok(format!("oracle mean {}, random mean {:.2}", report.oracle_mean, report.random_mean))
}

fn lsa_training() -> Check {
    let family = LinearTaskFamily {
        feature_cov: DMatrix::identity(2, 2),
    };
    let cfg = TrainConfig::default();
    let mut rng = Rng::new(7);
    let layer = LsaLayer::random(2, 1e-3, &mut rng);
    let (layer, log) = train_lsa(layer, &family, &cfg, &mut rng).map_err(err)?;
    let closed = LsaPredictor::new(&family.feature_cov, cfg.prompt_len as f64).map_err(err)?;
    let mut held_out = Rng::new(99);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..1000 {
        let (prompt, _) = family.sample_labelled(50, &mut held_out).map_err(err)?;
        let c = lsa_predict(&closed, &prompt).map_err(err)?;
        num += (layer.predict(&prompt) - c).powi(2);
        den += c * c;
    }
    let rel = (num / den).sqrt();
    ensure(rel < 0.05, || format!("relative RMS difference {rel:.4}"))?;
    Ok(format!(
        "relative RMS {:.2}% after {} steps (loss {:.4} -> {:.4})",
        100.0 * rel,
        cfg.steps,
        log.losses[0],
        log.losses.last().copied().unwrap_or(f64::NAN)
    ))
}

fn serialization() -> Check {
    let example = Trajectory {
        task_id: "x".into(),
        steps: vec![Step {
            obs: 3,
            action: 1,
            reward: 1.0 / 3.0,
        }],
    };
    let text = encode(&example).text;
    ensure(text == "<O_1> 3, <A_1> 1, <R_1> 0.33", || format!("schema example encoded as `{text}`"))?;
    let mut rng = Rng::new(2024);
    for i in 0..1000 {
        let len = rng.below(40);
        let steps: Vec<Step> = (0..len)
            .map(|_| Step {
                obs: rng.below(1000),
                action: rng.below(20),
                reward: (rng.below(20001) as i64 - 10000) as f64 / 100.0,
            })
            .collect();
        let traj = Trajectory {
            task_id: String::new(),
            steps,
        };
        let enc = encode(&traj);
        let back = decode(&enc.text).map_err(|e| format!("trajectory {i}: {e}"))?;
        ensure(back.steps == traj.steps, || format!("trajectory {i} did not round-trip"))?;
        ensure(encode(&back).text == enc.text, || format!("trajectory {i} re-encodes differently"))?;
    }
    Ok("schema example byte-exact; 1000/1000 random trajectories round-trip".into())
}

fn ambiguity_sampler() -> Check {
    let mut accepted = 0;
    for seed in 0..40 {
        let cfg = AmbiguityConfig {
            num_models: 5,
            ..Default::default()
        };
        let params = energy(9, 0.5 + 0.01 * seed as f64, 0.8, 5);
        let apomdp = gen_energy_apomdp(&params, &cfg, 0.5, &mut Rng::new(seed)).map_err(err)?;
        for m in &apomdp.models()[1..] {
            let kl = max_row_kl(&apomdp.models()[0], m).map_err(err)?;
            ensure(kl <= cfg.kl_radius, || format!("seed {seed}: accepted model with row KL {kl}"))?;
            accepted += 1;
        }
    }

    let single = AmbiguityConfig {
        num_models: 1,
        ..Default::default()
    };
    let params = EnergyParams {
        initial: InitialDist::Uniform,
        ..energy(9, 0.8, 0.8, 5)
    };
    let apomdp = gen_energy_apomdp(&params, &single, 0.5, &mut Rng::new(1)).map_err(err)?;
    ensure(apomdp.models().len() == 1, || "singleton set has extra members".into())?;
    let pomdp = gen_energy_pomdp(&params).map_err(err)?;
    let cfg = BeliefSolverConfig::default();
    let asol = solve_apomdp(&apomdp, &cfg).map_err(err)?;
    let psol = solve_pomdp(&pomdp, &cfg).map_err(err)?;
    ensure(asol.initial_value() == psol.initial_value(), || "singleton value differs from POMDP".into())?;
    let a_task = Task::Apomdp(apomdp);
    let p_task = Task::Pomdp(pomdp);
    let a_pol = PolicyHandle::Oracle(seqlab::solvers::Oracle::Belief(asol.into()));
    let p_pol = PolicyHandle::Oracle(seqlab::solvers::Oracle::Belief(psol.into()));
    for seed in 0..20 {
        let uniform = RolloutOptions {
            model: ModelChoice::UniformPerEpisode,
            ..Default::default()
        };
        let a = rollout(&a_task, "a", &a_pol, seed, None, &uniform).map_err(err)?;
        let p = rollout(&p_task, "a", &p_pol, seed, None, &RolloutOptions::default()).map_err(err)?;
        ensure(a.trajectory == p.trajectory && a.model == 0, || format!("seed {seed}: singleton rollout differs"))?;
    }
    Ok(format!("{accepted}/{accepted} perturbed models within KL 0.2; |M|=1 matches the POMDP in solve and rollout"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("bound validation grid (kappa x N x M = 63 cells)", e2_grid),
        ("Q-error bound dominance (d=10, identity covariance)", q_error_dominance),
        ("random-policy gaps on energy MDPs (T = 5, 10, 15)", random_baselines),
        ("oracle gap identity (MDP, POMDP, APOMDP)", oracle_identity),
        ("solvers against brute-force references", solver_oracles),
        ("consistency collapses and monotone pessimism", consistency),
        ("darkroom oracle and random baselines", darkroom),
        ("LSA trainer matches the closed-form predictor", lsa_training),
        ("trajectory serialization", serialization),
        ("ambiguity sampler", ambiguity_sampler),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
