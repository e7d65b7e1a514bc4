//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use seqlab::model::{Kernel, ModelPair};
use seqlab::TabularMdp;

/// Exact value of a time-indexed deterministic policy, `policy[t][s]`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let (n, horizon, g) = (mdp.num_states(), mdp.horizon(), mdp.discount());
    let mut v = vec![vec![0.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..n {
            let a = policy[t][s];
            let mut next = 0.0;
            for sp in 0..n {
                next += mdp.transition().prob(s, a, sp) * v[t + 1][sp];
            }
            v[t][s] = mdp.reward(s, a) + g * next;
        }
    }
    v
}

/// Best value of every state over all `|A|^(T |S|)` deterministic Markov
/// policies, and the expected initial value of the best policy.
pub fn enumerate_policies(mdp: &TabularMdp) -> (Vec<f64>, f64) {
    let (n, na, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let slots = n * horizon;
    let total = na.pow(slots as u32);
    let mut best_state = vec![f64::NEG_INFINITY; n];
    let mut best_initial = f64::NEG_INFINITY;
    let mut policy = vec![vec![0; n]; horizon];
    for code in 0..total {
        let mut c = code;
        for slot in 0..slots {
            policy[slot / n][slot % n] = c % na;
            c /= na;
        }
        let v = evaluate_policy(mdp, &policy);
        for s in 0..n {
            best_state[s] = best_state[s].max(v[0][s]);
        }
        let init: f64 = mdp.initial_dist().iter().zip(&v[0]).map(|(p, x)| p * x).sum();
        best_initial = best_initial.max(init);
    }
    (best_state, best_initial)
}

fn update(b: &[f64], a: usize, o: usize, model: &ModelPair) -> (f64, Vec<f64>) {
    let n = b.len();
    let mut post = vec![0.0; n];
    for sp in 0..n {
        let pred: f64 = (0..n).map(|s| b[s] * model.transition.prob(s, a, sp)).sum();
        post[sp] = pred * model.observation.prob(sp, a, o);
    }
    let z: f64 = post.iter().sum();
    if z > 0.0 {
        post.iter_mut().for_each(|x| *x /= z);
    }
    (z, post)
}

fn immediate(b: &[f64], a: usize, reward: &[Vec<f64>]) -> f64 {
    b.iter().enumerate().map(|(s, p)| p * reward[s][a]).sum()
}

/// Unmemoized alpha-maximin expectimax over the whole belief tree.
/// With a single model this is plain POMDP expectimax.
pub fn expectimax(
    models: &[ModelPair],
    reward: &[Vec<f64>],
    discount: f64,
    alpha: f64,
    b: &[f64],
    steps_left: usize,
) -> f64 {
    if steps_left == 0 {
        return 0.0;
    }
    let na = reward[0].len();
    let no = models[0].observation.num_outcomes();
    (0..na)
        .map(|a| {
            let hs: Vec<f64> = models
                .iter()
                .map(|m| {
                    (0..no)
                        .map(|o| {
                            let (p, post) = update(b, a, o, m);
                            if p > 0.0 {
                                p * expectimax(models, reward, discount, alpha, &post, steps_left - 1)
                            } else {
                                0.0
                            }
                        })
                        .sum()
                })
                .collect();
            let lo = hs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            immediate(b, a, reward) + discount * (alpha * lo + (1.0 - alpha) * hi)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Posterior after the first emission (action 0's row of `observation`).
pub fn first_posterior(initial: &[f64], o: usize, observation: &Kernel) -> (f64, Vec<f64>) {
    let mut post: Vec<f64> = initial.iter().enumerate().map(|(s, p)| p * observation.prob(s, 0, o)).collect();
    let z: f64 = post.iter().sum();
    if z > 0.0 {
        post.iter_mut().for_each(|x| *x /= z);
    }
    (z, post)
}

/// Expected value before the first observation, emissions from `models[0]`.
pub fn expectimax_initial(models: &[ModelPair], reward: &[Vec<f64>], initial: &[f64], horizon: usize, discount: f64, alpha: f64) -> f64 {
    let no = models[0].observation.num_outcomes();
    (0..no)
        .map(|o| {
            let (p, post) = first_posterior(initial, o, &models[0].observation);
            if p > 0.0 {
                p * expectimax(models, reward, discount, alpha, &post, horizon)
            } else {
                0.0
            }
        })
        .sum()
}

/// Two-step alpha-MEU value written out explicitly: immediate reward plus the
/// alpha mix over models of the best last-step reward after each observation.
pub fn two_step_meu(models: &[ModelPair], reward: &[Vec<f64>], discount: f64, alpha: f64, b: &[f64]) -> f64 {
    let na = reward[0].len();
    let no = models[0].observation.num_outcomes();
    let mut best = f64::NEG_INFINITY;
    for a in 0..na {
        let mut hs = Vec::new();
        for m in models {
            let mut h = 0.0;
            for o in 0..no {
                let (p, post) = update(b, a, o, m);
                if p > 0.0 {
                    let last = (0..na).map(|a2| immediate(&post, a2, reward)).fold(f64::NEG_INFINITY, f64::max);
                    h += p * last;
                }
            }
            hs.push(h);
        }
        let (lo, hi) = if hs[0] <= hs[1] { (hs[0], hs[1]) } else { (hs[1], hs[0]) };
        let u = immediate(b, a, reward) + discount * (alpha * lo + (1.0 - alpha) * hi);
        best = best.max(u);
    }
    best
}

/// Open-loop value: belief only propagates through the transition kernel.
pub fn open_loop_value(mdp: &TabularMdp, b: &[f64], steps_left: usize) -> f64 {
    if steps_left == 0 {
        return 0.0;
    }
    let n = b.len();
    (0..mdp.num_actions())
        .map(|a| {
            let next: Vec<f64> = (0..n)
                .map(|sp| (0..n).map(|s| b[s] * mdp.transition().prob(s, a, sp)).sum())
                .collect();
            immediate(b, a, mdp.rewards()) + mdp.discount() * open_loop_value(mdp, &next, steps_left - 1)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}
