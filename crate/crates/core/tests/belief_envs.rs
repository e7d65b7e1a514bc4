use seqlab::belief::{belief_predictive, belief_update, initial_posterior, kl_divergence, Belief};
use seqlab::envs::{
    gen_darkroom, gen_energy_apomdp, gen_energy_mdp, gen_energy_pomdp, max_row_kl, split_darkroom_goals, AmbiguityConfig,
    EnergyParams, CHARGE, WORK,
};
use seqlab::solvers::solve_mdp;
use seqlab::Rng;

fn energy(p: f64, q: f64) -> EnergyParams {
    EnergyParams {
        success_prob: p,
        obs_prob: q,
        ..Default::default()
    }
}

#[test]
fn belief_sequence_matches_path_enumeration() {
    let pomdp = gen_energy_pomdp(&EnergyParams {
        energy_cap: 3,
        ..energy(0.7, 0.6)
    })
    .unwrap();
    let (t, q) = (pomdp.mdp().transition(), pomdp.observation());
    let init = pomdp.mdp().initial_dist().to_vec();
    let n = init.len();
    let obs = [2, 1, 1];
    let actions = [WORK, CHARGE];

    let mut b = initial_posterior(&init, obs[0], q).unwrap();
    let mut beliefs = vec![b.clone()];
    for k in 0..2 {
        b = belief_update(&b, actions[k], obs[k + 1], t, q).unwrap();
        beliefs.push(b.clone());
    }

    // Joint weight of every latent path s_0..s_k, marginalised onto s_k.
    for k in 0..3 {
        let mut marginal = vec![0.0; n];
        let paths = n.pow(k as u32 + 1);
        for code in 0..paths {
            let path: Vec<usize> = (0..=k).map(|i| code / n.pow(i as u32) % n).collect();
            let mut w = init[path[0]] * q.prob(path[0], 0, obs[0]);
            for i in 1..=k {
                w *= t.prob(path[i - 1], actions[i - 1], path[i]) * q.prob(path[i], actions[i - 1], obs[i]);
            }
            marginal[path[k]] += w;
        }
        let z: f64 = marginal.iter().sum();
        for s in 0..n {
            assert!((beliefs[k].probs()[s] - marginal[s] / z).abs() < 1e-12, "step {k} state {s}");
        }
    }
}

#[test]
fn predictive_matches_monte_carlo() {
    let pomdp = gen_energy_pomdp(&energy(0.75, 0.8)).unwrap();
    let (t, q) = (pomdp.mdp().transition(), pomdp.observation());
    let b = Belief::delta(10, 4);
    let pred = belief_predictive(&b, WORK, t, q).unwrap();
    // Work from level 4 lands on 3 with prob 0.75, stays at 4 otherwise.
    let off = 0.2 / 9.0;
    assert!((pred[3] - (0.8 * 0.75 + off * 0.25)).abs() < 1e-12);
    assert!((pred[4] - (0.8 * 0.25 + off * 0.75)).abs() < 1e-12);

    let mut rng = Rng::new(17);
    let draws = 1_000_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        let s = rng.categorical(t.row(4, WORK));
        counts[rng.categorical(q.row(s, WORK))] += 1;
    }
    for o in 0..10 {
        let f = counts[o] as f64 / draws as f64;
        let se = (pred[o] * (1.0 - pred[o]) / draws as f64).sqrt();
        assert!((f - pred[o]).abs() <= 3.0 * se, "obs {o}: {f} vs {}", pred[o]);
    }
}

#[test]
fn kl_matches_reverse_order_sum() {
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let mut p: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let mut q: Vec<f64> = (0..8).map(|_| rng.uniform() + 1e-3).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let mut reverse = 0.0;
        for i in (0..8).rev() {
            reverse += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
        assert!((kl_divergence(&p, &q).unwrap() - reverse).abs() < 1e-12);
    }
}

#[test]
fn work_reward_is_proportional_to_level() {
    let mdp = gen_energy_mdp(&energy(0.75, 1.0)).unwrap();
    assert!((mdp.reward(3, WORK) - 3.0 / 9.0).abs() < 1e-15);
    assert_eq!(mdp.reward(3, CHARGE), -0.02);
}

#[test]
fn emission_rows() {
    let pomdp = gen_energy_pomdp(&energy(0.75, 0.5)).unwrap();
    let q = pomdp.observation();
    for s in 0..10 {
        let row = q.row(s, 0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (o, &p) in row.iter().enumerate() {
            let want = if o == s { 0.5 } else { 0.5 / 9.0 };
            assert!((p - want).abs() < 1e-15);
        }
    }

    let pomdp = gen_energy_pomdp(&energy(0.75, 0.8)).unwrap();
    let row = pomdp.observation().row(6, 1).to_vec();
    let mut rng = Rng::new(8);
    let draws = 100_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        counts[rng.categorical(&row)] += 1;
    }
    for o in 0..10 {
        let f = counts[o] as f64 / draws as f64;
        let se = (row[o] * (1.0 - row[o]) / draws as f64).sqrt();
        assert!((f - row[o]).abs() <= 3.0 * se);
    }
}

#[test]
fn high_concentration_stays_near_base() {
    let cfg = AmbiguityConfig {
        num_models: 2,
        dirichlet_concentration: 1e6,
        ..Default::default()
    };
    let mut kls: Vec<f64> = (0..100)
        .map(|seed| {
            let a = gen_energy_apomdp(&energy(0.75, 0.8), &cfg, 0.5, &mut Rng::new(seed)).unwrap();
            max_row_kl(&a.models()[0], &a.models()[1]).unwrap()
        })
        .collect();
    kls.sort_by(f64::total_cmp);
    assert!(kls[50] < 1e-3, "median max row KL {}", kls[50]);
}

#[test]
fn darkroom_oracle_is_shortest_path() {
    for gy in 0..10 {
        for gx in 0..10 {
            let room = gen_darkroom((gx, gy)).unwrap();
            let mdp = room.to_mdp().unwrap();
            let v = solve_mdp(&mdp).initial_value(mdp.initial_dist());
            assert_eq!(v, 100.0 - (gx + gy) as f64, "goal ({gx}, {gy})");
        }
    }
}

#[test]
fn darkroom_splits() {
    let mut rng = Rng::new(0);
    let (train, test) = split_darkroom_goals(&mut rng);
    assert_eq!((train.len(), test.len()), (80, 20));
    let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 100);
    let first = split_darkroom_goals(&mut Rng::new(0)).1;
    assert_eq!(first, test);
    let distinct = (1..=20).filter(|&s| split_darkroom_goals(&mut Rng::new(s)).1 != test).count();
    assert_eq!(distinct, 20);
}
