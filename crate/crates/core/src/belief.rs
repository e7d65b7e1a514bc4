//! Belief algebra: Bayes filtering over latent states, observation
//! predictives, KL divergence, and simplex quantization for memo keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_checked, Kernel};

/// Probability vector over latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("belief over zero states"));
        }
        normalize_checked(&mut probs, "belief")?;
        Ok(Self(probs))
    }

    /// Point mass at `state`.
    pub fn delta(num_states: usize, state: usize) -> Self {
        let mut v = vec![0.0; num_states];
        v[state] = 1.0;
        Self(v)
    }

    pub fn uniform(num_states: usize) -> Self {
        Self(vec![1.0 / num_states as f64; num_states])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Expected value of `f(s)` under the belief.
    pub fn expect(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| p * f(s))
            .sum()
    }

    pub(crate) fn from_raw(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Belief::new(v)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

fn check_dims(belief: &Belief, action: usize, transition: &Kernel, observation: &Kernel) -> Result<()> {
    let n = transition.num_states();
    if belief.len() != n || transition.num_outcomes() != n || observation.num_states() != n {
        return Err(Error::DimensionMismatch(format!(
            "belief over {} states, transition over {n}, observation over {}",
            belief.len(),
            observation.num_states()
        )));
    }
    if action >= transition.num_actions() || action >= observation.num_actions() {
        return Err(Error::DimensionMismatch(format!("action {action} out of range")));
    }
    Ok(())
}

/// One-step state prediction `sum_s P(s'|s,a) b(s)`.
pub fn predict_states(belief: &Belief, action: usize, transition: &Kernel) -> Vec<f64> {
    let n = transition.num_states();
    let mut next = vec![0.0; n];
    for (s, &p) in belief.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (sp, &t) in transition.row(s, action).iter().enumerate() {
            next[sp] += p * t;
        }
    }
    next
}

/// Predictive distribution over the next observation after taking `action`.
pub fn belief_predictive(
    belief: &Belief,
    action: usize,
    transition: &Kernel,
    observation: &Kernel,
) -> Result<Vec<f64>> {
    check_dims(belief, action, transition, observation)?;
    let next = predict_states(belief, action, transition);
    Ok(predictive_from_prediction(&next, action, observation))
}

pub(crate) fn predictive_from_prediction(next: &[f64], action: usize, observation: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; observation.num_outcomes()];
    for (sp, &p) in next.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, &q) in observation.row(sp, action).iter().enumerate() {
            out[o] += p * q;
        }
    }
    out
}

/// Posterior over states from a predicted state distribution and an observation.
pub(crate) fn condition(next: &[f64], action: usize, obs: usize, observation: &Kernel) -> Option<Belief> {
    let mut post: Vec<f64> = next
        .iter()
        .enumerate()
        .map(|(sp, &p)| p * observation.prob(sp, action, obs))
        .collect();
    let z: f64 = post.iter().sum();
    if z <= 0.0 {
        return None;
    }
    post.iter_mut().for_each(|x| *x /= z);
    Some(Belief(post))
}

/// Bayes operator: posterior belief after taking `action` and observing `obs`.
pub fn belief_update(
    belief: &Belief,
    action: usize,
    obs: usize,
    transition: &Kernel,
    observation: &Kernel,
) -> Result<Belief> {
    check_dims(belief, action, transition, observation)?;
    if obs >= observation.num_outcomes() {
        return Err(Error::DimensionMismatch(format!("observation {obs} out of range")));
    }
    let next = predict_states(belief, action, transition);
    condition(&next, action, obs, observation).ok_or(Error::ZeroLikelihood { action, obs })
}

/// Belief after the first observation, before any action has been taken.
/// The first emission is drawn from the observation row of action 0.
pub fn initial_posterior(initial: &[f64], obs: usize, observation: &Kernel) -> Result<Belief> {
    condition(initial, 0, obs, observation).ok_or(Error::ZeroLikelihood { action: 0, obs })
}

/// Distribution of the first observation.
pub fn initial_predictive(initial: &[f64], observation: &Kernel) -> Vec<f64> {
    predictive_from_prediction(initial, 0, observation)
}

/// `KL(p || q) = sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "KL over vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Unsupported { index: i });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative value for near-identical inputs.
    Ok(acc.max(0.0))
}

/// Rounds a probability vector to multiples of `1/units` with largest-remainder
/// apportionment, so the counts always sum to `units`. Ties on the remainder go
/// to the lower index.
pub fn quantize(probs: &[f64], units: u32) -> Vec<u32> {
    let scaled: Vec<f64> = probs.iter().map(|&p| p.max(0.0) * units as f64).collect();
    let mut counts: Vec<u32> = scaled.iter().map(|&x| (x.floor() as u64).min(units as u64) as u32).collect();
    let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
    let units64 = units as u64;
    let mut missing = units64.saturating_sub(assigned) as usize;
    if missing > 0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&i, &j| {
            let ri = scaled[i] - scaled[i].floor();
            let rj = scaled[j] - scaled[j].floor();
            rj.total_cmp(&ri).then(i.cmp(&j))
        });
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
    } else if assigned > units64 {
        // Only reachable when the input sums above 1 by more than rounding.
        let mut excess = (assigned - units64) as u32;
        for c in counts.iter_mut().rev() {
            let take = excess.min(*c);
            *c -= take;
            excess -= take;
        }
    }
    counts
}

/// Belief represented by a quantized key.
pub fn dequantize(counts: &[u32], units: u32) -> Belief {
    Belief::from_raw(counts.iter().map(|&c| c as f64 / units as f64).collect())
}
