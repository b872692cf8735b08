//! Relative loss balancing with random lookback (ReLoBRaLo).
//!
//! With `m` terms and `bal(t, t') = m * softmax(L(t) / (tau * L(t')))`:
//!
//! `lambda(t) = alpha * (rho_t * lambda(t-1) + (1 - rho_t) * bal(t, 0))
//!            + (1 - alpha) * bal(t, t-1)`
//!
//! where `rho_t` is a Bernoulli(`rho`) draw. Every `bal` sums to `m`, so the
//! weights do too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOSS_FLOOR: f64 = 1e-30;
const WEIGHT_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_alpha() -> f64 {
    0.999
}
fn default_tau() -> f64 {
    1.0
}
fn default_rho() -> f64 {
    0.999
}

impl Default for BalancerParams {
    fn default() -> Self {
        BalancerParams {
            alpha: default_alpha(),
            tau: default_tau(),
            rho: default_rho(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BalancerState {
    pub params: BalancerParams,
    pub first: Option<Vec<f64>>,
    pub prev: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub updates: usize,
    rng: ChaCha8Rng,
}

impl BalancerState {
    pub fn new(terms: usize, params: BalancerParams, seed: u64) -> Result<Self> {
        if terms == 0 {
            return Err(Error::InvalidArgument("balancer needs at least one term".into()));
        }
        if !(params.tau > 0.0) || !(0.0..=1.0).contains(&params.alpha) || !(0.0..=1.0).contains(&params.rho) {
            return Err(Error::config("balancer", "need tau > 0 and alpha, rho in [0, 1]"));
        }
        Ok(BalancerState {
            params,
            first: None,
            prev: None,
            weights: vec![1.0; terms],
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// `m * softmax(current / (tau * reference))`, floored to stay positive.
pub fn balanced_weights(current: &[f64], reference: &[f64], tau: f64) -> Vec<f64> {
    let m = current.len() as f64;
    let z: Vec<f64> = current
        .iter()
        .zip(reference)
        .map(|(c, r)| c.max(LOSS_FLOOR) / (tau * r.max(LOSS_FLOOR)))
        .collect();
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut w: Vec<f64> = e.iter().map(|v| (m * v / s).max(WEIGHT_FLOOR)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v *= m / total);
    w
}

/// Updates and returns the weights for the given current losses.
pub fn relobralo_step(state: &mut BalancerState, losses: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != state.weights.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} balancer weights",
            losses.len(),
            state.weights.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("loss term passed to the balancer".into()));
    }
    let current: Vec<f64> = losses.iter().map(|l| l.max(LOSS_FLOOR)).collect();
    let (first, prev) = match (&state.first, &state.prev) {
        (Some(f), Some(p)) => (f.clone(), p.clone()),
        _ => {
            state.first = Some(current.clone());
            state.prev = Some(current);
            return Ok(state.weights.clone());
        }
    };
    let p = state.params;
    let lookback = state.rng.random::<f64>() < p.rho;
    let rho_hat = if lookback { 1.0 } else { 0.0 };
    let bal_first = balanced_weights(&current, &first, p.tau);
    let bal_prev = balanced_weights(&current, &prev, p.tau);
    let m = current.len() as f64;
    let mut w: Vec<f64> = (0..current.len())
        .map(|i| {
            let hist = rho_hat * state.weights[i] + (1.0 - rho_hat) * bal_first[i];
            (p.alpha * hist + (1.0 - p.alpha) * bal_prev[i]).max(WEIGHT_FLOOR)
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v *= m / total);
    state.weights = w;
    state.prev = Some(current);
    state.updates += 1;
    Ok(state.weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_ratios_give_unit_weights() {
        let w = balanced_weights(&[2.0, 4.0, 8.0], &[1.0, 2.0, 4.0], 1.0);
        for v in w {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturation() {
        let w = balanced_weights(&[1e6, 1.0], &[1.0, 1.0], 1.0);
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!(w[1] > 0.0 && w[1] < 1e-12);
    }

    #[test]
    fn weights_sum_to_term_count() {
        let mut s = BalancerState::new(3, BalancerParams::default(), 7).unwrap();
        let mut l = [3.0, 1.0, 0.2];
        for t in 0..200 {
            l[t % 3] *= 0.9;
            let w = relobralo_step(&mut s, &l).unwrap();
            assert!(w.iter().all(|v| *v > 0.0));
            assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        }
        assert!(relobralo_step(&mut s, &[1.0, f64::NAN, 1.0]).is_err());
    }
}
