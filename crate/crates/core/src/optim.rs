//! Adam and limited-memory BFGS over flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: AdamParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, params: AdamParams) -> Self {
        AdamState {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and returns an error.
pub fn adam_step(x: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if x.len() != grad.len() || x.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            x.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let AdamParams { beta1, beta2, eps } = state.params;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        x[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct LbfgsState {
    pub memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    /// Loss and gradient at the current iterate, once known.
    current: Option<(f64, Vec<f64>)>,
    pub iterations: usize,
    pub fallbacks: usize,
}

impl LbfgsState {
    pub fn new(memory: usize) -> Result<Self> {
        if memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        Ok(LbfgsState {
            memory,
            pairs: VecDeque::new(),
            current: None,
            iterations: 0,
            fallbacks: 0,
        })
    }

    /// Forgets the cached loss, e.g. after the objective changed.
    pub fn reset(&mut self) {
        self.pairs.clear();
        self.current = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step_norm: f64,
    /// The quasi-Newton direction was rejected in favour of steepest descent.
    pub fallback: bool,
    /// No decrease was found at all; the iterate is unchanged.
    pub stalled: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// One L-BFGS iteration with an Armijo backtracking line search.
pub fn lbfgs_step<F>(x: &mut [f64], f: &mut F, state: &mut LbfgsState) -> Result<LbfgsStep>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (f0, g0) = match state.current.take() {
        Some(c) => c,
        None => f(x)?,
    };
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("L-BFGS loss or gradient".into()));
    }
    let gnorm = dot(&g0, &g0).sqrt();
    if gnorm == 0.0 {
        state.current = Some((f0, g0));
        return Ok(LbfgsStep {
            loss_before: f0,
            loss_after: f0,
            step_norm: 0.0,
            fallback: false,
            stalled: false,
        });
    }

    // Two-loop recursion.
    let mut q = g0.clone();
    let mut alphas = Vec::with_capacity(state.pairs.len());
    for (s, y, rho) in state.pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = state.pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in state.pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
    let mut slope = dot(&g0, &dir);
    let mut fallback = false;
    if !(slope < 0.0) {
        dir = g0.iter().map(|v| -v).collect();
        slope = -gnorm * gnorm;
        fallback = true;
        state.pairs.clear();
    }
    let first_step = if state.pairs.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

    let search = |dir: &[f64], slope: f64, start: f64, f: &mut F| -> Result<Option<(f64, Vec<f64>, f64, Vec<f64>)>> {
        let mut t = start;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = f(&trial)?;
            if ft.is_finite() && ft <= f0 + ARMIJO_C1 * t * slope {
                return Ok(Some((t, trial, ft, gt)));
            }
            t *= 0.5;
        }
        Ok(None)
    };

    let mut found = search(&dir, slope, first_step, f)?;
    if found.is_none() && !fallback {
        log::warn!("L-BFGS line search failed; falling back to steepest descent");
        fallback = true;
        state.pairs.clear();
        dir = g0.iter().map(|v| -v).collect();
        slope = -gnorm * gnorm;
        found = search(&dir, slope, (1.0 / gnorm).min(1.0), f)?;
    }
    if fallback {
        state.fallbacks += 1;
    }
    state.iterations += 1;
    let Some((t, trial, ft, gt)) = found else {
        state.current = Some((f0, g0));
        return Ok(LbfgsStep {
            loss_before: f0,
            loss_after: f0,
            step_norm: 0.0,
            fallback,
            stalled: true,
        });
    };
    let s: Vec<f64> = dir.iter().map(|d| t * d).collect();
    let y: Vec<f64> = gt.iter().zip(&g0).map(|(a, b)| a - b).collect();
    let sy = dot(&s, &y);
    if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
        if state.pairs.len() == state.memory {
            state.pairs.pop_front();
        }
        state.pairs.push_back((s.clone(), y, 1.0 / sy));
    }
    x.copy_from_slice(&trial);
    state.current = Some((ft, gt));
    Ok(LbfgsStep {
        loss_before: f0,
        loss_after: ft,
        step_norm: dot(&s, &s).sqrt(),
        fallback,
        stalled: false,
    })
}
