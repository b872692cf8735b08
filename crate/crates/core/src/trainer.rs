//! Loss assembly and the training loop: Adam with plateau decay and early
//! stopping, ReLoBRaLo for multi-term losses, optional L-BFGS refinement.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancer::{relobralo_step, BalancerState};
use crate::config::{derive_seed, streams, TrainConfig};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::model::Model;
use crate::network::{record_forward, NetworkParams, ParamNodes};
use crate::optim::{adam_step, lbfgs_step, AdamState, LbfgsState};
use crate::problems::{sample_collocation, validation_grid_mse, CollocationBatch, Problem, TermGroup};
use crate::tape::{JetLayout, NodeId, ParamTape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(names: Vec<String>, values: Vec<f64>, weights: Vec<f64>) -> Self {
        let total = values.iter().zip(&weights).map(|(l, w)| w * l).sum();
        LossBreakdown {
            names,
            values,
            weights,
            total,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Loss terms of a model on a batch, evaluated point by point on jets with
/// unit weights. DaFF encoders yield the residual term only.
pub fn assemble_loss(problem: &Problem, model: &Model, batch: &CollocationBatch) -> Result<LossBreakdown> {
    let groups = problem.loss_groups(batch, model.encoder.kind().is_daff())?;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for g in &groups {
        let outputs = g
            .points
            .iter()
            .map(|p| model.output_jet(p[0], p[1], g.order))
            .collect::<Result<Vec<_>>>()?;
        for t in &g.terms {
            names.push(t.name.clone());
            values.push(t.evaluate(&outputs));
        }
    }
    let weights = vec![1.0; values.len()];
    Ok(LossBreakdown::new(names, values, weights))
}

struct ShardGroup {
    input: Array2<f64>,
    layout: JetLayout,
    /// `(term index, weights, targets)` restricted to this shard's points.
    terms: Vec<(usize, Array2<f64>, Vec<f64>)>,
}

/// Batch loss with parameter gradients, evaluated on the tape in point
/// shards that are reduced in a fixed order.
pub struct Objective {
    pub names: Vec<String>,
    sizes: Vec<usize>,
    shards: Vec<Vec<ShardGroup>>,
}

pub struct Evaluation {
    pub terms: Vec<f64>,
    pub weights: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Objective {
    pub fn new(encoder: &Encoder, groups: &[TermGroup], shards: usize) -> Result<Self> {
        let mut names = Vec::new();
        let mut sizes = Vec::new();
        for g in groups {
            for t in &g.terms {
                names.push(t.name.clone());
                sizes.push(g.points.len());
            }
        }
        let shards = shards.max(1);
        let mut out: Vec<Vec<ShardGroup>> = (0..shards).map(|_| Vec::new()).collect();
        let mut term_base = 0;
        for g in groups {
            let n = g.points.len();
            for (s, shard) in out.iter_mut().enumerate() {
                let (lo, hi) = (s * n / shards, (s + 1) * n / shards);
                if lo == hi {
                    continue;
                }
                let pts = &g.points[lo..hi];
                let layout = JetLayout::new(g.order, pts.len());
                let input = encoder.encode_batch(pts, g.order)?;
                let terms = g
                    .terms
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        (
                            term_base + k,
                            t.weights.slice(s![.., lo..hi]).to_owned(),
                            t.targets[lo..hi].to_vec(),
                        )
                    })
                    .collect();
                shard.push(ShardGroup { input, layout, terms });
            }
            term_base += g.terms.len();
        }
        Ok(Objective {
            names,
            sizes,
            shards: out,
        })
    }

    pub fn term_count(&self) -> usize {
        self.names.len()
    }

    fn record(&self, net: &NetworkParams, shard: &[ShardGroup]) -> Result<(ParamTape, ParamNodes, Vec<(usize, NodeId)>)> {
        let mut tape = ParamTape::new();
        let nodes = ParamNodes::record(&mut tape, net);
        let mut terms = Vec::new();
        for g in shard {
            let input = tape.constant(g.input.clone());
            let out = record_forward(&mut tape, net, &nodes, input, g.layout)?;
            for (k, w, t) in &g.terms {
                let r = tape.combine_coeffs(out, g.layout, w.clone(), t.clone())?;
                terms.push((*k, tape.sum_squares(r, 1.0 / self.sizes[*k] as f64)));
            }
        }
        Ok((tape, nodes, terms))
    }

    /// Evaluates every term, asks `weigh` for the term weights given the
    /// term values, then returns the gradient of the weighted sum.
    pub fn evaluate(
        &self,
        net: &NetworkParams,
        weigh: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Evaluation> {
        let recorded = self
            .shards
            .par_iter()
            .map(|sh| self.record(net, sh))
            .collect::<Result<Vec<_>>>()?;
        let mut terms = vec![0.0; self.term_count()];
        for (tape, _, ids) in &recorded {
            for (k, id) in ids {
                terms[*k] += tape.scalar(*id);
            }
        }
        let weights = weigh(&terms)?;
        let grads = recorded
            .into_par_iter()
            .map(|(mut tape, nodes, ids)| {
                let root = tape.weighted_sum(ids.iter().map(|(k, id)| (*id, weights[*k])).collect())?;
                Ok(nodes.flatten_grads(&tape.grad_params(root)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; net.num_params()];
        for g in grads {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(Evaluation { terms, weights, grad })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    EarlyStop,
    NonFinite,
    LbfgsStalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub terms: Vec<f64>,
    pub weights: Vec<f64>,
    /// Unweighted sum of the terms; drives decay and stopping.
    pub monitored: f64,
    pub lr: f64,
    pub validation: Option<f64>,
    pub wall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub problem: String,
    pub encoder: String,
    pub term_names: Vec<String>,
    pub balanced: bool,
    pub balancer_updates: usize,
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub lr_decays: Vec<usize>,
    pub best_validation: f64,
    pub best_epoch: usize,
    pub final_validation: f64,
    pub final_terms: Vec<f64>,
    pub wall_time: f64,
    #[serde(default)]
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub problem: String,
    pub encoder: String,
    pub term_names: Vec<String>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub final_terms: Vec<f64>,
    pub best_validation: f64,
    pub best_epoch: usize,
    pub final_validation: f64,
    pub lr_decays: Vec<usize>,
    pub balancer_updates: usize,
    pub wall_time: f64,
    pub diagnostic: Option<String>,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            problem: self.problem.clone(),
            encoder: self.encoder.clone(),
            term_names: self.term_names.clone(),
            epochs_run: self.epochs_run(),
            stop_reason: self.stop_reason,
            final_terms: self.final_terms.clone(),
            best_validation: self.best_validation,
            best_epoch: self.best_epoch,
            final_validation: self.final_validation,
            lr_decays: self.lr_decays.clone(),
            balancer_updates: self.balancer_updates,
            wall_time: self.wall_time,
            diagnostic: self.diagnostic.clone(),
        }
    }

    /// One row per epoch. Weight columns appear only for balanced runs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase");
        for n in &self.term_names {
            let _ = write!(s, ",{n}");
        }
        if self.balanced {
            for n in &self.term_names {
                let _ = write!(s, ",lambda_{n}");
            }
        }
        s.push_str(",monitored,lr,val_mse,wall_s\n");
        for r in &self.records {
            let phase = match r.phase {
                Phase::Adam => "adam",
                Phase::Lbfgs => "lbfgs",
            };
            let _ = write!(s, "{},{phase}", r.epoch);
            for v in &r.terms {
                let _ = write!(s, ",{v:e}");
            }
            if self.balanced {
                for v in &r.weights {
                    let _ = write!(s, ",{v:e}");
                }
            }
            let val = r.validation.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(s, ",{:e},{:e},{val},{:.3}", r.monitored, r.lr, r.wall);
        }
        s
    }

    pub fn write(&self, csv: &Path, summary: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::Parse {
            path: summary.into(),
            message: e.to_string(),
        })?;
        std::fs::write(summary, text).map_err(|e| Error::io(summary, e))
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters with the lowest validation MSE seen.
    pub best: Model,
    pub last: Model,
}

/// Patience bookkeeping for plateau decay and early stopping.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub best: f64,
    pub since_improvement: usize,
    pub since_decay: usize,
    min_rel: f64,
}

impl Plateau {
    pub fn new(min_rel: f64) -> Self {
        Plateau {
            best: f64::INFINITY,
            since_improvement: 0,
            since_decay: 0,
            min_rel,
        }
    }

    /// Records a monitored value; returns `(decay now, stop now)`.
    pub fn observe(&mut self, value: f64, decay_patience: usize, stop_patience: usize) -> (bool, bool) {
        if value < self.best - self.min_rel * self.best.abs() || self.best.is_infinite() {
            self.best = value;
            self.since_improvement = 0;
            self.since_decay = 0;
        } else {
            self.since_improvement += 1;
            self.since_decay += 1;
        }
        let decay = self.since_decay >= decay_patience;
        if decay {
            self.since_decay = 0;
        }
        (decay, self.since_improvement >= stop_patience)
    }
}

fn encoder_label(e: &Encoder) -> String {
    format!("{:?}", e.kind()).to_lowercase()
}

/// Trains a model from scratch according to `cfg`.
pub fn train(cfg: &TrainConfig, base: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::from_config(cfg, base)?;
    train_model(cfg, model)
}

/// Trains an already built model.
pub fn train_model(cfg: &TrainConfig, mut model: Model) -> Result<TrainOutcome> {
    let start = Instant::now();
    let problem = cfg.problem;
    let residual_only = model.encoder.kind().is_daff();
    let batch_seed = derive_seed(cfg.seed, streams::BATCH);
    let domain = problem.domain();
    let t = &cfg.training;
    let o = &cfg.optimizer;

    let mut batch = sample_collocation(&domain, t.batch_size, batch_seed)?;
    let mut objective = Objective::new(&model.encoder, &problem.loss_groups(&batch, residual_only)?, t.shards)?;
    let m = objective.term_count();
    let balanced = m > 1 && cfg.balancer.enabled;
    let mut balancer = BalancerState::new(m, cfg.balancer.params(), derive_seed(cfg.seed, streams::BALANCER))?;
    let mut adam = AdamState::new(model.net.num_params(), o.adam());
    let mut flat = model.net.to_flat();
    let mut lr = o.lr;
    let mut plateau = Plateau::new(o.min_rel_improvement);

    let mut report = TrainReport {
        problem: problem.name().into(),
        encoder: encoder_label(&model.encoder),
        term_names: objective.names.clone(),
        balanced,
        balancer_updates: 0,
        records: Vec::new(),
        stop_reason: StopReason::EpochCap,
        lr_decays: Vec::new(),
        best_validation: f64::INFINITY,
        best_epoch: 0,
        final_validation: f64::NAN,
        final_terms: Vec::new(),
        wall_time: 0.0,
        diagnostic: None,
    };
    let mut best = model.clone();
    let mut weights = vec![1.0; m];

    let validate = |model: &Model, epoch: usize, report: &mut TrainReport, best: &mut Model| -> Result<f64> {
        let v = validation_grid_mse(model, &problem, t.grid_n)?;
        if v < report.best_validation {
            report.best_validation = v;
            report.best_epoch = epoch;
            *best = model.clone();
        }
        Ok(v)
    };

    let mut epoch = 0;
    let mut stopped = false;
    while epoch < o.epochs {
        epoch += 1;
        if t.resample_every > 0 && epoch > 1 && (epoch - 1) % t.resample_every == 0 {
            batch = sample_collocation(&domain, t.batch_size, derive_seed(batch_seed, epoch as u64))?;
            objective = Objective::new(&model.encoder, &problem.loss_groups(&batch, residual_only)?, t.shards)?;
        }
        let eval = objective.evaluate(&model.net, &mut |terms: &[f64]| {
            if balanced {
                relobralo_step(&mut balancer, terms)
            } else {
                Ok(vec![1.0; terms.len()])
            }
        });
        let eval = match eval {
            Ok(e) => e,
            Err(Error::NonFinite(what)) => {
                report.stop_reason = StopReason::NonFinite;
                report.diagnostic = Some(format!("epoch {epoch}: non-finite {what}"));
                stopped = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let monitored: f64 = eval.terms.iter().sum();
        if !monitored.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            report.stop_reason = StopReason::NonFinite;
            report.diagnostic = Some(format!("epoch {epoch}: non-finite loss or gradient"));
            stopped = true;
            break;
        }
        weights = eval.weights.clone();
        let (decay, stop) = plateau.observe(monitored, o.decay_patience, o.stop_patience);
        if decay {
            lr *= o.decay_factor;
            report.lr_decays.push(epoch);
        }
        let validation = if epoch % t.validate_every == 0 || epoch == 1 {
            Some(validate(&model, epoch, &mut report, &mut best)?)
        } else {
            None
        };
        report.records.push(EpochRecord {
            epoch,
            phase: Phase::Adam,
            terms: eval.terms.clone(),
            weights: eval.weights,
            monitored,
            lr,
            validation,
            wall: start.elapsed().as_secs_f64(),
        });
        report.final_terms = eval.terms;
        if stop {
            report.stop_reason = StopReason::EarlyStop;
            break;
        }
        adam_step(&mut flat, &eval.grad, &mut adam, lr)?;
        model.net.set_flat(&flat)?;
    }
    report.balancer_updates = balancer.updates;

    if !stopped && o.lbfgs_iters > 0 {
        let mut state = LbfgsState::new(o.lbfgs_memory)?;
        let frozen = weights.clone();
        let last_terms = std::cell::RefCell::new(Vec::new());
        let mut net = model.net.clone();
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            net.set_flat(x)?;
            let e = objective.evaluate(&net, &mut |_| Ok(frozen.clone()))?;
            let total = e.terms.iter().zip(&frozen).map(|(l, w)| l * w).sum();
            *last_terms.borrow_mut() = e.terms;
            Ok((total, e.grad))
        };
        for _ in 0..o.lbfgs_iters {
            epoch += 1;
            let step = match lbfgs_step(&mut flat, &mut f, &mut state) {
                Ok(s) => s,
                Err(Error::NonFinite(what)) => {
                    report.stop_reason = StopReason::NonFinite;
                    report.diagnostic = Some(format!("epoch {epoch}: non-finite {what}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            model.net.set_flat(&flat)?;
            // The line search returns right after evaluating the accepted
            // trial, so the last evaluation belongs to the new iterate.
            let terms = if step.stalled || step.step_norm == 0.0 {
                report.final_terms.clone()
            } else {
                last_terms.borrow().clone()
            };
            let validation = if epoch % t.validate_every == 0 {
                Some(validate(&model, epoch, &mut report, &mut best)?)
            } else {
                None
            };
            report.records.push(EpochRecord {
                epoch,
                phase: Phase::Lbfgs,
                monitored: terms.iter().sum(),
                terms: terms.clone(),
                weights: frozen.clone(),
                lr: 0.0,
                validation,
                wall: start.elapsed().as_secs_f64(),
            });
            report.final_terms = terms;
            if step.stalled {
                report.stop_reason = StopReason::LbfgsStalled;
                break;
            }
        }
    }

    let final_val = validation_grid_mse(&model, &problem, t.grid_n)?;
    report.final_validation = final_val;
    if final_val < report.best_validation || report.best_epoch == 0 {
        report.best_validation = final_val;
        report.best_epoch = report.epochs_run();
        best = model.clone();
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        report,
        best,
        last: model,
    })
}
