//! Layer-wise relevance propagation (epsilon rule) over recorded traces.
//!
//! A weight layer with inputs `g` and outputs `f_j = sum_i z_ij + b_j`,
//! `z_ij = g_i w_ji / sqrt(d)`, passes relevance down as
//! `R_i = sum_j z_ij / (eps + sum_i z_ij + b_j) R_j`; the bias share
//! `b_j / (...) R_j` is absorbed and reported separately. Relevance crosses
//! `tanh` unchanged. Where skip branches merge into a pre-activation, the
//! merged relevance is split in proportion to the absolute branch values,
//! with `eps` added to the denominator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::model::Model;
use crate::network::{forward_record, ActivationTrace, NetworkParams};
use crate::problems::grid_points;

pub const DEFAULT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector {
    pub layer: usize,
    pub values: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Relevance at `g_0` (the encoding).
    pub input: RelevanceVector,
    /// Relevance at `g_h`, `h = 0..=L`, then the output.
    pub layers: Vec<Vec<f64>>,
    /// Total relevance absorbed by biases.
    pub bias: f64,
    pub output: f64,
}

/// `R_i = sum_j z_ij / (eps + sum_i z_ij + b_j) R_j`; returns the input
/// relevances and the absorbed bias relevance.
pub fn epsilon_rule(
    input: &[f64],
    weights: &ndarray::Array2<f64>,
    scale: f64,
    bias: Option<&[f64]>,
    relevance: &[f64],
    eps: f64,
) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; input.len()];
    let mut absorbed = 0.0;
    for (j, rj) in relevance.iter().enumerate() {
        if *rj == 0.0 {
            continue;
        }
        let b = bias.map_or(0.0, |b| b[j]);
        let mut denom = eps + b;
        for (i, g) in input.iter().enumerate() {
            denom += g * weights[[j, i]] * scale;
        }
        if denom == 0.0 {
            continue;
        }
        let ratio = rj / denom;
        for (i, g) in input.iter().enumerate() {
            out[i] += g * weights[[j, i]] * scale * ratio;
        }
        absorbed += b * ratio;
    }
    (out, absorbed)
}

/// Ratio split of a merged relevance between a skip branch and the main
/// branch: `R_s = R |s| / (|s| + |m| + eps)`, likewise for the main branch.
pub fn split_skip(merged: &[f64], act_skip: &[f64], act_main: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if merged.len() != act_skip.len() || merged.len() != act_main.len() {
        return Err(Error::Shape(format!(
            "skip split over {}, {} and {} entries",
            merged.len(),
            act_skip.len(),
            act_main.len()
        )));
    }
    let mut rs = Vec::with_capacity(merged.len());
    let mut rm = Vec::with_capacity(merged.len());
    for ((r, s), m) in merged.iter().zip(act_skip).zip(act_main) {
        let d = s.abs() + m.abs() + eps;
        if d == 0.0 {
            rs.push(0.0);
            rm.push(0.0);
        } else {
            rs.push(r * s.abs() / d);
            rm.push(r * m.abs() / d);
        }
    }
    Ok((rs, rm))
}

/// Propagates the output value of a trace down to the input encoding.
pub fn lrp_backward(trace: &ActivationTrace, params: &NetworkParams, eps: f64) -> Result<Propagation> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let l = params.hidden_layers();
    if trace.layers.len() != l + 1
        || trace.input.len() != params.input_dim()
        || trace.layers.iter().enumerate().any(|(h, r)| r.act.len() != params.dims[h + 1])
    {
        return Err(Error::Incompatible("trace does not match the network".into()));
    }
    // rel[h] accumulates relevance at g_h; rel[l + 1] is the output.
    let mut rel: Vec<Vec<f64>> = params.dims.iter().map(|&d| vec![0.0; d]).collect();
    let output = trace.output();
    rel[l + 1][0] = output;
    let mut bias = 0.0;
    for h in (0..=l).rev() {
        let record = &trace.layers[h];
        let merged = rel[h + 1].clone();
        // Split off skip branches merged into f_{h+1}.
        let main_rel = if record.skips.is_empty() {
            merged
        } else {
            let mut main_rel = vec![0.0; merged.len()];
            for j in 0..merged.len() {
                let denom = record.main[j].abs() + record.skips.iter().map(|(_, v)| v[j].abs()).sum::<f64>() + eps;
                if denom == 0.0 {
                    continue;
                }
                main_rel[j] = merged[j] * record.main[j].abs() / denom;
                for (s, v) in &record.skips {
                    rel[*s][j] += merged[j] * v[j].abs() / denom;
                }
            }
            main_rel
        };
        let b = params.biases.as_ref().map(|bs| bs[h].as_slice().expect("contiguous bias"));
        let (down, absorbed) = epsilon_rule(
            trace.activation(h),
            &params.weights[h],
            params.layer_scale(h),
            b,
            &main_rel,
            eps,
        );
        bias += absorbed;
        rel[h].iter_mut().zip(down).for_each(|(a, d)| *a += d);
    }
    Ok(Propagation {
        input: RelevanceVector {
            layer: 0,
            values: rel[0].clone(),
            eps,
        },
        layers: rel,
        bias,
        output,
    })
}

/// `|sum R_input + bias absorption - output| / max(|output|, 1e-30)`.
pub fn conservation_audit(input_relevances: &[f64], bias: f64, output: f64) -> f64 {
    let total: f64 = input_relevances.iter().sum::<f64>() + bias;
    (total - output).abs() / output.abs().max(1e-30)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRelevance {
    pub x: f64,
    pub y: f64,
    pub output: f64,
    pub input: Vec<f64>,
    pub bias: f64,
    pub defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub key: String,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub eps: f64,
    pub grid_n: usize,
    pub labels: Vec<String>,
    pub points: Vec<PointRelevance>,
    /// `R_x - R_y` per point (identity encodings), clamped when a threshold
    /// is given.
    pub field: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    /// Mean `|R|` per encoding slot over the grid.
    pub feature_means: Vec<f64>,
    pub groups: Vec<GroupMean>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSummary {
    pub eps: f64,
    pub grid_n: usize,
    pub threshold: Option<f64>,
    pub labels: Vec<String>,
    pub feature_means: Vec<f64>,
    pub groups: Vec<GroupMean>,
    pub max_defect: f64,
    pub mean_defect: f64,
}

/// Relevances of a model at the given points.
pub fn explain_points(model: &Model, points: &[[f64; 2]], eps: f64) -> Result<Vec<PointRelevance>> {
    points
        .par_iter()
        .map(|p| {
            let enc = model.encoder.encode_values(p[0], p[1])?;
            let (out, trace) = forward_record(&model.net, &enc)?;
            let prop = lrp_backward(&trace, &model.net, eps)?;
            Ok(PointRelevance {
                x: p[0],
                y: p[1],
                output: out,
                defect: conservation_audit(&prop.input.values, prop.bias, out),
                input: prop.input.values,
                bias: prop.bias,
            })
        })
        .collect()
}

fn feature_means(points: &[PointRelevance], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for p in points {
        m.iter_mut().zip(&p.input).for_each(|(a, r)| *a += r.abs());
    }
    let n = points.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn base_report(model: &Model, grid_n: usize, eps: f64) -> Result<RelevanceReport> {
    if grid_n < 2 {
        return Err(Error::InvalidArgument("relevance grid needs at least 2 nodes per side".into()));
    }
    let pts = grid_points(&model.problem.domain(), grid_n);
    let points = explain_points(model, &pts, eps)?;
    Ok(RelevanceReport {
        eps,
        grid_n,
        labels: model.encoder.feature_labels(),
        feature_means: feature_means(&points, model.encoder.dim()),
        points,
        field: None,
        threshold: None,
        groups: Vec::new(),
    })
}

/// Signed coordinate field `R_x - R_y` over a grid, optionally clamped to
/// `[-threshold, threshold]`.
pub fn coordinate_field(model: &Model, grid_n: usize, eps: f64, threshold: Option<f64>) -> Result<RelevanceReport> {
    if !matches!(model.encoder, Encoder::Identity) {
        return Err(Error::Incompatible(
            "coordinate fields need an identity-encoded model".into(),
        ));
    }
    let mut report = base_report(model, grid_n, eps)?;
    let field = report
        .points
        .iter()
        .map(|p| clamp(p.input[0] - p.input[1], threshold))
        .collect();
    report.field = Some(field);
    report.threshold = threshold;
    report.groups = vec![
        GroupMean {
            key: "x".into(),
            mean_abs: report.feature_means[0],
        },
        GroupMean {
            key: "y".into(),
            mean_abs: report.feature_means[1],
        },
    ];
    Ok(report)
}

pub fn clamp(v: f64, threshold: Option<f64>) -> f64 {
    match threshold {
        Some(t) => v.clamp(-t, t),
        None => v,
    }
}

/// Per-feature and grouped mean `|R|` for encoded models.
///
/// RFF groups are keyed by kind and coordinate; a feature contributes to a
/// coordinate's group in proportion to that coordinate's share
/// `b_k^2 / |b|^2` of its frequency row. DaFF groups are keyed by component
/// type and by `(m, n)`.
pub fn feature_attribution(model: &Model, grid_n: usize, eps: f64) -> Result<RelevanceReport> {
    let groups_of = |means: &[f64]| -> Result<Vec<GroupMean>> {
        match &model.encoder {
            Encoder::Identity => Ok(Vec::new()),
            Encoder::Rff(bank) => {
                let nf = bank.features();
                let mut groups = Vec::new();
                for (kind, offset) in [("cos", 0), ("sin", nf)] {
                    for (k, coord) in ["x", "y"].iter().enumerate() {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for j in 0..nf {
                            let row = bank.rows.row(j);
                            let norm2: f64 = row.iter().map(|v| v * v).sum();
                            let share = if norm2 > 0.0 { row[k] * row[k] / norm2 } else { 0.5 };
                            num += share * means[offset + j];
                            den += share;
                        }
                        groups.push(GroupMean {
                            key: format!("{kind}_{coord}"),
                            mean_abs: if den > 0.0 { num / den } else { 0.0 },
                        });
                    }
                    groups.push(GroupMean {
                        key: kind.into(),
                        mean_abs: means[offset..offset + nf].iter().sum::<f64>() / nf as f64,
                    });
                }
                Ok(groups)
            }
            Encoder::Daff(bank) => {
                let mut by: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for (e, m) in bank.entries.iter().zip(means) {
                    for key in [format!("comp{}", e.comp.get()), format!("mn({},{})", e.m, e.n)] {
                        let g = by.entry(key).or_insert((0.0, 0));
                        g.0 += m;
                        g.1 += 1;
                    }
                }
                Ok(by
                    .into_iter()
                    .map(|(key, (s, c))| GroupMean {
                        key,
                        mean_abs: s / c as f64,
                    })
                    .collect())
            }
            Encoder::DaffNumeric(_) => Ok(model
                .encoder
                .feature_labels()
                .into_iter()
                .zip(means)
                .map(|(key, m)| GroupMean { key, mean_abs: *m })
                .collect()),
        }
    };
    if matches!(model.encoder, Encoder::Identity) {
        return Err(Error::Incompatible("feature attribution needs an RFF or DaFF encoder".into()));
    }
    let mut report = base_report(model, grid_n, eps)?;
    report.groups = groups_of(&report.feature_means)?;
    Ok(report)
}

impl RelevanceReport {
    pub fn summary(&self) -> RelevanceSummary {
        let defects: Vec<f64> = self.points.iter().map(|p| p.defect).collect();
        RelevanceSummary {
            eps: self.eps,
            grid_n: self.grid_n,
            threshold: self.threshold,
            labels: self.labels.clone(),
            feature_means: self.feature_means.clone(),
            groups: self.groups.clone(),
            max_defect: defects.iter().copied().fold(0.0, f64::max),
            mean_defect: defects.iter().sum::<f64>() / defects.len().max(1) as f64,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,output");
        for l in &self.labels {
            let _ = write!(s, ",\"R {l}\"");
        }
        s.push_str(",bias,defect");
        if self.field.is_some() {
            s.push_str(",field");
        }
        s.push('\n');
        for (k, p) in self.points.iter().enumerate() {
            let _ = write!(s, "{:e},{:e},{:e}", p.x, p.y, p.output);
            for r in &p.input {
                let _ = write!(s, ",{r:e}");
            }
            let _ = write!(s, ",{:e},{:e}", p.bias, p.defect);
            if let Some(f) = &self.field {
                let _ = write!(s, ",{:e}", f[k]);
            }
            s.push('\n');
        }
        s
    }

    /// Field as `grid_n` whitespace-separated rows, `y` ascending.
    pub fn field_grid(&self) -> Option<String> {
        let f = self.field.as_ref()?;
        let mut s = String::new();
        for row in f.chunks(self.grid_n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        Some(s)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        written.push(csv);
        let summary = dir.join(format!("{stem}_summary.json"));
        let text = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::Parse {
            path: summary.clone(),
            message: e.to_string(),
        })?;
        std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
        written.push(summary);
        if let Some(grid) = self.field_grid() {
            let p = dir.join(format!("{stem}_field.txt"));
            std::fs::write(&p, grid).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Binary greyscale PGM of a row-major field, `y` up; values map
/// symmetrically so that zero is mid-grey.
pub fn field_to_pgm(values: &[f64], width: usize) -> Result<Vec<u8>> {
    if width == 0 || values.len() % width != 0 {
        return Err(Error::Shape(format!("{} values in rows of {width}", values.len())));
    }
    let height = values.len() / width;
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in values.chunks(width).rev() {
        for v in row {
            let t = if peak > 0.0 { 0.5 + 0.5 * v / peak } else { 0.5 };
            out.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}
