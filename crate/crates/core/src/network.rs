//! Fully connected tanh network with `1/sqrt(d)` layer scaling.
//!
//! Layer `h = 1..=L` computes
//! `f_h = W_{h-1} g_{h-1} / sqrt(d_{h-1}) + b_{h-1} + sum_{(s,h)} g_s` and
//! `g_h = tanh(f_h)`; the output is `W_L g_L / sqrt(d_L) + b_L`. `g_0` is the
//! input encoding. Without biases a zero encoding propagates to a zero output.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Encoding;
use crate::jet::{Jet, ScalarFn};
use crate::tape::{JetLayout, NodeId, ParamTape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// `d_0` (input), hidden widths, then `1`.
    pub dims: Vec<usize>,
    /// `weights[h]` maps layer `h` to layer `h + 1` and is `d_{h+1} x d_h`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Option<Vec<Array1<f64>>>,
    /// `(source, target)` pairs: `g_source` is added into `f_target`.
    pub skip_plan: Vec<(usize, usize)>,
}

/// First hidden layer feeding every later hidden layer.
pub fn default_skip_plan(layers: usize) -> Vec<(usize, usize)> {
    (2..=layers).map(|h| (1, h)).collect()
}

pub fn init_params(
    layers: usize,
    units: usize,
    input_dim: usize,
    seed: u64,
    use_bias: bool,
    skip_plan: Vec<(usize, usize)>,
) -> Result<NetworkParams> {
    if layers == 0 || units == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "network needs positive sizes (layers {layers}, units {units}, input {input_dim})"
        )));
    }
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(units, layers));
    dims.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<Array2<f64>> = dims
        .windows(2)
        .map(|w| Array2::from_shape_fn((w[1], w[0]), |_| StandardNormal.sample(&mut rng)))
        .collect();
    let biases = use_bias.then(|| dims[1..].iter().map(|&d| Array1::zeros(d)).collect());
    let params = NetworkParams {
        dims,
        weights,
        biases,
        skip_plan,
    };
    params.validate()?;
    Ok(params)
}

/// Per-layer record of a value-level pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// Scaled weighted input plus bias, before skip additions.
    pub main: Vec<f64>,
    /// Skip contributions merged into this layer, one per plan entry.
    pub skips: Vec<(usize, Vec<f64>)>,
    /// Pre-activation `f_h`.
    pub pre: Vec<f64>,
    /// Activation `g_h` (equal to `pre` at the output layer).
    pub act: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub input: Vec<f64>,
    /// Hidden layers `1..=L` then the output layer.
    pub layers: Vec<LayerRecord>,
}

impl ActivationTrace {
    pub fn output(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.act[0])
    }

    /// Activation `g_h` with `g_0` the input.
    pub fn activation(&self, h: usize) -> &[f64] {
        if h == 0 {
            &self.input
        } else {
            &self.layers[h - 1].act
        }
    }
}

impl NetworkParams {
    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.dims.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn use_bias(&self) -> bool {
        self.biases.is_some()
    }

    pub fn layer_scale(&self, h: usize) -> f64 {
        1.0 / (self.dims[h] as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n < 3 || *self.dims.last().unwrap() != 1 {
            return Err(Error::Shape(format!("layer dims {:?}", self.dims)));
        }
        if self.weights.len() != n - 1 {
            return Err(Error::Shape("weight count".into()));
        }
        for (h, w) in self.weights.iter().enumerate() {
            if w.dim() != (self.dims[h + 1], self.dims[h]) {
                return Err(Error::Shape(format!(
                    "weight {h} is {:?}, expected {:?}",
                    w.dim(),
                    (self.dims[h + 1], self.dims[h])
                )));
            }
        }
        if let Some(b) = &self.biases {
            if b.len() != n - 1 || b.iter().enumerate().any(|(h, v)| v.len() != self.dims[h + 1]) {
                return Err(Error::Shape("bias shapes".into()));
            }
        }
        let l = self.hidden_layers();
        for &(s, t) in &self.skip_plan {
            if s == 0 || s >= t || t > l || self.dims[s] != self.dims[t] {
                return Err(Error::Shape(format!("skip ({s}, {t}) in a {l}-layer network")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let w: usize = self.weights.iter().map(|w| w.len()).sum();
        w + self.biases.as_ref().map_or(0, |b| b.iter().map(|v| v.len()).sum())
    }

    /// Weights (row-major, layer order) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.weights {
            out.extend(w.iter());
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                out.extend(b.iter());
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        if let Some(bs) = &mut self.biases {
            for b in bs {
                for v in b.iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoding of length {len}, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn skips_into(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.skip_plan.iter().filter(move |p| p.1 == t).map(|p| p.0)
    }
}

/// Jet-level forward pass at one point.
pub fn forward(params: &NetworkParams, encoding: &Encoding) -> Result<Jet> {
    params.check_input(encoding.jets.len())?;
    let order = encoding.jets.first().map_or(0, Jet::order);
    let l = params.hidden_layers();
    let mut acts: Vec<Vec<Jet>> = vec![encoding.jets.clone()];
    for h in 0..=l {
        let w = &params.weights[h];
        let scale = params.layer_scale(h);
        let prev = &acts[h];
        let mut next = Vec::with_capacity(w.nrows());
        for i in 0..w.nrows() {
            let mut acc = Jet::zero(order);
            for (k, g) in prev.iter().enumerate() {
                acc.add_scaled(w[[i, k]], g);
            }
            let mut f = acc.scale(scale);
            if let Some(bs) = &params.biases {
                f = f + Jet::constant(order, bs[h][i]);
            }
            for s in params.skips_into(h + 1) {
                f = f + acts[s][i];
            }
            next.push(if h < l { f.tanh() } else { f });
        }
        acts.push(next);
    }
    Ok(acts[l + 1][0])
}

/// Value-level forward pass recording every layer; same arithmetic order as
/// [`forward`], so the output matches its value channel bit for bit.
pub fn forward_record(params: &NetworkParams, input: &[f64]) -> Result<(f64, ActivationTrace)> {
    params.check_input(input.len())?;
    let l = params.hidden_layers();
    let mut trace = ActivationTrace {
        input: input.to_vec(),
        layers: Vec::with_capacity(l + 1),
    };
    for h in 0..=l {
        let w = &params.weights[h];
        let scale = params.layer_scale(h);
        let mut main = Vec::with_capacity(w.nrows());
        for i in 0..w.nrows() {
            let prev = trace.activation(h);
            let mut acc = 0.0;
            for (k, g) in prev.iter().enumerate() {
                acc += w[[i, k]] * g;
            }
            let mut f = acc * scale;
            if let Some(bs) = &params.biases {
                f += bs[h][i];
            }
            main.push(f);
        }
        let skips: Vec<(usize, Vec<f64>)> = params
            .skips_into(h + 1)
            .map(|s| (s, trace.activation(s).to_vec()))
            .collect();
        let mut pre = main.clone();
        for (_, v) in &skips {
            pre.iter_mut().zip(v).for_each(|(p, s)| *p += s);
        }
        let act = if h < l {
            pre.iter().map(|v| ScalarFn::Tanh.eval(*v)).collect()
        } else {
            pre.clone()
        };
        trace.layers.push(LayerRecord { main, skips, pre, act });
    }
    Ok((trace.output(), trace))
}

/// Output values for a batch stored as `input_dim x points`.
pub fn forward_batch_values(params: &NetworkParams, inputs: &Array2<f64>) -> Result<Vec<f64>> {
    params.check_input(inputs.nrows())?;
    let l = params.hidden_layers();
    let mut acts = vec![inputs.clone()];
    for h in 0..=l {
        let mut f = params.weights[h].dot(&acts[h]) * params.layer_scale(h);
        if let Some(bs) = &params.biases {
            f += &bs[h].view().insert_axis(ndarray::Axis(1));
        }
        for s in params.skips_into(h + 1) {
            f += &acts[s];
        }
        if h < l {
            f.mapv_inplace(f64::tanh);
        }
        acts.push(f);
    }
    Ok(acts[l + 1].row(0).to_vec())
}

/// Parameter leaves of a network recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl ParamNodes {
    pub fn record(tape: &mut ParamTape, params: &NetworkParams) -> Self {
        let weights = params.weights.iter().map(|w| tape.param(w.clone())).collect();
        let biases = params
            .biases
            .as_ref()
            .map(|bs| {
                bs.iter()
                    .map(|b| tape.param(b.clone().insert_axis(ndarray::Axis(1))))
                    .collect()
            })
            .unwrap_or_default();
        ParamNodes { weights, biases }
    }

    /// Gradient entries flattened in [`NetworkParams::to_flat`] order.
    pub fn flatten_grads(&self, grads: &crate::tape::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for id in self.weights.iter().chain(&self.biases) {
            if let Some(g) = grads.get(*id) {
                out.extend(g.iter());
            }
        }
        out
    }
}

/// Records the forward pass of a coefficient-major jet batch; returns the
/// `1 x cols` output node.
pub fn record_forward(
    tape: &mut ParamTape,
    params: &NetworkParams,
    nodes: &ParamNodes,
    input: NodeId,
    layout: JetLayout,
) -> Result<NodeId> {
    let l = params.hidden_layers();
    let mut acts = vec![input];
    for h in 0..=l {
        let mut f = tape.matmul(nodes.weights[h], acts[h], params.layer_scale(h))?;
        if let Some(&b) = nodes.biases.get(h) {
            f = tape.add_bias(f, b, layout.points)?;
        }
        for s in params.skips_into(h + 1) {
            f = tape.add(f, acts[s])?;
        }
        if h < l {
            f = tape.jet_map(f, ScalarFn::Tanh, layout)?;
        }
        acts.push(f);
    }
    Ok(acts[l + 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{identity_encode, DaffBank, Encoder};

    #[test]
    fn shapes_and_parameter_count() {
        let p = init_params(3, 256, 16, 1, false, default_skip_plan(3)).unwrap();
        let shapes: Vec<_> = p.weights.iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(256, 16), (256, 256), (256, 256), (1, 256)]);
        assert_eq!(p.num_params(), 256 * 16 + 2 * 256 * 256 + 256);
        let q = init_params(3, 256, 16, 1, true, vec![]).unwrap();
        assert_eq!(q.num_params(), p.num_params() + 3 * 256 + 1);
        assert_eq!(p, init_params(3, 256, 16, 1, false, default_skip_plan(3)).unwrap());
        assert!(init_params(0, 4, 2, 1, false, vec![]).is_err());
        assert!(init_params(2, 4, 2, 1, false, vec![(2, 1)]).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let mut p = init_params(2, 5, 3, 9, true, default_skip_plan(2)).unwrap();
        let flat = p.to_flat();
        let q = p.clone();
        p.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(p.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = init_params(3, 8, 4, 2, false, default_skip_plan(3)).unwrap();
        let (out, trace) = forward_record(&p, &[0.0; 4]).unwrap();
        assert_eq!(out, 0.0);
        assert_eq!(trace.layers.len(), 4);
        assert!(trace.layers.iter().all(|l| l.act.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn linear_single_layer() {
        // One hidden unit of width 1 with weight 1: tanh applies, so use the
        // output layer alone by checking the pre-activation sum.
        let mut p = init_params(1, 1, 2, 0, true, vec![]).unwrap();
        p.weights[0] = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        p.weights[1] = Array2::from_elem((1, 1), 1.0);
        let (_, trace) = forward_record(&p, &[0.3, 0.4]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((trace.layers[0].pre[0] - 0.7 * s).abs() < 1e-15);
        assert!((trace.output() - (0.7 * s).tanh()).abs() < 1e-15);
    }

    #[test]
    fn record_matches_jet_forward_bitwise() {
        let enc = Encoder::Daff(DaffBank::build(&[1, 2], &[1, 2], (1.0, 1.0)).unwrap());
        let p = init_params(3, 12, enc.dim(), 4, false, default_skip_plan(3)).unwrap();
        for &(x, y) in &[(0.13, 0.71), (0.5, 0.5), (0.999, 0.01)] {
            let (xj, yj) = Jet::seed(x, y, 4).unwrap();
            let jet = forward(&p, &enc.encode(&xj, &yj).unwrap()).unwrap();
            let (out, _) = forward_record(&p, &enc.encode_values(x, y).unwrap()).unwrap();
            assert_eq!(jet.value().to_bits(), out.to_bits());
        }
    }

    #[test]
    fn batch_values_agree() {
        let p = init_params(2, 6, 2, 5, true, default_skip_plan(2)).unwrap();
        let pts = [[0.1, 0.2], [0.7, -0.3]];
        let inputs = Array2::from_shape_fn((2, 2), |(i, j)| pts[j][i]);
        let vals = forward_batch_values(&p, &inputs).unwrap();
        for (k, pt) in pts.iter().enumerate() {
            let (xj, yj) = Jet::seed(pt[0], pt[1], 2).unwrap();
            let v = forward(&p, &identity_encode(&xj, &yj)).unwrap().value();
            assert!((v - vals[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = init_params(1, 3, 4, 0, false, vec![]).unwrap();
        assert!(forward_record(&p, &[0.0; 3]).is_err());
    }
}
