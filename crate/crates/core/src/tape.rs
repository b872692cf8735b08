//! Reverse-mode tape over matrix-valued nodes.
//!
//! Every node holds a dense `rows x cols` matrix. Batches of jets are stored
//! coefficient-major: column `c * points + p` carries Taylor coefficient `c`
//! of point `p`, so a dense layer applied to a batch of jets is a single
//! matrix product and biases touch only the first `points` columns.
//!
//! Parameter gradients therefore flow through every jet coefficient, which
//! is what a loss built from high-order input partials needs.

use std::collections::BTreeMap;

use ndarray::{linalg::general_mat_mul, Array2, Axis};

use crate::error::{Error, Result};
use crate::jet::{coeff_count, compose_slices, product_table, ScalarFn, MAX_COEFFS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Column layout of a batch of jets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub order: usize,
    pub points: usize,
}

impl JetLayout {
    pub fn new(order: usize, points: usize) -> Self {
        JetLayout { order, points }
    }

    pub fn coeffs(&self) -> usize {
        coeff_count(self.order)
    }

    pub fn cols(&self) -> usize {
        self.coeffs() * self.points
    }

    pub fn col(&self, coeff: usize, point: usize) -> usize {
        coeff * self.points + point
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul { a: NodeId, b: NodeId, scale: f64 },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId, cols: usize },
    Scale { x: NodeId, s: f64 },
    JetMap { x: NodeId, f: ScalarFn, layout: JetLayout },
    CombineCoeffs {
        x: NodeId,
        layout: JetLayout,
        weights: Array2<f64>,
        targets: Vec<f64>,
    },
    SumSquares { x: NodeId, scale: f64 },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::JetMap { x, .. }
            | Op::CombineCoeffs { x, .. }
            | Op::SumSquares { x, .. } => vec![*x],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    /// Jet of `f'(g)` for `JetMap` nodes.
    aux: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Array2<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct ParamTape {
    nodes: Vec<Node>,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op) -> NodeId {
        let (value, aux) = eval(&op, &self.nodes);
        let needs_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            aux,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        let needs_grad = matches!(op, Op::Param);
        self.nodes.push(Node {
            value: value.as_standard_layout().into_owned(),
            aux: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push_leaf(value, Op::Param)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push_leaf(value, Op::Constant)
    }

    /// `scale * a * b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (ar, ac) = self.value(a).dim();
        let (br, _) = self.value(b).dim();
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x_")));
        }
        Ok(self.push(Op::MatMul { a, b, scale }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        Ok(self.push(Op::Add { a, b }))
    }

    /// Adds a column vector `bias` to the first `cols` columns of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, cols: usize) -> Result<NodeId> {
        let (xr, xc) = self.value(x).dim();
        if self.value(bias).dim() != (xr, 1) || cols > xc {
            return Err(Error::Shape(format!(
                "bias {:?} onto {xr}x{xc} (first {cols} columns)",
                self.value(bias).dim()
            )));
        }
        Ok(self.push(Op::AddBias { x, bias, cols }))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale { x, s })
    }

    /// Applies `f` to every jet of a coefficient-major batch.
    pub fn jet_map(&mut self, x: NodeId, f: ScalarFn, layout: JetLayout) -> Result<NodeId> {
        if self.value(x).ncols() != layout.cols() {
            return Err(Error::Shape(format!(
                "jet batch with {} columns, layout needs {}",
                self.value(x).ncols(),
                layout.cols()
            )));
        }
        Ok(self.push(Op::JetMap { x, f, layout }))
    }

    /// Per-point linear functional of a single-row jet batch:
    /// `out[p] = sum_c weights[c, p] * x[c, p] - targets[p]`.
    pub fn combine_coeffs(
        &mut self,
        x: NodeId,
        layout: JetLayout,
        weights: Array2<f64>,
        targets: Vec<f64>,
    ) -> Result<NodeId> {
        let (xr, xc) = self.value(x).dim();
        if xr != 1
            || xc != layout.cols()
            || weights.dim() != (layout.coeffs(), layout.points)
            || targets.len() != layout.points
        {
            return Err(Error::Shape("coefficient combination".into()));
        }
        Ok(self.push(Op::CombineCoeffs {
            x,
            layout,
            weights,
            targets,
        }))
    }

    /// `scale * sum(x^2)` as a `1 x 1` node.
    pub fn sum_squares(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.push(Op::SumSquares { x, scale })
    }

    /// Mean of squares over every entry.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        self.sum_squares(x, 1.0 / n as f64)
    }

    /// `sum_i w_i * x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        for (id, _) in &terms {
            if self.value(*id).dim() != (1, 1) {
                return Err(Error::NonScalarRoot(id.0));
            }
        }
        Ok(self.push(Op::WeightedSum { terms }))
    }

    /// Overwrites a leaf value; call [`ParamTape::replay`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Array2<f64>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param | Op::Constant) {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", id.0)));
        }
        if node.value.dim() != value.dim() {
            return Err(Error::Shape("leaf replacement changes shape".into()));
        }
        node.value = value.as_standard_layout().into_owned();
        Ok(())
    }

    /// Recomputes every interior node from the leaves, in recording order.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Param | Op::Constant) {
                continue;
            }
            let (value, aux) = eval(&self.nodes[i].op, &self.nodes[..i]);
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
    }

    /// Reverse sweep from a scalar root. Every parameter leaf gets an
    /// entry, zero when the root does not depend on it.
    pub fn grad_params(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() || self.nodes[root.0].value.dim() != (1, 1) {
            return Err(Error::NonScalarRoot(root.0));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param) {
                adj[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut adj);
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                grads.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul { a, b, scale } => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let acc = slot(adj, *a, self.value(*a).dim());
                    general_mat_mul(*scale, g, &bv.t(), 1.0, acc);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let acc = slot(adj, *b, self.value(*b).dim());
                    general_mat_mul(*scale, &av.t(), g, 1.0, acc);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.wants(*id) {
                        *slot(adj, *id, g.dim()) += g;
                    }
                }
            }
            Op::AddBias { x, bias, cols } => {
                if self.wants(*x) {
                    *slot(adj, *x, g.dim()) += g;
                }
                if self.wants(*bias) {
                    let part = g.slice(ndarray::s![.., ..*cols]).sum_axis(Axis(1));
                    let acc = slot(adj, *bias, (g.nrows(), 1));
                    acc.column_mut(0).zip_mut_with(&part, |a, b| *a += b);
                }
            }
            Op::Scale { x, s } => {
                if self.wants(*x) {
                    slot(adj, *x, g.dim()).scaled_add(*s, g);
                }
            }
            Op::JetMap { x, layout, .. } => {
                if !self.wants(*x) {
                    return;
                }
                let deriv = node.aux.as_ref().expect("jet map keeps its tangent");
                let acc = slot(adj, *x, g.dim());
                jet_map_backward(*layout, g, deriv, acc);
            }
            Op::CombineCoeffs {
                x, layout, weights, ..
            } => {
                if !self.wants(*x) {
                    return;
                }
                let acc = slot(adj, *x, (1, layout.cols()));
                for c in 0..layout.coeffs() {
                    for p in 0..layout.points {
                        acc[[0, layout.col(c, p)]] += weights[[c, p]] * g[[0, p]];
                    }
                }
            }
            Op::SumSquares { x, scale } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    slot(adj, *x, xv.dim()).scaled_add(2.0 * scale * g[[0, 0]], xv);
                }
            }
            Op::WeightedSum { terms } => {
                for (id, w) in terms {
                    if self.wants(*id) {
                        slot(adj, *id, (1, 1))[[0, 0]] += w * g[[0, 0]];
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Array2<f64>>], id: NodeId, dim: (usize, usize)) -> &'a mut Array2<f64> {
    adj[id.0].get_or_insert_with(|| Array2::zeros(dim))
}

fn eval(op: &Op, nodes: &[Node]) -> (Array2<f64>, Option<Array2<f64>>) {
    let v = |id: &NodeId| &nodes[id.0].value;
    match op {
        Op::Param | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul { a, b, scale } => {
            let (a, b) = (v(a), v(b));
            let mut out = Array2::zeros((a.nrows(), b.ncols()));
            general_mat_mul(*scale, a, b, 0.0, &mut out);
            (out, None)
        }
        Op::Add { a, b } => (v(a) + v(b), None),
        Op::AddBias { x, bias, cols } => {
            let mut out = v(x).clone();
            let bias = v(bias);
            for (mut row, b) in out.rows_mut().into_iter().zip(bias.column(0).iter()) {
                row.iter_mut().take(*cols).for_each(|e| *e += b);
            }
            (out, None)
        }
        Op::Scale { x, s } => (v(x) * *s, None),
        Op::JetMap { x, f, layout } => {
            let (out, deriv) = jet_map_forward(*f, *layout, v(x));
            (out, Some(deriv))
        }
        Op::CombineCoeffs {
            x,
            layout,
            weights,
            targets,
        } => {
            let xv = v(x);
            let mut out = Array2::zeros((1, layout.points));
            for p in 0..layout.points {
                let mut acc = 0.0;
                for c in 0..layout.coeffs() {
                    acc += weights[[c, p]] * xv[[0, layout.col(c, p)]];
                }
                out[[0, p]] = acc - targets[p];
            }
            (out, None)
        }
        Op::SumSquares { x, scale } => {
            let s: f64 = v(x).iter().map(|e| e * e).sum();
            (Array2::from_elem((1, 1), scale * s), None)
        }
        Op::WeightedSum { terms } => {
            let mut acc = 0.0;
            for (id, w) in terms {
                acc += w * v(id)[[0, 0]];
            }
            (Array2::from_elem((1, 1), acc), None)
        }
    }
}

fn jet_map_forward(f: ScalarFn, layout: JetLayout, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let rows = x.nrows();
    let nc = layout.coeffs();
    let np = layout.points;
    let mut out = Array2::zeros(x.dim());
    let mut deriv = Array2::zeros(x.dim());
    let mut g = [0.0; MAX_COEFFS];
    let mut o = [0.0; MAX_COEFFS];
    let mut d = [0.0; MAX_COEFFS];
    for r in 0..rows {
        let xr = x.row(r);
        let xr = xr.as_slice().expect("standard layout");
        let mut or = out.row_mut(r);
        let or = or.as_slice_mut().expect("standard layout");
        let mut dr = deriv.row_mut(r);
        let dr = dr.as_slice_mut().expect("standard layout");
        for p in 0..np {
            for c in 0..nc {
                g[c] = xr[c * np + p];
            }
            compose_slices(f, layout.order, &g, &mut o, Some(&mut d));
            for c in 0..nc {
                or[c * np + p] = o[c];
                dr[c * np + p] = d[c];
            }
        }
    }
    (out, deriv)
}

// The tangent of g -> f(g) is multiplication by the jet f'(g); its adjoint
// scatters out-bar[k] * f'(g)[i] into in-bar[j] for every product triple.
fn jet_map_backward(layout: JetLayout, gbar: &Array2<f64>, deriv: &Array2<f64>, acc: &mut Array2<f64>) {
    let np = layout.points;
    let table = product_table(layout.order);
    for r in 0..gbar.nrows() {
        let gr = gbar.row(r);
        let gr = gr.as_slice().expect("standard layout");
        let dr = deriv.row(r);
        let dr = dr.as_slice().expect("standard layout");
        let mut ar = acc.row_mut(r);
        let ar = ar.as_slice_mut().expect("standard layout");
        for p in 0..np {
            for &(i, j, k) in table {
                ar[j * np + p] += gr[k * np + p] * dr[i * np + p];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_loss_gradient_is_the_fixed_vector() {
        let mut t = ParamTape::new();
        let w = t.param(array![[0.5, -1.0, 2.0]]);
        let g = t.constant(array![[3.0], [4.0], [-5.0]]);
        let loss = t.matmul(w, g, 1.0).unwrap();
        let grads = t.grad_params(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &array![[3.0, 4.0, -5.0]]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = ParamTape::new();
        let w = t.param(array![[1.0, 2.0]]);
        let c = t.constant(array![[7.0]]);
        let loss = t.scale(c, 2.0);
        let grads = t.grad_params(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = ParamTape::new();
        let w = t.param(array![[1.0, 2.0]]);
        assert!(matches!(t.grad_params(w), Err(Error::NonScalarRoot(0))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = ParamTape::new();
        let w = t.param(array![[0.3, -0.7], [1.1, 0.2]]);
        let x = t.constant(array![[0.1, 1.0, 0.0], [0.4, 0.0, 1.0]]);
        let f = t.matmul(w, x, 0.5).unwrap();
        let g = t.jet_map(f, ScalarFn::Tanh, JetLayout::new(1, 1)).unwrap();
        let loss = t.mean_square(g);
        let before = t.scalar(loss);
        t.replay();
        assert_eq!(before.to_bits(), t.scalar(loss).to_bits());
    }
}
