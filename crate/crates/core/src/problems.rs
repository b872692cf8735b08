//! Benchmark PDEs: a simply supported Kirchhoff-Love plate and a Dirichlet
//! Helmholtz problem, with residuals on jets, analytic solutions,
//! collocation sampling and loss-term assembly.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DaffBank, Edge};
use crate::jet::{coeff_count, coeff_index, partial_factor, Jet};

/// Tolerance for "point lies on the edge".
pub const EDGE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Rect {
    pub fn edge_point(&self, edge: Edge, t: f64) -> [f64; 2] {
        let (x, y) = edge.point(self.x, self.y, t);
        [x, y]
    }

    pub fn on_edge(&self, edge: Edge, p: [f64; 2]) -> bool {
        let d = match edge {
            Edge::Left => p[0] - self.x.0,
            Edge::Right => p[0] - self.x.1,
            Edge::Bottom => p[1] - self.y.0,
            Edge::Top => p[1] - self.y.1,
        };
        let (along, range) = if edge.normal_is_x() {
            (p[1], self.y)
        } else {
            (p[0], self.x)
        };
        d.abs() <= EDGE_TOL && along >= range.0 - EDGE_TOL && along <= range.1 + EDGE_TOL
    }
}

/// Edge order used for boundary groups and reports.
pub const EDGES: [Edge; 4] = [Edge::Left, Edge::Bottom, Edge::Right, Edge::Top];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KirchhoffSpec {
    #[serde(default = "defaults::youngs")]
    pub youngs_modulus: f64,
    #[serde(default = "defaults::thickness")]
    pub thickness: f64,
    #[serde(default = "defaults::poisson")]
    pub poisson: f64,
    #[serde(default = "defaults::load")]
    pub load: f64,
    #[serde(default = "defaults::extent")]
    pub a: f64,
    #[serde(default = "defaults::extent")]
    pub b: f64,
}

mod defaults {
    pub fn youngs() -> f64 {
        1.0
    }
    pub fn thickness() -> f64 {
        0.1
    }
    pub fn poisson() -> f64 {
        0.3
    }
    pub fn load() -> f64 {
        1.0
    }
    pub fn extent() -> f64 {
        1.0
    }
    pub fn wavenumber() -> f64 {
        1.0
    }
    pub fn n1() -> u32 {
        4
    }
    pub fn n2() -> u32 {
        1
    }
}

impl Default for KirchhoffSpec {
    fn default() -> Self {
        KirchhoffSpec {
            youngs_modulus: 1.0,
            thickness: 0.1,
            poisson: 0.3,
            load: 1.0,
            a: 1.0,
            b: 1.0,
        }
    }
}

impl KirchhoffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(Error::config("problem.poisson", "must lie in [0, 0.5)"));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::config("problem.a", "plate extents must be positive"));
        }
        if !(self.flexural_stiffness() > 0.0) {
            return Err(Error::config("problem.youngs_modulus", "flexural stiffness must be positive"));
        }
        Ok(())
    }

    /// `D = E h^3 / (12 (1 - nu))`.
    pub fn flexural_stiffness(&self) -> f64 {
        self.youngs_modulus * self.thickness.powi(3) / (12.0 * (1.0 - self.poisson))
    }

    pub fn forcing(&self, x: f64, y: f64) -> f64 {
        self.load * (x * PI / self.a).sin() * (y * PI / self.b).sin()
    }

    /// Amplitude of the closed-form deflection.
    pub fn amplitude(&self) -> f64 {
        let s = 1.0 / (self.a * self.a) + 1.0 / (self.b * self.b);
        self.load / (self.flexural_stiffness() * PI.powi(4) * s * s)
    }

    pub fn domain(&self) -> Rect {
        Rect {
            x: (0.0, self.a),
            y: (0.0, self.b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelmholtzSpec {
    #[serde(default = "defaults::wavenumber")]
    pub k: f64,
    #[serde(default = "defaults::n1")]
    pub n1: u32,
    #[serde(default = "defaults::n2")]
    pub n2: u32,
}

impl Default for HelmholtzSpec {
    fn default() -> Self {
        HelmholtzSpec { k: 1.0, n1: 4, n2: 1 }
    }
}

impl HelmholtzSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 1 || self.n2 < 1 {
            return Err(Error::config("problem.n1", "harmonics must be at least 1"));
        }
        Ok(())
    }

    pub fn forcing(&self, x: f64, y: f64) -> f64 {
        let (a1, a2) = (self.n1 as f64 * PI, self.n2 as f64 * PI);
        (-a1 * a1 - a2 * a2 + self.k * self.k) * (a1 * x).sin() * (a2 * y).sin()
    }

    pub fn domain(&self) -> Rect {
        Rect {
            x: (-1.0, 1.0),
            y: (-1.0, 1.0),
        }
    }
}

// Linear functionals of a jet, as weights on its Taylor coefficients.
fn functional(order: usize, terms: &[((usize, usize), f64)]) -> Vec<f64> {
    let mut w = vec![0.0; coeff_count(order)];
    for &((a, b), c) in terms {
        w[coeff_index(a, b)] += c * partial_factor(a, b);
    }
    w
}

fn apply(w: &[f64], u: &Jet) -> f64 {
    w.iter().zip(u.coeffs()).map(|(a, b)| a * b).sum()
}

fn biharmonic_weights() -> Vec<f64> {
    functional(4, &[((4, 0), 1.0), ((2, 2), 2.0), ((0, 4), 1.0)])
}

fn moment_weights(spec: &KirchhoffSpec, edge: Edge) -> Vec<f64> {
    let d = spec.flexural_stiffness();
    let nu = spec.poisson;
    if edge.normal_is_x() {
        functional(2, &[((2, 0), -d), ((0, 2), -d * nu)])
    } else {
        functional(2, &[((2, 0), -d * nu), ((0, 2), -d)])
    }
}

fn helmholtz_weights(spec: &HelmholtzSpec) -> Vec<f64> {
    functional(2, &[((2, 0), 1.0), ((0, 2), 1.0), ((0, 0), spec.k * spec.k)])
}

/// `u_xxxx + 2 u_xxyy + u_yyyy - f / D`.
pub fn kirchhoff_residual(spec: &KirchhoffSpec, u: &Jet, point: [f64; 2]) -> Result<f64> {
    if u.order() < 4 {
        return Err(Error::UnsupportedOrder(u.order()));
    }
    Ok(apply(&biharmonic_weights(), u) - spec.forcing(point[0], point[1]) / spec.flexural_stiffness())
}

/// `(u, bending moment)` on a plate edge.
pub fn kirchhoff_bc_residuals(spec: &KirchhoffSpec, u: &Jet, point: [f64; 2], edge: Edge) -> Result<(f64, f64)> {
    if u.order() < 2 {
        return Err(Error::UnsupportedOrder(u.order()));
    }
    if !spec.domain().on_edge(edge, point) {
        return Err(Error::OutsideDomain {
            x: point[0],
            y: point[1],
            what: format!("{edge:?} edge"),
        });
    }
    Ok((u.value(), apply(&moment_weights(spec, edge), u)))
}

/// `u_xx + u_yy + k^2 u - f`.
pub fn helmholtz_residual(spec: &HelmholtzSpec, u: &Jet, point: [f64; 2]) -> Result<f64> {
    if u.order() < 2 {
        return Err(Error::UnsupportedOrder(u.order()));
    }
    Ok(apply(&helmholtz_weights(spec), u) - spec.forcing(point[0], point[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    Kirchhoff(KirchhoffSpec),
    Helmholtz(HelmholtzSpec),
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Problem::Kirchhoff(_) => "kirchhoff",
            Problem::Helmholtz(_) => "helmholtz",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Problem::Kirchhoff(s) => s.validate(),
            Problem::Helmholtz(s) => s.validate(),
        }
    }

    pub fn domain(&self) -> Rect {
        match self {
            Problem::Kirchhoff(s) => s.domain(),
            Problem::Helmholtz(s) => s.domain(),
        }
    }

    /// Jet order needed by the interior residual.
    pub fn residual_order(&self) -> usize {
        match self {
            Problem::Kirchhoff(_) => 4,
            Problem::Helmholtz(_) => 2,
        }
    }

    /// Jet order needed by the boundary terms.
    pub fn boundary_order(&self) -> usize {
        match self {
            Problem::Kirchhoff(_) => 2,
            Problem::Helmholtz(_) => 0,
        }
    }

    pub fn analytic_solution(&self, x: f64, y: f64) -> f64 {
        match self {
            Problem::Kirchhoff(s) => s.amplitude() * (PI * x / s.a).sin() * (PI * y / s.b).sin(),
            Problem::Helmholtz(s) => (s.n1 as f64 * PI * x).sin() * (s.n2 as f64 * PI * y).sin(),
        }
    }

    /// Closed-form solution as a jet about `(x, y)`.
    pub fn analytic_jet(&self, x: f64, y: f64, order: usize) -> Result<Jet> {
        let (xj, yj) = Jet::seed(x, y, order.max(2))?;
        let (xj, yj) = (xj.truncate(order), yj.truncate(order));
        Ok(match self {
            Problem::Kirchhoff(s) => {
                ((xj * (PI / s.a)).sin() * (yj * (PI / s.b)).sin()) * s.amplitude()
            }
            Problem::Helmholtz(s) => {
                (xj * (s.n1 as f64 * PI)).sin() * (yj * (s.n2 as f64 * PI)).sin()
            }
        })
    }

    /// Interior residual of a jet at `point`.
    pub fn residual(&self, u: &Jet, point: [f64; 2]) -> Result<f64> {
        match self {
            Problem::Kirchhoff(s) => kirchhoff_residual(s, u, point),
            Problem::Helmholtz(s) => helmholtz_residual(s, u, point),
        }
    }

    /// Boundary residuals at an edge point: `(u, moment)` for the plate,
    /// `(u,)` for Helmholtz.
    pub fn boundary_residuals(&self, u: &Jet, point: [f64; 2], edge: Edge) -> Result<Vec<f64>> {
        match self {
            Problem::Kirchhoff(s) => {
                let (d, m) = kirchhoff_bc_residuals(s, u, point, edge)?;
                Ok(vec![d, m])
            }
            Problem::Helmholtz(s) => {
                if !s.domain().on_edge(edge, point) {
                    return Err(Error::OutsideDomain {
                        x: point[0],
                        y: point[1],
                        what: format!("{edge:?} edge"),
                    });
                }
                Ok(vec![u.value()])
            }
        }
    }

    /// Analytic DaFF bank on this problem's rectangle.
    pub fn daff_bank(&self, comp_types: &[u8], mn_values: &[i32]) -> Result<DaffBank> {
        let d = self.domain();
        Ok(DaffBank::build(comp_types, mn_values, (d.x.1 - d.x.0, d.y.1 - d.y.0))?.with_origin([d.x.0, d.y.0]))
    }

    /// Loss groups for a batch. With `residual_only` (DaFF models) only the
    /// PDE residual term is produced.
    pub fn loss_groups(&self, batch: &CollocationBatch, residual_only: bool) -> Result<Vec<TermGroup>> {
        if batch.interior.is_empty() {
            return Err(Error::InvalidArgument("empty interior point group".into()));
        }
        let mut groups = vec![self.residual_group(&batch.interior)];
        if residual_only {
            return Ok(groups);
        }
        if batch.boundary.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty boundary point group".into()));
        }
        match self {
            Problem::Kirchhoff(s) => {
                let mut points = Vec::new();
                let mut moment = Vec::new();
                for (edge, pts) in EDGES.iter().zip(&batch.boundary) {
                    let w = moment_weights(s, *edge);
                    for p in pts {
                        points.push(*p);
                        moment.push(w.clone());
                    }
                }
                let n = points.len();
                let displacement = vec![functional(2, &[((0, 0), 1.0)]); n];
                groups.push(TermGroup {
                    order: 2,
                    points,
                    terms: vec![
                        LossTerm::new("L_b1", 2, &moment, vec![0.0; n])?,
                        LossTerm::new("L_b2", 2, &displacement, vec![0.0; n])?,
                    ],
                });
            }
            Problem::Helmholtz(_) => {
                for (k, pts) in batch.boundary.iter().enumerate() {
                    let n = pts.len();
                    groups.push(TermGroup {
                        order: 0,
                        points: pts.clone(),
                        terms: vec![LossTerm::new(
                            &format!("L_b{}", k + 1),
                            0,
                            &vec![vec![1.0]; n],
                            vec![0.0; n],
                        )?],
                    });
                }
            }
        }
        Ok(groups)
    }

    fn residual_group(&self, points: &[[f64; 2]]) -> TermGroup {
        let (order, w) = match self {
            Problem::Kirchhoff(_) => (4, biharmonic_weights()),
            Problem::Helmholtz(s) => (2, helmholtz_weights(s)),
        };
        let targets = points
            .iter()
            .map(|p| match self {
                Problem::Kirchhoff(s) => s.forcing(p[0], p[1]) / s.flexural_stiffness(),
                Problem::Helmholtz(s) => s.forcing(p[0], p[1]),
            })
            .collect();
        let weights = Array2::from_shape_fn((w.len(), points.len()), |(c, _)| w[c]);
        TermGroup {
            order,
            points: points.to_vec(),
            terms: vec![LossTerm {
                name: "L_r".into(),
                weights,
                targets,
            }],
        }
    }
}

/// One mean-square loss term: per point, a linear functional of the output
/// jet minus a target.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    /// `coeffs x points`.
    pub weights: Array2<f64>,
    pub targets: Vec<f64>,
}

impl LossTerm {
    pub fn new(name: &str, order: usize, per_point: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let nc = coeff_count(order);
        if per_point.len() != targets.len() || per_point.iter().any(|w| w.len() != nc) {
            return Err(Error::Shape(format!("loss term `{name}`")));
        }
        let weights = Array2::from_shape_fn((nc, targets.len()), |(c, p)| per_point[p][c]);
        Ok(LossTerm {
            name: name.into(),
            weights,
            targets,
        })
    }

    /// Mean-square of the residuals of a list of output jets.
    pub fn evaluate(&self, outputs: &[Jet]) -> f64 {
        let n = self.targets.len();
        let mut acc = 0.0;
        for (p, u) in outputs.iter().enumerate() {
            let r: f64 = self
                .weights
                .column(p)
                .iter()
                .zip(u.coeffs())
                .map(|(w, c)| w * c)
                .sum::<f64>()
                - self.targets[p];
            acc += r * r;
        }
        acc / n as f64
    }
}

/// Loss terms that share a set of points and a jet order.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGroup {
    pub order: usize,
    pub points: Vec<[f64; 2]>,
    pub terms: Vec<LossTerm>,
}

/// Initial-condition style term: `u(p) = g(p)` on the given points.
pub fn value_term(name: &str, points: &[[f64; 2]], target: impl Fn(f64, f64) -> f64) -> TermGroup {
    let n = points.len();
    TermGroup {
        order: 0,
        points: points.to_vec(),
        terms: vec![LossTerm {
            name: name.into(),
            weights: Array2::ones((1, n)),
            targets: points.iter().map(|p| target(p[0], p[1])).collect(),
        }],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBatch {
    pub interior: Vec<[f64; 2]>,
    /// Per edge, in [`EDGES`] order.
    pub boundary: [Vec<[f64; 2]>; 4],
}

impl CollocationBatch {
    pub fn boundary_len(&self) -> usize {
        self.boundary.iter().map(Vec::len).sum()
    }
}

/// `3/4` uniform interior points, `1/4` on the edges split evenly.
pub fn sample_collocation(domain: &Rect, total: usize, seed: u64) -> Result<CollocationBatch> {
    if total == 0 || total % 4 != 0 {
        return Err(Error::InvalidArgument(format!("collocation total {total} is not divisible by 4")));
    }
    let boundary_total = total / 4;
    if boundary_total % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "boundary count {boundary_total} does not split evenly over four edges"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior = (0..total - boundary_total)
        .map(|_| {
            [
                domain.x.0 + (domain.x.1 - domain.x.0) * rng.random::<f64>(),
                domain.y.0 + (domain.y.1 - domain.y.0) * rng.random::<f64>(),
            ]
        })
        .collect();
    let per_edge = boundary_total / 4;
    let boundary = EDGES.map(|edge| (0..per_edge).map(|_| domain.edge_point(edge, rng.random())).collect());
    Ok(CollocationBatch { interior, boundary })
}

/// Anything that maps points to predicted solution values.
pub trait Predictor {
    fn predict_batch(&self, points: &[[f64; 2]]) -> Result<Vec<f64>>;
}

impl<F: Fn(f64, f64) -> f64> Predictor for F {
    fn predict_batch(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|p| self(p[0], p[1])).collect())
    }
}

/// Uniform `grid_n x grid_n` lattice over the closed domain.
pub fn grid_points(domain: &Rect, grid_n: usize) -> Vec<[f64; 2]> {
    let coord = |r: (f64, f64), i: usize| {
        if i + 1 == grid_n {
            r.1
        } else {
            r.0 + (r.1 - r.0) * i as f64 / (grid_n - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(grid_n * grid_n);
    for j in 0..grid_n {
        for i in 0..grid_n {
            pts.push([coord(domain.x, i), coord(domain.y, j)]);
        }
    }
    pts
}

pub fn validation_grid_mse(model: &dyn Predictor, problem: &Problem, grid_n: usize) -> Result<f64> {
    if grid_n < 2 {
        return Err(Error::InvalidArgument("validation grid needs at least 2 nodes per side".into()));
    }
    let pts = grid_points(&problem.domain(), grid_n);
    let pred = model.predict_batch(&pts)?;
    let sum: f64 = pts
        .iter()
        .zip(&pred)
        .map(|(p, u)| {
            let d = u - problem.analytic_solution(p[0], p[1]);
            d * d
        })
        .sum();
    Ok(sum / pts.len() as f64)
}

/// Max `|u|` over `per_edge` evenly spaced points on each edge.
pub fn boundary_max_abs(model: &dyn Predictor, problem: &Problem, per_edge: usize) -> Result<f64> {
    let d = problem.domain();
    let mut pts = Vec::new();
    for edge in EDGES {
        for i in 0..per_edge {
            let t = if per_edge == 1 { 0.5 } else { i as f64 / (per_edge - 1) as f64 };
            pts.push(d.edge_point(edge, t));
        }
    }
    Ok(model.predict_batch(&pts)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}
