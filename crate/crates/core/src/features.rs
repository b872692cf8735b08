//! Positional encodings of the input coordinates.
//!
//! Three encoders are available: the identity map, Random Fourier Features
//! (`[cos(b_j . x); sin(b_j . x)]` with Gaussian rows `b_j`), and
//! Domain-aware Fourier Features, i.e. Laplace eigenfunctions of the
//! rectangle `[0,a] x [0,b]`:
//!
//! | comp | feature                          |
//! |------|----------------------------------|
//! | 1    | `sin(m pi x/a) sin(n pi y/b)`    |
//! | 2    | `sin(m pi x/a) cos(n pi y/b)`    |
//! | 3    | `cos(m pi x/a) sin(n pi y/b)`    |
//! | 4    | `cos(m pi x/a) cos(n pi y/b)`    |
//!
//! Only comp 1 vanishes on all four edges. Negative harmonic indices flip the
//! frequency sign, so `sin` features come out phase-inverted.
//!
//! Problem domains that do not start at the origin are shifted onto the
//! reference rectangle before encoding (see [`DaffBank::origin`]).

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eigen::NumericDaff;
use crate::error::{Error, Result};
use crate::jet::{coeff_count, Jet};
use crate::tape::JetLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Identity,
    Rff,
    Daff,
    DaffNumeric,
}

impl BankKind {
    pub fn is_daff(self) -> bool {
        matches!(self, BankKind::Daff | BankKind::DaffNumeric)
    }
}

/// Encoded features of one point, as values and as jets.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub values: Vec<f64>,
    pub jets: Vec<Jet>,
    pub bank_kind: BankKind,
}

impl Encoding {
    fn from_jets(jets: Vec<Jet>, bank_kind: BankKind) -> Self {
        let values = jets.iter().map(Jet::value).collect();
        Encoding {
            values,
            jets,
            bank_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }
}

/// Passes the coordinate jets through unchanged.
pub fn identity_encode(x: &Jet, y: &Jet) -> Encoding {
    Encoding::from_jets(vec![*x, *y], BankKind::Identity)
}

/// Random Fourier Feature bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffBank {
    /// Frequency rows, `features x input_dim`, block `j` drawn with
    /// variance `variances[j]`.
    pub rows: Array2<f64>,
    pub variances: Vec<f64>,
    pub features_per_block: usize,
    pub seed: u64,
}

impl RffBank {
    /// Samples `features_per_block` rows per variance in the schedule.
    pub fn sample(variances: &[f64], features_per_block: usize, input_dim: usize, seed: u64) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidArgument("empty RFF variance schedule".into()));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("RFF variance must be positive, got {v}")));
        }
        if features_per_block == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("RFF bank needs at least one feature and one input".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::zeros((variances.len() * features_per_block, input_dim));
        for (block, var) in variances.iter().enumerate() {
            let normal = Normal::new(0.0, var.sqrt()).expect("positive std");
            for r in 0..features_per_block {
                for c in 0..input_dim {
                    rows[[block * features_per_block + r, c]] = normal.sample(&mut rng);
                }
            }
        }
        Ok(RffBank {
            rows,
            variances: variances.to_vec(),
            features_per_block,
            seed,
        })
    }

    pub fn features(&self) -> usize {
        self.rows.nrows()
    }

    /// Encoding width: all cosines, then all sines.
    pub fn dim(&self) -> usize {
        2 * self.features()
    }

    pub fn encode(&self, x: &Jet, y: &Jet) -> Result<Encoding> {
        if self.rows.ncols() != 2 {
            return Err(Error::Shape(format!(
                "RFF rows have {} columns, points are 2-D",
                self.rows.ncols()
            )));
        }
        let nf = self.features();
        let mut jets = vec![Jet::zero(x.order()); 2 * nf];
        for j in 0..nf {
            let arg = x.scale(self.rows[[j, 0]]) + y.scale(self.rows[[j, 1]]);
            jets[j] = arg.cos();
            jets[nf + j] = arg.sin();
        }
        Ok(Encoding::from_jets(jets, BankKind::Rff))
    }
}

/// Harmonic pattern of a DaFF entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompType(u8);

impl CompType {
    pub fn new(c: u8) -> Result<Self> {
        if (1..=4).contains(&c) {
            Ok(CompType(c))
        } else {
            Err(Error::InvalidArgument(format!("DaFF comp type must be 1..=4, got {c}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// `(x factor is sin, y factor is sin)`.
    fn sines(self) -> (bool, bool) {
        match self.0 {
            1 => (true, true),
            2 => (true, false),
            3 => (false, true),
            _ => (false, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self.0 {
            1 => "sin*sin",
            2 => "sin*cos",
            3 => "cos*sin",
            _ => "cos*cos",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaffEntry {
    pub comp: CompType,
    pub m: i32,
    pub n: i32,
    pub eigenvalue: f64,
}

/// Analytic Domain-aware Fourier Feature bank on `[0,a] x [0,b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaffBank {
    pub entries: Vec<DaffEntry>,
    pub a: f64,
    pub b: f64,
    /// Problem-frame coordinates of the reference corner `(0, 0)`.
    pub origin: [f64; 2],
}

/// Laplace eigenvalue of the `(m, n)` mode on an `a x b` rectangle.
pub fn rectangle_eigenvalue(m: i32, n: i32, a: f64, b: f64) -> f64 {
    let (m, n) = (m as f64, n as f64);
    PI * PI * ((m / a).powi(2) + (n / b).powi(2))
}

impl DaffBank {
    /// One entry per comp type and ordered `(m, n)` pair drawn from
    /// `mn_values` (full Cartesian product, repeats included).
    pub fn build(comp_types: &[u8], mn_values: &[i32], extents: (f64, f64)) -> Result<Self> {
        if comp_types.is_empty() || mn_values.is_empty() {
            return Err(Error::InvalidArgument("DaFF comp and (m,n) lists must be non-empty".into()));
        }
        let (a, b) = extents;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidArgument(format!("DaFF extents must be positive, got ({a}, {b})")));
        }
        let mut entries = Vec::with_capacity(comp_types.len() * mn_values.len().pow(2));
        for &c in comp_types {
            let comp = CompType::new(c)?;
            for &m in mn_values {
                for &n in mn_values {
                    entries.push(DaffEntry {
                        comp,
                        m,
                        n,
                        eigenvalue: rectangle_eigenvalue(m, n, a, b),
                    });
                }
            }
        }
        Ok(DaffBank {
            entries,
            a,
            b,
            origin: [0.0, 0.0],
        })
    }

    pub fn with_origin(mut self, origin: [f64; 2]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn encode(&self, x: &Jet, y: &Jet) -> Result<Encoding> {
        let order = x.order();
        let xr = *x - Jet::constant(order, self.origin[0]);
        let yr = *y - Jet::constant(order, self.origin[1]);
        let jets = self
            .entries
            .iter()
            .map(|e| {
                let ax = xr.scale(e.m as f64 * PI / self.a);
                let ay = yr.scale(e.n as f64 * PI / self.b);
                let (sx, sy) = e.comp.sines();
                let fx = if sx { ax.sin() } else { ax.cos() };
                let fy = if sy { ay.sin() } else { ay.cos() };
                fx * fy
            })
            .collect();
        Ok(Encoding::from_jets(jets, BankKind::Daff))
    }

    /// Maximum of `|d^k phi / d nu^k|` over 101 points of `edge`, where `nu`
    /// is the coordinate normal to the edge, across all entries.
    pub fn derivative_check(&self, k: usize, edge: Edge) -> Result<f64> {
        if k > 4 {
            return Err(Error::UnsupportedOrder(k));
        }
        let (x0, y0) = (self.origin[0], self.origin[1]);
        let (x1, y1) = (x0 + self.a, y0 + self.b);
        let mut worst = 0.0f64;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let (x, y) = edge.point((x0, x1), (y0, y1), t);
            let (xj, yj) = Jet::seed_any(x, y, 4);
            let enc = self.encode(&xj, &yj)?;
            for jet in &enc.jets {
                let d = if edge.normal_is_x() {
                    jet.partial(k, 0)
                } else {
                    jet.partial(0, k)
                };
                worst = worst.max(d.abs());
            }
        }
        Ok(worst)
    }
}

/// Rectangle edges. `Left`/`Right` are `x = x_min`/`x = x_max`,
/// `Bottom`/`Top` are `y = y_min`/`y = y_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Bottom, Edge::Top];

    pub fn normal_is_x(self) -> bool {
        matches!(self, Edge::Left | Edge::Right)
    }

    /// Point at parameter `t` in `[0, 1]` along the edge.
    pub fn point(self, xr: (f64, f64), yr: (f64, f64), t: f64) -> (f64, f64) {
        let lerp = |(lo, hi): (f64, f64)| lo + t * (hi - lo);
        match self {
            Edge::Left => (xr.0, lerp(yr)),
            Edge::Right => (xr.1, lerp(yr)),
            Edge::Bottom => (lerp(xr), yr.0),
            Edge::Top => (lerp(xr), yr.1),
        }
    }
}

/// Any of the supported input encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    Identity,
    Rff(RffBank),
    Daff(DaffBank),
    DaffNumeric(NumericDaff),
}

impl Encoder {
    pub fn kind(&self) -> BankKind {
        match self {
            Encoder::Identity => BankKind::Identity,
            Encoder::Rff(_) => BankKind::Rff,
            Encoder::Daff(_) => BankKind::Daff,
            Encoder::DaffNumeric(_) => BankKind::DaffNumeric,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Identity => 2,
            Encoder::Rff(b) => b.dim(),
            Encoder::Daff(b) => b.dim(),
            Encoder::DaffNumeric(b) => b.dim(),
        }
    }

    /// Highest jet order the encoder supports.
    pub fn max_order(&self) -> usize {
        match self {
            Encoder::DaffNumeric(_) => 2,
            _ => crate::jet::MAX_ORDER,
        }
    }

    pub fn encode(&self, x: &Jet, y: &Jet) -> Result<Encoding> {
        if x.order() != y.order() {
            return Err(Error::OrderMismatch(x.order(), y.order()));
        }
        match self {
            Encoder::Identity => Ok(identity_encode(x, y)),
            Encoder::Rff(b) => b.encode(x, y),
            Encoder::Daff(b) => b.encode(x, y),
            Encoder::DaffNumeric(b) => b.encode(x, y),
        }
    }

    /// Value-level encoding; identical to the value channel of
    /// [`Encoder::encode`] because it runs the same code on order-0 jets.
    pub fn encode_values(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        let (xj, yj) = Jet::seed_any(x, y, 0);
        Ok(self.encode(&xj, &yj)?.values)
    }

    /// Encodes a batch into the coefficient-major layout used by the tape:
    /// row `i` is feature `i`, column `c * points + p` its coefficient `c`
    /// at point `p`.
    pub fn encode_batch(&self, points: &[[f64; 2]], order: usize) -> Result<Array2<f64>> {
        if order > self.max_order() {
            return Err(Error::UnsupportedOrder(order));
        }
        let layout = JetLayout::new(order, points.len());
        let mut out = Array2::zeros((self.dim(), layout.cols()));
        for (p, pt) in points.iter().enumerate() {
            let (xj, yj) = Jet::seed_any(pt[0], pt[1], order);
            let enc = self.encode(&xj, &yj)?;
            for (i, jet) in enc.jets.iter().enumerate() {
                for (c, v) in jet.coeffs().iter().enumerate().take(coeff_count(order)) {
                    out[[i, layout.col(c, p)]] = *v;
                }
            }
        }
        Ok(out)
    }

    /// Human-readable feature names, one per encoding slot.
    pub fn feature_labels(&self) -> Vec<String> {
        match self {
            Encoder::Identity => vec!["x".into(), "y".into()],
            Encoder::Rff(b) => {
                let nf = b.features();
                (0..2 * nf)
                    .map(|i| {
                        let (kind, j) = if i < nf { ("cos", i) } else { ("sin", i - nf) };
                        format!("{kind}[{:.4},{:.4}]", b.rows[[j, 0]], b.rows[[j, 1]])
                    })
                    .collect()
            }
            Encoder::Daff(b) => b
                .entries
                .iter()
                .map(|e| format!("{}(m={},n={})", e.comp.label(), e.m, e.n))
                .collect(),
            Encoder::DaffNumeric(b) => (0..b.dim()).map(|i| format!("mode{i}")).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(x: f64, y: f64) -> (Jet, Jet) {
        Jet::seed(x, y, 4).unwrap()
    }

    #[test]
    fn rff_zero_row_and_pi_row() {
        let mut bank = RffBank::sample(&[1.0], 2, 2, 0).unwrap();
        bank.rows = ndarray::array![[0.0, 0.0], [PI, 0.0]];
        let (x, y) = seed(1.0, 0.3);
        let enc = bank.encode(&x, &y).unwrap();
        assert_eq!(enc.values[0], 1.0);
        assert_eq!(enc.values[2], 0.0);
        assert!((enc.values[1] + 1.0).abs() < 1e-15);
        assert!(enc.values[3].abs() < 1e-15);
    }

    #[test]
    fn rff_blocks_and_determinism() {
        let bank = RffBank::sample(&[1.0, 2.0, 3.0, 4.0], 8, 2, 11).unwrap();
        assert_eq!(bank.features(), 32);
        assert_eq!(bank.dim(), 64);
        assert_eq!(bank, RffBank::sample(&[1.0, 2.0, 3.0, 4.0], 8, 2, 11).unwrap());
        assert!(RffBank::sample(&[1.0, 0.0], 8, 2, 11).is_err());
        assert!(RffBank::sample(&[-1.0], 8, 2, 11).is_err());
    }

    #[test]
    fn rff_empirical_variance() {
        let bank = RffBank::sample(&[1.0], 128, 2, 7).unwrap();
        assert_eq!(bank.features(), 128);
        let n = bank.rows.len() as f64;
        let mean = bank.rows.sum() / n;
        let var = bank.rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn daff_single_entry() {
        let bank = DaffBank::build(&[1], &[1], (1.0, 1.0)).unwrap();
        assert_eq!(bank.dim(), 1);
        assert!((bank.entries[0].eigenvalue - 2.0 * PI * PI).abs() < 1e-12);
        assert!((bank.entries[0].eigenvalue - 19.7392).abs() < 1e-4);
        let (x, y) = seed(0.5, 0.5);
        let v = bank.encode(&x, &y).unwrap().values[0];
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn daff_kirchhoff_config_has_sixteen_entries() {
        let bank = DaffBank::build(&[1, 2, 3, 4], &[1, -1], (1.0, 1.0)).unwrap();
        assert_eq!(bank.dim(), 16);
        for e in &bank.entries {
            assert_eq!(e.eigenvalue, rectangle_eigenvalue(e.m, e.n, 1.0, 1.0));
        }
        assert!(DaffBank::build(&[], &[1], (1.0, 1.0)).is_err());
        assert!(DaffBank::build(&[1], &[], (1.0, 1.0)).is_err());
        assert!(DaffBank::build(&[5], &[1], (1.0, 1.0)).is_err());
    }

    #[test]
    fn daff_boundary_values() {
        let bank = DaffBank::build(&[1], &[1, 2, 3], (1.0, 2.0)).unwrap();
        let (x, y) = seed(0.0, 0.77);
        assert!(bank.encode(&x, &y).unwrap().values.iter().all(|&v| v == 0.0));
        // sin*cos is free on y = 0.
        let free = DaffBank::build(&[2], &[1], (1.0, 1.0)).unwrap();
        let (x, y) = seed(0.3, 0.0);
        let v = free.encode(&x, &y).unwrap().values[0];
        assert!((v - (PI * 0.3).sin()).abs() < 1e-15);
    }

    #[test]
    fn daff_negative_index_flips_phase() {
        let bank = DaffBank::build(&[1], &[1, -1], (1.0, 1.0)).unwrap();
        let (x, y) = seed(0.3, 0.6);
        let v = bank.encode(&x, &y).unwrap().values;
        // entries: (1,1), (1,-1), (-1,1), (-1,-1)
        assert!((v[0] + v[1]).abs() < 1e-15);
        assert!((v[0] + v[2]).abs() < 1e-15);
        assert!((v[0] - v[3]).abs() < 1e-15);
    }

    #[test]
    fn derivative_checks() {
        let sinsin = DaffBank::build(&[1], &[1], (1.0, 1.0)).unwrap();
        assert!(sinsin.derivative_check(2, Edge::Left).unwrap() <= 1e-12);
        assert!(sinsin.derivative_check(4, Edge::Top).unwrap() <= 1e-12);
        let sincos = DaffBank::build(&[2], &[1], (1.0, 1.0)).unwrap();
        assert!(sincos.derivative_check(1, Edge::Bottom).unwrap() <= 1e-12);
        // First derivative of comp 1 across an edge is not zero.
        assert!(sinsin.derivative_check(1, Edge::Left).unwrap() > 1.0);
        assert!(sinsin.derivative_check(5, Edge::Left).is_err());
    }

    #[test]
    fn identity_passthrough() {
        let (x, y) = seed(0.5, 0.5);
        let enc = identity_encode(&x, &y);
        assert_eq!(enc.len(), 2);
        assert_eq!(enc.values, vec![0.5, 0.5]);
        assert_eq!(enc.jets[0], x);
        assert_eq!(enc.jets[1], y);
    }

    #[test]
    fn value_channel_matches_jets() {
        let enc = Encoder::Daff(DaffBank::build(&[1, 2, 3, 4], &[1, 2], (2.0, 2.0)).unwrap().with_origin([-1.0, -1.0]));
        let (x, y) = seed(0.13, -0.61);
        let full = enc.encode(&x, &y).unwrap();
        let vals = enc.encode_values(0.13, -0.61).unwrap();
        for (v, j) in vals.iter().zip(full.jets.iter()) {
            assert_eq!(v.to_bits(), j.partial(0, 0).to_bits());
        }
    }

    #[test]
    fn bank_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let enc = Encoder::Rff(RffBank::sample(&[1.0, 2.0], 16, 2, 3).unwrap());
        enc.save(&path).unwrap();
        assert_eq!(Encoder::load(&path).unwrap(), enc);
    }
}
