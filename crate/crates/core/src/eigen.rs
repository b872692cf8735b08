//! Finite-difference Laplace eigenmodes on gridded 2-D domains.
//!
//! The lattice has `(n + 2) x (n + 2)` nodes with spacing `h`; a boolean mask
//! marks the unknown nodes, and the outermost ring is never unknown. The
//! discrete operator is the 5-point stencil of `-laplace`:
//!
//! * Dirichlet: diagonal `4/h^2`, neighbours outside the mask are zero.
//! * Neumann: graph Laplacian of the masked nodes (diagonal counts masked
//!   neighbours), which is singular with the constant mode in its kernel.
//!
//! The smallest eigenpairs come from LOBPCG with an explicitly
//! orthonormalised search space `[X, T R, P]`, preconditioned by a banded
//! Cholesky solve of the shifted operator `L + sigma I`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{coeff_index, Jet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

impl BcKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BcKind::Dirichlet => "dirichlet",
            BcKind::Neumann => "neumann",
        }
    }
}

impl std::str::FromStr for BcKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(BcKind::Dirichlet),
            "neumann" => Ok(BcKind::Neumann),
            other => Err(Error::InvalidArgument(format!("unknown boundary kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Interior nodes per side; the lattice has `n + 2` nodes per side.
    pub n: usize,
    pub h: f64,
    /// Row-major (`y` outer, `x` inner) over the full lattice.
    pub mask: Vec<bool>,
    pub bc_kind: BcKind,
    /// Coordinates of lattice node `(0, 0)`.
    pub origin: [f64; 2],
}

impl GridSpec {
    /// `[0, side]^2` with `n` interior nodes per side, `h = side / (n + 1)`.
    pub fn square(n: usize, side: f64, bc_kind: BcKind) -> Result<Self> {
        let w = n + 2;
        let mask = (0..w * w)
            .map(|idx| {
                let (i, j) = (idx % w, idx / w);
                (1..=n).contains(&i) && (1..=n).contains(&j)
            })
            .collect();
        Self::new(n, side / (n + 1) as f64, mask, bc_kind, [0.0, 0.0])
    }

    pub fn unit_square(n: usize, bc_kind: BcKind) -> Result<Self> {
        Self::square(n, 1.0, bc_kind)
    }

    pub fn new(n: usize, h: f64, mask: Vec<bool>, bc_kind: BcKind, origin: [f64; 2]) -> Result<Self> {
        let w = n + 2;
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("grid step must be positive, got {h}")));
        }
        if mask.len() != w * w {
            return Err(Error::Shape(format!("mask has {} entries, lattice has {}", mask.len(), w * w)));
        }
        let on_ring = |idx: usize| {
            let (i, j) = (idx % w, idx / w);
            i == 0 || j == 0 || i == w - 1 || j == w - 1
        };
        if mask.iter().enumerate().any(|(idx, &m)| m && on_ring(idx)) {
            return Err(Error::InvalidArgument("mask may not include the outer lattice ring".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("mask has no interior point".into()));
        }
        Ok(GridSpec {
            n,
            h,
            mask,
            bc_kind,
            origin,
        })
    }

    pub fn width(&self) -> usize {
        self.n + 2
    }

    /// Lattice indices of the unknowns, in unknown order.
    pub fn unknowns(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(idx, _)| (idx % w, idx / w))
            .collect()
    }

    pub fn dimension(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn in_mask(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.width() + i]
    }

    pub fn node_coords(&self, i: usize, j: usize) -> (f64, f64) {
        (self.origin[0] + i as f64 * self.h, self.origin[1] + j as f64 * self.h)
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[lo..hi]
            .iter()
            .position(|&cc| cc == c)
            .map_or(0.0, |k| self.values[lo + k])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.dim) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    /// Max `|A[r,c] - A[c,r]|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                worst = worst.max((self.values[k] - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                bw = bw.max(r.abs_diff(self.col_idx[k]));
            }
        }
        bw
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.col_idx[k])] = self.values[k];
            }
        }
        d
    }
}

/// 5-point discretisation of `-laplace` on the masked unknowns.
pub fn build_laplacian(grid: &GridSpec) -> Result<CsrMatrix> {
    let w = grid.width();
    let unknowns = grid.unknowns();
    if unknowns.is_empty() {
        return Err(Error::InvalidArgument("degenerate mask".into()));
    }
    let mut number = vec![usize::MAX; w * w];
    for (k, &(i, j)) in unknowns.iter().enumerate() {
        number[j * w + i] = k;
    }
    let inv_h2 = 1.0 / (grid.h * grid.h);
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::with_capacity(unknowns.len() * 5);
    let mut values = Vec::with_capacity(unknowns.len() * 5);
    for &(i, j) in &unknowns {
        let neighbours = [(i, j - 1), (i - 1, j), (i + 1, j), (i, j + 1)];
        let inside: Vec<usize> = neighbours
            .iter()
            .filter(|&&(a, b)| grid.in_mask(a, b))
            .map(|&(a, b)| number[b * w + a])
            .collect();
        let diag = match grid.bc_kind {
            BcKind::Dirichlet => 4.0 * inv_h2,
            BcKind::Neumann => inside.len() as f64 * inv_h2,
        };
        let me = number[j * w + i];
        let mut row: Vec<(usize, f64)> = inside.iter().map(|&c| (c, -inv_h2)).collect();
        row.push((me, diag));
        row.sort_by_key(|e| e.0);
        for (c, v) in row {
            col_idx.push(c);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix {
        dim: unknowns.len(),
        row_ptr,
        col_idx,
        values,
    })
}

/// Closed-form eigenvalue `(2/h^2)(2 - cos(m pi h) - cos(n pi h))` of the
/// Dirichlet 5-point Laplacian on a square with spacing `h`.
pub fn dirichlet_square_eigenvalue(m: usize, n: usize, h: f64) -> f64 {
    let pi = std::f64::consts::PI;
    (2.0 / (h * h)) * (2.0 - (m as f64 * pi * h).cos() - (n as f64 * pi * h).cos())
}

/// Cholesky factor of a symmetric positive definite banded matrix, stored
/// as `lower[r][d] = L[r, r - d]`.
struct BandedCholesky {
    dim: usize,
    bw: usize,
    lower: Vec<f64>,
}

impl BandedCholesky {
    fn factor(a: &CsrMatrix, shift: f64) -> Result<Self> {
        let dim = a.dim;
        let bw = a.bandwidth();
        let stride = bw + 1;
        let mut l = vec![0.0; dim * stride];
        for r in 0..dim {
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                let c = a.col_idx[k];
                if c <= r {
                    l[r * stride + (r - c)] = a.values[k] + if c == r { shift } else { 0.0 };
                }
            }
        }
        for j in 0..dim {
            // Diagonal.
            let mut d = l[j * stride];
            for k in j.saturating_sub(bw)..j {
                let v = l[j * stride + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) {
                return Err(Error::NonFinite("shifted Laplacian is not positive definite".into()));
            }
            let d = d.sqrt();
            l[j * stride] = d;
            // Column below the diagonal.
            for i in (j + 1)..=(j + bw).min(dim - 1) {
                let mut v = l[i * stride + (i - j)];
                for k in i.saturating_sub(bw)..j {
                    v -= l[i * stride + (i - k)] * l[j * stride + (j - k)];
                }
                l[i * stride + (i - j)] = v / d;
            }
        }
        Ok(BandedCholesky { dim, bw, lower: l })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let stride = self.bw + 1;
        for i in 0..self.dim {
            let mut v = x[i];
            for k in i.saturating_sub(self.bw)..i {
                v -= self.lower[i * stride + (i - k)] * x[k];
            }
            x[i] = v / self.lower[i * stride];
        }
        for i in (0..self.dim).rev() {
            let mut v = x[i];
            for k in (i + 1)..=(i + self.bw).min(self.dim - 1) {
                v -= self.lower[k * stride + (k - i)] * x[k];
            }
            x[i] = v / self.lower[i * stride];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenMode {
    pub eigenvalue: f64,
    /// Unit Euclidean norm, first non-negligible entry positive.
    pub vector: Vec<f64>,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Problems at most this large are solved densely.
    pub dense_limit: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tolerance: 1e-8,
            max_iterations: 300,
            seed: 0x5eed,
            dense_limit: 400,
        }
    }
}

/// The `k` smallest eigenpairs of a symmetric positive semi-definite
/// sparse matrix, ascending.
pub fn smallest_eigenpairs(l: &CsrMatrix, k: usize, opts: &EigenOptions) -> Result<Vec<EigenMode>> {
    let n = l.dim;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("requested {k} modes of a {n}-dimensional operator")));
    }
    let block = (k + (k / 2).max(4)).min(n);
    let mut modes = if n <= opts.dense_limit || 3 * block >= n {
        dense_eigenpairs(l, k)
    } else {
        lobpcg(l, k, block, opts)?
    };
    for (idx, m) in modes.iter_mut().enumerate() {
        m.index = idx;
        fix_sign(&mut m.vector);
    }
    Ok(modes)
}

fn dense_eigenpairs(l: &CsrMatrix, k: usize) -> Vec<EigenMode> {
    let eig = SymmetricEigen::new(l.to_dense());
    let mut order: Vec<usize> = (0..l.dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order
        .into_iter()
        .take(k)
        .map(|c| EigenMode {
            eigenvalue: eig.eigenvalues[c],
            vector: eig.eigenvectors.column(c).iter().copied().collect(),
            index: 0,
        })
        .collect()
}

fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Appends `cand` to the orthonormal `basis` after two Gram-Schmidt passes,
/// unless it is numerically dependent.
fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut cand: Vec<f64>) -> bool {
    let norm0 = dot(&cand, &cand).sqrt();
    if norm0 == 0.0 || !norm0.is_finite() {
        return false;
    }
    for _ in 0..2 {
        for q in basis.iter() {
            let c = dot(q, &cand);
            axpy(-c, q, &mut cand);
        }
    }
    let norm = dot(&cand, &cand).sqrt();
    if norm <= 1e-10 * norm0 {
        return false;
    }
    cand.iter_mut().for_each(|v| *v /= norm);
    basis.push(cand);
    true
}

fn lobpcg(l: &CsrMatrix, k: usize, block: usize, opts: &EigenOptions) -> Result<Vec<EigenMode>> {
    let n = l.dim;
    // Shift keeps the factorisation definite for singular (Neumann) operators.
    let diag_max = (0..n).map(|r| l.get(r, r)).fold(0.0f64, f64::max);
    let shift = 1e-3 * diag_max.max(1.0) / n as f64 + 1.0;
    let precond = BandedCholesky::factor(l, shift)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(block);
    while x.len() < block {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        push_orthonormal(&mut x, v);
    }
    let mut p: Vec<Vec<f64>> = Vec::new();
    let mut lambdas = vec![0.0; block];
    let mut worst = f64::INFINITY;

    let apply = |v: &[f64]| {
        let mut out = vec![0.0; n];
        l.matvec(v, &mut out);
        out
    };

    for iter in 0..opts.max_iterations {
        // Rayleigh-Ritz over span [X, T R, P].
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3 * block);
        for v in &x {
            push_orthonormal(&mut basis, v.clone());
        }
        if iter > 0 {
            let ax: Vec<Vec<f64>> = x.iter().map(|v| apply(v)).collect();
            for (j, v) in x.iter().enumerate() {
                let mut r = ax[j].clone();
                axpy(-lambdas[j], v, &mut r);
                precond.solve_in_place(&mut r);
                push_orthonormal(&mut basis, r);
            }
            for v in &p {
                push_orthonormal(&mut basis, v.clone());
            }
        }
        let s = basis.len();
        let abasis: Vec<Vec<f64>> = basis.iter().map(|v| apply(v)).collect();
        let mut g = DMatrix::zeros(s, s);
        for a in 0..s {
            for b in a..s {
                let v = 0.5 * (dot(&basis[a], &abasis[b]) + dot(&basis[b], &abasis[a]));
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(g);
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let keep = block.min(s);
        let x_count = x.len();

        let mut new_x = Vec::with_capacity(keep);
        let mut new_ax = Vec::with_capacity(keep);
        let mut new_p = Vec::with_capacity(keep);
        for &c in order.iter().take(keep) {
            let y = eig.eigenvectors.column(c);
            let mut v = vec![0.0; n];
            let mut av = vec![0.0; n];
            let mut pv = vec![0.0; n];
            for (a, coef) in y.iter().enumerate() {
                axpy(*coef, &basis[a], &mut v);
                axpy(*coef, &abasis[a], &mut av);
                if a >= x_count {
                    axpy(*coef, &basis[a], &mut pv);
                }
            }
            new_x.push(v);
            new_ax.push(av);
            new_p.push(pv);
        }
        lambdas = order.iter().take(keep).map(|&c| eig.eigenvalues[c]).collect();
        x = new_x;
        p = if iter > 0 { new_p } else { Vec::new() };

        worst = 0.0;
        for j in 0..k {
            let mut r = new_ax[j].clone();
            axpy(-lambdas[j], &x[j], &mut r);
            let res = dot(&r, &r).sqrt() / dot(&x[j], &x[j]).sqrt();
            worst = worst.max(res);
        }
        if worst <= opts.tolerance {
            let mut modes = Vec::with_capacity(k);
            for j in 0..k {
                let mut v = x[j].clone();
                let nv = dot(&v, &v).sqrt();
                v.iter_mut().for_each(|e| *e /= nv);
                modes.push(EigenMode {
                    eigenvalue: lambdas[j],
                    vector: v,
                    index: j,
                });
            }
            log::debug!("lobpcg converged after {} iterations (residual {worst:e})", iter + 1);
            return Ok(modes);
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual: worst,
    })
}

/// `||L v - lambda v||` for a computed mode.
pub fn residual_norm(l: &CsrMatrix, mode: &EigenMode) -> f64 {
    let mut lv = vec![0.0; l.dim];
    l.matvec(&mode.vector, &mut lv);
    axpy(-mode.eigenvalue, &mode.vector, &mut lv);
    dot(&lv, &lv).sqrt()
}

// Keys cubic convolution kernel (a = -1/2) and its first two derivatives.
const KEYS_A: f64 = -0.5;

#[cfg(test)]
fn keys(s: f64) -> [f64; 3] {
    let t = s.abs();
    if t < 2.0 {
        keys_piece(s, t > 1.0)
    } else {
        [0.0; 3]
    }
}

fn keys_piece(s: f64, outer: bool) -> [f64; 3] {
    let t = s.abs();
    let sign = if s < 0.0 { -1.0 } else { 1.0 };
    let a = KEYS_A;
    if outer {
        [
            a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a,
            sign * (3.0 * a * t * t - 10.0 * a * t + 8.0 * a),
            6.0 * a * t - 10.0 * a,
        ]
    } else {
        [
            (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0,
            sign * (3.0 * (a + 2.0) * t * t - 2.0 * (a + 3.0) * t),
            6.0 * (a + 2.0) * t - 2.0 * (a + 3.0),
        ]
    }
}

/// Weights of the four stencil nodes `c-1 ..= c+2` at fraction `f` of the
/// cell `[c, c+1]`. The piece is chosen by stencil position so that second
/// derivatives on a node are the cell polynomial's, not a mix of one-sided
/// limits.
fn keys_cell(f: f64) -> [[f64; 3]; 4] {
    [
        keys_piece(f + 1.0, true),
        keys_piece(f, false),
        keys_piece(f - 1.0, false),
        keys_piece(f - 2.0, true),
    ]
}

/// Numerically extracted DaFFs: eigenmodes on a lattice, evaluated off-grid
/// by bicubic convolution. Derivatives up to order 2 only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericDaff {
    pub grid: GridSpec,
    pub eigenvalues: Vec<f64>,
    /// Per mode, full-lattice node values scaled to unit max-abs.
    pub nodes: Vec<Vec<f64>>,
}

impl NumericDaff {
    pub fn from_modes(modes: &[EigenMode], grid: &GridSpec) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidArgument("no modes to build a numeric DaFF bank".into()));
        }
        let w = grid.width();
        let unknowns = grid.unknowns();
        let mut nodes = Vec::with_capacity(modes.len());
        for m in modes {
            if m.vector.len() != unknowns.len() {
                return Err(Error::Shape(format!(
                    "mode of length {} for a grid with {} unknowns",
                    m.vector.len(),
                    unknowns.len()
                )));
            }
            let scale = m.vector.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
            let mut lattice = vec![0.0; w * w];
            for (&(i, j), v) in unknowns.iter().zip(&m.vector) {
                lattice[j * w + i] = v * scale;
            }
            if grid.bc_kind == BcKind::Neumann {
                // Outside nodes copy the mean of their masked neighbours.
                let snapshot = lattice.clone();
                for j in 0..w {
                    for i in 0..w {
                        if grid.in_mask(i, j) {
                            continue;
                        }
                        let mut sum = 0.0;
                        let mut cnt = 0;
                        for (a, b) in [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)] {
                            if a < w && b < w && grid.in_mask(a, b) {
                                sum += snapshot[b * w + a];
                                cnt += 1;
                            }
                        }
                        if cnt > 0 {
                            lattice[j * w + i] = sum / cnt as f64;
                        }
                    }
                }
            }
            nodes.push(lattice);
        }
        Ok(NumericDaff {
            grid: grid.clone(),
            eigenvalues: modes.iter().map(|m| m.eigenvalue).collect(),
            nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    // Node value with reflection across the lattice border.
    fn node(&self, mode: usize, i: isize, j: isize) -> f64 {
        let w = self.grid.width() as isize;
        let odd = self.grid.bc_kind == BcKind::Dirichlet;
        let mut sign = 1.0;
        let mut reflect = |k: isize| {
            if k < 0 {
                if odd {
                    sign = -sign;
                }
                -k
            } else if k >= w {
                if odd {
                    sign = -sign;
                }
                2 * (w - 1) - k
            } else {
                k
            }
        };
        let (ii, jj) = (reflect(i), reflect(j));
        sign * self.nodes[mode][(jj * w + ii) as usize]
    }

    fn lattice_coord(&self, v: f64, axis: usize) -> f64 {
        let u = (v - self.grid.origin[axis]) / self.grid.h;
        let r = u.round();
        if (u - r).abs() < 1e-9 {
            r
        } else {
            u
        }
    }

    /// Local Taylor coefficients (order 2 layout) of every mode at a point.
    fn local_polynomials(&self, x: f64, y: f64) -> Result<Vec<[f64; 6]>> {
        let w = self.grid.width();
        let (ux, uy) = (self.lattice_coord(x, 0), self.lattice_coord(y, 1));
        let top = (w - 1) as f64;
        let outside = || Error::OutsideDomain {
            x,
            y,
            what: "numeric DaFF lattice".into(),
        };
        if !(0.0..=top).contains(&ux) || !(0.0..=top).contains(&uy) {
            return Err(outside());
        }
        let ci = (ux.floor() as usize).min(w - 2);
        let cj = (uy.floor() as usize).min(w - 2);
        let corners = [(ci, cj), (ci + 1, cj), (ci, cj + 1), (ci + 1, cj + 1)];
        if !corners.iter().any(|&(i, j)| self.grid.in_mask(i, j)) {
            return Err(outside());
        }
        let h = self.grid.h;
        let wx = keys_cell(ux - ci as f64);
        let wy = keys_cell(uy - cj as f64);
        let mut out = Vec::with_capacity(self.dim());
        for mode in 0..self.dim() {
            let mut p = [0.0; 6];
            for (b, ky) in wy.iter().enumerate() {
                for (a, kx) in wx.iter().enumerate() {
                    let v = self.node(mode, ci as isize - 1 + a as isize, cj as isize - 1 + b as isize);
                    if v == 0.0 {
                        continue;
                    }
                    p[0] += v * kx[0] * ky[0];
                    p[coeff_index(1, 0)] += v * kx[1] * ky[0] / h;
                    p[coeff_index(0, 1)] += v * kx[0] * ky[1] / h;
                    p[coeff_index(2, 0)] += 0.5 * v * kx[2] * ky[0] / (h * h);
                    p[coeff_index(1, 1)] += v * kx[1] * ky[1] / (h * h);
                    p[coeff_index(0, 2)] += 0.5 * v * kx[0] * ky[2] / (h * h);
                }
            }
            out.push(p);
        }
        Ok(out)
    }

    pub fn encode(&self, x: &Jet, y: &Jet) -> Result<crate::features::Encoding> {
        if x.order() > 2 {
            return Err(Error::UnsupportedOrder(x.order()));
        }
        let (x0, y0) = (x.value(), y.value());
        let polys = self.local_polynomials(x0, y0)?;
        let jets = polys
            .iter()
            .map(|p| Jet::eval_local_polynomial(p, x0, y0, x, y))
            .collect::<Result<Vec<_>>>()?;
        let values = jets.iter().map(Jet::value).collect();
        Ok(crate::features::Encoding {
            values,
            jets,
            bank_kind: crate::features::BankKind::DaffNumeric,
        })
    }
}

/// Modes plus the grid they live on, as exchanged through mode files.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeFile {
    pub grid: GridSpec,
    pub modes: Vec<EigenMode>,
}

impl ModeFile {
    /// Plain-text layout: `n`, `h`, `bc`, `origin` header lines, a `lambda`
    /// line, the mask as `n+2` rows of 0/1, then each mode as `n+2` rows of
    /// lattice values (row-major, `y` outer).
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let w = g.width();
        let mut s = String::new();
        let _ = writeln!(s, "# laplace eigenmodes");
        let _ = writeln!(s, "n {}", g.n);
        let _ = writeln!(s, "h {:e}", g.h);
        let _ = writeln!(s, "bc {}", g.bc_kind.as_str());
        let _ = writeln!(s, "origin {:e} {:e}", g.origin[0], g.origin[1]);
        let _ = writeln!(s, "modes {}", self.modes.len());
        let lambdas: Vec<String> = self.modes.iter().map(|m| format!("{:e}", m.eigenvalue)).collect();
        let _ = writeln!(s, "lambda {}", lambdas.join(" "));
        let _ = writeln!(s, "mask");
        for j in 0..w {
            let row: Vec<&str> = (0..w).map(|i| if g.in_mask(i, j) { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let unknowns = g.unknowns();
        for (k, m) in self.modes.iter().enumerate() {
            let mut lattice = vec![0.0; w * w];
            for (&(i, j), v) in unknowns.iter().zip(&m.vector) {
                lattice[j * w + i] = *v;
            }
            let _ = writeln!(s, "mode {k}");
            for j in 0..w {
                let row: Vec<String> = (0..w).map(|i| format!("{:e}", lattice[j * w + i])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            path: "<mode file>".into(),
            message: m.to_string(),
        };
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e.to_string()));
        let n: usize = field("n")?[0].parse().map_err(|_| bad("bad n"))?;
        let h = num(&field("h")?[0])?;
        let bc: BcKind = field("bc")?[0].parse()?;
        let o = field("origin")?;
        let origin = [num(&o[0])?, num(&o[1])?];
        let count: usize = field("modes")?[0].parse().map_err(|_| bad("bad mode count"))?;
        let lambdas = field("lambda")?.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        if lambdas.len() != count {
            return Err(bad("lambda count does not match mode count"));
        }
        field("mask")?;
        let w = n + 2;
        let mut mask = Vec::with_capacity(w * w);
        for _ in 0..w {
            let row = lines.next().ok_or_else(|| bad("truncated mask"))?;
            for t in row.split_whitespace() {
                mask.push(t == "1");
            }
        }
        let grid = GridSpec::new(n, h, mask, bc, origin)?;
        let unknowns = grid.unknowns();
        let mut modes = Vec::with_capacity(count);
        for (k, &eigenvalue) in lambdas.iter().enumerate() {
            let header = lines.next().ok_or_else(|| bad("truncated modes"))?;
            if header.trim() != format!("mode {k}") {
                return Err(bad(&format!("expected `mode {k}`")));
            }
            let mut lattice = Vec::with_capacity(w * w);
            for _ in 0..w {
                let row = lines.next().ok_or_else(|| bad("truncated mode values"))?;
                for t in row.split_whitespace() {
                    lattice.push(num(t)?);
                }
            }
            if lattice.len() != w * w {
                return Err(bad("mode row length"));
            }
            let vector = unknowns.iter().map(|&(i, j)| lattice[j * w + i]).collect();
            modes.push(EigenMode {
                eigenvalue,
                vector,
                index: k,
            });
        }
        Ok(ModeFile { grid, modes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.into(),
                message,
            },
            other => other,
        })
    }
}
