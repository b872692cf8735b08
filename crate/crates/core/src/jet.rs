//! Truncated bivariate Taylor jets.
//!
//! A [`Jet`] of order `K` stores the Taylor coefficients `c[a,b]` of a scalar
//! function of `(x, y)` around a point, for every multi-index with
//! `a + b <= K`. Partial derivatives are recovered as `c[a,b] * a! * b!`.
//!
//! Coefficients are laid out by total degree, and within one degree by
//! ascending `b`: `(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...`. A jet of
//! order `K` is therefore a prefix of the order-4 layout, which lets the
//! batched kernels in [`crate::tape`] share the same tables.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported total derivative order.
pub const MAX_ORDER: usize = 4;
/// Coefficient count of an order-4 jet.
pub const MAX_COEFFS: usize = 15;

const MULTI_INDEX: [(usize, usize); MAX_COEFFS] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (4, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 4),
];

const FACTORIAL: [f64; 7] = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0];

/// Number of coefficients of a jet of the given order.
pub const fn coeff_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Position of multi-index `(a, b)` in the coefficient layout.
pub const fn coeff_index(a: usize, b: usize) -> usize {
    let s = a + b;
    s * (s + 1) / 2 + b
}

/// Multi-index stored at coefficient position `i`.
pub fn multi_index(i: usize) -> (usize, usize) {
    MULTI_INDEX[i]
}

/// `a! * b!`, the factor converting a Taylor coefficient into a partial.
pub fn partial_factor(a: usize, b: usize) -> f64 {
    FACTORIAL[a] * FACTORIAL[b]
}

/// `(i, j, k)` triples with `coeff[k] += p[i] * q[j]` for the truncated
/// product at the given order.
pub(crate) fn product_table(order: usize) -> &'static [(usize, usize, usize)] {
    static TABLES: OnceLock<Vec<Vec<(usize, usize, usize)>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| {
        (0..=MAX_ORDER)
            .map(|k| {
                let n = coeff_count(k);
                let mut t = Vec::new();
                for i in 0..n {
                    let (ai, bi) = MULTI_INDEX[i];
                    for j in 0..n {
                        let (aj, bj) = MULTI_INDEX[j];
                        if ai + bi + aj + bj <= k {
                            t.push((i, j, coeff_index(ai + aj, bi + bj)));
                        }
                    }
                }
                t
            })
            .collect()
    });
    &tables[order]
}

/// Truncated product `out = p * q` on raw coefficient slices.
pub(crate) fn mul_slices(order: usize, p: &[f64], q: &[f64], out: &mut [f64]) {
    let n = coeff_count(order);
    out[..n].iter_mut().for_each(|v| *v = 0.0);
    for &(i, j, k) in product_table(order) {
        out[k] += p[i] * q[j];
    }
}

/// Scalar functions that can be composed with a jet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarFn {
    Tanh,
    Sin,
    Cos,
    Exp,
    Identity,
}

impl ScalarFn {
    /// `f(x0), f'(x0), ..., f^(n)(x0)` written into `out[..=n]`.
    pub fn derivatives(self, x0: f64, n: usize, out: &mut [f64]) {
        debug_assert!(n <= 6 && out.len() > n);
        match self {
            ScalarFn::Tanh => tanh_derivatives(x0, n, out),
            ScalarFn::Sin | ScalarFn::Cos => {
                let (s, c) = x0.sin_cos();
                let cycle = if self == ScalarFn::Sin {
                    [s, c, -s, -c]
                } else {
                    [c, -s, -c, s]
                };
                for (k, v) in out.iter_mut().enumerate().take(n + 1) {
                    *v = cycle[k % 4];
                }
            }
            ScalarFn::Exp => {
                let e = x0.exp();
                out[..=n].iter_mut().for_each(|v| *v = e);
            }
            ScalarFn::Identity => {
                out[..=n].iter_mut().for_each(|v| *v = 0.0);
                out[0] = x0;
                if n >= 1 {
                    out[1] = 1.0;
                }
            }
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ScalarFn::Tanh => x.tanh(),
            ScalarFn::Sin => x.sin(),
            ScalarFn::Cos => x.cos(),
            ScalarFn::Exp => x.exp(),
            ScalarFn::Identity => x,
        }
    }
}

// Derivatives of tanh as polynomials in t = tanh(x):
// P_0 = t, P_{k+1}(t) = P_k'(t) (1 - t^2).
fn tanh_derivatives(x0: f64, n: usize, out: &mut [f64]) {
    const P: [[f64; 8]; 7] = [
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0],
        [-2.0, 0.0, 8.0, 0.0, -6.0, 0.0, 0.0, 0.0],
        [0.0, 16.0, 0.0, -40.0, 0.0, 24.0, 0.0, 0.0],
        [16.0, 0.0, -136.0, 0.0, 240.0, 0.0, -120.0, 0.0],
        [0.0, -272.0, 0.0, 1232.0, 0.0, -1680.0, 0.0, 720.0],
    ];
    let t = x0.tanh();
    out[0] = t;
    for k in 1..=n {
        let poly = &P[k];
        let mut acc = 0.0;
        for c in poly.iter().rev() {
            acc = acc * t + c;
        }
        out[k] = acc;
    }
}

/// Composition kernel shared by [`Jet::compose`] and the batched tape op.
///
/// `g` holds the input coefficients. On return `out` holds the jet of
/// `f(g)` and, when requested, `deriv` holds the jet of `f'(g)`, which is
/// the tangent map of the composition (the adjoint of multiplication by it
/// is the backward pass).
pub(crate) fn compose_slices(
    f: ScalarFn,
    order: usize,
    g: &[f64],
    out: &mut [f64],
    deriv: Option<&mut [f64]>,
) {
    let n = coeff_count(order);
    let mut d = [0.0; 7];
    f.derivatives(g[0], order + 1, &mut d);

    // Powers of the perturbation delta = g - g0.
    let mut powers = [[0.0; MAX_COEFFS]; MAX_ORDER + 1];
    powers[1][..n].copy_from_slice(&g[..n]);
    powers[1][0] = 0.0;
    for k in 2..=order {
        let (lo, hi) = powers.split_at_mut(k);
        mul_slices(order, &lo[k - 1], &lo[1], &mut hi[0]);
    }

    out[..n].iter_mut().for_each(|v| *v = 0.0);
    out[0] = d[0];
    for (k, pk) in powers.iter().enumerate().take(order + 1).skip(1) {
        let a = d[k] / FACTORIAL[k];
        for c in 1..n {
            out[c] += a * pk[c];
        }
    }
    if let Some(deriv) = deriv {
        deriv[..n].iter_mut().for_each(|v| *v = 0.0);
        deriv[0] = d[1];
        for (k, pk) in powers.iter().enumerate().take(order + 1).skip(1) {
            let a = d[k + 1] / FACTORIAL[k];
            for c in 1..n {
                deriv[c] += a * pk[c];
            }
        }
    }
}

/// Binary operations accepted by [`Jet::arith`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JetOp {
    Add,
    Sub,
    Mul,
    Scale,
}

/// Right-hand operand of [`Jet::arith`].
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Jet(&'a Jet),
    Real(f64),
}

/// Truncated bivariate Taylor expansion up to total order 4.
#[derive(Clone, Copy, PartialEq)]
pub struct Jet {
    order: usize,
    coeffs: [f64; MAX_COEFFS],
}

impl fmt::Debug for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Jet")
            .field("order", &self.order)
            .field("coeffs", &self.coeffs())
            .finish()
    }
}

fn check_order(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::UnsupportedOrder(order));
    }
    Ok(())
}

impl Jet {
    /// Jet of the constant function `value`.
    pub fn constant(order: usize, value: f64) -> Self {
        assert!(order <= MAX_ORDER, "jet order {order} exceeds {MAX_ORDER}");
        let mut coeffs = [0.0; MAX_COEFFS];
        coeffs[0] = value;
        Jet { order, coeffs }
    }

    pub fn zero(order: usize) -> Self {
        Self::constant(order, 0.0)
    }

    /// Builds a jet from coefficients in layout order. Missing trailing
    /// coefficients are zero.
    pub fn from_coeffs(order: usize, coeffs: &[f64]) -> Result<Self> {
        check_order(order)?;
        let n = coeff_count(order);
        if coeffs.len() > n {
            return Err(Error::Shape(format!(
                "{} coefficients for an order-{order} jet (max {n})",
                coeffs.len()
            )));
        }
        let mut c = [0.0; MAX_COEFFS];
        c[..coeffs.len()].copy_from_slice(coeffs);
        Ok(Jet { order, coeffs: c })
    }

    /// Coordinate jets `(x, y)` at a point. Only orders 2 and 4 are
    /// accepted here; the PDE residuals never need anything else.
    pub fn seed(x: f64, y: f64, order: usize) -> Result<(Jet, Jet)> {
        if order != 2 && order != 4 {
            return Err(Error::UnsupportedOrder(order));
        }
        Ok(Self::seed_any(x, y, order))
    }

    /// Like [`Jet::seed`] but accepts any order up to [`MAX_ORDER`].
    pub(crate) fn seed_any(x: f64, y: f64, order: usize) -> (Jet, Jet) {
        let mut xj = Jet::constant(order, x);
        let mut yj = Jet::constant(order, y);
        if order >= 1 {
            xj.coeffs[1] = 1.0;
            yj.coeffs[2] = 1.0;
        }
        (xj, yj)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs[..coeff_count(self.order)]
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Taylor coefficient of `x^a y^b`; zero above the jet's order.
    pub fn coeff(&self, a: usize, b: usize) -> f64 {
        if a + b > self.order {
            0.0
        } else {
            self.coeffs[coeff_index(a, b)]
        }
    }

    /// `d^(a+b) f / dx^a dy^b` at the expansion point.
    pub fn partial(&self, a: usize, b: usize) -> f64 {
        self.coeff(a, b) * partial_factor(a, b)
    }

    pub fn laplacian(&self) -> f64 {
        self.partial(2, 0) + self.partial(0, 2)
    }

    pub fn biharmonic(&self) -> f64 {
        self.partial(4, 0) + 2.0 * self.partial(2, 2) + self.partial(0, 4)
    }

    /// Drops every coefficient above `order`.
    pub fn truncate(&self, order: usize) -> Jet {
        let order = order.min(self.order);
        let mut out = Jet::zero(order);
        let n = coeff_count(order);
        out.coeffs[..n].copy_from_slice(&self.coeffs[..n]);
        out
    }

    fn same_order(&self, other: &Jet) -> Result<()> {
        if self.order != other.order {
            return Err(Error::OrderMismatch(self.order, other.order));
        }
        Ok(())
    }

    /// Checked arithmetic. `Scale` expects a real operand; the others
    /// accept either a jet or a real (promoted to a constant jet).
    pub fn arith(op: JetOp, lhs: &Jet, rhs: Operand<'_>) -> Result<Jet> {
        let rhs_jet = match rhs {
            Operand::Jet(j) => {
                if op == JetOp::Scale {
                    return Err(Error::Shape("scale expects a real operand".into()));
                }
                lhs.same_order(j)?;
                *j
            }
            Operand::Real(s) => {
                if op == JetOp::Scale || op == JetOp::Mul {
                    return Ok(lhs.scale(s));
                }
                Jet::constant(lhs.order, s)
            }
        };
        Ok(match op {
            JetOp::Add => lhs.add_jet(&rhs_jet),
            JetOp::Sub => lhs.sub_jet(&rhs_jet),
            JetOp::Mul => lhs.mul_jet(&rhs_jet),
            JetOp::Scale => unreachable!(),
        })
    }

    fn add_jet(&self, rhs: &Jet) -> Jet {
        let mut out = *self;
        for (o, r) in out.coeffs.iter_mut().zip(rhs.coeffs.iter()) {
            *o += r;
        }
        out
    }

    fn sub_jet(&self, rhs: &Jet) -> Jet {
        let mut out = *self;
        for (o, r) in out.coeffs.iter_mut().zip(rhs.coeffs.iter()) {
            *o -= r;
        }
        out
    }

    fn mul_jet(&self, rhs: &Jet) -> Jet {
        let mut out = Jet::zero(self.order);
        mul_slices(self.order, &self.coeffs, &rhs.coeffs, &mut out.coeffs);
        out
    }

    pub fn scale(&self, s: f64) -> Jet {
        let mut out = *self;
        let n = coeff_count(self.order);
        out.coeffs[..n].iter_mut().for_each(|c| *c *= s);
        out
    }

    /// Adds `s * rhs` in place (orders must match).
    pub fn add_scaled(&mut self, s: f64, rhs: &Jet) {
        debug_assert_eq!(self.order, rhs.order);
        let n = coeff_count(self.order);
        for (o, r) in self.coeffs[..n].iter_mut().zip(rhs.coeffs[..n].iter()) {
            *o += s * r;
        }
    }

    /// Truncated expansion of `f(self)`.
    pub fn compose(&self, f: ScalarFn) -> Jet {
        let mut out = Jet::zero(self.order);
        compose_slices(f, self.order, &self.coeffs, &mut out.coeffs, None);
        out
    }

    pub fn tanh(&self) -> Jet {
        self.compose(ScalarFn::Tanh)
    }

    pub fn sin(&self) -> Jet {
        self.compose(ScalarFn::Sin)
    }

    pub fn cos(&self) -> Jet {
        self.compose(ScalarFn::Cos)
    }

    pub fn exp(&self) -> Jet {
        self.compose(ScalarFn::Exp)
    }

    /// Evaluates a local polynomial `sum p[a,b] dx^a dy^b` (coefficients in
    /// jet layout, up to this jet's order) at the jets `x`, `y`, expanded
    /// about `(x0, y0)`.
    pub fn eval_local_polynomial(poly: &[f64], x0: f64, y0: f64, x: &Jet, y: &Jet) -> Result<Jet> {
        x.same_order(y)?;
        let order = x.order;
        let n = coeff_count(order);
        let dx = x.sub_jet(&Jet::constant(order, x0));
        let dy = y.sub_jet(&Jet::constant(order, y0));
        let mut xp = vec![Jet::constant(order, 1.0)];
        let mut yp = vec![Jet::constant(order, 1.0)];
        for k in 1..=order {
            xp.push(xp[k - 1].mul_jet(&dx));
            yp.push(yp[k - 1].mul_jet(&dy));
        }
        let mut out = Jet::zero(order);
        for (i, &p) in poly.iter().enumerate().take(n) {
            if p == 0.0 {
                continue;
            }
            let (a, b) = MULTI_INDEX[i];
            out.add_scaled(p, &xp[a].mul_jet(&yp[b]));
        }
        Ok(out)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        assert_eq!(self.order, rhs.order, "jet order mismatch");
        self.add_jet(&rhs)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        assert_eq!(self.order, rhs.order, "jet order mismatch");
        self.sub_jet(&rhs)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        assert_eq!(self.order, rhs.order, "jet order mismatch");
        self.mul_jet(&rhs)
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        self.scale(rhs)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}
