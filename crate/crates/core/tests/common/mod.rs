#![allow(dead_code)]

use daff_pinn::jet::{JetOp, Operand, ScalarFn};
use daff_pinn::Jet;
use rand::Rng;

/// Random expression over `x` and `y` built from the supported primitives.
#[derive(Clone, Debug)]
pub enum Expr {
    X,
    Y,
    Const(f64),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Scale(Box<Expr>, f64),
    Map(ScalarFn, Box<Expr>),
}

pub fn random_expr<R: Rng>(rng: &mut R, depth: usize) -> Expr {
    if depth == 0 || rng.random_bool(0.15) {
        return match rng.random_range(0..5) {
            0 | 1 => Expr::X,
            2 | 3 => Expr::Y,
            _ => Expr::Const(rng.random_range(-1.0..1.0)),
        };
    }
    let sub = |rng: &mut R| Box::new(random_expr(rng, depth - 1));
    match rng.random_range(0..8) {
        0 => Expr::Add(sub(rng), sub(rng)),
        1 => Expr::Sub(sub(rng), sub(rng)),
        2 => Expr::Mul(sub(rng), sub(rng)),
        3 => Expr::Scale(sub(rng), rng.random_range(-1.5..1.5)),
        4 => Expr::Map(ScalarFn::Tanh, sub(rng)),
        5 => Expr::Map(ScalarFn::Sin, sub(rng)),
        6 => Expr::Map(ScalarFn::Cos, sub(rng)),
        _ => Expr::Map(ScalarFn::Exp, Box::new(Expr::Scale(sub(rng), 0.5))),
    }
}

impl Expr {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Expr::X => x,
            Expr::Y => y,
            Expr::Const(c) => *c,
            Expr::Add(a, b) => a.eval(x, y) + b.eval(x, y),
            Expr::Sub(a, b) => a.eval(x, y) - b.eval(x, y),
            Expr::Mul(a, b) => a.eval(x, y) * b.eval(x, y),
            Expr::Scale(a, s) => a.eval(x, y) * s,
            Expr::Map(f, a) => f.eval(a.eval(x, y)),
        }
    }

    pub fn jet(&self, x: &Jet, y: &Jet) -> Jet {
        let order = x.order();
        match self {
            Expr::X => *x,
            Expr::Y => *y,
            Expr::Const(c) => Jet::constant(order, *c),
            Expr::Add(a, b) => Jet::arith(JetOp::Add, &a.jet(x, y), Operand::Jet(&b.jet(x, y))).unwrap(),
            Expr::Sub(a, b) => Jet::arith(JetOp::Sub, &a.jet(x, y), Operand::Jet(&b.jet(x, y))).unwrap(),
            Expr::Mul(a, b) => Jet::arith(JetOp::Mul, &a.jet(x, y), Operand::Jet(&b.jet(x, y))).unwrap(),
            Expr::Scale(a, s) => Jet::arith(JetOp::Scale, &a.jet(x, y), Operand::Real(*s)).unwrap(),
            Expr::Map(f, a) => a.jet(x, y).compose(*f),
        }
    }
}

/// Central-difference stencil for the k-th derivative, offsets `-r..=r`.
fn stencil(k: usize) -> &'static [f64] {
    match k {
        0 => &[1.0],
        1 => &[-0.5, 0.0, 0.5],
        2 => &[1.0, -2.0, 1.0],
        3 => &[-0.5, 1.0, 0.0, -1.0, 0.5],
        4 => &[1.0, -4.0, 6.0, -4.0, 1.0],
        _ => unreachable!("order above 4"),
    }
}

/// Tensor-product central difference for `d^(a+b) f / dx^a dy^b`.
pub fn central_partial(f: &dyn Fn(f64, f64) -> f64, x: f64, y: f64, a: usize, b: usize, h: f64) -> f64 {
    let (sa, sb) = (stencil(a), stencil(b));
    let (ra, rb) = ((sa.len() / 2) as f64, (sb.len() / 2) as f64);
    let mut acc = 0.0;
    for (i, ca) in sa.iter().enumerate() {
        if *ca == 0.0 {
            continue;
        }
        for (j, cb) in sb.iter().enumerate() {
            if *cb == 0.0 {
                continue;
            }
            acc += ca * cb * f(x + (i as f64 - ra) * h, y + (j as f64 - rb) * h);
        }
    }
    acc / h.powi((a + b) as i32)
}

/// Relative error with the scale floored at one.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Worst finite-difference disagreement over every partial up to order 4,
/// split into (orders <= 2, orders 3-4).
pub fn fd_disagreement(e: &Expr, x: f64, y: f64) -> (f64, f64) {
    let (xj, yj) = Jet::seed(x, y, 4).unwrap();
    let jet = e.jet(&xj, &yj);
    let f = |u: f64, v: f64| e.eval(u, v);
    let (mut low, mut high) = (0.0f64, 0.0f64);
    for s in 1..=4 {
        for b in 0..=s {
            let a = s - b;
            let want = jet.partial(a, b);
            if s <= 2 {
                low = low.max(rel_err(central_partial(&f, x, y, a, b, 1e-4), want));
            } else {
                let coarse = central_partial(&f, x, y, a, b, 2e-2);
                let fine = central_partial(&f, x, y, a, b, 1e-2);
                high = high.max(rel_err((4.0 * fine - coarse) / 3.0, want));
            }
        }
    }
    (low, high)
}
