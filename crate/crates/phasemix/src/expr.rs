//! Closed-form action-coefficient functions as differentiable expression
//! trees.
//!
//! Fourier coefficients `c_k(I)`, integrable parts `h(I)`, density profiles
//! and generator coefficients are all expression trees over
//! `{constants, coordinates, +, *, integer powers, exp, sin, cos, bump}`.
//! Differentiation is symbolic and exact, so gradients, Hessians and the
//! third derivatives needed for certified phase bounds come from the same
//! representation with no finite-difference noise.

use num_complex::Complex64;
use std::fmt;
use std::sync::{Arc, OnceLock};

/// A scalar expression over action coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based action coordinate `I_{j+1}`.
    Coord(usize),
    Add(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Neg(Arc<Expr>),
    /// Integer power; negative exponents give reciprocals.
    Pow(Arc<Expr>, i32),
    Exp(Arc<Expr>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
    /// `m`-th derivative of the compact bump profile
    /// `psi(u) = exp(-1/(1 - u^2))` for `|u| < 1`, zero outside,
    /// evaluated at the inner expression.
    Bump(Arc<Expr>, u8),
}

impl Expr {
    pub fn constant(c: f64) -> Arc<Expr> {
        Arc::new(Expr::Const(c))
    }

    pub fn coord(j: usize) -> Arc<Expr> {
        Arc::new(Expr::Coord(j))
    }

    pub fn zero() -> Arc<Expr> {
        Expr::constant(0.0)
    }

    pub fn one() -> Arc<Expr> {
        Expr::constant(1.0)
    }

    pub fn is_const(&self, c: f64) -> bool {
        matches!(self, Expr::Const(v) if *v == c)
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Coord(j) => x[*j],
            Expr::Add(a, b) => a.evaluate(x) + b.evaluate(x),
            Expr::Mul(a, b) => a.evaluate(x) * b.evaluate(x),
            Expr::Neg(a) => -a.evaluate(x),
            Expr::Pow(a, n) => a.evaluate(x).powi(*n),
            Expr::Exp(a) => a.evaluate(x).exp(),
            Expr::Sin(a) => a.evaluate(x).sin(),
            Expr::Cos(a) => a.evaluate(x).cos(),
            Expr::Bump(a, m) => bump_derivative(*m, a.evaluate(x)),
        }
    }
}

// Smart constructors with light constant folding. They keep derivative trees
// from ballooning and make syntactic zero checks meaningful.

pub fn add(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    match (&*a, &*b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::constant(x + y),
        (Expr::Const(x), _) if *x == 0.0 => b,
        (_, Expr::Const(y)) if *y == 0.0 => a,
        _ => Arc::new(Expr::Add(a, b)),
    }
}

pub fn sub(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    add(a, neg(b))
}

pub fn mul(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    match (&*a, &*b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::constant(x * y),
        (Expr::Const(x), _) if *x == 0.0 => Expr::zero(),
        (_, Expr::Const(y)) if *y == 0.0 => Expr::zero(),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Arc::new(Expr::Mul(a, b)),
    }
}

pub fn neg(a: Arc<Expr>) -> Arc<Expr> {
    match &*a {
        Expr::Const(x) => Expr::constant(-x),
        Expr::Neg(inner) => inner.clone(),
        _ => Arc::new(Expr::Neg(a)),
    }
}

pub fn pow(a: Arc<Expr>, n: i32) -> Arc<Expr> {
    match (&*a, n) {
        (_, 0) => Expr::one(),
        (_, 1) => a,
        (Expr::Const(x), _) => Expr::constant(x.powi(n)),
        _ => Arc::new(Expr::Pow(a, n)),
    }
}

pub fn div(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    mul(a, pow(b, -1))
}

pub fn exp(a: Arc<Expr>) -> Arc<Expr> {
    match &*a {
        Expr::Const(x) => Expr::constant(x.exp()),
        _ => Arc::new(Expr::Exp(a)),
    }
}

pub fn sin(a: Arc<Expr>) -> Arc<Expr> {
    match &*a {
        Expr::Const(x) => Expr::constant(x.sin()),
        _ => Arc::new(Expr::Sin(a)),
    }
}

pub fn cos(a: Arc<Expr>) -> Arc<Expr> {
    match &*a {
        Expr::Const(x) => Expr::constant(x.cos()),
        _ => Arc::new(Expr::Cos(a)),
    }
}

/// `psi((e - center) / width)`: smooth, compactly supported in
/// `|e - center| < width`, peak `exp(-1)` at `e = center`.
pub fn bump(e: Arc<Expr>, center: f64, width: f64) -> Arc<Expr> {
    let u = mul(
        sub(e, Expr::constant(center)),
        Expr::constant(1.0 / width),
    );
    Arc::new(Expr::Bump(u, 0))
}

/// Symbolic partial derivative with respect to coordinate `axis`.
pub fn diff(e: &Arc<Expr>, axis: usize) -> Arc<Expr> {
    match &**e {
        Expr::Const(_) => Expr::zero(),
        Expr::Coord(j) => {
            if *j == axis {
                Expr::one()
            } else {
                Expr::zero()
            }
        }
        Expr::Add(a, b) => add(diff(a, axis), diff(b, axis)),
        Expr::Mul(a, b) => add(mul(diff(a, axis), b.clone()), mul(a.clone(), diff(b, axis))),
        Expr::Neg(a) => neg(diff(a, axis)),
        Expr::Pow(a, n) => mul(
            mul(Expr::constant(*n as f64), pow(a.clone(), n - 1)),
            diff(a, axis),
        ),
        Expr::Exp(a) => mul(e.clone(), diff(a, axis)),
        Expr::Sin(a) => mul(cos(a.clone()), diff(a, axis)),
        Expr::Cos(a) => neg(mul(sin(a.clone()), diff(a, axis))),
        Expr::Bump(a, m) => {
            assert!(
                *m < MAX_BUMP_DERIVATIVE,
                "bump derivative order above {MAX_BUMP_DERIVATIVE} not supported"
            );
            mul(Arc::new(Expr::Bump(a.clone(), m + 1)), diff(a, axis))
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Coord(j) => write!(f, "I{}", j + 1),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Pow(a, n) => write!(f, "({a})^{n}"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Bump(a, 0) => write!(f, "psi({a})"),
            Expr::Bump(a, m) => write!(f, "psi^({m})({a})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Bump profile derivatives.
//
// psi^(m)(u) = psi(u) * Q_m(u, r) with r = 1/(1 - u^2), where the bivariate
// polynomials Q_m follow the recurrence
//   Q_{m+1} = -2 u r^2 Q_m + dQ_m/du + 2 u r^2 dQ_m/dr,   Q_0 = 1,
// obtained from psi' = -2 u r^2 psi and dr/du = 2 u r^2.
// ---------------------------------------------------------------------------

const MAX_BUMP_DERIVATIVE: u8 = 6;

/// Dense bivariate polynomial in (u, r); coeff[i][j] multiplies u^i r^j.
#[derive(Clone)]
struct Poly2 {
    coeff: Vec<Vec<f64>>,
}

impl Poly2 {
    fn one() -> Self {
        Poly2 {
            coeff: vec![vec![1.0]],
        }
    }

    fn zero(du: usize, dr: usize) -> Self {
        Poly2 {
            coeff: vec![vec![0.0; dr + 1]; du + 1],
        }
    }

    fn add_term(&mut self, i: usize, j: usize, c: f64) {
        if self.coeff.len() <= i {
            let width = self.coeff.first().map_or(1, Vec::len);
            self.coeff.resize(i + 1, vec![0.0; width]);
        }
        let width = self.coeff.iter().map(Vec::len).max().unwrap_or(1);
        let width = width.max(j + 1);
        for row in &mut self.coeff {
            row.resize(width, 0.0);
        }
        self.coeff[i][j] += c;
    }

    fn next(&self) -> Poly2 {
        let du = self.coeff.len() - 1;
        let dr = self.coeff[0].len() - 1;
        let mut out = Poly2::zero(du + 1, dr + 2);
        for (i, row) in self.coeff.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                // -2 u r^2 * c u^i r^j
                out.add_term(i + 1, j + 2, -2.0 * c);
                // d/du: c i u^{i-1} r^j
                if i > 0 {
                    out.add_term(i - 1, j, c * i as f64);
                }
                // 2 u r^2 d/dr: c j u^{i+1} r^{j+1}
                if j > 0 {
                    out.add_term(i + 1, j + 1, 2.0 * c * j as f64);
                }
            }
        }
        out
    }

    fn evaluate(&self, u: f64, r: f64) -> f64 {
        // Horner in u, inner Horner in r.
        let mut acc = 0.0;
        for row in self.coeff.iter().rev() {
            let mut inner = 0.0;
            for &c in row.iter().rev() {
                inner = inner * r + c;
            }
            acc = acc * u + inner;
        }
        acc
    }
}

fn bump_tables() -> &'static Vec<Poly2> {
    static TABLES: OnceLock<Vec<Poly2>> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut tables = vec![Poly2::one()];
        for _ in 0..MAX_BUMP_DERIVATIVE {
            let next = tables.last().unwrap().next();
            tables.push(next);
        }
        tables
    })
}

/// `psi^(m)(u)` with `psi(u) = exp(-1/(1-u^2))` on `|u| < 1`, zero outside.
///
/// Near `|u| = 1` the exponential underflows long before the rational factor
/// overflows; the floor below cuts over to exact zero while the neglected
/// values are under 1e-270.
pub fn bump_derivative(m: u8, u: f64) -> f64 {
    let s = 1.0 - u * u;
    if s <= 1.43e-3 {
        return 0.0;
    }
    let psi = (-1.0 / s).exp();
    if m == 0 {
        return psi;
    }
    let r = 1.0 / s;
    psi * bump_tables()[m as usize].evaluate(u, r)
}

// ---------------------------------------------------------------------------
// Complex coefficient functions c_k(I).
// ---------------------------------------------------------------------------

/// A complex-valued coefficient over actions, with exact gradient and
/// Hessian derived from the expression trees on first use.
#[derive(Debug, Clone)]
pub struct CoeffFn {
    dim: usize,
    re: Arc<Expr>,
    im: Arc<Expr>,
    grad: OnceLock<Vec<(Arc<Expr>, Arc<Expr>)>>,
    hess: OnceLock<Vec<(Arc<Expr>, Arc<Expr>)>>,
}

impl CoeffFn {
    pub fn new(dim: usize, re: Arc<Expr>, im: Arc<Expr>) -> Self {
        Self {
            dim,
            re,
            im,
            grad: OnceLock::new(),
            hess: OnceLock::new(),
        }
    }

    pub fn real(dim: usize, re: Arc<Expr>) -> Self {
        Self::new(dim, re, Expr::zero())
    }

    pub fn zero(dim: usize) -> Self {
        Self::real(dim, Expr::zero())
    }

    pub fn constant(dim: usize, c: Complex64) -> Self {
        Self::new(dim, Expr::constant(c.re), Expr::constant(c.im))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn re_expr(&self) -> &Arc<Expr> {
        &self.re
    }

    pub fn im_expr(&self) -> &Arc<Expr> {
        &self.im
    }

    /// Syntactic zero test (sound but not complete).
    pub fn is_zero(&self) -> bool {
        self.re.is_const(0.0) && self.im.is_const(0.0)
    }

    /// True when both parts are constant expressions.
    pub fn is_constant(&self) -> bool {
        matches!(&*self.re, Expr::Const(_)) && matches!(&*self.im, Expr::Const(_))
    }

    pub fn value(&self, x: &[f64]) -> Complex64 {
        Complex64::new(self.re.evaluate(x), self.im.evaluate(x))
    }

    fn grad_exprs(&self) -> &[(Arc<Expr>, Arc<Expr>)] {
        self.grad.get_or_init(|| {
            (0..self.dim)
                .map(|j| (diff(&self.re, j), diff(&self.im, j)))
                .collect()
        })
    }

    fn hess_exprs(&self) -> &[(Arc<Expr>, Arc<Expr>)] {
        self.hess.get_or_init(|| {
            let grad = self.grad_exprs().to_vec();
            let mut out = Vec::with_capacity(self.dim * self.dim);
            for (gre, gim) in &grad {
                for j in 0..self.dim {
                    out.push((diff(gre, j), diff(gim, j)));
                }
            }
            out
        })
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<Complex64> {
        self.grad_exprs()
            .iter()
            .map(|(re, im)| Complex64::new(re.evaluate(x), im.evaluate(x)))
            .collect()
    }

    /// Row-major `n x n` Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<Complex64> {
        self.hess_exprs()
            .iter()
            .map(|(re, im)| Complex64::new(re.evaluate(x), im.evaluate(x)))
            .collect()
    }

    pub fn conj(&self) -> CoeffFn {
        CoeffFn::new(self.dim, self.re.clone(), neg(self.im.clone()))
    }

    pub fn add(&self, other: &CoeffFn) -> CoeffFn {
        assert_eq!(self.dim, other.dim);
        CoeffFn::new(
            self.dim,
            add(self.re.clone(), other.re.clone()),
            add(self.im.clone(), other.im.clone()),
        )
    }

    pub fn mul(&self, other: &CoeffFn) -> CoeffFn {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.re.clone(), self.im.clone());
        let (c, d) = (other.re.clone(), other.im.clone());
        CoeffFn::new(
            self.dim,
            sub(mul(a.clone(), c.clone()), mul(b.clone(), d.clone())),
            add(mul(a, d), mul(b, c)),
        )
    }

    pub fn scale(&self, c: Complex64) -> CoeffFn {
        self.mul(&CoeffFn::constant(self.dim, c))
    }

    /// Division by a real-valued expression.
    pub fn div_real(&self, denom: &Arc<Expr>) -> CoeffFn {
        let inv = pow(denom.clone(), -1);
        CoeffFn::new(
            self.dim,
            mul(self.re.clone(), inv.clone()),
            mul(self.im.clone(), inv),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference(e: &Arc<Expr>, x: &[f64], axis: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[axis] += h;
        xm[axis] -= h;
        (e.evaluate(&xp) - e.evaluate(&xm)) / (2.0 * h)
    }

    #[test]
    fn symbolic_gradient_matches_central_differences() {
        // c(I) = I1^2 * exp(-I2) + sin(I1 * I2)
        let e = add(
            mul(pow(Expr::coord(0), 2), exp(neg(Expr::coord(1)))),
            sin(mul(Expr::coord(0), Expr::coord(1))),
        );
        let points = [[0.7, -0.3], [1.2, 0.5], [-0.4, 1.9]];
        for p in &points {
            for axis in 0..2 {
                let sym = diff(&e, axis).evaluate(p);
                let fd = finite_difference(&e, p, axis, 1e-6);
                let rel = (sym - fd).abs() / (1.0 + sym.abs());
                assert!(rel < 1e-6, "axis {axis} at {p:?}: {sym} vs {fd}");
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let c = CoeffFn::real(
            2,
            mul(
                bump(
                    add(pow(Expr::coord(0), 2), pow(Expr::coord(1), 2)),
                    0.0,
                    1.0,
                ),
                add(Expr::coord(0), Expr::constant(2.0)),
            ),
        );
        let p = [0.35, -0.4];
        let h = 1e-4;
        let hess = c.hessian(&p);
        for i in 0..2 {
            for j in 0..2 {
                let gi = |x: &[f64]| c.gradient(x)[i].re;
                let mut xp = p.to_vec();
                let mut xm = p.to_vec();
                xp[j] += h;
                xm[j] -= h;
                let fd = (gi(&xp) - gi(&xm)) / (2.0 * h);
                let rel = (hess[i * 2 + j].re - fd).abs() / (1.0 + fd.abs());
                assert!(rel < 1e-4, "H[{i}][{j}] {} vs {fd}", hess[i * 2 + j].re);
            }
        }
    }

    #[test]
    fn bump_is_smooth_and_compact() {
        assert_eq!(bump_derivative(0, 1.0), 0.0);
        assert_eq!(bump_derivative(0, 1.2), 0.0);
        assert_eq!(bump_derivative(3, -1.0001), 0.0);
        assert!((bump_derivative(0, 0.0) - (-1.0f64).exp()).abs() < 1e-16);
        // psi' via finite differences of psi.
        for &u in &[0.0, 0.3, -0.6, 0.9, 0.99] {
            let h = 1e-6;
            let fd = (bump_derivative(0, u + h) - bump_derivative(0, u - h)) / (2.0 * h);
            let sym = bump_derivative(1, u);
            assert!(
                (fd - sym).abs() < 1e-6 * (1.0 + sym.abs()),
                "u={u}: {sym} vs {fd}"
            );
        }
        // No NaN approaching the support edge.
        for &u in &[0.999, 0.99999, 0.9999999, 1.0 - 1e-12] {
            for m in 0..=4u8 {
                assert!(bump_derivative(m, u).is_finite());
            }
        }
    }

    #[test]
    fn second_bump_derivative_consistent() {
        for &u in &[0.1, 0.45, -0.8] {
            let h = 1e-5;
            let fd =
                (bump_derivative(1, u + h) - bump_derivative(1, u - h)) / (2.0 * h);
            let sym = bump_derivative(2, u);
            assert!((fd - sym).abs() < 1e-5 * (1.0 + sym.abs()));
        }
    }

    #[test]
    fn complex_product_rule() {
        // (I1 + i I2) * (cos I1 + i sin I1) at random-ish points.
        let a = CoeffFn::new(2, Expr::coord(0), Expr::coord(1));
        let b = CoeffFn::new(2, cos(Expr::coord(0)), sin(Expr::coord(0)));
        let prod = a.mul(&b);
        let p = [0.8, -1.3];
        let want = a.value(&p) * b.value(&p);
        let got = prod.value(&p);
        assert!((want - got).norm() < 1e-14);
        // Product-rule gradient.
        let g = prod.gradient(&p);
        let ga = a.gradient(&p);
        let gb = b.gradient(&p);
        for j in 0..2 {
            let want = ga[j] * b.value(&p) + a.value(&p) * gb[j];
            assert!((want - g[j]).norm() < 1e-13);
        }
    }

    #[test]
    fn display_round_trips_structure() {
        let e = mul(
            add(Expr::coord(0), Expr::constant(2.0)),
            pow(Expr::coord(1), -1),
        );
        assert_eq!(e.to_string(), "((I1 + 2) * (I2)^-1)");
    }
}
