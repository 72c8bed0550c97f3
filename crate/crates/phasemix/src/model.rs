//! Hamiltonians `H = h(I) + f(theta, I)`, observables and densities as
//! finite Fourier series in the angles with expression-tree coefficients.
//!
//! Restricting to trigonometric polynomials makes Fourier coefficients exact
//! (no aliasing), lets the homological equation be solved mode by mode, and
//! makes high-frequency tails finite sums. Real-valued fields store the full
//! conjugate-closed mode map but evaluate over one representative per `+/-k`
//! pair.

use crate::error::{Error, Result};
use crate::expr::{self, CoeffFn, Expr};
use crate::grid::{build_grid, QuadratureRule, TorusGrid};
use crate::space::{ActionDomain, PhasePoint};
use num_complex::Complex64;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// Integer wavevector `k` indexing a Fourier mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WaveVec(pub Vec<i32>);

impl WaveVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn neg(&self) -> WaveVec {
        WaveVec(self.0.iter().map(|c| -c).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Canonical representative of the `+/-k` pair: first nonzero entry
    /// positive.
    pub fn is_canonical(&self) -> bool {
        match self.0.iter().find(|&&c| c != 0) {
            Some(&c) => c > 0,
            None => true,
        }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(&c, v)| c as f64 * v).sum()
    }
}

/// Enumerate all nonzero wavevectors with `|k|_1 <= order`, in
/// lexicographic order, with a count guard.
pub fn enumerate_wavevectors(dim: usize, order: i32, guard: u64) -> Result<Vec<WaveVec>> {
    if order < 1 {
        return Err(Error::InvalidParameter(format!(
            "wavevector order must be >= 1, got {order}"
        )));
    }
    // (2 order + 1)^dim over-counts the l1 ball but is exact enough for a
    // guard check.
    let count = (2 * order as u64 + 1).pow(dim as u32);
    if count > guard {
        return Err(Error::EnumerationGuard {
            count,
            order,
            guard,
        });
    }
    let mut out = Vec::new();
    let mut k = vec![0i32; dim];
    fn recurse(k: &mut Vec<i32>, axis: usize, budget: i32, out: &mut Vec<WaveVec>) {
        if axis == k.len() {
            if k.iter().any(|&c| c != 0) {
                out.push(WaveVec(k.clone()));
            }
            return;
        }
        for v in -budget..=budget {
            k[axis] = v;
            recurse(k, axis + 1, budget - v.abs(), out);
        }
        k[axis] = 0;
    }
    recurse(&mut k, 0, order, &mut out);
    out.sort();
    Ok(out)
}

/// Canonical representatives (first nonzero entry positive) of
/// [`enumerate_wavevectors`], one per `+/-k` pair.
pub fn canonical_wavevectors(dim: usize, order: i32, guard: u64) -> Result<Vec<WaveVec>> {
    Ok(enumerate_wavevectors(dim, order, guard)?
        .into_iter()
        .filter(WaveVec::is_canonical)
        .collect())
}

impl fmt::Display for WaveVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// One representative mode of a real field: the pair `k`, `-k` together
/// contribute `2 Re(c_k(I) e^{i k.theta})`.
#[derive(Debug, Clone)]
struct PairEntry {
    k: WaveVec,
    coeff: CoeffFn,
}

/// A finite Fourier series in `theta` with action-dependent coefficients.
#[derive(Debug, Clone)]
pub struct TrigPolyField {
    dim: usize,
    modes: BTreeMap<WaveVec, CoeffFn>,
    /// Canonical-representative cache for fast real evaluation.
    pairs: Vec<PairEntry>,
    zero_mode: CoeffFn,
}

impl TrigPolyField {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            modes: BTreeMap::new(),
            pairs: Vec::new(),
            zero_mode: CoeffFn::zero(dim),
        }
    }

    /// Build a real field from representative modes; conjugate modes are
    /// inserted automatically. Coefficients for repeated `k` accumulate.
    pub fn from_real_modes(
        dim: usize,
        modes: impl IntoIterator<Item = (WaveVec, CoeffFn)>,
    ) -> Result<Self> {
        let mut field = Self::zero(dim);
        for (k, c) in modes {
            if k.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: k.dim(),
                });
            }
            if k.is_zero() {
                let updated = match field.modes.get(&k) {
                    Some(old) => old.add(&c),
                    None => c,
                };
                field.modes.insert(k, updated);
                field = Self::from_closed_map(dim, std::mem::take(&mut field.modes));
            } else {
                field.insert_pair(k, c);
            }
        }
        Ok(field)
    }

    /// Internal: build from an already conjugate-closed map.
    fn from_closed_map(dim: usize, modes: BTreeMap<WaveVec, CoeffFn>) -> Self {
        let zero_key = WaveVec(vec![0; dim]);
        let zero_mode = modes
            .get(&zero_key)
            .cloned()
            .unwrap_or_else(|| CoeffFn::zero(dim));
        let pairs = modes
            .iter()
            .filter(|(k, c)| !k.is_zero() && k.is_canonical() && !c.is_zero())
            .map(|(k, c)| PairEntry {
                k: k.clone(),
                coeff: c.clone(),
            })
            .collect();
        Self {
            dim,
            modes,
            pairs,
            zero_mode,
        }
    }

    // Builder helpers -------------------------------------------------------

    /// Add `amplitude(I) * cos(k.theta)`.
    pub fn with_cos(mut self, k: &[i32], amplitude: Arc<Expr>) -> Self {
        let half = CoeffFn::real(self.dim, expr::mul(amplitude, Expr::constant(0.5)));
        self.insert_pair(WaveVec(k.to_vec()), half);
        self
    }

    /// Add `amplitude(I) * sin(k.theta)`.
    pub fn with_sin(mut self, k: &[i32], amplitude: Arc<Expr>) -> Self {
        // sin(k.theta) = -i/2 e^{ik.theta} + i/2 e^{-ik.theta}
        let c = CoeffFn::real(self.dim, amplitude).scale(Complex64::new(0.0, -0.5));
        self.insert_pair(WaveVec(k.to_vec()), c);
        self
    }

    /// Add an angle-independent term `g(I)`.
    pub fn with_zero_mode(mut self, g: Arc<Expr>) -> Self {
        let k = WaveVec(vec![0; self.dim]);
        let c = CoeffFn::real(self.dim, g);
        let updated = match self.modes.get(&k) {
            Some(old) => old.add(&c),
            None => c,
        };
        self.modes.insert(k, updated);
        let map = std::mem::take(&mut self.modes);
        Self::from_closed_map(self.dim, map)
    }

    /// Add a complex mode pair `c_k e^{ik.theta} + conj(c_k) e^{-ik.theta}`.
    pub fn with_mode(mut self, k: &[i32], c: CoeffFn) -> Self {
        self.insert_pair(WaveVec(k.to_vec()), c);
        self
    }

    fn insert_pair(&mut self, k: WaveVec, c: CoeffFn) {
        assert_eq!(k.dim(), self.dim);
        assert!(!k.is_zero(), "use with_zero_mode for k = 0");
        let conj = c.conj();
        let neg = k.neg();
        let upd = |map: &mut BTreeMap<WaveVec, CoeffFn>, key: WaveVec, val: CoeffFn| {
            let v = match map.get(&key) {
                Some(old) => old.add(&val),
                None => val,
            };
            map.insert(key, v);
        };
        upd(&mut self.modes, k, c);
        upd(&mut self.modes, neg, conj);
        let map = std::mem::take(&mut self.modes);
        *self = Self::from_closed_map(self.dim, map);
    }

    // Accessors -------------------------------------------------------------

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact Fourier coefficient read-off; the zero function if `k` is
    /// absent.
    pub fn mode(&self, k: &WaveVec) -> CoeffFn {
        self.modes
            .get(k)
            .cloned()
            .unwrap_or_else(|| CoeffFn::zero(self.dim))
    }

    pub fn zero_mode(&self) -> &CoeffFn {
        &self.zero_mode
    }

    /// All stored modes (conjugate-closed), in deterministic order.
    pub fn modes(&self) -> impl Iterator<Item = (&WaveVec, &CoeffFn)> {
        self.modes.iter()
    }

    /// Canonical representatives of nonzero modes.
    pub fn canonical_modes(&self) -> impl Iterator<Item = (&WaveVec, &CoeffFn)> {
        self.pairs.iter().map(|p| (&p.k, &p.coeff))
    }

    /// Largest `|k|_1` with a nonzero coefficient.
    pub fn band_limit_l1(&self) -> i32 {
        self.pairs.iter().map(|p| p.k.l1()).max().unwrap_or(0)
    }

    /// True when no coefficient depends on the actions (pure kicks).
    pub fn is_action_independent(&self) -> bool {
        self.zero_mode.is_constant() && self.pairs.iter().all(|p| p.coeff.is_constant())
    }

    pub fn is_zero(&self) -> bool {
        self.zero_mode.is_zero() && self.pairs.is_empty()
    }

    // Evaluation ------------------------------------------------------------

    /// Real evaluation `sum_k c_k(I) e^{i k.theta}` via representative pairs.
    pub fn eval(&self, point: &PhasePoint) -> f64 {
        self.eval_at(&point.theta, &point.action)
    }

    pub fn eval_at(&self, theta: &[f64], action: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim);
        let mut v = self.zero_mode.value(action).re;
        for p in &self.pairs {
            let phase = p.k.dot(theta);
            let (s, c) = phase.sin_cos();
            let z = p.coeff.value(action);
            v += 2.0 * (z.re * c - z.im * s);
        }
        v
    }

    /// Complex evaluation by direct summation over the full mode map, in map
    /// order. Test oracle for the pair evaluation path.
    pub fn eval_complex(&self, theta: &[f64], action: &[f64]) -> Complex64 {
        let mut v = Complex64::new(0.0, 0.0);
        for (k, c) in &self.modes {
            let phase = k.dot(theta);
            v += c.value(action) * Complex64::new(phase.cos(), phase.sin());
        }
        v
    }

    /// Value together with angle and action gradients (fused for the
    /// integrator hot path).
    pub fn value_and_grads(&self, theta: &[f64], action: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let mut value = self.zero_mode.value(action).re;
        let mut gt = vec![0.0; n];
        let mut ga: Vec<f64> = self
            .zero_mode
            .gradient(action)
            .iter()
            .map(|z| z.re)
            .collect();
        for p in &self.pairs {
            let phase = p.k.dot(theta);
            let (s, c) = phase.sin_cos();
            let z = p.coeff.value(action);
            value += 2.0 * (z.re * c - z.im * s);
            let dphase = -2.0 * (z.re * s + z.im * c);
            for j in 0..n {
                gt[j] += p.k.0[j] as f64 * dphase;
            }
            let gz = p.coeff.gradient(action);
            for j in 0..n {
                ga[j] += 2.0 * (gz[j].re * c - gz[j].im * s);
            }
        }
        (value, gt, ga)
    }

    /// Angle gradient only.
    pub fn grad_theta(&self, theta: &[f64], action: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut gt = vec![0.0; n];
        for p in &self.pairs {
            let phase = p.k.dot(theta);
            let (s, c) = phase.sin_cos();
            let z = p.coeff.value(action);
            let dphase = -2.0 * (z.re * s + z.im * c);
            for j in 0..n {
                gt[j] += p.k.0[j] as f64 * dphase;
            }
        }
        gt
    }

    /// Full second-derivative blocks `(d2/dtheta2, d2/dtheta dI, d2/dI2)`,
    /// each row-major `n x n`. Used by variational (tangent) flows.
    pub fn hessian_blocks(&self, theta: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let mut htt = vec![0.0; n * n];
        let mut hti = vec![0.0; n * n];
        let mut hii: Vec<f64> = self
            .zero_mode
            .hessian(action)
            .iter()
            .map(|z| z.re)
            .collect();
        for p in &self.pairs {
            let phase = p.k.dot(theta);
            let (s, c) = phase.sin_cos();
            let z = p.coeff.value(action);
            let gz = p.coeff.gradient(action);
            let hz = p.coeff.hessian(action);
            let re_part = 2.0 * (z.re * c - z.im * s);
            for i in 0..n {
                let ki = p.k.0[i] as f64;
                for j in 0..n {
                    let kj = p.k.0[j] as f64;
                    htt[i * n + j] -= ki * kj * re_part;
                    // d/dI_j of the theta_i derivative.
                    hti[i * n + j] += ki * (-2.0) * (gz[j].re * s + gz[j].im * c);
                    hii[i * n + j] += 2.0 * (hz[i * n + j].re * c - hz[i * n + j].im * s);
                }
            }
        }
        (htt, hti, hii)
    }

    // Algebra ---------------------------------------------------------------

    pub fn scale(&self, factor: f64) -> Self {
        let modes = self
            .modes
            .iter()
            .map(|(k, c)| (k.clone(), c.scale(Complex64::new(factor, 0.0))))
            .collect();
        Self::from_closed_map(self.dim, modes)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut modes = self.modes.clone();
        for (k, c) in &other.modes {
            let v = match modes.get(k) {
                Some(old) => old.add(c),
                None => c.clone(),
            };
            modes.insert(k.clone(), v);
        }
        Self::from_closed_map(self.dim, modes)
    }

    /// Drop the zero mode.
    pub fn oscillating_part(&self) -> Self {
        let modes = self
            .modes
            .iter()
            .filter(|(k, _)| !k.is_zero())
            .map(|(k, c)| (k.clone(), c.clone()))
            .collect();
        Self::from_closed_map(self.dim, modes)
    }

    /// Keep modes with `|k|_1 <= order`.
    pub fn truncate_l1(&self, order: i32) -> Self {
        let modes = self
            .modes
            .iter()
            .filter(|(k, _)| k.l1() <= order)
            .map(|(k, c)| (k.clone(), c.clone()))
            .collect();
        Self::from_closed_map(self.dim, modes)
    }

    /// Canonical Poisson bracket
    /// `{F, G} = dF/dtheta . dG/dI - dF/dI . dG/dtheta` of two trigonometric
    /// polynomials; the result is again one.
    pub fn poisson_bracket(&self, other: &Self) -> Self {
        let n = self.dim;
        assert_eq!(n, other.dim);
        let mut modes: BTreeMap<WaveVec, CoeffFn> = BTreeMap::new();
        for (k1, c1) in &self.modes {
            for (k2, c2) in &other.modes {
                let k = WaveVec(k1.0.iter().zip(&k2.0).map(|(a, b)| a + b).collect());
                let mut term = CoeffFn::zero(n);
                for j in 0..n {
                    // i [ k1_j c1 (d_j c2) - k2_j (d_j c1) c2 ]
                    if k1.0[j] != 0 {
                        term = term.add(
                            &c1.mul(&c2.partial(j))
                                .scale(Complex64::new(0.0, k1.0[j] as f64)),
                        );
                    }
                    if k2.0[j] != 0 {
                        term = term.add(
                            &c1.partial(j)
                                .mul(c2)
                                .scale(Complex64::new(0.0, -(k2.0[j] as f64))),
                        );
                    }
                }
                if term.is_zero() {
                    continue;
                }
                let v = match modes.get(&k) {
                    Some(old) => old.add(&term),
                    None => term,
                };
                modes.insert(k, v);
            }
        }
        Self::from_closed_map(n, modes)
    }

    /// Pointwise angle-uniform envelope `B(I) = |c_0(I)| + sum_k 2 |c_k(I)|`;
    /// `sup_theta |field(theta, I)| <= B(I)` by the triangle inequality.
    pub fn envelope(&self, action: &[f64]) -> f64 {
        let mut b = self.zero_mode.value(action).norm();
        for p in &self.pairs {
            b += 2.0 * p.coeff.value(action).norm();
        }
        b
    }

    fn envelope_grad_norm(&self, action: &[f64]) -> f64 {
        // |grad B| <= |grad c_0| + sum 2 |grad c_k| componentwise.
        let n = self.dim;
        let mut g = vec![0.0; n];
        for (j, z) in self.zero_mode.gradient(action).iter().enumerate() {
            g[j] += z.norm();
        }
        for p in &self.pairs {
            for (j, z) in p.coeff.gradient(action).iter().enumerate() {
                g[j] += 2.0 * z.norm();
            }
        }
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Certified upper estimate of `sup |field|` over `T^n x domain`.
    ///
    /// The estimate is `min` of nothing fancier than the angle-uniform
    /// envelope `sup_I B(I)`, certified by a probe max plus a first-order
    /// Lipschitz correction in the actions alone (the angles are handled
    /// exactly by the triangle inequality). The reported margin is the
    /// certified value over the observed `(theta, I)` probe max, minus one;
    /// for phase-aligned fields it comes out near the nominal `margin`.
    pub fn certified_sup(&self, domain: &ActionDomain, margin: f64) -> Result<CertifiedSup> {
        let n = self.dim;
        let theta_res = (2 * self.band_limit_l1() as usize + 2).clamp(4, 8);
        let action_res = match n {
            1 => 512,
            2 => 64,
            _ => 24,
        };
        let ag = build_grid(domain, &vec![action_res; n], QuadratureRule::Midpoint)?;
        let mut env_max = 0.0_f64;
        let mut env_lip = 0.0_f64;
        for i in 0..ag.len() {
            let act = ag.node(i);
            env_max = env_max.max(self.envelope(act));
            env_lip = env_lip.max(self.envelope_grad_norm(act));
        }
        if env_max == 0.0 {
            return Ok(CertifiedSup {
                value: 0.0,
                probe_max: 0.0,
                margin,
                theta_res,
                action_res,
            });
        }
        // 1.5 guards the Lipschitz constant being itself a probe estimate.
        let certified = env_max + 1.5 * env_lip * ag.half_diagonal();

        let tg = TorusGrid::new(n, theta_res);
        let coarse = build_grid(domain, &vec![action_res.min(24); n], QuadratureRule::Midpoint)?;
        let mut probe_max = 0.0_f64;
        for i in 0..coarse.len() {
            let act = coarse.node(i);
            for ti in 0..tg.len() {
                probe_max = probe_max.max(self.eval_at(tg.node(ti), act).abs());
            }
        }
        let value = certified.max(probe_max * (1.0 + margin));
        Ok(CertifiedSup {
            value,
            probe_max,
            margin: if probe_max > 0.0 {
                value / probe_max - 1.0
            } else {
                margin
            },
            theta_res,
            action_res,
        })
    }
}

impl CoeffFn {
    /// Partial derivative as a coefficient function.
    pub fn partial(&self, axis: usize) -> CoeffFn {
        CoeffFn::new(
            self.dim(),
            expr::diff(self.re_expr(), axis),
            expr::diff(self.im_expr(), axis),
        )
    }
}

/// A certified sup-norm estimate with its probe provenance.
#[derive(Debug, Clone, Serialize)]
pub struct CertifiedSup {
    pub value: f64,
    pub probe_max: f64,
    pub margin: f64,
    pub theta_res: usize,
    pub action_res: usize,
}

// ---------------------------------------------------------------------------
// Integrable part and frequency map.
// ---------------------------------------------------------------------------

/// The integrable Hamiltonian `h(I)` with its frequency map
/// `omega(I) = grad h(I)` and frequency Jacobian, all symbolic.
#[derive(Debug, Clone)]
pub struct IntegrablePart {
    dim: usize,
    h: CoeffFn,
    omega: Vec<Arc<Expr>>,
    omega_jac: Vec<Arc<Expr>>,
}

impl IntegrablePart {
    pub fn new(dim: usize, h: Arc<Expr>) -> Self {
        let omega: Vec<Arc<Expr>> = (0..dim).map(|j| expr::diff(&h, j)).collect();
        let mut omega_jac = Vec::with_capacity(dim * dim);
        for wi in &omega {
            for j in 0..dim {
                omega_jac.push(expr::diff(wi, j));
            }
        }
        Self {
            dim,
            h: CoeffFn::real(dim, h),
            omega,
            omega_jac,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h_value(&self, action: &[f64]) -> f64 {
        self.h.value(action).re
    }

    pub fn h_coeff(&self) -> &CoeffFn {
        &self.h
    }

    pub fn h_expr(&self) -> &Arc<Expr> {
        self.h.re_expr()
    }

    /// `omega(I) = grad h(I)`.
    pub fn freq(&self, action: &[f64]) -> Vec<f64> {
        self.omega.iter().map(|e| e.evaluate(action)).collect()
    }

    /// Row-major frequency Jacobian `grad omega = hess h`.
    pub fn freq_jacobian(&self, action: &[f64]) -> Vec<f64> {
        self.omega_jac.iter().map(|e| e.evaluate(action)).collect()
    }

    pub fn omega_exprs(&self) -> &[Arc<Expr>] {
        &self.omega
    }
}

// ---------------------------------------------------------------------------
// Systems, densities, observables.
// ---------------------------------------------------------------------------

/// A nearly integrable Hamiltonian `H_eps = h(I) + f_eps(theta, I)` on
/// `T^n x domain`; the stored perturbation already carries the `eps` factor.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    pub integrable: IntegrablePart,
    pub perturbation: TrigPolyField,
    pub epsilon: f64,
    pub domain: ActionDomain,
}

impl HamiltonianSystem {
    pub fn new(
        integrable: IntegrablePart,
        perturbation_shape: TrigPolyField,
        epsilon: f64,
        domain: ActionDomain,
    ) -> Result<Self> {
        if integrable.dim() != domain.dim() || perturbation_shape.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: integrable.dim(),
            });
        }
        if epsilon < 0.0 {
            return Err(Error::InvalidParameter("epsilon must be >= 0".into()));
        }
        Ok(Self {
            integrable,
            perturbation: perturbation_shape.scale(epsilon),
            epsilon,
            domain,
        })
    }

    pub fn dim(&self) -> usize {
        self.integrable.dim()
    }

    pub fn energy(&self, point: &PhasePoint) -> f64 {
        self.integrable.h_value(&point.action) + self.perturbation.eval(point)
    }

    /// Frequency map, restricted to the action domain.
    pub fn frequency(&self, action: &[f64]) -> Result<Vec<f64>> {
        if !self.domain.contains(action) {
            return Err(Error::OutsideDomain(action.to_vec()));
        }
        Ok(self.integrable.freq(action))
    }
}

/// A normalized initial probability density `f_0 >= 0` on `T^n x domain`,
/// compactly supported in the actions.
#[derive(Debug, Clone)]
pub struct EnsembleDensity {
    field: TrigPolyField,
    domain: ActionDomain,
    normalization: f64,
    sup: CertifiedSup,
    /// Largest envelope value seen on the 2% boundary layer. Compact support
    /// in the actions (needed by the integration-by-parts machinery) means
    /// this is below 1e-10; sampling and plain averaging do not require it.
    boundary_residue: f64,
}

impl EnsembleDensity {
    /// Normalize a raw nonnegative field so `int f_0 dtheta dI = 1` and
    /// check positivity plus boundary vanishing on probe grids.
    pub fn normalize(raw: TrigPolyField, domain: &ActionDomain) -> Result<Self> {
        let n = raw.dim();
        if n != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: n,
            });
        }
        // Midpoint on the bounding box: for smooth densities compactly
        // supported inside the domain the periodic Euler-Maclaurin argument
        // makes the midpoint sum superalgebraically accurate.
        let res = match n {
            1 => 20_000,
            2 => 600,
            _ => 90,
        };
        let grid = build_grid(domain, &vec![res; n], QuadratureRule::Midpoint)?;
        let tau_n = std::f64::consts::TAU.powi(n as i32);
        let mass = tau_n * grid.integrate(|i| raw.zero_mode().value(i).re);
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "density has nonpositive total mass {mass}"
            )));
        }
        let field = raw.scale(1.0 / mass);
        let sup = field.certified_sup(domain, 0.05)?;

        // Positivity and compact support checks on probes. The boundary
        // layer uses the angle-uniform envelope, so no theta loop there.
        let tg = TorusGrid::new(n, (2 * field.band_limit_l1() as usize + 2).clamp(4, 8));
        let probe_res = if n <= 2 { 48 } else { 20 };
        let probe = build_grid(domain, &vec![probe_res; n], QuadratureRule::Midpoint)?;
        let (lower, upper) = domain.bounding_box();
        let diameter = upper
            .iter()
            .zip(&lower)
            .map(|(u, l)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt();
        let mut boundary_residue = 0.0f64;
        for i in 0..probe.len() {
            let act = probe.node(i);
            if domain.boundary_distance(act) < 0.02 * diameter {
                boundary_residue = boundary_residue.max(field.envelope(act));
            }
            for ti in 0..tg.len() {
                let v = field.eval_at(tg.node(ti), act);
                if v < -1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "density negative ({v:.3e}) at I = {act:?}"
                    )));
                }
            }
        }
        Ok(Self {
            field,
            domain: domain.clone(),
            normalization: mass,
            sup,
            boundary_residue,
        })
    }

    /// True when the density vanishes (below 1e-10) on the boundary layer.
    pub fn has_compact_support(&self) -> bool {
        self.boundary_residue <= 1e-10
    }

    /// Error unless the density is compactly supported in the actions.
    pub fn require_compact_support(&self) -> Result<()> {
        if self.has_compact_support() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "density must vanish on the action boundary layer for integration by parts; \
                 boundary envelope residue is {:.3e}",
                self.boundary_residue
            )))
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn field(&self) -> &TrigPolyField {
        &self.field
    }

    pub fn domain(&self) -> &ActionDomain {
        &self.domain
    }

    /// The constant the raw field was divided by.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn certified_sup(&self) -> &CertifiedSup {
        &self.sup
    }

    pub fn eval(&self, point: &PhasePoint) -> f64 {
        self.field.eval(point)
    }

    /// Action marginal `rho_0(I) = (2 pi)^n f_{0,0}(I)`; integrates to one.
    pub fn marginal(&self, action: &[f64]) -> f64 {
        std::f64::consts::TAU.powi(self.dim() as i32) * self.field.zero_mode().value(action).re
    }
}

/// An observable `G(theta, I)` with a certified sup-norm.
#[derive(Debug, Clone)]
pub struct Observable {
    field: TrigPolyField,
    sup: CertifiedSup,
}

impl Observable {
    pub fn new(field: TrigPolyField, domain: &ActionDomain) -> Result<Self> {
        let sup = field.certified_sup(domain, 0.05)?;
        Ok(Self { field, sup })
    }

    pub fn field(&self) -> &TrigPolyField {
        &self.field
    }

    pub fn eval(&self, point: &PhasePoint) -> f64 {
        self.field.eval(point)
    }

    /// `<G>_theta(I)`: the `k = 0` Fourier coefficient, exact for
    /// trigonometric polynomials.
    pub fn angular_average(&self, action: &[f64]) -> f64 {
        self.field.zero_mode().value(action).re
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup.value
    }

    pub fn sup_detail(&self) -> &CertifiedSup {
        &self.sup
    }
}

/// A builtin system together with its default density and observable.
#[derive(Debug, Clone)]
pub struct SystemBundle {
    pub system: HamiltonianSystem,
    pub density: EnsembleDensity,
    pub observable: Observable,
}

/// Catalog of builtin example systems: `twist2`, `pendulum1`, `steep3`.
pub fn builtin_system(name: &str, epsilon: f64) -> Result<SystemBundle> {
    match name {
        "twist2" => {
            // h = |I|^2 / 2 on the ball of radius 2: omega(I) = I, grad omega = Id.
            let h = expr::mul(
                Expr::constant(0.5),
                expr::add(expr::pow(Expr::coord(0), 2), expr::pow(Expr::coord(1), 2)),
            );
            let domain = ActionDomain::ball(vec![0.0, 0.0], 2.0)?;
            let shape = TrigPolyField::zero(2)
                .with_cos(&[1, 0], Expr::one())
                .with_cos(&[1, -1], Expr::one());
            let system =
                HamiltonianSystem::new(IntegrablePart::new(2, h), shape, epsilon, domain.clone())?;

            // Radial compact bump at (1.05, 0.45), support radius 0.3, kept
            // clear of the |k|_1 <= 2 resonance web and the domain boundary.
            let q = expr::add(
                expr::pow(expr::sub(Expr::coord(0), Expr::constant(1.05)), 2),
                expr::pow(expr::sub(Expr::coord(1), Expr::constant(0.45)), 2),
            );
            let profile = expr::bump(q, 0.0, 0.09);
            let raw = TrigPolyField::zero(2)
                .with_zero_mode(profile.clone())
                .with_cos(&[1, 0], expr::mul(Expr::constant(0.3), profile.clone()))
                .with_cos(&[1, 1], expr::mul(Expr::constant(0.2), profile));
            let density = EnsembleDensity::normalize(raw, &domain)?;

            let g = TrigPolyField::zero(2)
                .with_zero_mode(expr::mul(Expr::constant(0.25), Expr::coord(1)))
                .with_cos(&[1, 0], Expr::one())
                .with_cos(&[1, 1], Expr::constant(0.5));
            let observable = Observable::new(g, &domain)?;
            Ok(SystemBundle {
                system,
                density,
                observable,
            })
        }
        "pendulum1" => {
            let h = expr::mul(Expr::constant(0.5), expr::pow(Expr::coord(0), 2));
            let domain = ActionDomain::ball(vec![0.0], 2.0)?;
            let shape = TrigPolyField::zero(1).with_cos(&[1], Expr::one());
            let system =
                HamiltonianSystem::new(IntegrablePart::new(1, h), shape, epsilon, domain.clone())?;
            let profile = expr::bump(Expr::coord(0), 1.0, 0.45);
            let raw = TrigPolyField::zero(1)
                .with_zero_mode(profile.clone())
                .with_cos(&[1], expr::mul(Expr::constant(0.5), profile));
            let density = EnsembleDensity::normalize(raw, &domain)?;
            let g = TrigPolyField::zero(1)
                .with_zero_mode(expr::mul(Expr::constant(0.3), Expr::coord(0)))
                .with_cos(&[1], Expr::one());
            let observable = Observable::new(g, &domain)?;
            Ok(SystemBundle {
                system,
                density,
                observable,
            })
        }
        "steep3" => {
            // Convex h with cross terms; the Hessian stays positive definite.
            let sq = |j: usize| expr::pow(Expr::coord(j), 2);
            let h = expr::add(
                expr::mul(
                    Expr::constant(0.5),
                    expr::add(expr::add(sq(0), sq(1)), sq(2)),
                ),
                expr::add(
                    expr::mul(
                        Expr::constant(0.25),
                        expr::mul(Expr::coord(0), Expr::coord(1)),
                    ),
                    expr::mul(
                        Expr::constant(0.25),
                        expr::mul(Expr::coord(1), Expr::coord(2)),
                    ),
                ),
            );
            let domain = ActionDomain::ball(vec![0.0, 0.0, 0.0], 1.6)?;
            let shape = TrigPolyField::zero(3)
                .with_cos(&[1, 0, 0], Expr::one())
                .with_cos(&[0, 1, -1], Expr::one());
            let system =
                HamiltonianSystem::new(IntegrablePart::new(3, h), shape, epsilon, domain.clone())?;
            let center = [0.8, 0.5, 0.3];
            let q = (0..3).fold(Expr::zero(), |acc, j| {
                expr::add(
                    acc,
                    expr::pow(expr::sub(Expr::coord(j), Expr::constant(center[j])), 2),
                )
            });
            let profile = expr::bump(q, 0.0, 0.0625);
            let raw = TrigPolyField::zero(3)
                .with_zero_mode(profile.clone())
                .with_cos(&[1, 0, 0], expr::mul(Expr::constant(0.4), profile));
            let density = EnsembleDensity::normalize(raw, &domain)?;
            let g = TrigPolyField::zero(3)
                .with_zero_mode(expr::mul(Expr::constant(0.2), Expr::coord(2)))
                .with_cos(&[1, 0, 0], Expr::one())
                .with_cos(&[0, 1, -1], Expr::constant(0.3));
            let observable = Observable::new(g, &domain)?;
            Ok(SystemBundle {
                system,
                density,
                observable,
            })
        }
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}
