//! Exact integrable flow and symplectic integration of perturbed flows.
//!
//! Hamilton's equations are taken in the convention
//! `dtheta/dt = dH/dI`, `dI/dt = -dH/dtheta`.
//!
//! The default scheme is Strang splitting of `h(I) + f(theta, I)`: the
//! `h`-flow is an exact twist and the `f`-flow is an exact kick when the
//! coefficients are action-independent, otherwise a single implicit-midpoint
//! substep. Implicit midpoint is also available for the full Hamiltonian and
//! for pointwise Hamiltonians (normal-form flows) that are not trigonometric
//! polynomials; it is symplectic for any Hamiltonian and its tangent map is
//! a Cayley transform, so variational Jacobians stay symplectic to rounding.

use crate::error::{Error, Result};
use crate::model::{HamiltonianSystem, IntegrablePart, TrigPolyField};
use crate::space::{determinant, solve_dense, wrap_angles_in_place, PhasePoint};

/// Hard ceiling on `|t| / dt`.
pub const STEP_GUARD: f64 = 1e9;

/// Fixed-point tolerance for implicit substeps.
const FIXED_POINT_TOL: f64 = 1e-14;
const FIXED_POINT_MAX_ITERS: usize = 200;

/// A Hamiltonian evaluable pointwise with first (and optionally second)
/// derivatives. Angles enter unwrapped; implementations must be 2*pi
/// periodic.
pub trait EnergyField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64], action: &[f64]) -> f64;
    /// `(dH/dtheta, dH/dI)`.
    fn gradient(&self, theta: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>);
    /// `(H_theta_theta, H_theta_I, H_II)` row-major blocks, if available.
    fn hessian_blocks(
        &self,
        _theta: &[f64],
        _action: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        None
    }
}

/// Full trigonometric Hamiltonian `h(I) + f(theta, I)`.
pub struct TrigHamiltonian<'a> {
    pub integrable: &'a IntegrablePart,
    pub perturbation: &'a TrigPolyField,
}

impl<'a> TrigHamiltonian<'a> {
    pub fn of(system: &'a HamiltonianSystem) -> Self {
        Self {
            integrable: &system.integrable,
            perturbation: &system.perturbation,
        }
    }
}

impl EnergyField for TrigHamiltonian<'_> {
    fn dim(&self) -> usize {
        self.integrable.dim()
    }

    fn value(&self, theta: &[f64], action: &[f64]) -> f64 {
        self.integrable.h_value(action) + self.perturbation.eval_at(theta, action)
    }

    fn gradient(&self, theta: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, gt, mut ga) = self.perturbation.value_and_grads(theta, action);
        for (g, w) in ga.iter_mut().zip(self.integrable.freq(action)) {
            *g += w;
        }
        (gt, ga)
    }

    fn hessian_blocks(
        &self,
        theta: &[f64],
        action: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (htt, hti, mut hii) = self.perturbation.hessian_blocks(theta, action);
        for (v, w) in hii.iter_mut().zip(self.integrable.freq_jacobian(action)) {
            *v += w;
        }
        Some((htt, hti, hii))
    }
}

/// A trigonometric polynomial used directly as a Hamiltonian (generators).
pub struct FieldHamiltonian<'a>(pub &'a TrigPolyField);

impl EnergyField for FieldHamiltonian<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, theta: &[f64], action: &[f64]) -> f64 {
        self.0.eval_at(theta, action)
    }

    fn gradient(&self, theta: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, gt, ga) = self.0.value_and_grads(theta, action);
        (gt, ga)
    }

    fn hessian_blocks(
        &self,
        theta: &[f64],
        action: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        Some(self.0.hessian_blocks(theta, action))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    StrangSplitting,
    ImplicitMidpoint,
}

enum FlowKind<'a> {
    Exact(&'a IntegrablePart),
    Strang {
        h: &'a IntegrablePart,
        f: &'a TrigPolyField,
    },
    MidpointTrig {
        h: &'a IntegrablePart,
        f: &'a TrigPolyField,
    },
    /// Strang splitting with an exact twist for `h` and an implicit-midpoint
    /// substep for a pointwise rest field.
    StrangGeneral {
        h: &'a IntegrablePart,
        rest: &'a dyn EnergyField,
    },
    MidpointGeneral {
        field: &'a dyn EnergyField,
    },
}

/// A concrete flow: the exact integrable map or a symplectic scheme with a
/// fixed step size.
pub struct FlowSpec<'a> {
    kind: FlowKind<'a>,
    dt: f64,
}

impl<'a> FlowSpec<'a> {
    /// Exact integrable flow `(theta, I) -> (theta + t omega(I), I)`.
    pub fn exact_integrable(integrable: &'a IntegrablePart) -> Self {
        Self {
            kind: FlowKind::Exact(integrable),
            dt: 1.0,
        }
    }

    /// Symplectic integration of a trigonometric Hamiltonian system.
    pub fn symplectic(system: &'a HamiltonianSystem, dt: f64, scheme: Scheme) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        let kind = match scheme {
            Scheme::StrangSplitting => FlowKind::Strang {
                h: &system.integrable,
                f: &system.perturbation,
            },
            Scheme::ImplicitMidpoint => FlowKind::MidpointTrig {
                h: &system.integrable,
                f: &system.perturbation,
            },
        };
        Ok(Self { kind, dt })
    }

    /// Strang splitting of `h + rest` for a pointwise rest field.
    pub fn strang_general(
        h: &'a IntegrablePart,
        rest: &'a dyn EnergyField,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        Ok(Self {
            kind: FlowKind::StrangGeneral { h, rest },
            dt,
        })
    }

    /// Implicit midpoint on an arbitrary pointwise Hamiltonian.
    pub fn midpoint_general(field: &'a dyn EnergyField, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        Ok(Self {
            kind: FlowKind::MidpointGeneral { field },
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Same flow with a different step (for dt/2 refinement checks).
    pub fn with_dt(&self, dt: f64) -> Self {
        FlowSpec {
            kind: match self.kind {
                FlowKind::Exact(h) => FlowKind::Exact(h),
                FlowKind::Strang { h, f } => FlowKind::Strang { h, f },
                FlowKind::MidpointTrig { h, f } => FlowKind::MidpointTrig { h, f },
                FlowKind::StrangGeneral { h, rest } => FlowKind::StrangGeneral { h, rest },
                FlowKind::MidpointGeneral { field } => FlowKind::MidpointGeneral { field },
            },
            dt,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.kind, FlowKind::Exact(_))
    }

    /// Energy of the underlying Hamiltonian at a point.
    pub fn energy(&self, point: &PhasePoint) -> f64 {
        match &self.kind {
            FlowKind::Exact(h) => h.h_value(&point.action),
            FlowKind::Strang { h, f } | FlowKind::MidpointTrig { h, f } => {
                h.h_value(&point.action) + f.eval_at(&point.theta, &point.action)
            }
            FlowKind::StrangGeneral { h, rest } => {
                h.h_value(&point.action) + rest.value(&point.theta, &point.action)
            }
            FlowKind::MidpointGeneral { field } => field.value(&point.theta, &point.action),
        }
    }

    /// Flow the point for time `t` (either sign).
    pub fn evolve(&self, point: &PhasePoint, t: f64) -> Result<PhasePoint> {
        if let FlowKind::Exact(h) = self.kind {
            return Ok(integrable_flow(point, t, |i| h.freq(i)));
        }
        let steps = (t.abs() / self.dt).ceil();
        if steps > STEP_GUARD {
            return Err(Error::StepGuard {
                steps,
                guard: STEP_GUARD,
            });
        }
        let mut theta = point.theta.clone();
        let mut action = point.action.clone();
        self.advance(&mut theta, &mut action, t)?;
        wrap_angles_in_place(&mut theta);
        let out = PhasePoint { theta, action };
        if !out.is_finite() {
            return Err(Error::NonFiniteState { t });
        }
        Ok(out)
    }

    /// Flow through an increasing list of times, recording each state and
    /// its energy. Times must be nonnegative and strictly increasing.
    pub fn trajectory(&self, point: &PhasePoint, times: &[f64]) -> Result<Trajectory> {
        if times.windows(2).any(|w| w[0] >= w[1]) || times.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::InvalidParameter(
                "trajectory times must be nonnegative and strictly increasing".into(),
            ));
        }
        let mut states = Vec::with_capacity(times.len());
        let mut energies = Vec::with_capacity(times.len());
        if let FlowKind::Exact(_) = self.kind {
            for &t in times {
                let s = self.evolve(point, t)?;
                energies.push(self.energy(&s));
                states.push(s);
            }
        } else {
            let mut theta = point.theta.clone();
            let mut action = point.action.clone();
            let mut now = 0.0;
            for &t in times {
                self.advance(&mut theta, &mut action, t - now)?;
                now = t;
                let mut th = theta.clone();
                wrap_angles_in_place(&mut th);
                let s = PhasePoint {
                    theta: th,
                    action: action.clone(),
                };
                if !s.is_finite() {
                    return Err(Error::NonFiniteState { t });
                }
                energies.push(self.energy(&s));
                states.push(s);
            }
        }
        Ok(Trajectory {
            times: times.to_vec(),
            states,
            energies,
        })
    }

    /// Integrate for time `t` without wrapping (internal).
    fn advance(&self, theta: &mut [f64], action: &mut [f64], t: f64) -> Result<()> {
        if t == 0.0 {
            return Ok(());
        }
        let dir = t.signum();
        let total = t.abs();
        let n_full = (total / self.dt).floor() as u64;
        let rem = total - n_full as f64 * self.dt;
        let h = dir * self.dt;
        for _ in 0..n_full {
            self.step(theta, action, h)?;
        }
        if rem > 1e-15 * total.max(1.0) {
            self.step(theta, action, dir * rem)?;
        }
        Ok(())
    }

    fn step(&self, theta: &mut [f64], action: &mut [f64], dt: f64) -> Result<()> {
        match &self.kind {
            FlowKind::Exact(_) => unreachable!("exact flow does not step"),
            FlowKind::Strang { h, f } => {
                drift(theta, action, h, 0.5 * dt);
                kick_or_midpoint(theta, action, f, dt)?;
                drift(theta, action, h, 0.5 * dt);
                Ok(())
            }
            FlowKind::MidpointTrig { h, f } => {
                let field = TrigHamiltonian {
                    integrable: h,
                    perturbation: f,
                };
                midpoint_step(theta, action, &field, dt)
            }
            FlowKind::StrangGeneral { h, rest } => {
                drift(theta, action, h, 0.5 * dt);
                midpoint_step(theta, action, *rest, dt)?;
                drift(theta, action, h, 0.5 * dt);
                Ok(())
            }
            FlowKind::MidpointGeneral { field } => midpoint_step(theta, action, *field, dt),
        }
    }
}

/// Exact integrable flow: action unchanged bitwise, angles advanced by
/// `t * omega(I)` and wrapped.
pub fn integrable_flow(
    point: &PhasePoint,
    t: f64,
    omega: impl Fn(&[f64]) -> Vec<f64>,
) -> PhasePoint {
    let w = omega(&point.action);
    let mut theta: Vec<f64> = point
        .theta
        .iter()
        .zip(&w)
        .map(|(th, wi)| th + t * wi)
        .collect();
    wrap_angles_in_place(&mut theta);
    PhasePoint {
        theta,
        action: point.action.clone(),
    }
}

fn drift(theta: &mut [f64], action: &[f64], h: &IntegrablePart, dt: f64) {
    for (th, w) in theta.iter_mut().zip(h.freq(action)) {
        *th += dt * w;
    }
}

/// The `f`-flow substep: an exact kick when the coefficients do not depend
/// on the actions, one implicit-midpoint substep otherwise.
fn kick_or_midpoint(
    theta: &mut [f64],
    action: &mut [f64],
    f: &TrigPolyField,
    dt: f64,
) -> Result<()> {
    if f.is_zero() {
        return Ok(());
    }
    if f.is_action_independent() {
        let gt = f.grad_theta(theta, action);
        for (a, g) in action.iter_mut().zip(gt) {
            *a -= dt * g;
        }
        return Ok(());
    }
    let field = FieldHamiltonian(f);
    midpoint_step(theta, action, &field, dt)
}

/// One implicit-midpoint step `z' = z + dt X_H((z + z') / 2)`, solved by
/// fixed-point iteration on the midpoint.
fn midpoint_step(
    theta: &mut [f64],
    action: &mut [f64],
    field: &dyn EnergyField,
    dt: f64,
) -> Result<()> {
    let n = theta.len();
    let scale: f64 = 1.0
        + theta
            .iter()
            .chain(action.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut mid_t = theta.to_vec();
    let mut mid_a = action.to_vec();
    // Explicit Euler predictor for the midpoint.
    let (gt, ga) = field.gradient(theta, action);
    for j in 0..n {
        mid_t[j] += 0.5 * dt * ga[j];
        mid_a[j] -= 0.5 * dt * gt[j];
    }
    let mut converged = false;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let (gt, ga) = field.gradient(&mid_t, &mid_a);
        let mut delta = 0.0f64;
        for j in 0..n {
            let nt = theta[j] + 0.5 * dt * ga[j];
            let na = action[j] - 0.5 * dt * gt[j];
            delta = delta.max((nt - mid_t[j]).abs()).max((na - mid_a[j]).abs());
            mid_t[j] = nt;
            mid_a[j] = na;
        }
        if delta <= FIXED_POINT_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InvalidParameter(format!(
            "implicit midpoint failed to converge with dt = {dt}"
        )));
    }
    for j in 0..n {
        theta[j] = 2.0 * mid_t[j] - theta[j];
        action[j] = 2.0 * mid_a[j] - action[j];
    }
    Ok(())
}

/// A recorded flow: states and energies along increasing times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    /// Maximum `|E(t) - E(0)|` along the recording.
    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.energies.first().copied().unwrap_or(0.0);
        self.energies
            .iter()
            .map(|e| (e - e0).abs())
            .fold(0.0, f64::max)
    }

    /// Maximum action displacement from the initial state.
    pub fn max_action_excursion(&self) -> f64 {
        let first = match self.states.first() {
            Some(s) => &s.action,
            None => return 0.0,
        };
        self.states
            .iter()
            .map(|s| {
                s.action
                    .iter()
                    .zip(first)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Determinant of the `2n x 2n` Jacobian of the time-`t` map, by central
/// finite differences of the flow. The exact integrable flow returns 1
/// directly (its Jacobian is unit triangular).
pub fn flow_jacobian_det(flow: &FlowSpec, point: &PhasePoint, t: f64) -> Result<f64> {
    if flow.is_exact() {
        return Ok(1.0);
    }
    let n = point.dim();
    let m = 2 * n;
    let delta = 1e-6;
    let mut jac = vec![0.0; m * m];
    for col in 0..m {
        let mut plus = point.clone();
        let mut minus = point.clone();
        if col < n {
            plus.theta[col] += delta;
            minus.theta[col] -= delta;
        } else {
            plus.action[col - n] += delta;
            minus.action[col - n] -= delta;
        }
        let fp = flow.evolve(&plus, t)?;
        let fm = flow.evolve(&minus, t)?;
        for row in 0..m {
            let d = if row < n {
                angle_diff_signed(fp.theta[row], fm.theta[row])
            } else {
                fp.action[row - n] - fm.action[row - n]
            };
            jac[row * m + col] = d / (2.0 * delta);
        }
    }
    Ok(determinant(jac, m))
}

/// Signed angle difference `a - b` reduced to `(-pi, pi]`.
pub fn angle_diff_signed(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut d = (a - b).rem_euclid(tau);
    if d > std::f64::consts::PI {
        d -= tau;
    }
    d
}

/// A map of phase space (e.g. a normal-form transform) usable in conjugacy
/// diagnostics.
pub trait PhaseMap {
    fn apply(&self, point: &PhasePoint) -> Result<PhasePoint>;
}

/// The identity transform.
pub struct IdentityMap;

impl PhaseMap for IdentityMap {
    fn apply(&self, point: &PhasePoint) -> Result<PhasePoint> {
        Ok(point.clone())
    }
}

/// Max over probes of `dist(flow_a^t(Phi(z)), Phi(flow_b^t(z)))` with the
/// torus-aware metric.
pub fn conjugacy_residual(
    transform: &dyn PhaseMap,
    flow_a: &FlowSpec,
    flow_b: &FlowSpec,
    t: f64,
    probes: &[PhasePoint],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for z in probes {
        let left = flow_a.evolve(&transform.apply(z)?, t)?;
        let right = transform.apply(&flow_b.evolve(z, t)?)?;
        worst = worst.max(left.distance(&right));
    }
    Ok(worst)
}

/// Midpoint integration of a pointwise Hamiltonian together with its
/// variational (tangent) map. Returns the final state and the row-major
/// `2n x 2n` Jacobian of the time-`t` map. The tangent update per step is
/// the Cayley transform `(I - dt/2 A)^{-1} (I + dt/2 A)` with
/// `A = DX_H(midpoint)`, which is symplectic whenever `A` is Hamiltonian.
pub fn evolve_with_jacobian(
    field: &dyn EnergyField,
    point: &PhasePoint,
    t: f64,
    dt: f64,
) -> Result<(PhasePoint, Vec<f64>)> {
    let n = field.dim();
    let m = 2 * n;
    let mut theta = point.theta.clone();
    let mut action = point.action.clone();
    let mut jac: Vec<f64> = (0..m * m)
        .map(|i| if i % (m + 1) == 0 { 1.0 } else { 0.0 })
        .collect();

    let dir = t.signum();
    let total = t.abs();
    if total > 0.0 {
        let n_full = (total / dt).floor() as u64;
        let rem = total - n_full as f64 * dt;
        for step_idx in 0..=n_full {
            let h = if step_idx < n_full {
                dir * dt
            } else {
                if rem <= 1e-15 * total.max(1.0) {
                    break;
                }
                dir * rem
            };
            // State step, then the tangent update at the converged midpoint.
            let before_t = theta.clone();
            let before_a = action.clone();
            midpoint_step(&mut theta, &mut action, field, h)?;
            let mid_t: Vec<f64> = before_t
                .iter()
                .zip(&theta)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let mid_a: Vec<f64> = before_a
                .iter()
                .zip(&action)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let (htt, hti, hii) = field
                .hessian_blocks(&mid_t, &mid_a)
                .ok_or_else(|| Error::InvalidParameter("field lacks second derivatives".into()))?;
            // A = DX at the midpoint: rows (theta', I') by columns (theta, I).
            let mut a = vec![0.0; m * m];
            for i in 0..n {
                for j in 0..n {
                    a[i * m + j] = hti[j * n + i]; // (H_theta_I)^T
                    a[i * m + (n + j)] = hii[i * n + j];
                    a[(n + i) * m + j] = -htt[i * n + j];
                    a[(n + i) * m + (n + j)] = -hti[i * n + j];
                }
            }
            // (I - h/2 A) J' = (I + h/2 A) J, column by column.
            let mut lhs = vec![0.0; m * m];
            let mut rhs_mat = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    let id = if i == j { 1.0 } else { 0.0 };
                    lhs[i * m + j] = id - 0.5 * h * a[i * m + j];
                    rhs_mat[i * m + j] = id + 0.5 * h * a[i * m + j];
                }
            }
            let mut next = vec![0.0; m * m];
            let mut col = vec![0.0; m];
            for c in 0..m {
                for r in 0..m {
                    col[r] = (0..m).map(|k| rhs_mat[r * m + k] * jac[k * m + c]).sum();
                }
                solve_dense(lhs.clone(), &mut col, m)?;
                for r in 0..m {
                    next[r * m + c] = col[r];
                }
            }
            jac = next;
        }
    }
    let mut th = theta;
    wrap_angles_in_place(&mut th);
    let out = PhasePoint { theta: th, action };
    if !out.is_finite() {
        return Err(Error::NonFiniteState { t });
    }
    Ok((out, jac))
}

/// `J^T Omega J - Omega` max-abs entry, with `Omega` the standard skew form
/// in `(theta, I)` coordinates. Zero for exactly symplectic tangent maps.
pub fn symplectic_defect(jac: &[f64], n: usize) -> f64 {
    let m = 2 * n;
    debug_assert_eq!(jac.len(), m * m);
    let omega = |i: usize, j: usize| -> f64 {
        if i < n && j == n + i {
            -1.0
        } else if i >= n && j == i - n {
            1.0
        } else {
            0.0
        }
    };
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mut v = 0.0;
            for r in 0..m {
                for s in 0..m {
                    let om = omega(r, s);
                    if om != 0.0 {
                        v += jac[r * m + i] * om * jac[s * m + j];
                    }
                }
            }
            worst = worst.max((v - omega(i, j)).abs());
        }
    }
    worst
}

/// Step-size heuristic `min(1e-2, 0.1 / sup |omega|)`.
pub fn suggested_dt(omega_sup: f64) -> f64 {
    (0.1 / omega_sup.max(1e-12)).min(1e-2)
}
