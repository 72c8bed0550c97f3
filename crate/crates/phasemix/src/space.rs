//! Phase-space primitives: torus arithmetic, action domains, point types.
//!
//! The phase space is `T^n x Omega` with angles `theta` kept in `[0, 2*pi)`
//! and actions `I` ranging over a ball or a box. Everything here is immutable
//! after construction and safe to share across threads.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Reduce one angle to `[0, 2*pi)`.
pub fn wrap_angle(raw: f64) -> f64 {
    let r = raw.rem_euclid(TAU);
    // rem_euclid can round up to TAU for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Reduce every component to `[0, 2*pi)`. Idempotent.
pub fn wrap_angles(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&x| wrap_angle(x)).collect()
}

/// In-place variant of [`wrap_angles`].
pub fn wrap_angles_in_place(raw: &mut [f64]) {
    for x in raw.iter_mut() {
        *x = wrap_angle(*x);
    }
}

/// Distance between two angles along the torus (minimum over `2*pi` shifts).
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (wrap_angle(a) - wrap_angle(b)).abs();
    d.min(TAU - d)
}

/// A point `(theta, I)` on `T^n x R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub theta: Vec<f64>,
    pub action: Vec<f64>,
}

impl PhasePoint {
    /// Build a point, wrapping the angles. Errors on mismatched dimensions.
    pub fn new(theta: Vec<f64>, action: Vec<f64>) -> Result<Self> {
        if theta.is_empty() || theta.len() != action.len() {
            return Err(Error::DimensionMismatch {
                expected: action.len().max(1),
                got: theta.len(),
            });
        }
        Ok(Self {
            theta: wrap_angles(&theta),
            action,
        })
    }

    pub fn dim(&self) -> usize {
        self.action.len()
    }

    /// Torus-aware distance: per-component angle distance and Euclidean
    /// action distance, combined in quadrature.
    pub fn distance(&self, other: &PhasePoint) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.theta.iter().zip(&other.theta) {
            let d = angle_distance(*a, *b);
            s += d * d;
        }
        for (a, b) in self.action.iter().zip(&other.action) {
            s += (a - b) * (a - b);
        }
        s.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite()) && self.action.iter().all(|x| x.is_finite())
    }
}

/// The action domain `Omega`: a Euclidean ball or an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionDomain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ActionDomain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::DegenerateDomain("empty center".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::DegenerateDomain(format!("radius {radius} <= 0")));
        }
        Ok(ActionDomain::Ball { center, radius })
    }

    pub fn cuboid(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DegenerateDomain("empty or mismatched bounds".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::DegenerateDomain(
                "lower bound must be strictly below upper bound on every axis".into(),
            ));
        }
        Ok(ActionDomain::Box { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionDomain::Ball { center, .. } => center.len(),
            ActionDomain::Box { lower, .. } => lower.len(),
        }
    }

    /// Exact Lebesgue volume of the domain.
    pub fn volume(&self) -> f64 {
        match self {
            ActionDomain::Ball { center, radius } => unit_ball_volume(center.len()) * radius.powi(center.len() as i32),
            ActionDomain::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| u - l).product()
            }
        }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        match self {
            ActionDomain::Ball { center, radius } => {
                let r2: f64 = point
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum();
                r2 <= radius * radius
            }
            ActionDomain::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= *l && *x <= *u),
        }
    }

    /// Smallest axis-aligned box containing the domain.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ActionDomain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            ActionDomain::Box { lower, upper } => (lower.clone(), upper.clone()),
        }
    }

    /// Distance from `point` to the domain boundary (positive inside).
    pub fn boundary_distance(&self, point: &[f64]) -> f64 {
        match self {
            ActionDomain::Ball { center, radius } => {
                let r: f64 = point
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
                    .sqrt();
                radius - r
            }
            ActionDomain::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| (x - l).min(u - x))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    // pi^(n/2) / Gamma(n/2 + 1), by the half-integer recurrence.
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(n - 2) * TAU / n as f64,
    }
}

/// Euclidean point-to-hyperplane distance from `omega` to the resonance
/// hyperplane `{w : k.w = 0}`: `|k.omega| / |k|_2`.
pub fn distance_to_resonance(omega: &[f64], k: &[i32]) -> Result<f64> {
    if omega.len() != k.len() {
        return Err(Error::DimensionMismatch {
            expected: omega.len(),
            got: k.len(),
        });
    }
    let norm2: f64 = k.iter().map(|&c| (c as f64) * (c as f64)).sum();
    if norm2 == 0.0 {
        return Err(Error::ZeroWaveVector);
    }
    let dot: f64 = omega.iter().zip(k).map(|(w, &c)| w * c as f64).sum();
    Ok(dot.abs() / norm2.sqrt())
}

/// Neumaier compensated summation. Reductions built on this are insensitive
/// to partitioning at the 1e-16 level, which keeps parallel and serial runs
/// in agreement well below the 1e-12 contract.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.comp += other.comp;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of f64.
pub fn csum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

// ---------------------------------------------------------------------------
// Small dense linear algebra (2n x 2n Jacobians, n <= 4).
// ---------------------------------------------------------------------------

/// Determinant by Gaussian elimination with partial pivoting. `a` is a
/// row-major `n x n` matrix and is consumed.
pub fn determinant(mut a: Vec<f64>, n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let d = a[col * n + col];
        det *= d;
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
        }
    }
    det
}

/// Solve `A x = b` in place for a small row-major system; `b` becomes `x`.
pub fn solve_dense(mut a: Vec<f64>, b: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col] == 0.0 {
            return Err(Error::InvalidParameter("singular linear system".into()));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}
