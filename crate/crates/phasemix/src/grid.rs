//! Tensor quadrature grids over action domains, plus uniform torus grids.
//!
//! Grids are the substrate for every `L^1` / `L^inf` / `inf` computation in
//! the crate. Boxes use tensor midpoint or Gauss-Legendre rules; balls are
//! integrated by box embedding with the indicator applied (nodes outside the
//! ball are dropped), so the weight sum approximates the ball volume at
//! `O(h)` while box weight sums are exact to rounding.

use crate::error::{Error, Result};
use crate::space::{csum, ActionDomain};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    Midpoint,
    GaussLegendre,
}

/// Quadrature nodes and weights over an action domain.
#[derive(Debug, Clone)]
pub struct ActionGrid {
    dim: usize,
    /// Node coordinates, flattened row-major (`len = dim * len()`).
    nodes: Vec<f64>,
    weights: Vec<f64>,
    domain: ActionDomain,
    resolution: Vec<usize>,
    rule: QuadratureRule,
}

impl ActionGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn domain(&self) -> &ActionDomain {
        &self.domain
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    /// Largest per-axis node spacing, used for Lipschitz corrections.
    pub fn max_spacing(&self) -> f64 {
        let (lower, upper) = self.domain.bounding_box();
        self.resolution
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(&r, (l, u))| (u - l) / r as f64)
            .fold(0.0, f64::max)
    }

    /// Half of the cell diagonal: the largest distance from a node to a point
    /// it represents (midpoint rule).
    pub fn half_diagonal(&self) -> f64 {
        let (lower, upper) = self.domain.bounding_box();
        let s: f64 = self
            .resolution
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(&r, (l, u))| {
                let h = (u - l) / r as f64;
                0.25 * h * h
            })
            .sum();
        s.sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(move |i| (self.node(i), self.weights[i]))
    }

    /// Compensated quadrature of `f` over the grid.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        csum(self.iter().map(|(x, w)| w * f(x)))
    }

    pub fn weight_sum(&self) -> f64 {
        csum(self.weights.iter().copied())
    }
}

/// Build a tensor quadrature grid. `resolution` gives the per-axis node
/// count (>= 2). For ball domains, nodes outside the ball are dropped.
pub fn build_grid(
    domain: &ActionDomain,
    resolution: &[usize],
    rule: QuadratureRule,
) -> Result<ActionGrid> {
    let dim = domain.dim();
    if resolution.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: resolution.len(),
        });
    }
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::InvalidParameter(
            "grid resolution must be >= 2 per axis".into(),
        ));
    }
    let (lower, upper) = domain.bounding_box();

    // Per-axis 1D nodes and weights on [lower, upper].
    let mut axis_nodes: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut axis_weights: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for a in 0..dim {
        let (n1, w1) = match rule {
            QuadratureRule::Midpoint => midpoint_1d(lower[a], upper[a], resolution[a]),
            QuadratureRule::GaussLegendre => gauss_legendre_1d(lower[a], upper[a], resolution[a]),
        };
        axis_nodes.push(n1);
        axis_weights.push(w1);
    }

    let total: usize = resolution.iter().product();
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut point = vec![0.0; dim];
    let mut index = vec![0usize; dim];
    let is_ball = matches!(domain, ActionDomain::Ball { .. });

    // Boundary cells of a ball are subdivided so the discrete volume tracks
    // the true one at well under the per-cell indicator error.
    let refine = if dim <= 2 { 8 } else { 4 };
    let cell_half: Vec<f64> = (0..dim)
        .map(|a| 0.5 * (upper[a] - lower[a]) / resolution[a] as f64)
        .collect();
    let half_diag = cell_half.iter().map(|h| h * h).sum::<f64>().sqrt();

    'outer: loop {
        let mut w = 1.0;
        for a in 0..dim {
            point[a] = axis_nodes[a][index[a]];
            w *= axis_weights[a][index[a]];
        }
        if !is_ball {
            nodes.extend_from_slice(&point);
            weights.push(w);
        } else {
            let bd = domain.boundary_distance(&point);
            if rule == QuadratureRule::Midpoint && bd.abs() <= half_diag {
                subdivide_ball_cell(
                    domain,
                    &point,
                    &cell_half,
                    refine,
                    &mut nodes,
                    &mut weights,
                );
            } else if bd > 0.0 {
                nodes.extend_from_slice(&point);
                weights.push(w);
            }
        }
        // Odometer increment, last axis fastest.
        for a in (0..dim).rev() {
            index[a] += 1;
            if index[a] < resolution[a] {
                continue 'outer;
            }
            index[a] = 0;
            if a == 0 {
                break 'outer;
            }
        }
    }

    Ok(ActionGrid {
        dim,
        nodes,
        weights,
        domain: domain.clone(),
        resolution: resolution.to_vec(),
        rule,
    })
}

fn subdivide_ball_cell(
    domain: &ActionDomain,
    center: &[f64],
    cell_half: &[f64],
    refine: usize,
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) {
    let dim = center.len();
    let sub_w: f64 = cell_half
        .iter()
        .map(|h| 2.0 * h / refine as f64)
        .product();
    let mut sub = vec![0.0; dim];
    let mut index = vec![0usize; dim];
    'outer: loop {
        for a in 0..dim {
            let hs = 2.0 * cell_half[a] / refine as f64;
            sub[a] = center[a] - cell_half[a] + (index[a] as f64 + 0.5) * hs;
        }
        if domain.contains(&sub) {
            nodes.extend_from_slice(&sub);
            weights.push(sub_w);
        }
        for a in (0..dim).rev() {
            index[a] += 1;
            if index[a] < refine {
                continue 'outer;
            }
            index[a] = 0;
            if a == 0 {
                break 'outer;
            }
        }
    }
}

fn midpoint_1d(lower: f64, upper: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (upper - lower) / n as f64;
    let nodes = (0..n).map(|i| lower + (i as f64 + 0.5) * h).collect();
    (nodes, vec![h; n])
}

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n,
/// then affinely mapped to [lower, upper].
fn gauss_legendre_1d(lower: f64, upper: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre_reference(n);
    let half = 0.5 * (upper - lower);
    let mid = 0.5 * (upper + lower);
    (
        x.iter().map(|&t| mid + half * t).collect(),
        w.iter().map(|&v| v * half).collect(),
    )
}

/// Reference Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        let (_, d) = legendre_and_derivative(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Uniform tensor grid on `T^n` with product weights `(2*pi / per_axis)^n`.
/// Exact for trigonometric polynomials with per-axis order `< per_axis`.
#[derive(Debug, Clone)]
pub struct TorusGrid {
    dim: usize,
    per_axis: usize,
    nodes: Vec<f64>,
}

impl TorusGrid {
    pub fn new(dim: usize, per_axis: usize) -> Self {
        assert!(per_axis >= 1 && dim >= 1);
        let total = per_axis.pow(dim as u32);
        let h = TAU / per_axis as f64;
        let mut nodes = Vec::with_capacity(total * dim);
        let mut index = vec![0usize; dim];
        'outer: loop {
            for a in 0..dim {
                nodes.push(index[a] as f64 * h);
            }
            for a in (0..dim).rev() {
                index[a] += 1;
                if index[a] < per_axis {
                    continue 'outer;
                }
                index[a] = 0;
                if a == 0 {
                    break 'outer;
                }
            }
        }
        Self {
            dim,
            per_axis,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Weight shared by every node.
    pub fn weight(&self) -> f64 {
        (TAU / self.per_axis as f64).powi(self.dim as i32)
    }

    /// Compensated quadrature over the torus.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let w = self.weight();
        csum((0..self.len()).map(|i| w * f(self.node(i))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_midpoint_weight_sum_is_exact() {
        let domain = ActionDomain::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let grid = build_grid(&domain, &[10, 10], QuadratureRule::Midpoint).unwrap();
        assert_eq!(grid.len(), 100);
        assert!((grid.weight_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disk_weight_sum_approximates_pi() {
        let domain = ActionDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let grid = build_grid(&domain, &[200, 200], QuadratureRule::Midpoint).unwrap();
        let err = (grid.weight_sum() - std::f64::consts::PI).abs();
        assert!(err < 1e-3, "disk area error {err:.2e}");
        for i in 0..grid.len() {
            assert!(domain.contains(grid.node(i)));
        }
    }

    #[test]
    fn gauss_legendre_integrates_quartic_exactly() {
        let domain = ActionDomain::cuboid(vec![-1.0], vec![1.0]).unwrap();
        let grid = build_grid(&domain, &[5], QuadratureRule::GaussLegendre).unwrap();
        let integral = grid.integrate(|x| x[0].powi(4));
        assert!((integral - 0.4).abs() < 1e-14, "got {integral}");
    }

    #[test]
    fn midpoint_is_second_order() {
        let domain = ActionDomain::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let f = |x: &[f64]| (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + x[0] * x[1];
        let exact = {
            // Separable closed form: int sin(3x) dx * int cos(2y) dy + 1/4.
            let sx = (1.0 - 3.0_f64.cos()) / 3.0;
            let cy = 2.0_f64.sin() / 2.0;
            sx * cy + 0.25
        };
        let coarse = build_grid(&domain, &[20, 20], QuadratureRule::Midpoint)
            .unwrap()
            .integrate(f);
        let fine = build_grid(&domain, &[40, 40], QuadratureRule::Midpoint)
            .unwrap()
            .integrate(f);
        let ratio = (coarse - exact).abs() / (fine - exact).abs();
        assert!((ratio - 4.0).abs() < 0.4, "order-2 ratio was {ratio}");
    }

    #[test]
    fn degenerate_resolution_rejected() {
        let domain = ActionDomain::cuboid(vec![0.0], vec![1.0]).unwrap();
        assert!(build_grid(&domain, &[1], QuadratureRule::Midpoint).is_err());
    }

    #[test]
    fn torus_grid_integrates_trig_polys_exactly() {
        let grid = TorusGrid::new(2, 5);
        // cos(2 theta1 + theta2) integrates to zero; order below per_axis.
        let zero = grid.integrate(|t| (2.0 * t[0] + t[1]).cos());
        assert!(zero.abs() < 1e-12);
        let one = grid.integrate(|_| 1.0);
        assert!((one - TAU * TAU).abs() < 1e-10);
    }
}
