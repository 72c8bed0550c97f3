//! Resonant/nonresonant partition of the action domain, resonant
//! probability mass, and `(K, alpha)` parameter schedules.
//!
//! A point is resonant when its frequency `omega(I)` lies within `alpha` of
//! some hyperplane `{k.w = 0}` with `0 < |k|_1 <= K`. Mode-order truncation
//! uses the `l1` norm; point-to-hyperplane distance is Euclidean,
//! `|k.w| / |k|_2`. Wavevectors are enumerated once per `+/-` pair (the
//! distance is sign-invariant).

use crate::error::{Error, Result};
use crate::grid::ActionGrid;
use crate::model::{canonical_wavevectors, EnsembleDensity, IntegrablePart, WaveVec};
use crate::space::{distance_to_resonance, CompensatedSum};
use serde::Serialize;
use std::io::Write;

/// Enumeration guard for `{0 < |k|_1 <= K}`.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

/// Truncation order and resonance width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionSpec {
    /// Mode-order cutoff `K >= 1` in the `l1` norm.
    pub order: i32,
    /// Resonance half-width `alpha > 0` in frequency units.
    pub alpha: f64,
}

impl PartitionSpec {
    pub fn new(order: i32, alpha: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidParameter(format!("K must be >= 1, got {order}")));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        Ok(Self { order, alpha })
    }
}

/// Zhang-Zhang-style schedule: `K = ceil(-12 s0 log eps)`,
/// `r = eps^(1/2) / beta`, `alpha = r K / beta`.
pub fn zz_schedule(eps: f64, beta: f64, s0: f64) -> Result<(PartitionSpec, f64)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::ScheduleUndefined(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::ScheduleUndefined(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if !(s0 > 0.0) {
        return Err(Error::ScheduleUndefined(format!("s0 must be > 0, got {s0}")));
    }
    let order = (-12.0 * s0 * eps.ln()).ceil() as i32;
    let r = eps.sqrt() / beta;
    let alpha = r * order as f64 / beta;
    Ok((PartitionSpec::new(order.max(1), alpha)?, r))
}

/// Power-law schedule `K = floor(prefactor eps^(-a))` with `alpha` supplied
/// by the caller.
pub fn power_schedule(eps: f64, a: f64, prefactor: f64, alpha: f64) -> Result<PartitionSpec> {
    if !(a > 0.0) {
        return Err(Error::ScheduleUndefined(format!("a must be > 0, got {a}")));
    }
    if !(eps > 0.0) {
        return Err(Error::ScheduleUndefined(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    let order = (prefactor * eps.powf(-a)).floor() as i64;
    if order < 1 {
        return Err(Error::InvalidParameter(format!(
            "power schedule gives K = {order} < 1"
        )));
    }
    PartitionSpec::new(order as i32, alpha)
}

/// Precomputed wavevector list for membership tests.
#[derive(Debug, Clone)]
pub struct Partitioner {
    pub spec: PartitionSpec,
    reps: Vec<WaveVec>,
    /// Flattened integer components and reciprocal Euclidean norms, kept
    /// alongside for the hot classification loop.
    flat: Vec<f64>,
    inv_norm: Vec<f64>,
    dim: usize,
}

impl Partitioner {
    pub fn new(dim: usize, spec: PartitionSpec) -> Result<Self> {
        let reps = canonical_wavevectors(dim, spec.order, ENUMERATION_GUARD)?;
        let mut flat = Vec::with_capacity(reps.len() * dim);
        let mut inv_norm = Vec::with_capacity(reps.len());
        for k in &reps {
            flat.extend(k.0.iter().map(|&c| c as f64));
            inv_norm.push(1.0 / k.norm());
        }
        Ok(Self {
            spec,
            reps,
            flat,
            inv_norm,
            dim,
        })
    }

    pub fn representatives(&self) -> &[WaveVec] {
        &self.reps
    }

    /// Distance from `omega` to the nearest enumerated hyperplane, with the
    /// minimizing wavevector.
    pub fn nearest(&self, omega: &[f64]) -> (&WaveVec, f64) {
        debug_assert_eq!(omega.len(), self.dim);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..self.reps.len() {
            let row = &self.flat[i * self.dim..(i + 1) * self.dim];
            let mut dot = 0.0;
            for (a, b) in row.iter().zip(omega) {
                dot += a * b;
            }
            let d = dot.abs() * self.inv_norm[i];
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (&self.reps[best], best_d)
    }

    /// Membership flag, minimizing wavevector and achieved distance.
    pub fn classify(&self, omega: &[f64]) -> (bool, &WaveVec, f64) {
        let (k, d) = self.nearest(omega);
        (d < self.spec.alpha, k, d)
    }
}

/// Per-node partition data over an action grid.
#[derive(Debug, Clone)]
pub struct PartitionMap {
    pub spec: PartitionSpec,
    pub nodes: Vec<Vec<f64>>,
    pub resonant: Vec<bool>,
    pub nearest: Vec<WaveVec>,
    pub distance: Vec<f64>,
}

impl PartitionMap {
    pub fn build(
        grid: &ActionGrid,
        integrable: &IntegrablePart,
        partitioner: &Partitioner,
    ) -> Self {
        let mut nodes = Vec::with_capacity(grid.len());
        let mut resonant = Vec::with_capacity(grid.len());
        let mut nearest = Vec::with_capacity(grid.len());
        let mut distance = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let act = grid.node(i);
            let omega = integrable.freq(act);
            let (flag, k, d) = partitioner.classify(&omega);
            nodes.push(act.to_vec());
            resonant.push(flag);
            nearest.push(k.clone());
            distance.push(d);
        }
        Self {
            spec: partitioner.spec,
            nodes,
            resonant,
            nearest,
            distance,
        }
    }

    pub fn resonant_fraction(&self) -> f64 {
        if self.resonant.is_empty() {
            return 0.0;
        }
        self.resonant.iter().filter(|&&f| f).count() as f64 / self.resonant.len() as f64
    }

    /// CSV with node coordinates, flag, minimizing `k` and distance.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let dim = self.nodes.first().map_or(0, Vec::len);
        let coords: Vec<String> = (1..=dim).map(|j| format!("I{j}")).collect();
        writeln!(w, "{},resonant,nearest_k,distance", coords.join(","))?;
        for i in 0..self.nodes.len() {
            let coord: Vec<String> = self.nodes[i].iter().map(|x| format!("{x}")).collect();
            writeln!(
                w,
                "{},{},\"{}\",{}",
                coord.join(","),
                u8::from(self.resonant[i]),
                self.nearest[i],
                self.distance[i]
            )?;
        }
        Ok(())
    }
}

/// Lipschitz constant of `I -> d(omega(I), union R_k)`: each hyperplane
/// distance is 1-Lipschitz in `omega`, so the composite is bounded by the
/// largest frequency-Jacobian norm over the grid (Frobenius, conservative).
fn distance_lipschitz(grid: &ActionGrid, integrable: &IntegrablePart) -> f64 {
    let mut worst = 0.0f64;
    let stride = (grid.len() / 512).max(1);
    for i in (0..grid.len()).step_by(stride) {
        let j = integrable.freq_jacobian(grid.node(i));
        worst = worst.max(j.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    worst
}

/// Resonant and complementary nonresonant probability mass for one width.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MassSplit {
    pub resonant: f64,
    pub nonresonant: f64,
}

/// Sharp resonant probability mass
/// `P_res = int_{N} rho_0(I) dI`
/// by masked quadrature of the action marginal, for a sweep of widths with
/// a common order `K`. The complementary nonresonant mass comes from the
/// same pass, so the two sum to the grid quadrature of `rho_0`.
///
/// Cells whose distance bracket straddles any swept threshold are subdivided
/// (`refine` per axis); the refined cell set is fixed across the whole sweep,
/// so `P_res` is exactly nondecreasing in `alpha` within one call.
pub fn resonant_mass_sweep(
    f0: &EnsembleDensity,
    integrable: &IntegrablePart,
    order: i32,
    alphas: &[f64],
    grid: &ActionGrid,
    refine: usize,
) -> Result<Vec<MassSplit>> {
    if alphas.is_empty() {
        return Ok(Vec::new());
    }
    if alphas.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidParameter("alpha must be > 0".into()));
    }
    let dim = grid.dim();
    let partitioner = Partitioner::new(dim, PartitionSpec::new(order, alphas[0])?)?;
    let alpha_min = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let alpha_max = alphas.iter().cloned().fold(0.0f64, f64::max);
    let lip = distance_lipschitz(grid, integrable);
    let reach = lip * grid.half_diagonal() * 1.5 + 1e-12;

    let mut res = vec![CompensatedSum::new(); alphas.len()];
    let mut non = vec![CompensatedSum::new(); alphas.len()];
    let mut sub = vec![0.0; dim];
    let tally = |d: f64, mass: f64, res: &mut [CompensatedSum], non: &mut [CompensatedSum]| {
        for (ai, &alpha) in alphas.iter().enumerate() {
            if d < alpha {
                res[ai].add(mass);
            } else {
                non[ai].add(mass);
            }
        }
    };
    for i in 0..grid.len() {
        let act = grid.node(i);
        let w = grid.weight(i);
        let mass = w * f0.marginal(act);
        if mass == 0.0 {
            continue;
        }
        let omega = integrable.freq(act);
        let (_, d) = partitioner.nearest(&omega);
        let straddles = d - reach <= alpha_max && d + reach >= alpha_min;
        if !straddles || refine <= 1 {
            tally(d, mass, &mut res, &mut non);
            continue;
        }
        // Subdivide the cell; per-axis half width from the cell volume.
        let h = w.powf(1.0 / dim as f64);
        let sub_w = w / (refine as f64).powi(dim as i32);
        let mut index = vec![0usize; dim];
        'cell: loop {
            for a in 0..dim {
                sub[a] = act[a] - 0.5 * h + (index[a] as f64 + 0.5) * h / refine as f64;
            }
            let omega = integrable.freq(&sub);
            let (_, d) = partitioner.nearest(&omega);
            tally(d, sub_w * f0.marginal(&sub), &mut res, &mut non);
            for a in (0..dim).rev() {
                index[a] += 1;
                if index[a] < refine {
                    continue 'cell;
                }
                index[a] = 0;
                if a == 0 {
                    break 'cell;
                }
            }
        }
    }
    Ok(res
        .into_iter()
        .zip(non)
        .map(|(r, n)| MassSplit {
            resonant: r.total().clamp(0.0, 1.0),
            nonresonant: n.total().clamp(0.0, 1.0),
        })
        .collect())
}

/// Sharp resonant mass for a single spec.
pub fn resonant_mass(
    f0: &EnsembleDensity,
    integrable: &IntegrablePart,
    spec: &PartitionSpec,
    grid: &ActionGrid,
) -> Result<f64> {
    Ok(resonant_mass_sweep(f0, integrable, spec.order, &[spec.alpha], grid, 16)?[0].resonant)
}

/// `C^2` smoothstep: 0 below 0, 1 above 1, `6x^5 - 15x^4 + 10x^3` between.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

fn smoothstep_deriv(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        x * x * (30.0 + x * (-60.0 + 30.0 * x))
    }
}

/// Smooth cutoff supported in the nonresonant region: the product over
/// enumerated hyperplanes of `smoothstep((d_k(omega(I)) - lo) / (hi - lo))`.
/// It vanishes where any distance is below `lo` and equals 1 once every
/// distance exceeds `hi`; its gradient feeds the `L1` norms of masked modes.
pub struct SmoothMask<'a> {
    partitioner: &'a Partitioner,
    integrable: &'a IntegrablePart,
    pub lo: f64,
    pub hi: f64,
}

impl<'a> SmoothMask<'a> {
    pub fn new(
        partitioner: &'a Partitioner,
        integrable: &'a IntegrablePart,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        if !(hi > lo && lo >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mask transition needs 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            partitioner,
            integrable,
            lo,
            hi,
        })
    }

    pub fn eval(&self, action: &[f64]) -> f64 {
        self.eval_grad(action, false).0
    }

    /// Value and gradient; the gradient loop only visits hyperplanes inside
    /// the transition band, so it stays cheap even for large `K`.
    pub fn eval_grad(&self, action: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let n = action.len();
        let omega = self.integrable.freq(action);
        let width = self.hi - self.lo;
        let mut value = 1.0;
        // Active hyperplanes: (k index, step value, step derivative, d).
        let mut active: Vec<(usize, f64, f64)> = Vec::new();
        for (i, k) in self.partitioner.representatives().iter().enumerate() {
            let d = distance_to_resonance(&omega, &k.0).expect("nonzero representative");
            if d >= self.hi {
                continue;
            }
            let u = (d - self.lo) / width;
            let s = smoothstep(u);
            if s == 0.0 {
                return (0.0, vec![0.0; n]);
            }
            value *= s;
            if with_grad {
                active.push((i, s, smoothstep_deriv(u) / width));
            }
        }
        if !with_grad {
            return (value, Vec::new());
        }
        let mut grad = vec![0.0; n];
        if active.is_empty() {
            return (value, grad);
        }
        let jac = self.integrable.freq_jacobian(action);
        for &(i, s, ds) in &active {
            let k = &self.partitioner.representatives()[i];
            let dot: f64 = k.0.iter().zip(&omega).map(|(&c, w)| c as f64 * w).sum();
            let sign = dot.signum();
            let knorm = k.norm();
            // d(d_k)/dI_j = sign(k.omega) (J^T k)_j / |k|.
            for j in 0..n {
                let mut jt_k = 0.0;
                for m in 0..n {
                    jt_k += jac[m * n + j] * k.0[m] as f64;
                }
                grad[j] += (value / s) * ds * sign * jt_k / knorm;
            }
        }
        (value, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, QuadratureRule};
    use crate::model::builtin_system;
    use crate::rng::SeededRng;

    fn twist_partitioner(order: i32, alpha: f64) -> Partitioner {
        Partitioner::new(2, PartitionSpec::new(order, alpha).unwrap()).unwrap()
    }

    #[test]
    fn exact_resonance_is_flagged() {
        let p = twist_partitioner(2, 0.1);
        // omega = (1, 1) sits on {k = (1,-1)}.
        let (flag, k, d) = p.classify(&[1.0, 1.0]);
        assert!(flag);
        assert_eq!(k.0, vec![1, -1]);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn golden_frequency_is_nonresonant_at_low_order() {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let p = twist_partitioner(3, 1e-3);
        let (flag, _, d) = p.classify(&[1.0, phi]);
        assert!(!flag, "d = {d}");
        // Oracle: explicit enumeration of all |k|_1 <= 3.
        let all = crate::model::enumerate_wavevectors(2, 3, 1_000_000).unwrap();
        let min_d = all
            .iter()
            .map(|k| distance_to_resonance(&[1.0, phi], &k.0).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((min_d - d).abs() < 1e-15);
        assert!(min_d > 1e-3);
    }

    #[test]
    fn huge_alpha_makes_everything_resonant() {
        let p = twist_partitioner(2, 10.0);
        let mut rng = SeededRng::new(9, 0);
        for _ in 0..20 {
            let omega = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            assert!(p.classify(&omega).0);
        }
    }

    #[test]
    fn zz_schedule_plug_in() {
        // eps = e^-1, s0 = 1, beta = 1/2: K = 12, r = 2 e^{-1/2},
        // alpha = 2 r K.
        let (spec, r) = zz_schedule((-1.0f64).exp(), 0.5, 1.0).unwrap();
        assert_eq!(spec.order, 12);
        assert!((r - 2.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((spec.alpha - 2.0 * r * 12.0).abs() < 1e-12);
        assert!(zz_schedule(1.0, 0.5, 1.0).is_err());
        assert!(zz_schedule(0.5, 1.5, 1.0).is_err());
    }

    #[test]
    fn zz_order_grows_logarithmically() {
        let k1 = (-12.0 * (1e-2f64).ln()).ceil();
        let k2 = (-12.0 * (5e-3f64).ln()).ceil();
        // Halving eps adds 12 log 2 before the ceiling.
        assert!((k2 - k1 - 12.0 * 2.0f64.ln()).abs() <= 1.0);
        let (s1, _) = zz_schedule(1e-2, 0.5, 1.0).unwrap();
        assert_eq!(s1.order as f64, k1);
    }

    #[test]
    fn power_schedule_cases() {
        let s = power_schedule(1e-2, 0.5, 1.0, 0.05).unwrap();
        assert_eq!(s.order, 10);
        let s = power_schedule(1e-4, 0.5, 1.0, 0.05).unwrap();
        assert_eq!(s.order, 100);
        assert!(power_schedule(0.9, 0.5, 0.5, 0.05).is_err()); // K = 0
        // Monotone nonincreasing in eps.
        let k_small = power_schedule(1e-4, 0.5, 1.0, 0.05).unwrap().order;
        let k_big = power_schedule(1e-2, 0.5, 1.0, 0.05).unwrap().order;
        assert!(k_small >= k_big);
    }

    #[test]
    fn partition_map_is_consistent_and_serializes() {
        let bundle = builtin_system("twist2", 1e-3).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[24, 24],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let p = twist_partitioner(2, 0.05);
        let map = PartitionMap::build(&grid, &bundle.system.integrable, &p);
        for i in 0..map.nodes.len() {
            assert_eq!(map.resonant[i], map.distance[i] < 0.05);
        }
        let mut csv = Vec::new();
        map.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("I1,I2,resonant,nearest_k,distance\n"));
        assert_eq!(text.lines().count(), map.nodes.len() + 1);
    }

    #[test]
    fn resonant_mass_limits() {
        let bundle = builtin_system("twist2", 1e-3).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[200, 200],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        // Support lies inside D for small alpha: zero mass.
        let spec = PartitionSpec::new(2, 0.02).unwrap();
        let p0 = resonant_mass(&bundle.density, &bundle.system.integrable, &spec, &grid).unwrap();
        assert_eq!(p0, 0.0);
        // Everything resonant for huge alpha: unit mass up to the grid's
        // quadrature error.
        let spec = PartitionSpec::new(2, 10.0).unwrap();
        let p1 = resonant_mass(&bundle.density, &bundle.system.integrable, &spec, &grid).unwrap();
        assert!((p1 - 1.0).abs() < 1e-3, "{p1}");
    }

    #[test]
    fn resonant_mass_sweep_is_monotone() {
        let bundle = builtin_system("twist2", 1e-3).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[300, 300],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let alphas = [0.02, 0.08, 0.15, 0.25, 0.4];
        let masses: Vec<f64> = resonant_mass_sweep(
            &bundle.density,
            &bundle.system.integrable,
            3,
            &alphas,
            &grid,
            16,
        )
        .unwrap()
        .iter()
        .map(|m| m.resonant)
        .collect();
        for w in masses.windows(2) {
            assert!(w[1] >= w[0], "inversion: {masses:?}");
        }
        assert!(masses.iter().all(|&m| (0.0..=1.0).contains(&m)));
        // The widest band must capture some of the support.
        assert!(masses[4] > 0.0);
    }

    #[test]
    fn twist_resonant_band_geometry() {
        // For omega = I the resonant set of k = (1,-1) is the band
        // |I1 - I2| < alpha sqrt(2): check the flag matches the geometry.
        // Sampling in [0.3, 1.8]^2 keeps every other |k|_1 <= 2 plane away.
        let p = twist_partitioner(2, 0.1);
        let mut rng = SeededRng::new(4, 0);
        for _ in 0..200 {
            let i1 = rng.uniform(0.3, 1.8);
            let i2 = rng.uniform(0.3, 1.8);
            let (flag, _, _) = p.classify(&[i1, i2]);
            let band = ((i1 - i2).abs() / 2.0f64.sqrt()) < 0.1;
            assert_eq!(flag, band, "at ({i1}, {i2})");
        }
    }

    #[test]
    fn mass_complementarity() {
        let bundle = builtin_system("twist2", 1e-3).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[300, 300],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let split = resonant_mass_sweep(
            &bundle.density,
            &bundle.system.integrable,
            2,
            &[0.3],
            &grid,
            16,
        )
        .unwrap()[0];
        let total = split.resonant + split.nonresonant;
        assert!((total - 1.0).abs() < 1e-3, "complementarity defect {total}");
        assert!(split.resonant > 0.0 && split.nonresonant > 0.0);
    }

    #[test]
    fn smooth_mask_values_and_gradient() {
        let bundle = builtin_system("twist2", 1e-3).unwrap();
        let partitioner = twist_partitioner(2, 0.05);
        let mask = SmoothMask::new(&partitioner, &bundle.system.integrable, 0.05, 0.10).unwrap();
        // Deep inside D: distance >= 0.4 at the density center.
        assert_eq!(mask.eval(&[1.05, 0.45]), 1.0);
        // On a resonance plane: zero.
        assert_eq!(mask.eval(&[1.0, 1.0]), 0.0);
        // In the transition band: strictly between, gradient matches FD.
        let x = [1.0, 1.0 - 0.07 * 2.0f64.sqrt()];
        let (v, g) = mask.eval_grad(&x, true);
        assert!(v > 0.0 && v < 1.0, "mask {v}");
        for j in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (mask.eval(&xp) - mask.eval(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5, "axis {j}: {fd} vs {}", g[j]);
        }
        // Invalid transition rejected.
        assert!(SmoothMask::new(&partitioner, &bundle.system.integrable, 0.1, 0.1).is_err());
    }

    #[test]
    fn enumeration_guard_trips() {
        assert!(matches!(
            Partitioner::new(3, PartitionSpec::new(1000, 0.1).unwrap()),
            Err(Error::EnumerationGuard { .. })
        ));
    }
}
