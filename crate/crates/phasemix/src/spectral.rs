//! Fourier-mode extraction, mode products `a_k = G_k f_{0,-k}`, and the
//! high-frequency tail.
//!
//! Fields are band-limited by construction, so coefficient read-off is exact
//! and tails are finite sums. A discrete-Fourier path over angle samples is
//! also provided; for trigonometric polynomials it is a cross-check oracle
//! of the exact read-off, and for composed (normal-form) fields it is the
//! way their mode data is obtained on action grids.

use crate::error::{Error, Result};
use crate::expr::CoeffFn;
use crate::grid::{ActionGrid, TorusGrid};
use crate::model::{EnsembleDensity, Observable, TrigPolyField, WaveVec};
use crate::space::{csum, CompensatedSum};
use num_complex::Complex64;
use serde_json::json;
use std::collections::BTreeMap;
use std::f64::consts::TAU;

/// Exact coefficient read-off; the zero function if the mode is absent.
pub fn fourier_coeff(field: &TrigPolyField, k: &WaveVec) -> CoeffFn {
    field.mode(k)
}

/// The per-mode product `a_k(I) = G_k(I) f_{0,-k}(I)` with its provenance.
#[derive(Debug, Clone)]
pub struct ModeProduct {
    pub k: WaveVec,
    pub coeff: CoeffFn,
    pub source_bands: (i32, i32),
}

/// `a_k = G_k f_{0,-k}`; gradients come from the product rule inside the
/// expression trees.
pub fn mode_product(g: &Observable, f0: &EnsembleDensity, k: &WaveVec) -> ModeProduct {
    let gk = g.field().mode(k);
    let fk = f0.field().mode(&k.neg());
    ModeProduct {
        k: k.clone(),
        coeff: gk.mul(&fk),
        source_bands: (g.field().band_limit_l1(), f0.field().band_limit_l1()),
    }
}

/// High-frequency tail
/// `R_{>K} = (2 pi)^n sum_{|k|_1 > K} int |G_k(I) f_{0,-k}(I)| dI`,
/// an exact finite sum for band-limited fields.
pub fn tail(g: &Observable, f0: &EnsembleDensity, order: i32, grid: &ActionGrid) -> f64 {
    tail_with_mask(g, f0, order, grid, |_| 1.0)
}

/// Tail with a region mask folded into the quadrature weights.
pub fn tail_with_mask(
    g: &Observable,
    f0: &EnsembleDensity,
    order: i32,
    grid: &ActionGrid,
    mask: impl Fn(&[f64]) -> f64,
) -> f64 {
    let tau_n = TAU.powi(grid.dim() as i32);
    let mut total = CompensatedSum::new();
    for (k, gk) in g.field().modes() {
        if k.l1() <= order {
            continue;
        }
        let fk = f0.field().mode(&k.neg());
        if fk.is_zero() || gk.is_zero() {
            continue;
        }
        let a = gk.mul(&fk);
        total.add(grid.integrate(|i| mask(i) * a.value(i).norm()));
    }
    tau_n * total.total()
}

/// Least-squares fit of `log R_{>K}` against `K`: returns the decay rate
/// `sigma_0` (the negated slope) and the RMS residual in log space.
/// Requires at least three distinct orders with nonzero tails.
pub fn tail_decay_fit(
    g: &Observable,
    f0: &EnsembleDensity,
    orders: &[i32],
    grid: &ActionGrid,
) -> Result<(f64, f64)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &order in orders {
        let r = tail(g, f0, order, grid);
        if r > 0.0 {
            xs.push(order as f64);
            ys.push(r.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::BandLimited);
    }
    let (slope, intercept) = least_squares_line(&xs, &ys);
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum::<f64>()
        / xs.len() as f64)
        .sqrt();
    Ok((-slope, residual))
}

/// Ordinary least squares for `y ~ intercept + slope x`.
pub fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = csum(xs.iter().copied()) / n;
    let my = csum(ys.iter().copied()) / n;
    let sxx = csum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let sxy = csum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Relative defect of the Parseval identity
/// `(2 pi)^n sum_k int |c_k|^2 dI = int |field|^2 dtheta dI`,
/// with the right side by tensor quadrature.
pub fn parseval_defect(field: &TrigPolyField, grid: &ActionGrid) -> f64 {
    let n = grid.dim();
    let tau_n = TAU.powi(n as i32);
    let mut mode_side = CompensatedSum::new();
    for (_, c) in field.modes() {
        mode_side.add(grid.integrate(|i| c.value(i).norm_sqr()));
    }
    let mode_side = tau_n * mode_side.total();

    let tg = TorusGrid::new(n, (2 * field.band_limit_l1() as usize + 2).max(4));
    let grid_side = grid.integrate(|i| {
        let mut acc = 0.0;
        for ti in 0..tg.len() {
            let v = field.eval_at(tg.node(ti), i);
            acc += v * v;
        }
        acc * tg.weight()
    });
    (mode_side - grid_side).abs() / grid_side.abs().max(1e-300)
}

/// Mode table as JSON: `k -> {re, im}` coefficient expression strings.
pub fn mode_table_json(field: &TrigPolyField) -> serde_json::Value {
    let mut map = BTreeMap::new();
    for (k, c) in field.modes() {
        map.insert(
            k.to_string(),
            json!({
                "re": c.re_expr().to_string(),
                "im": c.im_expr().to_string(),
            }),
        );
    }
    json!({
        "dim": field.dim(),
        "band_limit_l1": field.band_limit_l1(),
        "modes": map,
    })
}

// ---------------------------------------------------------------------------
// Mode data sampled on action grids.
// ---------------------------------------------------------------------------

/// Fourier coefficients (values and action gradients) of a field, tabulated
/// at the nodes of an action grid.
///
/// Built either by exact read-off from a trigonometric polynomial or by a
/// discrete Fourier transform of angle samples; the latter also serves
/// composed fields that are not trigonometric polynomials.
#[derive(Debug, Clone)]
pub struct GridModes {
    pub dim: usize,
    pub nodes: usize,
    /// Wavevectors in deterministic (lexicographic) order, including `k = 0`.
    pub wavevectors: Vec<WaveVec>,
    /// `values[mode][node]`.
    pub values: Vec<Vec<Complex64>>,
    /// `gradients[mode][node * dim + axis]`.
    pub gradients: Vec<Vec<Complex64>>,
}

impl GridModes {
    /// Exact tabulation of a trigonometric polynomial's coefficients.
    pub fn from_field(field: &TrigPolyField, grid: &ActionGrid) -> Self {
        let dim = field.dim();
        let mut wavevectors: Vec<WaveVec> = field.modes().map(|(k, _)| k.clone()).collect();
        if !wavevectors.iter().any(|k| k.is_zero()) {
            wavevectors.push(WaveVec(vec![0; dim]));
        }
        wavevectors.sort();
        let mut values = Vec::with_capacity(wavevectors.len());
        let mut gradients = Vec::with_capacity(wavevectors.len());
        for k in &wavevectors {
            let c = field.mode(k);
            let mut v = Vec::with_capacity(grid.len());
            let mut g = Vec::with_capacity(grid.len() * dim);
            for i in 0..grid.len() {
                let x = grid.node(i);
                v.push(c.value(x));
                g.extend(c.gradient(x));
            }
            values.push(v);
            gradients.push(g);
        }
        Self {
            dim,
            nodes: grid.len(),
            wavevectors,
            values,
            gradients,
        }
    }

    /// Discrete Fourier transform of angle samples at every action node.
    ///
    /// `sampler(theta, I)` returns the field value and its action gradient.
    /// The uniform `theta_per_axis` rule is exact for bands below
    /// `theta_per_axis - |k|_axis`; composed fields alias only through their
    /// exponentially small super-band content. Nodes where `active` is
    /// false are tabulated as zero without invoking the sampler (composed
    /// densities vanish there and their transforms may not even be defined).
    pub fn from_sampler(
        dim: usize,
        grid: &ActionGrid,
        theta_per_axis: usize,
        band_l1: i32,
        active: Option<&[bool]>,
        sampler: impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Sync,
    ) -> Result<Self> {
        let kmax_axis = (theta_per_axis as i32 / 2 - 1).min(band_l1);
        let mut wavevectors: Vec<WaveVec> =
            crate::model::enumerate_wavevectors(dim, band_l1, 10_000_000)?
                .into_iter()
                .filter(|k| k.0.iter().all(|c| c.abs() <= kmax_axis))
                .collect();
        wavevectors.push(WaveVec(vec![0; dim]));
        wavevectors.sort();

        let tg = TorusGrid::new(dim, theta_per_axis);
        let norm = 1.0 / tg.len() as f64;
        let nm = wavevectors.len();
        let mut values = vec![Vec::with_capacity(grid.len()); nm];
        let mut gradients = vec![Vec::with_capacity(grid.len() * dim); nm];

        let mut samples = vec![0.0; tg.len()];
        let mut grad_samples = vec![0.0; tg.len() * dim];
        for i in 0..grid.len() {
            if let Some(a) = active {
                if !a[i] {
                    for m in 0..nm {
                        values[m].push(Complex64::new(0.0, 0.0));
                        gradients[m].extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), dim));
                    }
                    continue;
                }
            }
            let act = grid.node(i);
            for ti in 0..tg.len() {
                let (v, gv) = sampler(tg.node(ti), act);
                samples[ti] = v;
                grad_samples[ti * dim..(ti + 1) * dim].copy_from_slice(&gv);
            }
            for (m, k) in wavevectors.iter().enumerate() {
                let mut cv = Complex64::new(0.0, 0.0);
                let mut cg = vec![Complex64::new(0.0, 0.0); dim];
                for ti in 0..tg.len() {
                    let phase = -k.dot(tg.node(ti));
                    let e = Complex64::new(phase.cos(), phase.sin());
                    cv += samples[ti] * e;
                    for j in 0..dim {
                        cg[j] += grad_samples[ti * dim + j] * e;
                    }
                }
                values[m].push(cv * norm);
                for j in 0..dim {
                    gradients[m].push(cg[j] * norm);
                }
            }
        }
        Ok(Self {
            dim,
            nodes: grid.len(),
            wavevectors,
            values,
            gradients,
        })
    }

    pub fn mode_index(&self, k: &WaveVec) -> Option<usize> {
        self.wavevectors.binary_search(k).ok()
    }

    pub fn value(&self, mode: usize, node: usize) -> Complex64 {
        self.values[mode][node]
    }

    pub fn gradient(&self, mode: usize, node: usize) -> &[Complex64] {
        &self.gradients[mode][node * self.dim..(node + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{self, Expr};
    use crate::grid::{build_grid, QuadratureRule};
    use crate::model::builtin_system;
    use crate::space::ActionDomain;

    #[test]
    fn coefficient_read_off_cases() {
        // cos(theta1): c_{(1,0)} = 1/2.
        let f = TrigPolyField::zero(2).with_cos(&[1, 0], Expr::one());
        let c = fourier_coeff(&f, &WaveVec(vec![1, 0]));
        assert_eq!(c.value(&[0.3, 0.4]), Complex64::new(0.5, 0.0));

        // I2 sin(theta2): c_{(0,1)} = -i I2 / 2.
        let f = TrigPolyField::zero(2).with_sin(&[0, 1], Expr::coord(1));
        let c = fourier_coeff(&f, &WaveVec(vec![0, 1]));
        let v = c.value(&[0.0, 3.0]);
        assert!((v - Complex64::new(0.0, -1.5)).norm() < 1e-15);

        // Absent mode reads off as zero.
        let c = fourier_coeff(&f, &WaveVec(vec![2, 0]));
        assert!(c.is_zero());
    }

    #[test]
    fn mode_product_cases() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        // G lacks mode (0,1): product vanishes.
        let p = mode_product(
            &bundle.observable,
            &bundle.density,
            &WaveVec(vec![0, 1]),
        );
        assert!(p.coeff.is_zero());

        // Product value equals the pointwise product of read-offs.
        let k = WaveVec(vec![1, 0]);
        let p = mode_product(&bundle.observable, &bundle.density, &k);
        let x = [1.05, 0.45];
        let want = bundle.observable.field().mode(&k).value(&x)
            * bundle.density.field().mode(&k.neg()).value(&x);
        assert!((p.coeff.value(&x) - want).norm() < 1e-12);
    }

    #[test]
    fn mode_product_gradient_matches_finite_differences() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let k = WaveVec(vec![1, 1]);
        let p = mode_product(&bundle.observable, &bundle.density, &k);
        let x = [1.0, 0.5];
        let g = p.coeff.gradient(&x);
        for j in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (p.coeff.value(&xp) - p.coeff.value(&xm)) / (2.0 * h);
            assert!((fd - g[j]).norm() < 1e-6 * (1.0 + fd.norm()), "axis {j}");
        }
    }

    #[test]
    fn mode_product_conjugate_symmetry() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let k = WaveVec(vec![1, 1]);
        let a = mode_product(&bundle.observable, &bundle.density, &k);
        let b = mode_product(&bundle.observable, &bundle.density, &k.neg());
        let x = [1.1, 0.52];
        assert!((a.coeff.value(&x).conj() - b.coeff.value(&x)).norm() < 1e-14);
    }

    #[test]
    fn tail_vanishes_beyond_joint_band() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[80, 80],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let joint = bundle.observable.field().band_limit_l1()
            + bundle.density.field().band_limit_l1();
        assert_eq!(tail(&bundle.observable, &bundle.density, joint, &grid), 0.0);
        // K = 0 with G = cos t1 and f0 uniform in theta: f_{0,-k} = 0.
        let domain = bundle.density.domain().clone();
        let g = Observable::new(
            TrigPolyField::zero(2).with_cos(&[1, 0], Expr::one()),
            &domain,
        )
        .unwrap();
        let raw = TrigPolyField::zero(2).with_zero_mode(expr::bump(
            expr::add(
                expr::pow(expr::sub(Expr::coord(0), Expr::constant(1.0)), 2),
                expr::pow(Expr::coord(1), 2),
            ),
            0.0,
            0.25,
        ));
        let f0 = EnsembleDensity::normalize(raw, &domain).unwrap();
        assert_eq!(tail(&g, &f0, 0, &grid), 0.0);
    }

    #[test]
    fn tail_of_single_high_mode_is_its_mass() {
        // One mode pair at |k|_1 = 3 with a bump amplitude: the K = 2 tail
        // is (2 pi)^2 times the integral of |a_k| over both pair members.
        let domain = ActionDomain::cuboid(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let profile = expr::bump(
            expr::add(expr::pow(Expr::coord(0), 2), expr::pow(Expr::coord(1), 2)),
            0.0,
            0.36,
        );
        let g = Observable::new(
            TrigPolyField::zero(2).with_cos(&[2, 1], profile.clone()),
            &domain,
        )
        .unwrap();
        let raw = TrigPolyField::zero(2)
            .with_zero_mode(profile.clone())
            .with_cos(&[2, 1], expr::mul(Expr::constant(0.5), profile));
        let f0 = EnsembleDensity::normalize(raw, &domain).unwrap();
        let grid = build_grid(&domain, &[400, 400], QuadratureRule::Midpoint).unwrap();
        let got = tail(&g, &f0, 2, &grid);
        // Independent quadrature of both pair members' |a_k|.
        let tau2 = TAU * TAU;
        let k = WaveVec(vec![2, 1]);
        let a = mode_product(&g, &f0, &k);
        let b = mode_product(&g, &f0, &k.neg());
        let want = tau2
            * (grid.integrate(|i| a.coeff.value(i).norm())
                + grid.integrate(|i| b.coeff.value(i).norm()));
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn tail_is_nonincreasing_in_order() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[100, 100],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for order in 0..=4 {
            let r = tail(&bundle.observable, &bundle.density, order, &grid);
            assert!(r <= prev + 1e-15, "tail increased at K = {order}");
            prev = r;
        }
    }

    #[test]
    fn decay_fit_recovers_synthetic_rate() {
        // Amplitudes e^{-sigma |k|_1} with sigma = 0.5.
        let domain = ActionDomain::cuboid(vec![-1.0], vec![1.0]).unwrap();
        let profile = expr::bump(Expr::coord(0), 0.0, 0.6);
        let sigma = 0.5f64;
        let mut gf = TrigPolyField::zero(1);
        let mut ff = TrigPolyField::zero(1).with_zero_mode(profile.clone());
        for k in 1..=12 {
            let amp = (-sigma * k as f64).exp();
            gf = gf.with_cos(&[k], expr::mul(Expr::constant(amp), profile.clone()));
            ff = ff.with_cos(&[k], expr::mul(Expr::constant(0.5 * amp), profile.clone()));
        }
        let g = Observable::new(gf, &domain).unwrap();
        let f0 = EnsembleDensity::normalize(ff, &domain).unwrap();
        let grid = build_grid(&domain, &[2000], QuadratureRule::Midpoint).unwrap();
        let orders: Vec<i32> = (1..=6).collect();
        let (rate, residual) = tail_decay_fit(&g, &f0, &orders, &grid).unwrap();
        // a_k = G_k f_{0,-k} decays like e^{-2 sigma k}, and the tail sum is
        // dominated by its first term, so the fitted rate is 2 sigma.
        assert!((rate - 2.0 * sigma).abs() < 0.1, "rate {rate}");
        assert!(residual < 1e-2, "residual {residual}");
    }

    #[test]
    fn decay_fit_needs_three_orders() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[60, 60],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        // Band-limited builtins have at most a couple of nonzero tails.
        assert!(matches!(
            tail_decay_fit(&bundle.observable, &bundle.density, &[5, 6, 7], &grid),
            Err(Error::BandLimited)
        ));
    }

    #[test]
    fn parseval_identity_holds_for_builtins() {
        for name in ["twist2", "pendulum1"] {
            let bundle = builtin_system(name, 0.0).unwrap();
            let n = bundle.density.dim();
            let res = if n == 1 { 4000 } else { 300 };
            let grid = build_grid(
                bundle.density.domain(),
                &vec![res; n],
                QuadratureRule::Midpoint,
            )
            .unwrap();
            let defect = parseval_defect(bundle.density.field(), &grid);
            assert!(defect < 0.01, "{name}: Parseval defect {defect:.3e}");
        }
    }

    #[test]
    fn dft_matches_exact_read_off_for_trig_polys() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let grid = build_grid(
            bundle.density.domain(),
            &[12, 12],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let field = bundle.density.field().clone();
        let exact = GridModes::from_field(&field, &grid);
        let dft = GridModes::from_sampler(2, &grid, 12, 4, None, |theta, action| {
            let (v, _, ga) = field.value_and_grads(theta, action);
            (v, ga)
        })
        .unwrap();
        for (m, k) in dft.wavevectors.iter().enumerate() {
            let em = exact.mode_index(k);
            for node in 0..grid.len() {
                let want = em
                    .map(|mi| exact.value(mi, node))
                    .unwrap_or(Complex64::new(0.0, 0.0));
                let got = dft.value(m, node);
                assert!(
                    (want - got).norm() < 1e-12,
                    "k = {k}, node {node}: {got} vs {want}"
                );
                let want_g: Vec<Complex64> = em
                    .map(|mi| exact.gradient(mi, node).to_vec())
                    .unwrap_or_else(|| vec![Complex64::new(0.0, 0.0); 2]);
                for j in 0..2 {
                    assert!((want_g[j] - dft.gradient(m, node)[j]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode_table_is_json_serializable() {
        let bundle = builtin_system("pendulum1", 0.1).unwrap();
        let v = mode_table_json(bundle.observable.field());
        let text = serde_json::to_string(&v).unwrap();
        assert!(text.contains("band_limit_l1"));
        assert!(text.contains("(1)"));
    }
}
