//! Assembly of the five-term deviation bound, verdicts against the
//! empirical series, and the exponential time window.
//!
//! For each time `t` the bound reads
//! `2 |G|_inf P_res + C_G / |t| + R_{>K} + E_nf(t) + E_eq`,
//! with the mixing constant and tail taken in normal-form coordinates on
//! the nonresonant region. The resonant-mass term uses the cutoff-
//! consistent soft mass `int rho_0 (1 - eta) dI >= P_res`, so the assembled
//! inequality is valid for the masked decomposition actually computed; the
//! sharp flag-based `P_res` is reported alongside.
//!
//! Verdict policy: the left side is a statistical estimate, so `violated`
//! requires the empirical deviation to clear the bound by three standard
//! errors *and* a dt/2 refinement to confirm the discretization error is
//! below one standard error. An unconfirmed candidate aborts with an error
//! instead of rendering a misleading verdict.

use crate::error::{Error, Result};
use crate::estimator::{
    deviation_series_mc, deviation_series_quadrature, sample_density, DeviationSeries, SampleSet,
};
use crate::flow::{suggested_dt, FlowSpec, Scheme};
use crate::grid::{build_grid, QuadratureRule};
use crate::mixing::{
    mixing_constant, CoordinateFrame, MaskInfo, MixingReport, GAMMA_FLOOR,
};
use crate::model::{EnsembleDensity, HamiltonianSystem, Observable};
use crate::normalform::{
    build_package, calibrate_c_err, eq_change_error, nf_error_bound, CErrCalibration,
    NormalFormConfig, NormalFormPackage,
};
use crate::resonance::{
    resonant_mass_sweep, zz_schedule, PartitionMap, PartitionSpec, Partitioner, SmoothMask,
};
use crate::rng::SeededRng;
use crate::space::{CompensatedSum, PhasePoint};
use crate::spectral::GridModes;
use serde::Serialize;
use std::io::Write;

/// Exponential time window `|t| <= exp(sigma K)` with `0 < sigma < c/2`.
#[derive(Debug, Clone, Serialize)]
pub struct WindowSpec {
    pub sigma: f64,
    pub c: f64,
    pub t_max: f64,
    /// Display envelope `eps exp(-(c - 2 sigma) K)` for the normal-form term.
    pub envelope: f64,
    pub clamped: bool,
}

/// Window from the Nekhoroshev-style power law `K(eps) = eps^{-a}`:
/// `t_max = exp(sigma eps^{-a})`, clamped to `ceiling`.
pub fn exp_window(eps: f64, a: f64, c: f64, sigma: f64, ceiling: f64) -> Result<WindowSpec> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameter("window exponent a must be > 0".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("window needs eps > 0".into()));
    }
    window_from_order(eps.powf(-a), eps, c, sigma, ceiling)
}

/// Window from an explicit normal-form order `K`.
pub fn window_from_order(
    order: f64,
    eps: f64,
    c: f64,
    sigma: f64,
    ceiling: f64,
) -> Result<WindowSpec> {
    if !(sigma > 0.0 && sigma < c / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "window requires 0 < sigma < c/2, got sigma = {sigma}, c = {c}"
        )));
    }
    let raw = (sigma * order).exp();
    let clamped = raw > ceiling;
    Ok(WindowSpec {
        sigma,
        c,
        t_max: raw.min(ceiling),
        envelope: eps * (-(c - 2.0 * sigma) * order).exp(),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    HoldsWithin3Sigma,
    Violated,
}

/// One time row of the assembled bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub t: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub term_res: f64,
    pub term_mix: f64,
    pub term_tail: f64,
    pub term_nf: f64,
    pub term_eq: f64,
    pub total: f64,
    pub in_window: bool,
    pub verdict: Verdict,
}

/// Provenance of the normal-form error constant in the report.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum NfTermProvenance {
    /// No nonresonant mass: the term is identically zero.
    EmptyRegion,
    /// Measured remainder with a calibrated constant.
    Calibrated { calibration: CErrCalibration },
    /// User-supplied constant with the measured remainder.
    Override { c_err: f64, g_tilde_c1: f64 },
    /// Assumption mode: user-supplied `(c_nf_prefactor, c_nf_rate)` replace
    /// the measured remainder by `C_nf eps exp(-c_nf K)`.
    Assumption {
        c_nf: f64,
        rate: f64,
        c_err: f64,
        g_tilde_c1: f64,
    },
}

/// The assembled bound with its full input fingerprint.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub order: i32,
    pub alpha: f64,
    pub rows: Vec<BoundRow>,
    pub g_sup: f64,
    /// Sharp flag-based resonant mass.
    pub p_res: f64,
    /// Cutoff-consistent mass used in the resonant term.
    pub p_soft: f64,
    pub cg: f64,
    pub cg_lemma: f64,
    pub tail: f64,
    pub e_eq: f64,
    pub r_sup: f64,
    pub nf_term: NfTermProvenance,
    pub coords: CoordinateFrame,
    pub window: WindowSpec,
    pub fault_zero_mixing: bool,
    pub richardson: Option<Vec<f64>>,
    pub seed: u64,
    pub fingerprint: String,
}

impl BoundReport {
    pub fn any_violated(&self) -> bool {
        self.rows.iter().any(|r| r.verdict == Verdict::Violated)
    }

    /// Verdict table CSV: per-`t` terms, total, and verdict.
    pub fn write_verdict_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "t,empirical,stderr,term_res,term_mix,term_tail,term_nf,term_eq,total,in_window,verdict"
        )?;
        for r in &self.rows {
            let verdict = match r.verdict {
                Verdict::Holds => "holds",
                Verdict::HoldsWithin3Sigma => "holds-within-3sigma",
                Verdict::Violated => "violated",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.empirical,
                r.stderr,
                r.term_res,
                r.term_mix,
                r.term_tail,
                r.term_nf,
                r.term_eq,
                r.total,
                u8::from(r.in_window),
                verdict
            )?;
        }
        Ok(())
    }

    /// Plot-data CSV (same columns minus window/verdict metadata).
    pub fn write_plot_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "t,empirical,stderr,term_res,term_mix,term_tail,term_nf,term_eq,total"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.empirical,
                r.stderr,
                r.term_res,
                r.term_mix,
                r.term_tail,
                r.term_nf,
                r.term_eq,
                r.total
            )?;
        }
        Ok(())
    }
}

/// Inputs for assembling a report from precomputed terms.
pub struct AssembleInput<'a> {
    pub epsilon: f64,
    pub spec: PartitionSpec,
    pub series: &'a DeviationSeries,
    pub mixing: &'a MixingReport,
    pub g_sup: f64,
    pub p_res: f64,
    pub p_soft: f64,
    pub e_eq: f64,
    pub r_sup: f64,
    pub nf_term: NfTermProvenance,
    pub window: WindowSpec,
    pub fault_zero_mixing: bool,
    /// Per-time dt-refinement differences (subset reruns); required to
    /// confirm any violation candidate. The exact flow passes zeros.
    pub richardson: Option<Vec<f64>>,
    pub seed: u64,
    pub fingerprint: String,
    /// True when the transform is the identity (eps = 0), which makes
    /// original-coordinate mixing data admissible.
    pub identity_transform: bool,
}

/// Assemble the report: coordinate checks, five terms per time, verdicts.
pub fn assemble(input: AssembleInput) -> Result<BoundReport> {
    if input.mixing.coords == CoordinateFrame::Original
        && input.epsilon > 0.0
        && !input.identity_transform
    {
        return Err(Error::CoordinateMismatch(
            "mixing data computed in original coordinates for a perturbed system; \
             the bound requires normal-form coordinates on the nonresonant region"
                .into(),
        ));
    }
    let cg = if input.fault_zero_mixing {
        0.0
    } else {
        input.mixing.cg_direct
    };
    let (c_err, g_c1, r_used) = match &input.nf_term {
        NfTermProvenance::EmptyRegion => (0.0, 0.0, 0.0),
        NfTermProvenance::Calibrated { calibration } => {
            (calibration.c_err, calibration.g_tilde_c1, input.r_sup)
        }
        NfTermProvenance::Override { c_err, g_tilde_c1 } => (*c_err, *g_tilde_c1, input.r_sup),
        NfTermProvenance::Assumption {
            c_nf,
            rate,
            c_err,
            g_tilde_c1,
        } => (
            *c_err,
            *g_tilde_c1,
            c_nf * input.epsilon * (-rate * input.spec.order as f64).exp(),
        ),
    };
    let term_res = 2.0 * input.g_sup * input.p_soft;
    let mut rows = Vec::with_capacity(input.series.times.len());
    for (i, &t) in input.series.times.iter().enumerate() {
        if t <= 0.0 {
            return Err(Error::InvalidParameter(
                "bound rows require strictly positive times".into(),
            ));
        }
        let empirical = input.series.deviations[i];
        let stderr = input.series.stderrs[i];
        let term_mix = cg / t.abs();
        let term_nf = nf_error_bound(g_c1, t, r_used, c_err);
        let total = term_res + term_mix + input.mixing.tail + term_nf + input.e_eq;
        let verdict = if empirical <= total {
            Verdict::Holds
        } else if empirical <= total + 3.0 * stderr {
            Verdict::HoldsWithin3Sigma
        } else {
            // Candidate violation: only confirmed when the dt/2 check shows
            // the discretization error is below one standard error.
            let richardson = input
                .richardson
                .as_ref()
                .map(|r| r[i])
                .ok_or(Error::DiscretizationUnresolved {
                    t,
                    richardson: f64::NAN,
                    stderr,
                })?;
            if richardson < stderr.max(1e-12) {
                Verdict::Violated
            } else {
                return Err(Error::DiscretizationUnresolved {
                    t,
                    richardson,
                    stderr,
                });
            }
        };
        rows.push(BoundRow {
            t,
            empirical,
            stderr,
            term_res,
            term_mix,
            term_tail: input.mixing.tail,
            term_nf,
            term_eq: input.e_eq,
            total,
            in_window: t <= input.window.t_max,
            verdict,
        });
    }
    Ok(BoundReport {
        epsilon: input.epsilon,
        order: input.spec.order,
        alpha: input.spec.alpha,
        rows,
        g_sup: input.g_sup,
        p_res: input.p_res,
        p_soft: input.p_soft,
        cg,
        cg_lemma: input.mixing.cg_lemma,
        tail: input.mixing.tail,
        e_eq: input.e_eq,
        r_sup: input.r_sup,
        nf_term: input.nf_term,
        coords: input.mixing.coords,
        window: input.window,
        fault_zero_mixing: input.fault_zero_mixing,
        richardson: input.richardson,
        seed: input.seed,
        fingerprint: input.fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Full verification pipeline.
// ---------------------------------------------------------------------------

/// Parameter schedule selection.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleChoice {
    Zz { beta: f64, s0: f64 },
    Power { a: f64, prefactor: f64, alpha: f64 },
    Explicit { order: i32, alpha: f64 },
}

/// Empirical estimator selection for the deviation series.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorChoice {
    MonteCarlo { samples: usize },
    /// Exact-flow quadrature; valid only for `eps = 0`.
    Quadrature { action_res: usize },
}

/// Everything the `verify` pipeline needs beyond the system bundle.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineConfig {
    pub schedule: ScheduleChoice,
    pub times: Vec<f64>,
    pub estimator: EstimatorChoice,
    pub seed: u64,
    pub threads: usize,
    /// Integrator step; `None` picks `min(1e-2, 0.1 / sup |omega|)`.
    pub dt: Option<f64>,
    /// Force the dt/2 refinement check even without violation candidates.
    pub dt_check: bool,
    /// Per-axis resolution of the mixing/equilibrium action grid.
    pub action_res: usize,
    /// Per-axis resolution of the resonant-mass grid.
    pub pres_res: usize,
    pub pres_refine: usize,
    /// Transition width of the smooth nonresonant cutoff, in frequency
    /// distance units.
    pub cutoff_width: f64,
    pub nf_dt: f64,
    pub nf_lie_steps: usize,
    /// Angle nodes per axis for normal-form-coordinate samplers.
    pub nf_theta_res: usize,
    /// Samples for measuring the normal-form error term.
    pub nf_samples: usize,
    /// Step for integrating the normal-form flow in measurements.
    pub nf_flow_dt: f64,
    /// Window parameters: the assumed exponential rate `c` and `sigma`.
    pub window_c: f64,
    pub window_sigma: f64,
    pub window_ceiling: f64,
    /// Assumption mode: use `C_nf eps exp(-c_nf K)` instead of the measured
    /// remainder.
    pub assumption_mode: Option<(f64, f64)>,
    pub c_err_override: Option<f64>,
    /// Negative control: force `C_G = 0` after computing it.
    pub fault_zero_mixing: bool,
    pub gamma_floor: f64,
    /// Subset size for the dt/2 refinement series.
    pub richardson_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleChoice::Zz { beta: 0.5, s0: 1.0 },
            times: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0],
            estimator: EstimatorChoice::MonteCarlo { samples: 10_000 },
            seed: 1,
            threads: 1,
            dt: None,
            dt_check: false,
            action_res: 48,
            pres_res: 400,
            pres_refine: 16,
            cutoff_width: 0.02,
            nf_dt: 1e-3,
            nf_lie_steps: 1,
            nf_theta_res: 16,
            nf_samples: 400,
            nf_flow_dt: 2e-2,
            window_c: 1.0 / 6.0,
            window_sigma: 1.0 / 15.0,
            window_ceiling: 1e6,
            assumption_mode: None,
            c_err_override: None,
            fault_zero_mixing: false,
            gamma_floor: GAMMA_FLOOR,
            richardson_samples: 2000,
        }
    }
}

/// Everything the pipeline produced, ready for serialization.
pub struct VerificationOutput {
    pub report: BoundReport,
    pub mixing: MixingReport,
    pub partition: PartitionMap,
    pub series: DeviationSeries,
    pub masses: crate::resonance::MassSplit,
    pub nf_summary: Option<serde_json::Value>,
}

/// All bound terms except the empirical series: the partition, normal form,
/// mixing data, and error terms. Shared by the full pipeline and the
/// term-only subcommand paths.
pub struct BoundTerms {
    pub spec: PartitionSpec,
    pub masses: crate::resonance::MassSplit,
    pub partition: PartitionMap,
    pub mixing: MixingReport,
    pub p_soft: f64,
    pub e_eq: f64,
    pub r_sup: f64,
    pub nf_term: NfTermProvenance,
    pub nf_summary: Option<serde_json::Value>,
    pub identity_transform: bool,
    pub omega_sup: f64,
}

/// Stages 1-8 of the pipeline: everything except sampling and verdicts.
pub fn compute_terms(
    system: &HamiltonianSystem,
    density: &EnsembleDensity,
    observable: &Observable,
    cfg: &PipelineConfig,
) -> Result<BoundTerms> {
    let n = system.dim();
    let eps = system.epsilon;
    density.require_compact_support()?;

    // 1. Partition spec from the schedule.
    let spec = match &cfg.schedule {
        ScheduleChoice::Zz { beta, s0 } => zz_schedule(eps, *beta, *s0)?.0,
        ScheduleChoice::Power {
            a,
            prefactor,
            alpha,
        } => crate::resonance::power_schedule(eps, *a, *prefactor, *alpha)?,
        ScheduleChoice::Explicit { order, alpha } => PartitionSpec::new(*order, *alpha)?,
    };
    let partitioner = Partitioner::new(n, spec)?;

    // 2. Sharp resonant mass and the partition map.
    let pres_grid = build_grid(
        density.domain(),
        &vec![cfg.pres_res; n],
        QuadratureRule::Midpoint,
    )?;
    let masses = resonant_mass_sweep(
        density,
        &system.integrable,
        spec.order,
        &[spec.alpha],
        &pres_grid,
        cfg.pres_refine,
    )?[0];
    let map_grid = build_grid(
        density.domain(),
        &vec![if n <= 2 { 60 } else { 16 }; n],
        QuadratureRule::Midpoint,
    )?;
    let partition = PartitionMap::build(&map_grid, &system.integrable, &partitioner);

    // 3. Locate nonresonant support for the normal form: grid nodes with
    //    positive marginal mass and clearance alpha + width.
    let grid = build_grid(
        density.domain(),
        &vec![cfg.action_res; n],
        QuadratureRule::Midpoint,
    )?;
    let marginal_floor = 1e-9;
    let mut probe_actions: Vec<Vec<f64>> = Vec::new();
    for i in 0..grid.len() {
        let act = grid.node(i);
        if density.marginal(act) < marginal_floor {
            continue;
        }
        let omega = system.integrable.freq(act);
        let (_, d) = partitioner.nearest(&omega);
        if d > spec.alpha + cfg.cutoff_width {
            probe_actions.push(act.to_vec());
        }
    }
    let region_empty = probe_actions.is_empty();

    // 4. Normal form on the nonresonant support (skipped when the region is
    //    empty, and not invoked at all for eps = 0 where it is the identity).
    let package: Option<NormalFormPackage> = if region_empty || eps == 0.0 {
        None
    } else {
        let nf_cfg = NormalFormConfig {
            order: spec.order,
            dt_nf: cfg.nf_dt,
            lie_steps: cfg.nf_lie_steps,
            divisor_floor: spec.alpha.min(1e-2) * 1e-3,
        };
        Some(build_package(system, &nf_cfg, &probe_actions, 6)?)
    };
    let identity_transform = package.as_ref().map_or(true, |p| p.is_identity());
    let margin = package.as_ref().map_or(0.0, |p| p.margin);
    let r_sup = package.as_ref().map_or(0.0, |p| p.r_sup);

    // 5. Smooth cutoff eroded by the transform margin.
    let mask_lo = spec.alpha + margin;
    let mask = SmoothMask::new(
        &partitioner,
        &system.integrable,
        mask_lo,
        mask_lo + cfg.cutoff_width,
    )?;
    let mask_info = MaskInfo {
        lo: mask_lo,
        hi: mask_lo + cfg.cutoff_width,
        note: format!(
            "smoothstep cutoff over frequency distance; erosion margin {margin:.3e} \
             from |Phi_nf - Id|_C0"
        ),
    };

    // Soft resonant mass: int rho_0 (1 - eta) dI on the fine grid.
    let mut soft = CompensatedSum::new();
    for i in 0..pres_grid.len() {
        let act = pres_grid.node(i);
        let rho = density.marginal(act);
        if rho == 0.0 {
            continue;
        }
        soft.add(pres_grid.weight(i) * rho * (1.0 - mask.eval(act)));
    }
    let p_soft = soft.total().clamp(0.0, 1.0);

    // 6. Mixing constant and tail in the coordinates the theorem requires.
    let cert_region: Vec<bool> = (0..grid.len())
        .map(|i| {
            let omega = system.integrable.freq(grid.node(i));
            partitioner.nearest(&omega).1 > spec.alpha
        })
        .collect();
    let mixing = if region_empty {
        MixingReport {
            order: spec.order,
            coords: CoordinateFrame::NormalForm,
            records: Vec::new(),
            cg_direct: 0.0,
            cg_lemma: 0.0,
            tail: 0.0,
            region_empty: true,
            mask: mask_info.clone(),
            gamma_floor: cfg.gamma_floor,
            hessian_norm: "spectral".into(),
            outer_band_mass: 0.0,
        }
    } else if identity_transform {
        // eps = 0: the transform is the identity and the exact mode data is
        // admissible; the mask enters through the quadrature weights.
        let weights: Vec<f64> = (0..grid.len()).map(|i| mask.eval(grid.node(i))).collect();
        let gm = GridModes::from_field(observable.field(), &grid);
        let fm = GridModes::from_field(density.field(), &grid);
        mixing_constant(
            &gm,
            &fm,
            spec.order,
            &grid,
            system.integrable.omega_exprs(),
            Some(&weights),
            Some(&cert_region),
            CoordinateFrame::NormalForm,
            mask_info.clone(),
            cfg.gamma_floor,
        )?
    } else {
        let pkg = package.as_ref().unwrap();
        let band_g = observable.field().band_limit_l1() + 4;
        let band_f = density.field().band_limit_l1() + 4;
        let theta_res = cfg
            .nf_theta_res
            .max(2 * band_g.max(band_f) as usize + 4);
        // Composed data lives on the dilated support; the generator is only
        // defined off the resonance web, so stay inside the cert region
        // (the masked density vanishes outside it anyway).
        let active: Vec<bool> = support_activity(density, &grid, pkg.c0_norm)
            .iter()
            .zip(&cert_region)
            .map(|(a, b)| *a && *b)
            .collect();
        let gm = GridModes::from_sampler(n, &grid, theta_res, band_g, Some(&active), |theta, action| {
            pkg.tilde_value_grad(observable.field(), None, theta, action)
                .expect("tilde observable sampler")
        })?;
        let fm = GridModes::from_sampler(n, &grid, theta_res, band_f, Some(&active), |theta, action| {
            pkg.tilde_value_grad(density.field(), Some(&mask), theta, action)
                .expect("tilde density sampler")
        })?;
        mixing_constant(
            &gm,
            &fm,
            spec.order,
            &grid,
            pkg.h_eff().omega_exprs(),
            None,
            Some(&cert_region),
            CoordinateFrame::NormalForm,
            mask_info.clone(),
            cfg.gamma_floor,
        )?
    };

    // 7. Equilibrium-change error.
    let e_eq = match &package {
        Some(pkg) if !identity_transform => {
            let theta_res = (2 * observable.field().band_limit_l1() as usize + 6).max(12);
            let active: Vec<bool> = support_activity(density, &grid, pkg.c0_norm)
                .iter()
                .zip(&cert_region)
                .map(|(a, b)| *a && *b)
                .collect();
            eq_change_error(
                pkg,
                observable,
                density,
                Some(&mask),
                &grid,
                theta_res,
                Some(&active),
            )?
        }
        _ => 0.0,
    };

    // 8. Normal-form error term.
    let rng = SeededRng::new(cfg.seed, 0);
    let nf_term = if region_empty {
        NfTermProvenance::EmptyRegion
    } else if let Some((c_nf, rate)) = cfg.assumption_mode {
        let pkg = package.as_ref().unwrap();
        let probes = support_probe_points(&probe_actions, 4)?;
        let g_c1 = pkg.g_tilde_c1(observable, &probes)?;
        NfTermProvenance::Assumption {
            c_nf,
            rate,
            c_err: cfg.c_err_override.unwrap_or(1.0),
            g_tilde_c1: g_c1,
        }
    } else if identity_transform {
        NfTermProvenance::EmptyRegion
    } else {
        let pkg = package.as_ref().unwrap();
        let probes = support_probe_points(&probe_actions, 4)?;
        let g_c1 = pkg.g_tilde_c1(observable, &probes)?;
        if let Some(c_err) = cfg.c_err_override {
            NfTermProvenance::Override {
                c_err,
                g_tilde_c1: g_c1,
            }
        } else {
            // Samples from the masked density, mapped into normal-form
            // coordinates by the (volume-preserving) inverse transform.
            let masked = sample_masked_density(
                density,
                &mask,
                cfg.nf_samples,
                &rng.substream(7),
                cfg.threads,
            )?;
            let tilde: Vec<PhasePoint> = masked
                .points
                .iter()
                .map(|z| pkg.inverse(z))
                .collect::<Result<_>>()?;
            let (training, holdout) = split_times(&cfg.times);
            let calibration = calibrate_c_err(
                pkg,
                observable,
                &tilde,
                &training,
                &holdout,
                cfg.nf_flow_dt,
                g_c1,
            )?;
            NfTermProvenance::Calibrated { calibration }
        }
    };

    let omega_sup = {
        let mut sup = 0.0f64;
        for i in (0..grid.len()).step_by((grid.len() / 256).max(1)) {
            let w = system.integrable.freq(grid.node(i));
            sup = sup.max(w.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        sup
    };
    Ok(BoundTerms {
        spec,
        masses,
        partition,
        mixing,
        p_soft,
        e_eq,
        r_sup,
        nf_term,
        nf_summary: package.as_ref().map(|p| p.summary_json()),
        identity_transform,
        omega_sup,
    })
}

/// The full pipeline: partition, normal form, mixing in the proper
/// coordinates, empirical series, and the assembled verdict report.
pub fn run_verification(
    system: &HamiltonianSystem,
    density: &EnsembleDensity,
    observable: &Observable,
    cfg: &PipelineConfig,
    fingerprint: String,
) -> Result<VerificationOutput> {
    let eps = system.epsilon;
    if cfg.times.is_empty() || cfg.times.iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidParameter(
            "pipeline times must be strictly positive".into(),
        ));
    }
    let terms = compute_terms(system, density, observable, cfg)?;
    let BoundTerms {
        spec,
        masses,
        partition,
        mixing,
        p_soft,
        e_eq,
        r_sup,
        nf_term,
        nf_summary,
        identity_transform,
        omega_sup,
    } = terms;
    let rng = SeededRng::new(cfg.seed, 0);

    // 9. Empirical deviation series under the true flow.
    let dt = cfg.dt.unwrap_or_else(|| suggested_dt(omega_sup));
    let flow = if eps == 0.0 {
        FlowSpec::exact_integrable(&system.integrable)
    } else {
        FlowSpec::symplectic(system, dt, Scheme::StrangSplitting)?
    };
    let (series, samples) = match cfg.estimator {
        EstimatorChoice::MonteCarlo { samples } => {
            let set = sample_density(density, samples, &rng.substream(1), cfg.threads)?;
            let series =
                deviation_series_mc(observable, &flow, density, &cfg.times, &set, cfg.threads)?;
            (series, Some(set))
        }
        EstimatorChoice::Quadrature { action_res } => {
            if eps != 0.0 {
                return Err(Error::InvalidParameter(
                    "the quadrature estimator requires eps = 0 (exact flow)".into(),
                ));
            }
            let series = deviation_series_quadrature(
                observable,
                &system.integrable,
                density,
                &cfg.times,
                action_res,
            )?;
            (series, None)
        }
    };

    // 10. dt/2 refinement differences on a sample subset, when needed.
    let needs_candidate_check = {
        // Provisional verdict classification without Richardson data.
        let g_sup = observable.sup_norm();
        let term_res = 2.0 * g_sup * p_soft;
        let cg = if cfg.fault_zero_mixing {
            0.0
        } else {
            mixing.cg_direct
        };
        series.times.iter().enumerate().any(|(i, &t)| {
            let total_wo_nf = term_res + cg / t + mixing.tail + e_eq;
            series.deviations[i] > total_wo_nf + 3.0 * series.stderrs[i] - 1e-300
        })
    };
    let richardson = if flow.is_exact() {
        Some(vec![0.0; cfg.times.len()])
    } else if cfg.dt_check || needs_candidate_check {
        let subset_n = cfg.richardson_samples.min(
            samples
                .as_ref()
                .map(|s| s.len())
                .unwrap_or(cfg.richardson_samples),
        );
        let subset = SampleSet {
            points: samples
                .as_ref()
                .map(|s| s.points[..subset_n].to_vec())
                .unwrap_or_default(),
            master_seed: cfg.seed,
            stream_base: 0,
            acceptance_rate: 1.0,
        };
        if subset.is_empty() {
            None
        } else {
            let coarse =
                deviation_series_mc(observable, &flow, density, &cfg.times, &subset, cfg.threads)?;
            let fine_flow = flow.with_dt(dt / 2.0);
            let fine = deviation_series_mc(
                observable,
                &fine_flow,
                density,
                &cfg.times,
                &subset,
                cfg.threads,
            )?;
            Some(
                coarse
                    .deviations
                    .iter()
                    .zip(&fine.deviations)
                    .map(|(a, b)| (a - b).abs())
                    .collect(),
            )
        }
    } else {
        None
    };

    // 11. Window and final assembly.
    let window = window_from_order(
        spec.order as f64,
        eps.max(f64::MIN_POSITIVE),
        cfg.window_c,
        cfg.window_sigma,
        cfg.window_ceiling,
    )?;
    let report = assemble(AssembleInput {
        epsilon: eps,
        spec,
        series: &series,
        mixing: &mixing,
        g_sup: observable.sup_norm(),
        p_res: masses.resonant,
        p_soft,
        e_eq,
        r_sup,
        nf_term,
        window,
        fault_zero_mixing: cfg.fault_zero_mixing,
        richardson,
        seed: cfg.seed,
        fingerprint,
        identity_transform,
    })?;
    Ok(VerificationOutput {
        report,
        mixing,
        partition,
        series,
        masses,
        nf_summary,
    })
}

/// Rejection sampling from `f0 * eta` with the density's certified sup.
pub fn sample_masked_density(
    f0: &EnsembleDensity,
    mask: &SmoothMask,
    count: usize,
    rng: &SeededRng,
    threads: usize,
) -> Result<SampleSet> {
    // Thin wrapper over the plain sampler: draw from f0 and thin by eta.
    // eta <= 1, so accept draws with u <= eta(I); sample indices keep their
    // own streams, preserving determinism.
    let _ = threads;
    let mut points = Vec::with_capacity(count);
    let mut attempts: u64 = 0;
    let base = sample_density(f0, count, rng, 1)?;
    let mut extra_stream = 0u64;
    let mut pool = base.points;
    let mut idx = 0usize;
    let mut thinner = rng.substream(u64::MAX / 2);
    while points.len() < count {
        if idx >= pool.len() {
            extra_stream += 1;
            pool = sample_density(f0, count, &rng.substream(1000 + extra_stream), 1)?.points;
            idx = 0;
        }
        let z = &pool[idx];
        idx += 1;
        attempts += 1;
        if attempts > (count as u64) * 10_000 {
            return Err(Error::AcceptanceTooLow {
                rate: points.len() as f64 / attempts as f64,
                floor: crate::estimator::ACCEPTANCE_FLOOR,
            });
        }
        let eta = mask.eval(&z.action);
        if eta >= 1.0 || thinner.unit() <= eta {
            points.push(z.clone());
        }
    }
    Ok(SampleSet {
        points,
        master_seed: rng.master_seed(),
        stream_base: rng.stream_id(),
        acceptance_rate: count as f64 / attempts as f64,
    })
}

/// Nodes a composed density can reach: the density support dilated by the
/// transform displacement plus two cell diagonals, probed on a small
/// stencil. Inactive nodes carry identically-zero composed data.
fn support_activity(
    density: &EnsembleDensity,
    grid: &crate::grid::ActionGrid,
    slack: f64,
) -> Vec<bool> {
    let n = grid.dim();
    let s = slack + 2.0 * grid.half_diagonal();
    let offsets = [-s, 0.0, s];
    (0..grid.len())
        .map(|i| {
            let node = grid.node(i);
            let mut idx = vec![0usize; n];
            let mut probe = vec![0.0; n];
            loop {
                for a in 0..n {
                    probe[a] = node[a] + offsets[idx[a]];
                }
                if density.field().envelope(&probe) > 0.0 {
                    return true;
                }
                let mut carry = true;
                for a in (0..n).rev() {
                    idx[a] += 1;
                    if idx[a] < 3 {
                        carry = false;
                        break;
                    }
                    idx[a] = 0;
                }
                if carry {
                    return false;
                }
            }
        })
        .collect()
}

fn support_probe_points(actions: &[Vec<f64>], theta_res: usize) -> Result<Vec<PhasePoint>> {
    let tg = crate::grid::TorusGrid::new(actions[0].len(), theta_res);
    let stride = (actions.len() / 64).max(1);
    let mut out = Vec::new();
    for a in actions.iter().step_by(stride) {
        for ti in 0..tg.len() {
            out.push(PhasePoint::new(tg.node(ti).to_vec(), a.clone())?);
        }
    }
    Ok(out)
}

/// Training/holdout split of the time grid for the error-constant
/// calibration: the lower half trains, up to two mid-range points hold out.
fn split_times(times: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = (sorted.len() / 2).max(1);
    let training: Vec<f64> = sorted[..cut].to_vec();
    let holdout: Vec<f64> = sorted[cut..].iter().take(2).cloned().collect();
    if holdout.is_empty() {
        (training.clone(), training)
    } else {
        (training, holdout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorKind;
    use crate::model::builtin_system;

    fn dummy_series(times: Vec<f64>, devs: Vec<f64>, stderrs: Vec<f64>) -> DeviationSeries {
        DeviationSeries {
            times,
            deviations: devs,
            stderrs,
            estimator: EstimatorKind::MonteCarlo { samples: 100 },
            seed: 3,
            equilibrium: 0.0,
        }
    }

    fn dummy_mixing(cg: f64, tail: f64) -> MixingReport {
        MixingReport {
            order: 2,
            coords: CoordinateFrame::NormalForm,
            records: Vec::new(),
            cg_direct: cg,
            cg_lemma: cg * 2.0,
            tail,
            region_empty: false,
            mask: MaskInfo::none(),
            gamma_floor: GAMMA_FLOOR,
            hessian_norm: "spectral".into(),
            outer_band_mass: 0.0,
        }
    }

    fn assemble_with(
        devs: Vec<f64>,
        stderrs: Vec<f64>,
        cg: f64,
        richardson: Option<Vec<f64>>,
    ) -> Result<BoundReport> {
        let times: Vec<f64> = (1..=devs.len()).map(|i| i as f64).collect();
        let series = dummy_series(times, devs, stderrs);
        let mixing = dummy_mixing(cg, 0.0);
        assemble(AssembleInput {
            epsilon: 0.0,
            spec: PartitionSpec::new(2, 0.05).unwrap(),
            series: &series,
            mixing: &mixing,
            g_sup: 1.0,
            p_res: 0.0,
            p_soft: 0.0,
            e_eq: 0.0,
            r_sup: 0.0,
            nf_term: NfTermProvenance::EmptyRegion,
            window: window_from_order(2.0, 1e-3, 1.0 / 6.0, 1.0 / 15.0, 1e6).unwrap(),
            fault_zero_mixing: false,
            richardson,
            seed: 3,
            fingerprint: "test".into(),
            identity_transform: true,
        })
    }

    #[test]
    fn window_cases() {
        // sigma = c/2 is rejected; the boundary is excluded.
        assert!(exp_window(1e-2, 0.5, 0.2, 0.1, 1e9).is_err());
        // eps = 1e-2, a = 1/2, sigma = 0.1: t_max = exp(1) = e.
        let w = exp_window(1e-2, 0.5, 0.5, 0.1, 1e9).unwrap();
        assert!((w.t_max - std::f64::consts::E).abs() < 1e-12);
        // Envelope decreases as sigma decreases.
        let w1 = exp_window(1e-2, 0.5, 0.5, 0.2, 1e9).unwrap();
        let w2 = exp_window(1e-2, 0.5, 0.5, 0.1, 1e9).unwrap();
        assert!(w2.envelope < w1.envelope);
        // Ceiling clamps.
        let w = exp_window(1e-4, 0.5, 0.5, 0.24, 1e3).unwrap();
        assert!(w.clamped);
        assert_eq!(w.t_max, 1e3);
    }

    #[test]
    fn verdict_bands() {
        // total(t) = 1/t with cg = 1: holds, within-3sigma, violated.
        let report = assemble_with(
            vec![0.5, 0.52, 0.9],
            vec![0.01, 0.01, 0.01],
            1.0,
            Some(vec![0.0, 0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(report.rows[0].verdict, Verdict::Holds); // 0.5 <= 1
        assert_eq!(report.rows[1].verdict, Verdict::HoldsWithin3Sigma); // 0.52 in (0.5, 0.53]
        assert_eq!(report.rows[2].verdict, Verdict::Violated); // 0.9 > 1/3 + 0.03
        assert!(report.any_violated());
    }

    #[test]
    fn unconfirmed_violation_is_an_error() {
        let out = assemble_with(
            vec![0.9],
            vec![0.01],
            0.1,
            Some(vec![0.5]), // refinement difference dwarfs the stderr
        );
        assert!(matches!(out, Err(Error::DiscretizationUnresolved { .. })));
        let out = assemble_with(vec![0.9], vec![0.01], 0.1, None);
        assert!(matches!(out, Err(Error::DiscretizationUnresolved { .. })));
    }

    #[test]
    fn mixing_term_decreases_in_t() {
        let report = assemble_with(
            vec![0.1, 0.1, 0.1],
            vec![0.05, 0.05, 0.05],
            2.0,
            Some(vec![0.0; 3]),
        )
        .unwrap();
        for w in report.rows.windows(2) {
            assert!(w[1].term_mix < w[0].term_mix);
        }
        for r in &report.rows {
            let total = r.term_res + r.term_mix + r.term_tail + r.term_nf + r.term_eq;
            assert!((total - r.total).abs() < 1e-15);
        }
    }

    #[test]
    fn original_coordinates_with_perturbation_rejected() {
        let series = dummy_series(vec![1.0], vec![0.1], vec![0.01]);
        let mut mixing = dummy_mixing(1.0, 0.0);
        mixing.coords = CoordinateFrame::Original;
        let out = assemble(AssembleInput {
            epsilon: 1e-3,
            spec: PartitionSpec::new(2, 0.05).unwrap(),
            series: &series,
            mixing: &mixing,
            g_sup: 1.0,
            p_res: 0.0,
            p_soft: 0.0,
            e_eq: 0.0,
            r_sup: 1e-6,
            nf_term: NfTermProvenance::EmptyRegion,
            window: window_from_order(2.0, 1e-3, 1.0 / 6.0, 1.0 / 15.0, 1e6).unwrap(),
            fault_zero_mixing: false,
            richardson: None,
            seed: 0,
            fingerprint: "t".into(),
            identity_transform: false,
        });
        assert!(matches!(out, Err(Error::CoordinateMismatch(_))));
    }

    #[test]
    fn constant_observable_pipeline_holds_everywhere() {
        // G constant: deviation 0, bound >= 0, all verdicts hold.
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let g = Observable::new(
            crate::model::TrigPolyField::zero(2)
                .with_zero_mode(crate::expr::Expr::constant(2.0)),
            &bundle.system.domain,
        )
        .unwrap();
        let cfg = PipelineConfig {
            schedule: ScheduleChoice::Explicit {
                order: 2,
                alpha: 0.02,
            },
            times: vec![1.0, 10.0],
            estimator: EstimatorChoice::MonteCarlo { samples: 400 },
            action_res: 32,
            pres_res: 120,
            ..Default::default()
        };
        let out =
            run_verification(&bundle.system, &bundle.density, &g, &cfg, "test".into()).unwrap();
        assert!(!out.report.any_violated());
        for r in &out.report.rows {
            assert!(r.empirical < 1e-9);
            assert_eq!(r.verdict, Verdict::Holds);
        }
    }

    #[test]
    fn eps_zero_pipeline_reduces_to_mixing_form() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let cfg = PipelineConfig {
            schedule: ScheduleChoice::Explicit {
                order: 2,
                alpha: 0.02,
            },
            times: vec![1.0, 5.0, 20.0],
            estimator: EstimatorChoice::MonteCarlo { samples: 4000 },
            action_res: 48,
            pres_res: 160,
            ..Default::default()
        };
        let out = run_verification(
            &bundle.system,
            &bundle.density,
            &bundle.observable,
            &cfg,
            "test".into(),
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.p_res, 0.0);
        assert_eq!(r.p_soft, 0.0);
        assert_eq!(r.e_eq, 0.0);
        assert!(r.cg > 0.0);
        for row in &r.rows {
            assert_eq!(row.term_nf, 0.0);
            assert_eq!(row.term_res, 0.0);
            // The bound reduces to C_G/t (+ zero tail) and holds.
            assert!(row.verdict != Verdict::Violated);
        }
    }

    #[test]
    fn fault_injection_produces_violation() {
        let bundle = builtin_system("twist2", 0.0).unwrap();
        let cfg = PipelineConfig {
            schedule: ScheduleChoice::Explicit {
                order: 2,
                alpha: 0.02,
            },
            times: vec![1.0, 2.0],
            estimator: EstimatorChoice::MonteCarlo { samples: 4000 },
            action_res: 48,
            pres_res: 160,
            fault_zero_mixing: true,
            ..Default::default()
        };
        let out = run_verification(
            &bundle.system,
            &bundle.density,
            &bundle.observable,
            &cfg,
            "test".into(),
        )
        .unwrap();
        assert!(out.report.any_violated(), "negative control failed to trip");
        assert!(out.report.fault_zero_mixing);
    }

    #[test]
    fn report_serializes_and_writes_csv() {
        let report = assemble_with(
            vec![0.5, 0.2],
            vec![0.01, 0.01],
            1.0,
            Some(vec![0.0, 0.0]),
        )
        .unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        assert!(json.contains("fingerprint"));
        let mut csv = Vec::new();
        report.write_verdict_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,empirical,stderr,term_res,"));
        assert_eq!(text.lines().count(), 3);
        let mut plot = Vec::new();
        report.write_plot_csv(&mut plot).unwrap();
        assert!(String::from_utf8(plot).unwrap().lines().count() == 3);
    }
}
