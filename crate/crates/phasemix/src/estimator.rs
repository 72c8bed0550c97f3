//! Ensemble expectations, sampling, and empirical deviation series.
//!
//! `<G>_t` is always the push-forward integral: samples (or quadrature
//! nodes) are evolved forward and `G` is averaged, never the density. Monte
//! Carlo runs reuse one sample set across all times (common random numbers)
//! so that bound-versus-empirical comparisons are low variance. Every
//! sample index owns its own RNG stream, so the sample set is independent
//! of the thread count.

use crate::error::{Error, Result};
use crate::flow::FlowSpec;
use crate::grid::{build_grid, QuadratureRule, TorusGrid};
use crate::model::{EnsembleDensity, IntegrablePart, Observable};
use crate::rng::SeededRng;
use crate::space::{CompensatedSum, PhasePoint};
use serde::Serialize;
use std::f64::consts::TAU;
use std::io::Write;

/// Abort rejection sampling below this acceptance rate.
pub const ACCEPTANCE_FLOOR: f64 = 1e-4;

/// Samples are generated and evolved in fixed blocks of this size, so
/// parallel schedules cannot change results.
const BLOCK: usize = 1024;

/// I.i.d. draws from an ensemble density, with sampling provenance.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<PhasePoint>,
    pub master_seed: u64,
    pub stream_base: u64,
    pub acceptance_rate: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rejection sampling from `f_0` against the uniform proposal on
/// `T^n x bounding box`, using the certified sup bound. Sample `i` draws
/// from stream `stream_base + i` of the master seed.
pub fn sample_density(
    f0: &EnsembleDensity,
    count: usize,
    rng: &SeededRng,
    threads: usize,
) -> Result<SampleSet> {
    let n = f0.dim();
    let sup = f0.certified_sup().value;
    if !(sup > 0.0) {
        return Err(Error::InvalidParameter("density sup bound is zero".into()));
    }
    let (lower, upper) = f0.domain().bounding_box();
    let stream_base = rng.stream_id().wrapping_mul(1 << 20).wrapping_add(1 << 32);
    // Cap per-sample attempts so a far-too-peaked density aborts instead of
    // spinning: the floor corresponds to 1e4 expected attempts per sample.
    let max_attempts: u64 = (100.0 / ACCEPTANCE_FLOOR) as u64;

    let mut slots: Vec<Option<PhasePoint>> = vec![None; count];
    let mut attempts_per_block: Vec<u64> = vec![0; count.div_ceil(BLOCK)];

    let gen_block = |block_idx: usize, slots: &mut [Option<PhasePoint>]| -> Result<u64> {
        let start = block_idx * BLOCK;
        let mut attempts = 0u64;
        for (offset, slot) in slots.iter_mut().enumerate() {
            let i = start + offset;
            let mut stream = rng.substream(stream_base.wrapping_add(i as u64));
            let mut found = None;
            for _ in 0..max_attempts {
                attempts += 1;
                let theta: Vec<f64> = (0..n).map(|_| stream.uniform(0.0, TAU)).collect();
                let action: Vec<f64> = (0..n)
                    .map(|j| stream.uniform(lower[j], upper[j]))
                    .collect();
                let u = stream.unit();
                let value = f0.field().eval_at(&theta, &action);
                if u * sup <= value {
                    found = Some(PhasePoint { theta, action });
                    break;
                }
            }
            match found {
                Some(p) => *slot = Some(p),
                None => {
                    return Err(Error::AcceptanceTooLow {
                        rate: 1.0 / max_attempts as f64,
                        floor: ACCEPTANCE_FLOOR,
                    })
                }
            }
        }
        Ok(attempts)
    };

    if threads <= 1 {
        for (block_idx, chunk) in slots.chunks_mut(BLOCK).enumerate() {
            attempts_per_block[block_idx] = gen_block(block_idx, chunk)?;
        }
    } else {
        let results: Vec<Result<u64>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (block_idx, chunk) in slots.chunks_mut(BLOCK).enumerate() {
                let gen = &gen_block;
                handles.push(scope.spawn(move || gen(block_idx, chunk)));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("sampler thread panicked"))
                .collect()
        });
        for (block_idx, r) in results.into_iter().enumerate() {
            attempts_per_block[block_idx] = r?;
        }
    }

    let total_attempts: u64 = attempts_per_block.iter().sum();
    let rate = count as f64 / total_attempts as f64;
    if rate < ACCEPTANCE_FLOOR {
        return Err(Error::AcceptanceTooLow {
            rate,
            floor: ACCEPTANCE_FLOOR,
        });
    }
    Ok(SampleSet {
        points: slots.into_iter().map(|s| s.unwrap()).collect(),
        master_seed: rng.master_seed(),
        stream_base,
        acceptance_rate: rate,
    })
}

/// Mean and standard error of `G(Phi^t(z_i))` over the sample set.
pub fn ensemble_average(
    observable: &Observable,
    flow: &FlowSpec,
    samples: &SampleSet,
    t: f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    let mut sum = CompensatedSum::new();
    let mut sum_sq = CompensatedSum::new();
    for z in &samples.points {
        let v = observable.eval(&flow.evolve(z, t)?);
        sum.add(v);
        sum_sq.add(v * v);
    }
    let n = samples.len() as f64;
    let mean = sum.total() / n;
    let var = ((sum_sq.total() - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// `<<G>_theta>_0 = int <G>_theta(I) rho_0(I) dI` by action quadrature
/// (the angle integral kills every nonzero mode exactly).
pub fn equilibrium_value(
    observable: &Observable,
    f0: &EnsembleDensity,
    grid: &crate::grid::ActionGrid,
) -> f64 {
    grid.integrate(|i| observable.angular_average(i) * f0.marginal(i))
}

/// Default fine midpoint grid for equilibrium quadrature.
pub fn equilibrium_grid(f0: &EnsembleDensity) -> Result<crate::grid::ActionGrid> {
    let n = f0.dim();
    let res = match n {
        1 => 20_000,
        2 => 600,
        _ => 90,
    };
    build_grid(f0.domain(), &vec![res; n], QuadratureRule::Midpoint)
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    MonteCarlo { samples: usize },
    Quadrature { theta_res: usize, action_res: usize },
}

/// Empirical deviation `|<G>_t - <<G>_theta>_0|` over a time grid, with
/// per-time standard errors (zero for the quadrature estimator).
#[derive(Debug, Clone, Serialize)]
pub struct DeviationSeries {
    pub times: Vec<f64>,
    pub deviations: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub equilibrium: f64,
}

impl DeviationSeries {
    /// CSV with header `t,deviation,stderr,estimator,seed`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,deviation,stderr,estimator,seed")?;
        let kind = match &self.estimator {
            EstimatorKind::MonteCarlo { samples } => format!("monte-carlo({samples})"),
            EstimatorKind::Quadrature {
                theta_res,
                action_res,
            } => format!("quadrature({theta_res}x{action_res})"),
        };
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.times[i], self.deviations[i], self.stderrs[i], kind, self.seed
            )?;
        }
        Ok(())
    }
}

/// Monte Carlo deviation series: one sample set, evolved once through the
/// ascending time grid, averaged blockwise in fixed order.
pub fn deviation_series_mc(
    observable: &Observable,
    flow: &FlowSpec,
    f0: &EnsembleDensity,
    times: &[f64],
    samples: &SampleSet,
    threads: usize,
) -> Result<DeviationSeries> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidParameter(
            "times must be nonnegative and strictly increasing".into(),
        ));
    }
    let eq = equilibrium_value(observable, f0, &equilibrium_grid(f0)?);
    let nt = times.len();

    type BlockSums = (Vec<CompensatedSum>, Vec<CompensatedSum>);
    let run_block = |points: &[PhasePoint]| -> Result<BlockSums> {
        let mut sums = vec![CompensatedSum::new(); nt];
        let mut sq = vec![CompensatedSum::new(); nt];
        for z in points {
            let traj = flow.trajectory(z, times)?;
            for (ti, state) in traj.states.iter().enumerate() {
                let v = observable.eval(state);
                sums[ti].add(v);
                sq[ti].add(v * v);
            }
        }
        Ok((sums, sq))
    };

    let blocks: Vec<Result<BlockSums>> = if threads <= 1 {
        samples.points.chunks(BLOCK).map(run_block).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .points
                .chunks(BLOCK)
                .map(|chunk| scope.spawn(move || run_block(chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("estimator thread panicked"))
                .collect()
        })
    };

    let mut sums = vec![CompensatedSum::new(); nt];
    let mut sq = vec![CompensatedSum::new(); nt];
    for block in blocks {
        let (bs, bq) = block?;
        for ti in 0..nt {
            sums[ti].merge(bs[ti]);
            sq[ti].merge(bq[ti]);
        }
    }

    let n = samples.len() as f64;
    let mut deviations = Vec::with_capacity(nt);
    let mut stderrs = Vec::with_capacity(nt);
    for ti in 0..nt {
        let mean = sums[ti].total() / n;
        let var = ((sq[ti].total() - n * mean * mean) / (n - 1.0)).max(0.0);
        deviations.push((mean - eq).abs());
        stderrs.push((var / n).sqrt());
    }
    Ok(DeviationSeries {
        times: times.to_vec(),
        deviations,
        stderrs,
        estimator: EstimatorKind::MonteCarlo {
            samples: samples.len(),
        },
        seed: samples.master_seed,
        equilibrium: eq,
    })
}

/// Deterministic deviation series for the exact integrable flow, by tensor
/// quadrature over `(theta, I)`. The angle rule is exact for the band-limited
/// integrand; the action grid is midpoint with `action_res` nodes per axis.
pub fn deviation_series_quadrature(
    observable: &Observable,
    integrable: &IntegrablePart,
    f0: &EnsembleDensity,
    times: &[f64],
    action_res: usize,
) -> Result<DeviationSeries> {
    let n = f0.dim();
    let band =
        (observable.field().band_limit_l1() + f0.field().band_limit_l1()) as usize;
    let theta_res = (band + 1).max(4);
    let tg = TorusGrid::new(n, theta_res);
    let ag = build_grid(f0.domain(), &vec![action_res; n], QuadratureRule::Midpoint)?;
    let eq = equilibrium_value(observable, f0, &equilibrium_grid(f0)?);

    // Per-node caches: frequency and density values over the angle grid.
    let mut omegas: Vec<f64> = Vec::with_capacity(ag.len() * n);
    let mut density: Vec<f64> = Vec::with_capacity(ag.len() * tg.len());
    for i in 0..ag.len() {
        let act = ag.node(i);
        omegas.extend(integrable.freq(act));
        for ti in 0..tg.len() {
            density.push(f0.field().eval_at(tg.node(ti), act));
        }
    }

    let wt = tg.weight();
    let mut deviations = Vec::with_capacity(times.len());
    let mut shifted = vec![0.0; n];
    for &t in times {
        let mut acc = CompensatedSum::new();
        for i in 0..ag.len() {
            let act = ag.node(i);
            let w = ag.weight(i);
            let omega = &omegas[i * n..(i + 1) * n];
            let mut inner = CompensatedSum::new();
            for ti in 0..tg.len() {
                let rho = density[i * tg.len() + ti];
                if rho == 0.0 {
                    continue;
                }
                let th = tg.node(ti);
                for j in 0..n {
                    shifted[j] = th[j] + t * omega[j];
                }
                inner.add(observable.field().eval_at(&shifted, act) * rho);
            }
            acc.add(w * wt * inner.total());
        }
        deviations.push((acc.total() - eq).abs());
    }
    Ok(DeviationSeries {
        times: times.to_vec(),
        stderrs: vec![0.0; times.len()],
        deviations,
        estimator: EstimatorKind::Quadrature {
            theta_res,
            action_res,
        },
        seed: 0,
        equilibrium: eq,
    })
}

/// Kolmogorov-Smirnov statistic of the sampled `axis` marginal against the
/// quadrature CDF of `rho_0`'s marginal on that axis.
pub fn ks_statistic_marginal(f0: &EnsembleDensity, samples: &SampleSet, axis: usize) -> f64 {
    let n = f0.dim();
    let (lower, upper) = f0.domain().bounding_box();
    // Marginal density on a fine 1D grid by integrating out the other axes.
    let bins = 2000;
    let h = (upper[axis] - lower[axis]) / bins as f64;
    let mut marginal = vec![0.0; bins];
    if n == 1 {
        for b in 0..bins {
            let x = lower[0] + (b as f64 + 0.5) * h;
            marginal[b] = f0.marginal(&[x]);
        }
    } else {
        let res = if n == 2 { 400 } else { 40 };
        let others: Vec<usize> = (0..n).filter(|&j| j != axis).collect();
        let mut point = vec![0.0; n];
        for b in 0..bins {
            point[axis] = lower[axis] + (b as f64 + 0.5) * h;
            // Tensor midpoint over the remaining axes.
            let mut total = 0.0;
            let mut idx = vec![0usize; others.len()];
            'outer: loop {
                let mut w = 1.0;
                for (m, &j) in others.iter().enumerate() {
                    let hj = (upper[j] - lower[j]) / res as f64;
                    point[j] = lower[j] + (idx[m] as f64 + 0.5) * hj;
                    w *= hj;
                }
                total += w * f0.marginal(&point);
                for m in (0..others.len()).rev() {
                    idx[m] += 1;
                    if idx[m] < res {
                        continue 'outer;
                    }
                    idx[m] = 0;
                    if m == 0 {
                        break 'outer;
                    }
                }
            }
            marginal[b] = total;
        }
    }
    // CDF table.
    let mut cdf = vec![0.0; bins + 1];
    for b in 0..bins {
        cdf[b + 1] = cdf[b] + marginal[b] * h;
    }
    let norm = cdf[bins];
    let eval_cdf = |x: f64| -> f64 {
        let u = ((x - lower[axis]) / h).clamp(0.0, bins as f64);
        let b = (u.floor() as usize).min(bins - 1);
        ((cdf[b] + (u - b as f64) * marginal[b] * h) / norm).clamp(0.0, 1.0)
    };
    let mut xs: Vec<f64> = samples.points.iter().map(|p| p.action[axis]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = eval_cdf(x);
        ks = ks.max((f - i as f64 / m).abs());
        ks = ks.max(((i + 1) as f64 / m - f).abs());
    }
    ks
}
