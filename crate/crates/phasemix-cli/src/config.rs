//! Experiment configuration: schema, validation, and conversion into
//! library objects.

use crate::exprparse::parse_expr;
use anyhow::{bail, Context, Result};
use phasemix::bound::{EstimatorChoice, PipelineConfig, ScheduleChoice};
use phasemix::expr::CoeffFn;
use phasemix::model::{
    builtin_system, EnsembleDensity, HamiltonianSystem, IntegrablePart, Observable,
    TrigPolyField,
};
use phasemix::space::ActionDomain;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemConfig,
    #[serde(default)]
    pub density: Option<FieldConfig>,
    #[serde(default)]
    pub observable: Option<FieldConfig>,
    pub schedule: ScheduleConfig,
    pub estimator: EstimatorConfig,
    pub times: TimesConfig,
    #[serde(default)]
    pub grids: GridsConfig,
    #[serde(default)]
    pub normalform: NfConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub flags: FlagsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Sweep values; `verify` uses `epsilon` (or the first entry).
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub dimension: Option<usize>,
    /// Integrable part expression, e.g. `"0.5*(I1^2 + I2^2)"`.
    #[serde(default)]
    pub h: Option<String>,
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    /// Perturbation shape modes; epsilon scales the whole field.
    #[serde(default)]
    pub modes: Option<Vec<ModeConfig>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DomainConfig {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// One Fourier mode: wavevector plus exactly one coefficient form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub k: Vec<i32>,
    /// Amplitude of `cos(k.theta)`.
    #[serde(default)]
    pub cos: Option<String>,
    /// Amplitude of `sin(k.theta)`.
    #[serde(default)]
    pub sin: Option<String>,
    /// Raw complex coefficient (paired with its conjugate at `-k`).
    #[serde(default)]
    pub re: Option<String>,
    #[serde(default)]
    pub im: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub modes: Vec<ModeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleConfig {
    Zz {
        beta: f64,
        s0: f64,
    },
    Power {
        a: f64,
        prefactor: f64,
        alpha: f64,
    },
    Explicit {
        order: i32,
        alpha: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Action resolution of the quadrature estimator.
    #[serde(default = "default_quad_res")]
    pub action_res: usize,
}

fn default_kind() -> String {
    "monte-carlo".into()
}
fn default_samples() -> usize {
    10_000
}
fn one() -> usize {
    1
}
fn default_quad_res() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimesConfig {
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridsConfig {
    pub action_res: usize,
    pub pres_res: usize,
    pub pres_refine: usize,
}

impl Default for GridsConfig {
    fn default() -> Self {
        Self {
            action_res: 48,
            pres_res: 400,
            pres_refine: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NfConfig {
    pub dt_nf: f64,
    pub lie_steps: usize,
    pub theta_res: usize,
    pub samples: usize,
    pub flow_dt: f64,
}

impl Default for NfConfig {
    fn default() -> Self {
        Self {
            dt_nf: 1e-3,
            lie_steps: 1,
            theta_res: 16,
            samples: 400,
            flow_dt: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub c: f64,
    pub sigma: f64,
    pub ceiling: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            c: 1.0 / 6.0,
            sigma: 1.0 / 15.0,
            ceiling: 1e6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub cutoff_width: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { cutoff_width: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FlagsConfig {
    pub dt_check: bool,
    pub fault_zero_mixing: bool,
    pub assumption_c_nf: Option<f64>,
    pub assumption_rate: Option<f64>,
    pub c_err_override: Option<f64>,
}

/// Concrete objects for one run.
pub struct BuiltExperiment {
    pub system: HamiltonianSystem,
    pub density: EnsembleDensity,
    pub observable: Observable,
    pub pipeline: PipelineConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).context("config schema error")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.system.builtin.is_none() {
            for (field, name) in [
                (self.system.dimension.is_none(), "system.dimension"),
                (self.system.h.is_none(), "system.h"),
                (self.system.domain.is_none(), "system.domain"),
                (self.system.modes.is_none(), "system.modes"),
            ] {
                if field {
                    bail!("inline system definitions require `{name}`");
                }
            }
            if self.density.is_none() || self.observable.is_none() {
                bail!("inline systems must define [density] and [observable]");
            }
        }
        if self.system.epsilon.is_none() && self.system.epsilons.is_none() {
            bail!("set system.epsilon (or system.epsilons for sweeps)");
        }
        if self.times.grid.is_empty() {
            bail!("times.grid must not be empty");
        }
        if self.times.grid.windows(2).any(|w| w[0] >= w[1]) {
            bail!("times.grid must be strictly increasing");
        }
        match self.estimator.kind.as_str() {
            "monte-carlo" | "quadrature" => {}
            other => bail!("unknown estimator kind `{other}` (monte-carlo | quadrature)"),
        }
        Ok(())
    }

    pub fn epsilon_list(&self) -> Vec<f64> {
        match (&self.system.epsilons, self.system.epsilon) {
            (Some(list), _) if !list.is_empty() => list.clone(),
            (_, Some(e)) => vec![e],
            _ => vec![],
        }
    }

    /// Build library objects for one epsilon.
    pub fn build(&self, epsilon: f64) -> Result<BuiltExperiment> {
        let (system, default_density, default_observable) = match &self.system.builtin {
            Some(name) => {
                let bundle = builtin_system(name, epsilon)?;
                (
                    bundle.system,
                    Some(bundle.density),
                    Some(bundle.observable),
                )
            }
            None => {
                let dim = self.system.dimension.unwrap();
                let domain = match self.system.domain.as_ref().unwrap() {
                    DomainConfig::Ball { center, radius } => {
                        ActionDomain::ball(center.clone(), *radius)?
                    }
                    DomainConfig::Box { lower, upper } => {
                        ActionDomain::cuboid(lower.clone(), upper.clone())?
                    }
                };
                let h = parse_expr(self.system.h.as_ref().unwrap(), dim)
                    .context("in system.h")?;
                let shape = build_field(dim, self.system.modes.as_ref().unwrap())
                    .context("in system.modes")?;
                (
                    HamiltonianSystem::new(IntegrablePart::new(dim, h), shape, epsilon, domain)?,
                    None,
                    None,
                )
            }
        };
        let dim = system.dim();
        let density = match &self.density {
            Some(f) => {
                let field = build_field(dim, &f.modes).context("in density.modes")?;
                EnsembleDensity::normalize(field, &system.domain)?
            }
            None => default_density.expect("builtin provides a density"),
        };
        let observable = match &self.observable {
            Some(f) => {
                let field = build_field(dim, &f.modes).context("in observable.modes")?;
                Observable::new(field, &system.domain)?
            }
            None => default_observable.expect("builtin provides an observable"),
        };

        let schedule = match &self.schedule {
            ScheduleConfig::Zz { beta, s0 } => ScheduleChoice::Zz {
                beta: *beta,
                s0: *s0,
            },
            ScheduleConfig::Power {
                a,
                prefactor,
                alpha,
            } => ScheduleChoice::Power {
                a: *a,
                prefactor: *prefactor,
                alpha: *alpha,
            },
            ScheduleConfig::Explicit { order, alpha } => ScheduleChoice::Explicit {
                order: *order,
                alpha: *alpha,
            },
        };
        let estimator = match self.estimator.kind.as_str() {
            "quadrature" => EstimatorChoice::Quadrature {
                action_res: self.estimator.action_res,
            },
            _ => EstimatorChoice::MonteCarlo {
                samples: self.estimator.samples,
            },
        };
        let assumption_mode = match (self.flags.assumption_c_nf, self.flags.assumption_rate) {
            (Some(c), Some(r)) => Some((c, r)),
            (None, None) => None,
            _ => bail!("assumption mode needs both flags.assumption_c_nf and flags.assumption_rate"),
        };
        let pipeline = PipelineConfig {
            schedule,
            times: self.times.grid.clone(),
            estimator,
            seed: self.estimator.seed,
            threads: self.estimator.threads.max(1),
            dt: self.estimator.dt,
            dt_check: self.flags.dt_check,
            action_res: self.grids.action_res,
            pres_res: self.grids.pres_res,
            pres_refine: self.grids.pres_refine,
            cutoff_width: self.mask.cutoff_width,
            nf_dt: self.normalform.dt_nf,
            nf_lie_steps: self.normalform.lie_steps,
            nf_theta_res: self.normalform.theta_res,
            nf_samples: self.normalform.samples,
            nf_flow_dt: self.normalform.flow_dt,
            window_c: self.window.c,
            window_sigma: self.window.sigma,
            window_ceiling: self.window.ceiling,
            assumption_mode,
            c_err_override: self.flags.c_err_override,
            fault_zero_mixing: self.flags.fault_zero_mixing,
            gamma_floor: phasemix::mixing::GAMMA_FLOOR,
            richardson_samples: 2000,
        };
        Ok(BuiltExperiment {
            system,
            density,
            observable,
            pipeline,
        })
    }

    /// Canonical serialization and its SHA-256 fingerprint.
    pub fn fingerprint(&self) -> Result<(String, String)> {
        let canonical = toml::to_string(self).context("serializing config")?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok((canonical, format!("{:x}", hasher.finalize())))
    }
}

fn build_field(dim: usize, modes: &[ModeConfig]) -> Result<TrigPolyField> {
    let mut field = TrigPolyField::zero(dim);
    for m in modes {
        if m.k.len() != dim {
            bail!("mode k = {:?} has wrong dimension (expected {dim})", m.k);
        }
        let forms = [m.cos.is_some(), m.sin.is_some(), m.re.is_some() || m.im.is_some()];
        if forms.iter().filter(|&&f| f).count() != 1 {
            bail!(
                "mode k = {:?} must set exactly one of `cos`, `sin`, or `re`/`im`",
                m.k
            );
        }
        let is_zero_mode = m.k.iter().all(|&c| c == 0);
        if let Some(src) = &m.cos {
            let amp = parse_expr(src, dim)?;
            if is_zero_mode {
                field = field.with_zero_mode(amp);
            } else {
                field = field.with_cos(&m.k, amp);
            }
        } else if let Some(src) = &m.sin {
            if is_zero_mode {
                bail!("k = 0 modes cannot be sin-type");
            }
            field = field.with_sin(&m.k, parse_expr(src, dim)?);
        } else {
            let re = m
                .re
                .as_deref()
                .map(|s| parse_expr(s, dim))
                .transpose()?
                .unwrap_or_else(phasemix::expr::Expr::zero);
            let im = m
                .im
                .as_deref()
                .map(|s| parse_expr(s, dim))
                .transpose()?
                .unwrap_or_else(phasemix::expr::Expr::zero);
            if is_zero_mode {
                if m.im.is_some() {
                    bail!("k = 0 modes must be real (no `im`)");
                }
                field = field.with_zero_mode(re);
            } else {
                field = field.with_mode(&m.k, CoeffFn::new(dim, re, im));
            }
        }
    }
    Ok(field)
}
