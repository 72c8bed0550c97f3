//! Pipeline orchestration and artifact persistence.
//!
//! Every run writes into its own directory: result payloads (JSON/CSV) plus
//! a `manifest.json` listing every file, the config copy, the input
//! fingerprint, and versions. Payload bytes are deterministic for a fixed
//! config and seed; only the manifest timestamp varies between runs.

use crate::config::Config;
use anyhow::{Context, Result};
use phasemix::bound::{compute_terms, run_verification, VerificationOutput};
use phasemix::grid::{build_grid, QuadratureRule};
use phasemix::resonance::{resonant_mass_sweep, PartitionMap, Partitioner};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Exit code signalling at least one violated verdict row.
pub const EXIT_VIOLATED: i32 = 2;

pub struct RunContext {
    pub dir: PathBuf,
    files: Vec<String>,
}

impl RunContext {
    pub fn create(base: &Path) -> Result<Self> {
        fs::create_dir_all(base)
            .with_context(|| format!("creating run directory {}", base.display()))?;
        Ok(Self {
            dir: base.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)
            .with_context(|| format!("writing {name}"))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Finish the run: write the manifest referencing every artifact.
    pub fn finish(self, config_text: &str, fingerprint: &str) -> Result<()> {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let mut files = self.files.clone();
        files.push("manifest.json".to_string());
        files.sort();
        let manifest = json!({
            "fingerprint": fingerprint,
            "timestamp_ms": timestamp_ms,
            "versions": {
                "phasemix": phasemix_version(),
                "phasemix-cli": env!("CARGO_PKG_VERSION"),
            },
            "files": files,
            "config": config_text,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn phasemix_version() -> &'static str {
    // The library crate version travels with this binary.
    env!("CARGO_PKG_VERSION")
}

/// Resolve the run directory: `--out` verbatim, otherwise a timestamped
/// subdirectory of the configured base.
pub fn resolve_out_dir(cfg: &Config, out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let base = cfg.output.dir.clone().unwrap_or_else(|| "runs".into());
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            Path::new(&base).join(format!("{command}-{stamp}"))
        }
    }
}

fn write_verification_artifacts(
    ctx: &mut RunContext,
    out: &VerificationOutput,
) -> Result<()> {
    ctx.write_json("bound_report.json", &serde_json::to_value(&out.report)?)?;
    let mut csv = Vec::new();
    out.report.write_verdict_csv(&mut csv)?;
    ctx.write("verdict_table.csv", &csv)?;
    let mut csv = Vec::new();
    out.report.write_plot_csv(&mut csv)?;
    ctx.write("plot_data.csv", &csv)?;
    ctx.write_json("mixing_report.json", &serde_json::to_value(&out.mixing)?)?;
    let mut csv = Vec::new();
    out.partition.write_csv(&mut csv)?;
    ctx.write("partition_map.csv", &csv)?;
    let mut csv = Vec::new();
    out.series.write_csv(&mut csv)?;
    ctx.write("deviation_series.csv", &csv)?;
    if let Some(nf) = &out.nf_summary {
        ctx.write_json("normalform_summary.json", nf)?;
    }
    Ok(())
}

/// Full pipeline run; returns the process exit code (0 or EXIT_VIOLATED).
pub fn cmd_verify(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let eps = cfg.epsilon_list()[0];
    let built = cfg.build(eps)?;
    let (config_text, fingerprint) = cfg.fingerprint()?;
    let mut ctx = RunContext::create(out_dir)?;
    let output = run_verification(
        &built.system,
        &built.density,
        &built.observable,
        &built.pipeline,
        fingerprint.clone(),
    )?;
    write_verification_artifacts(&mut ctx, &output)?;
    let violated = output.report.any_violated();
    ctx.finish(&config_text, &fingerprint)?;
    summarize(&output);
    Ok(if violated { EXIT_VIOLATED } else { 0 })
}

fn summarize(out: &VerificationOutput) {
    let r = &out.report;
    eprintln!(
        "eps = {:.3e}, K = {}, alpha = {:.4}: P_res = {:.4e} (soft {:.4e}), C_G = {:.4e}, \
         tail = {:.3e}, E_eq = {:.3e}, |r|_inf = {:.3e}",
        r.epsilon, r.order, r.alpha, r.p_res, r.p_soft, r.cg, r.tail, r.e_eq, r.r_sup
    );
    for row in &r.rows {
        eprintln!(
            "  t = {:>8}: empirical {:.4e} (stderr {:.2e}) vs total {:.4e} -> {:?}{}",
            row.t,
            row.empirical,
            row.stderr,
            row.total,
            row.verdict,
            if row.in_window { "" } else { " [outside window]" }
        );
    }
}

/// Mixing-only run: partition, normal form when needed, mixing report.
pub fn cmd_mixing(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let eps = cfg.epsilon_list()[0];
    let built = cfg.build(eps)?;
    let (config_text, fingerprint) = cfg.fingerprint()?;
    let mut ctx = RunContext::create(out_dir)?;
    let terms = compute_terms(&built.system, &built.density, &built.observable, &built.pipeline)?;
    ctx.write_json("mixing_report.json", &serde_json::to_value(&terms.mixing)?)?;
    if let Some(nf) = &terms.nf_summary {
        ctx.write_json("normalform_summary.json", nf)?;
    }
    eprintln!(
        "C_G = {:.6e} (lemma bound {:.6e}), tail = {:.3e}, modes = {}",
        terms.mixing.cg_direct,
        terms.mixing.cg_lemma,
        terms.mixing.tail,
        terms.mixing.records.len()
    );
    ctx.finish(&config_text, &fingerprint)?;
    Ok(0)
}

/// Resonance-only run: partition map CSV and the resonant mass.
pub fn cmd_resonance(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let eps = cfg.epsilon_list()[0];
    let built = cfg.build(eps)?;
    let (config_text, fingerprint) = cfg.fingerprint()?;
    let mut ctx = RunContext::create(out_dir)?;
    let n = built.system.dim();
    let spec = match built.pipeline.schedule {
        phasemix::bound::ScheduleChoice::Zz { beta, s0 } => {
            phasemix::resonance::zz_schedule(eps, beta, s0)?.0
        }
        phasemix::bound::ScheduleChoice::Power {
            a,
            prefactor,
            alpha,
        } => phasemix::resonance::power_schedule(eps, a, prefactor, alpha)?,
        phasemix::bound::ScheduleChoice::Explicit { order, alpha } => {
            phasemix::resonance::PartitionSpec::new(order, alpha)?
        }
    };
    let partitioner = Partitioner::new(n, spec)?;
    let grid = build_grid(
        built.density.domain(),
        &vec![built.pipeline.pres_res; n],
        QuadratureRule::Midpoint,
    )?;
    let masses = resonant_mass_sweep(
        &built.density,
        &built.system.integrable,
        spec.order,
        &[spec.alpha],
        &grid,
        built.pipeline.pres_refine,
    )?[0];
    let map_grid = build_grid(
        built.density.domain(),
        &vec![if n <= 2 { 60 } else { 16 }; n],
        QuadratureRule::Midpoint,
    )?;
    let map = PartitionMap::build(&map_grid, &built.system.integrable, &partitioner);
    let mut csv = Vec::new();
    map.write_csv(&mut csv)?;
    ctx.write("partition_map.csv", &csv)?;
    ctx.write_json(
        "resonant_mass.json",
        &json!({
            "order": spec.order,
            "alpha": spec.alpha,
            "p_res": masses.resonant,
            "nonresonant_mass": masses.nonresonant,
            "resonant_node_fraction": map.resonant_fraction(),
        }),
    )?;
    println!("P_res = {:.6e} (K = {}, alpha = {:.4e})", masses.resonant, spec.order, spec.alpha);
    ctx.finish(&config_text, &fingerprint)?;
    Ok(0)
}

/// Normal-form-only run: package summary JSON.
pub fn cmd_normalform(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let eps = cfg.epsilon_list()[0];
    let built = cfg.build(eps)?;
    let (config_text, fingerprint) = cfg.fingerprint()?;
    let mut ctx = RunContext::create(out_dir)?;
    let terms = compute_terms(&built.system, &built.density, &built.observable, &built.pipeline)?;
    match &terms.nf_summary {
        Some(nf) => {
            ctx.write_json("normalform_summary.json", nf)?;
            eprintln!("|r|_inf = {:.6e}, margin = {}", terms.r_sup, nf["margin"]);
        }
        None => {
            ctx.write_json(
                "normalform_summary.json",
                &json!({
                    "note": "nonresonant region carries no ensemble mass; transform skipped",
                }),
            )?;
            eprintln!("nonresonant region empty: normal form skipped");
        }
    }
    ctx.finish(&config_text, &fingerprint)?;
    Ok(0)
}

/// Sweep over the epsilon list: one run directory per value plus a summary.
pub fn cmd_sweep(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let list = cfg.epsilon_list();
    let (config_text, fingerprint) = cfg.fingerprint()?;
    let mut ctx = RunContext::create(out_dir)?;
    let mut summary =
        String::from("epsilon,order,alpha,p_res,p_soft,cg,tail,e_eq,r_sup,worst_verdict\n");
    let mut exit = 0;
    for (i, &eps) in list.iter().enumerate() {
        let built = cfg.build(eps)?;
        let sub = out_dir.join(format!("eps-{i:02}"));
        let mut sub_ctx = RunContext::create(&sub)?;
        let output = run_verification(
            &built.system,
            &built.density,
            &built.observable,
            &built.pipeline,
            fingerprint.clone(),
        )?;
        write_verification_artifacts(&mut sub_ctx, &output)?;
        sub_ctx.finish(&config_text, &fingerprint)?;
        let r = &output.report;
        let worst = if r.any_violated() {
            exit = EXIT_VIOLATED;
            "violated"
        } else if r
            .rows
            .iter()
            .any(|row| row.verdict == phasemix::bound::Verdict::HoldsWithin3Sigma)
        {
            "holds-within-3sigma"
        } else {
            "holds"
        };
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            eps, r.order, r.alpha, r.p_res, r.p_soft, r.cg, r.tail, r.e_eq, r.r_sup, worst
        ));
    }
    ctx.write("sweep_summary.csv", summary.as_bytes())?;
    ctx.finish(&config_text, &fingerprint)?;
    Ok(exit)
}
