//! Implementations of the command-line subcommands. Each writes its
//! artifacts and returns a short human-readable summary.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, Grid, SweepData};
use crate::gradcheck::{self, GradcheckOptions, GradcheckReport};
use crate::synthgen::{self, Domain};
use std::path::Path;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, source_out: &Path, target_out: &Path) -> Result<String> {
    let (source, target) = experiment::generate_pair(cfg)?;
    for (ds, path) in [(&source, source_out), (&target, target_out)] {
        ensure_parent(path)?;
        synthgen::write_csv(ds, path)?;
    }
    Ok(format!(
        "wrote {} source rows to {} and {} target rows to {}",
        source.len(),
        source_out.display(),
        target.len(),
        target_out.display()
    ))
}

pub struct TrainOutputs<'a> {
    pub checkpoint: &'a Path,
    pub history: &'a Path,
    pub metrics: &'a Path,
}

pub fn train(cfg: &RunConfig, source_csv: &Path, out: &TrainOutputs<'_>) -> Result<String> {
    let source = synthgen::read_csv_unmasked(source_csv)?;
    if source.domain != Domain::Source {
        return Err(Error::Data(format!("{} is not a source-domain dataset", source_csv.display())));
    }
    let outcome = experiment::run(cfg, &source, None)?;
    for path in [out.checkpoint, out.history, out.metrics] {
        ensure_parent(path)?;
    }
    checkpoint::save(out.checkpoint, cfg, &outcome.state)?;
    std::fs::write(out.history, outcome.history.to_csv(&cfg.echo()))?;
    write_json(out.metrics, &outcome.report)?;
    Ok(format!(
        "trained {} iterations; source accuracy {:.4}",
        outcome.history.records.len(),
        outcome.report.source_accuracy.unwrap_or(f64::NAN)
    ))
}

pub fn eval(checkpoint_path: &Path, data_csv: &Path, metrics_out: &Path) -> Result<String> {
    let ck = checkpoint::load(checkpoint_path)?;
    let ds = synthgen::read_csv_unmasked(data_csv)?;
    let (source, target) = match ds.domain {
        Domain::Source => (Some(&ds), None),
        Domain::Target => (None, Some(&ds)),
    };
    let report = experiment::evaluate(&ck.config, &ck.state, None, source, target)?;
    ensure_parent(metrics_out)?;
    write_json(metrics_out, &report)?;
    let acc = report.source_accuracy.or(report.target_accuracy).unwrap_or(f64::NAN);
    Ok(format!("{} accuracy {acc:.4}", ds.domain))
}

pub fn sweep(
    cfg: &RunConfig,
    grid_path: &Path,
    data: Option<(&Path, Option<&Path>)>,
    out_dir: &Path,
) -> Result<String> {
    let grid = Grid::parse(&std::fs::read_to_string(grid_path)?)?;
    let loaded = match data {
        Some((s, t)) => Some((
            synthgen::read_csv_unmasked(s)?,
            t.map(synthgen::read_csv_unmasked).transpose()?,
        )),
        None => None,
    };
    let source = match &loaded {
        Some((s, t)) => SweepData::Fixed {
            source: s,
            target: t.as_ref(),
        },
        None => SweepData::Generated,
    };
    let result = experiment::sweep(cfg, &grid, source)?;
    experiment::write_sweep(out_dir, cfg, &grid, &result)?;
    let failed: usize = result.rows.iter().map(|r| r.failed_runs).sum();
    Ok(format!(
        "{} grid points, {} runs, {failed} failed; summary in {}",
        result.rows.len(),
        result.runs.len(),
        out_dir.join("summary.csv").display()
    ))
}

pub fn gradcheck_options(cfg: &RunConfig) -> Result<GradcheckOptions> {
    let fault = cfg.get("gradcheck.inject_fault")?;
    Ok(GradcheckOptions {
        instances: cfg.usize_key("gradcheck.instances", 1)?,
        seed: cfg.u64_key("gradcheck.seed")?,
        tolerance: cfg.f64_key("gradcheck.tolerance")?,
        inject_fault: (fault != "none").then(|| fault.to_string()),
        ..GradcheckOptions::default()
    })
}

pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    gradcheck::run(&gradcheck_options(cfg)?)
}
