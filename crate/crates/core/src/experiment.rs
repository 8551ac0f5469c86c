//! Single runs and grid sweeps: data preparation, training, evaluation and
//! reporting.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, LossComponents, MetricsReport};
use crate::optimizer::{self, ModelState, TrainHistory};
use crate::synthgen::{self, Dataset, Domain};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Source and target samples drawn from the configured model.
pub fn generate_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let scm = cfg.scm_config()?;
    let (n_source, n_target) = cfg.sample_counts()?;
    Ok((
        synthgen::generate(&scm, Domain::Source, n_source, scm.seed)?,
        synthgen::generate(&scm, Domain::Target, n_target, scm.seed)?,
    ))
}

/// Report for `state` on `source` and optionally `target`. Importance and
/// mask scores come from the target when it is given, else from the source.
pub fn evaluate(
    cfg: &RunConfig,
    state: &ModelState,
    history: Option<&TrainHistory>,
    source: Option<&Dataset>,
    target: Option<&Dataset>,
) -> Result<MetricsReport> {
    let acc = |ds: &Dataset| -> Result<f64> { metrics::accuracy(&optimizer::predict(state, &ds.x)?, &ds.y) };
    let source_accuracy = source.map(acc).transpose()?;
    let target_accuracy = target.map(acc).transpose()?;
    let scored = target
        .or(source)
        .ok_or_else(|| Error::Contract("evaluation needs at least one dataset".into()))?;
    let (importance, spearman_vs_mask, causal_precision) = metrics::mask_scores(&state.params, scored)?;
    Ok(MetricsReport {
        source_accuracy,
        target_accuracy,
        final_loss_components: history.and_then(TrainHistory::last).map(LossComponents::from),
        importance,
        spearman_vs_mask,
        causal_precision,
        seed: state.seed,
        loss_history: history.map(|h| h.epoch_means.clone()).unwrap_or_default(),
        mean_weight: Some(state.mean_weight()),
        config: cfg.as_map().clone(),
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: ModelState,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Trains on `source` and evaluates on both domains.
pub fn run(cfg: &RunConfig, source: &Dataset, target: Option<&Dataset>) -> Result<RunOutcome> {
    let train_cfg = cfg.train_config()?;
    let (state, history) = optimizer::train(&train_cfg, source)?;
    let report = evaluate(cfg, &state, Some(&history), Some(source), target)?;
    Ok(RunOutcome { state, history, report })
}

/// Copy of `cfg` with both seeds advanced by `offset`.
pub fn offset_seeds(cfg: &RunConfig, offset: u64) -> Result<RunConfig> {
    let mut out = cfg.clone();
    let train_seed = cfg.u64_key("train.seed")?.wrapping_add(offset);
    let scm_seed = cfg.u64_key("scm.seed")?.wrapping_add(offset);
    out.set("train.seed", &train_seed.to_string())?;
    out.set("scm.seed", &scm_seed.to_string())?;
    Ok(out)
}

/// Generates fresh data from `cfg` and runs on it.
pub fn run_generated(cfg: &RunConfig) -> Result<RunOutcome> {
    let (source, target) = generate_pair(cfg)?;
    run(cfg, &source, Some(&target))
}

/// Parameter grid: one `key = v1, v2, ...` line per swept key. Points are
/// the Cartesian product, first key varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected `key = v1, v2, ...`", i + 1)))?;
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid line {}: `{}` has no values", i + 1, k.trim())));
            }
            if axes.iter().any(|(name, _)| name == k.trim()) {
                return Err(Error::Config(format!("grid line {}: `{}` repeated", i + 1, k.trim())));
            }
            axes.push((k.trim().to_string(), values));
        }
        if axes.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        Ok(Self { axes })
    }

    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: usize,
    pub run_index: usize,
    pub result: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub params: Vec<(String, String)>,
    pub ok_runs: usize,
    pub failed_runs: usize,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub causal_precision: Option<f64>,
    pub spearman: Option<f64>,
    pub mean_weight: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Where a sweep's data comes from.
#[derive(Debug, Clone, Copy)]
pub enum SweepData<'a> {
    /// Fixed datasets shared by every run.
    Fixed { source: &'a Dataset, target: Option<&'a Dataset> },
    /// Fresh data per run from the run's own seed.
    Generated,
}

/// Runs every grid point `sweep.replicates` times in parallel. Run `r` of
/// point `p` has run index `p * replicates + r` and uses seeds advanced by
/// that index. Failed runs are recorded, not propagated.
pub fn sweep(base: &RunConfig, grid: &Grid, data: SweepData<'_>) -> Result<SweepResult> {
    let replicates = base.usize_key("sweep.replicates", 1)?;
    let points = grid.points();
    // Reject unknown keys and bad values up front.
    for point in &points {
        let mut cfg = base.clone();
        for (k, v) in point {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..replicates).map(move |r| (p, p * replicates + r)))
        .collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(p, run_index)| {
            let result = (|| -> Result<MetricsReport> {
                let mut cfg = base.clone();
                for (k, v) in &points[p] {
                    cfg.set(k, v)?;
                }
                let cfg = offset_seeds(&cfg, run_index as u64)?;
                let outcome = match data {
                    SweepData::Fixed { source, target } => run(&cfg, source, target)?,
                    SweepData::Generated => run_generated(&cfg)?,
                };
                Ok(outcome.report)
            })();
            SweepRun {
                point: p,
                run_index,
                result: result.map_err(|e| e.to_string()),
            }
        })
        .collect();

    let rows = points
        .iter()
        .enumerate()
        .map(|(p, params)| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.point == p).collect();
            let ok: Vec<&MetricsReport> = mine.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let pick = |f: fn(&MetricsReport) -> Option<f64>| median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                params: params.clone(),
                ok_runs: ok.len(),
                failed_runs: mine.len() - ok.len(),
                source_acc: pick(|r| r.source_accuracy),
                target_acc: pick(|r| r.target_accuracy),
                causal_precision: pick(|r| r.causal_precision),
                spearman: pick(|r| r.spearman_vs_mask),
                mean_weight: pick(|r| r.mean_weight),
                error: mine.iter().find_map(|r| r.result.as_ref().err().cloned()),
            }
        })
        .collect();
    Ok(SweepResult { runs, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Summary CSV: resolved base config as `#` comments, then one row per
/// point with medians over its replicates.
pub fn summary_csv(base: &RunConfig, grid: &Grid, result: &SweepResult) -> String {
    let mut out = String::new();
    for line in base.echo() {
        let _ = writeln!(out, "# {line}");
    }
    let keys: Vec<&str> = grid.axes.iter().map(|(k, _)| k.as_str()).collect();
    let _ = writeln!(
        out,
        "point,{},status,runs_ok,runs_failed,source_acc,target_acc,causal_precision,spearman_vs_mask,mean_weight",
        keys.join(",")
    );
    for (p, row) in result.rows.iter().enumerate() {
        let values: Vec<&str> = row.params.iter().map(|(_, v)| v.as_str()).collect();
        let status = if row.failed_runs == 0 { "ok" } else { "error" };
        let _ = writeln!(
            out,
            "{p},{},{status},{},{},{},{},{},{},{}",
            values.join(","),
            row.ok_runs,
            row.failed_runs,
            opt(row.source_acc),
            opt(row.target_acc),
            opt(row.causal_precision),
            opt(row.spearman),
            opt(row.mean_weight),
        );
    }
    out
}

/// Writes the summary and one metrics JSON (or error text) per run.
pub fn write_sweep(out_dir: &Path, base: &RunConfig, grid: &Grid, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(base, grid, result))?;
    for run in &result.runs {
        match &run.result {
            Ok(report) => std::fs::write(
                out_dir.join(format!("run_{:04}.json", run.run_index)),
                serde_json::to_string_pretty(report)? + "\n",
            )?,
            Err(message) => std::fs::write(
                out_dir.join(format!("run_{:04}.error.txt", run.run_index)),
                format!("{message}\n"),
            )?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_are_a_product() {
        let grid = Grid::parse("objective.lambda1 = 0.1, 0.2\n# note\ntrain.epochs = 1,2,3\n").unwrap();
        let points = grid.points();
        assert_eq!(points.len(), 6);
        assert_eq!(points[0], vec![("objective.lambda1".into(), "0.1".into()), ("train.epochs".into(), "1".into())]);
        assert_eq!(points[5][0].1, "0.2");
        assert_eq!(points[5][1].1, "3");
    }

    #[test]
    fn empty_grids_are_rejected() {
        assert!(matches!(Grid::parse("# nothing\n"), Err(Error::Config(_))));
        assert!(matches!(Grid::parse("objective.lambda1 = \n"), Err(Error::Config(_))));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn offsets_move_both_seeds() {
        let mut cfg = RunConfig::default();
        cfg.set("train.seed", "10").unwrap();
        cfg.set("scm.seed", "20").unwrap();
        let moved = offset_seeds(&cfg, 3).unwrap();
        assert_eq!(moved.get("train.seed").unwrap(), "13");
        assert_eq!(moved.get("scm.seed").unwrap(), "23");
    }

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("scm.n_source", "64"),
            ("scm.n_target", "64"),
            ("train.batch_size", "32"),
            ("train.epochs", "2"),
            ("model.hidden_widths", "8"),
            ("model.repr_width", "4"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn sweep_rows_and_failures() {
        let cfg = tiny();
        let grid = Grid::parse("objective.lambda1 = 0, 0.5\ntrain.lr_theta = 0.05, 1e300\n").unwrap();
        let result = sweep(&cfg, &grid, SweepData::Generated).unwrap();
        assert_eq!(result.rows.len(), 4);
        assert_eq!(result.rows[0].failed_runs, 0);
        assert!(result.rows[1].failed_runs == 1 && result.rows[1].error.is_some());
        let csv = summary_csv(&cfg, &grid, &result);
        let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 5);
        assert!(data[2].contains(",error,"));
    }

    #[test]
    fn sweep_rejects_unknown_keys() {
        let grid = Grid::parse("objective.lambda9 = 1\n").unwrap();
        assert!(matches!(sweep(&tiny(), &grid, SweepData::Generated), Err(Error::Config(_))));
    }
}
