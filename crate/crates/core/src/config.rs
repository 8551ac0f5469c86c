//! Flat `key = value` run configuration.
//!
//! Settings are layered: built-in defaults, then an optional file, then
//! `--set key=value` overrides. Every key must be known; values are kept as
//! strings and parsed when a typed configuration is requested.
//!
//! Lists are comma separated (`64,32`); matrices separate rows with `;`
//! (`2,0;0,2;1,1`).

use crate::balance::DEFAULT_EPS;
use crate::binarize::{BinarizeKind, BinarizeMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::optimizer::{AlternatePer, TrainConfig};
use crate::synthgen::{Matrix, ScmConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn matrix(m: &Matrix) -> String {
    m.data.chunks(m.cols.max(1)).map(list).collect::<Vec<_>>().join(";")
}

fn defaults() -> BTreeMap<String, String> {
    let train = TrainConfig::default();
    let obj = train.objective;
    let scm = ScmConfig::default();
    let entries: Vec<(&str, String)> = vec![
        ("balance.eps", DEFAULT_EPS.to_string()),
        ("balance.representation_grad", obj.representation_grad.to_string()),
        ("binarize.mode", obj.binarize.kind.to_string()),
        ("binarize.ste_clip", obj.binarize.ste_clip.to_string()),
        ("model.hidden_widths", list(&train.model.hidden_widths)),
        ("model.repr_width", train.model.repr_width.to_string()),
        ("model.num_classes", train.model.num_classes.to_string()),
        ("objective.lambda1", obj.lambda1.to_string()),
        ("objective.lambda2", obj.lambda2.to_string()),
        ("objective.lambda3", obj.lambda3.to_string()),
        ("train.epochs", train.epochs.to_string()),
        ("train.batch_size", train.batch_size.to_string()),
        ("train.lr_theta", train.lr_theta.to_string()),
        ("train.lr_omega", train.lr_omega.to_string()),
        ("train.seed", train.seed.to_string()),
        ("train.convergence_tol", train.convergence_tol.to_string()),
        ("train.max_iterations", "auto".into()),
        ("train.alternate_per", train.alternate_per.to_string()),
        ("train.freeze_weights", train.freeze_weights.to_string()),
        ("train.grad_clip", train.grad_clip.to_string()),
        ("scm.n_confounders", scm.n_confounders.to_string()),
        ("scm.n_causal", scm.n_causal.to_string()),
        ("scm.n_spurious", scm.n_spurious.to_string()),
        ("scm.confounder_to_causal", matrix(&scm.confounder_to_causal)),
        ("scm.confounder_to_spurious_source", matrix(&scm.confounder_to_spurious_source)),
        ("scm.confounder_to_spurious_target", matrix(&scm.confounder_to_spurious_target)),
        ("scm.confounder_to_outcome", list(&scm.confounder_to_outcome)),
        ("scm.causal_to_outcome", list(&scm.causal_to_outcome)),
        ("scm.noise_std", scm.noise_std.to_string()),
        ("scm.seed", scm.seed.to_string()),
        ("scm.n_source", "2000".into()),
        ("scm.n_target", "2000".into()),
        ("sweep.replicates", "1".into()),
        ("gradcheck.instances", "20".into()),
        ("gradcheck.seed", "0".into()),
        ("gradcheck.tolerance", "1e-4".into()),
        ("gradcheck.inject_fault", "none".into()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults() }
    }
}

impl RunConfig {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Applies every line of a config file body.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        self.merge_text(&std::fs::read_to_string(path)?)
    }

    /// Defaults, then `file`, then `overrides`; the result is validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.merge_file(path)?;
        }
        for o in overrides {
            cfg.set_pair(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses every typed view so that bad values surface early.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.scm_config()?.validate()?;
        self.sample_counts()?;
        self.usize_key("sweep.replicates", 1)?;
        self.usize_key("gradcheck.instances", 1)?;
        self.u64_key("gradcheck.seed")?;
        self.f64_key("gradcheck.tolerance")?;
        Ok(())
    }

    /// `key = value` lines in key order.
    pub fn echo(&self) -> Vec<String> {
        self.values.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.echo() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn invalid(key: &str, value: &str, what: &str) -> Error {
        Error::Config(format!("{key} = `{value}` is not {what}"))
    }

    pub fn f64_key(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        v.parse::<f64>().map_err(|_| Self::invalid(key, v, "a number"))
    }

    pub fn u64_key(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        v.parse::<u64>().map_err(|_| Self::invalid(key, v, "a non-negative integer"))
    }

    pub fn usize_key(&self, key: &str, min: usize) -> Result<usize> {
        let v = self.get(key)?;
        match v.parse::<usize>() {
            Ok(n) if n >= min => Ok(n),
            _ => Err(Self::invalid(key, v, &format!("an integer >= {min}"))),
        }
    }

    pub fn bool_key(&self, key: &str) -> Result<bool> {
        let v = self.get(key)?;
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Self::invalid(key, v, "`true` or `false`")),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Self::invalid(key, v, "a list of numbers")))
            .collect()
    }

    fn matrix_key(&self, key: &str) -> Result<Matrix> {
        let v = self.get(key)?;
        let rows: Vec<Vec<f64>> = v
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|t| t.trim().parse::<f64>().map_err(|_| Self::invalid(key, v, "a matrix")))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Self::invalid(key, v, "a matrix with equal row lengths"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let widths = self.get("model.hidden_widths")?;
        let hidden_widths = if widths.is_empty() {
            Vec::new()
        } else {
            widths
                .split(',')
                .map(|t| match t.trim().parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(Self::invalid("model.hidden_widths", widths, "a list of positive integers")),
                })
                .collect::<Result<_>>()?
        };
        Ok(ModelConfig {
            hidden_widths,
            repr_width: self.usize_key("model.repr_width", 1)?,
            num_classes: self.usize_key("model.num_classes", 2)?,
        })
    }

    pub fn objective_config(&self) -> Result<ObjectiveConfig> {
        let kind: BinarizeKind = self.get("binarize.mode")?.parse()?;
        let cfg = ObjectiveConfig {
            lambda1: self.f64_key("objective.lambda1")?,
            lambda2: self.f64_key("objective.lambda2")?,
            lambda3: self.f64_key("objective.lambda3")?,
            eps: self.f64_key("balance.eps")?,
            binarize: BinarizeMode::new(kind, self.f64_key("binarize.ste_clip")?)?,
            representation_grad: self.bool_key("balance.representation_grad")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let max_iterations = match self.get("train.max_iterations")? {
            "auto" => None,
            _ => Some(self.usize_key("train.max_iterations", 1)?),
        };
        let alternate_per: AlternatePer = self.get("train.alternate_per")?.parse()?;
        Ok(TrainConfig {
            epochs: self.usize_key("train.epochs", 1)?,
            batch_size: self.usize_key("train.batch_size", 1)?,
            lr_theta: self.f64_key("train.lr_theta")?,
            lr_omega: self.f64_key("train.lr_omega")?,
            seed: self.u64_key("train.seed")?,
            objective: self.objective_config()?,
            model: self.model_config()?,
            convergence_tol: self.f64_key("train.convergence_tol")?,
            max_iterations,
            alternate_per,
            freeze_weights: self.bool_key("train.freeze_weights")?,
            grad_clip: self.f64_key("train.grad_clip")?,
        })
    }

    pub fn scm_config(&self) -> Result<ScmConfig> {
        let cfg = ScmConfig {
            n_confounders: self.usize_key("scm.n_confounders", 1)?,
            n_causal: self.usize_key("scm.n_causal", 1)?,
            n_spurious: self.usize_key("scm.n_spurious", 1)?,
            confounder_to_causal: self.matrix_key("scm.confounder_to_causal")?,
            confounder_to_spurious_source: self.matrix_key("scm.confounder_to_spurious_source")?,
            confounder_to_spurious_target: self.matrix_key("scm.confounder_to_spurious_target")?,
            confounder_to_outcome: self.f64_list("scm.confounder_to_outcome")?,
            causal_to_outcome: self.f64_list("scm.causal_to_outcome")?,
            noise_std: self.f64_key("scm.noise_std")?,
            seed: self.u64_key("scm.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(scm.n_source, scm.n_target)`, both at least 1.
    pub fn sample_counts(&self) -> Result<(usize, usize)> {
        Ok((self.usize_key("scm.n_source", 1)?, self.usize_key("scm.n_target", 1)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_to_typed_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.scm_config().unwrap(), ScmConfig::default());
    }

    #[test]
    fn three_layer_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# demo\nobjective.lambda1 = 0.5\nobjective.lambda2 = 0.01  # trailing\ntrain.epochs = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["objective.lambda1=0.9".into()]).unwrap();
        assert_eq!(cfg.get("objective.lambda1").unwrap(), "0.9");
        assert_eq!(cfg.get("objective.lambda2").unwrap(), "0.01");
        assert_eq!(cfg.get("objective.lambda3").unwrap(), "0.1");
        assert_eq!(cfg.train_config().unwrap().epochs, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("objective.lambda4", "1"), Err(Error::Config(_))));
        let err = cfg.merge_text("\n\ntrain.epoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(matches!(cfg.set_pair("novalue"), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_are_rejected() {
        for (k, v) in [
            ("train.epochs", "0"),
            ("train.lr_theta", "fast"),
            ("binarize.mode", "sideways"),
            ("binarize.ste_clip", "0"),
            ("scm.confounder_to_causal", "1,2;3"),
            ("scm.causal_to_outcome", "1,1"),
            ("scm.n_source", "0"),
            ("train.freeze_weights", "yes"),
            ("objective.lambda1", "-1"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k} = {v}");
        }
    }

    #[test]
    fn matrix_and_list_parsing() {
        let mut cfg = RunConfig::default();
        cfg.set("scm.confounder_to_spurious_target", "0,0;0,0;0,0").unwrap();
        cfg.set("model.hidden_widths", "5").unwrap();
        cfg.set("train.max_iterations", "7").unwrap();
        assert_eq!(cfg.scm_config().unwrap().confounder_to_spurious_target, Matrix::zeros(3, 2));
        let t = cfg.train_config().unwrap();
        assert_eq!(t.model.hidden_widths, vec![5]);
        assert_eq!(t.max_iterations, Some(7));
    }

    #[test]
    fn echo_lists_every_key() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        assert_eq!(echo.len(), cfg.keys().count());
        assert!(echo.contains(&"objective.lambda1 = 0.5".to_string()));
        let mut again = RunConfig::default();
        again.merge_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }
}
