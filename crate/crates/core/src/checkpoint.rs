//! Plain-text checkpoints.
//!
//! ```text
//! causal-reweight checkpoint v1
//! seed 7
//! config objective.lambda1 = 0.5
//! ...
//! tensor extractor.0.weight 6 64
//! <row-major values, 17 significant digits>
//! ...
//! omega 2000
//! <values>
//! end
//! ```

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Linear, ModelParams};
use crate::optimizer::ModelState;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "causal-reweight checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState,
}

fn write_values(out: &mut String, values: &[f64]) {
    let line: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

pub fn to_text(config: &RunConfig, state: &ModelState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "seed {}", state.seed);
    for line in config.echo() {
        let _ = writeln!(out, "config {line}");
    }
    for (name, t) in state.params.tensors() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
        write_values(&mut out, t.data());
    }
    let _ = writeln!(out, "omega {}", state.omega.len());
    write_values(&mut out, &state.omega);
    out.push_str("end\n");
    out
}

pub fn save(path: &Path, config: &RunConfig, state: &ModelState) -> Result<()> {
    std::fs::write(path, to_text(config, state))?;
    Ok(())
}

fn err(field: &str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_values(field: &str, line: Option<&str>, expected: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| err(field, "missing value line"))?;
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(field, format!("`{t}` is not a finite number")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(err(field, format!("expected {expected} values, found {}", values.len())));
    }
    Ok(values)
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(err("header", format!("first line must be `{MAGIC}`")));
    }
    let seed = lines
        .next()
        .and_then(|l| l.strip_prefix("seed "))
        .ok_or_else(|| err("seed", "missing `seed` line"))?;
    let seed: u64 = seed.trim().parse().map_err(|_| err("seed", format!("`{seed}` is not an integer")))?;

    let mut config = RunConfig::default();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut omega = None;
    let mut ended = false;
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| err("config", format!("malformed entry `{rest}`")))?;
            config
                .set(k, v)
                .map_err(|e| err(&format!("config {}", k.trim()), e.to_string()))?;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| err("tensor", "missing tensor name"))?.to_string();
            let shape: Vec<usize> = parts
                .map(|t| match t.parse::<usize>() {
                    Ok(d) if d > 0 => Ok(d),
                    _ => Err(err(&name, format!("bad dimension `{t}`"))),
                })
                .collect::<Result<_>>()?;
            if shape.is_empty() {
                return Err(err(&name, "missing shape"));
            }
            let data = parse_values(&name, lines.next(), shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| err(&name, e.to_string()))?;
            tensors.push((name, t));
        } else if let Some(rest) = line.strip_prefix("omega ") {
            let n: usize = rest.trim().parse().map_err(|_| err("omega", format!("bad length `{rest}`")))?;
            omega = Some(parse_values("omega", lines.next(), n)?);
        } else if line == "end" {
            ended = true;
            break;
        } else if !line.trim().is_empty() {
            return Err(err("body", format!("unexpected line `{line}`")));
        }
    }
    if !ended {
        return Err(err("end", "checkpoint is truncated"));
    }
    config.validate().map_err(|e| err("config", e.to_string()))?;
    let omega = omega.ok_or_else(|| err("omega", "missing"))?;
    let params = assemble(tensors)?;
    Ok(Checkpoint {
        config,
        state: ModelState { params, omega, seed },
    })
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    if tensors.len() < 4 || !tensors.len().is_multiple_of(2) {
        return Err(err("tensor", format!("expected weight/bias pairs, found {} tensors", tensors.len())));
    }
    let layers = tensors.len() / 2 - 1;
    let mut it = tensors.into_iter();
    let mut take = |expected: String| -> Result<Tensor> {
        let (name, t) = it.next().expect("counted above");
        if name != expected {
            return Err(err(&name, format!("expected tensor `{expected}`")));
        }
        Ok(t)
    };
    let mut linear = |prefix: String, fan_in: Option<usize>| -> Result<Linear> {
        let wname = format!("{prefix}.weight");
        let weight = take(wname.clone())?;
        let bias = take(format!("{prefix}.bias"))?;
        if weight.shape().len() != 2 {
            return Err(err(&wname, "weight must be a matrix"));
        }
        if let Some(f) = fan_in {
            if weight.rows() != f {
                return Err(err(&wname, format!("expected {f} rows, found {}", weight.rows())));
            }
        }
        if bias.shape() != [weight.cols()] {
            return Err(err(&format!("{prefix}.bias"), format!("expected shape [{}]", weight.cols())));
        }
        Ok(Linear { weight, bias })
    };
    let mut extractor: Vec<Linear> = Vec::with_capacity(layers);
    for i in 0..layers {
        let fan_in = extractor.last().map(|l| l.fan_out());
        extractor.push(linear(format!("extractor.{i}"), fan_in)?);
    }
    let classifier = linear("classifier".into(), extractor.last().map(|l| l.fan_out()))?;
    if classifier.fan_out() < 2 {
        return Err(err("classifier.weight", "needs at least two classes"));
    }
    Ok(ModelParams { extractor, classifier })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::init_state;

    fn sample() -> (RunConfig, ModelState) {
        let mut config = RunConfig::default();
        config.set("model.hidden_widths", "4").unwrap();
        config.set("model.repr_width", "3").unwrap();
        let cfg = config.train_config().unwrap();
        let (mut state, _) = init_state(&cfg, 2, 5).unwrap();
        state.omega = vec![1.0, 0.5, -0.25, 1.0 / 3.0, 2.0];
        (config, state)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, state) = sample();
        let back = from_text(&to_text(&config, &state)).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, config);
    }

    fn corrupt(find: &str, replace: &str) -> Error {
        let (config, state) = sample();
        let text = to_text(&config, &state);
        assert!(text.contains(find), "{find}");
        from_text(&text.replacen(find, replace, 1)).unwrap_err()
    }

    fn field(e: Error) -> String {
        match e {
            Error::Checkpoint { field, .. } => field,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn corruption_names_the_field() {
        assert_eq!(field(corrupt("tensor extractor.1.bias 3", "tensor extractor.1.bias 4")), "extractor.1.bias");
        assert_eq!(field(corrupt("seed 0", "seed x")), "seed");
        assert_eq!(field(corrupt("omega 5", "omega 6")), "omega");
        assert_eq!(field(corrupt("end\n", "")), "end");
        assert_eq!(field(corrupt("config objective.lambda1 = 0.5", "config objective.lambda1 = zz")), "config");
        assert_eq!(field(corrupt("config train.epochs", "config train.epoch")), "config train.epoch");
        assert_eq!(field(corrupt("causal-reweight", "other")), "header");
    }

    #[test]
    fn non_numeric_value_names_tensor() {
        let (config, state) = sample();
        let text = to_text(&config, &state);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let pos = lines.iter().position(|l| l.starts_with("tensor classifier.weight")).unwrap();
        lines[pos + 1] = lines[pos + 1].replacen('e', "q", 1);
        assert_eq!(field(from_text(&lines.join("\n")).unwrap_err()), "classifier.weight");
    }
}
