//! Binarization of representations into treatment indicators, with a
//! clipped straight-through gradient.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeKind {
    Deterministic,
    Stochastic,
}

impl std::str::FromStr for BinarizeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "stochastic" => Ok(Self::Stochastic),
            other => Err(Error::Config(format!(
                "binarize.mode must be `deterministic` or `stochastic`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for BinarizeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Deterministic => "deterministic",
            Self::Stochastic => "stochastic",
        })
    }
}

/// How indicators are produced and how gradients pass back through them.
///
/// `ste_clip` is the half-width of the straight-through window: the upstream
/// gradient passes where `|input| <= ste_clip` and is zeroed elsewhere. Use
/// `f64::INFINITY` for a plain pass-through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizeMode {
    pub kind: BinarizeKind,
    pub ste_clip: f64,
}

impl Default for BinarizeMode {
    fn default() -> Self {
        Self {
            kind: BinarizeKind::Deterministic,
            ste_clip: 1.0,
        }
    }
}

impl BinarizeMode {
    pub fn new(kind: BinarizeKind, ste_clip: f64) -> Result<Self> {
        if !(ste_clip > 0.0) {
            return Err(Error::Config(format!("binarize.ste_clip must be positive, got {ste_clip}")));
        }
        Ok(Self { kind, ste_clip })
    }
}

/// `clip((x + 1) / 2, 0, 1)`.
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn check_finite(z: &Tensor) -> Result<()> {
    if let Some(i) = z.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("binarize input entry {i} is not finite")));
    }
    Ok(())
}

/// 1 where `z >= 0`, 0 elsewhere.
pub fn binarize_deterministic(z: &Tensor) -> Result<Tensor> {
    check_finite(z)?;
    let data = z.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Each entry independently 1 with probability `hard_sigmoid(z)`.
pub fn binarize_stochastic<R: Rng + ?Sized>(z: &Tensor, rng: &mut R) -> Result<Tensor> {
    check_finite(z)?;
    let data = z
        .data()
        .iter()
        .map(|&v| {
            let p = hard_sigmoid(v);
            // One draw per entry regardless of p keeps the stream aligned.
            let u: f64 = rng.random();
            if u < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Clipped straight-through gradient: `upstream` where `|input| <= ste_clip`
/// (inclusive), zero elsewhere.
pub fn ste_backward(upstream: &Tensor, input: &Tensor, mode: &BinarizeMode) -> Result<Tensor> {
    if upstream.shape() != input.shape() {
        return Err(Error::Dimension {
            kernel: "ste_backward",
            left: upstream.shape().to_vec(),
            right: input.shape().to_vec(),
        });
    }
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(&u, &x)| if x.abs() <= mode.ste_clip { u } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}
