//! Logistic scorer over the byte histogram.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    expect_kind, f64_payload, header_field, write_model, Detector, DetectorId, ModelHeader, Verdict, MODEL_VERSION,
};
use crate::error::{Error, Result};
use crate::featx::embedding_for_gradient;
use crate::toyprog::strip_header;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Initial step size; each epoch's step is found by backtracking.
    pub learning_rate: f64,
    /// L2 penalty `l2 / 2 * |w|^2` on the weights (not the bias), in the
    /// coordinates the fit runs in. Without it a separable training set has
    /// no finite optimum and the logits grow until the sigmoid saturates.
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 400,
            learning_rate: 1.0,
            // scikit-learn's C = 1 at 500 training samples
            l2: 0.002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Mean cross-entropy before each accepted step, then the final value.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawByteScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub report: TrainReport,
}

impl RawByteScorer {
    /// Untrained-shape scorer with explicit parameters.
    pub fn with_weights(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != 256 {
            return Err(Error::InvalidArgument(format!(
                "{} weights, expected 256",
                weights.len()
            )));
        }
        Ok(RawByteScorer {
            weights,
            bias,
            report: TrainReport {
                config: TrainConfig {
                    seed: 0,
                    epochs: 0,
                    learning_rate: 0.0,
                    l2: 0.0,
                },
                loss_curve: Vec::new(),
                train_accuracy: f64::NAN,
            },
        })
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Probability of malware.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// p_c: the probability assigned to class `c`. The complement is taken
    /// as `sigmoid(-z)`, which stays nonzero long after `1 - sigmoid(z)` rounds to 0.
    pub fn p_class(&self, x: &[f64], c: u8) -> f64 {
        let z = self.logit(x);
        if c == 1 {
            sigmoid(z)
        } else {
            sigmoid(-z)
        }
    }

    /// Cross-entropy `-ln p_c(x)`.
    pub fn loss(&self, x: &[f64], c: u8) -> f64 {
        let z = self.logit(x);
        if c == 1 {
            softplus(-z)
        } else {
            softplus(z)
        }
    }

    /// Gradient of the cross-entropy with respect to the embedding:
    /// `(p1 - y) w`, i.e. `-(1 - p_c) w` for `c = 1` and `(1 - p_c) w` for `c = 0`.
    pub fn gradient(&self, x: &[f64], c: u8) -> Vec<f64> {
        let z = self.logit(x);
        let coef = if c == 1 { -sigmoid(-z) } else { sigmoid(z) };
        self.weights.iter().map(|w| coef * w).collect()
    }

    pub fn classify_embedding(&self, x: &[f64]) -> Verdict {
        let p1 = self.score(x);
        let label = u8::from(p1 >= 0.5);
        Verdict {
            label,
            confidence: self.p_class(x, label),
            detector: DetectorId::Rawbyte,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("report".into(), serde_json::to_value(&self.report)?);
        let header = ModelHeader {
            kind: DetectorId::Rawbyte,
            version: MODEL_VERSION,
            seed: self.report.config.seed,
            extra,
        };
        let payload: Vec<u8> = self
            .weights
            .iter()
            .chain(std::iter::once(&self.bias))
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write_model(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = expect_kind(path, DetectorId::Rawbyte)?;
        let mut values = f64_payload(path, &payload, 257)?;
        let bias = values.pop().expect("257 values");
        Ok(RawByteScorer {
            weights: values,
            bias,
            report: header_field(path, &header, "report")?,
        })
    }
}

impl Detector for RawByteScorer {
    fn id(&self) -> DetectorId {
        DetectorId::Rawbyte
    }

    fn classify(&self, binary: &[u8]) -> Result<Verdict> {
        Ok(self.classify_embedding(&embedding_for_gradient(strip_header(binary)?)))
    }
}

fn logit(w: &[f64], bias: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias
}

fn mean_loss(w: &[f64], bias: f64, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> f64 {
    let data = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = logit(w, bias, x);
            if y == 1 {
                softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum::<f64>()
        / xs.len() as f64;
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Fitted logistic parameters: weights, bias and the loss curve.
pub(crate) type LogisticFit = (Vec<f64>, f64, Vec<f64>);

/// Full-batch gradient descent on penalized mean cross-entropy with a backtracking
/// line search, so the recorded loss never increases. Weights start at zero.
pub(crate) fn fit_logistic(xs: &[Vec<f64>], ys: &[u8], cfg: &TrainConfig) -> Result<LogisticFit> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Training(format!("{} samples for {} labels", xs.len(), ys.len())));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Training("inputs differ in length".into()));
    }
    if !ys.contains(&0) || !ys.contains(&1) {
        return Err(Error::Training("training set needs both classes".into()));
    }
    if !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(Error::Training(format!(
            "l2 penalty {} must be finite and non-negative",
            cfg.l2
        )));
    }
    let n = xs.len() as f64;
    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    let mut loss = mean_loss(&w, bias, xs, ys, cfg.l2);
    let mut curve = vec![loss];
    let mut step = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|v| cfg.l2 * v).collect();
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let r = sigmoid(logit(&w, bias, x)) - f64::from(y);
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v / n;
            }
            gb += r / n;
        }
        let norm2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if norm2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let cand_b = bias - step * gb;
            let cand_loss = mean_loss(&cand_w, cand_b, xs, ys, cfg.l2);
            if cand_loss <= loss - 1e-4 * step * norm2 {
                w = cand_w;
                bias = cand_b;
                loss = cand_loss;
                accepted = true;
                step *= 1.5;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
        curve.push(loss);
    }
    Ok((w, bias, curve))
}

/// Per-column mean and deviation; constant columns get unit scale.
pub(crate) fn column_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Fits in standardized coordinates, where plain gradient descent is well
/// conditioned, then folds mean and scale back into the weights so the
/// scorer acts on the raw histogram.
pub fn train_rawbyte(xs: &[Vec<f64>], ys: &[u8], cfg: TrainConfig) -> Result<RawByteScorer> {
    if xs.iter().any(|x| x.len() != 256) {
        return Err(Error::Training("embeddings must have 256 entries".into()));
    }
    let (mean, scale) = column_stats(xs);
    let zs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let (w, b, curve) = fit_logistic(&zs, ys, &cfg)?;
    let weights: Vec<f64> = w.iter().zip(&scale).map(|(w, s)| w / s).collect();
    let bias = b - weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    let mut model = RawByteScorer::with_weights(weights, bias)?;
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| model.classify_embedding(x).label == y)
        .count();
    model.report = TrainReport {
        config: cfg,
        loss_curve: curve,
        train_accuracy: correct as f64 / xs.len() as f64,
    };
    Ok(model)
}
