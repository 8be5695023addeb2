//! Single-pixel loss and weight curves over prediction confidence.
//!
//! For a pixel whose softmax probability on the true class is `p`, each
//! supported loss factors into weight(p) times the base loss -ln(p).
//! The default grid sweeps p from 0.2 to 0.9 for cross entropy, focal at
//! two focusing strengths, and the adaptive loss at two temperatures,
//! all through the production loss code on a one-pixel batch.

use crate::error::{Error, Result};
use crate::losses::{self, LossKind, LossSpec, PatVariant};
use crate::{tensor, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CurveMethod {
    pub kind: LossKind,
    /// Focusing exponent for focal, temperature for the adaptive loss.
    pub param: Option<f64>,
    pub variant: PatVariant,
    pub epsilon: f64,
}

impl CurveMethod {
    pub fn ce() -> CurveMethod {
        CurveMethod { kind: LossKind::Ce, param: None, variant: PatVariant::Table1, epsilon: 0.0 }
    }

    pub fn focal(gamma: f64) -> CurveMethod {
        CurveMethod {
            kind: LossKind::Focal,
            param: Some(gamma),
            variant: PatVariant::Table1,
            epsilon: 0.0,
        }
    }

    pub fn pat(temperature: f64, variant: PatVariant) -> CurveMethod {
        CurveMethod { kind: LossKind::Pat, param: Some(temperature), variant, epsilon: 1e-6 }
    }

    pub fn label(&self) -> String {
        match (self.kind, self.variant) {
            (LossKind::Pat, PatVariant::Table1) => "pat-table1".into(),
            (LossKind::Pat, PatVariant::Literal) => "pat-literal".into(),
            (kind, _) => kind.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub method: String,
    pub param: Option<f64>,
    pub p: f64,
    pub weight: f64,
    pub loss: f64,
}

/// The grid behind the loss-comparison table: focal at gamma 2 and 5,
/// the adaptive loss at temperature 2 and 5, plus plain cross entropy.
pub fn default_methods() -> Vec<CurveMethod> {
    vec![
        CurveMethod::ce(),
        CurveMethod::focal(2.0),
        CurveMethod::focal(5.0),
        CurveMethod::pat(2.0, PatVariant::Table1),
        CurveMethod::pat(5.0, PatVariant::Table1),
    ]
}

pub fn default_p_grid() -> Vec<f64> {
    (2..=9).map(|i| i as f64 / 10.0).collect()
}

/// Logits of a two-class pixel whose true-class probability is exactly p.
fn confidence_logits(p: f64) -> Result<Tensor> {
    Tensor::from_vec(vec![0.0, ((1.0 - p) / p).ln()], &[1, 2, 1, 1])
}

pub fn curve(methods: &[CurveMethod], p_grid: &[f64]) -> Result<Vec<CurveRow>> {
    for &p in p_grid {
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(Error::BadConfig {
                reason: format!("confidence {p} outside the open interval (0, 1)"),
            });
        }
    }
    let mask = tensor::onehot(&Tensor::zeros(&[1, 1, 1]), 2)?;
    let stats = losses::ClassStats::new(vec![1, 1]);
    let mut rows = Vec::with_capacity(methods.len() * p_grid.len());
    for m in methods {
        let mut spec = LossSpec::new(m.kind);
        match m.kind {
            LossKind::Ce => {}
            LossKind::Focal => spec.gamma = m.param.unwrap_or(spec.gamma),
            LossKind::Pat => {
                spec.temperature = m.param.unwrap_or(spec.temperature);
                spec.variant = m.variant;
                spec.epsilon = m.epsilon;
            }
            other => {
                return Err(Error::BadConfig {
                    reason: format!("{other} has no single-pixel confidence curve"),
                });
            }
        }
        spec.validate()?;
        for &p in p_grid {
            let logits = confidence_logits(p)?;
            let out = losses::loss_dispatch(&spec, &logits, &mask, &stats, 0)?;
            let weight = match m.kind {
                LossKind::Ce => 1.0,
                LossKind::Focal => losses::focal_value(p, spec.gamma) / -p.ln(),
                LossKind::Pat => {
                    losses::pat_beta_scalar(p, spec.temperature, spec.epsilon, spec.variant)
                }
                _ => unreachable!(),
            };
            rows.push(CurveRow { method: m.label(), param: m.param, p, weight, loss: out.value });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("method,param,p,weight,loss\n");
    for r in rows {
        let param = r.param.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{param},{},{},{}\n", r.method, r.p, r.weight, r.loss));
    }
    s
}
