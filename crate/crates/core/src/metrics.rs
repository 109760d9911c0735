//! Binary classification metrics and McNemar's exact test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PROB_CLIP;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub cohen_kappa: f64,
    pub log_loss: f64,
    pub confusion: Confusion,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    /// Every metric that depends only on the confusion matrix; `log_loss` is 0.
    pub fn from_confusion(c: Confusion) -> Self {
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let n = tp + fp + fn_ + tn;
        let accuracy = ratio(tp + tn, n);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
        let marg = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        let mcc = if marg.iter().any(|&m| m == 0.0) {
            0.0
        } else {
            (tp * tn - fp * fn_) / marg.iter().product::<f64>().sqrt()
        };
        let po = accuracy;
        let pe = ratio((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp), n * n);
        let cohen_kappa = if pe == 1.0 {
            if po == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (po - pe) / (1.0 - pe)
        };
        MetricsReport {
            accuracy,
            precision,
            recall,
            f1,
            mcc,
            cohen_kappa,
            log_loss: 0.0,
            confusion: c,
        }
    }
}

/// Mean binary cross-entropy with probabilities clipped to `[1e-7, 1 − 1e-7]`.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> f64 {
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    s / probs.len() as f64
}

fn check_labels(name: &str, v: &[u8]) -> Result<()> {
    match v.iter().find(|&&x| x > 1) {
        Some(x) => Err(Error::Input(format!("{name} value {x} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn compute_metrics(preds: &[u8], probs: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    if labels.is_empty() || preds.len() != labels.len() || probs.len() != labels.len() {
        return Err(Error::Input(format!(
            "metrics need equal non-empty lengths, got {} predictions, {} probabilities, {} labels",
            preds.len(),
            probs.len(),
            labels.len()
        )));
    }
    check_labels("prediction", preds)?;
    check_labels("label", labels)?;
    let mut r = MetricsReport::from_confusion(Confusion::from_predictions(preds, labels));
    r.log_loss = log_loss(probs, labels);
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: u64,
    /// A wrong, B right.
    pub c: u64,
    /// Continuity-corrected chi-square, reported alongside the exact p-value.
    pub statistic: f64,
    /// Exact two-sided binomial p-value.
    pub p_value: f64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Two-sided exact p-value `min(1, 2·P[X ≤ min(b,c)])`, `X ~ Bin(b+c, 1/2)`.
pub fn binomial_two_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let tail: f64 = (0..=k).map(|i| (ln_choose(n, i) + ln_half_n).exp()).sum();
    (2.0 * tail).min(1.0)
}

pub fn mcnemar_test(preds_a: &[u8], preds_b: &[u8], labels: &[u8]) -> Result<McNemar> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::Input("McNemar's test needs equal-length inputs".into()));
    }
    let (mut b, mut c) = (0, 0);
    for ((&a, &bb), &y) in preds_a.iter().zip(preds_b).zip(labels) {
        match (a == y, bb == y) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    let statistic = if b + c == 0 {
        0.0
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        d.max(0.0).powi(2) / (b + c) as f64
    };
    Ok(McNemar {
        b,
        c,
        statistic,
        p_value: binomial_two_sided(b, c),
    })
}
