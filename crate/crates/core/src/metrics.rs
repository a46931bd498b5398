//! Forecast errors, ranking and classification scores, and a JSON report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const MSMAPE_EPSILON: f64 = 0.1;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("metric inputs of length {a} and {b}")));
    }
    Ok(())
}

pub fn mse(f: &[f64], y: &[f64]) -> Result<f64> {
    same_len(f.len(), y.len())?;
    Ok(f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64)
}

pub fn mae(f: &[f64], y: &[f64]) -> Result<f64> {
    same_len(f.len(), y.len())?;
    Ok(f.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEval {
    /// In-sample history `Y_1..Y_M`.
    pub history: Vec<f64>,
    pub actuals: Vec<f64>,
    pub forecasts: Vec<f64>,
    pub seasonality: usize,
    pub epsilon: f64,
}

impl ForecastEval {
    pub fn new(history: Vec<f64>, actuals: Vec<f64>, forecasts: Vec<f64>, seasonality: usize) -> Self {
        Self {
            history,
            actuals,
            forecasts,
            seasonality,
            epsilon: MSMAPE_EPSILON,
        }
    }
}

/// Mean absolute error scaled by the in-sample seasonal-naive error.
pub fn mase(e: &ForecastEval) -> Result<f64> {
    same_len(e.forecasts.len(), e.actuals.len())?;
    let (m, s) = (e.history.len(), e.seasonality);
    if s == 0 || m <= s {
        return Err(Error::Config(format!("MASE needs history longer than seasonality {s}, got {m}")));
    }
    let h = e.actuals.len() as f64;
    let num: f64 = e.forecasts.iter().zip(&e.actuals).map(|(f, y)| (f - y).abs()).sum();
    let naive: f64 = (s..m).map(|k| (e.history[k] - e.history[k - s]).abs()).sum();
    let den = h / (m - s) as f64 * naive;
    if den == 0.0 {
        return Err(Error::Undefined("MASE"));
    }
    Ok(num / den)
}

/// Percent error with an `epsilon`-floored symmetric denominator.
pub fn msmape(f: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    same_len(f.len(), y.len())?;
    if epsilon < 0.0 {
        return Err(Error::Config(format!("msMAPE epsilon must be >= 0, got {epsilon}")));
    }
    let s: f64 = f
        .iter()
        .zip(y)
        .map(|(f, y)| {
            let den = (y.abs() + f.abs() + epsilon).max(0.5 + epsilon) / 2.0;
            (f - y).abs() / den
        })
        .sum();
    Ok(100.0 * s / f.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via average ranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN anomaly score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC (labels hold a single class)"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Point-wise F1 over binary flags; 0 when precision and recall are both 0.
pub fn point_f1(pred: &[bool], truth: &[bool]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::Config(format!("percentile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Threshold for point flags given the expected anomaly ratio.
pub fn anomaly_threshold(val_scores: &[f64], anomaly_ratio: f64) -> Result<f64> {
    percentile(val_scores, 100.0 * (1.0 - anomaly_ratio))
}

/// Windows averaged within each series, then series averaged. Undefined
/// windows are dropped and counted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TwoLevelMean {
    series: Vec<(f64, usize)>,
    pub skipped: usize,
}

impl TwoLevelMean {
    pub fn push(&mut self, series: usize, value: Result<f64>) {
        if self.series.len() <= series {
            self.series.resize(series + 1, (0.0, 0));
        }
        match value {
            Ok(v) if v.is_finite() => {
                self.series[series].0 += v;
                self.series[series].1 += 1;
            }
            _ => self.skipped += 1,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        let means: Vec<f64> = self.series.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReportValue {
    Num(f64),
    Count(u64),
    Text(String),
}

/// Named sections of named values, serialized with sorted keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub sections: BTreeMap<String, BTreeMap<String, ReportValue>>,
}

fn json_str(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Non-finite values are refused.
    pub fn set(&mut self, section: &str, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Data(format!("metric {section}.{key} is not finite")));
        }
        self.insert(section, key, ReportValue::Num(value));
        Ok(())
    }

    pub fn set_count(&mut self, section: &str, key: &str, value: u64) {
        self.insert(section, key, ReportValue::Count(value));
    }

    pub fn set_text(&mut self, section: &str, key: &str, value: &str) {
        self.insert(section, key, ReportValue::Text(value.to_string()));
    }

    fn insert(&mut self, section: &str, key: &str, value: ReportValue) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value);
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&ReportValue> {
        self.sections.get(section)?.get(key)
    }

    pub fn num(&self, section: &str, key: &str) -> Option<f64> {
        match self.get(section, key)? {
            ReportValue::Num(v) => Some(*v),
            ReportValue::Count(c) => Some(*c as f64),
            ReportValue::Text(_) => None,
        }
    }

    /// Pretty JSON, keys sorted, floats at 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        for (i, (name, values)) in self.sections.iter().enumerate() {
            out.push_str(if i == 0 { "\n  " } else { ",\n  " });
            json_str(&mut out, name);
            out.push_str(": {");
            for (j, (key, v)) in values.iter().enumerate() {
                out.push_str(if j == 0 { "\n    " } else { ",\n    " });
                json_str(&mut out, key);
                out.push_str(": ");
                match v {
                    ReportValue::Num(x) => {
                        let _ = write!(out, "{x:.16e}");
                    }
                    ReportValue::Count(c) => {
                        let _ = write!(out, "{c}");
                    }
                    ReportValue::Text(s) => json_str(&mut out, s),
                }
            }
            out.push_str(if values.is_empty() { "}" } else { "\n  }" });
        }
        out.push_str(if self.sections.is_empty() { "}\n" } else { "\n}\n" });
        out
    }
}
