//! Synthetic generators, CSV ingestion, window enumeration, splits and
//! imputation masks.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::preprocess::SeriesBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    /// Zero for tasks that only read the lookback window.
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        if lookback == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window lookback ({lookback}) and stride ({stride}) must be positive"
            )));
        }
        Ok(Self { lookback, horizon, stride })
    }

    pub fn span(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// Window list plus a flag raised when the series is shorter than one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windows {
    /// `(start, end)` with `end = start + lookback + horizon`, exclusive.
    pub windows: Vec<(usize, usize)>,
    pub too_short: bool,
}

/// Every admissible start from 0 to `length - span` inclusive, stepping by
/// the stride. The last full window is never dropped.
pub fn enumerate_windows(length: usize, spec: WindowSpec) -> Windows {
    let span = spec.span();
    if length < span || span == 0 {
        return Windows {
            windows: Vec::new(),
            too_short: true,
        };
    }
    let windows = (0..=length - span).step_by(spec.stride.max(1)).map(|s| (s, s + span)).collect();
    Windows {
        windows,
        too_short: false,
    }
}

/// Contiguous chronological split by ratio; the test part takes the rest.
pub fn split_ranges(length: usize, ratios: [f64; 3]) -> Result<[std::ops::Range<usize>; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || total <= 0.0 {
        return Err(Error::Config(format!("bad split ratios {ratios:?}")));
    }
    let train = (length as f64 * ratios[0] / total).floor() as usize;
    let val = (length as f64 * ratios[1] / total).floor() as usize;
    let val_end = (train + val).min(length);
    Ok([0..train, train..val_end, val_end..length])
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticKind {
    /// `sum_j amp_j * sin(2 pi t / period_j + phase)` per channel with a
    /// seeded phase per channel and component, plus Gaussian noise.
    Sinusoid {
        periods: Vec<f64>,
        amplitudes: Vec<f64>,
        noise: f64,
    },
    Ar1 { phi: f64, noise: f64 },
    /// AR(1) base with additive spikes of `+-magnitude` at seeded points.
    Anomaly {
        phi: f64,
        noise: f64,
        rate: f64,
        magnitude: f64,
    },
    /// One instance per sample; class `c` oscillates with `periods[c]`.
    ClassFrequencies {
        periods: Vec<f64>,
        instances: usize,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    /// The series itself, or an empty placeholder for class instances.
    pub batch: SeriesBatch,
    /// Row-major `N x T` spike flags for the anomaly kind.
    pub point_labels: Option<Vec<bool>>,
    pub instances: Vec<(SeriesBatch, usize)>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ar1(rng: &mut ChaCha8Rng, n: usize, len: usize, phi: f64, noise: f64) -> Result<Vec<f64>> {
    if phi.is_nan() || phi.abs() >= 1.0 {
        return Err(Error::Config(format!("AR(1) coefficient must satisfy |phi| < 1, got {phi}")));
    }
    let mut data = Vec::with_capacity(n * len);
    for _ in 0..n {
        // start from the stationary distribution
        let mut x = normal(rng) * noise / (1.0 - phi * phi).sqrt();
        for _ in 0..len {
            data.push(x);
            x = phi * x + noise * normal(rng);
        }
    }
    Ok(data)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    let (n, len) = (spec.channels, spec.length);
    if n == 0 || len == 0 {
        return Err(Error::Config("synthetic series needs channels and length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let wrap = |data: Vec<f64>| SeriesBatch::unnamed(Tensor::matrix(n, len, data));
    match &spec.kind {
        SyntheticKind::Sinusoid {
            periods,
            amplitudes,
            noise,
        } => {
            if periods.len() != amplitudes.len() || periods.iter().any(|p| *p <= 0.0) {
                return Err(Error::Config("need one positive period per amplitude".into()));
            }
            let mut data = Vec::with_capacity(n * len);
            for _ in 0..n {
                let phases: Vec<f64> = periods.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                for t in 0..len {
                    let mut v = 0.0;
                    for ((per, amp), ph) in periods.iter().zip(amplitudes).zip(&phases) {
                        v += amp * (2.0 * PI * t as f64 / per + ph).sin();
                    }
                    if *noise > 0.0 {
                        v += noise * normal(&mut rng);
                    }
                    data.push(v);
                }
            }
            Ok(Synthetic {
                batch: wrap(data)?,
                point_labels: None,
                instances: Vec::new(),
            })
        }
        SyntheticKind::Ar1 { phi, noise } => Ok(Synthetic {
            batch: wrap(ar1(&mut rng, n, len, *phi, *noise)?)?,
            point_labels: None,
            instances: Vec::new(),
        }),
        SyntheticKind::Anomaly {
            phi,
            noise,
            rate,
            magnitude,
        } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::Config(format!("spike rate {rate} outside [0, 1)")));
            }
            let mut data = ar1(&mut rng, n, len, *phi, *noise)?;
            let mut labels = vec![false; n * len];
            for (v, l) in data.iter_mut().zip(labels.iter_mut()) {
                if rng.random::<f64>() < *rate {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v += sign * magnitude;
                    *l = true;
                }
            }
            Ok(Synthetic {
                batch: wrap(data)?,
                point_labels: Some(labels),
                instances: Vec::new(),
            })
        }
        SyntheticKind::ClassFrequencies {
            periods,
            instances,
            noise,
        } => {
            if periods.len() < 2 || periods.iter().any(|p| *p <= 0.0) {
                return Err(Error::Config("need at least two positive class periods".into()));
            }
            let mut labels: Vec<usize> = (0..*instances).map(|i| i % periods.len()).collect();
            labels.shuffle(&mut rng);
            let mut out = Vec::with_capacity(*instances);
            for label in labels {
                let mut data = Vec::with_capacity(n * len);
                for _ in 0..n {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = rng.random_range(0.8..1.2);
                    for t in 0..len {
                        let v = amp * (2.0 * PI * t as f64 / periods[label] + phase).sin();
                        data.push(v + noise * normal(&mut rng));
                    }
                }
                out.push((wrap(data)?, label));
            }
            Ok(Synthetic {
                batch: wrap(vec![0.0; n * len])?,
                point_labels: None,
                instances: out,
            })
        }
    }
}

/// Row-major point mask with `round(ratio * points)` entries set to false.
pub fn random_mask(points: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let hidden = ((ratio * points as f64).round() as usize).min(points);
    let mut idx: Vec<usize> = (0..points).collect();
    let (chosen, _) = idx.partial_shuffle(rng, hidden);
    let mut mask = vec![true; points];
    for &i in chosen.iter() {
        mask[i] = false;
    }
    mask
}

/// Hides a seeded uniform subset of points. Values stay in place as
/// targets; the model zero-fills hidden points after normalization.
/// Points already missing stay missing.
pub fn apply_mask(batch: &SeriesBatch, ratio: f64, seed: u64) -> Result<SeriesBatch> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = random_mask(batch.values.len(), ratio, &mut rng);
    if let Some(old) = &batch.missing_mask {
        for (m, o) in mask.iter_mut().zip(old) {
            *m &= *o;
        }
    }
    batch.clone().with_mask(mask)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// First column holds timestamps and is skipped.
    pub timestamp: bool,
    /// Column of 0/1 point labels kept out of the channels.
    pub label_column: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSeries {
    pub batch: SeriesBatch,
    pub labels: Option<Vec<bool>>,
}

fn is_nan_cell(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("nan")
}

/// Reads a header-plus-rows CSV, one row per time step. Empty and `NaN`
/// cells become missing points.
pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<CsvSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line: 0, msg: format!("{other:?}") },
    })?;
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
        Some(r) => r.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
    };
    let width = header.len();
    let skip = usize::from(schema.timestamp);
    let label_col = match &schema.label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("no label column `{name}`") })?,
        ),
        None => None,
    };
    let channel_cols: Vec<usize> = (skip..width).filter(|c| Some(*c) != label_col).collect();
    if channel_cols.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no value columns".into() });
    }
    let names: Vec<String> = channel_cols.iter().map(|&c| header[c].trim().to_string()).collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); channel_cols.len()];
    let mut observed: Vec<Vec<bool>> = vec![Vec::new(); channel_cols.len()];
    let mut labels = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (k, &c) in channel_cols.iter().enumerate() {
            let cell = rec[c].trim();
            if is_nan_cell(cell) {
                cols[k].push(0.0);
                observed[k].push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", names[k]),
            })?;
            cols[k].push(v);
            observed[k].push(v.is_finite());
        }
        if let Some(c) = label_col {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("label `{cell}` is not numeric"),
            })?;
            labels.push(v != 0.0);
        }
    }
    let len = cols[0].len();
    if len == 0 {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let values = Tensor::matrix(cols.len(), len, cols.concat());
    let mut batch = SeriesBatch::new(values, names)?;
    let mask = observed.concat();
    if mask.iter().any(|m| !m) {
        for (v, m) in batch.values.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        batch = batch.with_mask(mask)?;
    }
    Ok(CsvSeries {
        batch,
        labels: label_col.map(|_| labels),
    })
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesBatch> {
    Ok(read_csv(path, schema)?.batch)
}

/// Writes an index column `t` and one column per channel at 17
/// significant digits; missing points are written as `NaN`.
pub fn save_csv(path: &Path, batch: &SeriesBatch) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,{}", batch.channel_names.join(","))?;
    for t in 0..batch.len() {
        write!(out, "{t}")?;
        for c in 0..batch.channels() {
            if batch.observed(c, t) {
                write!(out, ",{:.16e}", batch.values.get(c, t))?;
            } else {
                write!(out, ",NaN")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
