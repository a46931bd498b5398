//! Turns a run configuration into train/validation/test sets and evaluates
//! a model on them.

use anyhow::{bail, Context, Result};
use patchmoe::data::{self, enumerate_windows, split_ranges, WindowSpec};
use patchmoe::metrics::{self, ForecastEval, MetricsReport, TwoLevelMean};
use patchmoe::model::{forecast_samples, reconstruction_samples, ModelConfig, PatchMoe, Sample, Target, Task};
use patchmoe::preprocess::SeriesBatch;

use crate::config::RunConfig;

/// A contiguous stretch of the series with its evaluation windows.
#[derive(Clone, Debug)]
pub struct Segment {
    pub series: SeriesBatch,
    /// Per time step, when the task has labels.
    pub labels: Option<Vec<bool>>,
    pub windows: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub enum EvalSet {
    Series(Segment),
    Instances(Vec<(SeriesBatch, usize)>),
}

impl EvalSet {
    pub fn len(&self) -> usize {
        match self {
            EvalSet::Series(s) => s.windows.len(),
            EvalSet::Instances(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Dataset {
    pub model: ModelConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub val_set: EvalSet,
    pub test_set: EvalSet,
}

/// The full series plus per-time-step labels where available.
pub fn load_series(cfg: &RunConfig) -> Result<(SeriesBatch, Option<Vec<bool>>)> {
    match cfg.get("data") {
        "csv" => {
            let (path, schema) = cfg.csv()?;
            let s = data::read_csv(&path, &schema).with_context(|| format!("loading {}", path.display()))?;
            Ok((s.batch, s.labels))
        }
        "synthetic" => {
            let g = data::generate(&cfg.synthetic(None, 0)?)?;
            let labels = g.point_labels.map(|pl| {
                let (n, t) = (g.batch.channels(), g.batch.len());
                (0..t).map(|j| (0..n).any(|c| pl[c * t + j])).collect()
            });
            Ok((g.batch, labels))
        }
        other => bail!("config key `data`: expected synthetic or csv, got `{other}`"),
    }
}

fn segment(series: &SeriesBatch, labels: &Option<Vec<bool>>, start: usize, end: usize, spec: WindowSpec, what: &str) -> Result<Segment> {
    if end <= start {
        bail!("{what} split is empty");
    }
    let s = series.slice(start, end)?;
    let w = enumerate_windows(s.len(), spec);
    if w.too_short {
        bail!("{what} split has {} steps, shorter than one window of {}", s.len(), spec.span());
    }
    Ok(Segment {
        series: s,
        labels: labels.as_ref().map(|l| l[start..end].to_vec()),
        windows: w.windows,
    })
}

pub(crate) fn mask_seed(seed: u64, tag: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(tag << 32).wrapping_add(i as u64)
}

fn masked_samples(seg: &Segment, ratio: f64, seed: u64, tag: u64) -> Result<Vec<Sample>> {
    seg.windows
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            let w = seg.series.slice(s, e)?;
            let m = data::apply_mask(&w, ratio, mask_seed(seed, tag, i))?;
            let hidden = m.missing_mask.as_ref().expect("mask applied").iter().map(|o| !o).collect();
            Ok(Sample {
                target: Target::Masked {
                    values: w.values.clone(),
                    mask: hidden,
                },
                input: m,
            })
        })
        .collect()
}

fn instances(cfg: &RunConfig, key: &str, offset: u64) -> Result<Vec<(SeriesBatch, usize)>> {
    Ok(data::generate(&cfg.synthetic(Some(key), offset)?)?.instances)
}

pub fn prepare(cfg: &RunConfig) -> Result<Dataset> {
    let task = cfg.task()?;
    if let Task::Classify { .. } = task {
        if cfg.get("data") != "synthetic" || cfg.get("synth_kind") != "classes" {
            bail!("classification needs data=synthetic and synth_kind=classes");
        }
        let train = instances(cfg, "synth_instances", 0)?;
        let val = instances(cfg, "synth_val_instances", 1_000)?;
        let test = instances(cfg, "synth_test_instances", 2_000)?;
        let channels = train.first().map_or(1, |i| i.0.channels());
        let to_samples = |v: &[(SeriesBatch, usize)]| {
            v.iter()
                .map(|(b, l)| Sample {
                    input: b.clone(),
                    target: Target::Class(*l),
                })
                .collect()
        };
        return Ok(Dataset {
            model: cfg.model_config(channels)?,
            train: to_samples(&train),
            val: to_samples(&val),
            val_set: EvalSet::Instances(val),
            test_set: EvalSet::Instances(test),
        });
    }

    let (series, labels) = load_series(cfg)?;
    let model = cfg.model_config(series.channels())?;
    let [tr, va, te] = split_ranges(series.len(), cfg.split()?)?;
    let eval_spec = cfg.window_spec("window_stride")?;
    let train_spec = cfg.window_spec("train_window_stride")?;
    let lookback = model.lookback;
    // forecast windows may reach back into the previous split for context
    let back = |start: usize| if task.is_reconstruction() { start } else { start.saturating_sub(lookback) };
    let train_seg = segment(&series, &labels, tr.start, tr.end, train_spec, "train")?;
    let val_seg = segment(&series, &labels, back(va.start), va.end, eval_spec, "validation")?;
    let test_seg = segment(&series, &labels, back(te.start), te.end, eval_spec, "test")?;
    let seed = cfg.u64("seed")?;
    let (train, val) = match task {
        Task::Forecast { .. } => (
            forecast_samples(&train_seg.series, &train_seg.windows, lookback)?,
            forecast_samples(&val_seg.series, &val_seg.windows, lookback)?,
        ),
        Task::Impute => {
            let ratio = cfg.f64("mask_ratio")?;
            (
                reconstruction_samples(&train_seg.series, &train_seg.windows)?,
                masked_samples(&val_seg, ratio, seed, 1)?,
            )
        }
        _ => (
            reconstruction_samples(&train_seg.series, &train_seg.windows)?,
            reconstruction_samples(&val_seg.series, &val_seg.windows)?,
        ),
    };
    Ok(Dataset {
        model,
        train,
        val,
        val_set: EvalSet::Series(val_seg),
        test_set: EvalSet::Series(test_seg),
    })
}

/// Per-step anomaly scores (squared reconstruction error, averaged over
/// channels and over every window covering the step). Uncovered steps are
/// `None`.
pub fn anomaly_scores(model: &PatchMoe, seg: &Segment) -> Result<Vec<Option<f64>>> {
    let len = seg.series.len();
    let mut sum = vec![0.0; len];
    let mut cnt = vec![0usize; len];
    for &(s, e) in &seg.windows {
        let w = seg.series.slice(s, e)?;
        let y = model.predict(&w)?;
        let n = w.channels();
        for t in 0..e - s {
            let err: f64 = (0..n).map(|c| (y.get(c, t) - w.values.get(c, t)).powi(2)).sum::<f64>() / n as f64;
            sum[s + t] += err;
            cnt[s + t] += 1;
        }
    }
    Ok(sum.iter().zip(&cnt).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect())
}

/// Metrics of `model` on `set`, written under `section`.
pub fn evaluate(model: &PatchMoe, cfg: &RunConfig, set: &EvalSet, threshold_set: Option<&EvalSet>, section: &str) -> Result<MetricsReport> {
    let mut r = MetricsReport::new();
    let task = model.config().task;
    r.set_text("run", "task", task.name());
    r.set_count(section, "windows", set.len() as u64);
    match (task, set) {
        (Task::Classify { .. }, EvalSet::Instances(v)) => {
            let mut pred = Vec::with_capacity(v.len());
            for (b, _) in v {
                let y = model.predict(b)?;
                let best = (0..y.len()).fold(0, |bi, i| if y.data()[i] > y.data()[bi] { i } else { bi });
                pred.push(best);
            }
            let truth: Vec<usize> = v.iter().map(|i| i.1).collect();
            r.set(section, "accuracy", metrics::accuracy(&pred, &truth)?)?;
        }
        (Task::Forecast { .. }, EvalSet::Series(seg)) => {
            let s = cfg.usize("mase_seasonality")?;
            let eps = cfg.f64("msmape_epsilon")?;
            let lookback = model.config().lookback;
            let (mut mse, mut mae, mut mase, mut smape) = Default::default();
            let acc: [&mut TwoLevelMean; 4] = [&mut mse, &mut mae, &mut mase, &mut smape];
            for &(st, e) in &seg.windows {
                let x = seg.series.slice(st, st + lookback)?;
                let y = seg.series.slice(st + lookback, e)?;
                let f = model.predict(&x)?;
                for c in 0..x.channels() {
                    let (fc, yc) = (f.row(c), y.values.row(c));
                    let fe = ForecastEval {
                        history: x.values.row(c).to_vec(),
                        actuals: yc.to_vec(),
                        forecasts: fc.to_vec(),
                        seasonality: s,
                        epsilon: eps,
                    };
                    acc[0].push(c, Ok(metrics::mse(fc, yc)?));
                    acc[1].push(c, Ok(metrics::mae(fc, yc)?));
                    acc[2].push(c, metrics::mase(&fe));
                    acc[3].push(c, Ok(metrics::msmape(fc, yc, eps)?));
                }
            }
            for (name, m) in [("mse", &mse), ("mae", &mae), ("mase", &mase), ("msmape", &smape)] {
                if let Some(v) = m.mean() {
                    r.set(section, name, v)?;
                }
            }
            r.set_count(section, "mase_skipped", mase.skipped as u64);
        }
        (Task::Impute, EvalSet::Series(seg)) => {
            let ratio = cfg.f64("mask_ratio")?;
            let tag = if section == "test" { 2 } else { 1 };
            let samples = masked_samples(seg, ratio, cfg.u64("seed")?, tag)?;
            let (mut f, mut y, mut zero) = (Vec::new(), Vec::new(), Vec::new());
            for smp in &samples {
                let out = model.predict(&smp.input)?;
                let Target::Masked { values, mask } = &smp.target else { unreachable!() };
                for (j, &h) in mask.iter().enumerate() {
                    if h {
                        f.push(out.data()[j]);
                        y.push(values.data()[j]);
                        zero.push(0.0);
                    }
                }
            }
            r.set(section, "mse", metrics::mse(&f, &y)?)?;
            r.set(section, "mae", metrics::mae(&f, &y)?)?;
            r.set(section, "zero_fill_mse", metrics::mse(&zero, &y)?)?;
            r.set(section, "mask_ratio", ratio)?;
        }
        (Task::Anomaly, EvalSet::Series(seg)) => {
            let labels = seg
                .labels
                .as_ref()
                .context("anomaly evaluation needs labels (synth_kind=anomaly or label_column)")?;
            let scores = anomaly_scores(model, seg)?;
            let (sc, lab): (Vec<f64>, Vec<bool>) = scores.iter().zip(labels).filter_map(|(s, l)| s.map(|s| (s, *l))).unzip();
            match metrics::auc_roc(&sc, &lab) {
                Ok(auc) => r.set(section, "auc_roc", auc)?,
                Err(e) => r.set_text(section, "auc_roc", &e.to_string()),
            }
            let reference = match threshold_set {
                Some(EvalSet::Series(v)) => anomaly_scores(model, v)?.into_iter().flatten().collect(),
                _ => sc.clone(),
            };
            let th = metrics::anomaly_threshold(&reference, cfg.f64("anomaly_ratio")?)?;
            let flags: Vec<bool> = sc.iter().map(|&s| s > th).collect();
            r.set(section, "point_f1", metrics::point_f1(&flags, &lab)?)?;
            r.set(section, "threshold", th)?;
            r.set_text("run", "f1_kind", "point-wise");
        }
        (t, _) => bail!("evaluation set does not fit task {}", t.name()),
    }
    Ok(r)
}
