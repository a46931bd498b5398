//! Flat `key=value` run configuration. Every key has a default; unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use patchmoe::data::{CsvSchema, SyntheticKind, SyntheticSpec, WindowSpec};
use patchmoe::model::{AdamConfig, ModelConfig, Task, TaskLoss, TrainConfig};

pub const OUT_DIR_ENV: &str = "PATCHMOE_OUT_DIR";

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task", "forecast", "forecast | impute | anomaly | classify"),
    ("data", "synthetic", "synthetic | csv"),
    ("csv_path", "", "input CSV when data=csv"),
    ("csv_timestamp", "true", "first CSV column is a timestamp"),
    ("label_column", "", "CSV column with 0/1 anomaly labels"),
    ("synth_kind", "sinusoid", "sinusoid | ar1 | anomaly | classes"),
    ("synth_channels", "2", "synthetic channel count"),
    ("synth_length", "720", "synthetic series length"),
    ("synth_periods", "24", "comma-separated periods (sinusoid components or class periods)"),
    ("synth_amplitudes", "1", "comma-separated sinusoid amplitudes"),
    ("synth_noise", "0", "Gaussian noise std"),
    ("synth_phi", "0.8", "AR(1) coefficient"),
    ("synth_spike_rate", "0.01", "anomaly spike probability per point"),
    ("synth_spike_magnitude", "4", "anomaly spike size"),
    ("synth_instances", "200", "training instances (classes)"),
    ("synth_val_instances", "50", "validation instances (classes)"),
    ("synth_test_instances", "100", "test instances (classes)"),
    ("synth_seed", "1", "synthetic generator seed"),
    ("lookback", "96", "input window length T"),
    ("horizon", "96", "forecast horizon"),
    ("window_stride", "1", "stride between evaluation windows"),
    ("train_window_stride", "1", "stride between training windows"),
    ("split", "7:1:2", "train:val:test ratios"),
    ("layers", "3", "stacked layers L"),
    ("d", "32", "model width"),
    ("heads", "4", "attention heads"),
    ("patch_len", "24", "patch length p"),
    ("stride", "24", "patch stride"),
    ("num_routed", "10", "routed experts N_r"),
    ("num_shared", "1", "shared experts N_s"),
    ("top_k", "3", "experts per token"),
    ("alpha", "0.01", "temporal balance weight"),
    ("beta", "0.01", "channel balance weight"),
    ("d_ff", "64", "expert hidden width"),
    ("dropout", "0", "attention dropout"),
    ("revin_eps", "1e-5", "normalization epsilon"),
    ("num_classes", "2", "classes for classify"),
    ("loss", "l2", "l2 | l1"),
    ("lr", "0.001", "Adam learning rate"),
    ("adam_beta1", "0.9", "Adam beta1"),
    ("adam_beta2", "0.999", "Adam beta2"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("steps", "500", "optimizer steps"),
    ("batch_size", "8", "samples per step"),
    ("eval_every", "50", "validation cadence in steps"),
    ("mask_ratio", "0.25", "imputation mask ratio"),
    ("anomaly_ratio", "0.01", "expected anomaly ratio for the F1 threshold"),
    ("mase_seasonality", "1", "MASE seasonal lag S"),
    ("msmape_epsilon", "0.1", "msMAPE epsilon"),
    ("seed", "0", "model and training seed"),
    ("out_dir", "runs/latest", "artifact directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    /// Defaults, then the file, then `PATCHMOE_OUT_DIR`, then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::resolve_on(Self::default(), file, overrides)
    }

    /// As [`RunConfig::resolve`], starting from `base` instead of the defaults.
    pub fn resolve_on(base: Self, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = base;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.merge_text(&text).with_context(|| format!("in config {}", path.display()))?;
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.set("out_dir", &dir)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            bail!("unknown config key `{key}`");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| anyhow!("config key `{key}`: `{s}`: {e}")))
            .collect()
    }

    /// Every key with its resolved value, sorted.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn task(&self) -> Result<Task> {
        Ok(match self.get("task") {
            "forecast" => Task::Forecast { horizon: self.usize("horizon")? },
            "impute" => Task::Impute,
            "anomaly" => Task::Anomaly,
            "classify" => Task::Classify {
                num_classes: self.usize("num_classes")?,
            },
            other => bail!("config key `task`: unknown task `{other}`"),
        })
    }

    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let loss = match self.get("loss") {
            "l2" => TaskLoss::L2,
            "l1" => TaskLoss::L1,
            other => bail!("config key `loss`: expected l1 or l2, got `{other}`"),
        };
        let cfg = ModelConfig {
            channels,
            lookback: self.usize("lookback")?,
            layers: self.usize("layers")?,
            d: self.usize("d")?,
            heads: self.usize("heads")?,
            patch_len: self.usize("patch_len")?,
            stride: self.usize("stride")?,
            num_routed: self.usize("num_routed")?,
            num_shared: self.usize("num_shared")?,
            top_k: self.usize("top_k")?,
            alpha: self.f64("alpha")?,
            beta: self.f64("beta")?,
            d_ff: self.usize("d_ff")?,
            dropout: self.f64("dropout")?,
            revin_eps: self.f64("revin_eps")?,
            task: self.task()?,
            loss,
            seed: self.u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mask = match self.task()? {
            Task::Impute => Some(self.f64("mask_ratio")?),
            _ => None,
        };
        Ok(TrainConfig {
            adam: AdamConfig {
                lr: self.f64("lr")?,
                beta1: self.f64("adam_beta1")?,
                beta2: self.f64("adam_beta2")?,
                eps: self.f64("adam_eps")?,
            },
            steps: self.usize("steps")?,
            batch_size: self.usize("batch_size")?,
            seed: self.u64("seed")?,
            eval_every: self.usize("eval_every")?,
            impute_mask_ratio: mask,
        })
    }

    pub fn split(&self) -> Result<[f64; 3]> {
        let parts: Vec<f64> = self
            .get("split")
            .split(':')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow!("config key `split`: {e}"))?;
        match parts.as_slice() {
            [a, b, c] => Ok([*a, *b, *c]),
            _ => bail!("config key `split`: expected train:val:test"),
        }
    }

    /// Window geometry for evaluation; non-forecast tasks have no horizon.
    pub fn window_spec(&self, stride_key: &str) -> Result<WindowSpec> {
        let horizon = match self.task()? {
            Task::Forecast { horizon } => horizon,
            _ => 0,
        };
        Ok(WindowSpec::new(self.usize("lookback")?, horizon, self.usize(stride_key)?)?)
    }

    pub fn csv(&self) -> Result<(PathBuf, CsvSchema)> {
        let path = self.get("csv_path");
        if path.is_empty() {
            bail!("config key `csv_path` is required when data=csv");
        }
        let label = self.get("label_column");
        Ok((
            PathBuf::from(path),
            CsvSchema {
                timestamp: self.bool("csv_timestamp")?,
                label_column: (!label.is_empty()).then(|| label.to_string()),
            },
        ))
    }

    pub fn synthetic(&self, instances_key: Option<&str>, seed_offset: u64) -> Result<SyntheticSpec> {
        let noise = self.f64("synth_noise")?;
        let kind = match self.get("synth_kind") {
            "sinusoid" => SyntheticKind::Sinusoid {
                periods: self.list("synth_periods")?,
                amplitudes: self.list("synth_amplitudes")?,
                noise,
            },
            "ar1" => SyntheticKind::Ar1 {
                phi: self.f64("synth_phi")?,
                noise: noise.max(f64::MIN_POSITIVE),
            },
            "anomaly" => SyntheticKind::Anomaly {
                phi: self.f64("synth_phi")?,
                noise,
                rate: self.f64("synth_spike_rate")?,
                magnitude: self.f64("synth_spike_magnitude")?,
            },
            "classes" => SyntheticKind::ClassFrequencies {
                periods: self.list("synth_periods")?,
                instances: self.usize(instances_key.unwrap_or("synth_instances"))?,
                noise,
            },
            other => bail!("config key `synth_kind`: unknown kind `{other}`"),
        };
        let length = match kind {
            SyntheticKind::ClassFrequencies { .. } => self.usize("lookback")?,
            _ => self.usize("synth_length")?,
        };
        Ok(SyntheticSpec {
            kind,
            channels: self.usize("synth_channels")?,
            length,
            seed: self.u64("synth_seed")?.wrapping_add(seed_offset),
        })
    }
}

/// Model hyperparameters as `key=value` lines, stored in checkpoints and
/// compared on load.
pub fn model_echo(cfg: &ModelConfig) -> String {
    let (task, extra) = match cfg.task {
        Task::Forecast { horizon } => ("forecast", format!("horizon={horizon}\n")),
        Task::Impute => ("impute", String::new()),
        Task::Anomaly => ("anomaly", String::new()),
        Task::Classify { num_classes } => ("classify", format!("num_classes={num_classes}\n")),
    };
    let loss = match cfg.loss {
        TaskLoss::L2 => "l2",
        TaskLoss::L1 => "l1",
    };
    format!(
        "task={task}\n{extra}channels={}\nlookback={}\nlayers={}\nd={}\nheads={}\npatch_len={}\nstride={}\n\
         num_routed={}\nnum_shared={}\ntop_k={}\nalpha={:e}\nbeta={:e}\nd_ff={}\ndropout={:e}\nrevin_eps={:e}\nloss={loss}\nseed={}\n",
        cfg.channels,
        cfg.lookback,
        cfg.layers,
        cfg.d,
        cfg.heads,
        cfg.patch_len,
        cfg.stride,
        cfg.num_routed,
        cfg.num_shared,
        cfg.top_k,
        cfg.alpha,
        cfg.beta,
        cfg.d_ff,
        cfg.dropout,
        cfg.revin_eps,
        cfg.seed
    )
}
