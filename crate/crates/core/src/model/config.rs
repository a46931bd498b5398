use crate::balance::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::preprocess::{PatchLayout, REVIN_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Forecast { horizon: usize },
    Impute,
    Anomaly,
    Classify { num_classes: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Forecast { .. } => "forecast",
            Task::Impute => "impute",
            Task::Anomaly => "anomaly",
            Task::Classify { .. } => "classify",
        }
    }

    pub fn is_reconstruction(&self) -> bool {
        matches!(self, Task::Impute | Task::Anomaly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    L2,
    L1,
}

/// Hyperparameters. Defaults follow the common setting: patch length 24,
/// three layers, ten routed experts, top-3 routing, one shared expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub num_routed: usize,
    pub num_shared: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub d_ff: usize,
    pub dropout: f64,
    pub revin_eps: f64,
    pub task: Task,
    pub loss: TaskLoss,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            lookback: 96,
            layers: 3,
            d: 32,
            heads: 4,
            patch_len: 24,
            stride: 24,
            num_routed: 10,
            num_shared: 1,
            top_k: 3,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            d_ff: 64,
            dropout: 0.0,
            revin_eps: REVIN_EPS,
            task: Task::Forecast { horizon: 96 },
            loss: TaskLoss::L2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for whole-model gradient checks.
    pub fn tiny(task: Task) -> Self {
        Self {
            channels: 3,
            lookback: 48,
            layers: 2,
            d: 8,
            heads: 2,
            patch_len: 12,
            stride: 12,
            num_routed: 4,
            num_shared: 1,
            top_k: 2,
            d_ff: 16,
            task,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> Result<PatchLayout> {
        PatchLayout::new(self.lookback, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.lookback == 0 {
            return bad("channels and lookback must be positive".into());
        }
        if self.layers == 0 || self.d == 0 || self.d_ff == 0 {
            return bad("layers, d and d_ff must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.num_routed == 0 || self.top_k == 0 || self.top_k > self.num_routed {
            return bad(format!(
                "need 1 <= top_k ({}) <= num_routed ({})",
                self.top_k, self.num_routed
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.revin_eps <= 0.0 {
            return bad("revin_eps must be positive".into());
        }
        match self.task {
            Task::Forecast { horizon: 0 } => return bad("forecast horizon must be positive".into()),
            Task::Classify { num_classes } if num_classes < 2 => {
                return bad("classification needs at least two classes".into())
            }
            _ => {}
        }
        self.layout()?;
        Ok(())
    }
}
