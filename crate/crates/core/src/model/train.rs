use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamConfig, PatchMoe, Target};
use super::optim::Adam;
use crate::data::random_mask;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::preprocess::SeriesBatch;
use crate::router::Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: SeriesBatch,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 validates only after the last step.
    pub eval_every: usize,
    /// Draw a fresh point mask at this ratio for every sample and step;
    /// the hidden points become the target.
    pub impute_mask_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 100,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            impute_mask_ratio: None,
        }
    }
}

/// Batch-mean losses recorded before the update of `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub task_loss: f64,
    pub l_tem: f64,
    pub l_cha: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Step count after which the best validation loss was seen.
    pub best_step: Option<usize>,
    pub best_val: Option<f64>,
    pub best_params: Option<Vec<(String, Tensor)>>,
}

pub(super) fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean inference-mode task loss over `samples`.
pub fn validation_loss(model: &PatchMoe, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += model.evaluate(&s.input, &s.target, Mode::Inference, 0)?.1.task;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn remask(sample: &Sample, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let points = sample.input.values.len();
    let mask = random_mask(points, ratio, rng);
    let hidden: Vec<bool> = mask.iter().map(|m| !m).collect();
    Ok(Sample {
        input: sample.input.clone().with_mask(mask)?,
        target: Target::Masked {
            values: sample.input.values.clone(),
            mask: hidden,
        },
    })
}

/// Adam over shuffled mini-batches, one tape per step. The loss logged at
/// step `s` is evaluated with the parameters before update `s`.
pub fn train(model: &mut PatchMoe, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("training needs samples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut out = TrainOutcome {
        log: Vec::new(),
        best_step: None,
        best_val: None,
        best_params: None,
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap_or(0));
        }
        let mut tape = Tape::new(step_seed(cfg.seed, step));
        let p = model.params().bind(&mut tape);
        let mut sums: [Option<Var>; 4] = [None; 4];
        for &i in &batch {
            let sample = match cfg.impute_mask_ratio {
                Some(r) => remask(&train[i], r, &mut rng)?,
                None => train[i].clone(),
            };
            let fw = model.forward_tape(&mut tape, &p, &sample.input, Mode::Training)?;
            let lv = model.loss_tape(&mut tape, &fw, &sample.target)?;
            for (acc, v) in sums.iter_mut().zip([lv.total, lv.task, lv.l_tem, lv.l_cha]) {
                *acc = Some(match *acc {
                    Some(a) => tape.add(a, v)?,
                    None => v,
                });
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0] * inv);
        let entry = StepLog {
            step,
            task_loss: value(&tape, sums[1]),
            l_tem: value(&tape, sums[2]),
            l_cha: value(&tape, sums[3]),
            total: value(&tape, sums[0]),
        };
        if !entry.total.is_finite() {
            return Err(Error::Divergence { step, loss: entry.total });
        }
        log.push(entry);
        let loss = tape.scale(sums[0].expect("non-empty batch"), inv);
        let grads = tape.backward(loss);
        adam.step(model.params_mut(), &p, &grads);

        let done = step + 1;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps;
        if due && !val.is_empty() {
            let v = validation_loss(model, val)?;
            if v.is_finite() && out.best_val.is_none_or(|b| v < b) {
                out.best_val = Some(v);
                out.best_step = Some(done);
                out.best_params = Some(model.params().to_named());
            }
        }
    }
    out.log = log;
    Ok(out)
}

/// Forecast samples: each window's first `lookback` steps are the input and
/// the remaining steps the target.
pub fn forecast_samples(series: &SeriesBatch, windows: &[(usize, usize)], lookback: usize) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|&(s, e)| {
            let target = series.slice(s + lookback, e)?.values;
            Ok(Sample {
                input: series.slice(s, s + lookback)?,
                target: Target::Series(target),
            })
        })
        .collect()
}

/// Reconstruction samples whose target is the input window itself.
pub fn reconstruction_samples(series: &SeriesBatch, windows: &[(usize, usize)]) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|&(s, e)| {
            let input = series.slice(s, e)?;
            let target = match &input.missing_mask {
                Some(m) => Target::Masked {
                    values: input.values.clone(),
                    mask: m.clone(),
                },
                None => Target::Series(input.values.clone()),
            };
            Ok(Sample { input, target })
        })
        .collect()
}
