//! The assembled network: normalization and patch embedding, `L` blocks of
//! attention followed by a routed mixture-of-experts layer sharing one
//! recurrent router, and a task head.

mod cka;
mod config;
mod optim;
mod train;

pub use cka::{cka_linear, cka_pairs};
pub use config::{ModelConfig, Task, TaskLoss};
pub use optim::{Adam, AdamConfig};
pub use train::{forecast_samples, reconstruction_samples, train, validation_loss, Sample, StepLog, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::AttentionParams;
use crate::balance::{self, BalanceTerms};
use crate::error::{Error, Result};
use crate::moe::ExpertBank;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::preprocess::{channel_stats, NormStats, PatchLayout, SeriesBatch, TokenTensor};
use crate::router::{GateMatrix, Mode, RouterParams};

#[derive(Clone, Debug)]
pub struct Layer {
    pub attn: AttentionParams,
    pub moe: ExpertBank,
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Flattened channel tokens `n*d -> horizon`.
    Forecast { w: ParamId, b: ParamId },
    /// Per token `d -> p`, patches tiled back onto the time axis.
    Reconstruct { w: ParamId, b: ParamId },
    /// Mean over all tokens, then `d -> C`.
    Classify { w: ParamId, b: ParamId },
}

/// What a task loss compares against.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Every point of an `N x H` forecast or `N x T` reconstruction.
    Series(Tensor),
    /// Only points where `mask` is true enter the loss.
    Masked { values: Tensor, mask: Vec<bool> },
    Class(usize),
}

/// Tape handles produced by one forward pass.
pub struct TapeForward {
    pub stats: NormStats,
    pub x_e: Vec<Var>,
    pub scores: Vec<Var>,
    pub gate_vars: Vec<Var>,
    pub gates: Vec<GateMatrix>,
    pub epsilon: Vec<Option<Tensor>>,
    pub attention: Vec<Vec<Var>>,
    pub l_tem: Vec<Var>,
    pub l_cha: Vec<Var>,
    pub repr: Var,
    pub output: Var,
}

/// Loss pieces on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub task: Var,
    pub l_tem: Var,
    pub l_cha: Var,
    pub total: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stats: NormStats,
    /// Post-attention representation entering each MoE layer.
    pub x_e: Vec<TokenTensor>,
    pub scores: Vec<Tensor>,
    pub gates: Vec<GateMatrix>,
    pub balance: Vec<BalanceTerms>,
    /// `attention[l][c * heads + h]`.
    pub attention: Vec<Vec<Tensor>>,
    pub repr: TokenTensor,
    pub output: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    /// Summed over layers, unweighted.
    pub l_tem: f64,
    pub l_cha: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PatchMoe {
    config: ModelConfig,
    params: ParamStore,
    layout: PatchLayout,
    revin_gamma: ParamId,
    revin_beta: ParamId,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    layers: Vec<Layer>,
    router: RouterParams,
    head: Head,
}

impl PatchMoe {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (n_ch, d, p, n) = (config.channels, config.d, config.patch_len, layout.n);
        let revin_gamma = store.add("revin.gamma", Tensor::full(&[n_ch, 1], 1.0));
        let revin_beta = store.add("revin.beta", Tensor::zeros(&[n_ch, 1]));
        let embed_w = store.add_uniform("embed.w", &[p, d], p, &mut rng);
        let embed_b = store.add_uniform("embed.b", &[1, d], p, &mut rng);
        let pos = store.add_uniform("embed.pos", &[n, d], d, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut attn = AttentionParams::new(&mut store, &format!("layer{l}.attn"), d, config.heads, &mut rng)?;
            attn.dropout = config.dropout;
            let moe = ExpertBank::new(
                &mut store,
                &format!("layer{l}.moe"),
                d,
                config.d_ff,
                config.num_shared,
                config.num_routed,
                &mut rng,
            )?;
            layers.push(Layer { attn, moe });
        }
        let router = RouterParams::new(&mut store, d, config.num_routed, &mut rng);
        let head = match config.task {
            Task::Forecast { horizon } => Head::Forecast {
                w: store.add_uniform("head.w", &[n * d, horizon], n * d, &mut rng),
                b: store.add_uniform("head.b", &[1, horizon], n * d, &mut rng),
            },
            Task::Impute | Task::Anomaly => Head::Reconstruct {
                w: store.add_uniform("head.w", &[d, p], d, &mut rng),
                b: store.add_uniform("head.b", &[1, p], d, &mut rng),
            },
            Task::Classify { num_classes } => Head::Classify {
                w: store.add_uniform("head.w", &[d, num_classes], d, &mut rng),
                b: store.add_uniform("head.b", &[1, num_classes], d, &mut rng),
            },
        };
        Ok(Self {
            config,
            params: store,
            layout,
            revin_gamma,
            revin_beta,
            embed_w,
            embed_b,
            pos,
            layers,
            router,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> PatchLayout {
        self.layout
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn router(&self) -> &RouterParams {
        &self.router
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Token count `N * n` of one input.
    pub fn tokens(&self) -> usize {
        self.config.channels * self.layout.n
    }

    fn check_input(&self, batch: &SeriesBatch) -> Result<()> {
        if batch.channels() != self.config.channels || batch.len() != self.config.lookback {
            return Err(Error::Shape(format!(
                "input {}x{} does not match configured {}x{}",
                batch.channels(),
                batch.len(),
                self.config.channels,
                self.config.lookback
            )));
        }
        Ok(())
    }

    /// Records a forward pass. Routing noise, when `mode` asks for it, is
    /// drawn from the tape's generator.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, batch: &SeriesBatch, mode: Mode) -> Result<TapeForward> {
        self.check_input(batch)?;
        let cfg = &self.config;
        let (n_ch, t_len, n) = (cfg.channels, cfg.lookback, self.layout.n);
        let tokens = n_ch * n;

        // per-channel standardization; the statistics are data, not parameters
        let (mean, std) = channel_stats(batch);
        let mut xn = batch.values.clone();
        let mut keep = Tensor::full(&[n_ch, t_len], 1.0);
        for c in 0..n_ch {
            for t in 0..t_len {
                if batch.observed(c, t) {
                    xn.set(c, t, (xn.get(c, t) - mean[c]) / (std[c] + cfg.revin_eps));
                } else {
                    xn.set(c, t, 0.0);
                    keep.set(c, t, 0.0);
                }
            }
        }
        let gamma = p.var(self.revin_gamma);
        let beta = p.var(self.revin_beta);
        let xv = tape.leaf(xn);
        let x = tape.mul_col(xv, gamma)?;
        let mut x = tape.add_col(x, beta)?;
        if batch.missing_mask.is_some() {
            x = tape.mul_const(x, &keep)?;
        }
        let stats = NormStats {
            mean,
            std,
            eps: cfg.revin_eps,
            affine_gamma: tape.value(gamma).data().to_vec(),
            affine_beta: tape.value(beta).data().to_vec(),
        };

        let patches = tape.gather(x, self.layout.gather_indices(n_ch), &[tokens, cfg.patch_len])?;
        let e = tape.matmul(patches, p.var(self.embed_w))?;
        let e = tape.add_row(e, p.var(self.embed_b))?;
        let pos_idx: Vec<usize> = (0..tokens).flat_map(|r| ((r % n) * cfg.d)..((r % n) * cfg.d + cfg.d)).collect();
        let pos = tape.gather(p.var(self.pos), pos_idx, &[tokens, cfg.d])?;
        let mut h_tok = tape.add(e, pos)?;

        let mut hidden = tape.leaf(Tensor::zeros(&[tokens, cfg.d]));
        let mut out = TapeForward {
            stats,
            x_e: Vec::new(),
            scores: Vec::new(),
            gate_vars: Vec::new(),
            gates: Vec::new(),
            epsilon: Vec::new(),
            attention: Vec::new(),
            l_tem: Vec::new(),
            l_cha: Vec::new(),
            repr: h_tok,
            output: h_tok,
        };
        for layer in &self.layers {
            let msa = layer.attn.forward(tape, p, h_tok, n_ch, n, mode.is_training())?;
            let (rv, gm, eps) = self.router.route(tape, p, hidden, msa.out, mode, cfg.top_k)?;
            hidden = rv.hidden;
            let (l_tem, l_cha) = balance::balance_on_tape(tape, rv.scores, n_ch, n, cfg.top_k)?;
            h_tok = layer.moe.forward(tape, p, msa.out, rv.gates, &gm)?;
            out.x_e.push(msa.out);
            out.attention.push(msa.weights);
            out.scores.push(rv.scores);
            out.gate_vars.push(rv.gates);
            out.gates.push(gm);
            out.epsilon.push(eps);
            out.l_tem.push(l_tem);
            out.l_cha.push(l_cha);
        }
        out.repr = h_tok;
        out.output = self.head_tape(tape, p, h_tok, &out.stats)?;
        Ok(out)
    }

    fn denormalize_tape(&self, tape: &mut Tape, p: &Bound, y: Var, stats: &NormStats) -> Result<Var> {
        let (rows, cols) = (tape.value(y).rows(), tape.value(y).cols());
        let neg_beta = tape.scale(p.var(self.revin_beta), -1.0);
        let y = tape.add_col(y, neg_beta)?;
        let y = tape.div_col(y, p.var(self.revin_gamma))?;
        let mut scale = Tensor::zeros(&[rows, cols]);
        let mut shift = Tensor::zeros(&[rows, cols]);
        for c in 0..rows {
            scale.row_mut(c).fill(stats.std[c] + stats.eps);
            shift.row_mut(c).fill(stats.mean[c]);
        }
        let y = tape.mul_const(y, &scale)?;
        tape.add_const(y, &shift)
    }

    fn head_tape(&self, tape: &mut Tape, p: &Bound, v: Var, stats: &NormStats) -> Result<Var> {
        let cfg = &self.config;
        let (n_ch, n, d) = (cfg.channels, self.layout.n, cfg.d);
        match self.head {
            Head::Forecast { w, b } => {
                let flat = tape.reshape(v, &[n_ch, n * d])?;
                let y = tape.matmul(flat, p.var(w))?;
                let y = tape.add_row(y, p.var(b))?;
                self.denormalize_tape(tape, p, y, stats)
            }
            Head::Reconstruct { w, b } => {
                let rec = tape.matmul(v, p.var(w))?;
                let rec = tape.add_row(rec, p.var(b))?;
                let pl = cfg.patch_len;
                let padded = self.layout.padded_len();
                let idx = (0..n_ch * n)
                    .flat_map(|r| {
                        let (c, q) = (r / n, r % n);
                        (0..pl).map(move |j| c * padded + q * cfg.stride + j)
                    })
                    .collect();
                let tiled = tape.scatter(vec![(rec, idx)], &[n_ch, padded])?;
                let t_len = cfg.lookback;
                let keep = (0..n_ch).flat_map(|c| (0..t_len).map(move |t| c * padded + t)).collect();
                let cut = tape.gather(tiled, keep, &[n_ch, t_len])?;
                let cover = self.coverage();
                let mut inv = Tensor::zeros(&[n_ch, t_len]);
                for c in 0..n_ch {
                    for (t, &k) in cover.iter().enumerate() {
                        inv.set(c, t, 1.0 / k as f64);
                    }
                }
                let y = tape.mul_const(cut, &inv)?;
                self.denormalize_tape(tape, p, y, stats)
            }
            Head::Classify { w, b } => {
                let pooled = tape.mean_rows(v);
                let y = tape.matmul(pooled, p.var(w))?;
                tape.add_row(y, p.var(b))
            }
        }
    }

    /// Number of patches covering each time step of the lookback window.
    fn coverage(&self) -> Vec<usize> {
        let mut cover = vec![0usize; self.config.lookback];
        for q in 0..self.layout.n {
            for j in 0..self.config.patch_len {
                let t = q * self.config.stride + j;
                if t < cover.len() {
                    cover[t] += 1;
                }
            }
        }
        cover
    }

    /// Task loss plus the weighted, layer-summed balance losses.
    pub fn loss_tape(&self, tape: &mut Tape, fw: &TapeForward, target: &Target) -> Result<LossVars> {
        let task = self.task_loss_tape(tape, fw.output, target)?;
        let l_tem = sum_vars(tape, &fw.l_tem)?;
        let l_cha = sum_vars(tape, &fw.l_cha)?;
        let wt = tape.scale(l_tem, self.config.alpha);
        let wc = tape.scale(l_cha, self.config.beta);
        let bal = tape.add(wt, wc)?;
        let total = tape.add(task, bal)?;
        Ok(LossVars {
            task,
            l_tem,
            l_cha,
            total,
        })
    }

    fn task_loss_tape(&self, tape: &mut Tape, output: Var, target: &Target) -> Result<Var> {
        let out_shape = tape.value(output).shape().to_vec();
        match (target, self.config.task) {
            (Target::Class(label), Task::Classify { num_classes }) => {
                if *label >= num_classes {
                    return Err(Error::Shape(format!("label {label} with {num_classes} classes")));
                }
                let ls = tape.log_softmax_rows(output)?;
                let mut onehot = Tensor::zeros(&[1, num_classes]);
                onehot.set(0, *label, 1.0);
                let picked = tape.mul_const(ls, &onehot)?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -1.0))
            }
            (Target::Series(values), task) if !matches!(task, Task::Classify { .. }) => {
                if values.shape() != out_shape.as_slice() {
                    return Err(Error::Shape(format!("target {:?} vs output {:?}", values.shape(), out_shape)));
                }
                let y = tape.leaf(values.clone());
                let diff = tape.sub(output, y)?;
                let e = self.pointwise(tape, diff);
                Ok(tape.mean(e))
            }
            (Target::Masked { values, mask }, task) if !matches!(task, Task::Classify { .. }) => {
                if values.shape() != out_shape.as_slice() || mask.len() != values.len() {
                    return Err(Error::Shape(format!("masked target {:?} vs output {:?}", values.shape(), out_shape)));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(Error::Data("masked target selects no points".into()));
                }
                let mut clean = values.clone();
                let mut w = Tensor::zeros(values.shape());
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        w.data_mut()[j] = 1.0 / count as f64;
                    } else {
                        clean.data_mut()[j] = 0.0;
                    }
                }
                let y = tape.leaf(clean);
                let diff = tape.sub(output, y)?;
                let e = self.pointwise(tape, diff);
                let e = tape.mul_const(e, &w)?;
                Ok(tape.sum(e))
            }
            (t, task) => Err(Error::Shape(format!("target {t:?} does not fit task {}", task.name()))),
        }
    }

    fn pointwise(&self, tape: &mut Tape, diff: Var) -> Var {
        match self.config.loss {
            TaskLoss::L2 => tape.square(diff),
            TaskLoss::L1 => tape.abs(diff),
        }
    }

    /// Forward pass returning every per-layer value. `seed` drives routing
    /// noise in training modes.
    pub fn forward(&self, batch: &SeriesBatch, mode: Mode, seed: u64) -> Result<ForwardTrace> {
        let mut tape = Tape::new(seed);
        let p = self.params.bind(&mut tape);
        let fw = self.forward_tape(&mut tape, &p, batch, mode)?;
        self.trace_from(&tape, &fw)
    }

    fn trace_from(&self, tape: &Tape, fw: &TapeForward) -> Result<ForwardTrace> {
        let (n_ch, n) = (self.config.channels, self.layout.n);
        let tok = |v: Var| TokenTensor::unflatten(tape.value(v).clone(), n_ch, n);
        let scores: Vec<Tensor> = fw.scores.iter().map(|&s| tape.value(s).clone()).collect();
        let balance = scores
            .iter()
            .map(|s| balance::balance_terms(s, n_ch, n, self.config.top_k, self.config.alpha, self.config.beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace {
            stats: fw.stats.clone(),
            x_e: fw.x_e.iter().map(|&v| tok(v)).collect::<Result<_>>()?,
            scores,
            gates: fw.gates.clone(),
            balance,
            attention: fw
                .attention
                .iter()
                .map(|ws| ws.iter().map(|&w| tape.value(w).clone()).collect())
                .collect(),
            repr: tok(fw.repr)?,
            output: tape.value(fw.output).clone(),
        })
    }

    /// Forward plus loss; returns the trace and the loss breakdown.
    pub fn evaluate(&self, batch: &SeriesBatch, target: &Target, mode: Mode, seed: u64) -> Result<(ForwardTrace, LossBreakdown)> {
        let mut tape = Tape::new(seed);
        let p = self.params.bind(&mut tape);
        let fw = self.forward_tape(&mut tape, &p, batch, mode)?;
        let lv = self.loss_tape(&mut tape, &fw, target)?;
        let val = |v: Var| tape.value(v).data()[0];
        let lb = LossBreakdown {
            task: val(lv.task),
            l_tem: val(lv.l_tem),
            l_cha: val(lv.l_cha),
            total: val(lv.total),
        };
        Ok((self.trace_from(&tape, &fw)?, lb))
    }

    /// Inference output: `N x horizon` forecast, `N x T` reconstruction or
    /// `1 x C` logits.
    pub fn predict(&self, batch: &SeriesBatch) -> Result<Tensor> {
        Ok(self.forward(batch, Mode::Inference, 0)?.output)
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let first = it.next().ok_or_else(|| Error::Config("model has no layers".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Loss recomputed from trace values, independent of the tape.
pub fn total_loss(trace: &ForwardTrace, target: &Target, config: &ModelConfig) -> Result<LossBreakdown> {
    let out = &trace.output;
    let point = |e: f64| match config.loss {
        TaskLoss::L2 => e * e,
        TaskLoss::L1 => e.abs(),
    };
    let task = match target {
        Target::Class(label) => {
            let row = out.row(0);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row.get(*label).copied().ok_or_else(|| Error::Shape(format!("label {label}")))?
        }
        Target::Series(values) => {
            if values.shape() != out.shape() {
                return Err(Error::Shape(format!("target {:?} vs output {:?}", values.shape(), out.shape())));
            }
            out.data().iter().zip(values.data()).map(|(a, b)| point(a - b)).sum::<f64>() / out.len() as f64
        }
        Target::Masked { values, mask } => {
            if values.shape() != out.shape() || mask.len() != out.len() {
                return Err(Error::Shape("masked target shape".into()));
            }
            let count = mask.iter().filter(|&&m| m).count() as f64;
            out.data()
                .iter()
                .zip(values.data())
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| point(a - b))
                .sum::<f64>()
                / count
        }
    };
    let l_tem: f64 = trace.balance.iter().map(BalanceTerms::l_tem).sum();
    let l_cha: f64 = trace.balance.iter().map(BalanceTerms::l_cha).sum();
    let bal = balance::combine(l_tem, l_cha, config.alpha, config.beta)?;
    Ok(LossBreakdown {
        task,
        l_tem,
        l_cha,
        total: task + bal,
    })
}
