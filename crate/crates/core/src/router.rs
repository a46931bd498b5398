//! Recurrent noisy-gating router.
//!
//! One gated recurrent cell is shared by every MoE layer; the recurrence
//! runs over depth, carrying `h` from layer to layer. Its output feeds two
//! linear heads giving a per-token Gaussian over expert scores.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Whether scores are resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `H = mu`; no noise is drawn.
    Inference,
    /// `H = mu + eps * sigma` with `eps ~ N(0, 1)` drawn from the tape.
    Training,
    /// Training arithmetic with `eps` forced to zero.
    TrainingNoiseless,
}

impl Mode {
    pub fn is_training(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
    pub d: usize,
    pub num_experts: usize,
}

/// Hidden state of the recurrence, `(N*n) x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub hidden: Tensor,
}

impl RouterState {
    pub fn zeros(tokens: usize, d: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[tokens, d]),
        }
    }
}

/// Router outputs for one layer.
#[derive(Clone, Debug)]
pub struct RouteDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub epsilon: Option<Tensor>,
    pub scores: Tensor,
}

/// Tape handles of a routing step.
#[derive(Clone, Copy, Debug)]
pub struct RouteVars {
    pub hidden: Var,
    pub mu: Var,
    pub sigma: Var,
    pub scores: Var,
    /// Dense `(N*n) x N_r` gate matrix, zero off the selected experts.
    pub gates: Var,
}

impl RouterParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, num_experts: usize, rng: &mut R) -> Self {
        let mut lin = |name: &str, rows: usize, cols: usize| store.add_uniform(format!("router.{name}"), &[rows, cols], d, rng);
        let w_update = lin("w_update", d, d);
        let u_update = lin("u_update", d, d);
        let b_update = lin("b_update", 1, d);
        let w_reset = lin("w_reset", d, d);
        let u_reset = lin("u_reset", d, d);
        let b_reset = lin("b_reset", 1, d);
        let w_cand = lin("w_cand", d, d);
        let u_cand = lin("u_cand", d, d);
        let b_cand = lin("b_cand", 1, d);
        let w_mu = lin("w_mu", d, num_experts);
        let b_mu = lin("b_mu", 1, num_experts);
        let w_sigma = lin("w_sigma", d, num_experts);
        let b_sigma = lin("b_sigma", 1, num_experts);
        Self {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
            d,
            num_experts,
        }
    }

    fn gate(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
        let xw = tape.matmul(x, p.var(w))?;
        let hu = tape.matmul(h, p.var(u))?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, p.var(b))
    }

    /// One recurrent step: `z`, `r` gates, candidate `tanh(xW + (r*h)U + b)`,
    /// `h' = (1 - z) * cand + z * h`. The output equals the new state.
    pub fn rng_step(&self, tape: &mut Tape, p: &Bound, h: Var, x: Var) -> Result<Var> {
        let (th, tx) = (tape.value(h), tape.value(x));
        if th.shape() != tx.shape() || tx.cols() != self.d {
            return Err(Error::Shape(format!(
                "router state {:?} vs input {:?} (d = {})",
                th.shape(),
                tx.shape(),
                self.d
            )));
        }
        let zs = self.gate(tape, p, x, h, self.w_update, self.u_update, self.b_update)?;
        let z = tape.sigmoid(zs);
        let rs = self.gate(tape, p, x, h, self.w_reset, self.u_reset, self.b_reset)?;
        let r = tape.sigmoid(rs);
        let rh = tape.mul(r, h)?;
        let cs = self.gate(tape, p, x, rh, self.w_cand, self.u_cand, self.b_cand)?;
        let cand = tape.tanh(cs);
        // cand + z * (h - cand)
        let diff = tape.sub(h, cand)?;
        let zd = tape.mul(z, diff)?;
        tape.add(cand, zd)
    }

    /// `mu = o W_mu + b_mu`, `sigma = softplus(o W_sigma + b_sigma)`.
    pub fn gaussian_heads(&self, tape: &mut Tape, p: &Bound, o: Var) -> Result<(Var, Var)> {
        let m = tape.matmul(o, p.var(self.w_mu))?;
        let mu = tape.add_row(m, p.var(self.b_mu))?;
        let s = tape.matmul(o, p.var(self.w_sigma))?;
        let s = tape.add_row(s, p.var(self.b_sigma))?;
        Ok((mu, tape.softplus(s)))
    }

    /// Full routing for one layer given the previous hidden state.
    pub fn route(&self, tape: &mut Tape, p: &Bound, h: Var, x: Var, mode: Mode, k: usize) -> Result<(RouteVars, GateMatrix, Option<Tensor>)> {
        let hidden = self.rng_step(tape, p, h, x)?;
        let (mu, sigma) = self.gaussian_heads(tape, p, hidden)?;
        let (scores, eps) = noisy_scores(tape, mu, sigma, mode)?;
        let (gates, gm) = build_gates(tape, scores, k)?;
        Ok((
            RouteVars {
                hidden,
                mu,
                sigma,
                scores,
                gates,
            },
            gm,
            eps,
        ))
    }

    /// Tape-free recurrent step.
    pub fn step(&self, store: &ParamStore, state: &RouterState, x: &Tensor) -> Result<(Tensor, RouterState)> {
        let mut tape = Tape::new(0);
        let p = store.bind(&mut tape);
        let h = tape.leaf(state.hidden.clone());
        let xv = tape.leaf(x.clone());
        let o = self.rng_step(&mut tape, &p, h, xv)?;
        let out = tape.value(o).clone();
        Ok((out.clone(), RouterState { hidden: out }))
    }

    /// Tape-free distribution for router output `o`, scores per `mode`.
    pub fn distribution(&self, store: &ParamStore, o: &Tensor, mode: Mode, seed: u64) -> Result<RouteDistribution> {
        let mut tape = Tape::new(seed);
        let p = store.bind(&mut tape);
        let ov = tape.leaf(o.clone());
        let (mu, sigma) = self.gaussian_heads(&mut tape, &p, ov)?;
        let (h, epsilon) = noisy_scores(&mut tape, mu, sigma, mode)?;
        Ok(RouteDistribution {
            mu: tape.value(mu).clone(),
            sigma: tape.value(sigma).clone(),
            epsilon,
            scores: tape.value(h).clone(),
        })
    }
}

/// Scores per mode; returns the noise actually applied.
pub fn noisy_scores(tape: &mut Tape, mu: Var, sigma: Var, mode: Mode) -> Result<(Var, Option<Tensor>)> {
    let shape = tape.value(mu).shape().to_vec();
    let eps = match mode {
        Mode::Inference => return Ok((mu, None)),
        Mode::Training => tape.sample_normal(&shape),
        Mode::TrainingNoiseless => Tensor::zeros(&shape),
    };
    let noise = tape.mul_const(sigma, &eps)?;
    Ok((tape.add(mu, noise)?, Some(eps)))
}

/// Keeps the `k` largest entries (ties to the lower index), the rest `-inf`.
pub fn keep_topk(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!("top-k with k = {k} over {} experts", v.len())));
    }
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in numerics::top_k_indices(v, k) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Per-token selected experts (ascending) and their normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub num_experts: usize,
}

impl GateMatrix {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn k(&self) -> usize {
        self.selected.first().map_or(0, Vec::len)
    }

    /// Dense `tokens x N_r` weights.
    pub fn dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.tokens(), self.num_experts]);
        for (r, (sel, w)) in self.selected.iter().zip(&self.weights).enumerate() {
            for (&e, &g) in sel.iter().zip(w) {
                t.set(r, e, g);
            }
        }
        t
    }

    /// Fraction of token assignments each expert receives.
    pub fn expert_share(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_experts];
        let mut total = 0.0f64;
        for sel in &self.selected {
            for &e in sel {
                counts[e] += 1.0;
                total += 1.0;
            }
        }
        counts.iter().map(|c| c / total.max(1.0)).collect()
    }
}

/// Gate construction on the tape: `softmax(keep_topk(H))` per row.
pub fn build_gates(tape: &mut Tape, scores: Var, k: usize) -> Result<(Var, GateMatrix)> {
    let h = tape.value(scores).clone();
    if !h.all_finite() {
        return Err(Error::Data("non-finite routing scores".into()));
    }
    let (rows, ne) = (h.rows(), h.cols());
    let mut mask = Tensor::zeros(&[rows, ne]);
    let mut selected = Vec::with_capacity(rows);
    for r in 0..rows {
        let kept = keep_topk(h.row(r), k)?;
        let sel: Vec<usize> = (0..ne).filter(|&i| kept[i] != f64::NEG_INFINITY).collect();
        for i in 0..ne {
            if kept[i] == f64::NEG_INFINITY {
                mask.set(r, i, f64::NEG_INFINITY);
            }
        }
        selected.push(sel);
    }
    let masked = tape.add_const(scores, &mask)?;
    let g = tape.softmax_rows(masked)?;
    let gv = tape.value(g);
    let weights = selected
        .iter()
        .enumerate()
        .map(|(r, sel)| sel.iter().map(|&i| gv.get(r, i)).collect())
        .collect();
    Ok((
        g,
        GateMatrix {
            selected,
            weights,
            num_experts: ne,
        },
    ))
}

/// Tape-free gate construction.
pub fn gates_from_scores(scores: &Tensor, k: usize) -> Result<GateMatrix> {
    let mut tape = Tape::new(0);
    let h = tape.leaf(scores.clone());
    Ok(build_gates(&mut tape, h, k)?.1)
}
