//! Temporal and channel load-balancing losses over the raw routing scores.
//!
//! Scores arrive as the channel-major `(N*n) x N_r` matrix. Each token's row
//! is softmaxed over experts. The channel loss groups tokens sharing a patch
//! position, the temporal loss groups tokens sharing a channel; within each
//! group `f_i` is the scaled top-k selection count of expert `i` and `P_i`
//! its mean probability, and the loss sums `f_i * P_i`.
//!
//! `f` is a selection count and carries no gradient; gradients reach the
//! scores through `P` only.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{self, Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.01;

/// Per-group pieces of one balance loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTerms {
    /// Softmaxed scores per group, each `N_r x group_size`.
    pub softmax: Vec<Tensor>,
    /// `N_r x groups` selection frequencies.
    pub freq: Tensor,
    /// `N_r x groups` mean probabilities.
    pub prob: Tensor,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceTerms {
    pub channel: AxisTerms,
    pub temporal: AxisTerms,
    pub alpha: f64,
    pub beta: f64,
    pub l_bal: f64,
}

impl BalanceTerms {
    pub fn l_cha(&self) -> f64 {
        self.channel.loss
    }

    pub fn l_tem(&self) -> f64 {
        self.temporal.loss
    }
}

#[derive(Clone, Copy, Debug)]
enum Axis {
    /// groups = patch positions, members = channels
    Channel,
    /// groups = channels, members = patch positions
    Temporal,
}

fn check(scores: &Tensor, channels: usize, n: usize, k: usize) -> Result<()> {
    if scores.rows() != channels * n || channels == 0 || n == 0 {
        return Err(shape_err(format!(
            "scores have {} rows, expected {channels} x {n}",
            scores.rows()
        )));
    }
    if k == 0 || k > scores.cols() {
        return Err(Error::Config(format!("k = {k} with {} experts", scores.cols())));
    }
    Ok(())
}

fn row_softmax(scores: &Tensor) -> Result<Tensor> {
    let mut s = scores.clone();
    for r in 0..s.rows() {
        let v = numerics::softmax(s.row(r))?;
        s.row_mut(r).copy_from_slice(&v);
    }
    Ok(s)
}

/// Per-token weights `w[tok, i] = f_{i, group(tok)} / group_size` such that
/// the loss is `sum(S * w)`, plus the per-group terms.
fn axis_terms(soft: &Tensor, channels: usize, n: usize, k: usize, axis: Axis) -> (Tensor, AxisTerms) {
    let ne = soft.cols();
    let (groups, members) = match axis {
        Axis::Channel => (n, channels),
        Axis::Temporal => (channels, n),
    };
    let token = |g: usize, m: usize| match axis {
        Axis::Channel => m * n + g,
        Axis::Temporal => g * n + m,
    };
    let scale = ne as f64 / (k * members) as f64;
    let mut freq = Tensor::zeros(&[ne, groups]);
    let mut prob = Tensor::zeros(&[ne, groups]);
    let mut groups_soft = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut sg = Tensor::zeros(&[ne, members]);
        for m in 0..members {
            let row = soft.row(token(g, m));
            for i in numerics::top_k_indices(row, k) {
                freq.set(i, g, freq.get(i, g) + scale);
            }
            for (i, &v) in row.iter().enumerate() {
                sg.set(i, m, v);
                prob.set(i, g, prob.get(i, g) + v / members as f64);
            }
        }
        groups_soft.push(sg);
    }
    let mut weights = Tensor::zeros(&[soft.rows(), ne]);
    let mut loss = 0.0;
    for g in 0..groups {
        for i in 0..ne {
            loss += freq.get(i, g) * prob.get(i, g);
        }
        for m in 0..members {
            let t = token(g, m);
            for i in 0..ne {
                weights.set(t, i, freq.get(i, g) / members as f64);
            }
        }
    }
    (
        weights,
        AxisTerms {
            softmax: groups_soft,
            freq,
            prob,
            loss,
        },
    )
}

pub fn channel_balance_loss(scores: &Tensor, channels: usize, n: usize, k: usize) -> Result<(f64, AxisTerms)> {
    check(scores, channels, n, k)?;
    let (_, terms) = axis_terms(&row_softmax(scores)?, channels, n, k, Axis::Channel);
    Ok((terms.loss, terms))
}

pub fn temporal_balance_loss(scores: &Tensor, channels: usize, n: usize, k: usize) -> Result<(f64, AxisTerms)> {
    check(scores, channels, n, k)?;
    let (_, terms) = axis_terms(&row_softmax(scores)?, channels, n, k, Axis::Temporal);
    Ok((terms.loss, terms))
}

/// `alpha * l_tem + beta * l_cha`.
pub fn combine(l_tem: f64, l_cha: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "balance weights must be non-negative (alpha = {alpha}, beta = {beta})"
        )));
    }
    Ok(alpha * l_tem + beta * l_cha)
}

pub fn balance_terms(scores: &Tensor, channels: usize, n: usize, k: usize, alpha: f64, beta: f64) -> Result<BalanceTerms> {
    let (l_cha, channel) = channel_balance_loss(scores, channels, n, k)?;
    let (l_tem, temporal) = temporal_balance_loss(scores, channels, n, k)?;
    Ok(BalanceTerms {
        channel,
        temporal,
        alpha,
        beta,
        l_bal: combine(l_tem, l_cha, alpha, beta)?,
    })
}

/// Differentiable `(l_tem, l_cha)` for the scores recorded at `scores`.
pub fn balance_on_tape(tape: &mut Tape, scores: Var, channels: usize, n: usize, k: usize) -> Result<(Var, Var)> {
    check(tape.value(scores), channels, n, k)?;
    let soft = tape.softmax_rows(scores)?;
    let sv = tape.value(soft).clone();
    let (w_tem, _) = axis_terms(&sv, channels, n, k, Axis::Temporal);
    let (w_cha, _) = axis_terms(&sv, channels, n, k, Axis::Channel);
    let t = tape.mul_const(soft, &w_tem)?;
    let l_tem = tape.sum(t);
    let c = tape.mul_const(soft, &w_cha)?;
    let l_cha = tape.sum(c);
    Ok((l_tem, l_cha))
}
