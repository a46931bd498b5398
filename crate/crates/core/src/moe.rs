//! Shared and routed feed-forward experts with gated aggregation:
//! `V = LayerNorm(x + sum(shared(x)) + sum_i G_i * routed_i(x))`.

use rand::Rng;

use crate::backbone::LN_EPS;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::preprocess::TokenTensor;
use crate::router::GateMatrix;

/// `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Expert {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d, d_ff], d, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), &[1, d_ff], d, rng),
            w2: store.add_uniform(format!("{prefix}.w2"), &[d_ff, d], d_ff, rng),
            b2: store.add_uniform(format!("{prefix}.b2"), &[1, d], d_ff, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w1))?;
        let h = tape.add_row(h, p.var(self.b1))?;
        let h = tape.relu(h);
        let y = tape.matmul(h, p.var(self.w2))?;
        tape.add_row(y, p.var(self.b2))
    }

    /// Tape-free evaluation on a `tokens x d` matrix.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(0);
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub shared: Vec<Expert>,
    pub routed: Vec<Expert>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub d: usize,
    pub d_ff: usize,
}

impl ExpertBank {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, num_shared: usize, num_routed: usize, rng: &mut R) -> Result<Self> {
        if num_routed == 0 {
            return Err(Error::Config("at least one routed expert is required".into()));
        }
        let shared = (0..num_shared)
            .map(|i| Expert::new(store, &format!("{prefix}.shared{i}"), d, d_ff, rng))
            .collect();
        let routed = (0..num_routed)
            .map(|i| Expert::new(store, &format!("{prefix}.routed{i}"), d, d_ff, rng))
            .collect();
        Ok(Self {
            shared,
            routed,
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[1, d], 1.0)),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[1, d])),
            d,
            d_ff,
        })
    }

    fn check(&self, gm: &GateMatrix, tokens: usize) -> Result<()> {
        if gm.num_experts != self.routed.len() {
            return Err(Error::Shape(format!(
                "gates address {} experts, bank holds {}",
                gm.num_experts,
                self.routed.len()
            )));
        }
        if gm.tokens() != tokens {
            return Err(Error::Shape(format!("gates for {} tokens, input has {tokens}", gm.tokens())));
        }
        Ok(())
    }

    fn finish(&self, tape: &mut Tape, p: &Bound, x: Var, shared: Vec<Var>, routed: Var) -> Result<Var> {
        let mut u = routed;
        for s in shared {
            u = tape.add(s, u)?;
        }
        let res = tape.add(x, u)?;
        tape.layer_norm_rows(res, p.var(self.ln_gamma), p.var(self.ln_beta), LN_EPS)
    }

    /// Sparse dispatch: each routed expert sees only the tokens that
    /// selected it. `gates` is the dense `tokens x N_r` gate matrix on the tape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, gates: Var, gm: &GateMatrix) -> Result<Var> {
        let (m, d) = (tape.value(x).rows(), tape.value(x).cols());
        self.check(gm, m)?;
        let ne = self.routed.len();
        let shared = self
            .shared
            .iter()
            .map(|e| e.forward(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = Vec::new();
        for (i, expert) in self.routed.iter().enumerate() {
            let toks: Vec<usize> = (0..m).filter(|&t| gm.selected[t].contains(&i)).collect();
            if toks.is_empty() {
                continue;
            }
            let xi = tape.gather_rows(x, &toks)?;
            let yi = expert.forward(tape, p, xi)?;
            let gi = tape.gather(gates, toks.iter().map(|&t| t * ne + i).collect(), &[toks.len(), 1])?;
            let weighted = tape.mul_col(yi, gi)?;
            let idx = toks.iter().flat_map(|&t| (t * d)..(t * d + d)).collect();
            parts.push((weighted, idx));
        }
        let routed = tape.scatter(parts, &[m, d])?;
        self.finish(tape, p, x, shared, routed)
    }

    /// Evaluates every routed expert on every token and weights by the
    /// full (mostly zero) gate matrix.
    pub fn forward_dense(&self, tape: &mut Tape, p: &Bound, x: Var, gates: Var) -> Result<Var> {
        let m = tape.value(x).rows();
        let shared = self
            .shared
            .iter()
            .map(|e| e.forward(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let ne = self.routed.len();
        let mut routed: Option<Var> = None;
        for (i, expert) in self.routed.iter().enumerate() {
            let y = expert.forward(tape, p, x)?;
            let g = tape.gather(gates, (0..m).map(|t| t * ne + i).collect(), &[m, 1])?;
            let w = tape.mul_col(y, g)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, w)?,
                None => w,
            });
        }
        let routed = routed.ok_or_else(|| Error::Config("empty expert bank".into()))?;
        self.finish(tape, p, x, shared, routed)
    }

    /// Tape-free layer evaluation.
    pub fn moe_layer_forward(&self, store: &ParamStore, x: &TokenTensor, gates: &GateMatrix) -> Result<TokenTensor> {
        let mut tape = Tape::new(0);
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.flatten());
        let g = tape.leaf(gates.dense());
        let y = self.forward(&mut tape, &p, xv, g, gates)?;
        TokenTensor::unflatten(tape.value(y).clone(), x.channels(), x.patches())
    }
}
