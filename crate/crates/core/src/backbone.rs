//! Channel-independent multi-head self-attention with a post-norm residual:
//! `LayerNorm(x + MSA(x))`, attention restricted to each channel's tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::preprocess::TokenTensor;

pub const LN_EPS: f64 = 1e-5;

/// Parameters of one attention block. The query/key/value matrices are
/// `d x d`; head `h` uses columns `h*dh .. (h+1)*dh`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
    pub d: usize,
    pub dropout: f64,
}

/// Output of an attention block on the tape.
pub struct MsaOutput {
    pub out: Var,
    /// `weights[c * heads + h]` is the `n x n` attention matrix of channel
    /// `c`, head `h`.
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("heads ({heads}) must divide d ({d})")));
        }
        Ok(Self {
            wq: store.add_uniform(format!("{prefix}.wq"), &[d, d], d, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), &[d, d], d, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), &[d, d], d, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), &[d, d], d, rng),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[1, d], 1.0)),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[1, d])),
            heads,
            d,
            dropout: 0.0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `x` is the `(N*n) x d` channel-major token matrix.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, channels: usize, n: usize, training: bool) -> Result<MsaOutput> {
        let (rows, d) = (tape.value(x).rows(), tape.value(x).cols());
        if rows != channels * n || d != self.d {
            return Err(Error::Shape(format!(
                "attention input {rows}x{d}, expected {}x{}",
                channels * n,
                self.d
            )));
        }
        let q = tape.matmul(x, p.var(self.wq))?;
        let k = tape.matmul(x, p.var(self.wk))?;
        let v = tape.matmul(x, p.var(self.wv))?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(channels * self.heads);
        let mut parts = Vec::with_capacity(channels * self.heads);
        for c in 0..channels {
            for h in 0..self.heads {
                let qc = tape.block(q, c * n, n, h * dh, dh)?;
                let kc = tape.block(k, c * n, n, h * dh, dh)?;
                let vc = tape.block(v, c * n, n, h * dh, dh)?;
                let kt = tape.transpose(kc);
                let raw = tape.matmul(qc, kt)?;
                let scores = tape.scale(raw, scale);
                let w = tape.softmax_rows(scores)?;
                weights.push(w);
                let w = if training { tape.dropout(w, self.dropout)? } else { w };
                let ctx = tape.matmul(w, vc)?;
                let idx = (0..n)
                    .flat_map(|i| (0..dh).map(move |j| (c * n + i) * d + h * dh + j))
                    .collect();
                parts.push((ctx, idx));
            }
        }
        let heads = tape.scatter(parts, &[rows, d])?;
        let attn = tape.matmul(heads, p.var(self.wo))?;
        let res = tape.add(x, attn)?;
        let out = tape.layer_norm_rows(res, p.var(self.ln_gamma), p.var(self.ln_beta), LN_EPS)?;
        Ok(MsaOutput { out, weights })
    }

    /// Tape-free evaluation of the block.
    pub fn msa_block(&self, store: &ParamStore, x: &TokenTensor) -> Result<TokenTensor> {
        let (channels, n) = (x.channels(), x.patches());
        let mut tape = Tape::new(0);
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.flatten());
        let out = self.forward(&mut tape, &p, xv, channels, n, false)?;
        TokenTensor::unflatten(tape.value(out.out).clone(), channels, n)
    }

    /// Attention matrices indexed `[channel][head]`, each `n x n`.
    pub fn attention_weights(&self, store: &ParamStore, x: &TokenTensor) -> Result<Vec<Vec<Tensor>>> {
        let (channels, n) = (x.channels(), x.patches());
        let mut tape = Tape::new(0);
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.flatten());
        let out = self.forward(&mut tape, &p, xv, channels, n, false)?;
        Ok(out
            .weights
            .chunks(self.heads)
            .map(|hs| hs.iter().map(|&w| tape.value(w).clone()).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AttentionParams::new(&mut store, "attn", d, heads, &mut rng).unwrap();
        (store, a)
    }

    fn tokens(n_ch: usize, n: usize, d: usize, seed: u64) -> TokenTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_ch * n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenTensor::new(Tensor::new(vec![n_ch, n, d], data).unwrap()).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let (store, a) = layer(4, 2, 1);
        let x = tokens(2, 1, 4, 2);
        let w = a.attention_weights(&store, &x).unwrap();
        assert!(w.iter().flatten().all(|m| m.data() == [1.0]));
        let y = a.msa_block(&store, &x).unwrap();
        // LayerNorm(x + x Wv Wo)
        let xf = x.flatten();
        let vo = xf.matmul(store.get(a.wv)).unwrap().matmul(store.get(a.wo)).unwrap();
        for r in 0..2 {
            let s: Vec<f64> = xf.row(r).iter().zip(vo.row(r)).map(|(a, b)| a + b).collect();
            let expect = crate::numerics::layer_norm(&s, &[1.0; 4], &[0.0; 4], LN_EPS);
            for (e, g) in expect.iter().zip(y.token(r, 0)) {
                assert!((e - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let (store, a) = layer(4, 2, 3);
        let row = [0.3, -0.1, 0.8, 0.2];
        let x = TokenTensor::new(Tensor::new(vec![1, 3, 4], row.repeat(3)).unwrap()).unwrap();
        for m in a.attention_weights(&store, &x).unwrap().into_iter().flatten() {
            assert!(m.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn hand_computed_two_tokens() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AttentionParams::new(&mut store, "a", 2, 1, &mut rng).unwrap();
        for id in [a.wq, a.wk, a.wv, a.wo] {
            *store.get_mut(id) = Tensor::identity(2);
        }
        let x = TokenTensor::new(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let w = &a.attention_weights(&store, &x).unwrap()[0][0];
        // scores: q.k / sqrt(2) -> [[1/sqrt2, 0], [0, 1/sqrt2]]
        let s = 1.0 / 2f64.sqrt();
        let w00 = s.exp() / (s.exp() + 1.0);
        assert!((w.get(0, 0) - w00).abs() < 1e-12);
        assert!((w.get(0, 1) - (1.0 - w00)).abs() < 1e-12);
        assert!((w.get(1, 1) - w00).abs() < 1e-12);
        // token 0: x + ctx = [1 + w00, 1 - w00] -> layer norm -> [+a, -a]
        let y = a.msa_block(&store, &x).unwrap();
        let expect = crate::numerics::layer_norm(&[1.0 + w00, 1.0 - w00], &[1.0; 2], &[0.0; 2], LN_EPS);
        assert!((y.token(0, 0)[0] - expect[0]).abs() < 1e-12);
        assert!((y.token(0, 0)[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn rows_are_stochastic() {
        let (store, a) = layer(8, 4, 5);
        let x = tokens(3, 5, 8, 6);
        for m in a.attention_weights(&store, &x).unwrap().into_iter().flatten() {
            for r in 0..5 {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(m.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_output_projection_is_plain_layer_norm() {
        let (mut store, a) = layer(4, 2, 7);
        *store.get_mut(a.wo) = Tensor::zeros(&[4, 4]);
        let x = tokens(2, 3, 4, 8);
        let y = a.msa_block(&store, &x).unwrap();
        for c in 0..2 {
            for q in 0..3 {
                let e = crate::numerics::layer_norm(x.token(c, q), &[1.0; 4], &[0.0; 4], LN_EPS);
                assert_eq!(e.as_slice(), y.token(c, q));
            }
        }
    }

    #[test]
    fn channels_do_not_mix() {
        let (store, a) = layer(4, 2, 9);
        let x = tokens(3, 4, 4, 10);
        let base = a.msa_block(&store, &x).unwrap();
        let mut z = x.tokens.clone();
        z.data_mut()[16..32].iter_mut().for_each(|v| *v = 0.0);
        let changed = a.msa_block(&store, &TokenTensor::new(z).unwrap()).unwrap();
        for c in [0, 2] {
            for q in 0..4 {
                assert_eq!(base.token(c, q), changed.token(c, q));
            }
        }
        assert_ne!(base.token(1, 0), changed.token(1, 0));

        // permuting channels permutes outputs
        let perm = [2usize, 0, 1];
        let mut pd = Vec::new();
        for &c in &perm {
            for q in 0..4 {
                pd.extend_from_slice(x.token(c, q));
            }
        }
        let px = TokenTensor::new(Tensor::new(vec![3, 4, 4], pd).unwrap()).unwrap();
        let py = a.msa_block(&store, &px).unwrap();
        for (i, &c) in perm.iter().enumerate() {
            for q in 0..4 {
                assert_eq!(py.token(i, q), base.token(c, q));
            }
        }
    }
}
