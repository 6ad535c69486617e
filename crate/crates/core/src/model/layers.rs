//! Trainable building blocks recorded on a [`Tape`].

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::key_padding_mask;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Dropout state for one forward pass. Disabled at evaluation time.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_simple_fn(tape.shape(x), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        tape.mul_const(x, Arc::new(mask))
    }
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a))
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Multi-head attention with bias-free projections `W_q, W_k, W_v` and output `W_o`.
#[derive(Debug, Clone)]
pub(crate) struct MultiHeadAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        let mut w = |n: &str| store.add(format!("{name}.{n}"), xavier(rng, dim, dim));
        Self {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            heads,
        }
    }

    /// Queries from `q_in`, keys from `k_in`, values from `v_in`; `valid`
    /// flags which key rows may be attended.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        valid: &[bool],
    ) -> Result<Var> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let wo = tape.param(self.wo);
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(k_in, wk)?;
        let v = tape.matmul(v_in, wv)?;
        let (nq, dim) = tape.shape(q);
        let dk = dim / self.heads;
        let mask = key_padding_mask(nq, valid);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, lo, hi)?,
                    tape.slice_cols(k, lo, hi)?,
                    tape.slice_cols(v, lo, hi)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, mask.as_ref())?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        tape.matmul(joined, wo)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.ff1"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.ff2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.up.ids(), self.down.ids()].concat()
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff: FeedForward::new(store, rng, name, dim, ffn),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    /// Self-attention of the `queries` rows over the full sequence `x`.
    /// Passing `queries == x` gives the ordinary layer; a suffix of `x` gives
    /// the same rows of the ordinary layer's output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        x: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, queries, x, x, valid)?;
        let a = drop.apply(tape, a)?;
        let h = tape.add(queries, a)?;
        let h = self.ln1.forward(tape, h)?;
        let f = self.ff.forward(tape, h)?;
        let f = drop.apply(tape, f)?;
        let h2 = tape.add(h, f)?;
        self.ln2.forward(tape, h2)
    }
}

/// Post-norm transformer decoder layer: self-attention over the queries,
/// cross-attention into memory, feed-forward.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                dim,
                heads,
            ),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                dim,
                heads,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, rng, name, dim, ffn),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
        }
    }

    /// `memory_keys` carries positions, `memory_values` content only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        memory_keys: Var,
        memory_values: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let all = vec![true; tape.shape(x).0];
        let a = self.self_attn.forward(tape, x, x, x, &all)?;
        let a = drop.apply(tape, a)?;
        let h = tape.add(x, a)?;
        let h = self.ln1.forward(tape, h)?;
        let c = self
            .cross_attn
            .forward(tape, h, memory_keys, memory_values, valid)?;
        let c = drop.apply(tape, c)?;
        let h2 = tape.add(h, c)?;
        let h2 = self.ln2.forward(tape, h2)?;
        let f = self.ff.forward(tape, h2)?;
        let f = drop.apply(tape, f)?;
        let h3 = tape.add(h2, f)?;
        self.ln3.forward(tape, h3)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.self_attn.ids(),
            self.ln1.ids(),
            self.cross_attn.ids(),
            self.ln2.ids(),
            self.ff.ids(),
            self.ln3.ids(),
        ]
        .concat()
    }
}

/// One LSTM layer with fused gate weights, gate order `[input, forget, output, cell]`.
#[derive(Debug, Clone)]
pub(crate) struct LstmLayer {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut bias = Array2::zeros((1, 4 * hidden));
        // forget gate starts open
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden])
            .fill(1.0);
        Self {
            wx: store.add(format!("{name}.wx"), xavier(rng, input, 4 * hidden)),
            wh: store.add(format!("{name}.wh"), xavier(rng, hidden, 4 * hidden)),
            bias: store.add(format!("{name}.bias"), bias),
            hidden,
        }
    }

    /// Runs over all rows of `x` from zero state, returning every hidden state.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = self.hidden;
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, b)?;
        let mut h = tape.input(Array2::zeros((1, n)));
        let mut c = tape.input(Array2::zeros((1, n)));
        let mut outs = Vec::with_capacity(tape.shape(x).0);
        for t in 0..tape.shape(x).0 {
            let xt = tape.slice_rows(xw, t, t + 1)?;
            let hw = tape.matmul(h, wh)?;
            let gates = tape.add(xt, hw)?;
            let i = tape.slice_cols(gates, 0, n)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, n, 2 * n)?;
            let f = tape.sigmoid(f);
            let o = tape.slice_cols(gates, 2 * n, 3 * n)?;
            let o = tape.sigmoid(o);
            let g = tape.slice_cols(gates, 3 * n, 4 * n)?;
            let g = tape.tanh(g);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outs.push(h);
        }
        tape.concat_rows(&outs)
    }
}
