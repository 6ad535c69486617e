//! The joint detection/anticipation network.
//!
//! Three stages share one tape:
//!
//! 1. **Past encoding.** The feature window is projected to the model width,
//!    summed with sinusoidal positions and run through a transformer encoder
//!    (or the LSTM baseline). A linear layer classifies every past row.
//! 2. **Anticipation.** `1 + N_f` learnable queries, offset by their positions,
//!    are decoded against the encoded past. Row 0 stands for the upcoming
//!    (current) frame, row `k` for `k` frames after it.
//! 3. **Online prediction.** The projected current frame is decoded, with the
//!    *same* decoder, against `[past ; anticipation]`. The updated embedding is
//!    appended to the past and classified by the local/global head: a causal
//!    temporal convolution and an encoder layer whose outputs are concatenated
//!    and fed to a linear layer. The online logits are read at the last row.
//!
//! Padded window rows never influence any output: attention masks hide them
//! as keys, and the encoded past is zeroed on them.

mod attention;
pub mod checkpoint;
mod config;
mod layers;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{
    attention_weights, key_padding_mask, scaled_dot_attention, PositionalEncoding,
};
pub use config::{HeadMode, ModelConfig, OnlineHead, PastBlock};
pub use layers::Dropout;

use crate::autograd::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::memory::FeatureWindow;
use attention::PositionCache;
use layers::{DecoderLayer, EncoderLayer, Linear, LstmLayer};

/// Logits of every classification layer for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    /// `(T × output_dim)`, one row per window row.
    pub past_logits: Array2<f64>,
    /// `(N_q × output_dim)`, row `k` targets `k` frames after the last past frame + 1.
    pub anticipation_logits: Array2<f64>,
    /// `output_dim` logits for the current frame.
    pub online_logits: Array1<f64>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub f_prime: Var,
    pub past_logits: Var,
    pub anticipation_embeddings: Var,
    pub anticipation_logits: Var,
    pub online_logits: Var,
    pub updated_current: Var,
}

/// Intermediate products of the online stage.
#[derive(Debug, Clone, Copy)]
pub struct OnlineVars {
    pub online_logits: Var,
    pub updated_current: Var,
    /// `[past ; anticipation]`, the decoder memory.
    pub pseudo_full_memory: Var,
    /// `[past ; updated current]`, the head input.
    pub past_and_present: Var,
}

#[derive(Debug, Clone)]
enum PastLayers {
    Transformer(Vec<EncoderLayer>),
    Lstm(Vec<LstmLayer>),
}

#[derive(Debug, Clone)]
enum HeadLayers {
    Fused {
        tcn: Linear,
        encoders: Vec<EncoderLayer>,
        classifier: Linear,
    },
    Fc(Linear),
}

#[derive(Debug, Clone)]
struct Layout {
    input_proj: Linear,
    past: PastLayers,
    past_cls: Linear,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    ant_cls: Linear,
    head: HeadLayers,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (h, k, f, heads) = (cfg.hidden_dim, cfg.output_dim(), cfg.ffn_dim, cfg.num_heads);
        let input_proj = Linear::new(store, rng, "input_proj", cfg.feature_dim, h);
        let past = match cfg.past_block {
            PastBlock::Transformer => PastLayers::Transformer(
                (0..cfg.num_encoder_layers)
                    .map(|i| EncoderLayer::new(store, rng, &format!("past.enc{i}"), h, heads, f))
                    .collect(),
            ),
            PastBlock::Lstm => PastLayers::Lstm(
                (0..cfg.lstm_layers)
                    .map(|i| LstmLayer::new(store, rng, &format!("past.lstm{i}"), h, h))
                    .collect(),
            ),
        };
        let past_cls = Linear::new(store, rng, "past_cls", h, k);
        let queries = store.add(
            "anticipation.queries",
            layers::xavier(rng, cfg.num_queries(), h),
        );
        let decoder = (0..cfg.num_decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("decoder.layer{i}"), h, heads, f))
            .collect();
        let ant_cls = Linear::new(store, rng, "anticipation_cls", h, k);
        let head = match cfg.online_head {
            OnlineHead::Fused => HeadLayers::Fused {
                tcn: Linear::new(store, rng, "head.tcn", cfg.tcn_kernel_size * h, h),
                encoders: (0..cfg.num_head_encoder_layers)
                    .map(|i| EncoderLayer::new(store, rng, &format!("head.enc{i}"), h, heads, f))
                    .collect(),
                classifier: Linear::new(store, rng, "head.fc", 2 * h, k),
            },
            OnlineHead::Fc => HeadLayers::Fc(Linear::new(store, rng, "online_fc", h, k)),
        };
        Self {
            input_proj,
            past,
            past_cls,
            queries,
            decoder,
            ant_cls,
            head,
        }
    }
}

#[derive(Debug)]
pub struct Joadaa {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: PositionCache,
}

impl Clone for Joadaa {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            positions: PositionCache::new(self.cfg.hidden_dim, 64),
        }
    }
}

fn row_weights(valid: &[bool]) -> Arc<Vec<f64>> {
    Arc::new(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
}

impl Joadaa {
    /// Fresh model with seeded initialisation.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&cfg, &mut params, &mut rng);
        params.round_to_f32();
        let positions = PositionCache::new(cfg.hidden_dim, 64);
        Ok(Self {
            cfg,
            params,
            layout,
            positions,
        })
    }

    /// Model with the given parameters; names and shapes must match `cfg`.
    pub fn from_params(cfg: ModelConfig, params: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::format(
                "parameters",
                format!(
                    "expected {} tensors, found {}",
                    model.params.len(),
                    params.len()
                ),
            ));
        }
        for (name, value) in params {
            let id = model.params.by_name(name).ok_or_else(|| {
                Error::format("parameters", format!("unexpected tensor `{name}`"))
            })?;
            if model.params.get(id).dim() != value.dim() {
                return Err(Error::shape(
                    "parameter tensor",
                    model.params.get(id).dim(),
                    value.dim(),
                ));
            }
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of the decoder shared by anticipation and online prediction.
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .decoder
            .iter()
            .flat_map(DecoderLayer::ids)
            .collect()
    }

    fn positions(&self, tape: &mut Tape, start: usize, count: usize) -> Var {
        tape.input(self.positions.rows(start, count))
    }

    /// Encodes the window: `F' = Encoder(proj(F) + PE)`, zeroed on padded rows,
    /// plus per-row past logits. Returns `(F', past_logits)`.
    pub fn past_encode(
        &self,
        tape: &mut Tape,
        window: &FeatureWindow,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        if window.dim() != self.cfg.feature_dim {
            return Err(Error::shape(
                "past_encode feature dim",
                self.cfg.feature_dim,
                window.dim(),
            ));
        }
        let valid = window.valid();
        if !valid.iter().any(|v| *v) {
            return Err(Error::EmptyBank);
        }
        let t = window.len();
        let f = tape.input(window.features().clone());
        let x = self.layout.input_proj.forward(tape, f)?;
        let encoded = match &self.layout.past {
            PastLayers::Transformer(layers) => {
                let pe = self.positions(tape, 0, t);
                let mut x = tape.add(x, pe)?;
                for layer in layers {
                    x = layer.forward(tape, x, x, valid, drop)?;
                }
                x
            }
            PastLayers::Lstm(layers) => {
                // Padding is a prefix; the recurrence starts at the first real row.
                let pad = window.num_padded();
                let mut h = tape.slice_rows(x, pad, t)?;
                for layer in layers {
                    h = layer.forward(tape, h)?;
                }
                if pad > 0 {
                    let zeros = tape.input(Array2::zeros((pad, self.cfg.hidden_dim)));
                    tape.concat_rows(&[zeros, h])?
                } else {
                    h
                }
            }
        };
        let f_prime = tape.scale_rows(encoded, row_weights(valid))?;
        let logits = self.layout.past_cls.forward(tape, f_prime)?;
        Ok((f_prime, logits))
    }

    /// Runs the shared decoder on `queries` against `memory`, whose rows sit
    /// at positions `0..rows(memory)`.
    fn decode(
        &self,
        tape: &mut Tape,
        queries: Var,
        memory: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let rows = tape.shape(memory).0;
        let pe = self.positions(tape, 0, rows);
        let keys = tape.add(memory, pe)?;
        let mut x = queries;
        for layer in &self.layout.decoder {
            x = layer.forward(tape, x, keys, memory, valid, drop)?;
        }
        Ok(x)
    }

    /// Decodes the anticipation queries against the encoded past.
    /// Returns `(embeddings, logits)`, both with `N_q` rows.
    pub fn anticipate(
        &self,
        tape: &mut Tape,
        f_prime: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let (t, h) = tape.shape(f_prime);
        if h != self.cfg.hidden_dim {
            return Err(Error::shape("anticipate model dim", self.cfg.hidden_dim, h));
        }
        if valid.len() != t {
            return Err(Error::shape("anticipate mask", t, valid.len()));
        }
        let lq = tape.param(self.layout.queries);
        let pe = self.positions(tape, t, self.cfg.num_queries());
        let q = tape.add(lq, pe)?;
        let emb = self.decode(tape, q, f_prime, valid, drop)?;
        let logits = self.layout.ant_cls.forward(tape, emb)?;
        Ok((emb, logits))
    }

    /// Updates the current frame with past and pseudo-future context and
    /// classifies it.
    pub fn online_predict(
        &self,
        tape: &mut Tape,
        f_prime: Var,
        valid: &[bool],
        anticipation: Var,
        current: &[f64],
        drop: &mut Dropout,
    ) -> Result<OnlineVars> {
        let (t, _) = tape.shape(f_prime);
        if current.len() != self.cfg.feature_dim {
            return Err(Error::shape(
                "online_predict current frame",
                self.cfg.feature_dim,
                current.len(),
            ));
        }
        if tape.shape(anticipation).1 != tape.shape(f_prime).1 {
            return Err(Error::shape(
                "online_predict anticipation",
                tape.shape(f_prime),
                tape.shape(anticipation),
            ));
        }
        let nq = tape.shape(anticipation).0;

        let cur =
            tape.input(Array2::from_shape_vec((1, current.len()), current.to_vec()).expect("row"));
        let cur = self.layout.input_proj.forward(tape, cur)?;
        let pe = self.positions(tape, t, 1);
        let cur = tape.add(cur, pe)?;

        let memory = tape.concat_rows(&[f_prime, anticipation])?;
        let mut memory_valid = valid.to_vec();
        memory_valid.resize(t + nq, true);
        let updated = self.decode(tape, cur, memory, &memory_valid, drop)?;

        let seq = tape.concat_rows(&[f_prime, updated])?;
        let mut seq_valid = valid.to_vec();
        seq_valid.push(true);
        let online_logits = match &self.layout.head {
            HeadLayers::Fused { .. } => self.head_last_row(tape, seq, &seq_valid, drop)?,
            HeadLayers::Fc(fc) => fc.forward(tape, updated)?,
        };
        Ok(OnlineVars {
            online_logits,
            updated_current: updated,
            pseudo_full_memory: memory,
            past_and_present: seq,
        })
    }

    fn fused_parts(&self) -> Result<(&Linear, &[EncoderLayer], &Linear)> {
        match &self.layout.head {
            HeadLayers::Fused {
                tcn,
                encoders,
                classifier,
            } => Ok((tcn, encoders, classifier)),
            HeadLayers::Fc(_) => Err(Error::Config("model was built with the FC head".into())),
        }
    }

    /// Local/global head over a whole sequence, `(T' × output_dim)`.
    ///
    /// Local branch: causal temporal convolution (left zero padding) with GELU.
    /// Global branch: encoder layer(s) over the sequence. Padded rows are zeroed
    /// before both branches and hidden from attention.
    pub fn local_global_head(
        &self,
        tape: &mut Tape,
        seq: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let (tcn, encoders, classifier) = self.fused_parts()?;
        if tape.shape(seq).0 == 0 || valid.len() != tape.shape(seq).0 {
            return Err(Error::shape(
                "local_global_head",
                tape.shape(seq).0,
                valid.len(),
            ));
        }
        let z = tape.scale_rows(seq, row_weights(valid))?;
        let local = self.local_branch(tape, tcn, z)?;
        let mut global = z;
        for layer in encoders {
            global = layer.forward(tape, global, global, valid, drop)?;
        }
        let both = tape.concat_cols(&[local, global])?;
        classifier.forward(tape, both)
    }

    fn local_branch(&self, tape: &mut Tape, tcn: &Linear, z: Var) -> Result<Var> {
        let unfolded = tape.causal_unfold(z, self.cfg.tcn_kernel_size);
        let local = tcn.forward(tape, unfolded)?;
        Ok(tape.gelu(local))
    }

    /// Last row of [`Self::local_global_head`], computed without the rows
    /// nobody reads.
    fn head_last_row(
        &self,
        tape: &mut Tape,
        seq: Var,
        valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let (tcn, encoders, classifier) = self.fused_parts()?;
        let n = tape.shape(seq).0;
        let z = tape.scale_rows(seq, row_weights(valid))?;
        let k = self.cfg.tcn_kernel_size;
        let recent = tape.slice_rows(z, n.saturating_sub(k), n)?;
        let local = self.local_branch(tape, tcn, recent)?;
        let rows = tape.shape(local).0;
        let local = tape.slice_rows(local, rows - 1, rows)?;

        let mut global = z;
        for (i, layer) in encoders.iter().enumerate() {
            if i + 1 == encoders.len() {
                let last = tape.slice_rows(global, n - 1, n)?;
                global = layer.forward(tape, last, global, valid, drop)?;
            } else {
                global = layer.forward(tape, global, global, valid, drop)?;
            }
        }
        if encoders.is_empty() {
            global = tape.slice_rows(global, n - 1, n)?;
        }
        let both = tape.concat_cols(&[local, global])?;
        classifier.forward(tape, both)
    }

    /// Full forward pass for one time step: `window` holds the frames before
    /// the current one, `current` the current frame.
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &FeatureWindow,
        current: &[f64],
        drop: &mut Dropout,
    ) -> Result<ForwardVars> {
        let (f_prime, past_logits) = self.past_encode(tape, window, drop)?;
        let (emb, ant_logits) = self.anticipate(tape, f_prime, window.valid(), drop)?;
        let online = self.online_predict(tape, f_prime, window.valid(), emb, current, drop)?;
        Ok(ForwardVars {
            f_prime,
            past_logits,
            anticipation_embeddings: emb,
            anticipation_logits: ant_logits,
            online_logits: online.online_logits,
            updated_current: online.updated_current,
        })
    }

    /// Inference without dropout.
    pub fn predict(&self, window: &FeatureWindow, current: &[f64]) -> Result<PredictionBundle> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, window, current, &mut Dropout::disabled())?;
        Ok(PredictionBundle {
            past_logits: tape.value(vars.past_logits).clone(),
            anticipation_logits: tape.value(vars.anticipation_logits).clone(),
            online_logits: tape.value(vars.online_logits).row(0).to_owned(),
        })
    }
}

/// Logits to probabilities, row by row.
pub fn classify(logits: &Array2<f64>, mode: HeadMode) -> Array2<f64> {
    match mode {
        HeadMode::Sigmoid => logits.mapv(sigmoid),
        HeadMode::Softmax => {
            let mut out = logits.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests;
