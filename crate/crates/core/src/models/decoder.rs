use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Normalize, SrcResidual};
use super::encoder::{norm_opt, residual};
use super::layers::{FeedForward, LayerNorm, LstmCell, LstmState};
use crate::attention::{key_padding_mask, AttentionConfig, AttentionRecord, Mask, MaskMode, MultiHeadAttention, MASK_BIAS};
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Attention maps of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct DecoderLayerRecord {
    /// Absent for the recurrent decoder.
    pub self_att: Option<AttentionRecord>,
    pub src_att: AttentionRecord,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: Option<LayerNorm>,
    pub self_att: MultiHeadAttention,
    pub ln_src: Option<LayerNorm>,
    pub src_att: MultiHeadAttention,
    pub ln_ff: Option<LayerNorm>,
    pub ff: FeedForward,
}

/// Causal self-attention, encoder-decoder attention and feed-forward blocks.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Option<LayerNorm>,
    normalize: Normalize,
    src_residual: SrcResidual,
    dropout: f64,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_att;
        let causal = AttentionConfig {
            d_att: d,
            d_head: cfg.d_head,
            mask_mode: MaskMode::Causal,
        };
        let open = AttentionConfig {
            mask_mode: MaskMode::None,
            ..causal
        };
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let name = format!("{prefix}.{i}");
            layers.push(DecoderLayer {
                ln_self: norm_opt(store, &format!("{name}.ln_self"), d, cfg.normalize),
                self_att: MultiHeadAttention::new(store, &format!("{name}.self_att"), causal, rng)?,
                ln_src: norm_opt(store, &format!("{name}.ln_src"), d, cfg.normalize),
                src_att: MultiHeadAttention::new(store, &format!("{name}.src_att"), open, rng)?,
                ln_ff: norm_opt(store, &format!("{name}.ln_ff"), d, cfg.normalize),
                ff: FeedForward::new(store, &name, d, cfg.d_ff, rng),
            });
        }
        let final_norm = (cfg.normalize == Normalize::Pre).then(|| LayerNorm::new(store, &format!("{prefix}.ln_out"), d));
        Ok(TransformerDecoder {
            layers,
            final_norm,
            normalize: cfg.normalize,
            src_residual: cfg.src_residual,
            dropout: cfg.dropout_rate,
        })
    }

    pub fn forward(&self, g: &mut Graph, y0: Var, x_e: Var, src_valid: usize) -> Result<(Var, Vec<DecoderLayerRecord>)> {
        let (t, n) = (g.shape(y0)[0], g.shape(x_e)[0]);
        if t == 0 {
            return Ok((y0, Vec::new()));
        }
        let src_mask = if src_valid < n {
            Mask::Allowed(key_padding_mask(t, n, src_valid))
        } else {
            Mask::None
        };
        let active = g.is_training();
        let mut y = y0;
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut self_rec = None;
            let y1 = residual(g, y, layer.ln_self.as_ref(), self.normalize, self.dropout, |g, h| {
                let (out, rec) = layer.self_att.forward(g, h, h, h, &Mask::Causal)?;
                self_rec = Some(rec);
                Ok(out)
            })?;
            let base = match self.src_residual {
                SrcResidual::LayerInput => y,
                SrcResidual::SelfAttnOutput => y1,
            };
            let query = match (self.normalize, &layer.ln_src) {
                (Normalize::Pre, Some(ln)) => ln.forward(g, y1)?,
                _ => y1,
            };
            let (src, src_rec) = layer.src_att.forward(g, query, x_e, x_e, &src_mask)?;
            let src = g.dropout(src, self.dropout, active)?;
            let mut y2 = g.add(base, src)?;
            if let (Normalize::Post, Some(ln)) = (self.normalize, &layer.ln_src) {
                y2 = ln.forward(g, y2)?;
            }
            y = residual(g, y2, layer.ln_ff.as_ref(), self.normalize, self.dropout, |g, h| {
                layer.ff.forward(g, h, self.dropout)
            })?;
            records.push(DecoderLayerRecord {
                self_att: self_rec,
                src_att: src_rec,
            });
        }
        if let Some(ln) = &self.final_norm {
            y = ln.forward(g, y)?;
        }
        Ok((y, records))
    }
}

/// Content-based scoring `vᵀ tanh(W_s s + W_h h_u + b)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub w_state: ParamId,
    pub w_enc: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d_state: usize, d_enc: usize, d_att: usize, rng: &mut ChaCha8Rng) -> Self {
        AdditiveAttention {
            w_state: store.add_weight(format!("{prefix}.w_state"), d_state, d_att, rng),
            w_enc: store.add_weight(format!("{prefix}.w_enc"), d_enc, d_att, rng),
            b: store.add_zeros(format!("{prefix}.b"), &[d_att]),
            v: store.add_weight(format!("{prefix}.v"), d_att, 1, rng),
        }
    }

    /// Encoder-side term `X_e·W_h + b`, shared by all steps.
    pub fn project_keys(&self, g: &mut Graph, x_e: Var) -> Result<Var> {
        let k = g.matmul(x_e, g.p(self.w_enc))?;
        g.add_bias(k, g.p(self.b))
    }

    /// Returns `(weights [1 × n], logits [1 × n], context [1 × d_enc])`.
    pub fn attend(&self, g: &mut Graph, state: Var, keys: Var, x_e: Var, allowed: Option<&Tensor>) -> Result<(Var, Var, Var)> {
        let n = g.shape(keys)[0];
        let q = g.matmul(state, g.p(self.w_state))?;
        let q = g.reshape(q, vec![g.shape(keys)[1]])?;
        let e = g.add_bias(keys, q)?;
        let e = g.tanh(e)?;
        let scores = g.matmul(e, g.p(self.v))?;
        let logits = g.reshape(scores, vec![1, n])?;
        let weights = match allowed {
            Some(m) => {
                let bias = g.constant(m.map(|a| if a > 0.0 { 0.0 } else { MASK_BIAS }));
                let z = g.add(logits, bias)?;
                let w = g.softmax(z)?;
                let keep = g.constant(m.clone());
                g.mul(w, keep)?
            }
            None => g.softmax(logits)?,
        };
        let context = g.matmul(weights, x_e)?;
        Ok((weights, logits, context))
    }
}

/// Unidirectional LSTM decoder with additive encoder-decoder attention.
#[derive(Clone, Debug)]
pub struct LstmDecoder {
    pub att: AdditiveAttention,
    pub cells: Vec<LstmCell>,
    dropout: f64,
}

impl LstmDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_att;
        let att = AdditiveAttention::new(store, &format!("{prefix}.att"), d, d, d, rng);
        let cells = (0..cfg.dec_layers)
            .map(|i| {
                let d_in = if i == 0 { 2 * d } else { d };
                LstmCell::new(store, &format!("{prefix}.{i}.lstm"), d_in, d, rng)
            })
            .collect();
        LstmDecoder {
            att,
            cells,
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, g: &mut Graph, y0: Var, x_e: Var, src_valid: usize) -> Result<(Var, Vec<DecoderLayerRecord>)> {
        let (t, n) = (g.shape(y0)[0], g.shape(x_e)[0]);
        if t == 0 {
            return Ok((y0, Vec::new()));
        }
        let allowed = (src_valid < n).then(|| key_padding_mask(1, n, src_valid));
        let keys = self.att.project_keys(g, x_e)?;
        let d = self.cells[0].units;
        let mut states: Vec<LstmState> = self.cells.iter().map(|c| c.zero_state(g)).collect();
        let active = g.is_training();
        let (mut outs, mut weights, mut logits) = (Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t));
        for step in 0..t {
            let top = states.last().expect("at least one layer").h;
            let (w, z, ctx) = self.att.attend(g, top, keys, x_e, allowed.as_ref())?;
            let emb = g.slice_rows(y0, step, 1)?;
            let mut input = g.concat_cols(&[emb, ctx])?;
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(g, input, *state)?;
                input = g.dropout(state.h, self.dropout, active)?;
            }
            outs.push(input);
            weights.push(w);
            logits.push(z);
        }
        debug_assert_eq!(g.shape(outs[0])[1], d);
        let y = g.concat_rows(&outs)?;
        let record = AttentionRecord {
            weights: vec![g.concat_rows(&weights)?],
            logits: vec![g.concat_rows(&logits)?],
        };
        Ok((
            y,
            vec![DecoderLayerRecord {
                self_att: None,
                src_att: record,
            }],
        ))
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Transformer(TransformerDecoder),
    Lstm(LstmDecoder),
}

impl DecoderBody {
    /// `y0[t × d_att]` attends `x_e[n × d_att]`, of which rows `src_valid..`
    /// are padding.
    pub fn forward(&self, g: &mut Graph, y0: Var, x_e: Var, src_valid: usize) -> Result<(Var, Vec<DecoderLayerRecord>)> {
        if g.shape(y0).len() != 2 || g.shape(x_e).len() != 2 || g.shape(y0)[1] != g.shape(x_e)[1] {
            return Err(dim_err!(
                "decoder input {:?} and encoder output {:?} disagree",
                g.shape(y0),
                g.shape(x_e)
            ));
        }
        if src_valid == 0 {
            return Err(dim_err!("decoder needs a non-empty encoder output"));
        }
        match self {
            DecoderBody::Transformer(d) => d.forward(g, y0, x_e, src_valid),
            DecoderBody::Lstm(d) => d.forward(g, y0, x_e, src_valid),
        }
    }
}
