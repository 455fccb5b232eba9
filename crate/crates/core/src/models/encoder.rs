use rand_chacha::ChaCha8Rng;

use super::config::{EncPreKind, ModelConfig, Normalize};
use super::layers::{FeedForward, LayerNorm, Linear, LstmCell};
use crate::attention::{add_positional_encoding, key_padding_mask, AttentionConfig, Mask, MaskMode, MultiHeadAttention};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv_out_len, ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

/// Shortest input the speech front end accepts.
pub const MIN_FRAMES: usize = 4;

/// Sequence length after the two stride-2 stages, for every front end.
pub fn subsample_length(n: usize) -> Result<usize> {
    if n < MIN_FRAMES {
        return Err(Error::InputTooShort(format!(
            "{n} frames; the front end needs at least {MIN_FRAMES}"
        )));
    }
    let once = conv_out_len(n, 3, 2, 1).expect("n >= 4");
    Ok(conv_out_len(once, 3, 2, 1).expect("positive length"))
}

/// Zeroes rows `valid..` of a matrix so padding behaves like conv padding.
pub fn mask_rows(g: &mut Graph, x: Var, valid: usize) -> Result<Var> {
    let (n, d) = match g.shape(x) {
        [n, d] => (*n, *d),
        s => return Err(dim_err!("row mask needs a matrix, got {:?}", s)),
    };
    if valid >= n {
        return Ok(x);
    }
    let mut m = vec![0.0; n * d];
    m[..valid * d].iter_mut().for_each(|v| *v = 1.0);
    let m = g.constant(Tensor::new(vec![n, d], m)?);
    g.mul(x, m)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, patch: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvLayer {
            w: store.add_weight(format!("{name}.w"), patch, c_out, rng),
            b: store.add_zeros(format!("{name}.b"), &[c_out]),
        }
    }
}

/// Speech front end: subsamples `n × feat_dim` features to `n_sub × d_att`
/// and adds positional encodings.
#[derive(Clone, Debug)]
pub struct SpeechEncPre {
    kind: EncPreKind,
    feat_dim: usize,
    channels: usize,
    conv1: ConvLayer,
    conv2: ConvLayer,
    out: Linear,
    dropout: f64,
}

impl SpeechEncPre {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (f, c) = (cfg.feat_dim, cfg.d_att);
        let (conv1, conv2, out_in) = match cfg.enc_pre {
            EncPreKind::Conv1d | EncPreKind::Vgg => (
                ConvLayer::new(store, "enc_pre.conv1", 3 * f, c, rng),
                ConvLayer::new(store, "enc_pre.conv2", 3 * c, c, rng),
                c,
            ),
            EncPreKind::Conv2d => {
                let f_sub = f.div_ceil(2).div_ceil(2);
                (
                    ConvLayer::new(store, "enc_pre.conv1", 9, c, rng),
                    ConvLayer::new(store, "enc_pre.conv2", 9 * c, c, rng),
                    f_sub * c,
                )
            }
        };
        let out = Linear::new(store, "enc_pre.out", out_in, cfg.d_att, true, rng);
        SpeechEncPre {
            kind: cfg.enc_pre,
            feat_dim: f,
            channels: c,
            conv1,
            conv2,
            out,
            dropout: cfg.dropout_rate,
        }
    }

    /// `x[n × feat_dim]` whose rows `valid..` are padding. Returns the
    /// subsampled sequence (padded rows zeroed) and its valid length.
    pub fn forward(&self, g: &mut Graph, x: Var, valid: usize) -> Result<(Var, usize)> {
        let (n, f) = match g.shape(x) {
            [n, f] => (*n, *f),
            s => return Err(dim_err!("features must be a matrix, got {:?}", s)),
        };
        if f != self.feat_dim {
            return Err(dim_err!("features have {f} dims, model expects {}", self.feat_dim));
        }
        if valid > n {
            return Err(dim_err!("valid length {valid} exceeds {n} frames"));
        }
        let sub = subsample_length(valid)?;
        let first = conv_out_len(valid, 3, 2, 1).expect("valid >= 4");
        let x = mask_rows(g, x, valid)?;
        let c = self.channels;
        let h = match self.kind {
            EncPreKind::Conv1d => {
                let h = g.conv1d(x, g.p(self.conv1.w), g.p(self.conv1.b), 3, 2, 1)?;
                let h = g.relu(h)?;
                let h = mask_rows(g, h, first)?;
                let h = g.conv1d(h, g.p(self.conv2.w), g.p(self.conv2.b), 3, 2, 1)?;
                g.relu(h)?
            }
            EncPreKind::Vgg => {
                let h = g.conv1d(x, g.p(self.conv1.w), g.p(self.conv1.b), 3, 1, 1)?;
                let h = g.relu(h)?;
                let h = mask_rows(g, h, valid)?;
                let h = g.max_pool_time(h, 2)?;
                let h = g.conv1d(h, g.p(self.conv2.w), g.p(self.conv2.b), 3, 1, 1)?;
                let h = g.relu(h)?;
                let h = mask_rows(g, h, first)?;
                g.max_pool_time(h, 2)?
            }
            EncPreKind::Conv2d => {
                let img = g.reshape(x, vec![n, f, 1])?;
                let geom1 = ConvGeom {
                    h: n,
                    w: f,
                    c_in: 1,
                    c_out: c,
                    kh: 3,
                    kw: 3,
                    sh: 2,
                    sw: 2,
                    ph: 1,
                    pw: 1,
                };
                let h = g.conv2d(img, g.p(self.conv1.w), g.p(self.conv1.b), geom1)?;
                let h = g.relu(h)?;
                let (h1, w1) = (geom1.out_h(), geom1.out_w());
                let flat = g.reshape(h, vec![h1, w1 * c])?;
                let flat = mask_rows(g, flat, first)?;
                let h = g.reshape(flat, vec![h1, w1, c])?;
                let geom2 = ConvGeom {
                    h: h1,
                    w: w1,
                    c_in: c,
                    ..geom1
                };
                let h = g.conv2d(h, g.p(self.conv2.w), g.p(self.conv2.b), geom2)?;
                let h = g.relu(h)?;
                g.reshape(h, vec![geom2.out_h(), geom2.out_w() * c])?
            }
        };
        let h = mask_rows(g, h, sub)?;
        let h = self.out.forward(g, h)?;
        let h = add_positional_encoding(g, h)?;
        let active = g.is_training();
        let h = g.dropout(h, self.dropout, active)?;
        Ok((mask_rows(g, h, sub)?, sub))
    }
}

/// Pre-norm, post-norm or bare residual around a sublayer.
pub(crate) fn residual<F>(g: &mut Graph, x: Var, norm: Option<&LayerNorm>, mode: Normalize, dropout: f64, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let active = g.is_training();
    match (mode, norm) {
        (Normalize::Pre, Some(ln)) => {
            let xn = ln.forward(g, x)?;
            let y = f(g, xn)?;
            let y = g.dropout(y, dropout, active)?;
            g.add(x, y)
        }
        (Normalize::Post, Some(ln)) => {
            let y = f(g, x)?;
            let y = g.dropout(y, dropout, active)?;
            let s = g.add(x, y)?;
            ln.forward(g, s)
        }
        _ => {
            let y = f(g, x)?;
            let y = g.dropout(y, dropout, active)?;
            g.add(x, y)
        }
    }
}

pub(crate) fn norm_opt(store: &mut ParamStore, name: &str, d: usize, mode: Normalize) -> Option<LayerNorm> {
    (mode != Normalize::None).then(|| LayerNorm::new(store, name, d))
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_att: Option<LayerNorm>,
    pub att: MultiHeadAttention,
    pub ln_ff: Option<LayerNorm>,
    pub ff: FeedForward,
}

/// Stack of self-attention + feed-forward blocks.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
    normalize: Normalize,
    dropout: f64,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_att;
        let att_cfg = AttentionConfig {
            d_att: d,
            d_head: cfg.d_head,
            mask_mode: MaskMode::None,
        };
        let mut layers = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let name = format!("{prefix}.{i}");
            layers.push(EncoderLayer {
                ln_att: norm_opt(store, &format!("{name}.ln_att"), d, cfg.normalize),
                att: MultiHeadAttention::new(store, &format!("{name}.att"), att_cfg, rng)?,
                ln_ff: norm_opt(store, &format!("{name}.ln_ff"), d, cfg.normalize),
                ff: FeedForward::new(store, &name, d, cfg.d_ff, rng),
            });
        }
        let final_norm =
            (cfg.normalize == Normalize::Pre && cfg.enc_layers > 0).then(|| LayerNorm::new(store, &format!("{prefix}.ln_out"), d));
        Ok(TransformerEncoder {
            layers,
            final_norm,
            normalize: cfg.normalize,
            dropout: cfg.dropout_rate,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, valid: usize) -> Result<Var> {
        let n = g.shape(x)[0];
        let mask = if valid < n {
            Mask::Allowed(key_padding_mask(n, n, valid))
        } else {
            Mask::None
        };
        let mut x = x;
        for layer in &self.layers {
            x = residual(g, x, layer.ln_att.as_ref(), self.normalize, self.dropout, |g, h| {
                Ok(layer.att.forward(g, h, h, h, &mask)?.0)
            })?;
            x = residual(g, x, layer.ln_ff.as_ref(), self.normalize, self.dropout, |g, h| {
                layer.ff.forward(g, h, self.dropout)
            })?;
        }
        if let Some(ln) = &self.final_norm {
            x = ln.forward(g, x)?;
        }
        mask_rows(g, x, valid)
    }
}

#[derive(Clone, Debug)]
pub struct BlstmLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    /// `[2u × d_att]`: rows `0..u` read the forward states, `u..2u` the backward.
    pub proj: Linear,
}

/// Bidirectional LSTM stack with a projection back to `d_att` after each layer.
#[derive(Clone, Debug)]
pub struct BlstmEncoder {
    pub layers: Vec<BlstmLayer>,
    dropout: f64,
}

impl BlstmEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, u) = (cfg.d_att, cfg.rnn_units);
        let layers = (0..cfg.enc_layers)
            .map(|i| BlstmLayer {
                fwd: LstmCell::new(store, &format!("{prefix}.{i}.fwd"), d, u, rng),
                bwd: LstmCell::new(store, &format!("{prefix}.{i}.bwd"), d, u, rng),
                proj: Linear::new(store, &format!("{prefix}.{i}.proj"), 2 * u, d, true, rng),
            })
            .collect();
        BlstmEncoder {
            layers,
            dropout: cfg.dropout_rate,
        }
    }

    /// Runs on rows `0..valid`; padded rows of the output are zero.
    pub fn forward(&self, g: &mut Graph, x: Var, valid: usize) -> Result<Var> {
        let (n, d) = match g.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(dim_err!("encoder input must be a matrix, got {:?}", s)),
        };
        let mut h = if valid < n { g.slice_rows(x, 0, valid)? } else { x };
        let active = g.is_training();
        for layer in &self.layers {
            let f = layer.fwd.run(g, h, false)?;
            let b = layer.bwd.run(g, h, true)?;
            let cat = g.concat_cols(&[f, b])?;
            h = layer.proj.forward(g, cat)?;
            h = g.dropout(h, self.dropout, active)?;
        }
        if valid < n {
            let pad = g.constant(Tensor::zeros(&[n - valid, d]));
            h = g.concat_rows(&[h, pad])?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Transformer(TransformerEncoder),
    Blstm(BlstmEncoder),
}

impl EncoderBody {
    pub fn forward(&self, g: &mut Graph, x: Var, valid: usize) -> Result<Var> {
        match self {
            EncoderBody::Transformer(e) => e.forward(g, x, valid),
            EncoderBody::Blstm(e) => e.forward(g, x, valid),
        }
    }
}
