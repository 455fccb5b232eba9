use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::asr::build_bodies;
use super::config::{ModelConfig, Task};
use super::decoder::{DecoderBody, DecoderLayerRecord};
use super::encoder::EncoderBody;
use super::layers::{LayerNorm, Linear};
use crate::attention::scaled_positional_encoding;
use crate::data::SOS_EOS;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Decoder steps needed for `frames` targets at reduction factor `r`.
pub fn decoder_steps(frames: usize, r: usize) -> usize {
    frames.div_ceil(r)
}

/// Repeats the final frame until the row count is a multiple of `r`.
pub fn pad_to_reduction(feats: &Tensor, r: usize) -> Result<Tensor> {
    let (t, f) = (feats.rows(), feats.cols());
    if t == 0 {
        return Err(dim_err!("cannot pad an empty target"));
    }
    let steps = decoder_steps(t, r);
    let mut data = feats.data().to_vec();
    let last = feats.row(t - 1).to_vec();
    for _ in t..steps * r {
        data.extend_from_slice(&last);
    }
    Tensor::new(vec![steps * r, f], data)
}

/// Frame-level bottleneck in front of the decoder.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub layers: Vec<Linear>,
    pub proj: Linear,
    pub dropout: f64,
    pub dropout_at_inference: bool,
}

impl Prenet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = &cfg.tts;
        let layers = (0..t.prenet_layers)
            .map(|i| {
                let d_in = if i == 0 { cfg.feat_dim } else { t.prenet_units };
                Linear::new(store, &format!("prenet.{i}"), d_in, t.prenet_units, true, rng)
            })
            .collect();
        Prenet {
            layers,
            proj: Linear::new(store, "prenet.proj", t.prenet_units, cfg.d_att, true, rng),
            dropout: t.prenet_dropout,
            dropout_at_inference: t.prenet_dropout_at_inference,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let active = g.is_training() || self.dropout_at_inference;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            h = g.relu(h)?;
            h = g.dropout(h, self.dropout, active)?;
        }
        self.proj.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct PostnetLayer {
    w: ParamId,
    b: ParamId,
    norm: Option<LayerNorm>,
}

/// Residual convolutional refiner over the whole predicted sequence.
#[derive(Clone, Debug)]
pub struct Postnet {
    layers: Vec<PostnetLayer>,
    kernel: usize,
    dropout: f64,
}

impl Postnet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = &cfg.tts;
        let (n, k, c, f) = (t.postnet_layers, t.postnet_kernel, t.postnet_channels, cfg.feat_dim);
        let layers = (0..n)
            .map(|i| {
                let c_in = if i == 0 { f } else { c };
                let c_out = if i + 1 == n { f } else { c };
                PostnetLayer {
                    w: store.add_weight(format!("postnet.{i}.w"), k * c_in, c_out, rng),
                    b: store.add_zeros(format!("postnet.{i}.b"), &[c_out]),
                    norm: (t.postnet_layer_norm && i + 1 < n).then(|| LayerNorm::new(store, &format!("postnet.{i}.ln"), c_out)),
                }
            })
            .collect();
        Postnet {
            layers,
            kernel: k,
            dropout: cfg.dropout_rate,
        }
    }

    /// Index of the final (linear) convolution's weight.
    pub fn final_weight(&self) -> Option<ParamId> {
        self.layers.last().map(|l| l.w)
    }

    /// `coarse + Postnet(coarse)`.
    pub fn refine(&self, g: &mut Graph, coarse: Var) -> Result<Var> {
        if self.layers.is_empty() {
            return Ok(coarse);
        }
        let active = g.is_training();
        let mut h = coarse;
        for (i, layer) in self.layers.iter().enumerate() {
            h = g.conv1d(h, g.p(layer.w), g.p(layer.b), self.kernel, 1, self.kernel / 2)?;
            if i + 1 < self.layers.len() {
                if let Some(ln) = &layer.norm {
                    h = ln.forward(g, h)?;
                }
                h = g.tanh(h)?;
                h = g.dropout(h, self.dropout, active)?;
            }
        }
        g.add(coarse, h)
    }
}

/// Teacher-forced TTS outputs.
#[derive(Clone, Debug)]
pub struct TtsOutputs {
    /// `[steps·r × feat_dim]` before the Postnet.
    pub coarse: Var,
    /// `[steps·r × feat_dim]` after the Postnet.
    pub refined: Var,
    /// `[steps × 1]` stop-token logits, one per decoder step.
    pub eos_logits: Var,
    /// Target padded to `steps·r` frames.
    pub target: Tensor,
    /// Number of true target frames.
    pub frames: usize,
    pub steps: usize,
    pub records: Vec<DecoderLayerRecord>,
}

impl TtsOutputs {
    /// Stop labels per decoder step: 1 on the step holding the final frame.
    pub fn eos_labels(&self) -> Vec<f64> {
        (0..self.steps).map(|s| if s + 1 == self.steps { 1.0 } else { 0.0 }).collect()
    }
}

/// Transformer (or recurrent) text-to-feature model.
#[derive(Clone, Debug)]
pub struct TtsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub enc_alpha: ParamId,
    pub encoder: EncoderBody,
    pub prenet: Prenet,
    pub dec_alpha: ParamId,
    pub decoder: DecoderBody,
    pub feat_out: Linear,
    pub eos_out: Linear,
    pub postnet: Postnet,
}

impl TtsModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.task != Task::Tts {
            return Err(Error::Config("TTS model needs a TTS config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let store = &mut params;
        let (d, f, r) = (config.d_att, config.feat_dim, config.tts.reduction_factor);
        let embed = store.add_weight("enc_pre.embed", config.vocab_size, d, &mut rng);
        let enc_alpha = store.add_ones("enc_pre.alpha", &[1]);
        let (encoder, decoder) = build_bodies(store, &config, &mut rng)?;
        let prenet = Prenet::new(store, &config, &mut rng);
        let dec_alpha = store.add_ones("dec_pre.alpha", &[1]);
        let feat_out = Linear::new(store, "dec_post.feat", d, f * r, true, &mut rng);
        let eos_out = Linear::new(store, "dec_post.eos", d, 1, true, &mut rng);
        let postnet = Postnet::new(store, &config, &mut rng);
        Ok(TtsModel {
            config,
            params,
            embed,
            enc_alpha,
            encoder,
            prenet,
            dec_alpha,
            decoder,
            feat_out,
            eos_out,
            postnet,
        })
    }

    pub fn graph(&self, seed: u64, training: bool) -> Graph {
        let mut g = Graph::new(seed, training);
        g.bind(&self.params);
        g
    }

    pub fn reduction_factor(&self) -> usize {
        self.config.tts.reduction_factor
    }

    /// Encodes character ids; the end-of-sequence id is appended.
    pub fn encode(&self, g: &mut Graph, text: &[usize]) -> Result<Var> {
        if text.is_empty() {
            return Err(Error::Data("empty text".into()));
        }
        let mut ids = text.to_vec();
        ids.push(SOS_EOS);
        let e = g.embedding(g.p(self.embed), &ids)?;
        let x0 = scaled_positional_encoding(g, e, g.p(self.enc_alpha))?;
        let active = g.is_training();
        let x0 = g.dropout(x0, self.config.dropout_rate, active)?;
        let n = ids.len();
        self.encoder.forward(g, x0, n)
    }

    /// Decoder inputs `[steps × feat_dim]` to `(Y_d, records)`.
    pub fn decode_body(&self, g: &mut Graph, x_e: Var, inputs: Var) -> Result<(Var, Vec<DecoderLayerRecord>)> {
        let h = self.prenet.forward(g, inputs)?;
        let y0 = scaled_positional_encoding(g, h, g.p(self.dec_alpha))?;
        let n = g.shape(x_e)[0];
        self.decoder.forward(g, y0, x_e, n)
    }

    /// Coarse frames `[steps·r × feat_dim]` and stop logits `[steps × 1]`.
    pub fn dec_post(&self, g: &mut Graph, y_d: Var) -> Result<(Var, Var)> {
        let steps = g.shape(y_d)[0];
        let (f, r) = (self.config.feat_dim, self.reduction_factor());
        let feats = self.feat_out.forward(g, y_d)?;
        let coarse = g.reshape(feats, vec![steps * r, f])?;
        let eos = self.eos_out.forward(g, y_d)?;
        Ok((coarse, eos))
    }

    /// Teacher-forced inputs: a zero go-frame, then the last frame of each
    /// preceding group of `r` target frames.
    pub fn teacher_inputs(&self, padded: &Tensor) -> Result<Tensor> {
        let r = self.reduction_factor();
        let (rows, f) = (padded.rows(), padded.cols());
        if rows % r != 0 {
            return Err(dim_err!("{rows} target frames not a multiple of r={r}"));
        }
        let steps = rows / r;
        let mut data = vec![0.0; steps * f];
        for s in 1..steps {
            data[s * f..(s + 1) * f].copy_from_slice(padded.row(s * r - 1));
        }
        Tensor::new(vec![steps, f], data)
    }

    pub fn forward(&self, g: &mut Graph, text: &[usize], feats: &Tensor) -> Result<TtsOutputs> {
        if feats.rank() != 2 || feats.cols() != self.config.feat_dim {
            return Err(dim_err!(
                "target features {:?}, model expects width {}",
                feats.shape(),
                self.config.feat_dim
            ));
        }
        let target = pad_to_reduction(feats, self.reduction_factor())?;
        let steps = target.rows() / self.reduction_factor();
        let x_e = self.encode(g, text)?;
        let inputs = g.constant(self.teacher_inputs(&target)?);
        let (y_d, records) = self.decode_body(g, x_e, inputs)?;
        let (coarse, eos_logits) = self.dec_post(g, y_d)?;
        let refined = self.postnet.refine(g, coarse)?;
        Ok(TtsOutputs {
            coarse,
            refined,
            eos_logits,
            target,
            frames: feats.rows(),
            steps,
            records,
        })
    }
}
