use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Body, ModelConfig, Task};
use super::decoder::{DecoderBody, DecoderLayerRecord, LstmDecoder, TransformerDecoder};
use super::encoder::{BlstmEncoder, EncoderBody, SpeechEncPre, TransformerEncoder};
use super::layers::Linear;
use crate::attention::add_positional_encoding;
use crate::data::{SpeechExample, SOS_EOS};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Encoder output `X_e` with the number of valid (unpadded) rows.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub x_e: Var,
    pub n_sub: usize,
}

/// Teacher-forced outputs for one utterance.
#[derive(Clone, Debug)]
pub struct SpeechOutputs {
    /// `[(|y|+1) × V]` label log-probabilities.
    pub s2s_log_probs: Var,
    /// `[n_sub × V]` frame log-probabilities of the CTC head.
    pub ctc_log_probs: Option<Var>,
    /// Tokens followed by end-of-sequence.
    pub targets: Vec<usize>,
    pub records: Vec<DecoderLayerRecord>,
    pub n_sub: usize,
}

/// Utterances padded to common lengths plus their true lengths.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub feats: Vec<Tensor>,
    pub frame_lens: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub token_lens: Vec<usize>,
}

impl PaddedBatch {
    /// Pads features with zero frames and token sequences with end-of-sequence ids.
    pub fn from_examples(examples: &[SpeechExample]) -> Result<Self> {
        let n_max = examples.iter().map(|e| e.feats.rows()).max().unwrap_or(0);
        let y_max = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut batch = PaddedBatch {
            feats: Vec::new(),
            frame_lens: Vec::new(),
            tokens: Vec::new(),
            token_lens: Vec::new(),
        };
        for e in examples {
            let (n, f) = (e.feats.rows(), e.feats.cols());
            let mut data = e.feats.data().to_vec();
            data.resize(n_max * f, 0.0);
            batch.feats.push(Tensor::new(vec![n_max, f], data)?);
            batch.frame_lens.push(n);
            let mut toks = e.tokens.clone();
            toks.resize(y_max, SOS_EOS);
            batch.tokens.push(toks);
            batch.token_lens.push(e.tokens.len());
        }
        Ok(batch)
    }
}

/// Attention-based encoder-decoder for speech recognition and translation.
#[derive(Clone, Debug)]
pub struct SpeechModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub enc_pre: SpeechEncPre,
    pub encoder: EncoderBody,
    pub embed: ParamId,
    pub decoder: DecoderBody,
    pub dec_post: Linear,
    pub ctc_head: Option<Linear>,
}

impl SpeechModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.task == Task::Tts {
            return Err(Error::Config("speech model built for a TTS config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let store = &mut params;
        let enc_pre = SpeechEncPre::new(store, &config, &mut rng);
        let (encoder, decoder) = build_bodies(store, &config, &mut rng)?;
        let (v, d) = (config.vocab_size, config.d_att);
        let embed = store.add_weight("dec_pre.embed", v, d, &mut rng);
        let dec_post = Linear::new(store, "dec_post", d, v, true, &mut rng);
        let ctc_head = config.ctc.then(|| Linear::new(store, "ctc", d, v, true, &mut rng));
        Ok(SpeechModel {
            config,
            params,
            enc_pre,
            encoder,
            embed,
            decoder,
            dec_post,
            ctc_head,
        })
    }

    /// Graph bound to this model's parameters.
    pub fn graph(&self, seed: u64, training: bool) -> Graph {
        let mut g = Graph::new(seed, training);
        g.bind(&self.params);
        g
    }

    /// `EncBody(EncPre(X))` for features whose rows `valid..` are padding.
    pub fn encode(&self, g: &mut Graph, feats: Var, valid: usize) -> Result<Encoded> {
        let (x0, n_sub) = self.enc_pre.forward(g, feats, valid)?;
        let x_e = self.encoder.forward(g, x0, n_sub)?;
        Ok(Encoded { x_e, n_sub })
    }

    /// Token embeddings plus positional encodings; the caller supplies the
    /// start-of-sequence id at position 0.
    pub fn dec_pre(&self, g: &mut Graph, prefix: &[usize]) -> Result<Var> {
        let e = g.embedding(g.p(self.embed), prefix)?;
        add_positional_encoding(g, e)
    }

    /// Per-position label log-probabilities for decoder input `prefix`.
    pub fn decode(&self, g: &mut Graph, enc: Encoded, prefix: &[usize]) -> Result<(Var, Vec<DecoderLayerRecord>)> {
        let y0 = self.dec_pre(g, prefix)?;
        let (y_d, records) = self.decoder.forward(g, y0, enc.x_e, enc.n_sub)?;
        let logits = self.dec_post.forward(g, y_d)?;
        Ok((g.log_softmax(logits)?, records))
    }

    /// CTC frame log-probabilities over the valid encoder rows.
    pub fn ctc_log_probs(&self, g: &mut Graph, enc: Encoded) -> Result<Option<Var>> {
        let Some(head) = &self.ctc_head else {
            return Ok(None);
        };
        let rows = if enc.n_sub < g.shape(enc.x_e)[0] {
            g.slice_rows(enc.x_e, 0, enc.n_sub)?
        } else {
            enc.x_e
        };
        let logits = head.forward(g, rows)?;
        Ok(Some(g.log_softmax(logits)?))
    }

    /// Teacher-forced forward for one utterance.
    pub fn forward(&self, g: &mut Graph, feats: &Tensor, tokens: &[usize]) -> Result<SpeechOutputs> {
        let x = g.constant(feats.clone());
        self.forward_padded(g, x, feats.rows(), tokens, tokens.len())
    }

    fn forward_padded(&self, g: &mut Graph, x: Var, valid: usize, tokens: &[usize], n_tokens: usize) -> Result<SpeechOutputs> {
        let enc = self.encode(g, x, valid)?;
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(SOS_EOS);
        prefix.extend_from_slice(tokens);
        let (mut lp, records) = self.decode(g, enc, &prefix)?;
        if n_tokens < tokens.len() {
            lp = g.slice_rows(lp, 0, n_tokens + 1)?;
        }
        let mut targets = tokens[..n_tokens].to_vec();
        targets.push(SOS_EOS);
        Ok(SpeechOutputs {
            s2s_log_probs: lp,
            ctc_log_probs: self.ctc_log_probs(g, enc)?,
            targets,
            records,
            n_sub: enc.n_sub,
        })
    }

    /// Runs every padded utterance through the model with masks covering
    /// the padding, trimming outputs to the true lengths.
    pub fn forward_batch(&self, g: &mut Graph, batch: &PaddedBatch) -> Result<Vec<SpeechOutputs>> {
        let b = batch.feats.len();
        if batch.frame_lens.len() != b || batch.tokens.len() != b || batch.token_lens.len() != b {
            return Err(dim_err!("inconsistent batch sizes"));
        }
        (0..b)
            .map(|i| {
                let x = g.constant(batch.feats[i].clone());
                self.forward_padded(g, x, batch.frame_lens[i], &batch.tokens[i], batch.token_lens[i])
            })
            .collect()
    }

    /// Encoder output and CTC log-probabilities as plain tensors.
    pub fn encode_tensor(&self, feats: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = self.graph(0, false);
        let x = g.constant(feats.clone());
        let enc = self.encode(&mut g, x, feats.rows())?;
        let ctc = self.ctc_log_probs(&mut g, enc)?.map(|v| g.value(v).clone());
        Ok((g.value(enc.x_e).clone(), ctc))
    }

    /// Next-label log-probabilities after `prefix` (which starts with sos).
    pub fn next_log_probs(&self, x_e: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(dim_err!("decoder prefix must contain the start symbol"));
        }
        let mut g = self.graph(0, false);
        let x = g.constant(x_e.clone());
        let enc = Encoded { x_e: x, n_sub: x_e.rows() };
        let (lp, _) = self.decode(&mut g, enc, prefix)?;
        Ok(g.value(lp).row(prefix.len() - 1).to_vec())
    }
}

pub(crate) fn build_bodies(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(EncoderBody, DecoderBody)> {
    Ok(match cfg.body {
        Body::Transformer => (
            EncoderBody::Transformer(TransformerEncoder::new(store, "enc", cfg, rng)?),
            DecoderBody::Transformer(TransformerDecoder::new(store, "dec", cfg, rng)?),
        ),
        Body::Rnn => (
            EncoderBody::Blstm(BlstmEncoder::new(store, "enc", cfg, rng)),
            DecoderBody::Lstm(LstmDecoder::new(store, "dec", cfg, rng)),
        ),
    })
}
