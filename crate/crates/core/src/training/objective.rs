//! Batch objectives with global normalization and gradient accumulation.

use crate::data::{SpeechExample, TtsExample};
use crate::error::{Error, Result};
use crate::losses::{
    ctc_nll, l1_sum, s2s_nll_sum, select_heads, smoothed_nll_sum, weighted_bce_sum, GuidedSelection, LossReport, DEFAULT_ALPHA,
};
use crate::models::{decoder_steps, Body, ModelConfig, PaddedBatch, SpeechModel, Task, TtsModel};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// A trainable model of either task family.
#[derive(Clone, Debug)]
pub enum Model {
    Speech(SpeechModel),
    Tts(TtsModel),
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(match config.task {
            Task::Tts => Model::Tts(TtsModel::new(config)?),
            Task::Asr | Task::St => Model::Speech(SpeechModel::new(config)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Speech(m) => &m.config,
            Model::Tts(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Speech(m) => &m.params,
            Model::Tts(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Speech(m) => &mut m.params,
            Model::Tts(m) => &mut m.params,
        }
    }

    pub fn graph(&self, seed: u64, training: bool) -> Graph {
        match self {
            Model::Speech(m) => m.graph(seed, training),
            Model::Tts(m) => m.graph(seed, training),
        }
    }
}

/// Borrowed examples of one task family.
#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    Speech(&'a [SpeechExample]),
    Tts(&'a [TtsExample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Speech(b) => b.len(),
            Batch::Tts(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Attention share of the joint ASR loss.
    pub alpha: f64,
    /// Label smoothing mass; 0 gives plain cross-entropy.
    pub label_smoothing: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: DEFAULT_ALPHA,
            label_smoothing: 0.0,
        }
    }
}

/// Normalizers of a (possibly accumulated) batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchCounts {
    /// Decoder targets including one end symbol per utterance.
    pub tokens: usize,
    /// True target frames (TTS).
    pub frames: usize,
    /// `frames · feat_dim`, the L1 normalizer.
    pub frame_values: usize,
    /// Decoder steps, the stop-flag normalizer.
    pub steps: usize,
    /// Attention rows covered by the guided loss.
    pub guided_rows: usize,
}

impl BatchCounts {
    pub fn add(&mut self, o: &BatchCounts) {
        self.tokens += o.tokens;
        self.frames += o.frames;
        self.frame_values += o.frame_values;
        self.steps += o.steps;
        self.guided_rows += o.guided_rows;
    }
}

fn guided_selection(cfg: &ModelConfig) -> GuidedSelection {
    GuidedSelection {
        layers: cfg.tts.guided_layers,
        heads: cfg.tts.guided_heads,
    }
}

/// Attention maps per utterance that the guided loss reads.
fn guided_maps(cfg: &ModelConfig) -> usize {
    match cfg.body {
        Body::Transformer => cfg.tts.guided_layers.min(cfg.dec_layers) * cfg.tts.guided_heads.min(cfg.d_head),
        Body::Rnn => cfg.tts.guided_layers.min(1) * cfg.tts.guided_heads.min(1),
    }
}

pub fn batch_counts(model: &Model, batch: Batch<'_>) -> Result<BatchCounts> {
    match (model, batch) {
        (Model::Speech(_), Batch::Speech(b)) => Ok(BatchCounts {
            tokens: b.iter().map(|e| e.tokens.len() + 1).sum(),
            ..BatchCounts::default()
        }),
        (Model::Tts(m), Batch::Tts(b)) => {
            let cfg = &m.config;
            let mut c = BatchCounts::default();
            for e in b {
                let steps = decoder_steps(e.feats.rows(), cfg.tts.reduction_factor);
                c.frames += e.feats.rows();
                c.frame_values += e.feats.rows() * cfg.feat_dim;
                c.steps += steps;
                c.guided_rows += steps * guided_maps(cfg);
            }
            Ok(c)
        }
        _ => Err(Error::Config("batch does not match the model's task".into())),
    }
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms {
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

fn need(x: usize, what: &str) -> Result<f64> {
    if x == 0 {
        return Err(Error::Data(format!("batch has no {what}")));
    }
    Ok(x as f64)
}

/// Loss of `batch` with every term divided by the matching field of
/// `counts`, which may describe a larger batch this one is part of.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: Batch<'_>,
    counts: &BatchCounts,
    obj: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    match (model, batch) {
        (Model::Speech(m), Batch::Speech(b)) => speech_loss(g, m, b, counts, obj),
        (Model::Tts(m), Batch::Tts(b)) => tts_loss(g, m, b, counts),
        _ => Err(Error::Config("batch does not match the model's task".into())),
    }
}

fn speech_loss(
    g: &mut Graph,
    m: &SpeechModel,
    b: &[SpeechExample],
    counts: &BatchCounts,
    obj: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    if !(0.0..=1.0).contains(&obj.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", obj.alpha)));
    }
    let n = need(counts.tokens, "targets")?;
    let use_ctc = m.config.ctc && obj.alpha < 1.0;
    let alpha = if m.config.ctc { obj.alpha } else { 1.0 };
    let outs = m.forward_batch(g, &PaddedBatch::from_examples(b)?)?;
    let (mut s2s, mut ctc) = (Vec::new(), Vec::new());
    for o in &outs {
        s2s.push(if obj.label_smoothing > 0.0 {
            smoothed_nll_sum(g, o.s2s_log_probs, &o.targets, obj.label_smoothing)?
        } else {
            s2s_nll_sum(g, o.s2s_log_probs, &o.targets)?
        });
        if use_ctc {
            let lp = o.ctc_log_probs.ok_or_else(|| Error::Config("model has no CTC head".into()))?;
            ctc.push(ctc_nll(g, lp, &o.targets[..o.targets.len() - 1])?);
        }
    }
    let s2s = sum_all(g, &s2s)?.ok_or_else(|| Error::Data("empty batch".into()))?;
    let s2s_v = g.value(s2s).item() / n;
    let att = g.scale(s2s, alpha / n)?;
    let (total, ctc_v) = match sum_all(g, &ctc)? {
        Some(c) => {
            let v = g.value(c).item() / n;
            let w = g.scale(c, (1.0 - alpha) / n)?;
            (g.add(att, w)?, v)
        }
        None => (att, 0.0),
    };
    let mut report = LossReport::asr(s2s_v, ctc_v, alpha, b.iter().map(|e| e.tokens.len() + 1).sum());
    report.total = g.value(total).item();
    Ok((total, report))
}

fn tts_loss(g: &mut Graph, m: &TtsModel, b: &[TtsExample], counts: &BatchCounts) -> Result<(Var, LossReport)> {
    let cfg = &m.config;
    let (nv, ns) = (need(counts.frame_values, "frames")?, need(counts.steps, "decoder steps")?);
    let sel = guided_selection(cfg);
    let guided_on = guided_maps(cfg) > 0;
    let (mut l1, mut bce, mut guided) = (Vec::new(), Vec::new(), Vec::new());
    let mut frames = 0;
    for e in b {
        let o = m.forward(g, &e.text, &e.feats)?;
        let c = l1_sum(g, o.coarse, &o.target, o.frames)?;
        let r = l1_sum(g, o.refined, &o.target, o.frames)?;
        l1.push(g.add(c, r)?);
        bce.push(weighted_bce_sum(g, o.eos_logits, &o.eos_labels(), cfg.tts.bce_pos_weight)?);
        if guided_on {
            let maps = select_heads(&o.records, sel);
            let (s, _) = crate::losses::guided_attention_sum(g, &maps, cfg.tts.guided_sigma)?;
            guided.push(s);
        }
        frames += o.frames;
    }
    let l1 = sum_all(g, &l1)?.ok_or_else(|| Error::Data("empty batch".into()))?;
    let l1 = g.scale(l1, 1.0 / nv)?;
    let bce = sum_all(g, &bce)?.expect("non-empty");
    let bce = g.scale(bce, 1.0 / ns)?;
    let mut total = g.add(l1, bce)?;
    let mut guided_v = 0.0;
    if let Some(s) = sum_all(g, &guided)? {
        let s = g.scale(s, 1.0 / need(counts.guided_rows, "attention rows")?)?;
        guided_v = g.value(s).item();
        total = g.add(total, s)?;
    }
    let mut report = LossReport::tts(g.value(l1).item(), g.value(bce).item(), guided_v, frames);
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Seed for micro-batch `index` of optimizer step `step`.
pub fn micro_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(step.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index as u64)
}

/// Gradients of the loss over all `micro` batches taken together: each
/// micro-batch is normalized by the combined counts, and gradients are
/// summed left to right.
pub fn accumulate_gradients(
    model: &Model,
    micro: &[Batch<'_>],
    obj: &ObjectiveConfig,
    seed: u64,
    step: u64,
) -> Result<(Vec<Tensor>, LossReport)> {
    let mut counts = BatchCounts::default();
    for &b in micro {
        counts.add(&batch_counts(model, b)?);
    }
    let mut grads: Option<Vec<Tensor>> = None;
    let mut report = LossReport::default();
    for (i, &b) in micro.iter().enumerate() {
        if b.is_empty() {
            continue;
        }
        let mut g = model.graph(micro_seed(seed, step, i), true);
        let (loss, r) = batch_loss(&mut g, model, b, &counts, obj)?;
        if !r.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        g.backward(loss)?;
        let gi = model.params().grads_from(&g);
        match grads.as_mut() {
            None => grads = Some(gi),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&gi) {
                    a.data_mut().iter_mut().zip(x.data()).for_each(|(a, x)| *a += x);
                }
            }
        }
        report.accumulate(&r);
    }
    let grads = grads.ok_or_else(|| Error::Data("no examples to train on".into()))?;
    Ok((grads, report))
}

/// Loss of `batch` without dropout or gradients.
pub fn evaluate(model: &Model, batch: Batch<'_>, obj: &ObjectiveConfig) -> Result<LossReport> {
    let counts = batch_counts(model, batch)?;
    let mut g = model.graph(0, false);
    Ok(batch_loss(&mut g, model, batch, &counts, obj)?.1)
}
