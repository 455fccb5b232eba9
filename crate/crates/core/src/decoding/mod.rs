//! Joint CTC/attention beam search with optional LM fusion, greedy
//! decoding, and autoregressive TTS inference.

mod ctc_prefix;
mod lm;
mod tts;

use std::cmp::Ordering;

pub use ctc_prefix::{ctc_prefix_score, CtcState};
pub use lm::{lm_score, LmConfig, LmState, RnnLm};
pub use tts::{tts_infer, StopReason, TtsInferConfig, TtsInference};

use crate::data::{BLANK, SOS_EOS};
use crate::error::{dim_err, Error, Result};
use crate::models::SpeechModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Weight on the attention score; the CTC score gets `1 − lambda`.
    pub lambda: f64,
    /// LM weight; ignored when no LM is supplied.
    pub gamma: f64,
    /// Output step budget as a multiple of the encoder length.
    pub max_len_ratio: f64,
    /// Explicit step budget, overriding `max_len_ratio`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 20,
            lambda: 0.7,
            gamma: 0.3,
            max_len_ratio: 1.0,
            max_len: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() || self.max_len_ratio <= 0.0 {
            return Err(Error::Config("gamma must be ≥ 0 and max_len_ratio > 0".into()));
        }
        Ok(())
    }

    /// Output steps allowed, end symbol included.
    pub fn step_budget(&self, n_sub: usize) -> usize {
        self.max_len
            .unwrap_or_else(|| (self.max_len_ratio * n_sub as f64).ceil() as usize)
            .max(1)
    }
}

/// Weights actually applied to the three score components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub s2s: f64,
    pub ctc: f64,
    pub lm: f64,
}

impl ScoreWeights {
    /// Without CTC posteriors the attention score takes the full weight;
    /// without an LM its weight is zero.
    pub fn new(cfg: &BeamConfig, has_ctc: bool, has_lm: bool) -> Self {
        let (s2s, ctc) = if has_ctc { (cfg.lambda, 1.0 - cfg.lambda) } else { (1.0, 0.0) };
        ScoreWeights {
            s2s,
            ctc,
            lm: if has_lm { cfg.gamma } else { 0.0 },
        }
    }

    pub fn combine(&self, log_s2s: f64, log_ctc: f64, log_lm: f64) -> f64 {
        let term = |w: f64, x: f64| if w == 0.0 { 0.0 } else { w * x };
        term(self.s2s, log_s2s) + term(self.ctc, log_ctc) + term(self.lm, log_lm)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Start symbol, tokens, and the end symbol once finished.
    pub prefix: Vec<usize>,
    pub log_s2s: f64,
    pub log_ctc: f64,
    pub log_lm: f64,
    pub combined: f64,
    pub ctc_state: Option<CtcState>,
    pub lm_state: Option<LmState>,
    pub finished: bool,
}

impl Hypothesis {
    fn root(ctc: Option<&Tensor>, lm: Option<&RnnLm>) -> Result<Self> {
        Ok(Hypothesis {
            prefix: vec![SOS_EOS],
            log_s2s: 0.0,
            log_ctc: 0.0,
            log_lm: 0.0,
            combined: 0.0,
            ctc_state: ctc.map(CtcState::initial).transpose()?,
            lm_state: lm.map(RnnLm::start).transpose()?,
            finished: false,
        })
    }

    /// Output tokens without the start and end symbols.
    pub fn tokens(&self) -> &[usize] {
        let end = if self.finished { self.prefix.len() - 1 } else { self.prefix.len() };
        &self.prefix[1..end]
    }

    pub fn recompute(&self, w: &ScoreWeights) -> f64 {
        w.combine(self.log_s2s, self.log_ctc, self.log_lm)
    }
}

/// Higher combined score first, then the shorter output, then the
/// lexicographically smaller one.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then_with(|| a.tokens().len().cmp(&b.tokens().len()))
        .then_with(|| a.tokens().cmp(b.tokens()))
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished hypotheses, best first, at most `beam_size`.
    pub nbest: Vec<Hypothesis>,
    /// Set when nothing reached the end symbol within the step budget and
    /// `best` is a live hypothesis.
    pub unfinished: bool,
}

/// Breadth-synchronous beam search over a generic attention scorer.
///
/// `s2s` maps a prefix (starting with the start symbol) to next-token
/// log-probabilities; `ctc` holds `[T × V]` CTC log-posteriors.
pub fn beam_search_with<F>(mut s2s: F, ctc: Option<&Tensor>, lm: Option<&RnnLm>, cfg: &BeamConfig, n_sub: usize) -> Result<BeamResult>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if n_sub == 0 {
        return Err(dim_err!("beam search over an empty encoder output"));
    }
    let weights = ScoreWeights::new(cfg, ctc.is_some(), lm.is_some());
    let ctc = if weights.ctc == 0.0 { None } else { ctc };
    let lm = if weights.lm == 0.0 { None } else { lm };
    let max_len = cfg.step_budget(n_sub);
    let mut live = vec![Hypothesis::root(ctc, lm)?];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &live {
            let lp = s2s(&hyp.prefix)?;
            if let Some(c) = ctc {
                if lp.len() != c.cols() {
                    return Err(dim_err!("attention scores {} classes, CTC {}", lp.len(), c.cols()));
                }
            }
            for (tok, &s) in lp.iter().enumerate() {
                if tok == BLANK {
                    continue;
                }
                candidates.push(expand(hyp, tok, s, ctc, lm, &weights)?);
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        // Scores only decrease along a path, so a live hypothesis already
        // below the best finished one can never overtake it.
        if let Some(best) = finished.iter().map(|h| h.combined).reduce(f64::max) {
            live.retain(|h| h.combined > best);
        }
        if live.is_empty() {
            break;
        }
    }

    finished.sort_by(rank);
    finished.truncate(cfg.beam_size);
    match finished.first() {
        Some(best) => Ok(BeamResult {
            best: best.clone(),
            nbest: finished,
            unfinished: false,
        }),
        None => {
            live.sort_by(rank);
            log::warn!("no hypothesis reached the end symbol within {max_len} steps");
            Ok(BeamResult {
                best: live.into_iter().next().expect("beam keeps at least one hypothesis"),
                nbest: Vec::new(),
                unfinished: true,
            })
        }
    }
}

fn expand(hyp: &Hypothesis, tok: usize, s2s: f64, ctc: Option<&Tensor>, lm: Option<&RnnLm>, w: &ScoreWeights) -> Result<Hypothesis> {
    let mut prefix = hyp.prefix.clone();
    prefix.push(tok);
    let finished = tok == SOS_EOS;
    let (log_ctc, ctc_state) = match (ctc, &hyp.ctc_state) {
        (Some(lp), Some(state)) => {
            let (_, next) = ctc_prefix_score(state, tok, lp)?;
            (next.score, Some(next))
        }
        _ => (0.0, None),
    };
    let (log_lm, lm_state) = match (lm, &hyp.lm_state) {
        (Some(model), Some(state)) => {
            let l = hyp.log_lm + state.log_probs[tok];
            let next = if finished { None } else { Some(model.advance(state, tok)?) };
            (l, next)
        }
        _ => (0.0, None),
    };
    let log_s2s = hyp.log_s2s + s2s;
    Ok(Hypothesis {
        prefix,
        log_s2s,
        log_ctc,
        log_lm,
        combined: w.combine(log_s2s, log_ctc, log_lm),
        ctc_state,
        lm_state,
        finished,
    })
}

/// Beam search for one utterance of a speech model; `feats` are raw
/// input frames.
pub fn beam_search(model: &SpeechModel, feats: &Tensor, lm: Option<&RnnLm>, cfg: &BeamConfig) -> Result<BeamResult> {
    if feats.rank() != 2 || feats.rows() == 0 {
        return Err(dim_err!("cannot decode empty features {:?}", feats.shape()));
    }
    let (x_e, ctc) = model.encode_tensor(feats)?;
    if let Some(lm) = lm {
        if lm.vocab_size() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "LM vocabulary {} differs from model vocabulary {}",
                lm.vocab_size(),
                model.config.vocab_size
            )));
        }
    }
    beam_search_with(|p| model.next_log_probs(&x_e, p), ctc.as_ref(), lm, cfg, x_e.rows())
}

/// Argmax decoding with the attention decoder only; ties favour the end
/// symbol, then the smaller id. Returns the tokens and whether the end
/// symbol was produced within `max_len` steps.
pub fn greedy_decode_with<F>(mut s2s: F, max_len: usize) -> Result<(Vec<usize>, bool)>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![SOS_EOS];
    for _ in 0..max_len.max(1) {
        let lp = s2s(&prefix)?;
        let mut best = SOS_EOS;
        for (tok, &s) in lp.iter().enumerate() {
            if tok != BLANK && s > lp[best] {
                best = tok;
            }
        }
        if best == SOS_EOS {
            return Ok((prefix[1..].to_vec(), true));
        }
        prefix.push(best);
    }
    Ok((prefix[1..].to_vec(), false))
}

pub fn greedy_decode(model: &SpeechModel, feats: &Tensor, max_len: Option<usize>) -> Result<(Vec<usize>, bool)> {
    if feats.rank() != 2 || feats.rows() == 0 {
        return Err(dim_err!("cannot decode empty features {:?}", feats.shape()));
    }
    let (x_e, _) = model.encode_tensor(feats)?;
    let budget = max_len.unwrap_or(x_e.rows());
    greedy_decode_with(|p| model.next_log_probs(&x_e, p), budget)
}

#[cfg(test)]
mod tests;
