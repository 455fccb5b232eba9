//! Corpus decoding and teacher-forced accuracy for speech models.

use crate::data::SpeechExample;
use crate::decoding::{beam_search, greedy_decode, BeamConfig, RnnLm};
use crate::error::Result;
use crate::models::SpeechModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Beam(BeamConfig),
}

/// Best token sequence for each example.
pub fn decode_corpus(model: &SpeechModel, examples: &[SpeechExample], mode: DecodeMode, lm: Option<&RnnLm>) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .map(|e| match mode {
            DecodeMode::Greedy => greedy_decode(model, &e.feats, None).map(|(t, _)| t),
            DecodeMode::Beam(cfg) => beam_search(model, &e.feats, lm, &cfg).map(|r| r.best.tokens().to_vec()),
        })
        .collect()
}

/// Share of decoder targets (end symbol included) that are the argmax of
/// the teacher-forced output distribution.
pub fn teacher_forced_accuracy(model: &SpeechModel, examples: &[SpeechExample]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for e in examples {
        let mut g = model.graph(0, false);
        let out = model.forward(&mut g, &e.feats, &e.tokens)?;
        let lp = g.value(out.s2s_log_probs);
        for (t, &y) in out.targets.iter().enumerate() {
            let row = lp.row(t);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hit += usize::from(best == y);
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { hit as f64 / n as f64 })
}
