//! Utterance-level data shared by models, losses and the harness.

use crate::tensor::Tensor;

/// CTC blank; never a decoder target.
pub const BLANK: usize = 0;
pub const UNK: usize = 1;
/// Start- and end-of-sequence share one id.
pub const SOS_EOS: usize = 2;
/// First id assigned to vocabulary tokens.
pub const FIRST_TOKEN: usize = 3;

/// Frames × dims real matrix with its utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub utt_id: String,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_dims(&self) -> usize {
        self.frames.cols()
    }
}

/// Utterance id and token ids (specials excluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub utt_id: String,
    pub ids: Vec<usize>,
}

/// Speech features paired with a target token sequence (ASR and ST).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechExample {
    pub utt_id: String,
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

/// Character ids paired with target feature frames (TTS).
#[derive(Clone, Debug, PartialEq)]
pub struct TtsExample {
    pub utt_id: String,
    pub text: Vec<usize>,
    pub feats: Tensor,
}

impl TtsExample {
    /// Stop labels: 1 on the final frame, 0 elsewhere.
    pub fn eos_labels(&self) -> Vec<f64> {
        let n = self.feats.rows();
        (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect()
    }
}
