use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Asr,
    St,
    Tts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Body {
    Transformer,
    Rnn,
}

/// Placement of layer normalization inside Transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalize {
    Pre,
    Post,
    None,
}

/// Which stream the decoder's source-attention residual is added to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrcResidual {
    /// `Y'' = Y + MHA_src(Y', X_e, X_e)`, the block input.
    LayerInput,
    /// `Y'' = Y' + MHA_src(Y', X_e, X_e)`, the self-attention output.
    SelfAttnOutput,
}

/// Speech-feature front end that subsamples time by four.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncPreKind {
    /// Two stride-2 `k=3` convolutions over time.
    Conv1d,
    /// Two stride-2 `3×3` convolutions over time × frequency.
    Conv2d,
    /// Two blocks of `k=3` convolution followed by `2×` max pooling over time.
    Vgg,
}

/// TTS-specific settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TtsConfig {
    pub reduction_factor: usize,
    pub prenet_units: usize,
    pub prenet_layers: usize,
    pub prenet_dropout: f64,
    /// Keep Prenet dropout active at inference.
    pub prenet_dropout_at_inference: bool,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    /// Layer norm stands in for batch norm inside the Postnet.
    pub postnet_layer_norm: bool,
    pub bce_pos_weight: f64,
    pub guided_sigma: f64,
    /// Number of decoder layers (from the top) whose source attention is guided.
    pub guided_layers: usize,
    /// Heads per selected layer that receive the guided loss.
    pub guided_heads: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        TtsConfig {
            reduction_factor: 1,
            prenet_units: 256,
            prenet_layers: 2,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            postnet_layers: 5,
            postnet_channels: 256,
            postnet_kernel: 5,
            postnet_layer_norm: true,
            bce_pos_weight: 5.0,
            guided_sigma: 0.4,
            guided_layers: 2,
            guided_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub body: Body,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_att: usize,
    pub d_ff: usize,
    pub d_head: usize,
    pub dropout_rate: f64,
    /// Total id space including the reserved specials.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub normalize: Normalize,
    pub src_residual: SrcResidual,
    pub enc_pre: EncPreKind,
    /// Hidden units per direction of the BLSTM encoder.
    pub rnn_units: usize,
    /// Whether a CTC head is built; required for ASR joint training.
    pub ctc: bool,
    pub tts: TtsConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::asr_full(32, 83)
    }
}

impl ModelConfig {
    /// Full-scale ASR architecture (e=12, d=6, d_ff=2048, 4 heads, d_att=256).
    pub fn asr_full(vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            task: Task::Asr,
            body: Body::Transformer,
            enc_layers: 12,
            dec_layers: 6,
            d_att: 256,
            d_ff: 2048,
            d_head: 4,
            dropout_rate: 0.1,
            vocab_size,
            feat_dim,
            normalize: Normalize::Pre,
            src_residual: SrcResidual::LayerInput,
            enc_pre: EncPreKind::Conv1d,
            rnn_units: 256,
            ctc: true,
            tts: TtsConfig::default(),
            seed: 1,
        }
    }

    /// Full-scale TTS architecture (e=6, d=6, d_att=384, d_ff=1536, 4 heads).
    pub fn tts_full(vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            task: Task::Tts,
            enc_layers: 6,
            dec_layers: 6,
            d_att: 384,
            d_ff: 1536,
            d_head: 4,
            ctc: false,
            ..Self::asr_full(vocab_size, feat_dim)
        }
    }

    /// Desk-scale Transformer preset: e=2, d=2, d_att=64, d_ff=256, 2 heads.
    pub fn toy_transformer(task: Task, vocab_size: usize, feat_dim: usize) -> Self {
        let mut cfg = ModelConfig {
            task,
            enc_layers: 2,
            dec_layers: 2,
            d_att: 64,
            d_ff: 256,
            d_head: 2,
            rnn_units: 64,
            ctc: task == Task::Asr,
            ..Self::asr_full(vocab_size, feat_dim)
        };
        cfg.tts.prenet_units = 64;
        cfg.tts.postnet_channels = 64;
        cfg
    }

    /// Desk-scale RNN preset: 2-layer BLSTM encoder, 1-layer LSTM decoder.
    pub fn toy_rnn(task: Task, vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            body: Body::Rnn,
            dec_layers: 1,
            dropout_rate: 0.0,
            ..Self::toy_transformer(task, vocab_size, feat_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dec_layers == 0 {
            return bad("decoder needs at least one layer");
        }
        if self.d_att == 0 || self.d_head == 0 || self.d_ff == 0 {
            return bad("d_att, d_head and d_ff must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive");
        }
        if self.body == Body::Rnn && self.rnn_units == 0 {
            return bad("rnn_units must be positive");
        }
        match self.task {
            Task::St if self.ctc => {
                return bad("speech translation cannot use CTC: source and target are not monotonically aligned");
            }
            Task::Tts if self.ctc => return bad("TTS has no CTC head"),
            _ => {}
        }
        if self.task != Task::Tts && self.vocab_size <= crate::data::FIRST_TOKEN {
            return bad("vocab_size must exceed the reserved ids");
        }
        if self.task == Task::Tts {
            let t = &self.tts;
            if t.reduction_factor == 0 {
                return bad("reduction_factor must be at least 1");
            }
            if t.prenet_layers == 0 || t.prenet_units == 0 {
                return bad("prenet needs at least one layer");
            }
            if !(0.0..1.0).contains(&t.prenet_dropout) {
                return bad("prenet_dropout must lie in [0, 1)");
            }
            if t.postnet_layers == 1 || t.postnet_kernel.is_multiple_of(2) {
                return bad("postnet needs 0 or >= 2 layers and an odd kernel");
            }
            if t.guided_layers > self.dec_layers || t.guided_heads > self.d_head {
                return bad("guided attention selection exceeds decoder layers or heads");
            }
            if t.guided_sigma <= 0.0 {
                return bad("guided_sigma must be positive");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_defaults() {
        let asr = ModelConfig::asr_full(40, 83);
        assert_eq!(
            (asr.enc_layers, asr.dec_layers, asr.d_ff, asr.d_head, asr.d_att),
            (12, 6, 2048, 4, 256)
        );
        let tts = ModelConfig::tts_full(40, 80);
        assert_eq!(
            (tts.enc_layers, tts.dec_layers, tts.d_att, tts.d_ff, tts.d_head),
            (6, 6, 384, 1536, 4)
        );
        assert!(asr.validate().is_ok() && tts.validate().is_ok());
    }

    #[test]
    fn st_rejects_ctc() {
        let mut cfg = ModelConfig::toy_transformer(Task::St, 20, 16);
        assert!(cfg.validate().is_ok());
        cfg.ctc = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
