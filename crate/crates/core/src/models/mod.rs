//! Encoder/decoder models: `X_0 = EncPre(X)`, `X_e = EncBody(X_0)`,
//! `Y_0 = DecPre(Y[1:t-1])`, `Y_d = DecBody(X_e, Y_0)`, `Y_post = DecPost(Y_d)`.

mod asr;
pub mod config;
mod decoder;
mod encoder;
pub mod layers;
mod tts;

pub use asr::{Encoded, PaddedBatch, SpeechModel, SpeechOutputs};
pub use config::{Body, EncPreKind, ModelConfig, Normalize, SrcResidual, Task, TtsConfig};
pub use decoder::{AdditiveAttention, DecoderBody, DecoderLayer, DecoderLayerRecord, LstmDecoder, TransformerDecoder};
pub use encoder::{
    mask_rows, subsample_length, BlstmEncoder, BlstmLayer, EncoderBody, EncoderLayer, SpeechEncPre, TransformerEncoder, MIN_FRAMES,
};
pub use tts::{decoder_steps, pad_to_reduction, Postnet, Prenet, TtsModel, TtsOutputs};
