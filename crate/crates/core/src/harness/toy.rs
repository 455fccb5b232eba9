//! Synthetic tasks built from per-token feature prototypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::formats::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// Targets are the spoken tokens (ASR).
    Identity,
    /// Targets swap each adjacent pair of tokens (ST).
    BigramSwap,
    /// Tokens in, features out (TTS).
    Inverse,
}

impl Transform {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "asr" => Ok(Transform::Identity),
            "bigram-swap" | "st" => Ok(Transform::BigramSwap),
            "inverse" | "tts" => Ok(Transform::Inverse),
            _ => Err(Error::Config(format!("unknown transform {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::BigramSwap => "bigram-swap",
            Transform::Inverse => "inverse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    /// Number of vocabulary tokens, reserved ids excluded.
    pub vocab_size: usize,
    /// Prototype length range in frames, inclusive.
    pub frames_per_token: (usize, usize),
    pub noise: f64,
    /// Tokens per utterance, inclusive.
    pub utt_len: (usize, usize),
    pub feat_dim: usize,
    pub transform: Transform,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            vocab_size: 10,
            frames_per_token: (8, 12),
            noise: 0.1,
            utt_len: (3, 8),
            feat_dim: 16,
            transform: Transform::Identity,
            train: 200,
            dev: 40,
            test: 40,
            seed: 7,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.frames_per_token;
        let (c, d) = self.utt_len;
        if self.vocab_size == 0 || self.feat_dim == 0 {
            return Err(Error::Config("vocab_size and feat_dim must be positive".into()));
        }
        if a == 0 || a > b || c == 0 || c > d {
            return Err(Error::Config("length ranges must satisfy 1 ≤ min ≤ max".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite non-negative stddev".into()));
        }
        Ok(())
    }

    /// Token symbols: `a`…`z`, then `t26`, `t27`, ….
    pub fn vocab(&self) -> Vocab {
        let tokens = (0..self.vocab_size)
            .map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        Vocab::new(tokens).expect("generated symbols are distinct")
    }
}

/// One generated utterance; ids are vocabulary ids (from 3).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub utt_id: String,
    /// Spoken token sequence.
    pub source: Vec<usize>,
    /// Target token sequence after the transform.
    pub target: Vec<usize>,
    pub feats: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: ToySpec,
    pub vocab: Vocab,
    /// Prototype chunk of each token, indexed by `id − 3`.
    pub prototypes: Vec<Tensor>,
    pub train: Vec<ToyUtterance>,
    pub dev: Vec<ToyUtterance>,
    pub test: Vec<ToyUtterance>,
}

/// Swaps positions (0,1), (2,3), …; a trailing odd token stays put.
pub fn bigram_swap(tokens: &[usize]) -> Vec<usize> {
    let mut out = tokens.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

impl ToyDataset {
    /// Noise-free features of a token sequence.
    pub fn render(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.spec.feat_dim;
        let mut data = Vec::new();
        for &t in tokens {
            let p = t
                .checked_sub(crate::data::FIRST_TOKEN)
                .and_then(|i| self.prototypes.get(i))
                .ok_or_else(|| Error::Data(format!("token id {t} has no prototype")))?;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![data.len() / d, d], data)
    }
}

/// Generates the dataset; a pure function of `spec`.
pub fn generate(spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let prototypes: Vec<Tensor> = (0..spec.vocab_size)
        .map(|_| {
            let len = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            let data = (0..len * spec.feat_dim).map(|_| unit.sample(&mut rng)).collect();
            Tensor::new(vec![len, spec.feat_dim], data).expect("consistent shape")
        })
        .collect();
    let mut ds = ToyDataset {
        spec: spec.clone(),
        vocab: spec.vocab(),
        prototypes,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut make = |split: &str, n: usize, ds: &ToyDataset| -> Result<Vec<ToyUtterance>> {
        (0..n)
            .map(|i| {
                let len = rng.random_range(spec.utt_len.0..=spec.utt_len.1);
                let source: Vec<usize> = (0..len)
                    .map(|_| crate::data::FIRST_TOKEN + rng.random_range(0..spec.vocab_size))
                    .collect();
                let mut feats = ds.render(&source)?;
                if spec.noise > 0.0 {
                    feats.data_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                }
                let target = match spec.transform {
                    Transform::BigramSwap => bigram_swap(&source),
                    _ => source.clone(),
                };
                Ok(ToyUtterance {
                    utt_id: format!("{split}{i:04}"),
                    source,
                    target,
                    feats,
                })
            })
            .collect()
    };
    ds.train = make("train", spec.train, &ds)?;
    ds.dev = make("dev", spec.dev, &ds)?;
    ds.test = make("test", spec.test, &ds)?;
    Ok(ds)
}

pub fn gen_toy_asr(spec: &ToySpec) -> Result<ToyDataset> {
    generate(&ToySpec {
        transform: Transform::Identity,
        ..spec.clone()
    })
}

pub fn gen_toy_st(spec: &ToySpec) -> Result<ToyDataset> {
    generate(&ToySpec {
        transform: Transform::BigramSwap,
        ..spec.clone()
    })
}

pub fn gen_toy_tts(spec: &ToySpec) -> Result<ToyDataset> {
    generate(&ToySpec {
        transform: Transform::Inverse,
        ..spec.clone()
    })
}
