//! Recurrent token language model used for shallow fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SOS_EOS;
use crate::error::{dim_err, Error, Result};
use crate::losses::s2s_nll_sum;
use crate::models::layers::{Linear, LstmCell, LstmState};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub units: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            units: 128,
            seed: 1,
        }
    }
}

/// One-layer LSTM over token ids, `[sos] y1 … yn` predicting `y1 … yn eos`.
#[derive(Clone, Debug)]
pub struct RnnLm {
    pub config: LmConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub cell: LstmCell,
    pub out: Linear,
}

/// Recurrent state after consuming a prefix, with the next-token
/// distribution it implies.
#[derive(Clone, Debug)]
pub struct LmState {
    pub h: Tensor,
    pub c: Tensor,
    pub log_probs: Vec<f64>,
}

impl RnnLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        if config.vocab_size <= SOS_EOS || config.units == 0 {
            return Err(Error::Config(format!("invalid LM dimensions {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (v, u) = (config.vocab_size, config.units);
        let embed = params.add_weight("lm.embed", v, u, &mut rng);
        let cell = LstmCell::new(&mut params, "lm.lstm", u, u, &mut rng);
        let out = Linear::new(&mut params, "lm.out", u, v, true, &mut rng);
        Ok(RnnLm {
            config,
            params,
            embed,
            cell,
            out,
        })
    }

    /// Rebuilds a model around stored parameters, reading the dimensions
    /// from the embedding table.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let id = params
            .id("lm.embed")
            .ok_or_else(|| Error::Format("parameters hold no LM embedding".into()))?;
        let e = params.get(id);
        let mut lm = RnnLm::new(LmConfig {
            vocab_size: e.rows(),
            units: e.cols(),
            seed: 0,
        })?;
        lm.params.load_named(params.iter())?;
        Ok(lm)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn graph(&self, seed: u64, training: bool) -> Graph {
        let mut g = Graph::new(seed, training);
        g.bind(&self.params);
        g
    }

    /// Next-token log-probabilities `[(n + 1) × V]` for every position of
    /// `[sos] tokens`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(SOS_EOS);
        ids.extend_from_slice(tokens);
        let e = g.embedding(g.p(self.embed), &ids)?;
        let h = self.cell.run(g, e, false)?;
        let logits = self.out.forward(g, h)?;
        g.log_softmax(logits)
    }

    /// `−log p(tokens eos)` as a graph node.
    pub fn nll_sum(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let lp = self.forward(g, tokens)?;
        let mut targets = tokens.to_vec();
        targets.push(SOS_EOS);
        s2s_nll_sum(g, lp, &targets)
    }

    /// State after the start symbol alone.
    pub fn start(&self) -> Result<LmState> {
        let u = self.config.units;
        let zero = LmState {
            h: Tensor::zeros(&[1, u]),
            c: Tensor::zeros(&[1, u]),
            log_probs: Vec::new(),
        };
        self.advance(&zero, SOS_EOS)
    }

    /// Consumes one more token.
    pub fn advance(&self, state: &LmState, token: usize) -> Result<LmState> {
        let mut g = self.graph(0, false);
        let e = g.embedding(g.p(self.embed), &[token])?;
        let prev = LstmState {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
        };
        let next = self.cell.step(&mut g, e, prev)?;
        let logits = self.out.forward(&mut g, next.h)?;
        let lp = g.log_softmax(logits)?;
        Ok(LmState {
            h: g.value(next.h).clone(),
            c: g.value(next.c).clone(),
            log_probs: g.value(lp).data().to_vec(),
        })
    }

    /// `log p(tokens eos)`.
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        let mut g = self.graph(0, false);
        let nll = self.nll_sum(&mut g, tokens)?;
        Ok(-g.value(nll).item())
    }
}

/// `log p(next | prefix)`, where `prefix` starts with the start symbol.
pub fn lm_score(lm: &RnnLm, prefix: &[usize], next: usize) -> Result<f64> {
    if prefix.first() != Some(&SOS_EOS) {
        return Err(dim_err!("LM prefix must begin with the start symbol"));
    }
    if next >= lm.vocab_size() {
        return Err(Error::Index(format!("token {next} outside LM vocabulary {}", lm.vocab_size())));
    }
    let mut state = lm.start()?;
    for &tok in &prefix[1..] {
        state = lm.advance(&state, tok)?;
    }
    Ok(state.log_probs[next])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut lm = RnnLm::new(LmConfig {
            vocab_size: 8,
            units: 6,
            seed: 3,
        })
        .unwrap();
        let w = lm.out.w;
        lm.params.set(w, Tensor::zeros(&[6, 8])).unwrap();
        let s = lm_score(&lm, &[SOS_EOS, 4, 5], 3).unwrap();
        assert!((s + 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rows_normalize() {
        let lm = RnnLm::new(LmConfig {
            vocab_size: 9,
            units: 5,
            seed: 4,
        })
        .unwrap();
        let mut state = lm.start().unwrap();
        for tok in [3, 7, 8, 3] {
            let total: f64 = state.log_probs.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            state = lm.advance(&state, tok).unwrap();
        }
    }

    #[test]
    fn incremental_scores_match_teacher_forcing() {
        let lm = RnnLm::new(LmConfig {
            vocab_size: 7,
            units: 4,
            seed: 5,
        })
        .unwrap();
        let tokens = [3, 6, 4, 4];
        let mut state = lm.start().unwrap();
        let mut total = 0.0;
        for &t in &tokens {
            total += state.log_probs[t];
            state = lm.advance(&state, t).unwrap();
        }
        total += state.log_probs[SOS_EOS];
        assert!((total - lm.sequence_log_prob(&tokens).unwrap()).abs() < 1e-10);
        let direct = lm_score(&lm, &[SOS_EOS, 3, 6], 4).unwrap();
        let mut s = lm.start().unwrap();
        s = lm.advance(&s, 3).unwrap();
        s = lm.advance(&s, 6).unwrap();
        assert_eq!(direct, s.log_probs[4]);
    }

    #[test]
    fn reload_from_params() {
        let lm = RnnLm::new(LmConfig {
            vocab_size: 6,
            units: 3,
            seed: 6,
        })
        .unwrap();
        let back = RnnLm::from_params(lm.params.clone()).unwrap();
        assert_eq!(back.config.units, 3);
        assert_eq!(back.sequence_log_prob(&[3, 4]).unwrap(), lm.sequence_log_prob(&[3, 4]).unwrap());
    }
}
