//! Training objectives: label cross-entropy, CTC, the joint ASR loss and
//! the TTS composite.
//!
//! Every loss has a `*_sum` form returning an unnormalized sum, so a
//! caller can divide by counts taken over a whole batch and make
//! micro-batch accumulation exact.

mod ctc;

pub use ctc::{ctc_alpha, ctc_beta, ctc_log_likelihood, ctc_nll, extend_with_blanks, min_frames};

use crate::error::{dim_err, Error, Result};
use crate::models::DecoderLayerRecord;
use crate::tensor::{Graph, Tensor, Var};

/// Default attention share in the joint ASR loss (CTC share `1 − α`).
pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_POS_WEIGHT: f64 = 5.0;
pub const DEFAULT_GUIDED_SIGMA: f64 = 0.4;

/// Per-step loss values written to the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub s2s: f64,
    pub ctc: f64,
    pub l1: f64,
    pub bce: f64,
    pub guided: f64,
    /// Decoder targets (tokens plus end-of-sequence) in the batch.
    pub tokens: usize,
    /// Target feature frames in the batch.
    pub frames: usize,
}

impl LossReport {
    pub fn asr(s2s: f64, ctc: f64, alpha: f64, tokens: usize) -> Self {
        LossReport {
            total: joint_asr_value(s2s, ctc, alpha),
            s2s,
            ctc,
            tokens,
            ..Self::default()
        }
    }

    pub fn tts(l1: f64, bce: f64, guided: f64, frames: usize) -> Self {
        LossReport {
            total: l1 + bce + guided,
            l1,
            bce,
            guided,
            frames,
            ..Self::default()
        }
    }

    /// Adds another report's values and counts; micro-batch reports are
    /// already normalized by the global count, so the sum is the batch value.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.total += other.total;
        self.s2s += other.s2s;
        self.ctc += other.ctc;
        self.l1 += other.l1;
        self.bce += other.bce;
        self.guided += other.guided;
        self.tokens += other.tokens;
        self.frames += other.frames;
    }
}

/// `−Σ_t log p(targets[t])`.
pub fn s2s_nll_sum(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let picked = g.pick(log_probs, targets)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Mean over target positions of `−log p(target)`.
pub fn s2s_cross_entropy(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(dim_err!("cross-entropy over zero targets"));
    }
    let s = s2s_nll_sum(g, log_probs, targets)?;
    g.scale(s, 1.0 / targets.len() as f64)
}

/// `(1 − ε)·NLL + ε·(−mean_v log p_v)` summed over positions; `ε = 0` is
/// plain cross-entropy.
pub fn smoothed_nll_sum(g: &mut Graph, log_probs: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    let nll = s2s_nll_sum(g, log_probs, targets)?;
    if epsilon == 0.0 {
        return Ok(nll);
    }
    let v = g.shape(log_probs)[1] as f64;
    let all = g.sum(log_probs)?;
    let uniform = g.scale(all, -epsilon / v)?;
    let main = g.scale(nll, 1.0 - epsilon)?;
    g.add(main, uniform)
}

/// `L = α·s2s + (1 − α)·ctc`.
pub fn joint_asr_loss(g: &mut Graph, s2s: Var, ctc: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = g.scale(s2s, alpha)?;
    let c = g.scale(ctc, 1.0 - alpha)?;
    g.add(a, c)
}

pub fn joint_asr_value(s2s: f64, ctc: f64, alpha: f64) -> f64 {
    alpha * s2s + (1.0 - alpha) * ctc
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `Σ |pred − target|` over the first `rows` rows.
pub fn l1_sum(g: &mut Graph, pred: Var, target: &Tensor, rows: usize) -> Result<Var> {
    let p = if g.shape(pred)[0] == rows {
        pred
    } else {
        g.slice_rows(pred, 0, rows)?
    };
    let t = if target.rows() == rows {
        target.clone()
    } else {
        Tensor::new(vec![rows, target.cols()], target.data()[..rows * target.cols()].to_vec())?
    };
    if g.shape(p) != t.shape() {
        return Err(dim_err!("L1 prediction {:?} vs target {:?}", g.shape(p), t.shape()));
    }
    let t = g.constant(t);
    let d = g.sub(p, t)?;
    let a = g.abs(d)?;
    g.sum(a)
}

/// Mean absolute error of the coarse plus that of the refined prediction,
/// over the first `frames` target rows.
pub fn tts_l1(g: &mut Graph, coarse: Var, refined: Var, target: &Tensor, frames: usize) -> Result<Var> {
    let n = (frames * target.cols()) as f64;
    if n == 0.0 {
        return Err(dim_err!("L1 over an empty target"));
    }
    let c = l1_sum(g, coarse, target, frames)?;
    let r = l1_sum(g, refined, target, frames)?;
    let s = g.add(c, r)?;
    g.scale(s, 1.0 / n)
}

/// `Σ_t −[w·y·log σ(z) + (1 − y)·log(1 − σ(z))]` via softplus, stable for
/// large `|z|`.
pub fn weighted_bce_sum(g: &mut Graph, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
    let n = g.value(logits).len();
    if targets.len() != n {
        return Err(dim_err!("{} stop labels for {n} logits", targets.len()));
    }
    let z = g.reshape(logits, vec![n])?;
    let neg = g.scale(z, -1.0)?;
    let sp_neg = g.softplus(neg)?;
    let sp_pos = g.softplus(z)?;
    let wp = g.constant(Tensor::vector(targets.iter().map(|y| pos_weight * y).collect()));
    let wn = g.constant(Tensor::vector(targets.iter().map(|y| 1.0 - y).collect()));
    let a = g.mul(sp_neg, wp)?;
    let b = g.mul(sp_pos, wn)?;
    let s = g.add(a, b)?;
    g.sum(s)
}

pub fn weighted_bce(g: &mut Graph, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
    if targets.is_empty() {
        return Err(dim_err!("BCE over zero frames"));
    }
    let s = weighted_bce_sum(g, logits, targets, pos_weight)?;
    g.scale(s, 1.0 / targets.len() as f64)
}

/// `W[t, u] = 1 − exp(−(u/n_enc − t/n_dec)² / (2σ²))`.
pub fn guided_attention_weights(n_dec: usize, n_enc: usize, sigma: f64) -> Tensor {
    let mut data = Vec::with_capacity(n_dec * n_enc);
    for t in 0..n_dec {
        for u in 0..n_enc {
            let d = u as f64 / n_enc as f64 - t as f64 / n_dec as f64;
            data.push(1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::new(vec![n_dec, n_enc], data).expect("consistent shape")
}

/// Which encoder-decoder attention maps receive the guided loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuidedSelection {
    /// Count of decoder layers, taken from the top of the stack.
    pub layers: usize,
    /// Count of heads per selected layer, taken from head 0.
    pub heads: usize,
}

impl Default for GuidedSelection {
    fn default() -> Self {
        GuidedSelection { layers: 2, heads: 2 }
    }
}

/// Selected attention maps, clamped to the layers and heads that exist.
pub fn select_heads(records: &[DecoderLayerRecord], sel: GuidedSelection) -> Vec<Var> {
    let start = records.len().saturating_sub(sel.layers);
    records[start..]
        .iter()
        .flat_map(|r| r.src_att.weights.iter().take(sel.heads).copied())
        .collect()
}

/// `Σ_heads Σ_{t,u} A[t,u]·W[t,u]` and the normalizer `heads × n_dec`.
pub fn guided_attention_sum(g: &mut Graph, maps: &[Var], sigma: f64) -> Result<(Var, usize)> {
    if maps.is_empty() {
        return Err(Error::Config("guided attention selects no heads".into()));
    }
    let mut total: Option<Var> = None;
    let mut rows = 0;
    for &a in maps {
        let (n_dec, n_enc) = match g.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(dim_err!("attention map must be a matrix, got {:?}", s)),
        };
        let w = g.constant(guided_attention_weights(n_dec, n_enc, sigma));
        let aw = g.mul(a, w)?;
        let s = g.sum(aw)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        rows += n_dec;
    }
    Ok((total.expect("non-empty"), rows))
}

/// Per selected head, `Σ A·W / n_dec`, averaged over heads.
pub fn guided_attention_loss(g: &mut Graph, maps: &[Var], sigma: f64) -> Result<Var> {
    let (s, rows) = guided_attention_sum(g, maps, sigma)?;
    g.scale(s, 1.0 / rows as f64)
}

/// `l1 + bce + guided`.
pub fn tts_total_loss(g: &mut Graph, l1: Var, bce: Var, guided: Var) -> Result<Var> {
    let s = g.add(l1, bce)?;
    g.add(s, guided)
}
