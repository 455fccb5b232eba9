use crate::error::{Error, Result};
use crate::models::TtsModel;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TtsInferConfig {
    /// Stop once `σ(eos logit)` exceeds this.
    pub eos_threshold: f64,
    pub max_frames: usize,
    /// Seed for the inference-time Prenet dropout.
    pub seed: u64,
}

impl Default for TtsInferConfig {
    fn default() -> Self {
        TtsInferConfig {
            eos_threshold: 0.5,
            max_frames: 400,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    Cap,
}

#[derive(Clone, Debug)]
pub struct TtsInference {
    /// Postnet-refined frames `[n × feat_dim]`.
    pub feats: Tensor,
    pub coarse: Tensor,
    pub stop: StopReason,
    /// Stop probability at each decoder step.
    pub eos_probs: Vec<f64>,
}

/// Autoregressive synthesis. Each step feeds the last refined frame back
/// through the Prenet; the returned frames are refined over the complete
/// coarse sequence.
pub fn tts_infer(model: &TtsModel, text: &[usize], cfg: &TtsInferConfig) -> Result<TtsInference> {
    if text.is_empty() {
        return Err(Error::Data("cannot synthesize empty text".into()));
    }
    if cfg.max_frames == 0 || !(0.0..=1.0).contains(&cfg.eos_threshold) {
        return Err(Error::Config("max_frames must be positive and the threshold within [0, 1]".into()));
    }
    let f = model.config.feat_dim;
    let x_e = {
        let mut g = model.graph(cfg.seed, false);
        let x = model.encode(&mut g, text)?;
        g.value(x).clone()
    };
    let mut inputs = vec![0.0; f];
    let mut coarse: Vec<f64> = Vec::new();
    let mut eos_probs = Vec::new();
    let mut stop = StopReason::Cap;
    let mut step = 0u64;
    while coarse.len() / f < cfg.max_frames {
        let mut g = model.graph(cfg.seed.wrapping_add(step + 1), false);
        let steps = inputs.len() / f;
        let x = g.constant(x_e.clone());
        let inp = g.constant(Tensor::new(vec![steps, f], inputs.clone())?);
        let (y_d, _) = model.decode_body(&mut g, x, inp)?;
        let y_last = g.slice_rows(y_d, steps - 1, 1)?;
        let (frames, eos) = model.dec_post(&mut g, y_last)?;
        coarse.extend_from_slice(g.value(frames).data());
        let p = sigmoid(g.value(eos).item());
        eos_probs.push(p);

        let so_far = g.constant(Tensor::new(vec![coarse.len() / f, f], coarse.clone())?);
        let refined = model.postnet.refine(&mut g, so_far)?;
        let rv = g.value(refined);
        inputs.extend_from_slice(rv.row(rv.rows() - 1));
        step += 1;
        if p > cfg.eos_threshold {
            stop = StopReason::Eos;
            break;
        }
    }
    let n = (coarse.len() / f).min(cfg.max_frames);
    coarse.truncate(n * f);
    let coarse = Tensor::new(vec![n, f], coarse)?;
    let mut g = model.graph(cfg.seed, false);
    let c = g.constant(coarse.clone());
    let refined = model.postnet.refine(&mut g, c)?;
    let feats = g.value(refined).clone();
    Ok(TtsInference {
        feats,
        coarse,
        stop,
        eos_probs,
    })
}
