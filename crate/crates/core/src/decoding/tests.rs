use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::ctc_log_likelihood;
use crate::models::{Body, ModelConfig, Task, TtsModel};

fn tiny_asr(seed: u64, vocab: usize) -> SpeechModel {
    let mut cfg = ModelConfig::toy_transformer(Task::Asr, vocab, 3);
    cfg.d_att = 4;
    cfg.d_ff = 6;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.dropout_rate = 0.0;
    cfg.seed = seed;
    SpeechModel::new(cfg).unwrap()
}

fn random_feats(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor {
    Tensor::new(vec![t, f], (0..t * f).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Every output of at most `max_len − 1` tokens followed by the end
/// symbol, scored from scratch.
fn exhaustive(model: &SpeechModel, x_e: &Tensor, ctc: &Tensor, w: &ScoreWeights, max_len: usize) -> (Vec<usize>, f64) {
    let v = model.config.vocab_size;
    let alphabet: Vec<usize> = (0..v).filter(|&t| t != BLANK && t != SOS_EOS).collect();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    let mut best: Option<Hypothesis> = None;
    for _ in 0..max_len {
        let mut next = Vec::new();
        for toks in &frontier {
            let mut prefix = vec![SOS_EOS];
            let mut log_s2s = 0.0;
            for &t in toks {
                log_s2s += model.next_log_probs(x_e, &prefix).unwrap()[t];
                prefix.push(t);
            }
            log_s2s += model.next_log_probs(x_e, &prefix).unwrap()[SOS_EOS];
            prefix.push(SOS_EOS);
            let log_ctc = ctc_log_likelihood(ctc, toks).unwrap_or(f64::NEG_INFINITY);
            let hyp = Hypothesis {
                prefix,
                log_s2s,
                log_ctc,
                log_lm: 0.0,
                combined: w.combine(log_s2s, log_ctc, 0.0),
                ctc_state: None,
                lm_state: None,
                finished: true,
            };
            if best.as_ref().is_none_or(|b| rank(&hyp, b) == Ordering::Less) {
                best = Some(hyp);
            }
            for &a in &alphabet {
                let mut t = toks.clone();
                t.push(a);
                next.push(t);
            }
        }
        frontier = next;
    }
    let b = best.unwrap();
    (b.tokens().to_vec(), b.combined)
}

#[test]
fn full_beam_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for seed in 0..6 {
        let model = tiny_asr(seed, 5);
        let feats = random_feats(&mut rng, 12, 3);
        let (x_e, ctc) = model.encode_tensor(&feats).unwrap();
        let ctc = ctc.unwrap();
        let cfg = BeamConfig {
            beam_size: 256,
            max_len: Some(4),
            ..BeamConfig::default()
        };
        let result = beam_search(&model, &feats, None, &cfg).unwrap();
        let w = ScoreWeights::new(&cfg, true, false);
        let (tokens, score) = exhaustive(&model, &x_e, &ctc, &w, 4);
        assert_eq!(result.best.tokens(), &tokens[..], "seed {seed}");
        assert!((result.best.combined - score).abs() < 1e-9);
    }
}

#[test]
fn combined_score_is_recomputable() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let model = tiny_asr(3, 7);
    let lm = RnnLm::new(LmConfig {
        vocab_size: 7,
        units: 5,
        seed: 2,
    })
    .unwrap();
    let feats = random_feats(&mut rng, 16, 3);
    let cfg = BeamConfig {
        beam_size: 5,
        ..BeamConfig::default()
    };
    let result = beam_search(&model, &feats, Some(&lm), &cfg).unwrap();
    let w = ScoreWeights::new(&cfg, true, true);
    for h in &result.nbest {
        assert!(h.finished);
        assert!((h.recompute(&w) - h.combined).abs() < 1e-12);
        let lm_total = lm.sequence_log_prob(h.tokens()).unwrap();
        assert!((h.log_lm - lm_total).abs() < 1e-10);
    }
}

#[test]
fn zero_lm_weight_ignores_the_lm() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let model = tiny_asr(4, 6);
    let feats = random_feats(&mut rng, 16, 3);
    let cfg = BeamConfig {
        beam_size: 4,
        gamma: 0.0,
        ..BeamConfig::default()
    };
    let plain = beam_search(&model, &feats, None, &cfg).unwrap();
    for seed in 0..3 {
        let lm = RnnLm::new(LmConfig {
            vocab_size: 6,
            units: 4,
            seed,
        })
        .unwrap();
        let fused = beam_search(&model, &feats, Some(&lm), &cfg).unwrap();
        assert_eq!(fused.best.prefix, plain.best.prefix);
        assert_eq!(fused.best.combined, plain.best.combined);
    }
}

#[test]
fn attention_only_beam_of_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for seed in 0..5 {
        let model = tiny_asr(seed, 7);
        let feats = random_feats(&mut rng, 20, 3);
        let cfg = BeamConfig {
            beam_size: 1,
            lambda: 1.0,
            gamma: 0.0,
            ..BeamConfig::default()
        };
        let beam = beam_search(&model, &feats, None, &cfg).unwrap();
        let (greedy, done) = greedy_decode(&model, &feats, Some(cfg.step_budget(5))).unwrap();
        assert_eq!(beam.best.tokens(), &greedy[..]);
        assert_eq!(!beam.unfinished, done);
    }
}

#[test]
fn extensions_never_raise_the_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let model = tiny_asr(5, 6);
    let feats = random_feats(&mut rng, 16, 3);
    let (x_e, ctc) = model.encode_tensor(&feats).unwrap();
    let ctc = ctc.unwrap();
    let w = ScoreWeights::new(&BeamConfig::default(), true, false);
    let result = beam_search(&model, &feats, None, &BeamConfig::default()).unwrap();
    for h in &result.nbest {
        let mut prefix = vec![SOS_EOS];
        let mut state = CtcState::initial(&ctc).unwrap();
        let mut s2s = 0.0;
        let mut prev = 0.0;
        for &t in &h.prefix[1..] {
            s2s += model.next_log_probs(&x_e, &prefix).unwrap()[t];
            state = ctc_prefix_score(&state, t, &ctc).unwrap().1;
            prefix.push(t);
            let score = w.combine(s2s, state.score, 0.0);
            assert!(score <= prev + 1e-12);
            prev = score;
        }
        assert!((prev - h.combined).abs() < 1e-10);
    }
}

#[test]
fn wider_beams_never_score_worse() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let model = tiny_asr(0, 7);
    let feats = random_feats(&mut rng, 16, 3);
    let mut last = f64::NEG_INFINITY;
    for beam_size in [1, 2, 4, 8] {
        let cfg = BeamConfig {
            beam_size,
            max_len: Some(12),
            ..BeamConfig::default()
        };
        let result = beam_search(&model, &feats, None, &cfg).unwrap();
        assert!(!result.unfinished);
        assert!(
            result.best.combined >= last - 1e-12,
            "beam {beam_size}: {} < {last}",
            result.best.combined
        );
        last = result.best.combined;
    }
}

#[test]
fn no_end_symbol_returns_the_best_live_hypothesis() {
    let cfg = BeamConfig {
        beam_size: 3,
        max_len: Some(3),
        ..BeamConfig::default()
    };
    let s2s = |_: &[usize]| Ok(vec![f64::NEG_INFINITY, -3.0, -50.0, -0.1, -2.5]);
    let result = beam_search_with(s2s, None, None, &cfg, 4).unwrap();
    assert!(result.unfinished);
    assert_eq!(result.best.tokens(), &[3, 3, 3]);
    assert!(result.nbest.is_empty());
}

#[test]
fn ties_prefer_shorter_then_smaller() {
    let cfg = BeamConfig {
        beam_size: 10,
        max_len: Some(2),
        ..BeamConfig::default()
    };
    let flat = |_: &[usize]| Ok(vec![0.0; 5]);
    let result = beam_search_with(flat, None, None, &cfg, 4).unwrap();
    assert!(result.best.tokens().is_empty());
    let (g, done) = greedy_decode_with(flat, 3).unwrap();
    assert!(g.is_empty() && done);
    let narrow = BeamConfig { beam_size: 3, ..cfg };
    let no_eos = |_: &[usize]| Ok(vec![0.0, -1.0, -9.0, -1.0, -1.0]);
    let result = beam_search_with(no_eos, None, None, &narrow, 4).unwrap();
    assert!(result.unfinished);
    assert_eq!(result.best.tokens(), &[1, 1]);
}

#[test]
fn invalid_inputs_are_errors() {
    let model = tiny_asr(1, 5);
    let empty = Tensor::zeros(&[0, 3]);
    assert!(beam_search(&model, &empty, None, &BeamConfig::default()).is_err());
    let bad = BeamConfig {
        lambda: 1.5,
        ..BeamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    assert!(matches!(
        beam_search(&model, &random_feats(&mut rng, 8, 3), None, &bad),
        Err(Error::Config(_))
    ));
    let s2s = |_: &[usize]| Ok(vec![0.0; 5]);
    assert!(beam_search_with(s2s, None, None, &BeamConfig::default(), 0).is_err());
}

fn tiny_tts() -> TtsModel {
    let mut cfg = ModelConfig::toy_transformer(Task::Tts, 8, 3);
    cfg.body = Body::Transformer;
    cfg.d_att = 4;
    cfg.d_ff = 6;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.dropout_rate = 0.0;
    cfg.tts.prenet_units = 4;
    cfg.tts.postnet_layers = 2;
    cfg.tts.postnet_channels = 3;
    cfg.tts.postnet_kernel = 3;
    cfg.tts.guided_layers = 1;
    cfg.tts.guided_heads = 1;
    TtsModel::new(cfg).unwrap()
}

#[test]
fn tts_threshold_extremes() {
    let model = tiny_tts();
    let zero = TtsInferConfig {
        eos_threshold: 0.0,
        ..TtsInferConfig::default()
    };
    let out = tts_infer(&model, &[3, 4, 5], &zero).unwrap();
    assert_eq!(out.stop, StopReason::Eos);
    assert_eq!(out.feats.rows(), 1);
    let one = TtsInferConfig {
        eos_threshold: 1.0,
        max_frames: 7,
        ..TtsInferConfig::default()
    };
    let out = tts_infer(&model, &[3, 4, 5], &one).unwrap();
    assert_eq!(out.stop, StopReason::Cap);
    assert_eq!(out.feats.rows(), 7);
    assert_eq!(out.eos_probs.len(), 7);
}

#[test]
fn tts_inference_is_seeded() {
    let model = tiny_tts();
    let cfg = TtsInferConfig {
        eos_threshold: 1.0,
        max_frames: 4,
        seed: 9,
    };
    let a = tts_infer(&model, &[3, 6], &cfg).unwrap();
    let b = tts_infer(&model, &[3, 6], &cfg).unwrap();
    assert_eq!(a.feats, b.feats);
    assert!(tts_infer(&model, &[], &cfg).is_err());
}
