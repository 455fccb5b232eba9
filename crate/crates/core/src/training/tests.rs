use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{SpeechExample, TtsExample};
use crate::models::{ModelConfig, Task};
use crate::tensor::Tensor;

fn small(task: Task, vocab: usize, feat: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy_transformer(task, vocab, feat);
    cfg.d_att = 8;
    cfg.d_ff = 12;
    cfg.enc_layers = 1;
    cfg.dec_layers = 2;
    cfg.dropout_rate = 0.0;
    cfg.tts.prenet_units = 6;
    cfg.tts.postnet_layers = 2;
    cfg.tts.postnet_channels = 4;
    cfg.tts.postnet_kernel = 3;
    cfg.tts.prenet_dropout = 0.0;
    cfg
}

fn speech_data(rng: &mut ChaCha8Rng, n: usize, vocab: usize, feat: usize) -> Vec<SpeechExample> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=3);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(3..vocab)).collect();
            let t = 12 * len + rng.random_range(0..6);
            let feats = Tensor::new(vec![t, feat], (0..t * feat).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            SpeechExample {
                utt_id: format!("u{i}"),
                feats,
                tokens,
            }
        })
        .collect()
}

fn tts_data(rng: &mut ChaCha8Rng, n: usize, vocab: usize, feat: usize) -> Vec<TtsExample> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=3);
            let text: Vec<usize> = (0..len).map(|_| rng.random_range(3..vocab)).collect();
            let t = 2 * len + rng.random_range(0..3);
            let feats = Tensor::new(vec![t, feat], (0..t * feat).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            TtsExample {
                utt_id: format!("t{i}"),
                text,
                feats,
            }
        })
        .collect()
}

#[test]
fn early_stopping_traces() {
    assert_eq!(early_stopping(&[3.0, 2.0, 2.5, 2.4, 2.6], 3), Some(5));
    assert_eq!(early_stopping(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], 3), None);
    assert_eq!(early_stopping(&[1.0; 4], 3), Some(4));
    assert_eq!(early_stopping(&[1.0; 3], 3), None);
    assert_eq!(early_stopping(&[1.0, 0.99995, 0.99992, 0.99991], 3), Some(4));
}

/// Parameters after one Adam step from the same start, comparing one
/// batch with its split into `k` micro-batches.
fn max_update_gap(model: &Model, data: &Dataset, k: usize) -> (f64, f64) {
    let obj = ObjectiveConfig::default();
    let step_with = |parts: &[Batch<'_>]| {
        let mut m = model.clone();
        let (grads, report) = accumulate_gradients(&m, parts, &obj, 5, 1).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam { lr: 1e-2 }, m.params(), 8);
        opt.update(m.params_mut(), &grads).unwrap();
        (m, report)
    };
    let (big, big_report) = step_with(&[data.all()]);
    let parts: Vec<Batch<'_>> = match data {
        Dataset::Speech(d) => d.chunks(d.len().div_ceil(k)).map(Batch::Speech).collect(),
        Dataset::Tts(d) => d.chunks(d.len().div_ceil(k)).map(Batch::Tts).collect(),
    };
    assert_eq!(parts.len(), k);
    let (acc, acc_report) = step_with(&parts);
    let gap = big
        .params()
        .iter()
        .zip(acc.params().iter())
        .map(|((_, a), (_, b))| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    (gap, (big_report.total - acc_report.total).abs())
}

#[test]
fn accumulation_matches_the_big_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let asr = Model::new(small(Task::Asr, 7, 4)).unwrap();
    let data = Dataset::Speech(speech_data(&mut rng, 8, 7, 4));
    for k in [1, 4] {
        let (gap, loss_gap) = max_update_gap(&asr, &data, k);
        assert!(gap < 1e-10 && loss_gap < 1e-10, "asr k={k}: {gap} {loss_gap}");
    }
    let mut cfg = small(Task::Tts, 7, 3);
    cfg.tts.guided_layers = 2;
    cfg.tts.guided_heads = 2;
    let tts = Model::new(cfg).unwrap();
    let data = Dataset::Tts(tts_data(&mut rng, 8, 7, 3));
    let (gap, loss_gap) = max_update_gap(&tts, &data, 4);
    assert!(gap < 1e-10 && loss_gap < 1e-10, "tts: {gap} {loss_gap}");
}

#[test]
fn st_objective_uses_attention_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let st = Model::new(small(Task::St, 7, 4)).unwrap();
    let data = speech_data(&mut rng, 3, 7, 4);
    let r = evaluate(&st, Batch::Speech(&data), &ObjectiveConfig::default()).unwrap();
    assert_eq!(r.ctc, 0.0);
    assert_eq!(r.total, r.s2s);
    assert_eq!(r.tokens, data.iter().map(|e| e.tokens.len() + 1).sum::<usize>());
    let tts = Model::new(small(Task::Tts, 7, 4)).unwrap();
    assert!(matches!(
        evaluate(&tts, Batch::Speech(&data), &ObjectiveConfig::default()),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn batches_cover_every_example_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let data = Dataset::Speech(speech_data(&mut rng, 37, 7, 2));
    let batches = make_batches(&data, 4, 9, 1);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort();
    assert_eq!(seen, (0..37).collect::<Vec<_>>());
    assert!(batches.iter().all(|b| b.len() <= 4));
    assert_eq!(batches, make_batches(&data, 4, 9, 1));
    assert_ne!(batches, make_batches(&data, 4, 9, 2));
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        optimizer: OptimizerKind::Adam { lr: 3e-3 },
        average_last: Some(2),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut cfg = small(Task::Asr, 6, 3);
    cfg.dropout_rate = 0.1;
    let train = Dataset::Speech(speech_data(&mut rng, 10, 6, 3));
    let dev = Dataset::Speech(speech_data(&mut rng, 3, 6, 3));
    let run = |dir: &std::path::Path| {
        let mut m = Model::new(cfg.clone()).unwrap();
        let out = train_loop(&mut m, &train, Some(&dev), &quick_config(3), Some(dir), None).unwrap();
        (m, out)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, oa) = run(a.path());
    let (mb, ob) = run(b.path());
    assert_eq!(
        std::fs::read(a.path().join("train.csv")).unwrap(),
        std::fs::read(b.path().join("train.csv")).unwrap()
    );
    for e in 1..=3 {
        let p = epoch_checkpoint_path(a.path(), e);
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(epoch_checkpoint_path(b.path(), e)).unwrap()
        );
    }
    assert_eq!(ma.params().iter().collect::<Vec<_>>(), mb.params().iter().collect::<Vec<_>>());
    assert_eq!(oa.log.len(), 9);
    assert!(log_csv(&oa.log).starts_with(LOG_HEADER));
    assert!(oa.log.iter().all(|r| r.wall_ms == 0));
    assert_eq!(ob.epochs_run, 3);

    let c = tempfile::tempdir().unwrap();
    let mut m = Model::new(cfg.clone()).unwrap();
    let first = train_loop(&mut m, &train, Some(&dev), &quick_config(1), Some(c.path()), None).unwrap();
    let mut m = Model::new(cfg.clone()).unwrap();
    let rest = train_loop(&mut m, &train, Some(&dev), &quick_config(3), Some(c.path()), Some(&first.last)).unwrap();
    assert_eq!(rest.epochs_run, 2);
    assert_eq!(rest.last, oa.last);
    assert_eq!(rest.averaged.params, oa.averaged.params);
}

#[test]
fn training_reduces_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let train = Dataset::Speech(speech_data(&mut rng, 8, 6, 3));
    let mut m = Model::new(small(Task::Asr, 6, 3)).unwrap();
    let before = evaluate(&m, train.all(), &ObjectiveConfig::default()).unwrap().total;
    let cfg = TrainConfig {
        epochs: 30,
        average_last: Some(1),
        ..quick_config(30)
    };
    train_loop(&mut m, &train, None, &cfg, None, None).unwrap();
    let after = evaluate(&m, train.all(), &ObjectiveConfig::default()).unwrap().total;
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn lm_training_lowers_perplexity() {
    let seqs: Vec<Vec<usize>> = (0..12).map(|i| vec![3 + i % 3, 4, 5 + i % 2]).collect();
    let mut lm = crate::decoding::RnnLm::new(crate::decoding::LmConfig {
        vocab_size: 7,
        units: 8,
        seed: 3,
    })
    .unwrap();
    let before = lm_nll(&lm, &seqs).unwrap();
    let hist = train_lm(&mut lm, &seqs, 20, 4, 1e-2, 1).unwrap();
    assert!(hist[19] < before && hist[19] < hist[0]);
}

#[test]
fn invalid_training_configs() {
    let mut m = Model::new(small(Task::Asr, 6, 3)).unwrap();
    let data = Dataset::Speech(Vec::new());
    assert!(matches!(
        train_loop(&mut m, &data, None, &quick_config(1), None, None),
        Err(crate::Error::Data(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_config(1)
    };
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
}
