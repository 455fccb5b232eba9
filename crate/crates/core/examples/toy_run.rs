//! Trains one toy model through the library API and prints dev losses and
//! decoding results.
//!
//! `cargo run --release --example toy_run -- asr|st|tts transformer|rnn EPOCHS K WARMUP BATCH SEED N_TRAIN`

use std::time::Instant;

use s2s_core::decoding::{tts_infer, BeamConfig, StopReason, TtsInferConfig};
use s2s_core::harness::toy::generate;
use s2s_core::harness::{decode_corpus, metrics::corpus_counts, teacher_forced_accuracy, DecodeMode, ToySpec, Transform};
use s2s_core::models::{Body, ModelConfig, Task};
use s2s_core::training::{evaluate, train_loop, Batch, Dataset, Model, ObjectiveConfig, OptimizerKind, TrainConfig};

fn arg<T: std::str::FromStr>(args: &[String], i: usize, d: T) -> T {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = match args.get(1).map(String::as_str) {
        Some("st") => Task::St,
        Some("tts") => Task::Tts,
        _ => Task::Asr,
    };
    let body = if args.get(2).map(String::as_str) == Some("rnn") {
        Body::Rnn
    } else {
        Body::Transformer
    };
    let epochs: usize = arg(&args, 3, 15);
    let k: f64 = arg(&args, 4, 0.15);
    let warmup: u64 = arg(&args, 5, 200);
    let bs: usize = arg(&args, 6, 2);
    let seed: u64 = arg(&args, 7, 1);
    let n_train: usize = arg(&args, 8, 200);
    let transform = match task {
        Task::Asr => Transform::Identity,
        Task::St => Transform::BigramSwap,
        Task::Tts => Transform::Inverse,
    };
    let ds = generate(&ToySpec {
        transform,
        train: n_train,
        ..ToySpec::default()
    })
    .unwrap();
    let v = ds.vocab.size();
    let mut cfg = match body {
        Body::Transformer => ModelConfig::toy_transformer(task, v, 16),
        Body::Rnn => ModelConfig::toy_rnn(task, v, 16),
    };
    cfg.seed = seed;
    cfg.dropout_rate = arg(&args, 9, cfg.dropout_rate);
    let mut model = Model::new(cfg).unwrap();
    let train = ds.dataset("train", task).unwrap();
    let dev = ds.dataset("dev", task).unwrap();
    let optimizer = match body {
        Body::Transformer => OptimizerKind::AdamNoam { k, warmup },
        Body::Rnn => OptimizerKind::Adadelta { lr: k },
    };
    let tc = TrainConfig {
        epochs,
        batch_size: bs,
        optimizer,
        average_last: Some(5),
        log_wall_clock: true,
        seed,
        ..TrainConfig::default()
    };
    let obj = ObjectiveConfig::default();
    let init = match &dev {
        Dataset::Speech(d) => evaluate(&model, Batch::Speech(d), &obj).unwrap(),
        Dataset::Tts(d) => evaluate(&model, Batch::Tts(d), &obj).unwrap(),
    };
    println!("init dev {:.4} l1 {:.4} guided {:.4}", init.total, init.l1, init.guided);
    let t0 = Instant::now();
    let out = train_loop(&mut model, &train, Some(&dev), &tc, None, None).unwrap();
    for (i, d) in out.dev.iter().enumerate() {
        println!(
            "epoch {} dev {:.4} s2s {:.4} ctc {:.4} l1 {:.4} bce {:.4} guided {:.4}",
            i + 1,
            d.total,
            d.s2s,
            d.ctc,
            d.l1,
            d.bce,
            d.guided
        );
    }
    println!(
        "avg dev {:.4} time {:.1}s",
        out.averaged_dev.unwrap().total,
        t0.elapsed().as_secs_f64()
    );
    match (&model, ds.dataset("test", task).unwrap()) {
        (Model::Speech(m), Dataset::Speech(test)) => {
            println!("tf acc {:.4}", teacher_forced_accuracy(m, &test).unwrap());
            let refs: Vec<Vec<usize>> = test.iter().map(|e| e.tokens.clone()).collect();
            let hyps = decode_corpus(m, &test, DecodeMode::Greedy, None).unwrap();
            println!("greedy CER {:.4}", corpus_counts(&refs, &hyps).rate());
            let hyps = decode_corpus(
                m,
                &test,
                DecodeMode::Beam(BeamConfig {
                    beam_size: 4,
                    ..BeamConfig::default()
                }),
                None,
            )
            .unwrap();
            println!("beam4 CER {:.4}", corpus_counts(&refs, &hyps).rate());
        }
        (Model::Tts(m), Dataset::Tts(test)) => {
            let t1 = Instant::now();
            let mut eos = 0;
            for e in &test {
                let r = tts_infer(
                    m,
                    &e.text,
                    &TtsInferConfig {
                        eos_threshold: 0.5,
                        max_frames: 2 * e.feats.rows() + 20,
                        seed,
                    },
                )
                .unwrap();
                eos += usize::from(r.stop == StopReason::Eos);
                println!("  {} ref {} got {} {:?}", e.utt_id, e.feats.rows(), r.feats.rows(), r.stop);
            }
            println!("eos stop {}/{} ({:.1}s)", eos, test.len(), t1.elapsed().as_secs_f64());
        }
        _ => unreachable!(),
    }
}
