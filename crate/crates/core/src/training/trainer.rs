//! Epoch loop: bucketed minibatches, accumulation, logging, checkpoints
//! and the final averaged model.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{spec_augment, SpecAugmentConfig};
use super::checkpoint::{average_checkpoints, Checkpoint};
use super::objective::{accumulate_gradients, evaluate, micro_seed, Batch, Model, ObjectiveConfig};
use super::optim::{clip_grad_norm, grad_norm, OptimizerKind, OptimizerState};
use super::EarlyStopping;
use crate::data::{SpeechExample, TtsExample};
use crate::decoding::RnnLm;
use crate::error::{Error, Result};
use crate::losses::LossReport;

/// Training examples of one task family.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Speech(Vec<SpeechExample>),
    Tts(Vec<TtsExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Speech(d) => d.len(),
            Dataset::Tts(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Batch<'_> {
        match self {
            Dataset::Speech(d) => Batch::Speech(d),
            Dataset::Tts(d) => Batch::Tts(d),
        }
    }

    /// Bucketing key: input frames for speech, target frames for TTS.
    fn length(&self, i: usize) -> usize {
        match self {
            Dataset::Speech(d) => d[i].feats.rows(),
            Dataset::Tts(d) => d[i].feats.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accum_steps: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub objective: ObjectiveConfig,
    pub augment: SpecAugmentConfig,
    /// Checkpoints averaged into the final model; `None` means
    /// `min(10, epochs)`.
    pub average_last: Option<usize>,
    /// Patience for early stopping on the dev loss; `None` disables it.
    pub early_stopping: Option<usize>,
    /// Write elapsed milliseconds into the log; otherwise 0, which keeps
    /// logs byte-identical across runs.
    pub log_wall_clock: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            accum_steps: 1,
            optimizer: OptimizerKind::AdamNoam { k: 1.0, warmup: 2000 },
            clip_norm: Some(5.0),
            objective: ObjectiveConfig::default(),
            augment: SpecAugmentConfig::default(),
            average_last: None,
            early_stopping: None,
            log_wall_clock: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("epochs, batch_size and accum_steps must be positive".into()));
        }
        if self.average_last == Some(0) || self.early_stopping == Some(0) {
            return Err(Error::Config("average_last and early_stopping must be positive when set".into()));
        }
        Ok(())
    }

    pub fn average_window(&self) -> usize {
        self.average_last.unwrap_or(self.epochs.min(10))
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,total,s2s,ctc,l1,bce,guided,grad_norm,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, l.total, l.s2s, l.ctc, l.l1, l.bce, l.guided, self.grad_norm, self.wall_ms
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Dev loss after each epoch of this run.
    pub dev: Vec<LossReport>,
    /// Dev loss of the averaged model.
    pub averaged_dev: Option<LossReport>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub last: Checkpoint,
    pub averaged: Checkpoint,
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:03}.ckpt"))
}

/// Batches of example indices: shuffled, then sorted by length within
/// pools of eight batches so each batch holds similar lengths, then the
/// batch order itself is shuffled.
pub fn make_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(micro_seed(seed, epoch as u64, usize::MAX));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * 8) {
        pool.sort_by_key(|&i| (data.length(i), i));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Splits `idx` into at most `k` contiguous, near-equal parts.
fn split(idx: &[usize], k: usize) -> Vec<&[usize]> {
    let k = k.min(idx.len()).max(1);
    let (q, r) = (idx.len() / k, idx.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let n = q + usize::from(i < r);
        out.push(&idx[at..at + n]);
        at += n;
    }
    out
}

enum Owned {
    Speech(Vec<SpeechExample>),
    Tts(Vec<TtsExample>),
}

impl Owned {
    fn batch(&self) -> Batch<'_> {
        match self {
            Owned::Speech(d) => Batch::Speech(d),
            Owned::Tts(d) => Batch::Tts(d),
        }
    }
}

fn gather(data: &Dataset, idx: &[usize], augment: &SpecAugmentConfig, seed: u64) -> Owned {
    match data {
        Dataset::Speech(d) => Owned::Speech(
            idx.iter()
                .map(|&i| {
                    let mut e = d[i].clone();
                    if !augment.is_identity() {
                        e.feats = spec_augment(&e.feats, augment, micro_seed(seed, i as u64, 7));
                    }
                    e
                })
                .collect(),
        ),
        Dataset::Tts(d) => Owned::Tts(idx.iter().map(|&i| d[i].clone()).collect()),
    }
}

/// Runs `cfg.epochs` epochs (fewer if early stopping triggers), saving a
/// checkpoint per epoch and the log to `out_dir` when given, and leaves the
/// averaged parameters in `model`.
///
/// With `resume`, training continues after the checkpoint's epoch using
/// its parameters and optimizer state.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let d_att = model.config().d_att;
    let mut opt = OptimizerState::new(cfg.optimizer, model.params(), d_att);
    let mut start_epoch = 1;
    let mut step = 0u64;
    let mut window: VecDeque<Checkpoint> = VecDeque::new();
    let avg_m = cfg.average_window();
    if let Some(ck) = resume {
        ck.load_into(model.params_mut())?;
        if let Some(o) = &ck.optimizer {
            opt = o.clone();
        }
        start_epoch = ck.epoch as usize + 1;
        step = ck.step;
        if let Some(dir) = out_dir {
            for e in (start_epoch.saturating_sub(avg_m)).max(1)..start_epoch {
                let p = epoch_checkpoint_path(dir, e);
                if p.exists() {
                    window.push_back(Checkpoint::load(&p)?);
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut log = Vec::new();
    let mut dev_hist = Vec::new();
    let mut paths = Vec::new();
    let mut stopper = cfg.early_stopping.map(EarlyStopping::new);
    let mut stopped_early = false;
    let mut last: Option<Checkpoint> = None;
    let mut epochs_run = 0;

    for epoch in start_epoch..=cfg.epochs {
        for idx in make_batches(train, cfg.batch_size, cfg.seed, epoch) {
            step += 1;
            let owned: Vec<Owned> = split(&idx, cfg.accum_steps)
                .into_iter()
                .map(|part| gather(train, part, &cfg.augment, micro_seed(cfg.seed, step, 0)))
                .collect();
            let micro: Vec<Batch<'_>> = owned.iter().map(Owned::batch).collect();
            let (mut grads, loss) = accumulate_gradients(model, &micro, &cfg.objective, cfg.seed, step)?;
            let norm = match cfg.clip_norm {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => grad_norm(&grads),
            };
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
            }
            let lr = opt.update(model.params_mut(), &grads)?;
            let wall_ms = if cfg.log_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            let row = LogRow {
                step,
                epoch,
                lr,
                loss,
                grad_norm: norm,
                wall_ms,
            };
            log::debug!("{}", row.csv());
            log.push(row);
        }
        epochs_run += 1;
        let ck = Checkpoint::from_store(model.params(), epoch as u64, step, cfg.seed, Some(opt.clone()));
        if let Some(dir) = out_dir {
            let p = epoch_checkpoint_path(dir, epoch);
            ck.save(&p)?;
            paths.push(p);
            std::fs::write(dir.join("train.csv"), log_csv(&log))?;
        }
        window.push_back(Checkpoint {
            optimizer: None,
            ..ck.clone()
        });
        while window.len() > avg_m {
            window.pop_front();
        }
        last = Some(ck);
        if let Some(dev) = dev {
            let r = evaluate(model, dev.all(), &cfg.objective)?;
            log::info!("epoch {epoch}: dev loss {:.6}", r.total);
            dev_hist.push(r);
            if let Some(s) = stopper.as_mut() {
                if s.update(r.total) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let last = last.ok_or_else(|| Error::Config(format!("resume checkpoint is already at epoch {}", cfg.epochs)))?;
    let averaged = average_checkpoints(window.make_contiguous())?;
    averaged.load_into(model.params_mut())?;
    let averaged_dev = dev.map(|d| evaluate(model, d.all(), &cfg.objective)).transpose()?;
    if let Some(dir) = out_dir {
        averaged.save(&dir.join("model.avg.ckpt"))?;
    }
    Ok(TrainOutcome {
        log,
        dev: dev_hist,
        averaged_dev,
        epochs_run,
        stopped_early,
        last,
        averaged,
        checkpoint_paths: paths,
    })
}

/// Mean per-token negative log-likelihood of `seqs` (end symbol included).
pub fn lm_nll(lm: &RnnLm, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut g = lm.graph(0, false);
    let (mut total, mut n) = (0.0, 0usize);
    for s in seqs {
        let v = lm.nll_sum(&mut g, s)?;
        total += g.value(v).item();
        n += s.len() + 1;
    }
    if n == 0 {
        return Err(Error::Data("no LM training text".into()));
    }
    Ok(total / n as f64)
}

/// Trains the LM with Adam on token sequences; returns the mean NLL per
/// token on `seqs` after each epoch.
pub fn train_lm(lm: &mut RnnLm, seqs: &[Vec<usize>], epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    if seqs.is_empty() || batch_size == 0 {
        return Err(Error::Data("LM training needs sequences and a positive batch size".into()));
    }
    let mut opt = OptimizerState::new(OptimizerKind::Adam { lr }, &lm.params, lm.config.units);
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(micro_seed(seed, epoch as u64, usize::MAX));
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            step += 1;
            let mut g = lm.graph(micro_seed(seed, step, 0), true);
            let n: usize = chunk.iter().map(|&i| seqs[i].len() + 1).sum();
            let mut acc = None;
            for &i in chunk {
                let v = lm.nll_sum(&mut g, &seqs[i])?;
                acc = Some(match acc {
                    Some(a) => g.add(a, v)?,
                    None => v,
                });
            }
            let loss = g.scale(acc.expect("non-empty chunk"), 1.0 / n as f64)?;
            g.backward(loss)?;
            let mut grads = lm.params.grads_from(&g);
            clip_grad_norm(&mut grads, 5.0);
            opt.update(&mut lm.params, &grads)?;
        }
        history.push(lm_nll(lm, seqs)?);
    }
    Ok(history)
}
