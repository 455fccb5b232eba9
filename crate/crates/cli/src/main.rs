use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use s2s_core::data::SpeechExample;
use s2s_core::decoding::{beam_search, greedy_decode, tts_infer, BeamConfig, LmConfig, RnnLm, StopReason, TtsInferConfig};
use s2s_core::harness::{self, config, formats, metrics, Vocab};
use s2s_core::models::ModelConfig;
use s2s_core::tensor::ParamStore;
use s2s_core::training::{self, average_checkpoints, Checkpoint, Dataset, Model};
use s2s_core::Error;

const MODEL_CONF: &str = "model.conf";

#[derive(Parser)]
#[command(name = "s2s", version, about = "Desk-scale speech sequence-to-sequence toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Wer,
    Cer,
    Bleu,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes per-epoch checkpoints, train.csv and model.avg.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a split with beam search (or greedily with --beam 0).
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 0.7)]
        lambda: f64,
        #[arg(long, default_value_t = 0.3)]
        gamma: f64,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Hypothesis transcript; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypothesis transcript against a reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Average checkpoints parameter-wise.
    AvgCkpt {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize feature files from a text transcript with a TTS model.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary; defaults to vocab.txt beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 400)]
        max_frames: usize,
    },
    /// Summarize a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        per_epoch: bool,
    },
    /// Train the recurrent LM on a split's transcripts.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        units: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> s2s_core::Result<()> {
    match cmd {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out, resume } => train(&config, &data, &out, resume.as_deref()),
        Command::Decode {
            ckpt,
            data,
            split,
            beam,
            lambda,
            gamma,
            lm,
            out,
        } => {
            let cfg = BeamConfig {
                beam_size: beam.max(1),
                lambda,
                gamma,
                ..BeamConfig::default()
            };
            decode(&ckpt, &data, &split, (beam > 0).then_some(cfg), lm.as_deref(), out.as_deref())
        }
        Command::Eval { reference, hyp, metric } => eval(&reference, &hyp, metric),
        Command::AvgCkpt { inputs, out } => {
            let cks = inputs.iter().map(|p| Checkpoint::load(p)).collect::<s2s_core::Result<Vec<_>>>()?;
            average_checkpoints(&cks)?.save(&out)
        }
        Command::Synth {
            ckpt,
            text,
            out,
            vocab,
            threshold,
            max_frames,
        } => synth(&ckpt, &text, &out, vocab.as_deref(), threshold, max_frames),
        Command::Report { log, per_epoch } => {
            let text = fs::read_to_string(&log).map_err(|e| Error::Data(format!("{}: {e}", log.display())))?;
            print!("{}", harness::report(&text, per_epoch)?);
            Ok(())
        }
        Command::TrainLm {
            data,
            out,
            split,
            epochs,
            units,
            lr,
            seed,
        } => train_lm(&data, &out, &split, epochs, units, lr, seed),
    }
}

fn gen_data(spec: &Path, out: &Path) -> s2s_core::Result<()> {
    let spec = config::toy_spec_from_kv(&config::read_kv(spec)?)?;
    let ds = harness::toy::generate(&spec)?;
    ds.write(out)?;
    log::info!(
        "wrote {} / {} / {} utterances to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn feat_dim(data: &Dataset) -> s2s_core::Result<usize> {
    let d = match data {
        Dataset::Speech(d) => d.first().map(|e| e.feats.cols()),
        Dataset::Tts(d) => d.first().map(|e| e.feats.cols()),
    };
    d.ok_or_else(|| Error::Data("empty split".into()))
}

fn train(config_path: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> s2s_core::Result<()> {
    let mut rc = harness::RunConfig::read(config_path)?;
    let vocab = Vocab::read(&data.join("vocab.txt"))?;
    let task = rc.model.task;
    let train_set = harness::load_dataset(data, "train", task, &vocab)?;
    let dev_path = data.join("dev");
    let dev_set = if dev_path.exists() {
        Some(harness::load_dataset(data, "dev", task, &vocab)?)
    } else {
        None
    };
    rc.model.vocab_size = vocab.size();
    rc.model.feat_dim = feat_dim(&train_set)?;
    let mut model = Model::new(rc.model.clone())?;
    fs::create_dir_all(out)?;
    fs::write(out.join(MODEL_CONF), config::model_config_to_kv(&rc.model))?;
    fs::write(out.join("vocab.txt"), vocab.to_text())?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = training::train_loop(&mut model, &train_set, dev_set.as_ref(), &rc.train, Some(out), resume.as_ref())?;
    if let Some(d) = outcome.averaged_dev {
        log::info!("averaged model dev loss {:.6}", d.total);
    }
    log::info!("trained {} epochs, {} steps", outcome.epochs_run, outcome.log.len());
    Ok(())
}

fn load_model(ckpt: &Path) -> s2s_core::Result<(Model, Checkpoint)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg: ModelConfig = config::model_config_from_kv(&config::read_kv(&dir.join(MODEL_CONF))?)?;
    let ck = Checkpoint::load(ckpt)?;
    let mut model = Model::new(cfg)?;
    ck.load_into(model.params_mut())?;
    Ok((model, ck))
}

fn load_lm(path: &Path) -> s2s_core::Result<RnnLm> {
    let ck = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    for (n, t) in ck.params {
        store.add(n, t);
    }
    RnnLm::from_params(store)
}

fn decode(ckpt: &Path, data: &Path, split: &str, beam: Option<BeamConfig>, lm: Option<&Path>, out: Option<&Path>) -> s2s_core::Result<()> {
    let (model, _) = load_model(ckpt)?;
    let Model::Speech(model) = model else {
        return Err(Error::Config("decode needs a speech model; use synth for TTS".into()));
    };
    let vocab = Vocab::read(&data.join("vocab.txt"))?;
    let lm = lm.map(load_lm).transpose()?;
    let Dataset::Speech(examples) = harness::load_dataset(data, split, model.config.task, &vocab)? else {
        unreachable!("speech task yields speech data");
    };
    let mut text = String::new();
    for SpeechExample { utt_id, feats, .. } in &examples {
        let tokens = match &beam {
            Some(cfg) => beam_search(&model, feats, lm.as_ref(), cfg)?.best.tokens().to_vec(),
            None => greedy_decode(&model, feats, None)?.0,
        };
        text.push_str(&format!("{utt_id}\t{}\n", vocab.decode(&tokens).join(" ")));
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn eval(reference: &Path, hyp: &Path, metric: Metric) -> s2s_core::Result<()> {
    let refs = formats::read_transcripts(reference)?;
    let hyps: std::collections::HashMap<_, _> = formats::read_transcripts(hyp)?.into_iter().collect();
    let mut r = Vec::new();
    let mut h = Vec::new();
    for (id, toks) in refs {
        let hy = hyps
            .get(&id)
            .ok_or_else(|| Error::Data(format!("hypothesis file lacks utterance {id}")))?;
        r.push(toks);
        h.push(hy.clone());
    }
    let value = match metric {
        Metric::Wer => metrics::corpus_counts(&r, &h).rate(),
        Metric::Cer => {
            let chars = |v: &[Vec<String>]| -> Vec<Vec<char>> { v.iter().map(|t| t.concat().chars().collect()).collect() };
            metrics::corpus_counts(&chars(&r), &chars(&h)).rate()
        }
        Metric::Bleu => metrics::bleu(&r, &h, 4),
    };
    println!("{value:.6}");
    Ok(())
}

fn synth(ckpt: &Path, text: &Path, out: &Path, vocab: Option<&Path>, threshold: f64, max_frames: usize) -> s2s_core::Result<()> {
    let (model, ck) = load_model(ckpt)?;
    let Model::Tts(model) = model else {
        return Err(Error::Config("synth needs a TTS model".into()));
    };
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| ckpt.with_file_name("vocab.txt"));
    let vocab = Vocab::read(&vocab_path)?;
    fs::create_dir_all(out)?;
    let cfg = TtsInferConfig {
        eos_threshold: threshold,
        max_frames,
        seed: ck.seed,
    };
    let mut manifest = String::new();
    for (id, toks) in formats::read_transcripts(text)? {
        let res = tts_infer(&model, &vocab.encode(&toks), &cfg)?;
        if res.stop == StopReason::Cap {
            log::warn!("{id}: hit the {max_frames}-frame cap before the stop flag");
        }
        let rel = format!("{id}.esf");
        harness::write_features(&out.join(&rel), &res.feats)?;
        manifest.push_str(&formats::format_manifest([(id.as_str(), rel.as_str())]));
    }
    fs::write(out.join("feats.scp"), manifest)?;
    Ok(())
}

fn train_lm(data: &Path, out: &Path, split: &str, epochs: usize, units: usize, lr: f64, seed: u64) -> s2s_core::Result<()> {
    let vocab = Vocab::read(&data.join("vocab.txt"))?;
    let seqs: Vec<Vec<usize>> = formats::read_transcripts(&data.join(split).join("text"))?
        .iter()
        .map(|(_, t)| vocab.encode(t))
        .collect();
    let seed = config::seed_override(seed)?;
    let mut lm = RnnLm::new(LmConfig {
        vocab_size: vocab.size(),
        units,
        seed,
    })?;
    let hist = training::train_lm(&mut lm, &seqs, epochs, 16, lr, seed)?;
    for (i, nll) in hist.iter().enumerate() {
        log::info!("epoch {}: perplexity {:.4}", i + 1, nll.exp());
    }
    Checkpoint::from_store(&lm.params, epochs as u64, 0, seed, None).save(out)
}
