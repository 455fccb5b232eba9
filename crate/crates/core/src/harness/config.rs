//! `key = value` configuration files for data generation, models and
//! training runs.

use std::path::Path;

use super::toy::{ToySpec, Transform};
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::models::{Body, EncPreKind, ModelConfig, Normalize, SrcResidual, Task};
use crate::training::{OptimizerKind, TrainConfig};

/// Environment variable that overrides configured seeds.
pub const SEED_ENV: &str = "S2S_SEED";

/// Ordered `(key, value)` pairs; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_kv(&text)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn opt_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('-')
        .or_else(|| v.split_once(','))
        .ok_or_else(|| Error::Config(format!("{key}: expected `min-max`, got {v:?}")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

/// `S2S_SEED` if set, else `seed`.
pub fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => num(SEED_ENV, s.trim()),
        Err(_) => Ok(seed),
    }
}

pub fn parse_task(v: &str) -> Result<Task> {
    match v {
        "asr" => Ok(Task::Asr),
        "st" => Ok(Task::St),
        "tts" => Ok(Task::Tts),
        _ => Err(Error::Config(format!("task: unknown value {v:?}"))),
    }
}

pub fn task_name(t: Task) -> &'static str {
    match t {
        Task::Asr => "asr",
        Task::St => "st",
        Task::Tts => "tts",
    }
}

pub fn toy_spec_from_kv(kv: &[(String, String)]) -> Result<ToySpec> {
    let mut s = ToySpec::default();
    for (k, v) in kv {
        match k.as_str() {
            "vocab_size" => s.vocab_size = num(k, v)?,
            "frames_per_token" => s.frames_per_token = range(k, v)?,
            "noise" => s.noise = num(k, v)?,
            "utt_len" => s.utt_len = range(k, v)?,
            "feat_dim" => s.feat_dim = num(k, v)?,
            "transform" | "task" => s.transform = Transform::parse(v)?,
            "train" => s.train = num(k, v)?,
            "dev" => s.dev = num(k, v)?,
            "test" => s.test = num(k, v)?,
            "seed" => s.seed = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
    }
    s.seed = seed_override(s.seed)?;
    s.validate()?;
    Ok(s)
}

pub fn toy_spec_to_kv(s: &ToySpec) -> String {
    format!(
        "vocab_size = {}\nframes_per_token = {}-{}\nnoise = {}\nutt_len = {}-{}\nfeat_dim = {}\ntransform = {}\ntrain = {}\ndev = {}\ntest = {}\nseed = {}\n",
        s.vocab_size,
        s.frames_per_token.0,
        s.frames_per_token.1,
        s.noise,
        s.utt_len.0,
        s.utt_len.1,
        s.feat_dim,
        s.transform.name(),
        s.train,
        s.dev,
        s.test,
        s.seed
    )
}

/// Applies one model key; returns false if `key` is not a model key.
pub fn apply_model_key(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "task" => m.task = parse_task(v)?,
        "body" => {
            m.body = match v {
                "transformer" => Body::Transformer,
                "rnn" => Body::Rnn,
                _ => return Err(Error::Config(format!("body: unknown value {v:?}"))),
            }
        }
        "enc_layers" => m.enc_layers = num(key, v)?,
        "dec_layers" => m.dec_layers = num(key, v)?,
        "d_att" => m.d_att = num(key, v)?,
        "d_ff" => m.d_ff = num(key, v)?,
        "d_head" => m.d_head = num(key, v)?,
        "dropout" => m.dropout_rate = num(key, v)?,
        "vocab_size" => m.vocab_size = num(key, v)?,
        "feat_dim" => m.feat_dim = num(key, v)?,
        "rnn_units" => m.rnn_units = num(key, v)?,
        "ctc" => m.ctc = flag(key, v)?,
        "normalize" => {
            m.normalize = match v {
                "pre" => Normalize::Pre,
                "post" => Normalize::Post,
                "none" => Normalize::None,
                _ => return Err(Error::Config(format!("normalize: unknown value {v:?}"))),
            }
        }
        "src_residual" => {
            m.src_residual = match v {
                "layer_input" => SrcResidual::LayerInput,
                "self_attn_output" => SrcResidual::SelfAttnOutput,
                _ => return Err(Error::Config(format!("src_residual: unknown value {v:?}"))),
            }
        }
        "enc_pre" => {
            m.enc_pre = match v {
                "conv1d" => EncPreKind::Conv1d,
                "conv2d" => EncPreKind::Conv2d,
                "vgg" => EncPreKind::Vgg,
                _ => return Err(Error::Config(format!("enc_pre: unknown value {v:?}"))),
            }
        }
        "model_seed" => m.seed = num(key, v)?,
        "reduction_factor" => m.tts.reduction_factor = num(key, v)?,
        "prenet_units" => m.tts.prenet_units = num(key, v)?,
        "prenet_layers" => m.tts.prenet_layers = num(key, v)?,
        "prenet_dropout" => m.tts.prenet_dropout = num(key, v)?,
        "prenet_dropout_at_inference" => m.tts.prenet_dropout_at_inference = flag(key, v)?,
        "postnet_layers" => m.tts.postnet_layers = num(key, v)?,
        "postnet_channels" => m.tts.postnet_channels = num(key, v)?,
        "postnet_kernel" => m.tts.postnet_kernel = num(key, v)?,
        "postnet_layer_norm" => m.tts.postnet_layer_norm = flag(key, v)?,
        "bce_pos_weight" => m.tts.bce_pos_weight = num(key, v)?,
        "guided_sigma" => m.tts.guided_sigma = num(key, v)?,
        "guided_layers" => m.tts.guided_layers = num(key, v)?,
        "guided_heads" => m.tts.guided_heads = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every model field as `key = value` lines, readable by
/// [`model_config_from_kv`].
pub fn model_config_to_kv(m: &ModelConfig) -> String {
    let body = match m.body {
        Body::Transformer => "transformer",
        Body::Rnn => "rnn",
    };
    let normalize = match m.normalize {
        Normalize::Pre => "pre",
        Normalize::Post => "post",
        Normalize::None => "none",
    };
    let src = match m.src_residual {
        SrcResidual::LayerInput => "layer_input",
        SrcResidual::SelfAttnOutput => "self_attn_output",
    };
    let pre = match m.enc_pre {
        EncPreKind::Conv1d => "conv1d",
        EncPreKind::Conv2d => "conv2d",
        EncPreKind::Vgg => "vgg",
    };
    let t = &m.tts;
    [
        ("task", task_name(m.task).to_string()),
        ("body", body.to_string()),
        ("enc_layers", m.enc_layers.to_string()),
        ("dec_layers", m.dec_layers.to_string()),
        ("d_att", m.d_att.to_string()),
        ("d_ff", m.d_ff.to_string()),
        ("d_head", m.d_head.to_string()),
        ("dropout", m.dropout_rate.to_string()),
        ("vocab_size", m.vocab_size.to_string()),
        ("feat_dim", m.feat_dim.to_string()),
        ("rnn_units", m.rnn_units.to_string()),
        ("ctc", m.ctc.to_string()),
        ("normalize", normalize.to_string()),
        ("src_residual", src.to_string()),
        ("enc_pre", pre.to_string()),
        ("model_seed", m.seed.to_string()),
        ("reduction_factor", t.reduction_factor.to_string()),
        ("prenet_units", t.prenet_units.to_string()),
        ("prenet_layers", t.prenet_layers.to_string()),
        ("prenet_dropout", t.prenet_dropout.to_string()),
        ("prenet_dropout_at_inference", t.prenet_dropout_at_inference.to_string()),
        ("postnet_layers", t.postnet_layers.to_string()),
        ("postnet_channels", t.postnet_channels.to_string()),
        ("postnet_kernel", t.postnet_kernel.to_string()),
        ("postnet_layer_norm", t.postnet_layer_norm.to_string()),
        ("bce_pos_weight", t.bce_pos_weight.to_string()),
        ("guided_sigma", t.guided_sigma.to_string()),
        ("guided_layers", t.guided_layers.to_string()),
        ("guided_heads", t.guided_heads.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k} = {v}\n"))
    .collect()
}

pub fn model_config_from_kv(kv: &[(String, String)]) -> Result<ModelConfig> {
    let task = kv
        .iter()
        .find(|(k, _)| k == "task")
        .map(|(_, v)| parse_task(v))
        .transpose()?
        .unwrap_or(Task::Asr);
    let mut m = ModelConfig::toy_transformer(task, 0, 0);
    for (k, v) in kv {
        if !apply_model_key(&mut m, k, v)? {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
    }
    m.validate()?;
    Ok(m)
}

/// A full training run: model, optimization and decoding settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
}

impl RunConfig {
    /// Toy defaults for `task`: the Transformer preset (or the RNN preset
    /// when `body = rnn` is requested) with Adam and the warmup schedule.
    pub fn toy(task: Task, body: Body) -> Self {
        let model = match body {
            Body::Transformer => ModelConfig::toy_transformer(task, 0, 0),
            Body::Rnn => ModelConfig::toy_rnn(task, 0, 0),
        };
        let optimizer = match body {
            Body::Transformer => OptimizerKind::AdamNoam { k: 1.0, warmup: 2000 },
            Body::Rnn => OptimizerKind::Adadelta { lr: 1.0 },
        };
        RunConfig {
            model,
            train: TrainConfig {
                optimizer,
                ..TrainConfig::default()
            },
            beam: BeamConfig::default(),
        }
    }

    /// Parses a run file; unknown keys are errors. `S2S_SEED` overrides
    /// `seed`, which drives both initialization and training.
    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let task = get("task").map(parse_task).transpose()?.unwrap_or(Task::Asr);
        let body = match get("body") {
            Some("rnn") => Body::Rnn,
            _ => Body::Transformer,
        };
        let mut rc = RunConfig::toy(task, body);
        let (mut opt_name, mut lr, mut k_scale, mut warmup) = (None, None, 1.0, 2000u64);
        let mut seed = None;
        for (k, v) in kv {
            let t = &mut rc.train;
            match k.as_str() {
                "epochs" => t.epochs = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "accum_steps" => t.accum_steps = num(k, v)?,
                "optimizer" => opt_name = Some(v.clone()),
                "lr" => lr = Some(num::<f64>(k, v)?),
                "noam_k" => k_scale = num(k, v)?,
                "warmup" => warmup = num(k, v)?,
                "clip_norm" => t.clip_norm = opt_num(k, v)?,
                "alpha" => t.objective.alpha = num(k, v)?,
                "label_smoothing" => t.objective.label_smoothing = num(k, v)?,
                "average_last" => t.average_last = opt_num(k, v)?,
                "early_stopping" => t.early_stopping = opt_num(k, v)?,
                "log_wall_clock" => t.log_wall_clock = flag(k, v)?,
                "time_masks" => t.augment.n_time_masks = num(k, v)?,
                "freq_masks" => t.augment.n_freq_masks = num(k, v)?,
                "max_time_mask" => t.augment.max_t = num(k, v)?,
                "max_freq_mask" => t.augment.max_f = num(k, v)?,
                "seed" => seed = Some(num::<u64>(k, v)?),
                "beam" => rc.beam.beam_size = num(k, v)?,
                "lambda" => rc.beam.lambda = num(k, v)?,
                "gamma" => rc.beam.gamma = num(k, v)?,
                "max_len_ratio" => rc.beam.max_len_ratio = num(k, v)?,
                _ => {
                    if !apply_model_key(&mut rc.model, k, v)? {
                        return Err(Error::Config(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        rc.train.optimizer = match opt_name.as_deref() {
            None => match rc.train.optimizer {
                OptimizerKind::AdamNoam { .. } => OptimizerKind::AdamNoam { k: k_scale, warmup },
                OptimizerKind::Adadelta { lr: d } => OptimizerKind::Adadelta { lr: lr.unwrap_or(d) },
                other => other,
            },
            Some("noam") => OptimizerKind::AdamNoam { k: k_scale, warmup },
            Some("adam") => OptimizerKind::Adam { lr: lr.unwrap_or(1e-3) },
            Some("adadelta") => OptimizerKind::Adadelta { lr: lr.unwrap_or(1.0) },
            Some(o) => return Err(Error::Config(format!("optimizer: unknown value {o:?}"))),
        };
        let seed = seed_override(seed.unwrap_or(rc.train.seed))?;
        rc.train.seed = seed;
        if get("model_seed").is_none() {
            rc.model.seed = seed;
        }
        let mut probe = rc.model.clone();
        probe.vocab_size = probe.vocab_size.max(crate::data::FIRST_TOKEN + 1);
        probe.feat_dim = probe.feat_dim.max(1);
        probe.validate()?;
        rc.train.validate()?;
        rc.beam.validate()?;
        Ok(rc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&read_kv(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_syntax() {
        let kv = parse_kv("# run\nepochs = 3  # short\n\nlr=0.5\n").unwrap();
        assert_eq!(kv, vec![("epochs".into(), "3".into()), ("lr".into(), "0.5".into())]);
        assert!(parse_kv("epochs 3").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = parse_kv("task = asr\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))));
        assert!(matches!(toy_spec_from_kv(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn run_config_values() {
        let kv = parse_kv("task = st\nctc = false\nepochs = 4\noptimizer = adam\nlr = 0.002\nd_att = 32\nseed = 9\nbeam = 3\n").unwrap();
        let rc = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(rc.model.task, Task::St);
        assert_eq!(rc.model.d_att, 32);
        assert_eq!(rc.train.epochs, 4);
        assert_eq!(rc.train.optimizer, OptimizerKind::Adam { lr: 0.002 });
        assert_eq!(rc.beam.beam_size, 3);
        let rnn = RunConfig::from_kv(&parse_kv("body = rnn\n").unwrap()).unwrap();
        assert_eq!(rnn.model.body, Body::Rnn);
        assert!(matches!(rnn.train.optimizer, OptimizerKind::Adadelta { .. }));
    }

    #[test]
    fn model_config_round_trip() {
        let mut m = ModelConfig::toy_transformer(Task::Tts, 13, 16);
        m.tts.reduction_factor = 2;
        m.dropout_rate = 0.25;
        m.seed = 77;
        let back = model_config_from_kv(&parse_kv(&model_config_to_kv(&m)).unwrap()).unwrap();
        assert_eq!(back, m);
        let s = ToySpec::default();
        assert_eq!(
            toy_spec_from_kv(&parse_kv(&toy_spec_to_kv(&s)).unwrap()).unwrap().vocab_size,
            s.vocab_size
        );
    }
}
