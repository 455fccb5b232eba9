//! Synthetic datasets, on-disk formats, metrics, configuration files and
//! training-log reports.

pub mod config;
mod eval;
pub mod formats;
pub mod metrics;
mod report;
pub mod toy;

use std::fs;
use std::path::Path;

pub use config::{parse_kv, read_kv, RunConfig};
pub use eval::{decode_corpus, teacher_forced_accuracy, DecodeMode};
pub use formats::{read_features, write_features, Vocab};
pub use metrics::{bleu, cer, edit_distance, token_accuracy, wer, EditCounts};
pub use report::{epoch_summaries, parse_log, report, EpochSummary};
pub use toy::{gen_toy_asr, gen_toy_st, gen_toy_tts, ToyDataset, ToySpec, ToyUtterance, Transform};

use crate::data::{SpeechExample, TtsExample};
use crate::error::{Error, Result};
use crate::models::Task;
use crate::training::Dataset;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// One split as it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub utt_ids: Vec<String>,
    /// Target symbols for speech tasks, input text for TTS.
    pub text: Vec<Vec<String>>,
    pub feats: Vec<crate::tensor::Tensor>,
}

impl ToyDataset {
    pub fn split(&self, name: &str) -> Result<&[ToyUtterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Data(format!("unknown split {name:?}"))),
        }
    }

    /// Examples of `split` for training a model of `task`.
    pub fn dataset(&self, split: &str, task: Task) -> Result<Dataset> {
        let utts = self.split(split)?;
        Ok(match task {
            Task::Tts => Dataset::Tts(
                utts.iter()
                    .map(|u| TtsExample {
                        utt_id: u.utt_id.clone(),
                        text: u.target.clone(),
                        feats: u.feats.clone(),
                    })
                    .collect(),
            ),
            Task::Asr | Task::St => Dataset::Speech(
                utts.iter()
                    .map(|u| SpeechExample {
                        utt_id: u.utt_id.clone(),
                        feats: u.feats.clone(),
                        tokens: u.target.clone(),
                    })
                    .collect(),
            ),
        })
    }

    /// Writes `spec.conf`, `vocab.txt` and per split `text`, `source`,
    /// `feats.scp` and `feats/<utt>.esf`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("spec.conf"), config::toy_spec_to_kv(&self.spec))?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        for name in SPLITS {
            let utts = self.split(name)?;
            let sd = dir.join(name);
            fs::create_dir_all(sd.join("feats"))?;
            let mut scp = String::new();
            let mut text = String::new();
            let mut source = String::new();
            for u in utts {
                let rel = format!("feats/{}.esf", u.utt_id);
                write_features(&sd.join(&rel), &u.feats)?;
                scp.push_str(&formats::format_manifest([(u.utt_id.as_str(), rel.as_str())]));
                text.push_str(&format!("{}\t{}\n", u.utt_id, self.vocab.decode(&u.target).join(" ")));
                source.push_str(&format!("{}\t{}\n", u.utt_id, self.vocab.decode(&u.source).join(" ")));
            }
            fs::write(sd.join("feats.scp"), scp)?;
            fs::write(sd.join("text"), text)?;
            fs::write(sd.join("source"), source)?;
        }
        Ok(())
    }
}

/// Reads `dir/<split>`, pairing transcripts and features by utterance id.
pub fn read_split(dir: &Path, split: &str) -> Result<Split> {
    let sd = dir.join(split);
    let text = formats::read_transcripts(&sd.join("text"))?;
    let manifest = formats::read_manifest(&sd.join("feats.scp"))?;
    let paths: std::collections::HashMap<_, _> = manifest.into_iter().collect();
    let mut out = Split {
        utt_ids: Vec::new(),
        text: Vec::new(),
        feats: Vec::new(),
    };
    for (id, toks) in text {
        let p = paths
            .get(&id)
            .ok_or_else(|| Error::Data(format!("{split}: no features for utterance {id}")))?;
        out.feats.push(read_features(p)?);
        out.utt_ids.push(id);
        out.text.push(toks);
    }
    Ok(out)
}

/// Loads a split as training examples for `task` using `vocab`.
pub fn load_dataset(dir: &Path, split: &str, task: Task, vocab: &Vocab) -> Result<Dataset> {
    let s = read_split(dir, split)?;
    let items = s.utt_ids.into_iter().zip(s.text).zip(s.feats);
    Ok(match task {
        Task::Tts => Dataset::Tts(
            items
                .map(|((utt_id, t), feats)| TtsExample {
                    utt_id,
                    text: vocab.encode(&t),
                    feats,
                })
                .collect(),
        ),
        Task::Asr | Task::St => Dataset::Speech(
            items
                .map(|((utt_id, t), feats)| SpeechExample {
                    utt_id,
                    feats,
                    tokens: vocab.encode(&t),
                })
                .collect(),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_directory_round_trip() {
        let spec = ToySpec {
            train: 4,
            dev: 2,
            test: 1,
            ..ToySpec::default()
        };
        let ds = gen_toy_st(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let vocab = Vocab::read(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab, ds.vocab);
        let Dataset::Speech(dev) = load_dataset(dir.path(), "dev", Task::St, &vocab).unwrap() else {
            panic!("speech data expected");
        };
        for (a, b) in dev.iter().zip(&ds.dev) {
            assert_eq!(a.tokens, b.target);
            assert!(a.feats.max_abs_diff(&b.feats) < 1e-6);
        }
        let again = tempfile::tempdir().unwrap();
        gen_toy_st(&spec).unwrap().write(again.path()).unwrap();
        for f in ["vocab.txt", "dev/text", "dev/feats.scp", "dev/feats/dev0000.esf"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
        fs::remove_file(dir.path().join("dev/feats/dev0001.esf")).unwrap();
        assert!(matches!(load_dataset(dir.path(), "dev", Task::St, &vocab), Err(Error::Data(_))));
    }
}
