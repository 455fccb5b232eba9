//! Feature files, transcripts, vocabularies and manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{FIRST_TOKEN, SOS_EOS, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEAT_MAGIC: &[u8; 4] = b"ESF1";

/// Reserved symbols in id order.
pub const RESERVED: [&str; 3] = ["<blank>", "<unk>", "<sos/eos>"];

/// Serializes `[frames × dims]` features as `ESF1` with f32 payload.
pub fn encode_features(feats: &Tensor) -> Result<Vec<u8>> {
    if feats.rank() != 2 {
        return Err(Error::Format(format!("features must be a matrix, got {:?}", feats.shape())));
    }
    let (t, d) = (feats.rows(), feats.cols());
    let t32 = u32::try_from(t).map_err(|_| Error::Format("too many frames".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Format("too many dims".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * t * d);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&t32.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    for &x in feats.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FEAT_MAGIC {
        return Err(Error::Format("not an ESF1 feature file".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[12..];
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Format(format!(
            "header declares {t}×{d} frames but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_features(path: &Path, feats: &Tensor) -> Result<()> {
    fs::write(path, encode_features(feats)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_features(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Token inventory; ids start at [`FIRST_TOKEN`] after the reserved ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || RESERVED.contains(&t.as_str()) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), FIRST_TOKEN + i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        FIRST_TOKEN + self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`; unknown tokens map to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn symbol(&self, id: usize) -> &str {
        match id {
            0..FIRST_TOKEN => RESERVED[id],
            _ => self.tokens.get(id - FIRST_TOKEN).map_or(RESERVED[UNK], String::as_str),
        }
    }

    /// Symbols for `ids`, dropping any end symbol.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&i| i != SOS_EOS).map(|&i| self.symbol(i).to_string()).collect()
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    /// One token per line; leading reserved symbols are accepted and skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        let reserved = lines.iter().zip(RESERVED).take_while(|(l, r)| l.as_str() == *r).count();
        lines.drain(..reserved);
        Vocab::new(lines)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// `utt_id<TAB>space-separated tokens` lines.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::Format(format!("line {}: malformed utterance id", n + 1)));
        }
        out.push((id.to_string(), rest.split_whitespace().map(String::from).collect()));
    }
    Ok(out)
}

pub fn format_transcripts<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [String])>) -> String {
    rows.into_iter().map(|(id, toks)| format!("{id}\t{}\n", toks.join(" "))).collect()
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    parse_transcripts(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `utt_id<TAB>path` lines; relative paths resolve against `base`.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, p) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{} line {}: expected id<TAB>path", path.display(), n + 1)))?;
        out.push((id.to_string(), base.join(p.trim())));
    }
    Ok(out)
}

pub fn format_manifest<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    rows.into_iter().map(|(id, p)| format!("{id}\t{p}\n")).collect()
}
