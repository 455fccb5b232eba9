//! `ESC1` checkpoint files and parameter averaging.
//!
//! Layout: magic `ESC1`, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, a u8 rank, `rank` u32 dims and the f64 values.
//! All integers are little-endian. Training metadata and optimizer
//! buffers are stored as extra entries under reserved name prefixes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::optim::{AdadeltaParams, AdamParams, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"ESC1";
const META: &str = "__meta__.";
const OPTIM: &str = "__optim__.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model parameters in store order.
    pub params: Vec<(String, Tensor)>,
    pub epoch: u64,
    pub step: u64,
    /// Seed from which the run's random streams derive.
    pub seed: u64,
    pub optimizer: Option<OptimizerState>,
}

/// u64 split into two exactly representable halves.
fn split_u64(x: u64) -> [f64; 2] {
    [(x >> 32) as f64, (x & 0xffff_ffff) as f64]
}

fn join_u64(v: &[f64]) -> Result<u64> {
    match v {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => Ok(((*hi as u64) << 32) | *lo as u64),
        _ => Err(Error::Format(format!("malformed integer entry {v:?}"))),
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, epoch: u64, step: u64, seed: u64, optimizer: Option<OptimizerState>) -> Self {
        Checkpoint {
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            epoch,
            step,
            seed,
            optimizer,
        }
    }

    /// Copies the parameters into `store`, matching by name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_named(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.clone();
        let int = |x: u64| Tensor::vector(split_u64(x).to_vec());
        out.push((format!("{META}epoch"), int(self.epoch)));
        out.push((format!("{META}step"), int(self.step)));
        out.push((format!("{META}seed"), int(self.seed)));
        if let Some(opt) = &self.optimizer {
            let (code, a, b) = match opt.kind {
                OptimizerKind::AdamNoam { k, warmup } => (0.0, k, warmup as f64),
                OptimizerKind::Adam { lr } => (1.0, lr, 0.0),
                OptimizerKind::Adadelta { lr } => (2.0, lr, 0.0),
            };
            let [s_hi, s_lo] = split_u64(opt.step);
            out.push((
                format!("{OPTIM}state"),
                Tensor::vector(vec![
                    code,
                    a,
                    b,
                    opt.adam.beta1,
                    opt.adam.beta2,
                    opt.adam.eps,
                    opt.adadelta.rho,
                    opt.adadelta.eps,
                    s_hi,
                    s_lo,
                    opt.d_att as f64,
                ]),
            ));
            for (i, (name, _)) in self.params.iter().enumerate() {
                out.push((format!("{OPTIM}first.{name}"), opt.first[i].clone()));
                out.push((format!("{OPTIM}second.{name}"), opt.second[i].clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::Format(format!("entry {name} cannot be encoded")));
            }
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} of {name} too large")))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an ESC1 checkpoint".into()));
        }
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut params = Vec::new();
        let mut meta = std::collections::HashMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = take::<1>(&mut r)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Format(format!("entry {name} truncated")));
            }
            let data = (0..n).map(|_| f64::from_le_bytes(take(&mut r).expect("length checked"))).collect();
            let t = Tensor::new(shape, data)?;
            if name.starts_with(META) || name.starts_with(OPTIM) {
                meta.insert(name, t);
            } else {
                params.push((name, t));
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last entry", r.len())));
        }
        let int = |key: &str| -> Result<u64> {
            meta.get(&format!("{META}{key}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
                .and_then(|t| join_u64(t.data()))
        };
        let (epoch, step, seed) = (int("epoch")?, int("step")?, int("seed")?);
        let optimizer = match meta.get(&format!("{OPTIM}state")) {
            None => None,
            Some(state) => Some(decode_optimizer(state.data(), &params, &meta)?),
        };
        Ok(Checkpoint {
            params,
            epoch,
            step,
            seed,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn decode_optimizer(s: &[f64], params: &[(String, Tensor)], meta: &std::collections::HashMap<String, Tensor>) -> Result<OptimizerState> {
    if s.len() != 11 {
        return Err(Error::Format("malformed optimizer state".into()));
    }
    let kind = match s[0] as u8 {
        0 => OptimizerKind::AdamNoam {
            k: s[1],
            warmup: s[2] as u64,
        },
        1 => OptimizerKind::Adam { lr: s[1] },
        2 => OptimizerKind::Adadelta { lr: s[1] },
        c => return Err(Error::Format(format!("unknown optimizer code {c}"))),
    };
    let buffer = |which: &str, name: &str| {
        meta.get(&format!("{OPTIM}{which}.{name}"))
            .cloned()
            .ok_or_else(|| Error::Format(format!("optimizer buffer {which} for {name} missing")))
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, _) in params {
        first.push(buffer("first", name)?);
        second.push(buffer("second", name)?);
    }
    Ok(OptimizerState {
        kind,
        adam: AdamParams {
            beta1: s[3],
            beta2: s[4],
            eps: s[5],
        },
        adadelta: AdadeltaParams { rho: s[6], eps: s[7] },
        step: join_u64(&s[8..10])?,
        first,
        second,
        d_att: s[10] as usize,
    })
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out).map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Element-wise mean of the parameters of several checkpoints; optimizer
/// state is dropped and metadata comes from the latest epoch.
///
/// Per coordinate the offsets from the smallest value are summed in sorted
/// order, so identical inputs average exactly and the result
/// does not depend on the order of `checkpoints`.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints.first().ok_or_else(|| Error::Data("nothing to average".into()))?;
    for c in checkpoints {
        let same = c.params.len() == first.params.len()
            && c.params
                .iter()
                .zip(&first.params)
                .all(|((n, t), (m, u))| n == m && t.shape() == u.shape());
        if !same {
            return Err(Error::Format("checkpoints hold different parameter sets".into()));
        }
    }
    let m = checkpoints.len() as f64;
    let mut params = Vec::with_capacity(first.params.len());
    let mut column = Vec::with_capacity(checkpoints.len());
    for (i, (name, t)) in first.params.iter().enumerate() {
        let mut data = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            column.clear();
            column.extend(checkpoints.iter().map(|c| c.params[i].1.data()[j]));
            column.sort_by(f64::total_cmp);
            let base = column[0];
            data.push(base + column.iter().map(|x| x - base).sum::<f64>() / m);
        }
        params.push((name.clone(), Tensor::new(t.shape().to_vec(), data)?));
    }
    let latest = checkpoints.iter().max_by_key(|c| (c.epoch, c.step)).expect("non-empty");
    Ok(Checkpoint {
        params,
        epoch: latest.epoch,
        step: latest.step,
        seed: latest.seed,
        optimizer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(value: f64) -> Checkpoint {
        Checkpoint {
            params: vec![
                ("a.w".into(), Tensor::full(&[2, 3], value)),
                ("a.b".into(), Tensor::vector(vec![value, -value])),
            ],
            epoch: 3,
            step: 120,
            seed: u64::MAX - 5,
            optimizer: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = sample(0.1);
        c.params[0].1.data_mut()[4] = f64::MIN_POSITIVE / 3.0;
        let mut store = ParamStore::new();
        for (n, t) in &c.params {
            store.add(n.clone(), t.clone());
        }
        let mut opt = OptimizerState::new(OptimizerKind::AdamNoam { k: 5.0, warmup: 400 }, &store, 64);
        opt.step = 17;
        opt.first[1] = Tensor::vector(vec![1e-300, -3.25]);
        c.optimizer = Some(opt);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample(1.0).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ESC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 3);
        assert_eq!(&bytes[10..13], b"a.w");
        assert_eq!(bytes[13], 2);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[22..30].try_into().unwrap()), 1.0);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample(1.0).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn averaging() {
        let same = average_checkpoints(&[sample(0.7), sample(0.7), sample(0.7)]).unwrap();
        assert_eq!(same.params, sample(0.7).params);
        let mid = average_checkpoints(&[sample(0.0), sample(2.0)]).unwrap();
        assert_eq!(mid.params, sample(1.0).params);
        let xs = [0.1, 0.7, 1e-3, 3.3, -2.2];
        let forward: Vec<_> = xs.iter().map(|&x| sample(x)).collect();
        let backward: Vec<_> = xs.iter().rev().map(|&x| sample(x)).collect();
        assert_eq!(
            average_checkpoints(&forward).unwrap().to_bytes().unwrap(),
            average_checkpoints(&backward).unwrap().to_bytes().unwrap()
        );
        let mut other = sample(1.0);
        other.params[1].0 = "z".into();
        assert!(average_checkpoints(&[sample(1.0), other]).is_err());
    }
}
