//! Scaled dot-product attention, multi-head attention, masks and
//! sinusoidal positional encodings.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Bias added to logits of disallowed query/key pairs before the softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Longest sequence the positional-encoding table covers.
pub const MAX_PE_LEN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_att: usize,
    pub d_head: usize,
    pub mask_mode: MaskMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_att: 256,
            d_head: 4,
            mask_mode: MaskMode::None,
        }
    }
}

/// Which query/key pairs may interact.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    None,
    Causal,
    /// `n_q × n_k` matrix with 1 on allowed and 0 on disallowed pairs.
    Allowed(Tensor),
}

impl Mask {
    fn resolve(&self, n_q: usize, n_k: usize) -> Result<Option<Tensor>> {
        match self {
            Mask::None => Ok(None),
            Mask::Causal => {
                if n_q > n_k {
                    return Err(dim_err!("causal mask needs n_q <= n_k, got {n_q} > {n_k}"));
                }
                Ok(Some(causal_allowed(n_q, n_k)))
            }
            Mask::Allowed(t) => {
                if t.shape() != [n_q, n_k] {
                    return Err(dim_err!("mask {:?} for scores {n_q}x{n_k}", t.shape()));
                }
                Ok(Some(t.clone()))
            }
        }
    }
}

/// `n × n` lower-triangular matrix: entry `(t, u)` is 1 iff `u ≤ t`.
pub fn causal_mask(n: usize) -> Tensor {
    causal_allowed(n, n)
}

fn causal_allowed(n_q: usize, n_k: usize) -> Tensor {
    let mut data = vec![0.0; n_q * n_k];
    for t in 0..n_q {
        for u in 0..=t.min(n_k.saturating_sub(1)) {
            data[t * n_k + u] = 1.0;
        }
    }
    Tensor::new(vec![n_q, n_k], data).expect("consistent shape")
}

/// Allows only the first `valid` keys for every query.
pub fn key_padding_mask(n_q: usize, n_k: usize, valid: usize) -> Tensor {
    let mut data = vec![0.0; n_q * n_k];
    for t in 0..n_q {
        for u in 0..valid.min(n_k) {
            data[t * n_k + u] = 1.0;
        }
    }
    Tensor::new(vec![n_q, n_k], data).expect("consistent shape")
}

/// Elementwise conjunction of two allowed-matrices.
pub fn intersect(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err!("mask shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

/// Output of one dot-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax weights with masked entries exactly zero.
    pub weights: Var,
    /// Scaled pre-mask logits `Xq·Xkᵀ / √d`.
    pub logits: Var,
}

/// `softmax(Xq·Xkᵀ/√d + maskbias)·Xv` with disallowed weights zeroed after
/// the softmax.
pub fn dot_attention(g: &mut Graph, xq: Var, xk: Var, xv: Var, mask: &Mask) -> Result<AttentionOutput> {
    let (qs, ks, vs) = (g.shape(xq).to_vec(), g.shape(xk).to_vec(), g.shape(xv).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(dim_err!("attention inputs must be matrices"));
    }
    if qs[1] != ks[1] {
        return Err(dim_err!("query width {} vs key width {}", qs[1], ks[1]));
    }
    if ks[0] != vs[0] {
        return Err(dim_err!("{} keys but {} values", ks[0], vs[0]));
    }
    let (n_q, n_k, d) = (qs[0], ks[0], qs[1]);
    let kt = g.transpose(xk)?;
    let raw = g.matmul(xq, kt)?;
    let logits = g.scale(raw, 1.0 / (d as f64).sqrt())?;
    let weights = match mask.resolve(n_q, n_k)? {
        None => g.softmax(logits)?,
        Some(allowed) => {
            let bias = allowed.map(|a| if a > 0.0 { 0.0 } else { MASK_BIAS });
            let bias = g.constant(bias);
            let biased = g.add(logits, bias)?;
            let soft = g.softmax(biased)?;
            let keep = g.constant(allowed);
            g.mul(soft, keep)?
        }
    };
    let output = g.matmul(weights, xv)?;
    Ok(AttentionOutput { output, weights, logits })
}

/// Per-head attention matrices captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub weights: Vec<Var>,
    pub logits: Vec<Var>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn matrices(&self, g: &Graph) -> Vec<Tensor> {
        self.weights.iter().map(|&w| g.value(w).clone()).collect()
    }

    /// Writes `head,row,col,weight` lines.
    pub fn write_csv<W: Write>(&self, g: &Graph, mut out: W) -> Result<()> {
        writeln!(out, "head,row,col,weight")?;
        for (h, m) in self.matrices(g).iter().enumerate() {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    writeln!(out, "{h},{r},{c},{}", m.get(r, c))?;
                }
            }
        }
        Ok(())
    }
}

/// Multi-head attention with per-head `d_att × d_att` projections.
///
/// The query/key/value projections of all heads are stored side by side
/// as `[d_att × d_att·d_head]` matrices; head `h` owns columns
/// `h·d_att .. (h+1)·d_att`. The concatenated head outputs are mapped back
/// by `W_head[d_att·d_head × d_att]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w_head: ParamId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, config: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.d_head == 0 {
            return Err(Error::Config("d_head must be at least 1".into()));
        }
        let (d, h) = (config.d_att, config.d_head);
        // Glorot scale of a single d×d head projection.
        let per_head = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            let heads: Vec<Tensor> = (0..h).map(|_| crate::tensor::glorot_uniform(d, d, rng)).collect();
            let mut data = vec![0.0; d * d * h];
            for (hi, t) in heads.iter().enumerate() {
                for r in 0..d {
                    data[r * d * h + hi * d..r * d * h + (hi + 1) * d].copy_from_slice(t.row(r));
                }
            }
            store.add(name, Tensor::new(vec![d, d * h], data).expect("consistent shape"))
        };
        let wq = per_head(store, format!("{prefix}.wq"), rng);
        let wk = per_head(store, format!("{prefix}.wk"), rng);
        let wv = per_head(store, format!("{prefix}.wv"), rng);
        let w_head = store.add_weight(format!("{prefix}.w_head"), d * h, d, rng);
        Ok(MultiHeadAttention {
            config,
            wq,
            wk,
            wv,
            w_head,
        })
    }

    pub fn forward(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mask) -> Result<(Var, AttentionRecord)> {
        let (d, h) = (self.config.d_att, self.config.d_head);
        for (&x, what) in [q, k, v].iter().zip(["query", "key", "value"]) {
            if g.shape(x).len() != 2 || g.shape(x)[1] != d {
                return Err(dim_err!("{what} input {:?}, expected width {d}", g.shape(x)));
            }
        }
        for (id, expected) in [
            (self.wq, [d, d * h]),
            (self.wk, [d, d * h]),
            (self.wv, [d, d * h]),
            (self.w_head, [d * h, d]),
        ] {
            if g.shape(g.p(id)) != expected {
                return Err(dim_err!("attention weight {:?}, expected {:?}", g.shape(g.p(id)), expected));
            }
        }
        let qp = g.matmul(q, g.p(self.wq))?;
        let kp = g.matmul(k, g.p(self.wk))?;
        let vp = g.matmul(v, g.p(self.wv))?;
        let mut heads = Vec::with_capacity(h);
        let mut record = AttentionRecord::default();
        for hi in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.slice_cols(qp, hi * d, d)?,
                    g.slice_cols(kp, hi * d, d)?,
                    g.slice_cols(vp, hi * d, d)?,
                )
            };
            let out = dot_attention(g, qh, kh, vh, mask)?;
            heads.push(out.output);
            record.weights.push(out.weights);
            record.logits.push(out.logits);
        }
        let cat = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = g.matmul(cat, g.p(self.w_head))?;
        Ok((out, record))
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_att: usize) -> Result<Tensor> {
    if max_len > MAX_PE_LEN {
        return Err(Error::Index(format!(
            "positional encoding requested for {max_len} positions, table holds {MAX_PE_LEN}"
        )));
    }
    let mut data = vec![0.0; max_len * d_att];
    for p in 0..max_len {
        for j in 0..d_att {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_att as f64);
            data[p * d_att + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d_att], data)
}

/// `x + PE[0..n]` for `x[n × d]`.
pub fn add_positional_encoding(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, d) = matrix_shape(g, x)?;
    if n == 0 {
        return Ok(x);
    }
    let pe = g.constant(positional_encoding(n, d)?);
    g.add(x, pe)
}

/// `x + alpha·PE[0..n]` with a learnable scalar `alpha`.
pub fn scaled_positional_encoding(g: &mut Graph, x: Var, alpha: Var) -> Result<Var> {
    let (n, d) = matrix_shape(g, x)?;
    if n == 0 {
        return Ok(x);
    }
    let pe = g.constant(positional_encoding(n, d)?);
    let scaled = g.scale_by(pe, alpha)?;
    g.add(x, scaled)
}

fn matrix_shape(g: &Graph, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        [n, d] => Ok((*n, *d)),
        s => Err(dim_err!("expected a matrix, got {:?}", s)),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::{grad_check_many, grad_check_params};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = g.constant(random(g.shape(y), seed));
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::inference();
        let q = g.constant(random(&[3, 4], 1));
        let k = g.constant(random(&[1, 4], 2));
        let v = g.constant(random(&[1, 4], 3));
        let out = dot_attention(&mut g, q, k, v, &Mask::None).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out.output).row(r), g.value(v).row(0));
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let mut g = Graph::inference();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(random(&[4, 3], 2));
        let vt = random(&[4, 3], 3);
        let v = g.constant(vt.clone());
        let out = dot_attention(&mut g, q, k, v, &Mask::None).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| vt.get(r, c)).sum::<f64>() / 4.0;
            assert!((g.value(out.output).get(0, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_against_direct_evaluation() {
        // q = [[1,0],[0,1]], k = [[1,1],[0,2]], v = [[1,2],[3,4]], d = 2.
        let mut g = Graph::inference();
        let q = g.constant(Tensor::identity(2));
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = dot_attention(&mut g, q, k, v, &Mask::None).unwrap();
        // Row 0 logits: [1, 0]/√2; row 1: [1, 2]/√2. Weights from 40-digit evaluation.
        let w00 = 0.669_761_549_326_656_925_616_794_945_834_144_f64;
        let w10 = 0.330_238_450_673_343_074_383_205_054_165_856_f64;
        let expected = [
            w00 * 1.0 + (1.0 - w00) * 3.0,
            w00 * 2.0 + (1.0 - w00) * 4.0,
            w10 * 1.0 + (1.0 - w10) * 3.0,
            w10 * 2.0 + (1.0 - w10) * 4.0,
        ];
        for (a, b) in g.value(out.output).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut g = Graph::inference();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(dot_attention(&mut g, q, k, k, &Mask::None), Err(Error::Dimension(_))));
    }

    #[test]
    fn causal_mask_shapes() {
        assert_eq!(causal_mask(1).data(), &[1.0]);
        assert_eq!(causal_mask(3).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn masked_rows_ignore_future_keys() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 5);
            let q = random(&[n, 4], seed);
            let k = random(&[n, 4], seed + 1);
            let v = random(&[n, 4], seed + 2);
            let run = |k: &Tensor, v: &Tensor| {
                let mut g = Graph::inference();
                let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
                let out = dot_attention(&mut g, qv, kv, vv, &Mask::Causal).unwrap();
                (g.value(out.output).clone(), g.value(out.weights).clone())
            };
            let (base, w) = run(&k, &v);
            for r in 0..n {
                for c in r + 1..n {
                    assert_eq!(w.get(r, c), 0.0);
                }
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let t = seed as usize % n;
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for r in t + 1..n {
                for c in 0..4 {
                    k2.data_mut()[r * 4 + c] += 37.0 * (c as f64 + 1.0);
                    v2.data_mut()[r * 4 + c] -= 11.0;
                }
            }
            let (pert, _) = run(&k2, &v2);
            for r in 0..=t {
                for c in 0..4 {
                    assert_eq!(base.get(r, c).to_bits(), pert.get(r, c).to_bits());
                }
            }
        }
    }

    fn identity_mha(d: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttentionConfig {
            d_att: d,
            d_head: 1,
            mask_mode: MaskMode::None,
        };
        let mha = MultiHeadAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
        for id in [mha.wq, mha.wk, mha.wv, mha.w_head] {
            store.set(id, Tensor::identity(d)).unwrap();
        }
        (store, mha)
    }

    #[test]
    fn single_identity_head_reduces_to_dot_attention() {
        let (store, mha) = identity_mha(4);
        let mut g = Graph::inference();
        g.bind(&store);
        let q = g.constant(random(&[3, 4], 1));
        let k = g.constant(random(&[5, 4], 2));
        let (out, rec) = mha.forward(&mut g, q, k, k, &Mask::None).unwrap();
        let direct = dot_attention(&mut g, q, k, k, &Mask::None).unwrap();
        assert_eq!(g.value(out), g.value(direct.output));
        assert_eq!(rec.heads(), 1);
    }

    #[test]
    fn output_shape_for_any_head_count() {
        for h in 1..5 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(h as u64);
            let cfg = AttentionConfig {
                d_att: 6,
                d_head: h,
                mask_mode: MaskMode::None,
            };
            let mha = MultiHeadAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
            let mut g = Graph::inference();
            g.bind(&store);
            let q = g.constant(random(&[2, 6], 1));
            let k = g.constant(random(&[7, 6], 2));
            let (out, rec) = mha.forward(&mut g, q, k, k, &Mask::None).unwrap();
            assert_eq!(g.shape(out), &[2, 6]);
            assert_eq!(rec.heads(), h);
            for m in rec.matrices(&g) {
                for r in 0..m.rows() {
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(m.row(r).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn wrong_weight_shape_is_rejected() {
        let (mut store, mha) = identity_mha(4);
        store.set(mha.w_head, Tensor::identity(4)).unwrap();
        let mut bad = ParamStore::new();
        for (name, t) in store.iter() {
            if name.ends_with("w_head") {
                bad.add(name, Tensor::zeros(&[3, 4]));
            } else {
                bad.add(name, t.clone());
            }
        }
        let mut g = Graph::inference();
        g.bind(&bad);
        let q = g.constant(random(&[3, 4], 1));
        assert!(matches!(mha.forward(&mut g, q, q, q, &Mask::None), Err(Error::Dimension(_))));
    }

    #[test]
    fn mha_gradient_check() {
        for seed in 0..20u64 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = AttentionConfig {
                d_att: 8,
                d_head: 2,
                mask_mode: MaskMode::None,
            };
            let mha = MultiHeadAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
            let x = random(&[3, 8], seed + 10);
            let mask = if seed % 2 == 0 { Mask::None } else { Mask::Causal };
            let check = grad_check_params(&store, 1e-5, 64, seed, |g| {
                let xv = g.constant(x.clone());
                let (out, _) = mha.forward(g, xv, xv, xv, &mask)?;
                weighted_sum(g, out, seed)
            })
            .unwrap();
            assert!(check.worst() < 1e-5, "{:?}", check.worst_param());

            let mut g = Graph::inference();
            g.bind(&store);
            let errs = grad_check_many(std::slice::from_ref(&x), 1e-5, |g, v| {
                g.bind(&store);
                let (out, _) = mha.forward(g, v[0], v[0], v[0], &mask)?;
                weighted_sum(g, out, seed)
            })
            .unwrap();
            assert!(errs[0] < 1e-5, "input grad {}", errs[0]);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig {
            d_att: 4,
            d_head: 2,
            mask_mode: MaskMode::None,
        };
        let mha = MultiHeadAttention::new(&mut store, "att", cfg, &mut rng).unwrap();
        let x = random(&[5, 4], 8);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 4]);
        for (i, &p) in perm.iter().enumerate() {
            xp.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(x.row(p));
        }
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            g.bind(&store);
            let v = g.constant(x.clone());
            let (out, _) = mha.forward(&mut g, v, v, v, &Mask::None).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(&x), run(&xp));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((b.get(i, c) - a.get(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_queries_and_keys_scales_logits_quadratically() {
        let q = random(&[3, 4], 1);
        let k = random(&[4, 4], 2);
        let c = 1.7;
        let logits = |q: &Tensor, k: &Tensor| {
            let mut g = Graph::inference();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let out = dot_attention(&mut g, qv, kv, kv, &Mask::None).unwrap();
            g.value(out.logits).clone()
        };
        let base = logits(&q, &k);
        let scaled = logits(&q.map(|v| v * c), &k.map(|v| v * c));
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((b - c * c * a).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(positional_encoding(MAX_PE_LEN, 2).is_ok());
        assert!(matches!(positional_encoding(MAX_PE_LEN + 1, 2), Err(Error::Index(_))));
    }

    #[test]
    fn scaled_encoding_cases() {
        let x = random(&[3, 4], 5);
        let mut g = Graph::training(0);
        let xv = g.constant(x.clone());
        let zero = g.variable(Tensor::scalar(0.0));
        let y = scaled_positional_encoding(&mut g, xv, zero).unwrap();
        assert_eq!(g.value(y), &x);
        let one = g.variable(Tensor::scalar(1.0));
        let y1 = scaled_positional_encoding(&mut g, xv, one).unwrap();
        let y2 = add_positional_encoding(&mut g, xv).unwrap();
        assert_eq!(g.value(y1), g.value(y2));

        let errs = grad_check_many(&[x, Tensor::scalar(1.0)], 1e-5, |g, v| {
            let y = scaled_positional_encoding(g, v[0], v[1])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(errs[1] < 1e-5, "alpha grad error {}", errs[1]);
    }

    #[test]
    fn record_csv_dump() {
        let mut g = Graph::inference();
        let q = g.constant(random(&[2, 3], 1));
        let out = dot_attention(&mut g, q, q, q, &Mask::Causal).unwrap();
        let rec = AttentionRecord {
            weights: vec![out.weights],
            logits: vec![out.logits],
        };
        let mut buf = Vec::new();
        rec.write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("head,row,col,weight\n0,0,0,1\n0,0,1,0\n"));
        assert_eq!(text.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn causal_mask_is_lower_triangular(n in 1usize..12) {
            let m = causal_mask(n);
            for t in 0..n {
                for u in 0..n {
                    prop_assert_eq!(m.get(t, u), if u <= t { 1.0 } else { 0.0 });
                }
            }
        }
    }
}
