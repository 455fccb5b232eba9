use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{matmul_into, matmul_nt_into, matmul_tn_into, transpose_data, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Window geometry for the im2col convolution kernel.
///
/// Inputs are laid out `[h × w × c_in]` (channels last); a 1-d convolution
/// over `[t × c_in]` is the `w = 1` case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn validate(&self) -> Result<()> {
        if self.sh == 0 || self.sw == 0 {
            return Err(dim_err!("convolution stride must be positive"));
        }
        if self.h + 2 * self.ph < self.kh || self.w + 2 * self.pw < self.kw {
            return Err(dim_err!(
                "kernel {}x{} does not fit padded input {}x{}",
                self.kh,
                self.kw,
                self.h + 2 * self.ph,
                self.w + 2 * self.pw
            ));
        }
        Ok(())
    }
}

/// Output length of a strided 1-d convolution.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || t + 2 * padding < kernel {
        None
    } else {
        Some((t + 2 * padding - kernel) / stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    ScalarFn {
        x: Var,
        local: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Affine(a, _)
            | Relu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Abs(a)
            | Softplus(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Dropout(a, _)
            | Reshape(a)
            | Sum(a)
            | Mean(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv { x, w, b, .. } => vec![*x, *w, *b],
            MaxPool { x, .. } | SliceCols { x, .. } | SliceRows { x, .. } | Pick { x, .. } => {
                vec![*x]
            }
            ScalarFn { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations supporting reverse-mode differentiation.
///
/// A graph is built once per forward pass and discarded after the
/// gradients are read. All stochastic ops draw from the graph's own
/// ChaCha stream, so rebuilding with the same seed and inputs replays
/// the computation bit for bit.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    rng: ChaCha8Rng,
    seed: u64,
    training: bool,
    params: Vec<Var>,
    backward_done: bool,
}

impl Graph {
    pub fn new(seed: u64, training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            training,
            params: Vec::new(),
            backward_done: false,
        }
    }

    /// Graph for differentiable forward passes (dropout active).
    pub fn training(seed: u64) -> Self {
        Self::new(seed, true)
    }

    /// Graph for frozen-weight evaluation; parameters carry no gradient.
    pub fn inference() -> Self {
        Self::new(0, false)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(Arc::new(value), op, requires_grad)
    }

    fn push_with(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_with(Arc::new(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers every parameter of `store` as a leaf. Leaves require
    /// gradients only on training graphs. Values are shared, not copied.
    pub fn bind(&mut self, store: &ParamStore) {
        let track = self.training;
        self.params = store.shared_values().map(|v| self.push_with(v, Op::Leaf, track)).collect();
    }

    /// Leaf bound to a parameter by [`Graph::bind`].
    pub fn p(&self, id: ParamId) -> Var {
        *self.params.get(id.index()).expect("parameter store not bound to this graph")
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        if s.len() != 2 {
            return Err(dim_err!("{what} expects a matrix, got {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[d]` bias to every row of `x[.. × d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.val(x), self.val(b));
        let d = xt.last_dim();
        if bt.len() != d {
            return Err(dim_err!("bias of length {} for rows of width {}", bt.len(), d));
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, bv) in row.iter_mut().zip(bt.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.val(x).map(|v| scale * v + shift);
        Ok(self.push(out, Op::Affine(x, scale)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Multiplies `x` by a differentiable scalar `s` (shape `[1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(dim_err!("scale_by expects a scalar, got {:?}", self.val(s).shape()));
        }
        let c = self.val(s).item();
        let out = self.val(x).map(|v| c * v);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(f64::exp);
        if !out.is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(out, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.val(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let out = self.val(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(f64::abs);
        Ok(self.push(out, Op::Abs(x)))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(softplus);
        Ok(self.push(out, Op::Softplus(x)))
    }

    // ---- normalizations --------------------------------------------------

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.val(x);
        let d = xt.last_dim();
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.val(x);
        let d = xt.last_dim();
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Per-row normalization over the trailing axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let xt = self.val(x);
        let d = xt.last_dim();
        if d == 0 {
            return Err(dim_err!("layer_norm over an empty axis"));
        }
        let (g, b) = (self.val(gain), self.val(bias));
        if g.len() != d || b.len() != d {
            return Err(dim_err!("layer_norm gain/bias lengths {}/{} for width {}", g.len(), b.len(), d));
        }
        let rows = xt.outer();
        let mut xhat = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity when `active` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.val(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let xt = self.val(x);
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    // ---- convolution / pooling / lookup -----------------------------------

    /// 2-d convolution over `[h × w × c_in]` with weight `[(kh·kw·c_in) × c_out]`
    /// and bias `[c_out]`; output `[h_out × w_out × c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        geom.validate()?;
        let xt = self.val(x);
        if xt.len() != geom.h * geom.w * geom.c_in {
            return Err(dim_err!(
                "conv input {:?} does not match {}x{}x{}",
                xt.shape(),
                geom.h,
                geom.w,
                geom.c_in
            ));
        }
        let wt = self.val(w);
        if wt.shape() != [geom.patch(), geom.c_out] {
            return Err(dim_err!(
                "conv weight {:?}, expected [{}, {}]",
                wt.shape(),
                geom.patch(),
                geom.c_out
            ));
        }
        if self.val(b).len() != geom.c_out {
            return Err(dim_err!("conv bias length {}", self.val(b).len()));
        }
        let cols = im2col(xt.data(), &geom);
        let rows = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; rows * geom.c_out];
        matmul_into(&cols, wt.data(), &mut out, rows, geom.patch(), geom.c_out);
        let bias = self.val(b).data();
        for row in out.chunks_mut(geom.c_out) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = if xt.rank() == 2 && geom.w == 1 {
            vec![geom.out_h(), geom.c_out]
        } else {
            vec![geom.out_h(), geom.out_w(), geom.c_out]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }))
    }

    /// 1-d convolution over time for `x[t × c_in]` with weight `[(k·c_in) × c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (t, c_in) = self.matrix_dims(x, "conv1d")?;
        let c_out = self.val(w).last_dim();
        let geom = ConvGeom {
            h: t,
            w: 1,
            c_in,
            c_out,
            kh: kernel,
            kw: 1,
            sh: stride,
            sw: 1,
            ph: padding,
            pw: 0,
        };
        self.conv2d(x, w, b, geom)
    }

    /// Non-overlapping max pooling over time (`ceil` mode) for `x[t × c]`.
    pub fn max_pool_time(&mut self, x: Var, size: usize) -> Result<Var> {
        let (t, c) = self.matrix_dims(x, "max_pool_time")?;
        if size == 0 || t == 0 {
            return Err(dim_err!("max_pool_time needs positive size and length"));
        }
        let out_t = t.div_ceil(size);
        let xt = self.val(x).data();
        let mut out = vec![0.0; out_t * c];
        let mut argmax = vec![0; out_t * c];
        for o in 0..out_t {
            for ch in 0..c {
                let mut best = o * size * c + ch;
                for s in o * size..((o + 1) * size).min(t) {
                    let idx = s * c + ch;
                    if xt[idx] > xt[best] {
                        best = idx;
                    }
                }
                out[o * c + ch] = xt[best];
                argmax[o * c + ch] = best;
            }
        }
        let out = Tensor::new(vec![out_t, c], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Rows of `table[V × d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tt = self.val(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of nothing"));
        }
        let m = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return Err(dim_err!("concat_cols row counts {} and {}", m, r));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of nothing"));
        }
        let n = self.matrix_dims(parts[0], "concat_rows")?.1;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != n {
                return Err(dim_err!("concat_rows widths {} and {}", n, c));
            }
            m += r;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.val(p).data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Index(format!("columns {start}..{} of {n}", start + len)));
        }
        let xt = self.val(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xt[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::Index(format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.val(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        if t.is_empty() {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// `out[i] = x[i, idx[i]]` for `x[m × n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "pick")?;
        if idx.len() != m {
            return Err(dim_err!("pick needs {} indices, got {}", m, idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Index(format!("column {bad} of {n}")));
        }
        let xt = self.val(x).data();
        let data = idx.iter().enumerate().map(|(i, &j)| xt[i * n + j]).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick { x, idx: idx.to_vec() }))
    }

    /// Scalar node whose value and local gradient w.r.t. `x` were computed
    /// outside the graph (e.g. by a dynamic-programming loss).
    pub fn scalar_fn(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.val(x).len() {
            return Err(dim_err!(
                "local gradient of length {} for input of {}",
                local_grad.len(),
                self.val(x).len()
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, local: local_grad }))
    }

    // ---- backward ---------------------------------------------------------

    /// Clears accumulated gradients so [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates `∂loss/∂v` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran; reset gradients first".into()));
        }
        if self.val(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::new(self.val(loss).shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = node.value.data();
        let g = gy.data();
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if wants(a) {
                    let buf = grad_buf(grads, nodes, *a);
                    matmul_nt_into(g, val(b).data(), buf, m, n, k);
                }
                if wants(b) {
                    let buf = grad_buf(grads, nodes, *b);
                    matmul_tn_into(val(a).data(), g, buf, k, m, n);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                    let t = transpose_data(g, n, m);
                    add_into(grad_buf(grads, nodes, *a), &t);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(grad_buf(grads, nodes, *a), g);
                }
                if wants(b) {
                    add_into(grad_buf(grads, nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(grad_buf(grads, nodes, *a), g);
                }
                if wants(b) {
                    let buf = grad_buf(grads, nodes, *b);
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let other = val(b).data();
                    let buf = grad_buf(grads, nodes, *a);
                    for ((o, v), w) in buf.iter_mut().zip(g).zip(other) {
                        *o += v * w;
                    }
                }
                if wants(b) {
                    let other = val(a).data();
                    let buf = grad_buf(grads, nodes, *b);
                    for ((o, v), w) in buf.iter_mut().zip(g).zip(other) {
                        *o += v * w;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(x) {
                    add_into(grad_buf(grads, nodes, *x), g);
                }
                if wants(b) {
                    let d = val(b).len();
                    let buf = grad_buf(grads, nodes, *b);
                    for row in g.chunks(d.max(1)) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Affine(x, c) => {
                if wants(x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let c = val(s).item();
                if wants(x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
                if wants(s) {
                    let dot: f64 = g.iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    grad_buf(grads, nodes, *s)[0] += dot;
                }
            }
            Op::Relu(x) => unary_grad(grads, nodes, *x, g, |k, _| if val(x).data()[k] > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(x) => unary_grad(grads, nodes, *x, g, |k, _| 1.0 - y[k] * y[k]),
            Op::Sigmoid(x) => unary_grad(grads, nodes, *x, g, |k, _| y[k] * (1.0 - y[k])),
            Op::Exp(x) => unary_grad(grads, nodes, *x, g, |k, _| y[k]),
            Op::Log(x) => unary_grad(grads, nodes, *x, g, |k, _| 1.0 / val(x).data()[k]),
            Op::Abs(x) => unary_grad(grads, nodes, *x, g, |k, _| {
                let v = val(x).data()[k];
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Softplus(x) => unary_grad(grads, nodes, *x, g, |k, _| sigmoid(val(x).data()[k])),
            Op::Softmax(x) => {
                if wants(x) {
                    let d = node.value.last_dim().max(1);
                    let buf = grad_buf(grads, nodes, *x);
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..yr.len() {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if wants(x) {
                    let d = node.value.last_dim().max(1);
                    let buf = grad_buf(grads, nodes, *x);
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..yr.len() {
                            br[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = val(gain).data();
                if wants(x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            buf[r * d + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if wants(gain) {
                    let buf = grad_buf(grads, nodes, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(bias) {
                    let buf = grad_buf(grads, nodes, *bias);
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                }
            }
            Op::Dropout(x, mask) => unary_grad(grads, nodes, *x, g, |k, _| mask[k]),
            Op::Conv { x, w, b, geom, cols } => {
                let rows = geom.out_h() * geom.out_w();
                let patch = geom.patch();
                if wants(w) {
                    let buf = grad_buf(grads, nodes, *w);
                    matmul_tn_into(cols, g, buf, patch, rows, geom.c_out);
                }
                if wants(b) {
                    let buf = grad_buf(grads, nodes, *b);
                    for row in g.chunks(geom.c_out) {
                        add_into(buf, row);
                    }
                }
                if wants(x) {
                    let mut dcols = vec![0.0; rows * patch];
                    matmul_nt_into(g, val(w).data(), &mut dcols, rows, geom.c_out, patch);
                    col2im_add(&dcols, geom, grad_buf(grads, nodes, *x));
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for (&src, v) in argmax.iter().zip(g) {
                        buf[src] += v;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let d = val(table).shape()[1];
                    let buf = grad_buf(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let c = val(p).shape()[1];
                    if wants(p) {
                        let buf = grad_buf(grads, nodes, *p);
                        for r in 0..m {
                            add_into(&mut buf[r * c..(r + 1) * c], &g[r * n + offset..r * n + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        add_into(grad_buf(grads, nodes, *p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(x) {
                    let n = val(x).shape()[1];
                    let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
                    let buf = grad_buf(grads, nodes, *x);
                    for r in 0..m {
                        add_into(&mut buf[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(x) {
                    let n = val(x).shape()[1];
                    let buf = grad_buf(grads, nodes, *x);
                    add_into(&mut buf[start * n..start * n + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if wants(x) {
                    add_into(grad_buf(grads, nodes, *x), g);
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let s = g[0];
                    for o in grad_buf(grads, nodes, *x).iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let s = g[0] / val(x).len() as f64;
                    for o in grad_buf(grads, nodes, *x).iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if wants(x) {
                    let n = val(x).shape()[1];
                    let buf = grad_buf(grads, nodes, *x);
                    for (r, &j) in idx.iter().enumerate() {
                        buf[r * n + j] += g[r];
                    }
                }
            }
            Op::ScalarFn { x, local } => {
                if wants(x) {
                    let s = g[0];
                    let buf = grad_buf(grads, nodes, *x);
                    for (o, l) in buf.iter_mut().zip(local) {
                        *o += s * l;
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())).data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn unary_grad(grads: &mut [Option<Tensor>], nodes: &[Node], x: Var, g: &[f64], local: impl Fn(usize, f64) -> f64) {
    if !nodes[x.0].requires_grad {
        return;
    }
    let buf = grad_buf(grads, nodes, x);
    for (k, (o, &v)) in buf.iter_mut().zip(g).enumerate() {
        *o += v * local(k, v);
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
    let mut cols = vec![0.0; oh * ow * patch];
    for r in 0..oh {
        for c in 0..ow {
            let base = (r * ow + c) * patch;
            for i in 0..geom.kh {
                let hi = (r * geom.sh + i) as isize - geom.ph as isize;
                if hi < 0 || hi as usize >= geom.h {
                    continue;
                }
                for j in 0..geom.kw {
                    let wj = (c * geom.sw + j) as isize - geom.pw as isize;
                    if wj < 0 || wj as usize >= geom.w {
                        continue;
                    }
                    let src = (hi as usize * geom.w + wj as usize) * geom.c_in;
                    let dst = base + (i * geom.kw + j) * geom.c_in;
                    cols[dst..dst + geom.c_in].copy_from_slice(&x[src..src + geom.c_in]);
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
    for r in 0..oh {
        for c in 0..ow {
            let base = (r * ow + c) * patch;
            for i in 0..geom.kh {
                let hi = (r * geom.sh + i) as isize - geom.ph as isize;
                if hi < 0 || hi as usize >= geom.h {
                    continue;
                }
                for j in 0..geom.kw {
                    let wj = (c * geom.sw + j) as isize - geom.pw as isize;
                    if wj < 0 || wj as usize >= geom.w {
                        continue;
                    }
                    let dst = (hi as usize * geom.w + wj as usize) * geom.c_in;
                    let src = base + (i * geom.kw + j) * geom.c_in;
                    add_into(&mut dx[dst..dst + geom.c_in], &dcols[src..src + geom.c_in]);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log Σ exp(v)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(e^a + e^b)` without overflow.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
