//! Parameterized building blocks shared by the encoders and decoders.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `x·W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_weight(format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.p(self.w))?;
        match self.b {
            Some(b) => g.add_bias(y, g.p(b)),
            None => Ok(y),
        }
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), &[d]),
            bias: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, g.p(self.gain), g.p(self.bias))
    }
}

/// Position-wise `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), d, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), d_ff, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        let active = g.is_training();
        let h = g.dropout(h, dropout, active)?;
        self.outer.forward(g, h)
    }
}

/// LSTM cell with gates ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub units: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmCell {
            wx: store.add_weight(format!("{name}.wx"), d_in, 4 * units, rng),
            wh: store.add_weight(format!("{name}.wh"), units, 4 * units, rng),
            b: store.add_zeros(format!("{name}.b"), &[4 * units]),
            units,
        }
    }

    /// Input contribution `x·Wx + b` for every row at once.
    pub fn project_inputs(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, g.p(self.wx))?;
        g.add_bias(xw, g.p(self.b))
    }

    /// One step from a precomputed `[1 × 4u]` input projection.
    pub fn step_projected(&self, g: &mut Graph, xw: Var, state: LstmState) -> Result<LstmState> {
        let u = self.units;
        let hw = g.matmul(state.h, g.p(self.wh))?;
        let z = g.add(xw, hw)?;
        let i = g.slice_cols(z, 0, u)?;
        let f = g.slice_cols(z, u, u)?;
        let c_hat = g.slice_cols(z, 2 * u, u)?;
        let o = g.slice_cols(z, 3 * u, u)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let c_hat = g.tanh(c_hat)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, c_hat)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> Result<LstmState> {
        let xw = self.project_inputs(g, x)?;
        self.step_projected(g, xw, state)
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState::zeros(g, self.units)
    }

    /// Runs over all rows of `x[t × d_in]`, optionally right to left, and
    /// returns the hidden states in input order.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let t = match g.shape(x) {
            [t, _] => *t,
            s => return Err(dim_err!("lstm input must be a matrix, got {:?}", s)),
        };
        if t == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, self.units])));
        }
        let xw = self.project_inputs(g, x)?;
        let mut state = self.zero_state(g);
        let mut hs = vec![state.h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let row = g.slice_rows(xw, i, 1)?;
            state = self.step_projected(g, row, state)?;
            hs[i] = state.h;
        }
        g.concat_rows(&hs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, units: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[1, units]));
        let c = g.constant(Tensor::zeros(&[1, units]));
        LstmState { h, c }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::{grad_check_params, jitter};

    #[test]
    fn linear_maps_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 2, 3, true, &mut rng);
        store.set(lin.b.unwrap(), Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let mut g = Graph::inference();
        g.bind(&store);
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 3]);
        assert_eq!(g.value(y).row(3), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn lstm_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
        let check = grad_check_params(&jitter(&store, 0.1, 1), 1e-5, 12, 9, |g| {
            let xv = g.constant(x.clone());
            let fwd = cell.run(g, xv, false)?;
            let bwd = cell.run(g, xv, true)?;
            let both = g.mul(fwd, bwd)?;
            g.sum(both)
        })
        .unwrap();
        assert!(check.worst() < 1e-5, "{:?}", check.worst_param());
    }

    #[test]
    fn reverse_run_equals_forward_on_reversed_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2]).collect();
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let mut g = Graph::inference();
        g.bind(&store);
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let xr = g.constant(Tensor::from_rows(&rev).unwrap());
        let a = cell.run(&mut g, x, true).unwrap();
        let b = cell.run(&mut g, xr, false).unwrap();
        for i in 0..4 {
            assert_eq!(g.value(a).row(i), g.value(b).row(3 - i));
        }
    }
}
