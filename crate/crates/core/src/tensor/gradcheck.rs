//! Central finite-difference checks against reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Seed used for every graph built during a check, so stochastic ops
/// draw the same masks on each re-evaluation.
const CHECK_SEED: u64 = 0x5eed;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(g: &Graph, loss: Var) -> Result<f64> {
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::Backward(format!(
            "checked function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Worst relative error between autodiff and central differences for `f`
/// at `x` with step `h`.
pub fn grad_check<F>(x: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = grad_check_many(std::slice::from_ref(x), h, |g, vs| f(g, vs[0]))?;
    Ok(errs[0])
}

/// Per-input worst relative error for a function of several tensors.
pub fn grad_check_many<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::training(CHECK_SEED);
        let vs: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let loss = f(&mut g, &vs)?;
        scalar_of(&g, loss)
    };

    let mut g = Graph::training(CHECK_SEED);
    let vs: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&mut g, &vs)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;

    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, v) in vs.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut err: f64 = 0.0;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            err = err.max(relative_error(analytic.data()[k], numeric));
        }
        worst.push(err);
    }
    Ok(worst)
}

/// Result of checking every tensor of a parameter store.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    /// `(parameter name, worst relative error over checked coordinates)`.
    pub per_param: Vec<(String, f64)>,
}

impl ParamCheck {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Checks the gradient of `loss(graph)` w.r.t. every parameter in `store`.
///
/// `f` receives a training graph already bound to the (possibly perturbed)
/// store. At most `max_coords` coordinates per tensor are probed, chosen by
/// `sample_seed`; tensors smaller than that are checked exhaustively.
pub fn grad_check_params<F>(store: &ParamStore, h: f64, max_coords: usize, sample_seed: u64, f: F) -> Result<ParamCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::training(CHECK_SEED);
        g.bind(s);
        let loss = f(&mut g)?;
        scalar_of(&g, loss)
    };

    let mut g = Graph::training(CHECK_SEED);
    g.bind(store);
    let loss = f(&mut g)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;
    let grads = store.grads_from(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut per_param = Vec::with_capacity(store.len());
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut err: f64 = 0.0;
        for k in coords {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            err = err.max(relative_error(grads[id.index()].data()[k], numeric));
        }
        per_param.push((store.name(id).to_string(), err));
    }
    Ok(ParamCheck { per_param })
}

/// Copy of `store` with uniform noise in `[-scale, scale]` added to every
/// value, moving biases and gains off exact ReLU kinks before a check.
pub fn jitter(store: &ParamStore, scale: f64, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in out.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    out
}
