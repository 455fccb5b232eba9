use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::Graph;
use crate::error::{dim_err, Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
}

/// Ordered, named collection of model parameters.
///
/// Values are reference counted so binding them into a graph is free;
/// updates copy-on-write if a graph still holds the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform weight `[fan_in × fan_out]`.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        self.add(name, glorot_uniform(fan_in, fan_out, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.value.as_ref()))
    }

    pub(crate) fn shared_values(&self) -> impl Iterator<Item = Arc<Tensor>> + '_ {
        self.entries.iter().map(|e| Arc::clone(&e.value))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            ));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces values from `(name, tensor)` pairs; every parameter must be
    /// present with the same shape.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in named {
            let Some(id) = self.id(name) else {
                return Err(Error::Format(format!("unknown parameter {name}")));
            };
            self.set(id, t.clone())?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("parameter {} missing from checkpoint", self.entries[i].name)));
        }
        Ok(())
    }

    /// Gradients of every parameter from a graph bound with [`Graph::bind`];
    /// unused parameters get zeros.
    pub fn grads_from(&self, g: &Graph) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(g.param_vars())
            .map(|(e, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(e.value.shape())))
            .collect()
    }
}

/// `uniform(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = glorot_uniform(10, 20, &mut rng);
        let s = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < s));
    }

    #[test]
    fn copy_on_write_keeps_bound_values() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut g = Graph::training(0);
        g.bind(&store);
        store.get_mut(id).data_mut()[0] = 5.0;
        assert_eq!(g.value(g.p(id)).item(), 1.0);
        assert_eq!(store.get(id).item(), 5.0);
    }
}
