//! Parameters, seeded initialization, and linear layers.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::Tensor;

/// Deterministic generator: ChaCha with 8 rounds seeded from a `u64`
/// via `SeedableRng::seed_from_u64`. Identical seeds give bit-identical
/// streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "ChaCha8 (rand_chacha), seed_from_u64";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn tensor_uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(-bound, bound))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Registration order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.add_with_decay(name, tensor, true)
    }

    pub fn add_with_decay(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Stores the gradients of every parameter leaf bound on `tape`;
    /// parameters not reached by the backward pass get a zero gradient.
    pub fn absorb(&mut self, tape: &Tape, grads: &Gradients) {
        for t in &mut self.tensors {
            t.grad = Some(vec![0.0; t.numel()]);
        }
        for &(pid, var) in grads.params() {
            if let Some(g) = grads.get(var) {
                let dst = self.tensors[pid].grad.as_mut().expect("just set");
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
            debug_assert_eq!(tape.value(var).numel(), self.tensors[pid].numel());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// A tape under construction plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.param_leaf(id.0, self.store.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearLayer {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weight and bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = rng.tensor_uniform(&[fan_out, fan_in], bound);
        let b = rng.tensor_uniform(&[fan_out], bound);
        Self::from_tensors(store, name, w, b)
    }

    /// All-zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_tensors(store, name, Tensor::zeros(&[fan_out, fan_in]), Tensor::zeros(&[fan_out]))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (fan_out, fan_in) = (weight.dim(0), weight.dim(1));
        assert_eq!(bias.numel(), fan_out, "{name}: bias does not match weight rows");
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add_with_decay(format!("{name}.bias"), bias, false);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.tape.linear(x, w, Some(b))
    }
}

/// Affine layer normalization parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_with_decay(format!("{name}.gamma"), Tensor::full(&[width], 1.0), false),
            beta: store.add_with_decay(format!("{name}.beta"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.tape.layer_norm(x, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.uniform(-1.0, 1.0)).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.uniform(-1.0, 1.0)).collect();
        assert_eq!(xs, ys);
        let mut c = Rng::new(43);
        assert_ne!(xs[0], c.uniform(-1.0, 1.0));
    }

    #[test]
    fn linear_init_within_bounds() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let lin = LinearLayer::new(&mut store, &mut rng, "fc", 16, 4);
        let bound = 0.25;
        assert!(store.get(lin.weight).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.get(lin.weight).shape(), &[4, 16]);
        assert!(!store.decays(lin.bias));
    }
}
