//! Learnable parameters, the registry that owns them, and dense layers.

use rand::Rng as _;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Uniform Xavier/Glorot initialization.
///
/// Fan-in is the first axis and fan-out the last; a vector of length `n`
/// is treated as `(1, n)`.
pub fn xavier_uniform_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    xavier_from_stream(shape, seed, 0)
}

fn xavier_from_stream(shape: &[usize], seed: u64, stream_id: u64) -> Result<Tensor> {
    let (fan_in, fan_out) = match shape {
        [] => return Err(Error::InvalidShape("xavier init of a scalar shape".into())),
        [n] => (1, *n),
        [first, .., last] => (*first, *last),
    };
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("zero-sized axis in {shape:?}")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_for(seed, stream_id);
    Ok(Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named parameters. Registration order is stable and
/// defines checkpoint layout and flattening order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
    seed: u64,
}

/// Graph handles for every parameter of a store, created by [`ParamStore::bind`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            seed,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    /// Register a Xavier-initialized parameter on its own random stream.
    pub fn add_xavier(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let stream_id = stream::PARAM_BASE + self.params.len() as u64;
        let value = xavier_from_stream(shape, self.seed, stream_id).expect("valid parameter shape");
        self.add(name, value)
    }

    /// Register a parameter whose entries are drawn by `sample` from the
    /// parameter's own random stream.
    pub fn add_sampled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut sample: impl FnMut(&mut crate::rng::Rng) -> f64,
    ) -> ParamId {
        let mut rng = rng_for(self.seed, stream::PARAM_BASE + self.params.len() as u64);
        let value = Tensor::from_fn(shape, |_| sample(&mut rng));
        self.add(name, value)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Record every parameter value as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone())).collect())
    }

    /// Add the adjoints of a bound graph into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        Tensor::from_vec(out)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidShape(format!(
                "flat parameter vector of {} for {} scalars",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Bind parameters as slices of one flat graph input, so a single
    /// tensor drives the whole model (used for gradient checking).
    pub fn bind_flat(&self, g: &mut Graph, flat: Var) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut off = 0;
        for p in &self.params {
            let n = p.value.len();
            let s = g.slice(flat, 0, off, n)?;
            vars.push(g.reshape(s, p.value.shape())?);
            off += n;
        }
        Ok(Bound(vars))
    }
}

/// Affine map on the last axis: `x · W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearMap {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[in_dim, out_dim]);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_scalars(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Affine pair of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let t = xavier_uniform_init(&[4, 4], 7).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        assert!((bound - 0.866).abs() < 1e-3);
        assert!(t.data().iter().all(|x| x.abs() <= bound));
        assert_eq!(xavier_uniform_init(&[2, 2], 7).unwrap(), xavier_uniform_init(&[2, 2], 7).unwrap());
        assert_ne!(xavier_uniform_init(&[2, 2], 7).unwrap(), xavier_uniform_init(&[2, 2], 8).unwrap());
        assert!(matches!(xavier_uniform_init(&[], 7), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn vector_treated_as_row() {
        let t = xavier_uniform_init(&[10], 3).unwrap();
        let bound = (6.0f64 / 11.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn linear_map_output_width() {
        let mut store = ParamStore::new(1);
        let lin = LinearMap::new(&mut store, "fc", 3, 5, true);
        assert_eq!(store.num_scalars(), LinearMap::num_scalars(3, 5, true));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::zeros(&[2, 4, 3]));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5]);
    }

    #[test]
    fn grads_match_value_shapes() {
        let mut store = ParamStore::new(1);
        let lin = LinearMap::new(&mut store, "fc", 3, 2, true);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::full(&[4, 3], 1.0));
        let y = lin.forward(&mut g, &p, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        store.accumulate_grads(&p, &grads);
        for (_, param) in store.iter() {
            assert_eq!(param.grad.shape(), param.value.shape());
        }
        assert_eq!(store.get(lin.bias.unwrap()).grad.data(), &[4.0, 4.0]);
    }

    #[test]
    fn flat_round_trip() {
        let mut store = ParamStore::new(5);
        LinearMap::new(&mut store, "a", 2, 3, true);
        LinearMap::new(&mut store, "b", 3, 1, false);
        let flat = store.flatten();
        let mut other = store.clone();
        other.set_flat(&vec![0.0; flat.len()]).unwrap();
        other.set_flat(flat.data()).unwrap();
        assert_eq!(other.flatten(), flat);
    }
}
