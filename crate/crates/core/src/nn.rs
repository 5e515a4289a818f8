//! Small neural building blocks on the tape.
//!
//! Layers are described by *specs* (name + shape); their parameters live in a
//! [`ParamStore`] under `spec_name.layer.{w,b}` and are placed onto a [`Tape`]
//! through a [`Binder`], which caches one leaf per parameter so gradients
//! accumulate across repeated uses (e.g. a predictor applied at several
//! diffusion steps).

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape, Var};

/// Binds store entries onto a tape as shared leaves.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: HashMap<usize, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder { store, bound: HashMap::new() }
    }

    /// Leaf for the named parameter, created on first use.
    pub fn bind(&mut self, t: &mut Tape, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|_| panic!("unbound parameter '{name}'"));
        if let Some(&v) = self.bound.get(&idx) {
            return v;
        }
        let v = t.leaf(self.store.get(name).unwrap().to_vec());
        self.bound.insert(idx, v);
        v
    }

    /// Collects `(store index, gradient)` for every bound parameter the loss
    /// actually reached.
    pub fn grads(&self, g: &Gradients) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(&idx, &var)| g.wrt(var).map(|gr| (idx, gr.to_vec())))
            .collect();
        out.sort_by_key(|(idx, _)| *idx);
        out
    }
}

fn init_normal(store: &mut ParamStore, name: &str, n: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    store.insert(name, v)
}

/// Fully-connected layer `out_dim x in_dim`, with an optional bias.
#[derive(Clone, Debug)]
pub struct LinearSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LinearSpec { name: name.into(), in_dim, out_dim, bias: true }
    }

    /// Pure linear map, no offset; `forward(a*x) == a*forward(x)`.
    pub fn new_no_bias(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LinearSpec { name: name.into(), in_dim, out_dim, bias: false }
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn n_params(&self) -> usize {
        self.out_dim * self.in_dim + if self.bias { self.out_dim } else { 0 }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let std = 1.0 / (self.in_dim as f64).sqrt();
        init_normal(store, &self.w_name(), self.out_dim * self.in_dim, std, rng)?;
        if self.bias {
            store.insert(&self.b_name(), vec![0.0; self.out_dim])?;
        }
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, b: &mut Binder, x: Var) -> Var {
        let w = b.bind(t, &self.w_name());
        let y = t.matvec(w, x, self.out_dim, self.in_dim);
        if self.bias {
            let bias = b.bind(t, &self.b_name());
            t.add(y, bias)
        } else {
            y
        }
    }
}

/// Multilayer perceptron: tanh on hidden layers, linear output.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        MlpSpec { name: name.into(), dims }
    }

    pub fn layers(&self) -> Vec<LinearSpec> {
        (0..self.dims.len() - 1)
            .map(|i| LinearSpec::new(format!("{}.l{i}", self.name), self.dims[i], self.dims[i + 1]))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.n_params()).sum()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in self.layers() {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, b: &mut Binder, x: Var) -> Var {
        let layers = self.layers();
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(t, b, h);
            if i + 1 < layers.len() {
                h = t.tanh(h);
            }
        }
        h
    }
}

/// Residual block `x + W2 tanh(W1 x)` with a narrow hidden width.
#[derive(Clone, Debug)]
pub struct BottleneckSpec {
    pub name: String,
    pub dim: usize,
    pub hidden: usize,
}

impl BottleneckSpec {
    pub fn new(name: impl Into<String>, dim: usize, hidden: usize) -> Self {
        BottleneckSpec { name: name.into(), dim, hidden }
    }

    fn down(&self) -> LinearSpec {
        LinearSpec::new(format!("{}.down", self.name), self.dim, self.hidden)
    }

    fn up(&self) -> LinearSpec {
        LinearSpec::new(format!("{}.up", self.name), self.hidden, self.dim)
    }

    pub fn n_params(&self) -> usize {
        self.down().n_params() + self.up().n_params()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.down().init(store, rng)?;
        self.up().init(store, rng)
    }

    pub fn forward(&self, t: &mut Tape, b: &mut Binder, x: Var) -> Var {
        let h = self.down().forward(t, b, x);
        let h = t.tanh(h);
        let h = self.up().forward(t, b, h);
        t.add(x, h)
    }
}

/// Noise predictor: timestep-embedding table feeding a stack of bottleneck
/// blocks with a final linear output layer.
#[derive(Clone, Debug)]
pub struct NoisePredictorSpec {
    pub name: String,
    pub d_z: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub t_max: usize,
}

impl NoisePredictorSpec {
    pub fn new(name: impl Into<String>, d_z: usize, hidden: usize, n_blocks: usize, t_max: usize) -> Self {
        NoisePredictorSpec { name: name.into(), d_z, hidden, n_blocks, t_max }
    }

    fn temb_name(&self) -> String {
        format!("{}.temb", self.name)
    }

    fn blocks(&self) -> Vec<BottleneckSpec> {
        (0..self.n_blocks)
            .map(|i| BottleneckSpec::new(format!("{}.b{i}", self.name), self.d_z, self.hidden))
            .collect()
    }

    fn out(&self) -> LinearSpec {
        LinearSpec::new(format!("{}.out", self.name), self.d_z, self.d_z)
    }

    pub fn n_params(&self) -> usize {
        (self.t_max + 1) * self.d_z
            + self.blocks().iter().map(|b| b.n_params()).sum::<usize>()
            + self.out().n_params()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let std = 1.0 / (self.d_z as f64).sqrt();
        init_normal(store, &self.temb_name(), (self.t_max + 1) * self.d_z, std, rng)?;
        for blk in self.blocks() {
            blk.init(store, rng)?;
        }
        self.out().init(store, rng)
    }

    /// Predicted noise for a latent at integer timestep `step <= t_max`.
    pub fn forward(&self, t: &mut Tape, b: &mut Binder, z_t: Var, step: usize) -> Var {
        assert!(step <= self.t_max, "timestep {step} beyond table");
        let table = b.bind(t, &self.temb_name());
        let emb = t.embed_row(table, step, self.d_z);
        let mut h = t.add(z_t, emb);
        for blk in self.blocks() {
            h = blk.forward(t, b, h);
        }
        self.out().forward(t, b, h)
    }
}

/// Gate network producing a blend coefficient in `(0, 1)` from a latent:
/// one bottleneck block, global average pooling (identity on flat vectors,
/// kept as the feature vector itself), and a linear head through a sigmoid.
#[derive(Clone, Debug)]
pub struct AdapterSpec {
    pub name: String,
    pub d_z: usize,
    pub hidden: usize,
}

impl AdapterSpec {
    pub fn new(name: impl Into<String>, d_z: usize, hidden: usize) -> Self {
        AdapterSpec { name: name.into(), d_z, hidden }
    }

    fn block(&self) -> BottleneckSpec {
        BottleneckSpec::new(format!("{}.block", self.name), self.d_z, self.hidden)
    }

    fn head(&self) -> LinearSpec {
        LinearSpec::new(format!("{}.head", self.name), self.d_z, 1)
    }

    pub fn n_params(&self) -> usize {
        self.block().n_params() + self.head().n_params()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.block().init(store, rng)?;
        self.head().init(store, rng)
    }

    /// Scalar gate value, strictly inside `(0, 1)`.
    pub fn forward(&self, t: &mut Tape, b: &mut Binder, z: Var) -> Var {
        let h = self.block().forward(t, b, z);
        let logit = self.head().forward(t, b, h);
        t.sigmoid(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_relative_error};
    use crate::rng::{stream_rng, stream};

    fn test_rng(tag: u64) -> ChaCha8Rng {
        stream_rng(42, stream::INIT, &[tag])
    }

    #[test]
    fn linear_forward_matches_manual_matvec() {
        let spec = LinearSpec::new("lin", 2, 3);
        let mut store = ParamStore::new();
        store.insert("lin.w", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        store.insert("lin.b", vec![0.5, -0.5, 0.0]).unwrap();
        let mut t = Tape::new();
        let mut b = Binder::new(&store);
        let x = t.leaf(vec![10.0, 100.0]);
        let y = spec.forward(&mut t, &mut b, x);
        assert_eq!(t.value(y), &[210.5, 429.5, 650.0]);
    }

    #[test]
    fn param_counts_match_registered_scalars() {
        let mut store = ParamStore::new();
        let mut rng = test_rng(0);
        let mlp = MlpSpec::new("m", vec![5, 7, 3]);
        mlp.init(&mut store, &mut rng).unwrap();
        assert_eq!(store.n_scalars(), mlp.n_params());
        let mut store2 = ParamStore::new();
        let pred = NoisePredictorSpec::new("p", 4, 2, 2, 10);
        pred.init(&mut store2, &mut rng).unwrap();
        assert_eq!(store2.n_scalars(), pred.n_params());
    }

    #[test]
    fn bottleneck_with_zero_up_weights_is_identity() {
        let spec = BottleneckSpec::new("blk", 4, 2);
        let mut store = ParamStore::new();
        let mut rng = test_rng(1);
        spec.init(&mut store, &mut rng).unwrap();
        store.get_mut("blk.up.w").unwrap().iter_mut().for_each(|v| *v = 0.0);
        let mut t = Tape::new();
        let mut b = Binder::new(&store);
        let x = t.leaf(vec![1.0, -2.0, 3.0, 0.5]);
        let y = spec.forward(&mut t, &mut b, x);
        assert_eq!(t.value(y), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn mlp_gradient_passes_finite_difference_check() {
        let spec = MlpSpec::new("m", vec![3, 4, 2]);
        let mut store = ParamStore::new();
        let mut rng = test_rng(2);
        spec.init(&mut store, &mut rng).unwrap();
        let x0 = vec![0.3, -0.2, 0.9];
        let target = vec![0.1, -0.4];

        let mut t = Tape::new();
        let mut b = Binder::new(&store);
        let x = t.leaf(x0.clone());
        let y = spec.forward(&mut t, &mut b, x);
        let tgt = t.leaf(target.clone());
        let loss = t.mse(y, tgt);
        let g = t.backward(loss);
        let grads = b.grads(&g);
        assert_eq!(grads.len(), store.len(), "all layers must receive gradient");

        for (idx, analytic) in &grads {
            let name = store.name_at(*idx).to_string();
            let base = store.get(&name).unwrap().to_vec();
            let numeric = central_diff(
                |p| {
                    let mut s = store.clone();
                    s.get_mut(&name).unwrap().copy_from_slice(p);
                    let mut t = Tape::new();
                    let mut b = Binder::new(&s);
                    let x = t.leaf(x0.clone());
                    let y = spec.forward(&mut t, &mut b, x);
                    let tgt = t.leaf(target.clone());
                    let l = t.mse(y, tgt);
                    t.scalar_value(l)
                },
                &base,
                1e-5,
            );
            let err = max_relative_error(analytic, &numeric);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn predictor_shares_parameters_across_timesteps() {
        let spec = NoisePredictorSpec::new("p", 3, 2, 1, 8);
        let mut store = ParamStore::new();
        let mut rng = test_rng(3);
        spec.init(&mut store, &mut rng).unwrap();
        let mut t = Tape::new();
        let mut b = Binder::new(&store);
        let z = t.leaf(vec![0.1, 0.2, 0.3]);
        let e1 = spec.forward(&mut t, &mut b, z, 8);
        let e2 = spec.forward(&mut t, &mut b, e1, 4);
        let loss = t.sum_sq(e2);
        let g = t.backward(loss);
        let grads = b.grads(&g);
        let temb_idx = store.index_of("p.temb").unwrap();
        let temb_grad = grads.iter().find(|(i, _)| *i == temb_idx).expect("temb gradient");
        let nonzero_rows: Vec<usize> = (0..=8)
            .filter(|r| temb_grad.1[r * 3..(r + 1) * 3].iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(nonzero_rows, vec![4, 8], "only used timesteps receive gradient");
    }

    #[test]
    fn adapter_gate_stays_in_unit_interval() {
        let spec = AdapterSpec::new("a", 4, 2);
        let mut store = ParamStore::new();
        let mut rng = test_rng(4);
        spec.init(&mut store, &mut rng).unwrap();
        for k in 0..20 {
            let mut t = Tape::new();
            let mut b = Binder::new(&store);
            let z = t.leaf((0..4).map(|j| ((k * 4 + j) as f64 * 0.71).sin() * 3.0).collect());
            let gate = spec.forward(&mut t, &mut b, z);
            let v = t.scalar_value(gate);
            assert!(v > 0.0 && v < 1.0, "gate {v} outside (0,1)");
        }
    }
}
