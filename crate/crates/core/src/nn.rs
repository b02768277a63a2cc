//! Parameter storage, layer building blocks and the optimizer.
//!
//! Parameters live in a flat `ParamStore`; layers hold ids into it and build
//! their computation on a `Graph`, which binds each parameter to a tape leaf
//! at most once per evaluation.

use crate::autodiff::{Grads, Tape, Tensor, Var};
use ndarray::IxDyn;
use rand::Rng;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Which optimization phase may update a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamRole {
    Generator,
    Discriminator,
    /// Never updated (fixed feature extractors).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id_by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter shape change for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids_with_role(&self, role: ParamRole) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == role)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// One evaluation graph over a parameter store.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<usize, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new() }
    }

    /// Binds a parameter to a tape leaf (cached per graph).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id.0) {
            return *v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound.insert(id.0, v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collects gradients for all bound parameters after a backward pass.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<ParamId, Tensor> {
        let mut out = BTreeMap::new();
        for (idx, var) in &self.bound {
            if let Some(g) = grads.get(*var) {
                out.insert(ParamId(*idx), g.clone());
            }
        }
        out
    }
}

// ---- initializers ----

pub fn init_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * std
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// Variance-scaled init: std = 1/sqrt(fan_in).
pub fn init_scaled(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    init_normal(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

// ---- layers ----

/// Plain affine layer, weight stored [in, out], y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        n_in: usize,
        n_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), role, init_scaled(&[n_in, n_out], n_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), role, zeros(&[n_out])));
        Self { w, b, n_in, n_out }
    }

    /// x: [n, in] -> [n, out]
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.w);
        let mut y = g.tape.matmul(x, w);
        if let Some(bid) = self.b {
            let b = g.p(bid);
            let rows = g.tape.shape(y)[0];
            let b2 = g.tape.reshape(b, &[1, self.n_out]);
            let bb = g.tape.broadcast_to(b2, &[rows, self.n_out]);
            y = g.tape.add(y, bb);
        }
        y
    }
}

/// Affine layer with equalized-scale parameterization: weights stored unit
/// normal, rescaled by 1/sqrt(fan_in) at every forward pass.
#[derive(Debug, Clone)]
pub struct EqualLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl EqualLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), role, init_normal(&[n_in, n_out], 1.0, rng));
        let b = store.add(format!("{name}.b"), role, zeros(&[n_out]));
        Self { w, b, n_in, n_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.w);
        let scale = 1.0 / (self.n_in as f64).sqrt();
        let ws = g.tape.scale(w, scale);
        let y = g.tape.matmul(x, ws);
        let b = g.p(self.b);
        let rows = g.tape.shape(y)[0];
        let b2 = g.tape.reshape(b, &[1, self.n_out]);
        let bb = g.tape.broadcast_to(b2, &[rows, self.n_out]);
        g.tape.add(y, bb)
    }
}

/// 3x3 (or 1x1) convolution layer in HWC layout.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        ksize: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ksize * ksize * c_in;
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            role,
            init_normal(&[ksize, ksize, c_in, c_out], std, rng),
        );
        let b = Some(store.add(format!("{name}.b"), role, zeros(&[c_out])));
        Self { w, b, stride, pad: ksize / 2, c_in, c_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.w);
        let b = self.b.map(|id| g.p(id));
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Convolution modulated by a style row: conv, per-channel normalization,
/// then scale/shift from an affine projection of the style, and a leaky
/// rectification.
#[derive(Debug, Clone)]
pub struct StyledConv {
    pub conv: Conv,
    pub affine: EqualLinear,
}

impl StyledConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        style_dim: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), role, 3, c_in, c_out, 1, 1.0, rng);
        let affine = EqualLinear::new(store, &format!("{name}.affine"), role, style_dim, 2 * c_out, rng);
        Self { conv, affine }
    }

    /// x: [H, W, Cin], style: [1, style_dim] -> [H, W, Cout]
    pub fn forward(&self, g: &mut Graph, x: Var, style: Var) -> Var {
        let c = self.conv.c_out;
        let h = self.conv.forward(g, x);
        let hn = g.tape.instance_norm(h, 1e-6);
        let st = self.affine.forward(g, style); // [1, 2c]
        let s_scale = g.tape.narrow(st, 1, 0, c);
        let s_shift = g.tape.narrow(st, 1, c, c);
        let scale1 = g.tape.add_scalar(s_scale, 1.0);
        let scale = g.tape.reshape(scale1, &[c]);
        let shift = g.tape.reshape(s_shift, &[c]);
        let m = g.tape.mul_channels(hn, scale);
        let m = g.tape.add_channels(m, shift);
        g.tape.leaky_relu(m, 0.2)
    }
}

/// Small multi-layer perceptron applied row-wise, leaky rectification between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::new(store, &format!("{name}.l{i}"), role, dims[i], dims[i + 1], true, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.tape.leaky_relu(h, 0.2);
            }
        }
        h
    }
}

// ---- optimizer ----

/// Adaptive-moment optimizer (Adam).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<usize, Tensor>,
    v: BTreeMap<usize, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update over the supplied gradients. Parameters absent from
    /// `grads` are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        self.t += 1;
        let t = self.t as i32;
        let b1c = 1.0 - self.beta1.powi(t);
        let b2c = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(grad, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut value = store.value(*id).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / b1c;
                    let vhat = vi / b2c;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            store.set(*id, value);
        }
    }

    /// Moment state keyed by parameter index, for checkpointing.
    pub fn state(&self) -> (&BTreeMap<usize, Tensor>, &BTreeMap<usize, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore_state(
        &mut self,
        t: u64,
        m: BTreeMap<usize, Tensor>,
        v: BTreeMap<usize, Tensor>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
