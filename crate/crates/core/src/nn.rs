//! Parameter storage, spectrally normalized layers and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{gemm, Graph, Tensor, Var};
use crate::error::{Error, Result};

const SN_U: &str = ".sn_u";
const SN_V: &str = ".sn_v";
const MIN_SIGMA: f64 = 1e-12;
/// Power iterations run when a layer is created.
const SN_INIT_ITERS: usize = 50;

/// Named trainable tensors plus non-trainable buffers (spectral-norm vectors,
/// running statistics). Ordered maps keep iteration and serialization stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Overwrites buffers with values queued by a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) {
        for (name, t) in updates {
            self.buffers.insert(name, t);
        }
    }

    /// Names of weights that carry spectral normalization.
    pub fn spectral_weights(&self) -> Vec<String> {
        self.buffers
            .keys()
            .filter_map(|k| k.strip_suffix(SN_U))
            .map(|base| format!("{base}.weight"))
            .collect()
    }

    /// One power-iteration refresh of every spectral-norm estimate.
    pub fn power_iterate(&mut self, iters: usize) {
        for wname in self.spectral_weights() {
            let base = wname.trim_end_matches(".weight").to_string();
            let w = &self.params[&wname];
            let (mut u, mut v) = (
                self.buffers[&format!("{base}{SN_U}")].data().to_vec(),
                self.buffers[&format!("{base}{SN_V}")].data().to_vec(),
            );
            power_iteration(w, &mut u, &mut v, iters);
            let (m, n) = (u.len(), v.len());
            self.buffers.insert(format!("{base}{SN_U}"), Tensor::new(&[m], u));
            self.buffers.insert(format!("{base}{SN_V}"), Tensor::new(&[n], v));
        }
    }

    /// `{layer}.weight` as the forward pass sees it (divided by the stored
    /// spectral estimate when the layer has one).
    pub fn effective_weight(&self, layer: &str) -> Result<Tensor> {
        let w = self.get(&format!("{layer}.weight"))?;
        match (
            self.buffer(&format!("{layer}{SN_U}")),
            self.buffer(&format!("{layer}{SN_V}")),
        ) {
            (Some(u), Some(v)) => {
                let s = bilinear(w, u.data(), v.data());
                let s = if s.abs() < MIN_SIGMA { MIN_SIGMA } else { s };
                Ok(w.scale(1.0 / s))
            }
            _ => Ok(w.clone()),
        }
    }

    /// For every spectrally normalized weight, the top singular value of the
    /// normalized matrix `W / sigma_hat`, measured by a fresh long power iteration.
    pub fn normalized_spectral_norms(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for wname in self.spectral_weights() {
            let base = wname.trim_end_matches(".weight");
            let w = &self.params[&wname];
            let u = self.buffers[&format!("{base}{SN_U}")].data();
            let v = self.buffers[&format!("{base}{SN_V}")].data();
            let sigma_hat = bilinear(w, u, v).abs().max(MIN_SIGMA);
            let (m, n) = matrix_dims(w);
            let mut uu = vec![1.0 / (m as f64).sqrt(); m];
            let mut vv = vec![1.0 / (n as f64).sqrt(); n];
            power_iteration(w, &mut uu, &mut vv, 200);
            out.insert(wname, bilinear(w, &uu, &vv).abs() / sigma_hat);
        }
        out
    }
}

fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let m = w.shape()[0];
    (m, w.len() / m)
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(MIN_SIGMA);
    for x in v.iter_mut() {
        *x /= n;
    }
}

fn power_iteration(w: &Tensor, u: &mut Vec<f64>, v: &mut Vec<f64>, iters: usize) {
    let (m, n) = matrix_dims(w);
    for _ in 0..iters {
        gemm(w.data(), (m, n), true, u, (m, 1), false, v, 1.0, 0.0);
        unit(v);
        gemm(w.data(), (m, n), false, v, (n, 1), false, u, 1.0, 0.0);
        unit(u);
    }
}

fn bilinear(w: &Tensor, u: &[f64], v: &[f64]) -> f64 {
    let (m, n) = matrix_dims(w);
    let mut wv = vec![0.0; m];
    gemm(w.data(), (m, n), false, v, (n, 1), false, &mut wv, 1.0, 0.0);
    wv.iter().zip(u).map(|(a, b)| a * b).sum()
}

impl Graph {
    /// `W / (u^T W v)` with `u, v` held fixed (the spectral-norm estimate).
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let wt = self.value(w);
        let (m, n) = matrix_dims(wt);
        assert_eq!((u.len(), v.len()), (m, n), "spectral vectors do not fit weight");
        let raw_sigma = bilinear(wt, u, v);
        let clamped = raw_sigma.abs() < MIN_SIGMA;
        let sigma = if clamped { MIN_SIGMA } else { raw_sigma };
        let value = wt.scale(1.0 / sigma);
        let (u, v) = (u.to_vec(), v.to_vec());
        self.record(
            value,
            vec![w],
            Box::new(move |ctx| {
                let g = ctx.grad();
                let mut dw = g.scale(1.0 / sigma);
                if !clamped {
                    let gw: f64 = g.data().iter().zip(ctx.value(w).data()).map(|(a, b)| a * b).sum();
                    let c = gw / (sigma * sigma);
                    let d = dw.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] -= c * u[i] * v[j];
                        }
                    }
                }
                vec![Some(dw)]
            }),
        )
    }
}

/// Binds a [`ParameterSet`] to a graph for one forward pass.
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    params: &'a ParameterSet,
    /// Batch statistics and running-stat updates in training mode.
    pub train: bool,
    frozen: bool,
    constants: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParameterSet, train: bool) -> Self {
        Self {
            g,
            params,
            train,
            frozen: false,
            constants: HashMap::new(),
        }
    }

    /// Parameters enter the graph as constants and receive no gradient.
    pub fn frozen(g: &'a mut Graph, params: &'a ParameterSet, train: bool) -> Self {
        Self {
            frozen: true,
            ..Self::new(g, params, train)
        }
    }

    pub fn params(&self) -> &ParameterSet {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Var {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|_| panic!("parameter {name} was never initialized"));
        if self.frozen {
            if let Some(&v) = self.constants.get(name) {
                return v;
            }
            let v = self.g.constant(t.clone());
            self.constants.insert(name.to_string(), v);
            v
        } else {
            self.g.named_leaf(name, t)
        }
    }

    /// `{layer}.weight`, spectrally normalized when the layer carries estimates.
    pub fn weight(&mut self, layer: &str) -> Var {
        let w = self.param(&format!("{layer}.weight"));
        match (
            self.params.buffer(&format!("{layer}{SN_U}")),
            self.params.buffer(&format!("{layer}{SN_V}")),
        ) {
            (Some(u), Some(v)) => self.g.spectral_normalize(w, u.data(), v.data()),
            _ => w,
        }
    }
}

fn init_spectral<R: Rng + ?Sized>(ps: &mut ParameterSet, layer: &str, w: &Tensor, rng: &mut R) {
    let (m, n) = matrix_dims(w);
    let mut u = Tensor::randn(&[m], 1.0, rng).into_data();
    unit(&mut u);
    let mut v = vec![0.0; n];
    power_iteration(w, &mut u, &mut v, SN_INIT_ITERS);
    ps.insert_buffer(format!("{layer}{SN_U}"), Tensor::new(&[m], u));
    ps.insert_buffer(format!("{layer}{SN_V}"), Tensor::new(&[n], v));
}

/// Square-kernel convolution with "same"-style padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub spectral: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            spectral: true,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let fan_in = (self.cin * self.kernel * self.kernel) as f64;
        let w = Tensor::randn(
            &[self.cout, self.cin, self.kernel, self.kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        if self.spectral {
            init_spectral(ps, &self.name, &w, rng);
        }
        ps.insert(format!("{}.weight", self.name), w);
        ps.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.weight(&self.name);
        let b = f.param(&format!("{}.bias", self.name));
        f.g.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, inp: usize, out: usize) -> Self {
        Self {
            name: name.into(),
            inp,
            out,
            bias: true,
            spectral: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let w = Tensor::randn(&[self.out, self.inp], (1.0 / self.inp as f64).sqrt(), rng);
        if self.spectral {
            init_spectral(ps, &self.name, &w, rng);
        }
        ps.insert(format!("{}.weight", self.name), w);
        if self.bias {
            ps.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out]));
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.weight(&self.name);
        let b = self.bias.then(|| f.param(&format!("{}.bias", self.name)));
        f.g.linear(x, w, b)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.m.iter().map(move |(k, m)| (k, m, &self.v[k]))
    }

    pub fn set_moments(&mut self, name: String, m: Tensor, v: Tensor) {
        self.m.insert(name.clone(), m);
        self.v.insert(name, v);
    }
}
