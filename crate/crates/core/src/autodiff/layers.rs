//! Trainable building blocks recorded onto a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autodiff::init::{self, SeededRng};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init::xavier_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    /// Zero weight and bias: the layer outputs exactly zero until trained.
    pub fn zeros<S: Real>(store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }

    /// Same arithmetic as [`Linear::forward`] with the parameters as constants.
    pub fn forward_frozen<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.constant(store.value(self.weight).clone());
        let b = g.constant(store.value(self.bias).clone());
        g.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<S: Real>(self, g: &mut Graph<S>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Feed-forward stack: hidden layers each followed by the activation, then a
/// linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut SeededRng,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        self.run(g, store, x, false)
    }

    /// Forward pass that records no parameter nodes; gradients still reach `x`.
    pub fn forward_frozen<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        self.run(g, store, x, true)
    }

    fn run<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if frozen { layer.forward_frozen(g, store, h)? } else { layer.forward(g, store, h)? };
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r` and candidate `n`:
///
/// ```text
/// r  = σ(x Wr + br + h Ur + cr)
/// z  = σ(x Wz + bz + h Uz + cz)
/// n  = tanh(x Wn + bn + r ⊙ (h Un + cn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut SeededRng, name: &str, input: usize, hidden: usize) -> Self {
        GruCell {
            input: Linear::new(store, rng, &format!("{name}.ih"), input, 3 * hidden),
            hidden: Linear::new(store, rng, &format!("{name}.hh"), hidden, 3 * hidden),
            hidden_size: hidden,
        }
    }

    /// One step for a batch of rows: `x: b×in`, `h: b×hidden`.
    pub fn step<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden_size;
        let xs = self.input.forward(g, store, x)?;
        let hh = self.hidden.forward(g, store, h)?;
        let xr = g.slice_cols(xs, 0, hs)?;
        let xz = g.slice_cols(xs, hs, hs)?;
        let xn = g.slice_cols(xs, 2 * hs, hs)?;
        let hr = g.slice_cols(hh, 0, hs)?;
        let hz = g.slice_cols(hh, hs, hs)?;
        let hn = g.slice_cols(hh, 2 * hs, hs)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        // n + z ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Runs over a sequence of `1×in` rows; returns every hidden state.
    pub fn run<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, xs: &[Var], h0: Var) -> Result<Vec<Var>> {
        let mut h = h0;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(g, store, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}
