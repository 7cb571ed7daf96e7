//! Parameterized layers built on the tape primitives.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] so a
//! whole model can be checkpointed, cast to another precision, or updated
//! by the optimizer as one set.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_dim);
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_in * kernel);
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in, kernel], bound, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    /// `[N, C_in, T] → [N, C_out, T']`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Output length of a 1-D convolution, or `None` when no window fits.
pub fn conv_output_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = t + 2 * padding;
    (stride > 0 && span >= kernel).then(|| (span - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_constant(format!("{name}.weight"), &[channels], 1.0, true)?,
            beta: store.add_constant(format!("{name}.bias"), &[channels], 0.0, true)?,
            running_mean: store.add_constant(format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: store.add_constant(format!("{name}.running_var"), &[channels], 1.0, false)?,
            momentum: 0.1,
        })
    }

    /// In [`Mode::Train`] this also folds the batch statistics into the
    /// running estimates held in `store`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &mut ParamStore<F>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let (y, stats) = match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, BnMode::Train)?,
            Mode::Eval => {
                let mean = &store.get(self.running_mean).value;
                let var = &store.get(self.running_var).value;
                g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?
            }
        };
        if let Some(stats) = stats {
            let m = F::lit(self.momentum);
            let keep = F::one() - m;
            for (r, s) in store.get_mut(self.running_mean).value.iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * *s;
            }
            for (r, s) in store.get_mut(self.running_var).value.iter_mut().zip(&stats.var) {
                *r = keep * *r + m * *s;
            }
        }
        Ok(y)
    }
}

/// Hidden and cell state of one LSTM direction, `[N, H]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![F::zero(); batch * hidden],
            c: vec![F::zero(); batch * hidden],
        }
    }
}

/// One LSTM layer in one direction.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(hidden);
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[4 * hidden, input], bound, rng)?;
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng)?;
        let mut b = vec![F::zero(); 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = F::one());
        let bias = store.add(format!("{name}.bias"), &[4 * hidden], b, true)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// `[N, T, I] → [N, T, H]` from zero initial state.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        reverse: bool,
    ) -> Result<Var> {
        let w_ih = g.param(store, self.w_ih)?;
        let w_hh = g.param(store, self.w_hh)?;
        let b = g.param(store, self.bias)?;
        g.lstm(x, w_ih, w_hh, b, None, None, reverse)
    }

    /// Runs forward from an explicit initial state and returns the final one.
    pub fn forward_with_state<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        initial: &LstmState<F>,
    ) -> Result<(Var, LstmState<F>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input {
            return shape_err("lstm", format!("input {s:?} for input size {}", self.input));
        }
        let (batch, steps) = (s[0], s[1]);
        let h0 = g.constant(&[batch, self.hidden], initial.h.clone())?;
        let c0 = g.constant(&[batch, self.hidden], initial.c.clone())?;
        let w_ih = g.param(store, self.w_ih)?;
        let w_hh = g.param(store, self.w_hh)?;
        let b = g.param(store, self.bias)?;
        let y = g.lstm(x, w_ih, w_hh, b, Some(h0), Some(c0), false)?;
        let c = g.lstm_final_cell(y).expect("lstm node");
        let out = g.value(y);
        let mut h = Vec::with_capacity(batch * self.hidden);
        for n in 0..batch {
            let base = (n * steps + steps - 1) * self.hidden;
            h.extend_from_slice(&out[base..base + self.hidden]);
        }
        Ok((y, LstmState { h, c }))
    }
}

/// Stacked unidirectional LSTM.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.{l}"), in_dim, hidden, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x, false)?;
        }
        Ok(x)
    }
}

/// Stacked bidirectional LSTM; each layer's output is the forward and
/// backward hidden sequences concatenated, width `2H`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward_layers: Vec<LstmLayer>,
    pub backward_layers: Vec<LstmLayer>,
}

impl BiLstm {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut forward_layers = Vec::with_capacity(num_layers);
        let mut backward_layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input } else { 2 * hidden };
            forward_layers.push(LstmLayer::new(store, &format!("{name}.{l}.fwd"), in_dim, hidden, rng)?);
            backward_layers.push(LstmLayer::new(store, &format!("{name}.{l}.bwd"), in_dim, hidden, rng)?);
        }
        Ok(Self {
            forward_layers,
            backward_layers,
        })
    }

    pub fn output_width(&self) -> usize {
        self.forward_layers.last().map_or(0, |l| 2 * l.hidden)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        for (fwd, bwd) in self.forward_layers.iter().zip(&self.backward_layers) {
            let f = fwd.forward(g, store, x, false)?;
            let b = bwd.forward(g, store, x, true)?;
            x = g.concat(&[f, b], 2)?;
        }
        Ok(x)
    }
}
