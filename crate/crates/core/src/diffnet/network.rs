use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = x W + b`, `W` stored input-major.
    Dense {
        input: usize,
        output: usize,
    },
    /// Leaky rectifier with one learnable negative slope per unit.
    Prelu {
        units: usize,
    },
    /// Inverted dropout: active only in train mode, survivors scaled by `1 / (1 - rate)`.
    Dropout {
        rate: f64,
    },
    Softmax,
    /// Consumes `[mu | log_var]` (width `2 * dim`) and emits `z = mu + exp(log_var / 2) * eps`
    /// in train mode, `z = mu` in eval mode.
    GaussianLatent {
        dim: usize,
    },
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::Prelu { units } => *units,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
        }
    }

    pub fn dense(mut self, output: usize) -> Self {
        let input = self.output_dim_unchecked();
        self.layers.push(LayerSpec::Dense { input, output });
        self
    }

    pub fn prelu(mut self) -> Self {
        let units = self.output_dim_unchecked();
        self.layers.push(LayerSpec::Prelu { units });
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.layers.push(LayerSpec::Dropout { rate });
        self
    }

    pub fn softmax(mut self) -> Self {
        self.layers.push(LayerSpec::Softmax);
        self
    }

    /// Dense projection to `[mu | log_var]` followed by the sampling layer.
    pub fn gaussian_latent(self, dim: usize) -> Self {
        let mut s = self.dense(2 * dim);
        s.layers.push(LayerSpec::GaussianLatent { dim });
        s
    }

    fn output_dim_unchecked(&self) -> usize {
        self.validate().unwrap_or(0)
    }

    /// Checks layer compatibility and returns the output width.
    pub fn validate(&self) -> Result<usize> {
        if self.input_dim == 0 {
            return Err(Error::InvalidInput(
                "network input dimension must be positive".into(),
            ));
        }
        let mut width = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            width = match *l {
                LayerSpec::Dense { input, output } => {
                    if input != width || output == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense {input}->{output} after width {width}"
                        )));
                    }
                    output
                }
                LayerSpec::Prelu { units } => {
                    if units != width {
                        return Err(Error::Shape(format!(
                            "layer {i}: prelu of {units} units after width {width}"
                        )));
                    }
                    width
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidInput(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    width
                }
                LayerSpec::Softmax => width,
                LayerSpec::GaussianLatent { dim } => {
                    if dim == 0 || 2 * dim != width {
                        return Err(Error::Shape(format!(
                            "layer {i}: latent dim {dim} after width {width}"
                        )));
                    }
                    dim
                }
            };
        }
        Ok(width)
    }
}

enum Aux {
    None,
    Mask(Vec<f64>),
    Latent {
        mu: Matrix,
        log_var: Matrix,
        eps: Option<Matrix>,
    },
    Softmax(Matrix),
}

struct Cache {
    inputs: Vec<Matrix>,
    aux: Vec<Aux>,
}

/// Latent-statistics gradient injected into a [`LayerSpec::GaussianLatent`]
/// layer during backward (e.g. from a KL term).
struct LatentGrad {
    d_mu: Matrix,
    d_log_var: Matrix,
}

/// Feed-forward network over a flat parameter vector.
///
/// `forward` records what `backward` needs; `predict` is a read-only eval-mode
/// pass that can run concurrently on a shared reference.
pub struct Network {
    spec: NetworkSpec,
    offsets: Vec<usize>,
    params: Vec<f64>,
    grads: Vec<f64>,
    output_dim: usize,
    cache: Option<Cache>,
    latent_grad: Option<LatentGrad>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            output_dim: self.output_dim,
            cache: None,
            latent_grad: None,
        }
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Network {
    /// He-normal dense weights, zero biases, PReLU slopes 0.25.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let output_dim = spec.validate()?;
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut total = 0;
        for l in &spec.layers {
            offsets.push(total);
            total += l.param_count();
        }
        let mut params = vec![0.0; total];
        let mut init = rng::stream(seed, streams::INIT);
        for (l, &off) in spec.layers.iter().zip(&offsets) {
            match *l {
                LayerSpec::Dense { input, output } => {
                    let std = (2.0 / input as f64).sqrt();
                    for w in &mut params[off..off + input * output] {
                        let z: f64 = StandardNormal.sample(&mut init);
                        *w = std * z;
                    }
                }
                LayerSpec::Prelu { units } => params[off..off + units].fill(0.25),
                _ => {}
            }
        }
        Ok(Self {
            spec,
            offsets,
            grads: vec![0.0; total],
            params,
            output_dim,
            cache: None,
            latent_grad: None,
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for a network of {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Parameters and gradients together, for optimizer steps.
    pub fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.params, &self.grads)
    }

    pub fn has_dropout(&self) -> bool {
        self.spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Overrides the rate of every dropout layer.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        for l in &mut self.spec.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        Ok(())
    }

    /// Forward pass recording activations for [`Network::backward`].
    pub fn forward(&mut self, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<Matrix> {
        let (out, cache) = self.run(x, mode, Some(rng), true)?;
        self.cache = cache;
        self.latent_grad = None;
        Ok(out)
    }

    /// [`Network::forward`] with randomness drawn from `seed`.
    pub fn forward_seeded(&mut self, x: &Matrix, mode: Mode, seed: u64) -> Result<Matrix> {
        self.forward(x, mode, &mut rng::stream(seed, streams::DROPOUT))
    }

    /// Eval-mode inference without touching training state.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, Mode::Eval, None, false)?.0)
    }

    /// Train-mode pass (dropout and latent sampling active) without recording.
    pub fn sample(&self, x: &Matrix, rng: &mut Rng) -> Result<Matrix> {
        Ok(self.run(x, Mode::Train, Some(rng), false)?.0)
    }

    /// Latent `(mu, log_var)` from the last forward pass, if the network has a latent layer.
    pub fn latent_stats(&self) -> Option<(&Matrix, &Matrix)> {
        self.cache.as_ref()?.aux.iter().find_map(|a| match a {
            Aux::Latent { mu, log_var, .. } => Some((mu, log_var)),
            _ => None,
        })
    }

    /// Smallest |input| seen by any PReLU unit in the last forward pass
    /// (distance to the activation kink); `None` without PReLU layers.
    pub fn prelu_margin(&self) -> Option<f64> {
        let cache = self.cache.as_ref()?;
        self.spec
            .layers
            .iter()
            .zip(&cache.inputs)
            .filter(|(l, _)| matches!(l, LayerSpec::Prelu { .. }))
            .flat_map(|(_, x)| x.as_slice().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    /// Adds a gradient on the latent statistics to the next backward pass.
    pub fn set_latent_grad(&mut self, d_mu: Matrix, d_log_var: Matrix) {
        self.latent_grad = Some(LatentGrad { d_mu, d_log_var });
    }

    fn run(
        &self,
        x: &Matrix,
        mode: Mode,
        mut rng: Option<&mut Rng>,
        record: bool,
    ) -> Result<(Matrix, Option<Cache>)> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let mut inputs = Vec::new();
        let mut aux = Vec::new();
        let mut h = x.clone();
        for (l, &off) in self.spec.layers.iter().zip(&self.offsets) {
            let (next, a) = match *l {
                LayerSpec::Dense { input, output } => {
                    let w = &self.params[off..off + input * output];
                    let b = &self.params[off + input * output..off + input * output + output];
                    let mut out = Matrix::zeros(h.rows(), output);
                    for r in 0..h.rows() {
                        let row = out.row_mut(r);
                        row.copy_from_slice(b);
                        for (i, &xi) in h.row(r).iter().enumerate() {
                            if xi != 0.0 {
                                for (o, &wio) in
                                    row.iter_mut().zip(&w[i * output..(i + 1) * output])
                                {
                                    *o += xi * wio;
                                }
                            }
                        }
                    }
                    (out, Aux::None)
                }
                LayerSpec::Prelu { units } => {
                    let a = &self.params[off..off + units];
                    let mut out = h.clone();
                    for r in 0..out.rows() {
                        for (v, s) in out.row_mut(r).iter_mut().zip(a) {
                            if *v <= 0.0 {
                                *v *= s;
                            }
                        }
                    }
                    (out, Aux::None)
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Eval => (h.clone(), Aux::None),
                    Mode::Train => {
                        let rng = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::State("train mode needs a generator".into()))?;
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..h.as_slice().len())
                            .map(|_| {
                                if rng.random::<f64>() >= rate {
                                    keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mut out = h.clone();
                        out.as_mut_slice()
                            .iter_mut()
                            .zip(&mask)
                            .for_each(|(v, m)| *v *= m);
                        (out, Aux::Mask(mask))
                    }
                },
                LayerSpec::Softmax => {
                    let out = softmax_rows(&h);
                    (out.clone(), Aux::Softmax(out))
                }
                LayerSpec::GaussianLatent { dim } => {
                    let mu = h.columns(0, dim);
                    let log_var = h.columns(dim, 2 * dim);
                    match mode {
                        Mode::Eval => (
                            mu.clone(),
                            Aux::Latent {
                                mu,
                                log_var,
                                eps: None,
                            },
                        ),
                        Mode::Train => {
                            let rng = rng.as_deref_mut().ok_or_else(|| {
                                Error::State("train mode needs a generator".into())
                            })?;
                            let mut eps = Matrix::zeros(h.rows(), dim);
                            for v in eps.as_mut_slice() {
                                *v = StandardNormal.sample(&mut *rng);
                            }
                            let mut z = mu.clone();
                            for ((zv, lv), e) in z
                                .as_mut_slice()
                                .iter_mut()
                                .zip(log_var.as_slice())
                                .zip(eps.as_slice())
                            {
                                *zv += (0.5 * lv).exp() * e;
                            }
                            (
                                z,
                                Aux::Latent {
                                    mu,
                                    log_var,
                                    eps: Some(eps),
                                },
                            )
                        }
                    }
                }
            };
            if record {
                inputs.push(std::mem::replace(&mut h, next));
                aux.push(a);
            } else {
                h = next;
            }
        }
        Ok((h, record.then_some(Cache { inputs, aux })))
    }

    /// Back-propagates `upstream` (gradient of the loss w.r.t. the output of the
    /// last forward pass). Parameter gradients replace [`Network::grads`]; the
    /// gradient w.r.t. the network input is returned.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let rows = cache.inputs.first().map_or(0, Matrix::rows);
        if upstream.rows() != rows || upstream.cols() != self.output_dim {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{}, output {}x{}",
                upstream.rows(),
                upstream.cols(),
                rows,
                self.output_dim
            )));
        }
        self.grads.fill(0.0);
        let mut g = upstream.clone();
        for (k, l) in self.spec.layers.iter().enumerate().rev() {
            let off = self.offsets[k];
            let x = &cache.inputs[k];
            g = match *l {
                LayerSpec::Dense { input, output } => {
                    let (w, b_end) = (
                        &self.params[off..off + input * output],
                        off + input * output + output,
                    );
                    let grads = &mut self.grads[off..b_end];
                    let mut dx = Matrix::zeros(x.rows(), input);
                    for r in 0..x.rows() {
                        let gr = g.row(r);
                        let xr = x.row(r);
                        for (gb, gv) in grads[input * output..].iter_mut().zip(gr) {
                            *gb += gv;
                        }
                        let dxr = dx.row_mut(r);
                        for i in 0..input {
                            let wi = &w[i * output..(i + 1) * output];
                            let gw = &mut grads[i * output..(i + 1) * output];
                            let xi = xr[i];
                            let mut acc = 0.0;
                            for o in 0..output {
                                gw[o] += xi * gr[o];
                                acc += gr[o] * wi[o];
                            }
                            dxr[i] = acc;
                        }
                    }
                    dx
                }
                LayerSpec::Prelu { units } => {
                    let a = &self.params[off..off + units];
                    let ga = &mut self.grads[off..off + units];
                    let mut dx = g.clone();
                    for r in 0..x.rows() {
                        for (u, (d, &xv)) in dx.row_mut(r).iter_mut().zip(x.row(r)).enumerate() {
                            if xv <= 0.0 {
                                ga[u] += xv * *d;
                                *d *= a[u];
                            }
                        }
                    }
                    dx
                }
                LayerSpec::Dropout { .. } => match &cache.aux[k] {
                    Aux::Mask(mask) => {
                        let mut dx = g.clone();
                        dx.as_mut_slice()
                            .iter_mut()
                            .zip(mask)
                            .for_each(|(v, m)| *v *= m);
                        dx
                    }
                    _ => g,
                },
                LayerSpec::Softmax => {
                    let Aux::Softmax(s) = &cache.aux[k] else {
                        unreachable!("softmax cache")
                    };
                    let mut dx = g.clone();
                    for r in 0..s.rows() {
                        let sr = s.row(r);
                        let dot: f64 = g.row(r).iter().zip(sr).map(|(a, b)| a * b).sum();
                        for (d, &sv) in dx.row_mut(r).iter_mut().zip(sr) {
                            *d = sv * (*d - dot);
                        }
                    }
                    dx
                }
                LayerSpec::GaussianLatent { dim } => {
                    let Aux::Latent { log_var, eps, .. } = &cache.aux[k] else {
                        unreachable!("latent cache")
                    };
                    let mut dx = Matrix::zeros(g.rows(), 2 * dim);
                    for r in 0..g.rows() {
                        for j in 0..dim {
                            let dz = g.get(r, j);
                            let mut d_mu = dz;
                            let mut d_lv = match eps {
                                Some(e) => dz * e.get(r, j) * 0.5 * (0.5 * log_var.get(r, j)).exp(),
                                None => 0.0,
                            };
                            if let Some(extra) = &self.latent_grad {
                                d_mu += extra.d_mu.get(r, j);
                                d_lv += extra.d_log_var.get(r, j);
                            }
                            dx.set(r, j, d_mu);
                            dx.set(r, dim + j, d_lv);
                        }
                    }
                    dx
                }
            };
        }
        self.latent_grad = None;
        Ok(g)
    }

    /// Stores the parameters under `prefix` in `ck`.
    pub fn write_sections(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.insert(format!("{prefix}params"), self.params.clone());
    }

    pub fn read_sections(spec: NetworkSpec, prefix: &str, ck: &Checkpoint) -> Result<Self> {
        Self::from_params(spec, ck.section(&format!("{prefix}params"))?.to_vec())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
