use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg;
use super::NnError;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Shape of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.hidden_activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(NnError::InvalidSpec(format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }

    /// `(fan_in, fan_out)` for each dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims().windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Dense network with all parameters in a single flat buffer.
///
/// Each layer stores a row-major `fan_out x fan_in` weight matrix followed by
/// its bias vector. The final layer is affine unless the network was built
/// with [`Mlp::with_output_activation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    activate_output: bool,
    layers: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Post-activation values of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    batch: usize,
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Reverse-mode result: parameter gradient (flat, same layout as the
/// parameters) and gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn layout_for(spec: &MlpSpec) -> (Vec<LayerLayout>, usize) {
    let mut offset = 0;
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let l = LayerLayout {
                fan_in,
                fan_out,
                w: offset,
                b: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            l
        })
        .collect();
    (layers, offset)
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let (layers, n) = layout_for(&spec);
        Ok(Self {
            spec,
            activate_output: false,
            layers,
            params: vec![0.0; n],
        })
    }

    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        for l in net.layers.clone() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for p in &mut net.params[l.w..l.b + l.fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NnError::DimensionMismatch {
                what: "parameter vector",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    /// Applies the hidden activation to the last layer as well; used for the
    /// feature paths of the critic.
    pub fn with_output_activation(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias)` of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = self.layers[i];
        (&self.params[l.w..l.b], &self.params[l.b..l.b + l.fan_out])
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[i];
        let (w, rest) = self.params[l.w..l.b + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
        (w, rest)
    }

    fn activation_for(&self, layer: usize) -> Option<Activation> {
        if layer + 1 < self.layers.len() || self.activate_output {
            Some(self.spec.hidden_activation)
        } else {
            None
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), NnError> {
        self.forward_batch(x, 1)
    }

    /// Forward pass over `batch` row-major samples.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache), NnError> {
        if x.len() != batch * self.spec.input_dim {
            return Err(NnError::DimensionMismatch {
                what: "input batch",
                expected: batch * self.spec.input_dim,
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let input = activations.last().expect("input pushed above");
            let mut out = vec![0.0; batch * l.fan_out];
            linalg::matmul_xwt(input, &self.params[l.w..l.b], &mut out, batch, l.fan_in, l.fan_out);
            let bias = &self.params[l.b..l.b + l.fan_out];
            let act = self.activation_for(i);
            for row in out.chunks_exact_mut(l.fan_out) {
                for (y, b) in row.iter_mut().zip(bias) {
                    *y += b;
                    if let Some(a) = act {
                        *y = a.apply(*y);
                    }
                }
            }
            activations.push(out);
        }
        let output = activations.last().cloned().unwrap_or_default();
        Ok((output, MlpCache { batch, activations }))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let batch = if self.spec.input_dim == 0 { 0 } else { x.len() / self.spec.input_dim };
        self.forward_batch(x, batch).map(|(y, _)| y)
    }

    fn check_backward(&self, cache: &MlpCache, dy: &[f64]) -> Result<(), NnError> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(NnError::DimensionMismatch {
                what: "cache depth",
                expected: self.layers.len() + 1,
                got: cache.activations.len(),
            });
        }
        let expected = cache.batch * self.spec.output_dim;
        if dy.len() != expected {
            return Err(NnError::DimensionMismatch {
                what: "output gradient",
                expected,
                got: dy.len(),
            });
        }
        Ok(())
    }

    fn backward_impl(&self, cache: &MlpCache, dy: &[f64], mut param_grads: Option<&mut [f64]>) -> Result<Vec<f64>, NnError> {
        self.check_backward(cache, dy)?;
        let batch = cache.batch;
        let mut dz = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            if let Some(act) = self.activation_for(i) {
                for (g, y) in dz.iter_mut().zip(&cache.activations[i + 1]) {
                    *g *= act.grad_from_output(*y);
                }
            }
            let input = &cache.activations[i];
            if let Some(grads) = param_grads.as_deref_mut() {
                linalg::accumulate_dzt_x(&dz, input, &mut grads[l.w..l.b], batch, l.fan_in, l.fan_out);
                let db = &mut grads[l.b..l.b + l.fan_out];
                for row in dz.chunks_exact(l.fan_out) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            }
            let mut dx = vec![0.0; batch * l.fan_in];
            linalg::matmul_dz_w(&dz, &self.params[l.w..l.b], &mut dx, batch, l.fan_in, l.fan_out);
            dz = dx;
        }
        Ok(dz)
    }

    /// Exact reverse-mode gradients of `sum(dy * y)` with respect to the
    /// parameters (summed over the batch) and to the input.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> Result<MlpGrads, NnError> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_impl(cache, dy, Some(&mut params))?;
        Ok(MlpGrads { params, input })
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn backward_input(&self, cache: &MlpCache, dy: &[f64]) -> Result<Vec<f64>, NnError> {
        self.backward_impl(cache, dy, None)
    }

    /// Polyak averaging: `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        assert_eq!(self.params.len(), source.params.len(), "soft update between different shapes");
        if tau == 1.0 {
            self.params.copy_from_slice(&source.params);
            return;
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
