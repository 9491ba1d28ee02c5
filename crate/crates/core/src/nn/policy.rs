use rand::Rng;
use rand_distr::StandardNormal;

use super::{Activation, Mlp, MlpCache, MlpSpec, NnError};

/// Lower bound applied to the softplus standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of `a = tanh(u)`, `u ~ N(mean, std^2)`, per dimension summed.
pub fn squashed_gaussian_log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((&m, &s), &a)| {
            let u = a.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
            let z = (u - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI - log_one_minus_tanh_sq(u)
        })
        .sum()
}

/// Stochastic actor: a shared trunk whose final layer carries both the mean
/// head and the softplus standard-deviation head.
///
/// The body's last layer has `2 * action_dim` outputs: the first `action_dim`
/// rows are the mean head and the remaining rows the std head.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyNet {
    body: Mlp,
    action_dim: usize,
}

/// One reparameterized draw for a batch of observations.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub batch: usize,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    noise: Vec<f64>,
    std_pre: Vec<f64>,
    cache: MlpCache,
}

impl GaussianPolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let spec = MlpSpec::new(obs_dim, hidden, 2 * action_dim).with_activation(activation);
        Ok(Self {
            body: Mlp::new(spec, rng)?,
            action_dim,
        })
    }

    pub fn from_body(body: Mlp) -> Result<Self, NnError> {
        let out = body.output_dim();
        if out % 2 != 0 {
            return Err(NnError::InvalidSpec(format!("policy body must have an even output width, got {out}")));
        }
        Ok(Self { body, action_dim: out / 2 })
    }

    pub fn body(&self) -> &Mlp {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Mlp {
        &mut self.body
    }

    pub fn obs_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// `tanh(mean)` for every row of `obs`.
    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        let out = self.body.predict(obs)?;
        let d = self.action_dim;
        Ok(out.chunks_exact(2 * d).flat_map(|row| row[..d].iter().map(|m| m.tanh())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], batch: usize, rng: &mut R) -> Result<PolicySample, NnError> {
        let (out, cache) = self.body.forward_batch(obs, batch)?;
        let d = self.action_dim;
        let n = batch * d;
        let mut sample = PolicySample {
            batch,
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(batch),
            mean: Vec::with_capacity(n),
            std: Vec::with_capacity(n),
            noise: Vec::with_capacity(n),
            std_pre: Vec::with_capacity(n),
            cache,
        };
        for row in out.chunks_exact(2 * d) {
            let mut log_prob = 0.0;
            for j in 0..d {
                let mean = row[j];
                let h = row[d + j];
                let std = softplus(h).max(STD_FLOOR);
                let eps: f64 = rng.sample(StandardNormal);
                let u = mean + std * eps;
                let a = u.tanh();
                log_prob += -0.5 * eps * eps - std.ln() - HALF_LN_2PI - log_one_minus_tanh_sq(u);
                sample.actions.push(a);
                sample.mean.push(mean);
                sample.std.push(std);
                sample.noise.push(eps);
                sample.std_pre.push(h);
            }
            sample.log_probs.push(log_prob);
        }
        Ok(sample)
    }

    /// Gradient of a loss with respect to the body output, given the loss
    /// gradient with respect to each sampled action (`dloss_da`, batch x
    /// action_dim) and to each log-probability (`dloss_dlogp`, batch).
    /// Noise is held fixed (reparameterization).
    pub fn output_gradient(&self, sample: &PolicySample, dloss_da: &[f64], dloss_dlogp: &[f64]) -> Vec<f64> {
        let d = self.action_dim;
        assert_eq!(dloss_da.len(), sample.batch * d);
        assert_eq!(dloss_dlogp.len(), sample.batch);
        let mut grad = vec![0.0; sample.batch * 2 * d];
        for b in 0..sample.batch {
            let glp = dloss_dlogp[b];
            for j in 0..d {
                let k = b * d + j;
                let a = sample.actions[k];
                let eps = sample.noise[k];
                let std = sample.std[k];
                let h = sample.std_pre[k];
                let dtanh = 1.0 - a * a;
                let ga = dloss_da[k];
                let d_mean = glp * 2.0 * a + ga * dtanh;
                let d_std = glp * (-1.0 / std + 2.0 * a * eps) + ga * dtanh * eps;
                let d_h = if softplus(h) > STD_FLOOR { d_std * sigmoid(h) } else { 0.0 };
                grad[b * 2 * d + j] = d_mean;
                grad[b * 2 * d + d + j] = d_h;
            }
        }
        grad
    }

    /// Parameter gradient of the loss described by [`Self::output_gradient`].
    pub fn backward(&self, sample: &PolicySample, dloss_da: &[f64], dloss_dlogp: &[f64]) -> Result<Vec<f64>, NnError> {
        let g = self.output_gradient(sample, dloss_da, dloss_dlogp);
        Ok(self.body.backward(&sample.cache, &g)?.params)
    }

    /// The deployed network: trunk plus mean head. Its output passed through
    /// `tanh` is the deterministic action.
    pub fn deployed(&self) -> Mlp {
        let spec = self.body.spec();
        let dspec = MlpSpec {
            input_dim: spec.input_dim,
            hidden: spec.hidden.clone(),
            output_dim: self.action_dim,
            hidden_activation: spec.hidden_activation,
        };
        let last = self.body.num_layers() - 1;
        let mut params = Vec::new();
        for i in 0..last {
            let (w, b) = self.body.layer(i);
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        let (w, b) = self.body.layer(last);
        let fan_in = w.len() / (2 * self.action_dim);
        params.extend_from_slice(&w[..self.action_dim * fan_in]);
        params.extend_from_slice(&b[..self.action_dim]);
        Mlp::from_params(dspec, params).expect("deployed layout derived from body")
    }
}
