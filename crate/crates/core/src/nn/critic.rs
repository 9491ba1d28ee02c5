use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Mlp, MlpCache, MlpSpec, NnError};

/// Widths of the dual-path critic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub state_width: usize,
    pub action_width: usize,
    pub fusion_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            state_dim: 6,
            action_dim: 2,
            state_width: 64,
            action_width: 64,
            fusion_hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

/// Q(s, a): separate state and action feature layers, concatenated and fed
/// through a fusion MLP with a scalar linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    spec: CriticSpec,
    state_path: Mlp,
    action_path: Mlp,
    fusion: Mlp,
}

#[derive(Debug, Clone)]
pub struct CriticCache {
    batch: usize,
    state: MlpCache,
    action: MlpCache,
    fusion: MlpCache,
}

/// Parameter gradients for each part plus the action-input gradient.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub state_path: Vec<f64>,
    pub action_path: Vec<f64>,
    pub fusion: Vec<f64>,
    pub action_input: Vec<f64>,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(spec: CriticSpec, rng: &mut R) -> Result<Self, NnError> {
        let state_path =
            Mlp::new(MlpSpec::new(spec.state_dim, &[], spec.state_width).with_activation(spec.activation), rng)?
                .with_output_activation();
        let action_path =
            Mlp::new(MlpSpec::new(spec.action_dim, &[], spec.action_width).with_activation(spec.activation), rng)?
                .with_output_activation();
        let fusion = Mlp::new(
            MlpSpec::new(spec.state_width + spec.action_width, &spec.fusion_hidden, 1).with_activation(spec.activation),
            rng,
        )?;
        Ok(Self {
            spec,
            state_path,
            action_path,
            fusion,
        })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn parts(&self) -> [&Mlp; 3] {
        [&self.state_path, &self.action_path, &self.fusion]
    }

    pub fn parts_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.state_path, &mut self.action_path, &mut self.fusion]
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|m| m.num_params()).sum()
    }

    pub fn forward_batch(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<(Vec<f64>, CriticCache), NnError> {
        let (hs, state) = self.state_path.forward_batch(states, batch)?;
        let (ha, action) = self.action_path.forward_batch(actions, batch)?;
        let (sw, aw) = (self.spec.state_width, self.spec.action_width);
        let mut joined = Vec::with_capacity(batch * (sw + aw));
        for b in 0..batch {
            joined.extend_from_slice(&hs[b * sw..(b + 1) * sw]);
            joined.extend_from_slice(&ha[b * aw..(b + 1) * aw]);
        }
        let (q, fusion) = self.fusion.forward_batch(&joined, batch)?;
        Ok((
            q,
            CriticCache {
                batch,
                state,
                action,
                fusion,
            },
        ))
    }

    pub fn q_values(&self, states: &[f64], actions: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        self.forward_batch(states, actions, batch).map(|(q, _)| q)
    }

    fn split(&self, joined: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let (sw, aw) = (self.spec.state_width, self.spec.action_width);
        let mut ds = Vec::with_capacity(batch * sw);
        let mut da = Vec::with_capacity(batch * aw);
        for row in joined.chunks_exact(sw + aw) {
            ds.extend_from_slice(&row[..sw]);
            da.extend_from_slice(&row[sw..]);
        }
        (ds, da)
    }

    /// Full reverse pass for `sum(dq * Q)`.
    pub fn backward(&self, cache: &CriticCache, dq: &[f64]) -> Result<CriticGrads, NnError> {
        let fusion = self.fusion.backward(&cache.fusion, dq)?;
        let (ds, da) = self.split(&fusion.input, cache.batch);
        let state = self.state_path.backward(&cache.state, &ds)?;
        let action = self.action_path.backward(&cache.action, &da)?;
        Ok(CriticGrads {
            state_path: state.params,
            action_path: action.params,
            fusion: fusion.params,
            action_input: action.input,
        })
    }

    /// `d(sum(dq * Q)) / d(action)` without parameter gradients.
    pub fn action_gradient(&self, cache: &CriticCache, dq: &[f64]) -> Result<Vec<f64>, NnError> {
        let joined = self.fusion.backward_input(&cache.fusion, dq)?;
        let (_, da) = self.split(&joined, cache.batch);
        self.action_path.backward_input(&cache.action, &da)
    }

    pub fn soft_update_from(&mut self, source: &CriticNet, tau: f64) {
        for (t, s) in self.parts_mut().into_iter().zip(source.parts()) {
            t.soft_update_from(s, tau);
        }
    }
}
