//! Soft actor-critic with twin critics, Polyak-averaged targets and
//! automatic temperature tuning.

mod replay;
mod train;

pub use replay::ReplayBuffer;
pub use train::{train, train_with, write_training_log, EpisodeLog, TrainResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Transition, ACTION_DIM, OBS_DIM};
use crate::nn::{Activation, Adam, CriticNet, CriticSpec, GaussianPolicyNet, Mlp, NnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub target_entropy: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
    pub init_log_alpha: f64,
    pub actor_hidden: Vec<usize>,
    pub activation: Activation,
    pub critic: CriticSpec,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            gamma: 0.9,
            lr: 1e-3,
            batch: 256,
            target_entropy: -13.0,
            tau: 5e-3,
            buffer_capacity: 200_000,
            warmup_steps: 1000,
            init_log_alpha: 0.0,
            actor_hidden: vec![128, 64, 64],
            activation: Activation::Relu,
            critic: CriticSpec::default(),
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return bad("batch must be in 1..=buffer_capacity");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !self.target_entropy.is_finite() || !self.init_log_alpha.is_finite() {
            return bad("target_entropy and init_log_alpha must be finite");
        }
        if self.critic.state_dim != OBS_DIM || self.critic.action_dim != ACTION_DIM {
            return bad("critic input widths must match the observation and action sizes");
        }
        Ok(())
    }
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    /// Batch estimate of the policy entropy, `-mean(log pi)`.
    pub entropy: f64,
}

impl LossReport {
    fn all_finite(&self) -> bool {
        [self.q1_loss, self.q2_loss, self.actor_loss, self.alpha_loss, self.alpha, self.entropy]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Error)]
pub enum SacError {
    #[error("invalid SAC configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at update {update}: {report:?}")]
    NonFinite { update: u64, report: LossReport },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
struct CriticOpt {
    parts: [Adam; 3],
}

impl CriticOpt {
    fn new(c: &CriticNet, lr: f64) -> Self {
        let [a, b, f] = c.parts();
        Self {
            parts: [Adam::new(a.num_params(), lr), Adam::new(b.num_params(), lr), Adam::new(f.num_params(), lr)],
        }
    }

    fn apply(&mut self, c: &mut CriticNet, g: &crate::nn::CriticGrads) {
        let grads = [&g.state_path, &g.action_path, &g.fusion];
        for ((opt, part), grad) in self.parts.iter_mut().zip(c.parts_mut()).zip(grads) {
            opt.step(part.params_mut(), grad);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    cfg: SacConfig,
    actor: GaussianPolicyNet,
    q1: CriticNet,
    q2: CriticNet,
    q1_target: CriticNet,
    q2_target: CriticNet,
    log_alpha: f64,
    actor_opt: Adam,
    q1_opt: CriticOpt,
    q2_opt: CriticOpt,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
}

fn flatten<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> Vec<f64> {
    rows.flat_map(|r| r.into_iter()).collect()
}

impl SacAgent {
    pub fn new(cfg: SacConfig) -> Result<Self, SacError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = GaussianPolicyNet::new(OBS_DIM, &cfg.actor_hidden, ACTION_DIM, cfg.activation, &mut rng)?;
        let q1 = CriticNet::new(cfg.critic.clone(), &mut rng)?;
        let q2 = CriticNet::new(cfg.critic.clone(), &mut rng)?;
        Ok(Self {
            actor_opt: Adam::new(actor.body().num_params(), cfg.lr),
            q1_opt: CriticOpt::new(&q1, cfg.lr),
            q2_opt: CriticOpt::new(&q2, cfg.lr),
            alpha_opt: Adam::new(1, cfg.lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            log_alpha: cfg.init_log_alpha,
            actor,
            q1,
            q2,
            rng,
            updates: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn actor(&self) -> &GaussianPolicyNet {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut GaussianPolicyNet {
        &mut self.actor
    }

    pub fn critics(&self) -> (&CriticNet, &CriticNet) {
        (&self.q1, &self.q2)
    }

    pub fn target_critics(&self) -> (&CriticNet, &CriticNet) {
        (&self.q1_target, &self.q2_target)
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Trunk plus mean head, the network that is deployed and distilled.
    pub fn deployed_actor(&self) -> Mlp {
        self.actor.deployed()
    }

    pub fn select_action(&mut self, obs: &[f64; OBS_DIM], deterministic: bool) -> Result<[f64; ACTION_DIM], SacError> {
        let a = if deterministic {
            self.actor.deterministic_action(obs)?
        } else {
            self.actor.sample(obs, 1, &mut self.rng)?.actions
        };
        Ok([a[0], a[1]])
    }

    /// Samples a batch from `buffer` and performs one update.
    pub fn update_from(&mut self, buffer: &ReplayBuffer) -> Result<Option<LossReport>, SacError> {
        match buffer.sample(self.cfg.batch, &mut self.rng) {
            Some(batch) => self.update(&batch).map(Some),
            None => Ok(None),
        }
    }

    /// One gradient step on both critics, the actor and the temperature,
    /// followed by the target soft update.
    pub fn update(&mut self, batch: &[Transition]) -> Result<LossReport, SacError> {
        let n = batch.len();
        assert!(n > 0, "update needs a non-empty batch");
        let nf = n as f64;
        let alpha = self.alpha();
        let obs = flatten(batch.iter().map(|t| t.obs));
        let next_obs = flatten(batch.iter().map(|t| t.next_obs));
        let actions = flatten(batch.iter().map(|t| t.action));

        // Soft Bellman target with clipped double-Q.
        let next = self.actor.sample(&next_obs, n, &mut self.rng)?;
        let tq1 = self.q1_target.q_values(&next_obs, &next.actions, n)?;
        let tq2 = self.q2_target.q_values(&next_obs, &next.actions, n)?;
        let targets: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mask = if t.terminal() { 0.0 } else { 1.0 };
                t.reward + self.cfg.gamma * mask * (tq1[k].min(tq2[k]) - alpha * next.log_probs[k])
            })
            .collect();

        let mut critic_loss = [0.0; 2];
        for (i, loss) in critic_loss.iter_mut().enumerate() {
            let (net, opt) = if i == 0 { (&mut self.q1, &mut self.q1_opt) } else { (&mut self.q2, &mut self.q2_opt) };
            let (q, cache) = net.forward_batch(&obs, &actions, n)?;
            let mut dq = vec![0.0; n];
            for k in 0..n {
                let d = q[k] - targets[k];
                *loss += d * d / nf;
                dq[k] = 2.0 * d / nf;
            }
            let g = net.backward(&cache, &dq)?;
            opt.apply(net, &g);
        }

        // Reparameterized actor objective against the updated critics.
        let pi = self.actor.sample(&obs, n, &mut self.rng)?;
        let (q1, c1) = self.q1.forward_batch(&obs, &pi.actions, n)?;
        let (q2, c2) = self.q2.forward_batch(&obs, &pi.actions, n)?;
        let mut dq1 = vec![0.0; n];
        let mut dq2 = vec![0.0; n];
        let mut actor_loss = 0.0;
        for k in 0..n {
            actor_loss += (alpha * pi.log_probs[k] - q1[k].min(q2[k])) / nf;
            if q1[k] <= q2[k] {
                dq1[k] = -1.0 / nf;
            } else {
                dq2[k] = -1.0 / nf;
            }
        }
        let ga1 = self.q1.action_gradient(&c1, &dq1)?;
        let ga2 = self.q2.action_gradient(&c2, &dq2)?;
        let dloss_da: Vec<f64> = ga1.iter().zip(&ga2).map(|(a, b)| a + b).collect();
        let dloss_dlogp = vec![alpha / nf; n];
        let g_actor = self.actor.backward(&pi, &dloss_da, &dloss_dlogp)?;
        self.actor_opt.step(self.actor.body_mut().params_mut(), &g_actor);

        // Temperature: minimize -log_alpha * (log pi + target_entropy).
        let mean_logp = pi.log_probs.iter().sum::<f64>() / nf;
        let alpha_loss = -self.log_alpha * (mean_logp + self.cfg.target_entropy);
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[-(mean_logp + self.cfg.target_entropy)]);
        self.log_alpha = la[0];

        self.q1_target.soft_update_from(&self.q1, self.cfg.tau);
        self.q2_target.soft_update_from(&self.q2, self.cfg.tau);
        self.updates += 1;

        let report = LossReport {
            q1_loss: critic_loss[0],
            q2_loss: critic_loss[1],
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            entropy: -mean_logp,
        };
        if !report.all_finite() {
            return Err(SacError::NonFinite {
                update: self.updates,
                report,
            });
        }
        Ok(report)
    }
}
