use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ReplayBuffer, SacAgent, SacConfig, SacError};
use crate::derive_seed;
use crate::env::{Env, EpisodeConfig, RewardConfig};
use crate::nn::Mlp;
use crate::plant::CircuitParams;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub r1_mean: f64,
    pub r2_mean: f64,
    pub r3_mean: f64,
    pub r4_mean: f64,
    pub alpha: f64,
    pub q_loss: Option<f64>,
    pub actor_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub agent: SacAgent,
    pub log: Vec<EpisodeLog>,
    /// Deployed actor snapshot from the highest-return episode.
    pub best_actor: Mlp,
    pub best_episode: usize,
    pub best_return: f64,
}

impl TrainResult {
    pub fn final_actor(&self) -> Mlp {
        self.agent.deployed_actor()
    }
}

pub fn train(
    episode: &EpisodeConfig,
    reward: &RewardConfig,
    params: &CircuitParams,
    cfg: &SacConfig,
) -> Result<TrainResult, SacError> {
    train_with(episode, reward, params, cfg, |_| {})
}

/// Runs `cfg.episodes` episodes, calling `on_episode` after each.
pub fn train_with(
    episode: &EpisodeConfig,
    reward: &RewardConfig,
    params: &CircuitParams,
    cfg: &SacConfig,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainResult, SacError> {
    let mut agent = SacAgent::new(cfg.clone())?;
    let mut env = Env::new(episode.clone(), *reward, *params, derive_seed(cfg.seed, 1))?;
    let mut explore = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut total_steps = 0usize;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut best: Option<(usize, f64, Mlp)> = None;

    for ep in 0..cfg.episodes {
        let mut obs = env.reset().normalized;
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        let (mut q_sum, mut a_sum, mut n_updates) = (0.0, 0.0, 0usize);
        loop {
            let action = if total_steps < cfg.warmup_steps {
                [explore.gen_range(-1.0..1.0), explore.gen_range(-1.0..1.0)]
            } else {
                agent.select_action(&obs, false)?
            };
            let out = env.step(action)?;
            buffer.push(out.transition);
            total_steps += 1;
            steps += 1;
            if total_steps >= cfg.warmup_steps {
                if let Some(r) = agent.update_from(&buffer)? {
                    q_sum += 0.5 * (r.q1_loss + r.q2_loss);
                    a_sum += r.actor_loss;
                    n_updates += 1;
                }
            }
            let b = out.breakdown;
            for (s, v) in sums.iter_mut().zip([b.total, b.r1, b.r2, b.r3, b.r4]) {
                *s += v;
            }
            obs = out.transition.next_obs;
            if out.transition.done {
                break;
            }
        }
        let n = steps as f64;
        let row = EpisodeLog {
            episode: ep,
            ret: sums[0],
            r1_mean: sums[1] / n,
            r2_mean: sums[2] / n,
            r3_mean: sums[3] / n,
            r4_mean: sums[4] / n,
            alpha: agent.alpha(),
            q_loss: (n_updates > 0).then(|| q_sum / n_updates as f64),
            actor_loss: (n_updates > 0).then(|| a_sum / n_updates as f64),
        };
        if best.as_ref().map_or(true, |(_, r, _)| row.ret > *r) {
            best = Some((ep, row.ret, agent.deployed_actor()));
        }
        on_episode(&row);
        log.push(row);
    }

    let (best_episode, best_return, best_actor) = best.unwrap_or_else(|| (0, f64::NEG_INFINITY, agent.deployed_actor()));
    Ok(TrainResult {
        agent,
        log,
        best_actor,
        best_episode,
        best_return,
    })
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[EpisodeLog]) -> Result<(), SacError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
