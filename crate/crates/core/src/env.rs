//! MDP wrapper around the plant: observations, hybrid Lyapunov reward and
//! episode lifecycle.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{self, CircuitParams, LoadParams, LoadSchedule, PlantAction, PlantError, PlantState};
use crate::signal;

pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
/// Highest harmonic included in THD estimates.
pub const THD_MAX_HARMONIC: usize = 50;
/// THD window length in fundamental cycles.
pub const THD_WINDOW_CYCLES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
    #[error("episode already finished; call reset")]
    EpisodeOver,
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Divisors mapping physical channels onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormScales {
    pub voltage_error: f64,
    pub voltage: f64,
    pub current: f64,
}

impl NormScales {
    /// Voltage errors by the reference magnitude, voltages by the linear
    /// modulation limit, currents by the current limit.
    pub fn for_reference(reference: [f64; 2], p: &CircuitParams, i_max: f64) -> Self {
        let mag = reference[0].hypot(reference[1]);
        Self {
            voltage_error: if mag > 0.0 { mag } else { p.voltage_limit() },
            voltage: p.voltage_limit(),
            current: i_max,
        }
    }

    fn as_array(&self) -> [f64; OBS_DIM] {
        [
            self.voltage_error,
            self.voltage_error,
            self.voltage,
            self.voltage,
            self.current,
            self.current,
        ]
    }
}

/// Channels in order `[e_ud, e_uq, u_bus_d, u_bus_q, i_ld, i_lq]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub raw: [f64; OBS_DIM],
    pub normalized: [f64; OBS_DIM],
}

impl Observation {
    pub fn e_u(&self) -> [f64; 2] {
        [self.raw[0], self.raw[1]]
    }

    pub fn u_bus(&self) -> [f64; 2] {
        [self.raw[2], self.raw[3]]
    }

    pub fn i_l(&self) -> [f64; 2] {
        [self.raw[4], self.raw[5]]
    }

    /// Physical values recovered from the normalized channels.
    pub fn denormalize(normalized: &[f64; OBS_DIM], norm: &NormScales) -> [f64; OBS_DIM] {
        let s = norm.as_array();
        std::array::from_fn(|i| normalized[i] * s[i])
    }
}

pub fn observe(state: &PlantState, reference: [f64; 2], norm: &NormScales) -> Observation {
    let raw = [
        reference[0] - state.u_bus_d,
        reference[1] - state.u_bus_q,
        state.u_bus_d,
        state.u_bus_q,
        state.i_ld,
        state.i_lq,
    ];
    let s = norm.as_array();
    Observation {
        raw,
        normalized: std::array::from_fn(|i| (raw[i] / s[i]).clamp(-1.0, 1.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub beta: f64,
    pub i_max: f64,
    pub thd_limit: f64,
    /// Total reward assigned to the step on which the plant diverges.
    pub divergence_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k1: 1e-6,
            k2: 1e-3,
            k3: 1e-5,
            k4: 1e-4,
            beta: 1.0,
            i_max: 20.0,
            thd_limit: 5.0,
            divergence_reward: -10.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let weights = [self.k1, self.k2, self.k3, self.k4, self.beta, self.thd_limit];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(EnvError::InvalidConfig("reward weights must be finite and non-negative".into()));
        }
        if !(self.i_max.is_finite() && self.i_max > 0.0) {
            return Err(EnvError::InvalidConfig("i_max must be positive".into()));
        }
        if !(self.divergence_reward.is_finite() && self.divergence_reward <= 0.0) {
            return Err(EnvError::InvalidConfig("divergence_reward must be finite and non-positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub v_k: f64,
    pub delta_v: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub total: f64,
    pub thd_estimate: f64,
}

/// `0.5 |e_u|^2 + 0.5 beta |delta_i_L|^2`.
pub fn lyapunov(e_u: [f64; 2], delta_i_l: [f64; 2], beta: f64) -> f64 {
    0.5 * (e_u[0] * e_u[0] + e_u[1] * e_u[1]) + 0.5 * beta * (delta_i_l[0] * delta_i_l[0] + delta_i_l[1] * delta_i_l[1])
}

/// Hybrid reward for the state reached after a step.
pub fn reward(prev_v: f64, state: &PlantState, reference: [f64; 2], cfg: &RewardConfig, thd_estimate: f64) -> RewardBreakdown {
    let e = [reference[0] - state.u_bus_d, reference[1] - state.u_bus_q];
    let v_k = lyapunov(e, state.delta_i_l(), cfg.beta);
    let delta_v = v_k - prev_v;
    let r1 = -cfg.k1 * delta_v.max(0.0);
    let r2 = -cfg.k2 * (e[0] * e[0] + e[1] * e[1]);
    let i_sq = state.i_ld * state.i_ld + state.i_lq * state.i_lq;
    let r3 = -cfg.k3 * (i_sq - cfg.i_max * cfg.i_max).max(0.0);
    let r4 = -cfg.k4 * (thd_estimate - cfg.thd_limit).max(0.0);
    RewardBreakdown {
        v_k,
        delta_v,
        r1,
        r2,
        r3,
        r4,
        total: r1 + r2 + r3 + r4,
        thd_estimate,
    }
}

/// How the plant is initialised on reset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InitialCondition {
    Zero,
    /// Equilibrium of the actual plant at the reference and initial load.
    SteadyState,
    /// Equilibrium at `reference * (1 + U(-spread, spread))`.
    RandomizedSteadyState { spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub duration: f64,
    pub ts: f64,
    pub reference: [f64; 2],
    /// Fixed load schedule; when absent a constant resistive load is drawn
    /// from `random_loads` on each reset.
    pub schedule: Option<LoadSchedule>,
    pub random_loads: Vec<f64>,
    pub initial: InitialCondition,
    pub l_f_mult: f64,
    pub c_f_mult: f64,
    pub substeps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 0.1,
            ts: 1e-4,
            reference: [CircuitParams::default().nominal_peak_voltage(), 0.0],
            schedule: None,
            random_loads: vec![50.0, 100.0, 200.0],
            initial: InitialCondition::RandomizedSteadyState { spread: 0.1 },
            l_f_mult: 1.0,
            c_f_mult: 1.0,
            substeps: plant::DEFAULT_SUBSTEPS,
        }
    }
}

impl EpisodeConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    pub fn validate(&self, p: &CircuitParams) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if !(self.ts > 0.0 && self.duration > 0.0) {
            return bad("duration and ts must be positive");
        }
        let ratio = self.duration / self.ts;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) || ratio.round() < 1.0 {
            return bad("duration must be a whole multiple of ts");
        }
        if self.reference[0].hypot(self.reference[1]) > p.voltage_limit() {
            return bad("reference magnitude exceeds the modulation limit");
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1");
        }
        if !(self.l_f_mult > 0.0 && self.c_f_mult > 0.0) {
            return bad("parameter multipliers must be positive");
        }
        if self.schedule.is_none() && (self.random_loads.is_empty() || self.random_loads.iter().any(|r| !(*r > 0.0))) {
            return bad("random_loads must be a non-empty list of positive resistances");
        }
        if let InitialCondition::RandomizedSteadyState { spread } = self.initial {
            if !(0.0..1.0).contains(&spread) {
                return bad("initial spread must lie in [0, 1)");
            }
        }
        let per_cycle = 1.0 / (p.fundamental_hz() * self.ts);
        if (per_cycle - per_cycle.round()).abs() > 1e-6 {
            return bad("ts must divide the fundamental period");
        }
        Ok(())
    }
}

/// Replay-buffer record. `done` marks the last step of an episode;
/// `truncated` distinguishes a time-limit end from a true terminal state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
    pub truncated: bool,
}

impl Transition {
    /// Whether the successor value must be excluded from the target.
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub transition: Transition,
    pub breakdown: RewardBreakdown,
    /// Voltage actually applied after saturation.
    pub applied: PlantAction,
    pub diverged: bool,
}

/// One simulated episode stream. Owns its RNG so that identical seeds give
/// identical transition sequences.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EpisodeConfig,
    reward_cfg: RewardConfig,
    nominal: CircuitParams,
    plant: CircuitParams,
    norm: NormScales,
    rng: ChaCha8Rng,
    schedule: LoadSchedule,
    state: PlantState,
    step_idx: usize,
    n_steps: usize,
    prev_v: f64,
    window_len: usize,
    window: VecDeque<f64>,
    thd: f64,
    done: bool,
    obs: Observation,
}

impl Env {
    pub fn new(cfg: EpisodeConfig, reward_cfg: RewardConfig, nominal: CircuitParams, seed: u64) -> Result<Self, EnvError> {
        cfg.validate(&nominal)?;
        reward_cfg.validate()?;
        let plant = nominal.perturbed(cfg.l_f_mult, cfg.c_f_mult)?;
        let norm = NormScales::for_reference(cfg.reference, &nominal, reward_cfg.i_max);
        let window_len = (THD_WINDOW_CYCLES as f64 / (nominal.fundamental_hz() * cfg.ts)).round() as usize;
        let schedule = cfg
            .schedule
            .clone()
            .unwrap_or_else(|| LoadSchedule::constant(LoadParams::resistive(cfg.random_loads[0])));
        let n_steps = cfg.steps();
        let mut env = Self {
            cfg,
            reward_cfg,
            nominal,
            plant,
            norm,
            rng: ChaCha8Rng::seed_from_u64(seed),
            schedule,
            state: PlantState::default(),
            step_idx: 0,
            n_steps,
            prev_v: 0.0,
            window_len,
            window: VecDeque::with_capacity(window_len),
            thd: 0.0,
            done: true,
            obs: observe(&PlantState::default(), [0.0; 2], &norm),
        };
        env.reset();
        Ok(env)
    }

    pub fn reset(&mut self) -> Observation {
        if self.cfg.schedule.is_none() {
            let k = self.rng.gen_range(0..self.cfg.random_loads.len());
            self.schedule = LoadSchedule::constant(LoadParams::resistive(self.cfg.random_loads[k]));
        }
        let load = self.schedule.at(0.0);
        let initial = match self.cfg.initial {
            InitialCondition::Zero => PlantState::default(),
            InitialCondition::SteadyState => plant::steady_state(self.cfg.reference, &load, &self.plant).0,
            InitialCondition::RandomizedSteadyState { spread } => {
                let scale = 1.0 + self.rng.gen_range(-spread..=spread);
                let r = [self.cfg.reference[0] * scale, self.cfg.reference[1] * scale];
                plant::steady_state(r, &load, &self.plant).0
            }
        };
        self.state = plant::reset(&self.plant, Some(initial));
        self.step_idx = 0;
        self.prev_v = lyapunov(self.error(), [0.0; 2], self.reward_cfg.beta);
        self.window.clear();
        self.thd = 0.0;
        self.done = false;
        self.obs = observe(&self.state, self.cfg.reference, &self.norm);
        self.obs
    }

    fn error(&self) -> [f64; 2] {
        [self.cfg.reference[0] - self.state.u_bus_d, self.cfg.reference[1] - self.state.u_bus_q]
    }

    /// Applies a policy-scale action in `[-1, 1]^2`.
    pub fn step(&mut self, action: [f64; ACTION_DIM]) -> Result<StepOutcome, EnvError> {
        let limit = self.nominal.voltage_limit();
        self.advance(PlantAction::new(action[0] * limit, action[1] * limit), action)
    }

    /// Applies a voltage command directly, as the conventional controllers do.
    pub fn step_volts(&mut self, volts: PlantAction) -> Result<StepOutcome, EnvError> {
        let limit = self.nominal.voltage_limit();
        let sat = plant::saturate_action(&volts, &self.nominal);
        self.advance(volts, [sat.u_inv_d / limit, sat.u_inv_q / limit])
    }

    /// Applies a switching-state vector as is. Its magnitude may exceed
    /// the linear modulation limit, so no saturation is applied.
    pub fn step_vector(&mut self, volts: PlantAction) -> Result<StepOutcome, EnvError> {
        let limit = self.nominal.voltage_limit();
        self.advance_with(volts, [volts.u_inv_d / limit, volts.u_inv_q / limit])
    }

    fn advance(&mut self, volts: PlantAction, policy_action: [f64; ACTION_DIM]) -> Result<StepOutcome, EnvError> {
        self.advance_with(plant::saturate_action(&volts, &self.nominal), policy_action)
    }

    fn advance_with(&mut self, applied: PlantAction, policy_action: [f64; ACTION_DIM]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let obs = self.obs.normalized;
        self.step_idx += 1;
        let result = plant::step(&self.state, &applied, &self.schedule, &self.plant, self.cfg.ts, self.cfg.substeps);
        let (breakdown, diverged) = match result {
            Ok(next) => {
                self.state = next;
                self.push_window_sample();
                let b = reward(self.prev_v, &self.state, self.cfg.reference, &self.reward_cfg, self.thd);
                self.prev_v = b.v_k;
                (b, false)
            }
            Err(PlantError::Diverged { .. }) => {
                let floor = self.reward_cfg.divergence_reward;
                let b = RewardBreakdown {
                    r2: floor,
                    total: floor,
                    thd_estimate: self.thd,
                    ..Default::default()
                };
                (b, true)
            }
            Err(e) => return Err(e.into()),
        };
        let time_up = self.step_idx >= self.n_steps;
        self.done = diverged || time_up;
        self.obs = observe(&self.state, self.cfg.reference, &self.norm);
        Ok(StepOutcome {
            transition: Transition {
                obs,
                action: policy_action,
                reward: breakdown.total,
                next_obs: self.obs.normalized,
                done: self.done,
                truncated: time_up && !diverged,
            },
            breakdown,
            applied,
            diverged,
        })
    }

    fn push_window_sample(&mut self) {
        let load = self.schedule.at(self.state.t - self.cfg.ts);
        let (i_od, i_oq) = self.state.load_current(&load);
        let theta = self.nominal.omega * self.state.t;
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(signal::phase_a(i_od, i_oq, theta));
        if self.window.len() == self.window_len {
            let samples = self.window.make_contiguous();
            self.thd = signal::thd(samples, self.nominal.fundamental_hz(), 1.0 / self.cfg.ts, THD_MAX_HARMONIC)
                .unwrap_or(0.0);
        }
    }

    pub fn observation(&self) -> Observation {
        self.obs
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.state.t
    }

    pub fn step_index(&self) -> usize {
        self.step_idx
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Electrical angle of the synchronous frame.
    pub fn theta(&self) -> f64 {
        self.nominal.omega * self.state.t
    }

    pub fn reference(&self) -> [f64; 2] {
        self.cfg.reference
    }

    pub fn schedule(&self) -> &LoadSchedule {
        &self.schedule
    }

    /// Load applied during the next control period.
    pub fn current_load(&self) -> LoadParams {
        self.schedule.at(self.state.t)
    }

    /// Parameters the controllers assume.
    pub fn nominal_params(&self) -> &CircuitParams {
        &self.nominal
    }

    /// Parameters of the simulated plant (differs under perturbation).
    pub fn plant_params(&self) -> &CircuitParams {
        &self.plant
    }

    pub fn norm(&self) -> &NormScales {
        &self.norm
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward_cfg
    }

    pub fn thd_estimate(&self) -> f64 {
        self.thd
    }
}
