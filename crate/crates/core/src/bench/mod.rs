//! Test scenarios, closed-loop rollouts, metrics and report emission.

mod metrics;
mod report;

pub use metrics::{ablation_table, metrics, AblationRow, MetricReport, OVERSHOOT_WINDOW, SETTLE_BAND};
pub use report::{
    ablation_markdown, emit_report, metrics_markdown, read_metrics_csv, write_ablation_csv, write_metrics_csv,
    write_trace_csv, ReportFormat,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{pi_step, FcsMpc, FcsMpcConfig, PiController, PiGains};
use crate::env::{Env, EnvError, EpisodeConfig, InitialCondition, RewardConfig};
use crate::nn::{DeployedPolicy, Mlp, NnError};
use crate::plant::{self, CircuitParams, LoadParams, LoadSchedule, PlantAction};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trace of {have} samples is shorter than the {need}-sample metric window")]
    TraceTooShort { have: usize, need: usize },
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub episode: EpisodeConfig,
}

impl Scenario {
    pub fn schedule(&self) -> &LoadSchedule {
        self.episode.schedule.as_ref().expect("benchmark scenarios carry a fixed schedule")
    }

    /// Time of the load event the metrics are anchored to.
    pub fn event_time(&self) -> f64 {
        self.schedule().last_switch_time()
    }

    pub fn perturbation(&self) -> (f64, f64) {
        (self.episode.l_f_mult, self.episode.c_f_mult)
    }
}

fn case(name: &str, description: &str, steps: Vec<(f64, LoadParams)>, mults: (f64, f64)) -> Scenario {
    Scenario {
        name: name.into(),
        description: description.into(),
        episode: EpisodeConfig {
            duration: 0.6,
            schedule: Some(LoadSchedule::new(steps).expect("builtin schedules are valid")),
            initial: InitialCondition::SteadyState,
            l_f_mult: mults.0,
            c_f_mult: mults.1,
            ..EpisodeConfig::default()
        },
    }
}

/// Load-step and robustness cases on a 0.6 s horizon with the event at
/// 0.3 s. Every case starts at the equilibrium for its initial load.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let r = LoadParams::resistive;
    let rl = |r, l| LoadParams::new(r, l).expect("valid load");
    vec![
        case("case1", "resistive step 200 -> 50 ohm", vec![(0.0, r(200.0)), (0.3, r(50.0))], (1.0, 1.0)),
        case(
            "case2",
            "inductive step (200 ohm, 10 mH) -> (50 ohm, 1 mH)",
            vec![(0.0, rl(200.0, 10e-3)), (0.3, rl(50.0, 1e-3))],
            (1.0, 1.0),
        ),
        case(
            "case3",
            "l_f +20 %, c_f -20 %, resistive step 100 -> 50 ohm",
            vec![(0.0, r(100.0)), (0.3, r(50.0))],
            (1.2, 0.8),
        ),
        case(
            "case3b",
            "l_f +20 %, c_f -20 %, resistive step 200 -> 50 ohm",
            vec![(0.0, r(200.0)), (0.3, r(50.0))],
            (1.2, 0.8),
        ),
    ]
}

pub fn find_scenario(name: &str) -> Result<Scenario, BenchError> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| BenchError::UnknownScenario(name.into()))
}

/// Output of a controller for one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    /// Normalized action in `[-1, 1]^2`.
    Policy([f64; 2]),
    /// Continuous voltage command, saturated by the plant interface.
    Volts(PlantAction),
    /// Discrete switching vector applied without saturation.
    Vector(PlantAction),
}

pub trait Controller {
    fn name(&self) -> &str;
    fn reset(&mut self) {}
    fn act(&mut self, env: &Env) -> Result<Command, BenchError>;
}

pub struct PolicyController {
    name: String,
    policy: DeployedPolicy,
}

impl PolicyController {
    pub fn new(name: impl Into<String>, net: Mlp) -> Self {
        Self {
            name: name.into(),
            policy: DeployedPolicy::new(net),
        }
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, env: &Env) -> Result<Command, BenchError> {
        let a = self.policy.act(&env.observation().normalized)?;
        Ok(Command::Policy([a[0], a[1]]))
    }
}

pub struct PiBaseline {
    ctrl: PiController,
}

impl PiBaseline {
    pub fn new(gains: PiGains) -> Self {
        Self {
            ctrl: PiController::new(gains),
        }
    }
}

impl Controller for PiBaseline {
    fn name(&self) -> &str {
        "pi"
    }

    fn reset(&mut self) {
        self.ctrl.reset();
    }

    fn act(&mut self, env: &Env) -> Result<Command, BenchError> {
        let s = env.state();
        let io = s.load_current(&env.current_load());
        let ts = env.config().ts;
        Ok(Command::Volts(pi_step(&mut self.ctrl, s, io, env.reference(), env.nominal_params(), ts)))
    }
}

pub struct MpcBaseline {
    mpc: FcsMpc,
}

impl MpcBaseline {
    pub fn new(cfg: FcsMpcConfig, nominal: CircuitParams, ts: f64) -> Self {
        Self {
            mpc: FcsMpc::new(cfg, nominal, ts),
        }
    }
}

impl Controller for MpcBaseline {
    fn name(&self) -> &str {
        "fcs-mpc"
    }

    fn act(&mut self, env: &Env) -> Result<Command, BenchError> {
        let d = self.mpc.decide(env.state(), env.reference(), &env.current_load(), env.theta());
        Ok(Command::Vector(d.action))
    }
}

/// Zero voltage command.
pub struct ZeroController;

impl Controller for ZeroController {
    fn name(&self) -> &str {
        "zero"
    }

    fn act(&mut self, _env: &Env) -> Result<Command, BenchError> {
        Ok(Command::Volts(PlantAction::default()))
    }
}

/// Open-loop steady-state inversion of the nominal model for the load in
/// force.
pub struct FeedforwardController;

impl Controller for FeedforwardController {
    fn name(&self) -> &str {
        "feedforward"
    }

    fn act(&mut self, env: &Env) -> Result<Command, BenchError> {
        let (_, u) = plant::steady_state(env.reference(), &env.current_load(), env.nominal_params());
        Ok(Command::Volts(u))
    }
}

/// Buildable description of a controller, so rollouts can be run on worker
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerSpec {
    Policy { name: String, net: Mlp },
    Pi(PiGains),
    FcsMpc(FcsMpcConfig),
    Zero,
    Feedforward,
}

impl ControllerSpec {
    pub fn name(&self) -> &str {
        match self {
            ControllerSpec::Policy { name, .. } => name,
            ControllerSpec::Pi(_) => "pi",
            ControllerSpec::FcsMpc(_) => "fcs-mpc",
            ControllerSpec::Zero => "zero",
            ControllerSpec::Feedforward => "feedforward",
        }
    }

    pub fn build(&self, nominal: &CircuitParams, ts: f64) -> Box<dyn Controller> {
        match self {
            ControllerSpec::Policy { name, net } => Box::new(PolicyController::new(name.clone(), net.clone())),
            ControllerSpec::Pi(g) => Box::new(PiBaseline::new(*g)),
            ControllerSpec::FcsMpc(c) => Box::new(MpcBaseline::new(*c, *nominal, ts)),
            ControllerSpec::Zero => Box::new(ZeroController),
            ControllerSpec::Feedforward => Box::new(FeedforwardController),
        }
    }
}

/// State after each control period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub u_bus_d: f64,
    pub u_bus_q: f64,
    pub i_ld: f64,
    pub i_lq: f64,
    pub i_od: f64,
    pub i_oq: f64,
    pub u_inv_d: f64,
    pub u_inv_q: f64,
    pub reward: f64,
}

impl TraceSample {
    pub fn bus_magnitude(&self) -> f64 {
        self.u_bus_d.hypot(self.u_bus_q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub controller: String,
    pub scenario: String,
    pub reference: [f64; 2],
    pub ts: f64,
    pub omega: f64,
    pub event_time: f64,
    pub samples: Vec<TraceSample>,
    /// Time at which the plant diverged, if it did.
    pub diverged_at: Option<f64>,
}

impl Trace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn fundamental_hz(&self) -> f64 {
        self.omega / (2.0 * std::f64::consts::PI)
    }
}

/// Closed-loop simulation of `controller` on `scenario`. The plant carries
/// the scenario's parameter perturbation; the controller only sees
/// `nominal`.
pub fn rollout(
    controller: &mut dyn Controller,
    scenario: &Scenario,
    nominal: &CircuitParams,
    reward: &RewardConfig,
) -> Result<Trace, BenchError> {
    let mut env = Env::new(scenario.episode.clone(), *reward, *nominal, 0)?;
    controller.reset();
    let ts = scenario.episode.ts;
    let mut samples = Vec::with_capacity(scenario.episode.steps());
    let mut diverged_at = None;
    while !env.is_done() {
        let load = env.current_load();
        let out = match controller.act(&env)? {
            Command::Policy(a) => env.step(a)?,
            Command::Volts(u) => env.step_volts(u)?,
            Command::Vector(u) => env.step_vector(u)?,
        };
        if out.diverged {
            diverged_at = Some(env.step_index() as f64 * ts);
            break;
        }
        let s = env.state();
        let (i_od, i_oq) = s.load_current(&load);
        samples.push(TraceSample {
            t: env.step_index() as f64 * ts,
            u_bus_d: s.u_bus_d,
            u_bus_q: s.u_bus_q,
            i_ld: s.i_ld,
            i_lq: s.i_lq,
            i_od,
            i_oq,
            u_inv_d: out.applied.u_inv_d,
            u_inv_q: out.applied.u_inv_q,
            reward: out.breakdown.total,
        });
    }
    Ok(Trace {
        controller: controller.name().to_string(),
        scenario: scenario.name.clone(),
        reference: scenario.episode.reference,
        ts,
        omega: nominal.omega,
        event_time: scenario.event_time(),
        samples,
        diverged_at,
    })
}

/// Runs every controller on every scenario, scenario-major. Up to `jobs`
/// rollouts run concurrently; the output order does not depend on `jobs`.
pub fn run_matrix(
    controllers: &[ControllerSpec],
    scenarios: &[Scenario],
    nominal: &CircuitParams,
    reward: &RewardConfig,
    jobs: usize,
) -> Result<Vec<Trace>, BenchError> {
    let work: Vec<(&Scenario, &ControllerSpec)> =
        scenarios.iter().flat_map(|s| controllers.iter().map(move |c| (s, c))).collect();
    let run = |(s, c): &(&Scenario, &ControllerSpec)| {
        let mut ctrl = c.build(nominal, s.episode.ts);
        rollout(ctrl.as_mut(), s, nominal, reward)
    };
    let jobs = jobs.max(1).min(work.len().max(1));
    if jobs == 1 {
        return work.iter().map(run).collect();
    }
    let mut results: Vec<Option<Result<Trace, BenchError>>> = (0..work.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let work = &work;
                let run = &run;
                scope.spawn(move || {
                    (j..work.len()).step_by(jobs).map(|i| (i, run(&work[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every slot filled")).collect()
}
