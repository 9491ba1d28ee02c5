//! Teacher-to-student policy distillation with transient-weighted imitation
//! and a one-step Lyapunov-consistency penalty.

mod dataset;

pub use dataset::{
    collect_dataset, CollectConfig, Collected, ExpertDataset, Partition, Record, Trajectory, FORMAT_VERSION, MAGIC,
    RECORD_FIELDS,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{find_scenario, metrics, rollout, BenchError, MetricReport, PolicyController, Scenario};
use crate::derive_seed;
use crate::env::{EnvError, EpisodeConfig, InitialCondition, NormScales, RewardConfig, ACTION_DIM, OBS_DIM};
use crate::nn::{Adam, DeployedPolicy, Mlp, MlpSpec, NnError};
use crate::plant::{self, CircuitParams, LoadParams, LoadSchedule, PlantAction, PlantError, PlantState};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("partition violation: {0}")]
    Partition(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("student maps {got:?} but the dataset needs {expected:?} (obs, action)")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: mse {mse}, stability {stab}")]
    NonFinite { epoch: usize, batch: usize, mse: f64, stab: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub omega_p: f64,
    /// Volts.
    pub delta_th: f64,
    pub lambda_stab: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            omega_p: 9.0,
            delta_th: 0.0048,
            lambda_stab: 0.1,
            lr: 1e-3,
            batch: 256,
            epochs: 200,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::InvalidConfig(m.into()));
        if !(self.omega_p >= 0.0) {
            return bad("omega_p must be >= 0");
        }
        if !(self.delta_th > 0.0) {
            return bad("delta_th must be > 0");
        }
        if !(self.lambda_stab >= 0.0) {
            return bad("lambda_stab must be >= 0");
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 {
            return bad("lr, batch and epochs must be positive");
        }
        Ok(())
    }
}

/// `1 + omega_p` when the voltage error moved by more than `delta_th`
/// since the previous step, else `1`. The comparison is strict.
pub fn adaptive_weight(e_u_now: [f64; 2], e_u_prev: [f64; 2], cfg: &DistillConfig) -> f64 {
    let change = (e_u_now[0] - e_u_prev[0]).hypot(e_u_now[1] - e_u_prev[1]);
    if change > cfg.delta_th {
        1.0 + cfg.omega_p
    } else {
        1.0
    }
}

/// Everything the loss needs about one record, self-contained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub trajectory: usize,
    pub obs: [f64; OBS_DIM],
    pub target: [f64; ACTION_DIM],
    pub e_u: [f64; 2],
    pub e_u_prev: [f64; 2],
    pub state: PlantState,
    pub load: LoadParams,
    pub reference: [f64; 2],
    /// Parameters of the simulated plant.
    pub plant: CircuitParams,
    /// Parameters the actuator scaling and saturation refer to.
    pub nominal: CircuitParams,
    pub norm: NormScales,
    pub beta: f64,
    pub ts: f64,
    pub substeps: usize,
}

impl LossSample {
    /// Normalized Lyapunov value of the recorded state.
    pub fn lyapunov_now(&self) -> f64 {
        let s = &self.state;
        normalized_lyapunov(
            self.e_u,
            [s.i_ld - s.prev_i_ld, s.i_lq - s.prev_i_lq],
            &self.norm,
            self.beta,
        )
    }

    /// Plant state one period after applying the normalized action.
    pub fn predict(&self, action: [f64; 2]) -> Result<PlantState, PlantError> {
        let limit = self.nominal.voltage_limit();
        let u = plant::saturate_action(&PlantAction::new(action[0] * limit, action[1] * limit), &self.nominal);
        plant::step(&self.state, &u, &LoadSchedule::constant(self.load), &self.plant, self.ts, self.substeps)
    }

    /// Predicted Lyapunov increment under `action` and its gradient with
    /// respect to the action.
    pub fn predicted_increment(&self, action: [f64; 2]) -> Result<(f64, [f64; 2]), PlantError> {
        let next = self.predict(action)?;
        let e = [self.reference[0] - next.u_bus_d, self.reference[1] - next.u_bus_q];
        let di = [next.i_ld - self.state.i_ld, next.i_lq - self.state.i_lq];
        let dv = normalized_lyapunov(e, di, &self.norm, self.beta) - self.lyapunov_now();

        // The step is affine in the applied voltage, so its sensitivity is
        // the response of a zero state to unit commands.
        let (se2, si2) = (self.norm.voltage_error.powi(2), self.norm.current.powi(2));
        let dv_dx = [
            self.beta * di[0] / si2,
            self.beta * di[1] / si2,
            -e[0] / se2,
            -e[1] / se2,
        ];
        let zero = PlantState { t: self.state.t, ..PlantState::default() };
        let sched = LoadSchedule::constant(self.load);
        let mut dv_du = [0.0; 2];
        for (j, unit) in [PlantAction::new(1.0, 0.0), PlantAction::new(0.0, 1.0)].iter().enumerate() {
            let g = plant::step(&zero, unit, &sched, &self.plant, self.ts, self.substeps)?;
            dv_du[j] = dv_dx[0] * g.i_ld + dv_dx[1] * g.i_lq + dv_dx[2] * g.u_bus_d + dv_dx[3] * g.u_bus_q;
        }

        let limit = self.nominal.voltage_limit();
        let v = [action[0] * limit, action[1] * limit];
        let mag = v[0].hypot(v[1]);
        let jac = if mag <= limit {
            [[1.0, 0.0], [0.0, 1.0]]
        } else {
            let (n, s) = ([v[0] / mag, v[1] / mag], limit / mag);
            [
                [s * (1.0 - n[0] * n[0]), -s * n[0] * n[1]],
                [-s * n[1] * n[0], s * (1.0 - n[1] * n[1])],
            ]
        };
        let grad = [
            limit * (jac[0][0] * dv_du[0] + jac[1][0] * dv_du[1]),
            limit * (jac[0][1] * dv_du[0] + jac[1][1] * dv_du[1]),
        ];
        Ok((dv, grad))
    }
}

/// Lyapunov candidate on normalized channels: errors by the voltage-error
/// scale and current increments by the current scale.
pub fn normalized_lyapunov(e_u: [f64; 2], delta_i_l: [f64; 2], norm: &NormScales, beta: f64) -> f64 {
    let e = [e_u[0] / norm.voltage_error, e_u[1] / norm.voltage_error];
    let di = [delta_i_l[0] / norm.current, delta_i_l[1] / norm.current];
    0.5 * (e[0] * e[0] + e[1] * e[1]) + 0.5 * beta * (di[0] * di[0] + di[1] * di[1])
}

/// Loss samples for one partition. The first record of a trajectory has no
/// predecessor and is compared against itself.
pub fn loss_samples(
    dataset: &ExpertDataset,
    partition: Partition,
    nominal: &CircuitParams,
) -> Result<Vec<LossSample>, DistillError> {
    let mut out = Vec::with_capacity(dataset.record_count(partition));
    for id in dataset.ids(partition) {
        let t = &dataset.trajectories[id];
        let plant = t.plant_params(nominal)?;
        for (k, r) in t.records.iter().enumerate() {
            let prev = if k == 0 { r } else { &t.records[k - 1] };
            out.push(LossSample {
                trajectory: id,
                obs: r.obs,
                target: r.action,
                e_u: r.e_u,
                e_u_prev: prev.e_u,
                state: r.plant_state(t.reference),
                load: r.load_params(),
                reference: t.reference,
                plant,
                nominal: *nominal,
                norm: t.norm,
                beta: t.beta,
                ts: t.ts,
                substeps: t.substeps,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// Weighted composite loss.
    pub total: f64,
    /// Unweighted mean squared action distance.
    pub mse: f64,
    /// Mean of the positive parts of the predicted increments.
    pub stab: f64,
}

/// Composite loss over `batch` and its gradient with respect to the student
/// parameters (`None` when `with_grad` is false).
pub fn distill_loss(
    student: &Mlp,
    batch: &[&LossSample],
    cfg: &DistillConfig,
    with_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>), DistillError> {
    if student.input_dim() != OBS_DIM || student.output_dim() != ACTION_DIM {
        return Err(DistillError::ShapeMismatch {
            expected: (OBS_DIM, ACTION_DIM),
            got: (student.input_dim(), student.output_dim()),
        });
    }
    let n = batch.len();
    if n == 0 {
        return Err(DistillError::EmptyPartition("batch"));
    }
    let x: Vec<f64> = batch.iter().flat_map(|s| s.obs).collect();
    let (z, cache) = student.forward_batch(&x, n)?;
    let inv_n = 1.0 / n as f64;
    let (mut total, mut mse, mut stab) = (0.0, 0.0, 0.0);
    let mut dz = vec![0.0; z.len()];
    for (i, s) in batch.iter().enumerate() {
        let a = [z[2 * i].tanh(), z[2 * i + 1].tanh()];
        let w = adaptive_weight(s.e_u, s.e_u_prev, cfg);
        let diff = [s.target[0] - a[0], s.target[1] - a[1]];
        let sq = diff[0] * diff[0] + diff[1] * diff[1];
        let mut g = [-2.0 * diff[0], -2.0 * diff[1]];
        let mut pos = 0.0;
        if cfg.lambda_stab > 0.0 {
            let (dv, grad) = s.predicted_increment(a)?;
            if dv > 0.0 {
                pos = dv;
                g[0] += cfg.lambda_stab * grad[0];
                g[1] += cfg.lambda_stab * grad[1];
            }
        }
        mse += sq;
        stab += pos;
        total += w * (sq + cfg.lambda_stab * pos);
        for j in 0..2 {
            dz[2 * i + j] = w * inv_n * g[j] * (1.0 - a[j] * a[j]);
        }
    }
    let value = LossValue {
        total: total * inv_n,
        mse: mse * inv_n,
        stab: stab * inv_n,
    };
    let grads = if with_grad { Some(student.backward(&cache, &dz)?.params) } else { None };
    Ok((value, grads))
}

/// Per-epoch losses. `*_loss` is the weighted composite objective and
/// `*_mse` the plain action MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStudent {
    /// Parameters from the epoch with the lowest test loss.
    pub best: Mlp,
    pub best_epoch: usize,
    pub last: Mlp,
    pub curve: Vec<LossPoint>,
}

pub fn train_student(
    spec: &MlpSpec,
    dataset: &ExpertDataset,
    nominal: &CircuitParams,
    cfg: &DistillConfig,
) -> Result<TrainedStudent, DistillError> {
    train_student_with(spec, dataset, nominal, cfg, |_| {})
}

const EVAL_CHUNK: usize = 4096;

fn evaluate(student: &Mlp, samples: &[LossSample], cfg: &DistillConfig) -> Result<LossValue, DistillError> {
    let (mut total, mut mse, mut stab) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&LossSample> = chunk.iter().collect();
        let (v, _) = distill_loss(student, &refs, cfg, false)?;
        let k = chunk.len() as f64;
        total += v.total * k;
        mse += v.mse * k;
        stab += v.stab * k;
    }
    let n = samples.len() as f64;
    Ok(LossValue {
        total: total / n,
        mse: mse / n,
        stab: stab / n,
    })
}

/// Mini-batch Adam over the train partition. `on_batch` receives the
/// trajectory id of every sample in each batch before its update.
pub fn train_student_with(
    spec: &MlpSpec,
    dataset: &ExpertDataset,
    nominal: &CircuitParams,
    cfg: &DistillConfig,
    mut on_batch: impl FnMut(&[usize]),
) -> Result<TrainedStudent, DistillError> {
    cfg.validate()?;
    let train = loss_samples(dataset, Partition::Train, nominal)?;
    let test = loss_samples(dataset, Partition::Test, nominal)?;
    if train.is_empty() {
        return Err(DistillError::EmptyPartition("train"));
    }
    if test.is_empty() {
        return Err(DistillError::EmptyPartition("test"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut student = Mlp::new(spec.clone(), &mut init_rng)?;
    if student.input_dim() != OBS_DIM || student.output_dim() != ACTION_DIM {
        return Err(DistillError::ShapeMismatch {
            expected: (OBS_DIM, ACTION_DIM),
            got: (student.input_dim(), student.output_dim()),
        });
    }
    let mut adam = Adam::new(student.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Mlp)> = None;
    let mut ids = Vec::with_capacity(cfg.batch);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut mse_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&LossSample> = chunk.iter().map(|&i| &train[i]).collect();
            ids.clear();
            ids.extend(batch.iter().map(|s| s.trajectory));
            on_batch(&ids);
            let (v, g) = distill_loss(&student, &batch, cfg, true)?;
            if !v.total.is_finite() {
                return Err(DistillError::NonFinite {
                    epoch,
                    batch: b,
                    mse: v.mse,
                    stab: v.stab,
                });
            }
            adam.step(student.params_mut(), &g.expect("gradient requested"));
            loss_sum += v.total * chunk.len() as f64;
            mse_sum += v.mse * chunk.len() as f64;
        }
        let t = evaluate(&student, &test, cfg)?;
        if !t.total.is_finite() {
            return Err(DistillError::NonFinite {
                epoch,
                batch: usize::MAX,
                mse: t.mse,
                stab: t.stab,
            });
        }
        let n = train.len() as f64;
        curve.push(LossPoint {
            epoch,
            train_loss: loss_sum / n,
            test_loss: t.total,
            train_mse: mse_sum / n,
            test_mse: t.mse,
        });
        if best.as_ref().map_or(true, |(l, _, _)| t.total < *l) {
            best = Some((t.total, epoch, student.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainedStudent {
        best,
        best_epoch,
        last: student,
        curve,
    })
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<(), DistillError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Student-versus-teacher comparison on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub scenario: String,
    /// Mean squared action distance on the states the teacher visits.
    pub action_mse: f64,
    pub teacher: MetricReport,
    pub student: MetricReport,
    pub sse_delta: f64,
    pub overshoot_delta: f64,
    pub thd_voltage_delta: Option<f64>,
    pub settle_time_delta: Option<f64>,
}

/// Closed-loop rollouts of both networks. Divergence shows up in the
/// metric reports rather than as an error.
pub fn evaluate_student(
    student: &Mlp,
    teacher: &Mlp,
    scenario: &Scenario,
    nominal: &CircuitParams,
    reward: &RewardConfig,
) -> Result<FidelityReport, DistillError> {
    let mut t_ctrl = PolicyController::new("teacher", teacher.clone());
    let mut s_ctrl = PolicyController::new("student", student.clone());
    let t_trace = rollout(&mut t_ctrl, scenario, nominal, reward)?;
    let s_trace = rollout(&mut s_ctrl, scenario, nominal, reward)?;
    let tm = metrics(&t_trace, scenario)?;
    let sm = metrics(&s_trace, scenario)?;

    // Visited states are re-derived by replaying the teacher so the
    // student is queried on exactly the observations the teacher saw.
    let mut env = crate::env::Env::new(scenario.episode.clone(), *reward, *nominal, 0)?;
    let (tp, sp) = (DeployedPolicy::new(teacher.clone()), DeployedPolicy::new(student.clone()));
    let (mut sum, mut n) = (0.0, 0usize);
    while !env.is_done() {
        let obs = env.observation().normalized;
        let a_t = tp.act(&obs)?;
        let a_s = sp.act(&obs)?;
        sum += (a_t[0] - a_s[0]).powi(2) + (a_t[1] - a_s[1]).powi(2);
        n += 1;
        if env.step([a_t[0], a_t[1]])?.diverged {
            break;
        }
    }
    let opt_delta = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(s, t)| s - t);
    Ok(FidelityReport {
        scenario: scenario.name.clone(),
        action_mse: sum / n.max(1) as f64,
        sse_delta: sm.sse - tm.sse,
        overshoot_delta: sm.relative_overshoot - tm.relative_overshoot,
        thd_voltage_delta: opt_delta(sm.thd_voltage, tm.thd_voltage),
        settle_time_delta: opt_delta(sm.settle_time, tm.settle_time),
        teacher: tm,
        student: sm,
    })
}

fn step_scenario(name: &str, from: LoadParams, to: LoadParams) -> Scenario {
    Scenario {
        name: name.into(),
        description: format!("load step ({} ohm, {} H) -> ({} ohm, {} H)", from.r, from.l, to.r, to.l),
        episode: EpisodeConfig {
            duration: 0.2,
            schedule: Some(LoadSchedule::new(vec![(0.0, from), (0.1, to)]).expect("valid schedule")),
            initial: InitialCondition::SteadyState,
            ..EpisodeConfig::default()
        },
    }
}

/// Load-step episodes the student is trained on, followed by the held-out
/// benchmark case.
pub fn collection_scenarios() -> Vec<Scenario> {
    let r = LoadParams::resistive;
    let rl = |r, l| LoadParams::new(r, l).expect("valid load");
    vec![
        step_scenario("step_50_100", r(50.0), r(100.0)),
        step_scenario("step_100_200", r(100.0), r(200.0)),
        step_scenario("step_200_100", r(200.0), r(100.0)),
        step_scenario("step_100_50", r(100.0), r(50.0)),
        step_scenario("step_50_200", r(50.0), r(200.0)),
        step_scenario("step_rl_100_50", rl(100.0, 5e-3), rl(50.0, 1e-3)),
        find_scenario("case1").expect("builtin"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::builtin_scenarios;
    use crate::nn::Precision;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> DistillConfig {
        DistillConfig::default()
    }

    #[test]
    fn weight_threshold_is_strict() {
        let c = cfg();
        assert_eq!(adaptive_weight([0.001, 0.0], [0.0, 0.0], &c), 1.0);
        assert_eq!(adaptive_weight([0.01, 0.0], [0.0, 0.0], &c), 10.0);
        assert_eq!(adaptive_weight([0.0048, 0.0], [0.0, 0.0], &c), 1.0);
        assert_eq!(adaptive_weight([5.0, 3.0], [5.0, 3.0 - 0.0048], &c), 1.0);
    }

    fn small_teacher(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(MlpSpec::new(OBS_DIM, &[16], ACTION_DIM), &mut rng).unwrap();
        // Bias the d output towards the nominal operating point.
        let last = net.num_layers() - 1;
        net.layer_mut(last).1[0] = 1.2;
        net
    }

    fn short(sc: &Scenario) -> Scenario {
        let mut s = sc.clone();
        s.episode.duration = 0.04;
        s.episode.schedule = Some(LoadSchedule::new(vec![(0.0, s.schedule().steps()[0].1), (0.02, s.schedule().steps()[1].1)]).unwrap());
        s
    }

    fn collected(episodes: usize) -> Collected {
        let scenarios: Vec<Scenario> = builtin_scenarios()[..3].iter().map(short).collect();
        let c = CollectConfig {
            episodes_per_scenario: episodes,
            ..CollectConfig::default()
        };
        collect_dataset(&small_teacher(3), &scenarios, &CircuitParams::default(), &RewardConfig::default(), &c).unwrap()
    }

    #[test]
    fn collection_counts_and_partition() {
        let c = collected(2);
        assert!(c.discarded.is_empty());
        assert_eq!(c.dataset.len(), 6);
        assert!(c.dataset.trajectories.iter().all(|t| t.len() == 400));
        assert_eq!(c.dataset.ids(Partition::Test), vec![0, 1]);
        c.dataset.check_isolation().unwrap();
        assert_ne!(c.dataset.trajectories[0].records[0], c.dataset.trajectories[1].records[0]);
    }

    #[test]
    fn replayed_actions_reproduce_next_states() {
        let c = collected(1);
        let nominal = CircuitParams::default();
        let limit = nominal.voltage_limit();
        let mut worst: f64 = 0.0;
        for t in &c.dataset.trajectories {
            let p = t.plant_params(&nominal).unwrap();
            for w in t.records.windows(2) {
                let s = w[0].plant_state(t.reference);
                let u = plant::saturate_action(&PlantAction::new(w[0].action[0] * limit, w[0].action[1] * limit), &nominal);
                let next = plant::step(&s, &u, &LoadSchedule::constant(w[0].load_params()), &p, t.ts, t.substeps).unwrap();
                let rec = w[1].plant_state(t.reference);
                for (a, b) in [
                    (next.i_ld, rec.i_ld),
                    (next.i_lq, rec.i_lq),
                    (next.u_bus_d, rec.u_bus_d),
                    (next.u_bus_q, rec.u_bus_q),
                    (next.i_load_d, rec.i_load_d),
                    (next.i_load_q, rec.i_load_q),
                ] {
                    worst = worst.max((a - b).abs() / b.abs().max(1.0));
                }
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn diverging_teacher_is_discarded() {
        let mut bad = small_teacher(1);
        let last = bad.num_layers() - 1;
        bad.layer_mut(last).1[0] = f64::NAN;
        let scenarios = vec![short(&builtin_scenarios()[0])];
        let c = collect_dataset(&bad, &scenarios, &CircuitParams::default(), &RewardConfig::default(), &CollectConfig::default()).unwrap();
        assert!(c.dataset.is_empty());
        assert_eq!(c.discarded, vec![("case1".to_string(), 0), ("case1".to_string(), 1)]);
    }

    #[test]
    fn file_round_trip() {
        let d = collected(1).dataset;
        let bytes = d.encode(Precision::F64);
        assert_eq!(ExpertDataset::decode(&bytes).unwrap(), d);
        let narrow = ExpertDataset::decode(&d.encode(Precision::F32)).unwrap();
        assert_eq!(narrow.encode(Precision::F32), d.encode(Precision::F32));
        assert!(ExpertDataset::decode(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path().join("d.bin"), Precision::F64).unwrap();
        assert_eq!(ExpertDataset::load(dir.path().join("d.bin")).unwrap(), d);
        d.write_csv(dir.path().join("d.csv")).unwrap();
        let rows = csv::Reader::from_path(dir.path().join("d.csv")).unwrap().records().count();
        assert_eq!(rows, d.record_count(Partition::Train) + d.record_count(Partition::Test));
    }

    #[test]
    fn identical_student_has_zero_loss() {
        let d = collected(1).dataset;
        let samples = loss_samples(&d, Partition::Train, &CircuitParams::default()).unwrap();
        let refs: Vec<_> = samples.iter().collect();
        let c = DistillConfig { lambda_stab: 0.0, ..cfg() };
        let (v, _) = distill_loss(&small_teacher(3), &refs, &c, false).unwrap();
        assert!(v.total.abs() < 1e-24 && v.mse.abs() < 1e-24);
    }

    fn single_sample(target: [f64; 2]) -> LossSample {
        let p = CircuitParams::default();
        let r = [p.nominal_peak_voltage(), 0.0];
        LossSample {
            trajectory: 0,
            obs: [0.0; OBS_DIM],
            target,
            e_u: [0.0; 2],
            e_u_prev: [0.0; 2],
            state: plant::steady_state(r, &LoadParams::resistive(100.0), &p).0,
            load: LoadParams::resistive(100.0),
            reference: r,
            plant: p,
            nominal: p,
            norm: NormScales::for_reference(r, &p, 20.0),
            beta: 1.0,
            ts: 1e-4,
            substeps: 10,
        }
    }

    #[test]
    fn single_sample_squared_distance() {
        let s = single_sample([0.5, 0.0]);
        let zero = Mlp::zeros(MlpSpec::new(OBS_DIM, &[4], ACTION_DIM)).unwrap();
        let c = DistillConfig { lambda_stab: 0.0, ..cfg() };
        let (v, _) = distill_loss(&zero, &[&s], &c, false).unwrap();
        assert!((v.total - 0.25).abs() < 1e-15);
    }

    #[test]
    fn stability_term_matches_recorded_increments() {
        // The recorded successor is an independent route to the one-step
        // prediction; with student = teacher the penalty must be the positive
        // part of the recorded increment.
        let d = collected(1).dataset;
        let nominal = CircuitParams::default();
        let teacher = small_teacher(3);
        let c = DistillConfig { omega_p: 0.0, ..cfg() };
        let (mut zero_hits, mut pos_hits) = (0, 0);
        for id in 0..d.len() {
            let t = &d.trajectories[id];
            let samples = loss_samples(&ExpertDataset::new(vec![Trajectory { partition: Partition::Train, ..t.clone() }]), Partition::Train, &nominal).unwrap();
            for k in 0..t.len() - 1 {
                let next = &t.records[k + 1];
                let v_next = normalized_lyapunov(
                    next.e_u,
                    [next.i_l[0] - t.records[k].i_l[0], next.i_l[1] - t.records[k].i_l[1]],
                    &t.norm,
                    t.beta,
                );
                let recorded = (v_next - samples[k].lyapunov_now()).max(0.0);
                let (v, _) = distill_loss(&teacher, &[&samples[k]], &c, false).unwrap();
                assert!(v.mse < 1e-24);
                assert!((v.stab - recorded).abs() < 1e-9 * recorded.max(1e-3), "{} vs {}", v.stab, recorded);
                if recorded == 0.0 {
                    zero_hits += 1;
                    assert_eq!(v.total, 0.0);
                } else {
                    pos_hits += 1;
                }
            }
        }
        assert!(zero_hits > 0 && pos_hits > 0);
    }

    #[test]
    fn equilibrium_sample_has_no_increment() {
        let p = CircuitParams::default();
        let mut s = single_sample([0.0; 2]);
        let (_, u) = plant::steady_state(s.reference, &s.load, &p);
        let a = [u.u_inv_d / p.voltage_limit(), u.u_inv_q / p.voltage_limit()];
        let (dv, _) = s.predicted_increment(a).unwrap();
        assert!(dv.abs() < 1e-12, "{dv}");
        s.target = a;
        let z = [a[0].atanh(), a[1].atanh()];
        let mut net = Mlp::zeros(MlpSpec::new(OBS_DIM, &[2], ACTION_DIM)).unwrap();
        let last = net.num_layers() - 1;
        net.layer_mut(last).1.copy_from_slice(&z);
        let (v, _) = distill_loss(&net, &[&s], &cfg(), false).unwrap();
        assert!(v.total < 1e-12, "{}", v.total);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = CircuitParams::default();
        let r = [p.nominal_peak_voltage(), 0.0];
        let mut samples = Vec::new();
        for _ in 0..16 {
            let mut s = single_sample([rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]);
            s.state.u_bus_d += rng.gen_range(-60.0..60.0);
            s.state.u_bus_q += rng.gen_range(-60.0..60.0);
            s.state.i_ld += rng.gen_range(-5.0..5.0);
            s.state.prev_i_ld = s.state.i_ld + rng.gen_range(-1.0..1.0);
            s.e_u = [r[0] - s.state.u_bus_d, r[1] - s.state.u_bus_q];
            s.e_u_prev = [s.e_u[0] + rng.gen_range(-0.01..0.01), s.e_u[1]];
            s.obs = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            samples.push(s);
        }
        let refs: Vec<_> = samples.iter().collect();
        // Wide output layer so some actions land in the saturated region.
        let mut net = Mlp::new(MlpSpec::new(OBS_DIM, &[8], ACTION_DIM).with_activation(crate::nn::Activation::Tanh), &mut rng).unwrap();
        for w in net.params_mut() {
            *w *= 2.0;
        }
        let c = DistillConfig { lambda_stab: 50.0, ..cfg() };
        let (_, g) = distill_loss(&net, &refs, &c, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fp = distill_loss(&plus, &refs, &c, false).unwrap().0.total;
            let fm = distill_loss(&minus, &refs, &c, false).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    /// Records whose action is `k * obs`; physical fields are consistent
    /// with the observation so that every loss term is defined.
    pub(super) fn linear_teacher_dataset(k: &[[f64; OBS_DIM]; 2], trajectories: &[(&str, Partition)], len: usize, seed: u64) -> ExpertDataset {
        let p = CircuitParams::default();
        let r = [p.nominal_peak_voltage(), 0.0];
        let norm = NormScales::for_reference(r, &p, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = trajectories
            .iter()
            .map(|(name, part)| {
                let records = (0..len)
                    .map(|i| {
                        let obs: [f64; OBS_DIM] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                        let action = [0, 1].map(|j| (0..OBS_DIM).map(|c| k[j][c] * obs[c]).sum::<f64>());
                        let phys = crate::env::Observation::denormalize(&obs, &norm);
                        Record {
                            obs,
                            action,
                            e_u: [phys[0], phys[1]],
                            i_l: [phys[4], phys[5]],
                            prev_i_l: [phys[4], phys[5]],
                            i_load: [0.0; 2],
                            load: [100.0, 0.0],
                            t: i as f64 * 1e-4,
                        }
                    })
                    .collect();
                Trajectory {
                    scenario: name.to_string(),
                    partition: *part,
                    reference: r,
                    l_f_mult: 1.0,
                    c_f_mult: 1.0,
                    ts: 1e-4,
                    substeps: 10,
                    norm,
                    beta: 1.0,
                    records,
                }
            })
            .collect();
        ExpertDataset::new(trajs)
    }

    fn gain() -> [[f64; OBS_DIM]; 2] {
        [[0.3, -0.2, 0.1, 0.0, 0.15, -0.1], [-0.1, 0.25, 0.0, 0.2, -0.05, 0.1]]
    }

    fn linear_fixture() -> ExpertDataset {
        let parts = [("a", Partition::Train), ("b", Partition::Train), ("c", Partition::Train), ("held", Partition::Test)];
        linear_teacher_dataset(&gain(), &parts, 800, 5)
    }

    #[test]
    fn linear_teacher_is_learned() {
        let d = linear_fixture();
        let c = DistillConfig { lambda_stab: 0.0, ..cfg() };
        let out = train_student(&MlpSpec::new(OBS_DIM, &[20, 15], ACTION_DIM), &d, &CircuitParams::default(), &c).unwrap();
        let best = out.curve.iter().map(|p| p.test_mse).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "{best}");
        for e in 0..out.curve.len() - 10 {
            if e % 10 == 0 {
                assert!(out.curve[e + 10].train_loss < out.curve[e].train_loss, "epoch {e}");
            }
        }
        let untrained = Mlp::new(MlpSpec::new(OBS_DIM, &[20, 15], ACTION_DIM), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let test = loss_samples(&d, Partition::Test, &CircuitParams::default()).unwrap();
        let u = evaluate(&untrained, &test, &c).unwrap().mse;
        let t = evaluate(&out.best, &test, &c).unwrap().mse;
        assert!(u > t);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let d = linear_fixture();
        let c = DistillConfig { epochs: 5, ..cfg() };
        let spec = MlpSpec::new(OBS_DIM, &[20, 15], ACTION_DIM);
        let a = train_student(&spec, &d, &CircuitParams::default(), &c).unwrap();
        let b = train_student(&spec, &d, &CircuitParams::default(), &c).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn transient_weighting_increases_loss() {
        let mut d = linear_fixture();
        // Make every other sample a mispredicted transient.
        for t in &mut d.trajectories {
            for (k, r) in t.records.iter_mut().enumerate() {
                r.e_u[0] = if k % 2 == 0 { 0.0 } else { 1.0 };
            }
        }
        let samples = loss_samples(&d, Partition::Train, &CircuitParams::default()).unwrap();
        let refs: Vec<_> = samples.iter().collect();
        let zero = Mlp::zeros(MlpSpec::new(OBS_DIM, &[4], ACTION_DIM)).unwrap();
        let weighted = distill_loss(&zero, &refs, &DistillConfig { lambda_stab: 0.0, ..cfg() }, false).unwrap().0;
        let plain = distill_loss(&zero, &refs, &DistillConfig { lambda_stab: 0.0, omega_p: 0.0, ..cfg() }, false).unwrap().0;
        assert!(weighted.total > plain.total);
        assert_eq!(weighted.mse, plain.mse);
    }

    #[test]
    fn empty_partitions_are_rejected() {
        let d = linear_teacher_dataset(&gain(), &[("a", Partition::Train)], 10, 1);
        let c = DistillConfig { epochs: 1, ..cfg() };
        let r = train_student(&MlpSpec::new(OBS_DIM, &[4], ACTION_DIM), &d, &CircuitParams::default(), &c);
        assert!(matches!(r, Err(DistillError::EmptyPartition("test"))));
        let r = train_student(&MlpSpec::new(5, &[4], ACTION_DIM), &linear_fixture(), &CircuitParams::default(), &c);
        assert!(matches!(r, Err(DistillError::Nn(_)) | Err(DistillError::ShapeMismatch { .. })));
    }

    #[test]
    fn identical_student_fidelity() {
        let t = small_teacher(3);
        let sc = short(&builtin_scenarios()[0]);
        let mut sc = sc;
        sc.episode.duration = 0.06;
        let rep = evaluate_student(&t, &t, &sc, &CircuitParams::default(), &RewardConfig::default()).unwrap();
        assert_eq!(rep.action_mse, 0.0);
        assert_eq!(rep.sse_delta, 0.0);
        assert_eq!(rep.overshoot_delta, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn held_out_records_never_reach_gradients(mask in proptest::collection::vec(any::<bool>(), 4..8), seed in 0u64..1000) {
            let names: Vec<String> = (0..mask.len()).map(|i| format!("s{i}")).collect();
            let mut parts: Vec<(&str, Partition)> = names.iter().zip(&mask)
                .map(|(n, &m)| (n.as_str(), if m { Partition::Test } else { Partition::Train })).collect();
            parts[0].1 = Partition::Train;
            parts[1].1 = Partition::Test;
            let d = linear_teacher_dataset(&gain(), &parts, 40, seed);
            let test_ids = d.ids(Partition::Test);
            let c = DistillConfig { epochs: 3, batch: 32, seed, ..cfg() };
            let spec = MlpSpec::new(OBS_DIM, &[6], ACTION_DIM);
            let mut seen = Vec::new();
            let a = train_student_with(&spec, &d, &CircuitParams::default(), &c, |ids| seen.extend_from_slice(ids)).unwrap();
            prop_assert!(seen.iter().all(|id| !test_ids.contains(id)));

            // Corrupting every held-out record leaves the trained weights
            // untouched.
            let mut corrupted = d.clone();
            for id in &test_ids {
                for r in &mut corrupted.trajectories[*id].records {
                    r.action = [0.9, -0.9];
                    r.obs = [0.5; OBS_DIM];
                }
            }
            let b = train_student(&spec, &corrupted, &CircuitParams::default(), &c).unwrap();
            prop_assert_eq!(a.last.params(), b.last.params());
        }
    }
}
