//! Conventional comparison controllers: cascaded dq PI and one-step
//! finite-control-set MPC.

use serde::{Deserialize, Serialize};

use crate::plant::{self, CircuitParams, DiscreteModel, LoadParams, PlantAction, PlantState};

/// Outer voltage loop and inner current loop gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiGains {
    pub kp_v: f64,
    pub ki_v: f64,
    pub kp_i: f64,
    pub ki_i: f64,
    /// Current-reference magnitude limit (A).
    pub i_ref_limit: f64,
    /// Adds the measured load current to the current reference.
    pub load_feedforward: bool,
}

impl Default for PiGains {
    fn default() -> Self {
        Self::tuned(&CircuitParams::default(), 500.0, 100.0, 20.0)
    }
}

impl PiGains {
    /// Loop-shaping rule: crossover `f_i` Hz for the current loop, `f_v` Hz
    /// for the voltage loop. Integral zeros sit at half the current-loop
    /// and a quarter of the voltage-loop crossover.
    pub fn tuned(p: &CircuitParams, f_i: f64, f_v: f64, i_ref_limit: f64) -> Self {
        let wi = 2.0 * std::f64::consts::PI * f_i;
        let wv = 2.0 * std::f64::consts::PI * f_v;
        let kp_i = wi * p.l_f;
        let kp_v = wv * p.m() * p.c_f;
        Self {
            kp_v,
            ki_v: kp_v * wv / 4.0,
            kp_i,
            ki_i: kp_i * wi / 2.0,
            i_ref_limit,
            load_feedforward: true,
        }
    }

    pub fn zero() -> Self {
        Self {
            kp_v: 0.0,
            ki_v: 0.0,
            kp_i: 0.0,
            ki_i: 0.0,
            i_ref_limit: f64::INFINITY,
            load_feedforward: true,
        }
    }
}

/// Dual-loop PI with decoupling feedforward and conditional-integration
/// anti-windup.
#[derive(Debug, Clone, PartialEq)]
pub struct PiController {
    pub gains: PiGains,
    pub int_v: [f64; 2],
    pub int_i: [f64; 2],
    /// Whether the last call froze the integrators.
    pub saturated: bool,
}

impl PiController {
    pub fn new(gains: PiGains) -> Self {
        Self {
            gains,
            int_v: [0.0; 2],
            int_i: [0.0; 2],
            saturated: false,
        }
    }

    pub fn reset(&mut self) {
        self.int_v = [0.0; 2];
        self.int_i = [0.0; 2];
        self.saturated = false;
    }
}

/// One control period. `load_current` is the measured dq load current.
pub fn pi_step(
    ctrl: &mut PiController,
    state: &PlantState,
    load_current: (f64, f64),
    reference: [f64; 2],
    p: &CircuitParams,
    ts: f64,
) -> PlantAction {
    let g = ctrl.gains;
    let w = p.omega;
    let mc = p.m() * p.c_f;
    let ev = [reference[0] - state.u_bus_d, reference[1] - state.u_bus_q];
    let (ff_d, ff_q) = if g.load_feedforward { load_current } else { (0.0, 0.0) };
    let mut i_ref = [
        g.kp_v * ev[0] + ctrl.int_v[0] + ff_d - w * mc * state.u_bus_q,
        g.kp_v * ev[1] + ctrl.int_v[1] + ff_q + w * mc * state.u_bus_d,
    ];
    let i_mag = i_ref[0].hypot(i_ref[1]);
    let current_limited = i_mag > g.i_ref_limit;
    if current_limited {
        let s = g.i_ref_limit / i_mag;
        i_ref = [i_ref[0] * s, i_ref[1] * s];
    }
    let ei = [i_ref[0] - state.i_ld, i_ref[1] - state.i_lq];
    let raw = PlantAction::new(
        g.kp_i * ei[0] + ctrl.int_i[0] + state.u_bus_d - w * p.l_f * state.i_lq,
        g.kp_i * ei[1] + ctrl.int_i[1] + state.u_bus_q + w * p.l_f * state.i_ld,
    );
    let out = plant::saturate_action(&raw, p);
    let voltage_limited = out != raw;
    ctrl.saturated = voltage_limited || current_limited;
    if !ctrl.saturated {
        for k in 0..2 {
            ctrl.int_v[k] += g.ki_v * ev[k] * ts;
            ctrl.int_i[k] += g.ki_i * ei[k] * ts;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcsMpcConfig {
    pub voltage_weight: f64,
    /// Weight on the predicted excess of `|i_L|^2` over `current_limit^2`.
    pub current_weight: f64,
    pub current_limit: f64,
}

impl Default for FcsMpcConfig {
    fn default() -> Self {
        Self {
            voltage_weight: 1.0,
            current_weight: 0.0,
            current_limit: 20.0,
        }
    }
}

/// Switching states `(Sa, Sb, Sc)` in conventional vector order V0..V7.
pub const SWITCH_STATES: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 1, 1],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
];

/// Stationary-frame space vectors `(2/3) v_dc (Sa + a Sb + a^2 Sc)`.
pub fn candidate_vectors(v_dc: f64) -> [(f64, f64); 8] {
    let (s, c) = (2.0 * std::f64::consts::FRAC_PI_3).sin_cos();
    SWITCH_STATES.map(|[a, b, cc]| {
        let (a, b, cc) = (a as f64, b as f64, cc as f64);
        let re = a + c * b + c * cc;
        let im = s * b - s * cc;
        (2.0 / 3.0 * v_dc * re, 2.0 / 3.0 * v_dc * im)
    })
}

/// Rotates a stationary-frame vector into the synchronous frame at `theta`.
pub fn to_dq((alpha, beta): (f64, f64), theta: f64) -> PlantAction {
    let (s, c) = theta.sin_cos();
    PlantAction::new(alpha * c + beta * s, beta * c - alpha * s)
}

/// Predictive controller holding the discretized model of the last load.
#[derive(Debug, Clone)]
pub struct FcsMpc {
    pub cfg: FcsMpcConfig,
    params: CircuitParams,
    ts: f64,
    model: Option<DiscreteModel>,
    candidates: [(f64, f64); 8],
}

/// Chosen vector and its cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcDecision {
    pub index: usize,
    pub action: PlantAction,
    pub cost: f64,
}

impl FcsMpc {
    pub fn new(cfg: FcsMpcConfig, params: CircuitParams, ts: f64) -> Self {
        Self {
            cfg,
            params,
            ts,
            model: None,
            candidates: candidate_vectors(params.v_dc),
        }
    }

    fn model_for(&mut self, load: &LoadParams) -> &DiscreteModel {
        if self.model.as_ref().map_or(true, |m| m.load != *load) {
            self.model = Some(DiscreteModel::new(load, &self.params, self.ts));
        }
        self.model.as_ref().expect("model just set")
    }

    pub fn cost(&self, predicted: &PlantState, reference: [f64; 2]) -> f64 {
        let ed = reference[0] - predicted.u_bus_d;
        let eq = reference[1] - predicted.u_bus_q;
        let i_sq = predicted.i_ld * predicted.i_ld + predicted.i_lq * predicted.i_lq;
        self.cfg.voltage_weight * (ed * ed + eq * eq)
            + self.cfg.current_weight * (i_sq - self.cfg.current_limit * self.cfg.current_limit).max(0.0)
    }

    /// Evaluates all eight vectors; ties go to the lowest index.
    pub fn decide(&mut self, state: &PlantState, reference: [f64; 2], load: &LoadParams, theta: f64) -> MpcDecision {
        let ts = self.ts;
        let candidates = self.candidates;
        let model = self.model_for(load).clone();
        let mut best: Option<MpcDecision> = None;
        for (index, v) in candidates.iter().enumerate() {
            let action = to_dq(*v, theta);
            let cost = self.cost(&model.predict(state, &action, ts), reference);
            if best.map_or(true, |b| cost < b.cost) {
                best = Some(MpcDecision { index, action, cost });
            }
        }
        best.expect("eight candidates")
    }
}

/// Functional form of [`FcsMpc::decide`].
pub fn fcs_mpc_step(
    state: &PlantState,
    reference: [f64; 2],
    load: &LoadParams,
    p: &CircuitParams,
    ts: f64,
    cfg: &FcsMpcConfig,
    theta: f64,
) -> PlantAction {
    FcsMpc::new(*cfg, *p, ts).decide(state, reference, load, theta).action
}
