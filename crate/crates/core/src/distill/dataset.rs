//! Expert trajectories recorded from the teacher, with a trajectory-level
//! train/test partition.
//!
//! Binary layout (little-endian):
//!
//! | field              | type                                         |
//! |--------------------|----------------------------------------------|
//! | magic              | `b"IVDS"`                                    |
//! | version            | `u16` (currently 1)                          |
//! | precision          | `u8`: 0 = f32 records, 1 = f64 records       |
//! | trajectory count   | `u32`                                        |
//! | per trajectory     | header, then `len` records                   |
//!
//! Trajectory header: scenario id (`u16` byte length + UTF-8), partition
//! (`u8`: 0 = train, 1 = test), then as `f64`: reference d/q, `l_f` and
//! `c_f` multipliers, `ts`, norm scales (voltage error, voltage, current),
//! Lyapunov `beta`; then `u32` substeps and `u32` record count.
//!
//! Each record is [`RECORD_FIELDS`] floats in the order of
//! [`Record::to_fields`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::bench::{Controller, PolicyController, Scenario};
use crate::derive_seed;
use crate::env::{Env, InitialCondition, NormScales, RewardConfig, OBS_DIM};
use crate::nn::{Mlp, Precision};
use crate::plant::{CircuitParams, LoadParams, PlantState};

pub const MAGIC: &[u8; 4] = b"IVDS";
pub const FORMAT_VERSION: u16 = 1;
pub const RECORD_FIELDS: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    fn id(self) -> u8 {
        match self {
            Partition::Train => 0,
            Partition::Test => 1,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Partition::Train),
            1 => Some(Partition::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// One control period: what the teacher saw and did, plus the physical
/// state needed to roll the plant forward from it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Record {
    pub obs: [f64; OBS_DIM],
    /// Squashed teacher action in `[-1, 1]^2`.
    pub action: [f64; 2],
    pub e_u: [f64; 2],
    pub i_l: [f64; 2],
    pub prev_i_l: [f64; 2],
    pub i_load: [f64; 2],
    /// Load `(r, l)` applied during this period.
    pub load: [f64; 2],
    pub t: f64,
}

impl Record {
    pub fn to_fields(&self) -> [f64; RECORD_FIELDS] {
        let mut f = [0.0; RECORD_FIELDS];
        f[..6].copy_from_slice(&self.obs);
        f[6..8].copy_from_slice(&self.action);
        f[8..10].copy_from_slice(&self.e_u);
        f[10..12].copy_from_slice(&self.i_l);
        f[12..14].copy_from_slice(&self.prev_i_l);
        f[14..16].copy_from_slice(&self.i_load);
        f[16..18].copy_from_slice(&self.load);
        f[18] = self.t;
        f
    }

    pub fn from_fields(f: &[f64; RECORD_FIELDS]) -> Self {
        let pair = |i: usize| [f[i], f[i + 1]];
        Self {
            obs: std::array::from_fn(|i| f[i]),
            action: pair(6),
            e_u: pair(8),
            i_l: pair(10),
            prev_i_l: pair(12),
            i_load: pair(14),
            load: pair(16),
            t: f[18],
        }
    }

    /// Plant state reconstructed against `reference`.
    pub fn plant_state(&self, reference: [f64; 2]) -> PlantState {
        PlantState {
            i_ld: self.i_l[0],
            i_lq: self.i_l[1],
            u_bus_d: reference[0] - self.e_u[0],
            u_bus_q: reference[1] - self.e_u[1],
            i_load_d: self.i_load[0],
            i_load_q: self.i_load[1],
            t: self.t,
            prev_i_ld: self.prev_i_l[0],
            prev_i_lq: self.prev_i_l[1],
        }
    }

    pub fn load_params(&self) -> LoadParams {
        LoadParams { r: self.load[0], l: self.load[1] }
    }
}

/// A complete closed-loop episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scenario: String,
    pub partition: Partition,
    pub reference: [f64; 2],
    pub l_f_mult: f64,
    pub c_f_mult: f64,
    pub ts: f64,
    pub substeps: usize,
    pub norm: NormScales,
    pub beta: f64,
    pub records: Vec<Record>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Simulated plant parameters for this trajectory.
    pub fn plant_params(&self, nominal: &CircuitParams) -> Result<CircuitParams, DistillError> {
        Ok(nominal.perturbed(self.l_f_mult, self.c_f_mult)?)
    }

    fn has_load_step(&self) -> bool {
        self.records.windows(2).any(|w| w[0].load != w[1].load)
    }
}

/// Trajectories addressed by index; the index is the trajectory id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpertDataset {
    pub trajectories: Vec<Trajectory>,
}

impl ExpertDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn ids(&self, partition: Partition) -> Vec<usize> {
        (0..self.trajectories.len()).filter(|&i| self.trajectories[i].partition == partition).collect()
    }

    pub fn record_count(&self, partition: Partition) -> usize {
        self.trajectories.iter().filter(|t| t.partition == partition).map(Trajectory::len).sum()
    }

    /// Relabels every trajectory: those of a `held_out` scenario go to test,
    /// the rest to train.
    pub fn assign_partitions(&mut self, held_out: &[String]) {
        for t in &mut self.trajectories {
            t.partition = if held_out.contains(&t.scenario) { Partition::Test } else { Partition::Train };
        }
    }

    /// Checks that no scenario spans both partitions and that the test side
    /// holds at least one load-step trajectory.
    pub fn check_isolation(&self) -> Result<(), DistillError> {
        for t in &self.trajectories {
            if t.partition == Partition::Train
                && self.trajectories.iter().any(|u| u.partition == Partition::Test && u.scenario == t.scenario)
            {
                return Err(DistillError::Partition(format!("scenario '{}' appears in both partitions", t.scenario)));
            }
        }
        if !self.trajectories.iter().any(|t| t.partition == Partition::Test && t.has_load_step()) {
            return Err(DistillError::Partition("test partition holds no load-step trajectory".into()));
        }
        Ok(())
    }

    pub fn encode(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        out.extend_from_slice(&(self.trajectories.len() as u32).to_le_bytes());
        for t in &self.trajectories {
            let name = t.scenario.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.partition.id());
            for v in [
                t.reference[0],
                t.reference[1],
                t.l_f_mult,
                t.c_f_mult,
                t.ts,
                t.norm.voltage_error,
                t.norm.voltage,
                t.norm.current,
                t.beta,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(t.substeps as u32).to_le_bytes());
            out.extend_from_slice(&(t.records.len() as u32).to_le_bytes());
            for r in &t.records {
                for v in r.to_fields() {
                    match precision {
                        Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                        Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DistillError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DistillError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(DistillError::Format(format!("unsupported version {version}")));
        }
        let wide = match r.u8()? {
            0 => false,
            1 => true,
            p => return Err(DistillError::Format(format!("unknown precision id {p}"))),
        };
        let count = r.u32()? as usize;
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let scenario = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| DistillError::Format("scenario id is not UTF-8".into()))?;
            let partition = Partition::from_id(r.u8()?).ok_or_else(|| DistillError::Format("bad partition id".into()))?;
            let mut h = [0.0; 9];
            for v in &mut h {
                *v = r.f64()?;
            }
            let substeps = r.u32()? as usize;
            let len = r.u32()? as usize;
            let mut records = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                let mut f = [0.0; RECORD_FIELDS];
                for v in &mut f {
                    *v = if wide { r.f64()? } else { f64::from(r.f32()?) };
                }
                records.push(Record::from_fields(&f));
            }
            trajectories.push(Trajectory {
                scenario,
                partition,
                reference: [h[0], h[1]],
                l_f_mult: h[2],
                c_f_mult: h[3],
                ts: h[4],
                norm: NormScales {
                    voltage_error: h[5],
                    voltage: h[6],
                    current: h[7],
                },
                beta: h[8],
                substeps,
                records,
            });
        }
        if r.pos != bytes.len() {
            return Err(DistillError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { trajectories })
    }

    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<(), DistillError> {
        fs::write(path, self.encode(precision))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DistillError> {
        Self::decode(&fs::read(path)?)
    }

    /// One row per record, for inspection.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DistillError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "trajectory", "scenario", "partition", "k", "t", "obs0", "obs1", "obs2", "obs3", "obs4", "obs5", "a_d", "a_q",
            "e_ud", "e_uq", "i_ld", "i_lq", "prev_i_ld", "prev_i_lq", "i_load_d", "i_load_q", "load_r", "load_l",
        ])?;
        for (id, t) in self.trajectories.iter().enumerate() {
            for (k, r) in t.records.iter().enumerate() {
                let f = r.to_fields();
                let mut row = vec![id.to_string(), t.scenario.clone(), t.partition.as_str().into(), k.to_string()];
                row.push(f[18].to_string());
                row.extend(f[..18].iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DistillError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DistillError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DistillError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DistillError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("length checked")))
    }

    fn u32(&mut self) -> Result<u32, DistillError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn f32(&mut self) -> Result<f32, DistillError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64, DistillError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }
}

/// How the teacher is rolled out to build a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub episodes_per_scenario: usize,
    /// When positive, each episode starts from the equilibrium at a
    /// reference scaled by `1 + U(-spread, spread)`.
    pub initial_spread: f64,
    /// Scenarios whose trajectories form the test partition.
    pub held_out: Vec<String>,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            episodes_per_scenario: 2,
            initial_spread: 0.05,
            held_out: vec!["case1".into()],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Collected {
    pub dataset: ExpertDataset,
    /// `(scenario, episode)` pairs dropped because the teacher diverged.
    pub discarded: Vec<(String, usize)>,
}

/// Rolls the deterministic teacher on every scenario and records each step.
pub fn collect_dataset(
    teacher: &Mlp,
    scenarios: &[Scenario],
    nominal: &CircuitParams,
    reward: &RewardConfig,
    cfg: &CollectConfig,
) -> Result<Collected, DistillError> {
    let mut trajectories = Vec::new();
    let mut discarded = Vec::new();
    let mut controller = PolicyController::new("teacher", teacher.clone());
    for (si, sc) in scenarios.iter().enumerate() {
        for ep in 0..cfg.episodes_per_scenario {
            let mut episode = sc.episode.clone();
            if cfg.initial_spread > 0.0 {
                episode.initial = InitialCondition::RandomizedSteadyState { spread: cfg.initial_spread };
            }
            let seed = derive_seed(cfg.seed, (si * cfg.episodes_per_scenario + ep) as u64);
            let mut env = Env::new(episode.clone(), *reward, *nominal, seed)?;
            let mut records = Vec::with_capacity(episode.steps());
            let mut diverged = false;
            while !env.is_done() {
                let obs = env.observation();
                let s = *env.state();
                let load = env.current_load();
                let crate::bench::Command::Policy(a) = controller.act(&env)? else {
                    unreachable!("policy controllers emit normalized actions")
                };
                records.push(Record {
                    obs: obs.normalized,
                    action: a,
                    e_u: obs.e_u(),
                    i_l: [s.i_ld, s.i_lq],
                    prev_i_l: [s.prev_i_ld, s.prev_i_lq],
                    i_load: [s.i_load_d, s.i_load_q],
                    load: [load.r, load.l],
                    t: s.t,
                });
                if env.step(a)?.diverged {
                    diverged = true;
                    break;
                }
            }
            if diverged {
                discarded.push((sc.name.clone(), ep));
                continue;
            }
            trajectories.push(Trajectory {
                scenario: sc.name.clone(),
                partition: Partition::Train,
                reference: episode.reference,
                l_f_mult: episode.l_f_mult,
                c_f_mult: episode.c_f_mult,
                ts: episode.ts,
                substeps: episode.substeps,
                norm: *env.norm(),
                beta: reward.beta,
                records,
            });
        }
    }
    let mut dataset = ExpertDataset::new(trajectories);
    dataset.assign_partitions(&cfg.held_out);
    Ok(Collected { dataset, discarded })
}
