//! Run configuration: one TOML document with a section per component.
//!
//! Every component seed is derived from `run.seed`; per-section `seed` keys
//! are therefore rejected and left out of the resolved snapshot.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vsictl::baselines::{FcsMpcConfig, PiGains};
use vsictl::derive_seed;
use vsictl::distill::{CollectConfig, DistillConfig};
use vsictl::env::{EpisodeConfig, RewardConfig};
use vsictl::nn::MlpSpec;
use vsictl::plant::CircuitParams;
use vsictl::sac::SacConfig;

const SAC_STREAM: u64 = 10;
const COLLECT_STREAM: u64 = 11;
const DISTILL_STREAM: u64 = 12;
const DERIVED_SEEDS: [&str; 3] = ["sac", "collect", "distill"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Also write the highest-return actor as `teacher_best.ckpt`.
    pub save_best: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { save_best: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub scenarios: Vec<String>,
    pub episodes_per_scenario: usize,
    pub initial_spread: f64,
    pub held_out: Vec<String>,
}

impl Default for CollectSection {
    fn default() -> Self {
        let c = CollectConfig::default();
        Self {
            scenarios: vsictl::distill::collection_scenarios().into_iter().map(|s| s.name).collect(),
            episodes_per_scenario: c.episodes_per_scenario,
            initial_spread: c.initial_spread,
            held_out: c.held_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    /// `S1`, `S2` or `custom`.
    pub name: String,
    /// Hidden widths used when `name = "custom"`.
    pub hidden: Vec<usize>,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            name: "S1".into(),
            hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub scenarios: Vec<String>,
    pub controllers: Vec<String>,
    pub jobs: usize,
    pub ablation: bool,
    pub pi: PiGains,
    pub mpc: FcsMpcConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            scenarios: vec!["case1".into(), "case2".into(), "case3".into()],
            controllers: vec!["pi".into(), "fcs-mpc".into()],
            jobs: 1,
            ablation: false,
            pi: PiGains::default(),
            mpc: FcsMpcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub circuit: CircuitParams,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub collect: CollectSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        for section in DERIVED_SEEDS {
            if table.get(section).and_then(|v| v.get("seed")).is_some() {
                bail!("key `{section}.seed` is not allowed; component seeds are derived from `run.seed`");
            }
        }
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.set_seed(cfg.run.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.sac.seed = derive_seed(seed, SAC_STREAM);
        self.distill.seed = derive_seed(seed, DISTILL_STREAM);
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            episodes_per_scenario: self.collect.episodes_per_scenario,
            initial_spread: self.collect.initial_spread,
            held_out: self.collect.held_out.clone(),
            seed: derive_seed(self.run.seed, COLLECT_STREAM),
        }
    }

    fn validate(&self) -> Result<()> {
        self.episode.validate(&self.circuit)?;
        self.reward.validate()?;
        self.sac.validate()?;
        self.distill.validate()?;
        student_spec(&self.student)?;
        Ok(())
    }

    /// Fully resolved document; parsing it yields `self` again.
    pub fn to_toml(&self) -> Result<String> {
        // Derived seeds can exceed the TOML integer range; they are dropped.
        let mut plain = self.clone();
        plain.sac.seed = 0;
        plain.distill.seed = 0;
        let mut table = toml::Table::try_from(&plain)?;
        for section in DERIVED_SEEDS {
            if let Some(t) = table.get_mut(section).and_then(|v| v.as_table_mut()) {
                t.remove("seed");
            }
        }
        Ok(toml::to_string(&table)?)
    }
}

/// Architecture for a student name.
pub fn student_spec(s: &StudentSection) -> Result<MlpSpec> {
    let hidden: &[usize] = match s.name.as_str() {
        "S1" => &[45, 30, 30],
        "S2" => &[20, 15],
        "custom" => {
            if s.hidden.is_empty() || s.hidden.contains(&0) {
                bail!("student `custom` needs a non-empty `student.hidden` list of positive widths");
            }
            &s.hidden
        }
        other => bail!("unknown student `{other}` (expected S1, S2 or custom)"),
    };
    Ok(MlpSpec::new(vsictl::env::OBS_DIM, hidden, vsictl::env::ACTION_DIM))
}
