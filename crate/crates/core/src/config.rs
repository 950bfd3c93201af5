//! Training configuration: TOML file plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::env_names;
use crate::error::{Error, Result};
use crate::grpc::{ConstraintConfig, ConstraintKind};
use crate::nn::OptimizerConfig;
use crate::planner::PlannerConfig;
use crate::world_model::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_kl: bool,
    pub disable_groups: bool,
    pub use_std_norm_advantages: bool,
    pub use_logmu_constraint: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 4] = [
        "disable_kl",
        "disable_groups",
        "use_std_norm_advantages",
        "use_logmu_constraint",
    ];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name.replace('-', "_").as_str() {
            "disable_kl" => self.disable_kl = true,
            "disable_groups" => self.disable_groups = true,
            "use_std_norm_advantages" => self.use_std_norm_advantages = true,
            "use_logmu_constraint" => self.use_logmu_constraint = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub seed: u64,
    /// Environment steps in the whole run.
    pub total_steps: u64,
    /// Environment steps per collection phase (T).
    pub trajectory_length: u64,
    /// Gradient steps per collection phase (S).
    pub gradient_steps: u64,
    /// Segment length and planning horizon (H).
    pub horizon: usize,
    /// Policy samples per latent (G).
    pub groups: usize,
    /// Segments drawn per gradient step.
    pub batch_segments: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    /// Uniform-random steps before the first gradient step.
    pub warmup_steps: u64,
    /// Periodic evaluation interval in env steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Checkpoint interval in env steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Add exploration noise to planned actions during collection.
    pub explore: bool,
    /// Include wall-clock seconds in metrics (breaks byte-identical reruns).
    pub record_wall_clock: bool,
    pub ablation: Ablation,
    pub planner: PlannerConfig,
    pub constraint: ConstraintConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            seed: 0,
            total_steps: 30_000,
            trajectory_length: 500,
            gradient_steps: 250,
            horizon: 3,
            groups: 3,
            batch_segments: 3,
            gamma: 0.995,
            learning_rate: 3e-4,
            buffer_capacity: 1_000_000,
            warmup_steps: 1_000,
            eval_every: 0,
            eval_episodes: 10,
            eval_seed: 1_000_003,
            checkpoint_every: 0,
            explore: true,
            record_wall_clock: false,
            ablation: Ablation::default(),
            planner: PlannerConfig::default(),
            constraint: ConstraintConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !env_names().contains(&self.env.as_str()) {
            return Err(Error::UnknownEnv(self.env.clone()));
        }
        if self.trajectory_length == 0 {
            return bad("trajectory_length must be >= 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.groups == 0 || self.batch_segments == 0 {
            return bad("groups and batch_segments must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.buffer_capacity < self.horizon + 1 {
            return bad("buffer_capacity must be >= horizon + 1".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1".into());
        }
        if self.planner.horizon != self.horizon {
            return bad(format!(
                "planner.horizon ({}) differs from horizon ({})",
                self.planner.horizon, self.horizon
            ));
        }
        if self.ablation.use_std_norm_advantages && self.group_size() < 2 {
            return bad("use_std_norm_advantages needs a group size >= 2".into());
        }
        self.planner.validate()?;
        self.constraint.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Policy samples per latent after ablations.
    pub fn group_size(&self) -> usize {
        if self.ablation.disable_groups {
            1
        } else {
            self.groups
        }
    }

    /// Constraint settings after ablations.
    pub fn effective_constraint(&self) -> ConstraintConfig {
        let mut c = self.constraint.clone();
        if self.ablation.disable_kl {
            c.beta = 0.0;
        }
        if self.ablation.use_logmu_constraint {
            c.kind = ConstraintKind::LogMu;
        }
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text)?;
        Self::from_value(value)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Parses a TOML tree, then applies `key.path=value` overrides.
    pub fn from_toml_with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => toml::from_str(t)?,
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(mut value: toml::Value) -> Result<Self> {
        sync_horizon(&mut value)?;
        let cfg: TrainConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// The top-level horizon and the planner horizon name one quantity. When
/// only one is given it fills in the other.
fn sync_horizon(value: &mut toml::Value) -> Result<()> {
    let table = value
        .as_table_mut()
        .ok_or_else(|| Error::Config("config root must be a table".into()))?;
    let top = table.get("horizon").cloned();
    let planner = table
        .entry("planner")
        .or_insert_with(|| toml::Value::Table(Default::default()))
        .as_table_mut()
        .ok_or_else(|| Error::Config("planner must be a table".into()))?;
    let inner = planner.get("horizon").cloned();
    match (top, inner) {
        (Some(t), None) => {
            planner.insert("horizon".into(), t);
        }
        (None, Some(i)) => {
            table.insert("horizon".into(), i);
        }
        _ => {}
    }
    Ok(())
}

/// Sets `a.b.c = v` in a TOML tree. `v` is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let raw = raw.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {key:?} crosses a non-table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {key:?} crosses a non-table")))?;
    let last = parts[parts.len() - 1].to_string();
    if last == "horizon" && parts.len() <= 2 {
        // Keep both spellings of the horizon in step.
        table.insert(last, parsed.clone());
        if parts.len() == 1 {
            if let Some(p) = table.get_mut("planner").and_then(|p| p.as_table_mut()) {
                p.insert("horizon".into(), parsed);
            }
        }
        return Ok(());
    }
    table.insert(last, parsed);
    Ok(())
}
