use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::{AgentConfig, TargetMode};
use crate::analysis::DpConfig;
use crate::dynamics::{EnsembleTrainConfig, Penalty, PenaltyKind};
use crate::env2d::EnvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    True,
    Learned,
    Random,
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    True,
    Learned,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Endpoints and weight for the interpolated variant:
    /// `(1 - alpha) * base + alpha * target`.
    pub base: Endpoint,
    pub target: Endpoint,
    pub alpha: f64,
    /// Reward penalty; `none` disables it.
    pub penalty: PenaltyChoice,
    pub penalty_weight: f64,
    /// Offline transitions used to fit the learned model (uniform over the
    /// padded reach box).
    pub dataset_size: usize,
    pub random_hidden: Vec<usize>,
    pub ensemble: EnsembleTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyChoice {
    None,
    Mopo,
    Morel,
    Mobile,
}

impl PenaltyChoice {
    pub fn kind(self) -> Option<PenaltyKind> {
        match self {
            PenaltyChoice::None => None,
            PenaltyChoice::Mopo => Some(PenaltyKind::Mopo),
            PenaltyChoice::Morel => Some(PenaltyKind::Morel),
            PenaltyChoice::Mobile => Some(PenaltyKind::Mobile),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::True,
            base: Endpoint::Learned,
            target: Endpoint::True,
            alpha: 0.0,
            penalty: PenaltyChoice::None,
            penalty_weight: 0.0,
            dataset_size: 20_000,
            random_hidden: vec![64, 64],
            ensemble: EnsembleTrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn penalty(&self) -> Option<Penalty> {
        self.penalty.kind().map(|kind| Penalty {
            kind,
            weight: self.penalty_weight,
        })
    }

    pub fn needs_learned(&self) -> bool {
        match self.variant {
            ModelVariant::Learned => true,
            ModelVariant::Interpolated => self.base == Endpoint::Learned || self.target == Endpoint::Learned,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub rollouts_per_epoch: usize,
    pub updates_per_epoch: usize,
    /// Fraction of each batch drawn from the offline dataset.
    pub real_ratio: f64,
    pub retain_epochs: usize,
    pub eval_episodes: usize,
    pub probe_states: usize,
    /// Trajectories per epoch kept for rollout plots.
    pub saved_trajectories: usize,
    /// Also write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Write the final replay buffer as CSV.
    pub dump_buffer: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            rollouts_per_epoch: 2000,
            updates_per_epoch: 250,
            real_ratio: 0.0,
            retain_epochs: 5,
            eval_episodes: 20,
            probe_states: 256,
            saved_trajectories: 16,
            checkpoint_every: 0,
            dump_buffer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub dp: DpConfig,
    /// Lattice spacing of the critic-disagreement and policy maps.
    pub map_h: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            dp: DpConfig::default(),
            map_h: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub agent: AgentConfig,
    pub training: TrainingConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvSpec::default(),
            model: ModelConfig::default(),
            agent: AgentConfig::default(),
            training: TrainingConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint, each prefixed by its dotted field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.env.problems();
        out.extend(self.agent.problems());
        if self.seed > i64::MAX as u64 {
            out.push("seed: must fit a TOML integer (at most 2^63 - 1)".into());
        }
        let m = &self.model;
        if !(0.0..=1.0).contains(&m.alpha) {
            out.push("model.alpha: must be in [0, 1]".into());
        }
        if m.variant == ModelVariant::Interpolated && m.base == m.target {
            out.push("model.target: interpolation endpoints must differ".into());
        }
        if !(m.penalty_weight >= 0.0 && m.penalty_weight.is_finite()) {
            out.push("model.penalty_weight: must be finite and >= 0".into());
        }
        if m.penalty != PenaltyChoice::None && m.penalty_weight > 0.0 && !m.needs_learned() && m.variant != ModelVariant::True {
            out.push("model.penalty: uncertainty penalties need a learned ensemble".into());
        }
        if m.needs_learned() {
            out.extend(m.ensemble.problems());
            if m.dataset_size == 0 {
                out.push("model.dataset_size: must be positive for a learned model".into());
            }
        }
        if m.random_hidden.contains(&0) {
            out.push("model.random_hidden: widths must be positive".into());
        }
        let t = &self.training;
        if !(0.0..=1.0).contains(&t.real_ratio) {
            out.push("training.real_ratio: must be in [0, 1]".into());
        }
        if t.real_ratio > 0.0 && m.dataset_size == 0 {
            out.push("training.real_ratio: mixing in real data needs model.dataset_size > 0".into());
        }
        if t.rollouts_per_epoch == 0 && t.real_ratio < 1.0 && t.updates_per_epoch > 0 {
            out.push("training.rollouts_per_epoch: must be positive when batches draw synthetic data".into());
        }
        if t.retain_epochs == 0 {
            out.push("training.retain_epochs: must be >= 1".into());
        }
        let a = &self.analysis;
        if !(a.dp.h > 0.0) {
            out.push("analysis.dp.h: must be positive".into());
        }
        if !(a.dp.tol > 0.0) {
            out.push("analysis.dp.tol: must be positive".into());
        }
        if a.dp.actions_per_axis == 0 {
            out.push("analysis.dp.actions_per_axis: must be positive".into());
        }
        if !(a.map_h > 0.0) {
            out.push("analysis.map_h: must be positive".into());
        }
        if self.agent.mode == TargetMode::OraclePatch && self.model.variant != ModelVariant::True {
            out.push("agent.mode: oracle patching is defined for the true dynamics only".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::InvalidConfig(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    /// Applies overrides to an already-parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, HarnessError> {
        Self::from_toml_with(&self.to_toml(), overrides)
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Parse(format!("override `{spec}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Parse(format!("override `{spec}` has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Parse(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
