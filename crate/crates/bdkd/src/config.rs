//! Experiment configuration: a strict JSON document plus dotted-path flag
//! overrides such as `--distill.tau 3`.

use std::path::Path;

use bdkd_core::calibration::DEFAULT_BINS;
use bdkd_core::objectives::DistillConfig;
use bdkd_core::training::{Mode, RunSpec, Schedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Spirals,
    Blobs,
    Csv,
}

/// Where the data comes from and how it is split. Fields that do not apply
/// to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub n_per_class: usize,
    /// Angular noise of the spiral arms.
    pub noise: f64,
    /// Standard deviation of the blobs.
    pub spread: f64,
    /// Feature dimension of the blobs.
    pub dim: usize,
    pub path: String,
    pub label_column: String,
    pub val_fraction: f64,
    /// Generator seed; the run seed is added to it.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Spirals,
            classes: 3,
            n_per_class: 200,
            noise: 0.6,
            spread: 0.5,
            dim: 2,
            path: String::new(),
            label_column: "label".to_string(),
            val_fraction: 0.3,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetConfig,
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub distill: DistillConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// `α` of offline KD.
    pub vanilla_alpha: f64,
    pub calibration_bins: usize,
    /// Teacher widths for `capacity-sweep`.
    pub capacity_widths: Vec<usize>,
    /// Temperatures for `temp-sweep`.
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BdKd,
            dataset: DatasetConfig::default(),
            teacher: NetConfig {
                hidden_widths: vec![64, 64],
            },
            student: NetConfig { hidden_widths: vec![8] },
            distill: DistillConfig::default(),
            schedule: Schedule::default(),
            epochs: 60,
            batch_size: 64,
            vanilla_alpha: 0.5,
            calibration_bins: DEFAULT_BINS,
            capacity_widths: vec![16, 64, 256],
            taus: vec![1.0, 2.0, 3.0, 4.0],
            seeds: vec![0],
            out_dir: "runs".to_string(),
        }
    }
}

fn bad(detail: impl Into<String>) -> CliError {
    CliError::Config(detail.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(d) => bad(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.distill.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(bad("epochs and batch_size must be positive"));
        }
        if self.calibration_bins == 0 {
            return Err(bad("calibration_bins must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.vanilla_alpha) {
            return Err(bad("vanilla_alpha must lie in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(bad("at least one seed is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("seeds must be distinct"));
        }
        let d = &self.dataset;
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(bad("dataset.val_fraction must lie in (0, 1)"));
        }
        if d.kind != DataKind::Csv && (d.classes < 2 || d.n_per_class < 2) {
            return Err(bad("synthetic data needs classes >= 2 and n_per_class >= 2"));
        }
        if d.kind == DataKind::Csv && d.path.is_empty() {
            return Err(bad("dataset.path is required for csv data"));
        }
        let widths = self.teacher.hidden_widths.iter().chain(&self.student.hidden_widths);
        if widths.chain(&self.capacity_widths).any(|&w| w == 0) {
            return Err(bad("hidden widths must be positive"));
        }
        if let Some(t) = self.taus.iter().find(|&&t| !(t > 0.0)) {
            return Err(bad(format!("temperatures must be positive, got {t}")));
        }
        Ok(())
    }

    /// Applies `(dotted.path, value)` overrides. Values are parsed as JSON
    /// when possible and taken as strings otherwise; a comma-separated value
    /// fills an array field.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut doc = serde_json::to_value(self).expect("config serialises");
        for (path, raw) in overrides {
            let slot = path
                .split('.')
                .try_fold(&mut doc, |node, key| node.as_object_mut().and_then(|m| m.get_mut(key)))
                .ok_or_else(|| bad(format!("unknown key `{path}`")))?;
            if slot.is_object() {
                return Err(bad(format!("`{path}` is a section, not a value")));
            }
            *slot = parse_value(raw, slot.is_array());
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The single-run view for `seed`.
    pub fn run_spec(&self, seed: u64) -> RunSpec {
        RunSpec {
            mode: self.mode,
            distill: self.distill,
            teacher_widths: self.teacher.hidden_widths.clone(),
            student_widths: self.student.hidden_widths.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            vanilla_alpha: self.vanilla_alpha,
            calibration_bins: self.calibration_bins,
            seed,
        }
    }

    /// First 16 hex digits of the SHA-256 of the config (output directory
    /// excluded, seed list replaced by `seed`).
    pub fn run_id(&self, seed: u64) -> String {
        let mut snapshot = self.clone();
        snapshot.out_dir.clear();
        snapshot.seeds = vec![seed];
        let canonical = serde_json::to_string(&snapshot).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

fn parse_value(raw: &str, array: bool) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !array || v.is_array() {
            return v;
        }
    }
    if array {
        return Value::Array(raw.split(',').map(|item| parse_value(item.trim(), false)).collect());
    }
    Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epoch": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"distill": {"temperature": 3}}"#).is_err());
        let cfg = ExperimentConfig::default();
        assert!(cfg
            .with_overrides(&[("distill.temperature".into(), "3".into())])
            .is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                ("distill.tau".into(), "3".into()),
                ("mode".into(), "dml".into()),
                ("teacher.hidden_widths".into(), "32,32".into()),
                ("schedule.milestones".into(), "[5]".into()),
            ])
            .unwrap();
        assert_eq!(cfg.distill.tau, 3.0);
        assert_eq!(cfg.mode, Mode::Dml);
        assert_eq!(cfg.teacher.hidden_widths, vec![32, 32]);
        assert_eq!(cfg.schedule.milestones, vec![5]);
        assert!(ExperimentConfig::default()
            .with_overrides(&[("mode".into(), "bogus".into())])
            .is_err());
        assert!(ExperimentConfig::default()
            .with_overrides(&[("distill.tau".into(), "-1".into())])
            .is_err());
    }

    #[test]
    fn run_id_depends_on_config_and_seed_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.seeds = vec![7, 8];
        assert_eq!(a.run_id(3), b.run_id(3));
        assert_ne!(a.run_id(3), a.run_id(4));
        b.distill.tau = 3.0;
        assert_ne!(a.run_id(3), b.run_id(3));
        assert_eq!(a.run_id(0).len(), 16);
    }
}
