use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateKind;
use crate::engine::{DarcSchedule, EpochRecord, InitOptions, Observer, Snapshot};
use crate::error::{config_err, Result};
use crate::harness::format::save_model;
use crate::harness::metrics::Metrics;
use crate::scalar::Scalar;

/// Everything a compression run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    /// Stand-ins tried for every compressible layer, next to the original.
    pub candidates: Vec<CandidateKind>,
    pub schedule: DarcSchedule,
    pub mimic_steps: usize,
    pub mimic_step_size: f64,
    /// Cost per kind when the schedule uses synthetic costs.
    #[serde(default)]
    pub synthetic_costs: BTreeMap<CandidateKind, f64>,
    /// Number of training batches fed to the mimicking step.
    pub mimic_batches: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(model: PathBuf, data: PathBuf, schedule: DarcSchedule, seed: u64) -> Self {
        Self {
            model,
            data,
            candidates: CandidateKind::default_conv_replacements(),
            schedule,
            mimic_steps: InitOptions::default().mimic_steps,
            mimic_step_size: InitOptions::default().mimic_step_size,
            synthetic_costs: BTreeMap::new(),
            mimic_batches: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.model, &self.data] {
            if !p.exists() {
                return config_err(format!("{} does not exist", p.display()));
            }
        }
        self.schedule.validate()
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            mimic_steps: self.mimic_steps,
            mimic_step_size: self.mimic_step_size,
            cost: self.schedule.cost,
            synthetic_costs: self.synthetic_costs.clone(),
            ..InitOptions::default()
        }
    }

    /// Reads and validates a JSON config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Summary written next to each snapshot model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub block: usize,
    pub lambda: f64,
    pub eta: f64,
    pub cost_l0: f64,
    pub cost_l1: f64,
    pub selected_cost: f64,
    pub kinds: Vec<CandidateKind>,
    pub metrics_before: Metrics,
    pub metrics: Metrics,
}

impl<T> From<&Snapshot<T>> for SnapshotRecord {
    fn from(s: &Snapshot<T>) -> Self {
        Self {
            block: s.block,
            lambda: s.lambda,
            eta: s.eta,
            cost_l0: s.cost_l0,
            cost_l1: s.cost_l1,
            selected_cost: s.selected_cost,
            kinds: s.kinds.clone(),
            metrics_before: s.metrics_before.clone(),
            metrics: s.metrics.clone(),
        }
    }
}

/// A run directory: `config`, `log.jsonl` and `snapshots/{block}.model`
/// plus `snapshots/{block}.metrics`.
pub struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    /// Creates the layout, writes `config` and starts an empty log.
    pub fn create(root: impl AsRef<Path>, config: &impl Serialize) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("snapshots"))?;
        fs::write(root.join("config"), serde_json::to_string_pretty(config)? + "\n")?;
        let log = BufWriter::new(File::create(root.join("log.jsonl"))?);
        Ok(Self { root, log })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot_model_path(&self, block: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("{block}.model"))
    }

    pub fn snapshot_metrics_path(&self, block: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("{block}.metrics"))
    }

    pub fn append(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        Ok(())
    }
}

impl<T: Scalar> Observer<T> for RunDir {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.append(record)
    }

    fn on_snapshot(&mut self, snapshot: &Snapshot<T>) -> Result<()> {
        save_model(&snapshot.model, self.snapshot_model_path(snapshot.block))?;
        let record = SnapshotRecord::from(snapshot);
        fs::write(
            self.snapshot_metrics_path(snapshot.block),
            serde_json::to_string_pretty(&record)? + "\n",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Phase, Sgd};

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("m");
        let data = dir.path().join("d");
        let mut cfg = RunConfig::new(model.clone(), data.clone(), DarcSchedule::default(), 7);
        cfg.synthetic_costs.insert(CandidateKind::PointwiseConv1x1, 4.0);
        let path = dir.path().join("config");
        cfg.save(&path).unwrap();
        assert!(RunConfig::load(&path).is_err());
        fs::write(&model, b"").unwrap();
        fs::write(&data, b"").unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        assert_eq!(
            cfg.init_options().synthetic_costs[&CandidateKind::PointwiseConv1x1],
            4.0
        );
    }

    #[test]
    fn run_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut run = RunDir::create(&root, &serde_json::json!({"seed": 1})).unwrap();
        let data = crate::engine::fixtures::toy_data(8, 0);
        let mut m = crate::engine::fixtures::toy_model(0);
        let cfg = crate::engine::StepConfig {
            phase: Phase::Train,
            block: 0,
            lambda: 0.0,
            eta: 0.01,
            epochs: 2,
            batch_size: 4,
            allow_revival: false,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        crate::engine::train_epochs(
            &mut m,
            &data,
            &[0, 1, 2, 3],
            cfg,
            &mut Sgd::new(0.01, 0.0),
            &mut rng,
            &mut run,
        )
        .unwrap();
        let log = fs::read_to_string(root.join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(root.join("config").exists());
        assert!(run.snapshot_model_path(3).ends_with("snapshots/3.model"));
        assert!(root.join("snapshots").is_dir());
    }
}
