//! Training runs: config parsing, the epoch loop with validation and early
//! stopping, checkpointing, and the ablation driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{batches, load_tsv, write_atomic, ConversionLog};
use crate::domains::DomainRegistry;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::features::{FeatureVector, Instance};
use crate::kv::KeyValues;
use crate::model::{MmnModel, ModelConfig, ModelMode, Prediction, TrainParams};
use crate::network::Adagrad;
use crate::tensor::RngState;

const CONFIG_KEYS: &[&str] = &[
    "data_path",
    "types",
    "scenarios",
    "mode",
    "layer_units",
    "embedding_dim",
    "num_slots",
    "ctr_domain_features",
    "alpha",
    "learning_rate",
    "epsilon",
    "batch_size",
    "epochs",
    "patience",
    "seed",
    "train_fraction",
    "checkpoint_path",
    "log_path",
    "report_path",
];

/// Stream id for the batch-order RNG, kept apart from initialization.
const SHUFFLE_STREAM: u64 = 1;

/// Loop settings shared by file-based and in-memory training.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub train: TrainParams,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many consecutive epochs without a better validation
    /// average AUC; zero disables early stopping.
    pub patience: usize,
    pub shuffle_seed: Option<u64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            train: TrainParams::default(),
            batch_size: 256,
            epochs: 5,
            patience: 2,
            shuffle_seed: Some(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// The single mixed-domain log; validation rows are split off its tail.
    pub data_path: PathBuf,
    pub types: Option<Vec<String>>,
    pub scenarios: Option<Vec<String>>,
    pub model: ModelConfig,
    pub fit: FitOptions,
    pub seed: u64,
    pub train_fraction: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

impl RunConfig {
    /// Relative paths are resolved against `base_dir`.
    pub fn from_kv(kv: &KeyValues, base_dir: &Path) -> Result<Self> {
        kv.check_known(CONFIG_KEYS)?;
        let path = |key: &str| -> Result<Option<PathBuf>> {
            Ok(kv.raw(key).map(|p| base_dir.join(p)))
        };
        let seed: u64 = kv.require("seed")?;
        let defaults = ModelConfig::default();
        let mode: ModelMode = match kv.raw("mode") {
            Some(m) => m.parse()?,
            None => ModelMode::Mmn,
        };
        let model = ModelConfig {
            mode,
            layer_units: kv.list("layer_units")?.unwrap_or(defaults.layer_units),
            embedding_dim: kv.get_or("embedding_dim", defaults.embedding_dim)?,
            num_slots: kv.get_or("num_slots", defaults.num_slots)?,
            ctr_domain_features: kv.bool_or("ctr_domain_features", false)?,
            seed,
        };
        let fit = FitOptions {
            train: TrainParams {
                alpha: kv.get_or("alpha", 1.0)?,
                optimizer: Adagrad::new(kv.get_or("learning_rate", 0.05)?, kv.get_or("epsilon", 1e-8)?),
            },
            batch_size: kv.get_or("batch_size", 256)?,
            epochs: kv.get_or("epochs", 5)?,
            patience: kv.get_or("patience", 2)?,
            shuffle_seed: Some(RngState::derive(seed, SHUFFLE_STREAM).next_u64()),
        };
        let config = Self {
            data_path: path("data_path")?.ok_or_else(|| Error::Config("missing `data_path`".into()))?,
            types: kv.list("types")?,
            scenarios: kv.list("scenarios")?,
            model,
            fit,
            seed,
            train_fraction: kv.get_or("train_fraction", 0.7)?,
            checkpoint_path: path("checkpoint_path")?
                .ok_or_else(|| Error::Config("missing `checkpoint_path`".into()))?,
            log_path: path("log_path")?,
            report_path: path("report_path")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fit.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1]".into()));
        }
        if !(self.fit.train.alpha.is_finite() && self.fit.train.alpha >= 0.0) {
            return Err(Error::Config("alpha must be finite and non-negative".into()));
        }
        let lr = self.fit.train.optimizer.learning_rate;
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.types.is_some() != self.scenarios.is_some() {
            return Err(Error::Config("`types` and `scenarios` must be given together".into()));
        }
        Ok(())
    }

    /// Startup checks: the data file exists and every output directory does.
    pub fn check_paths(&self) -> Result<()> {
        if !self.data_path.is_file() {
            return Err(Error::Config(format!("data file {} not found", self.data_path.display())));
        }
        for p in [Some(&self.checkpoint_path), self.log_path.as_ref(), self.report_path.as_ref()]
            .into_iter()
            .flatten()
        {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() {
                return Err(Error::Config(format!("output directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }
}

/// Record of dataset files opened by a run.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct FileAudit {
    opened: Vec<PathBuf>,
}

impl FileAudit {
    pub fn load_dataset(&mut self, path: &Path) -> Result<ConversionLog> {
        self.opened.push(path.to_path_buf());
        load_tsv(path, None)
    }

    pub fn dataset_files_opened(&self) -> usize {
        self.opened.len()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.opened
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Batch means; zero for the initial evaluation row.
    pub loss_ctr: f64,
    pub loss_ctcvr: f64,
    pub loss_ctcvr_weighted: f64,
    pub loss_total: f64,
    pub valid_average_auc: Option<f64>,
    pub improved: bool,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} steps={} loss_ctr={} loss_ctcvr={} loss_ctcvr_weighted={} loss_total={} valid_avg_auc={} best={}",
            self.epoch,
            self.steps,
            self.loss_ctr,
            self.loss_ctcvr,
            self.loss_ctcvr_weighted,
            self.loss_total,
            self.valid_average_auc.map_or_else(|| "NA".into(), |v| v.to_string()),
            if self.improved { "yes" } else { "no" },
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Model with the best validation average AUC seen (the initial model
    /// counts as epoch zero).
    pub best: MmnModel,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

fn better(candidate: Option<f64>, best: Option<f64>, no_validation: bool) -> bool {
    if no_validation {
        return true;
    }
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Runs the epoch loop. `on_epoch` sees each log row; `on_best` sees every
/// new best model, including the initial one, so a caller can persist it
/// before a later failure.
pub fn fit(
    mut model: MmnModel,
    train: &[Instance],
    valid: &[Instance],
    opts: &FitOptions,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
    on_best: &mut dyn FnMut(&MmnModel) -> Result<()>,
) -> Result<FitOutcome> {
    let validate = |m: &MmnModel| -> Result<Option<f64>> {
        if valid.is_empty() {
            Ok(None)
        } else {
            Ok(eval::report(m, valid)?.average_auc)
        }
    };
    let registry = model.registry().clone();
    let mut best_auc = validate(&model)?;
    let initial = EpochLog {
        epoch: 0,
        steps: model.step(),
        loss_ctr: 0.0,
        loss_ctcvr: 0.0,
        loss_ctcvr_weighted: 0.0,
        loss_total: 0.0,
        valid_average_auc: best_auc,
        improved: true,
    };
    on_epoch(&initial)?;
    on_best(&model)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut log = vec![initial];
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=opts.epochs {
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for batch in batches(train, &registry, opts.batch_size, opts.shuffle_seed, epoch as u64) {
            let bd = model.train_step(&batch?, &opts.train)?;
            for (s, v) in sums.iter_mut().zip([bd.ctr, bd.ctcvr, bd.ctcvr_weighted, bd.total]) {
                *s += v;
            }
            count += 1;
        }
        let mean = |i: usize| if count == 0 { 0.0 } else { sums[i] / count as f64 };
        let auc = validate(&model)?;
        let improved = better(auc, best_auc, valid.is_empty());
        let row = EpochLog {
            epoch,
            steps: model.step(),
            loss_ctr: mean(0),
            loss_ctcvr: mean(1),
            loss_ctcvr_weighted: mean(2),
            loss_total: mean(3),
            valid_average_auc: auc,
            improved,
        };
        on_epoch(&row)?;
        log.push(row);
        if improved {
            best_auc = auc;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
            on_best(&best)?;
        } else {
            stale += 1;
            if opts.patience > 0 && stale >= opts.patience {
                stopped_early = epoch < opts.epochs;
                break;
            }
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        epochs: log,
        stopped_early,
    })
}

/// The loaded dataset, encoded and split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub registry: DomainRegistry,
    pub log: ConversionLog,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
}

impl PreparedData {
    pub fn first_record(&self) -> Option<&FeatureVector> {
        self.log.records.first()
    }
}

pub fn prepare(config: &RunConfig, audit: &mut FileAudit) -> Result<PreparedData> {
    let log = audit.load_dataset(&config.data_path)?;
    if log.is_empty() {
        return Err(Error::Config(format!("{} holds no records", config.data_path.display())));
    }
    let registry = match (&config.types, &config.scenarios) {
        (Some(t), Some(s)) => DomainRegistry::new(t.clone(), s.clone())?,
        _ => log.infer_registry()?,
    };
    let model = MmnModel::new(&config.model, log.schema.clone(), registry.clone())?;
    let (train_log, valid_log) = log.split(config.train_fraction);
    let train = model.encode(&train_log.records)?;
    let valid = model.encode(&valid_log.records)?;
    Ok(PreparedData {
        registry,
        log,
        train,
        valid,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: FitOutcome,
    pub report: MetricsReport,
    /// Best model's prediction for the first record of the data file.
    pub probe: Option<Prediction>,
    pub audit: FileAudit,
}

fn probe_line(p: &Prediction) -> String {
    format!(
        "probe record=1 p_ctr={} p_cvr={}",
        p.p_ctr.map_or_else(|| "NA".into(), |v| v.to_string()),
        p.p_cvr
    )
}

/// Full training run from a config: one dataset file in, the best checkpoint,
/// a line-oriented log and a validation report out.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    config.check_paths()?;
    let mut audit = FileAudit::default();
    let data = prepare(config, &mut audit)?;
    let model = MmnModel::new(&config.model, data.log.schema.clone(), data.registry.clone())?;

    let mut log_text = String::new();
    let write_log = |text: &str| -> Result<()> {
        match &config.log_path {
            Some(p) => write_atomic(p, text.as_bytes()),
            None => Ok(()),
        }
    };
    let result = {
        let mut on_epoch = |row: &EpochLog| -> Result<()> {
            let _ = writeln!(log_text, "{}", row.to_line());
            Ok(())
        };
        let mut on_best = |m: &MmnModel| m.save(&config.checkpoint_path);
        fit(model, &data.train, &data.valid, &config.fit, &mut on_epoch, &mut on_best)
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(log_text, "abort error={e}");
            write_log(&log_text)?;
            return Err(e);
        }
    };
    let report = eval::report(&outcome.best, &data.valid)?;
    let probe = data.first_record().map(|r| outcome.best.predict_one(r)).transpose()?;
    let _ = writeln!(
        log_text,
        "done best_epoch={} stopped_early={} datasets_opened={}",
        outcome.best_epoch,
        outcome.stopped_early,
        audit.dataset_files_opened()
    );
    if let Some(p) = &probe {
        let _ = writeln!(log_text, "{}", probe_line(p));
    }
    write_log(&log_text)?;
    if let Some(p) = &config.report_path {
        write_atomic(p, report.to_kv().as_bytes())?;
    }
    Ok(TrainSummary {
        outcome,
        report,
        probe,
        audit,
    })
}

/// Per-group AUC differences of each mode against the first.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub modes: Vec<ModelMode>,
    pub reports: Vec<MetricsReport>,
}

impl AblationTable {
    /// `auc(mode_k) - auc(mode_0)` per type, `None` where either is undefined.
    pub fn type_deltas(&self, k: usize) -> Vec<(String, Option<f64>)> {
        deltas(&self.reports[0].per_type, &self.reports[k].per_type)
    }

    pub fn scenario_deltas(&self, k: usize) -> Vec<(String, Option<f64>)> {
        deltas(&self.reports[0].per_scenario, &self.reports[k].per_scenario)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, r) in self.reports.iter().enumerate() {
            let avg = r.average_auc.map_or_else(|| "NA".into(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:<22} average_auc={avg}", self.modes[k].name());
        }
        for k in 1..self.modes.len() {
            let _ = writeln!(out, "\ndelta {} - {}", self.modes[k].name(), self.modes[0].name());
            for (kind, rows) in [("type", self.type_deltas(k)), ("scenario", self.scenario_deltas(k))] {
                for (label, d) in rows {
                    let d = d.map_or_else(|| "NA".into(), |v| format!("{v:+.4}"));
                    let _ = writeln!(out, "  {kind:<8} {label:<12} {d}");
                }
            }
        }
        out
    }
}

fn deltas(
    base: &[eval::GroupMetrics],
    other: &[eval::GroupMetrics],
) -> Vec<(String, Option<f64>)> {
    base.iter()
        .zip(other)
        .map(|(a, b)| (a.label.clone(), a.auc.zip(b.auc).map(|(x, y)| y - x)))
        .collect()
}

/// Trains every mode on the same data and seed and compares validation
/// reports. Nothing is written to disk.
pub fn run_ablation(config: &RunConfig, modes: &[ModelMode]) -> Result<AblationTable> {
    if modes.len() < 2 {
        return Err(Error::Config("an ablation needs at least two modes".into()));
    }
    let mut audit = FileAudit::default();
    let data = prepare(config, &mut audit)?;
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mc = ModelConfig {
            mode,
            ..config.model.clone()
        };
        let model = MmnModel::new(&mc, data.log.schema.clone(), data.registry.clone())?;
        let outcome = fit(model, &data.train, &data.valid, &config.fit, &mut |_| Ok(()), &mut |_| Ok(()))?;
        reports.push(eval::report(&outcome.best, &data.valid)?);
    }
    Ok(AblationTable {
        modes: modes.to_vec(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, write_tsv, SyntheticSpec};

    fn write_run(dir: &Path, epochs: usize, extra: &str) -> RunConfig {
        let mut spec = SyntheticSpec::neutral(3, 2, 600, 4);
        spec.num_fields = 3;
        spec.type_offsets = vec![-1.0, 0.0, 1.0];
        write_tsv(&dir.join("log.tsv"), &generate(&spec).unwrap()).unwrap();
        let text = format!(
            "data_path = log.tsv\nseed = 7\nepochs = {epochs}\nlayer_units = 6, 4\nnum_slots = 257\n\
             batch_size = 64\ncheckpoint_path = m.ckpt\nlog_path = train.log\nreport_path = report.kv\n{extra}"
        );
        std::fs::write(dir.join("run.conf"), text).unwrap();
        RunConfig::load(&dir.join("run.conf")).unwrap()
    }

    #[test]
    fn config_requires_seed_and_rejects_unknown_keys() {
        let base = Path::new(".");
        let kv = KeyValues::parse("data_path = x\ncheckpoint_path = y\n", "t").unwrap();
        assert!(RunConfig::from_kv(&kv, base).is_err());
        let kv = KeyValues::parse("data_path = x\ncheckpoint_path = y\nseed = 1\nbogus = 2\n", "t").unwrap();
        assert!(RunConfig::from_kv(&kv, base).is_err());
        let kv = KeyValues::parse("data_path = x\ncheckpoint_path = y\nseed = 1\n", "t").unwrap();
        let c = RunConfig::from_kv(&kv, base).unwrap();
        assert_eq!(c.model.layer_units, vec![32, 16]);
        assert_eq!(c.fit.train.alpha, 1.0);
        assert!(c.check_paths().is_err());
    }

    #[test]
    fn zero_epochs_saves_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_run(dir.path(), 0, "");
        let summary = train(&config).unwrap();
        let saved = MmnModel::load(&config.checkpoint_path).unwrap();
        let mut audit = FileAudit::default();
        let data = prepare(&config, &mut audit).unwrap();
        let init = MmnModel::new(&config.model, data.log.schema.clone(), data.registry).unwrap();
        assert_eq!(saved, init);
        assert_eq!(summary.outcome.best_epoch, 0);
        assert_eq!(summary.audit.dataset_files_opened(), 1);
    }

    #[test]
    fn runs_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = write_run(a.path(), 2, "");
        let cb = write_run(b.path(), 2, "");
        train(&ca).unwrap();
        train(&cb).unwrap();
        for f in ["m.ckpt", "report.kv", "train.log"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let log = std::fs::read_to_string(a.path().join("train.log")).unwrap();
        assert!(log.lines().next().unwrap().starts_with("epoch=0 "));
        assert!(log.contains("probe record=1"));
    }

    #[test]
    fn identical_modes_give_zero_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_run(dir.path(), 1, "");
        let table = run_ablation(&config, &[ModelMode::Mmn, ModelMode::Mmn]).unwrap();
        for (_, d) in table.type_deltas(1).into_iter().chain(table.scenario_deltas(1)) {
            assert_eq!(d, Some(0.0));
        }
        assert!(run_ablation(&config, &[ModelMode::Mmn]).is_err());
        assert!(table.to_text().contains("delta mmn - mmn"));
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_run(dir.path(), 3, "learning_rate = 1e308\n");
        let err = train(&config).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
        assert!(MmnModel::load(&config.checkpoint_path).is_ok());
        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert!(log.contains("abort"));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let mut spec = SyntheticSpec::neutral(2, 2, 400, 9);
        spec.num_fields = 2;
        let log = generate(&spec).unwrap();
        let config = ModelConfig {
            layer_units: vec![4],
            num_slots: 64,
            ..ModelConfig::default()
        };
        let model = MmnModel::new(&config, log.schema.clone(), spec.registry()).unwrap();
        let inst = model.encode(&log.records).unwrap();
        // A zero learning rate never improves, so patience 2 stops after
        // epoch 2.
        let opts = FitOptions {
            train: TrainParams {
                alpha: 1.0,
                optimizer: Adagrad::new(0.0, 1e-8),
            },
            epochs: 10,
            patience: 2,
            batch_size: 100,
            shuffle_seed: Some(1),
        };
        let out = fit(model, &inst[..300], &inst[300..], &opts, &mut |_| Ok(()), &mut |_| Ok(())).unwrap();
        assert_eq!(out.epochs.len(), 3);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 0);
    }
}
