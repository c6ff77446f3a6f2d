//! Run configuration and the single-pass train/evaluate loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{init_ensemble, Ensemble, EnsembleConfig, RoutingMode, VoteWeighting};
use crate::error::{Error, Result};
use crate::metrics::{confusion_from, predict, split_accuracies, AccuracyMatrix, ExperimentReport};
use crate::soft_knn::{kappa_for, SoftKnnConfig};
use crate::stream_data::{
    generate_synthetic_split, load_embeddings, make_stream, EmbeddingDataset, StreamPlan,
    SyntheticSpec,
};
use crate::training::{train_batch, AdamState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub generator: SyntheticSpec,
    pub test_per_class: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            generator: SyntheticSpec::default(),
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    /// Separate EMBD (or CSV) files for training and testing.
    Files(FileSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

impl DataSource {
    /// Train and test sets; their dimensions and class counts must agree.
    pub fn load(&self) -> Result<(EmbeddingDataset<f64>, EmbeddingDataset<f64>)> {
        let (train, test) = match self {
            DataSource::Synthetic(s) => generate_synthetic_split(&s.generator, s.test_per_class)?,
            DataSource::Files(f) => (load_embeddings(&f.train)?, load_embeddings(&f.test)?),
        };
        if train.embed_dim() != test.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: train.embed_dim(),
                found: test.embed_dim(),
            });
        }
        if train.n_classes() != test.n_classes() {
            return Err(Error::PlanMismatch(format!(
                "train set has {} classes, test set {}",
                train.n_classes(),
                test.n_classes()
            )));
        }
        Ok((train, test))
    }
}

/// Ensemble hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classifiers: usize,
    /// Derived from the ensemble size when absent.
    pub kappa: Option<usize>,
    pub sigma: f64,
    pub iterations: usize,
    pub gamma_threshold: f64,
    pub mode: RoutingMode,
    pub vote_weighting: VoteWeighting,
    pub tanh_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let knn = SoftKnnConfig::<f64>::default();
        Self {
            n_classifiers: 16,
            kappa: None,
            sigma: knn.sigma,
            iterations: knn.iterations,
            gamma_threshold: knn.gamma_threshold,
            mode: RoutingMode::Soft,
            vote_weighting: VoteWeighting::Distance,
            tanh_scale: 250.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_splits: usize,
    /// Label order to cut into splits; ascending when absent.
    pub class_order: Option<Vec<usize>>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            class_order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig<f64>,
    pub stream: StreamConfig,
    /// Run `i` uses `seed + i` for initialization and stream order.
    pub seed: u64,
    pub n_seeds: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            seed: 0,
            n_seeds: 1,
            output: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if self.stream.n_splits == 0 {
            return bad("stream.n_splits must be at least 1".into());
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.generator.validate()?;
            if s.test_per_class == 0 {
                return bad("data.synthetic.test_per_class must be positive".into());
            }
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        let n = self.model.n_classifiers;
        if n == 0 {
            return bad("model.n_classifiers must be positive".into());
        }
        self.soft_knn()
            .validate(n)
            .map_err(|e| prefixed("model", e))
    }

    pub fn soft_knn(&self) -> SoftKnnConfig<f64> {
        SoftKnnConfig {
            kappa: self
                .model
                .kappa
                .unwrap_or_else(|| kappa_for(self.model.n_classifiers)),
            sigma: self.model.sigma,
            iterations: self.model.iterations,
            gamma_threshold: self.model.gamma_threshold,
        }
    }

    pub fn ensemble_config(
        &self,
        embed_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> EnsembleConfig<f64> {
        EnsembleConfig {
            n_classifiers: self.model.n_classifiers,
            embed_dim,
            n_classes,
            soft_knn: self.soft_knn(),
            mode: self.model.mode,
            vote_weighting: self.model.vote_weighting,
            tanh_scale: self.model.tanh_scale,
            seed,
        }
    }

    pub fn stream_plan(&self, n_classes: usize, seed: u64) -> Result<StreamPlan> {
        let order = self
            .stream
            .class_order
            .clone()
            .unwrap_or_else(|| (0..n_classes).collect());
        StreamPlan::from_order(&order, self.stream.n_splits, self.train.batch_size, seed)
    }

    /// Seeds of the individual runs.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    /// Snapshot that reproduces the single run with `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.n_seeds = 1;
        cfg.model.kappa = Some(self.soft_knn().kappa);
        cfg
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{section}: {msg}")),
        Error::KappaOutOfRange { kappa, n } => Error::InvalidConfig(format!(
            "{section}.kappa: {kappa} out of range for {n} classifiers"
        )),
        other => other,
    }
}

/// Trains once over the stream, evaluating every split after every stage.
///
/// `cfg` must already be resolved with [`RunConfig::for_seed`].
pub fn run_single(
    cfg: &RunConfig,
    train: &EmbeddingDataset<f64>,
    test: &EmbeddingDataset<f64>,
) -> Result<ExperimentReport<RunConfig>> {
    cfg.validate()?;
    let ens_cfg = cfg.ensemble_config(train.embed_dim(), train.n_classes(), cfg.seed);
    ens_cfg.validate()?;
    let plan = cfg.stream_plan(train.n_classes(), cfg.seed)?;
    let stream = make_stream(train, &plan)?;
    let split_tests: Vec<Vec<usize>> = plan.splits.iter().map(|s| test.indices_of(s)).collect();
    if split_tests.iter().any(Vec::is_empty) {
        return Err(Error::EmptyTestSet);
    }
    let mut state = init_ensemble(&ens_cfg)?;
    let mut adam = AdamState::for_state(&state);
    let mut matrix = AccuracyMatrix::new();
    let mut train_seconds = 0.0;
    let mut predictions = Vec::new();

    for exp in &stream {
        let start = Instant::now();
        for batch in &exp.batches {
            let items: Vec<(&[f64], usize)> = batch
                .iter()
                .map(|&i| {
                    let ex = &train.examples()[i];
                    (ex.vector.as_slice(), ex.label)
                })
                .collect();
            train_batch(&mut state, &mut adam, &items, &ens_cfg, &cfg.train)?;
        }
        train_seconds += start.elapsed().as_secs_f64();
        let model = Ensemble {
            state: &state,
            cfg: &ens_cfg,
        };
        predictions = predict(&model, test)?;
        matrix.push_row(split_accuracies(&predictions, test, &split_tests)?)?;
    }

    let sizes = split_tests.iter().map(Vec::len).collect();
    ExperimentReport::new(
        cfg.clone(),
        matrix,
        sizes,
        confusion_from(&predictions, test),
        train_seconds,
    )
}

/// Every seed of `cfg`, in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<ExperimentReport<RunConfig>>> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    cfg.seeds()
        .into_iter()
        .map(|seed| run_single(&cfg.for_seed(seed), &train, &test))
        .collect()
}

/// Mean and sample standard deviation across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub train_seconds_mean: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Config with the per-run fields removed, for comparing runs.
fn comparable(config: &serde_json::Value) -> serde_json::Value {
    let mut c = config.clone();
    if let Some(obj) = c.as_object_mut() {
        obj.remove("seed");
        obj.remove("output");
    }
    c
}

pub fn aggregate<C: Serialize>(reports: &[ExperimentReport<C>]) -> Result<Aggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("no reports to aggregate".into()))?;
    let reference = comparable(&serde_json::to_value(&first.config)?);
    for (i, r) in reports.iter().enumerate().skip(1) {
        if comparable(&serde_json::to_value(&r.config)?) != reference {
            return Err(Error::MixedConfigs(format!(
                "report {i} differs from report 0 beyond the seed"
            )));
        }
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
    let (final_accuracy_mean, final_accuracy_std) = mean_std(&acc);
    let forgetting: Option<Vec<f64>> = reports.iter().map(|r| r.forgetting).collect();
    let fstats = forgetting.map(|f| mean_std(&f));
    let secs: Vec<f64> = reports.iter().map(|r| r.train_seconds).collect();
    Ok(Aggregate {
        n_runs: reports.len(),
        final_accuracy_mean,
        final_accuracy_std,
        forgetting_mean: fstats.map(|s| s.0),
        forgetting_std: fstats.map(|s| s.1),
        train_seconds_mean: mean_std(&secs).0,
    })
}

impl Aggregate {
    pub const CSV_HEADER: &'static str =
        "n_runs,final_accuracy_mean,final_accuracy_std,forgetting_mean,forgetting_std,train_seconds_mean";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.n_runs,
            self.final_accuracy_mean,
            self.final_accuracy_std,
            opt(self.forgetting_mean),
            opt(self.forgetting_std),
            self.train_seconds_mean
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ExperimentReport;

    fn small() -> RunConfig {
        RunConfig {
            data: DataSource::Synthetic(SyntheticSource {
                generator: SyntheticSpec {
                    n_classes: 4,
                    embed_dim: 8,
                    per_class: 6,
                    ..SyntheticSpec::default()
                },
                test_per_class: 3,
            }),
            model: ModelConfig {
                n_classifiers: 4,
                iterations: 20,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            stream: StreamConfig {
                n_splits: 2,
                class_order: None,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn empty_json_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.soft_knn().kappa, 4);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.model.sigma, 0.0005);
        assert_eq!(cfg.model.iterations, 400);
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_and_file_source() {
        let cfg = RunConfig::from_json(
            r#"{"model": {"n_classifiers": 128, "mode": "hard"},
                "data": {"files": {"train": "a.embd", "test": "b.embd"}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.soft_knn().kappa, 16);
        assert_eq!(cfg.model.mode, RoutingMode::Hard);
        assert!(matches!(cfg.data, DataSource::Files(_)));
    }

    #[test]
    fn config_errors_name_the_field() {
        let unknown = RunConfig::from_json(r#"{"model": {"sigmaa": 1}}"#).unwrap_err();
        assert!(unknown.to_string().contains("sigmaa"), "{unknown}");
        let mut cfg = RunConfig::default();
        cfg.model.kappa = Some(99);
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model.kappa"));
        cfg = RunConfig::default();
        cfg.train.learning_rate = 0.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train: learning_rate"));
        cfg = RunConfig::default();
        cfg.n_seeds = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn for_seed_resolves_the_run() {
        let mut cfg = RunConfig::default();
        cfg.seed = 10;
        cfg.n_seeds = 3;
        assert_eq!(cfg.seeds(), vec![10, 11, 12]);
        let one = cfg.for_seed(12);
        assert_eq!((one.seed, one.n_seeds, one.model.kappa), (12, 1, Some(4)));
    }

    #[test]
    fn run_fills_a_lower_triangle_and_more() {
        let cfg = small().for_seed(3);
        let (train, test) = cfg.data.load().unwrap();
        let report = run_single(&cfg, &train, &test).unwrap();
        assert_eq!(report.accuracy_matrix.stages(), 2);
        assert_eq!(report.split_test_sizes, vec![6, 6]);
        assert!(report.forgetting.is_some());
        let total: u64 = report.confusion.iter().flatten().sum();
        assert_eq!(total, 12);
        let again = run_single(&cfg, &train, &test).unwrap();
        assert_eq!(
            ExperimentReport {
                train_seconds: 0.0,
                ..again
            },
            ExperimentReport {
                train_seconds: 0.0,
                ..report
            }
        );
    }

    #[test]
    fn aggregate_statistics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let cfg = small();
        let reports = run_all(&RunConfig { n_seeds: 2, ..cfg }).unwrap();
        let agg = aggregate(&reports).unwrap();
        assert_eq!(agg.n_runs, 2);
        assert_eq!(agg.to_csv().lines().count(), 2);
        let single = aggregate(&reports[..1]).unwrap();
        assert_eq!(single.final_accuracy_std, 0.0);
        let mut mixed = reports.clone();
        mixed[1].config.model.sigma = 0.01;
        assert!(matches!(aggregate(&mixed), Err(Error::MixedConfigs(_))));
    }
}
