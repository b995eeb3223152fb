//! Experiment harness: TOML-configured runs of every training method over
//! seeded repetitions, with per-client accuracy metrics emitted as CSV.
//!
//! Each repetition derives its own dataset seed and training seed from the
//! master seed, so repetitions are independent but the whole experiment is
//! reproducible from a single integer. With `measure_time = false` the
//! emitted CSV is byte-for-byte identical across runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    fedavg_rounds_for_budget, run_fedavg, train_global, train_local, BaselineError, FedAvgConfig,
    PointModel, SgdConfig,
};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::data::{DataError, DatasetSpec, FederatedDataset, Shard, Source};
use crate::model::{
    argmax_classes, Batch, BatchLikelihood, ClientArchitecture, LateralNetModel, MlpArchitecture,
    ModelError, ServerArchitecture,
};
use crate::refinement::{
    run_virtual, ClientState, RefinementConfig, RefinementError, ServerState,
};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::variational::DiagGaussian;

/// Seed stream for dataset generation/splitting within a repetition.
const DATA_STREAM: u64 = 1;
/// Seed stream for model initialization and training noise.
const TRAIN_STREAM: u64 = 2;

/// Errors from configuration or experiment execution. `Config` maps to a
/// distinct process exit code in the CLI.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("client {client_id} has no training rows")]
    EmptyTrainShard { client_id: String },
    #[error("client {client_id} has no test rows; lower test_fraction or add data")]
    NoTestRows { client_id: String },
    #[error("evaluated zero samples")]
    EmptyEval,
    #[error("prediction count {predictions} does not match label count {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("all {attempted} repetitions failed; first error: {first}")]
    AllRepetitionsFailed { attempted: usize, first: String },
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    /// True for errors the user can fix by editing the configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Variational federated learning with lateral client networks.
    Virtual,
    /// Federated averaging of point-weight models.
    FedAvg,
    /// One independent model per client.
    Local,
    /// One model on the pooled data of all clients.
    Global,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Virtual, Method::FedAvg, Method::Local, Method::Global];

    pub fn name(self) -> &'static str {
        match self {
            Method::Virtual => "virtual",
            Method::FedAvg => "fedavg",
            Method::Local => "local",
            Method::Global => "global",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(Method::Virtual),
            "fedavg" => Ok(Method::FedAvg),
            "local" => Ok(Method::Local),
            "global" => Ok(Method::Global),
            other => Err(HarnessError::Config(format!(
                "unknown method {other:?}; expected one of virtual, fedavg, local, global"
            ))),
        }
    }
}

/// Shared-trunk widths, input layer first. Client heads are sized from the
/// dataset's class count at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub widths: Vec<usize>,
}

/// Settings specific to the variational method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VirtualConfig {
    /// Full refinement passes over all clients.
    #[serde(default = "default_refinements")]
    pub refinements: usize,
    /// Initial standard deviation of every client-weight posterior entry.
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
    /// Per-refinement optimizer settings, inlined into the same TOML table.
    #[serde(flatten)]
    pub refinement: RefinementConfig,
}

fn default_refinements() -> usize {
    3
}

fn default_init_sigma() -> f64 {
    0.05
}

impl Default for VirtualConfig {
    fn default() -> Self {
        VirtualConfig {
            refinements: default_refinements(),
            init_sigma: default_init_sigma(),
            refinement: RefinementConfig::default(),
        }
    }
}

impl VirtualConfig {
    /// Total training epochs each client receives across all refinements.
    /// The baselines are budgeted to match this number by default.
    pub fn epoch_budget(&self) -> usize {
        self.refinements * self.refinement.epochs
    }
}

fn default_repetitions() -> usize {
    5
}

fn default_true() -> bool {
    true
}

/// Full experiment description, deserialized from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Independent repetitions with distinct derived seeds.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Master seed every repetition seed derives from.
    #[serde(default)]
    pub seed: u64,
    /// Metrics CSV destination; omit to skip writing a file.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Label for the CSV `dataset` column; defaults to a name derived from
    /// the source.
    #[serde(default)]
    pub dataset_name: Option<String>,
    /// Record wall-clock seconds per repetition. Disable to make the metrics
    /// CSV byte-for-byte reproducible.
    #[serde(default = "default_true")]
    pub measure_time: bool,
    pub dataset: DatasetSpec,
    pub architecture: ArchitectureConfig,
    #[serde(rename = "virtual", default)]
    pub virtual_cfg: VirtualConfig,
    #[serde(default)]
    pub fedavg: FedAvgConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Where to store the final server/client state of a variational run.
    /// Written after each completed repetition, so it holds the last one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Checks everything knowable without loading data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let config_err = |msg: String| Err(HarnessError::Config(msg));
        if self.repetitions == 0 {
            return config_err("repetitions must be at least 1".into());
        }
        self.dataset
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        ServerArchitecture::new(self.architecture.widths.clone())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Source::Synthetic { features, .. } = &self.dataset.source {
            if self.architecture.widths[0] != *features {
                return config_err(format!(
                    "architecture input width {} does not match the {} synthetic features",
                    self.architecture.widths[0], features
                ));
            }
        }
        if self.virtual_cfg.refinements == 0 {
            return config_err("refinements must be at least 1".into());
        }
        if !(self.virtual_cfg.init_sigma > 0.0 && self.virtual_cfg.init_sigma.is_finite()) {
            return config_err(format!(
                "init_sigma must be positive and finite, got {}",
                self.virtual_cfg.init_sigma
            ));
        }
        self.virtual_cfg
            .refinement
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.virtual_cfg.epoch_budget() == 0 {
            return config_err("epoch budget is zero; set virtual epochs >= 1".into());
        }
        self.fedavg
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sgd
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Value of the CSV `dataset` column.
    pub fn dataset_label(&self) -> String {
        if let Some(name) = &self.dataset_name {
            return name.clone();
        }
        match &self.dataset.source {
            Source::Synthetic { .. } => "synthetic".to_string(),
            Source::IdxImage { .. } => "idx-image".to_string(),
            Source::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".to_string()),
        }
    }
}

/// Accuracy of one client's model on its own test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetric {
    pub client_id: String,
    pub accuracy: f64,
}

/// Everything recorded about one completed repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub dataset: String,
    /// The repetition's derived seed, not the master seed.
    pub seed: u64,
    pub clients: Vec<ClientMetric>,
    /// Unweighted mean of the per-client accuracies.
    pub average: f64,
    /// Wall-clock seconds for training plus evaluation; 0 when timing is off.
    pub seconds: f64,
    /// Training epochs each client's data received (averaged over clients
    /// for federated averaging, where only sampled clients train per round).
    pub epochs: f64,
}

/// Mean and sample standard deviation of the per-repetition averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
    pub failed: usize,
}

/// Result of a full experiment: one record per completed repetition plus an
/// aggregate over them. Failed repetitions are reported, not fatal, unless
/// every repetition fails.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    /// `(repetition index, error message)` for each failed repetition.
    pub failures: Vec<(usize, String)>,
}

/// Fraction of predictions matching the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, HarnessError> {
    if predictions.len() != labels.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(HarnessError::EmptyEval);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Accuracy of row-wise argmax predictions against the labels.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64, HarnessError> {
    accuracy(&argmax_classes(logits), labels)
}

/// Aggregates completed repetition averages; the standard deviation is the
/// sample estimate and zero when fewer than two repetitions completed.
pub fn summarize(records: &[MetricsRecord], failed: usize) -> Summary {
    let n = records.len();
    let mean = if n == 0 {
        0.0
    } else {
        records.iter().map(|r| r.average).sum::<f64>() / n as f64
    };
    let std = if n >= 2 {
        let ss = records
            .iter()
            .map(|r| (r.average - mean).powi(2))
            .sum::<f64>();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        std,
        completed: n,
        failed,
    }
}

/// Runs every repetition of the configured experiment. Individual repetition
/// failures are logged and collected; the experiment only errors if no
/// repetition completes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    let label = config.dataset_label();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for rep in 0..config.repetitions {
        let rep_seed = derive_seed(config.seed, rep as u64);
        match run_repetition(config, rep_seed, &label) {
            Ok(record) => records.push(record),
            Err(err) => {
                log::warn!("repetition {rep} (seed {rep_seed}) failed: {err}");
                failures.push((rep, err.to_string()));
            }
        }
    }
    if records.is_empty() {
        return Err(HarnessError::AllRepetitionsFailed {
            attempted: config.repetitions,
            first: failures
                .first()
                .map(|(_, e)| e.clone())
                .unwrap_or_default(),
        });
    }
    let summary = summarize(&records, failures.len());
    Ok(ExperimentOutcome {
        records,
        summary,
        failures,
    })
}

fn run_repetition(
    config: &ExperimentConfig,
    rep_seed: u64,
    label: &str,
) -> Result<MetricsRecord, HarnessError> {
    let mut spec = config.dataset.clone();
    spec.seed = derive_seed(rep_seed, DATA_STREAM);
    let dataset = spec.load()?;
    if dataset.feature_dim() != config.architecture.widths[0] {
        return Err(HarnessError::Config(format!(
            "architecture input width {} does not match dataset feature dimension {}",
            config.architecture.widths[0],
            dataset.feature_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, TRAIN_STREAM));
    let start = Instant::now();
    let (clients, epochs) = match config.method {
        Method::Virtual => virtual_repetition(config, &dataset, &mut rng)?,
        Method::FedAvg => fedavg_repetition(config, &dataset, &mut rng)?,
        Method::Local => local_repetition(config, &dataset, &mut rng)?,
        Method::Global => global_repetition(config, &dataset, &mut rng)?,
    };
    let seconds = if config.measure_time {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let average = clients.iter().map(|c| c.accuracy).sum::<f64>() / clients.len() as f64;
    Ok(MetricsRecord {
        method: config.method,
        dataset: label.to_string(),
        seed: rep_seed,
        clients,
        average,
        seconds,
        epochs,
    })
}

fn train_sets(dataset: &FederatedDataset) -> Result<Vec<Batch>, HarnessError> {
    for shard in &dataset.shards {
        if shard.train.is_empty() {
            return Err(HarnessError::EmptyTrainShard {
                client_id: shard.client_id.clone(),
            });
        }
    }
    Ok(dataset.shards.iter().map(Shard::train_batch).collect())
}

fn test_labels(shard: &Shard) -> Result<Vec<usize>, HarnessError> {
    if shard.test.is_empty() {
        return Err(HarnessError::NoTestRows {
            client_id: shard.client_id.clone(),
        });
    }
    Ok(shard.test.iter().map(|&i| shard.labels[i]).collect())
}

fn client_mlp(config: &ExperimentConfig, classes: usize) -> Result<MlpArchitecture, HarnessError> {
    let server = ServerArchitecture::new(config.architecture.widths.clone())?;
    Ok(ClientArchitecture::new(server, classes)?.mlp_architecture())
}

fn eval_point_models(
    dataset: &FederatedDataset,
    model_for: impl Fn(usize) -> PointModel,
) -> Result<Vec<ClientMetric>, HarnessError> {
    let mut metrics = Vec::with_capacity(dataset.num_clients());
    for (i, shard) in dataset.shards.iter().enumerate() {
        let labels = test_labels(shard)?;
        let predictions = model_for(i).predict_classes(&shard.test_batch().features)?;
        metrics.push(ClientMetric {
            client_id: shard.client_id.clone(),
            accuracy: accuracy(&predictions, &labels)?,
        });
    }
    Ok(metrics)
}

fn virtual_repetition(
    config: &ExperimentConfig,
    dataset: &FederatedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ClientMetric>, f64), HarnessError> {
    let vcfg = &config.virtual_cfg;
    let server_arch = ServerArchitecture::new(config.architecture.widths.clone())?;
    let model = LateralNetModel::new(server_arch, dataset.classes)?;
    let k = dataset.num_clients();
    let server = ServerState::init(DiagGaussian::standard(model.theta_dim()), k);
    let clients = dataset
        .shards
        .iter()
        .map(|_| {
            ClientState::new(
                model.client_arch().init_params(vcfg.init_sigma, rng),
                DiagGaussian::standard(model.phi_dim()),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sets = train_sets(dataset)?;
    let outcome = run_virtual(
        &model,
        server,
        clients,
        &sets,
        vcfg.refinements,
        &vcfg.refinement,
        rng,
        |_, _, _| {},
    )?;

    // Evaluate deterministically at the posterior means.
    let theta = outcome
        .server
        .posterior(vcfg.refinement.min_precision)
        .mean()
        .to_vec();
    let mut metrics = Vec::with_capacity(k);
    for (shard, client) in dataset.shards.iter().zip(&outcome.clients) {
        let labels = test_labels(shard)?;
        let logits =
            model.predict_logits(&theta, &client.posterior.mean, &shard.test_batch().features)?;
        metrics.push(ClientMetric {
            client_id: shard.client_id.clone(),
            accuracy: accuracy_from_logits(&logits, &labels)?,
        });
    }
    if let Some(path) = &config.checkpoint {
        save_checkpoint(path, &Checkpoint::new(outcome.server, outcome.clients))?;
    }
    Ok((metrics, vcfg.epoch_budget() as f64))
}

fn fedavg_repetition(
    config: &ExperimentConfig,
    dataset: &FederatedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ClientMetric>, f64), HarnessError> {
    let k = dataset.num_clients();
    let mut fcfg = config.fedavg.clone();
    if fcfg.rounds == 0 {
        fcfg.rounds = fedavg_rounds_for_budget(config.virtual_cfg.epoch_budget(), k, &fcfg);
    }
    let arch = client_mlp(config, dataset.classes)?;
    let sets = train_sets(dataset)?;
    let model = run_fedavg(&arch, &sets, &fcfg, rng)?;
    let metrics = eval_point_models(dataset, |_| model.clone())?;
    let per_client_epochs =
        (fcfg.rounds * fcfg.clients_per_round(k) * fcfg.local_epochs) as f64 / k as f64;
    Ok((metrics, per_client_epochs))
}

fn local_repetition(
    config: &ExperimentConfig,
    dataset: &FederatedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ClientMetric>, f64), HarnessError> {
    let mut scfg = config.sgd.clone();
    if scfg.epochs == 0 {
        scfg.epochs = config.virtual_cfg.epoch_budget();
    }
    let arch = client_mlp(config, dataset.classes)?;
    let sets = train_sets(dataset)?;
    let models = train_local(&arch, &sets, &scfg, rng)?;
    let metrics = eval_point_models(dataset, |i| models[i].clone())?;
    Ok((metrics, scfg.epochs as f64))
}

fn global_repetition(
    config: &ExperimentConfig,
    dataset: &FederatedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ClientMetric>, f64), HarnessError> {
    let mut scfg = config.sgd.clone();
    if scfg.epochs == 0 {
        scfg.epochs = config.virtual_cfg.epoch_budget();
    }
    let arch = client_mlp(config, dataset.classes)?;
    let sets = train_sets(dataset)?;
    let model = train_global(&arch, &sets, &scfg, rng)?;
    let metrics = eval_point_models(dataset, |_| model.clone())?;
    Ok((metrics, scfg.epochs as f64))
}

/// Quotes a CSV field only when it contains a delimiter, quote, or newline.
fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// Renders records as CSV text. One row per client per repetition, followed
/// by an `ALL` row carrying the repetition average; floats use six decimals.
pub fn render_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::from("method,dataset,seed,client_id,accuracy,average,seconds,epochs\n");
    for record in records {
        let mut row = |client_id: &str, acc: f64| {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                record.method,
                csv_field(&record.dataset),
                record.seed,
                csv_field(client_id),
                acc,
                record.average,
                record.seconds,
                record.epochs,
            ));
        };
        for client in &record.clients {
            row(&client.client_id, client.accuracy);
        }
        row("ALL", record.average);
    }
    out
}

/// Writes the rendered metrics to `path`.
pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_metrics(records)).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitMode, Transform};
    use proptest::prelude::*;

    fn tiny_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            repetitions: 1,
            seed: 9,
            output: None,
            dataset_name: None,
            measure_time: false,
            dataset: DatasetSpec {
                source: Source::Synthetic {
                    features: 4,
                    classes: 2,
                    per_client: 16,
                    heterogeneity: 0.5,
                    separation: 1.0,
                    noise: 0.5,
                },
                transform: Transform::None,
                clients: 2,
                subsample: None,
                test_fraction: 0.25,
                split: SplitMode::Stratified,
                seed: 0,
            },
            architecture: ArchitectureConfig { widths: vec![4, 4] },
            virtual_cfg: VirtualConfig {
                refinements: 1,
                init_sigma: 0.05,
                refinement: RefinementConfig {
                    mc_samples: 2,
                    epochs: 2,
                    batch_size: 8,
                    dropout: 0.0,
                    ..RefinementConfig::default()
                },
            },
            fedavg: FedAvgConfig::default(),
            sgd: SgdConfig::default(),
            checkpoint: None,
        }
    }

    fn record(seed: u64, accs: &[(&str, f64)], average: f64) -> MetricsRecord {
        MetricsRecord {
            method: Method::Local,
            dataset: "synthetic".into(),
            seed,
            clients: accs
                .iter()
                .map(|(id, a)| ClientMetric {
                    client_id: (*id).into(),
                    accuracy: *a,
                })
                .collect(),
            average,
            seconds: 0.0,
            epochs: 3.0,
        }
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[5], &[5]).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], &[]), Err(HarnessError::EmptyEval)));
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(HarnessError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn summary_uses_sample_std() {
        let records = vec![record(1, &[("a", 0.5)], 0.5), record(2, &[("a", 0.7)], 0.7)];
        let s = summarize(&records, 1);
        assert!((s.mean - 0.6).abs() < 1e-12);
        // Sample std of {0.5, 0.7} is 0.2/sqrt(2).
        assert!((s.std - 0.2 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!((s.completed, s.failed), (2, 1));

        let one = summarize(&records[..1], 0);
        assert_eq!(one.std, 0.0);
        assert_eq!(one.mean, 0.5);
    }

    #[test]
    fn metrics_csv_layout_is_exact() {
        let records = vec![record(7, &[("client-0", 0.5), ("client-1", 0.75)], 0.625)];
        let expected = "\
method,dataset,seed,client_id,accuracy,average,seconds,epochs
local,synthetic,7,client-0,0.500000,0.625000,0.000000,3.000000
local,synthetic,7,client-1,0.750000,0.625000,0.000000,3.000000
local,synthetic,7,ALL,0.625000,0.625000,0.000000,3.000000
";
        assert_eq!(render_metrics(&records), expected);
    }

    #[test]
    fn csv_fields_with_delimiters_are_quoted_and_parse_back() {
        let records = vec![record(1, &[("ward, east", 1.0)], 1.0)];
        let text = render_metrics(&records);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][3], "ward, east");
        assert_eq!(&rows[1][3], "ALL");
        assert_eq!(&rows[0][4], "1.000000");
    }

    #[test]
    fn emit_writes_rendered_bytes() {
        let records = vec![record(3, &[("c", 0.25)], 0.25)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        emit_metrics(&records, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            render_metrics(&records)
        );
    }

    #[test]
    fn emit_to_unwritable_path_reports_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no-such-dir").join("metrics.csv");
        let err = emit_metrics(&[record(1, &[("c", 1.0)], 1.0)], &path).unwrap_err();
        match err {
            HarnessError::Io { path: recorded, .. } => assert_eq!(recorded, path),
            other => panic!("expected an io error, got {other}"),
        }
    }

    #[test]
    fn iid_synthetic_keeps_all_methods_within_parity() {
        // Well-separated, identically distributed shards: every method should
        // reach the same (near-perfect) accuracy under the shared budget.
        let mut base = tiny_config(Method::Virtual);
        base.dataset.source = Source::Synthetic {
            features: 4,
            classes: 2,
            per_client: 120,
            heterogeneity: 0.0,
            separation: 3.0,
            noise: 0.4,
        };
        base.virtual_cfg.refinements = 2;
        base.virtual_cfg.refinement.epochs = 10;
        base.virtual_cfg.refinement.mc_samples = 5;
        base.virtual_cfg.refinement.batch_size = 30;
        base.virtual_cfg.refinement.learning_rate = 5e-3;
        let mean = |method: Method| {
            let mut config = base.clone();
            config.method = method;
            run_experiment(&config).unwrap().summary.mean
        };
        let (virt, fed, global) = (mean(Method::Virtual), mean(Method::FedAvg), mean(Method::Global));
        assert!(
            (virt - fed).abs() <= 0.03,
            "virtual {virt:.4} vs fedavg {fed:.4} drifted apart on iid data"
        );
        assert!(
            (global - fed).abs() <= 0.02,
            "global {global:.4} vs fedavg {fed:.4} drifted apart on iid data"
        );
    }

    #[test]
    fn method_names_round_trip() {
        for method in Method::ALL {
            assert_eq!(method.name().parse::<Method>().unwrap(), method);
        }
        let err = "madeup".parse::<Method>().unwrap_err();
        assert!(err.to_string().contains("virtual, fedavg, local, global"));
    }

    #[test]
    fn toml_round_trip_with_virtual_table() {
        let text = r#"
            method = "virtual"
            repetitions = 2
            seed = 11
            measure_time = false

            [dataset]
            clients = 3
            test_fraction = 0.25

            [dataset.source]
            type = "synthetic"
            features = 6
            classes = 2
            per_client = 20
            heterogeneity = 1.0

            [architecture]
            widths = [6, 5]

            [virtual]
            refinements = 2
            epochs = 4
            mc_samples = 3

            [fedavg]
            client_fraction = 0.5
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.method, Method::Virtual);
        assert_eq!(config.repetitions, 2);
        assert_eq!(config.virtual_cfg.refinements, 2);
        assert_eq!(config.virtual_cfg.refinement.epochs, 4);
        assert_eq!(config.virtual_cfg.refinement.mc_samples, 3);
        // Untouched inlined fields keep their defaults.
        assert_eq!(config.virtual_cfg.refinement.batch_size, 100);
        assert_eq!(config.fedavg.client_fraction, 0.5);
        assert_eq!(config.fedavg.local_epochs, 1);
        assert_eq!(config.virtual_cfg.epoch_budget(), 8);
        assert_eq!(config.dataset_label(), "synthetic");
    }

    #[test]
    fn toml_defaults_fill_missing_tables() {
        let text = r#"
            method = "local"

            [dataset]
            clients = 2

            [dataset.source]
            type = "synthetic"
            features = 4
            classes = 2
            per_client = 10
            heterogeneity = 0.0

            [architecture]
            widths = [4, 3]
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.repetitions, 5);
        assert!(config.measure_time);
        assert_eq!(config.seed, 0);
        assert_eq!(config.virtual_cfg.refinements, 3);
        assert_eq!(config.virtual_cfg.refinement.epochs, 20);
        assert_eq!(config.fedavg.rounds, 0);
        assert_eq!(config.sgd.epochs, 0);
        assert_eq!(config.dataset.test_fraction, 0.25);
    }

    #[test]
    fn config_errors_are_critical_and_descriptive() {
        let bad_method = r#"
            method = "sgd"
            [dataset]
            clients = 1
            [dataset.source]
            type = "synthetic"
            features = 2
            classes = 2
            per_client = 10
            heterogeneity = 0.0
            [architecture]
            widths = [2, 2]
        "#;
        let err = ExperimentConfig::from_toml_str(bad_method).unwrap_err();
        assert!(err.is_config(), "unexpected error kind: {err}");

        let mut mismatched = tiny_config(Method::Virtual);
        mismatched.architecture.widths[0] = 5;
        let err = mismatched.validate().unwrap_err();
        assert!(err.to_string().contains("input width"), "{err}");

        let mut zero_reps = tiny_config(Method::Local);
        zero_reps.repetitions = 0;
        assert!(zero_reps.validate().is_err());

        let mut bad_lr = tiny_config(Method::Virtual);
        bad_lr.virtual_cfg.refinement.learning_rate = -1.0;
        assert!(bad_lr.validate().unwrap_err().is_config());
    }

    #[test]
    fn dataset_label_prefers_explicit_name() {
        let mut config = tiny_config(Method::Local);
        assert_eq!(config.dataset_label(), "synthetic");
        config.dataset_name = Some("blobs".into());
        assert_eq!(config.dataset_label(), "blobs");
        config.dataset_name = None;
        config.dataset.source = Source::Csv {
            path: PathBuf::from("/data/vehicle_sensors.csv"),
            standardize: false,
        };
        assert_eq!(config.dataset_label(), "vehicle_sensors");
    }

    #[test]
    fn repetitions_use_distinct_derived_seeds() {
        let mut config = tiny_config(Method::Local);
        config.repetitions = 3;
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records.len(), 3);
        let mut seeds: Vec<u64> = outcome.records.iter().map(|r| r.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 3, "repetition seeds must differ");
        assert!(outcome.failures.is_empty());
    }

    #[test]
    fn experiment_is_reproducible_byte_for_byte() {
        let mut config = tiny_config(Method::Virtual);
        config.repetitions = 2;
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(render_metrics(&a.records), render_metrics(&b.records));
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn every_method_runs_with_matched_epoch_budgets() {
        let budget = 2.0; // refinements 1 x epochs 2
        for method in Method::ALL {
            let config = tiny_config(method);
            let outcome = run_experiment(&config).unwrap();
            assert_eq!(outcome.records.len(), 1);
            let record = &outcome.records[0];
            assert_eq!(record.method, method);
            assert_eq!(record.clients.len(), 2);
            assert!(
                (record.epochs - budget).abs() <= 1.0,
                "{method}: epochs {} too far from budget {budget}",
                record.epochs
            );
            for client in &record.clients {
                assert!((0.0..=1.0).contains(&client.accuracy));
            }
            let mean = record.clients.iter().map(|c| c.accuracy).sum::<f64>()
                / record.clients.len() as f64;
            assert!((record.average - mean).abs() < 1e-12);
            assert_eq!(record.seconds, 0.0, "timing disabled must record zero");
        }
    }

    #[test]
    fn checkpoint_written_for_virtual_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut config = tiny_config(Method::Virtual);
        config.checkpoint = Some(path.clone());
        run_experiment(&config).unwrap();
        let checkpoint = crate::checkpoint::load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint.server.num_clients(), 2);
        assert_eq!(checkpoint.clients.len(), 2);
    }

    #[test]
    fn derived_fedavg_rounds_match_budget_formula() {
        // Budget 2, K=2, C=0.2 -> one client per round -> 4 rounds, and the
        // recorded per-client epochs land back on the budget exactly.
        let config = tiny_config(Method::FedAvg);
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records[0].epochs, 2.0);
    }

    #[test]
    fn explicit_round_and_epoch_settings_are_honored() {
        let mut config = tiny_config(Method::FedAvg);
        config.fedavg.rounds = 6;
        config.fedavg.client_fraction = 1.0;
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records[0].epochs, 6.0);

        let mut config = tiny_config(Method::Global);
        config.sgd.epochs = 5;
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records[0].epochs, 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accuracy_is_shift_invariant(
            logits in proptest::collection::vec(-5.0..5.0f64, 12),
            shift in -10.0..10.0f64,
        ) {
            let base = Tensor::matrix(4, 3, logits.clone()).unwrap();
            let shifted = Tensor::matrix(4, 3, logits.iter().map(|v| v + shift).collect()).unwrap();
            let labels = vec![0, 1, 2, 0];
            let a = accuracy_from_logits(&base, &labels).unwrap();
            let b = accuracy_from_logits(&shifted, &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
