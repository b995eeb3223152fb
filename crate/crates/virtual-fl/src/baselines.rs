//! Reference trainers with deterministic point weights: federated averaging,
//! independent per-client training, and centralized training. All three run
//! the plain multilayer perceptron (no lateral connections, no weight
//! uncertainty) so that comparisons against the variational pipeline isolate
//! the federation strategy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    argmax_classes, mlp_forward, mlp_forward_node, Batch, Dropout, MlpArchitecture, ModelError,
    Targets,
};
use crate::optim::Sgd;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("client {client} has no training rows")]
    EmptyTrainSet { client: usize },
    #[error("no clients to train")]
    NoClients,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for BaselineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        BaselineError::Model(ModelError::Tensor(e))
    }
}

/// A plain MLP with one flat deterministic weight vector.
#[derive(Debug, Clone)]
pub struct PointModel {
    arch: MlpArchitecture,
    weights: Vec<f64>,
}

impl PointModel {
    pub fn new(arch: MlpArchitecture, weights: Vec<f64>) -> Result<Self, BaselineError> {
        if weights.len() != arch.param_dim() {
            return Err(BaselineError::InvalidConfig(format!(
                "weight vector length {} does not match architecture size {}",
                weights.len(),
                arch.param_dim()
            )));
        }
        Ok(PointModel { arch, weights })
    }

    /// Fresh model with He-scaled random weights and zero biases.
    pub fn init(arch: MlpArchitecture, rng: &mut ChaCha8Rng) -> Self {
        let weights = arch.he_init(rng);
        PointModel { arch, weights }
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn predict_classes(&self, features: &Tensor) -> Result<Vec<usize>, ModelError> {
        let logits = mlp_forward(&self.arch, features, &self.weights)?;
        Ok(argmax_classes(&logits))
    }
}

/// Minibatch SGD settings for the Local and Global baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Full passes over the training data. Zero means "the caller derives
    /// the count from an epoch budget"; `sgd_epochs` then performs no updates.
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "sgd_defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "sgd_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "sgd_defaults::dropout")]
    pub dropout: f64,
}

mod sgd_defaults {
    pub fn learning_rate() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn dropout() -> f64 {
        0.3
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: 0,
            learning_rate: sgd_defaults::learning_rate(),
            batch_size: sgd_defaults::batch_size(),
            dropout: sgd_defaults::dropout(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        validate_sgd_fields(self.learning_rate, self.batch_size, self.dropout)
    }
}

/// Federated averaging settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedAvgConfig {
    /// Fraction of clients selected per round, in (0, 1].
    #[serde(default = "fedavg_defaults::client_fraction")]
    pub client_fraction: f64,
    /// Local SGD epochs per selected client per round, at least 1.
    #[serde(default = "fedavg_defaults::local_epochs")]
    pub local_epochs: usize,
    /// Communication rounds. Zero means "the caller derives the count from an
    /// epoch budget"; `run_fedavg` then returns the freshly initialised model.
    #[serde(default)]
    pub rounds: usize,
    #[serde(default = "fedavg_defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "fedavg_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "fedavg_defaults::dropout")]
    pub dropout: f64,
}

mod fedavg_defaults {
    pub fn client_fraction() -> f64 {
        0.2
    }
    pub fn local_epochs() -> usize {
        1
    }
    pub fn learning_rate() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn dropout() -> f64 {
        0.3
    }
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            client_fraction: fedavg_defaults::client_fraction(),
            local_epochs: fedavg_defaults::local_epochs(),
            rounds: 0,
            learning_rate: fedavg_defaults::learning_rate(),
            batch_size: fedavg_defaults::batch_size(),
            dropout: fedavg_defaults::dropout(),
        }
    }
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(BaselineError::InvalidConfig(format!(
                "client fraction must lie in (0, 1], got {}",
                self.client_fraction
            )));
        }
        if self.local_epochs == 0 {
            return Err(BaselineError::InvalidConfig(
                "local epochs must be at least 1".into(),
            ));
        }
        validate_sgd_fields(self.learning_rate, self.batch_size, self.dropout)
    }

    /// Clients selected per round for a `k`-client federation.
    pub fn clients_per_round(&self, k: usize) -> usize {
        ((self.client_fraction * k as f64).round() as usize).clamp(1, k.max(1))
    }
}

fn validate_sgd_fields(lr: f64, batch_size: usize, dropout: f64) -> Result<(), BaselineError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(BaselineError::InvalidConfig(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if batch_size == 0 {
        return Err(BaselineError::InvalidConfig(
            "batch size must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(BaselineError::InvalidConfig(format!(
            "dropout must lie in [0, 1), got {dropout}"
        )));
    }
    Ok(())
}

/// Sample-count-weighted mean of weight vectors: `Σ n_k w_k / Σ n_k`.
/// A single entry is returned bit-exactly.
pub fn weighted_average(entries: &[(&[f64], usize)]) -> Vec<f64> {
    assert!(!entries.is_empty(), "cannot average zero weight vectors");
    if entries.len() == 1 {
        return entries[0].0.to_vec();
    }
    let dim = entries[0].0.len();
    let total: f64 = entries.iter().map(|(_, n)| *n as f64).sum();
    let mut out = vec![0.0; dim];
    for (w, n) in entries {
        assert_eq!(w.len(), dim, "weight vectors must share a length");
        let share = *n as f64;
        for (o, v) in out.iter_mut().zip(*w) {
            *o += share * v;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Runs `epochs` passes of shuffled minibatch SGD on the mean class
/// cross-entropy, updating `weights` in place.
#[allow(clippy::too_many_arguments)]
fn sgd_epochs(
    arch: &MlpArchitecture,
    weights: &mut [f64],
    train: &Batch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), BaselineError> {
    let n = train.len();
    let opt = Sgd::new(lr);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            let batch = train.select(chunk);
            let Targets::Classes(labels) = &batch.targets else {
                return Err(ModelError::WrongTargets {
                    op: "baseline sgd",
                    expected: "class labels",
                }
                .into());
            };
            let mut tape = Tape::new();
            let w = tape.leaf(Tensor::vector(weights.to_vec()));
            let x = tape.constant(batch.features.clone());
            let mut drop = if dropout > 0.0 {
                Dropout::Train {
                    rate: dropout,
                    rng: &mut *rng,
                }
            } else {
                Dropout::Off
            };
            let logits = mlp_forward_node(arch, &mut tape, x, w, &mut drop)?;
            let picked = tape.log_softmax_pick(logits, labels)?;
            let total = tape.sum(picked);
            let loss = tape.scale(total, -1.0 / chunk.len() as f64);
            let grads = tape.backward(loss)?;
            opt.step(weights, grads.get(w));
        }
    }
    Ok(())
}

/// Sorts batch rows by content (features, then label) so that training is
/// invariant to how the rows were assembled.
fn canonical_order(batch: &Batch) -> Batch {
    let Targets::Classes(labels) = &batch.targets else {
        return batch.select(&(0..batch.len()).collect::<Vec<_>>());
    };
    let cols = batch.features.shape()[1];
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.sort_by(|&a, &b| {
        let row = |r: usize| batch.features.data()[r * cols..(r + 1) * cols].iter().map(|v| v.to_bits());
        row(a).cmp(row(b)).then(labels[a].cmp(&labels[b]))
    });
    batch.select(&idx)
}

/// One round of federated averaging: selects `max(1, round(C·K))` clients
/// without replacement, trains each for `local_epochs` from the shared
/// weights, and returns the sample-count-weighted average. One selected
/// client's weights pass through exactly.
pub fn fedavg_round(
    global: &PointModel,
    train_sets: &[Batch],
    cfg: &FedAvgConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointModel, BaselineError> {
    cfg.validate()?;
    let k = train_sets.len();
    if k == 0 {
        return Err(BaselineError::NoClients);
    }
    let m = cfg.clients_per_round(k);
    let mut selected = rand::seq::index::sample(rng, k, m).into_vec();
    selected.sort_unstable();
    let mut locals: Vec<(Vec<f64>, usize)> = Vec::with_capacity(m);
    for &i in &selected {
        let train = &train_sets[i];
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet { client: i });
        }
        let mut w = global.weights.clone();
        let mut client_rng = ChaCha8Rng::seed_from_u64(rng.random());
        sgd_epochs(
            &global.arch,
            &mut w,
            train,
            cfg.local_epochs,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.dropout,
            &mut client_rng,
        )?;
        locals.push((w, train.len()));
    }
    let entries: Vec<(&[f64], usize)> = locals.iter().map(|(w, n)| (w.as_slice(), *n)).collect();
    PointModel::new(global.arch.clone(), weighted_average(&entries))
}

/// Federated averaging from a fresh He initialization for `cfg.rounds`
/// rounds.
pub fn run_fedavg(
    arch: &MlpArchitecture,
    train_sets: &[Batch],
    cfg: &FedAvgConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointModel, BaselineError> {
    let mut model = PointModel::init(arch.clone(), rng);
    for _ in 0..cfg.rounds {
        model = fedavg_round(&model, train_sets, cfg, rng)?;
    }
    Ok(model)
}

/// Trains one independent model per client, each from its own He
/// initialization on its own shard only. Per-client RNG streams are derived
/// up front, so each client's result is independent of the others.
pub fn train_local(
    arch: &MlpArchitecture,
    train_sets: &[Batch],
    cfg: &SgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PointModel>, BaselineError> {
    cfg.validate()?;
    if train_sets.is_empty() {
        return Err(BaselineError::NoClients);
    }
    let mut models = Vec::with_capacity(train_sets.len());
    for (i, train) in train_sets.iter().enumerate() {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet { client: i });
        }
        let mut client_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut model = PointModel::init(arch.clone(), &mut client_rng);
        let ordered = canonical_order(train);
        sgd_epochs(
            arch,
            &mut model.weights,
            &ordered,
            cfg.epochs,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.dropout,
            &mut client_rng,
        )?;
        models.push(model);
    }
    Ok(models)
}

/// Trains one model on the concatenation of every client's training rows.
/// Rows are put in a canonical content order before the seeded shuffles, so
/// the result does not depend on shard concatenation order.
pub fn train_global(
    arch: &MlpArchitecture,
    train_sets: &[Batch],
    cfg: &SgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointModel, BaselineError> {
    cfg.validate()?;
    if train_sets.is_empty() {
        return Err(BaselineError::NoClients);
    }
    let cols = train_sets[0].features.shape()[1];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, b) in train_sets.iter().enumerate() {
        if b.is_empty() {
            return Err(BaselineError::EmptyTrainSet { client: i });
        }
        data.extend_from_slice(b.features.data());
        let Targets::Classes(l) = &b.targets else {
            return Err(ModelError::WrongTargets {
                op: "baseline sgd",
                expected: "class labels",
            }
            .into());
        };
        labels.extend_from_slice(l);
    }
    let combined = Batch::new(
        Tensor::matrix(labels.len(), cols, data)?,
        Targets::Classes(labels),
    )?;
    let ordered = canonical_order(&combined);
    let mut client_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut model = PointModel::init(arch.clone(), &mut client_rng);
    sgd_epochs(
        arch,
        &mut model.weights,
        &ordered,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.dropout,
        &mut client_rng,
    )?;
    Ok(model)
}

/// Rounds needed so that federated averaging's summed per-client epochs
/// match a per-client budget of `budget` epochs: each round trains
/// `clients_per_round` clients for `local_epochs` epochs.
pub fn fedavg_rounds_for_budget(budget: usize, k: usize, cfg: &FedAvgConfig) -> usize {
    let m = cfg.clients_per_round(k);
    let per_round = (m * cfg.local_epochs) as f64;
    (((budget * k) as f64 / per_round).round() as usize).max(1)
}
