//! Dataset ingestion, federated sharding, permutation transforms, synthetic
//! heterogeneous data, and train/test splitting.
//!
//! A [`FederatedDataset`] is a fixed collection of per-client shards; each
//! shard owns a feature matrix, a label vector, and (after [`split`]) disjoint
//! train/test index sets. Everything here is a deterministic function of the
//! input bytes and the seeds, and immutable once built.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, Targets};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {got:#010x} at byte offset 0, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated at byte offset {actual}, need {expected} bytes total")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: label byte {value} at offset {offset} outside the supported 0-9 range")]
    BadLabelByte {
        path: PathBuf,
        offset: usize,
        value: u8,
    },
    #[error("{path} has {images} images but its companion has {labels} labels")]
    CountMismatch {
        path: PathBuf,
        images: usize,
        labels: usize,
    },
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

/// One client's data: features are row-major `N × d`, labels are class
/// indices, and `train`/`test` are disjoint row-index sets filled by
/// [`split`].
#[derive(Debug, Clone)]
pub struct Shard {
    pub client_id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    /// Rows at `idx` as a classification batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let (features, labels) = gather_rows(&self.features, &self.labels, idx);
        Batch::new(features, Targets::Classes(labels))
            .expect("gathered rows form a consistent batch")
    }

    pub fn train_batch(&self) -> Batch {
        self.batch(&self.train)
    }

    pub fn test_batch(&self) -> Batch {
        self.batch(&self.test)
    }
}

/// The federation: one shard per client plus the global class count.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub shards: Vec<Shard>,
    pub classes: usize,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.shards.first().map_or(0, Shard::feature_dim)
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    /// Checks the structural invariants: at least one shard, uniform feature
    /// width, finite features, in-range labels, and per-shard train/test
    /// index sets that are in range and disjoint.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shards.is_empty() {
            return Err(DataError::Invariant("no shards".into()));
        }
        let d = self.feature_dim();
        for shard in &self.shards {
            let id = &shard.client_id;
            if shard.features.shape().len() != 2 || shard.features.shape()[0] != shard.len() {
                return Err(DataError::Invariant(format!(
                    "shard {id}: feature matrix shape {:?} does not match {} labels",
                    shard.features.shape(),
                    shard.len()
                )));
            }
            if shard.feature_dim() != d {
                return Err(DataError::Invariant(format!(
                    "shard {id}: feature width {} differs from {d}",
                    shard.feature_dim()
                )));
            }
            if !shard.features.data().iter().all(|x| x.is_finite()) {
                return Err(DataError::Invariant(format!(
                    "shard {id}: non-finite feature value"
                )));
            }
            if let Some(l) = shard.labels.iter().find(|l| **l >= self.classes) {
                return Err(DataError::Invariant(format!(
                    "shard {id}: label {l} out of range for {} classes",
                    self.classes
                )));
            }
            let n = shard.len();
            let mut seen = vec![0u8; n];
            for (set, name) in [(&shard.train, "train"), (&shard.test, "test")] {
                for &r in set.iter() {
                    if r >= n {
                        return Err(DataError::Invariant(format!(
                            "shard {id}: {name} index {r} out of range for {n} rows"
                        )));
                    }
                    if seen[r] != 0 {
                        return Err(DataError::Invariant(format!(
                            "shard {id}: row {r} appears in both train and test"
                        )));
                    }
                    seen[r] = 1;
                }
            }
        }
        Ok(())
    }
}

fn gather_rows(features: &Tensor, labels: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let d = features.shape().get(1).copied().unwrap_or(0);
    let mut data = Vec::with_capacity(idx.len() * d);
    for &r in idx {
        data.extend_from_slice(&features.data()[r * d..(r + 1) * d]);
    }
    let gathered = Tensor::matrix(idx.len(), d, data).expect("row gather preserves width");
    (gathered, idx.iter().map(|&r| labels[r]).collect())
}

// --- IDX image/label container -------------------------------------------

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: end,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads a big-endian IDX image/label file pair. Pixels are scaled from
/// 0–255 bytes to `[0, 1]` features; each image becomes one row of length
/// `rows × cols`. Labels must be 0–9.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>), DataError> {
    let img_bytes = read_file(images)?;
    let magic = be_u32(&img_bytes, 0, images)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = be_u32(&img_bytes, 4, images)? as usize;
    let rows = be_u32(&img_bytes, 8, images)? as usize;
    let cols = be_u32(&img_bytes, 12, images)? as usize;
    let pixel_count = count * rows * cols;
    let expected = 16 + pixel_count;
    if img_bytes.len() < expected {
        return Err(DataError::Truncated {
            path: images.to_path_buf(),
            expected,
            actual: img_bytes.len(),
        });
    }
    let features: Vec<f64> = img_bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let features = Tensor::matrix(count, rows * cols, features)
        .expect("pixel block length checked above");

    let lbl_bytes = read_file(labels)?;
    let magic = be_u32(&lbl_bytes, 0, labels)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels.to_path_buf(),
            expected: IDX_LABEL_MAGIC,
            got: magic,
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, labels)? as usize;
    let expected = 8 + lbl_count;
    if lbl_bytes.len() < expected {
        return Err(DataError::Truncated {
            path: labels.to_path_buf(),
            expected,
            actual: lbl_bytes.len(),
        });
    }
    if lbl_count != count {
        return Err(DataError::CountMismatch {
            path: images.to_path_buf(),
            images: count,
            labels: lbl_count,
        });
    }
    let mut label_vec = Vec::with_capacity(lbl_count);
    for (i, &b) in lbl_bytes[8..expected].iter().enumerate() {
        if b > 9 {
            return Err(DataError::BadLabelByte {
                path: labels.to_path_buf(),
                offset: 8 + i,
                value: b,
            });
        }
        label_vec.push(b as usize);
    }
    Ok((features, label_vec))
}

// --- Sharding and transforms ---------------------------------------------

/// Randomly partitions `(features, labels)` into `k` near-equal shards
/// (sizes differ by at most one). Every sample lands in exactly one shard.
pub fn shard_iid(
    features: &Tensor,
    labels: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FederatedDataset, DataError> {
    let n = labels.len();
    if k == 0 {
        return Err(DataError::InvalidSpec("need at least one client".into()));
    }
    if n < k {
        return Err(DataError::InvalidSpec(format!(
            "cannot split {n} samples across {k} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let idx = &order[start..start + size];
        start += size;
        let (f, l) = gather_rows(features, labels, idx);
        shards.push(Shard {
            client_id: format!("client-{i}"),
            features: f,
            labels: l,
            train: Vec::new(),
            test: Vec::new(),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(FederatedDataset { shards, classes })
}

/// Reorders the columns of a row-major matrix: output column `j` takes input
/// column `perm[j]`.
pub fn apply_permutation(features: &Tensor, perm: &[usize]) -> Tensor {
    let rows = features.shape()[0];
    let d = features.shape()[1];
    assert_eq!(perm.len(), d, "permutation length must match feature width");
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = &features.data()[r * d..(r + 1) * d];
        data.extend(perm.iter().map(|&p| row[p]));
    }
    Tensor::matrix(rows, d, data).expect("permutation preserves shape")
}

/// Applies an independent random fixed pixel permutation to every shard's
/// features. Labels and any train/test indices are untouched.
pub fn permute_pixels(mut dataset: FederatedDataset, rng: &mut ChaCha8Rng) -> FederatedDataset {
    let d = dataset.feature_dim();
    for shard in &mut dataset.shards {
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(rng);
        shard.features = apply_permutation(&shard.features, &perm);
    }
    dataset
}

// --- CSV ingestion --------------------------------------------------------

fn csv_error(path: &Path, err: &csv::Error) -> DataError {
    DataError::Csv {
        path: path.to_path_buf(),
        line: err.position().map_or(0, csv::Position::line),
        message: err.to_string(),
    }
}

/// Loads a pre-featurized dataset from CSV with header
/// `client_id,label,f_0,...,f_{d-1}`. Rows are grouped into shards by
/// `client_id` in order of first appearance.
pub fn load_csv_features(path: &Path) -> Result<FederatedDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, &e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    if headers.len() < 3 || &headers[0] != "client_id" || &headers[1] != "label" {
        return Err(DataError::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "header must start with client_id,label and at least one feature column, got {:?}",
                headers.iter().take(3).collect::<Vec<_>>()
            ),
        });
    }
    let d = headers.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(0, csv::Position::line);
        let parse_field = |idx: usize, what: &str| -> Result<f64, DataError> {
            record[idx].trim().parse::<f64>().map_err(|_| DataError::Csv {
                path: path.to_path_buf(),
                line,
                message: format!("{what} column {idx} is not numeric: {:?}", &record[idx]),
            })
        };
        let client = record[0].trim().to_string();
        let label = record[1].trim().parse::<usize>().map_err(|_| DataError::Csv {
            path: path.to_path_buf(),
            line,
            message: format!("label is not a class index: {:?}", &record[1]),
        })?;
        let entry = rows.entry(client.clone()).or_insert_with(|| {
            order.push(client.clone());
            (Vec::new(), Vec::new())
        });
        for j in 0..d {
            entry.0.push(parse_field(j + 2, "feature")?);
        }
        entry.1.push(label);
    }

    let mut shards = Vec::with_capacity(order.len());
    let mut classes = 0;
    for client in order {
        let (data, labels) = rows.remove(&client).expect("grouped above");
        classes = classes.max(labels.iter().max().map_or(0, |m| m + 1));
        let n = labels.len();
        shards.push(Shard {
            client_id: client,
            features: Tensor::matrix(n, d, data).expect("uniform row width enforced by reader"),
            labels,
            train: Vec::new(),
            test: Vec::new(),
        });
    }
    if shards.is_empty() {
        return Err(DataError::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "file contains a header but no data rows".into(),
        });
    }
    Ok(FederatedDataset { shards, classes })
}

/// Z-scores every feature using mean and standard deviation computed over
/// the union of all shards' *training* rows only, then applies that affine
/// map to every row (train and test). Constant features are centred but not
/// rescaled. No-op if no training rows exist yet.
pub fn standardize(dataset: &mut FederatedDataset) {
    let d = dataset.feature_dim();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for shard in &dataset.shards {
        for &r in &shard.train {
            for (j, s) in sum.iter_mut().enumerate() {
                *s += shard.features.data()[r * d + j];
            }
        }
        count += shard.train.len();
    }
    if count == 0 {
        return;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = vec![0.0; d];
    for shard in &dataset.shards {
        for &r in &shard.train {
            for (j, s) in ss.iter_mut().enumerate() {
                let x = shard.features.data()[r * d + j] - mean[j];
                *s += x * x;
            }
        }
    }
    let std: Vec<f64> = ss
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < 1e-12 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    for shard in &mut dataset.shards {
        let rows = shard.len();
        let data = shard.features.data_mut();
        for r in 0..rows {
            for j in 0..d {
                let x = &mut data[r * d + j];
                *x = (*x - mean[j]) / std[j];
            }
        }
    }
}

// --- Synthetic heterogeneous generator ------------------------------------

/// Per-client Gaussian class prototypes. One shared set of `classes`
/// prototype vectors is drawn with entries `N(0, separation²)`; client `i`
/// places class `c` at `(1 − tau) * shared[c] + tau * shared[(c + i) %
/// classes]`. At `tau = 0` every client shares the identical generative
/// distribution; at `tau = 1` each client labels the same well-separated
/// regions by its own rotation of the class set, so the clients' tasks
/// genuinely conflict and no single shared model can satisfy them all.
/// Within-client prototype geometry (and hence per-client difficulty) is
/// the same at every `tau`; layouts repeat only when `k` exceeds `classes`.
/// Returns `k × classes` prototype vectors of length `d`.
pub(crate) fn class_prototypes(
    k: usize,
    d: usize,
    classes: usize,
    tau: f64,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    let shared: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    (0..k)
        .map(|i| {
            (0..classes)
                .map(|c| {
                    shared[c]
                        .iter()
                        .zip(&shared[(c + i) % classes])
                        .map(|(s, o)| (1.0 - tau) * s + tau * o)
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Synthesizes a `k`-client dataset with `n_per_client` samples each:
/// balanced labels, features drawn around τ-interpolated class prototypes
/// with isotropic noise. See [`class_prototypes`] for the heterogeneity
/// model.
pub fn synth_noniid(
    k: usize,
    d: usize,
    classes: usize,
    n_per_client: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> FederatedDataset {
    synth_noniid_with(k, d, classes, n_per_client, tau, 1.0, 0.5, rng)
}

/// [`synth_noniid`] with explicit prototype scale and sample noise.
#[allow(clippy::too_many_arguments)]
pub fn synth_noniid_with(
    k: usize,
    d: usize,
    classes: usize,
    n_per_client: usize,
    tau: f64,
    separation: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> FederatedDataset {
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1], got {tau}");
    assert!(classes >= 1, "need at least one class");
    let prototypes = class_prototypes(k, d, classes, tau, separation, rng);
    let shards = prototypes
        .into_iter()
        .enumerate()
        .map(|(i, protos)| {
            let mut data = Vec::with_capacity(n_per_client * d);
            let mut labels = Vec::with_capacity(n_per_client);
            for row in 0..n_per_client {
                let c = row % classes;
                labels.push(c);
                data.extend(
                    protos[c]
                        .iter()
                        .map(|p| p + noise * rng.sample::<f64, _>(StandardNormal)),
                );
            }
            Shard {
                client_id: format!("client-{i}"),
                features: Tensor::matrix(n_per_client, d, data)
                    .expect("generated rows have uniform width"),
                labels,
                train: Vec::new(),
                test: Vec::new(),
            }
        })
        .collect();
    FederatedDataset { shards, classes }
}

// --- Train/test splitting --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Per-class largest-remainder allocation: the test set hits the target
    /// size exactly while tracking each class's share as closely as possible.
    #[default]
    Stratified,
    /// Uniform random selection of the test rows.
    Random,
}

/// Fills every shard's train/test index sets with a fresh random split.
/// The test size is `round(N · fraction)` clamped so both sides are
/// non-empty (single-row shards keep their row in train). Deterministic in
/// `seed`; index sets come back sorted.
pub fn split(
    mut dataset: FederatedDataset,
    test_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<FederatedDataset, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidSpec(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for shard in &mut dataset.shards {
        let (train, test) = split_indices(&shard.labels, test_fraction, mode, &mut rng);
        shard.train = train;
        shard.test = test;
    }
    Ok(dataset)
}

fn split_indices(
    labels: &[usize],
    fraction: f64,
    mode: SplitMode,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    if n <= 1 {
        return ((0..n).collect(), Vec::new());
    }
    let target = ((n as f64) * fraction).round() as usize;
    let target = target.clamp(1, n - 1);
    let mut test: Vec<usize> = match mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.truncate(target);
            order
        }
        SplitMode::Stratified => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                by_class.entry(l).or_default().push(i);
            }
            for members in by_class.values_mut() {
                members.shuffle(rng);
            }
            // Integer quota per class: floor share first, then hand the
            // remaining slots to the classes with the largest fractional
            // share, preferring classes that keep at least one training row.
            let mut quotas: Vec<(usize, usize, f64)> = by_class
                .iter()
                .map(|(&c, members)| {
                    let exact = members.len() as f64 * fraction;
                    (c, exact.floor() as usize, exact.fract())
                })
                .collect();
            let mut leftover = target.saturating_sub(quotas.iter().map(|q| q.1).sum());
            let mut priority: Vec<usize> = (0..quotas.len()).collect();
            priority.sort_by(|&a, &b| {
                let keeps = |i: usize| quotas[i].1 + 1 < by_class[&quotas[i].0].len();
                keeps(b)
                    .cmp(&keeps(a))
                    .then(quotas[b].2.total_cmp(&quotas[a].2))
                    .then(quotas[a].0.cmp(&quotas[b].0))
            });
            for &i in &priority {
                if leftover == 0 {
                    break;
                }
                if quotas[i].1 < by_class[&quotas[i].0].len() {
                    quotas[i].1 += 1;
                    leftover -= 1;
                }
            }
            let mut test = Vec::with_capacity(target);
            for (c, quota, _) in quotas {
                test.extend_from_slice(&by_class[&c][..quota]);
            }
            test
        }
    };
    test.sort_unstable();
    debug_assert_eq!(test.len(), target, "test allocation must hit the target");
    let mut in_test = vec![false; n];
    for &r in &test {
        in_test[r] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&r| !in_test[r]).collect();
    (train, test)
}

// --- Declarative dataset construction --------------------------------------

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.5
}

fn default_test_fraction() -> f64 {
    0.25
}

/// Where the raw samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Source {
    /// Big-endian IDX image/label file pair, sharded IID across clients.
    IdxImage { images: PathBuf, labels: PathBuf },
    /// Pre-featurized CSV with natural per-client grouping.
    Csv {
        path: PathBuf,
        /// Z-score features using training-set statistics after splitting.
        #[serde(default)]
        standardize: bool,
    },
    /// Synthetic Gaussian-prototype generator.
    Synthetic {
        features: usize,
        classes: usize,
        per_client: usize,
        /// Client heterogeneity in `[0, 1]`: 0 = IID, 1 = fully client-specific.
        heterogeneity: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

/// Optional per-shard feature transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    #[default]
    None,
    /// Independent fixed pixel permutation per client.
    PermutePixels,
}

/// Declarative recipe for a federated dataset; the one-stop entry point used
/// by experiment configs. `load` runs source → subsample → transform → split
/// (→ standardization for CSV sources that request it), all deterministic in
/// `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    #[serde(default)]
    pub transform: Transform,
    pub clients: usize,
    /// Per-client sample cap applied before splitting.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients == 0 {
            return Err(DataError::InvalidSpec("need at least one client".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "test fraction must lie strictly between 0 and 1, got {}",
                self.test_fraction
            )));
        }
        if let Some(0) = self.subsample {
            return Err(DataError::InvalidSpec("subsample cap must be positive".into()));
        }
        if let Source::Synthetic {
            features,
            classes,
            per_client,
            heterogeneity,
            separation,
            noise,
        } = &self.source
        {
            if *features == 0 || *classes == 0 || *per_client == 0 {
                return Err(DataError::InvalidSpec(
                    "synthetic features, classes, and per_client must be positive".into(),
                ));
            }
            if !(0.0..=1.0).contains(heterogeneity) {
                return Err(DataError::InvalidSpec(format!(
                    "heterogeneity must lie in [0, 1], got {heterogeneity}"
                )));
            }
            for (name, v) in [("separation", separation), ("noise", noise)] {
                if !v.is_finite() || *v < 0.0 {
                    return Err(DataError::InvalidSpec(format!(
                        "{name} must be finite and non-negative, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the dataset this spec describes.
    pub fn load(&self) -> Result<FederatedDataset, DataError> {
        self.validate()?;
        let mut source_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0));
        let mut dataset = match &self.source {
            Source::IdxImage { images, labels } => {
                let (features, labels) = load_idx(images, labels)?;
                shard_iid(&features, &labels, self.clients, &mut source_rng)?
            }
            Source::Csv { path, .. } => {
                let dataset = load_csv_features(path)?;
                if dataset.num_clients() != self.clients {
                    return Err(DataError::InvalidSpec(format!(
                        "csv file groups into {} clients but the configuration says {}",
                        dataset.num_clients(),
                        self.clients
                    )));
                }
                dataset
            }
            Source::Synthetic {
                features,
                classes,
                per_client,
                heterogeneity,
                separation,
                noise,
            } => synth_noniid_with(
                self.clients,
                *features,
                *classes,
                *per_client,
                *heterogeneity,
                *separation,
                *noise,
                &mut source_rng,
            ),
        };
        if let Some(cap) = self.subsample {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 1));
            for shard in &mut dataset.shards {
                subsample_shard(shard, cap, &mut rng);
            }
        }
        if self.transform == Transform::PermutePixels {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2));
            dataset = permute_pixels(dataset, &mut rng);
        }
        let mut dataset = split(dataset, self.test_fraction, derive_seed(self.seed, 3), self.split)?;
        if let Source::Csv {
            standardize: true, ..
        } = &self.source
        {
            standardize(&mut dataset);
        }
        dataset.validate()?;
        Ok(dataset)
    }
}

fn subsample_shard(shard: &mut Shard, cap: usize, rng: &mut ChaCha8Rng) {
    if shard.len() <= cap {
        return;
    }
    let mut keep = rand::seq::index::sample(rng, shard.len(), cap).into_vec();
    keep.sort_unstable();
    let (features, labels) = gather_rows(&shard.features, &shard.labels, &keep);
    shard.features = features;
    shard.labels = labels;
    shard.train.clear();
    shard.test.clear();
}
