//! Source-model attribution: a multi-class classifier over artifact
//! vectors, with label 0 reserved for the real class and 1..M for the
//! generators in input order.
//!
//! The classifier is a small feed-forward network (one tanh hidden layer
//! by default, or plain multinomial logistic regression) trained with
//! mini-batch gradient descent plus momentum. Training runs in f64 and
//! checkpoints f32. Reproducibility is taken seriously: split assignment
//! and sample order are derived from row content, not input order, and
//! gradient accumulation reduces over fixed-size chunks in a fixed
//! order, so one run equals the next bit for bit, whatever the thread
//! count.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{artifact_matrix, Fingerprint};
use crate::fpte;
use crate::matrix::FeatureMatrix;
use crate::stream::named_stream;

const SPLIT_WEIGHTS: [(Split, f64); 3] = [
    (Split::Train, 0.7),
    (Split::Val, 0.2),
    (Split::Test, 0.1),
];
const MIN_CLASS_SIZE: usize = 10;
const GRAD_CHUNK: usize = 32;

// ---------------------------------------------------------------------
// Labeled datasets and the stratified split
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: FeatureMatrix,
    labels: Vec<usize>,
    label_names: Vec<String>,
    split_assignment: Vec<Split>,
}

/// Largest-remainder apportionment of `n` into the 7:2:1 split.
fn split_quotas(n: usize) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for (i, (_, w)) in SPLIT_WEIGHTS.iter().enumerate() {
        let exact = n as f64 * w;
        let floor = exact.floor() as usize;
        counts[i] = floor;
        assigned += floor;
        remainders.push((i, exact - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().cycle().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn canonical_class_order(features: &FeatureMatrix, indices: &mut [usize]) {
    indices.sort_by(|&i, &j| {
        let (a, b) = (features.row(i), features.row(j));
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        i.cmp(&j)
    });
}

impl LabeledDataset {
    /// Builds a labeled dataset from one feature matrix per class, in
    /// label order. The 7:2:1 split is stratified per class and derived
    /// from row content: each class is put into a canonical order, then
    /// shuffled by a per-class stream of `seed`, so the same data split
    /// the same way no matter how the rows were arranged.
    pub fn from_classes(classes: &[(String, FeatureMatrix)], seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "attribution needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let dim = classes[0].1.dim();
        let mut names = Vec::new();
        for (name, m) in classes {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: m.dim(),
                });
            }
            if m.rows() < MIN_CLASS_SIZE {
                return Err(Error::ClassTooSmall {
                    label: name.clone(),
                    count: m.rows(),
                    needed: MIN_CLASS_SIZE,
                });
            }
            if names.contains(name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate class label {name:?}"
                )));
            }
            names.push(name.clone());
        }

        let mut features = classes[0].1.clone();
        let mut labels = vec![0usize; classes[0].1.rows()];
        for (i, (_, m)) in classes.iter().enumerate().skip(1) {
            features = features.vstack(m)?;
            labels.extend(std::iter::repeat(i).take(m.rows()));
        }

        let mut split_assignment = vec![Split::Train; labels.len()];
        for (class_id, (name, _)) in classes.iter().enumerate() {
            let mut idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == class_id)
                .collect();
            canonical_class_order(&features, &mut idx);
            let mut rng = named_stream(seed, &format!("split:{name}"));
            idx.shuffle(&mut rng);
            let [n_train, n_val, _] = split_quotas(idx.len());
            for (pos, &i) in idx.iter().enumerate() {
                split_assignment[i] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        Ok(Self {
            features,
            labels,
            label_names: names,
            split_assignment,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn split_assignment(&self) -> &[Split] {
        &self.split_assignment
    }

    /// Indices of one split in canonical (label, content) order, so
    /// every consumer walks the same sequence regardless of row order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.labels.len())
            .filter(|&i| self.split_assignment[i] == split)
            .collect();
        idx.sort_by(|&i, &j| {
            self.labels[i].cmp(&self.labels[j]).then_with(|| {
                let (a, b) = (self.features.row(i), self.features.row(j));
                for (x, y) in a.iter().zip(b) {
                    match x.total_cmp(y) {
                        std::cmp::Ordering::Equal => continue,
                        other => return other,
                    }
                }
                i.cmp(&j)
            })
        });
        idx
    }
}

/// Dataset over artifact vectors: label 0 is the real class, label i+1
/// the i-th generator fingerprint in input order.
pub fn build_dataset(
    fingerprints: &[Fingerprint],
    real_artifacts: &Fingerprint,
    seed: u64,
) -> Result<LabeledDataset> {
    if fingerprints.is_empty() {
        return Err(Error::EmptySet {
            what: "generator fingerprints",
        });
    }
    let mut classes = Vec::with_capacity(fingerprints.len() + 1);
    let (real_matrix, _) = artifact_matrix(real_artifacts)?;
    classes.push((real_artifacts.source_label.clone(), real_matrix));
    for fp in fingerprints {
        if fp.space_tag != real_artifacts.space_tag {
            return Err(Error::InvalidConfig(format!(
                "fingerprint {:?} is tagged {}, real artifacts are {}",
                fp.source_label, fp.space_tag, real_artifacts.space_tag
            )));
        }
        let (m, _) = artifact_matrix(fp)?;
        classes.push((fp.source_label.clone(), m));
    }
    LabeledDataset::from_classes(&classes, seed)
}

// ---------------------------------------------------------------------
// Model and training
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden width; `None` is plain multinomial logistic regression.
    pub hidden: Option<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        let (d, k) = (self.input_dim, self.num_classes);
        match self.hidden {
            Some(h) => h * d + h + k * h + k,
            None => k * d + k,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional per-class loss weights, length = number of classes.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: Some(256),
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttributionModel {
    pub architecture: Architecture,
    pub parameters: Vec<f32>,
    pub label_names: Vec<String>,
    pub seed: u64,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
}

/// Forward pass for one sample; fills `hidden_buf` (if the architecture
/// has a hidden layer) and `logits`.
fn forward(
    arch: &Architecture,
    params: &[f64],
    x: &[f32],
    hidden_buf: &mut [f64],
    logits: &mut [f64],
) {
    let (d, k) = (arch.input_dim, arch.num_classes);
    match arch.hidden {
        Some(h) => {
            let (w1, rest) = params.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(k * h);
            for i in 0..h {
                let mut z = b1[i];
                let row = &w1[i * d..(i + 1) * d];
                for j in 0..d {
                    z += row[j] * x[j] as f64;
                }
                hidden_buf[i] = z.tanh();
            }
            for c in 0..k {
                let mut z = b2[c];
                let row = &w2[c * h..(c + 1) * h];
                for i in 0..h {
                    z += row[i] * hidden_buf[i];
                }
                logits[c] = z;
            }
        }
        None => {
            let (w, b) = params.split_at(k * d);
            for c in 0..k {
                let mut z = b[c];
                let row = &w[c * d..(c + 1) * d];
                for j in 0..d {
                    z += row[j] * x[j] as f64;
                }
                logits[c] = z;
            }
        }
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - m).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

/// Mean weighted cross-entropy over the given samples and its gradient
/// with respect to `params`. Samples are visited in the order given;
/// the result is a pure function of (arch, params, data, order).
pub fn loss_and_gradient(
    arch: &Architecture,
    params: &[f64],
    features: &FeatureMatrix,
    labels: &[usize],
    sample_indices: &[usize],
    class_weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let (d, k) = (arch.input_dim, arch.num_classes);
    let h = arch.hidden.unwrap_or(0);
    let mut grad = vec![0.0f64; arch.param_count()];
    let mut loss = 0.0f64;
    let mut hidden = vec![0.0f64; h];
    let mut logits = vec![0.0f64; k];

    for &si in sample_indices {
        let x = features.row(si);
        let y = labels[si];
        let w = class_weights.map_or(1.0, |cw| cw[y]);
        forward(arch, params, x, &mut hidden, &mut logits);
        softmax_in_place(&mut logits);
        loss += -logits[y].ln() * w;

        // dz = (p - onehot(y)) * w
        logits[y] -= 1.0;
        for z in logits.iter_mut() {
            *z *= w;
        }
        match arch.hidden {
            Some(h) => {
                let (w1_len, b1_len) = (h * d, h);
                let w2_off = w1_len + b1_len;
                let b2_off = w2_off + k * h;
                let w2 = &params[w2_off..b2_off];
                // Output layer gradients and the pull-back onto the
                // hidden activations.
                let mut dhidden = vec![0.0f64; h];
                for c in 0..k {
                    let dz = logits[c];
                    grad[b2_off + c] += dz;
                    for i in 0..h {
                        grad[w2_off + c * h + i] += dz * hidden[i];
                        dhidden[i] += dz * w2[c * h + i];
                    }
                }
                for i in 0..h {
                    let dpre = dhidden[i] * (1.0 - hidden[i] * hidden[i]);
                    grad[w1_len + i] += dpre;
                    for j in 0..d {
                        grad[i * d + j] += dpre * x[j] as f64;
                    }
                }
            }
            None => {
                let b_off = k * d;
                for c in 0..k {
                    let dz = logits[c];
                    grad[b_off + c] += dz;
                    for j in 0..d {
                        grad[c * d + j] += dz * x[j] as f64;
                    }
                }
            }
        }
    }
    let scale = 1.0 / sample_indices.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    (loss * scale, grad)
}

/// Batch loss/gradient with thread fan-out: the batch is cut into
/// fixed-size chunks, each chunk reduces sequentially, and chunk results
/// fold in chunk order. The reduction tree is a function of the batch
/// alone, so results do not depend on the thread count.
fn batch_loss_and_gradient(
    arch: &Architecture,
    params: &[f64],
    features: &FeatureMatrix,
    labels: &[usize],
    batch: &[usize],
    class_weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| loss_and_gradient(arch, params, features, labels, chunk, class_weights))
        .collect();
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; arch.param_count()];
    for (chunk_i, (l, g)) in partials.iter().enumerate() {
        let chunk_len = batch[chunk_i * GRAD_CHUNK..]
            .len()
            .min(GRAD_CHUNK) as f64;
        let w = chunk_len / batch.len() as f64;
        loss += l * w;
        for (acc, &v) in grad.iter_mut().zip(g) {
            *acc += v * w;
        }
    }
    (loss, grad)
}

fn init_params(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng = named_stream(seed, "attributor-init");
    let mut params = vec![0.0f64; arch.param_count()];
    let (d, k) = (arch.input_dim, arch.num_classes);
    let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for p in slice.iter_mut() {
            *p = rng.random_range(-bound..bound);
        }
    };
    match arch.hidden {
        Some(h) => {
            let (w1, rest) = params.split_at_mut(h * d);
            fill(w1, d, h);
            let (_b1, rest) = rest.split_at_mut(h);
            let (w2, _b2) = rest.split_at_mut(k * h);
            fill(w2, h, k);
        }
        None => {
            let (w, _b) = params.split_at_mut(k * d);
            fill(w, d, k);
        }
    }
    params
}

fn accuracy_with_params(
    arch: &Architecture,
    params: &[f64],
    features: &FeatureMatrix,
    labels: &[usize],
    indices: &[usize],
) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let h = arch.hidden.unwrap_or(0);
    let correct: usize = indices
        .par_iter()
        .filter(|&&i| {
            let mut hidden = vec![0.0f64; h];
            let mut logits = vec![0.0f64; arch.num_classes];
            forward(arch, params, features.row(i), &mut hidden, &mut logits);
            argmax_first(&logits) == labels[i]
        })
        .count();
    correct as f64 / indices.len() as f64
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains the attributor on the Train split, tracking Val accuracy per
/// epoch and returning the parameters of the best Val epoch (earliest on
/// ties).
pub fn train(dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<AttributionModel> {
    if cfg.learning_rate <= 0.0 || !cfg.learning_rate.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidConfig(format!(
            "momentum must lie in [0,1), got {}",
            cfg.momentum
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "batch size and epochs must be positive".into(),
        ));
    }
    if let Some(h) = cfg.hidden {
        if h == 0 {
            return Err(Error::InvalidConfig(
                "hidden width must be positive; use None for the linear model".into(),
            ));
        }
    }
    let k = dataset.num_classes();
    if let Some(cw) = &cfg.class_weights {
        if cw.len() != k {
            return Err(Error::LabelLengthMismatch {
                rows: k,
                labels: cw.len(),
            });
        }
        if cw.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
    }

    let arch = Architecture {
        input_dim: dataset.features().dim(),
        hidden: cfg.hidden,
        num_classes: k,
    };
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    let mut seen = vec![false; k];
    for &i in &train_idx {
        seen[dataset.labels()[i]] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::ClassTooSmall {
            label: dataset.label_names()[missing].clone(),
            count: 0,
            needed: 1,
        });
    }

    let mut params = init_params(&arch, cfg.seed);
    let mut velocity = vec![0.0f64; params.len()];
    let mut epoch_rng = named_stream(cfg.seed, "epoch-shuffle");
    let weights = cfg.class_weights.as_deref();

    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_loss_and_gradient(
                &arch,
                &params,
                dataset.features(),
                dataset.labels(),
                batch,
                weights,
            );
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            for ((p, v), &g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
        }
        train_curve.push(epoch_loss / order.len() as f64);

        let val_acc =
            accuracy_with_params(&arch, &params, dataset.features(), dataset.labels(), &val_idx);
        val_curve.push(val_acc);
        if val_acc > best.0 {
            best = (val_acc, epoch, params.clone());
        }
    }

    Ok(AttributionModel {
        architecture: arch,
        parameters: best.2.iter().map(|&p| p as f32).collect(),
        label_names: dataset.label_names().to_vec(),
        seed: cfg.seed,
        epochs_trained: cfg.epochs,
        best_epoch: best.1,
        train_curve,
        val_curve,
    })
}

// ---------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------

impl AttributionModel {
    fn params_f64(&self) -> Vec<f64> {
        self.parameters.iter().map(|&p| p as f64).collect()
    }

    /// Per-row predicted label (argmax, ties to the smallest label) and
    /// the full probability vector.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<(usize, Vec<f32>)>> {
        if features.dim() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.architecture.input_dim,
                actual: features.dim(),
            });
        }
        let params = self.params_f64();
        let arch = self.architecture;
        let h = arch.hidden.unwrap_or(0);
        Ok((0..features.rows())
            .into_par_iter()
            .map(|i| {
                let mut hidden = vec![0.0f64; h];
                let mut logits = vec![0.0f64; arch.num_classes];
                forward(&arch, &params, features.row(i), &mut hidden, &mut logits);
                softmax_in_place(&mut logits);
                let label = argmax_first(&logits);
                (label, logits.iter().map(|&p| p as f32).collect())
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Rows are true labels, columns predicted labels.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Accuracy and confusion over one split of the dataset.
pub fn evaluate(
    model: &AttributionModel,
    dataset: &LabeledDataset,
    split: Split,
) -> Result<EvalReport> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySet { what: "split" });
    }
    let selected = dataset.features().select_rows(&idx);
    let predictions = model.predict(&selected)?;
    let k = model.architecture.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (pos, &i) in idx.iter().enumerate() {
        let truth = dataset.labels()[i];
        let pred = predictions[pos].0;
        confusion[truth][pred] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / idx.len() as f64,
        per_class_accuracy,
        confusion,
        total: idx.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub accuracy: f64,
    pub mapped: usize,
    pub excluded: usize,
}

/// Evaluates the model on the Test split of a different dataset whose
/// class names map onto the model's. Unmapped classes are excluded and
/// counted; prediction is correct when the predicted model class equals
/// the mapped name of the true class.
pub fn cross_evaluate(
    model: &AttributionModel,
    other: &LabeledDataset,
    label_map: &BTreeMap<String, String>,
) -> Result<CrossEvalReport> {
    let mut to_model_label: Vec<Option<usize>> = Vec::with_capacity(other.num_classes());
    for name in other.label_names() {
        let target = label_map
            .get(name)
            .and_then(|t| model.label_names.iter().position(|m| m == t));
        to_model_label.push(target);
    }
    let idx = other.split_indices(Split::Test);
    let mut mapped_idx = Vec::new();
    let mut excluded = 0usize;
    for &i in &idx {
        if to_model_label[other.labels()[i]].is_some() {
            mapped_idx.push(i);
        } else {
            excluded += 1;
        }
    }
    if mapped_idx.is_empty() {
        return Err(Error::EmptySet {
            what: "mapped cross-evaluation samples",
        });
    }
    let selected = other.features().select_rows(&mapped_idx);
    let predictions = model.predict(&selected)?;
    let correct = mapped_idx
        .iter()
        .zip(&predictions)
        .filter(|(&i, (pred, _))| to_model_label[other.labels()[i]] == Some(*pred))
        .count();
    Ok(CrossEvalReport {
        accuracy: correct as f64 / mapped_idx.len() as f64,
        mapped: mapped_idx.len(),
        excluded,
    })
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    label_names: Vec<String>,
    seed: u64,
    epochs_trained: usize,
    best_epoch: usize,
    train_curve: Vec<f64>,
    val_curve: Vec<f64>,
}

impl AttributionModel {
    /// Writes `<path>` (JSON header) and `<path>.params.fpte`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            architecture: self.architecture,
            label_names: self.label_names.clone(),
            seed: self.seed,
            epochs_trained: self.epochs_trained,
            best_epoch: self.best_epoch,
            train_curve: self.train_curve.clone(),
            val_curve: self.val_curve.clone(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        let blob = FeatureMatrix::new(1, self.parameters.len(), self.parameters.clone())?;
        fpte::write_matrix(&params_path(path), &blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let blob = fpte::read_matrix(&params_path(path))?;
        let parameters = blob.into_data();
        if parameters.len() != header.architecture.param_count() {
            return Err(Error::ManifestMismatch {
                detail: format!(
                    "checkpoint holds {} parameters, architecture wants {}",
                    parameters.len(),
                    header.architecture.param_count()
                ),
            });
        }
        Ok(Self {
            architecture: header.architecture,
            parameters,
            label_names: header.label_names,
            seed: header.seed,
            epochs_trained: header.epochs_trained,
            best_epoch: header.best_epoch,
            train_curve: header.train_curve,
            val_curve: header.val_curve,
        })
    }
}

fn params_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".params.fpte");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blob_rows(seed: u64, n: usize, center: &[f64]) -> Vec<Vec<f32>> {
        let mut rng = named_stream(seed, "test-blob");
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (c + z) as f32
                    })
                    .collect()
            })
            .collect()
    }

    fn two_blob_dataset(seed: u64, n_per_class: usize, sep: f64) -> LabeledDataset {
        let a = blob_rows(seed, n_per_class, &[-sep, -sep]);
        let b = blob_rows(seed + 1, n_per_class, &[sep, sep]);
        LabeledDataset::from_classes(
            &[
                ("real".into(), FeatureMatrix::from_rows(&a).unwrap()),
                ("gen-a".into(), FeatureMatrix::from_rows(&b).unwrap()),
            ],
            seed,
        )
        .unwrap()
    }

    fn split_counts(ds: &LabeledDataset, class: usize) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for (i, &s) in ds.split_assignment().iter().enumerate() {
            if ds.labels()[i] != class {
                continue;
            }
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    #[test]
    fn hundred_samples_split_seventy_twenty_ten() {
        let ds = two_blob_dataset(0, 100, 5.0);
        for class in 0..2 {
            assert_eq!(split_counts(&ds, class), (70, 20, 10));
        }
    }

    #[test]
    fn fifty_seven_samples_follow_largest_remainder() {
        // 57 * (0.7, 0.2, 0.1) = (39.9, 11.4, 5.7): floors (39, 11, 5),
        // two leftovers go to the largest remainders .9 and .7.
        assert_eq!(split_quotas(57), [40, 11, 6]);
        assert_eq!(split_quotas(100), [70, 20, 10]);
        assert_eq!(split_quotas(10), [7, 2, 1]);

        let rows = blob_rows(3, 57, &[0.0, 0.0]);
        let other = blob_rows(4, 57, &[3.0, 3.0]);
        let third = blob_rows(5, 57, &[-3.0, 3.0]);
        let ds = LabeledDataset::from_classes(
            &[
                ("a".into(), FeatureMatrix::from_rows(&rows).unwrap()),
                ("b".into(), FeatureMatrix::from_rows(&other).unwrap()),
                ("c".into(), FeatureMatrix::from_rows(&third).unwrap()),
            ],
            9,
        )
        .unwrap();
        for class in 0..3 {
            assert_eq!(split_counts(&ds, class), (40, 11, 6));
        }
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let a = two_blob_dataset(7, 40, 2.0);
        let b = two_blob_dataset(7, 40, 2.0);
        assert_eq!(a.split_assignment(), b.split_assignment());
    }

    #[test]
    fn tiny_classes_are_rejected() {
        let rows = blob_rows(8, 9, &[0.0]);
        let other = blob_rows(9, 20, &[1.0]);
        let err = LabeledDataset::from_classes(
            &[
                ("a".into(), FeatureMatrix::from_rows(&rows).unwrap()),
                ("b".into(), FeatureMatrix::from_rows(&other).unwrap()),
            ],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { count: 9, .. }));
    }

    #[test]
    fn mismatched_dims_and_single_class_are_rejected() {
        let a = FeatureMatrix::from_rows(&blob_rows(10, 12, &[0.0, 0.0])).unwrap();
        let b = FeatureMatrix::from_rows(&blob_rows(11, 12, &[0.0])).unwrap();
        assert!(matches!(
            LabeledDataset::from_classes(&[("a".into(), a.clone()), ("b".into(), b)], 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            LabeledDataset::from_classes(&[("a".into(), a)], 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    // -----------------------------------------------------------------
    // Gradient oracle: central finite differences of the loss.
    // -----------------------------------------------------------------
    fn finite_difference_gradient(
        arch: &Architecture,
        params: &[f64],
        features: &FeatureMatrix,
        labels: &[usize],
        indices: &[usize],
    ) -> Vec<f64> {
        let eps = 1e-5;
        let mut fd = vec![0.0f64; params.len()];
        let mut work = params.to_vec();
        for p in 0..params.len() {
            work[p] = params[p] + eps;
            let (lp, _) = loss_and_gradient(arch, &work, features, labels, indices, None);
            work[p] = params[p] - eps;
            let (lm, _) = loss_and_gradient(arch, &work, features, labels, indices, None);
            work[p] = params[p];
            fd[p] = (lp - lm) / (2.0 * eps);
        }
        fd
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = named_stream(0, "grad-check");
        for case in 0..12 {
            let d = rng.random_range(1..=8usize);
            let k = rng.random_range(2..=3usize);
            let n = rng.random_range(2..=20usize);
            let hidden = if case % 2 == 0 { Some(rng.random_range(1..=6)) } else { None };
            let arch = Architecture {
                input_dim: d,
                hidden,
                num_classes: k,
            };
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z as f32
                        })
                        .collect()
                })
                .collect();
            let features = FeatureMatrix::from_rows(&rows).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let params: Vec<f64> = (0..arch.param_count())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let indices: Vec<usize> = (0..n).collect();
            let (_, analytic) =
                loss_and_gradient(&arch, &params, &features, &labels, &indices, None);
            let numeric =
                finite_difference_gradient(&arch, &params, &features, &labels, &indices);
            for (a, b) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3),
                    "gradient mismatch: analytic {a}, numeric {b}"
                );
            }
        }
    }

    #[test]
    fn separable_blobs_reach_high_test_accuracy() {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let ds = two_blob_dataset(seed * 100, 200, 5.0);
            let cfg = TrainConfig {
                seed,
                epochs: 40,
                ..TrainConfig::default()
            };
            let model = train(&ds, &cfg).unwrap();
            total += evaluate(&model, &ds, Split::Test).unwrap().accuracy;
        }
        let mean = total / 5.0;
        assert!(mean >= 0.99, "separable blobs should classify, got {mean}");
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let mut total = 0.0;
        for seed in 0..3u64 {
            let a = blob_rows(seed * 7 + 1, 250, &[-3.0, -3.0]);
            let b = blob_rows(seed * 7 + 2, 250, &[3.0, 3.0]);
            // Interleave so both "classes" mix both blobs: labels carry
            // no signal at all.
            let mut mixed_a = Vec::new();
            let mut mixed_b = Vec::new();
            for i in 0..250 {
                if i % 2 == 0 {
                    mixed_a.push(a[i].clone());
                    mixed_b.push(b[i].clone());
                } else {
                    mixed_a.push(b[i].clone());
                    mixed_b.push(a[i].clone());
                }
            }
            let ds = LabeledDataset::from_classes(
                &[
                    ("x".into(), FeatureMatrix::from_rows(&mixed_a).unwrap()),
                    ("y".into(), FeatureMatrix::from_rows(&mixed_b).unwrap()),
                ],
                seed,
            )
            .unwrap();
            let cfg = TrainConfig {
                seed,
                epochs: 30,
                ..TrainConfig::default()
            };
            let model = train(&ds, &cfg).unwrap();
            total += evaluate(&model, &ds, Split::Test).unwrap().accuracy;
        }
        let mean = total / 3.0;
        assert!(
            (0.4..=0.6).contains(&mean),
            "label-free data should sit near 1/2, got {mean}"
        );
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities_and_label_zero() {
        let arch = Architecture {
            input_dim: 3,
            hidden: None,
            num_classes: 4,
        };
        let model = AttributionModel {
            architecture: arch,
            parameters: vec![0.0; arch.param_count()],
            label_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            seed: 0,
            epochs_trained: 0,
            best_epoch: 0,
            train_curve: vec![],
            val_curve: vec![],
        };
        let features = FeatureMatrix::from_rows(&blob_rows(12, 5, &[0.0, 0.0, 0.0])).unwrap();
        for (label, probs) in model.predict(&features).unwrap() {
            assert_eq!(label, 0, "all-equal logits must fall to the smallest label");
            for &p in &probs {
                assert!((p - 0.25).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let ds = two_blob_dataset(13, 30, 1.0);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        for (_, probs) in model.predict(ds.features()).unwrap() {
            let total: f64 = probs.iter().map(|&p| p as f64).sum();
            assert!((total - 1.0).abs() <= 1e-5, "row sums to {total}");
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hand_built_sign_classifier_is_perfect() {
        let arch = Architecture {
            input_dim: 1,
            hidden: None,
            num_classes: 2,
        };
        // Logits (-10x, 10x): positive x predicts class 1.
        let model = AttributionModel {
            architecture: arch,
            parameters: vec![-10.0, 10.0, 0.0, 0.0],
            label_names: vec!["neg".into(), "pos".into()],
            seed: 0,
            epochs_trained: 0,
            best_epoch: 0,
            train_curve: vec![],
            val_curve: vec![],
        };
        let neg: Vec<Vec<f32>> = (0..20).map(|i| vec![-1.0 - i as f32 * 0.1]).collect();
        let pos: Vec<Vec<f32>> = (0..20).map(|i| vec![1.0 + i as f32 * 0.1]).collect();
        let ds = LabeledDataset::from_classes(
            &[
                ("neg".into(), FeatureMatrix::from_rows(&neg).unwrap()),
                ("pos".into(), FeatureMatrix::from_rows(&pos).unwrap()),
            ],
            0,
        )
        .unwrap();
        let report = evaluate(&model, &ds, Split::Test).unwrap();
        assert_eq!(report.accuracy, 1.0);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(c, 0, "off-diagonal confusion at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_classes() {
        let arch = Architecture {
            input_dim: 2,
            hidden: None,
            num_classes: 2,
        };
        let model = AttributionModel {
            architecture: arch,
            parameters: vec![0.0; arch.param_count()],
            label_names: vec!["a".into(), "b".into()],
            seed: 0,
            epochs_trained: 0,
            best_epoch: 0,
            train_curve: vec![],
            val_curve: vec![],
        };
        let ds = two_blob_dataset(14, 100, 3.0);
        let report = evaluate(&model, &ds, Split::Test).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.total, 20);
    }

    #[test]
    fn confusion_matrix_totals_equal_split_sizes() {
        let ds = two_blob_dataset(15, 50, 0.5);
        let mut rng = named_stream(16, "random-models");
        for _ in 0..5 {
            let arch = Architecture {
                input_dim: 2,
                hidden: Some(4),
                num_classes: 2,
            };
            let params: Vec<f32> = (0..arch.param_count())
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            let model = AttributionModel {
                architecture: arch,
                parameters: params,
                label_names: vec!["real".into(), "gen-a".into()],
                seed: 0,
                epochs_trained: 0,
                best_epoch: 0,
                train_curve: vec![],
                val_curve: vec![],
            };
            for split in [Split::Train, Split::Val, Split::Test] {
                let report = evaluate(&model, &ds, split).unwrap();
                let total: usize = report.confusion.iter().flatten().sum();
                assert_eq!(total, report.total);
            }
        }
    }

    #[test]
    fn training_is_bit_identical_across_runs_and_thread_counts() {
        let ds = two_blob_dataset(17, 60, 2.0);
        let cfg = TrainConfig {
            epochs: 5,
            hidden: Some(8),
            ..TrainConfig::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| train(&ds, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        let c = run(1);
        assert_eq!(a.parameters.len(), b.parameters.len());
        for ((x, y), z) in a.parameters.iter().zip(&b.parameters).zip(&c.parameters) {
            assert_eq!(x.to_bits(), y.to_bits(), "thread count changed the parameters");
            assert_eq!(x.to_bits(), z.to_bits(), "re-run changed the parameters");
        }
    }

    #[test]
    fn row_order_does_not_leak_into_training() {
        let a = blob_rows(18, 30, &[-2.0, 0.0]);
        let b = blob_rows(19, 30, &[2.0, 0.0]);
        let make = |rows_a: &[Vec<f32>], rows_b: &[Vec<f32>]| {
            LabeledDataset::from_classes(
                &[
                    ("real".into(), FeatureMatrix::from_rows(rows_a).unwrap()),
                    ("gen-a".into(), FeatureMatrix::from_rows(rows_b).unwrap()),
                ],
                3,
            )
            .unwrap()
        };
        let ds_fwd = make(&a, &b);
        let mut a_rev = a.clone();
        let mut b_rev = b.clone();
        a_rev.reverse();
        b_rev.reverse();
        let ds_rev = make(&a_rev, &b_rev);

        // Full batch: one gradient step per epoch over all train rows.
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 1000,
            hidden: Some(4),
            ..TrainConfig::default()
        };
        let m_fwd = train(&ds_fwd, &cfg).unwrap();
        let m_rev = train(&ds_rev, &cfg).unwrap();
        for (x, y) in m_fwd.parameters.iter().zip(&m_rev.parameters) {
            assert_eq!(x.to_bits(), y.to_bits(), "row order changed the parameters");
        }
        let acc_fwd = evaluate(&m_fwd, &ds_fwd, Split::Test).unwrap().accuracy;
        let acc_rev = evaluate(&m_rev, &ds_rev, Split::Test).unwrap().accuracy;
        assert_eq!(acc_fwd, acc_rev);
    }

    #[test]
    fn convex_full_batch_loss_is_non_increasing() {
        let ds = two_blob_dataset(20, 40, 1.5);
        let cfg = TrainConfig {
            hidden: None,
            momentum: 0.0,
            learning_rate: 1e-2,
            batch_size: 1000,
            epochs: 50,
            seed: 1,
            class_weights: None,
        };
        let model = train(&ds, &cfg).unwrap();
        for w in model.train_curve.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                "loss rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn best_epoch_takes_earliest_tie() {
        let ds = two_blob_dataset(21, 100, 5.0);
        let cfg = TrainConfig {
            epochs: 25,
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        let best_acc = model.val_curve[model.best_epoch];
        for (epoch, &acc) in model.val_curve.iter().enumerate() {
            assert!(acc <= best_acc, "epoch {epoch} beat the selected epoch");
            if epoch < model.best_epoch {
                assert!(acc < best_acc, "tie at {epoch} should have won over later epoch");
            }
        }
    }

    #[test]
    fn exploding_step_size_reports_the_failing_epoch() {
        // Overlapping classes: a huge step must misclassify something by
        // an enormous margin, underflowing its probability to zero.
        let ds = two_blob_dataset(22, 40, 0.0);
        let cfg = TrainConfig {
            learning_rate: 1e12,
            hidden: Some(8),
            epochs: 10,
            ..TrainConfig::default()
        };
        match train(&ds, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected a non-finite loss failure, got {other:?}"),
        }
    }

    #[test]
    fn cross_evaluation_with_identity_map_equals_test_evaluation() {
        let ds = two_blob_dataset(23, 80, 4.0);
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        let direct = evaluate(&model, &ds, Split::Test).unwrap();
        let map: BTreeMap<String, String> = [("real", "real"), ("gen-a", "gen-a")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let cross = cross_evaluate(&model, &ds, &map).unwrap();
        assert_eq!(cross.accuracy, direct.accuracy);
        assert_eq!(cross.mapped, direct.total);
        assert_eq!(cross.excluded, 0);
    }

    #[test]
    fn empty_label_map_is_an_error() {
        let ds = two_blob_dataset(24, 40, 4.0);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        let empty: BTreeMap<String, String> = BTreeMap::new();
        assert!(matches!(
            cross_evaluate(&model, &ds, &empty),
            Err(Error::EmptySet { .. })
        ));
    }

    #[test]
    fn partially_mapped_classes_are_excluded_and_counted() {
        let ds = two_blob_dataset(25, 60, 4.0);
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        let map: BTreeMap<String, String> =
            [("gen-a".to_string(), "gen-a".to_string())].into_iter().collect();
        let cross = cross_evaluate(&model, &ds, &map).unwrap();
        assert_eq!(cross.mapped, 6, "only gen-a test samples are mapped");
        assert_eq!(cross.excluded, 6, "real test samples have no mapping");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = two_blob_dataset(26, 40, 2.0);
        let cfg = TrainConfig {
            epochs: 4,
            hidden: Some(6),
            ..TrainConfig::default()
        };
        let model = train(&ds, &cfg).unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = AttributionModel::load(&path).unwrap();
        assert_eq!(loaded.architecture, model.architecture);
        assert_eq!(loaded.label_names, model.label_names);
        assert_eq!(loaded.best_epoch, model.best_epoch);
        for (a, b) in model.parameters.iter().zip(&loaded.parameters) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let before = model.predict(ds.features()).unwrap();
        let after = loaded.predict(ds.features()).unwrap();
        for ((la, pa), (lb, pb)) in before.iter().zip(&after) {
            assert_eq!(la, lb);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn invalid_training_configs_are_rejected() {
        let ds = two_blob_dataset(27, 30, 2.0);
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                class_weights: Some(vec![1.0]),
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&ds, &cfg).is_err(), "config {cfg:?} should be rejected");
        }
    }
}
