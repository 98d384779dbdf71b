//! Training: weighted cross-entropy, SGD with momentum, optional LARS
//! scaling, gestational-age sample weighting, early stopping on validation
//! AUC, three-member ensembles and transfer initialisation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::WindowBatch;
use crate::error::{Result, SdaError};
use crate::infer::{predict_batch, Predictor};
use crate::metrics;
use crate::net::{
    init_params, load_checkpoint, model_backward, model_forward, save_checkpoint, Architecture, Mode, NetworkParams,
    INPUT_LEN,
};

/// Added inside the log so a zero probability gives a finite loss.
pub const LOG_EPSILON: f64 = 1e-12;
pub const ENSEMBLE_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub use_lars: bool,
    /// Lower bound on a tensor's gradient norm inside the LARS ratio.
    pub lars_trust_floor: f64,
    pub lars_trust_coefficient: f64,
    pub seed: u64,
    /// Seizure windows are repeated until they make up at least this
    /// fraction of the non-seizure count in every epoch. Zero disables.
    pub seizure_oversample_ratio: f64,
    /// Cap on windows per epoch: a fresh random subset of the oversampled
    /// pool each epoch. `None` uses the whole pool.
    pub max_windows_per_epoch: Option<usize>,
    /// Validation AUC uses every `val_window_step`-th window of each
    /// validation record.
    pub val_window_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            patience_epochs: 8,
            max_epochs: 100,
            use_lars: false,
            lars_trust_floor: 1e-8,
            lars_trust_coefficient: 1.0,
            seed: 0,
            seizure_oversample_ratio: 0.25,
            max_windows_per_epoch: None,
            val_window_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SdaError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1".into());
        }
        if !(self.lars_trust_floor > 0.0) || !(self.lars_trust_coefficient > 0.0) {
            return bad("LARS floor and trust coefficient must be positive".into());
        }
        if !(self.seizure_oversample_ratio >= 0.0 && self.seizure_oversample_ratio.is_finite()) {
            return bad(format!("oversample ratio {} must be non-negative", self.seizure_oversample_ratio));
        }
        if self.val_window_step == 0 {
            return bad("val_window_step must be at least 1".into());
        }
        if self.max_windows_per_epoch == Some(0) {
            return bad("max_windows_per_epoch must be positive when set".into());
        }
        Ok(())
    }
}

/// Gestational-age group: 1 is GA < 26 weeks, 2 is 26 to 29 weeks
/// inclusive, 3 is GA > 29 weeks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaGroup {
    pub group_id: u8,
    pub decay_span_weeks: f64,
}

pub const GROUP_1_UPPER_WEEKS: f64 = 26.0;
pub const GROUP_3_LOWER_WEEKS: f64 = 29.0;
pub const DEFAULT_DECAY_SPAN_WEEKS: f64 = 4.0;

impl GaGroup {
    pub fn new(group_id: u8, decay_span_weeks: f64) -> Result<Self> {
        if !(1..=3).contains(&group_id) {
            return Err(SdaError::Config(format!("GA group {group_id} not in 1..=3")));
        }
        if !(decay_span_weeks > 0.0) {
            return Err(SdaError::Config(format!("decay span {decay_span_weeks} must be positive")));
        }
        Ok(GaGroup {
            group_id,
            decay_span_weeks,
        })
    }

    /// Group containing `ga_weeks`.
    pub fn id_for(ga_weeks: f64) -> u8 {
        if ga_weeks < GROUP_1_UPPER_WEEKS {
            1
        } else if ga_weeks <= GROUP_3_LOWER_WEEKS {
            2
        } else {
            3
        }
    }

    pub fn contains(&self, ga_weeks: f64) -> bool {
        Self::id_for(ga_weeks) == self.group_id
    }

    /// Weeks from `ga_weeks` to the nearest boundary of the group; zero inside.
    pub fn distance(&self, ga_weeks: f64) -> f64 {
        if self.contains(ga_weeks) {
            return 0.0;
        }
        match self.group_id {
            1 => ga_weeks - GROUP_1_UPPER_WEEKS,
            3 => GROUP_3_LOWER_WEEKS - ga_weeks,
            _ if ga_weeks < GROUP_1_UPPER_WEEKS => GROUP_1_UPPER_WEEKS - ga_weeks,
            _ => ga_weeks - GROUP_3_LOWER_WEEKS,
        }
    }
}

/// 1 inside the group, falling linearly to 0 over the decay span outside it.
pub fn ga_membership_weight(ga_weeks: f64, group: &GaGroup) -> f64 {
    (1.0 - group.distance(ga_weeks) / group.decay_span_weeks).max(0.0)
}

/// `sum_i w_i * -ln(p_i[label_i] + 1e-12) / sum_i w_i`; zero when every
/// weight is zero. `probs` is `(windows, 2)`.
pub fn weighted_cross_entropy(probs: &Array2<f64>, labels: &[u8], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let sum: f64 = probs
        .outer_iter()
        .zip(labels)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((p, &l), &w)| -w * (p[usize::from(l)] + LOG_EPSILON).ln())
        .sum();
    sum / total
}

/// `v <- momentum * v + g; w <- w - lr * v`, in place.
pub fn sgd_momentum_step(weights: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Layer-wise rescaling `trust * ||w|| / max(||g||, floor) * g`. A tensor
/// that is still all zeros keeps its raw gradient, otherwise zero-initialised
/// biases could never move.
pub fn lars_scale(weights: &[f64], grads: &[f64], floor: f64, trust: f64) -> Vec<f64> {
    let w_norm = l2(weights);
    if w_norm == 0.0 {
        return grads.to_vec();
    }
    let ratio = trust * w_norm / l2(grads).max(floor);
    grads.iter().map(|g| ratio * g).collect()
}

/// Momentum SGD over every learnable tensor, with optional LARS.
#[derive(Debug, Clone)]
pub struct Optimizer {
    velocity: Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
    lars: Option<(f64, f64)>,
}

impl Optimizer {
    pub fn new(params: &NetworkParams, config: &TrainConfig) -> Self {
        Optimizer {
            velocity: params.learnable().iter().map(|t| vec![0.0; t.len()]).collect(),
            lr: config.lr,
            momentum: config.momentum,
            lars: config
                .use_lars
                .then_some((config.lars_trust_floor, config.lars_trust_coefficient)),
        }
    }

    /// Refuses the whole step if any gradient is non-finite.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[&[f64]], epoch: usize) -> Result<()> {
        let names = params.tensor_names();
        for (name, g) in names.iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SdaError::NonFiniteGradient {
                    tensor: name.clone(),
                    epoch,
                });
            }
        }
        for ((w, g), v) in params.learnable_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            match self.lars {
                Some((floor, trust)) => {
                    let scaled = lars_scale(w, g, floor, trust);
                    sgd_momentum_step(w, &scaled, v, self.lr, self.momentum);
                }
                None => sgd_momentum_step(w, g, v, self.lr, self.momentum),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(score > b) => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Waiting
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, score)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub val_auc: f64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub val_record_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: NetworkParams,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.params, serde_json::to_value(&self.meta)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, manifest) = load_checkpoint(path.as_ref())?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)?;
        if !(0.0..=1.0).contains(&meta.val_auc) {
            return Err(SdaError::Checkpoint(format!("validation AUC {} outside [0, 1]", meta.val_auc)));
        }
        Ok(ModelCheckpoint { params, meta })
    }
}

impl Predictor for ModelCheckpoint {
    fn predict_windows(&self, windows: &ndarray::ArrayView3<f64>) -> Result<Vec<f64>> {
        self.params.predict_windows(windows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
    pub stopped: bool,
}

pub fn write_training_log(rows: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_auc", "lr", "stopped_flag"])?;
    for r in rows {
        w.serialize((r.epoch, r.train_loss, r.val_auc, r.lr, u8::from(r.stopped)))?;
    }
    w.flush().map_err(|e| SdaError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy)]
struct PoolEntry {
    batch: u32,
    window: u32,
}

/// Windows eligible for training: not in the edge zone, positive weight.
fn training_pool(batches: &[WindowBatch]) -> (Vec<PoolEntry>, Vec<PoolEntry>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        for w in 0..batch.len() {
            if batch.edge_flags[w] || batch.sample_weights[w] <= 0.0 {
                continue;
            }
            let e = PoolEntry {
                batch: b as u32,
                window: w as u32,
            };
            if batch.labels[w] != 0 {
                pos.push(e);
            } else {
                neg.push(e);
            }
        }
    }
    (pos, neg)
}

/// One epoch's window order: every negative, the positives repeated up to
/// the oversampling ratio, shuffled together and cut to the epoch cap.
fn epoch_order(pos: &[PoolEntry], neg: &[PoolEntry], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<PoolEntry> {
    let mut order = neg.to_vec();
    if !pos.is_empty() {
        let mut p = pos.to_vec();
        p.shuffle(rng);
        let target = ((config.seizure_oversample_ratio * neg.len() as f64).ceil() as usize).max(pos.len());
        order.extend(p.iter().cycle().take(target).copied());
    }
    order.shuffle(rng);
    if let Some(cap) = config.max_windows_per_epoch {
        order.truncate(cap);
    }
    order
}

fn gather(batches: &[WindowBatch], entries: &[PoolEntry], channels: usize) -> (Array3<f64>, Vec<u8>, Vec<f64>) {
    let mut x = Array3::zeros((entries.len(), channels, INPUT_LEN));
    let mut labels = Vec::with_capacity(entries.len());
    let mut weights = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let b = &batches[e.batch as usize];
        let w = e.window as usize;
        x.index_axis_mut(Axis(0), i).assign(&b.windows.index_axis(Axis(0), w));
        labels.push(b.labels[w]);
        weights.push(b.sample_weights[w]);
    }
    (x, labels, weights)
}

/// Concatenated AUC of `params` over the validation records.
pub fn validation_auc(predictor: &(dyn Predictor + Sync), val: &[WindowBatch]) -> Result<f64> {
    let probs: Vec<Vec<f64>> = val
        .par_iter()
        .map(|b| predict_batch(predictor, b).map(|t| t.probs))
        .collect::<Result<_>>()?;
    let parts: Vec<(&[f64], &[u8])> = probs
        .iter()
        .zip(val)
        .map(|(p, b)| (p.as_slice(), b.labels.as_slice()))
        .collect();
    metrics::auc_concat(&parts)
}

fn check_channels(batches: &[WindowBatch]) -> Result<usize> {
    let channels = batches.first().map_or(0, |b| b.n_channels());
    if let Some(b) = batches.iter().find(|b| b.n_channels() != channels) {
        return Err(SdaError::Dataset(format!(
            "record {} has {} channels, expected {channels}",
            b.record_id,
            b.n_channels()
        )));
    }
    Ok(channels)
}

/// Trains from `init` until validation AUC stops improving for
/// `patience_epochs` epochs (or `max_epochs` is reached) and returns the
/// parameters of the best epoch.
pub fn train_model(
    train: &[WindowBatch],
    val: &[WindowBatch],
    config: &TrainConfig,
    init: NetworkParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.max_epochs == 0 {
        return Err(SdaError::Config("max_epochs must be at least 1".into()));
    }
    if val.is_empty() {
        return Err(SdaError::Dataset("empty validation set".into()));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|b| b.record_id.as_str()).collect();
    if let Some(b) = val.iter().find(|b| train_ids.contains(b.record_id.as_str())) {
        return Err(SdaError::Dataset(format!(
            "record {} is in both the training and validation sets",
            b.record_id
        )));
    }
    let n_val_pos: usize = val.iter().map(|b| b.n_positive()).sum();
    let n_val: usize = val.iter().map(|b| b.len()).sum();
    if n_val_pos == 0 || n_val_pos == n_val {
        return Err(SdaError::Undefined(
            "validation labels hold a single class, AUC is undefined".into(),
        ));
    }
    let channels = check_channels(train)?;
    let (pos, neg) = training_pool(train);
    if pos.is_empty() && neg.is_empty() {
        return Err(SdaError::Dataset("no trainable windows".into()));
    }
    if pos.is_empty() {
        log::warn!("training set has no seizure windows");
    }

    let val_record_ids: Vec<String> = val.iter().map(|b| b.record_id.clone()).collect();
    let thinned: Vec<WindowBatch>;
    let val = if config.val_window_step > 1 {
        thinned = val.iter().map(|b| b.every_nth(config.val_window_step)).collect();
        &thinned[..]
    } else {
        val
    };
    let mut params = init;
    let mut optimizer = Optimizer::new(&params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut best = params.clone();
    let mut log_rows = Vec::new();

    for epoch in 1..=config.max_epochs {
        let order = epoch_order(&pos, &neg, config, &mut rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels, weights) = gather(train, chunk, channels);
            let total: f64 = weights.iter().sum();
            let out = model_forward(&params, &x.view(), Mode::Train)?;
            let cache = out.cache.expect("train mode keeps the cache");
            loss_sum += weighted_cross_entropy(&cache.probs, &labels, &weights) * total;
            weight_sum += total;
            let mut grads = model_backward(&params, &cache, &labels, &weights)?;
            grads.scale(1.0 / total);
            params.update_running_stats(&cache);
            optimizer.step(&mut params, &grads.tensors(), epoch)?;
        }
        let val_auc = validation_auc(&params, val)?;
        let decision = stopper.observe(epoch, val_auc);
        if decision == StopDecision::Improved {
            best = params.clone();
        }
        let stopped = decision == StopDecision::Stop || epoch == config.max_epochs;
        let train_loss = if weight_sum > 0.0 { loss_sum / weight_sum } else { 0.0 };
        log::info!("epoch {epoch}: loss {train_loss:.4}, val AUC {val_auc:.4}");
        log_rows.push(EpochLog {
            epoch,
            train_loss,
            val_auc,
            lr: config.lr,
            stopped,
        });
        if stopped {
            break;
        }
    }
    let (epoch, val_auc) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            params: best,
            meta: CheckpointMeta {
                val_auc,
                epoch,
                config: config.clone(),
                val_record_ids,
            },
        },
        log: log_rows,
    })
}

/// Mean of the member probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<ModelCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub architecture_hash: String,
    pub members: Vec<PathBuf>,
    pub val_record_ids: Vec<Vec<String>>,
    pub metadata: serde_json::Value,
}

impl EnsembleModel {
    pub fn new(members: Vec<ModelCheckpoint>) -> Result<Self> {
        if members.len() != ENSEMBLE_SIZE {
            return Err(SdaError::Dataset(format!(
                "an ensemble has {ENSEMBLE_SIZE} members, got {}",
                members.len()
            )));
        }
        let arch = members[0].params.arch;
        for m in &members[1..] {
            m.params.check_architecture(&arch)?;
        }
        let sets: BTreeSet<BTreeSet<&String>> = members.iter().map(|m| m.meta.val_record_ids.iter().collect()).collect();
        if sets.len() != members.len() {
            return Err(SdaError::Dataset("ensemble members share a validation set".into()));
        }
        Ok(EnsembleModel { members })
    }

    pub fn architecture(&self) -> Architecture {
        self.members[0].params.arch
    }

    /// Writes `member_{i}.ckpt` files and `ensemble.json` into `dir`;
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, metadata: serde_json::Value) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| SdaError::io(dir, e))?;
        let mut files = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = PathBuf::from(format!("member_{i}.ckpt"));
            m.save(dir.join(&name))?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            architecture_hash: self.architecture().hash(),
            members: files,
            val_record_ids: self.members.iter().map(|m| m.meta.val_record_ids.clone()).collect(),
            metadata,
        };
        let path = dir.join("ensemble.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| SdaError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SdaError::io(path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let members = manifest
            .members
            .iter()
            .map(|m| ModelCheckpoint::load(base.join(m)))
            .collect::<Result<Vec<_>>>()?;
        let model = EnsembleModel::new(members)?;
        if model.architecture().hash() != manifest.architecture_hash {
            return Err(SdaError::ArchitectureMismatch {
                expected: manifest.architecture_hash,
                found: model.architecture().hash(),
            });
        }
        Ok(model)
    }
}

impl Predictor for EnsembleModel {
    fn predict_windows(&self, windows: &ndarray::ArrayView3<f64>) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; windows.dim().0];
        for m in &self.members {
            for (s, p) in sum.iter_mut().zip(m.predict_windows(windows)?) {
                *s += p;
            }
        }
        let n = self.members.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub model: EnsembleModel,
    pub logs: Vec<Vec<EpochLog>>,
}

/// Seed of ensemble member `m`.
pub fn member_seed(master: u64, m: usize) -> u64 {
    master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(m as u64 + 1)
}

fn has_both_classes(batches: &[WindowBatch], idx: &[usize]) -> bool {
    let pos: usize = idx.iter().map(|&i| batches[i].n_positive()).sum();
    let all: usize = idx.iter().map(|&i| batches[i].len()).sum();
    pos > 0 && pos < all
}

/// Draws `ENSEMBLE_SIZE` distinct validation sets of `k` records from
/// `candidates`. Each set holds both classes and leaves seizure windows in
/// the remaining training records. Disjoint sets are preferred.
pub fn choose_validation_sets(
    batches: &[WindowBatch],
    candidates: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    const ATTEMPTS: usize = 4000;
    if k == 0 || candidates.len() < k + 1 {
        return Err(SdaError::Dataset(format!(
            "{} candidate records cannot give validation sets of {k}",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<Vec<usize>> = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    for attempt in 0..ATTEMPTS {
        if chosen.len() == ENSEMBLE_SIZE {
            break;
        }
        let mut set: Vec<usize> = candidates.choose_multiple(&mut rng, k).copied().collect();
        set.sort_unstable();
        if chosen.contains(&set) || !has_both_classes(batches, &set) {
            continue;
        }
        if attempt < ATTEMPTS / 2 && set.iter().any(|i| used.contains(i)) {
            continue;
        }
        let rest: Vec<usize> = (0..batches.len()).filter(|i| !set.contains(i)).collect();
        if rest.iter().all(|&i| batches[i].n_positive() == 0) {
            continue;
        }
        used.extend(&set);
        chosen.push(set);
    }
    if chosen.len() < ENSEMBLE_SIZE {
        return Err(SdaError::Dataset(format!(
            "could not form {ENSEMBLE_SIZE} distinct validation sets of {k} records with both classes"
        )));
    }
    Ok(chosen)
}

/// How ensemble members are initialised.
pub enum MemberInit<'a> {
    Fresh(Architecture),
    Pretrained(&'a EnsembleModel),
}

/// Shared ensemble driver: picks validation sets among `val_candidates`,
/// optionally reweights every window by GA membership, and trains one
/// member per validation set.
pub fn train_members(
    batches: &[WindowBatch],
    val_candidates: &[usize],
    val_per_member: usize,
    config: &TrainConfig,
    init: MemberInit<'_>,
    group: Option<&GaGroup>,
) -> Result<EnsembleOutcome> {
    config.validate()?;
    let weighted: Vec<WindowBatch>;
    let batches = match group {
        Some(g) => {
            weighted = batches
                .iter()
                .map(|b| {
                    let w = ga_membership_weight(b.ga_weeks, g);
                    let mut b = b.clone();
                    b.sample_weights.iter_mut().for_each(|s| *s *= w);
                    b
                })
                .collect();
            &weighted[..]
        }
        None => batches,
    };
    let val_sets = choose_validation_sets(batches, val_candidates, val_per_member, config.seed)?;
    let outcomes: Vec<TrainOutcome> = val_sets
        .par_iter()
        .enumerate()
        .map(|(m, val_idx)| {
            let seed = member_seed(config.seed, m);
            let member_config = TrainConfig {
                seed,
                ..config.clone()
            };
            let params = match &init {
                MemberInit::Fresh(arch) => init_params(*arch, seed),
                MemberInit::Pretrained(ens) => transfer_init(&ens.members[m], &ens.architecture())?,
            };
            let val: Vec<WindowBatch> = val_idx.iter().map(|&i| batches[i].clone()).collect();
            let train: Vec<WindowBatch> = (0..batches.len())
                .filter(|i| !val_idx.contains(i))
                .map(|i| batches[i].clone())
                .collect();
            log::info!("member {m}: validating on {:?}", val.iter().map(|b| &b.record_id).collect::<Vec<_>>());
            train_model(&train, &val, &member_config, params)
        })
        .collect::<Result<_>>()?;
    let logs = outcomes.iter().map(|o| o.log.clone()).collect();
    let model = EnsembleModel::new(outcomes.into_iter().map(|o| o.checkpoint).collect())?;
    Ok(EnsembleOutcome { model, logs })
}

/// Three members from scratch, each validated on a different record subset.
pub fn train_ensemble(
    batches: &[WindowBatch],
    config: &TrainConfig,
    arch: Architecture,
    val_per_member: usize,
) -> Result<EnsembleOutcome> {
    if batches.len() < 4 {
        return Err(SdaError::Dataset(format!("ensemble training needs at least 4 records, got {}", batches.len())));
    }
    let candidates: Vec<usize> = (0..batches.len()).collect();
    train_members(batches, &candidates, val_per_member, config, MemberInit::Fresh(arch), None)
}

/// Copy of the pretrained parameters; the optimiser state starts fresh
/// because every training run builds its own.
pub fn transfer_init(pretrained: &ModelCheckpoint, expected: &Architecture) -> Result<NetworkParams> {
    pretrained.params.check_architecture(expected)?;
    Ok(pretrained.params.clone())
}

/// In-group records serve as validation candidates.
fn group_candidates(batches: &[WindowBatch], group: &GaGroup) -> Vec<usize> {
    (0..batches.len()).filter(|&i| group.contains(batches[i].ga_weeks)).collect()
}

/// GA-specific fine-tuning: each member starts from the matching pretrained
/// member, every record takes part with its GA membership weight, and the
/// validation records come from inside the group.
pub fn train_ga_specific(
    batches: &[WindowBatch],
    group: &GaGroup,
    pretrained: &EnsembleModel,
    config: &TrainConfig,
    val_per_member: usize,
) -> Result<EnsembleOutcome> {
    let candidates = group_candidates(batches, group);
    train_members(
        batches,
        &candidates,
        val_per_member,
        config,
        MemberInit::Pretrained(pretrained),
        Some(group),
    )
}

/// The same protocol from random initialisation, for comparison.
pub fn train_ga_from_scratch(
    batches: &[WindowBatch],
    group: &GaGroup,
    arch: Architecture,
    config: &TrainConfig,
    val_per_member: usize,
) -> Result<EnsembleOutcome> {
    let candidates = group_candidates(batches, group);
    train_members(batches, &candidates, val_per_member, config, MemberInit::Fresh(arch), Some(group))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let p = array![[0.0, 1.0]];
        assert!(weighted_cross_entropy(&p, &[1], &[1.0]).abs() < 1e-11);
        let p = array![[0.5, 0.5]];
        assert!((weighted_cross_entropy(&p, &[0], &[1.0]) - 2f64.ln()).abs() < 1e-11);
        let p = array![[1.0, 0.0], [0.5, 0.5]];
        // Zero weight on a confident miss adds nothing.
        assert!((weighted_cross_entropy(&p, &[1, 0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-11);
        assert_eq!(weighted_cross_entropy(&p, &[1, 0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn momentum_examples() {
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.01, 0.0);
        assert!((w[0] - 0.99).abs() < 1e-15);

        let mut w = [0.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.01, 0.9);
        let after_one = w[0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.01, 0.9);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!(((after_one - w[0]) - 0.019).abs() < 1e-15);

        let mut w = [0.3, -2.0];
        let mut v = [0.0, 0.0];
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut v, 0.01, 0.9);
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn lars_examples() {
        // ||w|| = 2, ||g|| = 4.
        let w = [2.0, 0.0];
        let g = [0.0, 4.0];
        assert_eq!(lars_scale(&w, &g, 1e-8, 1.0), vec![0.0, 2.0]);
        assert_eq!(lars_scale(&w, &[0.0, 0.0], 1e-8, 1.0), vec![0.0, 0.0]);
        assert_eq!(lars_scale(&w, &g, 1e-8, 0.5), vec![0.0, 1.0]);
        // All-zero tensors keep the raw gradient.
        assert_eq!(lars_scale(&[0.0], &[3.0], 1e-8, 1.0), vec![3.0]);
    }

    #[test]
    fn membership_examples() {
        let g1 = GaGroup::new(1, 4.0).unwrap();
        let g2 = GaGroup::new(2, 4.0).unwrap();
        let g3 = GaGroup::new(3, 4.0).unwrap();
        assert_eq!(ga_membership_weight(25.0, &g1), 1.0);
        assert_eq!(ga_membership_weight(30.0, &g1), 0.0);
        assert_eq!(ga_membership_weight(28.0, &g2), 1.0);
        assert_eq!(ga_membership_weight(28.0, &g1), 0.5);
        assert_eq!(ga_membership_weight(24.0, &g2), 0.5);
        assert_eq!(ga_membership_weight(31.0, &g2), 0.5);
        assert_eq!(ga_membership_weight(27.0, &g3), 0.5);
        assert_eq!(ga_membership_weight(29.0, &g2), 1.0);
        assert_eq!(ga_membership_weight(29.5, &g3), 1.0);
        let narrow = GaGroup::new(1, 1e-9).unwrap();
        assert_eq!(ga_membership_weight(26.5, &narrow), 0.0);
        assert!(GaGroup::new(4, 4.0).is_err());
        assert!(GaGroup::new(1, 0.0).is_err());
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(8);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let auc = if epoch <= 20 { epoch as f64 / 100.0 } else { 0.2 };
            if s.observe(epoch, auc) == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(28));
        assert_eq!(s.best(), Some((20, 0.2)));

        // Ties never replace the earlier best.
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.7);
        assert_eq!(s.observe(2, 0.7), StopDecision::Waiting);
        assert_eq!(s.best(), Some((1, 0.7)));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { patience_epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.1, "bogus": 1}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn epoch_order_oversamples_and_caps() {
        let pos: Vec<PoolEntry> = (0..3).map(|i| PoolEntry { batch: 0, window: i }).collect();
        let neg: Vec<PoolEntry> = (10..110).map(|i| PoolEntry { batch: 0, window: i }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let order = epoch_order(&pos, &neg, &TrainConfig::default(), &mut rng);
        let n_pos = order.iter().filter(|e| e.window < 10).count();
        assert_eq!(order.len() - n_pos, 100);
        assert_eq!(n_pos, 25);
        let capped = TrainConfig {
            max_windows_per_epoch: Some(40),
            ..Default::default()
        };
        assert_eq!(epoch_order(&pos, &neg, &capped, &mut rng).len(), 40);
    }

    proptest! {
        #[test]
        fn lars_update_ignores_gradient_scale(
            w in prop::collection::vec(-1.0f64..1.0, 1..20),
            g in prop::collection::vec(-1.0f64..1.0, 20),
            exp in -6i32..=6,
        ) {
            let g = &g[..w.len()];
            prop_assume!(l2(&w) > 1e-3 && l2(g) > 1e-3);
            let c = 10f64.powi(exp);
            let cg: Vec<f64> = g.iter().map(|v| v * c).collect();
            let a = lars_scale(&w, g, 1e-8, 1.0);
            let b = lars_scale(&w, &cg, 1e-8, 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-300));
            }
        }

        #[test]
        fn membership_weight_in_unit_interval(ga in 22.0f64..44.0, id in 1u8..=3, span in 0.1f64..10.0) {
            let g = GaGroup::new(id, span).unwrap();
            let w = ga_membership_weight(ga, &g);
            prop_assert!((0.0..=1.0).contains(&w));
            if g.contains(ga) {
                prop_assert_eq!(w, 1.0);
            }
        }
    }
}
