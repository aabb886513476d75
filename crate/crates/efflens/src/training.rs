//! Adam-driven cross-entropy training with deterministic shuffling and
//! snapshot hooks.
//!
//! A snapshot is taken at epoch 1 / iteration 0 (before any parameter
//! update), then after every `snapshot_every` parameter updates, and finally
//! after the last update if that point does not already coincide with a
//! periodic snapshot. Snapshot coordinates are `(epoch, iterations completed
//! within that epoch)`, so the end of epoch 2 with batch size 64 on MNIST is
//! `(2, 938)`.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TrackedSubset};
use crate::effweight::{batch_effective_weights, flatten, EffWeightError};
use crate::linalg::Scalar;
use crate::network::{
    backward, forward, init_model, predict, Gradients, MlpModel, NetworkError, REFERENCE_DIMS,
};
use crate::parallel::par_map;
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    EffWeight(#[from] EffWeightError),
    #[error("snapshot sink: {0}")]
    Sink(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub shuffle_seed: u64,
    /// Snapshot period in parameter updates.
    pub snapshot_every: usize,
    pub model_seed: u64,
    pub subset_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            shuffle_seed: 11,
            snapshot_every: 469,
            model_seed: 7,
            subset_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |msg: &str| Err(TrainingError::BadConfig(msg.into()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if self.snapshot_every < 1 {
            return bad("snapshot_every must be >= 1");
        }
        Ok(())
    }
}

/// Per-parameter Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Gradients<S>,
    pub v: Gradients<S>,
    pub step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(model: &MlpModel<S>) -> Self {
        Self {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Snapshot,
    EpochEnd,
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEvent {
    /// 1-based.
    pub epoch: usize,
    /// Parameter updates completed within the epoch (0 for the pre-training
    /// snapshot, up to iterations-per-epoch at an epoch boundary).
    pub iteration: usize,
    pub train_loss: f64,
    pub kind: EventKind,
}

/// One training pause: the frozen model's effective weights for every
/// tracked sample, flattened row-major into `payload` (sample-major, f32).
#[derive(Debug, Clone)]
pub struct SnapshotRecord {
    pub snapshot_id: usize,
    pub epoch: usize,
    pub iteration: usize,
    /// `(d_L, 784)`.
    pub matrix_shape: (usize, usize),
    pub sample_refs: Vec<usize>,
    pub labels: Vec<u8>,
    pub payload: Vec<f32>,
}

/// Consumer of snapshots produced during training.
pub trait SnapshotSink<S: Scalar> {
    fn emit(&mut self, record: &SnapshotRecord, model: &MlpModel<S>) -> std::io::Result<()>;
}

/// Collects snapshots in memory.
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<SnapshotRecord>,
}

impl<S: Scalar> SnapshotSink<S> for VecSink {
    fn emit(&mut self, record: &SnapshotRecord, _model: &MlpModel<S>) -> std::io::Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

pub struct TrainOutcome<S> {
    pub model: MlpModel<S>,
    pub events: Vec<TrainEvent>,
    /// Mean batch loss per parameter update, in order.
    pub iteration_losses: Vec<f64>,
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], label: u8) -> f64 {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max).as_f64();
    let sum: f64 = logits.iter().map(|&l| (l.as_f64() - max).exp()).sum();
    max + sum.ln() - logits[label as usize].as_f64()
}

/// One Adam update with bias correction, in place.
pub fn adam_step<S: Scalar>(
    model: &mut MlpModel<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) {
    state.step_count += 1;
    let t = state.step_count as f64;
    let b1 = S::from_f64(cfg.adam_beta1);
    let b2 = S::from_f64(cfg.adam_beta2);
    let lr = S::from_f64(cfg.learning_rate);
    let eps = S::from_f64(cfg.adam_epsilon);
    let c1 = S::from_f64(1.0 - cfg.adam_beta1.powf(t));
    let c2 = S::from_f64(1.0 - cfg.adam_beta2.powf(t));

    let update = |theta: &mut [S], g: &[S], m: &mut [S], v: &mut [S]| {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    for l in 0..model.backbone.len() {
        update(
            model.backbone[l].data_mut(),
            grads.backbone[l].data(),
            state.m.backbone[l].data_mut(),
            state.v.backbone[l].data_mut(),
        );
    }
    update(
        model.head_weight.data_mut(),
        grads.head_weight.data(),
        state.m.head_weight.data_mut(),
        state.v.head_weight.data_mut(),
    );
    update(
        &mut model.head_bias,
        &grads.head_bias,
        &mut state.m.head_bias,
        &mut state.v.head_bias,
    );
}

fn to_scalar_pixels<S: Scalar>(pixels: &[f32]) -> Vec<S> {
    pixels.iter().map(|&p| S::from_f32(p)).collect()
}

/// Mean loss and gradient over a batch. Per-sample gradients are computed
/// independently (possibly across threads) and reduced in sample order, so
/// the result does not depend on thread count.
fn batch_gradient<S: Scalar>(
    model: &MlpModel<S>,
    batch: &[(Vec<S>, u8)],
) -> Result<(Gradients<S>, f64), TrainingError> {
    let per_sample = par_map(batch.len(), |i| -> Result<_, TrainingError> {
        let (x, label) = &batch[i];
        let r = forward(model, x)?;
        let loss = cross_entropy(&r.logits, *label);
        let g = backward(model, &r, *label)?;
        Ok((g, loss))
    });
    let mut total = Gradients::zeros_like(model);
    let mut loss_sum = 0.0;
    for item in per_sample {
        let (g, loss) = item?;
        total.add_scaled(S::one(), &g);
        loss_sum += loss;
    }
    let inv = S::from_f64(1.0 / batch.len() as f64);
    total.scale(inv);
    Ok((total, loss_sum / batch.len() as f64))
}

/// Resolve the tracked subset against the test split.
pub fn resolve_tracked<S: Scalar>(
    test: &Dataset,
    subset: &TrackedSubset,
) -> Vec<(Vec<S>, usize, u8)> {
    subset
        .sample_refs
        .iter()
        .map(|&i| {
            let s = &test.samples[i];
            (to_scalar_pixels::<S>(&s.pixels), s.source_index, s.label)
        })
        .collect()
}

fn take_snapshot<S: Scalar>(
    model: &MlpModel<S>,
    tracked: &[(Vec<S>, usize, u8)],
    snapshot_id: usize,
    epoch: usize,
    iteration: usize,
) -> Result<SnapshotRecord, TrainingError> {
    let effs = batch_effective_weights(model, tracked)?;
    let d_out = *model.dims.last().unwrap();
    let d_in = model.dims[0];
    let mut payload = Vec::with_capacity(effs.len() * d_out * d_in);
    let mut sample_refs = Vec::with_capacity(effs.len());
    let mut labels = Vec::with_capacity(effs.len());
    for eff in &effs {
        let flat = flatten(eff);
        payload.extend(flat.values.iter().map(|v| v.as_f32()));
        sample_refs.push(flat.sample_ref);
        labels.push(flat.label);
    }
    Ok(SnapshotRecord {
        snapshot_id,
        epoch,
        iteration,
        matrix_shape: (d_out, d_in),
        sample_refs,
        labels,
        payload,
    })
}

/// Train the reference model with snapshot hooks.
///
/// Shuffling draws a fresh permutation of the training indices per epoch
/// from one `SplitMix64` stream seeded by `shuffle_seed`; batches are
/// consecutive runs of the shuffled order and the last short batch is kept.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    subset: &TrackedSubset,
    sink: &mut dyn SnapshotSink<S>,
) -> Result<TrainOutcome<S>, TrainingError> {
    cfg.validate()?;
    let mut model: MlpModel<S> = init_model(&REFERENCE_DIMS, cfg.model_seed)?;
    let tracked = resolve_tracked::<S>(test_data, subset);
    let mut state = AdamState::new(&model);
    let mut shuffle_rng = SplitMix64::new(cfg.shuffle_seed);
    let mut events = Vec::new();
    let mut iteration_losses = Vec::new();
    let mut snapshot_id = 0;

    let inputs: Vec<(Vec<S>, u8)> = train_data
        .samples
        .iter()
        .map(|s| (to_scalar_pixels::<S>(&s.pixels), s.label))
        .collect();
    let n = inputs.len();
    let iters_per_epoch = n.div_ceil(cfg.batch_size);

    // Pre-training snapshot at (1, 0); its loss is the frozen model's loss
    // on the first `batch_size` training samples.
    let init_loss = {
        let head: Vec<(Vec<S>, u8)> = inputs[..cfg.batch_size.min(n)].to_vec();
        batch_gradient(&model, &head)?.1
    };
    sink.emit(&take_snapshot(&model, &tracked, snapshot_id, 1, 0)?, &model)?;
    events.push(TrainEvent {
        epoch: 1,
        iteration: 0,
        train_loss: init_loss,
        kind: EventKind::Snapshot,
    });
    snapshot_id += 1;

    let mut global_updates = 0usize;
    let total_updates = cfg.epochs * iters_per_epoch;
    let mut last_loss = init_loss;
    let mut last_was_snapshot = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        for (iter_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Vec<S>, u8)> =
                chunk.iter().map(|&i| inputs[i].clone()).collect();
            let (grads, loss) = batch_gradient(&model, &batch)?;
            adam_step(&mut model, &grads, &mut state, cfg);
            global_updates += 1;
            last_loss = loss;
            iteration_losses.push(loss);
            last_was_snapshot = false;

            if global_updates % cfg.snapshot_every == 0 {
                let completed = iter_in_epoch + 1;
                sink.emit(
                    &take_snapshot(&model, &tracked, snapshot_id, epoch, completed)?,
                    &model,
                )?;
                events.push(TrainEvent {
                    epoch,
                    iteration: completed,
                    train_loss: loss,
                    kind: EventKind::Snapshot,
                });
                snapshot_id += 1;
                last_was_snapshot = true;
            }
        }
        events.push(TrainEvent {
            epoch,
            iteration: iters_per_epoch,
            train_loss: last_loss,
            kind: EventKind::EpochEnd,
        });
    }

    // Final snapshot unless the last update already produced one.
    debug_assert_eq!(global_updates, total_updates);
    if !last_was_snapshot {
        sink.emit(
            &take_snapshot(&model, &tracked, snapshot_id, cfg.epochs, iters_per_epoch)?,
            &model,
        )?;
        events.push(TrainEvent {
            epoch: cfg.epochs,
            iteration: iters_per_epoch,
            train_loss: last_loss,
            kind: EventKind::Snapshot,
        });
    }
    events.push(TrainEvent {
        epoch: cfg.epochs,
        iteration: iters_per_epoch,
        train_loss: last_loss,
        kind: EventKind::Final,
    });

    Ok(TrainOutcome {
        model,
        events,
        iteration_losses,
    })
}

/// Classification accuracy over a dataset.
pub fn accuracy<S: Scalar>(model: &MlpModel<S>, data: &Dataset) -> Result<f64, NetworkError> {
    let hits = par_map(data.samples.len(), |i| -> Result<u32, NetworkError> {
        let s = &data.samples[i];
        let x = to_scalar_pixels::<S>(&s.pixels);
        let r = forward(model, &x)?;
        Ok(u32::from(predict(&r.logits) == s.label))
    });
    let mut total = 0u32;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / data.samples.len() as f64)
}

/// SHA-256 of the flattened parameters, used for checkpoint identity checks.
pub fn model_hash<S: Scalar>(model: &MlpModel<S>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in crate::network::flatten_params(model) {
        hasher.update(p.as_f32().to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}
