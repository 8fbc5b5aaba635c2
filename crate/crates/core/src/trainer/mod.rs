//! Balanced-batch SGD training of the attention back-end.

mod batch;
mod schedule;

use std::path::Path;

pub use batch::{compose_batch, BatchSpec, BatchTrial, TrainingBatch};
pub use schedule::CyclicalLrSchedule;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{self, AttentionBackendParams, BackendConfig};
use crate::numerics::{Matrix, Rng};
use crate::objectives::{combined_loss, BatchScores, LossValue, DEFAULT_LAMBDA};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch: BatchSpec,
    pub schedule: CyclicalLrSchedule,
    pub lambda: f64,
    /// Total number of epochs; resuming continues up to this count.
    pub epochs: u32,
}

impl TrainOptions {
    pub fn new(batch: BatchSpec) -> Self {
        TrainOptions {
            batch,
            schedule: CyclicalLrSchedule::default(),
            lambda: DEFAULT_LAMBDA,
            epochs: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean per-pair losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: u32,
    pub total: f64,
    pub bce: f64,
    pub ge2e: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochStats {
    /// `epoch<TAB>total<TAB>bce<TAB>ge2e<TAB>lr`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4e}",
            self.epoch, self.total, self.bce, self.ge2e, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: AttentionBackendParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub rng: Rng,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    /// Fresh parameters drawn from a generator seeded with `seed`; the same
    /// generator then drives batch sampling.
    pub fn init(config: BackendConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let params = AttentionBackendParams::init(config, &mut rng)?;
        Ok(TrainState {
            params,
            step: 0,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }
}

/// Loss and summed parameter gradient of one batch.
pub fn batch_gradients(
    params: &AttentionBackendParams,
    batch: &TrainingBatch,
    lambda: f64,
) -> Result<(LossValue, AttentionBackendParams)> {
    let speakers = batch.num_speakers();
    let utts = batch.utts();
    let dim = params.config().dim;

    // h_nm depends only on (n, m), so each enrollment set is aggregated once
    let mut aggregates = Vec::with_capacity(speakers * utts);
    for n in 0..speakers {
        for m in 0..utts {
            let rows: Vec<&[f64]> = batch
                .enroll_indices(m)
                .into_iter()
                .map(|k| batch.embeddings[n][k].as_slice())
                .collect();
            aggregates.push(model::aggregate(&Matrix::from_rows(&rows)?, params)?);
        }
    }
    let mut traces = Vec::with_capacity(speakers * utts * speakers);
    for l in 0..speakers {
        for m in 0..utts {
            let test = &batch.embeddings[l][m];
            for n in 0..speakers {
                traces.push(model::score_traced(
                    test,
                    &aggregates[n * utts + m].0,
                    params,
                )?);
            }
        }
    }
    let probs: Vec<f64> = traces.iter().map(|t| t.prob).collect();
    if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            context: "batch probabilities",
            index: i,
        });
    }
    let scores = BatchScores::new(speakers, utts, probs)?;
    let (loss, dprob) = combined_loss(&scores, lambda)?;

    let mut grads = params.zeros_like();
    let mut dpooled = vec![vec![0.0; dim]; speakers * utts];
    for l in 0..speakers {
        for m in 0..utts {
            for n in 0..speakers {
                let idx = scores.index(l, m, n);
                let (_, dh) = model::score_backward(&traces[idx], dprob[idx], params, &mut grads);
                crate::numerics::axpy(&mut dpooled[n * utts + m], 1.0, &dh);
            }
        }
    }
    for ((_, trace), dh) in aggregates.iter().zip(&dpooled) {
        model::aggregate_backward(trace, dh, params, &mut grads)?;
    }
    Ok((loss, grads))
}

/// One SGD step on `batch` with the gradient averaged over trial pairs;
/// returns the batch loss.
pub fn train_step(
    params: &mut AttentionBackendParams,
    batch: &TrainingBatch,
    lambda: f64,
    lr: f64,
) -> Result<LossValue> {
    let (loss, grads) = batch_gradients(params, batch, lambda)?;
    let pairs = (batch.num_speakers() * batch.utts() * batch.num_speakers()) as f64;
    params.axpy(-lr / pairs, &grads);
    params.clamp_scale();
    Ok(loss)
}

/// Trains from a fresh initialisation for `options.epochs` epochs.
pub fn train(
    pool: &EmbeddingSet,
    config: BackendConfig,
    options: &TrainOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainState> {
    options.validate()?;
    if pool.dim() != config.dim {
        return Err(Error::Shape {
            op: "train",
            left: format!("embedding dim {}", pool.dim()),
            right: format!("backend dim {}", config.dim),
        });
    }
    let state = TrainState::init(config, options.batch.seed)?;
    resume(state, pool, options, on_epoch)
}

/// Continues training until `state.epoch == options.epochs`.
///
/// Each epoch shuffles the eligible speakers, partitions them into groups of
/// `batch.speakers` without replacement (a short remainder is dropped) and
/// draws `batch.utts` utterances per speaker for every group.
pub fn resume(
    mut state: TrainState,
    pool: &EmbeddingSet,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainState> {
    options.validate()?;
    let spec = &options.batch;
    let eligible = batch::eligible_speakers(pool, spec.utts);
    if eligible.len() < spec.speakers {
        return Err(batch::insufficient(pool, spec, eligible.len()));
    }
    while state.epoch < options.epochs {
        // the partition depends only on the generator state, so resuming matches
        let mut order = eligible.clone();
        state.rng.shuffle(&mut order);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut lr = options.schedule.lr_at(state.step);
        for group in order.chunks_exact(spec.speakers) {
            let batch = batch::batch_from_speakers(pool, group, spec.utts, &mut state.rng);
            lr = options.schedule.lr_at(state.step);
            let loss =
                train_step(&mut state.params, &batch, options.lambda, lr).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { step: state.step },
                    other => other,
                })?;
            if !loss.total.is_finite() || !state.params.is_finite() {
                return Err(Error::NonFiniteLoss { step: state.step });
            }
            let pairs = spec.pair_count() as f64;
            sums.0 += loss.total / pairs;
            sums.1 += loss.bce / pairs;
            sums.2 += loss.ge2e / pairs;
            batches += 1;
            state.step += 1;
        }
        state.epoch += 1;
        let n = batches as f64;
        let stats = EpochStats {
            epoch: state.epoch,
            total: sums.0 / n,
            bce: sums.1 / n,
            ge2e: sums.2 / n,
            lr,
        };
        state.history.push(stats);
        on_epoch(&stats);
    }
    Ok(state)
}

// Trainer checkpoint layout (little-endian):
//   "ATNT1" | step u64 | epoch u32 | rng seed u64 | rng counter u64 |
//   history count u32 | count x (epoch u32 | total f64 | bce f64 | ge2e f64 | lr f64) |
//   parameter block ("ATNB1" ...)
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ATNT1";

impl TrainState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u64(self.step);
        w.u32(self.epoch);
        w.u64(self.rng.seed());
        w.u64(self.rng.counter());
        w.len_u32(self.history.len(), "history length")?;
        for h in &self.history {
            w.u32(h.epoch);
            w.f64s(&[h.total, h.bce, h.ge2e, h.lr]);
        }
        self.params.encode_into(&mut w)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let step = r.u64("step")?;
        let epoch = r.u32("epoch")?;
        let seed = r.u64("rng seed")?;
        let counter = r.u64("rng counter")?;
        let n = r.u32("history length")? as usize;
        if r.remaining() < n.saturating_mul(36) {
            return Err(Error::format(
                r.offset(),
                format!("truncated history of {n} epochs"),
            ));
        }
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            let e = r.u32("history epoch")?;
            let v = r.f64s(4, "history values")?;
            history.push(EpochStats {
                epoch: e,
                total: v[0],
                bce: v[1],
                ge2e: v[2],
                lr: v[3],
            });
        }
        let params = AttentionBackendParams::decode_from(&mut r)?;
        r.finish()?;
        Ok(TrainState {
            params,
            step,
            epoch,
            rng: Rng::from_state(seed, counter),
            history,
        })
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    codec::write_atomic(path, &state.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_bytes(&codec::read_file(path)?)
}

/// Parameters from either a trainer checkpoint or a bare parameter file.
pub fn load_params_any(path: &Path) -> Result<AttentionBackendParams> {
    let bytes = codec::read_file(path)?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        Ok(TrainState::from_bytes(&bytes)?.params)
    } else {
        AttentionBackendParams::from_bytes(&bytes)
    }
}
