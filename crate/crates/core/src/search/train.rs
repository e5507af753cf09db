use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::runlog::{DeletionCause, DeletionRecord, EpochRecord, Phase, RunLog, SkippedDeletion};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{EdgeId, SupernetModel};
use crate::kernel::{backprop_loss, cosine_lr, sgd_cosine_step, Mode, PrimitiveKind};
use crate::pruning::{deadhead_pass, Deletion};

/// How ops are removed during one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseDeletion<'a> {
    /// Pruner weights train and gated-off ops are deadheaded each epoch.
    Pruners,
    /// Pruners frozen, nothing deleted.
    Frozen,
    /// Pruners frozen; `per_epoch[e]` uniformly random ops deleted after epoch `e`.
    Random(&'a [usize]),
}

/// Training hyperparameters shared by every phase.
#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub base_lr: f64,
}

/// Train for `epochs` epochs with a cosine schedule over the same span,
/// deleting ops per `deletion`. Returns the number of ops deleted.
pub fn train_prune(
    model: &mut SupernetModel,
    data: &Dataset,
    phase: Phase,
    epochs: usize,
    settings: TrainSettings,
    deletion: PhaseDeletion<'_>,
    rng: &mut ChaCha8Rng,
    log: &mut RunLog,
) -> Result<usize> {
    let pruners = deletion == PhaseDeletion::Pruners;
    let mut deleted = 0;
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, settings.base_lr)?;
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (x, y) in data.train_epoch(settings.batch_size, rng) {
            let (tape, logits) = model.forward_train(x, rng)?;
            let loss = backprop_loss(&tape, logits, &y, model.params_mut())
                .map_err(|e| Error::Run(format!("{phase:?} epoch {epoch}: {e}")))?;
            if pruners {
                model.record_usage();
            }
            sgd_cosine_step(model.params_mut(), epoch, epochs, settings.base_lr, pruners)?;
            loss_sum += loss;
            batches += 1;
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Run(format!("{phase:?} epoch {epoch}: loss diverged")));
        }
        let before = deleted;
        match deletion {
            PhaseDeletion::Pruners => {
                let out = deadhead_pass(model, 0, epoch)?;
                for r in out.records {
                    log.deletions.push(DeletionRecord {
                        phase,
                        epoch,
                        edge: r.edge,
                        kind: r.kind,
                        cause: DeletionCause::Deadhead {
                            off_fraction: r.off_fraction,
                        },
                    });
                    deleted += 1;
                }
                for (edge, _) in out.suppressed {
                    log.skipped_deletions.push(SkippedDeletion { phase, epoch, edge });
                }
            }
            PhaseDeletion::Frozen => {}
            PhaseDeletion::Random(schedule) => {
                let n = schedule.get(epoch).copied().unwrap_or(0);
                deleted += random_deletions(model, n, phase, epoch, rng, log);
            }
        }
        log.epochs.push(EpochRecord {
            phase,
            epoch,
            lr,
            mean_loss,
            deleted: deleted - before,
        });
        log::info!("{phase:?} epoch {epoch}: lr {lr:.5} loss {mean_loss:.4}, {} ops", model.op_count());
    }
    Ok(deleted)
}

/// Delete `n` uniformly random alive ops, skipping (not retrying) any the
/// connectivity guard refuses. Returns the number deleted.
pub fn random_deletions(
    model: &mut SupernetModel,
    n: usize,
    phase: Phase,
    epoch: usize,
    rng: &mut impl Rng,
    log: &mut RunLog,
) -> usize {
    let mut deleted = 0;
    for _ in 0..n {
        let alive: Vec<(EdgeId, PrimitiveKind)> = model.ops().map(|(e, o)| (e.id, o.kind)).collect();
        if alive.is_empty() {
            break;
        }
        let (edge, kind) = alive[rng.random_range(0..alive.len())];
        match model.delete_op(edge, kind) {
            Deletion::Deleted { .. } => {
                deleted += 1;
                log.deletions.push(DeletionRecord {
                    phase,
                    epoch,
                    edge,
                    kind,
                    cause: DeletionCause::Random,
                });
            }
            Deletion::Guarded | Deletion::Missing => {
                log::info!("random deletion of {kind} on {edge} refused by the connectivity guard");
                log.skipped_deletions.push(SkippedDeletion { phase, epoch, edge });
            }
        }
    }
    deleted
}

/// Eval-mode accuracy over a split.
pub fn evaluate(model: &SupernetModel, split: &Split, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = split.gather(chunk);
        let logits = model.logits(x, Mode::Eval)?;
        for (n, &label) in y.iter().enumerate() {
            let row = logits.sample(n);
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}
