use super::params::{ParamRole, ParamStore};
use crate::error::{Error, Result};

/// Cosine-annealed learning rate: `base * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("cosine schedule needs at least one epoch".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} past schedule end {total_epochs}"
        )));
    }
    if epoch == total_epochs {
        return Ok(0.0);
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// Plain SGD step at the cosine rate for `epoch`, then zero all gradients.
/// Pruner weights are skipped when `train_pruners` is false.
pub fn sgd_cosine_step(
    store: &mut ParamStore,
    epoch: usize,
    total_epochs: usize,
    base_lr: f64,
    train_pruners: bool,
) -> Result<f64> {
    let lr = cosine_lr(epoch, total_epochs, base_lr)?;
    for (_, slot) in store.iter_mut() {
        let trainable = match slot.role {
            ParamRole::Weight => true,
            ParamRole::Pruner => train_pruners,
            ParamRole::Running => false,
        };
        if trainable && !slot.grad.is_empty() {
            for (p, g) in slot.value.data_mut().iter_mut().zip(&slot.grad) {
                *p -= lr * g;
            }
        }
        slot.grad.clear();
    }
    Ok(lr)
}
