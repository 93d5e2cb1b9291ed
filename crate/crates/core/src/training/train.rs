use std::fmt::Write;

use rand::seq::SliceRandom;

use super::{clip_loss, LossBreakdown, LossConfig, TrainError};
use crate::data::Clip;
use crate::model::{ClipInput, GroupingTransformer, ModelError};
use crate::numerics::{clip_grad_norm, Adam, AdamConfig, NumericsError, Tape};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate reached at the end of warmup.
    pub lr: f64,
    /// Learning rate at the first epoch.
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            warmup_start_lr: 1e-5,
            warmup_epochs: 5,
            batch_size: 16,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

/// Learning rate for a (0-based) epoch: linear warmup from
/// `warmup_start_lr` to `lr`, then linear decay towards 0 at `epochs`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        let f = epoch as f64 / cfg.warmup_epochs as f64;
        cfg.warmup_start_lr + (cfg.lr - cfg.warmup_start_lr) * f
    } else {
        let remaining = cfg.epochs.saturating_sub(epoch) as f64;
        let span = cfg.epochs.saturating_sub(cfg.warmup_epochs).max(1) as f64;
        cfg.lr * remaining / span
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-clip losses of each epoch.
    pub epochs: Vec<LossBreakdown>,
}

/// Trains `model` in place. Clips are shuffled each epoch with a seeded RNG;
/// each step averages the clip losses of one batch. Fully deterministic for
/// a given config.
pub fn train(
    model: &mut GroupingTransformer,
    clips: &[Clip],
    inputs: &[ClipInput],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if clips.len() != inputs.len() {
        return Err(TrainError::Config(format!("{} clips but {} inputs", clips.len(), inputs.len())));
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr < 0.0 || cfg.warmup_start_lr.is_nan() || cfg.warmup_start_lr < 0.0 {
        return Err(TrainError::Config("batch size must be positive and learning rates nonnegative".into()));
    }
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            let tape = Tape::new();
            let mut batch_total = None;
            for &i in batch {
                let diverged = |e: TrainError| match e {
                    TrainError::Model(ModelError::Numerics(NumericsError::NonFinite(_))) => TrainError::Divergence {
                        epoch,
                        step,
                        value: f64::NAN,
                    },
                    e => e,
                };
                let vars = model.forward(&tape, &inputs[i]).map_err(|e| diverged(e.into()))?;
                let (loss, parts) = clip_loss(&vars, &clips[i], &cfg.loss).map_err(diverged)?;
                if !parts.total.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        step,
                        value: parts.total,
                    });
                }
                sum.l_ind += parts.l_ind;
                sum.l_group += parts.l_group;
                sum.l_mem += parts.l_mem;
                sum.l_con += parts.l_con;
                sum.total += parts.total;
                batch_total = Some(match batch_total {
                    None => loss,
                    Some(acc) => loss.add(&acc)?,
                });
            }
            let loss = batch_total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            tape.backward(loss, model.params_mut())?;
            if let Some(max) = cfg.grad_clip {
                let norm = clip_grad_norm(model.params_mut(), max);
                if !norm.is_finite() {
                    return Err(TrainError::Divergence { epoch, step, value: norm });
                }
            }
            adam.step(model.params_mut(), lr);
            step += 1;
        }
        let n = clips.len().max(1) as f64;
        let mean = LossBreakdown::combine(sum.l_ind / n, sum.l_group / n, sum.l_mem / n, sum.l_con / n, &cfg.loss);
        log::info!("epoch {epoch}: lr {lr:.3e} total {:.5}", mean.total);
        history.push(mean);
    }
    Ok(TrainReport { epochs: history })
}

/// CSV with header `epoch,l_ind,l_group,l_mem,l_con,total`.
pub fn loss_curve_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,l_ind,l_group,l_mem,l_con,total\n");
    for (e, l) in report.epochs.iter().enumerate() {
        writeln!(out, "{e},{},{},{},{},{}", l.l_ind, l.l_group, l.l_mem, l.l_con, l.total).expect("string write");
    }
    out
}
