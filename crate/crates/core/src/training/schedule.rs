//! Epoch loop, segment schedule and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, OptimizerState};
use super::tape::{backprop_pretrain_segment, backprop_segment, segment_loss};
use super::{mask_frame_loss, CarriedState, PreparedSequence, TrainConfig};
use crate::error::{Error, Result};
use crate::neural::MaskModel;
use crate::scalar::Real;
use crate::wpe::WpeConfig;

/// One line of the training history. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-frame loss over the optimized segments.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub updates: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the best monitored loss.
    pub model: MaskModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Optimizer steps taken per segment index.
    pub updates_per_segment: Vec<u64>,
    pub stopped_early: bool,
}

impl<T> TrainOutcome<T> {
    /// Writes the history as JSON lines.
    pub fn write_history<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.history {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w).map_err(|e| Error::io("history", e))?;
        }
        Ok(())
    }
}

/// Splits `n` sequences into sorted (train, validation) indices. At least
/// one sequence stays in the training set.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if fraction > 0.0 && n >= 2 {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

fn check_dataset<T: Real>(seqs: &[PreparedSequence<T>], cfg: &TrainConfig, min_segments: usize) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput);
    }
    for s in seqs {
        if s.num_segments(cfg.segment_frames) < min_segments {
            return Err(Error::DatasetTooShort(format!(
                "sequence {} has {} frames, need {} segments of {}",
                s.id,
                s.num_frames(),
                min_segments,
                cfg.segment_frames
            )));
        }
    }
    Ok(())
}

/// What one training objective does per batch and per evaluation.
trait Objective<T: Real> {
    /// Runs all segments of `batch`, updating `model` once per segment index
    /// that is optimized. Returns (summed loss, frames).
    fn train_batch(
        &self,
        model: &mut MaskModel<T>,
        batch: &[&PreparedSequence<T>],
        opt: &mut OptimizerState<T>,
        updates: &mut Vec<u64>,
    ) -> Result<(f64, usize)>;

    /// Forward-only (summed loss, frames) over the optimized segments.
    fn evaluate(&self, model: &MaskModel<T>, seqs: &[&PreparedSequence<T>]) -> Result<(f64, usize)>;
}

struct EndToEnd<'a> {
    wpe: &'a WpeConfig,
    cfg: &'a TrainConfig,
}

impl<T: Real> Objective<T> for EndToEnd<'_> {
    fn train_batch(
        &self,
        model: &mut MaskModel<T>,
        batch: &[&PreparedSequence<T>],
        opt: &mut OptimizerState<T>,
        updates: &mut Vec<u64>,
    ) -> Result<(f64, usize)> {
        let l = self.cfg.segment_frames;
        let mut carried = Vec::with_capacity(batch.len());
        // n = 0: fresh states, forward only
        for seq in batch {
            let mut st = CarriedState::initial(model, self.wpe, seq.num_bins())?;
            segment_loss(model, seq.segment(0, l), &mut st, self.cfg)?;
            carried.push(st);
        }
        let n_max = batch.iter().map(|s| s.num_segments(l)).max().unwrap_or(0);
        let mut total = 0.0;
        let mut frames = 0;
        let mut grad_sum = vec![T::zero(); model.params().len()];
        for n in 1..n_max {
            grad_sum.iter_mut().for_each(|g| *g = T::zero());
            let mut count = 0usize;
            for (seq, st) in batch.iter().zip(&carried) {
                if n >= seq.num_segments(l) {
                    continue;
                }
                let (loss, grads, _) = backprop_segment(model, seq.segment(n, l), st, self.cfg)?;
                total += loss.to_f64_lossy();
                frames += l;
                count += 1;
                for (s, g) in grad_sum.iter_mut().zip(&grads) {
                    *s += *g;
                }
            }
            let scale = T::one() / T::from_usize_lossy(count);
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            adam_update(model.params_mut(), &grad_sum, opt, &self.cfg.adam)?;
            if updates.len() <= n {
                updates.resize(n + 1, 0);
            }
            updates[n] += 1;
            // Refresh the carried states with the updated parameters.
            for (seq, st) in batch.iter().zip(carried.iter_mut()) {
                if n < seq.num_segments(l) {
                    segment_loss(model, seq.segment(n, l), st, self.cfg)?;
                }
            }
        }
        Ok((total, frames))
    }

    fn evaluate(&self, model: &MaskModel<T>, seqs: &[&PreparedSequence<T>]) -> Result<(f64, usize)> {
        let l = self.cfg.segment_frames;
        let mut total = 0.0;
        let mut frames = 0;
        for seq in seqs {
            let mut st = CarriedState::initial(model, self.wpe, seq.num_bins())?;
            segment_loss(model, seq.segment(0, l), &mut st, self.cfg)?;
            for n in 1..seq.num_segments(l) {
                total += segment_loss(model, seq.segment(n, l), &mut st, self.cfg)?.to_f64_lossy();
                frames += l;
            }
        }
        Ok((total, frames))
    }
}

struct MaskDomain<'a> {
    cfg: &'a TrainConfig,
}

impl<T: Real> Objective<T> for MaskDomain<'_> {
    fn train_batch(
        &self,
        model: &mut MaskModel<T>,
        batch: &[&PreparedSequence<T>],
        opt: &mut OptimizerState<T>,
        updates: &mut Vec<u64>,
    ) -> Result<(f64, usize)> {
        let l = self.cfg.segment_frames;
        let mut states: Vec<_> = batch.iter().map(|_| model.zero_state()).collect();
        let n_max = batch.iter().map(|s| s.num_segments(l)).max().unwrap_or(0);
        let mut total = 0.0;
        let mut frames = 0;
        let mut grad_sum = vec![T::zero(); model.params().len()];
        for n in 0..n_max {
            grad_sum.iter_mut().for_each(|g| *g = T::zero());
            let mut count = 0usize;
            let before = states.clone();
            for (seq, st) in batch.iter().zip(states.iter_mut()) {
                if n >= seq.num_segments(l) {
                    continue;
                }
                let (loss, grads) = backprop_pretrain_segment(model, seq.segment(n, l), st, self.cfg)?;
                total += loss.to_f64_lossy();
                frames += l;
                count += 1;
                for (s, g) in grad_sum.iter_mut().zip(&grads) {
                    *s += *g;
                }
            }
            let scale = T::one() / T::from_usize_lossy(count);
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            adam_update(model.params_mut(), &grad_sum, opt, &self.cfg.adam)?;
            if updates.len() <= n {
                updates.resize(n + 1, 0);
            }
            updates[n] += 1;
            // Advance the states with the updated parameters.
            for ((seq, st), prev) in batch.iter().zip(states.iter_mut()).zip(before) {
                if n < seq.num_segments(l) {
                    *st = prev;
                    advance_lstm(model, seq, n * l, l, st)?;
                }
            }
        }
        Ok((total, frames))
    }

    fn evaluate(&self, model: &MaskModel<T>, seqs: &[&PreparedSequence<T>]) -> Result<(f64, usize)> {
        let l = self.cfg.segment_frames;
        let eps = T::lit(self.cfg.loss_floor);
        let mut total = 0.0;
        let mut frames = 0;
        for seq in seqs {
            let mut st = model.zero_state();
            for t in 0..seq.num_segments(l) * l {
                let (mask, next) = model.forward_step(seq.input_mag(t), &st)?;
                st = next;
                let loss = mask_frame_loss(&mask, seq, t, eps, None);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { frame: t });
                }
                total += loss.to_f64_lossy();
                frames += 1;
            }
        }
        Ok((total, frames))
    }
}

fn advance_lstm<T: Real>(
    model: &MaskModel<T>,
    seq: &PreparedSequence<T>,
    start: usize,
    len: usize,
    st: &mut crate::neural::RecurrentState<T>,
) -> Result<()> {
    for t in start..start + len {
        let (_, next) = model.forward_step(seq.input_mag(t), st)?;
        *st = next;
    }
    Ok(())
}

fn mean(total: f64, frames: usize) -> f64 {
    if frames == 0 {
        0.0
    } else {
        total / frames as f64
    }
}

fn run<T: Real, O: Objective<T>>(
    mut model: MaskModel<T>,
    dataset: &[PreparedSequence<T>],
    cfg: &TrainConfig,
    objective: &O,
) -> Result<TrainOutcome<T>> {
    let (train_idx, val_idx) = validation_split(dataset.len(), cfg.validation_fraction, cfg.seed);
    let val: Vec<_> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut order: Vec<_> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = OptimizerState::new(model.params().len(), cfg.lr);
    let mut updates = Vec::new();

    let monitor = |model: &MaskModel<T>, train: &[&PreparedSequence<T>]| -> Result<(f64, Option<f64>)> {
        let (tl, tf) = objective.evaluate(model, train)?;
        let v = if val.is_empty() {
            None
        } else {
            let (vl, vf) = objective.evaluate(model, &val)?;
            Some(mean(vl, vf))
        };
        Ok((mean(tl, tf), v))
    };

    let (train0, val0) = monitor(&model, &order)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: train0,
        val_loss: val0,
        lr: cfg.lr,
        updates: 0,
    }];
    let mut best = val0.unwrap_or(train0);
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut frames = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (l, f) = objective.train_batch(&mut model, batch, &mut opt, &mut updates)?;
            total += l;
            frames += f;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let (vl, vf) = objective.evaluate(&model, &val)?;
            Some(mean(vl, vf))
        };
        let rec = EpochRecord {
            epoch,
            train_loss: mean(total, frames),
            val_loss,
            lr: opt.lr,
            updates: opt.step,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:?} lr {:.3e}",
            rec.train_loss,
            rec.val_loss,
            rec.lr
        );
        let monitored = val_loss.unwrap_or(rec.train_loss);
        history.push(rec);
        if monitored < best {
            best = monitored;
            best_model = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        opt.lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        updates_per_segment: updates,
        stopped_early,
    })
}

/// End-to-end training through the RLS-WPE recursion. Segment 0 of every
/// sequence only initializes the states; segment `n > 0` is differentiated
/// with the states carried in from segment `n - 1`, followed by one optimizer
/// step and a forward pass with the updated parameters to refresh the
/// carried states.
pub fn train_e2e<T: Real>(
    model: MaskModel<T>,
    dataset: &[PreparedSequence<T>],
    wpe_cfg: &WpeConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    wpe_cfg.validate()?;
    check_dataset(dataset, cfg, 2)?;
    if wpe_cfg.delay != cfg.scenario.delay() {
        log::warn!(
            "prediction delay {} differs from the {} default {}",
            wpe_cfg.delay,
            cfg.scenario,
            cfg.scenario.delay()
        );
    }
    run(model, dataset, cfg, &EndToEnd { wpe: wpe_cfg, cfg })
}

/// Trains the mask on the masked-input loss. All segments are optimized.
pub fn pretrain<T: Real>(model: MaskModel<T>, dataset: &[PreparedSequence<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_dataset(dataset, cfg, 1)?;
    run(model, dataset, cfg, &MaskDomain { cfg })
}
