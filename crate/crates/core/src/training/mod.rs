//! End-to-end and mask-domain training of the PSD network.
//!
//! Sequences are cut into segments of `segment_frames` frames. The first
//! segment of every sequence only warms up the LSTM and RLS statistics; each
//! later segment is differentiated on its own with the states carried in from
//! the previous segment treated as constants.

mod adam;
mod gradcheck;
mod loss;
mod schedule;
mod tape;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, OptimizerState};
pub use gradcheck::{check_e2e_gradient, check_pretrain_gradient, GradCheckReport};
pub use loss::kl_loss;
pub use schedule::{pretrain, train_e2e, validation_split, EpochRecord, TrainOutcome};
pub use tape::{backprop_pretrain_segment, backprop_segment, segment_loss, NodeId, NodeKind, Tape, TapeNode};

use crate::error::{Error, Result};
use crate::neural::{MaskModel, RecurrentState};
use crate::psd::channel_average_magnitude;
use crate::scalar::Real;
use crate::scenario::Scenario;
use crate::stft::MultiChannelSpectrum;
use crate::wpe::{init_state, WpeConfig, WpeState};

/// How output and target magnitudes are compared in the end-to-end loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// KL between channel-averaged magnitudes.
    #[default]
    ChannelAverage,
    /// Sum of per-channel KL terms.
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Sequences per mini-batch; each batch element contributes one segment
    /// per update.
    pub batch_size: usize,
    pub segment_frames: usize,
    pub loss_floor: f64,
    pub loss_mode: LossMode,
    pub scenario: Scenario,
    pub validation_fraction: f64,
    pub shuffle: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Frames between stored RLS states in the backward pass; 0 picks
    /// `ceil(sqrt(segment_frames))`.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.96,
            patience: 10,
            max_epochs: 100,
            batch_size: 8,
            segment_frames: 500,
            loss_floor: 1e-8,
            loss_mode: LossMode::ChannelAverage,
            scenario: Scenario::Ha,
            validation_fraction: 0.1,
            shuffle: true,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} / decay {} out of range",
                self.lr, self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.segment_frames == 0 {
            return Err(Error::InvalidConfig("batch size and segment length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn block_len(&self) -> usize {
        if self.checkpoint_interval > 0 {
            self.checkpoint_interval
        } else {
            (self.segment_frames as f64).sqrt().ceil() as usize
        }
    }
}

/// One training sequence with its per-frame magnitude features.
#[derive(Clone, Debug)]
pub struct PreparedSequence<T> {
    pub id: String,
    pub t60: f64,
    input: MultiChannelSpectrum<T>,
    input_mag: Vec<T>,
    target_mag: Vec<T>,
    target_mag_ch: Vec<T>,
}

impl<T: Real> PreparedSequence<T> {
    pub fn new(id: impl Into<String>, t60: f64, input: MultiChannelSpectrum<T>, target: &MultiChannelSpectrum<T>) -> Result<Self> {
        if input.num_frames() != target.num_frames()
            || input.num_bins() != target.num_bins()
            || input.num_channels() != target.num_channels()
        {
            return Err(Error::shape(
                format!("target shaped like input ({} frames)", input.num_frames()),
                format!("{} frames", target.num_frames()),
            ));
        }
        let d = input.num_channels();
        let mut input_mag = Vec::with_capacity(input.num_frames() * input.num_bins());
        let mut target_mag = Vec::with_capacity(input_mag.capacity());
        let mut target_mag_ch = Vec::with_capacity(input_mag.capacity() * d);
        for t in 0..input.num_frames() {
            input_mag.extend(channel_average_magnitude(input.frame(t), d));
            target_mag.extend(channel_average_magnitude(target.frame(t), d));
            target_mag_ch.extend(target.frame(t).iter().map(|z| z.norm()));
        }
        Ok(Self {
            id: id.into(),
            t60,
            input,
            input_mag,
            target_mag,
            target_mag_ch,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.input.num_frames()
    }

    pub fn num_bins(&self) -> usize {
        self.input.num_bins()
    }

    pub fn num_channels(&self) -> usize {
        self.input.num_channels()
    }

    pub fn num_segments(&self, segment_frames: usize) -> usize {
        self.num_frames() / segment_frames
    }

    pub fn input(&self) -> &MultiChannelSpectrum<T> {
        &self.input
    }

    pub(crate) fn input_mag(&self, t: usize) -> &[T] {
        let f = self.num_bins();
        &self.input_mag[t * f..(t + 1) * f]
    }

    pub(crate) fn target_mag(&self, t: usize) -> &[T] {
        let f = self.num_bins();
        &self.target_mag[t * f..(t + 1) * f]
    }

    pub(crate) fn target_mag_ch(&self, t: usize) -> &[T] {
        let n = self.num_bins() * self.num_channels();
        &self.target_mag_ch[t * n..(t + 1) * n]
    }

    pub fn segment(&self, index: usize, segment_frames: usize) -> Segment<'_, T> {
        Segment {
            seq: self,
            start: index * segment_frames,
            len: segment_frames,
        }
    }
}

/// Frames `[start, start + len)` of a sequence.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a, T> {
    pub seq: &'a PreparedSequence<T>,
    pub start: usize,
    pub len: usize,
}

/// States handed from one segment to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct CarriedState<T> {
    pub lstm: RecurrentState<T>,
    pub wpe: WpeState<T>,
}

impl<T: Real> CarriedState<T> {
    /// Zero LSTM state, `G = 0`, `R^-1 = I`.
    pub fn initial(model: &MaskModel<T>, wpe_cfg: &WpeConfig, num_bins: usize) -> Result<Self> {
        Ok(Self {
            lstm: model.zero_state(),
            wpe: init_state(wpe_cfg, num_bins)?,
        })
    }
}

/// End-to-end loss of one output frame. When `grad` is given, the adjoint of
/// the loss with respect to the output (as `dL/dRe + i dL/dIm`) is written
/// into it.
pub(crate) fn output_frame_loss<T: Real>(
    out: &[Complex<T>],
    seq: &PreparedSequence<T>,
    t: usize,
    mode: LossMode,
    eps: T,
    grad: Option<&mut [Complex<T>]>,
) -> T {
    let d_count = seq.num_channels();
    let unit = |z: Complex<T>| {
        let n = z.norm();
        if n > T::zero() {
            z / n
        } else {
            Complex::new(T::zero(), T::zero())
        }
    };
    match mode {
        LossMode::ChannelAverage => {
            let target = seq.target_mag(t);
            let inv_d = T::one() / T::from_usize_lossy(d_count);
            let mut total = T::zero();
            let mut grad = grad;
            for (f, bin) in out.chunks_exact(d_count).enumerate() {
                let a = bin.iter().map(|z| z.norm()).sum::<T>() * inv_d;
                total += loss::kl_term(a, target[f], eps);
                if let Some(g) = grad.as_deref_mut() {
                    let da = loss::kl_term_grad(a, target[f], eps) * inv_d;
                    for (d, &z) in bin.iter().enumerate() {
                        g[f * d_count + d] = unit(z) * da;
                    }
                }
            }
            total
        }
        LossMode::PerChannel => {
            let target = seq.target_mag_ch(t);
            let mut total = T::zero();
            let mut grad = grad;
            for (i, &z) in out.iter().enumerate() {
                let a = z.norm();
                total += loss::kl_term(a, target[i], eps);
                if let Some(g) = grad.as_deref_mut() {
                    g[i] = unit(z) * loss::kl_term_grad(a, target[i], eps);
                }
            }
            total
        }
    }
}

/// Mask-domain loss `KL(M * |x_bar|, |nu_bar|)` of one frame, optionally
/// writing `dL/dM`.
pub(crate) fn mask_frame_loss<T: Real>(mask: &[T], seq: &PreparedSequence<T>, t: usize, eps: T, grad: Option<&mut [T]>) -> T {
    let x = seq.input_mag(t);
    let target = seq.target_mag(t);
    let mut total = T::zero();
    let mut grad = grad;
    for f in 0..mask.len() {
        let a = mask[f] * x[f];
        total += loss::kl_term(a, target[f], eps);
        if let Some(g) = grad.as_deref_mut() {
            g[f] = loss::kl_term_grad(a, target[f], eps) * x[f];
        }
    }
    total
}
