//! Frame-by-frame dereverberation: STFT analysis, PSD estimation, RLS-WPE
//! and overlap-add synthesis.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audio::MultiChannelAudio;
use crate::error::{Error, Result};
use crate::neural::{MaskModel, RecurrentState};
use crate::psd::{channel_average_magnitude, mask_to_psd, oracle_psd, PsdConfig, SmoothedPsd};
use crate::scalar::Real;
use crate::stft::{MultiChannelSpectrum, StftAnalyzer, StftConfig, StftSynthesizer};
use crate::wpe::{init_state, WpeConfig, WpeState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsdMode {
    #[default]
    Vanilla,
    Oracle,
    Model,
}

impl fmt::Display for PsdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsdMode::Vanilla => "vanilla",
            PsdMode::Oracle => "oracle",
            PsdMode::Model => "model",
        })
    }
}

impl FromStr for PsdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(PsdMode::Vanilla),
            "oracle" => Ok(PsdMode::Oracle),
            "model" | "dnn" => Ok(PsdMode::Model),
            other => Err(Error::InvalidConfig(format!("unknown psd mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub psd: PsdConfig,
}

/// Stateful per-frame PSD estimate.
#[derive(Clone, Debug)]
pub enum PsdEstimator<T> {
    Vanilla(SmoothedPsd<T>),
    /// Requires the target frame alongside every input frame.
    Oracle,
    Model {
        model: MaskModel<T>,
        state: RecurrentState<T>,
    },
}

impl<T: Real> PsdEstimator<T> {
    pub fn vanilla(num_bins: usize, cfg: &PsdConfig) -> Result<Self> {
        Ok(PsdEstimator::Vanilla(SmoothedPsd::new(num_bins, T::lit(cfg.smoothing))?))
    }

    pub fn model(model: MaskModel<T>) -> Self {
        let state = model.zero_state();
        PsdEstimator::Model { model, state }
    }

    pub fn mode(&self) -> PsdMode {
        match self {
            PsdEstimator::Vanilla(_) => PsdMode::Vanilla,
            PsdEstimator::Oracle => PsdMode::Oracle,
            PsdEstimator::Model { .. } => PsdMode::Model,
        }
    }

    pub fn estimate(&mut self, frame: &[Complex<T>], target: Option<&[Complex<T>]>, num_channels: usize) -> Result<Vec<T>> {
        match self {
            PsdEstimator::Vanilla(s) => Ok(s.update(&channel_average_magnitude(frame, num_channels)).to_vec()),
            PsdEstimator::Oracle => {
                let target = target.ok_or_else(|| Error::Missing("oracle PSD needs the target signal".into()))?;
                Ok(oracle_psd(target, num_channels))
            }
            PsdEstimator::Model { model, state } => {
                let mag = channel_average_magnitude(frame, num_channels);
                let (mask, next) = model.forward_step(&mag, state)?;
                *state = next;
                Ok(mask_to_psd(&mask, &mag))
            }
        }
    }
}

/// Runs the online filter over a whole spectrum.
pub fn dereverb_spectrum<T: Real>(
    input: &MultiChannelSpectrum<T>,
    target: Option<&MultiChannelSpectrum<T>>,
    estimator: &mut PsdEstimator<T>,
    wpe_cfg: &WpeConfig,
) -> Result<MultiChannelSpectrum<T>> {
    if let Some(t) = target {
        if t.num_frames() != input.num_frames() || t.frame_len() != input.frame_len() {
            return Err(Error::shape("target spectrum shaped like input", format!("{} frames", t.num_frames())));
        }
    }
    let d_count = input.num_channels();
    let mut wpe: WpeState<T> = init_state(wpe_cfg, input.num_bins())?;
    let mut out = MultiChannelSpectrum::zeros(input.num_frames(), input.num_bins(), d_count);
    for t in 0..input.num_frames() {
        let frame = input.frame(t);
        let lambda = estimator.estimate(frame, target.map(|s| s.frame(t)), d_count)?;
        wpe.step_into(frame, &lambda, out.frame_mut(t))?;
    }
    Ok(out)
}

/// Streaming dereverberator. Each call consumes one hop of samples per
/// channel and returns one hop of output delayed by [`Self::latency`].
pub struct OnlineDereverb<T: Real> {
    cfg: PipelineConfig,
    analyzer: StftAnalyzer<T>,
    target_analyzer: Option<StftAnalyzer<T>>,
    synthesizer: StftSynthesizer<T>,
    wpe: WpeState<T>,
    estimator: PsdEstimator<T>,
    out_frame: Vec<Complex<T>>,
}

impl<T: Real> OnlineDereverb<T> {
    pub fn new(cfg: PipelineConfig, estimator: PsdEstimator<T>) -> Result<Self> {
        cfg.stft.validate()?;
        cfg.wpe.validate()?;
        let d = cfg.wpe.num_channels;
        let bins = cfg.stft.num_bins();
        let target_analyzer = match estimator.mode() {
            PsdMode::Oracle => Some(StftAnalyzer::new(cfg.stft, d)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            analyzer: StftAnalyzer::new(cfg.stft, d)?,
            target_analyzer,
            synthesizer: StftSynthesizer::new(cfg.stft, d)?,
            wpe: init_state(&cfg.wpe, bins)?,
            estimator,
            out_frame: vec![Complex::new(T::zero(), T::zero()); bins * d],
        })
    }

    /// Input-to-output delay in samples.
    pub fn latency(&self) -> usize {
        self.cfg.stft.window_len - self.cfg.stft.hop
    }

    pub fn wpe(&self) -> &WpeState<T> {
        &self.wpe
    }

    pub fn process_hop(&mut self, input: &[&[T]], target: Option<&[&[T]]>) -> Result<Vec<Vec<T>>> {
        let d = self.cfg.wpe.num_channels;
        let frame = self.analyzer.push(input)?;
        let target_frame = match (&mut self.target_analyzer, target) {
            (Some(a), Some(t)) => a.push(t)?,
            (Some(_), None) => return Err(Error::Missing("oracle PSD needs the target signal".into())),
            _ => None,
        };
        let Some(frame) = frame else {
            return Ok(vec![vec![T::zero(); self.cfg.stft.hop]; d]);
        };
        let lambda = self.estimator.estimate(&frame, target_frame.as_deref(), d)?;
        self.wpe.step_into(&frame, &lambda, &mut self.out_frame)?;
        self.synthesizer.push(&self.out_frame)
    }
}

/// Processes a whole recording through [`OnlineDereverb`] and returns an
/// output aligned sample-by-sample with the input. The signal is padded with
/// one window of zeros in front (and enough at the end) so every input
/// sample is fully reconstructed; the padding is stripped afterwards.
pub fn dereverb_audio<T: Real>(
    input: &MultiChannelAudio<T>,
    target: Option<&MultiChannelAudio<T>>,
    estimator: PsdEstimator<T>,
    cfg: &PipelineConfig,
) -> Result<MultiChannelAudio<T>> {
    if input.is_empty() {
        return Err(Error::EmptyInput);
    }
    if input.num_channels() != cfg.wpe.num_channels {
        return Err(Error::shape(
            format!("{} channels", cfg.wpe.num_channels),
            format!("{}", input.num_channels()),
        ));
    }
    if input.sample_rate() != cfg.stft.sample_rate {
        return Err(Error::InvalidConfig(format!(
            "input sample rate {} differs from {}",
            input.sample_rate(),
            cfg.stft.sample_rate
        )));
    }
    if let Some(t) = target {
        if t.len() != input.len() || t.num_channels() != input.num_channels() {
            return Err(Error::shape("target shaped like input", format!("{} samples", t.len())));
        }
    }
    let mut stream = OnlineDereverb::new(*cfg, estimator)?;
    let hop = cfg.stft.hop;
    let pad = stream.latency();
    let skip = 2 * pad;
    let hops = (skip + input.len()).div_ceil(hop);
    let padded = |a: &MultiChannelAudio<T>| {
        a.channels()
            .iter()
            .map(|c| {
                let mut v = vec![T::zero(); pad];
                v.extend_from_slice(c);
                v.resize(hops * hop, T::zero());
                v
            })
            .collect::<Vec<_>>()
    };
    let x = padded(input);
    let tgt = target.map(padded);
    let mut out: Vec<Vec<T>> = vec![Vec::with_capacity(hops * hop); input.num_channels()];
    for h in 0..hops {
        let r = h * hop..(h + 1) * hop;
        let chunk: Vec<&[T]> = x.iter().map(|c| &c[r.clone()]).collect();
        let tchunk: Option<Vec<&[T]>> = tgt.as_ref().map(|t| t.iter().map(|c| &c[r.clone()]).collect());
        let y = stream.process_hop(&chunk, tchunk.as_deref())?;
        for (o, part) in out.iter_mut().zip(y) {
            o.extend(part);
        }
    }
    let channels = out.into_iter().map(|c| c[skip..skip + input.len()].to_vec()).collect();
    MultiChannelAudio::new(channels, input.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::analyze;

    fn noise(len: usize, d: usize) -> MultiChannelAudio<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        MultiChannelAudio::new(
            (0..d).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn oracle_without_target_is_an_error() {
        let cfg = PipelineConfig::default();
        let x = noise(4000, 2);
        assert!(matches!(dereverb_audio(&x, None, PsdEstimator::Oracle, &cfg), Err(Error::Missing(_))));
    }

    #[test]
    fn silence_in_silence_out() {
        let cfg = PipelineConfig::default();
        let x = MultiChannelAudio::<f64>::silence(2, 8000, 16000);
        let est = PsdEstimator::vanilla(257, &cfg.psd).unwrap();
        let y = dereverb_audio(&x, None, est, &cfg).unwrap();
        assert_eq!(y.len(), 8000);
        assert!(y.peak() == 0.0);
    }

    #[test]
    fn frozen_filter_reconstructs_input() {
        // With the gate never open the filter stays zero and the pipeline is
        // a plain STFT round trip.
        let mut cfg = PipelineConfig::default();
        cfg.wpe.gate_threshold_db = 400.0;
        let x = noise(6000, 2);
        let est = PsdEstimator::vanilla(257, &cfg.psd).unwrap();
        let y = dereverb_audio(&x, None, est, &cfg).unwrap();
        let err: f64 = x.channels().iter().flatten().zip(y.channels().iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err / x.energy() < 1e-20, "{}", err / x.energy());
    }

    #[test]
    fn streaming_matches_spectral_processing() {
        let cfg = PipelineConfig::default();
        let x = noise(5000, 2);
        let spec = analyze(&x, &cfg.stft).unwrap();
        let mut est = PsdEstimator::vanilla(257, &cfg.psd).unwrap();
        let out = dereverb_spectrum(&spec, None, &mut est, &cfg.wpe).unwrap();

        let mut stream = OnlineDereverb::new(cfg, PsdEstimator::vanilla(257, &cfg.psd).unwrap()).unwrap();
        let hop = cfg.stft.hop;
        let mut frames = 0;
        for h in 0..x.len() / hop {
            let chunk: Vec<&[f64]> = x.channels().iter().map(|c| &c[h * hop..(h + 1) * hop]).collect();
            stream.process_hop(&chunk, None).unwrap();
            if h + 1 >= cfg.stft.window_len / hop {
                frames += 1;
            }
        }
        assert_eq!(frames, out.num_frames());
        assert_eq!(stream.wpe().frames_seen() as usize, out.num_frames());
        let mut ref_state: WpeState<f64> = init_state(&cfg.wpe, 257).unwrap();
        let mut e2 = PsdEstimator::vanilla(257, &cfg.psd).unwrap();
        for t in 0..spec.num_frames() {
            let l = e2.estimate(spec.frame(t), None, 2).unwrap();
            ref_state.step(spec.frame(t), &l).unwrap();
        }
        assert_eq!(stream.wpe().filter(40), ref_state.filter(40));
    }

    #[test]
    fn psd_mode_parses() {
        assert_eq!("Oracle".parse::<PsdMode>().unwrap(), PsdMode::Oracle);
        assert!("other".parse::<PsdMode>().is_err());
    }
}
