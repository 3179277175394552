//! Streaming STFT analysis/synthesis with a square-root periodic Hann window.
//!
//! Frame `t` covers samples `[t * hop, t * hop + window_len)`. Synthesis uses
//! weighted overlap-add with the same window and divides by the overlap gain
//! `sum_k w^2[n - k * hop]`, so an analysis/synthesis round trip is exact on
//! fully overlapped samples.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::MultiChannelAudio;
use crate::error::{Error, Result};
use crate::scalar::{norm_sqr, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        // 32 ms window, 75 % overlap at 16 kHz.
        Self {
            window_len: 512,
            hop: 128,
            fft_len: 512,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.fft_len == 0 || self.sample_rate == 0 {
            return Err(Error::InvalidConfig("stft sizes must be positive".into()));
        }
        if !self.window_len.is_multiple_of(self.hop) || self.window_len / self.hop < 2 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide window length {} at least twice",
                self.hop, self.window_len
            )));
        }
        if self.fft_len < self.window_len || !self.fft_len.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "fft length {} must be even and >= window length {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of complete frames in a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop
        }
    }

    /// Frame rate in frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Overlap-add gain of the squared window, `sum_k w^2[n - k * hop]`.
    pub fn ola_gain<T: Real>(&self) -> T {
        let w = make_window::<T>(self);
        (0..self.window_len / self.hop)
            .map(|k| {
                let v = w[k * self.hop];
                v * v
            })
            .sum()
    }

    /// Scale relating frame-domain energy to time-domain energy:
    /// `spectral_energy(analyze(x)) ~= parseval_constant * ||x||^2` on a
    /// signal that vanishes near its ends.
    pub fn parseval_constant<T: Real>(&self) -> T {
        T::from_usize_lossy(self.fft_len) * self.ola_gain::<T>()
    }
}

/// Square root of the periodic Hann window.
pub fn make_window<T: Real>(cfg: &StftConfig) -> Vec<T> {
    let n = cfg.window_len;
    let two_pi = T::lit(2.0) * T::PI();
    (0..n)
        .map(|i| {
            let phase = two_pi * T::from_usize_lossy(i) / T::from_usize_lossy(n);
            let hann = T::lit(0.5) * (T::one() - phase.cos());
            hann.max(T::zero()).sqrt()
        })
        .collect()
}

/// Complex STFT tensor indexed by (frame, bin, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelSpectrum<T> {
    num_frames: usize,
    num_bins: usize,
    num_channels: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> MultiChannelSpectrum<T> {
    pub fn zeros(num_frames: usize, num_bins: usize, num_channels: usize) -> Self {
        Self {
            num_frames,
            num_bins,
            num_channels,
            data: vec![Complex::new(T::zero(), T::zero()); num_frames * num_bins * num_channels],
        }
    }

    /// Builds a spectrum from frames laid out bin-major, channel-minor.
    pub fn from_frames(frames: Vec<Vec<Complex<T>>>, num_bins: usize, num_channels: usize) -> Result<Self> {
        let mut spec = Self::zeros(0, num_bins, num_channels);
        for frame in frames {
            spec.push_frame(&frame)?;
        }
        Ok(spec)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn frame_len(&self) -> usize {
        self.num_bins * self.num_channels
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, d: usize) -> Complex<T> {
        self.data[(t * self.num_bins + f) * self.num_channels + d]
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, d: usize, v: Complex<T>) {
        self.data[(t * self.num_bins + f) * self.num_channels + d] = v;
    }

    /// Frame `t` as a flat `F * D` slice.
    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex<T>] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn push_frame(&mut self, frame: &[Complex<T>]) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(Error::shape(
                format!("frame of {} values", self.frame_len()),
                format!("{}", frame.len()),
            ));
        }
        self.data.extend_from_slice(frame);
        self.num_frames += 1;
        Ok(())
    }

    /// Frames `[start, end)` as a new spectrum.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let n = self.frame_len();
        Self {
            num_frames: end - start,
            num_bins: self.num_bins,
            num_channels: self.num_channels,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scale(&mut self, a: T) {
        for z in &mut self.data {
            *z *= a;
        }
    }
}

/// Full-spectrum energy `sum_t sum_k |X_k|^2` reconstructed from the retained
/// half spectrum (bins other than DC and Nyquist count twice).
pub fn spectral_energy<T: Real>(spec: &MultiChannelSpectrum<T>) -> T {
    let last = spec.num_bins() - 1;
    let mut total = T::zero();
    for t in 0..spec.num_frames() {
        for f in 0..spec.num_bins() {
            let weight = if f == 0 || f == last { T::one() } else { T::lit(2.0) };
            for d in 0..spec.num_channels() {
                total += weight * norm_sqr(spec.get(t, f, d));
            }
        }
    }
    total
}

/// Incremental analysis: push `hop` samples per channel, receive a frame once
/// a full window has been buffered.
pub struct StftAnalyzer<T: Real> {
    cfg: StftConfig,
    num_channels: usize,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    history: Vec<Vec<T>>,
    filled: usize,
    scratch: Vec<Complex<T>>,
}

impl<T: Real> StftAnalyzer<T> {
    pub fn new(cfg: StftConfig, num_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len);
        Ok(Self {
            cfg,
            num_channels,
            window: make_window(&cfg),
            fft,
            history: vec![vec![T::zero(); cfg.window_len]; num_channels],
            filled: 0,
            scratch: vec![Complex::new(T::zero(), T::zero()); cfg.fft_len],
        })
    }

    /// Pushes one hop of samples (`hop` per channel). Returns the next frame
    /// (`F * D` values, bin-major) when enough history is available.
    pub fn push(&mut self, hop_samples: &[&[T]]) -> Result<Option<Vec<Complex<T>>>> {
        let hop = self.cfg.hop;
        if hop_samples.len() != self.num_channels || hop_samples.iter().any(|c| c.len() != hop) {
            return Err(Error::shape(
                format!("{} channels x {} samples", self.num_channels, hop),
                format!("{} channels", hop_samples.len()),
            ));
        }
        for (buf, new) in self.history.iter_mut().zip(hop_samples) {
            buf.copy_within(hop.., 0);
            let n = buf.len();
            buf[n - hop..].copy_from_slice(new);
        }
        self.filled = (self.filled + hop).min(self.cfg.window_len);
        if self.filled < self.cfg.window_len {
            return Ok(None);
        }
        Ok(Some(self.transform_history()))
    }

    fn transform_history(&mut self) -> Vec<Complex<T>> {
        let bins = self.cfg.num_bins();
        let d_count = self.num_channels;
        let mut frame = vec![Complex::new(T::zero(), T::zero()); bins * d_count];
        for (d, buf) in self.history.iter().enumerate() {
            for z in self.scratch.iter_mut() {
                *z = Complex::new(T::zero(), T::zero());
            }
            for (i, (&s, &w)) in buf.iter().zip(&self.window).enumerate() {
                self.scratch[i] = Complex::new(s * w, T::zero());
            }
            self.fft.process(&mut self.scratch);
            for f in 0..bins {
                frame[f * d_count + d] = self.scratch[f];
            }
        }
        frame
    }
}

/// Incremental weighted overlap-add synthesis.
pub struct StftSynthesizer<T: Real> {
    cfg: StftConfig,
    num_channels: usize,
    window: Vec<T>,
    ifft: Arc<dyn Fft<T>>,
    overlap: Vec<Vec<T>>,
    norm: T,
    scratch: Vec<Complex<T>>,
}

impl<T: Real> StftSynthesizer<T> {
    pub fn new(cfg: StftConfig, num_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let ifft = FftPlanner::new().plan_fft_inverse(cfg.fft_len);
        let norm = T::one() / (T::from_usize_lossy(cfg.fft_len) * cfg.ola_gain::<T>());
        Ok(Self {
            cfg,
            num_channels,
            window: make_window(&cfg),
            ifft,
            overlap: vec![vec![T::zero(); cfg.window_len]; num_channels],
            norm,
            scratch: vec![Complex::new(T::zero(), T::zero()); cfg.fft_len],
        })
    }

    /// Adds one frame and returns the `hop` samples per channel that are now
    /// final.
    pub fn push(&mut self, frame: &[Complex<T>]) -> Result<Vec<Vec<T>>> {
        let bins = self.cfg.num_bins();
        let d_count = self.num_channels;
        if frame.len() != bins * d_count {
            return Err(Error::shape(
                format!("frame of {} values", bins * d_count),
                format!("{}", frame.len()),
            ));
        }
        let n_fft = self.cfg.fft_len;
        for d in 0..d_count {
            for f in 0..bins {
                self.scratch[f] = frame[f * d_count + d];
            }
            // Hermitian extension; DC and Nyquist imaginary parts are dropped
            // by taking the real part below.
            for f in bins..n_fft {
                self.scratch[f] = frame[(n_fft - f) * d_count + d].conj();
            }
            self.ifft.process(&mut self.scratch);
            let buf = &mut self.overlap[d];
            for (i, (o, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
                *o += self.scratch[i].re * w * self.norm;
            }
        }
        Ok(self.emit(self.cfg.hop))
    }

    fn emit(&mut self, count: usize) -> Vec<Vec<T>> {
        self.overlap
            .iter_mut()
            .map(|buf| {
                let out = buf[..count].to_vec();
                buf.copy_within(count.., 0);
                let n = buf.len();
                for v in &mut buf[n - count..] {
                    *v = T::zero();
                }
                out
            })
            .collect()
    }

    /// Returns the remaining `window_len - hop` buffered samples per channel.
    pub fn flush(&mut self) -> Vec<Vec<T>> {
        let rest = self.cfg.window_len - self.cfg.hop;
        self.emit(rest)
    }
}

/// Batch analysis of a multichannel signal.
pub fn analyze<T: Real>(audio: &MultiChannelAudio<T>, cfg: &StftConfig) -> Result<MultiChannelSpectrum<T>> {
    cfg.validate()?;
    if audio.num_channels() == 0 || audio.is_empty() {
        return Err(Error::EmptyInput);
    }
    if audio.len() < cfg.window_len {
        return Err(Error::shape(
            format!("at least {} samples", cfg.window_len),
            format!("{}", audio.len()),
        ));
    }
    let d_count = audio.num_channels();
    let mut analyzer = StftAnalyzer::new(*cfg, d_count)?;
    let mut spec = MultiChannelSpectrum::zeros(0, cfg.num_bins(), d_count);
    let frames = cfg.num_frames(audio.len());
    let hops = (frames - 1) + cfg.window_len / cfg.hop;
    for h in 0..hops {
        let range = h * cfg.hop..(h + 1) * cfg.hop;
        let chunk: Vec<&[T]> = audio.channels().iter().map(|c| &c[range.clone()]).collect();
        if let Some(frame) = analyzer.push(&chunk)? {
            spec.push_frame(&frame)?;
        }
    }
    Ok(spec)
}

/// Batch synthesis; output length is `(T - 1) * hop + window_len`.
pub fn synthesize<T: Real>(spec: &MultiChannelSpectrum<T>, cfg: &StftConfig) -> Result<MultiChannelAudio<T>> {
    cfg.validate()?;
    if spec.num_bins() != cfg.num_bins() {
        return Err(Error::shape(
            format!("{} bins", cfg.num_bins()),
            format!("{} bins", spec.num_bins()),
        ));
    }
    let d_count = spec.num_channels();
    let mut synth = StftSynthesizer::new(*cfg, d_count)?;
    let mut channels: Vec<Vec<T>> = vec![Vec::new(); d_count];
    let append = |channels: &mut Vec<Vec<T>>, part: Vec<Vec<T>>| {
        for (c, p) in channels.iter_mut().zip(part) {
            c.extend(p);
        }
    };
    if spec.num_frames() == 0 {
        return MultiChannelAudio::new(channels, cfg.sample_rate);
    }
    for t in 0..spec.num_frames() {
        let out = synth.push(spec.frame(t))?;
        append(&mut channels, out);
    }
    append(&mut channels, synth.flush());
    MultiChannelAudio::new(channels, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(len: usize, channels: usize, seed: u64) -> MultiChannelAudio<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ch = (0..channels)
            .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        MultiChannelAudio::new(ch, 16_000).unwrap()
    }

    #[test]
    fn window_of_length_four() {
        let cfg = StftConfig {
            window_len: 4,
            hop: 1,
            fft_len: 4,
            sample_rate: 16_000,
        };
        let w = make_window::<f64>(&cfg);
        let expected = [0.0, 0.5f64.sqrt(), 1.0, 0.5f64.sqrt()];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn window_entries_in_unit_interval() {
        for (n, hop) in [(512, 128), (64, 32), (30, 10)] {
            let cfg = StftConfig {
                window_len: n,
                hop,
                fft_len: n,
                sample_rate: 16_000,
            };
            assert!(make_window::<f64>(&cfg).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn default_window_is_cola() {
        let cfg = StftConfig::default();
        let w = make_window::<f64>(&cfg);
        let sums: Vec<f64> = (0..cfg.hop)
            .map(|n| (0..cfg.window_len / cfg.hop).map(|k| w[n + k * cfg.hop].powi(2)).sum())
            .collect();
        for s in &sums {
            assert!((s - 2.0).abs() < 1e-12, "{s}");
        }
        assert!((cfg.ola_gain::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = StftConfig::default();
        assert!(StftConfig { hop: 100, ..base }.validate().is_err());
        assert!(StftConfig { hop: 512, ..base }.validate().is_err());
        assert!(StftConfig { fft_len: 256, ..base }.validate().is_err());
    }

    #[test]
    fn empty_input_is_error() {
        let audio = MultiChannelAudio::<f64>::new(vec![vec![]], 16_000).unwrap();
        assert!(matches!(analyze(&audio, &StftConfig::default()), Err(Error::EmptyInput)));
    }

    #[test]
    fn zero_audio_gives_zero_spectrum_and_back() {
        let audio = MultiChannelAudio::new(vec![vec![0.0f64; 4096]; 2], 16_000).unwrap();
        let cfg = StftConfig::default();
        let spec = analyze(&audio, &cfg).unwrap();
        assert_eq!(spec.num_bins(), 257);
        assert!(spec.as_slice().iter().all(|z| z.norm() == 0.0));
        let back = synthesize(&spec, &cfg).unwrap();
        assert!(back.channels().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_concentrates_energy() {
        let cfg = StftConfig::default();
        let bin = 32;
        let freq = bin as f64 * cfg.sample_rate as f64 / cfg.fft_len as f64;
        let sig: Vec<f64> = (0..8192)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / cfg.sample_rate as f64).sin())
            .collect();
        let spec = analyze(&MultiChannelAudio::new(vec![sig], 16_000).unwrap(), &cfg).unwrap();
        for t in 1..spec.num_frames() - 1 {
            let peak = (0..spec.num_bins())
                .max_by(|&a, &b| spec.get(t, a, 0).norm().total_cmp(&spec.get(t, b, 0).norm()))
                .unwrap();
            assert_eq!(peak, bin);
            // Square-root Hann leaks only into the immediate neighbours.
            let total: f64 = (0..spec.num_bins()).map(|f| spec.get(t, f, 0).norm_sqr()).sum();
            let local: f64 = (bin - 1..=bin + 1).map(|f| spec.get(t, f, 0).norm_sqr()).sum();
            assert!(local / total > 0.99);
        }
    }

    #[test]
    fn identical_channels_give_identical_spectra() {
        let mono = noise(3000, 1, 3);
        let stereo = MultiChannelAudio::new(vec![mono.channel(0).to_vec(); 2], 16_000).unwrap();
        let spec = analyze(&stereo, &StftConfig::default()).unwrap();
        for t in 0..spec.num_frames() {
            for f in 0..spec.num_bins() {
                assert_eq!(spec.get(t, f, 0), spec.get(t, f, 1));
            }
        }
    }

    #[test]
    fn round_trip_interior_is_exact() {
        let cfg = StftConfig::default();
        let x = noise(16_000, 2, 11);
        let y = synthesize(&analyze(&x, &cfg).unwrap(), &cfg).unwrap();
        let n = cfg.window_len;
        let end = y.len() - n;
        let (mut err, mut energy) = (0.0, 0.0);
        for d in 0..2 {
            for i in n..end {
                err += (y.channel(d)[i] - x.channel(d)[i]).powi(2);
                energy += x.channel(d)[i].powi(2);
            }
        }
        assert!((err / energy).sqrt() <= 1e-10);
    }

    #[test]
    fn single_frame_is_windowed_squared_copy() {
        let cfg = StftConfig::default();
        let x = noise(cfg.window_len, 1, 5);
        let spec = analyze(&x, &cfg).unwrap();
        assert_eq!(spec.num_frames(), 1);
        let y = synthesize(&spec, &cfg).unwrap();
        let w = make_window::<f64>(&cfg);
        let gain = cfg.ola_gain::<f64>();
        for i in 0..cfg.window_len {
            let expected = w[i] * w[i] * x.channel(0)[i] / gain;
            assert!((y.channel(0)[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_constant_holds() {
        let cfg = StftConfig::default();
        let mut x = noise(20_000, 1, 9);
        // Taper the ends so every sample is fully overlapped.
        for i in 0..cfg.window_len {
            x.channel_mut(0)[i] = 0.0;
            let n = x.len();
            x.channel_mut(0)[n - 1 - i] = 0.0;
        }
        let spec = analyze(&x, &cfg).unwrap();
        let time_energy: f64 = x.channel(0).iter().map(|v| v * v).sum();
        let ratio = spectral_energy(&spec) / (cfg.parseval_constant::<f64>() * time_energy);
        assert!((ratio - 1.0).abs() < 1e-10, "{ratio}");
    }

    #[test]
    fn streaming_matches_batch() {
        let cfg = StftConfig::default();
        let x = noise(4096, 2, 1);
        let batch = analyze(&x, &cfg).unwrap();
        let mut an = StftAnalyzer::new(cfg, 2).unwrap();
        let mut t = 0;
        for h in 0..x.len() / cfg.hop {
            let r = h * cfg.hop..(h + 1) * cfg.hop;
            let chunk = [&x.channel(0)[r.clone()], &x.channel(1)[r]];
            if let Some(frame) = an.push(&chunk).unwrap() {
                assert_eq!(frame.as_slice(), batch.frame(t));
                t += 1;
            }
        }
        assert_eq!(t, batch.num_frames());
    }

    #[test]
    fn shape_mismatch_in_synthesis() {
        let spec = MultiChannelSpectrum::<f64>::zeros(3, 129, 1);
        assert!(synthesize(&spec, &StftConfig::default()).is_err());
    }
}
