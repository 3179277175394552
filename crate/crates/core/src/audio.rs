//! Planar multichannel audio buffers and WAV file I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Equal-length channels of samples at a common rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelAudio<T> {
    channels: Vec<Vec<T>>,
    sample_rate: u32,
}

impl<T: Real> MultiChannelAudio<T> {
    pub fn new(channels: Vec<Vec<T>>, sample_rate: u32) -> Result<Self> {
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| c.len() != first.len()) {
                return Err(Error::shape("equal channel lengths", "ragged channels"));
            }
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn silence(num_channels: usize, len: usize, sample_rate: u32) -> Self {
        Self {
            channels: vec![vec![T::zero(); len]; num_channels],
            sample_rate,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn channel(&self, d: usize) -> &[T] {
        &self.channels[d]
    }

    pub fn channel_mut(&mut self, d: usize) -> &mut [T] {
        &mut self.channels[d]
    }

    pub fn into_channels(self) -> Vec<Vec<T>> {
        self.channels
    }

    /// Keeps samples `[start, start + len)` of every channel, zero-padding
    /// past the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| (start..start + len).map(|i| c.get(i).copied().unwrap_or_else(T::zero)).collect())
            .collect();
        Self {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> T {
        self.channels.iter().flatten().map(|&v| v * v).sum()
    }

    pub fn peak(&self) -> T {
        self.channels.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn scale(&mut self, gain: T) {
        for v in self.channels.iter_mut().flatten() {
            *v *= gain;
        }
    }

    pub fn map_precision<U: Real>(&self) -> MultiChannelAudio<U> {
        MultiChannelAudio {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&v| U::lit(v.to_f64_lossy())).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<MultiChannelAudio<T>> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let d_count = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::InvalidConfig(format!(
                "unsupported wav encoding {format:?} {bits}-bit"
            )))
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / d_count.max(1)); d_count];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % d_count].push(T::lit(v));
    }
    MultiChannelAudio::new(channels, spec.sample_rate)
}

pub fn write_wav<T: Real>(path: impl AsRef<Path>, audio: &MultiChannelAudio<T>, encoding: WavEncoding) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for i in 0..audio.len() {
        for c in audio.channels() {
            let v = c[i].to_f64_lossy();
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_channels_rejected() {
        assert!(MultiChannelAudio::<f64>::new(vec![vec![0.0; 3], vec![0.0; 4]], 16_000).is_err());
    }

    #[test]
    fn wav_round_trip_both_encodings() {
        let dir = tempdir();
        let audio = MultiChannelAudio::new(
            vec![vec![0.5f64, -0.25, 0.0, 0.125], vec![-1.0, 0.75, 0.5, 0.0]],
            16_000,
        )
        .unwrap();
        for enc in [WavEncoding::Float32, WavEncoding::Pcm16] {
            let path = dir.join(format!("{enc:?}.wav"));
            write_wav(&path, &audio, enc).unwrap();
            let back: MultiChannelAudio<f64> = read_wav(&path).unwrap();
            assert_eq!(back.num_channels(), 2);
            assert_eq!(back.sample_rate(), 16_000);
            // Dyadic values are exact in both encodings.
            assert_eq!(back, audio);
        }
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("owpe-audio-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
