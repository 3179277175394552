//! Synthetic reverberant scenes: image-source RIRs, listener-specific
//! targets, speech-like sources and paired rendering.

mod rir;
mod speech;

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use rir::{generate_rir, schroeder_t60, split_target_rir, Point, Rir, SceneSpec, EARLY_WINDOW_SECS, SPEED_OF_SOUND};
pub use speech::{build_sequence, synthetic_utterance};

use crate::audio::{write_wav, MultiChannelAudio, WavEncoding};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// Full linear convolution via zero-padded FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|z| z.re * scale).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub t60: f64,
    pub seed: u64,
    pub utterances: Vec<usize>,
    /// Direct-path arrival per channel, in samples.
    pub arrivals: Vec<usize>,
}

/// Reverberant microphone signals and the matching dereverberation target.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub reverberant: MultiChannelAudio<f64>,
    pub target: MultiChannelAudio<f64>,
    pub scenario: Scenario,
    pub meta: PairMeta,
}

/// Convolves `dry` with each channel of `rir` and `target_rir`; both outputs
/// keep the length of `dry`.
pub fn render(dry: &[f64], rir: &Rir, target_rir: &Rir, scenario: Scenario, meta: PairMeta) -> Result<RenderedPair> {
    if dry.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rir.num_channels() != target_rir.num_channels() {
        return Err(Error::shape(
            format!("{} target channels", rir.num_channels()),
            format!("{}", target_rir.num_channels()),
        ));
    }
    let conv = |r: &Rir| -> Vec<Vec<f64>> {
        r.channels
            .iter()
            .map(|h| {
                let mut y = fft_convolve(dry, h);
                y.truncate(dry.len());
                y
            })
            .collect()
    };
    Ok(RenderedPair {
        reverberant: MultiChannelAudio::new(conv(rir), rir.sample_rate)?,
        target: MultiChannelAudio::new(conv(target_rir), rir.sample_rate)?,
        scenario,
        meta,
    })
}

/// Settings for synthetic dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_sequences: usize,
    pub sequence_secs: f64,
    pub t60_min: f64,
    pub t60_max: f64,
    pub utterance_min_secs: f64,
    pub utterance_max_secs: f64,
    pub utterances_per_sequence: usize,
    pub mic_spacing: f64,
    /// Level of the stationary recording floor added to the dry source,
    /// relative to its active RMS. `None` leaves digital silence in pauses.
    pub source_floor_db: Option<f64>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_sequences: 20,
            sequence_secs: 20.0,
            t60_min: 0.4,
            t60_max: 1.0,
            utterance_min_secs: 2.0,
            utterance_max_secs: 8.0,
            utterances_per_sequence: 6,
            mic_spacing: 0.16,
            source_floor_db: Some(-40.0),
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.utterances_per_sequence == 0 {
            return Err(Error::InvalidConfig("need at least one sequence and one utterance".into()));
        }
        if !(self.t60_min > 0.0 && self.t60_min <= self.t60_max) {
            return Err(Error::InvalidConfig(format!("T60 range [{}, {}]", self.t60_min, self.t60_max)));
        }
        if !(self.utterance_min_secs > 0.0 && self.utterance_min_secs <= self.utterance_max_secs) || !(self.sequence_secs > 0.0) {
            return Err(Error::InvalidConfig("durations must be positive and ordered".into()));
        }
        Ok(())
    }

    fn item_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
    }

    /// T60 of sequence `index`: stratified over the range so every part of
    /// it is covered.
    fn t60(&self, index: usize, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        self.t60_min + (self.t60_max - self.t60_min) * (index as f64 + u) / self.num_sequences as f64
    }
}

/// Random shoebox room with a horizontal two-microphone array and a source
/// 1 to 2.5 m away, everything at least 0.5 m from the walls.
pub fn random_scene(rng: &mut ChaCha8Rng, t60: f64, mic_spacing: f64, sample_rate: u32, seed: u64) -> SceneSpec {
    let margin = 0.5;
    loop {
        let room = [rng.random_range(5.0..8.0), rng.random_range(4.0..6.5), rng.random_range(2.6..3.4)];
        let centre = [
            rng.random_range(1.0..room[0] - 1.0),
            rng.random_range(1.0..room[1] - 1.0),
            rng.random_range(1.2..1.7),
        ];
        let axis: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let half = 0.5 * mic_spacing;
        let mics = vec![
            [centre[0] - half * axis.cos(), centre[1] - half * axis.sin(), centre[2]],
            [centre[0] + half * axis.cos(), centre[1] + half * axis.sin(), centre[2]],
        ];
        let dist = rng.random_range(1.0..2.5);
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let source = [
            centre[0] + dist * az.cos(),
            centre[1] + dist * az.sin(),
            rng.random_range(1.2..1.9),
        ];
        let ok = |p: &Point| p.iter().zip(&room).all(|(&c, &l)| c >= margin && c <= l - margin);
        if ok(&source) && mics.iter().all(ok) {
            let spec = SceneSpec {
                room,
                source,
                mics,
                t60,
                sample_rate,
                seed,
            };
            if spec.absorption().is_ok() {
                return spec;
            }
        }
    }
}

/// Adds white noise `db` below the RMS of the non-silent samples.
pub fn add_floor(x: &mut [f64], db: f64, seed: u64) {
    let active: Vec<f64> = x.iter().copied().filter(|v| *v != 0.0).collect();
    if active.is_empty() {
        return;
    }
    let rms = (active.iter().map(|v| v * v).sum::<f64>() / active.len() as f64).sqrt();
    let sigma = rms * 10f64.powf(db / 20.0);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in x.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// Scene, dry source and utterance order of dataset item `index`.
pub fn synthesize_item(cfg: &DataConfig, index: usize) -> Result<(SceneSpec, Vec<f64>, Vec<usize>)> {
    cfg.validate()?;
    let seed = cfg.item_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t60 = cfg.t60(index, &mut rng);
    let spec = random_scene(&mut rng, t60, cfg.mic_spacing, cfg.sample_rate, seed);
    let utts: Vec<Vec<f64>> = (0..cfg.utterances_per_sequence)
        .map(|_| {
            let secs = rng.random_range(cfg.utterance_min_secs..=cfg.utterance_max_secs);
            synthetic_utterance(rng.random(), secs, cfg.sample_rate)
        })
        .collect();
    let (mut dry, order) = build_sequence(&utts, cfg.sample_rate, cfg.sequence_secs, rng.random())?;
    if let Some(db) = cfg.source_floor_db {
        add_floor(&mut dry, db, rng.random());
    }
    Ok((spec, dry, order))
}

/// Renders dataset item `index` for one listener profile.
pub fn render_item(cfg: &DataConfig, index: usize, scenario: Scenario) -> Result<RenderedPair> {
    let (spec, dry, order) = synthesize_item(cfg, index)?;
    let rir = generate_rir(&spec)?;
    let target = split_target_rir(&rir, scenario);
    let meta = PairMeta {
        t60: spec.t60,
        seed: spec.seed,
        utterances: order,
        arrivals: rir.arrivals.clone(),
    };
    render(&dry, &rir, &target, scenario, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest file.
    pub input: PathBuf,
    pub target: PathBuf,
    pub scenario: Scenario,
    pub t60: f64,
    pub seed: u64,
    pub utterances: Vec<usize>,
    pub duration_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_FORMAT: &str = "online-wpe-dataset";

impl DatasetManifest {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            sample_rate,
            entries: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::InvalidConfig(format!("{} is not a dataset manifest", path.display())));
        }
        Ok(m)
    }
}

/// Renders `cfg.num_sequences` pairs into `out_dir` and writes
/// `out_dir/manifest.json`.
pub fn generate_dataset(cfg: &DataConfig, scenario: Scenario, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(cfg.sample_rate);
    for i in 0..cfg.num_sequences {
        let pair = render_item(cfg, i, scenario)?;
        let id = format!("seq{i:04}");
        let input = PathBuf::from(format!("{id}_reverb.wav"));
        let target = PathBuf::from(format!("{id}_target_{}.wav", scenario.to_string().to_lowercase()));
        write_wav(out_dir.join(&input), &pair.reverberant, WavEncoding::Float32)?;
        write_wav(out_dir.join(&target), &pair.target, WavEncoding::Float32)?;
        log::info!("{id}: T60 {:.2} s, {:.1} s", pair.meta.t60, pair.reverberant.duration_secs());
        manifest.entries.push(ManifestEntry {
            id,
            input,
            target,
            scenario,
            t60: pair.meta.t60,
            seed: pair.meta.seed,
            utterances: pair.meta.utterances,
            duration_secs: pair.reverberant.duration_secs(),
        });
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convolution_with_unit_impulse_is_identity() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = fft_convolve(&x, &[1.0]);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let h = [0.25, 1.0, -1.0];
        let y = fft_convolve(&x, &h);
        let mut r = vec![0.0; 6];
        for (i, a) in x.iter().enumerate() {
            for (j, b) in h.iter().enumerate() {
                r[i + j] += a * b;
            }
        }
        assert!(y.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn white_noise_energy_scales_with_rir_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..400_000).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let h: Vec<f64> = (0..300).map(|i| 0.9f64.powi(i) * if i % 7 == 0 { -1.0 } else { 0.5 }).collect();
        let y = fft_convolve(&x, &h);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = y[..x.len()].iter().map(|v| v * v).sum();
        let nh: f64 = h.iter().map(|v| v * v).sum();
        assert!((ey / (ex * nh) - 1.0).abs() < 0.01);
    }

    #[test]
    fn unit_rir_renders_the_source() {
        let dry = synthetic_utterance(0, 0.5, 16000);
        let mut h = vec![0.0; 10];
        h[0] = 1.0;
        let rir = Rir {
            channels: vec![h.clone(), h],
            arrivals: vec![0, 0],
            direct_gains: vec![1.0, 1.0],
            sample_rate: 16000,
        };
        let meta = PairMeta {
            t60: 0.0,
            seed: 0,
            utterances: vec![0],
            arrivals: vec![0, 0],
        };
        let pair = render(&dry, &rir, &rir, Scenario::Ha, meta).unwrap();
        for d in 0..2 {
            assert!(pair.reverberant.channel(d).iter().zip(&dry).all(|(a, b)| (a - b).abs() < 1e-12));
            assert_eq!(pair.reverberant.channel(d), pair.target.channel(d));
        }
    }

    #[test]
    fn ci_target_aligned_with_direct_path() {
        let cfg = DataConfig {
            sequence_secs: 1.0,
            utterance_min_secs: 0.5,
            utterance_max_secs: 0.5,
            utterances_per_sequence: 2,
            ..DataConfig::default()
        };
        let (spec, dry, _) = synthesize_item(&cfg, 3).unwrap();
        let rir = generate_rir(&spec).unwrap();
        let pair = render(&dry, &rir, &split_target_rir(&rir, Scenario::Ci), Scenario::Ci, PairMeta {
            t60: spec.t60,
            seed: 0,
            utterances: vec![],
            arrivals: rir.arrivals.clone(),
        })
        .unwrap();
        for d in 0..2 {
            let y = pair.target.channel(d);
            let best = (0..200)
                .max_by(|&a, &b| {
                    let ca: f64 = dry.iter().zip(&y[a..]).map(|(p, q)| p * q).sum();
                    let cb: f64 = dry.iter().zip(&y[b..]).map(|(p, q)| p * q).sum();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            assert_eq!(best, spec.direct_delay(d));
        }
    }

    #[test]
    fn items_are_deterministic_and_in_range() {
        let cfg = DataConfig {
            num_sequences: 6,
            sequence_secs: 2.0,
            utterance_min_secs: 0.5,
            utterance_max_secs: 1.0,
            ..DataConfig::default()
        };
        for i in 0..6 {
            let a = synthesize_item(&cfg, i).unwrap();
            assert_eq!(a, synthesize_item(&cfg, i).unwrap());
            a.0.validate().unwrap();
            assert!((0.4..=1.0).contains(&a.0.t60));
        }
    }
}
