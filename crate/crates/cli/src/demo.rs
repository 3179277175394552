//! Speech followed by a Dirac impulse in a reverberant room: per-bin
//! log-energy maps before and after dereverberation.

use std::fmt::Write as _;
use std::path::PathBuf;

use online_wpe::acoustics::{add_floor, generate_rir, random_scene, render, split_target_rir, synthetic_utterance, PairMeta};
use online_wpe::pipeline::{dereverb_audio, PsdEstimator};
use online_wpe::{analyze, MaskModel, MultiChannelAudio, MultiChannelSpectrum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::write_file;
use crate::config::RunConfig;
use crate::CliResult;

const SPEECH_SECS: f64 = 3.0;
const GAP_SECS: f64 = 1.0;
const TAIL_SECS: f64 = 1.5;
/// Tail window measured after the impulse, in seconds.
const TAIL_WINDOW: (f64, f64) = (0.05, 0.6);

pub struct DemoOptions {
    pub t60: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct DemoSummary {
    pub t60: f64,
    pub impulse_secs: f64,
    pub tail_window_secs: (f64, f64),
    /// Tail energy per signal in dB, relative to the reverberant tail.
    pub tail_energy_db: Vec<(String, f64)>,
    pub files: Vec<String>,
}

fn log_energy_csv(spec: &MultiChannelSpectrum<f64>) -> String {
    let mut s = String::new();
    for t in 0..spec.num_frames() {
        let row: Vec<String> = (0..spec.num_bins())
            .map(|f| format!("{:.2}", 10.0 * (spec.get(t, f, 0).norm_sqr() + 1e-12).log10()))
            .collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn tail_energy(x: &MultiChannelAudio<f64>, start: usize, end: usize) -> f64 {
    let end = end.min(x.len());
    x.channel(0)[start.min(end)..end].iter().map(|v| v * v).sum()
}

pub fn demo_dirac(cfg: &RunConfig, opts: &DemoOptions, model: Option<MaskModel<f64>>) -> CliResult<DemoSummary> {
    let fs = cfg.stft.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = random_scene(&mut rng, opts.t60, cfg.data.mic_spacing, fs, cfg.seed);
    let rir = generate_rir(&spec)?;
    let target_rir = split_target_rir(&rir, cfg.scenario);

    let speech = synthetic_utterance(cfg.seed, SPEECH_SECS, fs);
    let peak = speech.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let impulse_at = ((SPEECH_SECS + GAP_SECS) * fs as f64) as usize;
    let mut dry = speech;
    dry.resize(impulse_at + (TAIL_SECS * fs as f64) as usize, 0.0);
    dry[impulse_at] = peak;
    if let Some(db) = cfg.data.source_floor_db {
        add_floor(&mut dry, db, cfg.seed.wrapping_add(1));
    }
    let meta = PairMeta {
        t60: opts.t60,
        seed: cfg.seed,
        utterances: vec![0],
        arrivals: rir.arrivals.clone(),
    };
    let pair = render(&dry, &rir, &target_rir, cfg.scenario, meta)?;
    let mut pcfg = cfg.pipeline();
    pcfg.wpe.num_channels = pair.reverberant.num_channels();

    let mut outputs = vec![
        ("clean".to_string(), pair.target.clone()),
        ("reverberant".to_string(), pair.reverberant.clone()),
    ];
    let vanilla = PsdEstimator::vanilla(pcfg.stft.num_bins(), &pcfg.psd)?;
    outputs.push(("vanilla_wpe".into(), dereverb_audio(&pair.reverberant, None, vanilla, &pcfg)?));
    if let Some(m) = model {
        outputs.push(("dnn_wpe".into(), dereverb_audio(&pair.reverberant, None, PsdEstimator::model(m), &pcfg)?));
    }

    let arrival = rir.arrivals[0];
    let start = impulse_at + arrival + (TAIL_WINDOW.0 * fs as f64) as usize;
    let end = impulse_at + arrival + (TAIL_WINDOW.1 * fs as f64) as usize;
    let reference = tail_energy(&pair.reverberant, start, end).max(1e-30);
    let mut files = Vec::new();
    let mut energies = Vec::new();
    for (name, audio) in &outputs {
        let file = format!("{name}_logspec.csv");
        write_file(&opts.out_dir.join(&file), &log_energy_csv(&analyze(audio, &pcfg.stft)?))?;
        files.push(file);
        let e = tail_energy(audio, start, end).max(1e-30);
        energies.push((name.clone(), 10.0 * (e / reference).log10()));
    }
    let summary = DemoSummary {
        t60: opts.t60,
        impulse_secs: impulse_at as f64 / fs as f64,
        tail_window_secs: TAIL_WINDOW,
        tail_energy_db: energies,
        files,
    };
    write_file(
        &opts.out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).map_err(online_wpe::Error::from)?,
    )?;
    log::info!("dirac demo written to {}", opts.out_dir.display());
    Ok(summary)
}

