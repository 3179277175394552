//! Argument definitions and subcommand bodies.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use online_wpe::acoustics::{generate_dataset, render_item, DataConfig, DatasetManifest};
use online_wpe::eval::{evaluate_suite, rtf, Algorithm, EvalItem, SuiteEntry, INIT_SECS};
use online_wpe::pipeline::{dereverb_audio, PipelineConfig, PsdEstimator, PsdMode};
use online_wpe::training::{pretrain, train_e2e, TrainOutcome};
use online_wpe::{
    analyze, init_params, read_wav, write_wav, Error, MaskModel, MultiChannelAudio, NetDims, PreparedSequence, Real,
    Scenario, WavEncoding,
};
use serde::Serialize;

use crate::config::{resolve, Overrides, RunConfig};
use crate::demo::{demo_dirac, DemoOptions};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "online-wpe", version, about = "Online multichannel WPE dereverberation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Prediction delay in frames (defaults to the scenario's).
    #[arg(long, global = true)]
    pub delay: Option<usize>,
    #[arg(long, global = true)]
    pub taps: Option<usize>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic reverberant dataset.
    GenData(GenDataArgs),
    /// Dereverberate a WAV file.
    Dereverb(DereverbArgs),
    /// Train the mask network on the masked-input loss.
    Pretrain(TrainArgs),
    /// Train the mask network through the WPE filter.
    TrainE2e(TrainArgs),
    /// Compare algorithms on a dataset.
    Evaluate(EvaluateArgs),
    /// Measure the real-time factor.
    Bench(BenchArgs),
    /// Spectrograms of an utterance followed by a Dirac impulse.
    DemoDirac(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (default: <output_dir>/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub num: Option<usize>,
    /// Minimum sequence length in seconds.
    #[arg(long)]
    pub secs: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Encoding {
    Float32,
    Pcm16,
}

impl From<Encoding> for WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Float32 => WavEncoding::Float32,
            Encoding::Pcm16 => WavEncoding::Pcm16,
        }
    }
}

#[derive(Debug, Args)]
pub struct DereverbArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "vanilla", value_parser = parse_mode)]
    pub psd_mode: PsdMode,
    /// Mask model checkpoint (model mode).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target WAV (oracle mode).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "float32")]
    pub encoding: Encoding,
}

fn parse_mode(s: &str) -> Result<PsdMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint (default: <output_dir>/model.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Starting checkpoint; random initialization otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// JSON-lines history (default: next to the checkpoint).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_frames: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated algorithm names (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    pub algorithms: Vec<Algorithm>,
    #[arg(long)]
    pub dnn: Option<PathBuf>,
    #[arg(long)]
    pub e2e: Option<PathBuf>,
    #[arg(long)]
    pub e2e_p: Option<PathBuf>,
    /// Report directory (default: <output_dir>/report).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = INIT_SECS)]
    pub init_secs: f64,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20.0)]
    pub secs: f64,
    /// Mask model checkpoint; a randomly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Run in single precision.
    #[arg(long)]
    pub f32: bool,
    /// Output file (default: <output_dir>/bench.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub t60: f64,
    /// Output directory (default: <output_dir>/dirac).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let g = &self.global;
        let mut o = Overrides {
            seed: g.seed,
            scenario: g.scenario,
            output_dir: g.output_dir.clone(),
            log_level: g.log_level.clone(),
            delay: g.delay,
            taps: g.taps,
            ..Overrides::default()
        };
        match &self.command {
            Command::Pretrain(t) | Command::TrainE2e(t) => {
                o.lr = t.lr;
                o.epochs = t.epochs;
                o.batch_size = t.batch_size;
                o.segment_frames = t.segment_frames;
                o.hidden_dim = t.hidden_dim;
            }
            Command::Bench(b) => o.hidden_dim = b.hidden_dim,
            _ => {}
        }
        o
    }

    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        Ok(resolve(self.global.config.as_deref(), &self.overrides())?)
    }
}

pub fn run(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(cfg, a).map(|_| ()),
        Command::Dereverb(a) => cmd_dereverb(cfg, a),
        Command::Pretrain(a) => cmd_train(cfg, a, false).map(|_| ()),
        Command::TrainE2e(a) => cmd_train(cfg, a, true).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a).map(|_| ()),
        Command::DemoDirac(a) => {
            let model = a.checkpoint.as_ref().map(load_model).transpose()?;
            let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("dirac"));
            demo_dirac(
                cfg,
                &DemoOptions {
                    t60: a.t60,
                    out_dir: out,
                },
                model,
            )
            .map(|_| ())
        }
    }
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub(crate) fn write_file(p: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = p.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir(dir)?;
        }
    }
    fs::write(p, contents).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, a: &GenDataArgs) -> CliResult<DatasetManifest> {
    let mut data: DataConfig = cfg.data.clone();
    if let Some(n) = a.num {
        data.num_sequences = n;
    }
    if let Some(s) = a.secs {
        data.sequence_secs = s;
    }
    data.sample_rate = cfg.stft.sample_rate;
    data.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("data"));
    let manifest = generate_dataset(&data, cfg.scenario, &out)?;
    log::info!("wrote {} sequences to {}", manifest.entries.len(), out.display());
    Ok(manifest)
}

pub fn load_model(path: &PathBuf) -> CliResult<MaskModel<f64>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(MaskModel::load(path)?)
}

fn pipeline_for(cfg: &RunConfig, channels: usize) -> PipelineConfig {
    let mut p = cfg.pipeline();
    p.wpe.num_channels = channels;
    p
}

pub fn cmd_dereverb(cfg: &RunConfig, a: &DereverbArgs) -> CliResult<()> {
    let estimator = match a.psd_mode {
        PsdMode::Vanilla => PsdEstimator::vanilla(cfg.stft.num_bins(), &cfg.psd)?,
        PsdMode::Oracle => PsdEstimator::Oracle,
        PsdMode::Model => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--psd-mode model needs --checkpoint".into()))?;
            PsdEstimator::model(load_model(path)?)
        }
    };
    let target = match (a.psd_mode, &a.target) {
        (PsdMode::Oracle, None) => return Err(CliError::Usage("--psd-mode oracle needs --target".into())),
        (_, Some(t)) => Some(read_wav::<f64>(t)?),
        _ => None,
    };
    let input = read_wav::<f64>(&a.input)?;
    let pcfg = pipeline_for(cfg, input.num_channels());
    if let Some(m) = match &estimator {
        PsdEstimator::Model { model, .. } => Some(model),
        _ => None,
    } {
        if model_bins(m) != pcfg.stft.num_bins() {
            return Err(CliError::Usage(format!(
                "checkpoint expects {} bins, STFT has {}",
                model_bins(m),
                pcfg.stft.num_bins()
            )));
        }
    }
    let out = dereverb_audio(&input, target.as_ref(), estimator, &pcfg)?;
    write_wav(&a.output, &out, a.encoding.into())?;
    log::info!("wrote {}", a.output.display());
    Ok(())
}

fn model_bins<T: Real>(m: &MaskModel<T>) -> usize {
    m.dims().input_dim
}

/// Reads every manifest entry as (input, target) audio.
pub fn load_pairs(manifest_path: &Path) -> CliResult<Vec<EvalItem<f64>>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(EvalItem {
                id: e.id.clone(),
                t60: e.t60,
                input: read_wav(base.join(&e.input))?,
                target: read_wav(base.join(&e.target))?,
            })
        })
        .collect()
}

pub fn prepare(items: &[EvalItem<f64>], cfg: &RunConfig) -> CliResult<Vec<PreparedSequence<f64>>> {
    items
        .iter()
        .map(|it| {
            let x = analyze(&it.input, &cfg.stft)?;
            let t = analyze(&it.target, &cfg.stft)?;
            Ok(PreparedSequence::new(it.id.clone(), it.t60, x, &t)?)
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs, end_to_end: bool) -> CliResult<TrainOutcome<f64>> {
    let items = load_pairs(&a.manifest)?;
    if items.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let channels = items[0].input.num_channels();
    let seqs = prepare(&items, cfg)?;
    let model = match &a.init {
        Some(p) => load_model(p)?,
        None => init_params(
            cfg.neural.seed,
            NetDims {
                input_dim: cfg.stft.num_bins(),
                hidden_dim: cfg.neural.hidden_dim,
            },
            cfg.neural.log_compress,
        )?,
    };
    let outcome = if end_to_end {
        let wpe = pipeline_for(cfg, channels).wpe;
        train_e2e(model, &seqs, &wpe, &cfg.train)?
    } else {
        pretrain(model, &seqs, &cfg.train)?
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("model.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    outcome.model.save(&out)?;
    let history = a.history.clone().unwrap_or_else(|| out.with_extension("history.jsonl"));
    let mut buf = Vec::new();
    outcome.write_history(&mut buf)?;
    write_file(&history, &String::from_utf8_lossy(&buf))?;
    log::info!(
        "best epoch {} of {}, checkpoint {}",
        outcome.best_epoch,
        outcome.history.len() - 1,
        out.display()
    );
    Ok(outcome)
}

pub fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> CliResult<()> {
    let items = load_pairs(&a.manifest)?;
    let channels = items.first().map_or(cfg.wpe.num_channels, |i| i.input.num_channels());
    let algorithms = if a.algorithms.is_empty() {
        Algorithm::ALL.to_vec()
    } else {
        a.algorithms.clone()
    };
    let mut entries = Vec::new();
    let mut load_errors = Vec::new();
    for alg in algorithms {
        let path = match alg {
            Algorithm::DnnWpe => a.dnn.as_ref(),
            Algorithm::E2eWpe => a.e2e.as_ref(),
            Algorithm::E2eWpeP => a.e2e_p.as_ref(),
            _ => None,
        };
        let model = match path.map(load_model).transpose() {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{alg}: {e}");
                load_errors.push((alg, e.to_string()));
                continue;
            }
        };
        entries.push(SuiteEntry { algorithm: alg, model });
    }
    let mut report = evaluate_suite(&items, &entries, cfg.scenario, &pipeline_for(cfg, channels), a.init_secs)?;
    report.errors.extend(load_errors);
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("report"));
    write_file(&out.join("report.csv"), &report.to_csv(false))?;
    write_file(&out.join("report.json"), &report.to_json()?)?;
    for (alg, e) in &report.errors {
        log::warn!("{alg} not evaluated: {e}");
    }
    log::info!("report written to {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub audio_secs: f64,
    pub channels: usize,
    pub taps: usize,
    pub bins: usize,
    pub hidden_dim: usize,
    pub precision: &'static str,
    pub rtf_vanilla_wpe: f64,
    pub rtf_dnn_wpe: f64,
    /// Reference point: GPU real-time factor reported for the original
    /// system.
    pub reference_gpu_rtf: &'static str,
}

fn bench_run<T: Real>(
    audio: &MultiChannelAudio<f64>,
    model: &MaskModel<f64>,
    pcfg: &PipelineConfig,
) -> CliResult<(f64, f64)> {
    let x: MultiChannelAudio<T> = audio.map_precision();
    let secs = x.duration_secs();
    let (_, r_van) = rtf(secs, || dereverb_audio(&x, None, PsdEstimator::vanilla(pcfg.stft.num_bins(), &pcfg.psd)?, pcfg))?;
    let m = model.cast::<T>();
    let (_, r_dnn) = rtf(secs, || dereverb_audio(&x, None, PsdEstimator::model(m), pcfg))?;
    Ok((r_van, r_dnn))
}

pub fn cmd_bench(cfg: &RunConfig, a: &BenchArgs) -> CliResult<BenchReport> {
    let data = DataConfig {
        num_sequences: 1,
        sequence_secs: a.secs,
        sample_rate: cfg.stft.sample_rate,
        ..cfg.data.clone()
    };
    let pair = render_item(&data, 0, cfg.scenario)?;
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => init_params(
            cfg.neural.seed,
            NetDims {
                input_dim: cfg.stft.num_bins(),
                hidden_dim: cfg.neural.hidden_dim,
            },
            cfg.neural.log_compress,
        )?,
    };
    let pcfg = pipeline_for(cfg, pair.reverberant.num_channels());
    let (rv, rd) = if a.f32 {
        bench_run::<f32>(&pair.reverberant, &model, &pcfg)?
    } else {
        bench_run::<f64>(&pair.reverberant, &model, &pcfg)?
    };
    let report = BenchReport {
        audio_secs: pair.reverberant.duration_secs(),
        channels: pcfg.wpe.num_channels,
        taps: pcfg.wpe.num_taps,
        bins: pcfg.stft.num_bins(),
        hidden_dim: model.dims().hidden_dim,
        precision: if a.f32 { "f32" } else { "f64" },
        rtf_vanilla_wpe: rv,
        rtf_dnn_wpe: rd,
        reference_gpu_rtf: "below 0.1",
    };
    log::info!("RTF vanilla {:.3}, DNN-WPE {:.3} ({})", rv, rd, report.precision);
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("bench.json"));
    write_file(&out, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    Ok(report)
}
