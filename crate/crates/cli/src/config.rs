//! Run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use online_wpe::acoustics::DataConfig;
use online_wpe::pipeline::PipelineConfig;
use online_wpe::{Error, NeuralConfig, PsdConfig, Scenario, StftConfig, TrainConfig, WpeConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub output_dir: PathBuf,
    pub log_level: String,
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub psd: PsdConfig,
    pub neural: NeuralConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Keys given explicitly in the file or on the command line, as
    /// `section.key`.
    #[serde(skip)]
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::Ha,
            output_dir: PathBuf::from("out"),
            log_level: "info".into(),
            stft: StftConfig::default(),
            wpe: WpeConfig::default(),
            psd: PsdConfig::default(),
            neural: NeuralConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<Scenario>,
    pub output_dir: Option<PathBuf>,
    pub log_level: Option<String>,
    pub delay: Option<usize>,
    pub taps: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub segment_frames: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let table: toml::Table = toml::from_str(text)?;
        let mut explicit = BTreeSet::new();
        for (k, v) in &table {
            match v.as_table() {
                Some(section) => explicit.extend(section.keys().map(|s| format!("{k}.{s}"))),
                None => {
                    explicit.insert(k.clone());
                }
            }
        }
        let known = serde_json::to_value(RunConfig::default())?;
        check_keys(&table, &known, "")?;
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.explicit = explicit;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies command-line values and then the scenario coupling.
    pub fn apply(&mut self, o: &Overrides) {
        let mut set = |key: &str| {
            self.explicit.insert(key.to_string());
        };
        if o.seed.is_some() {
            set("seed");
        }
        if o.delay.is_some() {
            set("wpe.delay");
        }
        if o.hidden_dim.is_some() {
            set("neural.hidden_dim");
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.scenario {
            self.scenario = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.log_level {
            self.log_level = v.clone();
        }
        if let Some(v) = o.delay {
            self.wpe.delay = v;
        }
        if let Some(v) = o.taps {
            self.wpe.num_taps = v;
        }
        if let Some(v) = o.hidden_dim {
            self.neural.hidden_dim = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = o.epochs {
            self.train.max_epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.segment_frames {
            self.train.segment_frames = v;
        }
        self.couple();
    }

    /// The scenario selects the prediction delay unless one was given
    /// explicitly; section seeds follow the global seed unless set.
    fn couple(&mut self) {
        if self.is_explicit("wpe.delay") {
            if self.wpe.delay != self.scenario.delay() {
                log::warn!(
                    "prediction delay {} overrides the {} default of {}",
                    self.wpe.delay,
                    self.scenario,
                    self.scenario.delay()
                );
            }
        } else {
            self.wpe.delay = self.scenario.delay();
        }
        self.train.scenario = self.scenario;
        if !self.is_explicit("train.seed") {
            self.train.seed = self.seed;
        }
        if !self.is_explicit("data.seed") {
            self.data.seed = self.seed;
        }
        if !self.is_explicit("neural.seed") {
            self.neural.seed = self.seed;
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            stft: self.stft,
            wpe: self.wpe,
            psd: self.psd,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.stft.validate()?;
        self.wpe.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.neural.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Rejects keys that do not exist at any nesting level.
fn check_keys(table: &toml::Table, known: &serde_json::Value, prefix: &str) -> Result<(), Error> {
    for (k, v) in table {
        let Some(expected) = known.get(k) else {
            return Err(Error::InvalidConfig(format!("unknown key `{prefix}{k}`")));
        };
        if let (Some(sub), true) = (v.as_table(), expected.is_object()) {
            check_keys(sub, expected, &format!("{prefix}{k}."))?;
        }
    }
    Ok(())
}

/// File (if any) plus overrides, validated.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
