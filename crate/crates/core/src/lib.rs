//! Online multichannel speech dereverberation with RLS weighted prediction
//! error (WPE) filtering.
//!
//! The pipeline converts audio to the STFT domain, estimates the anechoic
//! speech PSD (recursive smoothing, an oracle target, or a recurrent mask
//! network), and runs a per-bin RLS-WPE filter frame by frame. The mask
//! network can be trained on its masked-input KL loss or end to end through
//! the full RLS recursion.
//!
//! All numeric code is generic over [`Real`] (`f32`/`f64`); the aliases at
//! the crate root name the common instantiations.

pub mod acoustics;
pub mod audio;
pub mod error;
pub mod eval;
pub mod neural;
pub mod pipeline;
pub mod psd;
pub mod scalar;
pub mod scenario;
pub mod stft;
pub mod training;
pub mod wpe;

pub use audio::{read_wav, write_wav, MultiChannelAudio, WavEncoding};
pub use error::{Error, Result};
pub use neural::{init_params, MaskModel, NetDims, NeuralConfig, RecurrentState};
pub use psd::PsdConfig;
pub use scalar::{Cplx, Real};
pub use scenario::Scenario;
pub use stft::{analyze, make_window, synthesize, MultiChannelSpectrum, StftAnalyzer, StftConfig, StftSynthesizer};
pub use training::{LossMode, PreparedSequence, TrainConfig};
pub use wpe::{init_state, WpeConfig, WpeState};

pub type Audio64 = MultiChannelAudio<f64>;
pub type Audio32 = MultiChannelAudio<f32>;
pub type Spectrum64 = MultiChannelSpectrum<f64>;
pub type Spectrum32 = MultiChannelSpectrum<f32>;
pub type WpeState64 = WpeState<f64>;
pub type WpeState32 = WpeState<f32>;
pub type MaskModel64 = MaskModel<f64>;
pub type MaskModel32 = MaskModel<f32>;
