//! Objective metrics and the algorithm comparison suite.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::MultiChannelAudio;
use crate::error::{Error, Result};
use crate::neural::MaskModel;
use crate::pipeline::{dereverb_audio, PipelineConfig, PsdEstimator};
use crate::scalar::Real;
use crate::scenario::Scenario;

/// Log-ratio metrics are clipped to `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 60.0;

/// Initialization period excluded from evaluation.
pub const INIT_SECS: f64 = 4.0;

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { CAP_DB } else { 0.0 };
    }
    if num <= 0.0 {
        return -CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

fn check_pair<T: Real>(a: &MultiChannelAudio<T>, b: &MultiChannelAudio<T>) -> Result<()> {
    if a.len() != b.len() || a.num_channels() != b.num_channels() {
        return Err(Error::shape(
            format!("{} x {}", b.num_channels(), b.len()),
            format!("{} x {}", a.num_channels(), a.len()),
        ));
    }
    Ok(())
}

/// Early-to-late ratio of `output` against a direct+early `target` over
/// samples `[start, end)`: target energy over residual energy, summed over
/// channels.
pub fn elr_between<T: Real>(output: &MultiChannelAudio<T>, target: &MultiChannelAudio<T>, start: usize, end: usize) -> Result<f64> {
    check_pair(output, target)?;
    let end = end.min(output.len());
    if start >= end {
        return Err(Error::EmptyInput);
    }
    let (mut sig, mut res) = (0.0, 0.0);
    for (o, t) in output.channels().iter().zip(target.channels()) {
        for (&a, &b) in o[start..end].iter().zip(&t[start..end]) {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            sig += b * b;
            res += (a - b) * (a - b);
        }
    }
    Ok(ratio_db(sig, res))
}

/// ELR over everything after `after_secs`.
pub fn elr<T: Real>(output: &MultiChannelAudio<T>, target: &MultiChannelAudio<T>, after_secs: f64) -> Result<f64> {
    let start = (after_secs * output.sample_rate() as f64).round() as usize;
    elr_between(output, target, start, output.len())
}

/// Scale-invariant signal-to-distortion ratio with one optimal gain over
/// all channels.
pub fn sdr<T: Real>(estimate: &MultiChannelAudio<T>, reference: &MultiChannelAudio<T>) -> Result<f64> {
    check_pair(estimate, reference)?;
    let pairs = || {
        estimate
            .channels()
            .iter()
            .flatten()
            .zip(reference.channels().iter().flatten())
            .map(|(&e, &r)| (e.to_f64_lossy(), r.to_f64_lossy()))
    };
    let ref_energy: f64 = pairs().map(|(_, r)| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidConfig("reference signal is silent".into()));
    }
    let g = pairs().map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let proj = g * g * ref_energy;
    let err: f64 = pairs().map(|(e, r)| (e - g * r) * (e - g * r)).sum();
    Ok(ratio_db(proj, err))
}

/// Runs `f` and returns its result with the real-time factor for
/// `audio_secs` of audio.
pub fn rtf<R>(audio_secs: f64, f: impl FnOnce() -> Result<R>) -> Result<(R, f64)> {
    let start = Instant::now();
    let r = f()?;
    Ok((r, start.elapsed().as_secs_f64() / audio_secs))
}

/// Algorithm variants of the comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    Unprocessed,
    OracleWpe,
    VanillaWpe,
    DnnWpe,
    E2eWpe,
    E2eWpeP,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Unprocessed,
        Algorithm::OracleWpe,
        Algorithm::VanillaWpe,
        Algorithm::DnnWpe,
        Algorithm::E2eWpe,
        Algorithm::E2eWpeP,
    ];

    pub fn needs_model(self) -> bool {
        matches!(self, Algorithm::DnnWpe | Algorithm::E2eWpe | Algorithm::E2eWpeP)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Unprocessed => "Unprocessed",
            Algorithm::OracleWpe => "Oracle-WPE",
            Algorithm::VanillaWpe => "Vanilla-WPE",
            Algorithm::DnnWpe => "DNN-WPE",
            Algorithm::E2eWpe => "E2E-WPE",
            Algorithm::E2eWpeP => "E2E-WPE-p",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm {s:?}")))
    }
}

/// One evaluation recording.
#[derive(Clone, Debug)]
pub struct EvalItem<T> {
    pub id: String,
    pub t60: f64,
    pub input: MultiChannelAudio<T>,
    pub target: MultiChannelAudio<T>,
}

/// An algorithm with the model it needs, if any.
#[derive(Clone, Debug)]
pub struct SuiteEntry<T> {
    pub algorithm: Algorithm,
    pub model: Option<MaskModel<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub algorithm: Algorithm,
    pub id: String,
    pub t60: f64,
    /// After the initialization period; absent for CI.
    pub elr_db: Option<f64>,
    /// During the initialization period; absent for CI.
    pub elr_init_db: Option<f64>,
    pub sdr_db: f64,
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub algorithm: Algorithm,
    /// `"0.4-0.6"`, `"0.6-0.8"`, `"0.8-1.0"` or `"all"`.
    pub bucket: String,
    pub count: usize,
    pub elr_db: Option<f64>,
    pub elr_init_db: Option<f64>,
    pub sdr_db: f64,
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub init_secs: f64,
    pub utterances: Vec<UtteranceMetrics>,
    pub buckets: Vec<BucketMetrics>,
    /// Algorithms that could not run, with the reason.
    pub errors: Vec<(Algorithm, String)>,
}

pub const T60_BUCKETS: [(f64, f64); 3] = [(0.4, 0.6), (0.6, 0.8), (0.8, 1.0)];

fn bucket_label(lo: f64, hi: f64) -> String {
    format!("{lo:.1}-{hi:.1}")
}

fn in_bucket(t60: f64, (lo, hi): (f64, f64)) -> bool {
    t60 >= lo && (t60 < hi || (hi >= 1.0 && t60 <= hi))
}

impl MetricsReport {
    pub fn bucket(&self, algorithm: Algorithm, label: &str) -> Option<&BucketMetrics> {
        self.buckets.iter().find(|b| b.algorithm == algorithm && b.bucket == label)
    }

    /// One row per algorithm and bucket. `with_timing` adds the RTF column,
    /// which differs between runs.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        let mut s = String::from("scenario,algorithm,t60_bucket,count,elr_db,elr_init_db,sdr_db");
        if with_timing {
            s.push_str(",rtf");
        }
        s.push('\n');
        for b in &self.buckets {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.4}",
                self.scenario,
                b.algorithm,
                b.bucket,
                b.count,
                fmt_opt(b.elr_db),
                fmt_opt(b.elr_init_db),
                b.sdr_db
            ));
            if with_timing {
                s.push_str(&format!(",{:.4}", b.rtf));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn aggregate(&mut self) {
        let algorithms: Vec<Algorithm> = {
            let mut a: Vec<_> = self.utterances.iter().map(|u| u.algorithm).collect();
            a.sort();
            a.dedup();
            a
        };
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        for alg in algorithms {
            let mut groups: Vec<(String, Vec<&UtteranceMetrics>)> = T60_BUCKETS
                .iter()
                .map(|&b| {
                    let rows = self.utterances.iter().filter(|u| u.algorithm == alg && in_bucket(u.t60, b)).collect();
                    (bucket_label(b.0, b.1), rows)
                })
                .collect();
            groups.push(("all".into(), self.utterances.iter().filter(|u| u.algorithm == alg).collect()));
            for (label, rows) in groups {
                if rows.is_empty() {
                    continue;
                }
                let opt_mean = |f: fn(&UtteranceMetrics) -> Option<f64>| {
                    let v: Vec<f64> = rows.iter().filter_map(|u| f(u)).collect();
                    (!v.is_empty()).then(|| mean(&v))
                };
                self.buckets.push(BucketMetrics {
                    algorithm: alg,
                    bucket: label,
                    count: rows.len(),
                    elr_db: opt_mean(|u| u.elr_db),
                    elr_init_db: opt_mean(|u| u.elr_init_db),
                    sdr_db: mean(&rows.iter().map(|u| u.sdr_db).collect::<Vec<_>>()),
                    rtf: mean(&rows.iter().map(|u| u.rtf).collect::<Vec<_>>()),
                });
            }
        }
    }
}

/// Output of one algorithm on one item.
pub fn run_algorithm<T: Real>(
    entry: &SuiteEntry<T>,
    item: &EvalItem<T>,
    cfg: &PipelineConfig,
) -> Result<MultiChannelAudio<T>> {
    let bins = cfg.stft.num_bins();
    match entry.algorithm {
        Algorithm::Unprocessed => Ok(item.input.clone()),
        Algorithm::OracleWpe => dereverb_audio(&item.input, Some(&item.target), PsdEstimator::Oracle, cfg),
        Algorithm::VanillaWpe => dereverb_audio(&item.input, None, PsdEstimator::vanilla(bins, &cfg.psd)?, cfg),
        _ => {
            let model = entry
                .model
                .clone()
                .ok_or_else(|| Error::Missing(format!("{} needs a model checkpoint", entry.algorithm)))?;
            dereverb_audio(&item.input, None, PsdEstimator::model(model), cfg)
        }
    }
}

/// Evaluates every algorithm on every item. Metrics skip the first
/// `init_secs` of each recording; the ELR during that period is reported
/// separately. An algorithm that fails is recorded in `errors` and the suite
/// continues.
pub fn evaluate_suite<T: Real>(
    items: &[EvalItem<T>],
    algorithms: &[SuiteEntry<T>],
    scenario: Scenario,
    cfg: &PipelineConfig,
    init_secs: f64,
) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        scenario,
        init_secs,
        utterances: Vec::new(),
        buckets: Vec::new(),
        errors: Vec::new(),
    };
    let mut sorted: Vec<&EvalItem<T>> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(short) = sorted.iter().find(|it| it.input.duration_secs() <= init_secs) {
        return Err(Error::InvalidConfig(format!(
            "{} lasts {:.2} s, not longer than the {init_secs} s initialization period",
            short.id,
            short.input.duration_secs()
        )));
    }
    'alg: for entry in algorithms {
        let mut rows = Vec::with_capacity(sorted.len());
        for item in &sorted {
            let run = rtf(item.input.duration_secs(), || run_algorithm(entry, item, cfg));
            let (out, rtf) = match run {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(e),
                Err(e) => {
                    log::warn!("{} skipped: {e}", entry.algorithm);
                    report.errors.push((entry.algorithm, e.to_string()));
                    continue 'alg;
                }
            };
            let start = (init_secs * item.input.sample_rate() as f64).round() as usize;
            let (elr_db, elr_init_db) = if scenario.reports_elr() {
                (
                    Some(elr_between(&out, &item.target, start, out.len())?),
                    Some(elr_between(&out, &item.target, 0, start)?),
                )
            } else {
                (None, None)
            };
            let n = out.len().saturating_sub(start);
            let sdr_db = sdr(&out.window(start, n), &item.target.window(start, n))?;
            rows.push(UtteranceMetrics {
                algorithm: entry.algorithm,
                id: item.id.clone(),
                t60: item.t60,
                elr_db,
                elr_init_db,
                sdr_db,
                rtf,
            });
        }
        report.utterances.extend(rows);
    }
    report.aggregate();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn audio(ch: Vec<Vec<f64>>) -> MultiChannelAudio<f64> {
        MultiChannelAudio::new(ch, 100).unwrap()
    }

    fn noise(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elr_cases() {
        let t = audio(vec![noise(1, 1000)]);
        assert_eq!(elr(&t, &t, 0.0).unwrap(), CAP_DB);
        // residual with equal energy
        let r = noise(2, 1000);
        let scale = (t.energy() / r.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let o = audio(vec![t.channel(0).iter().zip(&r).map(|(a, b)| a + scale * b).collect()]);
        assert!(elr(&o, &t, 0.0).unwrap().abs() < 1e-9);
        assert!(elr(&t, &t, 100.0).is_err());
    }

    #[test]
    fn sdr_cases() {
        let r = audio(vec![noise(3, 2000)]);
        let mut twice = r.clone();
        twice.scale(2.0);
        assert_eq!(sdr(&twice, &r).unwrap(), CAP_DB);
        // orthogonal component of equal energy
        let n = noise(4, 2000);
        let g = n.iter().zip(r.channel(0)).map(|(a, b)| a * b).sum::<f64>() / r.energy();
        let orth: Vec<f64> = n.iter().zip(r.channel(0)).map(|(a, b)| a - g * b).collect();
        let k = (r.energy() / orth.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let est = audio(vec![r.channel(0).iter().zip(&orth).map(|(a, b)| a + k * b).collect()]);
        assert!(sdr(&est, &r).unwrap().abs() < 1e-9);
        let o = audio(vec![orth]);
        assert!(sdr(&o, &r).unwrap() <= -CAP_DB + 1e-9);
        assert!(sdr(&r, &audio(vec![vec![0.0; 2000]])).is_err());
    }

    #[test]
    fn metrics_invariant_to_common_gain() {
        let t = audio(vec![noise(5, 500), noise(6, 500)]);
        let o = audio(vec![noise(7, 500), noise(8, 500)]);
        let (mut t2, mut o2) = (t.clone(), o.clone());
        t2.scale(3.5);
        o2.scale(3.5);
        assert!((elr(&o, &t, 0.0).unwrap() - elr(&o2, &t2, 0.0).unwrap()).abs() < 1e-9);
        assert!((sdr(&o, &t).unwrap() - sdr(&o2, &t2).unwrap()).abs() < 1e-9);
        assert!((sdr(&o, &t).unwrap() - sdr(&o2, &t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn evaluation_region_ignores_init_corruption() {
        let t = audio(vec![noise(9, 1000)]);
        let mut o = audio(vec![t.channel(0).iter().zip(noise(10, 1000)).map(|(a, b)| a + 0.1 * b).collect()]);
        let before = elr(&o, &t, 4.0).unwrap();
        for v in &mut o.channel_mut(0)[..400] {
            *v = 1e3;
        }
        assert_eq!(before, elr(&o, &t, 4.0).unwrap());
    }

    #[test]
    fn buckets_and_missing_models() {
        let cfg = PipelineConfig::default();
        let mk = |id: &str, t60: f64, seed: u64| {
            let x = MultiChannelAudio::new(vec![noise(seed, 16000 * 5), noise(seed + 1, 16000 * 5)], 16000).unwrap();
            let mut t = x.clone();
            t.scale(0.5);
            EvalItem { id: id.into(), t60, input: x, target: t }
        };
        let items = vec![mk("b", 0.45, 1), mk("a", 0.9, 3)];
        let algs = vec![
            SuiteEntry { algorithm: Algorithm::Unprocessed, model: None },
            SuiteEntry { algorithm: Algorithm::DnnWpe, model: None },
        ];
        let r = evaluate_suite(&items, &algs, Scenario::Ha, &cfg, INIT_SECS).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.utterances[0].id, "a");
        assert!(r.bucket(Algorithm::Unprocessed, "0.4-0.6").is_some());
        assert!(r.bucket(Algorithm::Unprocessed, "0.6-0.8").is_none());
        assert_eq!(r.bucket(Algorithm::Unprocessed, "all").unwrap().count, 2);
        let ci = evaluate_suite(&items, &algs[..1], Scenario::Ci, &cfg, INIT_SECS).unwrap();
        assert!(ci.utterances.iter().all(|u| u.elr_db.is_none()));
        assert!(!ci.to_csv(false).contains("NaN"));
        assert_eq!(ci.to_csv(false), evaluate_suite(&items, &algs[..1], Scenario::Ci, &cfg, INIT_SECS).unwrap().to_csv(false));
    }
}
