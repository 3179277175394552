//! Shoebox image-source room impulse responses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Early window kept in the hearing-aid target, measured from the direct
/// path arrival.
pub const EARLY_WINDOW_SECS: f64 = 0.040;

pub type Point = [f64; 3];

/// Rectangular room with one source and a microphone array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Point,
    pub source: Point,
    pub mics: Vec<Point>,
    pub t60: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidConfig(format!("room dimensions {:?}", self.room)));
        }
        let inside = |p: &Point| p.iter().zip(&self.room).all(|(&c, &l)| c > 0.0 && c < l);
        if !inside(&self.source) || self.mics.is_empty() || !self.mics.iter().all(inside) {
            return Err(Error::InvalidConfig("source and microphones must lie strictly inside the room".into()));
        }
        if !(self.t60 > 0.0) || self.sample_rate == 0 {
            return Err(Error::InvalidConfig(format!("t60 {} / sample rate {}", self.t60, self.sample_rate)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.room.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.room;
        2.0 * (x * y + x * z + y * z)
    }

    /// Frequency-independent wall absorption from Sabine's formula.
    pub fn absorption(&self) -> Result<f64> {
        let a = 0.161 * self.volume() / (self.surface() * self.t60);
        if a > 1.0 + 1e-9 {
            return Err(Error::InfeasibleScene(format!(
                "T60 {:.3} s needs absorption {a:.3} > 1 in a {:?} m room",
                self.t60, self.room
            )));
        }
        Ok(a.min(1.0))
    }

    /// Direct-path delay in samples to microphone `m`, rounded.
    pub fn direct_delay(&self, m: usize) -> usize {
        (distance(&self.source, &self.mics[m]) / SPEED_OF_SOUND * self.sample_rate as f64).round() as usize
    }
}

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-channel impulse responses plus the direct-path taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Rir {
    pub channels: Vec<Vec<f64>>,
    pub arrivals: Vec<usize>,
    pub direct_gains: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Image-source RIR of the scene, `1.2 * T60` long, with arrivals rounded
/// to the nearest sample.
///
/// Wall absorption starts from Sabine's formula and is then rescaled until
/// the Schroeder T60 of the first channel is within 2% of the request; the
/// image-source decay of a non-cubic room is slower than the diffuse-field
/// estimate.
pub fn generate_rir(spec: &SceneSpec) -> Result<Rir> {
    spec.validate()?;
    let fs = spec.sample_rate as f64;
    let len = (1.2 * spec.t60 * fs).ceil() as usize;
    let mut a = spec.absorption()?;
    for _ in 0..8 {
        if a >= 1.0 {
            break;
        }
        let h = image_source(spec, &spec.mics[0], a, len);
        let Some(measured) = schroeder_t60(&h, spec.sample_rate) else { break };
        let ratio = measured / spec.t60;
        if (ratio - 1.0).abs() < 0.02 {
            break;
        }
        a = (a * ratio).min(1.0);
    }

    let mut channels = Vec::with_capacity(spec.mics.len());
    let mut arrivals = Vec::with_capacity(spec.mics.len());
    let mut direct_gains = Vec::with_capacity(spec.mics.len());
    for mic in &spec.mics {
        let d0 = distance(&spec.source, mic);
        arrivals.push((d0 / SPEED_OF_SOUND * fs).round() as usize);
        direct_gains.push(1.0 / (4.0 * std::f64::consts::PI * d0.max(1e-3)));
        channels.push(image_source(spec, mic, a, len));
    }
    Ok(Rir {
        channels,
        arrivals,
        direct_gains,
        sample_rate: spec.sample_rate,
    })
}

fn image_source(spec: &SceneSpec, mic: &Point, absorption: f64, len: usize) -> Vec<f64> {
    let beta = (1.0 - absorption).max(0.0).sqrt();
    let fs = spec.sample_rate as f64;
    let max_dist = len as f64 / fs * SPEED_OF_SOUND;
    let orders: Vec<i64> = spec
        .room
        .iter()
        .map(|&l| (max_dist / (2.0 * l)).ceil() as i64 + 1)
        .collect();
    let mut h = vec![0.0; len];
    for nx in -orders[0]..=orders[0] {
        for qx in 0..2 {
            let (dx, rx) = axis(spec.source[0], mic[0], spec.room[0], nx, qx);
            for ny in -orders[1]..=orders[1] {
                for qy in 0..2 {
                    let (dy, ry) = axis(spec.source[1], mic[1], spec.room[1], ny, qy);
                    let dxy = dx * dx + dy * dy;
                    if dxy > max_dist * max_dist {
                        continue;
                    }
                    for nz in -orders[2]..=orders[2] {
                        for qz in 0..2 {
                            let (dz, rz) = axis(spec.source[2], mic[2], spec.room[2], nz, qz);
                            let d = (dxy + dz * dz).sqrt();
                            let tap = (d / SPEED_OF_SOUND * fs).round() as usize;
                            if tap >= len {
                                continue;
                            }
                            h[tap] += beta.powi((rx + ry + rz) as i32) / (4.0 * std::f64::consts::PI * d.max(1e-3));
                        }
                    }
                }
            }
        }
    }
    h
}

/// Offset of the image along one axis and its number of wall reflections.
#[inline]
fn axis(src: f64, mic: f64, l: f64, n: i64, q: i64) -> (f64, i64) {
    let img = (1 - 2 * q) as f64 * src + 2.0 * n as f64 * l;
    (img - mic, (n - q).abs() + n.abs())
}

/// Target response for a listener profile: the direct path plus the early
/// window for HA, the direct-path tap alone for CI.
pub fn split_target_rir(rir: &Rir, scenario: Scenario) -> Rir {
    let early = (EARLY_WINDOW_SECS * rir.sample_rate as f64).round() as usize;
    let channels = rir
        .channels
        .iter()
        .zip(rir.arrivals.iter().zip(&rir.direct_gains))
        .map(|(h, (&arr, &gain))| {
            let mut out = vec![0.0; h.len()];
            match scenario {
                Scenario::Ha => {
                    let end = (arr + early).min(h.len());
                    out[arr..end].copy_from_slice(&h[arr..end]);
                }
                Scenario::Ci => {
                    if arr < out.len() {
                        out[arr] = gain;
                    }
                }
            }
            out
        })
        .collect();
    Rir {
        channels,
        arrivals: rir.arrivals.clone(),
        direct_gains: rir.direct_gains.clone(),
        sample_rate: rir.sample_rate,
    }
}

/// Reverberation time from the Schroeder energy decay curve, fitting a line
/// between -5 and -35 dB and extrapolating to -60 dB.
pub fn schroeder_t60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if (-35.0..=-5.0).contains(&db) {
            let x = i as f64 / sample_rate as f64;
            n += 1.0;
            sx += x;
            sy += db;
            sxx += x * x;
            sxy += x * db;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(t60: f64) -> SceneSpec {
        SceneSpec {
            room: [6.0, 5.0, 3.0],
            source: [2.0, 3.5, 1.6],
            mics: vec![[4.0, 2.0, 1.5], [4.16, 2.0, 1.5]],
            t60,
            sample_rate: 16000,
            seed: 0,
        }
    }

    #[test]
    fn measured_t60_close_to_request() {
        for t60 in [0.4, 0.6, 0.8, 1.0] {
            let rir = generate_rir(&scene(t60)).unwrap();
            for h in &rir.channels {
                let m = schroeder_t60(h, 16000).unwrap();
                assert!((m / t60 - 1.0).abs() <= 0.2, "requested {t60}, measured {m}");
            }
        }
    }

    #[test]
    fn anechoic_limit_is_single_tap() {
        let mut s = scene(0.4);
        // absorption exactly 1
        s.t60 = 0.161 * s.volume() / s.surface();
        let rir = generate_rir(&s).unwrap();
        for (h, &arr) in rir.channels.iter().zip(&rir.arrivals) {
            let nz: Vec<_> = h.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
            assert_eq!(nz, vec![arr]);
        }
        for sc in [Scenario::Ha, Scenario::Ci] {
            let t = split_target_rir(&rir, sc);
            assert_eq!(t.channels, rir.channels);
        }
    }

    #[test]
    fn infeasible_t60_is_rejected() {
        assert!(matches!(generate_rir(&scene(0.05)), Err(Error::InfeasibleScene(_))));
    }

    #[test]
    fn rir_is_deterministic() {
        assert_eq!(generate_rir(&scene(0.6)).unwrap(), generate_rir(&scene(0.6)).unwrap());
    }

    #[test]
    fn target_windows() {
        let rir = generate_rir(&scene(0.7)).unwrap();
        let ha = split_target_rir(&rir, Scenario::Ha);
        let ci = split_target_rir(&rir, Scenario::Ci);
        let early = (EARLY_WINDOW_SECS * 16000.0).round() as usize;
        for d in 0..2 {
            let arr = rir.arrivals[d];
            let e_win: f64 = rir.channels[d][arr..arr + early].iter().map(|v| v * v).sum();
            let e_ha: f64 = ha.channels[d].iter().map(|v| v * v).sum();
            assert!((e_win - e_ha).abs() <= 1e-15 * e_win);
            assert_eq!(ci.channels[d].iter().filter(|v| **v != 0.0).count(), 1);
            let e_ci: f64 = ci.channels[d].iter().map(|v| v * v).sum();
            assert!(e_ci <= e_ha);
        }
    }
}
