//! Speech-like test signals and sequence assembly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Amplitude-modulated AR(8) noise: four resonances drawn in the formant
/// range, a 4 Hz syllabic envelope and occasional pauses. Unit RMS over the
/// active part.
pub fn synthetic_utterance(seed: u64, duration_secs: f64, sample_rate: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let len = (duration_secs * fs).round() as usize;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Product of four resonator sections = AR(8).
    let mut ar = vec![1.0];
    for _ in 0..4 {
        let f = rng.random_range(250.0..3500.0f64).min(0.45 * fs);
        let r: f64 = rng.random_range(0.90..0.97);
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let sec = [1.0, -2.0 * r * w.cos(), r * r];
        let mut next = vec![0.0; ar.len() + 2];
        for (i, &a) in ar.iter().enumerate() {
            for (j, &b) in sec.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        ar = next;
    }

    let rate = rng.random_range(3.5..4.5f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    // Pause pattern: each syllable slot is silent with probability 0.2.
    let slot = fs / rate;
    let slots = (len as f64 / slot).ceil() as usize + 1;
    let active: Vec<bool> = (0..slots).map(|_| rng.random::<f64>() >= 0.2).collect();

    let mut y = vec![0.0; len];
    for n in 0..len {
        let mut v: f64 = normal.sample(&mut rng);
        for k in 1..ar.len() {
            if n >= k {
                v -= ar[k] * y[n - k];
            }
        }
        y[n] = v;
    }
    let mut out = vec![0.0; len];
    for n in 0..len {
        let t = n as f64 / fs;
        let s = (n as f64 / slot) as usize;
        let env = if active[s] {
            (std::f64::consts::PI * rate * t + phase).sin().powi(2)
        } else {
            0.0
        };
        out[n] = y[n] * env;
    }
    let energy: f64 = out.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let g = (len as f64 * 0.5 / energy).sqrt();
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

const MAX_OVERSHOOT_SECS: f64 = 4.0;

/// Concatenates a seeded permutation of `utterances`, separated by 100 to
/// 300 ms of silence, repeating the permutation until at least `min_secs`
/// of audio is assembled. Anything past `min_secs + 4` s is cut with a 10 ms
/// fade. Returns the samples and the order used.
pub fn build_sequence(utterances: &[Vec<f64>], sample_rate: u32, min_secs: f64, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if utterances.is_empty() || utterances.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let min_len = (min_secs * fs).ceil() as usize;
    let mut out = Vec::with_capacity(min_len + min_len / 4);
    let mut order = Vec::new();
    let mut perm: Vec<usize> = (0..utterances.len()).collect();
    'outer: loop {
        perm.shuffle(&mut rng);
        for &i in &perm {
            if !out.is_empty() {
                let gap = (rng.random_range(0.1..0.3) * fs).round() as usize;
                out.resize(out.len() + gap, 0.0);
            }
            out.extend_from_slice(&utterances[i]);
            order.push(i);
            if out.len() >= min_len {
                break 'outer;
            }
        }
    }
    let max_len = min_len + (MAX_OVERSHOOT_SECS * fs).round() as usize;
    if out.len() > max_len {
        out.truncate(max_len);
        let fade = ((0.01 * fs) as usize).min(max_len);
        for i in 0..fade {
            out[max_len - 1 - i] *= i as f64 / fade as f64;
        }
    }
    Ok((out, order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_is_deterministic_and_bounded() {
        let a = synthetic_utterance(3, 2.0, 16000);
        assert_eq!(a, synthetic_utterance(3, 2.0, 16000));
        assert_eq!(a.len(), 32000);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_ne!(a, synthetic_utterance(4, 2.0, 16000));
    }

    #[test]
    fn single_long_utterance_is_returned_as_is() {
        let u = synthetic_utterance(1, 20.0, 16000);
        let (seq, order) = build_sequence(std::slice::from_ref(&u), 16000, 20.0, 9).unwrap();
        assert_eq!(seq, u);
        assert_eq!(order, vec![0]);
    }

    #[test]
    fn permutations_keep_the_multiset() {
        let utts: Vec<_> = (0..4).map(|i| synthetic_utterance(i, 5.0, 8000)).collect();
        let (_, a) = build_sequence(&utts, 8000, 20.0, 1).unwrap();
        let (_, b) = build_sequence(&utts, 8000, 20.0, 2).unwrap();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, vec![0, 1, 2, 3]);
        assert_eq!(sa, sb);
        assert_ne!(a, b);
    }

    #[test]
    fn sequence_length_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            let utts: Vec<_> = (0..6)
                .map(|i| synthetic_utterance(seed * 10 + i, rng.random_range(2.0..8.0), 8000))
                .collect();
            let (seq, _) = build_sequence(&utts, 8000, 20.0, seed).unwrap();
            let secs = seq.len() as f64 / 8000.0;
            assert!((20.0..=24.0).contains(&secs), "{secs}");
        }
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(build_sequence(&[], 16000, 20.0, 0).is_err());
    }
}
