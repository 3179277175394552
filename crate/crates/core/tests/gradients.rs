use num_complex::Complex;
use online_wpe::training::{
    backprop_segment, check_e2e_gradient, check_pretrain_gradient, segment_loss, CarriedState, NodeKind, Tape,
};
use online_wpe::{init_params, MaskModel, MultiChannelSpectrum, NetDims, PreparedSequence, TrainConfig, WpeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F: usize = 5;
const L: usize = 12;

fn random_spectrum(rng: &mut ChaCha8Rng, frames: usize, d: usize) -> MultiChannelSpectrum<f64> {
    let mut s = MultiChannelSpectrum::zeros(frames, F, d);
    for t in 0..frames {
        // slow level changes so the gate sees both loud and quiet frames
        let level = 1.0 + 0.5 * (t as f64 * 0.7).sin();
        for v in s.frame_mut(t) {
            *v = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * level;
        }
    }
    s
}

struct Tiny {
    model: MaskModel<f64>,
    seq: PreparedSequence<f64>,
    wpe: WpeConfig,
    cfg: TrainConfig,
}

fn tiny(seed: u64, d: usize) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_spectrum(&mut rng, 2 * L, d);
    let mut target = input.clone();
    for t in 0..target.num_frames() {
        for v in target.frame_mut(t) {
            *v *= rng.random_range(0.2..1.0);
        }
    }
    let seq = PreparedSequence::new("tiny", 0.5, input, &target).unwrap();
    let model = init_params(seed, NetDims { input_dim: F, hidden_dim: 8 }, false).unwrap();
    let wpe = WpeConfig {
        num_taps: 2,
        delay: 2,
        num_channels: d,
        ..WpeConfig::default()
    };
    let cfg = TrainConfig {
        segment_frames: L,
        checkpoint_interval: 4,
        ..TrainConfig::default()
    };
    Tiny { model, seq, wpe, cfg }
}

fn warmed(t: &Tiny) -> CarriedState<f64> {
    let mut st = CarriedState::initial(&t.model, &t.wpe, F).unwrap();
    segment_loss(&t.model, t.seq.segment(0, L), &mut st, &t.cfg).unwrap();
    st
}

#[test]
fn e2e_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let t = tiny(seed, 1);
        let st = warmed(&t);
        let r = check_e2e_gradient(&t.model, t.seq.segment(1, L), &st, &t.cfg, 1e-5, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn e2e_gradient_two_channels_from_fresh_state() {
    for seed in 0..5 {
        let t = tiny(100 + seed, 2);
        let st = CarriedState::initial(&t.model, &t.wpe, F).unwrap();
        let r = check_e2e_gradient(&t.model, t.seq.segment(0, L), &st, &t.cfg, 1e-5, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn pretrain_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let t = tiny(seed, 1);
        let r = check_pretrain_gradient(&t.model, t.seq.segment(0, L), &t.cfg, 1e-5, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn gradients_are_deterministic() {
    let t = tiny(7, 1);
    let st = warmed(&t);
    let a = backprop_segment(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    let b = backprop_segment(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_interval_does_not_change_gradient() {
    let mut t = tiny(3, 1);
    let st = warmed(&t);
    let (_, g_a, _) = backprop_segment(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    t.cfg.checkpoint_interval = 1;
    let (_, g_b, _) = backprop_segment(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    assert!(g_a.iter().zip(&g_b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tape_has_no_edges_across_segments() {
    let t = tiny(11, 1);
    let st = warmed(&t);
    let (tape, _) = Tape::record(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    assert!(tape.is_segment_local());
    let carried: Vec<_> = tape
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::CarriedLstm | NodeKind::CarriedWpe))
        .collect();
    assert_eq!(carried.len(), 2);
    assert!(carried.iter().all(|n| n.operands.is_empty() && n.frame.is_none()));
    assert_eq!(tape.nodes().iter().filter(|n| n.kind == NodeKind::Loss).count(), L);
}

#[test]
fn carried_state_changes_but_gradient_stays_local() {
    // Perturbing the parameters changes what segment 0 hands over, yet the
    // segment-1 gradient is computed with that state held fixed.
    let t = tiny(5, 1);
    let st = warmed(&t);
    let mut other = t.model.clone();
    other.params_mut()[0] += 0.1;
    let mut st2 = CarriedState::initial(&other, &t.wpe, F).unwrap();
    segment_loss(&other, t.seq.segment(0, L), &mut st2, &t.cfg).unwrap();
    assert_ne!(st, st2);
    let (_, g1, _) = backprop_segment(&t.model, t.seq.segment(1, L), &st, &t.cfg).unwrap();
    let (_, g2, _) = backprop_segment(&t.model, t.seq.segment(1, L), &st.clone(), &t.cfg).unwrap();
    assert_eq!(g1, g2);
}
