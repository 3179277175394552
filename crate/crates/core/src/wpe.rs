//! Online RLS weighted prediction error (WPE) filter.
//!
//! Per frequency bin the filter keeps a prediction matrix `G` (`DK x D`), the
//! inverse of the PSD-weighted covariance of the delayed input stack
//! (`DK x DK`), and a ring of the last `delay + taps - 1` input frames. Each
//! frame is dereverberated as `x_t - G^H X_{t-delay}` with the pre-update
//! filter; statistics are only updated while the input is above the speech
//! pause gate.
//!
//! Matrices are stored row-major in flat vectors: `G[i * D + d]` and
//! `P[i * DK + j]`.

use std::collections::VecDeque;
use std::io::{Read, Write};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm_sqr, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WpeConfig {
    /// Prediction filter taps `K`.
    pub num_taps: usize,
    /// Prediction delay in frames.
    pub delay: usize,
    /// RLS forgetting factor.
    pub forgetting: f64,
    pub num_channels: usize,
    /// Frames whose power is this many dB below the running maximum do not
    /// update the statistics.
    pub gate_threshold_db: f64,
    pub psd_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            num_taps: 10,
            delay: 5,
            forgetting: 0.99,
            num_channels: 2,
            gate_threshold_db: -30.0,
            psd_floor: 1e-10,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_taps == 0 || self.delay == 0 || self.num_channels == 0 {
            return Err(Error::InvalidConfig("taps, delay and channels must be >= 1".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "forgetting factor {} outside (0, 1)",
                self.forgetting
            )));
        }
        if !(self.psd_floor > 0.0) {
            return Err(Error::InvalidConfig("psd floor must be positive".into()));
        }
        Ok(())
    }

    /// Length of the stacked delayed vector, `D * K`.
    pub fn stack_len(&self) -> usize {
        self.num_channels * self.num_taps
    }

    pub fn history_len(&self) -> usize {
        self.delay + self.num_taps - 1
    }

    pub(crate) fn gate_ratio<T: Real>(&self) -> T {
        T::lit(10f64.powf(self.gate_threshold_db / 10.0))
    }
}

/// Speech pause detector: compares the channel-averaged frame power with the
/// running maximum seen so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate<T> {
    pub max_power: T,
}

impl<T: Real> Gate<T> {
    pub fn new() -> Self {
        Self { max_power: T::zero() }
    }

    /// Mean of `|x|^2` over bins and channels.
    pub fn frame_power(frame: &[Complex<T>]) -> T {
        if frame.is_empty() {
            return T::zero();
        }
        frame.iter().map(|&z| norm_sqr(z)).sum::<T>() / T::from_usize_lossy(frame.len())
    }

    /// Registers the frame and reports whether statistics may be updated.
    pub fn observe(&mut self, frame: &[Complex<T>], ratio: T) -> bool {
        let p = Self::frame_power(frame);
        if p > self.max_power {
            self.max_power = p;
        }
        p > T::zero() && p >= self.max_power * ratio
    }
}

impl<T: Real> Default for Gate<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WpeState<T> {
    cfg: WpeConfig,
    num_bins: usize,
    filters: Vec<Complex<T>>,
    inv_covs: Vec<Complex<T>>,
    /// `history[j]` is the input frame `x_{t-1-j}` (`F * D` values).
    history: VecDeque<Vec<Complex<T>>>,
    gate: Gate<T>,
    frames_seen: u64,
}

/// Per-frame diagnostics from [`WpeState::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo {
    pub updated: bool,
}

/// `G = 0`, `R^-1 = I`, zero history, reset gate.
pub fn init_state<T: Real>(cfg: &WpeConfig, num_bins: usize) -> Result<WpeState<T>> {
    cfg.validate()?;
    let dk = cfg.stack_len();
    let d = cfg.num_channels;
    let zero = Complex::new(T::zero(), T::zero());
    let mut inv_covs = vec![zero; num_bins * dk * dk];
    for f in 0..num_bins {
        for i in 0..dk {
            inv_covs[f * dk * dk + i * dk + i] = Complex::new(T::one(), T::zero());
        }
    }
    Ok(WpeState {
        cfg: *cfg,
        num_bins,
        filters: vec![zero; num_bins * dk * d],
        inv_covs,
        history: (0..cfg.history_len()).map(|_| vec![zero; num_bins * d]).collect(),
        gate: Gate::new(),
        frames_seen: 0,
    })
}

/// Kalman gain `(1-a) R^-1 X / (a * lambda + (1-a) X^H R^-1 X)`.
pub fn kalman_gain<T: Real>(inv_cov: &[Complex<T>], x_stack: &[Complex<T>], lambda: T, forgetting: T) -> Result<Vec<Complex<T>>> {
    if !lambda.is_finite()
        || x_stack.iter().any(|z| !(z.re.is_finite() && z.im.is_finite()))
        || inv_cov.iter().any(|z| !(z.re.is_finite() && z.im.is_finite()))
    {
        return Err(Error::NonFinite("kalman gain inputs"));
    }
    let n = x_stack.len();
    if inv_cov.len() != n * n {
        return Err(Error::shape(format!("{n}x{n} inverse covariance"), format!("{} values", inv_cov.len())));
    }
    let mut u = vec![Complex::new(T::zero(), T::zero()); n];
    matvec(inv_cov, x_stack, &mut u);
    let scale = gain_scale(x_stack, &u, lambda, forgetting);
    Ok(u.into_iter().map(|v| v * scale).collect())
}

/// `R^-1 <- (R^-1 - K X^H R^-1) / a`, then Hermitian symmetrization.
pub fn update_inverse_cov<T: Real>(inv_cov: &mut [Complex<T>], gain: &[Complex<T>], x_stack: &[Complex<T>], forgetting: T) {
    let n = x_stack.len();
    // w = X^H R^-1 as a row vector.
    let mut w = vec![Complex::new(T::zero(), T::zero()); n];
    for i in 0..n {
        let xi = x_stack[i].conj();
        let row = &inv_cov[i * n..(i + 1) * n];
        for (wj, &p) in w.iter_mut().zip(row) {
            *wj += xi * p;
        }
    }
    rank_one_downdate(inv_cov, gain, &w, forgetting);
}

/// `G <- G + K (x_t - G^H X)^H`.
pub fn update_filter<T: Real>(filter: &mut [Complex<T>], gain: &[Complex<T>], x_t: &[Complex<T>], x_stack: &[Complex<T>]) {
    let err = predict(filter, x_t, x_stack);
    apply_filter_update(filter, gain, &err);
}

/// Dereverberated frame `x_t - G^H X`.
pub fn predict<T: Real>(filter: &[Complex<T>], x_t: &[Complex<T>], x_stack: &[Complex<T>]) -> Vec<Complex<T>> {
    let d_count = x_t.len();
    let mut out = x_t.to_vec();
    for (i, &xi) in x_stack.iter().enumerate() {
        let row = &filter[i * d_count..(i + 1) * d_count];
        for (o, &g) in out.iter_mut().zip(row) {
            *o -= g.conj() * xi;
        }
    }
    out
}

#[inline]
pub(crate) fn matvec<T: Real>(m: &[Complex<T>], v: &[Complex<T>], out: &mut [Complex<T>]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        let mut acc = Complex::new(T::zero(), T::zero());
        for (&a, &b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// Real scale `c` with `K = c * R^-1 X`.
#[inline]
pub(crate) fn gain_scale<T: Real>(x_stack: &[Complex<T>], u: &[Complex<T>], lambda: T, forgetting: T) -> T {
    let quad: T = x_stack.iter().zip(u).map(|(x, u)| (x.conj() * u).re).sum();
    let one_minus = T::one() - forgetting;
    one_minus / (forgetting * lambda + one_minus * quad)
}

/// `P <- herm((P - K w) / a)` where `w` is a row vector.
#[inline]
pub(crate) fn rank_one_downdate<T: Real>(p: &mut [Complex<T>], gain: &[Complex<T>], w: &[Complex<T>], forgetting: T) {
    let n = gain.len();
    let inv_a = T::one() / forgetting;
    for i in 0..n {
        let ki = gain[i];
        let row = &mut p[i * n..(i + 1) * n];
        for (pij, &wj) in row.iter_mut().zip(w) {
            *pij = (*pij - ki * wj) * inv_a;
        }
    }
    symmetrize(p, n);
}

#[inline]
pub(crate) fn symmetrize<T: Real>(p: &mut [Complex<T>], n: usize) {
    let half = T::lit(0.5);
    for i in 0..n {
        let d = p[i * n + i];
        p[i * n + i] = Complex::new(d.re, T::zero());
        for j in i + 1..n {
            let a = p[i * n + j];
            let b = p[j * n + i];
            let s = (a + b.conj()) * half;
            p[i * n + j] = s;
            p[j * n + i] = s.conj();
        }
    }
}

#[inline]
pub(crate) fn apply_filter_update<T: Real>(filter: &mut [Complex<T>], gain: &[Complex<T>], err: &[Complex<T>]) {
    let d_count = err.len();
    for (i, &ki) in gain.iter().enumerate() {
        let row = &mut filter[i * d_count..(i + 1) * d_count];
        for (g, &e) in row.iter_mut().zip(err) {
            *g += ki * e.conj();
        }
    }
}

/// One bin of one frame: writes the prediction error into `out` and, when
/// `update` is set, advances `G` and `P`. Shared by inference and training so
/// both follow the same arithmetic.
pub(crate) fn step_bin<T: Real>(
    filter: &mut [Complex<T>],
    inv_cov: &mut [Complex<T>],
    x_t: &[Complex<T>],
    x_stack: &[Complex<T>],
    lambda: T,
    forgetting: T,
    update: bool,
    scratch: &mut [Complex<T>],
    out: &mut [Complex<T>],
) {
    let d_count = x_t.len();
    out.copy_from_slice(x_t);
    for (i, &xi) in x_stack.iter().enumerate() {
        let row = &filter[i * d_count..(i + 1) * d_count];
        for (o, &g) in out.iter_mut().zip(row.iter()) {
            *o -= g.conj() * xi;
        }
    }
    if !update {
        return;
    }
    let n = x_stack.len();
    let (u, w) = scratch.split_at_mut(n);
    matvec(inv_cov, x_stack, u);
    let c = gain_scale(x_stack, u, lambda, forgetting);
    // P is Hermitian, so X^H P equals u^H exactly.
    for (wj, uj) in w.iter_mut().zip(u.iter_mut()) {
        *wj = uj.conj();
        *uj *= c;
    }
    apply_filter_update(filter, u, out);
    rank_one_downdate(inv_cov, u, &w[..n], forgetting);
}

impl<T: Real> WpeState<T> {
    pub fn config(&self) -> &WpeConfig {
        &self.cfg
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn gate(&self) -> &Gate<T> {
        &self.gate
    }

    fn dk(&self) -> usize {
        self.cfg.stack_len()
    }

    pub fn filter(&self, f: usize) -> &[Complex<T>] {
        let n = self.dk() * self.cfg.num_channels;
        &self.filters[f * n..(f + 1) * n]
    }

    pub fn filter_mut(&mut self, f: usize) -> &mut [Complex<T>] {
        let n = self.dk() * self.cfg.num_channels;
        &mut self.filters[f * n..(f + 1) * n]
    }

    pub fn inv_cov(&self, f: usize) -> &[Complex<T>] {
        let n = self.dk() * self.dk();
        &self.inv_covs[f * n..(f + 1) * n]
    }

    pub fn inv_cov_mut(&mut self, f: usize) -> &mut [Complex<T>] {
        let n = self.dk() * self.dk();
        &mut self.inv_covs[f * n..(f + 1) * n]
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// `X_{t-delay}` for bin `f`: the `K` delayed frames, most recent first.
    pub fn stack_delayed(&self, f: usize) -> Vec<Complex<T>> {
        let mut out = vec![Complex::new(T::zero(), T::zero()); self.dk()];
        self.stack_into(f, &mut out);
        out
    }

    fn stack_into(&self, f: usize, out: &mut [Complex<T>]) {
        let d_count = self.cfg.num_channels;
        for k in 0..self.cfg.num_taps {
            let frame = &self.history[self.cfg.delay - 1 + k];
            out[k * d_count..(k + 1) * d_count].copy_from_slice(&frame[f * d_count..(f + 1) * d_count]);
        }
    }

    pub fn kalman_gain(&self, f: usize, x_stack: &[Complex<T>], lambda: T) -> Result<Vec<Complex<T>>> {
        kalman_gain(self.inv_cov(f), x_stack, lambda, T::lit(self.cfg.forgetting))
    }

    pub fn update_inverse_cov(&mut self, f: usize, gain: &[Complex<T>], x_stack: &[Complex<T>]) {
        let a = T::lit(self.cfg.forgetting);
        update_inverse_cov(self.inv_cov_mut(f), gain, x_stack, a);
    }

    pub fn update_filter(&mut self, f: usize, gain: &[Complex<T>], x_t: &[Complex<T>], x_stack: &[Complex<T>]) {
        update_filter(self.filter_mut(f), gain, x_t, x_stack);
    }

    pub fn predict(&self, f: usize, x_t: &[Complex<T>], x_stack: &[Complex<T>]) -> Vec<Complex<T>> {
        predict(self.filter(f), x_t, x_stack)
    }

    /// Pushes an input frame into the delay line.
    pub fn push_history(&mut self, frame: &[Complex<T>]) {
        if let Some(mut oldest) = self.history.pop_back() {
            oldest.copy_from_slice(frame);
            self.history.push_front(oldest);
        }
    }

    /// Processes one frame (`F * D` values, bin-major) with PSD `lambda`
    /// (`F` values, floored at the configured minimum).
    pub fn step(&mut self, frame: &[Complex<T>], lambda: &[T]) -> Result<(Vec<Complex<T>>, StepInfo)> {
        let mut out = vec![Complex::new(T::zero(), T::zero()); frame.len()];
        let info = self.step_into(frame, lambda, &mut out)?;
        Ok((out, info))
    }

    pub fn step_into(&mut self, frame: &[Complex<T>], lambda: &[T], out: &mut [Complex<T>]) -> Result<StepInfo> {
        let d_count = self.cfg.num_channels;
        let bins = self.num_bins;
        if frame.len() != bins * d_count || lambda.len() != bins || out.len() != frame.len() {
            return Err(Error::shape(
                format!("{bins} bins x {d_count} channels, {bins} psd values"),
                format!("{} frame values, {} psd values", frame.len(), lambda.len()),
            ));
        }
        if frame.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFinite("input frame"));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("psd"));
        }
        let update = self.gate.observe(frame, self.cfg.gate_ratio());
        let floor = T::lit(self.cfg.psd_floor);
        let a = T::lit(self.cfg.forgetting);
        let dk = self.dk();
        let mut x_stack = vec![Complex::new(T::zero(), T::zero()); dk];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); 2 * dk];
        let g_len = dk * d_count;
        let p_len = dk * dk;
        for f in 0..bins {
            self.stack_into(f, &mut x_stack);
            let x_t = &frame[f * d_count..(f + 1) * d_count];
            step_bin(
                &mut self.filters[f * g_len..(f + 1) * g_len],
                &mut self.inv_covs[f * p_len..(f + 1) * p_len],
                x_t,
                &x_stack,
                lambda[f].max(floor),
                a,
                update,
                &mut scratch,
                &mut out[f * d_count..(f + 1) * d_count],
            );
        }
        self.push_history(frame);
        self.frames_seen += 1;
        Ok(StepInfo { updated: update })
    }

    pub(crate) fn raw_filters(&self) -> &[Complex<T>] {
        &self.filters
    }

    pub(crate) fn raw_inv_covs(&self) -> &[Complex<T>] {
        &self.inv_covs
    }

    /// Input frame `x_{t-1-j}` held in the delay line.
    pub(crate) fn history_frame(&self, j: usize) -> &[Complex<T>] {
        &self.history[j]
    }

    pub fn is_finite(&self) -> bool {
        self.filters
            .iter()
            .chain(&self.inv_covs)
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"OWPESNAP";
const SNAPSHOT_VERSION: u32 = 1;

impl<T: Real> WpeState<T> {
    /// Serializes the full stream state. Values are stored as little-endian
    /// `f64`, so `f32` and `f64` states share the format.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<snapshot>", e);
        w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io)?;
        for v in [
            self.cfg.num_taps as u64,
            self.cfg.delay as u64,
            self.cfg.num_channels as u64,
            self.num_bins as u64,
            self.frames_seen,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [self.cfg.forgetting, self.cfg.gate_threshold_db, self.cfg.psd_floor] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.gate.max_power.to_f64_lossy().to_le_bytes()).map_err(io)?;
        let values = self
            .filters
            .iter()
            .chain(&self.inv_covs)
            .chain(self.history.iter().flatten());
        for z in values {
            w.write_all(&z.re.to_f64_lossy().to_le_bytes()).map_err(io)?;
            w.write_all(&z.im.to_f64_lossy().to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<snapshot>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::BadSnapshot("wrong magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != SNAPSHOT_VERSION {
            return Err(Error::BadSnapshot(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let taps = next_u64(&mut r)? as usize;
        let delay = next_u64(&mut r)? as usize;
        let channels = next_u64(&mut r)? as usize;
        let bins = next_u64(&mut r)? as usize;
        let frames_seen = next_u64(&mut r)?;
        let mut next_f64 = |r: &mut R| -> Result<f64> { next_u64(r).map(f64::from_bits) };
        let forgetting = next_f64(&mut r)?;
        let gate_threshold_db = next_f64(&mut r)?;
        let psd_floor = next_f64(&mut r)?;
        let max_power = next_f64(&mut r)?;
        let cfg = WpeConfig {
            num_taps: taps,
            delay,
            forgetting,
            num_channels: channels,
            gate_threshold_db,
            psd_floor,
        };
        let mut state = init_state::<T>(&cfg, bins)?;
        state.frames_seen = frames_seen;
        state.gate.max_power = T::lit(max_power);
        let mut read_into = |r: &mut R, buf: &mut [Complex<T>]| -> Result<()> {
            for z in buf {
                let re = next_f64(r)?;
                let im = next_f64(r)?;
                *z = Complex::new(T::lit(re), T::lit(im));
            }
            Ok(())
        };
        read_into(&mut r, &mut state.filters)?;
        read_into(&mut r, &mut state.inv_covs)?;
        for frame in state.history.iter_mut() {
            read_into(&mut r, frame)?;
        }
        Ok(state)
    }
}
