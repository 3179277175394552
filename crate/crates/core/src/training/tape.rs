//! Reverse-mode differentiation of one segment of the DNN-WPE pipeline.
//!
//! The forward pass records one node per operation and frame
//! (network step, mask-to-PSD, RLS-WPE step, loss) together with the values
//! needed to differentiate it. Complex quantities are differentiated as pairs
//! of real variables; adjoints are stored as `dL/dRe + i dL/dIm`.
//!
//! RLS states are large (`F * DK * DK` per frame), so the tape keeps them
//! only every `checkpoint_interval` frames and replays each block forward
//! during the reverse sweep.
//!
//! The speech-pause gate and the PSD floor are branch decisions taken in the
//! forward pass; the reverse sweep follows the branch that was taken.

use num_complex::Complex;

use super::{mask_frame_loss, output_frame_loss, CarriedState, LossMode, Segment, TrainConfig};
use crate::error::{Error, Result};
use crate::neural::{MaskModel, RecurrentState, StepCache};
use crate::psd::mask_to_psd;
use crate::scalar::Real;
use crate::wpe::{gain_scale, matvec, step_bin, symmetrize, WpeConfig};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// LSTM state carried in from the previous segment.
    CarriedLstm,
    /// RLS statistics and delay line carried in from the previous segment.
    CarriedWpe,
    /// Observed input frame.
    Input,
    LstmStep,
    MaskToPsd,
    WpeStep,
    Loss,
}

impl NodeKind {
    /// Leaves that never receive gradient.
    pub fn is_constant(self) -> bool {
        matches!(self, NodeKind::CarriedLstm | NodeKind::CarriedWpe | NodeKind::Input)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeNode {
    pub kind: NodeKind,
    /// Frame within the segment; `None` for carried states.
    pub frame: Option<usize>,
    pub operands: Vec<NodeId>,
}

type C<T> = Complex<T>;

/// Recorded forward pass of one segment.
pub struct Tape<T> {
    nodes: Vec<TapeNode>,
    seg_start: usize,
    seg_len: usize,
    wpe_cfg: WpeConfig,
    mode: LossMode,
    eps: T,
    block: usize,
    lstm_caches: Vec<StepCache<T>>,
    /// Floored PSD actually used, `len * F`.
    lambda: Vec<T>,
    /// False where the floor was active (zero derivative).
    lambda_live: Vec<bool>,
    gates: Vec<bool>,
    outputs: Vec<C<T>>,
    history0: Vec<Vec<C<T>>>,
    checkpoints: Vec<(Vec<C<T>>, Vec<C<T>>)>,
    frame_losses: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Runs the forward pass over `seg` starting from `carried` and returns
    /// the tape with the state reached at the end of the segment.
    pub fn record(
        model: &MaskModel<T>,
        seg: Segment<'_, T>,
        carried: &CarriedState<T>,
        cfg: &TrainConfig,
    ) -> Result<(Self, CarriedState<T>)> {
        let seq = seg.seq;
        if seg.start + seg.len > seq.num_frames() {
            return Err(Error::DatasetTooShort(format!(
                "segment [{}, {}) beyond {} frames",
                seg.start,
                seg.start + seg.len,
                seq.num_frames()
            )));
        }
        let bins = seq.num_bins();
        let wpe_cfg = *carried.wpe.config();
        let floor = T::lit(wpe_cfg.psd_floor);
        let eps = T::lit(cfg.loss_floor);
        let block = cfg.block_len().max(1);
        let mut wpe = carried.wpe.clone();
        let mut lstm = carried.lstm.clone();
        let history0 = (0..wpe.history_len()).map(|j| wpe.history_frame(j).to_vec()).collect();

        let mut tape = Tape {
            nodes: Vec::with_capacity(2 + 5 * seg.len),
            seg_start: seg.start,
            seg_len: seg.len,
            wpe_cfg,
            mode: cfg.loss_mode,
            eps,
            block,
            lstm_caches: Vec::with_capacity(seg.len),
            lambda: Vec::with_capacity(seg.len * bins),
            lambda_live: Vec::with_capacity(seg.len * bins),
            gates: Vec::with_capacity(seg.len),
            outputs: vec![C::new(T::zero(), T::zero()); seg.len * bins * seq.num_channels()],
            history0,
            checkpoints: Vec::new(),
            frame_losses: Vec::with_capacity(seg.len),
        };
        let mut prev_lstm = tape.push(NodeKind::CarriedLstm, None, vec![]);
        let mut prev_wpe = tape.push(NodeKind::CarriedWpe, None, vec![]);
        let frame_len = bins * seq.num_channels();

        for t in 0..seg.len {
            let abs = seg.start + t;
            let input = tape.push(NodeKind::Input, Some(t), vec![]);

            let cache = model.forward_cached(seq.input_mag(abs), &lstm)?;
            lstm = cache.state_after();
            let lstm_node = tape.push(NodeKind::LstmStep, Some(t), vec![input, prev_lstm]);

            let raw = mask_to_psd(&cache.mask, seq.input_mag(abs));
            for &l in &raw {
                tape.lambda_live.push(l >= floor);
                tape.lambda.push(l.max(floor));
            }
            tape.lstm_caches.push(cache);
            let psd_node = tape.push(NodeKind::MaskToPsd, Some(t), vec![lstm_node, input]);

            if t % block == 0 {
                tape.checkpoints
                    .push((wpe.raw_filters().to_vec(), wpe.raw_inv_covs().to_vec()));
            }
            let out = &mut tape.outputs[t * frame_len..(t + 1) * frame_len];
            let info = wpe.step_into(seq.input().frame(abs), &tape.lambda[t * bins..(t + 1) * bins], out)?;
            let loss = output_frame_loss(out, seq, abs, tape.mode, eps, None);
            tape.gates.push(info.updated);
            let wpe_node = tape.push(NodeKind::WpeStep, Some(t), vec![psd_node, prev_wpe, input]);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { frame: abs });
            }
            tape.frame_losses.push(loss);
            tape.push(NodeKind::Loss, Some(t), vec![wpe_node]);

            prev_lstm = lstm_node;
            prev_wpe = wpe_node;
        }
        Ok((tape, CarriedState { lstm, wpe }))
    }

    fn push(&mut self, kind: NodeKind, frame: Option<usize>, operands: Vec<NodeId>) -> NodeId {
        self.nodes.push(TapeNode { kind, frame, operands });
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn num_frames(&self) -> usize {
        self.seg_len
    }

    /// Total segment loss.
    pub fn loss(&self) -> T {
        self.frame_losses.iter().copied().sum()
    }

    pub fn gate_decisions(&self) -> &[bool] {
        &self.gates
    }

    /// Every operand precedes its consumer and lies inside this tape, and
    /// carried states enter only as constant leaves.
    pub fn is_segment_local(&self) -> bool {
        self.nodes.iter().enumerate().all(|(id, node)| {
            node.operands.iter().all(|&op| op < id)
                && (!node.kind.is_constant() || node.operands.is_empty())
                && node.frame.is_none_or(|t| t < self.seg_len)
        })
    }

    /// Walks the tape in reverse and returns `dL/dparams`.
    pub fn backward(&self, model: &MaskModel<T>, seg: Segment<'_, T>) -> Vec<T> {
        let seq = seg.seq;
        let bins = seq.num_bins();
        let d_count = seq.num_channels();
        let dk = self.wpe_cfg.stack_len();
        let h_dim = model.dims().hidden_dim;
        let alpha = T::lit(self.wpe_cfg.forgetting);
        let zero = C::new(T::zero(), T::zero());

        let mut grads = vec![T::zero(); model.params().len()];
        let mut g_adj = vec![zero; bins * dk * d_count];
        let mut p_adj = vec![zero; bins * dk * dk];
        let mut out_adj = vec![zero; bins * d_count];
        let mut lambda_adj = vec![T::zero(); bins];
        let mut mask_adj = vec![T::zero(); bins];
        let mut dh = vec![T::zero(); h_dim];
        let mut dc = vec![T::zero(); h_dim];
        let mut replay = Replay::new(self.block, bins * dk * d_count, bins * dk * dk);
        let mut x_stack = vec![zero; dk];
        let mut scratch = BinScratch::new(dk);

        for node in self.nodes.iter().rev() {
            let Some(t) = node.frame else { continue };
            match node.kind {
                NodeKind::Loss => {
                    let out = &self.outputs[t * bins * d_count..(t + 1) * bins * d_count];
                    output_frame_loss(out, seq, self.seg_start + t, self.mode, self.eps, Some(&mut out_adj));
                }
                NodeKind::WpeStep => {
                    replay.ensure(self, seg, t);
                    let (pre_g, pre_p) = replay.state(t);
                    let x_t = seq.input().frame(self.seg_start + t);
                    for f in 0..bins {
                        self.stack_at(seg, t, f, &mut x_stack);
                        let gs = f * dk * d_count..(f + 1) * dk * d_count;
                        let ps = f * dk * dk..(f + 1) * dk * dk;
                        lambda_adj[f] = backward_bin(
                            &pre_g[gs.clone()],
                            &pre_p[ps.clone()],
                            &x_t[f * d_count..(f + 1) * d_count],
                            &x_stack,
                            self.lambda[t * bins + f],
                            alpha,
                            self.gates[t],
                            &out_adj[f * d_count..(f + 1) * d_count],
                            &mut g_adj[gs],
                            &mut p_adj[ps],
                            &mut scratch,
                        );
                    }
                }
                NodeKind::MaskToPsd => {
                    let cache = &self.lstm_caches[t];
                    let mags = seq.input_mag(self.seg_start + t);
                    for f in 0..bins {
                        mask_adj[f] = if self.lambda_live[t * bins + f] {
                            let m = mags[f];
                            lambda_adj[f] * T::lit(2.0) * cache.mask[f] * m * m
                        } else {
                            T::zero()
                        };
                    }
                }
                NodeKind::LstmStep => {
                    let (h_prev, c_prev) = model.backward_step(&self.lstm_caches[t], &mask_adj, &dh, &dc, &mut grads);
                    dh = h_prev;
                    dc = c_prev;
                }
                NodeKind::Input | NodeKind::CarriedLstm | NodeKind::CarriedWpe => {}
            }
        }
        grads
    }

    /// Input frame at segment-relative index `r`, reaching into the carried
    /// delay line for negative indices.
    fn frame_rel<'a>(&'a self, seg: Segment<'a, T>, r: isize) -> &'a [C<T>] {
        if r >= 0 {
            seg.seq.input().frame(seg.start + r as usize)
        } else {
            &self.history0[(-r - 1) as usize]
        }
    }

    fn stack_at(&self, seg: Segment<'_, T>, t: usize, f: usize, out: &mut [C<T>]) {
        let d_count = seg.seq.num_channels();
        for k in 0..self.wpe_cfg.num_taps {
            let r = t as isize - (self.wpe_cfg.delay + k) as isize;
            let frame = self.frame_rel(seg, r);
            out[k * d_count..(k + 1) * d_count].copy_from_slice(&frame[f * d_count..(f + 1) * d_count]);
        }
    }
}

/// Per-frame RLS states of the block currently being differentiated.
struct Replay<T> {
    block: usize,
    current: Option<usize>,
    filters: Vec<Vec<C<T>>>,
    inv_covs: Vec<Vec<C<T>>>,
}

impl<T: Real> Replay<T> {
    fn new(block: usize, g_len: usize, p_len: usize) -> Self {
        let zero = C::new(T::zero(), T::zero());
        Self {
            block,
            current: None,
            filters: vec![vec![zero; g_len]; block],
            inv_covs: vec![vec![zero; p_len]; block],
        }
    }

    fn state(&self, t: usize) -> (&[C<T>], &[C<T>]) {
        let i = t % self.block;
        (&self.filters[i], &self.inv_covs[i])
    }

    /// Recomputes the pre-step states of the block containing frame `t`.
    fn ensure(&mut self, tape: &Tape<T>, seg: Segment<'_, T>, t: usize) {
        let b = t / self.block;
        if self.current == Some(b) {
            return;
        }
        let seq = seg.seq;
        let bins = seq.num_bins();
        let d_count = seq.num_channels();
        let dk = tape.wpe_cfg.stack_len();
        let alpha = T::lit(tape.wpe_cfg.forgetting);
        let (g0, p0) = &tape.checkpoints[b];
        let mut g = g0.clone();
        let mut p = p0.clone();
        let mut x_stack = vec![C::new(T::zero(), T::zero()); dk];
        let mut scratch = vec![C::new(T::zero(), T::zero()); 2 * dk];
        let mut out = vec![C::new(T::zero(), T::zero()); d_count];
        let end = ((b + 1) * self.block).min(tape.seg_len);
        for s in b * self.block..end {
            let i = s % self.block;
            self.filters[i].copy_from_slice(&g);
            self.inv_covs[i].copy_from_slice(&p);
            if s + 1 == end {
                break;
            }
            let x_t = seq.input().frame(seg.start + s);
            for f in 0..bins {
                tape.stack_at(seg, s, f, &mut x_stack);
                step_bin(
                    &mut g[f * dk * d_count..(f + 1) * dk * d_count],
                    &mut p[f * dk * dk..(f + 1) * dk * dk],
                    &x_t[f * d_count..(f + 1) * d_count],
                    &x_stack,
                    tape.lambda[s * bins + f],
                    alpha,
                    tape.gates[s],
                    &mut scratch,
                    &mut out,
                );
            }
        }
        self.current = Some(b);
    }
}

struct BinScratch<T> {
    u: Vec<C<T>>,
    gain: Vec<C<T>>,
    gain_adj: Vec<C<T>>,
    w_adj: Vec<C<T>>,
    e: Vec<C<T>>,
    e_adj: Vec<C<T>>,
}

impl<T: Real> BinScratch<T> {
    fn new(dk: usize) -> Self {
        let zero = C::new(T::zero(), T::zero());
        Self {
            u: vec![zero; dk],
            gain: vec![zero; dk],
            gain_adj: vec![zero; dk],
            w_adj: vec![zero; dk],
            e: Vec::new(),
            e_adj: Vec::new(),
        }
    }
}

/// Adjoint of one RLS-WPE bin update.
///
/// Forward (see `step_bin`):
/// `e = x - G^H X`; if updating: `u = P X`, `c = (1-a) / (a lambda + (1-a) Re(X^H u))`,
/// `K = c u`, `G' = G + K e^H`, `P' = herm((P - K u^H) / a)`.
///
/// On entry `g_adj`/`p_adj` hold the adjoints of `G'`/`P'`; on exit those of
/// `G`/`P`. Returns `dL/dlambda`.
#[allow(clippy::too_many_arguments)]
fn backward_bin<T: Real>(
    g: &[C<T>],
    p: &[C<T>],
    x_t: &[C<T>],
    x_stack: &[C<T>],
    lambda: T,
    alpha: T,
    update: bool,
    out_adj: &[C<T>],
    g_adj: &mut [C<T>],
    p_adj: &mut [C<T>],
    s: &mut BinScratch<T>,
) -> T {
    let d_count = x_t.len();
    let n = x_stack.len();
    let zero = C::new(T::zero(), T::zero());

    s.e.clear();
    s.e.extend_from_slice(x_t);
    for (i, &xi) in x_stack.iter().enumerate() {
        for d in 0..d_count {
            s.e[d] -= g[i * d_count + d].conj() * xi;
        }
    }
    s.e_adj.clear();
    s.e_adj.extend_from_slice(out_adj);

    let mut lambda_adj = T::zero();
    if update {
        let one_minus = T::one() - alpha;
        matvec(p, x_stack, &mut s.u);
        let c = gain_scale(x_stack, &s.u, lambda, alpha);
        let quad: T = x_stack.iter().zip(&s.u).map(|(x, u)| (x.conj() * u).re).sum();
        let den = alpha * lambda + one_minus * quad;
        for i in 0..n {
            s.gain[i] = s.u[i] * c;
        }

        // G' = G + K e^H
        for i in 0..n {
            let mut acc = zero;
            for d in 0..d_count {
                let ga = g_adj[i * d_count + d];
                acc += ga * s.e[d];
                s.e_adj[d] += s.gain[i] * ga.conj();
            }
            s.gain_adj[i] = acc;
        }

        // P' = herm(P_raw), P_raw = (P - K w) / a with w = u^H.
        symmetrize(p_adj, n);
        let inv_a = T::one() / alpha;
        for w in s.w_adj.iter_mut() {
            *w = zero;
        }
        for i in 0..n {
            let ki_conj = s.gain[i].conj();
            let mut k_acc = zero;
            let row = &mut p_adj[i * n..(i + 1) * n];
            for j in 0..n {
                let raw = row[j] * inv_a;
                // A = K w, adjoint -raw
                k_acc -= raw * s.u[j];
                s.w_adj[j] -= ki_conj * raw;
                row[j] = raw;
            }
            s.gain_adj[i] += k_acc;
        }

        // K = c u
        let mut c_adj = T::zero();
        for i in 0..n {
            c_adj += (s.gain_adj[i].conj() * s.u[i]).re;
        }
        let den_adj = -c_adj * c / den;
        lambda_adj = alpha * den_adj;
        let quad_adj = one_minus * den_adj;

        // u adjoint from w = conj(u), K = c u, and the quadratic form.
        for i in 0..n {
            let u_adj = s.w_adj[i].conj() + s.gain_adj[i] * c + x_stack[i] * quad_adj;
            let row = &mut p_adj[i * n..(i + 1) * n];
            for (pa, &xj) in row.iter_mut().zip(x_stack) {
                *pa += u_adj * xj.conj();
            }
        }
    }

    // e = x - G^H X
    for (i, &xi) in x_stack.iter().enumerate() {
        for d in 0..d_count {
            g_adj[i * d_count + d] -= xi * s.e_adj[d].conj();
        }
    }
    lambda_adj
}

/// Loss and parameter gradient of the end-to-end objective on one segment.
/// The carried states are constants.
pub fn backprop_segment<T: Real>(
    model: &MaskModel<T>,
    seg: Segment<'_, T>,
    carried: &CarriedState<T>,
    cfg: &TrainConfig,
) -> Result<(T, Vec<T>, CarriedState<T>)> {
    let (tape, next) = Tape::record(model, seg, carried, cfg)?;
    let grads = tape.backward(model, seg);
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        log::warn!("non-finite gradient at parameter {i}");
        return Err(Error::NonFinite("gradient"));
    }
    Ok((tape.loss(), grads, next))
}

/// Forward-only end-to-end loss of one segment; advances `carried`.
pub fn segment_loss<T: Real>(
    model: &MaskModel<T>,
    seg: Segment<'_, T>,
    carried: &mut CarriedState<T>,
    cfg: &TrainConfig,
) -> Result<T> {
    let seq = seg.seq;
    let bins = seq.num_bins();
    let eps = T::lit(cfg.loss_floor);
    let mut out = vec![C::new(T::zero(), T::zero()); bins * seq.num_channels()];
    let mut total = T::zero();
    for t in seg.start..seg.start + seg.len {
        let (mask, next) = model.forward_step(seq.input_mag(t), &carried.lstm)?;
        carried.lstm = next;
        let lambda = mask_to_psd(&mask, seq.input_mag(t));
        carried.wpe.step_into(seq.input().frame(t), &lambda, &mut out)?;
        let loss = output_frame_loss(&out, seq, t, cfg.loss_mode, eps, None);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { frame: t });
        }
        total += loss;
    }
    Ok(total)
}

/// Loss and gradient of the mask-domain objective on one segment, with the
/// LSTM state advanced in place.
pub fn backprop_pretrain_segment<T: Real>(
    model: &MaskModel<T>,
    seg: Segment<'_, T>,
    state: &mut RecurrentState<T>,
    cfg: &TrainConfig,
) -> Result<(T, Vec<T>)> {
    let seq = seg.seq;
    let eps = T::lit(cfg.loss_floor);
    let mut caches = Vec::with_capacity(seg.len);
    let mut total = T::zero();
    for t in seg.start..seg.start + seg.len {
        let cache = model.forward_cached(seq.input_mag(t), state)?;
        *state = cache.state_after();
        let loss = mask_frame_loss(&cache.mask, seq, t, eps, None);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { frame: t });
        }
        total += loss;
        caches.push(cache);
    }
    let h_dim = model.dims().hidden_dim;
    let mut grads = vec![T::zero(); model.params().len()];
    let mut mask_adj = vec![T::zero(); seq.num_bins()];
    let mut dh = vec![T::zero(); h_dim];
    let mut dc = vec![T::zero(); h_dim];
    for (i, cache) in caches.iter().enumerate().rev() {
        mask_frame_loss(&cache.mask, seq, seg.start + i, eps, Some(&mut mask_adj));
        let (a, b) = model.backward_step(cache, &mask_adj, &dh, &dc, &mut grads);
        dh = a;
        dc = b;
    }
    Ok((total, grads))
}
