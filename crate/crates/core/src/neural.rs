//! Recurrent mask estimator: one LSTM layer followed by an affine output
//! layer with sigmoid activation.
//!
//! Gate order inside the stacked weight blocks is input, forget, cell,
//! output. Parameters live in one flat vector so the optimizer and gradient
//! checks can treat them uniformly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    /// Number of STFT bins `F` (input and output width).
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl NetDims {
    pub fn param_count(&self) -> usize {
        let (f, h) = (self.input_dim, self.hidden_dim);
        4 * (f * h + h * h + h) + (h * f + f)
    }

    fn offsets(&self) -> Offsets {
        let (f, h) = (self.input_dim, self.hidden_dim);
        let w_ih = 0;
        let w_hh = w_ih + 4 * h * f;
        let b = w_hh + 4 * h * h;
        let w_out = b + 4 * h;
        let b_out = w_out + f * h;
        Offsets { w_ih, w_hh, b, w_out, b_out }
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    pub hidden_dim: usize,
    /// Feed `ln(1 + |x|)` instead of raw magnitudes.
    pub log_compress: bool,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            log_compress: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskModel<T> {
    dims: NetDims,
    log_compress: bool,
    seed: u64,
    params: Vec<T>,
}

/// LSTM hidden and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![T::zero(); hidden_dim],
            c: vec![T::zero(); hidden_dim],
        }
    }
}

/// Values kept from a forward step for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct StepCache<T> {
    input: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Post-activation gates, `[i, f, g, o]` each of width `H`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
    pub(crate) mask: Vec<T>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Uniform weights in `+-1/sqrt(fan_in)`, zero biases except the forget gate
/// (+1).
pub fn init_params<T: Real>(seed: u64, dims: NetDims, log_compress: bool) -> Result<MaskModel<T>> {
    if dims.input_dim == 0 || dims.hidden_dim == 0 {
        return Err(Error::InvalidConfig("network dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, h) = (dims.input_dim, dims.hidden_dim);
    let off = dims.offsets();
    let mut params = vec![T::zero(); dims.param_count()];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[range] {
            *p = T::lit(rng.random_range(-bound..bound));
        }
    };
    fill(off.w_ih..off.w_hh, f, &mut rng);
    fill(off.w_hh..off.b, h, &mut rng);
    fill(off.w_out..off.b_out, h, &mut rng);
    for p in &mut params[off.b + h..off.b + 2 * h] {
        *p = T::one();
    }
    Ok(MaskModel {
        dims,
        log_compress,
        seed,
        params,
    })
}

impl<T: Real> MaskModel<T> {
    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn log_compress(&self) -> bool {
        self.log_compress
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> MaskModel<U> {
        MaskModel {
            dims: self.dims,
            log_compress: self.log_compress,
            seed: self.seed,
            params: self.params.iter().map(|p| U::lit(p.to_f64_lossy())).collect(),
        }
    }

    pub fn zero_state(&self) -> RecurrentState<T> {
        RecurrentState::zeros(self.dims.hidden_dim)
    }

    fn features(&self, input: &[T]) -> Vec<T> {
        if self.log_compress {
            input.iter().map(|&v| v.ln_1p()).collect()
        } else {
            input.to_vec()
        }
    }

    /// One recurrent step from the channel-averaged magnitude frame.
    pub fn forward_step(&self, input: &[T], state: &RecurrentState<T>) -> Result<(Vec<T>, RecurrentState<T>)> {
        let cache = self.forward_cached(input, state)?;
        let next = RecurrentState {
            h: cache.h.clone(),
            c: cache.c_next(),
        };
        Ok((cache.mask, next))
    }

    pub(crate) fn forward_cached(&self, input: &[T], state: &RecurrentState<T>) -> Result<StepCache<T>> {
        let (f_dim, h_dim) = (self.dims.input_dim, self.dims.hidden_dim);
        if input.len() != f_dim || state.h.len() != h_dim || state.c.len() != h_dim {
            return Err(Error::shape(
                format!("{f_dim} inputs, {h_dim} state"),
                format!("{} inputs, {} state", input.len(), state.h.len()),
            ));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let off = self.dims.offsets();
        let p = &self.params;
        let x = self.features(input);
        let mut z = p[off.b..off.b + 4 * h_dim].to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let wi = &p[off.w_ih + r * f_dim..off.w_ih + (r + 1) * f_dim];
            let wh = &p[off.w_hh + r * h_dim..off.w_hh + (r + 1) * h_dim];
            let mut acc = *zr;
            for (&w, &v) in wi.iter().zip(&x) {
                acc += w * v;
            }
            for (&w, &v) in wh.iter().zip(&state.h) {
                acc += w * v;
            }
            *zr = acc;
        }
        let mut gates = z;
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k / h_dim == 2 { g.tanh() } else { sigmoid(*g) };
        }
        let mut c = vec![T::zero(); h_dim];
        let mut tanh_c = vec![T::zero(); h_dim];
        let mut h = vec![T::zero(); h_dim];
        for j in 0..h_dim {
            let (ig, fg, gg, og) = (gates[j], gates[h_dim + j], gates[2 * h_dim + j], gates[3 * h_dim + j]);
            c[j] = fg * state.c[j] + ig * gg;
            tanh_c[j] = c[j].tanh();
            h[j] = og * tanh_c[j];
        }
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let mut mask = p[off.b_out..off.b_out + f_dim].to_vec();
        for (r, m) in mask.iter_mut().enumerate() {
            let w = &p[off.w_out + r * h_dim..off.w_out + (r + 1) * h_dim];
            let mut acc = *m;
            for (&wv, &hv) in w.iter().zip(&h) {
                acc += wv * hv;
            }
            *m = sigmoid(acc).max(lo).min(hi);
        }
        Ok(StepCache {
            input: x,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            tanh_c,
            h,
            mask,
        })
    }

    /// Runs `forward_step` left to right, returning the masks and the final
    /// state for carry-over.
    pub fn forward_sequence(&self, inputs: &[Vec<T>], initial: &RecurrentState<T>) -> Result<(Vec<Vec<T>>, RecurrentState<T>)> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut state = initial.clone();
        let mut masks = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (m, next) = self.forward_step(x, &state)?;
            masks.push(m);
            state = next;
        }
        Ok((masks, state))
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grads` and returns the adjoints of `(h_prev, c_prev)`.
    pub(crate) fn backward_step(
        &self,
        cache: &StepCache<T>,
        mask_grad: &[T],
        dh_next: &[T],
        dc_next: &[T],
        grads: &mut [T],
    ) -> (Vec<T>, Vec<T>) {
        let (f_dim, h_dim) = (self.dims.input_dim, self.dims.hidden_dim);
        let off = self.dims.offsets();
        let p = &self.params;
        let mut dh = dh_next.to_vec();
        for r in 0..f_dim {
            let m = cache.mask[r];
            let dy = mask_grad[r] * m * (T::one() - m);
            if dy == T::zero() {
                continue;
            }
            grads[off.b_out + r] += dy;
            let w = &p[off.w_out + r * h_dim..off.w_out + (r + 1) * h_dim];
            let gw = &mut grads[off.w_out + r * h_dim..off.w_out + (r + 1) * h_dim];
            for j in 0..h_dim {
                gw[j] += dy * cache.h[j];
                dh[j] += dy * w[j];
            }
        }
        let g = &cache.gates;
        let mut dz = vec![T::zero(); 4 * h_dim];
        let mut dc_prev = vec![T::zero(); h_dim];
        for j in 0..h_dim {
            let (ig, fg, gg, og) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
            let tc = cache.tanh_c[j];
            let d_o = dh[j] * tc;
            let dc = dc_next[j] + dh[j] * og * (T::one() - tc * tc);
            let d_f = dc * cache.c_prev[j];
            let d_i = dc * gg;
            let d_g = dc * ig;
            dc_prev[j] = dc * fg;
            dz[j] = d_i * ig * (T::one() - ig);
            dz[h_dim + j] = d_f * fg * (T::one() - fg);
            dz[2 * h_dim + j] = d_g * (T::one() - gg * gg);
            dz[3 * h_dim + j] = d_o * og * (T::one() - og);
        }
        let mut dh_prev = vec![T::zero(); h_dim];
        for (r, &d) in dz.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            grads[off.b + r] += d;
            let gi = &mut grads[off.w_ih + r * f_dim..off.w_ih + (r + 1) * f_dim];
            for (gv, &xv) in gi.iter_mut().zip(&cache.input) {
                *gv += d * xv;
            }
            let gh = &mut grads[off.w_hh + r * h_dim..off.w_hh + (r + 1) * h_dim];
            for (gv, &hv) in gh.iter_mut().zip(&cache.h_prev) {
                *gv += d * hv;
            }
            let wh = &p[off.w_hh + r * h_dim..off.w_hh + (r + 1) * h_dim];
            for (dp, &w) in dh_prev.iter_mut().zip(wh) {
                *dp += d * w;
            }
        }
        (dh_prev, dc_prev)
    }
}

impl<T: Real> StepCache<T> {
    pub(crate) fn state_after(&self) -> RecurrentState<T> {
        RecurrentState {
            h: self.h.clone(),
            c: self.c_next(),
        }
    }

    fn c_next(&self) -> Vec<T> {
        let h_dim = self.h.len();
        (0..h_dim)
            .map(|j| self.gates[h_dim + j] * self.c_prev[j] + self.gates[j] * self.gates[2 * h_dim + j])
            .collect()
    }
}

const CHECKPOINT_FORMAT: &str = "online-wpe-mask-model";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint container. Parameters are stored as `f64`; serde_json
/// prints the shortest round-tripping representation, so reload is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: NetDims,
    pub log_compress: bool,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl<T: Real> MaskModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            log_compress: self.log_compress,
            seed: self.seed,
            params: self.params.iter().map(|p| p.to_f64_lossy()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::BadSnapshot(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.params.len() != ck.dims.param_count() {
            return Err(Error::shape(
                format!("{} parameters", ck.dims.param_count()),
                format!("{}", ck.params.len()),
            ));
        }
        Ok(Self {
            dims: ck.dims,
            log_compress: ck.log_compress,
            seed: ck.seed,
            params: ck.params.iter().map(|&v| T::lit(v)).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(f: usize, h: usize) -> NetDims {
        NetDims { input_dim: f, hidden_dim: h }
    }

    #[test]
    fn parameter_count_formula() {
        let m = init_params::<f64>(0, dims(257, 64), false).unwrap();
        let expected = 4 * (257 * 64 + 64 * 64 + 64) + (64 * 257 + 257);
        assert_eq!(m.params().len(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params::<f64>(7, dims(9, 4), false).unwrap();
        let b = init_params::<f64>(7, dims(9, 4), false).unwrap();
        let c = init_params::<f64>(8, dims(9, 4), false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        // forget-gate bias
        let off = a.dims.offsets();
        assert!(a.params()[off.b + 4..off.b + 8].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut m = init_params::<f64>(0, dims(6, 3), false).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let (mask, _) = m.forward_step(&[1.0, 2.0, 0.0, 5.0, 0.1, 3.0], &m.zero_state()).unwrap();
        assert!(mask.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn masks_stay_open_interval_even_when_saturated() {
        let m = init_params::<f64>(3, dims(5, 4), false).unwrap();
        for scale in [0.0, 1.0, 1e3, 1e8] {
            let (mask, st) = m.forward_step(&[scale; 5], &m.zero_state()).unwrap();
            assert!(mask.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(st.h.iter().chain(&st.c).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = init_params::<f64>(3, dims(2, 2), false).unwrap();
        assert!(m.forward_step(&[f64::NAN, 0.0], &m.zero_state()).is_err());
        assert!(m.forward_step(&[0.0], &m.zero_state()).is_err());
    }

    #[test]
    fn sequence_split_matches_whole() {
        let m = init_params::<f64>(5, dims(7, 5), false).unwrap();
        let inputs: Vec<Vec<f64>> = (0..20)
            .map(|t| (0..7).map(|f| ((t * 7 + f) as f64 * 0.37).sin().abs() * 3.0).collect())
            .collect();
        let (whole, end) = m.forward_sequence(&inputs, &m.zero_state()).unwrap();
        for split in [1, 9, 19] {
            let (a, mid) = m.forward_sequence(&inputs[..split], &m.zero_state()).unwrap();
            let (b, end2) = m.forward_sequence(&inputs[split..], &mid).unwrap();
            let joined: Vec<Vec<f64>> = a.into_iter().chain(b).collect();
            assert_eq!(joined, whole);
            assert_eq!(end2, end);
        }
        let (single, _) = m.forward_sequence(&inputs[..1], &m.zero_state()).unwrap();
        assert_eq!(single[0], m.forward_step(&inputs[0], &m.zero_state()).unwrap().0);
        let doubled: Vec<Vec<f64>> = inputs.iter().map(|x| x.iter().map(|v| 2.0 * v).collect()).collect();
        assert_ne!(m.forward_sequence(&doubled, &m.zero_state()).unwrap().0, whole);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = init_params::<f64>(11, dims(5, 3), true).unwrap();
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = MaskModel::<f64>::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.to_checkpoint();
        bad.params.pop();
        assert!(MaskModel::<f64>::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn f32_model_runs() {
        let m = init_params::<f32>(1, dims(4, 3), false).unwrap();
        let (mask, _) = m.forward_step(&[0.5; 4], &m.zero_state()).unwrap();
        assert!(mask.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
