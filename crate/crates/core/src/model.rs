//! Encoder, epLSTM cell with a reinstatement gate, and actor-critic heads.
//!
//! ```text
//! obs ─► affine ─► ReLU ─► affine ─► features ─┐
//!                 prev reward, prev action ────┴─► x_t
//!
//! i, f, o, r = σ(W_x x_t + W_h h_{t-1} + b)        c̃ = tanh(…)
//! c_t = i ⊙ c̃ + f ⊙ c_{t-1} + r ⊙ tanh(m_t)
//! h_t = o ⊙ tanh(c_t)          logits = W_π h_t,  V = w_v · h_t
//! ```
//!
//! All parameters live in one flat buffer. The LSTM gate weights and the
//! reinstatement weights are laid out back to back so the forward pass runs
//! one fused `5H × X` and one fused `5H × H` product per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::kernels::{
    axpy, dot, log_softmax, matvec_acc, matvec_t_acc, matvec_t_acc_prefix, outer_acc_batched,
    sigmoid,
};

/// Number of gate blocks in the fused products: i, f, o, c̃, r.
const GATE_BLOCKS: usize = 5;
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;
const R: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_width: usize,
    pub encoder_hidden: usize,
    pub features: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_width: 8 * 102,
            encoder_hidden: 64,
            features: 128,
            hidden: 256,
            actions: 2,
        }
    }
}

impl ModelConfig {
    /// Width of the LSTM input: features, previous reward, previous action one-hot.
    pub fn input_width(&self) -> usize {
        self.features + 1 + self.actions
    }

    pub fn validate(&self) -> Result<()> {
        if [self.obs_width, self.encoder_hidden, self.features, self.hidden, self.actions]
            .contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    enc1_w: usize,
    enc1_b: usize,
    enc2_w: usize,
    enc2_b: usize,
    gates_wx: usize,
    gates_wh: usize,
    gates_b: usize,
    pi_w: usize,
    pi_b: usize,
    v_w: usize,
    v_b: usize,
    total: usize,
    tensors: Vec<TensorSpec>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let (h, x) = (c.hidden, c.input_width());
        let shapes: Vec<(&str, Vec<usize>)> = vec![
            ("encoder.0.weight", vec![c.encoder_hidden, c.obs_width]),
            ("encoder.0.bias", vec![c.encoder_hidden]),
            ("encoder.1.weight", vec![c.features, c.encoder_hidden]),
            ("encoder.1.bias", vec![c.features]),
            ("lstm.weight_x", vec![4 * h, x]),
            ("reinstate.weight_x", vec![h, x]),
            ("lstm.weight_h", vec![4 * h, h]),
            ("reinstate.weight_h", vec![h, h]),
            ("lstm.bias", vec![4 * h]),
            ("reinstate.bias", vec![h]),
            ("policy.weight", vec![c.actions, h]),
            ("policy.bias", vec![c.actions]),
            ("value.weight", vec![1, h]),
            ("value.bias", vec![1]),
        ];
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let spec = TensorSpec {
                name: name.to_string(),
                shape,
                offset,
            };
            offset += spec.len();
            tensors.push(spec);
        }
        let at = |i: usize| tensors[i].offset;
        Layout {
            enc1_w: at(0),
            enc1_b: at(1),
            enc2_w: at(2),
            enc2_b: at(3),
            gates_wx: at(4),
            gates_wh: at(6),
            gates_b: at(8),
            pi_w: at(10),
            pi_b: at(11),
            v_w: at(12),
            v_b: at(13),
            total: offset,
            tensors,
        }
    }
}

/// All trainable parameters in one flat buffer. Gradients use the same type,
/// so every gradient entry sits at the offset of the parameter it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = Layout::new(config);
        ModelParams {
            config: config.clone(),
            data: vec![0.0; layout.total],
            layout,
        }
    }

    /// Weights uniform in ±1/√fan_in, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let tensors = p.layout.tensors.clone();
        for spec in &tensors {
            if spec.shape.len() == 2 {
                let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                for v in &mut p.data[spec.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        let h = config.hidden;
        let b = p.layout.gates_b;
        p.data[b + F * h..b + (F + 1) * h].fill(1.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config);
        if data.len() != p.data.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.data[range])
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.data[offset..offset + len]
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Set of cell-state units forced to zero at every step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    zeroed: Vec<usize>,
    dense: Vec<bool>,
}

impl CellMask {
    pub fn new(indices: impl IntoIterator<Item = usize>, hidden: usize) -> Result<Self> {
        let mut dense = vec![false; hidden];
        let mut zeroed = Vec::new();
        for j in indices {
            if j >= hidden {
                return Err(Error::Contract(format!("mask index {j} out of range {hidden}")));
            }
            if dense[j] {
                return Err(Error::Contract(format!("duplicate mask index {j}")));
            }
            dense[j] = true;
            zeroed.push(j);
        }
        zeroed.sort_unstable();
        Ok(CellMask { zeroed, dense })
    }

    pub fn indices(&self) -> &[usize] {
        &self.zeroed
    }

    pub fn len(&self) -> usize {
        self.zeroed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.dense.get(j).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpLstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl EpLstmState {
    pub fn zeros(hidden: usize) -> Self {
        EpLstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Gate activations of one step, plus the memory that was offered to the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub r: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub m: Vec<f64>,
}

/// Encoder forward pass; returns (first-layer pre-activations, features).
pub fn encode_with_hidden(params: &ModelParams, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = &params.config;
    let l = &params.layout;
    let (eh, ow) = (c.encoder_hidden, c.obs_width);
    assert_eq!(obs.len(), ow, "observation width");
    let w1 = params.slice(l.enc1_w, eh * ow);
    let mut z1 = params.slice(l.enc1_b, eh).to_vec();
    // observations are sparse: walk the active columns
    for (k, &v) in obs.iter().enumerate() {
        if v != 0.0 {
            for (j, z) in z1.iter_mut().enumerate() {
                *z += w1[j * ow + k] * v;
            }
        }
    }
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let mut feat = params.slice(l.enc2_b, c.features).to_vec();
    matvec_acc(params.slice(l.enc2_w, c.features * eh), &a1, &mut feat);
    (z1, feat)
}

/// Observation features: affine, ReLU, affine (no trailing nonlinearity).
pub fn encode(params: &ModelParams, obs: &[f64]) -> Vec<f64> {
    encode_with_hidden(params, obs).1
}

/// Concatenates features, previous reward and previous action (zeros before the first action).
pub fn build_input(features: &[f64], prev_reward: f64, prev_action: Option<Action>, actions: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(features.len() + 1 + actions);
    x.extend_from_slice(features);
    x.push(prev_reward);
    let start = x.len();
    x.resize(start + actions, 0.0);
    if let Some(a) = prev_action {
        x[start + a.index()] = 1.0;
    }
    x
}

struct CellOut {
    gates: Vec<f64>,
    tanh_m: Option<Vec<f64>>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn cell_forward(
    params: &ModelParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    m: Option<&[f64]>,
    mask: Option<&CellMask>,
) -> CellOut {
    let cfg = &params.config;
    let l = &params.layout;
    let (h, xw) = (cfg.hidden, cfg.input_width());
    let rows = GATE_BLOCKS * h;
    let mut pre = params.slice(l.gates_b, rows).to_vec();
    matvec_acc(params.slice(l.gates_wx, rows * xw), x, &mut pre);
    matvec_acc(params.slice(l.gates_wh, rows * h), h_prev, &mut pre);
    let mut gates = pre;
    for (blk, chunk) in gates.chunks_exact_mut(h).enumerate() {
        if blk == G {
            chunk.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            chunk.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
    }
    let tanh_m: Option<Vec<f64>> = m.map(|m| m.iter().map(|v| v.tanh()).collect());
    let mut c = vec![0.0; h];
    for j in 0..h {
        let mut cj = gates[I * h + j] * gates[G * h + j] + gates[F * h + j] * c_prev[j];
        if let Some(tm) = &tanh_m {
            cj += gates[R * h + j] * tm[j];
        }
        c[j] = cj;
    }
    if let Some(mask) = mask {
        for &j in mask.indices() {
            c[j] = 0.0;
        }
    }
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let hn: Vec<f64> = (0..h).map(|j| gates[O * h + j] * tanh_c[j]).collect();
    CellOut {
        gates,
        tanh_m,
        c,
        tanh_c,
        h: hn,
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(format!("non-finite {what}")))
    }
}

/// One epLSTM step. `m` is the retrieved memory for this step; pass a zero
/// vector (or use [`eplstm_step_opt`] with `None`) when nothing is retrieved.
pub fn eplstm_step(
    params: &ModelParams,
    x: &[f64],
    state: &EpLstmState,
    m: &[f64],
    mask: Option<&CellMask>,
) -> Result<(EpLstmState, GateTrace)> {
    eplstm_step_opt(params, x, state, Some(m), mask)
}

pub fn eplstm_step_opt(
    params: &ModelParams,
    x: &[f64],
    state: &EpLstmState,
    m: Option<&[f64]>,
    mask: Option<&CellMask>,
) -> Result<(EpLstmState, GateTrace)> {
    let h = params.config.hidden;
    if x.len() != params.config.input_width() || state.h.len() != h || state.c.len() != h {
        return Err(Error::Contract("epLSTM input shape mismatch".into()));
    }
    check_finite("input", x)?;
    check_finite("hidden state", &state.h)?;
    check_finite("cell state", &state.c)?;
    if let Some(m) = m {
        if m.len() != h {
            return Err(Error::Contract("memory width mismatch".into()));
        }
        check_finite("memory", m)?;
    }
    let out = cell_forward(params, x, &state.h, &state.c, m, mask);
    let g = &out.gates;
    let trace = GateTrace {
        i: g[I * h..(I + 1) * h].to_vec(),
        f: g[F * h..(F + 1) * h].to_vec(),
        o: g[O * h..(O + 1) * h].to_vec(),
        c_tilde: g[G * h..(G + 1) * h].to_vec(),
        r: g[R * h..(R + 1) * h].to_vec(),
        m: m.map(|m| m.to_vec()).unwrap_or_else(|| vec![0.0; h]),
    };
    Ok((EpLstmState { h: out.h, c: out.c }, trace))
}

/// Linear policy and value heads on `h_t`.
pub fn policy_value(params: &ModelParams, h: &[f64]) -> (Vec<f64>, f64) {
    let c = &params.config;
    let l = &params.layout;
    let mut logits = params.slice(l.pi_b, c.actions).to_vec();
    matvec_acc(params.slice(l.pi_w, c.actions * c.hidden), h, &mut logits);
    let value = params.data[l.v_b] + dot(params.slice(l.v_w, c.hidden), h);
    (logits, value)
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub obs: Vec<f64>,
    pub enc_pre: Vec<f64>,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates, blocks i, f, o, c̃, r.
    pub gates: Vec<f64>,
    pub tanh_m: Option<Vec<f64>>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub value: f64,
    pub masked: bool,
}

impl StepCache {
    pub fn gate(&self, block: GateBlock) -> &[f64] {
        let h = self.h.len();
        let b = block as usize;
        &self.gates[b * h..(b + 1) * h]
    }

    pub fn state(&self) -> EpLstmState {
        EpLstmState {
            h: self.h.clone(),
            c: self.c.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateBlock {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
    Reinstate = 4,
}

/// Inputs of one step when replaying a fixed episode.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub obs: Vec<f64>,
    pub prev_reward: f64,
    pub prev_action: Option<Action>,
    pub memory: Option<Vec<f64>>,
}

/// Full forward step from an encoded observation to the heads.
pub fn forward_step(
    params: &ModelParams,
    obs: &[f64],
    prev_reward: f64,
    prev_action: Option<Action>,
    state: &EpLstmState,
    m: Option<&[f64]>,
    mask: Option<&CellMask>,
) -> StepCache {
    let (enc_pre, feat) = encode_with_hidden(params, obs);
    let x = build_input(&feat, prev_reward, prev_action, params.config.actions);
    let out = cell_forward(params, &x, &state.h, &state.c, m, mask);
    let (logits, value) = policy_value(params, &out.h);
    let log_probs = log_softmax(&logits);
    StepCache {
        obs: obs.to_vec(),
        enc_pre,
        x,
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates: out.gates,
        tanh_m: out.tanh_m,
        c: out.c,
        tanh_c: out.tanh_c,
        h: out.h,
        logits,
        log_probs,
        value,
        masked: mask.is_some_and(|m| !m.is_empty()),
    }
}

/// Replays a fixed input sequence from the zero state.
pub fn forward_episode(
    params: &ModelParams,
    inputs: &[StepInput],
    mask: Option<&CellMask>,
) -> Vec<StepCache> {
    let mut state = EpLstmState::zeros(params.config.hidden);
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let cache = forward_step(
            params,
            &inp.obs,
            inp.prev_reward,
            inp.prev_action,
            &state,
            inp.memory.as_deref(),
            mask,
        );
        state = cache.state();
        out.push(cache);
    }
    out
}

/// Loss gradient with respect to the head outputs of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub dlogits: Vec<f64>,
    pub dvalue: f64,
}

/// Reverse-mode gradients of a scalar episode loss, given its derivative with
/// respect to every step's logits and value. Runs through the heads, the
/// epLSTM recurrence (including the reinstatement path) and the encoder.
pub fn backward_episode(
    params: &ModelParams,
    caches: &[StepCache],
    head_grads: &[HeadGrad],
    mask: Option<&CellMask>,
) -> Gradients {
    assert_eq!(caches.len(), head_grads.len());
    let cfg = &params.config;
    let l = &params.layout;
    let (h, xw, feats, eh, ow) = (
        cfg.hidden,
        cfg.input_width(),
        cfg.features,
        cfg.encoder_hidden,
        cfg.obs_width,
    );
    let rows = GATE_BLOCKS * h;
    let steps = caches.len();
    let mut grads = params.zeros_like();

    let wx = params.slice(l.gates_wx, rows * xw);
    let wh = params.slice(l.gates_wh, rows * h);
    let pi_w = params.slice(l.pi_w, cfg.actions * h);
    let v_w = params.slice(l.v_w, h);

    let mut dpre_all = vec![0.0; steps * rows];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dh = vec![0.0; h];

    for t in (0..steps).rev() {
        let cache = &caches[t];
        let hg = &head_grads[t];

        // heads
        dh.copy_from_slice(&dh_next);
        for (a, &dl) in hg.dlogits.iter().enumerate() {
            if dl != 0.0 {
                axpy(dl, &pi_w[a * h..(a + 1) * h], &mut dh);
                axpy(dl, &cache.h, &mut grads.data[l.pi_w + a * h..l.pi_w + (a + 1) * h]);
                grads.data[l.pi_b + a] += dl;
            }
        }
        if hg.dvalue != 0.0 {
            axpy(hg.dvalue, v_w, &mut dh);
            axpy(hg.dvalue, &cache.h, &mut grads.data[l.v_w..l.v_w + h]);
            grads.data[l.v_b] += hg.dvalue;
        }

        // cell
        let g = &cache.gates;
        let dpre = &mut dpre_all[t * rows..(t + 1) * rows];
        for j in 0..h {
            let (ig, fg, og, cg, rg) = (g[I * h + j], g[F * h + j], g[O * h + j], g[G * h + j], g[R * h + j]);
            let tc = cache.tanh_c[j];
            let masked = mask.is_some_and(|m| m.contains(j));
            let dc = if masked {
                0.0
            } else {
                dh[j] * og * (1.0 - tc * tc) + dc_next[j]
            };
            let d_o = dh[j] * tc;
            dpre[I * h + j] = dc * cg * ig * (1.0 - ig);
            dpre[F * h + j] = dc * cache.c_prev[j] * fg * (1.0 - fg);
            dpre[O * h + j] = d_o * og * (1.0 - og);
            dpre[G * h + j] = dc * ig * (1.0 - cg * cg);
            dpre[R * h + j] = match &cache.tanh_m {
                Some(tm) => dc * tm[j] * rg * (1.0 - rg),
                None => 0.0,
            };
            dc_next[j] = dc * fg;
        }
        dh_next.fill(0.0);
        matvec_t_acc(wh, dpre, &mut dh_next);
    }

    // weight gradients of the fused gate products
    {
        let xs: Vec<&[f64]> = caches.iter().map(|c| c.x.as_slice()).collect();
        outer_acc_batched(&dpre_all, rows, &xs, &mut grads.data[l.gates_wx..l.gates_wx + rows * xw]);
        let hs: Vec<&[f64]> = caches.iter().map(|c| c.h_prev.as_slice()).collect();
        outer_acc_batched(&dpre_all, rows, &hs, &mut grads.data[l.gates_wh..l.gates_wh + rows * h]);
        let gb = &mut grads.data[l.gates_b..l.gates_b + rows];
        for dpre in dpre_all.chunks_exact(rows) {
            axpy(1.0, dpre, gb);
        }
    }

    // encoder
    let w2 = params.slice(l.enc2_w, feats * eh);
    let mut dfeat = vec![0.0; feats];
    let mut da1 = vec![0.0; eh];
    let mut a1 = vec![0.0; eh];
    for (t, cache) in caches.iter().enumerate() {
        dfeat.fill(0.0);
        matvec_t_acc_prefix(wx, xw, &dpre_all[t * rows..(t + 1) * rows], &mut dfeat);
        for (a, &z) in a1.iter_mut().zip(&cache.enc_pre) {
            *a = z.max(0.0);
        }
        {
            let gw2 = &mut grads.data[l.enc2_w..l.enc2_w + feats * eh];
            for (k, &d) in dfeat.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &a1, &mut gw2[k * eh..(k + 1) * eh]);
                }
            }
        }
        axpy(1.0, &dfeat, &mut grads.data[l.enc2_b..l.enc2_b + feats]);
        da1.fill(0.0);
        matvec_t_acc(w2, &dfeat, &mut da1);
        for (d, &z) in da1.iter_mut().zip(&cache.enc_pre) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let gw1 = &mut grads.data[l.enc1_w..l.enc1_w + eh * ow];
        for (k, &v) in cache.obs.iter().enumerate() {
            if v != 0.0 {
                for (j, &d) in da1.iter().enumerate() {
                    gw1[j * ow + k] += d * v;
                }
            }
        }
        axpy(1.0, &da1, &mut grads.data[l.enc1_b..l.enc1_b + eh]);
    }
    grads
}
