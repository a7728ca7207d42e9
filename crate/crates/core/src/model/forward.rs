//! Recurrent inference. Every position runs the same step kernel, which
//! writes all intermediates into a flat slot so that the gradient code can
//! reuse exactly the forward arithmetic.

use super::config::{Head, MambaConfig, MlpCombine, L1_FLOOR};
use super::params::MambaParams;
use crate::autodiff::{relu, softmax, softplus};
use crate::error::{Error, Result};
use crate::markov::TokenSequence;

/// Offsets of the per-position intermediates inside a step slot.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub d: usize,
    pub ed: usize,
    pub n: usize,
    pub hidden: usize,
    pub alphabet: usize,
    pub stride: usize,
}

macro_rules! step_fields {
    ($($name:ident),*) => {
        pub(crate) struct StepMut<'b> { $(pub $name: &'b mut [f64],)* }
        pub(crate) struct StepRef<'b> { $(pub $name: &'b [f64],)* }
    };
}

// scalars = [Δ_t, a_t]
step_fields!(h, cx, cb, cc, xt, b, c, y, z, u, h1, h3, m, v, logit, prob, scalars);

impl Layout {
    pub fn new(cfg: &MambaConfig) -> Self {
        let (d, ed, n, hidden, alphabet) = (cfg.d, cfg.inner(), cfg.state, cfg.hidden(), cfg.alphabet);
        let hidden = if cfg.has_mlp() { hidden } else { 0 };
        let stride = ed * n + 5 * ed + 4 * n + 2 * d + 3 * hidden + 2 * alphabet + 2;
        Layout {
            d,
            ed,
            n,
            hidden,
            alphabet,
            stride,
        }
    }

    fn sizes(&self) -> [usize; 17] {
        let Layout {
            d,
            ed,
            n,
            hidden,
            alphabet,
            ..
        } = *self;
        [
            ed * n,
            ed,
            n,
            n,
            ed,
            n,
            n,
            ed,
            ed,
            d,
            hidden,
            hidden,
            hidden,
            d,
            alphabet,
            alphabet,
            2,
        ]
    }

    pub fn split_mut<'b>(&self, mut buf: &'b mut [f64]) -> StepMut<'b> {
        let mut parts: [&'b mut [f64]; 17] = Default::default();
        for (slot, size) in parts.iter_mut().zip(self.sizes()) {
            let (head, tail) = buf.split_at_mut(size);
            *slot = head;
            buf = tail;
        }
        let [h, cx, cb, cc, xt, b, c, y, z, u, h1, h3, m, v, logit, prob, scalars] = parts;
        StepMut {
            h,
            cx,
            cb,
            cc,
            xt,
            b,
            c,
            y,
            z,
            u,
            h1,
            h3,
            m,
            v,
            logit,
            prob,
            scalars,
        }
    }

    pub fn split<'b>(&self, mut buf: &'b [f64]) -> StepRef<'b> {
        let mut parts: [&'b [f64]; 17] = Default::default();
        for (slot, size) in parts.iter_mut().zip(self.sizes()) {
            let (head, tail) = buf.split_at(size);
            *slot = head;
            buf = tail;
        }
        let [h, cx, cb, cc, xt, b, c, y, z, u, h1, h3, m, v, logit, prob, scalars] = parts;
        StepRef {
            h,
            cx,
            cb,
            cc,
            xt,
            b,
            c,
            y,
            z,
            u,
            h1,
            h3,
            m,
            v,
            logit,
            prob,
            scalars,
        }
    }
}

/// Quantities that depend on the current token only.
#[derive(Debug, Clone)]
pub(crate) struct TokenTable {
    pub x: Vec<f64>,
    pub px: Vec<f64>,
    pub pb: Vec<f64>,
    pub pc: Vec<f64>,
    /// `W_z x`, empty without a gate.
    pub gate: Vec<f64>,
    /// `<w_Δ, x> + δ`
    pub q: f64,
    pub delta: f64,
    pub at: f64,
}

pub(crate) fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// A parameter set bound to its configuration, with per-token tables.
pub struct Model<'a> {
    pub(crate) params: &'a MambaParams,
    pub(crate) cfg: MambaConfig,
    pub(crate) layout: Layout,
    pub(crate) tables: Vec<TokenTable>,
}

impl<'a> Model<'a> {
    pub fn new(params: &'a MambaParams, cfg: &MambaConfig) -> Result<Self> {
        cfg.validate()?;
        params.validate(cfg)?;
        let layout = Layout::new(cfg);
        let a = params.a.item();
        let tables = (0..cfg.alphabet)
            .map(|tok| {
                let x = params.embedding.row(tok).to_vec();
                let mut px = vec![0.0; layout.ed];
                let mut pb = vec![0.0; layout.n];
                let mut pc = vec![0.0; layout.n];
                matvec(params.w_x.data(), cfg.d, &x, &mut px);
                matvec(params.w_b.data(), cfg.d, &x, &mut pb);
                matvec(params.w_c.data(), cfg.d, &x, &mut pc);
                let gate = match (&params.w_z, cfg.gating_active()) {
                    (Some(w_z), true) => {
                        let mut g = vec![0.0; layout.ed];
                        matvec(w_z.data(), cfg.d, &x, &mut g);
                        g
                    }
                    _ => Vec::new(),
                };
                let q = params.w_delta.data().iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + params.delta.item();
                let delta = softplus(q);
                let at = (-a * delta).exp();
                TokenTable {
                    x,
                    px,
                    pb,
                    pc,
                    gate,
                    q,
                    delta,
                    at,
                }
            })
            .collect();
        Ok(Model {
            params,
            cfg: *cfg,
            layout,
            tables,
        })
    }

    pub fn config(&self) -> &MambaConfig {
        &self.cfg
    }

    pub(crate) fn slot_len(&self) -> usize {
        self.layout.stride
    }

    fn conv(&self, history: &[u8], kernel: &[f64], window: usize, pick: impl Fn(&TokenTable) -> &[f64], out: &mut [f64]) {
        let cur = pick(&self.tables[*history.last().expect("non-empty history") as usize]);
        if !self.cfg.use_conv {
            out.copy_from_slice(cur);
            return;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let len = history.len();
        for j in 0..window {
            // column j reads the token window-1-j steps back; zero padding before the start
            let back = window - 1 - j;
            if back >= len {
                continue;
            }
            let p = pick(&self.tables[history[len - 1 - back] as usize]);
            for (i, o) in out.iter_mut().enumerate() {
                *o += kernel[i * window + j] * p[i];
            }
        }
    }

    /// One recurrence step. `history` ends with the current token; `h_prev`
    /// is `H_{t-1}`. `position` is 1-based and only used in errors.
    pub(crate) fn step_into(&self, history: &[u8], h_prev: &[f64], slot: &mut [f64], position: usize) -> Result<()> {
        let tok = *history.last().expect("non-empty history") as usize;
        if tok >= self.cfg.alphabet {
            return Err(Error::Contract(format!("token {tok} at position {position} outside the alphabet")));
        }
        let Layout { d, ed, n, .. } = self.layout;
        let p = self.params;
        let cfg = &self.cfg;
        let table = &self.tables[tok];
        let s = self.layout.split_mut(slot);

        let (delta, at) = (table.delta, table.at);
        debug_assert!((0.0..=1.0).contains(&at), "a_t = {at}");
        s.scalars[0] = delta;
        s.scalars[1] = at;

        self.conv(history, p.conv_x.data(), cfg.window, |t| &t.px, s.cx);
        self.conv(history, p.conv_b.data(), cfg.window, |t| &t.pb, s.cb);
        self.conv(history, p.conv_c.data(), cfg.window_c(), |t| &t.pc, s.cc);
        let act = |v: f64| if cfg.relu_active() { relu(v) } else { v };
        for (o, &v) in s.xt.iter_mut().zip(s.cx.iter()) {
            *o = act(v) * delta;
        }
        for (o, &v) in s.b.iter_mut().zip(s.cb.iter()) {
            *o = act(v);
        }
        for (o, &v) in s.c.iter_mut().zip(s.cc.iter()) {
            *o = act(v);
        }

        // H_t = a_t H_{t-1} + x̃_t b_tᵀ ; y_t = H_t c_t
        for i in 0..ed {
            let row = &mut s.h[i * n..(i + 1) * n];
            let prev = &h_prev[i * n..(i + 1) * n];
            let xi = s.xt[i];
            let mut acc = 0.0;
            for j in 0..n {
                let hv = at * prev[j] + xi * s.b[j];
                row[j] = hv;
                acc += hv * s.c[j];
            }
            s.y[i] = acc;
        }

        if cfg.gating_active() {
            for ((z, &y), &g) in s.z.iter_mut().zip(s.y.iter()).zip(&table.gate) {
                *z = y * relu(g);
            }
        } else {
            s.z.copy_from_slice(s.y);
        }

        // u_t = x_t + W_o z_t
        matvec(p.w_o.data(), ed, s.z, s.u);
        for (u, x) in s.u.iter_mut().zip(&table.x) {
            *u += x;
        }

        match &p.mlp {
            Some(mlp) => {
                matvec(mlp.w1.data(), d, s.u, s.h1);
                let gated = cfg.gating_active();
                if gated {
                    matvec(mlp.w3.data(), d, s.u, s.h3);
                }
                for i in 0..s.m.len() {
                    let r = relu(s.h1[i]);
                    s.m[i] = match (gated, cfg.mlp_combine) {
                        (false, _) => r,
                        (true, MlpCombine::Product) => r * s.h3[i],
                        (true, MlpCombine::Sum) => r + s.h3[i],
                    };
                }
                matvec(mlp.w2.data(), self.layout.hidden, s.m, s.v);
                for (v, u) in s.v.iter_mut().zip(s.u.iter()) {
                    *v += u;
                }
            }
            None => s.v.copy_from_slice(s.u),
        }

        matvec(p.head.data(), d, s.v, s.logit);
        match cfg.head {
            Head::Softmax => s.prob.copy_from_slice(&softmax(s.logit)),
            Head::L1norm => {
                let mut sum = 0.0;
                let mut all_floor = true;
                for (pr, &l) in s.prob.iter_mut().zip(s.logit.iter()) {
                    let c = l.max(L1_FLOOR);
                    all_floor &= c <= L1_FLOOR;
                    *pr = c;
                    sum += c;
                }
                if all_floor {
                    return Err(Error::DegenerateLogits { position });
                }
                s.prob.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(())
    }

    /// Advances `state` by one token and returns the next-token law.
    pub fn step(&self, state: &mut RecurrentState, token: u8) -> Result<StepOutput> {
        if state.h.len() != self.layout.ed * self.layout.n || state.keep != self.cfg.history() {
            return Err(Error::Shape("recurrent state does not match the model".into()));
        }
        state.history.push(token);
        if state.history.len() > state.keep {
            state.history.remove(0);
        }
        state.t += 1;
        state.scratch.resize(self.layout.stride, 0.0);
        self.step_into(&state.history, &state.h, &mut state.scratch, state.t)?;
        let s = self.layout.split(&state.scratch);
        state.h.copy_from_slice(s.h);
        Ok(StepOutput {
            prob: s.prob.to_vec(),
            logit: s.logit.to_vec(),
            a_t: s.scalars[1],
            y: s.y.to_vec(),
            z: s.z.to_vec(),
            o: s.u.iter().zip(&self.tables[token as usize].x).map(|(u, x)| u - x).collect(),
        })
    }

    /// Folds [`step`](Self::step) over `tokens` from a fresh state.
    pub fn trace(&self, tokens: &[u8], diagnostics: bool) -> Result<PredictionTrace> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot run the model on an empty sequence".into()));
        }
        let mut state = RecurrentState::new(&self.cfg);
        let mut trace = PredictionTrace {
            probs: Vec::with_capacity(tokens.len()),
            a_t: Vec::with_capacity(tokens.len()),
            diagnostics: diagnostics.then(Vec::new),
        };
        for &tok in tokens {
            let out = self.step(&mut state, tok)?;
            trace.a_t.push(out.a_t);
            if let Some(diag) = trace.diagnostics.as_mut() {
                diag.push(Diagnostics {
                    y: out.y,
                    z: out.z,
                    o: out.o,
                });
            }
            trace.probs.push(out.prob);
        }
        Ok(trace)
    }
}

/// Output of one recurrent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub prob: Vec<f64>,
    pub logit: Vec<f64>,
    pub a_t: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub o: Vec<f64>,
}

/// Hidden state of the recurrence plus the token window the convolutions
/// read.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    h: Vec<f64>,
    history: Vec<u8>,
    keep: usize,
    t: usize,
    scratch: Vec<f64>,
}

impl RecurrentState {
    /// `H_0 = 0` at `t = 0`.
    pub fn new(cfg: &MambaConfig) -> Self {
        RecurrentState {
            h: vec![0.0; cfg.inner() * cfg.state],
            history: Vec::with_capacity(cfg.history() + 1),
            keep: cfg.history(),
            t: 0,
            scratch: Vec::new(),
        }
    }

    /// `H_t`, row-major `ed × N`.
    pub fn hidden(&self) -> &[f64] {
        &self.h
    }

    /// Number of tokens consumed.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Most recent tokens, oldest first.
    pub fn window(&self) -> &[u8] {
        &self.history
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub o: Vec<f64>,
}

/// Per-position next-token laws and transition factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    /// `probs[t-1]` is `f_θ(x_1^t)`.
    pub probs: Vec<Vec<f64>>,
    pub a_t: Vec<f64>,
    pub diagnostics: Option<Vec<Diagnostics>>,
}

impl PredictionTrace {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `(a_t, x̃_t, b_t, c_t)` at one position.
pub type Selectivity = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

/// Selectivity terms at the last position of `history`.
pub fn selectivity(params: &MambaParams, cfg: &MambaConfig, history: &[u8]) -> Result<Selectivity> {
    if history.is_empty() {
        return Err(Error::Contract("selectivity needs at least one token".into()));
    }
    let model = Model::new(params, cfg)?;
    let mut slot = vec![0.0; model.layout.stride];
    let h_prev = vec![0.0; model.layout.ed * model.layout.n];
    model.step_into(history, &h_prev, &mut slot, history.len())?;
    let s = model.layout.split(&slot);
    Ok((s.scalars[1], s.xt.to_vec(), s.b.to_vec(), s.c.to_vec()))
}

/// One step of the recurrence on `state`.
pub fn forward_step(params: &MambaParams, cfg: &MambaConfig, state: &mut RecurrentState, token: u8) -> Result<StepOutput> {
    Model::new(params, cfg)?.step(state, token)
}

pub fn forward_sequence(params: &MambaParams, cfg: &MambaConfig, seq: &TokenSequence) -> Result<PredictionTrace> {
    Model::new(params, cfg)?.trace(&seq.tokens, false)
}
