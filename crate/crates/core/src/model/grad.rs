//! Hand-written backpropagation through time for the recurrent stack.
//!
//! Every projection depends on the current token only, so the backward pass
//! accumulates per-token adjoints and turns them into weight gradients once
//! per sequence. The tape route in [`super::graph`] computes the same
//! quantity and serves as the reference in tests.

use super::config::{Head, MlpCombine, L1_FLOOR};
use super::forward::{Layout, Model};
use super::params::MambaParams;
use crate::autodiff::{relu, sigmoid};
use crate::error::{Error, Result};
use crate::markov::TokenSequence;
use crate::par::{self, Execution};

/// `out += a ⊗ b` for a row-major `a.len() × b.len()` block.
fn add_outer(out: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in out.chunks_exact_mut(b.len()).zip(a) {
        if ai != 0.0 {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += ai * bj;
            }
        }
    }
}

/// `out += Wᵀ g` for row-major `W` with `out.len()` columns.
fn add_transpose_matvec(out: &mut [f64], w: &[f64], g: &[f64]) {
    for (row, &gi) in w.chunks_exact(out.len()).zip(g) {
        if gi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += gi * wij;
            }
        }
    }
}

fn scored_positions(len: usize, first: usize) -> Result<usize> {
    if first == 0 || first >= len {
        return Err(Error::Contract(format!(
            "a sequence of length {len} has no scored positions when scoring starts after {first} tokens"
        )));
    }
    Ok(len - first)
}

/// Runs the forward pass over `tokens`, keeping every intermediate.
pub(crate) fn forward_cache(model: &Model, tokens: &[u8]) -> Result<Vec<f64>> {
    let stride = model.slot_len();
    let hn = model.layout.ed * model.layout.n;
    let keep = model.cfg.history();
    let zeros = vec![0.0; hn];
    let mut cache = vec![0.0; stride * tokens.len()];
    for s in 0..tokens.len() {
        let (done, rest) = cache.split_at_mut(s * stride);
        let h_prev = if s == 0 {
            &zeros[..]
        } else {
            &done[(s - 1) * stride..(s - 1) * stride + hn]
        };
        let history = &tokens[(s + 1).saturating_sub(keep)..=s];
        model.step_into(history, h_prev, &mut rest[..stride], s + 1)?;
    }
    Ok(cache)
}

/// Mean next-token cross-entropy of one sequence, scored on predictions of
/// `x_{t+1}` for `t = first, …, T-1`.
pub fn sequence_loss(model: &Model, tokens: &[u8], first: usize) -> Result<f64> {
    let count = scored_positions(tokens.len(), first)?;
    let trace = model.trace(&tokens[..tokens.len() - 1], false)?;
    let mut total = 0.0;
    for (t, &token) in tokens.iter().enumerate().skip(first) {
        let p = trace.probs[t - 1][token as usize];
        if p <= 0.0 {
            return Err(Error::InfiniteLoss { position: t });
        }
        total -= p.ln();
    }
    Ok(total / count as f64)
}

/// Loss and parameter gradient of one sequence.
pub fn sequence_loss_grad(model: &Model, tokens: &[u8], first: usize) -> Result<(f64, MambaParams)> {
    let count = scored_positions(tokens.len(), first)?;
    let weight = 1.0 / count as f64;
    let layout = model.layout;
    let Layout {
        d,
        ed,
        n,
        hidden,
        alphabet,
        stride,
    } = layout;
    let cfg = &model.cfg;
    let p = model.params;
    // the final token is never read as input
    let inputs = &tokens[..tokens.len() - 1];
    let cache = forward_cache(model, inputs)?;

    let mut grad = p.zeros_like();
    let mut loss = 0.0;

    // per-token adjoints of quantities read from the token tables
    let mut d_x = vec![vec![0.0; d]; alphabet];
    let mut d_px = vec![vec![0.0; ed]; alphabet];
    let mut d_pb = vec![vec![0.0; n]; alphabet];
    let mut d_pc = vec![vec![0.0; n]; alphabet];
    let mut d_gate = vec![vec![0.0; ed]; alphabet];
    let mut d_q = vec![0.0; alphabet];

    let mut carry = vec![0.0; ed * n];
    let mut dlogit = vec![0.0; alphabet];
    let mut dv = vec![0.0; d];
    let mut du = vec![0.0; d];
    let mut dm = vec![0.0; hidden];
    let mut dh1 = vec![0.0; hidden];
    let mut dh3 = vec![0.0; hidden];
    let mut dz = vec![0.0; ed];
    let mut dy = vec![0.0; ed];
    let mut dxt = vec![0.0; ed];
    let mut dcx = vec![0.0; ed];
    let mut db = vec![0.0; n];
    let mut dc = vec![0.0; n];
    let mut dcb = vec![0.0; n];
    let mut dcc = vec![0.0; n];
    let zeros = vec![0.0; ed * n];
    let a_param = p.a.item();
    let act_grad = |v: f64| if !cfg.relu_active() || v > 0.0 { 1.0 } else { 0.0 };
    let act = |v: f64| if cfg.relu_active() { relu(v) } else { v };

    for s in (0..inputs.len()).rev() {
        let slot = layout.split(&cache[s * stride..(s + 1) * stride]);
        let tok = inputs[s] as usize;
        let table = &model.tables[tok];
        let scored = s + 1 >= first;

        dy.iter_mut().for_each(|v| *v = 0.0);
        if scored {
            let target = tokens[s + 1] as usize;
            let pt = slot.prob[target];
            if pt <= 0.0 {
                return Err(Error::InfiniteLoss { position: s + 1 });
            }
            loss -= weight * pt.ln();
            match cfg.head {
                Head::Softmax => {
                    for (i, g) in dlogit.iter_mut().enumerate() {
                        *g = weight * (slot.prob[i] - if i == target { 1.0 } else { 0.0 });
                    }
                }
                Head::L1norm => {
                    let sum: f64 = slot.logit.iter().map(|l| l.max(L1_FLOOR)).sum();
                    for (i, g) in dlogit.iter_mut().enumerate() {
                        let dc_i = (weight - if i == target { weight / pt } else { 0.0 }) / sum;
                        *g = if slot.logit[i] > L1_FLOOR { dc_i } else { 0.0 };
                    }
                }
            }
            add_outer(grad.head.data_mut(), &dlogit, slot.v);
            dv.iter_mut().for_each(|v| *v = 0.0);
            add_transpose_matvec(&mut dv, p.head.data(), &dlogit);

            du.copy_from_slice(&dv);
            if let (Some(mlp), Some(gm)) = (&p.mlp, grad.mlp.as_mut()) {
                add_outer(gm.w2.data_mut(), &dv, slot.m);
                dm.iter_mut().for_each(|v| *v = 0.0);
                add_transpose_matvec(&mut dm, mlp.w2.data(), &dv);
                let gated = cfg.gating_active();
                for i in 0..hidden {
                    let r = relu(slot.h1[i]);
                    let (dr, d3) = match (gated, cfg.mlp_combine) {
                        (false, _) => (dm[i], 0.0),
                        (true, MlpCombine::Product) => (dm[i] * slot.h3[i], dm[i] * r),
                        (true, MlpCombine::Sum) => (dm[i], dm[i]),
                    };
                    dh1[i] = if slot.h1[i] > 0.0 { dr } else { 0.0 };
                    dh3[i] = d3;
                }
                add_outer(gm.w1.data_mut(), &dh1, slot.u);
                add_transpose_matvec(&mut du, mlp.w1.data(), &dh1);
                if gated {
                    add_outer(gm.w3.data_mut(), &dh3, slot.u);
                    add_transpose_matvec(&mut du, mlp.w3.data(), &dh3);
                }
            }

            for (a, b) in d_x[tok].iter_mut().zip(&du) {
                *a += b;
            }
            add_outer(grad.w_o.data_mut(), &du, slot.z);
            dz.iter_mut().for_each(|v| *v = 0.0);
            add_transpose_matvec(&mut dz, p.w_o.data(), &du);

            if cfg.gating_active() {
                for i in 0..ed {
                    let g = table.gate[i];
                    dy[i] = dz[i] * relu(g);
                    if g > 0.0 {
                        d_gate[tok][i] += dz[i] * slot.y[i];
                    }
                }
            } else {
                dy.copy_from_slice(&dz);
            }
        }

        // y = H c and H_s = a_s H_{s-1} + x̃ bᵀ
        let h_prev = if s == 0 {
            &zeros[..]
        } else {
            &cache[(s - 1) * stride..(s - 1) * stride + ed * n]
        };
        let at = slot.scalars[1];
        let delta = slot.scalars[0];
        dc.iter_mut().for_each(|v| *v = 0.0);
        db.iter_mut().for_each(|v| *v = 0.0);
        let mut da_t = 0.0;
        for i in 0..ed {
            let row = i * n..(i + 1) * n;
            let hrow = &slot.h[row.clone()];
            let g = &mut carry[row.clone()];
            let hp = &h_prev[row];
            let yi = dy[i];
            let xi = slot.xt[i];
            let mut dxi = 0.0;
            for j in 0..n {
                dc[j] += yi * hrow[j];
                let gij = g[j] + yi * slot.c[j];
                da_t += gij * hp[j];
                dxi += gij * slot.b[j];
                db[j] += gij * xi;
                g[j] = at * gij;
            }
            dxt[i] = dxi;
        }

        let mut d_delta = 0.0;
        for i in 0..ed {
            d_delta += dxt[i] * act(slot.cx[i]);
            dcx[i] = dxt[i] * delta * act_grad(slot.cx[i]);
        }
        for j in 0..n {
            dcb[j] = db[j] * act_grad(slot.cb[j]);
            dcc[j] = dc[j] * act_grad(slot.cc[j]);
        }

        // a_t = exp(-a Δ), Δ = softplus(q)
        grad.a.data_mut()[0] += da_t * (-delta) * at;
        d_delta += da_t * (-a_param) * at;
        d_q[tok] += d_delta * sigmoid(table.q);

        let history_start = (s + 1).saturating_sub(cfg.history());
        let history = &inputs[history_start..=s];
        conv_backward(
            cfg.use_conv,
            history,
            p.conv_x.data(),
            grad.conv_x.data_mut(),
            cfg.window,
            &dcx,
            &model.tables,
            |t| &t.px,
            &mut d_px,
        );
        conv_backward(
            cfg.use_conv,
            history,
            p.conv_b.data(),
            grad.conv_b.data_mut(),
            cfg.window,
            &dcb,
            &model.tables,
            |t| &t.pb,
            &mut d_pb,
        );
        conv_backward(
            cfg.use_conv,
            history,
            p.conv_c.data(),
            grad.conv_c.data_mut(),
            cfg.window_c(),
            &dcc,
            &model.tables,
            |t| &t.pc,
            &mut d_pc,
        );
    }

    // token adjoints to weights and embeddings
    for tok in 0..alphabet {
        let x = &model.tables[tok].x;
        let dx = &mut d_x[tok];
        add_outer(grad.w_x.data_mut(), &d_px[tok], x);
        add_transpose_matvec(dx, p.w_x.data(), &d_px[tok]);
        add_outer(grad.w_b.data_mut(), &d_pb[tok], x);
        add_transpose_matvec(dx, p.w_b.data(), &d_pb[tok]);
        add_outer(grad.w_c.data_mut(), &d_pc[tok], x);
        add_transpose_matvec(dx, p.w_c.data(), &d_pc[tok]);
        if let (Some(w_z), Some(gz)) = (&p.w_z, grad.w_z.as_mut()) {
            add_outer(gz.data_mut(), &d_gate[tok], x);
            add_transpose_matvec(dx, w_z.data(), &d_gate[tok]);
        }
        grad.delta.data_mut()[0] += d_q[tok];
        for (g, &xi) in grad.w_delta.data_mut().iter_mut().zip(x) {
            *g += d_q[tok] * xi;
        }
        for (g, &w) in dx.iter_mut().zip(p.w_delta.data()) {
            *g += d_q[tok] * w;
        }
        for (g, v) in grad.embedding.row_mut(tok).iter_mut().zip(dx.iter()) {
            *g += v;
        }
    }
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<'t>(
    use_conv: bool,
    history: &[u8],
    kernel: &[f64],
    d_kernel: &mut [f64],
    window: usize,
    d_out: &[f64],
    tables: &'t [super::forward::TokenTable],
    pick: impl Fn(&'t super::forward::TokenTable) -> &'t [f64],
    d_proj: &mut [Vec<f64>],
) {
    let len = history.len();
    if !use_conv {
        let acc = &mut d_proj[history[len - 1] as usize];
        for (a, g) in acc.iter_mut().zip(d_out) {
            *a += g;
        }
        return;
    }
    for j in 0..window {
        let back = window - 1 - j;
        if back >= len {
            continue;
        }
        let tok = history[len - 1 - back] as usize;
        let proj = pick(&tables[tok]);
        let acc = &mut d_proj[tok];
        for (i, &g) in d_out.iter().enumerate() {
            d_kernel[i * window + j] += g * proj[i];
            acc[i] += g * kernel[i * window + j];
        }
    }
}

/// Batch-mean loss and gradient. Per-sequence gradients are reduced in
/// input order, so the result does not depend on the execution mode.
pub fn batch_loss_grad(model: &Model, sequences: &[TokenSequence], first: usize, exec: Execution) -> Result<(f64, MambaParams)> {
    if sequences.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let parts = par::map(exec, sequences, |seq| sequence_loss_grad(model, &seq.tokens, first));
    let scale = 1.0 / sequences.len() as f64;
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        total.add_scaled(&g, scale);
    }
    Ok((loss, total))
}

/// Batch-mean loss.
pub fn batch_loss(model: &Model, sequences: &[TokenSequence], first: usize, exec: Execution) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let parts = par::map(exec, sequences, |seq| sequence_loss(model, &seq.tokens, first));
    let mut loss = 0.0;
    for l in parts {
        loss += l?;
    }
    Ok(loss / sequences.len() as f64)
}
