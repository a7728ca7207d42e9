//! The same model written against the autodiff tape. Slow, but every
//! derivative comes from the generic reverse pass, which makes it the
//! reference for the hand-written gradients.

use super::config::{Head, MambaConfig, MlpCombine, L1_FLOOR};
use super::params::MambaParams;
use crate::autodiff::{Bindings, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A recorded unrolled forward pass over one token sequence.
pub struct SequenceGraph {
    pub tape: Tape,
    /// Mean cross-entropy over the scored positions.
    pub loss: Var,
    /// `probs[t-1]` is the next-token law after reading `t` tokens.
    pub probs: Vec<Var>,
    pub a_t: Vec<Var>,
}

/// Records the model on `tokens`. Positions `first..len` are scored, as in
/// [`super::sequence_loss`].
pub fn build_sequence_graph(cfg: &MambaConfig, tokens: &[u8], first: usize) -> Result<SequenceGraph> {
    cfg.validate()?;
    if first == 0 || first >= tokens.len() {
        return Err(Error::Contract(format!(
            "no scored positions for length {} from {first}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.alphabet) {
        return Err(Error::Contract(format!("token {bad} outside the alphabet")));
    }
    let shapes = MambaParams::zeros(cfg);
    let mut tape = Tape::new();
    let input = |tape: &mut Tape, name: &str| -> Result<Var> {
        let t = shapes.get(name).ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
        tape.input(name, t.shape())
    };
    let emb = input(&mut tape, "embedding")?;
    let a = input(&mut tape, "a")?;
    let delta = input(&mut tape, "delta")?;
    let w_delta = input(&mut tape, "w_delta")?;
    let w_x = input(&mut tape, "w_x")?;
    let w_b = input(&mut tape, "w_b")?;
    let w_c = input(&mut tape, "w_c")?;
    let conv_x = input(&mut tape, "conv_x")?;
    let conv_b = input(&mut tape, "conv_b")?;
    let conv_c = input(&mut tape, "conv_c")?;
    let w_o = input(&mut tape, "w_o")?;
    let head = input(&mut tape, "head")?;
    let w_z = if cfg.has_mlp() { Some(input(&mut tape, "w_z")?) } else { None };
    let mlp = if cfg.has_mlp() {
        Some((
            input(&mut tape, "mlp.w1")?,
            input(&mut tape, "mlp.w2")?,
            input(&mut tape, "mlp.w3")?,
        ))
    } else {
        None
    };

    let inputs = &tokens[..tokens.len() - 1];
    let xs: Vec<Var> = inputs.iter().map(|&t| tape.row(emb, t as usize)).collect::<Result<_>>()?;
    let project = |tape: &mut Tape, w: Var| -> Result<Vec<Var>> { xs.iter().map(|&x| tape.matmul(w, x)).collect() };
    let px = project(&mut tape, w_x)?;
    let pb = project(&mut tape, w_b)?;
    let pc = project(&mut tape, w_c)?;

    let conv = |tape: &mut Tape, kernel: Var, window: usize, proj: &[Var], s: usize| -> Result<Var> {
        if !cfg.use_conv {
            return Ok(proj[s]);
        }
        let mut acc: Option<Var> = None;
        for j in 0..window {
            let back = window - 1 - j;
            if back > s {
                continue;
            }
            let col = tape.column(kernel, j)?;
            let term = tape.mul(col, proj[s - back])?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
        }
        Ok(acc.expect("the current step is always inside the window"))
    };
    let act = |tape: &mut Tape, v: Var| if cfg.relu_active() { tape.relu(v) } else { v };

    let mut h: Option<Var> = None;
    let mut probs = Vec::with_capacity(inputs.len());
    let mut a_ts = Vec::with_capacity(inputs.len());
    let mut total: Option<Var> = None;
    for s in 0..inputs.len() {
        let x = xs[s];
        let wx = tape.dot(w_delta, x)?;
        let q = tape.add(wx, delta)?;
        let dt = tape.softplus(q);
        let adt = tape.mul(a, dt)?;
        let neg = tape.scale(adt, -1.0);
        let a_t = tape.exp(neg);
        a_ts.push(a_t);

        let cx = conv(&mut tape, conv_x, cfg.window, &px, s)?;
        let cb = conv(&mut tape, conv_b, cfg.window, &pb, s)?;
        let cc = conv(&mut tape, conv_c, cfg.window_c(), &pc, s)?;
        let ax = act(&mut tape, cx);
        let xt = tape.mul(ax, dt)?;
        let b = act(&mut tape, cb);
        let c = act(&mut tape, cc);

        let inject = tape.outer(xt, b)?;
        let hs = match h {
            Some(prev) => {
                let decayed = tape.mul(a_t, prev)?;
                tape.add(decayed, inject)?
            }
            None => inject,
        };
        h = Some(hs);
        let y = tape.matmul(hs, c)?;

        let z = match w_z {
            Some(w_z) if cfg.gating_active() => {
                let g = tape.matmul(w_z, x)?;
                let g = tape.relu(g);
                tape.mul(y, g)?
            }
            _ => y,
        };
        let o = tape.matmul(w_o, z)?;
        let u = tape.add(x, o)?;
        let v = match mlp {
            Some((w1, w2, w3)) => {
                let h1 = tape.matmul(w1, u)?;
                let r = tape.relu(h1);
                let m = if cfg.gating_active() {
                    let h3 = tape.matmul(w3, u)?;
                    match cfg.mlp_combine {
                        MlpCombine::Product => tape.mul(r, h3)?,
                        MlpCombine::Sum => tape.add(r, h3)?,
                    }
                } else {
                    r
                };
                let out = tape.matmul(w2, m)?;
                tape.add(u, out)?
            }
            None => u,
        };
        let logit = tape.matmul(head, v)?;
        let prob = match cfg.head {
            Head::Softmax => tape.softmax(logit)?,
            Head::L1norm => {
                let clamped = tape.clamp_min(logit, L1_FLOOR);
                tape.l1_normalize(clamped)?
            }
        };
        probs.push(prob);

        if s + 1 >= first {
            let target = tokens[s + 1] as usize;
            let picked = tape.slice(prob, target, target + 1)?;
            let lp = tape.log(picked);
            let lp = tape.sum(lp);
            total = Some(match total {
                Some(prev) => tape.add(prev, lp)?,
                None => lp,
            });
        }
    }
    let count = (tokens.len() - first) as f64;
    let loss = tape.scale(total.expect("at least one scored position"), -1.0 / count);
    Ok(SequenceGraph {
        tape,
        loss,
        probs,
        a_t: a_ts,
    })
}

/// Binds every parameter tensor under its name.
pub fn bindings(params: &MambaParams) -> Bindings {
    params.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Loss and gradient of one sequence through the tape.
pub fn tape_loss_grad(params: &MambaParams, cfg: &MambaConfig, tokens: &[u8], first: usize) -> Result<(f64, MambaParams)> {
    params.validate(cfg)?;
    let graph = build_sequence_graph(cfg, tokens, first)?;
    let (values, grads) = graph.tape.gradient(&bindings(params), graph.loss)?;
    let mut out = params.zeros_like();
    out.for_each_mut(|name, t| {
        if let Some(g) = grads.get(name) {
            *t = g.clone();
        }
    });
    Ok((values.get(graph.loss).item(), out))
}

/// Next-token laws through the tape, for cross-checking the recurrence.
pub fn tape_probs(params: &MambaParams, cfg: &MambaConfig, tokens: &[u8]) -> Result<Vec<Tensor>> {
    // a dummy trailing token makes every input position part of the graph
    let mut padded = tokens.to_vec();
    padded.push(0);
    let graph = build_sequence_graph(cfg, &padded, 1.min(tokens.len()))?;
    let values = graph.tape.evaluate(&bindings(params))?;
    Ok(graph.probs.iter().map(|&p| values.get(p).clone()).collect())
}
