//! The add-β (Laplacian smoothing) predictor, which is the Bayes-optimal
//! next-token law for chains whose rows are drawn from `Dir(β, β)`, and its
//! segment-resetting variant for the switching process.
//!
//! Positions are 1-based throughout: `t` refers to `x_t`, and a prediction at
//! `t` is the law of `x_{t+1}` given `x_1^t`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::markov::{context_index, TokenSequence, SWITCH};

/// Occurrences of the current length-k context in `x_1^t` with a following
/// token inside `x_1^t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContextCounts {
    pub n: u32,
    pub n1: u32,
}

impl ContextCounts {
    pub fn n0(self) -> u32 {
        self.n - self.n1
    }

    /// `((n0 + β) / (n + 2β), (n1 + β) / (n + 2β))`
    pub fn add_beta(self, beta: f64) -> [f64; 2] {
        let denom = self.n as f64 + 2.0 * beta;
        [(self.n0() as f64 + beta) / denom, (self.n1 as f64 + beta) / denom]
    }
}

/// Order-1 transition tallies `n[i][j]` of `i -> j` in `x_1^t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransitionCounts {
    pub n: [[u32; 2]; 2],
}

impl TransitionCounts {
    pub fn total(&self) -> u32 {
        self.n.iter().flatten().sum()
    }
}

fn check_binary(tokens: &[u8]) -> Result<()> {
    if let Some(i) = tokens.iter().position(|&t| t > 1) {
        return Err(Error::Contract(format!("non-binary token at position {}", i + 1)));
    }
    Ok(())
}

/// Direct enumeration of the context counts at position `t`.
pub fn count_context(seq: &TokenSequence, t: usize, k: usize) -> Result<ContextCounts> {
    if k == 0 || t < k || t > seq.len() {
        return Err(Error::Contract(format!("count_context needs k <= t <= T, got t={t}, k={k}")));
    }
    let x = &seq.tokens[..t];
    check_binary(x)?;
    let context = &x[t - k..];
    let mut counts = ContextCounts::default();
    // i is 0-based here: prefix x[i-k..i] followed by x[i]
    for i in k..t {
        if &x[i - k..i] == context {
            counts.n += 1;
            counts.n1 += u32::from(x[i] == 1);
        }
    }
    Ok(counts)
}

/// Add-β prediction at position `t`. Positions before the first full context
/// (`t < k`) get the uniform law.
pub fn add_beta_predict(seq: &TokenSequence, t: usize, k: usize, beta: f64) -> Result<[f64; 2]> {
    check_beta(beta)?;
    if t < k {
        return Ok([0.5, 0.5]);
    }
    Ok(count_context(seq, t, k)?.add_beta(beta))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("beta must be positive, got {beta}")))
    }
}

/// Rolling context counter: O(1) per token.
#[derive(Debug, Clone)]
pub struct ContextCounter {
    k: usize,
    table: Vec<[u32; 2]>,
    history: Vec<u8>,
}

impl ContextCounter {
    pub fn new(k: usize) -> Self {
        ContextCounter {
            k,
            table: vec![[0, 0]; 1 << k],
            history: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.table.iter_mut().for_each(|r| *r = [0, 0]);
        self.history.clear();
    }

    pub fn push(&mut self, token: u8) {
        let len = self.history.len();
        if len >= self.k {
            let ctx = context_index(&self.history[len - self.k..]);
            self.table[ctx][token as usize] += 1;
        }
        self.history.push(token);
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Current context (last `k` tokens) and its counts, once `k` tokens
    /// have been seen.
    pub fn current(&self) -> Option<(usize, ContextCounts)> {
        let len = self.history.len();
        if len < self.k {
            return None;
        }
        let ctx = context_index(&self.history[len - self.k..]);
        let [n0, n1] = self.table[ctx];
        Some((ctx, ContextCounts { n: n0 + n1, n1 }))
    }
}

/// Add-β predictions at every position `t = 1..=T`.
pub fn add_beta_trace(tokens: &[u8], k: usize, beta: f64) -> Result<Vec<[f64; 2]>> {
    check_beta(beta)?;
    check_binary(tokens)?;
    let mut counter = ContextCounter::new(k);
    Ok(tokens
        .iter()
        .map(|&tok| {
            counter.push(tok);
            counter.current().map_or([0.5, 0.5], |(_, c)| c.add_beta(beta))
        })
        .collect())
}

/// Switching-aware prediction over `{0, 1, S}` at position `t`: counts are
/// taken only over the segment after the most recent switch token.
pub fn switching_predict(seq: &TokenSequence, t: usize, k: usize, beta: f64, p_switch: f64) -> Result<[f64; 3]> {
    check_beta(beta)?;
    if t == 0 || t > seq.len() {
        return Err(Error::Contract(format!("position {t} outside 1..={}", seq.len())));
    }
    let x = &seq.tokens[..t];
    let start = x.iter().rposition(|&s| s == SWITCH).map_or(0, |i| i + 1);
    let segment = TokenSequence::binary(x[start..].to_vec());
    let binary = if segment.len() < k {
        [0.5, 0.5]
    } else {
        add_beta_predict(&segment, segment.len(), k, beta)?
    };
    Ok(mix_switch(binary, p_switch))
}

fn mix_switch(binary: [f64; 2], p_switch: f64) -> [f64; 3] {
    let keep = 1.0 - p_switch;
    [keep * binary[0], keep * binary[1], p_switch]
}

/// Switching predictions at every position, with counts reset at each `S`.
pub fn switching_trace(tokens: &[u8], k: usize, beta: f64, p_switch: f64) -> Result<Vec<[f64; 3]>> {
    check_beta(beta)?;
    let mut counter = ContextCounter::new(k);
    Ok(tokens
        .iter()
        .map(|&tok| {
            if tok == SWITCH {
                counter.reset();
            } else {
                counter.push(tok);
            }
            let binary = counter.current().map_or([0.5, 0.5], |(_, c)| c.add_beta(beta));
            mix_switch(binary, p_switch)
        })
        .collect())
}

/// Transition tallies over the consecutive pairs of `x_1^t`.
pub fn transition_counts(seq: &TokenSequence, t: usize) -> Result<TransitionCounts> {
    if t == 0 || t > seq.len() {
        return Err(Error::Contract(format!("position {t} outside 1..={}", seq.len())));
    }
    let x = &seq.tokens[..t];
    check_binary(x)?;
    let mut counts = TransitionCounts::default();
    for w in x.windows(2) {
        counts.n[w[0] as usize][w[1] as usize] += 1;
    }
    Ok(counts)
}

/// Mean cross-entropy of the add-β predictor over positions `t ∈ [k, T-1]`,
/// averaged per sequence and then over the batch.
pub fn oracle_loss(sequences: &[TokenSequence], k: usize, beta: f64) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Contract("oracle loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for seq in sequences {
        if seq.len() <= k {
            return Err(Error::Contract(format!(
                "sequence of length {} has no positions past k={k}",
                seq.len()
            )));
        }
        let trace = add_beta_trace(&seq.tokens, k, beta)?;
        total += mean_nll(&trace, &seq.tokens, k);
    }
    Ok(total / sequences.len() as f64)
}

/// Same as [`oracle_loss`] for switching data against [`switching_trace`].
pub fn switching_oracle_loss(sequences: &[TokenSequence], k: usize, beta: f64, p_switch: f64) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Contract("oracle loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for seq in sequences {
        if seq.len() <= k {
            return Err(Error::Contract(format!(
                "sequence of length {} has no positions past k={k}",
                seq.len()
            )));
        }
        let trace = switching_trace(&seq.tokens, k, beta, p_switch)?;
        total += mean_nll(&trace, &seq.tokens, k);
    }
    Ok(total / sequences.len() as f64)
}

fn mean_nll<const A: usize>(trace: &[[f64; A]], tokens: &[u8], start: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in start..tokens.len() {
        sum += trace[t - 1][tokens[t] as usize].ln();
        count += 1;
    }
    -sum / count as f64
}

/// Writes `t, context, n, n_1, P0, P1[, PS]` for every position.
pub fn write_trace_csv(path: &Path, seq: &TokenSequence, k: usize, beta: f64, p_switch: Option<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t", "context", "n", "n_1", "P0", "P1"];
    if p_switch.is_some() {
        header.push("PS");
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut counter = ContextCounter::new(k);
    for (i, &tok) in seq.tokens.iter().enumerate() {
        if tok == SWITCH {
            counter.reset();
        } else {
            counter.push(tok);
        }
        let (context, counts) = match counter.current() {
            Some((ctx, c)) => (format!("{ctx:0k$b}"), c),
            None => (String::new(), ContextCounts::default()),
        };
        let binary = counter.current().map_or([0.5, 0.5], |(_, c)| c.add_beta(beta));
        let mut record = vec![(i + 1).to_string(), context, counts.n.to_string(), counts.n1.to_string()];
        match p_switch {
            Some(p) => {
                let [p0, p1, ps] = mix_switch(binary, p);
                record.extend([p0.to_string(), p1.to_string(), ps.to_string()]);
            }
            None => record.extend([binary[0].to_string(), binary[1].to_string()]),
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[u8]) -> TokenSequence {
        TokenSequence::binary(tokens.to_vec())
    }

    #[test]
    fn confusable_pair_counts_and_predictions() {
        let x = seq(&[0, 1, 0, 1, 0, 1]);
        let y = seq(&[0, 0, 0, 1, 1, 1]);
        assert_eq!(count_context(&x, 6, 1).unwrap(), ContextCounts { n: 2, n1: 0 });
        assert_eq!(count_context(&y, 6, 1).unwrap(), ContextCounts { n: 2, n1: 2 });
        assert_eq!(add_beta_predict(&x, 6, 1, 1.0).unwrap()[1], 0.25);
        assert_eq!(add_beta_predict(&y, 6, 1, 1.0).unwrap()[1], 0.75);
        // same unigram counts
        let ones = |s: &TokenSequence| s.tokens.iter().filter(|&&t| t == 1).count();
        assert_eq!(ones(&x), ones(&y));
    }

    #[test]
    fn second_order_brute_force_case() {
        let x = seq(&[1, 1, 0, 1, 1]);
        assert_eq!(count_context(&x, 5, 2).unwrap(), ContextCounts { n: 1, n1: 0 });
        assert_eq!(add_beta_predict(&x, 5, 2, 0.5).unwrap()[1], 0.25);
    }

    #[test]
    fn freshly_formed_context_is_empty() {
        let x = seq(&[1, 0, 1]);
        assert_eq!(count_context(&x, 2, 2).unwrap(), ContextCounts::default());
        for beta in [0.1, 1.0, 7.0] {
            assert_eq!(add_beta_predict(&x, 2, 2, beta).unwrap(), [0.5, 0.5]);
        }
    }

    #[test]
    fn early_positions_are_uniform_and_contract_errors() {
        let x = seq(&[1, 0, 1]);
        assert_eq!(add_beta_predict(&x, 1, 2, 1.0).unwrap(), [0.5, 0.5]);
        assert!(count_context(&x, 1, 2).is_err());
        assert!(add_beta_predict(&x, 2, 1, 0.0).is_err());
        assert!(oracle_loss(&[], 1, 1.0).is_err());
    }

    #[test]
    fn transition_count_cases() {
        let c = transition_counts(&seq(&[0, 1, 0, 1, 0, 1]), 6).unwrap();
        assert_eq!(c.n, [[0, 3], [2, 0]]);
        let c = transition_counts(&seq(&[0, 0, 0]), 3).unwrap();
        assert_eq!(c.n, [[2, 0], [0, 0]]);
    }

    #[test]
    fn switching_resets_counts() {
        let p = 0.01;
        let s = TokenSequence::switching(vec![1, 1, 1, SWITCH, 0, 1, 0, 1, 0, 1]);
        let pred = switching_predict(&s, 4, 1, 1.0, p).unwrap();
        assert_eq!(pred, [(1.0 - p) / 2.0, (1.0 - p) / 2.0, p]);
        let pred = switching_predict(&s, 10, 1, 1.0, p).unwrap();
        assert_eq!(pred[1], (1.0 - p) * 0.25);
        let trace = switching_trace(&s.tokens, 1, 1.0, p).unwrap();
        for t in 1..=s.len() {
            assert_eq!(trace[t - 1], switching_predict(&s, t, 1, 1.0, p).unwrap());
        }
    }

    #[test]
    fn constant_sequence_loss_vanishes_for_tiny_beta() {
        let x = seq(&[0; 200]);
        let trace = add_beta_trace(&x.tokens, 1, 1e-3).unwrap();
        // late positions predict the repeated token almost surely
        assert!(-trace[150][0].ln() < 1e-4);
        // the first prediction is uniform; everything after is nearly free
        let loss = oracle_loss(&[x], 1, 1e-3).unwrap();
        assert!(loss > std::f64::consts::LN_2 / 199.0 && loss < std::f64::consts::LN_2 / 199.0 + 1e-3);
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let dir = std::env::temp_dir().join(format!("oracle-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        write_trace_csv(&path, &seq(&[0, 1, 0, 1, 0, 1]), 1, 1.0, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,context,n,n_1,P0,P1");
        assert_eq!(lines[6], "6,1,2,0,0.75,0.25");
        std::fs::remove_dir_all(&dir).ok();
    }
}
