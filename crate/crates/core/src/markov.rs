//! Random order-k binary Markov chains with Dirichlet-distributed rows, and
//! the switching process that resamples the chain after every switch token.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

/// Integer code of the switch token.
pub const SWITCH: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alphabet {
    /// `{0, 1}`
    Binary,
    /// `{0, 1, S}`
    Switching,
}

impl Alphabet {
    pub fn size(self) -> usize {
        match self {
            Alphabet::Binary => 2,
            Alphabet::Switching => 3,
        }
    }

    pub fn contains(self, token: u8) -> bool {
        (token as usize) < self.size()
    }
}

/// Conditional next-token law for every length-k binary context.
///
/// Row `i` belongs to the context whose tokens, oldest first, are the binary
/// digits of `i` (most significant first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovKernel {
    order: usize,
    beta: f64,
    rows: Vec<[f64; 2]>,
}

impl MarkovKernel {
    /// Builds a kernel from explicit `P(1 | context)` values.
    pub fn from_p_one(order: usize, beta: f64, p_one: &[f64]) -> Result<Self> {
        if order == 0 || p_one.len() != 1 << order {
            return Err(Error::Parameter(format!(
                "order {order} needs {} rows, got {}",
                1usize << order,
                p_one.len()
            )));
        }
        if p_one.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("kernel entries must lie in [0, 1]".into()));
        }
        let rows = p_one.iter().map(|&p| [1.0 - p, p]).collect();
        Ok(MarkovKernel { order, beta, rows })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn row(&self, context: usize) -> [f64; 2] {
        self.rows[context]
    }

    /// Row index of the `order` tokens ending `tokens`.
    pub fn context_index(&self, tokens: &[u8]) -> usize {
        context_index(&tokens[tokens.len() - self.order..])
    }

    fn draw_next(&self, history: &[u8], rng: &mut Rng) -> u8 {
        let [_, p1] = self.row(self.context_index(history));
        u8::from(rng.random::<f64>() < p1)
    }
}

/// Binary digits (oldest first, most significant first) to an index.
pub fn context_index(tokens: &[u8]) -> usize {
    tokens.iter().fold(0, |acc, &t| (acc << 1) | t as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u8>,
    pub alphabet: Alphabet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<MarkovKernel>,
}

impl TokenSequence {
    pub fn binary(tokens: Vec<u8>) -> Self {
        TokenSequence {
            tokens,
            alphabet: Alphabet::Binary,
            seed: None,
            kernel: None,
        }
    }

    pub fn switching(tokens: Vec<u8>) -> Self {
        TokenSequence {
            tokens,
            alphabet: Alphabet::Switching,
            seed: None,
            kernel: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.tokens.iter().position(|&t| !self.alphabet.contains(t)) {
            Some(i) => Err(Error::Contract(format!(
                "token {} at position {} is outside the {:?} alphabet",
                self.tokens[i],
                i + 1,
                self.alphabet
            ))),
            None => Ok(()),
        }
    }

    /// Line form: one character per token, `0`, `1` or `S`.
    pub fn to_line(&self) -> String {
        self.tokens
            .iter()
            .map(|&t| match t {
                0 => '0',
                1 => '1',
                _ => 'S',
            })
            .collect()
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let tokens = line
            .trim_end()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                'S' => Ok(SWITCH),
                other => Err(Error::Parameter(format!("unexpected token character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let alphabet = if tokens.contains(&SWITCH) {
            Alphabet::Switching
        } else {
            Alphabet::Binary
        };
        Ok(TokenSequence {
            tokens,
            alphabet,
            seed: None,
            kernel: None,
        })
    }
}

/// Configuration of the switching process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingConfig {
    pub order: usize,
    pub beta: f64,
    pub p_switch: f64,
    pub length: usize,
}

impl SwitchingConfig {
    pub fn validate(&self) -> Result<()> {
        check_order_beta(self.order, self.beta)?;
        if !(0.0..=1.0).contains(&self.p_switch) {
            return Err(Error::Parameter(format!("p_switch {} outside [0, 1]", self.p_switch)));
        }
        Ok(())
    }
}

fn check_order_beta(order: usize, beta: f64) -> Result<()> {
    if order == 0 {
        return Err(Error::Parameter("Markov order must be at least 1".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    Ok(())
}

/// Draws every row from `Dir(beta, beta)` via two normalized `Gamma(beta, 1)`
/// draws.
pub fn sample_kernel(order: usize, beta: f64, rng: &mut Rng) -> Result<MarkovKernel> {
    check_order_beta(order, beta)?;
    if order > 24 {
        return Err(Error::Parameter(format!("order {order} is too large to tabulate")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let rows = (0..1usize << order)
        .map(|_| {
            let g0: f64 = gamma.sample(rng);
            let g1: f64 = gamma.sample(rng);
            let s = g0 + g1;
            if s > 0.0 {
                let p1 = g1 / s;
                [1.0 - p1, p1]
            } else if rng.random::<bool>() {
                // both draws underflowed (tiny beta): the row sits on a vertex
                [0.0, 1.0]
            } else {
                [1.0, 0.0]
            }
        })
        .collect();
    Ok(MarkovKernel { order, beta, rows })
}

/// First `k` tokens uniform, then kernel transitions, `length` tokens in all.
pub fn sample_sequence(kernel: &MarkovKernel, length: usize, rng: &mut Rng) -> Result<TokenSequence> {
    if length < kernel.order {
        return Err(Error::Parameter(format!(
            "sequence length {length} is shorter than the order {}",
            kernel.order
        )));
    }
    let prefix: Vec<u8> = (0..kernel.order).map(|_| u8::from(rng.random::<bool>())).collect();
    extend_sequence(kernel, &prefix, length, rng)
}

/// Continues `prefix` (at least `k` tokens) with kernel transitions up to
/// `length` tokens.
pub fn extend_sequence(kernel: &MarkovKernel, prefix: &[u8], length: usize, rng: &mut Rng) -> Result<TokenSequence> {
    if prefix.len() < kernel.order || prefix.len() > length {
        return Err(Error::Parameter(format!(
            "prefix of {} tokens cannot seed an order-{} chain of length {length}",
            prefix.len(),
            kernel.order
        )));
    }
    if prefix.iter().any(|&t| t > 1) {
        return Err(Error::Parameter("prefix must be binary".into()));
    }
    let mut tokens = Vec::with_capacity(length);
    tokens.extend_from_slice(prefix);
    while tokens.len() < length {
        let next = kernel.draw_next(&tokens, rng);
        tokens.push(next);
    }
    Ok(TokenSequence {
        tokens,
        alphabet: Alphabet::Binary,
        seed: None,
        kernel: Some(kernel.clone()),
    })
}

/// Switching process: at every step emit `S` with probability `p_switch` and
/// resample the kernel; the first `k` binary tokens of each segment are
/// uniform.
pub fn sample_switching(cfg: &SwitchingConfig, rng: &mut Rng) -> Result<TokenSequence> {
    cfg.validate()?;
    let mut kernel = sample_kernel(cfg.order, cfg.beta, rng)?;
    let mut tokens = Vec::with_capacity(cfg.length);
    let mut segment_start = 0;
    while tokens.len() < cfg.length {
        if rng.random::<f64>() < cfg.p_switch {
            tokens.push(SWITCH);
            kernel = sample_kernel(cfg.order, cfg.beta, rng)?;
            segment_start = tokens.len();
        } else if tokens.len() - segment_start < cfg.order {
            tokens.push(u8::from(rng.random::<bool>()));
        } else {
            let next = kernel.draw_next(&tokens, rng);
            tokens.push(next);
        }
    }
    Ok(TokenSequence {
        tokens,
        alphabet: Alphabet::Switching,
        seed: None,
        kernel: None,
    })
}

/// Batch element `index` of a seeded batch: fresh kernel, fresh sequence.
pub fn sample_element(order: usize, beta: f64, length: usize, seed: u64, index: u64) -> Result<TokenSequence> {
    let mut kernel_rng = rng::stream(seed, &[tag::KERNEL, index]);
    let mut seq_rng = rng::stream(seed, &[tag::SEQUENCE, index]);
    let kernel = sample_kernel(order, beta, &mut kernel_rng)?;
    let mut seq = sample_sequence(&kernel, length, &mut seq_rng)?;
    seq.seed = Some(rng::derive(seed, &[tag::SEQUENCE, index]));
    Ok(seq)
}

/// `batch` independent (kernel, sequence) pairs.
pub fn sample_batch(order: usize, beta: f64, length: usize, batch: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    if batch == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    (0..batch as u64).map(|b| sample_element(order, beta, length, seed, b)).collect()
}

pub fn sample_switching_batch(cfg: &SwitchingConfig, batch: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    if batch == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    (0..batch as u64)
        .map(|b| {
            let mut rng = rng::stream(seed, &[tag::SEQUENCE, b]);
            let mut seq = sample_switching(cfg, &mut rng)?;
            seq.seed = Some(rng::derive(seed, &[tag::SEQUENCE, b]));
            Ok(seq)
        })
        .collect()
}

/// Description of a generated data file, enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub order: usize,
    pub beta: f64,
    pub length: usize,
    pub batch: usize,
    pub seed: u64,
    /// Present for switching data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_switch: Option<f64>,
    /// Derived per-sequence seeds, in file order.
    pub sequence_seeds: Vec<u64>,
}

impl DataManifest {
    /// Regenerates the sequences this manifest describes.
    pub fn generate(&self) -> Result<Vec<TokenSequence>> {
        match self.p_switch {
            Some(p_switch) => {
                let cfg = SwitchingConfig {
                    order: self.order,
                    beta: self.beta,
                    p_switch,
                    length: self.length,
                };
                sample_switching_batch(&cfg, self.batch, self.seed)
            }
            None => sample_batch(self.order, self.beta, self.length, self.batch, self.seed),
        }
    }
}

pub fn write_sequences(path: &Path, sequences: &[TokenSequence]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sequences {
        writeln!(out, "{}", s.to_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    file.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| TokenSequence::from_line(&l?))
        .collect()
}
