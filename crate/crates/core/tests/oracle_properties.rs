use markov_mamba::markov::{sample_batch, TokenSequence};
use markov_mamba::model::PredictionTrace;
use markov_mamba::oracle::{add_beta_predict, add_beta_trace, count_context, oracle_loss, switching_predict, switching_trace};
use markov_mamba::rng;
use markov_mamba::train::cross_entropy_loss;
use proptest::prelude::*;
use rand::Rng;

fn binary(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn predictions_are_positive_and_normalized(tokens in binary(80), k in 1usize..4, beta in 0.01..10.0f64) {
        let seq = TokenSequence::binary(tokens);
        for t in 1..=seq.len() {
            let p = add_beta_predict(&seq, t, k, beta).unwrap();
            prop_assert!(p[0] > 0.0 && p[1] > 0.0);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rolling_trace_matches_direct_counting(tokens in binary(80), k in 1usize..4, beta in 0.1..3.0f64) {
        let seq = TokenSequence::binary(tokens);
        let trace = add_beta_trace(&seq.tokens, k, beta).unwrap();
        for t in 1..=seq.len() {
            prop_assert_eq!(trace[t - 1], add_beta_predict(&seq, t, k, beta).unwrap());
        }
    }

    #[test]
    fn switching_without_switches_is_add_beta(tokens in binary(60), k in 1usize..3, beta in 0.1..3.0f64) {
        let seq = TokenSequence::binary(tokens);
        let trace = switching_trace(&seq.tokens, k, beta, 0.0).unwrap();
        for t in 1..=seq.len() {
            let plain = add_beta_predict(&seq, t, k, beta).unwrap();
            let sw = switching_predict(&seq, t, k, beta, 0.0).unwrap();
            prop_assert_eq!(sw, [plain[0], plain[1], 0.0]);
            prop_assert_eq!(trace[t - 1], sw);
        }
    }

    #[test]
    fn oracle_loss_is_cross_entropy_of_its_trace(seed: u64, k in 1usize..3) {
        let batch = sample_batch(k, 1.0, 48, 3, seed).unwrap();
        let mut total = 0.0;
        for seq in &batch {
            let probs = add_beta_trace(&seq.tokens, k, 1.0).unwrap().iter().map(|p| p.to_vec()).collect();
            let trace = PredictionTrace { probs, a_t: vec![1.0; seq.len()], diagnostics: None };
            total += cross_entropy_loss(&trace, seq, k).unwrap();
        }
        let direct = oracle_loss(&batch, k, 1.0).unwrap();
        prop_assert!((total / batch.len() as f64 - direct).abs() < 1e-12);
    }
}

/// `E[p | counts]` under the uniform prior, by the midpoint rule on a grid
/// of 10^6 cells.
fn posterior_mean(n0: u32, n1: u32) -> f64 {
    let cells = 1_000_000;
    let h = 1.0 / cells as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..cells {
        let p = (i as f64 + 0.5) * h;
        let w = p.powi(n1 as i32) * (1.0 - p).powi(n0 as i32);
        num += p * w;
        den += w;
    }
    num / den
}

#[test]
fn add_one_is_the_posterior_mean() {
    let mut rng = rng::stream(2024, &[]);
    for case in 0..50 {
        let len = rng.random_range(2..40);
        let tokens: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
        let seq = TokenSequence::binary(tokens);
        let t = rng.random_range(1..=len);
        let c = count_context(&seq, t, 1).unwrap();
        let predicted = add_beta_predict(&seq, t, 1, 1.0).unwrap()[1];
        let integrated = posterior_mean(c.n0(), c.n1);
        assert!((predicted - integrated).abs() < 1e-6, "case {case}: {predicted} vs {integrated}");
    }
}
