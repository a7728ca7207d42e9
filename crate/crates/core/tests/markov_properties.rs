use markov_mamba::markov::{
    read_sequences, sample_batch, sample_kernel, sample_sequence, sample_switching_batch, write_sequences, DataManifest, MarkovKernel,
    SwitchingConfig, TokenSequence, SWITCH,
};
use markov_mamba::oracle::{count_context, transition_counts};
use markov_mamba::rng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_sequences_stay_in_the_alphabet(order in 1usize..4, beta in 0.05..5.0f64, len in 1usize..200, seed: u64) {
        for seq in sample_batch(order, beta, len, 3, seed).unwrap() {
            prop_assert_eq!(seq.len(), len);
            prop_assert!(seq.tokens.iter().all(|&t| t <= 1));
            seq.validate().unwrap();
        }
    }

    #[test]
    fn switching_sequences_stay_in_the_alphabet(p_switch in 0.0..1.0f64, len in 1usize..200, seed: u64) {
        let cfg = SwitchingConfig { order: 1, beta: 1.0, p_switch, length: len };
        for seq in sample_switching_batch(&cfg, 3, seed).unwrap() {
            prop_assert_eq!(seq.len(), len);
            prop_assert!(seq.tokens.iter().all(|&t| t <= 1 || t == SWITCH));
            seq.validate().unwrap();
        }
    }

    #[test]
    fn generators_are_reproducible(order in 1usize..3, seed: u64) {
        let a = sample_batch(order, 1.0, 64, 4, seed).unwrap();
        let b = sample_batch(order, 1.0, 64, 4, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let c = sample_batch(order, 1.0, 64, 4, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a, c);
        let cfg = SwitchingConfig { order, beta: 1.0, p_switch: 0.05, length: 64 };
        prop_assert_eq!(sample_switching_batch(&cfg, 2, seed).unwrap(), sample_switching_batch(&cfg, 2, seed).unwrap());
    }

    #[test]
    fn text_files_round_trip(seed: u64) {
        let seqs = sample_batch(1, 1.0, 33, 5, seed).unwrap();
        let dir = std::env::temp_dir().join(format!("markov-roundtrip-{seed}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("seqs.txt");
        write_sequences(&path, &seqs).unwrap();
        let back = read_sequences(&path).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        let tokens: Vec<_> = seqs.iter().map(|s| &s.tokens).collect();
        prop_assert_eq!(back.iter().map(|s| &s.tokens).collect::<Vec<_>>(), tokens);
    }
}

#[test]
fn manifest_regenerates_its_batch() {
    let seqs = sample_batch(2, 0.5, 40, 6, 99).unwrap();
    let manifest = DataManifest {
        order: 2,
        beta: 0.5,
        length: 40,
        batch: 6,
        seed: 99,
        p_switch: None,
        sequence_seeds: seqs.iter().map(|s| s.seed.unwrap()).collect(),
    };
    let json = serde_json::to_string(&manifest).unwrap();
    let back: DataManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back.generate().unwrap(), seqs);
}

/// Every binary sequence of length 1..=14: the 0→1 and 1→0 transition
/// counts differ by the boundary indicator `[x_1=0, x_t=1] - [x_1=1, x_t=0]`.
#[test]
fn transition_counts_balance_exhaustively() {
    for len in 1..=14usize {
        for bits in 0u32..(1 << len) {
            let tokens: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
            let seq = TokenSequence::binary(tokens.clone());
            let c = transition_counts(&seq, len).unwrap();
            let (first, last) = (tokens[0], tokens[len - 1]);
            let expected = i64::from(first == 0 && last == 1) - i64::from(first == 1 && last == 0);
            let diff = i64::from(c.n[0][1]) - i64::from(c.n[1][0]);
            assert_eq!(diff, expected, "{tokens:?}");
            assert!(diff.abs() <= 1);
            assert_eq!(c.total() as usize, len - 1);
            // the order-1 context counts are the row of the current token
            let ctx = count_context(&seq, len, 1).unwrap();
            let row = c.n[last as usize];
            assert_eq!((ctx.n, ctx.n1), (row[0] + row[1], row[1]));
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Rows of `Dir(β, β)` have mean 1/2 and variance `1 / (4 (2β + 1))`.
#[test]
fn kernel_rows_follow_the_dirichlet_moments() {
    let n = 40_000;
    for beta in [0.5f64, 1.0, 3.0] {
        let mut rng = rng::stream(5, &[beta.to_bits()]);
        let draws: Vec<f64> = (0..n).map(|_| sample_kernel(1, beta, &mut rng).unwrap().row(0)[1]).collect();
        let (m, v) = mean_var(&draws);
        let want = 1.0 / (4.0 * (2.0 * beta + 1.0));
        // five standard errors
        assert!((m - 0.5).abs() < 5.0 * (want / n as f64).sqrt(), "beta {beta}: mean {m}");
        assert!((v - want).abs() < 0.05 * want, "beta {beta}: var {v} vs {want}");
    }
}

/// Empirical transition frequencies of a long chain match its kernel.
#[test]
fn sequences_follow_their_kernel() {
    let kernel = MarkovKernel::from_p_one(2, 1.0, &[0.1, 0.5, 0.8, 0.35]).unwrap();
    let seq = sample_sequence(&kernel, 200_000, &mut rng::stream(11, &[])).unwrap();
    let mut n = [[0u32; 2]; 4];
    for w in seq.tokens.windows(3) {
        n[kernel.context_index(&w[..2])][w[2] as usize] += 1;
    }
    for (ctx, counts) in n.iter().enumerate() {
        let total = f64::from(counts[0] + counts[1]);
        let p = kernel.row(ctx)[1];
        let freq = f64::from(counts[1]) / total;
        let se = (p * (1.0 - p) / total).sqrt();
        assert!((freq - p).abs() < 5.0 * se, "context {ctx}: {freq} vs {p}");
    }
}
