use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relspeech::attention::{energies_relative, energies_relative_naive, parse_golden, AttentionParams};
use relspeech::position::{relative_encoding, PositionMode};
use relspeech::Tensor;

const GOLDEN: &str = include_str!("golden/relative_energies_k3_seed42.txt");

fn instance() -> (Tensor, AttentionParams) {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let params = AttentionParams::random(8, 2, PositionMode::Relative, &mut r).unwrap();
    let h = Tensor::randn(&[3, 8], 1.0, &mut r);
    (h, params)
}

#[test]
fn naive_energies_match_frozen_reference() {
    let expected = parse_golden(GOLDEN).unwrap();
    assert_eq!(expected.len(), 2 * 3 * 3);
    let (h, params) = instance();
    let table = relative_encoding(3, 8).unwrap();
    let naive = energies_relative_naive(&h, &params, &table).unwrap();
    let fast = energies_relative(&h, &params, &table).unwrap();
    for ((n, f), e) in naive.data().iter().zip(fast.data()).zip(&expected) {
        assert!((n - e).abs() <= 1e-15 * e.abs().max(1.0), "naive {n} vs {e}");
        assert!((f - e).abs() <= 1e-10 * e.abs().max(1.0), "fast {f} vs {e}");
    }
}
