use bbm92_core::coinc::match_coincidences;
use proptest::prelude::*;

/// Quadratic reference: each Alice record, in order, takes the earliest
/// unused Bob record inside the closed window.
fn oracle(alice: &[u64], bob: &[u64], w: u64) -> Vec<(usize, usize)> {
    let mut used = vec![false; bob.len()];
    let mut out = Vec::new();
    for (i, &ta) in alice.iter().enumerate() {
        if let Some(j) = (0..bob.len()).find(|&j| !used[j] && ta.abs_diff(bob[j]) <= w) {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn sorted(mut v: Vec<u64>) -> Vec<u64> {
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_quadratic_oracle(
        alice in prop::collection::vec(0u64..20_000, 0..80).prop_map(sorted),
        bob in prop::collection::vec(0u64..20_000, 0..80).prop_map(sorted),
        w in 1u64..3000,
    ) {
        let got = match_coincidences(&alice, &bob, w).unwrap();
        let pairs: Vec<(usize, usize)> = got.pairs.iter().map(|p| (p.alice, p.bob)).collect();
        prop_assert_eq!(pairs, oracle(&alice, &bob, w));
        for p in &got.pairs {
            prop_assert!(p.delta_ps.unsigned_abs() <= w);
            prop_assert_eq!(p.delta_ps, bob[p.bob] as i64 - alice[p.alice] as i64);
        }
    }
}

#[test]
fn window_edges_are_closed() {
    let got = match_coincidences(&[10_000u64], &[11_000u64], 1000).unwrap();
    assert_eq!(got.len(), 1);
    let got = match_coincidences(&[10_000u64], &[11_001u64], 1000).unwrap();
    assert!(got.is_empty());
    let got = match_coincidences(&[10_000u64], &[9_000u64], 1000).unwrap();
    assert_eq!(got.pairs[0].delta_ps, -1000);
}

#[test]
fn unsorted_input_is_rejected() {
    assert!(match_coincidences(&[5u64, 1], &[1u64], 10).is_err());
    assert!(match_coincidences(&[1u64], &[5u64, 1], 10).is_err());
    assert!(match_coincidences(&[1u64], &[1u64], 0).is_err());
}
