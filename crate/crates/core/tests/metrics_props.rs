mod common;

use projtune::metrics::{abstract_match, bleu4, bleu4_tokens, exact_match, kruskal_wallis, normalize_whitespace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn bleu_matches_enumeration(
        cand in prop::collection::vec(0u8..6, 0..14),
        reference in prop::collection::vec(0u8..6, 1..14),
    ) {
        let got = bleu4_tokens(&cand, &reference).unwrap();
        let want = common::bleu_oracle(&cand, &reference);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn kruskal_wallis_bounds(groups in prop::collection::vec(prop::collection::vec(-5i32..5, 1..6), 2..5)) {
        let groups: Vec<Vec<f64>> = groups.into_iter().map(|g| g.into_iter().map(f64::from).collect()).collect();
        if groups.iter().map(Vec::len).sum::<usize>() >= 3 {
            let r = kruskal_wallis(&groups).unwrap();
            prop_assert!(r.h >= 0.0);
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
            prop_assert_eq!(r.df, groups.len() - 1);
        }
    }
}

#[test]
fn identical_text_scores_one() {
    let t = "@Test public void f() { assertEquals(1, g()); }";
    assert!((bleu4(t, t).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(bleu4("x y z", "a b c").unwrap(), 0.0);
}

#[test]
fn exact_implies_abstract_on_fuzzed_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let reference = common::fuzz_code(&mut rng);
        let cand = common::reflow(&reference, &mut rng);
        assert!(exact_match(&cand, &reference), "{cand:?} / {reference:?}");
        assert!(abstract_match(&cand, &reference));
        assert_eq!(normalize_whitespace(&cand), normalize_whitespace(&reference));
    }
}

#[test]
fn kruskal_wallis_reference_values() {
    let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    assert!((r.h - 3.857).abs() < 1e-3);
    assert!((r.p_value - 0.0495).abs() < 1e-3);
    let same = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
    assert!(same.h.abs() < 1e-12 && (same.p_value - 1.0).abs() < 1e-12);
}
