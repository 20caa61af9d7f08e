mod common;

use common::{rng, unit};
use depscreen_core::corpus::{
    classify, similarity_index, triage_rank, ClassBoundary, Label, Prediction, Provenance, ReferenceCorpus,
};
use depscreen_core::training::{contrastive_loss, pairwise_distance};
use proptest::prelude::*;

/// Two points on the first axis at distance `d`.
fn at_distance(d: f64) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0, 0.0], vec![d, 0.0])
}

#[test]
fn loss_table() {
    let (a, b) = at_distance(0.0);
    assert_eq!(contrastive_loss(&a, &b, 0, 1.0).unwrap(), 0.0);
    assert!((contrastive_loss(&a, &b, 1, 1.0).unwrap() - 0.5).abs() < 1e-12);
    for d in [1.0, 1.3, 2.0] {
        let (a, b) = at_distance(d);
        assert_eq!(contrastive_loss(&a, &b, 1, 1.0).unwrap(), 0.0);
    }
    let (a, b) = at_distance(0.6);
    assert!((contrastive_loss(&a, &b, 0, 1.0).unwrap() - 0.18).abs() < 1e-12);
    assert!(contrastive_loss(&a, &b, 0, 0.0).is_err());
    assert!(contrastive_loss(&[f64::NAN, 0.0], &b, 0, 1.0).is_err());
}

#[test]
fn loss_monotone_on_grid() {
    let m = 1.0;
    let mut prev_same = -1.0;
    let mut prev_cross = f64::INFINITY;
    for i in 0..=400 {
        let d = i as f64 * 0.005;
        let (a, b) = at_distance(d);
        let same = contrastive_loss(&a, &b, 0, m).unwrap();
        let cross = contrastive_loss(&a, &b, 1, m).unwrap();
        assert!(same > prev_same, "same-class loss not increasing at D={d}");
        assert!(cross <= prev_cross, "cross-class loss increasing at D={d}");
        if d >= m {
            assert_eq!(cross, 0.0);
        }
        prev_same = same;
        prev_cross = cross;
    }
}

#[test]
fn distance_and_cosine_agree_on_unit_vectors() {
    let mut r = rng(2024);
    for i in 0..10_000 {
        let d = 2 + i % 63;
        let a = unit(&mut r, d);
        let b = unit(&mut r, d);
        let dist = pairwise_distance(&a, &b).unwrap();
        let cos = similarity_index(&a, &b).unwrap();
        assert!((dist * dist + 2.0 * cos - 2.0).abs() < 1e-9);
    }
}

fn stamp() -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

proptest! {
    #[test]
    fn loss_zero_exactly_when_expected(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        c in 0u8..2,
        m in 0.05f64..2.0,
    ) {
        let l = contrastive_loss(&a, &b, c, m).unwrap();
        let d = pairwise_distance(&a, &b).unwrap();
        prop_assert!(l >= 0.0);
        let zero = (c == 0 && d == 0.0) || (c == 1 && d >= m);
        prop_assert_eq!(l == 0.0, zero);
    }

    #[test]
    fn similarity_is_symmetric(seed in any::<u64>(), d in 2usize..40) {
        let mut r = rng(seed);
        let a = unit(&mut r, d);
        let b = unit(&mut r, d);
        prop_assert_eq!(similarity_index(&a, &b).unwrap(), similarity_index(&b, &a).unwrap());
    }

    #[test]
    fn classify_ignores_duplicate_exemplars(seed in any::<u64>(), dup in 0usize..8, theta in -1.0f64..1.0) {
        let mut r = rng(seed);
        let mut corpus = ReferenceCorpus::new();
        let mut items = Vec::new();
        for k in 0..8u8 {
            let v = unit(&mut r, 5);
            let l = Label::new(k % 4).unwrap();
            corpus.add_exemplar(v.clone(), l, "", Provenance::SeedCorpus, None, stamp()).unwrap();
            items.push((v, l));
        }
        let q = unit(&mut r, 5);
        let boundary = ClassBoundary::new(theta).unwrap();
        let before = classify(&q, &corpus, boundary).unwrap();
        let (v, l) = items[dup].clone();
        corpus.add_exemplar(v, l, "", Provenance::ClinicianAdded, None, stamp()).unwrap();
        let after = classify(&q, &corpus, boundary).unwrap();
        prop_assert_eq!(before.label, after.label);
        prop_assert_eq!(before.class_scores, after.class_scores);
        prop_assert_eq!(before.uncertain, after.uncertain);
    }

    #[test]
    fn triage_is_a_stable_permutation(
        rows in prop::collection::vec((0u8..5, 0.0f64..1.0, 0u32..50), 0..30)
    ) {
        let preds: Vec<(String, Prediction)> = rows
            .iter()
            .enumerate()
            .map(|(i, (l, s, id))| {
                let label = (*l < 4).then(|| Label::new(*l).unwrap());
                (format!("s{id:03}-{i}"), Prediction {
                    label,
                    uncertain: label.is_none(),
                    class_scores: [*s; 4],
                    nearest: [0; 4],
                    top_similarity: *s,
                })
            })
            .collect();
        let ranked = triage_rank(&preds);
        prop_assert_eq!(triage_rank(&ranked), ranked.clone());
        let mut a: Vec<String> = preds.iter().map(|p| p.0.clone()).collect();
        let mut b: Vec<String> = ranked.iter().map(|p| p.0.clone()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        let uncertain = ranked.iter().take_while(|p| p.1.uncertain).count();
        prop_assert!(ranked[uncertain..].iter().all(|p| !p.1.uncertain));
        for w in ranked[uncertain..].windows(2) {
            prop_assert!(w[0].1.label >= w[1].1.label);
        }
    }
}
