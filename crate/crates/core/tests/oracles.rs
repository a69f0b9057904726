mod common;

use common::*;
use fewshot_tokens::reweighting::{
    support_loss, support_loss_gradient, support_self_logits, support_self_logits_dense, Mask,
};
use fewshot_tokens::similarity::{build_similarity, stack_queries, ImportanceWeights};
use fewshot_tokens::{flatten_support, predict, ClassifierConfig};
use rand::Rng;

fn close_or_both_neg_inf(a: f64, b: f64, tol: f64) -> bool {
    (a == f64::NEG_INFINITY && b == f64::NEG_INFINITY) || (a - b).abs() <= tol
}

#[test]
fn similarity_matches_double_loop() {
    let mut r = rng(11);
    for _ in 0..10 {
        let (n, k, gh, gw) = small_shape(&mut r);
        let ep = random_episode(&mut r, n, k, 2, gh, gw, 5);
        let flat = flatten_support(&ep);
        let s = build_similarity(&flat, n, &stack_queries(&ep), ep.tokens_per_image()).unwrap();
        let l = ep.tokens_per_image();
        for (i, image) in ep.support().iter().enumerate() {
            for ls in 0..l {
                for (q, (query, _)) in ep.queries().iter().enumerate() {
                    for lq in 0..l {
                        let expected = naive_cosine(image.token(ls), query.token(lq));
                        assert!((s.get(i * l + ls, q * l + lq) - expected).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn predict_matches_triple_loop() {
    let mut r = rng(12);
    for _ in 0..25 {
        let (n, k, gh, gw) = small_shape(&mut r);
        let dim = r.random_range(1..=6);
        let ep = random_episode(&mut r, n, k, 2, gh, gw, dim);
        let v = random_v(&mut r, ep.num_support_tokens(), 1.0);
        let cfg = ClassifierConfig {
            tau: r.random_range(0.05..1.0),
            ..ClassifierConfig::for_dim(dim)
        };
        let preds = predict(&ep, &ImportanceWeights::new(v.clone()).unwrap(), &cfg).unwrap();
        for (pred, (query, _)) in preds.iter().zip(ep.queries()) {
            let logits = oracle_query_logits(&ep, &v, cfg.tau, query);
            assert!(max_abs_diff(&pred.logits, &logits) < 1e-9);
            assert!(max_abs_diff(&pred.probs, &naive_softmax(&logits)) < 1e-9);
        }
    }
}

#[test]
fn support_logits_match_masked_loop() {
    let mut r = rng(13);
    for _ in 0..25 {
        let (n, k, gh, gw) = small_shape(&mut r);
        let ep = random_episode(&mut r, n, k, 0, gh, gw, 4);
        let window = [1, 3][r.random_range(0..2)];
        let mask = Mask::for_episode(&ep, window).unwrap();
        let v = random_v(&mut r, ep.num_support_tokens(), 0.5);
        let w = ImportanceWeights::new(v.clone()).unwrap();
        let expected = oracle_support_logits(&ep, &v, 0.3, window);
        let fast = support_self_logits(&ep, &w, &mask, 0.3).unwrap();
        let dense = support_self_logits_dense(&ep, &w, &mask, 0.3).unwrap();
        for p in 0..expected.len() {
            for c in 0..n {
                assert!(close_or_both_neg_inf(fast[p][c], expected[p][c], 1e-9));
                assert!(close_or_both_neg_inf(dense[p][c], expected[p][c], 1e-9));
            }
        }
    }
}

#[test]
fn loss_and_gradient_match_oracle() {
    let mut r = rng(14);
    let mut checked = 0;
    while checked < 10 {
        let (n, k, gh, gw) = small_shape(&mut r);
        let ep = random_episode(&mut r, n, k, 0, gh, gw, 3);
        // a unit window keeps every one-shot image partly visible
        let mask = Mask::for_episode(&ep, 1).unwrap();
        let v = random_v(&mut r, ep.num_support_tokens(), 0.2);
        let expected = oracle_support_loss(&ep, &v, 0.5, 1);
        if !expected.is_finite() {
            continue;
        }
        let w = ImportanceWeights::new(v.clone()).unwrap();
        let loss = support_loss(&ep, &w, &mask, 0.5).unwrap();
        assert!((loss - expected).abs() < 1e-9 * expected.abs().max(1.0));
        let grad = support_loss_gradient(&ep, &w, &mask, 0.5).unwrap();
        let numeric = oracle_gradient(&ep, &v, 0.5, 1, 1e-5);
        for (a, b) in grad.iter().zip(&numeric) {
            assert!(
                (a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-5,
                "{a} vs {b}"
            );
        }
        checked += 1;
    }
}

#[test]
fn gradient_is_orthogonal_to_uniform_shift() {
    // shifting every v by the same constant leaves the loss unchanged
    let mut r = rng(15);
    let ep = random_episode(&mut r, 3, 2, 0, 2, 2, 4);
    let mask = Mask::for_episode(&ep, 5).unwrap();
    let v = ImportanceWeights::new(random_v(&mut r, ep.num_support_tokens(), 0.3)).unwrap();
    let grad = support_loss_gradient(&ep, &v, &mask, 0.4).unwrap();
    assert!(grad.iter().sum::<f64>().abs() < 1e-10);
}
