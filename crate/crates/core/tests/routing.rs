mod common;

use cascade::hierarchy::route_gamma_gradients;
use cascade::mask::{apply_gamma_update, ScoreOptimizer};
use cascade::Error;
use common::*;

#[test]
fn each_slot_takes_the_next_slots_reduction() {
    for seed in 0..3 {
        let case = routing_case(seed);
        assert_eq!(case.routed.len(), 2);
        for i in 0..2 {
            assert!(bitwise_eq(&case.routed[i], &surrogate_on(&case.contexts[i + 1])), "seed {seed} slot {i}");
        }
    }
}

#[test]
fn cross_wired_routing_differs() {
    let case = routing_case(11);
    let from_top = surrogate_on(&case.contexts[2]);
    let own = surrogate_on(&case.contexts[0]);
    assert!(!bitwise_eq(&case.routed[0], &from_top));
    assert!(!bitwise_eq(&case.routed[0], &own));
}

#[test]
fn applied_update_uses_routed_gradient() {
    let case = routing_case(5);
    let lr = 0.25;
    for i in 0..2 {
        let scores = case.hierarchy.slots[i].scores.as_ref().unwrap();
        let oracle = surrogate_on(&case.contexts[i + 1]);
        let next = apply_gamma_update(scores, &case.routed[i], &mut ScoreOptimizer::sgd(), lr).unwrap();
        let expect: Vec<Vec<f64>> = scores
            .gamma
            .iter()
            .zip(&oracle)
            .map(|(s, g)| s.iter().zip(g).map(|(a, b)| a - lr * b).collect())
            .collect();
        assert!(bitwise_eq(&next.gamma, &expect));
    }
}

#[test]
fn own_gradient_adds_the_slots_own_reduction() {
    let case = routing_case(3);
    let wrapped: Vec<_> = case.contexts.iter().cloned().map(Some).collect();
    let both = route_gamma_gradients(&wrapped, true).unwrap();
    let own = surrogate_on(&case.contexts[0]);
    for (l, layer) in both[0].iter().enumerate() {
        for (n, v) in layer.iter().enumerate() {
            let want = case.routed[0][l][n] + own[l][n];
            assert_eq!(v.to_bits(), want.to_bits());
        }
    }
}

#[test]
fn missing_teacher_context_is_an_error() {
    let case = routing_case(1);
    let mut wrapped: Vec<_> = case.contexts.iter().cloned().map(Some).collect();
    wrapped[2] = None;
    assert!(matches!(
        route_gamma_gradients(&wrapped, false),
        Err(Error::MissingContext { slot: 2 })
    ));
}

#[test]
fn top_slot_keeps_every_filter() {
    let case = routing_case(2);
    let top = case.hierarchy.slots.last().unwrap();
    assert!(top.scores.is_none());
    assert_eq!(top.mask.kept(), top.mask.total());
    let student = &case.hierarchy.slots[0];
    assert_eq!(student.mask.kept(), 40);
}
