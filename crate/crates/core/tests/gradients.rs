//! Reverse-mode gradients against central finite differences.

mod support;

use boneage_core::autodiff::Graph;
use boneage_core::Tensor;
use support::GRAD_TOL;

#[test]
fn every_primitive_matches_finite_differences() {
    let errors = support::primitive_errors(5);
    for e in &errors {
        assert!(e.error <= GRAD_TOL, "{} (seed {}) relative error {:e}", e.name, e.seed, e.error);
    }
    assert!(errors.len() >= 100, "only {} cases", errors.len());
}

#[test]
fn gconv_attention_and_head_chain_matches_finite_differences() {
    let err = support::attention_chain_error();
    assert!(err <= GRAD_TOL, "relative error {:e}", err);
}

#[test]
fn composed_model_matches_finite_differences() {
    for seed in 0..2u64 {
        let r = support::composed_model_check(seed);
        assert!(r.worst <= GRAD_TOL, "{:?}", r);
        assert!(r.kinked * 20 <= r.probed, "{} of {} coordinates straddle a kink", r.kinked, r.probed);
        assert!(r.grads_finite);
    }
}

#[test]
fn gradient_reaches_only_the_selected_cells() {
    let (c, h, w) = (3, 5, 6);
    let mut g = Graph::new();
    let map = g.param(Tensor::full(&[2, c, h, w], 0.5));
    let cells = vec![(0, 1, 2), (1, 4, 5), (0, 1, 2), (1, 0, 0)];
    let pillars = g.gather_pillars(map, &cells).unwrap();
    let loss = g.sum(pillars);
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(map).unwrap();
    for b in 0..2 {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let hits = cells.iter().filter(|&&cell| cell == (b, i, j)).count() as f64;
                    assert_eq!(grad.data()[((b * c + ch) * h + i) * w + j], hits);
                }
            }
        }
    }
}
