mod common;

use common::{finite_difference, gradient_agrees, random_instance};
use nesycap::losses::{grad_total, CeScope, LossHyperParams};
use nesycap::model::ARRAY_NAMES;

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let inst = random_instance(seed);
        let (grad, _) = grad_total(&inst.params, &inst.batch(), &inst.hp, &inst.index).unwrap();
        let numeric = finite_difference(&inst, 1e-6);
        for (k, name) in ARRAY_NAMES.iter().enumerate() {
            for (i, (&a, &n)) in grad.arrays()[k].iter().zip(&numeric[k]).enumerate() {
                if a.abs() >= 1e-6 {
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
                }
                assert!(
                    gradient_agrees(a, n, 1e-4, 1e-8),
                    "seed {seed} {name}[{i}]: analytic {a:e} numeric {n:e}"
                );
            }
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn baseline_gradient_is_ce_gradient() {
    // With beta = mu = 0 only the CE term remains; scaling alpha scales the gradient.
    for seed in 0..10 {
        let mut inst = random_instance(seed);
        inst.hp = LossHyperParams {
            alpha: 1.0,
            ..LossHyperParams::baseline()
        };
        let (g1, b1) = grad_total(&inst.params, &inst.batch(), &inst.hp, &inst.index).unwrap();
        assert_eq!(b1.total, b1.ce);
        inst.hp.alpha = 2.0;
        let (g2, _) = grad_total(&inst.params, &inst.batch(), &inst.hp, &inst.index).unwrap();
        for (a, b) in g1.arrays().iter().zip(g2.arrays()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }
}

#[test]
fn gradient_with_ce_on_every_token() {
    for seed in 0..50 {
        let mut inst = random_instance(seed);
        inst.hp.ce_scope = CeScope::AllTokens;
        let (grad, b) = grad_total(&inst.params, &inst.batch(), &inst.hp, &inst.index).unwrap();
        assert_eq!(
            b.counts.ce,
            inst.targets.iter().map(Vec::len).sum::<usize>()
        );
        let numeric = finite_difference(&inst, 1e-6);
        for (k, name) in ARRAY_NAMES.iter().enumerate() {
            for (i, (&a, &n)) in grad.arrays()[k].iter().zip(&numeric[k]).enumerate() {
                // either tolerance; 1e-8 is above the difference quotient's rounding floor
                assert!(
                    gradient_agrees(a, n, 1e-4, 1e-8) || (a - n).abs() <= 1e-8,
                    "seed {seed} {name}[{i}]: analytic {a:e} numeric {n:e}"
                );
            }
        }
    }
}
