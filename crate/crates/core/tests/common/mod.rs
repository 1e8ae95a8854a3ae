//! Helpers shared by the integration suites: random small instances and a
//! central finite-difference oracle that only calls forward passes and loss values.
#![allow(dead_code)]

use nesycap::datagen::{mask_scene, Scene};
use nesycap::kb::{BiasIndex, BiasSet, TokenId, START_ID};
use nesycap::losses::{evaluate_batch, CeScope, Example, LossHyperParams};
use nesycap::model::{init_params, Dims, ModelParams, ARRAY_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub params: ModelParams<f64>,
    pub full: Vec<Scene>,
    pub masked: Vec<Scene>,
    pub targets: Vec<Vec<TokenId>>,
    pub index: BiasIndex,
    pub hp: LossHyperParams,
}

impl Instance {
    pub fn batch(&self) -> Vec<Example<'_>> {
        self.full
            .iter()
            .zip(&self.masked)
            .zip(&self.targets)
            .map(|((f, m), t)| Example {
                full: f,
                masked: m,
                target: t,
            })
            .collect()
    }
}

pub const SMALL_DIMS: Dims = Dims {
    vocab: 8,
    hidden: 4,
    context: 3,
    evidence: 4,
};

/// V=8, D_h=4, D_c=3, D_e=4; each target is the start token plus 3 tokens.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9a);
    let mut params = init_params::<f64>(SMALL_DIMS, seed).unwrap();
    // non-zero biases so their gradients are exercised too
    for b in params.b.iter_mut().chain(params.c.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    let index = BiasIndex::from_sets(
        8,
        vec![
            BiasSet {
                class: 7,
                members: vec![2, 3, 4],
            },
            BiasSet {
                class: 7,
                members: vec![5, 6],
            },
        ],
    )
    .unwrap();
    let n = rng.gen_range(1..=3);
    let mut full = Vec::new();
    let mut targets = Vec::new();
    for id in 0..n {
        let context = (0..3)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let evidence = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut target = vec![START_ID];
        for _ in 0..3 {
            target.push(rng.gen_range(1..8));
        }
        if !target.iter().any(|&t| index.is_bias_prone(t)) {
            target[2] = rng.gen_range(2..7);
        }
        full.push(Scene {
            id,
            context,
            evidence,
            masked: false,
            caption: vec![],
            true_subclass: String::new(),
        });
        targets.push(target);
    }
    let masked = full.iter().map(|s| mask_scene(s).unwrap()).collect();
    let hp = LossHyperParams {
        alpha: rng.gen_range(0.0..2.0),
        beta: rng.gen_range(0.0..2.0),
        mu: rng.gen_range(0.0..2.0),
        epsilon: 1e-6,
        ce_scope: CeScope::NonBiasProne,
    };
    Instance {
        params,
        full,
        masked,
        targets,
        index,
        hp,
    }
}

pub fn loss_at(inst: &Instance, params: &ModelParams<f64>) -> f64 {
    evaluate_batch(params, &inst.batch(), &inst.hp, &inst.index)
        .unwrap()
        .total
}

/// Central differences for every parameter entry, in `ARRAY_NAMES` order.
pub fn finite_difference(inst: &Instance, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..ARRAY_NAMES.len() {
        let len = inst.params.arrays()[k].len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let mut plus = inst.params.clone();
            plus.arrays_mut()[k][i] += h;
            let mut minus = inst.params.clone();
            minus.arrays_mut()[k][i] -= h;
            g.push((loss_at(inst, &plus) - loss_at(inst, &minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Relative error ≤ `rel`, or absolute ≤ `abs_small` when the analytic value is below 1e-6.
pub fn gradient_agrees(analytic: f64, numeric: f64, rel: f64, abs_small: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < 1e-6 {
        diff <= abs_small
    } else {
        diff / analytic.abs().max(numeric.abs()) <= rel
    }
}
