use nesycap::datagen::{generate_dataset, GenConfig, GeneratedData};
use nesycap::kb::{ClassEntry, KnowledgeBase, Provenance};
use nesycap::losses::{CeScope, LossHyperParams};
use nesycap::train::{evaluate, train, TrainConfig};
use nesycap::Params;

fn planted(cfg: &GenConfig) -> KnowledgeBase {
    KnowledgeBase {
        provenance: Provenance::External,
        threshold: 0.7,
        classes: cfg
            .classes
            .iter()
            .map(|c| ClassEntry {
                class: c.class.clone(),
                members: c.subclasses.iter().map(|s| s.token.clone()).collect(),
            })
            .collect(),
    }
}

fn data(n_train: usize, seed: u64) -> (GeneratedData, KnowledgeBase) {
    let cfg = GenConfig {
        n_train,
        n_test: 20,
        seed,
        ..GenConfig::default()
    };
    (generate_dataset(&cfg).unwrap(), planted(&cfg))
}

fn config(hp: LossHyperParams, epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        hp,
        epochs,
        batch_size,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_beta_mu_history_is_pure_cross_entropy() {
    let (d, kb) = data(60, 1);
    let explicit = LossHyperParams {
        alpha: 1.0,
        beta: 0.0,
        mu: 0.0,
        ..LossHyperParams::default()
    };
    let (pa, ha) = train::<f64>(&config(explicit, 3, 16), &d.train, &kb).unwrap();
    let (pb, hb) =
        train::<f64>(&config(LossHyperParams::baseline(), 3, 16), &d.train, &kb).unwrap();
    assert_eq!(pa, pb);
    for (a, b) in ha.iter().zip(&hb) {
        assert_eq!(a.total, a.ce);
        assert_eq!(a.total, b.total);
    }
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let (d, kb) = data(80, 2);
    let cfg = config(LossHyperParams::default(), 2, 16);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let (p1, h1) = one.install(|| train::<f64>(&cfg, &d.train, &kb)).unwrap();
    let (p2, h2) = four.install(|| train::<f64>(&cfg, &d.train, &kb)).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(h1, h2);
    let other: Params = train(&TrainConfig { seed: 10, ..cfg }, &d.train, &kb)
        .unwrap()
        .0;
    assert_ne!(other, p1);
}

#[test]
fn overfits_a_handful_of_scenes() {
    let (d, kb) = data(10, 3);
    // a conventional captioner: the constrained loss never scores sub-class tokens with CE
    let hp = LossHyperParams {
        ce_scope: CeScope::AllTokens,
        ..LossHyperParams::baseline()
    };
    let (p, _) = train::<f64>(&config(hp, 400, 10), &d.train, &kb).unwrap();
    let m = evaluate(&p, &d.train, &kb).unwrap();
    assert_eq!(m.caption_token_accuracy, 1.0, "{m:?}");
    assert_eq!(m.subclass_accuracy, 1.0, "{m:?}");
}
