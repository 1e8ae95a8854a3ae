//! Models that ignore the visual evidence must be caught relying on context.

use nesycap::datagen::{generate_dataset, Dataset, GenConfig, GeneratedData};
use nesycap::kb::{ClassEntry, KnowledgeBase, Provenance};
use nesycap::losses::{confusion_fn, CeScope, LossHyperParams};
use nesycap::model::{forward_sequence, Dims, Matrix, ModelParams};
use nesycap::reasoner::{
    bias_audit, classify_prediction, evidence_check, explain_dataset, StateKind, DEFAULT_THETA,
};
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

fn fully_biased(n_train: usize, n_test: usize) -> (GeneratedData, KnowledgeBase) {
    let cfg = GenConfig {
        n_train,
        n_test,
        bias_rho: 1.0,
        seed: 21,
        ..GenConfig::default()
    };
    (generate_dataset(&cfg).unwrap(), planted(&cfg))
}

/// Every scene keeps its caption but shows the stereotype flag of a sibling sub-class only.
fn swap_contexts(ds: &Dataset) -> Dataset {
    let cfg = ds.config().clone();
    let mut out = ds.clone();
    for s in &mut out.scenes {
        let class = cfg
            .classes
            .iter()
            .find(|c| c.subclasses.iter().any(|x| x.token == s.true_subclass))
            .unwrap();
        let k = class
            .subclasses
            .iter()
            .position(|x| x.token == s.true_subclass)
            .unwrap();
        let sibling = &class.subclasses[(k + 1) % class.subclasses.len()].token;
        s.context = vec![0.0; cfg.context_dim];
        s.context[cfg.stereotype_flag(sibling).unwrap()] = 1.0;
    }
    out
}

/// Trains on data whose evidence is blanked, then pins `W_ev` to zero.
fn evidence_blind_model(data: &GeneratedData, kb: &KnowledgeBase) -> Params {
    let mut blank = data.train.clone();
    for s in &mut blank.scenes {
        s.evidence.iter_mut().for_each(|x| *x = 0.0);
    }
    let cfg = TrainConfig {
        hp: LossHyperParams {
            ce_scope: CeScope::AllTokens,
            ..LossHyperParams::baseline()
        },
        epochs: 20,
        seed: 2,
        ..TrainConfig::default()
    };
    let (mut p, _) = train::<f64>(&cfg, &blank, kb).unwrap();
    p.w_ev = Matrix::zeros(p.dims.hidden, p.dims.evidence);
    p
}

#[test]
fn evidence_blind_model_overuses_context() {
    let (data, kb) = fully_biased(600, 200);
    let p = evidence_blind_model(&data, &kb);
    let anti = swap_contexts(&data.test);

    let m = evaluate(&p, &anti, &kb).unwrap();
    assert_eq!(m.n_anti_stereo, anti.len());
    let rate = m.context_overuse_rate.unwrap();
    assert!(rate >= 0.9, "context overuse rate {rate}");

    let report = bias_audit(&p, &anti, &kb, DEFAULT_THETA).unwrap();
    for c in &report.classes {
        assert!(c.overuse_rate >= 0.9, "{}: {}", c.class, c.overuse_rate);
        assert!(!c.stereotype_pairs.is_empty());
    }
}

#[test]
fn evidence_blind_confusion_matches_unmasked_pass() {
    let (data, kb) = fully_biased(600, 60);
    let p = evidence_blind_model(&data, &kb);
    let index = kb.index(&data.test.vocab).unwrap();
    for s in &data.test.scenes {
        let target = data.test.vocab.encode_target(&s.caption).unwrap();
        let (pos, m) = index.first_bias_prone(&target).unwrap();
        let full = forward_sequence(&p, s, &target).unwrap();
        let want = confusion_fn(&full[pos], &index.set(m.set).members).unwrap();
        let got = evidence_check(&p, s, &data.test, &index, None).unwrap();
        assert_eq!(got.confusion_score, want);
        assert_eq!(got.masked_subclass_prob, full[pos].prob(target[pos]));
    }
}

/// Hidden unit i latches context flag i and carries it; the output reads the flag's sub-class.
fn context_reader(ds: &Dataset) -> Params {
    let cfg = ds.config();
    let dims = Dims {
        vocab: ds.vocab.len(),
        hidden: cfg.context_dim,
        context: cfg.context_dim,
        evidence: cfg.evidence_dim,
    };
    let mut p = ModelParams::zeros(dims);
    for i in 0..cfg.context_dim {
        p.w_ctx.set(i, i, 3.0);
        p.w_h.set(i, i, 2.0);
    }
    for class in &cfg.classes {
        for sub in &class.subclasses {
            let flag = cfg.stereotype_flag(&sub.token).unwrap();
            p.v_out.set(ds.vocab.id(&sub.token).unwrap(), flag, 5.0);
        }
    }
    p
}

#[test]
fn constructed_context_reader_is_flagged() {
    let (data, kb) = fully_biased(50, 80);
    let p = context_reader(&data.test);
    let index = kb.index(&data.test.vocab).unwrap();
    for s in &data.test.scenes {
        let check = evidence_check(&p, s, &data.test, &index, None).unwrap();
        let j = kb
            .members(kb.class_of(&s.true_subclass).unwrap())
            .unwrap()
            .len() as f64;
        assert!(
            check.masked_subclass_prob > 1.0 / j + DEFAULT_THETA,
            "{check:?}"
        );
    }
    let ex = explain_dataset(&p, &swap_contexts(&data.test), &kb, DEFAULT_THETA).unwrap();
    assert!(ex
        .iter()
        .all(|e| matches!(e.state.kind, StateKind::ContextOveruse { .. })));
}

#[test]
fn audit_ignores_scene_order() {
    let (data, kb) = fully_biased(50, 120);
    let p = context_reader(&data.test);
    let mut reversed = data.test.clone();
    reversed.scenes.reverse();
    let a = bias_audit(&p, &data.test, &kb, DEFAULT_THETA).unwrap();
    let b = bias_audit(&p, &reversed, &kb, DEFAULT_THETA).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn unbounded_theta_keeps_the_raw_states() {
    let (data, kb) = fully_biased(50, 80);
    let p = context_reader(&data.test);
    let anti = swap_contexts(&data.test);
    for e in explain_dataset(&p, &anti, &kb, f64::MAX).unwrap() {
        let words: Vec<&str> = e.caption.split_whitespace().collect();
        assert_eq!(e.state.kind, classify_prediction(&words, &kb).kind);
    }
}
