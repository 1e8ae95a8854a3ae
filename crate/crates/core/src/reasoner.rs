//! Symbolic layer over the captioner: explanation states, rendered rationales and a bias audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{mask_scene_with, DataError, Dataset, Scene};
use crate::kb::{BiasIndex, KbError, KnowledgeBase, TokenId, Vocabulary};
use crate::losses::{confusion_fn, LossError};
use crate::model::{caption_ids, forward_sequence, greedy_decode, ModelError, ModelParams};
use crate::scalar::Scalar;

pub const DEFAULT_THETA: f64 = 0.05;
/// Number of scenes listed per class in [`BiasReport`].
pub const WORST_SCENES: usize = 5;

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("theta must be positive and finite, got {0}")]
    InvalidTheta(f64),
    #[error("scene {0} has no bias-prone token in its caption")]
    NoBiasPronePosition(u64),
    #[error("sub-class '{0}' is not in the knowledge base")]
    UnknownSubclass(String),
    #[error("class '{0}' is not in the knowledge base")]
    UnknownClass(String),
    #[error("scene {0} not found")]
    UnknownScene(u64),
    #[error("scene {0} is masked; expected an unmasked scene")]
    MaskedInput(u64),
    #[error("knowledge base does not fit the vocabulary: {0}")]
    InvalidKb(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKind {
    Confident {
        class: String,
        subclass: String,
    },
    Confused {
        class: String,
    },
    NoClaim,
    ContextOveruse {
        class: String,
        predicted_subclass: String,
        masked_prob: f64,
    },
}

impl StateKind {
    pub fn name(&self) -> &'static str {
        match self {
            StateKind::Confident { .. } => "confident",
            StateKind::Confused { .. } => "confused",
            StateKind::NoClaim => "no_claim",
            StateKind::ContextOveruse { .. } => "context_overuse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationState {
    #[serde(flatten)]
    pub kind: StateKind,
    pub confusion_score: f64,
    pub threshold_used: f64,
}

/// Two sub-class tokens of different classes in one caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AmbiguousCaption {
    pub first: String,
    pub other: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub kind: StateKind,
    pub ambiguity: Option<AmbiguousCaption>,
}

/// Raw state of a caption: the first sub-class or class token decides.
pub fn classify_prediction<S: AsRef<str>>(caption: &[S], kb: &KnowledgeBase) -> Classification {
    let mut kind = None;
    let mut first_sub: Option<(&str, &str)> = None;
    let mut ambiguity = None;
    for tok in caption.iter().map(AsRef::as_ref) {
        if let Some(class) = kb.class_of(tok) {
            match first_sub {
                None => first_sub = Some((tok, class)),
                Some((first, first_class)) if first_class != class && ambiguity.is_none() => {
                    ambiguity = Some(AmbiguousCaption {
                        first: first.to_string(),
                        other: tok.to_string(),
                    });
                }
                Some(_) => {}
            }
            kind.get_or_insert_with(|| StateKind::Confident {
                class: class.to_string(),
                subclass: tok.to_string(),
            });
        } else if kb.members(tok).is_some() {
            kind.get_or_insert_with(|| StateKind::Confused {
                class: tok.to_string(),
            });
        }
    }
    if let Some(a) = &ambiguity {
        log::warn!(
            "ambiguous caption: '{}' and '{}' belong to different classes",
            a.first,
            a.other
        );
    }
    Classification {
        kind: kind.unwrap_or(StateKind::NoClaim),
        ambiguity,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvidenceCheck {
    /// Confusion at the first bias-prone target position of the masked scene.
    pub confusion_score: f64,
    /// Masked probability of the probed sub-class at that position.
    pub masked_subclass_prob: f64,
    /// Sub-class whose probability was probed.
    pub probed: TokenId,
}

/// Replays the ground-truth caption on the masked scene and measures how much
/// the prediction survives without evidence.
///
/// `chosen` is the sub-class the unmasked decode emitted; without one, the
/// ground-truth sub-class is probed.
pub fn evidence_check<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    ds: &Dataset,
    index: &BiasIndex,
    chosen: Option<TokenId>,
) -> Result<EvidenceCheck, ReasonerError> {
    if scene.masked {
        return Err(ReasonerError::MaskedInput(scene.id));
    }
    let target = ds.vocab.encode_target(&scene.caption)?;
    let (pos, m) = index
        .first_bias_prone(&target)
        .ok_or(ReasonerError::NoBiasPronePosition(scene.id))?;
    let masked = mask_scene_with(scene, ds.config().mask_fill)?;
    let dists = forward_sequence(params, &masked, &target)?;
    let dist = &dists[pos];
    let probed = chosen.unwrap_or(target[pos]);
    Ok(EvidenceCheck {
        confusion_score: confusion_fn(dist, &index.set(m.set).members)?.as_f64(),
        masked_subclass_prob: dist.prob(probed).as_f64(),
        probed,
    })
}

/// Escalates a confident claim to context overuse when the claimed sub-class
/// keeps more than `1/J + theta` of the mass once evidence is masked.
pub fn finalize_state(
    raw: StateKind,
    confusion_score: f64,
    masked_subclass_prob: f64,
    theta: f64,
    kb: &KnowledgeBase,
) -> Result<ExplanationState, ReasonerError> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(ReasonerError::InvalidTheta(theta));
    }
    let kind = match raw {
        StateKind::Confident { class, subclass } => {
            let j = kb
                .members(&class)
                .ok_or_else(|| ReasonerError::UnknownClass(class.clone()))?
                .len();
            if masked_subclass_prob > 1.0 / j as f64 + theta {
                StateKind::ContextOveruse {
                    class,
                    predicted_subclass: subclass,
                    masked_prob: masked_subclass_prob,
                }
            } else {
                StateKind::Confident { class, subclass }
            }
        }
        other => other,
    };
    Ok(ExplanationState {
        kind,
        confusion_score,
        threshold_used: theta,
    })
}

fn member_list(kb: &KnowledgeBase, class: &str) -> String {
    kb.members(class).map(|m| m.join(", ")).unwrap_or_default()
}

pub fn render_explanation(state: &ExplanationState, kb: &KnowledgeBase) -> String {
    match &state.kind {
        StateKind::Confident { class, subclass } => format!(
            "Predicted '{subclass}' (sub-class of '{class}') because visual evidence supports it: \
             with evidence masked, the model's distribution over {{{}}} is near-uniform (confusion {:.4}).",
            member_list(kb, class),
            state.confusion_score
        ),
        StateKind::Confused { class } => format!(
            "Predicted the generic class '{class}' because evidence was insufficient to choose among {{{}}}.",
            member_list(kb, class)
        ),
        StateKind::ContextOveruse {
            predicted_subclass,
            masked_prob,
            ..
        } => format!(
            "Warning: predicted '{predicted_subclass}' even without evidence (masked probability {masked_prob:.4}); \
             the model appears to rely on context."
        ),
        StateKind::NoClaim => "No class or sub-class asserted.".to_string(),
    }
}

/// Per-scene reasoner output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: u64,
    pub caption: String,
    pub state: ExplanationState,
    pub confusion_score: f64,
    pub masked_subclass_prob: f64,
    pub text: String,
}

fn to_tokens(vocab: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
    vocab.decode(ids)
}

/// Decodes a scene, classifies the caption, checks it against the masked scene and renders the result.
pub fn explain_scene<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    ds: &Dataset,
    kb: &KnowledgeBase,
    index: &BiasIndex,
    theta: f64,
) -> Result<Explanation, ReasonerError> {
    let decoded = greedy_decode(params, scene, ds.config().t_max + 1)?;
    let caption = to_tokens(&ds.vocab, caption_ids(&decoded));
    let raw = classify_prediction(&caption, kb).kind;
    let chosen = match &raw {
        StateKind::Confident { subclass, .. } => ds.vocab.id(subclass),
        _ => None,
    };
    let check = evidence_check(params, scene, ds, index, chosen)?;
    let state = finalize_state(
        raw,
        check.confusion_score,
        check.masked_subclass_prob,
        theta,
        kb,
    )?;
    let text = render_explanation(&state, kb);
    Ok(Explanation {
        id: scene.id,
        caption: caption.join(" "),
        confusion_score: check.confusion_score,
        masked_subclass_prob: check.masked_subclass_prob,
        state,
        text,
    })
}

fn kb_index(kb: &KnowledgeBase, ds: &Dataset) -> Result<BiasIndex, ReasonerError> {
    kb.index(&ds.vocab)
        .map_err(|e| ReasonerError::InvalidKb(e.to_string()))
}

pub fn explain_by_id<T: Scalar>(
    params: &ModelParams<T>,
    ds: &Dataset,
    kb: &KnowledgeBase,
    id: u64,
    theta: f64,
) -> Result<Explanation, ReasonerError> {
    let scene = ds.scene(id).ok_or(ReasonerError::UnknownScene(id))?;
    explain_scene(params, scene, ds, kb, &kb_index(kb, ds)?, theta)
}

/// Explanations for every scene, ordered by scene id.
pub fn explain_dataset<T: Scalar>(
    params: &ModelParams<T>,
    ds: &Dataset,
    kb: &KnowledgeBase,
    theta: f64,
) -> Result<Vec<Explanation>, ReasonerError> {
    let index = kb_index(kb, ds)?;
    let mut out: Vec<Explanation> = ds
        .scenes
        .par_iter()
        .map(|s| explain_scene(params, s, ds, kb, &index, theta))
        .collect::<Result<_, _>>()?;
    out.sort_by_key(|e| e.id);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereotypePair {
    /// Context flag token.
    pub flag: String,
    pub subclass: String,
    /// Context-overuse scenes with this flag raised that predicted `subclass`.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub n_scenes: usize,
    pub overuse_rate: f64,
    pub mean_masked_confusion: f64,
    pub worst_scene_ids: Vec<u64>,
    pub stereotype_pairs: Vec<StereotypePair>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub confident: usize,
    pub confused: usize,
    pub context_overuse: usize,
    pub no_claim: usize,
}

impl StateCounts {
    pub fn add(&mut self, kind: &StateKind) {
        match kind {
            StateKind::Confident { .. } => self.confident += 1,
            StateKind::Confused { .. } => self.confused += 1,
            StateKind::ContextOveruse { .. } => self.context_overuse += 1,
            StateKind::NoClaim => self.no_claim += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.confident + self.confused + self.context_overuse + self.no_claim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub theta: f64,
    pub n_scenes: usize,
    pub states: StateCounts,
    pub classes: Vec<ClassReport>,
}

impl BiasReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text digest of the report.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let st = &self.states;
        let _ = writeln!(
            s,
            "{} scenes (theta {}): {} confident, {} confused, {} context overuse, {} no claim",
            self.n_scenes, self.theta, st.confident, st.confused, st.context_overuse, st.no_claim
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{}: {} scenes, overuse rate {:.4}, mean masked confusion {:.4}, worst scenes {:?}",
                c.class, c.n_scenes, c.overuse_rate, c.mean_masked_confusion, c.worst_scene_ids
            );
            for p in &c.stereotype_pairs {
                let _ = writeln!(s, "  {} -> {} ({} scenes)", p.flag, p.subclass, p.count);
            }
        }
        s
    }
}

/// Aggregates per-scene explanations by the class of each scene's true sub-class.
pub fn bias_audit<T: Scalar>(
    params: &ModelParams<T>,
    ds: &Dataset,
    kb: &KnowledgeBase,
    theta: f64,
) -> Result<BiasReport, ReasonerError> {
    let explanations = explain_dataset(params, ds, kb, theta)?;
    build_report(&explanations, ds, kb, theta)
}

/// Builds the report from explanations; scenes are aggregated in id order.
pub fn build_report(
    explanations: &[Explanation],
    ds: &Dataset,
    kb: &KnowledgeBase,
    theta: f64,
) -> Result<BiasReport, ReasonerError> {
    let mut sorted: Vec<&Explanation> = explanations.iter().collect();
    sorted.sort_by_key(|e| e.id);
    let cfg = ds.config();
    let flags = cfg.context_flags();
    let mut states = StateCounts::default();
    let mut by_class: BTreeMap<&str, Vec<(&Explanation, &Scene)>> = BTreeMap::new();
    for e in sorted {
        states.add(&e.state.kind);
        let scene = ds.scene(e.id).ok_or(ReasonerError::UnknownScene(e.id))?;
        let class = kb
            .class_of(&scene.true_subclass)
            .ok_or_else(|| ReasonerError::UnknownSubclass(scene.true_subclass.clone()))?;
        by_class.entry(class).or_default().push((e, scene));
    }

    let mut classes = Vec::new();
    for entry in &kb.classes {
        let rows = by_class.remove(entry.class.as_str()).unwrap_or_default();
        let n = rows.len();
        let overuse: Vec<&(&Explanation, &Scene)> = rows
            .iter()
            .filter(|(e, _)| matches!(e.state.kind, StateKind::ContextOveruse { .. }))
            .collect();
        let mean_conf = if n == 0 {
            0.0
        } else {
            rows.iter().map(|(e, _)| e.confusion_score).sum::<f64>() / n as f64
        };

        let mut worst: Vec<(f64, u64)> = rows
            .iter()
            .map(|(e, _)| (e.masked_subclass_prob, e.id))
            .collect();
        worst.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let worst_scene_ids = worst.iter().take(WORST_SCENES).map(|&(_, id)| id).collect();

        let mut counts: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
        for (e, scene) in &overuse {
            let StateKind::ContextOveruse {
                predicted_subclass, ..
            } = &e.state.kind
            else {
                continue;
            };
            for (f, &v) in scene.context.iter().enumerate() {
                if v > 0.5 {
                    *counts
                        .entry(f)
                        .or_default()
                        .entry(predicted_subclass)
                        .or_default() += 1;
                }
            }
        }
        let stereotype_pairs = counts
            .into_iter()
            .filter_map(|(f, subs)| {
                // most frequent, ties to the lexicographically first
                let (sub, count) = subs.into_iter().fold(
                    None,
                    |best: Option<(&str, usize)>, (s, c)| match best {
                        Some((_, bc)) if bc >= c => best,
                        _ => Some((s, c)),
                    },
                )?;
                Some(StereotypePair {
                    flag: flags
                        .get(f)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("flag{f}")),
                    subclass: sub.to_string(),
                    count,
                })
            })
            .collect();

        classes.push(ClassReport {
            class: entry.class.clone(),
            n_scenes: n,
            overuse_rate: if n == 0 {
                0.0
            } else {
                overuse.len() as f64 / n as f64
            },
            mean_masked_confusion: mean_conf,
            worst_scene_ids,
            stereotype_pairs,
        });
    }
    Ok(BiasReport {
        theta,
        n_scenes: explanations.len(),
        states,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{ClassEntry, Provenance};

    fn kb() -> KnowledgeBase {
        KnowledgeBase {
            provenance: Provenance::External,
            threshold: 0.7,
            classes: vec![
                ClassEntry {
                    class: "person".into(),
                    members: vec![
                        "man".into(),
                        "teenager".into(),
                        "boy".into(),
                        "senior".into(),
                    ],
                },
                ClassEntry {
                    class: "animal".into(),
                    members: vec!["dog".into(), "cat".into()],
                },
            ],
        }
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn classify_examples() {
        let kb = kb();
        assert_eq!(
            classify_prediction(&words("a senior sits bench"), &kb).kind,
            StateKind::Confident {
                class: "person".into(),
                subclass: "senior".into()
            }
        );
        assert_eq!(
            classify_prediction(&words("a person sits bench"), &kb).kind,
            StateKind::Confused {
                class: "person".into()
            }
        );
        assert_eq!(
            classify_prediction(&words("a tree grows"), &kb).kind,
            StateKind::NoClaim
        );
    }

    #[test]
    fn first_token_decides_and_ambiguity_is_reported() {
        let kb = kb();
        let c = classify_prediction(&words("a person and a dog and a man"), &kb);
        assert_eq!(
            c.kind,
            StateKind::Confused {
                class: "person".into()
            }
        );
        assert_eq!(
            c.ambiguity,
            Some(AmbiguousCaption {
                first: "dog".into(),
                other: "man".into()
            })
        );
        let c = classify_prediction(&words("a man and a boy"), &kb);
        assert!(c.ambiguity.is_none());
    }

    #[test]
    fn finalize_examples() {
        let kb = kb();
        let senior = StateKind::Confident {
            class: "person".into(),
            subclass: "senior".into(),
        };
        let s = finalize_state(senior.clone(), 0.001, 0.26, 0.05, &kb).unwrap();
        assert_eq!(s.kind, senior);
        assert_eq!(s.threshold_used, 0.05);
        let s = finalize_state(senior, 0.4, 0.81, 0.05, &kb).unwrap();
        assert_eq!(
            s.kind,
            StateKind::ContextOveruse {
                class: "person".into(),
                predicted_subclass: "senior".into(),
                masked_prob: 0.81
            }
        );
        let s = finalize_state(StateKind::NoClaim, 9.0, 1.0, 0.05, &kb).unwrap();
        assert_eq!(s.kind, StateKind::NoClaim);
        assert!(matches!(
            finalize_state(StateKind::NoClaim, 0.0, 0.0, 0.0, &kb),
            Err(ReasonerError::InvalidTheta(_))
        ));
    }

    #[test]
    fn rendering() {
        let kb = kb();
        let state = ExplanationState {
            kind: StateKind::Confident {
                class: "person".into(),
                subclass: "senior".into(),
            },
            confusion_score: 0.01,
            threshold_used: 0.05,
        };
        let text = render_explanation(&state, &kb);
        for w in ["senior", "person", "man", "teenager", "boy"] {
            assert!(text.contains(w), "{text}");
        }
        assert_eq!(text, render_explanation(&state.clone(), &kb));

        let over = ExplanationState {
            kind: StateKind::ContextOveruse {
                class: "person".into(),
                predicted_subclass: "senior".into(),
                masked_prob: 0.81,
            },
            confusion_score: 0.3,
            threshold_used: 0.05,
        };
        assert!(render_explanation(&over, &kb).contains("0.81"));
        let none = ExplanationState {
            kind: StateKind::NoClaim,
            confusion_score: 0.0,
            threshold_used: 0.05,
        };
        assert_eq!(
            render_explanation(&none, &kb),
            "No class or sub-class asserted."
        );
    }

    #[test]
    fn state_json_shape() {
        let s = ExplanationState {
            kind: StateKind::Confused {
                class: "animal".into(),
            },
            confusion_score: 0.5,
            threshold_used: 0.05,
        };
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["kind"], "confused");
        assert_eq!(v["class"], "animal");
        let back: ExplanationState = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
