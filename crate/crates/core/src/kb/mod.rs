//! Vocabulary, co-occurrence embeddings and the knowledge base of bias-prone sets.
//!
//! The knowledge base is populated from caption text alone: a class token owns
//! every sub-class token whose PPMI co-occurrence row points in nearly the same
//! direction as its own, i.e. tokens used in the same syntactic frames.

mod embedding;
mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{build_cooccurrence_embeddings, cosine_similarity, EmbeddingTable};
pub use vocab::{
    build_vocabulary, Role, TokenId, Vocabulary, END_ID, END_TOKEN, START_ID, START_TOKEN,
};

pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus contains an empty token")]
    EmptyToken,
    #[error("role hint given for token '{0}', which does not occur in the corpus")]
    HintForAbsentToken(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("malformed vocabulary: {0}")]
    MalformedVocabulary(String),
    #[error("co-occurrence window must be at least 1, got {0}")]
    InvalidWindow(usize),
    #[error("similarity threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vocabulary has no class-tagged tokens")]
    NoClassTokens,
    #[error("vocabulary needs at least 2 sub-class tokens, found {0}")]
    TooFewSubclasses(usize),
    #[error("knowledge base is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the knowledge base rules came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FromData,
    External,
}

/// A class token and its ordered bias-prone set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub class: String,
    pub members: Vec<String>,
}

/// Mapping class → B_word, serialized with classes in ascending token-id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub provenance: Provenance,
    pub threshold: f64,
    #[serde(with = "ordered_classes")]
    pub classes: Vec<ClassEntry>,
}

impl KnowledgeBase {
    pub fn members(&self, class: &str) -> Option<&[String]> {
        self.classes
            .iter()
            .find(|e| e.class == class)
            .map(|e| e.members.as_slice())
    }

    /// Class owning a sub-class token.
    pub fn class_of(&self, subclass: &str) -> Option<&str> {
        self.classes
            .iter()
            .find(|e| e.members.iter().any(|m| m == subclass))
            .map(|e| e.class.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Resolves tokens to ids, producing the lookup used by the losses.
    pub fn index(&self, vocab: &Vocabulary) -> Result<BiasIndex, KbError> {
        let violations = validate_kb(self, vocab);
        if let Some(v) = violations.first() {
            return Err(KbError::Invalid(v.to_string()));
        }
        let mut membership = vec![None; vocab.len()];
        let mut sets = Vec::with_capacity(self.classes.len());
        for (set_idx, entry) in self.classes.iter().enumerate() {
            let class = vocab
                .id(&entry.class)
                .ok_or_else(|| KbError::UnknownToken(entry.class.clone()))?;
            let members = vocab.encode(&entry.members)?;
            for (position, &m) in members.iter().enumerate() {
                membership[m] = Some(Membership {
                    set: set_idx,
                    position,
                });
            }
            sets.push(BiasSet { class, members });
        }
        Ok(BiasIndex { sets, membership })
    }
}

mod ordered_classes {
    use std::fmt;

    use serde::de::{MapAccess, Visitor};
    use serde::ser::SerializeMap;
    use serde::{Deserializer, Serializer};

    use super::ClassEntry;

    pub fn serialize<S: Serializer>(classes: &[ClassEntry], s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(classes.len()))?;
        for e in classes {
            map.serialize_entry(&e.class, &e.members)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ClassEntry>, D::Error> {
        struct Ordered;
        impl<'de> Visitor<'de> for Ordered {
            type Value = Vec<ClassEntry>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from class token to sub-class tokens")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((class, members)) = map.next_entry::<String, Vec<String>>()? {
                    out.push(ClassEntry { class, members });
                }
                Ok(out)
            }
        }
        d.deserialize_map(Ordered)
    }
}

/// Position of a token inside the bias-prone sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Membership {
    pub set: usize,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiasSet {
    pub class: TokenId,
    pub members: Vec<TokenId>,
}

impl BiasSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Id-level view of a validated knowledge base.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BiasIndex {
    sets: Vec<BiasSet>,
    membership: Vec<Option<Membership>>,
}

impl BiasIndex {
    /// Builds an index directly from id sets over a vocabulary of `vocab_len` ids.
    pub fn from_sets(vocab_len: usize, sets: Vec<BiasSet>) -> Result<Self, KbError> {
        let mut membership = vec![None; vocab_len];
        for (set_idx, s) in sets.iter().enumerate() {
            if s.members.len() < 2 {
                return Err(KbError::Invalid(format!(
                    "set {set_idx} has fewer than 2 members"
                )));
            }
            for (position, &m) in s.members.iter().enumerate() {
                let slot = membership
                    .get_mut(m)
                    .ok_or_else(|| KbError::UnknownToken(format!("id {m}")))?;
                if slot.is_some() || m == s.class {
                    return Err(KbError::Invalid(format!(
                        "id {m} is not exclusive to set {set_idx}"
                    )));
                }
                *slot = Some(Membership {
                    set: set_idx,
                    position,
                });
            }
        }
        Ok(BiasIndex { sets, membership })
    }

    pub fn sets(&self) -> &[BiasSet] {
        &self.sets
    }

    pub fn set(&self, idx: usize) -> &BiasSet {
        &self.sets[idx]
    }

    /// `Some` iff `token` is bias-prone.
    pub fn membership(&self, token: TokenId) -> Option<Membership> {
        self.membership.get(token).copied().flatten()
    }

    pub fn is_bias_prone(&self, token: TokenId) -> bool {
        self.membership(token).is_some()
    }

    pub fn set_of_class(&self, class: TokenId) -> Option<usize> {
        self.sets.iter().position(|s| s.class == class)
    }

    /// First bias-prone position in a token sequence.
    pub fn first_bias_prone(&self, seq: &[TokenId]) -> Option<(usize, Membership)> {
        seq.iter()
            .enumerate()
            .find_map(|(t, &tok)| self.membership(tok).map(|m| (t, m)))
    }
}

/// A sub-class that passed the threshold for more than one class.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipConflict {
    pub subclass: String,
    /// Competing classes with their similarities, best first.
    pub candidates: Vec<(String, f64)>,
    pub assigned: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KbExtraction {
    pub kb: KnowledgeBase,
    pub conflicts: Vec<MembershipConflict>,
    /// Classes dropped because fewer than two sub-classes passed the threshold.
    pub dropped: Vec<String>,
}

/// Groups sub-class tokens under the class whose embedding row they resemble.
pub fn extract_bias_prone_sets(
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<KbExtraction, KbError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(KbError::InvalidThreshold(threshold));
    }
    if emb.dim() != vocab.len() {
        return Err(KbError::DimensionMismatch {
            left: emb.dim(),
            right: vocab.len(),
        });
    }
    let classes = vocab.ids_with_role(Role::Class);
    let subs = vocab.ids_with_role(Role::Subclass);
    if classes.is_empty() {
        return Err(KbError::NoClassTokens);
    }
    if subs.len() < 2 {
        return Err(KbError::TooFewSubclasses(subs.len()));
    }

    let mut assigned: Vec<Vec<(TokenId, f64)>> = vec![Vec::new(); classes.len()];
    let mut conflicts = Vec::new();
    for &s in &subs {
        let mut passing = Vec::new();
        for (ci, &c) in classes.iter().enumerate() {
            let sim = cosine_similarity(emb.row(c), emb.row(s))?;
            if sim >= threshold {
                passing.push((ci, sim));
            }
        }
        // best similarity first, ties to the lower class id (classes are ascending)
        passing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let Some(&(winner, sim)) = passing.first() else {
            continue;
        };
        if passing.len() > 1 {
            let conflict = MembershipConflict {
                subclass: vocab.token(s).to_string(),
                candidates: passing
                    .iter()
                    .map(|&(ci, sim)| (vocab.token(classes[ci]).to_string(), sim))
                    .collect(),
                assigned: vocab.token(classes[winner]).to_string(),
            };
            log::warn!(
                "sub-class '{}' passes the threshold for {} classes; assigned to '{}'",
                conflict.subclass,
                passing.len(),
                conflict.assigned
            );
            conflicts.push(conflict);
        }
        assigned[winner].push((s, sim));
    }

    let mut entries = Vec::new();
    let mut dropped = Vec::new();
    for (ci, mut members) in assigned.into_iter().enumerate() {
        let class = vocab.token(classes[ci]).to_string();
        if members.len() < 2 {
            log::warn!(
                "class '{class}' has {} sub-classes above threshold {threshold}; dropped",
                members.len()
            );
            dropped.push(class);
            continue;
        }
        members.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.push(ClassEntry {
            class,
            members: members
                .into_iter()
                .map(|(id, _)| vocab.token(id).to_string())
                .collect(),
        });
    }
    if entries.is_empty() {
        log::warn!("knowledge base extraction produced no classes");
    }
    Ok(KbExtraction {
        kb: KnowledgeBase {
            provenance: Provenance::FromData,
            threshold,
            classes: entries,
        },
        conflicts,
        dropped,
    })
}

/// A broken knowledge base invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KbViolation {
    ThresholdOutOfRange(String),
    SetTooSmall {
        class: String,
        len: usize,
    },
    DuplicateInSet {
        class: String,
        token: String,
    },
    SharedMember {
        token: String,
        first: String,
        second: String,
    },
    ClassInsideSet {
        class: String,
        owner: String,
    },
    DuplicateClass(String),
    AbsentFromVocabulary(String),
    RoleMismatch {
        token: String,
        expected: Role,
        found: Role,
    },
}

impl fmt::Display for KbViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KbViolation::ThresholdOutOfRange(t) => write!(f, "threshold {t} outside (0, 1]"),
            KbViolation::SetTooSmall { class, len } => {
                write!(f, "B_word of '{class}' has {len} members, needs at least 2")
            }
            KbViolation::DuplicateInSet { class, token } => {
                write!(f, "duplicate in B_word of '{class}': '{token}'")
            }
            KbViolation::SharedMember {
                token,
                first,
                second,
            } => write!(f, "'{token}' belongs to both '{first}' and '{second}'"),
            KbViolation::ClassInsideSet { class, owner } => {
                write!(
                    f,
                    "class token '{class}' appears inside B_word of '{owner}'"
                )
            }
            KbViolation::DuplicateClass(c) => write!(f, "class '{c}' listed twice"),
            KbViolation::AbsentFromVocabulary(t) => write!(f, "token '{t}' absent from vocabulary"),
            KbViolation::RoleMismatch {
                token,
                expected,
                found,
            } => write!(
                f,
                "token '{token}' should be tagged {expected:?}, found {found:?}"
            ),
        }
    }
}

/// Lists every invariant violation; an empty list means the knowledge base is valid.
pub fn validate_kb(kb: &KnowledgeBase, vocab: &Vocabulary) -> Vec<KbViolation> {
    let mut out = Vec::new();
    if !(kb.threshold > 0.0 && kb.threshold <= 1.0) {
        out.push(KbViolation::ThresholdOutOfRange(kb.threshold.to_string()));
    }
    let class_names: HashSet<&str> = kb.classes.iter().map(|e| e.class.as_str()).collect();
    let mut seen_classes = HashSet::new();
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let check_token =
        |token: &str, expected: Role, out: &mut Vec<KbViolation>| match vocab.role_of(token) {
            None => out.push(KbViolation::AbsentFromVocabulary(token.to_string())),
            Some(found) if found != expected => out.push(KbViolation::RoleMismatch {
                token: token.to_string(),
                expected,
                found,
            }),
            Some(_) => {}
        };

    for entry in &kb.classes {
        if !seen_classes.insert(entry.class.as_str()) {
            out.push(KbViolation::DuplicateClass(entry.class.clone()));
        }
        check_token(&entry.class, Role::Class, &mut out);
        if entry.members.len() < 2 {
            out.push(KbViolation::SetTooSmall {
                class: entry.class.clone(),
                len: entry.members.len(),
            });
        }
        let mut local = HashSet::new();
        for m in &entry.members {
            if !local.insert(m.as_str()) {
                out.push(KbViolation::DuplicateInSet {
                    class: entry.class.clone(),
                    token: m.clone(),
                });
                continue;
            }
            if class_names.contains(m.as_str()) {
                out.push(KbViolation::ClassInsideSet {
                    class: m.clone(),
                    owner: entry.class.clone(),
                });
                continue;
            }
            check_token(m, Role::Subclass, &mut out);
            if let Some(prev) = owner.insert(m.as_str(), entry.class.as_str()) {
                out.push(KbViolation::SharedMember {
                    token: m.clone(),
                    first: prev.to_string(),
                    second: entry.class.clone(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let corpus = vec![
            vec!["a", "person", "sits"],
            vec!["a", "man", "sits"],
            vec!["a", "boy", "sits"],
            vec!["a", "senior", "sits"],
        ];
        let hints = BTreeMap::from([
            ("person".to_string(), Role::Class),
            ("man".to_string(), Role::Subclass),
            ("boy".to_string(), Role::Subclass),
            ("senior".to_string(), Role::Subclass),
        ]);
        build_vocabulary(&corpus, &hints).unwrap()
    }

    fn kb(classes: &[(&str, &[&str])]) -> KnowledgeBase {
        KnowledgeBase {
            provenance: Provenance::External,
            threshold: 0.7,
            classes: classes
                .iter()
                .map(|(c, m)| ClassEntry {
                    class: c.to_string(),
                    members: m.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn duplicate_member_reported() {
        let report = validate_kb(&kb(&[("person", &["man", "man"])]), &vocab());
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("duplicate in B_word"));
    }

    #[test]
    fn absent_token_named() {
        let report = validate_kb(&kb(&[("person", &["man", "teenager"])]), &vocab());
        assert_eq!(
            report,
            vec![KbViolation::AbsentFromVocabulary("teenager".into())]
        );
    }

    #[test]
    fn valid_kb_has_empty_report() {
        assert!(validate_kb(&kb(&[("person", &["man", "boy", "senior"])]), &vocab()).is_empty());
    }

    #[test]
    fn structural_violations() {
        let v = vocab();
        let report = validate_kb(&kb(&[("person", &["man"])]), &v);
        assert!(matches!(report[0], KbViolation::SetTooSmall { len: 1, .. }));
        let report = validate_kb(&kb(&[("person", &["man", "person"])]), &v);
        assert!(report
            .iter()
            .any(|r| matches!(r, KbViolation::ClassInsideSet { .. })));
        let report = validate_kb(
            &kb(&[("person", &["man", "boy"]), ("boy", &["senior", "man"])]),
            &v,
        );
        assert!(report
            .iter()
            .any(|r| matches!(r, KbViolation::SharedMember { .. })));
    }

    #[test]
    fn json_keeps_class_order() {
        let k = kb(&[("zebra", &["b", "c"]), ("ant", &["d", "e"])]);
        let json = k.to_json();
        assert!(json.find("zebra").unwrap() < json.find("ant").unwrap());
        let back = KnowledgeBase::from_json(&json).unwrap();
        assert_eq!(back, k);
        assert!(json.contains("\"provenance\": \"external\""));
    }

    #[test]
    fn index_resolves_membership() {
        let v = vocab();
        let idx = kb(&[("person", &["senior", "man"])]).index(&v).unwrap();
        let senior = v.id("senior").unwrap();
        assert_eq!(
            idx.membership(senior),
            Some(Membership {
                set: 0,
                position: 0
            })
        );
        assert!(!idx.is_bias_prone(v.id("person").unwrap()));
        assert_eq!(idx.first_bias_prone(&[0, 2, senior]).map(|p| p.0), Some(2));
    }

    #[test]
    fn extraction_requires_class_tokens() {
        let corpus = vec![vec!["a", "b", "c"]];
        let hints = BTreeMap::from([
            ("b".to_string(), Role::Subclass),
            ("c".to_string(), Role::Subclass),
        ]);
        let v = build_vocabulary(&corpus, &hints).unwrap();
        let emb = build_cooccurrence_embeddings(&corpus, &v, 2).unwrap();
        assert!(matches!(
            extract_bias_prone_sets(&emb, &v, 0.7),
            Err(KbError::NoClassTokens)
        ));
        assert!(matches!(
            extract_bias_prone_sets(&emb, &v, 0.0),
            Err(KbError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn shared_frames_extract_person_set() {
        let v = vocab();
        let corpus = vec![
            vec!["a", "person", "sits"],
            vec!["a", "man", "sits"],
            vec!["a", "boy", "sits"],
            vec!["a", "senior", "sits"],
        ];
        let emb = build_cooccurrence_embeddings(&corpus, &v, 2).unwrap();
        let ex = extract_bias_prone_sets(&emb, &v, 0.9).unwrap();
        let members = ex.kb.members("person").unwrap();
        // equal similarities: ascending token id
        assert_eq!(members, &["man", "boy", "senior"]);
        assert_eq!(ex.kb.provenance, Provenance::FromData);
    }

    #[test]
    fn disjoint_contexts_yield_empty_kb() {
        let corpus = vec![
            vec!["the", "person", "waits"],
            vec!["x", "man", "y"],
            vec!["p", "boy", "q"],
            vec!["a", "senior", "sits"],
        ];
        let hints = BTreeMap::from([
            ("person".to_string(), Role::Class),
            ("man".to_string(), Role::Subclass),
            ("boy".to_string(), Role::Subclass),
            ("senior".to_string(), Role::Subclass),
        ]);
        let v = build_vocabulary(&corpus, &hints).unwrap();
        let emb = build_cooccurrence_embeddings(&corpus, &v, 2).unwrap();
        let ex = extract_bias_prone_sets(&emb, &v, 1.0).unwrap();
        assert!(ex.kb.classes.is_empty());
        assert_eq!(ex.dropped, vec!["person".to_string()]);
    }
}
