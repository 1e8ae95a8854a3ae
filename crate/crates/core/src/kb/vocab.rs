use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::KbError;

/// Dense token identifier, `0..V`.
pub type TokenId = usize;

pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";
pub const START_ID: TokenId = 0;
pub const END_ID: TokenId = 1;

/// Role a token plays with respect to the knowledge base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Class,
    Subclass,
    Context,
    Other,
}

/// Token inventory with role tags.
///
/// Ids `0` and `1` are always the reserved start and end markers; corpus tokens
/// follow in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    roles: Vec<Role>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    roles: Vec<Role>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = KbError;

    fn try_from(repr: VocabularyRepr) -> Result<Self, KbError> {
        Vocabulary::from_parts(repr.tokens, repr.roles)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            roles: v.roles,
        }
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its serialized parts, checking every invariant.
    pub fn from_parts(tokens: Vec<String>, roles: Vec<Role>) -> Result<Self, KbError> {
        if tokens.len() != roles.len() {
            return Err(KbError::MalformedVocabulary(format!(
                "{} tokens but {} roles",
                tokens.len(),
                roles.len()
            )));
        }
        if tokens.get(START_ID).map(String::as_str) != Some(START_TOKEN)
            || tokens.get(END_ID).map(String::as_str) != Some(END_TOKEN)
        {
            return Err(KbError::MalformedVocabulary(
                "ids 0 and 1 must be the start and end markers".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(KbError::EmptyToken);
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(KbError::MalformedVocabulary(format!(
                    "duplicate token '{tok}'"
                )));
            }
        }
        Ok(Vocabulary {
            tokens,
            roles,
            index,
        })
    }

    /// Number of ids, including the two reserved markers.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of corpus tokens (excludes the reserved markers).
    pub fn word_count(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn role(&self, id: TokenId) -> Role {
        self.roles[id]
    }

    pub fn role_of(&self, token: &str) -> Option<Role> {
        self.id(token).map(|id| self.roles[id])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id == START_ID || id == END_ID
    }

    /// Ids tagged with `role`, ascending.
    pub fn ids_with_role(&self, role: Role) -> Vec<TokenId> {
        (0..self.len())
            .filter(|&id| self.roles[id] == role)
            .collect()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, KbError> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t)
                    .ok_or_else(|| KbError::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// Encodes a caption as a model target: start marker, caption, end marker.
    pub fn encode_target<S: AsRef<str>>(&self, caption: &[S]) -> Result<Vec<TokenId>, KbError> {
        let mut ids = Vec::with_capacity(caption.len() + 2);
        ids.push(START_ID);
        ids.extend(self.encode(caption)?);
        ids.push(END_ID);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.tokens[id].clone()).collect()
    }
}

/// Builds the vocabulary of a tokenized corpus.
///
/// Tokens without a hint are tagged [`Role::Other`].
pub fn build_vocabulary<S: AsRef<str>>(
    corpus: &[Vec<S>],
    role_hints: &BTreeMap<String, Role>,
) -> Result<Vocabulary, KbError> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(KbError::EmptyCorpus);
    }
    let mut tokens = vec![START_TOKEN.to_string(), END_TOKEN.to_string()];
    let mut roles = vec![Role::Other, Role::Other];
    let mut index: HashMap<String, TokenId> = HashMap::new();
    index.insert(START_TOKEN.into(), START_ID);
    index.insert(END_TOKEN.into(), END_ID);

    for tok in corpus.iter().flatten() {
        let tok = tok.as_ref();
        if tok.is_empty() {
            return Err(KbError::EmptyToken);
        }
        if !index.contains_key(tok) {
            index.insert(tok.to_string(), tokens.len());
            tokens.push(tok.to_string());
            roles.push(role_hints.get(tok).copied().unwrap_or(Role::Other));
        }
    }
    if let Some(absent) = role_hints.keys().find(|t| !index.contains_key(t.as_str())) {
        return Err(KbError::HintForAbsentToken(absent.clone()));
    }
    Ok(Vocabulary {
        tokens,
        roles,
        index,
    })
}
