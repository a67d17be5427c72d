//! Utterances, datasets and their on-disk forms.
//!
//! Datasets are stored as JSON Lines, one utterance per line. Unlabeled
//! records leave `intent` and `tags` as `null`.

mod jsonl;
mod snips;
mod split;
pub mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use snips::{load_snips, load_snips_strict, SNIPS_INTENTS};
pub use split::stratified_split;
pub use synthetic::{generate_background, generate_synthetic, SyntheticCorpus, SyntheticSpec};

/// Outside tag.
pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub intent: Option<String>,
    #[serde(default)]
    pub tags: Option<Vec<String>>,
    #[serde(default)]
    pub domain: Option<String>,
}

impl Utterance {
    pub fn unlabeled(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Utterance {
            id: id.into(),
            tokens,
            intent: None,
            tags: None,
            domain: None,
        }
    }

    pub fn labeled(
        id: impl Into<String>,
        tokens: Vec<String>,
        intent: impl Into<String>,
        tags: Vec<String>,
    ) -> Self {
        Utterance {
            id: id.into(),
            tokens,
            intent: Some(intent.into()),
            tags: Some(tags),
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    /// Both an intent and a tag sequence are present.
    pub fn is_labeled(&self) -> bool {
        self.intent.is_some() && self.tags.is_some()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy without labels.
    pub fn strip_labels(&self) -> Utterance {
        Utterance {
            intent: None,
            tags: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!("utterance {} has no tokens", self.id)));
        }
        if let Some(tags) = &self.tags {
            if tags.len() != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "utterance {}: {} tags for {} tokens",
                    self.id,
                    tags.len(),
                    self.tokens.len()
                )));
            }
            validate_bio(tags)
                .map_err(|msg| Error::Validation(format!("utterance {}: {msg}", self.id)))?;
        }
        Ok(())
    }
}

/// Checks that `tags` is a well-formed BIO sequence.
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> std::result::Result<(), String> {
    let mut open: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == OUTSIDE {
            open = None;
        } else if let Some(ty) = tag.strip_prefix("B-") {
            if ty.is_empty() {
                return Err(format!("empty entity type at position {i}"));
            }
            open = Some(ty);
        } else if let Some(ty) = tag.strip_prefix("I-") {
            if open != Some(ty) {
                return Err(format!("`{tag}` at position {i} does not continue a `{ty}` span"));
            }
        } else {
            return Err(format!("`{tag}` at position {i} is not a BIO tag"));
        }
    }
    Ok(())
}

/// Makes any tag sequence valid BIO: a stray `I-X` becomes `B-X` and
/// anything that is not a BIO tag becomes `O`.
pub fn repair_bio<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    let mut open: Option<String> = None;
    for tag in tags {
        let tag = tag.as_ref();
        let fixed = if let Some(ty) = tag.strip_prefix("B-").filter(|t| !t.is_empty()) {
            open = Some(ty.to_string());
            tag.to_string()
        } else if let Some(ty) = tag.strip_prefix("I-").filter(|t| !t.is_empty()) {
            if open.as_deref() == Some(ty) {
                tag.to_string()
            } else {
                open = Some(ty.to_string());
                format!("B-{ty}")
            }
        } else {
            open = None;
            OUTSIDE.to_string()
        };
        out.push(fixed);
    }
    out
}

/// Ordered label set with first-seen indexing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = LabelSet::new();
        for l in labels {
            set.insert(l.into());
        }
        set
    }

    /// Inserts if absent and returns the label's index.
    pub fn insert(&mut self, label: String) -> usize {
        match self.index_of(&label) {
            Some(i) => i,
            None => {
                self.labels.push(label);
                self.labels.len() - 1
            }
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub intent_vocab: LabelSet,
    /// Always contains `O` at index 0.
    pub tag_vocab: LabelSet,
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset {
            utterances: Vec::new(),
            intent_vocab: LabelSet::new(),
            tag_vocab: LabelSet::from_labels([OUTSIDE]),
        }
    }
}

impl Dataset {
    /// Validates every utterance and infers vocabularies from the labeled
    /// records in first-seen order.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        Self::with_vocab(utterances, LabelSet::new(), LabelSet::new())
    }

    /// Like [`Dataset::new`] but starts the vocabularies from the given sets.
    pub fn with_vocab(
        utterances: Vec<Utterance>,
        intent_vocab: LabelSet,
        tag_vocab: LabelSet,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(utterances.len());
        let mut intents = intent_vocab;
        let mut tags = LabelSet::from_labels([OUTSIDE]);
        for t in tag_vocab.iter() {
            tags.insert(t.to_string());
        }
        for u in &utterances {
            u.validate()?;
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id {}", u.id)));
            }
            if let Some(intent) = &u.intent {
                intents.insert(intent.clone());
            }
            if let Some(ts) = &u.tags {
                for t in ts {
                    tags.insert(t.clone());
                }
            }
        }
        Ok(Dataset {
            utterances,
            intent_vocab: intents,
            tag_vocab: tags,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.utterances.iter().all(Utterance::is_labeled)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Sub-dataset with the given ids in the given order; unknown ids are skipped.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Dataset {
        let by_id: std::collections::HashMap<&str, &Utterance> =
            self.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
        let utterances = ids
            .iter()
            .filter_map(|id| by_id.get(id.as_ref()).map(|u| (*u).clone()))
            .collect();
        Dataset {
            utterances,
            intent_vocab: self.intent_vocab.clone(),
            tag_vocab: self.tag_vocab.clone(),
        }
    }

    /// Concatenation; fails on id collisions.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut utts = self.utterances.clone();
        utts.extend(other.utterances.iter().cloned());
        Dataset::with_vocab(utts, self.intent_vocab.clone(), self.tag_vocab.clone())
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            utterances: self.utterances.iter().map(Utterance::strip_labels).collect(),
            intent_vocab: self.intent_vocab.clone(),
            tag_vocab: self.tag_vocab.clone(),
        }
    }
}

#[cfg(test)]
pub(crate) fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}
