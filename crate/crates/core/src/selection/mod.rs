//! Two-stage unlabeled-data selection: a domain filter, then random,
//! submodular or committee-based choice of the SSL pool.

mod committee;
mod domain;
mod submodular;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub use committee::{
    calibrate_threshold, calibration_curve, committee_entropy, committee_filter, committee_select, mean_entropy,
    save_curve_csv, train_committee, write_curve_csv, Calibration, CalibrationPoint, Committee, CommitteeConfig,
    EntropyMode,
};
pub use domain::{stage1_filter, train_domain_filter, DomainFilter, DomainFilterConfig, FilterKind};
pub use submodular::{
    lazy_greedy, naive_greedy, submodular_select, FeatureWeighting, GreedyStep, SubmodularConfig,
    SubmodularObjective,
};

pub const METHOD_STAGE1: &str = "stage1";
pub const METHOD_RANDOM: &str = "random";
pub const METHOD_SUBMODULAR: &str = "submodular";
pub const METHOD_COMMITTEE: &str = "committee";

/// Stage-2 selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Random,
    Submodular,
    Committee,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 3] = [Self::Random, Self::Submodular, Self::Committee];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Random => METHOD_RANDOM,
            Self::Submodular => METHOD_SUBMODULAR,
            Self::Committee => METHOD_COMMITTEE,
        }
    }

    /// Column label used in reports.
    pub fn title(&self) -> &'static str {
        match self {
            Self::Random => "Random",
            Self::Submodular => "Submodular",
            Self::Committee => "Committee",
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            METHOD_RANDOM => Ok(Self::Random),
            METHOD_SUBMODULAR => Ok(Self::Submodular),
            METHOD_COMMITTEE => Ok(Self::Committee),
            _ => Err(Error::Config(format!("unknown selection method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub id: String,
    /// Gain at selection time, domain score or entropy, depending on method.
    pub score: f64,
    pub method: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ner: Option<f64>,
}

/// An ordered subset of pool ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub items: Vec<SelectedItem>,
}

impl SelectionResult {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, score: f64, method: &str) -> &mut SelectedItem {
        let rank = self.items.len();
        self.items.push(SelectedItem {
            id: id.into(),
            score,
            method: method.to_string(),
            rank,
            h_ic: None,
            h_ner: None,
        });
        self.items.last_mut().expect("just pushed")
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    /// The selected utterances of `pool`, in selection order.
    pub fn apply(&self, pool: &Dataset) -> Result<Dataset> {
        let mut out = Vec::with_capacity(self.items.len());
        for item in &self.items {
            match pool.get(&item.id) {
                Some(u) => out.push(u.clone()),
                None => return Err(Error::Input(format!("selected id {} not in pool", item.id))),
            }
        }
        Dataset::with_vocab(out, pool.intent_vocab.clone(), pool.tag_vocab.clone())
    }

    /// Keeps the first `n` items.
    pub fn truncated(&self, n: usize) -> SelectionResult {
        SelectionResult {
            items: self.items.iter().take(n).cloned().collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: SelectedItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        Ok(SelectionResult { items })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

pub(crate) fn check_budget(n: usize, pool: usize) -> Result<()> {
    if n > pool {
        return Err(Error::Config(format!("budget {n} exceeds pool size {pool}")));
    }
    Ok(())
}

/// Uniform sample of `n` pool items without replacement, in draw order.
pub fn random_select(pool: &Dataset, n: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(n, pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SelectionResult::new();
    for i in index::sample(&mut rng, pool.len(), n) {
        out.push(pool.utterances[i].id.clone(), 0.0, METHOD_RANDOM);
    }
    Ok(out)
}
