//! Feature-based submodular objective `f(S) = Σ_u w_u·log(1 + m_u(S))` and
//! its greedy maximisers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{check_budget, SelectionResult, METHOD_SUBMODULAR};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::features::{build_vocabulary, featurize, featurize_all, FeatureVector, NGramVocabulary, DEFAULT_MIN_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureWeighting {
    Uniform,
    /// `w_u = ln(1 + n_docs / doc_count_u)`
    LogIdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmodularConfig {
    pub min_count: u64,
    pub weighting: FeatureWeighting,
}

impl Default for SubmodularConfig {
    fn default() -> Self {
        SubmodularConfig {
            min_count: DEFAULT_MIN_COUNT,
            weighting: FeatureWeighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmodularObjective {
    weights: Vec<f64>,
    mass: Vec<f64>,
}

impl SubmodularObjective {
    pub fn new(vocab: &NGramVocabulary, weighting: FeatureWeighting) -> Self {
        let weights = match weighting {
            FeatureWeighting::Uniform => vec![1.0; vocab.len()],
            FeatureWeighting::LogIdf => (0..vocab.len())
                .map(|i| (1.0 + vocab.n_docs() as f64 / vocab.doc_count(i).max(1) as f64).ln())
                .collect(),
        };
        Self::with_weights(weights)
    }

    pub fn with_weights(weights: Vec<f64>) -> Self {
        assert!(weights.iter().all(|w| *w >= 0.0), "feature weights must be nonnegative");
        let mass = vec![0.0; weights.len()];
        SubmodularObjective { weights, mass }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn mass(&self, feature: usize) -> f64 {
        self.mass[feature]
    }

    /// `f(S ∪ {x}) − f(S)`; each term is `w·ln(1 + c/(1+m))`, which is
    /// non-increasing in `m` in floating point as well.
    pub fn gain(&self, x: &FeatureVector) -> f64 {
        x.entries
            .iter()
            .map(|&(id, c)| self.weights[id] * (c as f64 / (1.0 + self.mass[id])).ln_1p())
            .sum()
    }

    pub fn add(&mut self, x: &FeatureVector) {
        for &(id, c) in &x.entries {
            self.mass[id] += c as f64;
        }
    }

    pub fn value(&self) -> f64 {
        self.weights.iter().zip(&self.mass).map(|(w, m)| w * m.ln_1p()).sum()
    }
}

/// One greedy pick: pool index and its marginal gain when chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyStep {
    pub index: usize,
    pub gain: f64,
}

struct Entry<'a> {
    gain: f64,
    key: &'a str,
    index: usize,
    round: usize,
}

impl PartialEq for Entry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry<'_> {}

impl PartialOrd for Entry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry<'_> {
    // Max-heap order: larger gain first, then smaller key.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.key.cmp(self.key))
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Lazy greedy maximisation of `obj` over `candidates`, choosing `n` items.
/// Equal gains go to the smaller key. `obj` ends holding the final masses.
pub fn lazy_greedy(obj: &mut SubmodularObjective, candidates: &[FeatureVector], keys: &[&str], n: usize) -> Vec<GreedyStep> {
    assert_eq!(candidates.len(), keys.len());
    let n = n.min(candidates.len());
    let mut heap: BinaryHeap<Entry<'_>> = candidates
        .iter()
        .enumerate()
        .map(|(i, x)| Entry {
            gain: obj.gain(x),
            key: keys[i],
            index: i,
            round: 0,
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let top = heap.pop().expect("heap holds every unselected candidate");
        if top.round == out.len() {
            obj.add(&candidates[top.index]);
            out.push(GreedyStep {
                index: top.index,
                gain: top.gain,
            });
        } else {
            heap.push(Entry {
                gain: obj.gain(&candidates[top.index]),
                round: out.len(),
                ..top
            });
        }
    }
    out
}

/// Full-recompute greedy with the same tie rule; quadratic, for checking.
pub fn naive_greedy(obj: &mut SubmodularObjective, candidates: &[FeatureVector], keys: &[&str], n: usize) -> Vec<GreedyStep> {
    assert_eq!(candidates.len(), keys.len());
    let mut taken = vec![false; candidates.len()];
    let mut out = Vec::new();
    for _ in 0..n.min(candidates.len()) {
        let mut best: Option<(f64, usize)> = None;
        for (i, x) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let g = obj.gain(x);
            let better = match best {
                None => true,
                Some((bg, bi)) => g > bg || (g == bg && keys[i] < keys[bi]),
            };
            if better {
                best = Some((g, i));
            }
        }
        let (gain, index) = best.expect("candidates remain");
        taken[index] = true;
        obj.add(&candidates[index]);
        out.push(GreedyStep { index, gain });
    }
    out
}

/// Greedy selection of `n` pool utterances starting from the labeled set's
/// n-gram masses. Scores are marginal gains at selection time.
pub fn submodular_select(labeled: &Dataset, pool: &Dataset, n: usize, cfg: &SubmodularConfig) -> Result<SelectionResult> {
    check_budget(n, pool.len())?;
    if n == 0 {
        return Ok(SelectionResult::new());
    }
    let vocab = build_vocabulary(&[labeled, pool], cfg.min_count);
    let mut obj = SubmodularObjective::new(&vocab, cfg.weighting);
    for u in labeled.iter() {
        obj.add(&featurize(&vocab, u));
    }
    let candidates = featurize_all(&vocab, pool);
    let keys: Vec<&str> = pool.utterances.iter().map(|u| u.id.as_str()).collect();
    let steps = lazy_greedy(&mut obj, &candidates, &keys, n);
    if steps.iter().any(|s| !s.gain.is_finite()) {
        return Err(Error::Numeric {
            id: "submodular".into(),
            message: "non-finite gain".into(),
        });
    }
    let mut out = SelectionResult::new();
    for s in steps {
        out.push(keys[s.index], s.gain, METHOD_SUBMODULAR);
    }
    Ok(out)
}
