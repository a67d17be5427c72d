//! 1–4 gram feature space shared by the domain filter and the submodular
//! objective, plus the n-gram diversity diagnostic.
//!
//! N-grams are surface tokens joined by a single space, case preserved,
//! without boundary markers.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};

pub const N_MIN: usize = 1;
pub const N_MAX: usize = 4;
pub const DEFAULT_MIN_COUNT: u64 = 30;

/// All n-grams of `tokens` with `n` in `n_min..=n_max`, with repetition.
pub fn ngrams(tokens: &[String], n_min: usize, n_max: usize) -> impl Iterator<Item = String> + '_ {
    (n_min..=n_max).flat_map(move |n| {
        tokens
            .windows(n)
            .map(|w| w.join(" "))
            .collect::<Vec<_>>()
            .into_iter()
    })
}

fn count_ngrams<'a, I>(utts: I) -> HashMap<String, (u64, u64)>
where
    I: IntoParallelIterator<Item = &'a Utterance>,
{
    utts.into_par_iter()
        .fold(HashMap::new, |mut acc: HashMap<String, (u64, u64)>, u| {
            let mut seen = HashSet::new();
            for g in ngrams(&u.tokens, N_MIN, N_MAX) {
                let e = acc.entry(g.clone()).or_default();
                e.0 += 1;
                if seen.insert(g) {
                    e.1 += 1;
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, (c, d)) in b {
                let e = a.entry(k).or_default();
                e.0 += c;
                e.1 += d;
            }
            a
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramVocabulary {
    pub n_min: usize,
    pub n_max: usize,
    pub min_count: u64,
    features: Vec<String>,
    feature_to_id: HashMap<String, usize>,
    total_counts: Vec<u64>,
    doc_counts: Vec<u64>,
    n_docs: u64,
}

impl NGramVocabulary {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn id(&self, feature: &str) -> Option<usize> {
        self.feature_to_id.get(feature).copied()
    }

    pub fn feature(&self, id: usize) -> &str {
        &self.features[id]
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn total_count(&self, id: usize) -> u64 {
        self.total_counts[id]
    }

    /// Number of utterances containing the feature at least once.
    pub fn doc_count(&self, id: usize) -> u64 {
        self.doc_counts[id]
    }

    pub fn n_docs(&self) -> u64 {
        self.n_docs
    }

    /// Writes `feature\tid\tcount` lines in id order.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (id, feat) in self.features.iter().enumerate() {
            writeln!(w, "{feat}\t{id}\t{}", self.total_counts[id]).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the `feature\tid\tcount` form back as `(feature, id, count)`.
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, usize, u64)>> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(feat), Some(id), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err("expected three tab-separated fields"));
            };
            let id = id.parse().map_err(|_| parse_err("bad id"))?;
            let count = count.parse().map_err(|_| parse_err("bad count"))?;
            out.push((feat.to_string(), id, count));
        }
        Ok(out)
    }
}

/// Counts 1–4 grams over the union of `corpora` and keeps those seen at
/// least `min_count` times. Ids follow the lexicographic order of the
/// retained features, so they do not depend on corpus order.
pub fn build_vocabulary(corpora: &[&Dataset], min_count: u64) -> NGramVocabulary {
    let utts: Vec<&Utterance> = corpora.iter().flat_map(|d| d.utterances.iter()).collect();
    let counts = count_ngrams(utts.par_iter().copied());
    let mut kept: Vec<(String, (u64, u64))> =
        counts.into_iter().filter(|(_, (c, _))| *c >= min_count).collect();
    kept.sort_by(|a, b| a.0.cmp(&b.0));
    let feature_to_id = kept.iter().enumerate().map(|(i, (f, _))| (f.clone(), i)).collect();
    NGramVocabulary {
        n_min: N_MIN,
        n_max: N_MAX,
        min_count,
        total_counts: kept.iter().map(|(_, (c, _))| *c).collect(),
        doc_counts: kept.iter().map(|(_, (_, d))| *d).collect(),
        features: kept.into_iter().map(|(f, _)| f).collect(),
        feature_to_id,
        n_docs: utts.len() as u64,
    }
}

/// Sparse per-utterance n-gram multiplicities, sorted by feature id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureVector {
    pub entries: Vec<(usize, u32)>,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> u32 {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1 as u64).sum()
    }
}

pub fn featurize(v: &NGramVocabulary, u: &Utterance) -> FeatureVector {
    let mut counts: HashMap<usize, u32> = HashMap::new();
    for g in ngrams(&u.tokens, v.n_min, v.n_max) {
        if let Some(id) = v.id(&g) {
            *counts.entry(id).or_default() += 1;
        }
    }
    let mut entries: Vec<(usize, u32)> = counts.into_iter().collect();
    entries.sort_unstable();
    FeatureVector { entries }
}

pub fn featurize_all(v: &NGramVocabulary, d: &Dataset) -> Vec<FeatureVector> {
    d.utterances.par_iter().map(|u| featurize(v, u)).collect()
}

fn unique(d: &Dataset, n_max: usize, into: &mut HashSet<String>) {
    for u in &d.utterances {
        into.extend(ngrams(&u.tokens, 1, n_max));
    }
}

/// `(|unigrams(D_l ∪ S)| / |unigrams(D_l)|, |1–4 grams(D_l ∪ S)| / |1–4 grams(D_l)|)`
/// over unpruned n-gram sets.
pub fn ngram_expansion_ratio(labeled: &Dataset, selected: &Dataset) -> Result<(f64, f64)> {
    let mut uni = HashSet::new();
    let mut all = HashSet::new();
    unique(labeled, 1, &mut uni);
    unique(labeled, N_MAX, &mut all);
    if uni.is_empty() {
        return Err(Error::Division("labeled set has no tokens".into()));
    }
    let (base_uni, base_all) = (uni.len() as f64, all.len() as f64);
    unique(selected, 1, &mut uni);
    unique(selected, N_MAX, &mut all);
    Ok((uni.len() as f64 / base_uni, all.len() as f64 / base_all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toks;

    fn ds(sents: &[&[&str]]) -> Dataset {
        Dataset::new(
            sents
                .iter()
                .enumerate()
                .map(|(i, s)| Utterance::unlabeled(format!("u{i}"), toks(s)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_token_sentence() {
        let d = ds(&[&["play", "music"]]);
        let v = build_vocabulary(&[&d], 1);
        let mut feats = v.features().to_vec();
        feats.sort();
        assert_eq!(feats, toks(&["music", "play", "play music"]));
        let mut ids: Vec<usize> = feats.iter().map(|f| v.id(f).unwrap()).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(build_vocabulary(&[&d], 2).is_empty());
    }

    #[test]
    fn repetition_counts() {
        let d = ds(&[&["a", "a", "a"]]);
        let v = build_vocabulary(&[&d], 1);
        let fv = featurize(&v, &d.utterances[0]);
        assert_eq!(fv.get(v.id("a").unwrap()), 3);
        assert_eq!(fv.get(v.id("a a").unwrap()), 2);
        assert_eq!(fv.get(v.id("a a a").unwrap()), 1);
        assert!(v.id("a a a a").is_none());
    }

    #[test]
    fn out_of_vocabulary_dropped() {
        let d = ds(&[&["a", "b"]]);
        let v = build_vocabulary(&[&d], 1);
        let other = Utterance::unlabeled("x", toks(&["c", "d"]));
        assert!(featurize(&v, &other).is_empty());
    }

    #[test]
    fn expansion_ratios() {
        let dl = ds(&[&["a", "b"], &["b", "c"]]);
        assert_eq!(ngram_expansion_ratio(&dl, &Dataset::default()).unwrap(), (1.0, 1.0));
        assert_eq!(ngram_expansion_ratio(&dl, &dl).unwrap(), (1.0, 1.0));
        let disjoint = ds(&[&["x", "y"], &["y", "z"]]);
        assert_eq!(ngram_expansion_ratio(&dl, &disjoint).unwrap(), (2.0, 2.0));
        assert!(matches!(
            ngram_expansion_ratio(&Dataset::default(), &dl),
            Err(Error::Division(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let d = ds(&[&["a", "b", "a"]]);
        let v = build_vocabulary(&[&d], 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.write_tsv(&p).unwrap();
        let rows = NGramVocabulary::read_tsv(&p).unwrap();
        assert_eq!(rows.len(), v.len());
        for (f, id, c) in rows {
            assert_eq!(v.id(&f), Some(id));
            assert_eq!(v.total_count(id), c);
        }
    }
}
