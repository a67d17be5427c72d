//! Committee of independently seeded teachers: entropy scoring,
//! threshold calibration on held-out data, and entropy filtering.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_budget, SelectionResult, METHOD_COMMITTEE};
use crate::corpus::{repair_bio, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::neural::{argmax, crf, entropy, Model};
use crate::ssl::{train_baseline, Method, SslConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// `−(1/n) Σ_i Σ_y P_i(y) log P_i(y)`
    #[default]
    MeanOfEntropies,
    /// Entropy of the members' averaged distribution.
    EntropyOfMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommitteeConfig {
    pub n: usize,
    /// Acceptable committee error rate below the threshold.
    pub rho: f64,
    pub mode: EntropyMode,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        CommitteeConfig {
            n: 4,
            rho: 0.20,
            mode: EntropyMode::MeanOfEntropies,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Committee {
    pub members: Vec<Model>,
    pub tau_ic: f64,
    pub tau_ner: f64,
    pub mode: EntropyMode,
}

/// Trains `seeds.len()` baselines in parallel, one per distinct seed.
pub fn train_committee(labeled: &Dataset, dev: &Dataset, seeds: &[u64], cfg: &SslConfig) -> Result<Committee> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("a committee needs at least 2 members, got {}", seeds.len())));
    }
    let distinct: HashSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::Config("committee seeds must be distinct".into()));
    }
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let c = SslConfig {
                method: Method::Baseline,
                seed,
                ..cfg.clone()
            };
            Ok(train_baseline(labeled, dev, &c)?.model)
        })
        .collect::<Result<Vec<Model>>>()?;
    Ok(Committee::new(members, EntropyMode::default()))
}

/// Committee entropy of a set of member distributions.
pub fn mean_entropy(dists: &[Vec<f64>], mode: EntropyMode) -> f64 {
    let n = dists.len() as f64;
    match mode {
        EntropyMode::MeanOfEntropies => dists.iter().map(|p| entropy(p)).sum::<f64>() / n,
        EntropyMode::EntropyOfMean => {
            let k = dists[0].len();
            let avg: Vec<f64> = (0..k).map(|j| dists.iter().map(|p| p[j]).sum::<f64>() / n).collect();
            entropy(&avg)
        }
    }
}

/// Members' per-utterance outputs.
struct Votes {
    ic: Vec<Vec<f64>>,
    /// per member, per token
    tokens: Vec<Vec<Vec<f64>>>,
    paths: Vec<Vec<usize>>,
}

impl Committee {
    pub fn new(members: Vec<Model>, mode: EntropyMode) -> Committee {
        Committee {
            members,
            tau_ic: f64::INFINITY,
            tau_ner: f64::INFINITY,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn votes(&self, u: &Utterance) -> Result<Votes> {
        let mut v = Votes {
            ic: Vec::new(),
            tokens: Vec::new(),
            paths: Vec::new(),
        };
        for m in &self.members {
            let trace = m.forward(u)?;
            v.ic.push(trace.ic_dist());
            let td = trace.token_dists();
            v.tokens.push((0..td.rows).map(|t| td.row(t).to_vec()).collect());
            v.paths.push(crf::viterbi(&trace.ner_emissions, m.params.transitions()).0);
        }
        Ok(v)
    }

    fn entropies_of(&self, v: &Votes) -> (f64, f64) {
        let h_ic = mean_entropy(&v.ic, self.mode);
        let l = v.tokens[0].len();
        let h_ner = (0..l)
            .map(|t| {
                let at: Vec<Vec<f64>> = v.tokens.iter().map(|m| m[t].clone()).collect();
                mean_entropy(&at, self.mode)
            })
            .sum::<f64>()
            / l as f64;
        (h_ic, h_ner)
    }

    /// `(H_ic, H_ner)`; the NER value is averaged over tokens, on pre-CRF
    /// tag distributions.
    pub fn entropy(&self, u: &Utterance) -> Result<(f64, f64)> {
        Ok(self.entropies_of(&self.votes(u)?))
    }

    fn vote_of(&self, v: &Votes) -> (String, Vec<String>) {
        let vocab = &self.members[0].vocab;
        let intent = plurality(&v.ic.iter().map(|p| argmax(p)).collect::<Vec<_>>(), &v.ic);
        let l = v.paths[0].len();
        let tags: Vec<String> = (0..l)
            .map(|t| {
                let picks: Vec<usize> = v.paths.iter().map(|p| p[t]).collect();
                let probs: Vec<Vec<f64>> = v.tokens.iter().map(|m| m[t].clone()).collect();
                vocab.tags.get(plurality(&picks, &probs)).unwrap_or("O").to_string()
            })
            .collect();
        (vocab.intents.get(intent).unwrap_or("").to_string(), repair_bio(&tags))
    }

    /// Majority-vote intent and tag sequence.
    pub fn vote(&self, u: &Utterance) -> Result<(String, Vec<String>)> {
        Ok(self.vote_of(&self.votes(u)?))
    }
}

/// Most frequent pick; ties go to the larger mean probability, then the
/// smaller index.
fn plurality(picks: &[usize], probs: &[Vec<f64>]) -> usize {
    let k = probs[0].len();
    let mut counts = vec![0usize; k];
    for &p in picks {
        counts[p] += 1;
    }
    let mean = |j: usize| probs.iter().map(|p| p[j]).sum::<f64>() / probs.len() as f64;
    let mut best = 0;
    for j in 1..k {
        let better = counts[j] > counts[best] || (counts[j] == counts[best] && mean(j) > mean(best));
        if better {
            best = j;
        }
    }
    best
}

pub fn committee_entropy(c: &Committee, u: &Utterance) -> Result<(f64, f64)> {
    c.entropy(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub entropy: f64,
    /// Committee error over items with entropy ≤ `entropy`.
    pub error_rate: f64,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau_ic: f64,
    pub tau_ner: f64,
    pub ic_curve: Vec<CalibrationPoint>,
    pub ner_curve: Vec<CalibrationPoint>,
    /// No threshold met the target; τ fell back to the smallest entropy.
    pub ic_warning: bool,
    pub ner_warning: bool,
}

/// Error-vs-entropy curve over `(entropy, wrong)` pairs and the largest
/// entropy whose sub-threshold error is at most `rho`.
pub fn calibration_curve(items: &[(f64, bool)], rho: f64) -> (f64, Vec<CalibrationPoint>, bool) {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut curve = Vec::new();
    let mut wrong = 0usize;
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        while i < n && sorted[i].0 == t {
            wrong += sorted[i].1 as usize;
            i += 1;
        }
        curve.push(CalibrationPoint {
            entropy: t,
            error_rate: wrong as f64 / i as f64,
            kept_fraction: i as f64 / n as f64,
        });
    }
    match curve.iter().rev().find(|p| p.error_rate <= rho) {
        Some(p) => (p.entropy, curve, false),
        None => (curve.first().map_or(0.0, |p| p.entropy), curve, true),
    }
}

pub fn write_curve_csv<W: Write>(curve: &[CalibrationPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in curve {
        out.serialize(p)?;
    }
    out.flush().map_err(|e| Error::io("<calibration curve>", e))
}

pub fn save_curve_csv(curve: &[CalibrationPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(curve, file)
}

/// Calibrates both thresholds on labeled held-out data: intent error for
/// `τ_ic`, whole-sequence tag mismatch for `τ_ner`.
pub fn calibrate_threshold(c: &Committee, held_out: &Dataset, rho: f64) -> Result<Calibration> {
    if held_out.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("target error rate {rho} outside [0,1]")));
    }
    let rows: Vec<((f64, bool), (f64, bool))> = held_out
        .utterances
        .par_iter()
        .map(|u| {
            let (gi, gt) = match (&u.intent, &u.tags) {
                (Some(i), Some(t)) => (i, t),
                _ => return Err(Error::Input(format!("calibration utterance {} is unlabeled", u.id))),
            };
            let v = c.votes(u)?;
            let (h_ic, h_ner) = c.entropies_of(&v);
            let (pi, pt) = c.vote_of(&v);
            Ok(((h_ic, &pi != gi), (h_ner, &pt != gt)))
        })
        .collect::<Result<_>>()?;
    let (ic, ner): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let (tau_ic, ic_curve, ic_warning) = calibration_curve(&ic, rho);
    let (tau_ner, ner_curve, ner_warning) = calibration_curve(&ner, rho);
    if ic_warning || ner_warning {
        log::warn!("no entropy threshold reaches error rate {rho}; using the smallest observed entropy");
    }
    Ok(Calibration {
        tau_ic,
        tau_ner,
        ic_curve,
        ner_curve,
        ic_warning,
        ner_warning,
    })
}

/// Keeps pool items with `H_ic ≤ τ_ic` and `H_ner ≤ τ_ner`, most confident
/// first (by `H_ic`, then `H_ner`, then id).
pub fn committee_filter(c: &Committee, pool: &Dataset, tau_ic: f64, tau_ner: f64) -> Result<SelectionResult> {
    let h: Vec<(f64, f64)> = pool.utterances.par_iter().map(|u| c.entropy(u)).collect::<Result<_>>()?;
    let mut kept: Vec<usize> = (0..pool.len()).filter(|&i| h[i].0 <= tau_ic && h[i].1 <= tau_ner).collect();
    kept.sort_by(|&a, &b| {
        h[a].0
            .total_cmp(&h[b].0)
            .then(h[a].1.total_cmp(&h[b].1))
            .then_with(|| pool.utterances[a].id.cmp(&pool.utterances[b].id))
    });
    let mut out = SelectionResult::new();
    for i in kept {
        let item = out.push(pool.utterances[i].id.clone(), h[i].0, METHOD_COMMITTEE);
        item.h_ic = Some(h[i].0);
        item.h_ner = Some(h[i].1);
    }
    Ok(out)
}

/// Stage-2 committee selection under a budget: the trusted set from
/// [`committee_filter`] at the committee's thresholds, uniformly subsampled
/// to `n` items when larger (kept in filter order).
pub fn committee_select(c: &Committee, pool: &Dataset, n: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(n, pool.len())?;
    let kept = committee_filter(c, pool, c.tau_ic, c.tau_ner)?;
    if kept.len() <= n {
        if kept.len() < n {
            log::warn!("committee kept {} items, fewer than the budget {n}", kept.len());
        }
        return Ok(kept);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick: Vec<usize> = index::sample(&mut rng, kept.len(), n).into_vec();
    pick.sort_unstable();
    let mut out = SelectionResult::new();
    for i in pick {
        let src = &kept.items[i];
        let item = out.push(src.id.clone(), src.score, METHOD_COMMITTEE);
        item.h_ic = src.h_ic;
        item.h_ner = src.h_ner;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let one_hot = vec![vec![1.0, 0.0, 0.0, 0.0]; 3];
        assert_eq!(mean_entropy(&one_hot, EntropyMode::MeanOfEntropies), 0.0);
        let uniform = vec![vec![0.25; 4]; 2];
        assert!((mean_entropy(&uniform, EntropyMode::MeanOfEntropies) - 4f64.ln()).abs() < 1e-12);
        let mixed = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        assert!((mean_entropy(&mixed, EntropyMode::MeanOfEntropies) - 0.5 * 2f64.ln()).abs() < 1e-12);
        // disagreeing one-hot members: no per-member entropy, full entropy of the mean
        let split = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(mean_entropy(&split, EntropyMode::MeanOfEntropies), 0.0);
        assert!((mean_entropy(&split, EntropyMode::EntropyOfMean) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn curve_thresholds() {
        let perfect = [(0.1, false), (0.5, false), (0.9, false)];
        let (tau, curve, warn) = calibration_curve(&perfect, 0.2);
        assert_eq!((tau, warn), (0.9, false));
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[2].kept_fraction, 1.0);

        let bad_first = [(0.1, true), (0.5, false)];
        let (tau, _, warn) = calibration_curve(&bad_first, 0.0);
        assert_eq!((tau, warn), (0.1, true));

        let items = [(0.1, false), (0.2, false), (0.3, true), (0.4, false), (0.5, true), (0.6, true)];
        let (tau, curve, _) = calibration_curve(&items, 0.25);
        assert_eq!(tau, 0.4);
        assert!((curve[4].error_rate - 0.4).abs() < 1e-15);
    }

    #[test]
    fn plurality_tie_rules() {
        let probs = vec![vec![0.6, 0.4, 0.0], vec![0.3, 0.7, 0.0]];
        // one vote each; class 1 has the higher mean probability
        assert_eq!(plurality(&[0, 1], &probs), 1);
        let flat = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(plurality(&[1, 0], &flat), 0);
        assert_eq!(plurality(&[1, 1], &flat), 1);
    }
}
