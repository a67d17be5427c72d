//! Stage-1 binary in-domain classifier.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SelectionResult, METHOD_STAGE1};
use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::features::{build_vocabulary, ngrams, N_MAX, N_MIN};
use crate::neural::lstm;
use crate::neural::{Adam, AdamConfig, LinearRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Logistic regression over 1–4 gram presence features.
    Logistic,
    /// Single-layer BiLSTM with a logistic output.
    Recurrent,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" | "linear" => Ok(Self::Logistic),
            "recurrent" | "lstm" | "bilstm" => Ok(Self::Recurrent),
            _ => Err(Error::Config(format!("unknown domain filter kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainFilterConfig {
    pub kind: FilterKind,
    pub threshold: f64,
    /// N-gram pruning for the logistic features.
    pub min_count: u64,
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DomainFilterConfig {
    fn default() -> Self {
        DomainFilterConfig {
            kind: FilterKind::Logistic,
            threshold: 0.5,
            min_count: 2,
            l2: 1e-3,
            epochs: 200,
            lr: 0.05,
            batch_size: 16,
            emb_dim: 16,
            hidden: 16,
            seed: 0,
        }
    }
}

impl DomainFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "domain threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.lr <= 0.0 || self.l2 < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("domain filter lr, l2 or batch size out of range".into()));
        }
        if self.kind == FilterKind::Recurrent && (self.emb_dim == 0 || self.hidden == 0) {
            return Err(Error::Config("recurrent filter dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum FilterModel {
    Logistic {
        features: Vec<String>,
        weights: Vec<f64>,
        bias: f64,
    },
    Recurrent {
        words: Vec<String>,
        emb_dim: usize,
        hidden: usize,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFilter {
    pub kind: FilterKind,
    pub threshold: f64,
    model: FilterModel,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Class weights that give each class half of the total mass.
fn balanced(n_pos: usize, n_neg: usize) -> (f64, f64) {
    let n = (n_pos + n_neg) as f64;
    (0.5 * n / n_pos as f64, 0.5 * n / n_neg as f64)
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

fn presence(index: &HashMap<String, usize>, u: &Utterance) -> Vec<usize> {
    let mut ids: Vec<usize> = ngrams(&u.tokens, N_MIN, N_MAX)
        .filter_map(|g| index.get(&g).copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Offsets of the recurrent filter's flat parameter vector.
struct RecLayout {
    emb: usize,
    fwd_w: usize,
    fwd_b: usize,
    bwd_w: usize,
    bwd_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl RecLayout {
    fn new(vocab: usize, de: usize, h: usize) -> Self {
        let cell_w = 4 * h * (de + h);
        let emb = 0;
        let fwd_w = emb + vocab * de;
        let fwd_b = fwd_w + cell_w;
        let bwd_w = fwd_b + 4 * h;
        let bwd_b = bwd_w + cell_w;
        let out_w = bwd_b + 4 * h;
        let out_b = out_w + 2 * h;
        RecLayout {
            emb,
            fwd_w,
            fwd_b,
            bwd_w,
            bwd_b,
            out_w,
            out_b,
            total: out_b + 1,
        }
    }

    fn cell<'a>(&self, p: &'a [f64], reverse: bool, de: usize, h: usize) -> LinearRef<'a> {
        let (w, b) = if reverse { (self.bwd_w, self.bwd_b) } else { (self.fwd_w, self.fwd_b) };
        LinearRef {
            w: &p[w..b],
            b: &p[b..b + 4 * h],
            out: 4 * h,
            inp: de + h,
        }
    }
}

struct RecForward {
    inputs: Vec<f64>,
    runs: [lstm::LstmRun; 2],
    pooled: Vec<f64>,
    z: f64,
}

fn rec_forward(p: &[f64], lay: &RecLayout, tokens: &[usize], de: usize, h: usize) -> RecForward {
    let mut inputs = Vec::with_capacity(tokens.len() * de);
    for &t in tokens {
        inputs.extend_from_slice(&p[lay.emb + t * de..lay.emb + (t + 1) * de]);
    }
    let f = lstm::forward(lay.cell(p, false, de, h), &inputs, de, false);
    let b = lstm::forward(lay.cell(p, true, de, h), &inputs, de, true);
    let mut pooled = f.state(tokens.len() - 1).to_vec();
    pooled.extend_from_slice(b.state(0));
    let z = p[lay.out_b]
        + pooled
            .iter()
            .zip(&p[lay.out_w..lay.out_b])
            .map(|(x, w)| x * w)
            .sum::<f64>();
    RecForward {
        inputs,
        runs: [f, b],
        pooled,
        z,
    }
}

/// Accumulates the gradient of `dz · z` into `g`.
fn rec_backward(p: &[f64], lay: &RecLayout, fw: &RecForward, tokens: &[usize], dz: f64, g: &mut [f64], de: usize, h: usize) {
    let l = tokens.len();
    g[lay.out_b] += dz;
    for (gw, x) in g[lay.out_w..lay.out_b].iter_mut().zip(&fw.pooled) {
        *gw += dz * x;
    }
    let mut dx_total = vec![0.0; l * de];
    for (dir, reverse) in [(0usize, false), (1, true)] {
        let mut d_states = vec![0.0; l * h];
        let (pos, off) = if reverse { (0, h) } else { (l - 1, 0) };
        for k in 0..h {
            d_states[pos * h + k] = dz * p[lay.out_w + off + k];
        }
        let (w0, b0) = if reverse { (lay.bwd_w, lay.bwd_b) } else { (lay.fwd_w, lay.fwd_b) };
        let (head, tail) = g.split_at_mut(b0);
        let dx = lstm::backward(
            lay.cell(p, reverse, de, h),
            &fw.runs[dir],
            &fw.inputs,
            de,
            &d_states,
            &mut head[w0..],
            &mut tail[..4 * h],
        );
        for (a, b) in dx_total.iter_mut().zip(dx) {
            *a += b;
        }
    }
    for (t, &tok) in tokens.iter().enumerate() {
        for k in 0..de {
            g[lay.emb + tok * de + k] += dx_total[t * de + k];
        }
    }
}

impl DomainFilter {
    /// Probability that `u` is in-domain.
    pub fn score(&self, u: &Utterance) -> f64 {
        match &self.model {
            FilterModel::Logistic { weights, bias, .. } => {
                let z = bias + presence(&self.index, u).iter().map(|&j| weights[j]).sum::<f64>();
                sigmoid(z)
            }
            FilterModel::Recurrent {
                words,
                emb_dim,
                hidden,
                params,
            } => {
                if u.tokens.is_empty() {
                    return sigmoid(params[params.len() - 1]);
                }
                let lay = RecLayout::new(words.len(), *emb_dim, *hidden);
                let toks = self.word_ids(u);
                sigmoid(rec_forward(params, &lay, &toks, *emb_dim, *hidden).z)
            }
        }
    }

    pub fn scores(&self, d: &Dataset) -> Vec<f64> {
        d.utterances.par_iter().map(|u| self.score(u)).collect()
    }

    fn word_ids(&self, u: &Utterance) -> Vec<usize> {
        u.tokens.iter().map(|w| self.index.get(w).copied().unwrap_or(0)).collect()
    }

    fn rebuild_index(&mut self) {
        self.index = match &self.model {
            FilterModel::Logistic { features, .. } => index_of(features),
            FilterModel::Recurrent { words, .. } => index_of(words),
        };
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut f: DomainFilter = serde_json::from_str(&text)?;
        f.rebuild_index();
        Ok(f)
    }

    /// Number of learned weights, for diagnostics.
    pub fn n_parameters(&self) -> usize {
        match &self.model {
            FilterModel::Logistic { weights, .. } => weights.len() + 1,
            FilterModel::Recurrent { params, .. } => params.len(),
        }
    }
}

/// Trains the in-domain (label 1) vs out-of-domain (label 0) classifier.
/// Deterministic given the config.
pub fn train_domain_filter(in_domain: &Dataset, out_of_domain: &Dataset, cfg: &DomainFilterConfig) -> Result<DomainFilter> {
    cfg.validate()?;
    if in_domain.is_empty() || out_of_domain.is_empty() {
        return Err(Error::Training(format!(
            "domain filter needs both classes (in-domain {}, out-of-domain {})",
            in_domain.len(),
            out_of_domain.len()
        )));
    }
    let mut f = match cfg.kind {
        FilterKind::Logistic => train_logistic(in_domain, out_of_domain, cfg),
        FilterKind::Recurrent => train_recurrent(in_domain, out_of_domain, cfg),
    }?;
    f.rebuild_index();
    Ok(f)
}

fn train_logistic(pos: &Dataset, neg: &Dataset, cfg: &DomainFilterConfig) -> Result<DomainFilter> {
    let vocab = build_vocabulary(&[pos, neg], cfg.min_count);
    let features = vocab.features().to_vec();
    let index = index_of(&features);
    let (wp, wn) = balanced(pos.len(), neg.len());
    let mut rows: Vec<(Vec<usize>, f64, f64)> = Vec::with_capacity(pos.len() + neg.len());
    rows.extend(pos.utterances.iter().map(|u| (presence(&index, u), 1.0, wp)));
    rows.extend(neg.utterances.iter().map(|u| (presence(&index, u), 0.0, wn)));
    let n = rows.len() as f64;
    let dim = features.len();
    // weights followed by the bias
    let mut theta = vec![0.0; dim + 1];
    let mut grad = vec![0.0; dim + 1];
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: None,
            ..AdamConfig::default()
        },
        dim + 1,
    );
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y, w) in &rows {
            let z = theta[dim] + x.iter().map(|&j| theta[j]).sum::<f64>();
            let dz = w * (sigmoid(z) - y) / n;
            grad[dim] += dz;
            for &j in x {
                grad[j] += dz;
            }
        }
        for j in 0..dim {
            grad[j] += cfg.l2 * theta[j];
        }
        adam.step_slice(&mut theta, &grad);
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training("domain filter weights diverged".into()));
    }
    let bias = theta.pop().expect("bias present");
    Ok(DomainFilter {
        kind: FilterKind::Logistic,
        threshold: cfg.threshold,
        model: FilterModel::Logistic {
            features,
            weights: theta,
            bias,
        },
        index: HashMap::new(),
    })
}

fn train_recurrent(pos: &Dataset, neg: &Dataset, cfg: &DomainFilterConfig) -> Result<DomainFilter> {
    let (de, h) = (cfg.emb_dim, cfg.hidden);
    let mut words = vec![crate::neural::UNK.to_string()];
    let mut index: HashMap<String, usize> = index_of(&words);
    for u in pos.utterances.iter().chain(&neg.utterances) {
        for w in &u.tokens {
            if !index.contains_key(w) {
                index.insert(w.clone(), words.len());
                words.push(w.clone());
            }
        }
    }
    let lay = RecLayout::new(words.len(), de, h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![0.0; lay.total];
    for x in &mut params[lay.emb..lay.fwd_w] {
        *x = rng.gen_range(-0.1..0.1);
    }
    let glorot = (6.0 / (4 * h + de + h) as f64).sqrt();
    for (w, b) in [(lay.fwd_w, lay.fwd_b), (lay.bwd_w, lay.bwd_b)] {
        for x in &mut params[w..b] {
            *x = rng.gen_range(-glorot..glorot);
        }
        // forget-gate bias
        for x in &mut params[b + h..b + 2 * h] {
            *x = 1.0;
        }
    }
    let out_scale = (6.0 / (2 * h + 1) as f64).sqrt();
    for x in &mut params[lay.out_w..lay.out_b] {
        *x = rng.gen_range(-out_scale..out_scale);
    }

    let (wp, wn) = balanced(pos.len(), neg.len());
    let mut rows: Vec<(Vec<usize>, f64, f64)> = Vec::with_capacity(pos.len() + neg.len());
    let ids = |u: &Utterance| u.tokens.iter().map(|w| index[w]).collect::<Vec<usize>>();
    rows.extend(pos.utterances.iter().filter(|u| !u.tokens.is_empty()).map(|u| (ids(u), 1.0, wp)));
    rows.extend(neg.utterances.iter().filter(|u| !u.tokens.is_empty()).map(|u| (ids(u), 0.0, wn)));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr.min(0.01),
            ..AdamConfig::default()
        },
        lay.total,
    );
    let mut grad = vec![0.0; lay.total];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (toks, y, w) = &rows[i];
                let fw = rec_forward(&params, &lay, toks, de, h);
                let dz = w * (sigmoid(fw.z) - y) / batch.len() as f64;
                rec_backward(&params, &lay, &fw, toks, dz, &mut grad, de, h);
            }
            adam.step_slice(&mut params, &grad);
        }
    }
    if params.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training("recurrent domain filter diverged".into()));
    }
    Ok(DomainFilter {
        kind: FilterKind::Recurrent,
        threshold: cfg.threshold,
        model: FilterModel::Recurrent {
            words,
            emb_dim: de,
            hidden: h,
            params,
        },
        index: HashMap::new(),
    })
}

/// Keeps pool items scoring strictly above `threshold`, best first, ties by id.
pub fn stage1_filter(f: &DomainFilter, pool: &Dataset, threshold: f64) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0,1]")));
    }
    let scores = f.scores(pool);
    let mut kept: Vec<(usize, f64)> = scores.into_iter().enumerate().filter(|&(_, s)| s > threshold).collect();
    kept.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| pool.utterances[a.0].id.cmp(&pool.utterances[b.0].id))
    });
    let mut out = SelectionResult::new();
    for (i, s) in kept {
        out.push(pool.utterances[i].id.clone(), s, METHOD_STAGE1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toks;

    fn data(prefix: &str, words: &[&str], n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| {
                    let a = words[i % words.len()];
                    let b = words[(i * 7 + 3) % words.len()];
                    Utterance::unlabeled(format!("{prefix}{i}"), toks(&[a, b]))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn separable_data_is_separated() {
        let pos = data("p", &["play", "song", "music", "tune"], 40);
        let neg = data("n", &["weather", "rain", "sunny", "cold"], 40);
        for kind in [FilterKind::Logistic, FilterKind::Recurrent] {
            let cfg = DomainFilterConfig {
                kind,
                epochs: if kind == FilterKind::Recurrent { 10 } else { 200 },
                ..DomainFilterConfig::default()
            };
            let f = train_domain_filter(&pos, &neg, &cfg).unwrap();
            assert!(pos.iter().all(|u| f.score(u) > 0.5), "{kind:?}");
            assert!(neg.iter().all(|u| f.score(u) < 0.5), "{kind:?}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let pos = data("p", &["a"], 3);
        let empty = Dataset::default();
        let r = train_domain_filter(&pos, &empty, &DomainFilterConfig::default());
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn thresholds_at_the_extremes() {
        let pos = data("p", &["a", "b"], 10);
        let neg = data("n", &["c", "d"], 10);
        let f = train_domain_filter(&pos, &neg, &DomainFilterConfig::default()).unwrap();
        let pool = pos.concat(&neg).unwrap();
        assert_eq!(stage1_filter(&f, &pool, 0.0).unwrap().len(), 20);
        assert!(stage1_filter(&f, &pool, 1.0).unwrap().is_empty());
        let kept = stage1_filter(&f, &pool, 0.5).unwrap();
        assert!(kept.items.windows(2).all(|w| w[0].score > w[1].score
            || (w[0].score == w[1].score && w[0].id < w[1].id)));
    }

    #[test]
    fn save_load_round_trip() {
        let pos = data("p", &["a", "b"], 10);
        let neg = data("n", &["c", "d"], 10);
        let dir = tempfile::tempdir().unwrap();
        for kind in [FilterKind::Logistic, FilterKind::Recurrent] {
            let cfg = DomainFilterConfig {
                kind,
                epochs: 3,
                ..DomainFilterConfig::default()
            };
            let f = train_domain_filter(&pos, &neg, &cfg).unwrap();
            let path = dir.path().join("filter.json");
            f.save(&path).unwrap();
            let g = DomainFilter::load(&path).unwrap();
            for u in pos.iter() {
                assert_eq!(f.score(u), g.score(u));
            }
        }
    }
}
