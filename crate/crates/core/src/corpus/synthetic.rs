//! Template-based synthetic NLU corpora.
//!
//! A seeded grammar assigns every intent a set of slot-filling templates
//! built from shared filler words, intent keywords and entity slots, so
//! gold intents and BIO spans are known by construction. Keywords are drawn
//! with a Zipf-like skew, which makes a small labeled sample miss the rare
//! ones. Out-of-domain utterances come from a separate template family over
//! a disjoint lexicon.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Utterance, OUTSIDE};
use crate::error::{Error, Result};

pub const IN_DOMAIN: &str = "in";
pub const OUT_OF_DOMAIN: &str = "ood";

const KEYWORD_SKEW: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub dev: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_intents: usize,
    pub n_entity_types: usize,
    pub templates_per_intent: usize,
    pub vocab_size: usize,
    pub label_noise: f64,
    pub sizes: SplitSizes,
    pub out_of_domain_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_intents: 4,
            n_entity_types: 4,
            templates_per_intent: 6,
            vocab_size: 400,
            label_noise: 0.1,
            sizes: SplitSizes {
                labeled: 200,
                unlabeled: 5000,
                test: 1000,
                dev: 200,
            },
            out_of_domain_fraction: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_intents", self.n_intents),
            ("n_entity_types", self.n_entity_types),
            ("templates_per_intent", self.templates_per_intent),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, f) in [
            ("label_noise", self.label_noise),
            ("out_of_domain_fraction", self.out_of_domain_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name}={f} outside [0,1]")));
            }
        }
        let min_vocab = Lexicon::min_size(self);
        if self.vocab_size < min_vocab {
            return Err(Error::Config(format!(
                "vocab_size {} too small, need at least {min_vocab}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Keyword,
    Entity(usize),
}

#[derive(Debug, Clone)]
struct Template {
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone)]
struct Lexicon {
    fillers: Vec<String>,
    ood: Vec<String>,
    keywords: Vec<Vec<String>>,
    entity_words: Vec<Vec<String>>,
}

impl Lexicon {
    fn shares(spec: &SyntheticSpec) -> (usize, usize, usize, usize) {
        let v = spec.vocab_size;
        let n_fill = (v / 10).max(4);
        let n_ood = (v / 5).max(6);
        let rest = v.saturating_sub(n_fill + n_ood);
        let kw_total = rest * 2 / 5;
        let kw_per_intent = kw_total / spec.n_intents.max(1);
        let ent_per_type = (rest - kw_total) / spec.n_entity_types.max(1);
        (n_fill, n_ood, kw_per_intent, ent_per_type)
    }

    fn min_size(spec: &SyntheticSpec) -> usize {
        // at least 2 keywords per intent and 2 words per entity type
        let need = 4 + 6 + 2 * spec.n_intents * 5 / 2 + 2 * spec.n_entity_types * 5 / 3;
        let mut v = need;
        loop {
            let probe = SyntheticSpec {
                vocab_size: v,
                ..spec.clone()
            };
            let (_, _, kw, ent) = Lexicon::shares(&probe);
            if kw >= 2 && ent >= 2 {
                return v;
            }
            v += 1;
        }
    }

    fn build(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Lexicon {
        let words = pseudo_words(spec.vocab_size, rng);
        let (n_fill, n_ood, kw, ent) = Lexicon::shares(spec);
        let mut it = words.into_iter();
        let fillers: Vec<String> = it.by_ref().take(n_fill).collect();
        let ood: Vec<String> = it.by_ref().take(n_ood).collect();
        let keywords = (0..spec.n_intents)
            .map(|_| it.by_ref().take(kw).collect())
            .collect();
        let entity_words = (0..spec.n_entity_types)
            .map(|_| it.by_ref().take(ent).collect())
            .collect();
        Lexicon {
            fillers,
            ood,
            keywords,
            entity_words,
        }
    }
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.gen_range(0..ONSETS.len())],
                    VOWELS[rng.gen_range(0..VOWELS.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// The seeded grammar behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    spec: SyntheticSpec,
    lexicon: Lexicon,
    intents: Vec<String>,
    entity_types: Vec<String>,
    /// Entity values per type, each one or two tokens.
    values: Vec<Vec<Vec<String>>>,
    templates: Vec<Vec<Template>>,
    ood_templates: Vec<Vec<String>>,
    keyword_weights: Vec<f64>,
}

impl SyntheticGrammar {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lexicon = Lexicon::build(spec, &mut rng);
        let intents: Vec<String> = (0..spec.n_intents).map(|i| format!("Intent{i}")).collect();
        let entity_types: Vec<String> =
            (0..spec.n_entity_types).map(|i| format!("Ent{i}")).collect();

        let values = lexicon
            .entity_words
            .iter()
            .map(|words| {
                let mut vals: Vec<Vec<String>> = words.iter().map(|w| vec![w.clone()]).collect();
                for _ in 0..words.len() / 2 {
                    let a = words.choose(&mut rng).unwrap().clone();
                    let b = words.choose(&mut rng).unwrap().clone();
                    let v = vec![a, b];
                    if !vals.contains(&v) {
                        vals.push(v);
                    }
                }
                vals
            })
            .collect();

        let n_types = spec.n_entity_types;
        let templates = (0..spec.n_intents)
            .map(|intent| {
                let own: Vec<usize> = if n_types == 1 {
                    vec![0]
                } else {
                    vec![intent % n_types, (intent + 1) % n_types]
                };
                (0..spec.templates_per_intent)
                    .map(|_| random_template(&lexicon.fillers, &own, &mut rng))
                    .collect()
            })
            .collect();

        let n_ood = (spec.templates_per_intent * 2).max(4);
        let ood_templates = (0..n_ood)
            .map(|_| {
                let len = rng.gen_range(2..=5);
                (0..len)
                    .map(|_| lexicon.ood.choose(&mut rng).unwrap().clone())
                    .collect()
            })
            .collect();

        let kw = lexicon.keywords[0].len();
        let keyword_weights = (0..kw)
            .map(|r| 1.0 / ((r + 1) as f64).powf(KEYWORD_SKEW))
            .collect();

        Ok(SyntheticGrammar {
            spec: spec.clone(),
            lexicon,
            intents,
            entity_types,
            values,
            templates,
            ood_templates,
            keyword_weights,
        })
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    fn sample_keyword(&self, intent: usize, rng: &mut ChaCha8Rng) -> &str {
        let total: f64 = self.keyword_weights.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        for (r, w) in self.keyword_weights.iter().enumerate() {
            if x < *w {
                return &self.lexicon.keywords[intent][r];
            }
            x -= w;
        }
        self.lexicon.keywords[intent].last().unwrap()
    }

    /// One in-domain utterance with gold labels.
    fn sample_in_domain(&self, rng: &mut ChaCha8Rng) -> (usize, Vec<String>, Vec<String>) {
        let intent = rng.gen_range(0..self.intents.len());
        let template = self.templates[intent].choose(rng).unwrap();
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for piece in &template.pieces {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.clone());
                    tags.push(OUTSIDE.to_string());
                }
                Piece::Keyword => {
                    tokens.push(self.sample_keyword(intent, rng).to_string());
                    tags.push(OUTSIDE.to_string());
                }
                Piece::Entity(ty) => {
                    let value = self.values[*ty].choose(rng).unwrap();
                    for (i, w) in value.iter().enumerate() {
                        tokens.push(w.clone());
                        let prefix = if i == 0 { "B" } else { "I" };
                        tags.push(format!("{prefix}-{}", self.entity_types[*ty]));
                    }
                }
            }
        }
        (intent, tokens, tags)
    }

    fn sample_out_of_domain(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let template = self.ood_templates.choose(rng).unwrap();
        let mut tokens = template.clone();
        // one content slot so off-template utterances are not all identical
        let pos = rng.gen_range(0..tokens.len());
        tokens[pos] = self.lexicon.ood.choose(rng).unwrap().clone();
        tokens
    }

    /// Returns `(intent, template index)` of an in-domain template that
    /// generates `tokens`, if any.
    pub fn match_template(&self, tokens: &[String]) -> Option<(usize, usize)> {
        for (intent, templates) in self.templates.iter().enumerate() {
            for (ti, t) in templates.iter().enumerate() {
                if self.matches(intent, &t.pieces, tokens) {
                    return Some((intent, ti));
                }
            }
        }
        None
    }

    fn matches(&self, intent: usize, pieces: &[Piece], tokens: &[String]) -> bool {
        let Some((first, rest)) = pieces.split_first() else {
            return tokens.is_empty();
        };
        match first {
            Piece::Word(w) => {
                tokens.first() == Some(w) && self.matches(intent, rest, &tokens[1..])
            }
            Piece::Keyword => tokens.first().is_some_and(|t| {
                self.lexicon.keywords[intent].contains(t) && self.matches(intent, rest, &tokens[1..])
            }),
            Piece::Entity(ty) => self.values[*ty].iter().any(|v| {
                tokens.len() >= v.len()
                    && tokens[..v.len()] == v[..]
                    && self.matches(intent, rest, &tokens[v.len()..])
            }),
        }
    }
}

fn random_template(fillers: &[String], types: &[usize], rng: &mut ChaCha8Rng) -> Template {
    let n_fill = rng.gen_range(1..=3);
    let n_kw = rng.gen_range(1..=2);
    let n_ent = rng.gen_range(0..=2.min(types.len()));
    let mut pieces: Vec<Piece> = Vec::new();
    for _ in 0..n_fill {
        pieces.push(Piece::Word(fillers.choose(rng).unwrap().clone()));
    }
    for _ in 0..n_kw {
        pieces.push(Piece::Keyword);
    }
    let mut ent_types: Vec<usize> = types.to_vec();
    ent_types.shuffle(rng);
    for ty in ent_types.into_iter().take(n_ent) {
        pieces.push(Piece::Entity(ty));
    }
    pieces.shuffle(rng);
    Template { pieces }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// The unlabeled pool with its hidden gold labels (out-of-domain
    /// records stay unlabeled).
    pub unlabeled_gold: Dataset,
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

fn labeled_split(
    g: &SyntheticGrammar,
    prefix: &str,
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let (mut intent, tokens, tags) = g.sample_in_domain(rng);
            if noise > 0.0 && g.intents.len() > 1 && rng.gen::<f64>() < noise {
                let shift = rng.gen_range(1..g.intents.len());
                intent = (intent + shift) % g.intents.len();
            }
            Utterance::labeled(format!("{prefix}-{i:06}"), tokens, &g.intents[intent], tags)
                .with_domain(IN_DOMAIN)
        })
        .collect()
}

/// Deterministic in `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    let g = SyntheticGrammar::new(spec, seed)?;
    generate_from_grammar(&g, seed)
}

pub fn generate_from_grammar(g: &SyntheticGrammar, seed: u64) -> Result<SyntheticCorpus> {
    let spec = &g.spec;
    let intents = LabelSet::from_labels(g.intents.iter().cloned());
    let mut tags = LabelSet::from_labels([OUTSIDE]);
    for ty in &g.entity_types {
        tags.insert(format!("B-{ty}"));
        tags.insert(format!("I-{ty}"));
    }
    let ds = |utts: Vec<Utterance>| Dataset::with_vocab(utts, intents.clone(), tags.clone());

    let labeled = labeled_split(g, "lab", spec.sizes.labeled, spec.label_noise, &mut stream(seed, 1));
    let dev = labeled_split(g, "dev", spec.sizes.dev, 0.0, &mut stream(seed, 2));
    let test = labeled_split(g, "test", spec.sizes.test, 0.0, &mut stream(seed, 3));

    let mut rng = stream(seed, 4);
    let mut gold = Vec::with_capacity(spec.sizes.unlabeled);
    for i in 0..spec.sizes.unlabeled {
        let id = format!("unl-{i:06}");
        if rng.gen::<f64>() < spec.out_of_domain_fraction {
            let tokens = g.sample_out_of_domain(&mut rng);
            gold.push(Utterance::unlabeled(id, tokens).with_domain(OUT_OF_DOMAIN));
        } else {
            let (intent, tokens, t) = g.sample_in_domain(&mut rng);
            gold.push(
                Utterance::labeled(id, tokens, &g.intents[intent], t).with_domain(IN_DOMAIN),
            );
        }
    }
    let unlabeled: Vec<Utterance> = gold.iter().map(Utterance::strip_labels).collect();

    Ok(SyntheticCorpus {
        labeled: ds(labeled)?,
        unlabeled: ds(unlabeled)?,
        dev: ds(dev)?,
        test: ds(test)?,
        unlabeled_gold: ds(gold)?,
    })
}

/// Out-of-domain utterances from the same grammar as
/// `generate_synthetic(spec, seed)`, e.g. negatives for a domain filter.
pub fn generate_background(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    let g = SyntheticGrammar::new(spec, seed)?;
    let mut rng = stream(seed, 5);
    let utts = (0..n)
        .map(|i| {
            Utterance::unlabeled(format!("bg-{i:06}"), g.sample_out_of_domain(&mut rng))
                .with_domain(OUT_OF_DOMAIN)
        })
        .collect();
    Dataset::new(utts)
}
