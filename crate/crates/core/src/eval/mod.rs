//! Intent error rate, exact-span NER F1, relative error reduction and the
//! experiment report tables.

mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{repair_bio, Dataset, OUTSIDE};
use crate::error::{Error, Result};
use crate::neural::Model;

pub use report::{
    experiment_report, AppendixTable, Block, ColumnCell, MeanStd, Report, ReportRow, ReportTable, RunRecord,
};

/// A typed entity span over token positions `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Spans of a tag sequence after stray-`I` repair.
pub fn spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let tags = repair_bio(tags);
    let mut out: Vec<Span> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        if let Some(ty) = tag.strip_prefix("B-") {
            out.push(Span {
                start: i,
                end: i + 1,
                label: ty.to_string(),
            });
        } else if tag.starts_with("I-") {
            out.last_mut().expect("repaired I- continues a span").end = i + 1;
        }
    }
    out
}

/// Inverse of [`spans`] for non-overlapping spans.
pub fn spans_to_bio(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for s in spans {
        tags[s.start] = format!("B-{}", s.label);
        for t in &mut tags[s.start + 1..s.end] {
            *t = format!("I-{}", s.label);
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

/// Micro-averaged exact-match span precision, recall and F1.
pub fn span_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold sequences but {} predictions", gold.len(), pred.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans(g);
        let ps = spans(p);
        let hit = ps.iter().filter(|s| gs.contains(s)).count();
        tp += hit;
        fp += ps.len() - hit;
        fn_ += gs.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Fraction of positions where `pred` differs from `gold`.
pub fn ic_error<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Input("intent error rate of an empty set".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold intents but {} predictions", gold.len(), pred.len())));
    }
    let wrong = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() != p.as_ref()).count();
    Ok(wrong as f64 / gold.len() as f64)
}

/// `(system − baseline) / baseline`; negative is an improvement.
pub fn relative_error_reduction(baseline_err: f64, system_err: f64) -> Result<f64> {
    if !(baseline_err > 0.0) {
        return Err(Error::Division(format!(
            "relative error reduction needs a positive baseline error, got {baseline_err}"
        )));
    }
    Ok((system_err - baseline_err) / baseline_err)
}

/// Model outputs over a dataset, as label strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub intents: Vec<String>,
    pub tags: Vec<Vec<String>>,
}

pub fn predict_dataset(model: &Model, d: &Dataset) -> Result<Predictions> {
    let out: Vec<(String, Vec<String>)> = d
        .utterances
        .par_iter()
        .map(|u| model.predict_labels(u))
        .collect::<Result<_>>()?;
    let (intents, tags) = out.into_iter().unzip();
    Ok(Predictions { intents, tags })
}

fn gold_labels(d: &Dataset) -> Result<(Vec<&str>, Vec<Vec<&str>>)> {
    if d.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut intents = Vec::with_capacity(d.len());
    let mut tags = Vec::with_capacity(d.len());
    for u in d.iter() {
        match (&u.intent, &u.tags) {
            (Some(i), Some(t)) => {
                intents.push(i.as_str());
                tags.push(t.iter().map(|s| s.as_str()).collect());
            }
            _ => return Err(Error::Input(format!("evaluation utterance {} is unlabeled", u.id))),
        }
    }
    Ok((intents, tags))
}

pub fn ic_error_rate(model: &Model, test: &Dataset) -> Result<f64> {
    let (gold, _) = gold_labels(test)?;
    let pred = predict_dataset(model, test)?;
    let pred: Vec<&str> = pred.intents.iter().map(|s| s.as_str()).collect();
    ic_error(&gold, &pred)
}

pub fn ner_span_f1(model: &Model, test: &Dataset) -> Result<Prf> {
    let (_, gold) = gold_labels(test)?;
    let pred = predict_dataset(model, test)?;
    let pred: Vec<Vec<&str>> = pred.tags.iter().map(|t| t.iter().map(|s| s.as_str()).collect()).collect();
    span_f1(&gold, &pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub ic_error: f64,
    pub ic_accuracy: f64,
    pub ner_precision: f64,
    pub ner_recall: f64,
    pub ner_f1: f64,
    pub ner_f1_error: f64,
    pub per_intent: BTreeMap<String, IntentScores>,
    /// Training wall-clock per epoch; kept out of the JSON so reruns compare
    /// byte for byte.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(gold: &Dataset, pred: &Predictions) -> Result<Metrics> {
        let (gi, gt) = gold_labels(gold)?;
        let pi: Vec<&str> = pred.intents.iter().map(|s| s.as_str()).collect();
        let pt: Vec<Vec<&str>> = pred.tags.iter().map(|t| t.iter().map(|s| s.as_str()).collect()).collect();
        let ic = ic_error(&gi, &pi)?;
        let ner = span_f1(&gt, &pt)?;
        let mut labels: Vec<&str> = gold.intent_vocab.iter().collect();
        for p in &pi {
            if !labels.contains(p) {
                labels.push(p);
            }
        }
        let per_intent = labels
            .into_iter()
            .filter(|l| !l.is_empty())
            .map(|label| {
                let tp = gi.iter().zip(&pi).filter(|(g, p)| **g == label && **p == label).count();
                let support = gi.iter().filter(|g| **g == label).count();
                let predicted = pi.iter().filter(|p| **p == label).count();
                let prf = Prf::from_counts(tp, predicted - tp, support - tp);
                (
                    label.to_string(),
                    IntentScores {
                        precision: prf.precision,
                        recall: prf.recall,
                        f1: prf.f1,
                        support,
                    },
                )
            })
            .collect();
        Ok(Metrics {
            n: gold.len(),
            ic_error: ic,
            ic_accuracy: 1.0 - ic,
            ner_precision: ner.precision,
            ner_recall: ner.recall,
            ner_f1: ner.f1,
            ner_f1_error: 1.0 - ner.f1,
            per_intent,
            epoch_seconds: Vec::new(),
        })
    }

    /// The early-stopping criterion: IC error plus NER F1 error.
    pub fn combined_error(&self) -> f64 {
        self.ic_error + self.ner_f1_error
    }
}

pub fn evaluate_model(model: &Model, test: &Dataset) -> Result<Metrics> {
    let pred = predict_dataset(model, test)?;
    Metrics::from_predictions(test, &pred)
}
