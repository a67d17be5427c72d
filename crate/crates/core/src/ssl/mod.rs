//! Supervised baseline and the four semi-supervised trainers (pseudo-label,
//! distillation, virtual adversarial, cross-view) over one training loop.

mod losses;
mod trainer;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{repair_bio, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::neural::{Model, SoftLabel};

pub use losses::{
    clean_target, cvt_loss, cvt_loss_with, cvt_step, kd_step, random_unit, supervised_step, vat_loss,
    vat_perturbation, vat_step, CvtTerm, VatBatch,
};
pub use trainer::{
    train_baseline, train_pl, train_ssl, train_ssl_with_teacher, trajectory, SslOutcome, TrainOutcome, TrainStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Pl,
    Kd,
    Vat,
    Cvt,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::Baseline, Self::Pl, Self::Kd, Self::Vat, Self::Cvt];
    pub const SSL: [Method; 4] = [Self::Pl, Self::Kd, Self::Vat, Self::Cvt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Pl => "pl",
            Self::Kd => "kd",
            Self::Vat => "vat",
            Self::Cvt => "cvt",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Pl => "PL",
            Self::Kd => "KD",
            Self::Vat => "VAT",
            Self::Cvt => "CVT",
        }
    }

    /// Whether the method trains against a teacher's outputs.
    pub fn needs_teacher(&self) -> bool {
        matches!(self, Self::Pl | Self::Kd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown SSL method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub method: Method,
    /// VAT loss weight.
    pub alpha: f64,
    /// VAT perturbation norm.
    pub delta: f64,
    /// VAT power-iteration probe scale.
    pub xi: f64,
    /// CVT loss weight.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub clip_norm: Option<f64>,
    /// Probability of zeroing a token's embedding in supervised batches and
    /// the CVT student pass.
    pub word_dropout: f64,
    /// Also apply the VAT/CVT loss to labeled batches.
    pub unsup_on_labeled: bool,
    /// Include the sentence-level views in the CVT loss.
    pub cvt_sentence: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            method: Method::Baseline,
            alpha: 0.6,
            delta: 0.4,
            xi: 0.1,
            beta: 0.8,
            epochs: 20,
            batch_size: 16,
            lr: 5e-3,
            seed: 0,
            patience: 3,
            emb_dim: 32,
            hidden: 32,
            clip_norm: Some(5.0),
            word_dropout: 0.0,
            unsup_on_labeled: false,
            cvt_sentence: true,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("delta", self.delta), ("xi", self.xi)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.emb_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("batch size and model dimensions must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!("word dropout must lie in [0,1), got {}", self.word_dropout)));
        }
        Ok(())
    }

    pub fn with_method(&self, method: Method) -> SslConfig {
        SslConfig {
            method,
            ..self.clone()
        }
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub supervised_loss: f64,
    pub unsup_loss: f64,
    pub dev_ic_error: Option<f64>,
    pub dev_ner_f1: Option<f64>,
    /// Wall-clock of the parameter updates, excluding dev evaluation.
    pub seconds: f64,
}

pub fn write_epoch_log<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "supervised_loss", "unsup_loss", "dev_ic_error", "dev_ner_f1", "seconds"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        out.write_record([
            e.epoch.to_string(),
            e.supervised_loss.to_string(),
            e.unsup_loss.to_string(),
            opt(e.dev_ic_error),
            opt(e.dev_ner_f1),
            e.seconds.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<epoch log>", e))
}

pub fn save_epoch_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_epoch_log(log, file)
}

/// Teacher intent argmax and Viterbi tags for every utterance; stray `I-`
/// tags in the decoded paths are repaired so the result is valid BIO.
pub fn pseudo_label(teacher: &Model, unlabeled: &Dataset) -> Result<Dataset> {
    let labeled: Vec<Utterance> = unlabeled
        .utterances
        .par_iter()
        .map(|u| {
            let (intent, tags) = teacher.predict_labels(u)?;
            let mut out = Utterance::labeled(u.id.clone(), u.tokens.clone(), intent, repair_bio(&tags));
            out.domain = u.domain.clone();
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Dataset::with_vocab(labeled, teacher.vocab.intents.clone(), teacher.vocab.tags.clone())
}

/// Teacher intent distribution and pre-CRF per-token tag distributions.
pub fn soft_label(teacher: &Model, u: &Utterance) -> Result<SoftLabel> {
    teacher.soft_label(u)
}

pub fn soft_labels(teacher: &Model, d: &Dataset) -> Result<Vec<SoftLabel>> {
    d.utterances.par_iter().map(|u| teacher.soft_label(u)).collect()
}
