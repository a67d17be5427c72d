//! The shared epoch loop with dev early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{cvt_step, kd_step, supervised_step, vat_step};
use super::{pseudo_label, soft_labels, EpochLog, Method, SslConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::neural::{Adam, AdamConfig, Encoded, Model, ModelParams, ModelVocab, SoftLabel};

// RNG stream ids, all derived from the config seed.
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_VAT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Invariant monitors accumulated over every step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub steps: u64,
    /// Smallest per-utterance unsupervised loss observed.
    pub min_unsup_loss: Option<f64>,
    /// Largest `|‖d‖ − δ|` over emitted VAT perturbations.
    pub max_norm_deviation: Option<f64>,
    pub n_perturbations: u64,
}

impl TrainStats {
    fn observe_unsup(&mut self, l: f64) {
        self.min_unsup_loss = Some(self.min_unsup_loss.map_or(l, |m| m.min(l)));
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept; 0 means the initialisation.
    pub best_epoch: usize,
    pub stats: TrainStats,
    /// Parameters after every epoch, when requested for tests.
    pub trajectory: Vec<ModelParams>,
}

impl TrainOutcome {
    /// Mean per-epoch update time.
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|e| e.seconds).sum::<f64>() / self.log.len() as f64
    }
}

/// A semi-supervised run: teacher (PL/KD), pseudo-labeled pool (PL) and
/// the trained student.
#[derive(Debug, Clone)]
pub struct SslOutcome {
    pub teacher: Option<Model>,
    pub pseudo: Option<Dataset>,
    pub student: TrainOutcome,
}

enum Unsup {
    None,
    Kd(Vec<SoftLabel>),
    Vat,
    Cvt,
}

struct Loop<'a> {
    cfg: &'a SslConfig,
    labeled: Vec<Encoded>,
    unlabeled: Vec<Encoded>,
    unsup: Unsup,
    dev: &'a Dataset,
    keep_trajectory: bool,
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    order.chunks(size).collect()
}

fn gather(items: &[Encoded], idx: &[usize]) -> Vec<Encoded> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn dropout_scales(batch: &[Encoded], p: f64, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    (p > 0.0).then(|| {
        batch
            .iter()
            .map(|e| e.tokens.iter().map(|_| if rng.gen_bool(p) { 0.0 } else { 1.0 }).collect())
            .collect()
    })
}

fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{what} loss diverged ({loss}) in epoch {epoch}")))
    }
}

fn as_training(e: Error) -> Error {
    match e {
        Error::Numeric { id, message } => Error::Training(format!("divergence on {id}: {message}")),
        other => other,
    }
}

impl Loop<'_> {
    fn run(self, mut model: Model) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                clip_norm: cfg.clip_norm,
                ..AdamConfig::default()
            },
            model.params.len(),
        );
        let mut lab_rng = stream(cfg.seed, STREAM_LABELED);
        let mut unl_rng = stream(cfg.seed, STREAM_UNLABELED);
        let mut vat_rng = stream(cfg.seed, STREAM_VAT);
        let mut drop_rng = stream(cfg.seed, STREAM_DROPOUT);
        let mut stats = TrainStats::default();
        let mut log = Vec::new();
        let mut trajectory = Vec::new();
        let mut best: Option<(f64, ModelParams, usize)> = None;
        let mut bad_epochs = 0;
        let mut lab_order: Vec<usize> = (0..self.labeled.len()).collect();
        let mut unl_order: Vec<usize> = (0..self.unlabeled.len()).collect();
        let uses_unlabeled = !matches!(self.unsup, Unsup::None) && !self.unlabeled.is_empty();

        for epoch in 1..=cfg.epochs {
            let start = Instant::now();
            lab_order.shuffle(&mut lab_rng);
            if uses_unlabeled {
                unl_order.shuffle(&mut unl_rng);
            }
            let lab_batches = batches(&lab_order, cfg.batch_size);
            let unl_batches = if uses_unlabeled { batches(&unl_order, cfg.batch_size) } else { Vec::new() };
            let iters = lab_batches.len().max(unl_batches.len());
            let (mut sup_sum, mut sup_n, mut uns_sum, mut uns_n) = (0.0, 0usize, 0.0, 0usize);

            for i in 0..iters {
                let lb = gather(&self.labeled, lab_batches[i % lab_batches.len()]);
                let scales = dropout_scales(&lb, cfg.word_dropout, &mut drop_rng);
                let (sl, mut grads) = supervised_step(&model.params, &lb, scales.as_deref()).map_err(as_training)?;
                check_finite(sl, "supervised", epoch)?;
                sup_sum += sl;
                sup_n += 1;
                let ub_idx = (!unl_batches.is_empty()).then(|| unl_batches[i % unl_batches.len()]);
                match (&self.unsup, ub_idx) {
                    (Unsup::Kd(targets), Some(idx)) => {
                        adam.step(&mut model.params, &grads);
                        stats.steps += 1;
                        let ub = gather(&self.unlabeled, idx);
                        let t: Vec<&SoftLabel> = idx.iter().map(|&j| &targets[j]).collect();
                        let (ul, g) = kd_step(&model.params, &ub, &t).map_err(as_training)?;
                        check_finite(ul, "distillation", epoch)?;
                        stats.observe_unsup(ul);
                        uns_sum += ul;
                        uns_n += 1;
                        grads = g;
                    }
                    (Unsup::Vat, Some(idx)) => {
                        let mut ub = gather(&self.unlabeled, idx);
                        if cfg.unsup_on_labeled {
                            ub.extend(lb.iter().cloned());
                        }
                        let v = vat_step(&model.params, &ub, cfg.delta, cfg.xi, &mut vat_rng).map_err(as_training)?;
                        check_finite(v.loss, "VAT", epoch)?;
                        for (&l, &n) in v.per_item.iter().zip(&v.norms) {
                            stats.observe_unsup(l);
                            let dev = (n - cfg.delta).abs();
                            stats.max_norm_deviation = Some(stats.max_norm_deviation.map_or(dev, |m| m.max(dev)));
                            stats.n_perturbations += 1;
                        }
                        uns_sum += v.loss;
                        uns_n += 1;
                        if let Some(g) = v.grads {
                            grads.add_scaled(&g, cfg.alpha);
                        }
                    }
                    (Unsup::Cvt, Some(idx)) => {
                        let mut ub = gather(&self.unlabeled, idx);
                        if cfg.unsup_on_labeled {
                            ub.extend(lb.iter().cloned());
                        }
                        let scales = dropout_scales(&ub, cfg.word_dropout, &mut drop_rng);
                        let (ul, g) = cvt_step(&model.params, &ub, cfg.cvt_sentence, scales.as_deref()).map_err(as_training)?;
                        check_finite(ul, "CVT", epoch)?;
                        stats.observe_unsup(ul);
                        uns_sum += ul;
                        uns_n += 1;
                        grads.add_scaled(&g, cfg.beta);
                    }
                    _ => {}
                }
                adam.step(&mut model.params, &grads);
                stats.steps += 1;
            }
            if !model.params.is_finite() {
                return Err(Error::Training(format!("parameters became non-finite in epoch {epoch}")));
            }
            let seconds = start.elapsed().as_secs_f64();
            if self.keep_trajectory {
                trajectory.push(model.params.clone());
            }

            let mut entry = EpochLog {
                epoch,
                supervised_loss: sup_sum / sup_n.max(1) as f64,
                unsup_loss: uns_sum / uns_n.max(1) as f64,
                dev_ic_error: None,
                dev_ner_f1: None,
                seconds,
            };
            let mut stop = false;
            if !self.dev.is_empty() {
                let m = evaluate_model(&model, self.dev)?;
                entry.dev_ic_error = Some(m.ic_error);
                entry.dev_ner_f1 = Some(m.ner_f1);
                let score = m.combined_error();
                if best.as_ref().map_or(true, |b| score < b.0) {
                    best = Some((score, model.params.clone(), epoch));
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    stop = bad_epochs >= cfg.patience;
                }
            }
            log::debug!(
                "{} epoch {epoch}: sup {:.4} unsup {:.4} dev {:?}/{:?} {:.2}s",
                cfg.method,
                entry.supervised_loss,
                entry.unsup_loss,
                entry.dev_ic_error,
                entry.dev_ner_f1,
                seconds
            );
            log.push(entry);
            if stop {
                break;
            }
        }
        let best_epoch = match best {
            Some((_, params, e)) => {
                model.params = params;
                e
            }
            None => log.len(),
        };
        Ok(TrainOutcome {
            model,
            log,
            best_epoch,
            stats,
            trajectory,
        })
    }
}

fn encode_labeled(vocab: &ModelVocab, d: &Dataset) -> Result<Vec<Encoded>> {
    let enc = vocab.encode_all(d);
    if let Some(bad) = enc.iter().find(|e| !e.is_labeled()) {
        return Err(Error::Input(format!("training utterance {} lacks usable labels", bad.id)));
    }
    Ok(enc)
}

fn start(
    labeled: &Dataset,
    unlabeled: &Dataset,
    dev: &Dataset,
    cfg: &SslConfig,
    unsup: Unsup,
    keep_trajectory: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Input("labeled training set is empty".into()));
    }
    let vocab = ModelVocab::build(&[labeled, unlabeled], labeled);
    let model = Model::new(vocab, cfg.emb_dim, cfg.hidden, cfg.seed)?;
    let lab = encode_labeled(&model.vocab, labeled)?;
    let unl = model.vocab.encode_all(unlabeled);
    Loop {
        cfg,
        labeled: lab,
        unlabeled: unl,
        unsup,
        dev,
        keep_trajectory,
    }
    .run(model)
}

/// Supervised training on the labeled set only.
pub fn train_baseline(labeled: &Dataset, dev: &Dataset, cfg: &SslConfig) -> Result<TrainOutcome> {
    start(labeled, &Dataset::default(), dev, cfg, Unsup::None, false)
}

/// Teacher on `labeled`, pseudo-labels for `unlabeled`, then a fresh
/// student on the union.
pub fn train_pl(labeled: &Dataset, unlabeled: &Dataset, dev: &Dataset, cfg: &SslConfig) -> Result<SslOutcome> {
    train_ssl_with_teacher(labeled, unlabeled, dev, &cfg.with_method(Method::Pl), None)
}

/// Dispatches on `cfg.method`; the teacher for PL/KD is a baseline
/// trained with the same config.
pub fn train_ssl(labeled: &Dataset, unlabeled: &Dataset, dev: &Dataset, cfg: &SslConfig) -> Result<SslOutcome> {
    train_ssl_with_teacher(labeled, unlabeled, dev, cfg, None)
}

/// As [`train_ssl`], reusing `teacher` when given.
pub fn train_ssl_with_teacher(
    labeled: &Dataset,
    unlabeled: &Dataset,
    dev: &Dataset,
    cfg: &SslConfig,
    teacher: Option<&Model>,
) -> Result<SslOutcome> {
    train_ssl_inner(labeled, unlabeled, dev, cfg, teacher, false)
}

pub(crate) fn train_ssl_inner(
    labeled: &Dataset,
    unlabeled: &Dataset,
    dev: &Dataset,
    cfg: &SslConfig,
    teacher: Option<&Model>,
    keep_trajectory: bool,
) -> Result<SslOutcome> {
    cfg.validate()?;
    let get_teacher = || -> Result<Model> {
        match teacher {
            Some(t) => Ok(t.clone()),
            None => Ok(start(labeled, &Dataset::default(), dev, &cfg.with_method(Method::Baseline), Unsup::None, false)?.model),
        }
    };
    match cfg.method {
        Method::Baseline => Ok(SslOutcome {
            teacher: None,
            pseudo: None,
            student: start(labeled, &Dataset::default(), dev, cfg, Unsup::None, keep_trajectory)?,
        }),
        Method::Pl => {
            let t = get_teacher()?;
            let pseudo = pseudo_label(&t, unlabeled)?;
            let union = labeled.concat(&pseudo)?;
            let student = start(&union, &Dataset::default(), dev, cfg, Unsup::None, keep_trajectory)?;
            Ok(SslOutcome {
                teacher: Some(t),
                pseudo: Some(pseudo),
                student,
            })
        }
        Method::Kd => {
            let t = get_teacher()?;
            let targets = soft_labels(&t, unlabeled)?;
            let student = start(labeled, unlabeled, dev, cfg, Unsup::Kd(targets), keep_trajectory)?;
            Ok(SslOutcome {
                teacher: Some(t),
                pseudo: None,
                student,
            })
        }
        Method::Vat | Method::Cvt => {
            let unsup = if cfg.method == Method::Vat { Unsup::Vat } else { Unsup::Cvt };
            Ok(SslOutcome {
                teacher: None,
                pseudo: None,
                student: start(labeled, unlabeled, dev, cfg, unsup, keep_trajectory)?,
            })
        }
    }
}

/// Per-epoch parameter trajectory, for reproducibility checks.
pub fn trajectory(labeled: &Dataset, unlabeled: &Dataset, dev: &Dataset, cfg: &SslConfig) -> Result<Vec<ModelParams>> {
    Ok(train_ssl_inner(labeled, unlabeled, dev, cfg, None, true)?.student.trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::SplitSizes;
    use crate::corpus::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

    fn separable(seed: u64) -> SyntheticCorpus {
        let spec = SyntheticSpec {
            label_noise: 0.0,
            sizes: SplitSizes {
                labeled: 200,
                unlabeled: 100,
                test: 50,
                dev: 200,
            },
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, seed).unwrap()
    }

    fn small_cfg() -> SslConfig {
        SslConfig {
            emb_dim: 16,
            hidden: 16,
            seed: 11,
            ..SslConfig::default()
        }
    }

    #[test]
    fn baseline_fits_separable_data_within_twenty_epochs() {
        let c = separable(2);
        let out = train_baseline(&c.labeled, &c.dev, &small_cfg()).unwrap();
        assert!(out.log.len() <= 20);
        let m = evaluate_model(&out.model, &c.dev).unwrap();
        assert!(m.ic_error <= 0.05, "dev IC error {}", m.ic_error);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let c = separable(3);
        let cfg = SslConfig {
            emb_dim: 6,
            hidden: 4,
            epochs: 2,
            ..small_cfg()
        };
        let a = train_baseline(&c.labeled, &c.dev, &cfg).unwrap();
        let b = train_baseline(&c.labeled, &c.dev, &cfg).unwrap();
        assert_eq!(a.model.params.as_slice(), b.model.params.as_slice());
        let other = train_baseline(&c.labeled, &c.dev, &SslConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.model.params.as_slice(), other.model.params.as_slice());
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let c = separable(4);
        let cfg = SslConfig {
            emb_dim: 6,
            hidden: 4,
            epochs: 0,
            ..small_cfg()
        };
        let out = train_baseline(&c.labeled, &c.dev, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, 0);
        let vocab = ModelVocab::build(&[&c.labeled, &Dataset::default()], &c.labeled);
        let init = Model::new(vocab, cfg.emb_dim, cfg.hidden, cfg.seed).unwrap();
        assert_eq!(out.model.params.as_slice(), init.params.as_slice());
    }

    #[test]
    fn empty_labeled_set_is_an_input_error() {
        let c = separable(5);
        let err = train_baseline(&Dataset::default(), &c.dev, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
    }

    #[test]
    fn baseline_method_delegates_to_train_baseline() {
        let c = separable(6);
        let cfg = SslConfig {
            emb_dim: 6,
            hidden: 4,
            epochs: 2,
            ..small_cfg()
        };
        let direct = train_baseline(&c.labeled, &c.dev, &cfg).unwrap();
        let via = train_ssl(&c.labeled, &c.unlabeled, &c.dev, &cfg).unwrap();
        assert!(via.teacher.is_none() && via.pseudo.is_none());
        assert_eq!(direct.model.params.as_slice(), via.student.model.params.as_slice());
    }

    #[test]
    fn pl_student_trains_on_labeled_plus_pseudo() {
        let c = separable(7);
        let cfg = SslConfig {
            emb_dim: 6,
            hidden: 4,
            epochs: 1,
            ..small_cfg()
        };
        let out = train_pl(&c.labeled, &c.unlabeled, &c.dev, &cfg).unwrap();
        let pseudo = out.pseudo.unwrap();
        assert_eq!(pseudo.len(), c.unlabeled.len());
        assert!(out.teacher.is_some());
    }

    #[test]
    fn dropout_masks_are_binary_and_shaped_like_the_batch() {
        let c = separable(8);
        let vocab = ModelVocab::build(&[&c.labeled], &c.labeled);
        let batch = encode_labeled(&vocab, &c.labeled).unwrap();
        let mut rng = stream(1, STREAM_DROPOUT);
        assert!(dropout_scales(&batch, 0.0, &mut rng).is_none());
        let masks = dropout_scales(&batch, 0.5, &mut rng).unwrap();
        assert_eq!(masks.len(), batch.len());
        let mut dropped = 0;
        for (m, e) in masks.iter().zip(&batch) {
            assert_eq!(m.len(), e.tokens.len());
            assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
            dropped += m.iter().filter(|&&v| v == 0.0).count();
        }
        assert!(dropped > 0);
    }

    #[test]
    fn streams_are_distinct() {
        let a: u64 = stream(1, STREAM_LABELED).gen();
        let b: u64 = stream(1, STREAM_UNLABELED).gen();
        assert_ne!(a, b);
        assert_eq!(a, stream(1, STREAM_LABELED).gen::<u64>());
    }
}
