//! The multi-task network: embeddings → shared BiLSTM → {IC BiLSTM →
//! softmax head, NER BiLSTM → emissions → CRF}.
//!
//! The IC head reads the last forward and the first backward state of the
//! IC encoder. Backpropagation is written out by hand; [`backward`]
//! consumes gradients with respect to the trace outputs and returns the
//! gradient with respect to the input embeddings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::crf;
use super::lstm::{self, LstmRun};
use super::matrix::{argmax, cross_entropy, gemv_acc, gemv_t_acc, outer_acc, softmax, Matrix};
use super::params::{Cell, ModelDims, ModelParams};
use crate::corpus::{Dataset, LabelSet, Utterance, OUTSIDE};
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Word, intent and tag indexing for one model. Word 0 is the unknown word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub intents: LabelSet,
    pub tags: LabelSet,
}

impl ModelVocab {
    pub fn new(words: Vec<String>, intents: LabelSet, tags: LabelSet) -> Self {
        let mut all = vec![UNK.to_string()];
        all.extend(words.into_iter().filter(|w| w != UNK));
        let mut index = HashMap::with_capacity(all.len());
        let mut dedup = Vec::with_capacity(all.len());
        for w in all {
            if !index.contains_key(&w) {
                index.insert(w.clone(), dedup.len());
                dedup.push(w);
            }
        }
        ModelVocab {
            words: dedup,
            index,
            intents,
            tags,
        }
    }

    /// Words in first-seen order over `text`; labels from `labeled`.
    pub fn build(text: &[&Dataset], labeled: &Dataset) -> Self {
        let words = text
            .iter()
            .flat_map(|d| d.utterances.iter())
            .flat_map(|u| u.tokens.iter().cloned())
            .collect();
        let mut tags = LabelSet::from_labels([OUTSIDE]);
        for t in labeled.tag_vocab.iter() {
            tags.insert(t.to_string());
        }
        ModelVocab::new(words, labeled.intent_vocab.clone(), tags)
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(0)
    }

    pub fn dims(&self, emb_dim: usize, hidden: usize) -> ModelDims {
        ModelDims {
            vocab_size: self.words.len(),
            emb_dim,
            hidden,
            n_intents: self.intents.len().max(1),
            n_tags: self.tags.len(),
        }
    }

    pub fn encode(&self, u: &Utterance) -> Encoded {
        Encoded {
            id: u.id.clone(),
            tokens: u.tokens.iter().map(|w| self.word_id(w)).collect(),
            intent: u.intent.as_deref().and_then(|i| self.intents.index_of(i)),
            tags: u.tags.as_ref().and_then(|ts| {
                ts.iter()
                    .map(|t| self.tags.index_of(t))
                    .collect::<Option<Vec<usize>>>()
            }),
        }
    }

    pub fn encode_all(&self, d: &Dataset) -> Vec<Encoded> {
        d.utterances.iter().map(|u| self.encode(u)).collect()
    }
}

/// An utterance mapped to model indices. Labels outside the model's label
/// sets become `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub id: String,
    pub tokens: Vec<usize>,
    pub intent: Option<usize>,
    pub tags: Option<Vec<usize>>,
}

impl Encoded {
    pub fn is_labeled(&self) -> bool {
        self.intent.is_some() && self.tags.is_some()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-call input modifications.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Added to the token embeddings, `L × d_e`.
    pub perturbation: Option<&'a Matrix>,
    /// Per-token multiplier applied to the embeddings before the
    /// perturbation (word dropout).
    pub token_scale: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub ic_logits: Vec<f64>,
    /// `L × K`
    pub ner_emissions: Matrix,
    /// NER-encoder forward states `f_i`, `L × d_h`.
    pub fwd_states: Matrix,
    /// NER-encoder backward states `b_i`, `L × d_h`.
    pub bwd_states: Matrix,
    /// Last forward state of the IC encoder.
    pub pooled_fwd: Vec<f64>,
    /// First backward state of the IC encoder.
    pub pooled_bwd: Vec<f64>,
    tokens: Vec<usize>,
    token_scale: Option<Vec<f64>>,
    inputs: Vec<f64>,
    shared: [LstmRun; 2],
    shared_out: Vec<f64>,
    ic: [LstmRun; 2],
    ner: [LstmRun; 2],
    ic_in: Vec<f64>,
    ner_in: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The embedding inputs actually fed to the encoder, `L × d_e`.
    pub fn inputs(&self) -> Matrix {
        Matrix::from_vec(self.tokens.len(), self.inputs.len() / self.tokens.len(), self.inputs.clone())
    }

    pub fn ic_dist(&self) -> Vec<f64> {
        softmax(&self.ic_logits)
    }

    pub fn token_dists(&self) -> Matrix {
        let k = self.ner_emissions.cols;
        let mut m = Matrix::zeros(self.ner_emissions.rows, k);
        for t in 0..m.rows {
            m.row_mut(t).copy_from_slice(&softmax(self.ner_emissions.row(t)));
        }
        m
    }

    pub fn soft_label(&self) -> SoftLabel {
        SoftLabel {
            ic_dist: self.ic_dist(),
            token_dists: self.token_dists(),
        }
    }
}

fn concat_states(a: &LstmRun, b: &LstmRun) -> Vec<f64> {
    let h = a.hidden;
    let mut out = Vec::with_capacity(a.len * 2 * h);
    for t in 0..a.len {
        out.extend_from_slice(a.state(t));
        out.extend_from_slice(b.state(t));
    }
    out
}

fn bilstm(p: &ModelParams, fwd: Cell, bwd: Cell, inputs: &[f64], in_dim: usize) -> [LstmRun; 2] {
    [
        lstm::forward(p.cell(fwd), inputs, in_dim, false),
        lstm::forward(p.cell(bwd), inputs, in_dim, true),
    ]
}

pub fn forward_encoded(p: &ModelParams, tokens: &[usize], opts: ForwardOptions<'_>) -> Result<ForwardTrace> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot run the model on an empty token list".into()));
    }
    let d = *p.dims();
    let (l, de, h) = (tokens.len(), d.emb_dim, d.hidden);
    let mut inputs = Vec::with_capacity(l * de);
    for (t, &w) in tokens.iter().enumerate() {
        let w = if w < d.vocab_size { w } else { 0 };
        let s = opts.token_scale.map_or(1.0, |s| s[t]);
        inputs.extend(p.embedding(w).iter().map(|x| x * s));
    }
    if let Some(pert) = opts.perturbation {
        assert_eq!((pert.rows, pert.cols), (l, de), "perturbation shape");
        for (x, e) in inputs.iter_mut().zip(&pert.data) {
            *x += e;
        }
    }

    let shared = bilstm(p, Cell::SharedFwd, Cell::SharedBwd, &inputs, de);
    let shared_out = concat_states(&shared[0], &shared[1]);
    let ic = bilstm(p, Cell::IcFwd, Cell::IcBwd, &shared_out, 2 * h);
    let ner = bilstm(p, Cell::NerFwd, Cell::NerBwd, &shared_out, 2 * h);

    let pooled_fwd = ic[0].state(l - 1).to_vec();
    let pooled_bwd = ic[1].state(0).to_vec();
    let mut ic_in = pooled_fwd.clone();
    ic_in.extend_from_slice(&pooled_bwd);
    let head = p.ic_head();
    let mut ic_logits = head.b.to_vec();
    gemv_acc(head.w, &ic_in, &mut ic_logits);

    let ner_in = concat_states(&ner[0], &ner[1]);
    let emit = p.ner_emit();
    let k = emit.out;
    let mut em = Matrix::zeros(l, k);
    for t in 0..l {
        let row = em.row_mut(t);
        row.copy_from_slice(emit.b);
        gemv_acc(emit.w, &ner_in[t * 2 * h..(t + 1) * 2 * h], row);
    }

    Ok(ForwardTrace {
        ic_logits,
        ner_emissions: em,
        fwd_states: Matrix::from_vec(l, h, ner[0].states.clone()),
        bwd_states: Matrix::from_vec(l, h, ner[1].states.clone()),
        pooled_fwd,
        pooled_bwd,
        tokens: tokens.to_vec(),
        token_scale: opts.token_scale.map(<[f64]>::to_vec),
        inputs,
        shared,
        shared_out,
        ic,
        ner,
        ic_in,
        ner_in,
    })
}

/// Gradients of a loss with respect to the trace outputs. Absent parts
/// are zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub ic_logits: Option<Vec<f64>>,
    pub emissions: Option<Matrix>,
    pub fwd_states: Option<Matrix>,
    pub bwd_states: Option<Matrix>,
    pub pooled_fwd: Option<Vec<f64>>,
    pub pooled_bwd: Option<Vec<f64>>,
}

fn bilstm_backward(
    p: &ModelParams,
    grads: &mut ModelParams,
    cells: (Cell, Cell),
    runs: &[LstmRun; 2],
    inputs: &[f64],
    in_dim: usize,
    d_fwd: &[f64],
    d_bwd: &[f64],
) -> Vec<f64> {
    let (gw, gb) = grads.cell_grad(cells.0);
    let mut dx = lstm::backward(p.cell(cells.0), &runs[0], inputs, in_dim, d_fwd, gw, gb);
    let (gw, gb) = grads.cell_grad(cells.1);
    let dx2 = lstm::backward(p.cell(cells.1), &runs[1], inputs, in_dim, d_bwd, gw, gb);
    for (a, b) in dx.iter_mut().zip(dx2) {
        *a += b;
    }
    dx
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the encoder inputs (`L × d_e`).
pub fn backward(p: &ModelParams, trace: &ForwardTrace, up: &Upstream, grads: &mut ModelParams) -> Matrix {
    let d = *p.dims();
    let (l, de, h) = (trace.len(), d.emb_dim, d.hidden);

    // IC head and pooled states
    let mut d_icf = vec![0.0; l * h];
    let mut d_icb = vec![0.0; l * h];
    if let Some(dz) = &up.ic_logits {
        let (gw, gb) = grads.ic_head_grad();
        outer_acc(dz, &trace.ic_in, gw);
        for (b, x) in gb.iter_mut().zip(dz) {
            *b += x;
        }
        let mut d_in = vec![0.0; 2 * h];
        gemv_t_acc(p.ic_head().w, dz, &mut d_in);
        for k in 0..h {
            d_icf[(l - 1) * h + k] += d_in[k];
            d_icb[k] += d_in[h + k];
        }
    }
    if let Some(g) = &up.pooled_fwd {
        for k in 0..h {
            d_icf[(l - 1) * h + k] += g[k];
        }
    }
    if let Some(g) = &up.pooled_bwd {
        for k in 0..h {
            d_icb[k] += g[k];
        }
    }

    // NER emissions and states
    let mut d_nf = up.fwd_states.as_ref().map_or_else(|| vec![0.0; l * h], |m| m.data.clone());
    let mut d_nb = up.bwd_states.as_ref().map_or_else(|| vec![0.0; l * h], |m| m.data.clone());
    if let Some(dem) = &up.emissions {
        let emit_w = p.ner_emit().w;
        let (gw, gb) = grads.ner_emit_grad();
        let mut d_in = vec![0.0; 2 * h];
        for t in 0..l {
            let dz = dem.row(t);
            outer_acc(dz, &trace.ner_in[t * 2 * h..(t + 1) * 2 * h], gw);
            for (b, x) in gb.iter_mut().zip(dz) {
                *b += x;
            }
            d_in.iter_mut().for_each(|x| *x = 0.0);
            gemv_t_acc(emit_w, dz, &mut d_in);
            for k in 0..h {
                d_nf[t * h + k] += d_in[k];
                d_nb[t * h + k] += d_in[h + k];
            }
        }
    }

    let mut d_shared = bilstm_backward(
        p,
        grads,
        (Cell::IcFwd, Cell::IcBwd),
        &trace.ic,
        &trace.shared_out,
        2 * h,
        &d_icf,
        &d_icb,
    );
    let d2 = bilstm_backward(
        p,
        grads,
        (Cell::NerFwd, Cell::NerBwd),
        &trace.ner,
        &trace.shared_out,
        2 * h,
        &d_nf,
        &d_nb,
    );
    for (a, b) in d_shared.iter_mut().zip(d2) {
        *a += b;
    }
    let mut d_sf = vec![0.0; l * h];
    let mut d_sb = vec![0.0; l * h];
    for t in 0..l {
        d_sf[t * h..(t + 1) * h].copy_from_slice(&d_shared[t * 2 * h..t * 2 * h + h]);
        d_sb[t * h..(t + 1) * h].copy_from_slice(&d_shared[t * 2 * h + h..(t + 1) * 2 * h]);
    }
    let dx = bilstm_backward(
        p,
        grads,
        (Cell::SharedFwd, Cell::SharedBwd),
        &trace.shared,
        &trace.inputs,
        de,
        &d_sf,
        &d_sb,
    );

    for (t, &w) in trace.tokens.iter().enumerate() {
        let w = if w < d.vocab_size { w } else { 0 };
        let s = trace.token_scale.as_ref().map_or(1.0, |s| s[t]);
        if s == 0.0 {
            continue;
        }
        let row = grads.embedding_mut(w);
        for (g, x) in row.iter_mut().zip(&dx[t * de..(t + 1) * de]) {
            *g += s * x;
        }
    }
    Matrix::from_vec(l, de, dx)
}

/// Teacher-style targets: intent distribution and per-token tag
/// distributions taken before the CRF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub ic_dist: Vec<f64>,
    /// `L × K`, row-stochastic
    pub token_dists: Matrix,
}

/// Differentiable objectives over a single utterance.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// IC cross-entropy plus CRF negative log-likelihood of the gold labels.
    Supervised,
    /// IC cross-entropy of the gold intent only.
    IcCrossEntropy,
    /// `CE(target_ic, p_ic) + mean_t CE(target_t, p_t)`.
    SoftCrossEntropy(&'a SoftLabel),
    /// `KL(target_ic ‖ p_ic) + mean_t KL(target_t ‖ p_t)`.
    Divergence(&'a SoftLabel),
}

/// Value and trace gradients of `spec`. CRF transition gradients, when the
/// loss has any, are returned separately.
pub fn loss_terms(
    p: &ModelParams,
    trace: &ForwardTrace,
    enc: &Encoded,
    spec: LossSpec<'_>,
) -> Result<(f64, Upstream, Option<Vec<f64>>)> {
    let missing = || Error::Input(format!("utterance {} has no gold labels", enc.id));
    match spec {
        LossSpec::Supervised | LossSpec::IcCrossEntropy => {
            let intent = enc.intent.ok_or_else(missing)?;
            let mut dz = softmax(&trace.ic_logits);
            let mut loss = -dz[intent].ln();
            dz[intent] -= 1.0;
            let mut up = Upstream {
                ic_logits: Some(dz),
                ..Upstream::default()
            };
            let mut d_tr = None;
            if matches!(spec, LossSpec::Supervised) {
                let tags = enc.tags.as_ref().ok_or_else(missing)?;
                let (nll, d_em, dt) = crf::nll_with_grads(&trace.ner_emissions, p.transitions(), tags)?;
                loss += nll;
                up.emissions = Some(d_em);
                d_tr = Some(dt);
            }
            Ok((loss, up, d_tr))
        }
        LossSpec::SoftCrossEntropy(target) | LossSpec::Divergence(target) => {
            let l = trace.len();
            if target.token_dists.rows != l {
                return Err(Error::Input(format!(
                    "soft label for {} has {} rows, utterance has {l} tokens",
                    enc.id, target.token_dists.rows
                )));
            }
            let kl = matches!(spec, LossSpec::Divergence(_));
            let q = softmax(&trace.ic_logits);
            let mut loss = cross_entropy(&target.ic_dist, &q);
            if kl {
                loss -= super::matrix::entropy(&target.ic_dist);
            }
            let d_ic: Vec<f64> = q.iter().zip(&target.ic_dist).map(|(a, b)| a - b).collect();
            let k = trace.ner_emissions.cols;
            let mut d_em = Matrix::zeros(l, k);
            let inv = 1.0 / l as f64;
            for t in 0..l {
                let qt = softmax(trace.ner_emissions.row(t));
                let pt = target.token_dists.row(t);
                let mut lt = cross_entropy(pt, &qt);
                if kl {
                    lt -= super::matrix::entropy(pt);
                }
                loss += inv * lt;
                for (j, g) in d_em.row_mut(t).iter_mut().enumerate() {
                    *g = inv * (qt[j] - pt[j]);
                }
            }
            Ok((
                loss,
                Upstream {
                    ic_logits: Some(d_ic),
                    emissions: Some(d_em),
                    ..Upstream::default()
                },
                None,
            ))
        }
    }
}

/// Loss, parameter gradients and input-embedding gradient for one utterance.
pub fn evaluate(
    p: &ModelParams,
    enc: &Encoded,
    perturbation: Option<&Matrix>,
    spec: LossSpec<'_>,
) -> Result<(f64, ModelParams, Matrix)> {
    evaluate_with(
        p,
        enc,
        ForwardOptions {
            perturbation,
            token_scale: None,
        },
        spec,
    )
}

/// [`evaluate`] with arbitrary forward options.
pub fn evaluate_with(
    p: &ModelParams,
    enc: &Encoded,
    opts: ForwardOptions<'_>,
    spec: LossSpec<'_>,
) -> Result<(f64, ModelParams, Matrix)> {
    let trace = forward_encoded(p, &enc.tokens, opts)?;
    let (loss, up, d_tr) = loss_terms(p, &trace, enc, spec)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            id: enc.id.clone(),
            message: format!("non-finite loss {loss}"),
        });
    }
    let mut grads = p.zeros_like();
    let dx = backward(p, &trace, &up, &mut grads);
    if let Some(dt) = d_tr {
        for (g, x) in grads.transitions_mut().iter_mut().zip(dt) {
            *g += x;
        }
    }
    Ok((loss, grads, dx))
}

/// Mean over the batch of IC cross-entropy plus CRF negative
/// log-likelihood, with exact gradients.
pub fn supervised_loss(p: &ModelParams, batch: &[Encoded]) -> Result<(f64, ModelParams)> {
    let mut grads = p.zeros_like();
    let mut total = 0.0;
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    for enc in batch {
        let (loss, g, _) = evaluate(p, enc, None, LossSpec::Supervised)?;
        total += loss;
        grads.add_scaled(&g, 1.0);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Exact derivative of `spec` with respect to the token embedding inputs.
pub fn input_gradient(p: &ModelParams, enc: &Encoded, spec: LossSpec<'_>) -> Result<Matrix> {
    Ok(evaluate(p, enc, None, spec)?.2)
}

/// Intent index and Viterbi tag path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub intent: usize,
    pub tags: Vec<usize>,
}

pub fn predict_encoded(p: &ModelParams, enc: &Encoded) -> Result<Prediction> {
    let trace = forward_encoded(p, &enc.tokens, ForwardOptions::default())?;
    let (tags, _) = crf::viterbi(&trace.ner_emissions, p.transitions());
    Ok(Prediction {
        intent: argmax(&trace.ic_logits),
        tags,
    })
}

/// Vocabulary plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: ModelVocab,
    pub params: ModelParams,
}

impl Model {
    pub fn new(vocab: ModelVocab, emb_dim: usize, hidden: usize, seed: u64) -> Result<Model> {
        let dims = vocab.dims(emb_dim, hidden);
        dims.validate()?;
        Ok(Model {
            params: ModelParams::init(dims, seed),
            vocab,
        })
    }

    pub fn forward(&self, u: &Utterance) -> Result<ForwardTrace> {
        let enc = self.vocab.encode(u);
        forward_encoded(&self.params, &enc.tokens, ForwardOptions::default())
    }

    pub fn soft_label(&self, u: &Utterance) -> Result<SoftLabel> {
        Ok(self.forward(u)?.soft_label())
    }

    pub fn predict(&self, u: &Utterance) -> Result<Prediction> {
        predict_encoded(&self.params, &self.vocab.encode(u))
    }

    /// Prediction mapped back to label strings.
    pub fn predict_labels(&self, u: &Utterance) -> Result<(String, Vec<String>)> {
        let p = self.predict(u)?;
        let intent = self.vocab.intents.get(p.intent).unwrap_or("").to_string();
        let tags = p
            .tags
            .iter()
            .map(|&t| self.vocab.tags.get(t).unwrap_or(OUTSIDE).to_string())
            .collect();
        Ok((intent, tags))
    }
}
