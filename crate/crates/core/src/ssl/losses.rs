//! Per-utterance unsupervised objectives and their batch steps.
//!
//! Every target (teacher soft label, VAT clean distribution, CVT full-view
//! prediction) is a constant: no gradient flows through it.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neural::{
    backward, cross_entropy, entropy, evaluate, evaluate_with, forward_encoded, gemv_acc, gemv_t_acc, outer_acc,
    softmax, Encoded, ForwardOptions, LossSpec, Matrix, ModelParams, SoftLabel, Upstream, View,
};

/// Mean loss and mean gradient of `f` over `items`, reduced in item order so
/// the result does not depend on the thread count.
pub(crate) fn batch_mean<T: Sync>(
    p: &ModelParams,
    items: &[T],
    f: impl Fn(&T) -> Result<(f64, ModelParams)> + Sync,
) -> Result<(f64, ModelParams)> {
    let mut grads = p.zeros_like();
    if items.is_empty() {
        return Ok((0.0, grads));
    }
    let parts: Vec<(f64, ModelParams)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let mut total = 0.0;
    for (l, g) in &parts {
        total += l;
        grads.add_scaled(g, 1.0);
    }
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Supervised batch loss, with optional per-utterance word-dropout scales.
pub fn supervised_step(p: &ModelParams, batch: &[Encoded], scales: Option<&[Vec<f64>]>) -> Result<(f64, ModelParams)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_mean(p, &idx, |&i| {
        let opts = ForwardOptions {
            perturbation: None,
            token_scale: scales.map(|s| s[i].as_slice()),
        };
        let (l, g, _) = evaluate_with(p, &batch[i], opts, LossSpec::Supervised)?;
        Ok((l, g))
    })
}

/// Soft-label cross-entropy on an unlabeled batch: intent CE plus the
/// token-averaged tag CE, temperature 1.
pub fn kd_step(student: &ModelParams, batch: &[Encoded], targets: &[&SoftLabel]) -> Result<(f64, ModelParams)> {
    if batch.len() != targets.len() {
        return Err(Error::Input(format!("{} utterances but {} soft labels", batch.len(), targets.len())));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_mean(student, &idx, |&i| {
        let (l, g, _) = evaluate(student, &batch[i], None, LossSpec::SoftCrossEntropy(targets[i]))?;
        Ok((l, g))
    })
}

/// A random direction of unit Frobenius norm.
pub fn random_unit(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    loop {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let m = Matrix::from_vec(rows, cols, data);
        let n = m.frobenius_norm();
        if n > 0.0 {
            return m.scaled(1.0 / n);
        }
    }
}

/// Clean-input prediction used as the fixed VAT target.
pub fn clean_target(p: &ModelParams, enc: &Encoded) -> Result<SoftLabel> {
    Ok(forward_encoded(p, &enc.tokens, ForwardOptions::default())?.soft_label())
}

/// One power-iteration estimate of the adversarial direction, scaled to
/// norm `delta`. Falls back to `delta·r` when the probe gradient vanishes.
pub fn vat_perturbation(p: &ModelParams, enc: &Encoded, target: &SoftLabel, delta: f64, xi: f64, r: &Matrix) -> Result<Matrix> {
    let probe = r.scaled(xi);
    let (_, _, g) = evaluate(p, enc, Some(&probe), LossSpec::Divergence(target))?;
    let n = g.frobenius_norm();
    if n < 1e-12 || !n.is_finite() {
        return Ok(r.scaled(delta));
    }
    Ok(g.scaled(delta / n))
}

/// `KL(target ‖ p(x + d))` over intents plus token-averaged tags, with
/// parameter gradients for a fixed `d`.
pub fn vat_loss(p: &ModelParams, enc: &Encoded, target: &SoftLabel, d: &Matrix) -> Result<(f64, ModelParams)> {
    let (l, g, _) = evaluate(p, enc, Some(d), LossSpec::Divergence(target))?;
    Ok((l, g))
}

/// Perturbation norms seen by one VAT batch, for invariant checks.
#[derive(Debug, Clone, Default)]
pub struct VatBatch {
    pub loss: f64,
    pub grads: Option<ModelParams>,
    pub per_item: Vec<f64>,
    pub norms: Vec<f64>,
}

/// VAT loss over an unlabeled batch. Random probe directions are drawn
/// sequentially from `rng` before the parallel part.
pub fn vat_step(p: &ModelParams, batch: &[Encoded], delta: f64, xi: f64, rng: &mut impl Rng) -> Result<VatBatch> {
    let de = p.dims().emb_dim;
    let dirs: Vec<Matrix> = batch.iter().map(|e| random_unit(e.len(), de, rng)).collect();
    let parts: Vec<(f64, ModelParams, f64)> = batch
        .par_iter()
        .zip(&dirs)
        .map(|(enc, r)| {
            let target = clean_target(p, enc)?;
            let d = vat_perturbation(p, enc, &target, delta, xi, r)?;
            let (l, g) = vat_loss(p, enc, &target, &d)?;
            Ok((l, g, d.frobenius_norm()))
        })
        .collect::<Result<_>>()?;
    let mut out = VatBatch::default();
    if parts.is_empty() {
        return Ok(out);
    }
    let mut grads = p.zeros_like();
    for (l, g, n) in &parts {
        out.loss += l;
        out.per_item.push(*l);
        out.norms.push(*n);
        grads.add_scaled(g, 1.0);
    }
    let n = parts.len() as f64;
    out.loss /= n;
    grads.scale(1.0 / n);
    out.grads = Some(grads);
    Ok(out)
}

/// CVT value for one utterance, with the entropy of its targets (the
/// minimum the loss can reach).
#[derive(Debug, Clone)]
pub struct CvtTerm {
    pub loss: f64,
    pub grads: ModelParams,
    pub target_entropy: f64,
}

/// `CE(target, softmax(head(x)))`; accumulates head and input gradients
/// scaled by `weight`.
fn view_ce(
    p: &ModelParams,
    grads: &mut ModelParams,
    view: View,
    x: &[f64],
    target: &[f64],
    weight: f64,
    dx: &mut [f64],
) -> f64 {
    let head = p.view(view);
    let mut z = head.b.to_vec();
    gemv_acc(head.w, x, &mut z);
    let q = softmax(&z);
    let loss = cross_entropy(target, &q);
    let dz: Vec<f64> = q.iter().zip(target).map(|(a, b)| weight * (a - b)).collect();
    let (gw, gb) = grads.view_grad(view);
    outer_acc(&dz, x, gw);
    for (g, d) in gb.iter_mut().zip(&dz) {
        *g += d;
    }
    gemv_t_acc(head.w, &dz, dx);
    loss
}

/// Cross-view loss. Targets come from a separate inference-mode pass over
/// the full model; the student pass applies `token_scale` if given.
///
/// Token term: per position, the mean over the present views among
/// forward `f_i`, backward `b_i`, past `f_{i−1}` and future `b_{i+1}`, then
/// averaged over positions. Sentence term (if enabled): mean over the
/// forward-only and backward-only pooled views. The loss is the mean of
/// the two terms.
pub fn cvt_loss(p: &ModelParams, enc: &Encoded, sentence: bool, token_scale: Option<&[f64]>) -> Result<CvtTerm> {
    let target = forward_encoded(p, &enc.tokens, ForwardOptions::default())?.soft_label();
    cvt_loss_with(p, enc, &target, sentence, token_scale)
}

/// [`cvt_loss`] against given targets.
pub fn cvt_loss_with(
    p: &ModelParams,
    enc: &Encoded,
    target: &SoftLabel,
    sentence: bool,
    token_scale: Option<&[f64]>,
) -> Result<CvtTerm> {
    if target.token_dists.rows != enc.len() {
        return Err(Error::Input(format!("CVT target for {} has the wrong length", enc.id)));
    }
    let trace = forward_encoded(
        p,
        &enc.tokens,
        ForwardOptions {
            perturbation: None,
            token_scale,
        },
    )?;
    let l = trace.len();
    let h = p.dims().hidden;
    let mut grads = p.zeros_like();
    let mut d_f = Matrix::zeros(l, h);
    let mut d_b = Matrix::zeros(l, h);
    let parts = if sentence { 2.0 } else { 1.0 };

    let mut token_loss = 0.0;
    let mut token_entropy = 0.0;
    for i in 0..l {
        let y = target.token_dists.row(i);
        let mut views: Vec<(View, usize, bool)> = vec![(View::Forward, i, true), (View::Backward, i, false)];
        if i > 0 {
            views.push((View::Past, i - 1, true));
        }
        if i + 1 < l {
            views.push((View::Future, i + 1, false));
        }
        let w = 1.0 / (views.len() as f64 * l as f64 * parts);
        let mut li = 0.0;
        for (v, pos, fwd) in &views {
            let (states, dst) = if *fwd { (&trace.fwd_states, &mut d_f) } else { (&trace.bwd_states, &mut d_b) };
            li += view_ce(p, &mut grads, *v, states.row(*pos), y, w, dst.row_mut(*pos));
        }
        token_loss += li / views.len() as f64;
        token_entropy += entropy(y);
    }
    token_loss /= l as f64;
    token_entropy /= l as f64;

    let mut loss = token_loss;
    let mut target_entropy = token_entropy;
    let mut up = Upstream {
        fwd_states: Some(d_f),
        bwd_states: Some(d_b),
        ..Upstream::default()
    };
    if sentence {
        let y = &target.ic_dist;
        let mut d_pf = vec![0.0; h];
        let mut d_pb = vec![0.0; h];
        let w = 1.0 / (2.0 * parts);
        let sf = view_ce(p, &mut grads, View::SentenceForward, &trace.pooled_fwd, y, w, &mut d_pf);
        let sb = view_ce(p, &mut grads, View::SentenceBackward, &trace.pooled_bwd, y, w, &mut d_pb);
        loss = 0.5 * (token_loss + 0.5 * (sf + sb));
        target_entropy = 0.5 * (token_entropy + entropy(y));
        up.pooled_fwd = Some(d_pf);
        up.pooled_bwd = Some(d_pb);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric {
            id: enc.id.clone(),
            message: format!("non-finite CVT loss {loss}"),
        });
    }
    backward(p, &trace, &up, &mut grads);
    Ok(CvtTerm {
        loss,
        grads,
        target_entropy,
    })
}

/// Mean CVT loss over an unlabeled batch.
pub fn cvt_step(p: &ModelParams, batch: &[Encoded], sentence: bool, scales: Option<&[Vec<f64>]>) -> Result<(f64, ModelParams)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_mean(p, &idx, |&i| {
        let t = cvt_loss(p, &batch[i], sentence, scales.map(|s| s[i].as_slice()))?;
        Ok((t.loss, t.grads))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ModelParams {
        let dims = ModelDims {
            vocab_size: 5,
            emb_dim: 3,
            hidden: 2,
            n_intents: 3,
            n_tags: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(dims);
        for x in p.as_mut_slice() {
            *x = rng.gen_range(-0.5..0.5);
        }
        p
    }

    fn enc(tokens: Vec<usize>) -> Encoded {
        let n = tokens.len();
        Encoded {
            id: "u".into(),
            tokens,
            intent: Some(1),
            tags: Some(vec![0; n]),
        }
    }

    #[test]
    fn empty_batch_has_zero_loss_and_gradient() {
        let p = params(1);
        let (l, g) = supervised_step(&p, &[], None).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
        let v = vat_step(&p, &[], 0.4, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(v.grads.is_none() && v.norms.is_empty());
    }

    #[test]
    fn kd_rejects_mismatched_targets() {
        let p = params(2);
        let batch = [enc(vec![0, 1]), enc(vec![2])];
        let t = clean_target(&p, &batch[0]).unwrap();
        assert!(matches!(kd_step(&p, &batch, &[&t]), Err(Error::Input(_))));
    }

    #[test]
    fn random_unit_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in 1..6 {
            let r = random_unit(len, 4, &mut rng);
            assert!((r.frobenius_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_radius_perturbation_gives_zero_vat_loss() {
        let p = params(4);
        let e = enc(vec![3, 0, 4]);
        let target = clean_target(&p, &e).unwrap();
        let r = random_unit(3, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let d = vat_perturbation(&p, &e, &target, 0.0, 0.1, &r).unwrap();
        assert_eq!(d.frobenius_norm(), 0.0);
        let (l, _) = vat_loss(&p, &e, &target, &d).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn supervised_step_averages_per_utterance_losses() {
        let p = params(6);
        let batch = [enc(vec![0, 1]), enc(vec![2, 3, 4])];
        let (l, g) = supervised_step(&p, &batch, None).unwrap();
        let (l0, g0) = supervised_step(&p, &batch[..1], None).unwrap();
        let (l1, g1) = supervised_step(&p, &batch[1..], None).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-12);
        for ((a, b), c) in g.as_slice().iter().zip(g0.as_slice()).zip(g1.as_slice()) {
            assert!((a - (b + c) / 2.0).abs() < 1e-12);
        }
    }
}
