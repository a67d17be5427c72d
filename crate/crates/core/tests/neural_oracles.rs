mod common;

use common::*;
use rand::Rng;
use sslforge::corpus::{Dataset, Utterance};
use sslforge::neural::{
    crf, decode_model, encode_model, evaluate, forward_encoded, input_gradient, supervised_loss,
    Cell, Encoded, ForwardOptions, LossSpec, Matrix, Model, ModelDims, ModelParams, ModelVocab,
    SoftLabel,
};

#[test]
fn crf_matches_enumeration() {
    let mut r = rng(1);
    for _ in 0..100 {
        let l = r.gen_range(1..=5);
        let k = r.gen_range(1..=4);
        let em = random_matrix(l, k, &mut r, 2.0);
        let tr: Vec<f64> = (0..(k + 2) * (k + 2)).map(|_| r.gen_range(-2.0..2.0)).collect();
        let paths = enumerate_paths(&em, &tr);
        let lz = brute_log_partition(&em, &tr);
        assert!((crf::log_partition(&em, &tr) - lz).abs() < 1e-8);
        let (gold, gold_score) = &paths[r.gen_range(0..paths.len())];
        let ll = crf::log_likelihood(&em, &tr, gold).unwrap();
        assert!((ll - (gold_score - lz)).abs() < 1e-8);
        assert!(ll <= 0.0);
        let best = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let (vpath, vscore) = crf::viterbi(&em, &tr);
        assert!((vscore - best).abs() < 1e-9);
        assert!((crf::path_score(&em, &tr, &vpath).unwrap() - best).abs() < 1e-9);
    }
}

#[test]
fn crf_l4_k3_instance() {
    let mut r = rng(2);
    let em = random_matrix(4, 3, &mut r, 1.5);
    let tr: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
    assert_eq!(enumerate_paths(&em, &tr).len(), 81);
    assert!((crf::log_partition(&em, &tr) - brute_log_partition(&em, &tr)).abs() < 1e-8);
    let (_, vs) = crf::viterbi(&em, &tr);
    for _ in 0..100 {
        let path: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
        assert!(vs >= crf::path_score(&em, &tr, &path).unwrap());
    }
}

#[test]
fn crf_marginals_match_enumeration() {
    let mut r = rng(3);
    let em = random_matrix(3, 3, &mut r, 1.0);
    let tr: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
    let lz = brute_log_partition(&em, &tr);
    let mut unary = Matrix::zeros(3, 3);
    for (path, s) in enumerate_paths(&em, &tr) {
        let p = (s - lz).exp();
        for (t, &y) in path.iter().enumerate() {
            unary.data[t * 3 + y] += p;
        }
    }
    let m = crf::marginals(&em, &tr);
    for (a, b) in m.unary.data.iter().zip(&unary.data) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn reference_trace(p: &ModelParams, tokens: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = *p.dims();
    let h = d.hidden;
    let xs: Vec<Vec<f64>> = tokens.iter().map(|&t| p.embedding(t).to_vec()).collect();
    let run = |c: Cell, xs: &[Vec<f64>], rev: bool| {
        let cell = p.cell(c);
        reference_lstm(cell.w, cell.b, xs, h, rev)
    };
    let sf = run(Cell::SharedFwd, &xs, false);
    let sb = run(Cell::SharedBwd, &xs, true);
    let shared: Vec<Vec<f64>> = sf.iter().zip(&sb).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
    let icf = run(Cell::IcFwd, &shared, false);
    let icb = run(Cell::IcBwd, &shared, true);
    let nf = run(Cell::NerFwd, &shared, false);
    let nb = run(Cell::NerBwd, &shared, true);
    let pooled = [icf[tokens.len() - 1].clone(), icb[0].clone()].concat();
    let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..x.len()).map(|j| w[o * x.len() + j] * x[j]).sum::<f64>())
            .collect()
    };
    let head = p.ic_head();
    let logits = affine(head.w, head.b, &pooled);
    let emit = p.ner_emit();
    let em = nf
        .iter()
        .zip(&nb)
        .map(|(a, b)| affine(emit.w, emit.b, &[a.clone(), b.clone()].concat()))
        .collect();
    (logits, em)
}

#[test]
fn forward_matches_reference_recurrence() {
    let mut r = rng(4);
    let dims = ModelDims {
        vocab_size: 6,
        emb_dim: 4,
        hidden: 3,
        n_intents: 3,
        n_tags: 3,
    };
    for _ in 0..10 {
        let p = random_params(dims, &mut r, 0.8);
        let len = r.gen_range(1..=6);
        let enc = random_encoded(&dims, len, &mut r);
        let trace = forward_encoded(&p, &enc.tokens, ForwardOptions::default()).unwrap();
        let (logits, em) = reference_trace(&p, &enc.tokens);
        for (a, b) in trace.ic_logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-10);
        }
        for t in 0..len {
            for (a, b) in trace.ner_emissions.row(t).iter().zip(&em[t]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_parameters_give_zero_outputs() {
    let dims = ModelDims {
        vocab_size: 4,
        emb_dim: 3,
        hidden: 2,
        n_intents: 2,
        n_tags: 3,
    };
    let p = ModelParams::zeros(dims);
    let trace = forward_encoded(&p, &[1, 2, 3], ForwardOptions::default()).unwrap();
    assert!(trace.ic_logits.iter().all(|&x| x == 0.0));
    assert!(trace.ner_emissions.data.iter().all(|&x| x == 0.0));

    let enc = Encoded {
        id: "z".into(),
        tokens: vec![1],
        intent: Some(0),
        tags: Some(vec![0]),
    };
    let (loss, _) = supervised_loss(&p, &[enc]).unwrap();
    // IC term log 2 plus CRF term log 3 for a one-token, three-tag chain
    assert!((loss - (2f64.ln() + 3f64.ln())).abs() < 1e-12);
}

#[test]
fn single_token_and_empty_input() {
    let mut r = rng(5);
    let dims = small_dims(&mut r);
    let p = random_params(dims, &mut r, 0.5);
    let trace = forward_encoded(&p, &[0], ForwardOptions::default()).unwrap();
    assert_eq!(trace.fwd_states.rows, 1);
    assert_eq!(trace.bwd_states.rows, 1);
    assert!(trace.ic_logits.iter().all(|x| x.is_finite()));
    assert!(forward_encoded(&p, &[], ForwardOptions::default()).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(6);
    let dims = small_dims(&mut r);
    let p = random_params(dims, &mut r, 0.5);
    let enc = random_encoded(&dims, 4, &mut r);
    let a = forward_encoded(&p, &enc.tokens, ForwardOptions::default()).unwrap();
    let b = forward_encoded(&p, &enc.tokens, ForwardOptions::default()).unwrap();
    assert_eq!(a.ic_logits, b.ic_logits);
    assert_eq!(a.ner_emissions, b.ner_emissions);
}

#[test]
fn supervised_gradients_match_finite_differences() {
    let mut r = rng(7);
    for _ in 0..6 {
        let dims = small_dims(&mut r);
        let p = random_params(dims, &mut r, 0.6);
        let batch: Vec<Encoded> = (0..2)
            .map(|_| {
                let len = r.gen_range(1..=5);
                random_encoded(&dims, len, &mut r)
            })
            .collect();
        let (_, grads) = supervised_loss(&p, &batch).unwrap();
        let numeric = finite_differences(p.as_slice(), 1e-5, |x| {
            let q = ModelParams::from_data(dims, x.to_vec()).unwrap();
            supervised_loss(&q, &batch).unwrap().0
        });
        let err = max_rel_error(grads.as_slice(), &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }
}

#[test]
fn input_gradient_matches_finite_differences_and_taylor() {
    let mut r = rng(8);
    for _ in 0..6 {
        let dims = small_dims(&mut r);
        let p = random_params(dims, &mut r, 0.6);
        let len = r.gen_range(1..=5);
        let enc = random_encoded(&dims, len, &mut r);
        let g = input_gradient(&p, &enc, LossSpec::IcCrossEntropy).unwrap();
        let zero = Matrix::zeros(len, dims.emb_dim);
        let loss_at = |d: &[f64]| {
            let m = Matrix::from_vec(len, dims.emb_dim, d.to_vec());
            evaluate(&p, &enc, Some(&m), LossSpec::IcCrossEntropy).unwrap().0
        };
        let numeric = finite_differences(&zero.data, 1e-5, loss_at);
        assert!(max_rel_error(&g.data, &numeric) <= 1e-4);

        let gn = g.frobenius_norm();
        if gn > 1e-8 {
            let eps = 1e-4;
            let dir = g.scaled(eps / gn);
            let base = loss_at(&zero.data);
            let moved = loss_at(&dir.data);
            let predicted = eps * gn;
            assert!(((moved - base) - predicted).abs() <= 1e-3 * predicted.max(1e-9) + 1e-9);
        }
    }
}

#[test]
fn constant_output_model_has_zero_input_gradient() {
    let mut r = rng(9);
    let dims = small_dims(&mut r);
    let mut p = random_params(dims, &mut r, 0.5);
    p.zero_all_but_embeddings();
    let enc = random_encoded(&dims, 3, &mut r);
    for spec in [LossSpec::Supervised, LossSpec::IcCrossEntropy] {
        let g = input_gradient(&p, &enc, spec).unwrap();
        assert!(g.data.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn soft_losses_gradients_match_finite_differences() {
    let mut r = rng(10);
    for _ in 0..4 {
        let dims = small_dims(&mut r);
        let p = random_params(dims, &mut r, 0.6);
        let len = r.gen_range(1..=4);
        let enc = random_encoded(&dims, len, &mut r);
        let teacher = random_params(dims, &mut r, 0.6);
        let target: SoftLabel = forward_encoded(&teacher, &enc.tokens, ForwardOptions::default())
            .unwrap()
            .soft_label();
        for spec in [LossSpec::SoftCrossEntropy(&target), LossSpec::Divergence(&target)] {
            let (_, grads, _) = evaluate(&p, &enc, None, spec).unwrap();
            let numeric = finite_differences(p.as_slice(), 1e-5, |x| {
                let q = ModelParams::from_data(dims, x.to_vec()).unwrap();
                evaluate(&q, &enc, None, spec).unwrap().0
            });
            assert!(max_rel_error(grads.as_slice(), &numeric) <= 1e-4);
        }
    }
}

#[test]
fn saturated_model_has_near_zero_loss() {
    let dims = ModelDims {
        vocab_size: 2,
        emb_dim: 1,
        hidden: 1,
        n_intents: 2,
        n_tags: 2,
    };
    let mut m = ModelParams::zeros(dims);
    let enc = Encoded {
        id: "s".into(),
        tokens: vec![1, 1],
        intent: Some(1),
        tags: Some(vec![0, 0]),
    };
    let batch = std::slice::from_ref(&enc);
    // at zero weights only biases and transitions carry gradient; a large
    // step against its sign saturates both the softmax and the CRF
    let grads = supervised_loss(&m, batch).unwrap().1;
    for (x, g) in m.as_mut_slice().iter_mut().zip(grads.as_slice()) {
        if g.abs() > 1e-12 {
            *x -= 40.0 * g.signum();
        }
    }
    let loss = supervised_loss(&m, batch).unwrap().0;
    assert!(loss < 1e-6, "loss {loss}");
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let d = Dataset::new(vec![
        Utterance::labeled("a", vec!["play".into(), "x".into()], "Play", vec!["O".into(), "B-S".into()]),
        Utterance::labeled("b", vec!["stop".into()], "Stop", vec!["O".into()]),
    ])
    .unwrap();
    let vocab = ModelVocab::build(&[&d], &d);
    let m = Model::new(vocab, 4, 3, 11).unwrap();
    let bytes = encode_model(&m);
    let back = decode_model(&bytes).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.vocab.words(), m.vocab.words());
    assert_eq!(encode_model(&back), bytes);
    let mut corrupt = bytes.clone();
    corrupt[20] ^= 1;
    assert!(decode_model(&corrupt).is_err());
    assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
}
