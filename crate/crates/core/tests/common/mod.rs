//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslforge::neural::{Encoded, Matrix, ModelDims, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dims(rng: &mut ChaCha8Rng) -> ModelDims {
    ModelDims {
        vocab_size: rng.gen_range(3..=6),
        emb_dim: rng.gen_range(2..=6),
        hidden: rng.gen_range(1..=4),
        n_intents: rng.gen_range(2..=4),
        n_tags: rng.gen_range(1..=4),
    }
}

/// Parameters with every coordinate uniform in ±scale (transitions too).
pub fn random_params(dims: ModelDims, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    for x in p.as_mut_slice() {
        *x = rng.gen_range(-scale..scale);
    }
    p
}

pub fn random_encoded(dims: &ModelDims, len: usize, rng: &mut ChaCha8Rng) -> Encoded {
    Encoded {
        id: "rand".into(),
        tokens: (0..len).map(|_| rng.gen_range(0..dims.vocab_size)).collect(),
        intent: Some(rng.gen_range(0..dims.n_intents)),
        tags: Some((0..len).map(|_| rng.gen_range(0..dims.n_tags)).collect()),
    }
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Scores every one of the `K^L` paths directly.
pub fn enumerate_paths(em: &Matrix, trans: &[f64]) -> Vec<(Vec<usize>, f64)> {
    let (l, k) = (em.rows, em.cols);
    let n = k + 2;
    let total = k.pow(l as u32);
    (0..total)
        .map(|mut code| {
            let mut path = vec![0; l];
            for slot in path.iter_mut().rev() {
                *slot = code % k;
                code /= k;
            }
            let mut s = trans[k * n + path[0]] + trans[path[l - 1] * n + k + 1];
            for t in 0..l {
                s += em.get(t, path[t]);
                if t > 0 {
                    s += trans[path[t - 1] * n + path[t]];
                }
            }
            (path, s)
        })
        .collect()
}

pub fn brute_log_partition(em: &Matrix, trans: &[f64]) -> f64 {
    let scores: Vec<f64> = enumerate_paths(em, trans).into_iter().map(|(_, s)| s).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Central difference of `f` at every coordinate of `x`.
pub fn finite_differences<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let up = f(&buf);
            buf[i] = orig - h;
            let down = f(&buf);
            buf[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between analytic and numeric gradients, with an
/// absolute floor so coordinates that are zero on both sides do not blow up.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs().max(n.abs()).max(1e-6)))
        .fold(0.0, f64::max)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM direction written from the textbook equations, one time step at a
/// time, with its own weight slicing.
pub fn reference_lstm(w: &[f64], b: &[f64], xs: &[Vec<f64>], hidden: usize, reverse: bool) -> Vec<Vec<f64>> {
    let l = xs.len();
    let in_dim = xs[0].len();
    let cols = in_dim + hidden;
    let mut out = vec![vec![0.0; hidden]; l];
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
    for t in order {
        let input: Vec<f64> = xs[t].iter().chain(h.iter()).copied().collect();
        let gate = |g: usize, k: usize| -> f64 {
            let row = g * hidden + k;
            b[row] + (0..cols).map(|j| w[row * cols + j] * input[j]).sum::<f64>()
        };
        let mut nh = vec![0.0; hidden];
        for k in 0..hidden {
            let i = sigmoid(gate(0, k));
            let f = sigmoid(gate(1, k));
            let g = gate(2, k).tanh();
            let o = sigmoid(gate(3, k));
            c[k] = f * c[k] + i * g;
            nh[k] = o * c[k].tanh();
        }
        h = nh;
        out[t] = h.clone();
    }
    out
}
