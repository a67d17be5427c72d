//! Linear-chain CRF over `K` tags with virtual START (`K`) and STOP (`K+1`)
//! states. Transitions are a `(K+2)×(K+2)` row-major matrix indexed
//! `[from][to]`; a path's score is `trans[START][y₀] + Σₜ e[t][yₜ] +
//! Σₜ trans[yₜ₋₁][yₜ] + trans[y_{L−1}][STOP]`.

use super::matrix::{log_sum_exp, Matrix};
use crate::error::{Error, Result};

#[inline]
fn tr(trans: &[f64], n: usize, from: usize, to: usize) -> f64 {
    trans[from * n + to]
}

fn check(emissions: &Matrix, trans: &[f64]) -> (usize, usize, usize) {
    let k = emissions.cols;
    let n = k + 2;
    assert_eq!(trans.len(), n * n, "transition matrix must be (K+2)x(K+2)");
    (emissions.rows, k, n)
}

/// Log-space forward variables, `L × K`.
fn alphas(emissions: &Matrix, trans: &[f64]) -> Vec<f64> {
    let (l, k, n) = check(emissions, trans);
    let start = k;
    let mut a = vec![0.0; l * k];
    for j in 0..k {
        a[j] = tr(trans, n, start, j) + emissions.get(0, j);
    }
    let mut buf = vec![0.0; k];
    for t in 1..l {
        for j in 0..k {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = a[(t - 1) * k + i] + tr(trans, n, i, j);
            }
            a[t * k + j] = log_sum_exp(&buf) + emissions.get(t, j);
        }
    }
    a
}

/// Log-space backward variables, `L × K`; `β[L−1][j] = trans[j][STOP]`.
fn betas(emissions: &Matrix, trans: &[f64]) -> Vec<f64> {
    let (l, k, n) = check(emissions, trans);
    let stop = k + 1;
    let mut b = vec![0.0; l * k];
    for i in 0..k {
        b[(l - 1) * k + i] = tr(trans, n, i, stop);
    }
    let mut buf = vec![0.0; k];
    for t in (0..l.saturating_sub(1)).rev() {
        for i in 0..k {
            for (j, x) in buf.iter_mut().enumerate() {
                *x = tr(trans, n, i, j) + emissions.get(t + 1, j) + b[(t + 1) * k + j];
            }
            b[t * k + i] = log_sum_exp(&buf);
        }
    }
    b
}

pub fn log_partition(emissions: &Matrix, trans: &[f64]) -> f64 {
    let (l, k, n) = check(emissions, trans);
    assert!(l >= 1, "empty emission sequence");
    let a = alphas(emissions, trans);
    let last: Vec<f64> = (0..k)
        .map(|j| a[(l - 1) * k + j] + tr(trans, n, j, k + 1))
        .collect();
    log_sum_exp(&last)
}

fn check_tags(tags: &[usize], emissions: &Matrix) -> Result<()> {
    if tags.len() != emissions.rows {
        return Err(Error::Input(format!(
            "{} tags for {} positions",
            tags.len(),
            emissions.rows
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= emissions.cols) {
        return Err(Error::Input(format!("tag id {bad} out of range for {} tags", emissions.cols)));
    }
    Ok(())
}

pub fn path_score(emissions: &Matrix, trans: &[f64], tags: &[usize]) -> Result<f64> {
    check_tags(tags, emissions)?;
    let (l, k, n) = check(emissions, trans);
    let mut s = tr(trans, n, k, tags[0]) + tr(trans, n, tags[l - 1], k + 1);
    for t in 0..l {
        s += emissions.get(t, tags[t]);
        if t > 0 {
            s += tr(trans, n, tags[t - 1], tags[t]);
        }
    }
    Ok(s)
}

/// `score(tags) − log Z`; never positive.
pub fn log_likelihood(emissions: &Matrix, trans: &[f64], tags: &[usize]) -> Result<f64> {
    Ok(path_score(emissions, trans, tags)? - log_partition(emissions, trans))
}

/// Per-position and pairwise posterior marginals.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_z: f64,
    /// `L × K`
    pub unary: Matrix,
    /// Expected transition counts, `(K+2)×(K+2)`, including START/STOP rows.
    pub transitions: Vec<f64>,
}

pub fn marginals(emissions: &Matrix, trans: &[f64]) -> Marginals {
    let (l, k, n) = check(emissions, trans);
    let a = alphas(emissions, trans);
    let b = betas(emissions, trans);
    let last: Vec<f64> = (0..k)
        .map(|j| a[(l - 1) * k + j] + tr(trans, n, j, k + 1))
        .collect();
    let log_z = log_sum_exp(&last);
    let mut unary = Matrix::zeros(l, k);
    for t in 0..l {
        for j in 0..k {
            unary.data[t * k + j] = (a[t * k + j] + b[t * k + j] - log_z).exp();
        }
    }
    let mut et = vec![0.0; n * n];
    for j in 0..k {
        et[k * n + j] = unary.get(0, j);
        et[j * n + k + 1] = unary.get(l - 1, j);
    }
    for t in 0..l.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let lp = a[t * k + i]
                    + tr(trans, n, i, j)
                    + emissions.get(t + 1, j)
                    + b[(t + 1) * k + j]
                    - log_z;
                et[i * n + j] += lp.exp();
            }
        }
    }
    Marginals {
        log_z,
        unary,
        transitions: et,
    }
}

/// Negative log-likelihood of `tags` with its gradients with respect to the
/// emissions and the transition matrix.
pub fn nll_with_grads(
    emissions: &Matrix,
    trans: &[f64],
    tags: &[usize],
) -> Result<(f64, Matrix, Vec<f64>)> {
    let score = path_score(emissions, trans, tags)?;
    let (l, k, n) = check(emissions, trans);
    let m = marginals(emissions, trans);
    let mut d_em = m.unary;
    let mut d_tr = m.transitions;
    for t in 0..l {
        d_em.data[t * k + tags[t]] -= 1.0;
        if t > 0 {
            d_tr[tags[t - 1] * n + tags[t]] -= 1.0;
        }
    }
    d_tr[k * n + tags[0]] -= 1.0;
    d_tr[tags[l - 1] * n + k + 1] -= 1.0;
    Ok((m.log_z - score, d_em, d_tr))
}

/// Highest-scoring path; ties go to the lowest tag id at every backpointer
/// and at the final state.
pub fn viterbi(emissions: &Matrix, trans: &[f64]) -> (Vec<usize>, f64) {
    let (l, k, n) = check(emissions, trans);
    assert!(l >= 1, "empty emission sequence");
    let mut delta = vec![0.0; l * k];
    let mut back = vec![0usize; l * k];
    for j in 0..k {
        delta[j] = tr(trans, n, k, j) + emissions.get(0, j);
    }
    for t in 1..l {
        for j in 0..k {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for i in 0..k {
                let s = delta[(t - 1) * k + i] + tr(trans, n, i, j);
                if s > best_s {
                    best_s = s;
                    best = i;
                }
            }
            delta[t * k + j] = best_s + emissions.get(t, j);
            back[t * k + j] = best;
        }
    }
    let mut last = 0;
    let mut last_s = f64::NEG_INFINITY;
    for j in 0..k {
        let s = delta[(l - 1) * k + j] + tr(trans, n, j, k + 1);
        if s > last_s {
            last_s = s;
            last = j;
        }
    }
    let mut path = vec![0; l];
    path[l - 1] = last;
    for t in (1..l).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    (path, last_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_by_two() {
        let em = Matrix::zeros(2, 2);
        let tr = vec![0.0; 16];
        assert!((log_partition(&em, &tr) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(viterbi(&em, &tr).0, vec![0, 0]);
    }

    #[test]
    fn single_step() {
        let em = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let tr = vec![0.0; 25];
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_partition(&em, &tr) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_tag_likelihood_is_zero() {
        let em = Matrix::from_vec(3, 1, vec![0.3, -1.0, 2.0]);
        let tr: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        assert!(log_likelihood(&em, &tr, &[0, 0, 0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn invalid_tag_is_input_error() {
        let em = Matrix::zeros(2, 2);
        let tr = vec![0.0; 16];
        assert!(matches!(log_likelihood(&em, &tr, &[0, 2]), Err(Error::Input(_))));
        assert!(matches!(log_likelihood(&em, &tr, &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn marginals_are_normalised() {
        let em = Matrix::from_vec(3, 2, vec![0.1, 0.5, -0.3, 0.2, 0.9, -1.0]);
        let tr: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.2 - 0.4).collect();
        let m = marginals(&em, &tr);
        for t in 0..3 {
            assert!((m.unary.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // two internal transitions plus START and STOP
        assert!((m.transitions.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }
}
