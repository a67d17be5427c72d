//! One direction of an LSTM layer over a whole sequence, with the cached
//! activations needed for backpropagation through time.
//!
//! Gate order in the stacked weight matrix is input, forget, cell, output;
//! the matrix multiplies `[x_t; h_prev]`.

use super::matrix::{gemv_acc, gemv_t_acc, outer_acc, sigmoid};
use super::params::LinearRef;

#[derive(Debug, Clone)]
pub(crate) struct LstmRun {
    pub len: usize,
    pub hidden: usize,
    pub reverse: bool,
    /// Post-activation gates `[i f g o]` per position, `len × 4h`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    /// Outputs, `len × h`, indexed by sequence position.
    pub states: Vec<f64>,
}

impl LstmRun {
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.hidden..(t + 1) * self.hidden]
    }

    /// Position processed just before `t`, if any.
    fn prev(&self, t: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < self.len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }

    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.len).rev())
        } else {
            Box::new(0..self.len)
        }
    }
}

pub(crate) fn forward(cell: LinearRef<'_>, inputs: &[f64], in_dim: usize, reverse: bool) -> LstmRun {
    let h = cell.out / 4;
    debug_assert_eq!(cell.inp, in_dim + h);
    let len = inputs.len() / in_dim;
    let mut run = LstmRun {
        len,
        hidden: h,
        reverse,
        gates: vec![0.0; len * 4 * h],
        cells: vec![0.0; len * h],
        tanh_cells: vec![0.0; len * h],
        states: vec![0.0; len * h],
    };
    let mut xh = vec![0.0; in_dim + h];
    let mut z = vec![0.0; 4 * h];
    let zero = vec![0.0; h];
    let order: Vec<usize> = run.order().collect();
    for t in order {
        let prev = run.prev(t);
        xh[..in_dim].copy_from_slice(&inputs[t * in_dim..(t + 1) * in_dim]);
        let (h_prev, c_prev): (Vec<f64>, Vec<f64>) = match prev {
            Some(p) => (run.state(p).to_vec(), run.cells[p * h..(p + 1) * h].to_vec()),
            None => (zero.clone(), zero.clone()),
        };
        xh[in_dim..].copy_from_slice(&h_prev);
        z.copy_from_slice(cell.b);
        gemv_acc(cell.w, &xh, &mut z);
        let g = &mut run.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            g[k] = sigmoid(z[k]);
            g[h + k] = sigmoid(z[h + k]);
            g[2 * h + k] = z[2 * h + k].tanh();
            g[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        for k in 0..h {
            let c = g[h + k] * c_prev[k] + g[k] * g[2 * h + k];
            let tc = c.tanh();
            run.cells[t * h + k] = c;
            run.tanh_cells[t * h + k] = tc;
            run.states[t * h + k] = g[3 * h + k] * tc;
        }
    }
    run
}

/// Backpropagates `d_states` (`len × h`, gradient of the loss with respect
/// to each output) through the run. Accumulates into `w_grad`/`b_grad` and
/// returns the gradient with respect to the inputs (`len × in_dim`).
pub(crate) fn backward(
    cell: LinearRef<'_>,
    run: &LstmRun,
    inputs: &[f64],
    in_dim: usize,
    d_states: &[f64],
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) -> Vec<f64> {
    let h = run.hidden;
    let mut dx = vec![0.0; run.len * in_dim];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let mut xh = vec![0.0; in_dim + h];
    let mut dxh = vec![0.0; in_dim + h];
    let order: Vec<usize> = run.order().collect();
    for &t in order.iter().rev() {
        let prev = run.prev(t);
        let g = &run.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let dh = d_states[t * h + k] + dh_next[k];
            let tc = run.tanh_cells[t * h + k];
            let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let c_prev = prev.map_or(0.0, |p| run.cells[p * h + k]);
            let d_o = dh * tc;
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            dz[k] = dc * gg * i * (1.0 - i);
            dz[h + k] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - gg * gg);
            dz[3 * h + k] = d_o * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        xh[..in_dim].copy_from_slice(&inputs[t * in_dim..(t + 1) * in_dim]);
        match prev {
            Some(p) => xh[in_dim..].copy_from_slice(run.state(p)),
            None => xh[in_dim..].iter_mut().for_each(|x| *x = 0.0),
        }
        outer_acc(&dz, &xh, w_grad);
        for (b, d) in b_grad.iter_mut().zip(&dz) {
            *b += d;
        }
        dxh.iter_mut().for_each(|x| *x = 0.0);
        gemv_t_acc(cell.w, &dz, &mut dxh);
        dx[t * in_dim..(t + 1) * in_dim].copy_from_slice(&dxh[..in_dim]);
        dh_next.copy_from_slice(&dxh[in_dim..]);
    }
    dx
}
