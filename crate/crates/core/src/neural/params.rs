use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network sizes. `n_tags` excludes the virtual START/STOP states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub n_intents: usize,
    pub n_tags: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.emb_dim == 0
            || self.hidden == 0
            || self.n_intents == 0
            || self.n_tags == 0
        {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Side of the transition matrix (tags plus START and STOP).
    pub fn n_states(&self) -> usize {
        self.n_tags + 2
    }
}

/// The six recurrent cells, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    SharedFwd,
    SharedBwd,
    IcFwd,
    IcBwd,
    NerFwd,
    NerBwd,
}

impl Cell {
    pub const ALL: [Cell; 6] = [
        Cell::SharedFwd,
        Cell::SharedBwd,
        Cell::IcFwd,
        Cell::IcBwd,
        Cell::NerFwd,
        Cell::NerBwd,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Cross-view auxiliary heads: four token views over the NER encoder and
/// two sentence views over the IC encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Forward,
    Backward,
    Past,
    Future,
    SentenceForward,
    SentenceBackward,
}

impl View {
    pub const TOKEN: [View; 4] = [View::Forward, View::Backward, View::Past, View::Future];
    pub const SENTENCE: [View; 2] = [View::SentenceForward, View::SentenceBackward];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LinearLayout {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub out: usize,
    pub inp: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub emb: Range<usize>,
    pub cells: Vec<LinearLayout>,
    pub ic_head: LinearLayout,
    pub ner_emit: LinearLayout,
    pub trans: Range<usize>,
    pub views: Vec<LinearLayout>,
    pub total: usize,
}

impl Layout {
    fn new(d: &ModelDims) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let linear = |out: usize, inp: usize, take: &mut dyn FnMut(usize) -> Range<usize>| {
            LinearLayout {
                w: take(out * inp),
                b: take(out),
                out,
                inp,
            }
        };
        let h = d.hidden;
        let emb = take(d.vocab_size * d.emb_dim);
        let cells = Cell::ALL
            .iter()
            .map(|c| {
                let inp = match c {
                    Cell::SharedFwd | Cell::SharedBwd => d.emb_dim,
                    _ => 2 * h,
                };
                linear(4 * h, inp + h, &mut take)
            })
            .collect();
        let ic_head = linear(d.n_intents, 2 * h, &mut take);
        let ner_emit = linear(d.n_tags, 2 * h, &mut take);
        let trans = take(d.n_states() * d.n_states());
        let views = [d.n_tags, d.n_tags, d.n_tags, d.n_tags, d.n_intents, d.n_intents]
            .iter()
            .map(|&out| linear(out, h, &mut take))
            .collect();
        drop(take);
        Layout {
            emb,
            cells,
            ic_head,
            ner_emit,
            trans,
            views,
            total: off,
        }
    }
}

/// Borrowed weight/bias pair of an affine map.
#[derive(Clone, Copy)]
pub struct LinearRef<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub out: usize,
    pub inp: usize,
}

/// All learnable parameters, stored contiguously. Gradients use the same
/// type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let layout = Layout::new(&dims);
        let data = vec![0.0; layout.total];
        ModelParams { dims, layout, data }
    }

    /// Embeddings uniform in ±0.1, recurrent and output weights Glorot
    /// uniform, forget-gate biases 1, transitions 0.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut p = ModelParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = p.layout.emb.clone();
        for x in &mut p.data[emb] {
            *x = rng.gen_range(-0.1..0.1);
        }
        let h = dims.hidden;
        let mut linears: Vec<(LinearLayout, bool)> =
            p.layout.cells.iter().map(|l| (l.clone(), true)).collect();
        linears.push((p.layout.ic_head.clone(), false));
        linears.push((p.layout.ner_emit.clone(), false));
        linears.extend(p.layout.views.iter().map(|l| (l.clone(), false)));
        for (l, is_cell) in linears {
            let fan = if is_cell { h + l.inp } else { l.out + l.inp };
            let a = (6.0 / fan as f64).sqrt();
            for x in &mut p.data[l.w.clone()] {
                *x = rng.gen_range(-a..a);
            }
            if is_cell {
                let b = l.b.start;
                for x in &mut p.data[b + h..b + 2 * h] {
                    *x = 1.0;
                }
            }
        }
        p
    }

    pub fn from_data(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&dims);
        if data.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.total,
                data.len()
            )));
        }
        Ok(ModelParams { dims, layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn embedding(&self, word: usize) -> &[f64] {
        let d = self.dims.emb_dim;
        &self.data[self.layout.emb.start + word * d..self.layout.emb.start + (word + 1) * d]
    }

    pub fn embedding_mut(&mut self, word: usize) -> &mut [f64] {
        let d = self.dims.emb_dim;
        let s = self.layout.emb.start;
        &mut self.data[s + word * d..s + (word + 1) * d]
    }

    fn linear_ref(&self, l: &LinearLayout) -> LinearRef<'_> {
        LinearRef {
            w: &self.data[l.w.clone()],
            b: &self.data[l.b.clone()],
            out: l.out,
            inp: l.inp,
        }
    }

    pub fn cell(&self, c: Cell) -> LinearRef<'_> {
        self.linear_ref(&self.layout.cells[c.index()])
    }

    pub fn ic_head(&self) -> LinearRef<'_> {
        self.linear_ref(&self.layout.ic_head)
    }

    pub fn ner_emit(&self) -> LinearRef<'_> {
        self.linear_ref(&self.layout.ner_emit)
    }

    pub fn view(&self, v: View) -> LinearRef<'_> {
        self.linear_ref(&self.layout.views[v.index()])
    }

    /// `(K+2)×(K+2)` row-major; row = from state, column = to state.
    pub fn transitions(&self) -> &[f64] {
        &self.data[self.layout.trans.clone()]
    }

    pub fn transitions_mut(&mut self) -> &mut [f64] {
        let r = self.layout.trans.clone();
        &mut self.data[r]
    }

    pub(crate) fn linear_grad(&mut self, l: &LinearLayout) -> (&mut [f64], &mut [f64]) {
        let (lo, hi) = self.data.split_at_mut(l.b.start);
        (&mut lo[l.w.clone()], &mut hi[..l.out])
    }

    pub(crate) fn cell_grad(&mut self, c: Cell) -> (&mut [f64], &mut [f64]) {
        let l = self.layout.cells[c.index()].clone();
        self.linear_grad(&l)
    }

    pub(crate) fn ic_head_grad(&mut self) -> (&mut [f64], &mut [f64]) {
        let l = self.layout.ic_head.clone();
        self.linear_grad(&l)
    }

    pub(crate) fn ner_emit_grad(&mut self) -> (&mut [f64], &mut [f64]) {
        let l = self.layout.ner_emit.clone();
        self.linear_grad(&l)
    }

    pub(crate) fn view_grad(&mut self, v: View) -> (&mut [f64], &mut [f64]) {
        let l = self.layout.views[v.index()].clone();
        self.linear_grad(&l)
    }

    /// Zeroes every block except the embedding table.
    pub fn zero_all_but_embeddings(&mut self) {
        let emb_end = self.layout.emb.end;
        self.data[emb_end..].iter_mut().for_each(|x| *x = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 5,
            emb_dim: 3,
            hidden: 2,
            n_intents: 2,
            n_tags: 3,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let d = dims();
        let p = ModelParams::zeros(d);
        let h = 2;
        let expected = 5 * 3
            + 2 * (4 * h * (3 + h) + 4 * h)
            + 4 * (4 * h * (2 * h + h) + 4 * h)
            + (2 * 2 * h + 2)
            + (3 * 2 * h + 3)
            + 25
            + 4 * (3 * h + 3)
            + 2 * (2 * h + 2);
        assert_eq!(p.len(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(dims(), 1);
        let b = ModelParams::init(dims(), 1);
        let c = ModelParams::init(dims(), 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.transitions().iter().all(|&x| x == 0.0));
        assert!(a.data[a.layout.emb.clone()].iter().all(|x| x.abs() <= 0.1));
    }
}
