//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix. Batched sequences are stored
//! as stacked rows and described by segment offsets (`seg[i]..seg[i + 1]`
//! are the rows of example `i`), so variable-length examples never need
//! padding. Feature maps of the image encoder are channels-last: one row per
//! pixel, one column per channel.
//!
//! The op set is deliberately small and fused where it matters for speed on
//! a single CPU core (attention, layer norm, cross-entropy, im2col).

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point element type usable by the graph (`f32` for training,
/// `f64` for finite-difference checks).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over channels-last rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Dropout { x: Var, mask: Array2<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<F>, rstd: Vec<F> },
    Im2Col { x: Var, geom: ConvGeom },
    Gather { sources: Vec<Var>, index: Vec<(usize, usize)> },
    Attention(Box<AttentionTape<F>>),
    SegmentMean { x: Var, seg: Vec<usize> },
    SegmentMax { x: Var, seg: Vec<usize>, argmax: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<F> },
    Sum(Var),
}

struct AttentionTape<F> {
    q: Var,
    k: Var,
    v: Var,
    q_seg: Vec<usize>,
    k_seg: Vec<usize>,
    heads: usize,
    probs: Vec<Array2<F>>,
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A recording of a forward computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    rng: Option<ChaCha8Rng>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl<F: Real> Graph<F> {
    /// A graph in inference mode (dropout is the identity).
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), rng: None }
    }

    /// A graph in training mode; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph { nodes: Vec::new(), rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Array2<F>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension mismatch");
        let out = av.dot(&bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x + bias` with a `1 × n` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1, "bias must be a single row");
        let out = self.value(x) + bv;
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    /// `x + tile(t)` where `x` has `r · t.nrows()` rows.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Var {
        let tv = self.value(t);
        let xv = self.value(x);
        let m = tv.nrows();
        assert!(m > 0 && xv.nrows().is_multiple_of(m), "add_tiled row count mismatch");
        assert_eq!(xv.ncols(), tv.ncols());
        let mut out = xv.clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), m) {
            chunk += tv;
        }
        let ng = self.ng(x) || self.ng(t);
        self.push(out, Op::AddTiled(x, t), ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x) * c;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `x * s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(x) * sv;
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.exp());
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().to_owned();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Inverted dropout; the identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = F::lit(1.0 / (1.0 - p));
        let (r, c) = self.nodes[x.0].value.dim();
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        });
        let out = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Row-wise layer normalisation with `1 × n` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = F::lit(cols as f64);
        let eps = F::lit(LN_EPS);
        let mut xhat = Array2::<F>::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * r;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Unfolds channels-last feature maps into convolution patches:
    /// one row per output pixel, columns ordered `(ky, kx, channel)`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.dim(),
            (geom.batch * geom.height * geom.width, geom.channels),
            "im2col input shape does not match geometry"
        );
        let out = im2col_forward(xv, &geom);
        let ng = self.ng(x);
        self.push(out, Op::Im2Col { x, geom }, ng)
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    /// Covers embedding lookup, concatenation, slicing and tiling.
    pub fn gather(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Var {
        assert!(!sources.is_empty());
        let cols = self.value(sources[0]).ncols();
        for &s in sources {
            assert_eq!(self.value(s).ncols(), cols, "gather sources differ in width");
        }
        let mut out = Array2::<F>::zeros((index.len(), cols));
        for (r, &(src, row)) in index.iter().enumerate() {
            out.row_mut(r).assign(&self.value(sources[src]).row(row));
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(out, Op::Gather { sources: sources.to_vec(), index }, ng)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let index = ids.iter().map(|&i| (0, i)).collect();
        self.gather(&[table], index)
    }

    /// Segmented multi-head scaled dot-product attention.
    ///
    /// Rows `q_seg[i]..q_seg[i+1]` of `q` attend to rows `k_seg[i]..k_seg[i+1]`
    /// of `k`/`v`. With `causal`, query `t` of a segment only sees keys `0..=t`
    /// (query and key segments must then have equal lengths).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_seg: &[usize],
        k_seg: &[usize],
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.dim(), kv.dim());
        assert!(heads > 0 && d % heads == 0, "model width not divisible by heads");
        assert_eq!(q_seg.len(), k_seg.len(), "segment count mismatch");
        assert_eq!(*q_seg.last().unwrap(), qv.nrows());
        assert_eq!(*k_seg.last().unwrap(), kv.nrows());
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros(qv.dim());
        let mut probs = Vec::with_capacity((q_seg.len() - 1) * heads);
        for i in 0..q_seg.len() - 1 {
            let (q0, q1) = (q_seg[i], q_seg[i + 1]);
            let (k0, k1) = (k_seg[i], k_seg[i + 1]);
            assert!(k1 > k0 || q1 == q0, "attention segment with no keys");
            if causal {
                assert_eq!(q1 - q0, k1 - k0, "causal attention needs square segments");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![q0..q1, cols.clone()]);
                let kh = kv.slice(s![k0..k1, cols.clone()]);
                let vh = vv.slice(s![k0..k1, cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                if causal {
                    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
                        for c in r + 1..row.len() {
                            row[c] = F::neg_infinity();
                        }
                    }
                }
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![q0..q1, cols]).assign(&scores.dot(&vh));
                probs.push(scores);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let tape = AttentionTape {
            q,
            k,
            v,
            q_seg: q_seg.to_vec(),
            k_seg: k_seg.to_vec(),
            heads,
            probs,
        };
        self.push(out, Op::Attention(Box::new(tape)), ng)
    }

    /// Mean of each row segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, seg: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Array2::<F>::zeros((seg.len() - 1, xv.ncols()));
        for i in 0..seg.len() - 1 {
            let n = seg[i + 1] - seg[i];
            assert!(n > 0, "empty segment");
            let m = xv.slice(s![seg[i]..seg[i + 1], ..]).sum_axis(Axis(0)) / F::lit(n as f64);
            out.row_mut(i).assign(&m);
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg: seg.to_vec() }, ng)
    }

    /// Column-wise max of each row segment.
    pub fn segment_max(&mut self, x: Var, seg: &[usize]) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let nseg = seg.len() - 1;
        let mut out = Array2::<F>::zeros((nseg, cols));
        let mut argmax = vec![0usize; nseg * cols];
        for i in 0..nseg {
            assert!(seg[i + 1] > seg[i], "empty segment");
            for c in 0..cols {
                let mut best = seg[i];
                for r in seg[i] + 1..seg[i + 1] {
                    if xv[[r, c]] > xv[[best, c]] {
                        best = r;
                    }
                }
                out[[i, c]] = xv[[best, c]];
                argmax[i * cols + c] = best;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMax { x, seg: seg.to_vec(), argmax }, ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let eps = F::lit(NORM_EPS);
        let norms: Vec<F> = xv
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps))
            .collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logits row");
        assert!(!targets.is_empty(), "cross entropy over zero rows");
        let mut probs = lv.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.ncols(), "target out of range");
            let row = lv.row(r);
            let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            total += lse - row[t];
        }
        let loss = total / F::lit(targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x), ng)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Gradients of all parameter leaves as `(param slot, grad)` pairs.
    /// A parameter bound more than once has its gradients summed.
    pub fn param_grads(&self, grads: &Grads<F>) -> Vec<(usize, Array2<F>)> {
        let mut out: Vec<(usize, Array2<F>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    match out.iter_mut().find(|(pid, _)| *pid == id) {
                        Some((_, acc)) => *acc += g,
                        None => out.push((id, g.clone())),
                    }
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backward_node(&self, idx: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = if *ta { val(*a).t() } else { val(*a).view() };
                let bv = if *tb { val(*b).t() } else { val(*b).view() };
                if self.ng(*a) {
                    let ga = if *ta { bv.dot(&g.t()) } else { g.dot(&bv.t()) };
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = if *tb { g.t().dot(&av) } else { av.t().dot(g) };
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddTiled(x, t) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*t) {
                    let m = val(*t).nrows();
                    let mut gt = Array2::<F>::zeros(val(*t).dim());
                    for chunk in g.axis_chunks_iter(Axis(0), m) {
                        gt += &chunk;
                    }
                    self.acc(grads, *t, gt);
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g * *c),
            Op::ScaleBy(x, sv) => {
                let s_val = val(*sv)[[0, 0]];
                if self.ng(*x) {
                    self.acc(grads, *x, g * s_val);
                }
                if self.ng(*sv) {
                    let d = Zip::from(g).and(val(*x)).fold(F::zero(), |acc, &a, &b| acc + a * b);
                    self.acc(grads, *sv, Array2::from_elem((1, 1), d));
                }
            }
            Op::Exp(x) => self.acc(grads, *x, g * &self.nodes[idx].value),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &xv| {
                    if xv <= F::zero() {
                        *d = F::zero();
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &xv| *d *= gelu_grad(xv));
                self.acc(grads, *x, d);
            }
            Op::Transpose(x) => self.acc(grads, *x, g.t().to_owned()),
            Op::Dropout { x, mask } => self.acc(grads, *x, g * mask),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma);
                if self.ng(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * gv;
                    let n = F::lit(xhat.ncols() as f64);
                    let mut dx = Array2::<F>::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let m1 = dh.sum() / n;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (dh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Im2Col { x, geom } => {
                if self.ng(*x) {
                    self.acc(grads, *x, col2im(g, geom));
                }
            }
            Op::Gather { sources, index } => {
                let mut partial: Vec<Option<Array2<F>>> = sources
                    .iter()
                    .map(|&s| self.ng(s).then(|| Array2::zeros(val(s).dim())))
                    .collect();
                for (r, &(src, row)) in index.iter().enumerate() {
                    if let Some(p) = &mut partial[src] {
                        let mut dst = p.row_mut(row);
                        dst += &g.row(r);
                    }
                }
                for (s, p) in sources.iter().zip(partial) {
                    if let Some(p) = p {
                        self.acc(grads, *s, p);
                    }
                }
            }
            Op::Attention(tape) => self.attention_backward(tape, g, grads),
            Op::SegmentMean { x, seg } => {
                let mut dx = Array2::<F>::zeros(val(*x).dim());
                for i in 0..seg.len() - 1 {
                    let n = F::lit((seg[i + 1] - seg[i]) as f64);
                    let row = g.row(i).mapv(|v| v / n);
                    for r in seg[i]..seg[i + 1] {
                        dx.row_mut(r).assign(&row);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SegmentMax { x, seg, argmax } => {
                let cols = val(*x).ncols();
                let mut dx = Array2::<F>::zeros(val(*x).dim());
                for i in 0..seg.len() - 1 {
                    for c in 0..cols {
                        dx[[argmax[i * cols + c], c]] += g[[i, c]];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[idx].value;
                let mut dx = Array2::<F>::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g[[0, 0]] / F::lit(targets.len() as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= F::one();
                }
                d *= scale;
                self.acc(grads, *logits, d);
            }
            Op::Sum(x) => {
                let s = g[[0, 0]];
                self.acc(grads, *x, Array2::from_elem(val(*x).dim(), s));
            }
        }
    }

    fn attention_backward(&self, t: &AttentionTape<F>, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let qv = &self.nodes[t.q.0].value;
        let kv = &self.nodes[t.k.0].value;
        let vv = &self.nodes[t.v.0].value;
        let d = qv.ncols();
        let dh = d / t.heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Array2::<F>::zeros(qv.dim());
        let mut dk = Array2::<F>::zeros(kv.dim());
        let mut dv = Array2::<F>::zeros(vv.dim());
        for i in 0..t.q_seg.len() - 1 {
            let (q0, q1) = (t.q_seg[i], t.q_seg[i + 1]);
            let (k0, k1) = (t.k_seg[i], t.k_seg[i + 1]);
            for h in 0..t.heads {
                let p = &t.probs[i * t.heads + h];
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![q0..q1, cols.clone()]);
                let qh = qv.slice(s![q0..q1, cols.clone()]);
                let kh = kv.slice(s![k0..k1, cols.clone()]);
                let vh = vv.slice(s![k0..k1, cols.clone()]);
                let mut dvh = dv.slice_mut(s![k0..k1, cols.clone()]);
                dvh += &p.t().dot(&go);
                let dp = go.dot(&vh.t());
                let mut ds = Array2::<F>::zeros(p.dim());
                for r in 0..p.nrows() {
                    let pr = p.row(r);
                    let dpr = dp.row(r);
                    let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
                        *o = pr[c] * (dpr[c] - dot) * scale;
                    }
                }
                let mut dqh = dq.slice_mut(s![q0..q1, cols.clone()]);
                dqh += &ds.dot(&kh);
                let mut dkh = dk.slice_mut(s![k0..k1, cols]);
                dkh += &ds.t().dot(&qh);
            }
        }
        self.acc(grads, t.q, dq);
        self.acc(grads, t.k, dk);
        self.acc(grads, t.v, dv);
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    F::lit(0.5) * (F::one() + t)
        + F::lit(0.5) * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

/// Numerically stable in-place softmax over each row. Rows that are entirely
/// `-inf` become all zeros.
pub fn softmax_rows_inplace<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let mx = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        if mx == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row /= total;
    }
}

fn im2col_forward<F: Real>(x: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let c = g.channels;
    let mut out = Array2::<F>::zeros((g.batch * ho * wo, g.patch_len()));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    let plen = g.patch_len();
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = orow + (ky * g.kernel + kx) * c;
                        os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<F: Real>(cols: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let c = g.channels;
    let plen = g.patch_len();
    let mut out = Array2::<F>::zeros((g.batch * g.height * g.width, c));
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let crow = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = crow + (ky * g.kernel + kx) * c;
                        for j in 0..c {
                            os[dst + j] += cs[src + j];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Checks d(sum(out ⊙ probe))/d(input) against central differences for
    /// every entry of every leaf.
    fn check<Fwd>(inputs: Vec<Array2<f64>>, fwd: Fwd)
    where
        Fwd: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let run = |vals: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> =
                vals.iter().enumerate().map(|(i, v)| g.param(i, v.clone())).collect();
            let out = fwd(&mut g, &vars);
            let loss = if g.value(out).dim() == (1, 1) {
                out
            } else {
                let mut prng = ChaCha8Rng::seed_from_u64(99);
                let (r, c) = g.value(out).dim();
                let probe = g.constant(rand_mat(&mut prng, r, c));
                let m = g.mul(out, probe);
                g.sum(m)
            };
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads);
            let mut by_slot: Vec<Array2<f64>> =
                vals.iter().map(|v| Array2::zeros(v.dim())).collect();
            for (id, gr) in pg {
                by_slot[id] = gr.as_standard_layout().to_owned();
            }
            (g.scalar(loss), by_slot)
        };
        let (_, analytic) = run(&inputs);
        let h = 1e-6;
        for (slot, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[slot].as_slice_mut().unwrap()[idx] += h;
                minus[slot].as_slice_mut().unwrap()[idx] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let an = analytic[slot].as_slice().unwrap()[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                assert!(err < 1e-5, "slot {slot} idx {idx}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_mat(&mut rng, 4, 3) } else { rand_mat(&mut rng, 3, 4) };
            let b = if tb { rand_mat(&mut rng, 2, 4) } else { rand_mat(&mut rng, 4, 2) };
            check(vec![a, b], |g, v| g.matmul_t(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        let row = rand_mat(&mut rng, 1, 4);
        let s = rand_mat(&mut rng, 1, 1);
        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]);
            let d = g.sub(m, v[1]);
            let e = g.exp(d);
            let x = g.gelu(e);
            g.add(x, v[0])
        });
        check(vec![a.clone(), row], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let r = g.relu(x);
            g.transpose(r)
        });
        check(vec![a, s], |g, v| {
            let x = g.scale_by(v[0], v[1]);
            g.scale(x, 0.3)
        });
    }

    #[test]
    fn tiled_gather_and_segments_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 6, 3);
        let t = rand_mat(&mut rng, 2, 3);
        let other = rand_mat(&mut rng, 4, 3);
        check(vec![x.clone(), t], |g, v| g.add_tiled(v[0], v[1]));
        check(vec![x.clone(), other], |g, v| {
            g.gather(&[v[0], v[1]], vec![(0, 1), (1, 3), (0, 1), (1, 0), (0, 5)])
        });
        check(vec![x.clone()], |g, v| g.segment_mean(v[0], &[0, 2, 6]));
        check(vec![x.clone()], |g, v| g.segment_max(v[0], &[0, 4, 6]));
        check(vec![x], |g, v| g.l2_normalize(v[0]));
    }

    #[test]
    fn layer_norm_and_cross_entropy_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 5);
        let gamma = rand_mat(&mut rng, 1, 5);
        let beta = rand_mat(&mut rng, 1, 5);
        check(vec![x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]));
        check(vec![x], |g, v| g.cross_entropy(v[0], &[4, 0, 2]));
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 7, 4);
        let v = rand_mat(&mut rng, 7, 4);
        check(vec![q, k, v], |g, x| g.attention(x[0], x[1], x[2], &[0, 2, 5], &[0, 4, 7], 2, false));
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        check(vec![q, k, v], |g, x| g.attention(x[0], x[1], x[2], &[0, 3, 5], &[0, 3, 5], 2, true));
    }

    #[test]
    fn im2col_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let geom = ConvGeom { batch: 2, height: 5, width: 4, channels: 2, kernel: 3, stride: 2, pad: 1 };
        let x = rand_mat(&mut rng, 2 * 5 * 4, 2);
        let w = rand_mat(&mut rng, geom.patch_len(), 3);
        check(vec![x, w], move |g, v| {
            let cols = g.im2col(v[0], geom);
            g.matmul(cols, v[1])
        });
    }

    #[test]
    fn im2col_on_non_overlapping_kernels_is_a_permutation() {
        let geom = ConvGeom { batch: 1, height: 4, width: 4, channels: 1, kernel: 2, stride: 2, pad: 0 };
        let x = Array2::from_shape_fn((16, 1), |(r, _)| r as f64);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let cols = g.im2col(xv, geom);
        let out = g.value(cols);
        assert_eq!(out.dim(), (4, 4));
        assert_eq!(out.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(out.row(3).to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 4, 4);
        let mut y = x.clone();
        y.row_mut(3).fill(5.0);
        let run = |m: Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(m);
            let o = g.attention(v, v, v, &[0, 4], &[0, 4], 2, true);
            g.value(o).clone()
        };
        let (a, b) = (run(x), run(y));
        assert_eq!(a.slice(s![0..3, ..]), b.slice(s![0..3, ..]));
    }

    #[test]
    fn dropout_is_identity_in_inference_mode() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array2::ones((2, 3)));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::<f32>::training(ChaCha8Rng::seed_from_u64(0));
        let x = g.constant(Array2::ones((50, 50)));
        let y = g.dropout(x, 0.5);
        let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 1000 && zeros < 1500);
    }
}
