//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its variables. Values are
//! computed eagerly when an op is pushed; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients for every node.
//!
//! Batches of bags are laid out as stacked `B*W x c` matrices. Ops with a
//! `Seg` prefix reduce or normalize within each run of `W` consecutive rows
//! and honor a per-row validity mask.

use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Segment layout shared by the `Seg*` ops: rows are grouped into bags of
/// `width` rows, `mask[r]` marks valid rows.
#[derive(Clone, Debug)]
pub struct Segments {
    pub width: usize,
    pub mask: Rc<[bool]>,
}

impl Segments {
    pub fn new(width: usize, mask: Vec<bool>) -> Self {
        assert!(width > 0 && mask.len() % width == 0, "mask length must be a multiple of W");
        Self {
            width,
            mask: mask.into(),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.len() / self.width
    }

    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    fn valid(&self, bag: usize) -> impl Iterator<Item = usize> + '_ {
        let start = bag * self.width;
        (start..start + self.width).filter(move |&r| self.mask[r])
    }

    fn valid_count(&self, bag: usize) -> usize {
        self.valid(bag).count()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Relu(Var),
    InvOnePlus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg: Segments,
        probs: Vec<T>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<T>,
        floor: T,
    },
    PairDist(Var, Var),
    RowMax {
        x: Var,
        arg: Vec<usize>,
    },
    RowSoftmax {
        x: Var,
        scale: T,
    },
    SegMax {
        x: Var,
        arg: Vec<usize>,
    },
    SegMean {
        x: Var,
        seg: Segments,
    },
    SegSoftmax {
        x: Var,
        seg: Segments,
    },
    SegPool {
        attn: Var,
        z: Var,
        seg: Segments,
    },
    GroupedDot {
        x: Var,
        u: Var,
    },
    AddScaledCol {
        x: Var,
        col: Var,
        s: Var,
    },
    ConcatCols(Vec<Var>),
    NormEntropyRows {
        x: Var,
        eps: T,
        active: Vec<bool>,
    },
    SegNormEntropy {
        x: Var,
        seg: Segments,
        eps: T,
    },
    SigmoidClamped {
        x: Var,
        limit: T,
    },
    Focal {
        logit: Var,
        labels: Vec<bool>,
        gamma: T,
        alpha: T,
        limit: T,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Operation record with eagerly computed values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// ln(1 + e^x) without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp<T: Real>(x: T, limit: T) -> T {
    x.max(-limit).min(limit)
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Tensor::zeros(n, m);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, n, k, m);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        for (o, &x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += x;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let mut out = self.value(a).clone();
        for (o, &x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// `a + 1 * bias` with `bias: 1 x cols`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias shape");
        let mut out = self.value(a).clone();
        let b = &self.nodes[bias.0].value.data;
        for i in 0..n {
            for (o, &x) in out.data[i * m..(i + 1) * m].iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    /// `mul * a + add`.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o = *o * mul + add;
        }
        self.push(out, Op::Affine(a, mul))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o = f(*o);
        }
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.map(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `1 / (1 + a)` elementwise.
    pub fn inv_one_plus(&mut self, a: Var) -> Var {
        self.map(a, |x| T::one() / (T::one() + x), Op::InvOnePlus(a))
    }

    /// Row-wise layer normalization with affine parameters `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m));
        assert_eq!(self.shape(beta), (1, m));
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mf = T::lit(m as f64);
        let mut xhat = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out.data[i * m + j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention within each bag.
    /// Invalid rows neither attend nor are attended to; their output is zero.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg: &Segments) -> Var {
        let (n, h) = self.shape(q);
        assert_eq!(self.shape(k), (n, h));
        assert_eq!(self.shape(v), (n, h));
        assert_eq!(n, seg.rows());
        assert!(heads > 0 && h % heads == 0, "hidden size must divide into heads");
        let dk = h / heads;
        let w = seg.width;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut probs = vec![T::zero(); seg.count() * heads * w * w];
        let mut out = Tensor::zeros(n, h);
        let mut scores = vec![T::zero(); w];
        for b in 0..seg.count() {
            let base = b * w;
            for hd in 0..heads {
                let off = hd * dk;
                for i in 0..w {
                    let ri = base + i;
                    if !seg.mask[ri] {
                        continue;
                    }
                    let qi = &qv[ri * h + off..ri * h + off + dk];
                    let mut mx = T::neg_infinity();
                    for j in 0..w {
                        let rj = base + j;
                        if !seg.mask[rj] {
                            continue;
                        }
                        let kj = &kv[rj * h + off..rj * h + off + dk];
                        let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..w {
                        if seg.mask[base + j] {
                            let e = (scores[j] - mx).exp();
                            scores[j] = e;
                            z += e;
                        }
                    }
                    let prow = &mut probs[((b * heads + hd) * w + i) * w..][..w];
                    for j in 0..w {
                        if seg.mask[base + j] {
                            prow[j] = scores[j] / z;
                        }
                    }
                    let orow = &mut out.data[ri * h + off..ri * h + off + dk];
                    for j in 0..w {
                        let p = prow[j];
                        if p == T::zero() {
                            continue;
                        }
                        let rj = base + j;
                        for (o, &x) in orow.iter_mut().zip(&vv[rj * h + off..rj * h + off + dk]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                heads,
                seg: seg.clone(),
                probs,
            },
        )
    }

    /// Divide each row by `max(norm, floor)`.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: T) -> Var {
        let (n, m) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut norms = vec![T::zero(); n];
        for i in 0..n {
            let row = &mut out.data[i * m..(i + 1) * m];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[i] = nrm;
            let d = nrm.max(floor);
            for v in row.iter_mut() {
                *v = *v / d;
            }
        }
        self.push(out, Op::L2NormRows { x, norms, floor })
    }

    /// Euclidean distances between rows of `a` (`n x h`) and rows of `b` (`m x h`).
    pub fn pair_dist(&mut self, a: Var, b: Var) -> Var {
        let (n, h) = self.shape(a);
        let (m, h2) = self.shape(b);
        assert_eq!(h, h2);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let s = av[i * h..(i + 1) * h]
                    .iter()
                    .zip(&bv[j * h..(j + 1) * h])
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>();
                out.data[i * m + j] = s.sqrt();
            }
        }
        self.push(out, Op::PairDist(a, b))
    }

    /// Row maxima as an `n x 1` column; ties resolve to the lowest column.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let xv = &self.nodes[x.0].value.data;
        let mut arg = vec![0; n];
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg[i] = best;
            out.data[i] = row[best];
        }
        self.push(out, Op::RowMax { x, arg })
    }

    /// Row-wise softmax of `scale * x`.
    pub fn row_softmax(&mut self, x: Var, scale: T) -> Var {
        let (n, m) = self.shape(x);
        let mut out = self.value(x).clone();
        for i in 0..n {
            let row = &mut out.data[i * m..(i + 1) * m];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v * scale - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push(out, Op::RowSoftmax { x, scale })
    }

    /// Maximum over valid rows of each bag of an `n x 1` column; `B x 1`.
    pub fn seg_max(&mut self, x: Var, seg: &Segments) -> Var {
        assert_eq!(self.shape(x), (seg.rows(), 1));
        let xv = &self.nodes[x.0].value.data;
        let mut arg = vec![usize::MAX; seg.count()];
        let mut out = Tensor::zeros(seg.count(), 1);
        for b in 0..seg.count() {
            let mut best: Option<usize> = None;
            for r in seg.valid(b) {
                if best.map_or(true, |p| xv[r] > xv[p]) {
                    best = Some(r);
                }
            }
            if let Some(r) = best {
                arg[b] = r;
                out.data[b] = xv[r];
            }
        }
        self.push(out, Op::SegMax { x, arg })
    }

    /// Column means over valid rows of each bag; `B x cols`.
    pub fn seg_mean(&mut self, x: Var, seg: &Segments) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(n, seg.rows());
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(seg.count(), m);
        for b in 0..seg.count() {
            let cnt = seg.valid_count(b);
            if cnt == 0 {
                continue;
            }
            let inv = T::one() / T::lit(cnt as f64);
            let orow = &mut out.data[b * m..(b + 1) * m];
            for r in seg.valid(b) {
                for (o, &v) in orow.iter_mut().zip(&xv[r * m..(r + 1) * m]) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        self.push(out, Op::SegMean { x, seg: seg.clone() })
    }

    /// Softmax over the valid rows of each bag, independently per column.
    /// Invalid rows receive exactly zero.
    pub fn seg_softmax(&mut self, x: Var, seg: &Segments) -> Var {
        let (n, kk) = self.shape(x);
        assert_eq!(n, seg.rows());
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(n, kk);
        for b in 0..seg.count() {
            for c in 0..kk {
                let mx = seg
                    .valid(b)
                    .fold(T::neg_infinity(), |a, r| a.max(xv[r * kk + c]));
                let mut z = T::zero();
                for r in seg.valid(b) {
                    let e = (xv[r * kk + c] - mx).exp();
                    out.data[r * kk + c] = e;
                    z += e;
                }
                for r in seg.valid(b) {
                    out.data[r * kk + c] = out.data[r * kk + c] / z;
                }
            }
        }
        self.push(out, Op::SegSoftmax { x, seg: seg.clone() })
    }

    /// Attention-weighted sums: for attention `n x K` and values `n x h`,
    /// returns `B x (K*h)` with head `k`'s pooled vector in columns `k*h..(k+1)*h`.
    pub fn seg_pool(&mut self, attn: Var, z: Var, seg: &Segments) -> Var {
        let (n, kk) = self.shape(attn);
        let (n2, h) = self.shape(z);
        assert_eq!(n, n2);
        assert_eq!(n, seg.rows());
        let av = &self.nodes[attn.0].value.data;
        let zv = &self.nodes[z.0].value.data;
        let mut out = Tensor::zeros(seg.count(), kk * h);
        for b in 0..seg.count() {
            for r in seg.valid(b) {
                let zr = &zv[r * h..(r + 1) * h];
                for k in 0..kk {
                    let a = av[r * kk + k];
                    let o = &mut out.data[b * kk * h + k * h..b * kk * h + (k + 1) * h];
                    for (o, &zz) in o.iter_mut().zip(zr) {
                        *o += a * zz;
                    }
                }
            }
        }
        self.push(out, Op::SegPool { attn, z, seg: seg.clone() })
    }

    /// Per-group dot products: `x: n x (K*g)`, `u: K x g` gives `n x K`.
    pub fn grouped_dot(&mut self, x: Var, u: Var) -> Var {
        let (n, kg) = self.shape(x);
        let (kk, g) = self.shape(u);
        assert_eq!(kk * g, kg);
        let xv = &self.nodes[x.0].value.data;
        let uv = &self.nodes[u.0].value.data;
        let mut out = Tensor::zeros(n, kk);
        for i in 0..n {
            for k in 0..kk {
                out.data[i * kk + k] = xv[i * kg + k * g..i * kg + (k + 1) * g]
                    .iter()
                    .zip(&uv[k * g..(k + 1) * g])
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
        }
        self.push(out, Op::GroupedDot { x, u })
    }

    /// `x[i, k] + s * col[i]` with `col: n x 1` and scalar `s: 1 x 1`.
    pub fn add_scaled_col(&mut self, x: Var, col: Var, s: Var) -> Var {
        let (n, kk) = self.shape(x);
        assert_eq!(self.shape(col), (n, 1));
        assert_eq!(self.shape(s), (1, 1));
        let sv = self.value(s).data[0];
        let mut out = self.value(x).clone();
        let cv = &self.nodes[col.0].value.data;
        for i in 0..n {
            for k in 0..kk {
                out.data[i * kk + k] += sv * cv[i];
            }
        }
        self.push(out, Op::AddScaledCol { x, col, s })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let (pn, pm) = self.shape(p);
            assert_eq!(pn, n, "concat rows");
            let pv = &self.nodes[p.0].value.data;
            for i in 0..n {
                out.data[i * total + off..i * total + off + pm].copy_from_slice(&pv[i * pm..(i + 1) * pm]);
            }
            off += pm;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Normalized row entropy `-sum_j x_j ln(x_j + eps) / ln(cols)` as an
    /// `n x 1` column, clamped to `[0, 1]`; zero when `cols < 2`.
    pub fn norm_entropy_rows(&mut self, x: Var, eps: T) -> Var {
        let (n, m) = self.shape(x);
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(n, 1);
        let mut active = vec![false; n];
        if m >= 2 {
            let denom = T::lit(m as f64).ln();
            for i in 0..n {
                let h = -xv[i * m..(i + 1) * m]
                    .iter()
                    .map(|&p| p * (p + eps).ln())
                    .sum::<T>()
                    / denom;
                active[i] = h > T::zero() && h < T::one();
                out.data[i] = h.max(T::zero()).min(T::one());
            }
        }
        self.push(out, Op::NormEntropyRows { x, eps, active })
    }

    /// Per bag and column normalized entropy of an attention matrix
    /// `n x K`: `-sum_valid a ln(a + eps) / ln(W_b)`, zero when `W_b = 1`.
    /// Returns `B x K`.
    pub fn seg_norm_entropy(&mut self, x: Var, seg: &Segments, eps: T) -> Var {
        let (n, kk) = self.shape(x);
        assert_eq!(n, seg.rows());
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(seg.count(), kk);
        for b in 0..seg.count() {
            let cnt = seg.valid_count(b);
            if cnt < 2 {
                continue;
            }
            let denom = T::lit(cnt as f64).ln();
            for k in 0..kk {
                let h = -seg
                    .valid(b)
                    .map(|r| {
                        let a = xv[r * kk + k];
                        a * (a + eps).ln()
                    })
                    .sum::<T>();
                out.data[b * kk + k] = h / denom;
            }
        }
        self.push(out, Op::SegNormEntropy { x, seg: seg.clone(), eps })
    }

    /// Logistic sigmoid of the logit clamped to `[-limit, limit]`.
    pub fn sigmoid_clamped(&mut self, x: Var, limit: T) -> Var {
        self.map(x, move |v| sigmoid(clamp(v, limit)), Op::SigmoidClamped { x, limit })
    }

    /// Per-row focal loss `-alpha_t (1 - p_t)^gamma ln p_t` evaluated from
    /// clamped logits with log-sigmoid arithmetic; `n x 1`.
    pub fn focal(&mut self, logit: Var, labels: &[bool], gamma: T, alpha: T, limit: T) -> Var {
        let (n, m) = self.shape(logit);
        assert_eq!(m, 1);
        assert_eq!(labels.len(), n);
        let lv = &self.nodes[logit.0].value.data;
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let l = clamp(lv[i], limit);
            // z is the logit of p_t.
            let (z, at) = if labels[i] { (l, alpha) } else { (-l, T::one() - alpha) };
            let log_pt = -softplus(-z);
            let one_minus = sigmoid(-z);
            out.data[i] = -at * one_minus.powf(gamma) * log_pt;
        }
        self.push(
            out,
            Op::Focal {
                logit,
                labels: labels.to_vec(),
                gamma,
                alpha,
                limit,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (_, m) = self.shape(x);
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(idx.len(), m);
        for (o, &i) in idx.iter().enumerate() {
            out.data[o * m..(o + 1) * m].copy_from_slice(&xv[i * m..(i + 1) * m]);
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Mean of all entries as a `1 x 1` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `sum_i w_i * x_i` over `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.shape(v), (1, 1));
            s += w * self.value(v).data[0];
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                matmul_bt_acc(g, bv, self.acc(grads, *a), n, m, k);
                matmul_at_acc(av, g, self.acc(grads, *b), n, k, m);
            }
            Op::Add(a, b) => {
                for (d, &gv) in self.acc(grads, *a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in self.acc(grads, *b).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sub(a, b) => {
                for (d, &gv) in self.acc(grads, *a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in self.acc(grads, *b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::AddRow(a, bias) => {
                for (d, &gv) in self.acc(grads, *a).iter_mut().zip(g) {
                    *d += gv;
                }
                let m = self.shape(*bias).1;
                let db = self.acc(grads, *bias);
                for row in g.chunks(m) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Op::Affine(a, mul) => {
                for (d, &gv) in self.acc(grads, *a).iter_mut().zip(g) {
                    *d += gv * *mul;
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &yv) in self.acc(grads, *a).iter_mut().zip(g).zip(y) {
                    *d += gv * (T::one() - yv * yv);
                }
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = &self.value(*a).data;
                for ((d, &gv), &x) in self.acc(grads, *a).iter_mut().zip(g).zip(xv) {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    *d += gv * (half * (T::one() + t) + half * x * dt);
                }
            }
            Op::Softplus(a) => {
                let xv = &self.value(*a).data;
                for ((d, &gv), &x) in self.acc(grads, *a).iter_mut().zip(g).zip(xv) {
                    *d += gv * sigmoid(x);
                }
            }
            Op::Relu(a) => {
                let xv = &self.value(*a).data;
                for ((d, &gv), &x) in self.acc(grads, *a).iter_mut().zip(g).zip(xv) {
                    if x > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::InvOnePlus(a) => {
                for ((d, &gv), &yv) in self.acc(grads, *a).iter_mut().zip(g).zip(y) {
                    *d -= gv * yv * yv;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = self.shape(*x);
                let gam = &self.value(*gamma).data;
                {
                    let dg = self.acc(grads, *gamma);
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                }
                {
                    let db = self.acc(grads, *beta);
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                }
                let mf = T::lit(m as f64);
                let dx = self.acc(grads, *x);
                let mut dxhat = vec![T::zero(); m];
                for i in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..m {
                        let v = g[i * m + j] * gam[j];
                        dxhat[j] = v;
                        s1 += v;
                        s2 += v * xhat[i * m + j];
                    }
                    for j in 0..m {
                        dx[i * m + j] += inv_std[i] / mf * (mf * dxhat[j] - s1 - xhat[i * m + j] * s2);
                    }
                }
            }
            Op::SelfAttention {
                q,
                k,
                v,
                heads,
                seg,
                probs,
            } => {
                let (n, h) = self.shape(*q);
                let dk = h / heads;
                let w = seg.width;
                let scale = T::one() / T::lit(dk as f64).sqrt();
                let qv = &self.value(*q).data;
                let kv = &self.value(*k).data;
                let vv = &self.value(*v).data;
                let mut dq = vec![T::zero(); n * h];
                let mut dkk = vec![T::zero(); n * h];
                let mut dv = vec![T::zero(); n * h];
                let mut dp = vec![T::zero(); w];
                for b in 0..seg.count() {
                    let base = b * w;
                    for hd in 0..*heads {
                        let off = hd * dk;
                        for i in 0..w {
                            let ri = base + i;
                            if !seg.mask[ri] {
                                continue;
                            }
                            let prow = &probs[((b * heads + hd) * w + i) * w..][..w];
                            let go = &g[ri * h + off..ri * h + off + dk];
                            let mut dot = T::zero();
                            for j in 0..w {
                                let rj = base + j;
                                if !seg.mask[rj] {
                                    continue;
                                }
                                let vj = &vv[rj * h + off..rj * h + off + dk];
                                let d = go.iter().zip(vj).map(|(&a, &c)| a * c).sum::<T>();
                                dp[j] = d;
                                dot += d * prow[j];
                                for (dvv, &gg) in dv[rj * h + off..rj * h + off + dk].iter_mut().zip(go) {
                                    *dvv += prow[j] * gg;
                                }
                            }
                            for j in 0..w {
                                let rj = base + j;
                                if !seg.mask[rj] {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                for c in 0..dk {
                                    dq[ri * h + off + c] += ds * kv[rj * h + off + c];
                                    dkk[rj * h + off + c] += ds * qv[ri * h + off + c];
                                }
                            }
                        }
                    }
                }
                for (d, x) in self.acc(grads, *q).iter_mut().zip(dq) {
                    *d += x;
                }
                for (d, x) in self.acc(grads, *k).iter_mut().zip(dkk) {
                    *d += x;
                }
                for (d, x) in self.acc(grads, *v).iter_mut().zip(dv) {
                    *d += x;
                }
            }
            Op::L2NormRows { x, norms, floor } => {
                let (n, m) = self.shape(*x);
                let dx = self.acc(grads, *x);
                for i in 0..n {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    if norms[i] > *floor {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..m {
                            dx[i * m + j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..m {
                            dx[i * m + j] += gr[j] / *floor;
                        }
                    }
                }
            }
            Op::PairDist(a, b) => {
                let (n, h) = self.shape(*a);
                let m = self.shape(*b).0;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let tiny = T::lit(1e-12);
                let mut da = vec![T::zero(); n * h];
                let mut db = vec![T::zero(); m * h];
                for i in 0..n {
                    for j in 0..m {
                        let d = y[i * m + j];
                        if d <= tiny {
                            continue;
                        }
                        let c = g[i * m + j] / d;
                        for t in 0..h {
                            let diff = (av[i * h + t] - bv[j * h + t]) * c;
                            da[i * h + t] += diff;
                            db[j * h + t] -= diff;
                        }
                    }
                }
                for (d, x) in self.acc(grads, *a).iter_mut().zip(da) {
                    *d += x;
                }
                for (d, x) in self.acc(grads, *b).iter_mut().zip(db) {
                    *d += x;
                }
            }
            Op::RowMax { x, arg } => {
                let m = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for (i, &j) in arg.iter().enumerate() {
                    dx[i * m + j] += g[i];
                }
            }
            Op::RowSoftmax { x, scale } => {
                let m = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for (i, (yr, gr)) in y.chunks(m).zip(g.chunks(m)).enumerate() {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..m {
                        dx[i * m + j] += *scale * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SegMax { x, arg } => {
                let dx = self.acc(grads, *x);
                for (b, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        dx[r] += g[b];
                    }
                }
            }
            Op::SegMean { x, seg } => {
                let m = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for b in 0..seg.count() {
                    let cnt = seg.valid_count(b);
                    if cnt == 0 {
                        continue;
                    }
                    let inv = T::one() / T::lit(cnt as f64);
                    for r in seg.valid(b) {
                        for j in 0..m {
                            dx[r * m + j] += g[b * m + j] * inv;
                        }
                    }
                }
            }
            Op::SegSoftmax { x, seg } => {
                let kk = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for b in 0..seg.count() {
                    for c in 0..kk {
                        let dot = seg.valid(b).map(|r| y[r * kk + c] * g[r * kk + c]).sum::<T>();
                        for r in seg.valid(b) {
                            dx[r * kk + c] += y[r * kk + c] * (g[r * kk + c] - dot);
                        }
                    }
                }
            }
            Op::SegPool { attn, z, seg } => {
                let kk = self.shape(*attn).1;
                let h = self.shape(*z).1;
                let av = &self.value(*attn).data;
                let zv = &self.value(*z).data;
                let mut da = vec![T::zero(); av.len()];
                let mut dz = vec![T::zero(); zv.len()];
                for b in 0..seg.count() {
                    for r in seg.valid(b) {
                        for k in 0..kk {
                            let go = &g[b * kk * h + k * h..b * kk * h + (k + 1) * h];
                            let a = av[r * kk + k];
                            let mut s = T::zero();
                            for t in 0..h {
                                s += go[t] * zv[r * h + t];
                                dz[r * h + t] += a * go[t];
                            }
                            da[r * kk + k] += s;
                        }
                    }
                }
                for (d, x) in self.acc(grads, *attn).iter_mut().zip(da) {
                    *d += x;
                }
                for (d, x) in self.acc(grads, *z).iter_mut().zip(dz) {
                    *d += x;
                }
            }
            Op::GroupedDot { x, u } => {
                let (n, kg) = self.shape(*x);
                let (kk, gsz) = self.shape(*u);
                let xv = &self.value(*x).data;
                let uv = &self.value(*u).data;
                let mut dx = vec![T::zero(); n * kg];
                let mut du = vec![T::zero(); kk * gsz];
                for i in 0..n {
                    for k in 0..kk {
                        let gv = g[i * kk + k];
                        for t in 0..gsz {
                            dx[i * kg + k * gsz + t] += gv * uv[k * gsz + t];
                            du[k * gsz + t] += gv * xv[i * kg + k * gsz + t];
                        }
                    }
                }
                for (d, v) in self.acc(grads, *x).iter_mut().zip(dx) {
                    *d += v;
                }
                for (d, v) in self.acc(grads, *u).iter_mut().zip(du) {
                    *d += v;
                }
            }
            Op::AddScaledCol { x, col, s } => {
                let (n, kk) = self.shape(*x);
                let sv = self.value(*s).data[0];
                let cv = &self.value(*col).data;
                for (d, &gv) in self.acc(grads, *x).iter_mut().zip(g) {
                    *d += gv;
                }
                let mut ds = T::zero();
                {
                    let dc = self.acc(grads, *col);
                    for i in 0..n {
                        let rs = g[i * kk..(i + 1) * kk].iter().copied().sum::<T>();
                        dc[i] += sv * rs;
                        ds += cv[i] * rs;
                    }
                }
                self.acc(grads, *s)[0] += ds;
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols;
                let n = node.value.rows;
                let mut off = 0;
                for &p in parts {
                    let pm = self.shape(p).1;
                    let dp = self.acc(grads, p);
                    for i in 0..n {
                        for j in 0..pm {
                            dp[i * pm + j] += g[i * total + off + j];
                        }
                    }
                    off += pm;
                }
            }
            Op::NormEntropyRows { x, eps, active } => {
                let (n, m) = self.shape(*x);
                if m < 2 {
                    return;
                }
                let denom = T::lit(m as f64).ln();
                let xv = &self.value(*x).data;
                let dx = self.acc(grads, *x);
                for i in 0..n {
                    if !active[i] {
                        continue;
                    }
                    for j in 0..m {
                        let p = xv[i * m + j];
                        dx[i * m + j] -= g[i] * ((p + *eps).ln() + p / (p + *eps)) / denom;
                    }
                }
            }
            Op::SegNormEntropy { x, seg, eps } => {
                let kk = self.shape(*x).1;
                let xv = &self.value(*x).data;
                let dx = self.acc(grads, *x);
                for b in 0..seg.count() {
                    let cnt = seg.valid_count(b);
                    if cnt < 2 {
                        continue;
                    }
                    let denom = T::lit(cnt as f64).ln();
                    for k in 0..kk {
                        let gv = g[b * kk + k];
                        for r in seg.valid(b) {
                            let a = xv[r * kk + k];
                            dx[r * kk + k] -= gv * ((a + *eps).ln() + a / (a + *eps)) / denom;
                        }
                    }
                }
            }
            Op::SigmoidClamped { x, limit } => {
                let xv = &self.value(*x).data;
                for (((d, &gv), &yv), &xx) in self.acc(grads, *x).iter_mut().zip(g).zip(y).zip(xv) {
                    if xx.abs() <= *limit {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Focal {
                logit,
                labels,
                gamma,
                alpha,
                limit,
            } => {
                let lv = &self.value(*logit).data;
                let dl = self.acc(grads, *logit);
                for i in 0..labels.len() {
                    if lv[i].abs() > *limit {
                        continue;
                    }
                    let (z, at, sign) = if labels[i] {
                        (lv[i], *alpha, T::one())
                    } else {
                        (-lv[i], T::one() - *alpha, -T::one())
                    };
                    // loss(z) = -at * q^gamma * ln p, p = sigmoid(z), q = 1 - p.
                    let p = sigmoid(z);
                    let q = sigmoid(-z);
                    let log_p = -softplus(-z);
                    // dq/dz = -p q, d ln p / dz = q
                    let qg = q.powf(*gamma);
                    let dqg = if *gamma == T::zero() {
                        T::zero()
                    } else {
                        *gamma * q.powf(*gamma - T::one()) * (-p * q)
                    };
                    let dz = -at * (dqg * log_p + qg * q);
                    dl[i] += g[i] * dz * sign;
                }
            }
            Op::GatherRows { x, idx } => {
                let m = self.shape(*x).1;
                let dx = self.acc(grads, *x);
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx[i * m + j] += g[o * m + j];
                    }
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let share = g[0] / T::lit(len as f64);
                for d in self.acc(grads, *x).iter_mut() {
                    *d += share;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v)[0] += g[0] * w;
                }
            }
        }
    }
}
