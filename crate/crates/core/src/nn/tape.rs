//! Reverse-mode tape. Each primitive records its inputs plus whatever the
//! backward rule needs; `backward` walks the record in reverse.

use crate::error::{bail, Result};
use crate::geom::IGNORE_LABEL;
use crate::scalar::Real;

use super::{ParamId, ParamStore, Tensor};

/// Index of a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupReduce {
    Sum,
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<T>, g: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    ConvTranspose2d { x: Var, w: Var, b: Var, g: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool, outer: usize, c: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, scale: Vec<T> },
    Group { x: Var, size: usize, kind: GroupReduce, argmax: Vec<u32> },
    NchwToRows { x: Var, b: usize, c: usize, hw: usize },
    SoftmaxCe { logits: Var, probs: Vec<T>, coef: Vec<T> },
    DotConst { x: Var, c: Vec<T> },
    Add { a: Var, b: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Pending running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub id: ParamId,
    pub value: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if numel(&shape) != value.len() || shape.iter().any(|&d| d == 0) {
            bail!(Shape, "constant of shape {shape:?} with {} values", value.len());
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Input leaf whose gradient is kept after `backward`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Parameter leaf; tracked iff the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.shape().to_vec(), p.value.data().to_vec(), Op::Param(id), p.trainable)
    }

    pub fn into_value(mut self, v: Var) -> (Vec<usize>, Vec<T>) {
        let n = &mut self.nodes[v.0];
        (std::mem::take(&mut n.shape), std::mem::take(&mut n.value))
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    /// `x: [n, cin] · w: [cin, cout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            bail!(Shape, "linear: input {xs:?} incompatible with weight {ws:?}");
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                bail!(Shape, "linear: bias {:?} for {cout} outputs", self.shape(b));
            }
        }
        let mut out = vec![T::zero(); n * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(n, cin, cout, self.value(x), self.value(w), &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![n, cout], out, Op::Linear { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "add: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    /// Same-size convolution: `x: [b, cin, h, w]`, `w: [cout, cin, k, k]` with odd `k`,
    /// stride 1 and zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            bail!(Shape, "conv2d: input {xs:?} incompatible with kernel {ws:?}");
        }
        if self.shape(b) != [ws[0]] {
            bail!(Shape, "conv2d: bias {:?} for {} outputs", self.shape(b), ws[0]);
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        let hw = g.h * g.w;
        let kk = g.cin * g.k * g.k;
        let mut cols = vec![T::zero(); g.batch * kk * hw];
        let mut out = vec![T::zero(); g.batch * g.cout * hw];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        for bi in 0..g.batch {
            let col = &mut cols[bi * kk * hw..(bi + 1) * kk * hw];
            im2col(&xv[bi * g.cin * hw..(bi + 1) * g.cin * hw], g, col);
            let o = &mut out[bi * g.cout * hw..(bi + 1) * g.cout * hw];
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.fill(bv[co]);
            }
            T::gemm(g.cout, kk, hw, wv, col, o);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(vec![g.batch, g.cout, g.h, g.w], out, Op::Conv2d { x, w, b, cols, g }, ng))
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            bail!(Shape, "maxpool2d: input {xs:?} must be [b, c, even h, even w]");
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for p in 0..bc {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push((p * h * w + best) as u32);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![xs[0], xs[1], oh, ow], out, Op::MaxPool2d { x, argmax }, ng))
    }

    /// 2×2 stride-2 transposed convolution: `x: [b, cin, h, w]`, `w: [cin, cout, 2, 2]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            bail!(Shape, "conv_transpose2d: input {xs:?} incompatible with kernel {ws:?}");
        }
        if self.shape(b) != [ws[1]] {
            bail!(Shape, "conv_transpose2d: bias {:?} for {} outputs", self.shape(b), ws[1]);
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[1],
            h: xs[2],
            w: xs[3],
            k: 2,
        };
        let hw = g.h * g.w;
        let (oh, ow) = (2 * g.h, 2 * g.w);
        let mut out = vec![T::zero(); g.batch * g.cout * oh * ow];
        let mut tmp = vec![T::zero(); g.cout * 4 * hw];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for bi in 0..g.batch {
            tmp.fill(T::zero());
            T::gemm_tn(g.cout * 4, g.cin, hw, wv, &xv[bi * g.cin * hw..(bi + 1) * g.cin * hw], &mut tmp);
            let o = &mut out[bi * g.cout * oh * ow..(bi + 1) * g.cout * oh * ow];
            for co in 0..g.cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &tmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..g.h {
                        for xx in 0..g.w {
                            o[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] = src[y * g.w + xx] + bv[co];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(vec![g.batch, g.cout, oh, ow], out, Op::ConvTranspose2d { x, w, b, g }, ng))
    }

    /// Per-channel batch norm over axis 1 of `[n, c]` or `[b, c, h, w]`.
    /// Training mode normalizes with batch statistics and queues running-stat
    /// updates; eval mode uses the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            bail!(Shape, "batchnorm: input {xs:?} has no channel axis");
        }
        let (outer, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "batchnorm: affine parameters must have {c} channels");
        }
        let count = outer * inner;
        let xv = self.value(x);
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    bail!(Validation, "batchnorm in training mode needs more than one value per channel");
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let s = &xv[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        *m += s.iter().copied().sum::<T>();
                    }
                }
                let nf = T::from_usize(count).unwrap_or(T::one());
                for m in &mut mean {
                    *m /= nf;
                }
                for o in 0..outer {
                    for (ch, v) in var.iter_mut().enumerate() {
                        let s = &xv[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        *v += s.iter().map(|&a| (a - mean[ch]) * (a - mean[ch])).sum::<T>();
                    }
                }
                for v in &mut var {
                    *v /= nf;
                }
                let unbias = nf / (nf - T::one());
                let rm = store.value(running_mean).data();
                let rv = store.value(running_var).data();
                let one = T::one();
                self.stat_updates.push(StatUpdate {
                    id: running_mean,
                    value: (0..c).map(|i| (one - momentum) * rm[i] + momentum * mean[i]).collect(),
                });
                self.stat_updates.push(StatUpdate {
                    id: running_var,
                    value: (0..c)
                        .map(|i| (one - momentum) * rv[i] + momentum * var[i] * unbias)
                        .collect(),
                });
                (mean, var)
            }
            Mode::Eval => (
                store.value(running_mean).data().to_vec(),
                store.value(running_var).data().to_vec(),
            ),
        };
        if mean.len() != c || var.len() != c {
            bail!(Shape, "batchnorm: running statistics must have {c} channels");
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
                outer,
                c,
                inner,
            },
            ng,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Shape, "concat axis {axis} out of range for {base:?}");
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                bail!(Shape, "concat: {s:?} does not match {base:?} off axis {axis}");
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &wd) in parts.iter().zip(&widths) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * wd * inner..(o + 1) * wd * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(shape, out, Op::Concat { parts, outer, inner }, ng))
    }

    /// Rows of `x: [n, c]` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            bail!(Shape, "gather_rows: input {xs:?} is not a matrix");
        }
        if idx.is_empty() {
            bail!(Shape, "gather_rows: empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[0]) {
            bail!(Size, "gather_rows: index {bad} out of {} rows", xs[0]);
        }
        let c = xs[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx }, ng))
    }

    /// Sums rows of `x: [m, c]` into `rows` output rows at positions `idx`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != idx.len() || rows == 0 {
            bail!(Shape, "scatter_add_rows: input {xs:?} with {} indices into {rows} rows", idx.len());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            bail!(Size, "scatter_add_rows: index {bad} out of {rows} rows");
        }
        let c = xs[1];
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += xv[r * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, c], out, Op::ScatterAddRows { x, idx }, ng))
    }

    /// Multiplies row `i` of `x: [n, c]` by the constant `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != scale.len() {
            bail!(Shape, "scale_rows: input {xs:?} with {} scales", scale.len());
        }
        let c = xs[1];
        let out = self
            .value(x)
            .chunks_exact(c)
            .zip(&scale)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(xs, out, Op::ScaleRows { x, scale }, ng))
    }

    /// Reduces consecutive groups of `size` rows of `x: [g·size, c]` to `[g, c]`.
    pub fn reduce_groups(&mut self, x: Var, size: usize, kind: GroupReduce) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || size == 0 || xs[0] % size != 0 {
            bail!(Shape, "reduce_groups: {xs:?} does not split into groups of {size}");
        }
        let (g, c) = (xs[0] / size, xs[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); g * c];
        let mut argmax = Vec::new();
        match kind {
            GroupReduce::Sum | GroupReduce::Mean => {
                for gi in 0..g {
                    let o = &mut out[gi * c..(gi + 1) * c];
                    for s in 0..size {
                        let r = &xv[(gi * size + s) * c..(gi * size + s + 1) * c];
                        for (a, &b) in o.iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                }
                if kind == GroupReduce::Mean {
                    let inv = T::one() / T::from_usize(size).unwrap_or(T::one());
                    for v in &mut out {
                        *v *= inv;
                    }
                }
            }
            GroupReduce::Max => {
                argmax = vec![0u32; g * c];
                for gi in 0..g {
                    let base = gi * size;
                    out[gi * c..(gi + 1) * c].copy_from_slice(&xv[base * c..(base + 1) * c]);
                    for s in 1..size {
                        let r = &xv[(base + s) * c..(base + s + 1) * c];
                        for j in 0..c {
                            if r[j] > out[gi * c + j] {
                                out[gi * c + j] = r[j];
                                argmax[gi * c + j] = s as u32;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![g, c], out, Op::Group { x, size, kind, argmax }, ng))
    }

    /// `[b, c, h, w]` to per-pixel rows `[b·h·w, c]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            bail!(Shape, "nchw_to_rows: input {xs:?} is not 4-d");
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); b * c * hw];
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ch] = xv[(bi * c + ch) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![b * hw, c], out, Op::NchwToRows { x, b, c, hw }, ng))
    }

    /// Class-weighted mean of `-log softmax(logits)[label]` over non-ignored rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u16],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            bail!(Shape, "cross entropy: logits {ls:?} with {} labels", labels.len());
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(w) = class_weights {
            if w.len() != k {
                bail!(Shape, "cross entropy: {} class weights for {k} classes", w.len());
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            bail!(Validation, "label {bad} out of range for {k} classes");
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut coef = vec![T::zero(); n];
        let mut total_w = T::zero();
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            let l = labels[i];
            if l == IGNORE_LABEL {
                continue;
            }
            let w = class_weights.map_or(T::one(), |cw| cw[l as usize]);
            coef[i] = w;
            total_w += w;
            loss += w * (z.ln() + m - row[l as usize]);
        }
        if total_w > T::zero() {
            loss /= total_w;
            for c in &mut coef {
                *c /= total_w;
            }
        }
        // fold the one-hot into probs so backward is (probs - onehot) * coef
        for i in 0..n {
            if labels[i] != IGNORE_LABEL {
                probs[i * k + labels[i] as usize] -= T::one();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCe { logits, probs, coef }, ng))
    }

    /// `Σ x ⊙ c` for a constant `c` of the same length.
    pub fn dot_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if self.value(x).len() != c.len() {
            bail!(Shape, "dot_const: {} values against {} coefficients", self.value(x).len(), c.len());
        }
        let s = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![1], vec![s], Op::DotConst { x, c }, ng))
    }

    /// Gradient of the last `backward` target with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Shape, "backward needs a scalar, got {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&self.nodes, node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds leaf parameter gradients from the last `backward` into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref())) {
                let p = store.get_mut(*id);
                match &mut p.value.grad {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => p.value.grad = Some(g.clone()),
                }
            }
        }
    }
}

fn buf<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Linear { x, w, b } => {
            let (n, cin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            let cout = nodes[w.0].shape[1];
            if let Some(gx) = buf(nodes, grads, *x) {
                T::gemm_nt(n, cout, cin, g, val(*w), gx);
            }
            if let Some(gw) = buf(nodes, grads, *w) {
                T::gemm_tn(cin, n, cout, val(*x), g, gw);
            }
            if let Some(b) = b {
                if let Some(gb) = buf(nodes, grads, *b) {
                    for row in g.chunks_exact(cout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
        }
        Op::Relu { x } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                for ((a, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > T::zero() {
                        *a += gv;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(gv) = buf(nodes, grads, *v) {
                    for (s, &d) in gv.iter_mut().zip(g) {
                        *s += d;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, cols, g: geo } => {
            let hw = geo.h * geo.w;
            let kk = geo.cin * geo.k * geo.k;
            if let Some(gb) = buf(nodes, grads, *b) {
                for bi in 0..geo.batch {
                    for co in 0..geo.cout {
                        let s = (bi * geo.cout + co) * hw;
                        gb[co] += g[s..s + hw].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(gw) = buf(nodes, grads, *w) {
                for bi in 0..geo.batch {
                    T::gemm_nt(
                        geo.cout,
                        hw,
                        kk,
                        &g[bi * geo.cout * hw..(bi + 1) * geo.cout * hw],
                        &cols[bi * kk * hw..(bi + 1) * kk * hw],
                        gw,
                    );
                }
            }
            if nodes[x.0].needs_grad {
                let wv = val(*w);
                let mut dcol = vec![T::zero(); kk * hw];
                let gx = buf(nodes, grads, *x).expect("tracked");
                for bi in 0..geo.batch {
                    dcol.fill(T::zero());
                    T::gemm_tn(kk, geo.cout, hw, wv, &g[bi * geo.cout * hw..(bi + 1) * geo.cout * hw], &mut dcol);
                    col2im(&dcol, *geo, &mut gx[bi * geo.cin * hw..(bi + 1) * geo.cin * hw]);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src as usize] += d;
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, g: geo } => {
            let hw = geo.h * geo.w;
            let (oh, ow) = (2 * geo.h, 2 * geo.w);
            // dtmp[(co*4+d), y*w+x] = g[co, 2y+dy, 2x+dx]
            let mut dtmp = vec![T::zero(); geo.cout * 4 * hw];
            let xv = val(*x);
            let wv = val(*w);
            let mut gb_acc = vec![T::zero(); geo.cout];
            let track_x = nodes[x.0].needs_grad;
            let track_w = nodes[w.0].needs_grad;
            let mut gw_acc = vec![T::zero(); if track_w { wv.len() } else { 0 }];
            let mut gx_acc = vec![T::zero(); if track_x { xv.len() } else { 0 }];
            for bi in 0..geo.batch {
                let go = &g[bi * geo.cout * oh * ow..(bi + 1) * geo.cout * oh * ow];
                for co in 0..geo.cout {
                    for d in 0..4 {
                        let (dy, dx) = (d / 2, d % 2);
                        let dst = &mut dtmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                        for y in 0..geo.h {
                            for xx in 0..geo.w {
                                let v = go[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx];
                                dst[y * geo.w + xx] = v;
                                gb_acc[co] += v;
                            }
                        }
                    }
                }
                let xb = &xv[bi * geo.cin * hw..(bi + 1) * geo.cin * hw];
                if track_w {
                    T::gemm_nt(geo.cin, hw, geo.cout * 4, xb, &dtmp, &mut gw_acc);
                }
                if track_x {
                    T::gemm(geo.cin, geo.cout * 4, hw, wv, &dtmp, &mut gx_acc[bi * geo.cin * hw..(bi + 1) * geo.cin * hw]);
                }
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                for (a, v) in gb.iter_mut().zip(gb_acc) {
                    *a += v;
                }
            }
            if let Some(gw) = buf(nodes, grads, *w) {
                for (a, v) in gw.iter_mut().zip(gw_acc) {
                    *a += v;
                }
            }
            if let Some(gx) = buf(nodes, grads, *x) {
                for (a, v) in gx.iter_mut().zip(gx_acc) {
                    *a += v;
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            outer,
            c,
            inner,
        } => {
            let (outer, c, inner) = (*outer, *c, *inner);
            let gv = val(*gamma);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                    for i in r {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = buf(nodes, grads, *gamma) {
                for (a, &v) in gg.iter_mut().zip(&sum_gx) {
                    *a += v;
                }
            }
            if let Some(gbeta) = buf(nodes, grads, *beta) {
                for (a, &v) in gbeta.iter_mut().zip(&sum_g) {
                    *a += v;
                }
            }
            if let Some(gx) = buf(nodes, grads, *x) {
                let m = T::from_usize(outer * inner).unwrap_or(T::one());
                for o in 0..outer {
                    for ch in 0..c {
                        let k = gv[ch] * inv_std[ch];
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        for i in r {
                            gx[i] += if *train {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(p, wd) in parts {
                if let Some(gp) = buf(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + wd) * inner];
                        for (a, &v) in gp[o * wd * inner..(o + 1) * wd * inner].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                off += wd;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = nodes[x.0].shape[1];
            if let Some(gx) = buf(nodes, grads, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ScatterAddRows { x, idx } => {
            let c = nodes[x.0].shape[1];
            if let Some(gx) = buf(nodes, grads, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::ScaleRows { x, scale } => {
            let c = nodes[x.0].shape[1];
            if let Some(gx) = buf(nodes, grads, *x) {
                for (r, &s) in scale.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[r * c + j] * s;
                    }
                }
            }
        }
        Op::Group { x, size, kind, argmax } => {
            let c = nodes[x.0].shape[1];
            let groups = nodes[x.0].shape[0] / size;
            if let Some(gx) = buf(nodes, grads, *x) {
                match kind {
                    GroupReduce::Sum | GroupReduce::Mean => {
                        let scale = if *kind == GroupReduce::Mean {
                            T::one() / T::from_usize(*size).unwrap_or(T::one())
                        } else {
                            T::one()
                        };
                        for gi in 0..groups {
                            for s in 0..*size {
                                let r = gi * size + s;
                                for j in 0..c {
                                    gx[r * c + j] += g[gi * c + j] * scale;
                                }
                            }
                        }
                    }
                    GroupReduce::Max => {
                        for gi in 0..groups {
                            for j in 0..c {
                                let r = gi * size + argmax[gi * c + j] as usize;
                                gx[r * c + j] += g[gi * c + j];
                            }
                        }
                    }
                }
            }
        }
        Op::NchwToRows { x, b, c, hw } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                for bi in 0..*b {
                    for ch in 0..*c {
                        for p in 0..*hw {
                            gx[(bi * c + ch) * hw + p] += g[(bi * hw + p) * c + ch];
                        }
                    }
                }
            }
        }
        Op::SoftmaxCe { logits, probs, coef } => {
            let k = nodes[logits.0].shape[1];
            if let Some(gl) = buf(nodes, grads, *logits) {
                for (i, &cf) in coef.iter().enumerate() {
                    if cf == T::zero() {
                        continue;
                    }
                    for j in 0..k {
                        gl[i * k + j] += g[0] * cf * probs[i * k + j];
                    }
                }
            }
        }
        Op::DotConst { x, c } => {
            if let Some(gx) = buf(nodes, grads, *x) {
                for (a, &cv) in gx.iter_mut().zip(c) {
                    *a += g[0] * cv;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.h * g.w;
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * g.k + ky as usize) * g.k + kx as usize) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y + ky - pad;
                    let d = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        d.fill(T::zero());
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + kx - pad;
                        d[xx as usize] = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            plane[(sy * w + sx) as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: ConvGeom, dx: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * g.k + ky as usize) * g.k + kx as usize) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + kx - pad;
                        if sx >= 0 && sx < w {
                            dx[c * hw + (sy * w + sx) as usize] += src[(y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
}
