//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the operands needed to
//! run it backwards. Nodes are only ever appended after their operands, so a
//! single reverse sweep of the tape is a valid topological order and visits each
//! producing operation exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    L2Normalize { x: Var, norms: Vec<R> },
    MatmulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<R> },
    HorizontalPool { x: Var, argmax: Vec<usize>, band: usize },
    SpatialMean(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
    PartLinear { x: Var, w: Var },
    PairwiseEuclidean(Var, Var),
    TripletHinge { dist: Var, triplets: Vec<(usize, usize)>, active: Vec<bool> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A single-use recording of one forward computation.
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input (data, targets).
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2D convolution with zero padding. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        self.value(x).expect_rank("conv2d input", 4)?;
        self.value(w).expect_rank("conv2d weight", 4)?;
        if ws[1] != xs[1] {
            return Err(shape_err("conv2d weight", format!("[_, {}, _, _]", xs[1]), &ws));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("conv2d bias", &[ws[0]])?;
        }
        let ho = ConvGeom::out_dim(xs[2], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d input", "spatial extent at least the kernel", &xs))?;
        let wo = ConvGeom::out_dim(xs[3], ws[3], stride, pad)
            .ok_or_else(|| shape_err("conv2d input", "spatial extent at least the kernel", &xs))?;
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], kh: ws[2], kw: ws[3], stride, pad, ho, wo };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[xs[0], ws[0], ho, wo], y)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        self.value(x).expect_rank("maxpool2d input", 4)?;
        if pad >= kernel {
            return Err(Error::Invalid(format!("maxpool2d padding {pad} must be below kernel {kernel}")));
        }
        let ho = ConvGeom::out_dim(xs[2], kernel, stride, pad)
            .ok_or_else(|| shape_err("maxpool2d input", "spatial extent at least the kernel", &xs))?;
        let wo = ConvGeom::out_dim(xs[3], kernel, stride, pad)
            .ok_or_else(|| shape_err("maxpool2d input", "spatial extent at least the kernel", &xs))?;
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: xs[1], kh: kernel, kw: kernel, stride, pad, ho, wo };
        let (y, argmax) = kernels::maxpool_forward(self.value(x).data(), &geom);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], ho, wo], y)?, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > R::ZERO { v } else { R::ZERO });
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        bv.expect_shape("mul rhs", av.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let y = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: R = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, R::ONE / R::from_usize(n))
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        self.value(x).expect_rank("linear input", 2)?;
        self.value(w).expect_rank("linear weight", 2)?;
        if ws[1] != xs[1] {
            return Err(shape_err("linear weight", format!("[_, {}]", xs[1]), &ws));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("linear bias", &[ws[0]])?;
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![R::ZERO; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { R::ONE } else { R::ZERO };
        R::gemm(n, i, o, self.value(x).data(), (i as isize, 1), self.value(w).data(), (1, i as isize), beta, &mut y, (o as isize, 1));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, o], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Normalizes each row of `x: [N, D]` to unit Euclidean norm. A row whose norm
    /// is below `1e-12` is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("l2_normalize input", 2)?;
        let d = xv.shape()[1];
        let tiny = R::from_f64(1e-12);
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(d.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            if !(n >= tiny) {
                return Err(Error::DegenerateVector);
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let y = Tensor::new(xv.shape(), y)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::L2Normalize { x, norms }, rg))
    }

    /// `a: [N, D]`, `b: [M, D]` → `a·bᵀ` with plain ascending-index dot products,
    /// so `matmul_nt(b, a)` is the exact transpose of `matmul_nt(a, b)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank("matmul_nt lhs", 2)?;
        bv.expect_rank("matmul_nt rhs", 2)?;
        let (n, d, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        if bv.shape()[1] != d {
            return Err(shape_err("matmul_nt rhs", format!("[_, {d}]"), bv.shape()));
        }
        let mut y = vec![R::ZERO; n * m];
        for i in 0..n {
            let ar = &av.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bv.data()[j * d..(j + 1) * d];
                let mut acc = R::ZERO;
                for k in 0..d {
                    acc += ar[k] * br[k];
                }
                y[i * m + j] = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, m], y)?, Op::MatmulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank("transpose input", 2)?;
        let (n, m) = (av.shape()[0], av.shape()[1]);
        let mut y = vec![R::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                y[j * n + i] = av.data()[i * m + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, n], y)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    /// Concatenates tensors with identical trailing dims along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Invalid("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows operand", format!("[_, {tail:?}]"), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Invalid("stack of nothing".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            self.value(p).expect_shape("stack operand", &inner)?;
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Stack(parts.to_vec()), rg))
    }

    /// Mean over rows of `−log softmax(logits)[target]`. Stable under large logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_rank("softmax_cross_entropy logits", 2)?;
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n {
            return Err(shape_err("softmax_cross_entropy targets", format!("[{n}]"), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Invalid("softmax_cross_entropy over zero rows".into()));
        }
        let mut probs = vec![R::ZERO; n * k];
        let mut total = R::ZERO;
        for (row, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::TargetOutOfRange { target: t, classes: k });
            }
            let l = &lv.data()[row * k..(row + 1) * k];
            let mx = l.iter().copied().fold(R::NEG_INFINITY, R::max);
            let p = &mut probs[row * k..(row + 1) * k];
            let mut z = R::ZERO;
            for (pi, &li) in p.iter_mut().zip(l) {
                *pi = (li - mx).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += z.ln() - (l[t] - mx);
        }
        let loss = total / R::from_usize(n);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Splits `x: [N, C, H, W]` into `parts` horizontal bands and reduces each band
    /// to `max + mean` per channel. Output `[N, parts, C]`.
    pub fn horizontal_pool(&mut self, x: Var, parts: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("horizontal_pool input", 4)?;
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if parts == 0 || h % parts != 0 {
            return Err(shape_err("horizontal_pool input", format!("height divisible by {parts}"), xv.shape()));
        }
        let band = (h / parts) * w;
        let inv = R::ONE / R::from_usize(band);
        let mut y = vec![R::ZERO; n * parts * c];
        let mut argmax = vec![0usize; y.len()];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for p in 0..parts {
                    let start = plane + p * band;
                    let vals = &xv.data()[start..start + band];
                    let mut best = 0;
                    let mut sum = R::ZERO;
                    for (i, &v) in vals.iter().enumerate() {
                        if v > vals[best] {
                            best = i;
                        }
                        sum += v;
                    }
                    let o = (ni * parts + p) * c + ci;
                    y[o] = vals[best] + sum * inv;
                    argmax[o] = start + best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, parts, c], y)?, Op::HorizontalPool { x, argmax, band }, rg))
    }

    /// Mean over the spatial extent of `x: [N, C, H, W]`, output `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("spatial_mean input", 4)?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        let inv = R::ONE / R::from_usize(hw.max(1));
        let y: Vec<R> = xv.data().chunks(hw.max(1)).map(|p| p.iter().copied().sum::<R>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], y)?, Op::SpatialMean(x), rg))
    }

    /// Elementwise max over consecutive row segments of `x: [N, ...]`. Each segment
    /// is `(start, len)` with `len ≥ 1`; output `[segments, ...]`.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("segment_max input", "rank ≥ 1", xv.shape()));
        }
        let rows = xv.shape()[0];
        let f = xv.len().checked_div(rows).unwrap_or(0);
        let mut y = vec![R::ZERO; segments.len() * f];
        let mut argmax = vec![0usize; y.len()];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptySequence);
            }
            if start + len > rows {
                return Err(shape_err("segment_max input", format!("at least {} rows", start + len), xv.shape()));
            }
            for j in 0..f {
                let mut best = start;
                for r in start + 1..start + len {
                    if xv.data()[r * f + j] > xv.data()[best * f + j] {
                        best = r;
                    }
                }
                y[s * f + j] = xv.data()[best * f + j];
                argmax[s * f + j] = best * f + j;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = segments.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::SegmentMax { x, argmax }, rg))
    }

    /// Independent linear map per part: `x: [S, P, C]`, `w: [P, O, C]` → `[S, P, O]`.
    pub fn part_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.expect_rank("part_linear input", 3)?;
        wv.expect_rank("part_linear weight", 3)?;
        let (s, p, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if wv.shape()[0] != p || wv.shape()[2] != c {
            return Err(shape_err("part_linear weight", format!("[{p}, _, {c}]"), wv.shape()));
        }
        let o = wv.shape()[1];
        let mut y = vec![R::ZERO; s * p * o];
        for si in 0..s {
            for pi in 0..p {
                let xr = &xv.data()[(si * p + pi) * c..(si * p + pi + 1) * c];
                for oi in 0..o {
                    let wr = &wv.data()[(pi * o + oi) * c..(pi * o + oi + 1) * c];
                    let mut acc = R::ZERO;
                    for k in 0..c {
                        acc += wr[k] * xr[k];
                    }
                    y[(si * p + pi) * o + oi] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&[s, p, o], y)?, Op::PartLinear { x, w }, rg))
    }

    /// Euclidean distances between rows: `a: [N, D]`, `b: [M, D]` → `[N, M]`.
    pub fn pairwise_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank("pairwise_euclidean lhs", 2)?;
        bv.expect_rank("pairwise_euclidean rhs", 2)?;
        let (n, d, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        if bv.shape()[1] != d {
            return Err(shape_err("pairwise_euclidean rhs", format!("[_, {d}]"), bv.shape()));
        }
        let mut y = vec![R::ZERO; n * m];
        for i in 0..n {
            let ar = &av.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bv.data()[j * d..(j + 1) * d];
                let mut acc = R::ZERO;
                for k in 0..d {
                    let t = ar[k] - br[k];
                    acc += t * t;
                }
                y[i * m + j] = acc.sqrt();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, m], y)?, Op::PairwiseEuclidean(a, b), rg))
    }

    /// Mean over `(pos, neg)` flat index pairs into `dist` of
    /// `max(0, margin + dist[pos] − dist[neg])`.
    pub fn triplet_hinge(&mut self, dist: Var, triplets: &[(usize, usize)], margin: R) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::DegenerateBatch("no valid triplet"));
        }
        let dv = self.value(dist);
        let mut total = R::ZERO;
        let mut active = Vec::with_capacity(triplets.len());
        for &(p, n) in triplets {
            if p >= dv.len() || n >= dv.len() {
                return Err(Error::Invalid(format!("triplet index out of range for {:?}", dv.shape())));
            }
            let v = margin + dv.data()[p] - dv.data()[n];
            active.push(v > R::ZERO);
            if v > R::ZERO {
                total += v;
            }
        }
        let loss = total / R::from_usize(triplets.len());
        let rg = self.rg(dist);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::TripletHinge { dist, triplets: triplets.to_vec(), active },
            rg,
        ))
    }

    /// Runs the reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<R>> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape(), R::ONE));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `output` with respect to each of `leaves` (zeros where unreachable).
    pub fn gradient(&self, output: Var, leaves: &[Var]) -> Result<Vec<Tensor<R>>> {
        let mut g = self.backward(output)?;
        Ok(leaves
            .iter()
            .map(|&l| g.take(l).unwrap_or_else(|| Tensor::zeros(self.shape(l))))
            .collect())
    }

    fn backprop(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.rg(*x);
                let cg = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom, need_dx);
                if let Some(dx) = cg.dx {
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.rg(*w) {
                    accumulate(grads, *w, Tensor::new(self.shape(*w), cg.dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        accumulate(grads, *b, Tensor::new(self.shape(*b), cg.db)?);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += gd[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = Tensor::from_fn(g.shape(), |i| if xv[i] > R::ZERO { gd[i] } else { R::ZERO });
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::from_fn(g.shape(), |i| gd[i] * bv[i]));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::from_fn(g.shape(), |i| gd[i] * av[i]));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * *c)),
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0])),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![R::ZERO; n * i];
                    R::gemm(n, o, i, gd, (o as isize, 1), self.value(*w).data(), (i as isize, 1), R::ZERO, &mut dx, (i as isize, 1));
                    accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![R::ZERO; o * i];
                    R::gemm(o, n, i, gd, (1, o as isize), self.value(*x).data(), (i as isize, 1), R::ZERO, &mut dw, (i as isize, 1));
                    accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![R::ZERO; o];
                        for row in gd.chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(&[o], db)?);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.shape()[1];
                let mut dx = vec![R::ZERO; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - yr[k] * dot) / nrm;
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.rg(*a) {
                    let mut da = vec![R::ZERO; n * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = gd[i * m + j];
                            for k in 0..d {
                                da[i * d + k] += gij * bv.data()[j * d + k];
                            }
                        }
                    }
                    accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![R::ZERO; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = gd[i * m + j];
                            for k in 0..d {
                                db[j * d + k] += gij * av.data()[i * d + k];
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![R::ZERO; n * m];
                for j in 0..m {
                    for i in 0..n {
                        da[i * m + j] = gd[j * n + i];
                    }
                }
                accumulate(grads, *a, Tensor::new(self.shape(*a), da)?);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.clone().reshape(self.shape(*a))?),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, Tensor::new(self.shape(p), gd[off..off + len].to_vec())?);
                    }
                    off += len;
                }
            }
            Op::Stack(parts) => {
                let len = self.value(parts[0]).len();
                for (k, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        accumulate(grads, p, Tensor::new(self.shape(p), gd[k * len..(k + 1) * len].to_vec())?);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / R::from_usize(targets.len());
                let mut dl = probs.clone();
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * k + t] -= R::ONE;
                }
                for v in dl.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::new(self.shape(*logits), dl)?);
            }
            Op::HorizontalPool { x, argmax, band } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let parts = node.value.shape()[1];
                let inv = R::ONE / R::from_usize(*band);
                let mut dx = Tensor::zeros(xs);
                let dxd = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    let ni = o / (parts * c);
                    let p = (o / c) % parts;
                    let ci = o % c;
                    let start = (ni * c + ci) * h * w + p * band;
                    let share = gd[o] * inv;
                    for v in &mut dxd[start..start + band] {
                        *v += share;
                    }
                    dxd[src] += gd[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = R::ONE / R::from_usize(hw.max(1));
                let dx = Tensor::from_fn(xs, |i| gd[i / hw] * inv);
                accumulate(grads, *x, dx);
            }
            Op::SegmentMax { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += gd[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::PartLinear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (s, p, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let o = wv.shape()[1];
                let mut dx = vec![R::ZERO; xv.len()];
                let mut dw = vec![R::ZERO; wv.len()];
                for si in 0..s {
                    for pi in 0..p {
                        let xo = (si * p + pi) * c;
                        for oi in 0..o {
                            let gv = gd[(si * p + pi) * o + oi];
                            let wo = (pi * o + oi) * c;
                            for k in 0..c {
                                dx[xo + k] += gv * wv.data()[wo + k];
                                dw[wo + k] += gv * xv.data()[xo + k];
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.rg(*w) {
                    accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
            }
            Op::PairwiseEuclidean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let dist = node.value.data();
                let mut da = vec![R::ZERO; n * d];
                let mut db = vec![R::ZERO; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let dij = dist[i * m + j];
                        let gij = gd[i * m + j];
                        // Distance is not differentiable at coincident rows; use the zero subgradient.
                        if dij <= R::ZERO || gij == R::ZERO {
                            continue;
                        }
                        let f = gij / dij;
                        for k in 0..d {
                            let t = (av.data()[i * d + k] - bv.data()[j * d + k]) * f;
                            da[i * d + k] += t;
                            db[j * d + k] -= t;
                        }
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::TripletHinge { dist, triplets, active } => {
                let share = gd[0] / R::from_usize(triplets.len());
                let mut dd = Tensor::zeros(self.shape(*dist));
                for (&(p, n), &on) in triplets.iter().zip(active) {
                    if on {
                        dd.data_mut()[p] += share;
                        dd.data_mut()[n] -= share;
                    }
                }
                accumulate(grads, *dist, dd);
            }
        }
        Ok(())
    }
}
