//! Define-by-run reverse-mode autodiff.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`]. A
//! node remembers which inputs produced it plus whatever intermediate values
//! its backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! order exactly once and consumes the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batch_norm2d`].
#[derive(Clone, Debug)]
pub enum BnMode<'a, T> {
    /// Batch statistics over `(N, H, W)`. When `include` is given, only the
    /// samples flagged `true` contribute to the statistics; all samples are
    /// normalized with them.
    Train { include: Option<&'a [bool]> },
    /// Fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Relu {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: (usize, usize),
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        include: Option<Vec<bool>>,
        /// `false` in eval mode: statistics are constants.
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    Sum {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        eps: T,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records executed primitives for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Tape<T> {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Evaluation tape: dropout disabled.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    /// Records `op` only when some input is differentiable.
    fn record(&mut self, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        if self.rg(inputs) {
            self.push(value, true, op)
        } else {
            self.push(value, false, Op::Leaf)
        }
    }

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(self.value(b).numel())
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.suffix_check("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner.max(1)) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.record(out, &[a.0, b.0], Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.suffix_check("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner.max(1)) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        Ok(self.record(out, &[a.0, b.0], Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.record(out, &[a.0], Op::Scale { a: a.0, c })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// `a @ b`. A rank-2 `b` is applied to the last axis of `a`; rank-3
    /// operands are multiplied batch by batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let geo = MatGeo::new(self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..geo.batch {
            let b_off = if geo.b_batched { bi * geo.k * geo.n } else { 0 };
            let (rsb, csb) = if trans_b {
                (1, geo.k as isize)
            } else {
                (geo.n as isize, 1)
            };
            // SAFETY: offsets stay inside the buffers sized from `geo`.
            unsafe {
                T::gemm(
                    geo.m,
                    geo.k,
                    geo.n,
                    T::one(),
                    av.as_ptr().add(bi * geo.m * geo.k),
                    geo.k as isize,
                    1,
                    bv.as_ptr().add(b_off),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(bi * geo.m * geo.n),
                    geo.n as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(&geo.out_shape, out)?;
        Ok(self.record(
            value,
            &[a.0, b.0],
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record(out, &[a.0], Op::Relu { a: a.0 })
    }

    /// Valid-padding 2-D convolution. `x: [N, Cin, H, W]`,
    /// `w: [Cout, Cin, kh, kw]`, optional `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return invalid("conv2d", "stride must be positive");
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h || kw > wd {
            return invalid("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{wd}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let ho = (h - kh) / stride.0 + 1;
        let wo = (wd - kw) / stride.1 + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                let o = &mut out[(ni * cout + co) * ho * wo..][..ho * wo];
                if let Some(b) = bias {
                    let bv = self.nodes[b.0].value.data()[co];
                    o.iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..cin {
                    let xin = &xv[(ni * cin + ci) * h * wd..][..h * wd];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wk = wv[((co * cin + ci) * kh + ki) * kw + kj];
                            for oy in 0..ho {
                                let xrow = &xin[(oy * stride.0 + ki) * wd..][..wd];
                                let orow = &mut o[oy * wo..][..wo];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    *ov += wk * xrow[ox * stride.1 + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.record(
            value,
            &inputs,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
            },
        ))
    }

    /// Batch normalization over the channel axis of `[N, C, H, W]`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return invalid("batch_norm2d", format!("expected rank 4, got {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm2d",
                    lhs: vec![c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var, include, stats) = match mode {
            BnMode::Train { include } => {
                if let Some(inc) = include {
                    if inc.len() != n {
                        return invalid("batch_norm2d", "include mask length != batch");
                    }
                }
                let used = |ni: usize| include.is_none_or(|m| m[ni]);
                let count = (0..n).filter(|&i| used(i)).count() * plane;
                if count == 0 {
                    return invalid("batch_norm2d", "no samples contribute statistics");
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in (0..n).filter(|&i| used(i)) {
                        s += xv[(ni * c + ci) * plane..][..plane].iter().copied().sum();
                    }
                    let mu = s / cnt;
                    let mut ss = T::zero();
                    for ni in (0..n).filter(|&i| used(i)) {
                        for &v in &xv[(ni * c + ci) * plane..][..plane] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = ss / cnt;
                }
                let unbiased = if count > 1 {
                    let f = cnt / (cnt - T::one());
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, include.map(|m| m.to_vec()), Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return invalid("batch_norm2d", "running statistics length != channels");
                }
                (mean.to_vec(), var.to_vec(), None, None)
            }
        };
        let batch_stats = stats.is_some();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let var_out = self.record(
            value,
            &[x.0, gamma.0, beta.0],
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                include,
                batch_stats,
            },
        );
        Ok((var_out, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![d],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..][..d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let xh = (row[j] - mu) * s;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.record(
            value,
            &[x.0, gamma.0, beta.0],
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        self.record(out, &[a.0], Op::Softmax { a: a.0 })
    }

    /// Inverted dropout. Identity when `p == 0` or the tape is not training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid("dropout", format!("p must be in [0, 1), got {p}"));
        }
        if p == 0.0 || !self.training {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.record(out, &[a.0], Op::Dropout { a: a.0, mask }))
    }

    /// Rows of `table: [V, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return invalid("embedding", format!("table must be rank 2, got {ts:?}"));
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::TargetOutOfRange { id, classes: v });
            }
            out.extend_from_slice(&tv[id * d..][..d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.record(
            value,
            &[table.0],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.record(
            value,
            &idx,
            Op::Concat {
                parts: idx.clone(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * s[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, &[a.0], Op::Slice { a: a.0, axis, start }))
    }

    /// Mean over `axis` (removed from the shape), or over everything.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let av = self.value(a).data();
        let value = match axis {
            None => {
                let n = T::from_usize(av.len().max(1)).unwrap();
                Tensor::scalar(av.iter().copied().sum::<T>() / n)
            }
            Some(ax) => {
                if ax >= s.len() {
                    return invalid("mean", format!("axis {ax} out of range for {s:?}"));
                }
                let outer: usize = s[..ax].iter().product();
                let inner: usize = s[ax + 1..].iter().product();
                let len = s[ax];
                let nl = T::from_usize(len.max(1)).unwrap();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &av[(o * len + l) * inner..][..inner];
                        for (d, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= nl);
                let mut shape = s.clone();
                shape.remove(ax);
                Tensor::new(&shape, out)?
            }
        };
        Ok(self.record(value, &[a.0], Op::Mean { a: a.0, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, &[a.0], Op::Sum { a: a.0 })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.record(value, &[a.0], Op::Reshape { a: a.0 }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return invalid("permute", format!("{perm:?} is not a permutation of {s:?}"));
        }
        let value = permute_tensor(self.value(a), perm);
        Ok(self.record(
            value,
            &[a.0],
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Mean label-smoothed cross entropy of `logits: [N, V]` against
    /// `targets`, skipping rows whose target equals `ignore`.
    ///
    /// The smoothed target is `(1 - eps) * onehot + eps / V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64, ignore: Option<usize>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..=1.0).contains(&eps) {
            return invalid("cross_entropy", format!("smoothing must be in [0, 1], got {eps}"));
        }
        let v = s[1];
        let epsv = T::from_f64_lossy(eps);
        let vt = T::from_usize(v).unwrap();
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = T::zero();
        let mut tg = Vec::with_capacity(targets.len());
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                tg.push(None);
                continue;
            }
            if t >= v {
                return Err(TensorError::TargetOutOfRange { id: t, classes: v });
            }
            let row = &lv[r * v..][..v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            let mean_logit = row.iter().copied().sum::<T>() / vt;
            total += lse - (T::one() - epsv) * row[t] - epsv * mean_logit;
            softmax_in_place(&mut probs[r * v..][..v]);
            tg.push(Some(t));
            count += 1;
        }
        let loss = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: tg,
                eps: epsv,
                count,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    acc(grads, &self.nodes, *a).add_assign(g);
                }
                if self.nodes[*b].requires_grad {
                    let inner = self.nodes[*b].value.numel().max(1);
                    let gb = acc(grads, &self.nodes, *b);
                    for chunk in gd.chunks(inner) {
                        for (o, &x) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let inner = bv.len().max(1);
                if self.nodes[*a].requires_grad {
                    let ga = acc(grads, &self.nodes, *a);
                    for (gc, oc) in gd.chunks(inner).zip(ga.data_mut().chunks_mut(inner)) {
                        for ((o, &x), &y) in oc.iter_mut().zip(gc).zip(bv) {
                            *o += x * y;
                        }
                    }
                }
                if self.nodes[*b].requires_grad {
                    let gb = acc(grads, &self.nodes, *b);
                    for (gc, ac) in gd.chunks(inner).zip(av.chunks(inner)) {
                        for ((o, &x), &y) in gb.data_mut().iter_mut().zip(gc).zip(ac) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = acc(grads, &self.nodes, *a);
                for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                    *o += x * *c;
                }
            }
            Op::MatMul { a, b, trans_b } => {
                self.backward_matmul(*a, *b, *trans_b, gd, grads);
            }
            Op::Relu { a } => {
                let out = node.value.data();
                let ga = acc(grads, &self.nodes, *a);
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(gd).zip(out) {
                    if y > T::zero() {
                        *o += x;
                    }
                }
            }
            Op::Conv2d { x, w, bias, stride } => {
                self.backward_conv(*x, *w, *bias, *stride, g, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                include,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = self.nodes[*gamma].value.data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_d = vec![T::zero(); c];
                let mut sum_dx = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                for ci in 0..c {
                    sum_d[ci] = dbeta[ci] * gv[ci];
                    sum_dx[ci] = dgamma[ci] * gv[ci];
                }
                if self.nodes[*x].requires_grad {
                    let used = |ni: usize| include.as_ref().is_none_or(|m| m[ni]);
                    let m = (0..n).filter(|&i| used(i)).count() * plane;
                    let mt = T::from_usize(m.max(1)).unwrap();
                    let gx = acc(grads, &self.nodes, *x);
                    let gxd = gx.data_mut();
                    for ni in 0..n {
                        let inc = *batch_stats && used(ni);
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                let d = gd[i] * gv[ci];
                                let corr = if inc {
                                    (sum_d[ci] + xhat[i] * sum_dx[ci]) / mt
                                } else {
                                    T::zero()
                                };
                                gxd[i] += inv_std[ci] * (d - corr);
                            }
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    add_slice(acc(grads, &self.nodes, *gamma), &dgamma);
                }
                if self.nodes[*beta].requires_grad {
                    add_slice(acc(grads, &self.nodes, *beta), &dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let gv = self.nodes[*gamma].value.data().to_vec();
                if self.nodes[*x].requires_grad {
                    let gx = acc(grads, &self.nodes, *x);
                    let gxd = gx.data_mut();
                    for (r, &s) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..][..d];
                        let xr = &xhat[r * d..][..d];
                        let mut sd = T::zero();
                        let mut sdx = T::zero();
                        for j in 0..d {
                            let dj = gr[j] * gv[j];
                            sd += dj;
                            sdx += dj * xr[j];
                        }
                        for j in 0..d {
                            let dj = gr[j] * gv[j];
                            gxd[r * d + j] += s / dn * (dn * dj - sd - xr[j] * sdx);
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let gg = acc(grads, &self.nodes, *gamma);
                    for (gc, xc) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &b) in gg.data_mut().iter_mut().zip(gc).zip(xc) {
                            *o += a * b;
                        }
                    }
                }
                if self.nodes[*beta].requires_grad {
                    let gb = acc(grads, &self.nodes, *beta);
                    for gc in gd.chunks(d) {
                        for (o, &a) in gb.data_mut().iter_mut().zip(gc) {
                            *o += a;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let ga = acc(grads, &self.nodes, *a);
                for ((oc, gc), yc) in ga.data_mut().chunks_mut(d).zip(gd.chunks(d)).zip(y.chunks(d)) {
                    let dot: T = gc.iter().zip(yc).map(|(&g, &y)| g * y).sum();
                    for ((o, &g), &y) in oc.iter_mut().zip(gc).zip(yc) {
                        *o += y * (g - dot);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = acc(grads, &self.nodes, *a);
                for ((o, &x), &m) in ga.data_mut().iter_mut().zip(gd).zip(mask) {
                    *o += x * m;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.shape()[1];
                let gt = acc(grads, &self.nodes, *table);
                let gtd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gtd[id * d..][..d].iter_mut().zip(&gd[r * d..][..d]) {
                        *o += x;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis] * inner;
                    if self.nodes[p].requires_grad {
                        let gp = acc(grads, &self.nodes, p);
                        let gpd = gp.data_mut();
                        for o in 0..outer {
                            for (d, &x) in gpd[o * len..][..len].iter_mut().zip(&gd[o * total + offset..][..len]) {
                                *d += x;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src = self.nodes[*a].value.shape().to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let ga = acc(grads, &self.nodes, *a);
                let gad = ga.data_mut();
                for o in 0..outer {
                    let dst = &mut gad[(o * src[*axis] + start) * inner..][..len * inner];
                    for (d, &x) in dst.iter_mut().zip(&gd[o * len * inner..][..len * inner]) {
                        *d += x;
                    }
                }
            }
            Op::Mean { a, axis } => {
                let src = self.nodes[*a].value.shape().to_vec();
                let ga = acc(grads, &self.nodes, *a);
                match axis {
                    None => {
                        let n = T::from_usize(ga.numel().max(1)).unwrap();
                        let gv = gd[0] / n;
                        ga.data_mut().iter_mut().for_each(|o| *o += gv);
                    }
                    Some(ax) => {
                        let outer: usize = src[..*ax].iter().product();
                        let inner: usize = src[ax + 1..].iter().product();
                        let len = src[*ax];
                        let nl = T::from_usize(len.max(1)).unwrap();
                        let gad = ga.data_mut();
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    gad[(o * len + l) * inner + i] += gd[o * inner + i] / nl;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let ga = acc(grads, &self.nodes, *a);
                ga.data_mut().iter_mut().for_each(|o| *o += gd[0]);
            }
            Op::Reshape { a } => {
                let ga = acc(grads, &self.nodes, *a);
                for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                    *o += x;
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(g, &inv);
                acc(grads, &self.nodes, *a).add_assign(&back);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                eps,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.nodes[*logits].value.shape()[1];
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let smooth = *eps / T::from_usize(v).unwrap();
                let gl = acc(grads, &self.nodes, *logits);
                let gld = gl.data_mut();
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let mut q = smooth;
                        if j == t {
                            q += T::one() - *eps;
                        }
                        gld[r * v + j] += scale * (probs[r * v + j] - q);
                    }
                }
            }
        }
    }

    fn backward_matmul(&self, a: usize, b: usize, trans_b: bool, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let geo = MatGeo::new(self.nodes[a].value.shape(), self.nodes[b].value.shape(), trans_b)
            .expect("validated in forward");
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let (m, k, n) = (geo.m, geo.k, geo.n);
        // A rank-2 right operand is shared by every batch: fold batches into rows.
        let (batch, m) = if geo.b_batched {
            (geo.batch, m)
        } else {
            (1, geo.batch * m)
        };
        if self.nodes[a].requires_grad {
            let ga = acc(grads, &self.nodes, a);
            let gad = ga.data_mut();
            for bi in 0..batch {
                let b_off = if geo.b_batched { bi * k * n } else { 0 };
                // dA = dC @ B^T, B^T is n x k.
                let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd.as_ptr().add(bi * m * n),
                        n as isize,
                        1,
                        bv.as_ptr().add(b_off),
                        rs,
                        cs,
                        T::one(),
                        gad.as_mut_ptr().add(bi * m * k),
                        k as isize,
                        1,
                    );
                }
            }
        }
        if self.nodes[b].requires_grad {
            let gb = acc(grads, &self.nodes, b);
            let gbd = gb.data_mut();
            for bi in 0..batch {
                let b_off = if geo.b_batched { bi * k * n } else { 0 };
                unsafe {
                    if trans_b {
                        // dB (n x k) = dC^T @ A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gd.as_ptr().add(bi * m * n),
                            1,
                            n as isize,
                            av.as_ptr().add(bi * m * k),
                            k as isize,
                            1,
                            T::one(),
                            gbd.as_mut_ptr().add(b_off),
                            k as isize,
                            1,
                        );
                    } else {
                        // dB (k x n) = A^T @ dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.as_ptr().add(bi * m * k),
                            1,
                            k as isize,
                            gd.as_ptr().add(bi * m * n),
                            n as isize,
                            1,
                            T::one(),
                            gbd.as_mut_ptr().add(b_off),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
    }

    fn backward_conv(
        &self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: (usize, usize),
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let gs = g.shape();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (gs[2], gs[3]);
        let gd = g.data();
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        if let Some(b) = bias {
            if self.nodes[b].requires_grad {
                let gb = acc(grads, &self.nodes, b);
                let gbd = gb.data_mut();
                for ni in 0..n {
                    for (co, o) in gbd.iter_mut().enumerate() {
                        *o += gd[(ni * cout + co) * ho * wo..][..ho * wo].iter().copied().sum();
                    }
                }
            }
        }
        if self.nodes[w].requires_grad {
            let gw = acc(grads, &self.nodes, w);
            let gwd = gw.data_mut();
            for ni in 0..n {
                for co in 0..cout {
                    let go = &gd[(ni * cout + co) * ho * wo..][..ho * wo];
                    for ci in 0..cin {
                        let xin = &xv[(ni * cin + ci) * h * wd..][..h * wd];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut s = T::zero();
                                for oy in 0..ho {
                                    let xrow = &xin[(oy * stride.0 + ki) * wd..][..wd];
                                    let grow = &go[oy * wo..][..wo];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        s += gv * xrow[ox * stride.1 + kj];
                                    }
                                }
                                gwd[((co * cin + ci) * kh + ki) * kw + kj] += s;
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[x].requires_grad {
            let gx = acc(grads, &self.nodes, x);
            let gxd = gx.data_mut();
            for ni in 0..n {
                for co in 0..cout {
                    let go = &gd[(ni * cout + co) * ho * wo..][..ho * wo];
                    for ci in 0..cin {
                        let xg = &mut gxd[(ni * cin + ci) * h * wd..][..h * wd];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wk = wv[((co * cin + ci) * kh + ki) * kw + kj];
                                for oy in 0..ho {
                                    let xrow = &mut xg[(oy * stride.0 + ki) * wd..][..wd];
                                    let grow = &go[oy * wo..][..wo];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        xrow[ox * stride.1 + kj] += wk * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the requires-grad leaves after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf. Leaves the loss never reached
    /// report zeros; non-leaf or constant vars report `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct MatGeo {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatGeo {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: if trans_b { "matmul_nt" } else { "matmul" },
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        match sb.len() {
            2 => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if bk != k {
                    return Err(mismatch());
                }
                let m = sa[sa.len() - 2];
                let batch = sa[..sa.len() - 2].iter().product();
                let mut out_shape = sa[..sa.len() - 1].to_vec();
                out_shape.push(n);
                Ok(Self {
                    batch,
                    m,
                    k,
                    n,
                    b_batched: false,
                    out_shape,
                })
            }
            3 => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa.len() != 3 || sa[0] != sb[0] || bk != k {
                    return Err(mismatch());
                }
                Ok(Self {
                    batch: sa[0],
                    m: sa[1],
                    k,
                    n,
                    b_batched: true,
                    out_shape: vec![sa[0], sa[1], n],
                })
            }
            _ => Err(mismatch()),
        }
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], nodes: &[Node<T>], idx: usize) -> &'g mut Tensor<T> {
    grads[idx].get_or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()))
}

fn add_slice<T: Scalar>(t: &mut Tensor<T>, src: &[T]) {
    for (o, &x) in t.data_mut().iter_mut().zip(src) {
        *o += x;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 || src.is_empty() {
        return Tensor::new(&out_shape, src.to_vec()).expect("same size");
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(&out_shape, out).expect("same size");
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
