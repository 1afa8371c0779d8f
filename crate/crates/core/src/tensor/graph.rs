use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::{numel, Result, Scalar, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<S> {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Swish(usize),
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    LogSumExp {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        index: Vec<usize>,
    },
    CrossEntropy {
        x: usize,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Select {
        x: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Define-by-run tape. Every op evaluates immediately and records how to
/// propagate adjoints; [`Graph::backward`] walks the record in reverse.
pub struct Graph<S: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    graph: u64,
    adjoints: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the seeded output with respect to `v`, if `v` lies on a
    /// differentiable path to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.graph != self.graph {
            return None;
        }
        self.adjoints.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        if v.graph != self.graph {
            return None;
        }
        self.adjoints.get_mut(v.id).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.check(v).expect("var belongs to this graph");
        &self.nodes[v.id].value
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::State(format!(
                "node {} was not recorded by this graph",
                v.id
            )));
        }
        Ok(v.id)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, parents: &[usize], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    fn shape_of(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let xs = self.shape_of(xi).to_vec();
        let ws = self.shape_of(wi).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![S::zero(); n * out];
        if let Some(bi) = bi {
            let bs = self.shape_of(bi);
            if bs != [out] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine(bias)",
                    lhs: ws,
                    rhs: bs.to_vec(),
                });
            }
            let bias = self.nodes[bi].value.data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if bi.is_some() { S::one() } else { S::zero() };
        kernels::gemm(
            false,
            true,
            n,
            inp,
            out,
            S::one(),
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            beta,
            &mut y,
        );
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        self.push(
            Op::Affine { x: xi, w: wi, b: bi },
            Tensor::from_parts(vec![n, out], y),
            &parents,
            "affine",
        )
    }

    /// 2-D convolution, `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    /// Output extent is `floor((h + 2·pad − k) / stride) + 1` per spatial axis.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let xs = self.shape_of(xi).to_vec();
        let ws = self.shape_of(wi).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (oh, ow) = match (
            kernels::conv_out(h, k, spec.stride, spec.pad),
            kernels::conv_out(wd, k, spec.stride, spec.pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!("kernel {k} with stride {} and pad {} does not fit input {xs:?}", spec.stride, spec.pad),
                })
            }
        };
        if let Some(bi) = bi {
            if self.shape_of(bi) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d(bias)",
                    lhs: ws,
                    rhs: self.shape_of(bi).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh,
            ow,
        };
        let (ckk, ohw) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![S::zero(); n * o * ohw];
        let mut col = vec![S::zero(); ckk * ohw];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            let bias = bi.map(|b| self.nodes[b].value.data());
            for i in 0..n {
                kernels::im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
                let dst = &mut out[i * o * ohw..(i + 1) * o * ohw];
                if let Some(bias) = bias {
                    for (oc, plane) in dst.chunks_mut(ohw).enumerate() {
                        plane.fill(bias[oc]);
                    }
                }
                let beta = if bias.is_some() { S::one() } else { S::zero() };
                kernels::gemm(false, false, o, ckk, ohw, S::one(), wv, &col, beta, dst);
            }
        }
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        self.push(
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
            Tensor::from_parts(vec![n, o, oh, ow], out),
            &parents,
            "conv2d",
        )
    }

    /// Max pooling over `k×k` windows (no padding).
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.shape_of(xi).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("expected rank-4 input, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = match (kernels::conv_out(h, k, stride, 0), kernels::conv_out(w, k, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::Invalid {
                    op: "max_pool2d",
                    msg: format!("window {k} does not fit input {xs:?}"),
                })
            }
        };
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    let mut best_v = xv[best];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > best_v {
                                best = idx;
                                best_v = xv[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        self.push(
            Op::MaxPool2d { x: xi, argmax },
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[xi],
            "max_pool2d",
        )
    }

    /// `t·sigmoid(t)` elementwise.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.nodes[xi].value.map(|t| t * kernels::sigmoid(t));
        self.push(Op::Swish(xi), v, &[xi], "swish")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.nodes[xi].value.map(|t| t.max(S::zero()));
        self.push(Op::Relu(xi), v, &[xi], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        self.push(Op::Add(ai, bi), v, &[ai, bi], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ai].value.sub(&self.nodes[bi].value)?;
        self.push(Op::Sub(ai, bi), v, &[ai, bi], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ai].value.mul(&self.nodes[bi].value)?;
        self.push(Op::Mul(ai, bi), v, &[ai, bi], "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.nodes[ai].value.scale(c);
        self.push(Op::Scale(ai, c), v, &[ai], "scale")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ai].value.sum());
        self.push(Op::Sum(ai), v, &[ai], "sum")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let v = Tensor::scalar(self.nodes[ai].value.mean());
        self.push(Op::Mean(ai), v, &[ai], "mean")
    }

    /// Sums every leading-axis row, `[n, ...] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if t.rank() == 0 {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_rows",
                axis: 0,
                rank: 0,
            });
        }
        let v = Tensor::from_parts(vec![t.rows()], (0..t.rows()).map(|i| t.row(i).iter().copied().sum()).collect());
        self.push(Op::SumRows(ai), v, &[ai], "sum_rows")
    }

    fn check_axis(&self, id: usize, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.shape_of(id).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    /// `ln Σ exp` along `axis`; the axis is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        self.check_axis(xi, axis, "logsumexp")?;
        let shape = self.shape_of(xi).to_vec();
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(kernels::logsumexp_lane(xv, o * len * inner + i, len, inner));
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.push(Op::LogSumExp { x: xi, axis }, Tensor::from_parts(oshape, out), &[xi], "logsumexp")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        self.check_axis(xi, axis, "softmax")?;
        let shape = self.shape_of(xi).to_vec();
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let xv = self.nodes[xi].value.data();
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let start = o * len * inner + i;
                let lse = kernels::logsumexp_lane(xv, start, len, inner);
                for j in 0..len {
                    out[start + j * inner] = (xv[start + j * inner] - lse).exp();
                }
            }
        }
        self.push(Op::Softmax { x: xi, axis }, Tensor::from_parts(shape, out), &[xi], "softmax")
    }

    /// Maximum along `axis` together with the attaining index (first on ties).
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let xi = self.check(x)?;
        self.check_axis(xi, axis, "max_axis")?;
        let shape = self.shape_of(xi).to_vec();
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "max_axis",
                msg: "empty axis".into(),
            });
        }
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut index = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let start = o * len * inner + i;
                let mut best = 0;
                for j in 1..len {
                    if xv[start + j * inner] > xv[start + best * inner] {
                        best = j;
                    }
                }
                out.push(xv[start + best * inner]);
                index.push(best);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let v = self.push(
            Op::MaxAxis {
                x: xi,
                axis,
                index: index.clone(),
            },
            Tensor::from_parts(oshape, out),
            &[xi],
            "max_axis",
        )?;
        Ok((v, index))
    }

    /// Per-row maximum of `x: [n, k]` skipping column `exclude[i]` in row `i`.
    /// Needs `k ≥ 2`; ties route to the first attaining column.
    pub fn max_rows_excluding(&mut self, x: Var, exclude: &[usize]) -> Result<(Var, Vec<usize>)> {
        let xi = self.check(x)?;
        let (n, k) = self.matrix_dims(xi, "max_rows_excluding")?;
        self.check_targets(exclude, n, k, "max_rows_excluding")?;
        if k < 2 {
            return Err(TensorError::Invalid {
                op: "max_rows_excluding",
                msg: "need at least two columns".into(),
            });
        }
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        for (r, &skip) in exclude.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let mut best = usize::MAX;
            for (j, &v) in row.iter().enumerate() {
                if j != skip && (best == usize::MAX || v > row[best]) {
                    best = j;
                }
            }
            out.push(row[best]);
            index.push(best);
        }
        // Routed exactly like a gather of the chosen columns.
        let v = self.push(
            Op::Select {
                x: xi,
                index: index.clone(),
            },
            Tensor::from_parts(vec![n], out),
            &[xi],
            "max_rows_excluding",
        )?;
        Ok((v, index))
    }

    /// Per-row `logsumexp(x_i) − x_i[t_i]` for logits `x: [n, k]`; shape `[n]`.
    pub fn cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, k) = self.matrix_dims(xi, "cross_entropy")?;
        self.check_targets(targets, n, k, "cross_entropy")?;
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n);
        let mut probs = vec![S::zero(); n * k];
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let lse = kernels::logsumexp_lane(row, 0, k, 1);
            out.push(lse - row[t]);
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            Op::CrossEntropy {
                x: xi,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::from_parts(vec![n], out),
            &[xi],
            "cross_entropy",
        )
    }

    /// Gathers `x[i, index[i]]` from `x: [n, k]`.
    pub fn select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, k) = self.matrix_dims(xi, "select")?;
        self.check_targets(index, n, k, "select")?;
        let xv = self.nodes[xi].value.data();
        let out = index.iter().enumerate().map(|(r, &j)| xv[r * k + j]).collect();
        self.push(
            Op::Select {
                x: xi,
                index: index.to_vec(),
            },
            Tensor::from_parts(vec![n], out),
            &[xi],
            "select",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.nodes[xi].value.reshape(shape)?;
        self.push(Op::Reshape(xi), v, &[xi], "reshape")
    }

    /// `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() == 0 {
            return Err(TensorError::AxisOutOfRange {
                op: "flatten",
                axis: 0,
                rank: 0,
            });
        }
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    fn matrix_dims(&self, id: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape_of(id);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected [n, k] logits, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn check_targets(&self, t: &[usize], n: usize, k: usize, op: &'static str) -> Result<()> {
        if t.len() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![n],
                rhs: vec![t.len()],
            });
        }
        if let Some(&bad) = t.iter().find(|&&j| j >= k) {
            return Err(TensorError::IndexOutOfRange {
                op,
                index: bad,
                extent: k,
            });
        }
        Ok(())
    }

    /// Backward pass seeded with ones of the output's shape.
    pub fn backward(&self, out: Var) -> Result<Gradients<S>> {
        let oi = self.check(out)?;
        let seed = Tensor::ones(self.shape_of(oi));
        self.backward_with_seed(out, seed)
    }

    /// Reverse-mode sweep from `out` with adjoint `seed`.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        let oi = self.check(out)?;
        if seed.shape() != self.shape_of(oi) {
            return Err(TensorError::ShapeMismatch {
                op: "backward(seed)",
                lhs: self.shape_of(oi).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<S>>> = Vec::with_capacity(oi + 1);
        adj.resize_with(oi + 1, || None);
        adj[oi] = Some(seed);
        for id in (0..=oi).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                adj[id] = None;
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            adjoints: adj,
        })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<S>, adj: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xs = self.shape_of(*x);
                let (n, inp) = (xs[0], xs[1]);
                let out = self.shape_of(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![S::zero(); n * inp];
                    kernels::gemm(false, false, n, out, inp, S::one(), gv, self.nodes[*w].value.data(), S::zero(), &mut dx);
                    accumulate(adj, *x, xs, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![S::zero(); out * inp];
                    kernels::gemm(true, false, out, n, inp, S::one(), gv, self.nodes[*x].value.data(), S::zero(), &mut dw);
                    accumulate(adj, *w, self.shape_of(*w), dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![S::zero(); out];
                    for row in gv.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(adj, b, &[out], db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape_of(*x);
                let n = xs[0];
                let o = self.shape_of(*w)[0];
                let (ckk, ohw) = (geom.col_rows(), geom.col_cols());
                let img = geom.c * geom.h * geom.w;
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut col = vec![S::zero(); ckk * ohw];
                let mut dx = if want_x { vec![S::zero(); n * img] } else { Vec::new() };
                let mut dw = if want_w { vec![S::zero(); o * ckk] } else { Vec::new() };
                for i in 0..n {
                    let gi = &gv[i * o * ohw..(i + 1) * o * ohw];
                    if want_w {
                        kernels::im2col(&xv[i * img..(i + 1) * img], geom, &mut col);
                        kernels::gemm(false, true, o, ohw, ckk, S::one(), gi, &col, S::one(), &mut dw);
                    }
                    if want_x {
                        kernels::gemm(true, false, ckk, o, ohw, S::one(), wv, gi, S::zero(), &mut col);
                        kernels::col2im_add(&col, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                }
                if want_x {
                    accumulate(adj, *x, xs, dx);
                }
                if want_w {
                    accumulate(adj, *w, self.shape_of(*w), dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![S::zero(); o];
                    for i in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let s = (i * o + oc) * ohw;
                            *d += gv[s..s + ohw].iter().copied().sum::<S>();
                        }
                    }
                    accumulate(adj, b, &[o], db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![S::zero(); self.nodes[*x].value.len()];
                    for (&src, &v) in argmax.iter().zip(gv) {
                        dx[src] += v;
                    }
                    accumulate(adj, *x, self.shape_of(*x), dx);
                }
            }
            Op::Swish(x) => {
                let xv = self.nodes[*x].value.data();
                let dx = xv
                    .iter()
                    .zip(gv)
                    .map(|(&t, &d)| {
                        let s = kernels::sigmoid(t);
                        d * (s + t * s * (S::one() - s))
                    })
                    .collect();
                accumulate(adj, *x, self.shape_of(*x), dx);
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                let dx = xv
                    .iter()
                    .zip(gv)
                    .map(|(&t, &d)| if t > S::zero() { d } else { S::zero() })
                    .collect();
                accumulate(adj, *x, self.shape_of(*x), dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.shape(), gv.to_vec());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.shape(), gv.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.shape(), gv.to_vec());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.shape(), gv.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    accumulate(adj, *a, g.shape(), gv.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.shape(), gv.iter().zip(av).map(|(&d, &y)| d * y).collect());
                }
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, g.shape(), gv.iter().map(|&v| v * *c).collect());
            }
            Op::Sum(a) => {
                let len = self.nodes[*a].value.len();
                accumulate(adj, *a, self.shape_of(*a), vec![gv[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len();
                let v = gv[0] / S::from_usize(len);
                accumulate(adj, *a, self.shape_of(*a), vec![v; len]);
            }
            Op::SumRows(a) => {
                let t = &self.nodes[*a].value;
                let w = t.row_len();
                let dx = gv.iter().flat_map(|&v| std::iter::repeat(v).take(w)).collect();
                accumulate(adj, *a, t.shape(), dx);
            }
            Op::LogSumExp { x, axis } => {
                let shape = self.shape_of(*x);
                let (outer, len, inner) = kernels::split_axis(shape, *axis);
                let xv = self.nodes[*x].value.data();
                let yv = node.value.data();
                let mut dx = vec![S::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let start = o * len * inner + i;
                        let (y, d) = (yv[o * inner + i], gv[o * inner + i]);
                        for j in 0..len {
                            dx[start + j * inner] = d * (xv[start + j * inner] - y).exp();
                        }
                    }
                }
                accumulate(adj, *x, shape, dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape_of(*x);
                let (outer, len, inner) = kernels::split_axis(shape, *axis);
                let yv = node.value.data();
                let mut dx = vec![S::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let start = o * len * inner + i;
                        let dot: S = (0..len).map(|j| gv[start + j * inner] * yv[start + j * inner]).sum();
                        for j in 0..len {
                            let p = start + j * inner;
                            dx[p] = yv[p] * (gv[p] - dot);
                        }
                    }
                }
                accumulate(adj, *x, shape, dx);
            }
            Op::MaxAxis { x, axis, index } => {
                let shape = self.shape_of(*x);
                let (outer, len, inner) = kernels::split_axis(shape, *axis);
                let mut dx = vec![S::zero(); numel(shape)];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        dx[o * len * inner + index[r] * inner + i] = gv[r];
                    }
                }
                accumulate(adj, *x, shape, dx);
            }
            Op::CrossEntropy { x, targets, probs } => {
                let shape = self.shape_of(*x);
                let k = shape[1];
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] -= S::one();
                    for v in &mut dx[r * k..(r + 1) * k] {
                        *v *= gv[r];
                    }
                }
                accumulate(adj, *x, shape, dx);
            }
            Op::Select { x, index } => {
                let shape = self.shape_of(*x);
                let k = shape[1];
                let mut dx = vec![S::zero(); numel(shape)];
                for (r, &j) in index.iter().enumerate() {
                    dx[r * k + j] = gv[r];
                }
                accumulate(adj, *x, shape, dx);
            }
            Op::Reshape(x) => {
                accumulate(adj, *x, self.shape_of(*x), gv.to_vec());
            }
        }
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Tensor<S>>], id: usize, shape: &[usize], contribution: Vec<S>) {
    match &mut adj[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), contribution)),
    }
}
