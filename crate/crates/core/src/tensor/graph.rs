use std::rc::Rc;

use super::kernels::{self, ConvGeom, MatMut, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention pattern: `allows(i, j)` means query `i` may read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every row must allow at least one column.
    pub fn from_fn(size: usize, mut allows: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(allows(i, j));
            }
        }
        let mask = Self { size, allowed };
        if let Some(row) = (0..size).find(|&i| !mask.row(i).iter().any(|&a| a)) {
            return Err(Error::shape("AttentionMask", format!("row {row} attends to nothing")));
        }
        Ok(mask)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    /// Leading `size x size` block.
    pub fn truncate(&self, size: usize) -> Result<Self> {
        if size > self.size {
            return Err(Error::shape(
                "AttentionMask::truncate",
                format!("{size} exceeds mask size {}", self.size),
            ));
        }
        Self::from_fn(size, |i, j| self.allows(i, j))
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Resize {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttentionMask>,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Append-only record of primitive operations.
///
/// A node is *tracked* when it is a parameter leaf or depends on one;
/// untracked nodes skip saving backward state, so graphs built purely from
/// constants double as a no-grad inference path.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked leaf it reaches.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::shape(op, detail))
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Untracked copy of `var`'s value.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            ref s => shape_err(op, format!("expected a matrix, got shape {s:?}")),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, tracked, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.map(x, |v| v * factor);
        let tracked = self.tracked(&[x]);
        self.push(value, tracked, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let value = self.map(x, |v| v + c);
        let tracked = self.tracked(&[x]);
        self.push(value, tracked, Op::AddScalar(x))
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let xv = self.value(x);
        Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), tracked, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f32 = xv.data().iter().sum::<f32>() / xv.numel() as f32;
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), tracked, Op::Mean(x))
    }

    /// Mean of squared element-wise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, tracked, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            tracked,
            Op::Transpose(x),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_impl("matmul", a, b, None)
    }

    /// `x[M,K] · w[K,N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.linear_impl("linear", x, w, Some(b))
    }

    fn linear_impl(&mut self, op: &'static str, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix_dims(op, x)?;
        let (k2, n) = self.matrix_dims(op, w)?;
        if k != k2 {
            return shape_err(op, format!("inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(op, format!("bias {:?} for width {n}", self.shape(b)));
            }
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), m, k),
            MatRef::row_major(self.value(w).data(), k, n),
            if b.is_some() { 1.0 } else { 0.0 },
            MatMut::row_major(&mut out, m, n),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            tracked,
            Op::Linear { x, w, b },
        ))
    }

    /// Row-wise normalisation of `x[M,D]` with affine `gamma[D]`, `beta[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", format!("affine params must be [{d}]"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + bt[j];
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        if !tracked {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, d],
                data: out,
            },
            tracked,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, kernels::gelu);
        let tracked = self.tracked(&[x]);
        self.push(value, tracked, Op::Gelu(x))
    }

    /// Rows of `table[V,D]` selected by `indices`, giving `[N,D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                extent: v,
            });
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            tracked,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Stack matrices with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no operands".into());
        };
        let (_, d) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != d {
                return shape_err("concat_rows", format!("width {c} vs {d}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, d],
                data,
            },
            tracked,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.matrix_dims("slice_rows", x)?;
        if start + len > r {
            return shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![len, d],
                data,
            },
            tracked,
            Op::SliceRows { x, start },
        ))
    }

    /// `x[Cin,H,W]` convolved with `w[Cout,Cin,kh,kw]` plus `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return shape_err("conv2d", format!("input must be [C,H,W], got {s:?}")),
        };
        let (cout, kh, kw) = match *self.shape(w) {
            [o, i, kh, kw] if i == cin => (o, kh, kw),
            ref s => return shape_err("conv2d", format!("kernel {s:?} for {cin} input channels")),
        };
        if self.shape(b) != [cout] {
            return shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b)));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd}"));
        }
        let geom = ConvGeom {
            in_c: cin,
            in_h: h,
            in_w: wd,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = geom.im2col(self.value(x).data());
        let mut out = vec![0.0; cout * oh * ow];
        for (c, &bias) in self.value(b).data().iter().enumerate() {
            out[c * oh * ow..(c + 1) * oh * ow].fill(bias);
        }
        kernels::gemm(
            1.0,
            MatRef::row_major(self.value(w).data(), cout, geom.patch_len()),
            MatRef::row_major(&cols, geom.patch_len(), oh * ow),
            1.0,
            MatMut::row_major(&mut out, cout, oh * ow),
        );
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![cout, oh, ow],
                data: out,
            },
            tracked,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: if tracked { cols } else { Vec::new() },
            },
        ))
    }

    /// Align-corners bilinear resize of `x[C,h,w]` to `[C,h',w']`.
    pub fn resize_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            ref s => return shape_err("resize_bilinear", format!("input must be [C,h,w], got {s:?}")),
        };
        if target.0 == 0 || target.1 == 0 {
            return shape_err("resize_bilinear", format!("target {target:?} must be positive"));
        }
        let data = kernels::resize_forward(self.value(x).data(), c, (h, w), target);
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, target.0, target.1],
                data,
            },
            tracked,
            Op::Resize { x },
        ))
    }

    /// Multi-head scaled dot-product attention over `[B*T, D]` inputs,
    /// where `T` is the mask size and each of the `B` row blocks is an
    /// independent sequence. Masked weights are exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttentionMask>) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.attention_tail(q, k, v, heads, mask)
    }

    /// Attention where `k` and `v` hold `B` full sequences of mask size
    /// `T` but `q` holds only the last `Tq` positions of each, `[B*Tq, D]`.
    /// Query row `i` uses mask row `T - Tq + i`.
    pub fn attention_tail(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttentionMask>) -> Result<Var> {
        let (qrows, d) = self.matrix_dims("attention", q)?;
        let (rows, _) = self.matrix_dims("attention", k)?;
        self.same_shape("attention", k, v)?;
        let t = mask.size();
        if heads == 0 || d % heads != 0 || t == 0 || rows % t != 0 || self.shape(k)[1] != d {
            return shape_err(
                "attention",
                format!("{qrows}x{d} queries, {rows} keys with {heads} heads and mask size {t}"),
            );
        }
        let batch = rows / t;
        if qrows % batch != 0 || qrows / batch == 0 || qrows / batch > t {
            return shape_err(
                "attention",
                format!("{qrows} query rows do not split into {batch} tails of at most {t}"),
            );
        }
        let tq = qrows / batch;
        let first = t - tq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let tracked = self.tracked(&[q, k, v]);
        let mut out = vec![0.0; qrows * d];
        let mut probs = vec![0.0; if tracked { batch * heads * tq * t } else { tq * t }];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            let (qoff, off) = (b * tq * d, b * t * d);
            for h in 0..heads {
                let p = if tracked {
                    let at = (b * heads + h) * tq * t;
                    &mut probs[at..at + tq * t]
                } else {
                    &mut probs[..]
                };
                kernels::gemm(
                    scale,
                    MatRef::column_block(&qd[qoff..], tq, d, h * dh, dh),
                    MatRef::column_block(&kd[off..], t, d, h * dh, dh).t(),
                    0.0,
                    MatMut::row_major(p, tq, t),
                );
                for i in 0..tq {
                    kernels::masked_softmax(&mut p[i * t..(i + 1) * t], mask.row(first + i));
                }
                kernels::gemm(
                    1.0,
                    MatRef::row_major(p, tq, t),
                    MatRef::column_block(&vd[off..], t, d, h * dh, dh),
                    0.0,
                    MatMut::column_block(&mut out[qoff..], tq, d, h * dh, dh),
                );
            }
        }
        if !tracked {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor {
                shape: vec![qrows, d],
                data: out,
            },
            tracked,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= sum;
            }
            total += (sum.ln() + max - row[targets[i]]) as f64;
        }
        let loss = (total / n as f64) as f32;
        let tracked = self.tracked(&[logits]);
        if !tracked {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            tracked,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a single-element `root`.
    ///
    /// Fails with [`Error::Divergence`] when any leaf gradient is not finite.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }

        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if !gout.iter().all(|g| g.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient for leaf {id} with shape {:?}",
                        node.value.shape()
                    )));
                }
                leaves[id] = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: gout,
                });
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, node: &Node, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[var.0].tracked {
                return;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    for (d, s) in g.iter_mut().zip(gout) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((d, s), y) in g.iter_mut().zip(gout).zip(bv) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, s), x) in g.iter_mut().zip(gout).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(x, factor) => acc(*x, &mut |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s * factor;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::Sum(x) => acc(*x, &mut |g| {
                for d in g.iter_mut() {
                    *d += gout[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                acc(*x, &mut |g| {
                    for d in g.iter_mut() {
                        *d += gout[0] / n;
                    }
                })
            }
            Op::Transpose(x) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                })
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |g| {
                    kernels::gemm(
                        1.0,
                        MatRef::row_major(gout, m, n),
                        MatRef::row_major(wv, k, n).t(),
                        1.0,
                        MatMut::row_major(g, m, k),
                    )
                });
                acc(*w, &mut |g| {
                    kernels::gemm(
                        1.0,
                        MatRef::row_major(xv, m, k).t(),
                        MatRef::row_major(gout, m, n),
                        1.0,
                        MatMut::row_major(g, k, n),
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for row in gout.chunks_exact(n) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                acc(*x, &mut |g| {
                    for (i, r) in rstd.iter().enumerate() {
                        let rows = i * d..(i + 1) * d;
                        let (gy, xh) = (&gout[rows.clone()], &xhat[rows.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for j in 0..d {
                            let dh = gy[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_xh += dh * xh[j];
                        }
                        mean_dh /= d as f32;
                        mean_dh_xh /= d as f32;
                        for j in 0..d {
                            let dh = gy[j] * gam[j];
                            g[i * d + j] += r * (dh - mean_dh - xh[j] * mean_dh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (gy, xh) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += gy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for gy in gout.chunks_exact(d) {
                        add_into(g, gy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((d, s), v) in g.iter_mut().zip(gout).zip(xv) {
                        *d += s * kernels::gelu_grad(*v);
                    }
                })
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |g| {
                    for (row, &i) in gout.chunks_exact(d).zip(indices) {
                        add_into(&mut g[i * d..(i + 1) * d], row);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |g| add_into(g, &gout[at..at + n]));
                    at += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(*x)[1];
                acc(*x, &mut |g| add_into(&mut g[start * d..start * d + gout.len()], gout))
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = self.shape(*w)[0];
                let hw = geom.out_h() * geom.out_w();
                let wv = self.value(*w).data();
                acc(*w, &mut |g| {
                    kernels::gemm(
                        1.0,
                        MatRef::row_major(gout, cout, hw),
                        MatRef::row_major(cols, geom.patch_len(), hw).t(),
                        1.0,
                        MatMut::row_major(g, cout, geom.patch_len()),
                    )
                });
                acc(*b, &mut |g| {
                    for (c, row) in gout.chunks_exact(hw).enumerate() {
                        g[c] += row.iter().sum::<f32>();
                    }
                });
                acc(*x, &mut |g| {
                    let mut dcols = vec![0.0; geom.patch_len() * hw];
                    kernels::gemm(
                        1.0,
                        MatRef::row_major(wv, cout, geom.patch_len()).t(),
                        MatRef::row_major(gout, cout, hw),
                        0.0,
                        MatMut::row_major(&mut dcols, geom.patch_len(), hw),
                    );
                    geom.col2im(&dcols, g);
                });
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let target = (node.value.shape()[1], node.value.shape()[2]);
                acc(*x, &mut |g| kernels::resize_backward(gout, c, (h, w), target, g))
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask, probs, gout, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let v = probs.len() / n;
                let scale = gout[0] / n as f32;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
        probs: &[f32],
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (qrows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let rows = self.shape(k)[0];
        let t = mask.size();
        let batch = rows / t;
        let tq = qrows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qrows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; tq * t];
        for b in 0..batch {
            let (qoff, off) = (b * tq * d, b * t * d);
            for h in 0..heads {
                let at = (b * heads + h) * tq * t;
                let p = &probs[at..at + tq * t];
                let g_o = MatRef::column_block(&gout[qoff..], tq, d, h * dh, dh);
                kernels::gemm(
                    1.0,
                    MatRef::row_major(p, tq, t).t(),
                    g_o,
                    1.0,
                    MatMut::column_block(&mut gv[off..], t, d, h * dh, dh),
                );
                kernels::gemm(
                    1.0,
                    g_o,
                    MatRef::column_block(&vd[off..], t, d, h * dh, dh).t(),
                    0.0,
                    MatMut::row_major(&mut dp, tq, t),
                );
                for i in 0..tq {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                kernels::gemm(
                    scale,
                    MatRef::row_major(&dp, tq, t),
                    MatRef::column_block(&kd[off..], t, d, h * dh, dh),
                    1.0,
                    MatMut::column_block(&mut gq[qoff..], tq, d, h * dh, dh),
                );
                kernels::gemm(
                    scale,
                    MatRef::row_major(&dp, tq, t).t(),
                    MatRef::column_block(&qd[qoff..], tq, d, h * dh, dh),
                    1.0,
                    MatMut::column_block(&mut gk[off..], t, d, h * dh, dh),
                );
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].tracked {
                match &mut grads[var.0] {
                    Some(slot) => add_into(slot, &g),
                    slot => *slot = Some(g),
                }
            }
        }
    }
}
