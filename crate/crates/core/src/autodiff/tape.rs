use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, NormSaved, Window};
use super::tensor::check_finite;
use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
    },
    // `win` describes the output image; its patch grid is the input grid.
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    GroupNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        channels: usize,
        spatial: usize,
        saved: NormSaved,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    BceWithLogits(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// the reverse pass is a single backwards sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a variable that requires grad; `None` for constants or
    /// variables from another tape.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
    if nodes[j].requires_grad {
        let len = nodes[j].value.numel();
        Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
    } else {
        None
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a.ends_with(b))
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.idx(var)].requires_grad
    }

    /// Fingerprint of every data-dependent branch taken so far: the sign
    /// pattern of each relu input and the winner of each max-pool window.
    /// Two recordings of the same graph with equal fingerprints lie on the
    /// same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.data(*x).iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn idx(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        var.index
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var, AutodiffError> {
        check_finite(&data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        if !suffix_broadcast(self.shape(ia), self.shape(ib)) {
            return Err(shape_err(format!(
                "{name}: {:?} does not broadcast against {:?}",
                self.shape(ia),
                self.shape(ib)
            )));
        }
        let bd = self.data(ib);
        let nb = bd.len();
        let data: Vec<f64> = self
            .data(ia)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let shape = self.shape(ia).to_vec();
        self.push(shape, data, op(ia, ib), &[ia, ib])
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let ia = self.idx(a);
        let data = self.data(ia).iter().map(|v| v * factor).collect();
        let shape = self.shape(ia).to_vec();
        self.push(shape, data, Op::Scale(ia, factor), &[ia])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var, AutodiffError> {
        let ia = self.idx(a);
        let data = self.data(ia).iter().map(|v| v + offset).collect();
        let shape = self.shape(ia).to_vec();
        self.push(shape, data, Op::AddScalar(ia), &[ia])
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.shape(ia), self.shape(ib));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(ia), false, self.data(ib), false, &mut out, 0.0);
        self.push(vec![m, n], out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.idx(a);
        let s = self.shape(ia);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(ia);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(ia), &[ia])
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, kh, kw]`, optional
    /// bias `[O]`, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let ib = b.map(|b| self.idx(b));
        let (xs, ws) = (self.shape(ix).to_vec(), self.shape(iw).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err(format!("conv2d: input {xs:?}, weight {ws:?}, stride {stride}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err(format!("conv2d: kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(ib) = ib {
            if self.shape(ib) != [ws[0]] {
                return Err(shape_err(format!("conv2d: bias {:?} for {} outputs", self.shape(ib), ws[0])));
            }
        }
        let win = Window {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let (n, o) = (xs[0], ws[0]);
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let img = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; if win.is_pointwise() { 0 } else { rows * cols }];
        let (xd, wd) = (self.data(ix), self.data(iw));
        for s in 0..n {
            let image = &xd[s * img..(s + 1) * img];
            let patches: &[f64] = if win.is_pointwise() {
                image
            } else {
                kernels::im2col(image, &win, &mut col);
                &col
            };
            let dst = &mut out[s * o * cols..(s + 1) * o * cols];
            kernels::gemm(o, rows, cols, wd, false, patches, false, dst, 0.0);
            if let Some(ib) = ib {
                for (plane, &bv) in dst.chunks_exact_mut(cols).zip(self.data(ib)) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        self.push(
            vec![n, o, win.out_h(), win.out_w()],
            out,
            Op::Conv2d { x: ix, w: iw, b: ib, win },
            &inputs,
        )
    }

    /// Transposed convolution: `x [N, Ci, H, W]`, `w [Ci, Co, k, k]`, no
    /// padding. Output extent is `(H - 1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, AutodiffError> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let ib = b.map(|b| self.idx(b));
        let (xs, ws) = (self.shape(ix).to_vec(), self.shape(iw).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride == 0 {
            return Err(shape_err(format!(
                "conv_transpose2d: input {xs:?}, weight {ws:?}, stride {stride}"
            )));
        }
        if let Some(ib) = ib {
            if self.shape(ib) != [ws[1]] {
                return Err(shape_err(format!(
                    "conv_transpose2d: bias {:?} for {} outputs",
                    self.shape(ib),
                    ws[1]
                )));
            }
        }
        let (n, ci, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let win = Window {
            channels: co,
            height: (h - 1) * stride + ws[2],
            width: (w_in - 1) * stride + ws[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad: 0,
        };
        debug_assert_eq!((win.out_h(), win.out_w()), (h, w_in));
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let out_plane = win.height * win.width;
        let mut out = vec![0.0; n * co * out_plane];
        let mut col = vec![0.0; rows * cols];
        let (xd, wd) = (self.data(ix), self.data(iw));
        for s in 0..n {
            let image = &xd[s * ci * cols..(s + 1) * ci * cols];
            kernels::gemm(rows, ci, cols, wd, true, image, false, &mut col, 0.0);
            let dst = &mut out[s * co * out_plane..(s + 1) * co * out_plane];
            kernels::col2im(&col, &win, dst);
            if let Some(ib) = ib {
                for (plane, &bv) in dst.chunks_exact_mut(out_plane).zip(self.data(ib)) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        self.push(
            vec![n, co, win.height, win.width],
            out,
            Op::ConvTranspose2d { x: ix, w: iw, b: ib, win },
            &inputs,
        )
    }

    /// 2×2 max pooling with stride 2; spatial extents must be even.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let xs = self.shape(ix).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err(format!("maxpool2d needs even [N, C, H, W], got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = xs[0] * xs[1];
        let src = self.data(ix);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * y + dy) * w + 2 * x + dx;
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![xs[0], xs[1], oh, ow], out, Op::MaxPool2d { x: ix, argmax }, &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let data = self.data(ix).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(ix).to_vec();
        self.push(shape, data, Op::Relu(ix), &[ix])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let data = self.data(ix).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(ix).to_vec();
        self.push(shape, data, Op::Sigmoid(ix), &[ix])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let shape = self.shape(ix).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("softmax of rank-0 tensor"))?;
        let mut out = self.data(ix).to_vec();
        for row in out.chunks_exact_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(shape, out, Op::Softmax(ix), &[ix])
    }

    /// Group normalization over `[N, C, ...]` with optional per-channel
    /// affine `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let ig = gamma.map(|g| self.idx(g));
        let ibeta = beta.map(|b| self.idx(b));
        let shape = self.shape(ix).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(shape_err(format!("group_norm: {groups} groups over {shape:?}")));
        }
        let channels = shape[1];
        for i in ig.iter().chain(ibeta.iter()) {
            if self.shape(*i) != [channels] {
                return Err(shape_err(format!(
                    "group_norm: affine {:?} for {channels} channels",
                    self.shape(*i)
                )));
            }
        }
        let spatial: usize = shape[2..].iter().product();
        let saved = kernels::group_norm_forward(self.data(ix), shape[0], channels, spatial, groups, eps);
        let mut out = saved.normalized.clone();
        if ig.is_some() || ibeta.is_some() {
            for (i, plane) in out.chunks_exact_mut(spatial).enumerate() {
                let c = i % channels;
                let g = ig.map_or(1.0, |ig| self.data(ig)[c]);
                let b = ibeta.map_or(0.0, |ib| self.data(ib)[c]);
                plane.iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        let mut inputs = vec![ix];
        inputs.extend(ig);
        inputs.extend(ibeta);
        self.push(
            shape,
            out,
            Op::GroupNorm {
                x: ix,
                gamma: ig,
                beta: ibeta,
                channels,
                spatial,
                saved,
            },
            &inputs,
        )
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let channels = *self
            .shape(ix)
            .get(1)
            .ok_or_else(|| shape_err("instance_norm needs [N, C, ...]"))?;
        self.group_norm(x, channels, None, None, eps)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let first = self
            .shape(*idx.first().ok_or_else(|| shape_err("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.shape(i);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let seg = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.data(i)[o * seg..(o + 1) * seg]);
            }
        }
        self.push(shape, out, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let xs = self.shape(ix).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(shape_err(format!("slice {start}..{} on axis {axis} of {xs:?}", start + len)));
        }
        let (outer, inner) = axis_layout(&xs, axis);
        let src = self.data(ix);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        self.push(shape, out, Op::Slice { x: ix, axis, start }, &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let value = self.nodes[ix].value.reshape(shape)?;
        let requires_grad = self.nodes[ix].requires_grad;
        Ok(self.push_node(value, Op::Reshape(ix), requires_grad))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let total = self.data(ix).iter().sum();
        self.push(vec![1], vec![total], Op::Sum(ix), &[ix])
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.idx(x);
        let d = self.data(ix);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(ix), &[ix])
    }

    /// Elementwise numerically stable binary cross-entropy of logits
    /// against targets of the same shape.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var, AutodiffError> {
        let (il, it) = (self.idx(logits), self.idx(target));
        if self.shape(il) != self.shape(it) {
            return Err(shape_err(format!(
                "bce_with_logits: {:?} vs {:?}",
                self.shape(il),
                self.shape(it)
            )));
        }
        let data = self
            .data(il)
            .iter()
            .zip(self.data(it))
            .map(|(&x, &y)| kernels::bce_with_logit(x, y))
            .collect();
        let shape = self.shape(il).to_vec();
        self.push(shape, data, Op::BceWithLogits(il, it), &[il, it])
    }

    /// Reverse pass from a scalar root. Every trainable leaf receives a
    /// gradient of its own shape, zero when the root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        if root.tape != self.id || root.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedRoot);
        }
        let root_value = &self.nodes[root.index].value;
        if root_value.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(vec![1.0]);
        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let is_trainable_leaf = node.requires_grad && matches!(node.op, Op::Leaf);
            out.push(is_trainable_leaf.then(|| {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Tensor::from_parts(node.value.shape().to_vec(), data)
            }));
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    let nb = db.len();
                    for (k, gv) in g.iter().enumerate() {
                        db[k % nb] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let nb = bv.len();
                if let Some(da) = slot(nodes, grads, *a) {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += g[k] * bv[k % nb];
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (k, gv) in g.iter().enumerate() {
                        db[k % nb] += gv * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let nb = bv.len();
                if let Some(da) = slot(nodes, grads, *a) {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += g[k] / bv[k % nb];
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (k, gv) in g.iter().enumerate() {
                        let y = bv[k % nb];
                        db[k % nb] -= gv * av[k] / (y * y);
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += factor * gv);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(da) = slot(nodes, grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv, true, da, 1.0);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    kernels::gemm(k, m, n, av, true, g, false, db, 1.0);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, win } => self.conv2d_backward(*x, *w, *b, win, g, grads),
            Op::ConvTranspose2d { x, w, b, win } => self.conv_transpose2d_backward(*x, *w, *b, win, g, grads),
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for k in 0..dx.len() {
                        if xv[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for k in 0..dx.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let len = *nodes[i].value.shape().last().unwrap_or(&1);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((yr, gr), dr) in y.chunks_exact(len).zip(g.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..len {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                channels,
                spatial,
                saved,
            } => {
                let (channels, spatial) = (*channels, *spatial);
                if let Some(ig) = gamma {
                    if let Some(dg) = slot(nodes, grads, *ig) {
                        for (k, (gp, xp)) in g.chunks_exact(spatial).zip(saved.normalized.chunks_exact(spatial)).enumerate() {
                            dg[k % channels] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(ib) = beta {
                    if let Some(db) = slot(nodes, grads, *ib) {
                        for (k, gp) in g.chunks_exact(spatial).enumerate() {
                            db[k % channels] += gp.iter().sum::<f64>();
                        }
                    }
                }
                if nodes[*x].requires_grad {
                    let grad_norm: Vec<f64> = match gamma {
                        Some(ig) => {
                            let gv = self.data(*ig);
                            g.chunks_exact(spatial)
                                .enumerate()
                                .flat_map(|(k, gp)| gp.iter().map(move |v| v * gv[k % channels]))
                                .collect()
                        }
                        None => g.to_vec(),
                    };
                    if let Some(dx) = slot(nodes, grads, *x) {
                        kernels::group_norm_backward(saved, &grad_norm, dx);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = axis_layout(nodes[i].value.shape(), *axis);
                let total = nodes[i].value.shape()[*axis] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let seg = self.shape(j)[*axis] * inner;
                    if let Some(dj) = slot(nodes, grads, j) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + seg];
                            dj[o * seg..(o + 1) * seg].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += seg;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, inner) = axis_layout(xs, *axis);
                let len = nodes[i].value.shape()[*axis];
                let full = xs[*axis];
                if let Some(dx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let share = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::BceWithLogits(l, t) => {
                let (lv, tv) = (self.data(*l), self.data(*t));
                if let Some(dl) = slot(nodes, grads, *l) {
                    for k in 0..dl.len() {
                        dl[k] += g[k] * (kernels::sigmoid(lv[k]) - tv[k]);
                    }
                }
                if let Some(dt) = slot(nodes, grads, *t) {
                    for k in 0..dt.len() {
                        dt[k] -= g[k] * lv[k];
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        win: &Window,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let img = win.channels * win.height * win.width;
        let (xd, wd) = (self.data(x), self.data(w));
        if let Some(ib) = b.filter(|&ib| self.nodes[ib].requires_grad) {
            let db = grads[ib].get_or_insert_with(|| vec![0.0; o]);
            for (k, plane) in g.chunks_exact(cols).enumerate() {
                db[k % o] += plane.iter().sum::<f64>();
            }
        }
        let pointwise = win.is_pointwise();
        if self.nodes[w].requires_grad {
            let mut dw = grads[w].take().unwrap_or_else(|| vec![0.0; o * rows]);
            let mut col = vec![0.0; if pointwise { 0 } else { rows * cols }];
            for s in 0..n {
                let image = &xd[s * img..(s + 1) * img];
                let patches: &[f64] = if pointwise {
                    image
                } else {
                    kernels::im2col(image, win, &mut col);
                    &col
                };
                let gs = &g[s * o * cols..(s + 1) * o * cols];
                kernels::gemm(o, cols, rows, gs, false, patches, true, &mut dw, 1.0);
            }
            grads[w] = Some(dw);
        }
        if self.nodes[x].requires_grad {
            let mut dx = grads[x].take().unwrap_or_else(|| vec![0.0; n * img]);
            let mut dcol = vec![0.0; rows * cols];
            for s in 0..n {
                let gs = &g[s * o * cols..(s + 1) * o * cols];
                let dst = &mut dx[s * img..(s + 1) * img];
                if pointwise {
                    kernels::gemm(rows, o, cols, wd, true, gs, false, dst, 1.0);
                } else {
                    kernels::gemm(rows, o, cols, wd, true, gs, false, &mut dcol, 0.0);
                    kernels::col2im(&dcol, win, dst);
                }
            }
            grads[x] = Some(dx);
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        win: &Window,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let (n, ci) = (xs[0], xs[1]);
        let co = win.channels;
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let out_plane = win.height * win.width;
        let (xd, wd) = (self.data(x), self.data(w));
        if let Some(ib) = b.filter(|&ib| self.nodes[ib].requires_grad) {
            let db = grads[ib].get_or_insert_with(|| vec![0.0; co]);
            for (k, plane) in g.chunks_exact(out_plane).enumerate() {
                db[k % co] += plane.iter().sum::<f64>();
            }
        }
        let need_w = self.nodes[w].requires_grad;
        let need_x = self.nodes[x].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let mut dw = if need_w {
            grads[w].take().unwrap_or_else(|| vec![0.0; ci * rows])
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            grads[x].take().unwrap_or_else(|| vec![0.0; n * ci * cols])
        } else {
            Vec::new()
        };
        let mut dcol = vec![0.0; rows * cols];
        for s in 0..n {
            let gs = &g[s * co * out_plane..(s + 1) * co * out_plane];
            kernels::im2col(gs, win, &mut dcol);
            if need_x {
                let dst = &mut dx[s * ci * cols..(s + 1) * ci * cols];
                kernels::gemm(ci, rows, cols, wd, false, &dcol, false, dst, 1.0);
            }
            if need_w {
                let image = &xd[s * ci * cols..(s + 1) * ci * cols];
                kernels::gemm(ci, cols, rows, image, false, &dcol, true, &mut dw, 1.0);
            }
        }
        if need_w {
            grads[w] = Some(dw);
        }
        if need_x {
            grads[x] = Some(dx);
        }
    }
}
