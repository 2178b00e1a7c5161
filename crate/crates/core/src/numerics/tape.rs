//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a define-by-run graph: every operation evaluates eagerly at
//! insertion and records enough to replay the chain rule backwards. Tapes are
//! cheap, single-use objects — one forward/backward pass builds one tape, so
//! forward passes stay pure functions of (parameters, inputs) and batches can
//! fan out across threads with read-only parameter sharing.
//!
//! Complex values travel as real tensors with a trailing re/im axis of
//! size 2. The complex ops below (`complex_matmul`, `complex_solve`, ...)
//! interpret that layout directly; their adjoints follow the usual rule that
//! a complex-linear map backpropagates through the conjugate transpose.

use num_complex::Complex64;

use crate::cmatrix::CMat;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    CircConv2d { x: NodeId, k: NodeId, b: NodeId },
    CircConv3d { x: NodeId, k: NodeId, b: NodeId },
    SoftQuantize { x: NodeId, bits: u8, temperature: f64 },
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    SumSquares(NodeId),
    ComplexMatMul(NodeId, NodeId),
    ComplexSolve { a: NodeId, b: NodeId },
    Conj(NodeId),
    CTranspose(NodeId),
    ComplexMulElem(NodeId, NodeId),
    NormalizeColumnsComplex(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a node, zeros if it never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Define-by-run computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Untracked input; backward never propagates into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value, false)
    }

    /// Tracked input; receives a gradient in [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value, true)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(Op::Tanh(a), value, ng)
    }

    /// Elementwise square root; inputs must be strictly positive (callers add
    /// a small floor when needed).
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| 1.0 / x).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(Op::Recip(a), value, ng)
    }

    /// Affine map `w·x + b` with `w: [m,n]`, `x: [n]`, `b: [m]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ws.len() != 2 || xs.len() != 1 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::Dimension(format!(
                "dense: w {ws:?}, x {xs:?}, b {bs:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = bd[i];
            for (wv, xv) in row.iter().zip(xd) {
                acc += wv * xv;
            }
            out[i] = acc;
        }
        let value = Tensor::new(vec![m], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Dense { x, w, b }, value, ng))
    }

    /// 2-D circular convolution: `x: [h,w,cin]`, `k: [3,3,cin,cout]`,
    /// `b: [cout]` → `[h,w,cout]`. Indices wrap modulo the spatial dims.
    pub fn circ_conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "circ_conv2d: x {xs:?}, k {ks:?}, b {bs:?}"
            )));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let cout = ks[3];
        if ks != [3, 3, cin, cout] || bs[0] != cout {
            return Err(Error::Dimension(format!(
                "circ_conv2d: kernel {ks:?} does not match input {xs:?} / bias {bs:?}"
            )));
        }
        let value = conv2d_forward(self.value(x), self.value(k), self.value(b), h, w, cin, cout)?;
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(Op::CircConv2d { x, k, b }, value, ng))
    }

    /// 3-D circular convolution: `x: [h,w,d,cin]`, `k: [3,3,3,cin,cout]`,
    /// `b: [cout]` → `[h,w,d,cout]`.
    pub fn circ_conv3d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ks.len() != 5 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "circ_conv3d: x {xs:?}, k {ks:?}, b {bs:?}"
            )));
        }
        let (h, w, d, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ks[4];
        if ks != [3, 3, 3, cin, cout] || bs[0] != cout {
            return Err(Error::Dimension(format!(
                "circ_conv3d: kernel {ks:?} does not match input {xs:?} / bias {bs:?}"
            )));
        }
        let value =
            conv3d_forward(self.value(x), self.value(k), self.value(b), h, w, d, cin, cout)?;
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(Op::CircConv3d { x, k, b }, value, ng))
    }

    /// Differentiable staircase: a sum of `2^bits - 1` sigmoids with the given
    /// slope, centred at uniform mid-rise bin boundaries on `[-1, 1]`. As the
    /// temperature grows it converges to the hard uniform quantizer.
    pub fn soft_quantize(&mut self, x: NodeId, bits: u8, temperature: f64) -> Result<NodeId> {
        if bits == 0 || bits > 16 {
            return Err(Error::Config(format!("soft_quantize bits {bits} not in 1..=16")));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("soft_quantize temperature must be > 0".into()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| soft_quantize_scalar(v, bits, temperature).0)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(
            Op::SoftQuantize {
                x,
                bits,
                temperature,
            },
            value,
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len() {
                return Err(Error::Dimension("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dimension(format!(
                        "concat dim {d}: {a} vs {b} (axis {axis})"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let t = self.value(id);
            let alen = t.shape()[axis];
            let block = alen * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                let dst = &mut data[o * out_stride + offset..o * out_stride + offset + block];
                dst.copy_from_slice(src);
            }
            offset += block;
        }
        let value = Tensor::new(shape, data)?;
        let ng = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            ng,
        ))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice axis {axis} [{start}, {start}+{len}) of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let src_stride = s[axis] * inner;
        let dst_stride = len * inner;
        let xd = self.value(x).data();
        for o in 0..outer {
            let src = &xd[o * src_stride + start * inner..o * src_stride + (start + len) * inner];
            data[o * dst_stride..(o + 1) * dst_stride].copy_from_slice(src);
        }
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            value,
            ng,
        ))
    }

    /// Sum of squared entries, as a `[1]` tensor.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(Op::SumSquares(x), Tensor::scalar(s), ng)
    }

    /// Complex matrix product on `[m,k,2] × [k,n,2] → [m,n,2]`.
    pub fn complex_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[2] != 2 || sb[2] != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("complex_matmul: {sa:?} × {sb:?}")));
        }
        let am = tensor_to_cmat(self.value(a))?;
        let bm = tensor_to_cmat(self.value(b))?;
        let value = cmat_to_tensor(&am.matmul(&bm)?);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ComplexMatMul(a, b), value, ng))
    }

    /// Complex linear solve `a⁻¹·b` on `[n,n,2] × [n,m,2] → [n,m,2]`.
    pub fn complex_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[2] != 2 || sb[2] != 2 || sa[0] != sa[1] || sa[0] != sb[0]
        {
            return Err(Error::Dimension(format!("complex_solve: {sa:?} × {sb:?}")));
        }
        let am = tensor_to_cmat(self.value(a))?;
        let bm = tensor_to_cmat(self.value(b))?;
        let value = cmat_to_tensor(&am.solve(&bm)?);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ComplexSolve { a, b }, value, ng))
    }

    /// Complex conjugate of a `[.., 2]` tensor.
    pub fn conj(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if *s.last().unwrap_or(&0) != 2 {
            return Err(Error::Dimension(format!("conj expects trailing re/im axis: {s:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        for i in (1..data.len()).step_by(2) {
            data[i] = -data[i];
        }
        let value = Tensor::new(s, data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Conj(a), value, ng))
    }

    /// Complex (non-conjugating) transpose `[m,n,2] → [n,m,2]`.
    pub fn ctranspose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::Dimension(format!("ctranspose expects [m,n,2]: {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let value = transpose_pairs(self.value(a), m, n)?;
        let ng = self.needs(a);
        Ok(self.push(Op::CTranspose(a), value, ng))
    }

    /// Elementwise complex product of equal-shaped `[.., 2]` tensors.
    pub fn complex_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "complex_mul")?;
        if *shape.last().unwrap_or(&0) != 2 {
            return Err(Error::Dimension(format!(
                "complex_mul expects trailing re/im axis: {shape:?}"
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; ad.len()];
        for i in (0..ad.len()).step_by(2) {
            data[i] = ad[i] * bd[i] - ad[i + 1] * bd[i + 1];
            data[i + 1] = ad[i] * bd[i + 1] + ad[i + 1] * bd[i];
        }
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ComplexMulElem(a, b), value, ng))
    }

    /// Scales each complex column of a `[rows, cols, 2]` tensor to unit
    /// Euclidean norm (with a tiny floor for stability).
    pub fn normalize_columns(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::Dimension(format!(
                "normalize_columns expects [rows, cols, 2]: {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.value(a).data();
        let mut data = xd.to_vec();
        for j in 0..cols {
            let n = column_norm(xd, rows, cols, j);
            for i in 0..rows {
                let base = (i * cols + j) * 2;
                data[base] /= n;
                data[base + 1] /= n;
            }
        }
        let value = Tensor::new(s, data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::NormalizeColumnsComplex(a), value, ng))
    }

    /// Runs the chain rule from `loss` (a `[1]` tensor) back to every tracked
    /// node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != [1] {
            return Err(Error::Dimension(format!(
                "backward seed must be a [1] scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };

            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, update: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, u) in existing.data_mut().iter_mut().zip(update.data()) {
                    *e += u;
                }
            }
            slot => *slot = Some(update),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = elementwise(g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = elementwise(g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * c).collect())?;
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = elementwise(g, &node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = elementwise(g, &node.value, |gv, y| gv * 0.5 / y)?;
                self.accumulate(grads, *a, d);
            }
            Op::Recip(a) => {
                let d = elementwise(g, &node.value, |gv, y| -gv * y * y)?;
                self.accumulate(grads, *a, d);
            }
            Op::Dense { x, w, b } => {
                let (m, n) = {
                    let ws = self.value(*w).shape();
                    (ws[0], ws[1])
                };
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; n];
                    for i in 0..m {
                        let gv = gd[i];
                        let row = &wd[i * n..(i + 1) * n];
                        for (gxj, wv) in gx.iter_mut().zip(row) {
                            *gxj += gv * wv;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n], gx)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let gv = gd[i];
                        let row = &mut gw[i * n..(i + 1) * n];
                        for (gwj, xv) in row.iter_mut().zip(xd) {
                            *gwj = gv * xv;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![m, n], gw)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::new(vec![m], gd.to_vec())?);
                }
            }
            Op::CircConv2d { x, k, b } => {
                let xs = self.value(*x).shape();
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.value(*k).shape()[3];
                let (gx, gk, gb) = conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    h,
                    w,
                    cin,
                    cout,
                    self.needs(*x),
                    self.needs(*k),
                )?;
                if self.needs(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*k) {
                    self.accumulate(grads, *k, gk);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::CircConv3d { x, k, b } => {
                let xs = self.value(*x).shape();
                let (h, w, d, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.value(*k).shape()[4];
                let (gx, gk, gb) = conv3d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    h,
                    w,
                    d,
                    cin,
                    cout,
                    self.needs(*x),
                    self.needs(*k),
                )?;
                if self.needs(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*k) {
                    self.accumulate(grads, *k, gk);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SoftQuantize {
                x,
                bits,
                temperature,
            } => {
                let xd = self.value(*x).data();
                let mut d = vec![0.0; xd.len()];
                for (i, &v) in xd.iter().enumerate() {
                    let (_, slope) = soft_quantize_scalar(v, *bits, *temperature);
                    d[i] = g.data()[i] * slope;
                }
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?);
            }
            Op::Reshape(a) => {
                let d = g.reshaped(self.value(*a).shape())?;
                self.accumulate(grads, *a, d);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let alen = self.value(id).shape()[*axis];
                    let block = alen * inner;
                    if self.needs(id) {
                        let mut d = vec![0.0; self.value(id).numel()];
                        for o in 0..outer {
                            let src = &g.data()[o * out_stride + offset..o * out_stride + offset + block];
                            d[o * block..(o + 1) * block].copy_from_slice(src);
                        }
                        self.accumulate(
                            grads,
                            id,
                            Tensor::new(self.value(id).shape().to_vec(), d)?,
                        );
                    }
                    offset += block;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let src_stride = len * inner;
                let dst_stride = xs[*axis] * inner;
                let mut d = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = &mut d[o * dst_stride + start * inner..o * dst_stride + (start + len) * inner];
                    dst.copy_from_slice(&g.data()[o * src_stride..(o + 1) * src_stride]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, d)?);
            }
            Op::SumSquares(a) => {
                let g0 = g.data()[0];
                let d = Tensor::new(
                    self.value(*a).shape().to_vec(),
                    self.value(*a).data().iter().map(|v| 2.0 * g0 * v).collect(),
                )?;
                self.accumulate(grads, *a, d);
            }
            Op::ComplexMatMul(a, b) => {
                let am = tensor_to_cmat(self.value(*a))?;
                let bm = tensor_to_cmat(self.value(*b))?;
                let gm = tensor_to_cmat_with_shape(g, am.rows(), bm.cols())?;
                if self.needs(*a) {
                    let da = gm.matmul(&bm.hermitian())?;
                    self.accumulate(grads, *a, cmat_to_tensor(&da));
                }
                if self.needs(*b) {
                    let db = am.hermitian().matmul(&gm)?;
                    self.accumulate(grads, *b, cmat_to_tensor(&db));
                }
            }
            Op::ComplexSolve { a, b } => {
                let am = tensor_to_cmat(self.value(*a))?;
                let cm = tensor_to_cmat(&node.value)?;
                let gm = tensor_to_cmat(g)?;
                // For c = a⁻¹·b: ḡ_b = a⁻ᴴ·ḡ_c and ḡ_a = −ḡ_b·cᴴ.
                let gb = am.hermitian().solve(&gm)?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, cmat_to_tensor(&gb));
                }
                if self.needs(*a) {
                    let ga = gb.matmul(&cm.hermitian())?.scale(Complex64::new(-1.0, 0.0));
                    self.accumulate(grads, *a, cmat_to_tensor(&ga));
                }
            }
            Op::Conj(a) => {
                let mut d = g.data().to_vec();
                for i in (1..d.len()).step_by(2) {
                    d[i] = -d[i];
                }
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), d)?);
            }
            Op::CTranspose(a) => {
                let s = node.value.shape();
                let d = transpose_pairs(g, s[0], s[1])?;
                self.accumulate(grads, *a, d);
            }
            Op::ComplexMulElem(a, b) => {
                // d/da (a·b) pulls back through conj(b) and vice versa.
                if self.needs(*a) {
                    let d = complex_mul_conj(g, self.value(*b))?;
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = complex_mul_conj(g, self.value(*a))?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::NormalizeColumnsComplex(a) => {
                let s = self.value(*a).shape();
                let (rows, cols) = (s[0], s[1]);
                let xd = self.value(*a).data();
                let gd = g.data();
                let mut d = vec![0.0; xd.len()];
                for j in 0..cols {
                    let n = column_norm(xd, rows, cols, j);
                    let mut dot = 0.0;
                    for i in 0..rows {
                        let base = (i * cols + j) * 2;
                        dot += xd[base] * gd[base] + xd[base + 1] * gd[base + 1];
                    }
                    let n3 = n * n * n;
                    for i in 0..rows {
                        let base = (i * cols + j) * 2;
                        d[base] = gd[base] / n - xd[base] * dot / n3;
                        d[base + 1] = gd[base + 1] / n - xd[base + 1] * dot / n3;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s.to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn complex_mul_conj(g: &Tensor, other: &Tensor) -> Result<Tensor> {
    let gd = g.data();
    let od = other.data();
    let mut out = vec![0.0; gd.len()];
    for i in (0..gd.len()).step_by(2) {
        // g · conj(other)
        out[i] = gd[i] * od[i] + gd[i + 1] * od[i + 1];
        out[i + 1] = gd[i + 1] * od[i] - gd[i] * od[i + 1];
    }
    Tensor::new(g.shape().to_vec(), out)
}

fn transpose_pairs(t: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    let src = t.data();
    let mut data = vec![0.0; src.len()];
    for i in 0..m {
        for j in 0..n {
            let s = (i * n + j) * 2;
            let d = (j * m + i) * 2;
            data[d] = src[s];
            data[d + 1] = src[s + 1];
        }
    }
    Tensor::new(vec![n, m, 2], data)
}

fn column_norm(data: &[f64], rows: usize, cols: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..rows {
        let base = (i * cols + j) * 2;
        acc += data[base] * data[base] + data[base + 1] * data[base + 1];
    }
    (acc + 1e-24).sqrt()
}

/// Converts a `[rows, cols, 2]` tensor to a complex matrix.
pub fn tensor_to_cmat(t: &Tensor) -> Result<CMat> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Dimension(format!("expected [rows, cols, 2], got {s:?}")));
    }
    tensor_to_cmat_with_shape(t, s[0], s[1])
}

fn tensor_to_cmat_with_shape(t: &Tensor, rows: usize, cols: usize) -> Result<CMat> {
    if t.numel() != rows * cols * 2 {
        return Err(Error::Dimension(format!(
            "tensor with {} entries is not a {}x{} complex matrix",
            t.numel(),
            rows,
            cols
        )));
    }
    let d = t.data();
    let data = (0..rows * cols)
        .map(|i| Complex64::new(d[2 * i], d[2 * i + 1]))
        .collect();
    CMat::from_vec(rows, cols, data)
}

/// Converts a complex matrix to its `[rows, cols, 2]` tensor layout.
pub fn cmat_to_tensor(m: &CMat) -> Tensor {
    let mut data = Vec::with_capacity(m.rows() * m.cols() * 2);
    for z in m.data() {
        data.push(z.re);
        data.push(z.im);
    }
    Tensor::new(vec![m.rows(), m.cols(), 2], data).expect("consistent by construction")
}

/// Forward value and input-slope of the soft staircase at one point.
///
/// The staircase is `-1 + Δ/2 + Δ·Σ_k σ(τ·(x - b_k))` over the `2^bits - 1`
/// interior bin boundaries `b_k = -1 + k·Δ`. Sigmoids more than 40/τ away
/// from `x` are saturated in f64, so only a window around `x` is evaluated;
/// boundaries fully below it contribute exactly 1.
fn soft_quantize_scalar(x: f64, bits: u8, temperature: f64) -> (f64, f64) {
    let levels = 1u64 << bits;
    let delta = 2.0 / levels as f64;
    let last = levels - 1;
    let width = 40.0 / temperature;
    let k_lo_f = (((x - width) + 1.0) / delta).ceil();
    let k_hi_f = (((x + width) + 1.0) / delta).floor();
    let k_lo = if k_lo_f < 1.0 {
        1
    } else if k_lo_f > (last + 1) as f64 {
        last + 1
    } else {
        k_lo_f as u64
    };
    let k_hi = if k_hi_f < 1.0 {
        0
    } else if k_hi_f > last as f64 {
        last
    } else {
        k_hi_f as u64
    };
    let mut sum = (k_lo - 1) as f64;
    let mut slope_sum = 0.0;
    let mut k = k_lo;
    while k <= k_hi {
        let b = -1.0 + k as f64 * delta;
        let s = stable_sigmoid(temperature * (x - b));
        sum += s;
        slope_sum += s * (1.0 - s);
        k += 1;
    }
    let y = -1.0 + delta / 2.0 + delta * sum;
    let dy = delta * temperature * slope_sum;
    (y, dy)
}

fn stable_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> Result<Tensor> {
    let xd = x.data();
    let kd = k.data();
    let bd = b.data();
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            let obase = (i * w + j) * cout;
            out[obase..obase + cout].copy_from_slice(bd);
            for di in 0..3 {
                let ii = (i + di + h - 1) % h;
                for dj in 0..3 {
                    let jj = (j + dj + w - 1) % w;
                    let xoff = (ii * w + jj) * cin;
                    let koff = (di * 3 + dj) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let kbase = koff + ci * cout;
                        for co in 0..cout {
                            out[obase + co] += xv * kd[kbase + co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    need_x: bool,
    need_k: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gb = vec![0.0; cout];
    for i in 0..h {
        for j in 0..w {
            let obase = (i * w + j) * cout;
            for co in 0..cout {
                gb[co] += gd[obase + co];
            }
            for di in 0..3 {
                let ii = (i + di + h - 1) % h;
                for dj in 0..3 {
                    let jj = (j + dj + w - 1) % w;
                    let xoff = (ii * w + jj) * cin;
                    let koff = (di * 3 + dj) * cin * cout;
                    for ci in 0..cin {
                        let kbase = koff + ci * cout;
                        let xv = xd[xoff + ci];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let gv = gd[obase + co];
                            if need_k {
                                gk[kbase + co] += xv * gv;
                            }
                            acc += kd[kbase + co] * gv;
                        }
                        if need_x {
                            gx[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, w, cin], gx)?,
        Tensor::new(vec![3, 3, cin, cout], gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    h: usize,
    w: usize,
    d: usize,
    cin: usize,
    cout: usize,
) -> Result<Tensor> {
    let xd = x.data();
    let kd = k.data();
    let bd = b.data();
    let mut out = vec![0.0; h * w * d * cout];
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                let obase = ((i * w + j) * d + l) * cout;
                out[obase..obase + cout].copy_from_slice(bd);
                for di in 0..3 {
                    let ii = (i + di + h - 1) % h;
                    for dj in 0..3 {
                        let jj = (j + dj + w - 1) % w;
                        for dl in 0..3 {
                            let ll = (l + dl + d - 1) % d;
                            let xoff = ((ii * w + jj) * d + ll) * cin;
                            let koff = ((di * 3 + dj) * 3 + dl) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xoff + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let kbase = koff + ci * cout;
                                for co in 0..cout {
                                    out[obase + co] += xv * kd[kbase + co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, d, cout], out)
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    h: usize,
    w: usize,
    d: usize,
    cin: usize,
    cout: usize,
    need_x: bool,
    need_k: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gb = vec![0.0; cout];
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                let obase = ((i * w + j) * d + l) * cout;
                for co in 0..cout {
                    gb[co] += gd[obase + co];
                }
                for di in 0..3 {
                    let ii = (i + di + h - 1) % h;
                    for dj in 0..3 {
                        let jj = (j + dj + w - 1) % w;
                        for dl in 0..3 {
                            let ll = (l + dl + d - 1) % d;
                            let xoff = ((ii * w + jj) * d + ll) * cin;
                            let koff = ((di * 3 + dj) * 3 + dl) * cin * cout;
                            for ci in 0..cin {
                                let kbase = koff + ci * cout;
                                let xv = xd[xoff + ci];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    let gv = gd[obase + co];
                                    if need_k {
                                        gk[kbase + co] += xv * gv;
                                    }
                                    acc += kd[kbase + co] * gv;
                                }
                                if need_x {
                                    gx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, w, d, cin], gx)?,
        Tensor::new(vec![3, 3, 3, cin, cout], gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}
