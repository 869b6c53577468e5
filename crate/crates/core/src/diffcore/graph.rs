use std::collections::BTreeMap;

use super::tensor::{gemm, MatRef, Real, Tensor};
use super::DiffError;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Edge handling of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Repeat the first/last frame. A constant sequence stays constant.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub pad_mode: PadMode,
}

impl Conv1dSpec {
    /// Padding that makes the output length `floor(len / stride)`.
    pub fn downsampling(kernel: usize, stride: usize) -> Self {
        let total = kernel.saturating_sub(stride);
        Self {
            kernel,
            stride,
            pad_left: total / 2,
            pad_right: total - total / 2,
            pad_mode: PadMode::Zeros,
        }
    }

    /// Stride-1 convolution that preserves length (odd kernels).
    pub fn same(kernel: usize, pad_mode: PadMode) -> Self {
        Self {
            kernel,
            stride: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: kernel - 1 - (kernel - 1) / 2,
            pad_mode,
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: Conv1dSpec,
    },
    GruStep {
        gx: NodeId,
        h: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LstmStep {
        gx: NodeId,
        state: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Unary {
        x: NodeId,
        f: UnaryFn,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        f: BinaryFn,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Shift {
        x: NodeId,
    },
    AddRow {
        a: NodeId,
        b: NodeId,
    },
    AddCol {
        a: NodeId,
        b: NodeId,
    },
    DivCol {
        a: NodeId,
        b: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    SumRows {
        x: NodeId,
    },
    SumCols {
        x: NodeId,
    },
    CumSum {
        x: NodeId,
    },
    CosSim {
        a: NodeId,
        b: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatRows {
        xs: Vec<NodeId>,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::GruStep { .. } => "gru_step",
            Op::LstmStep { .. } => "lstm_step",
            Op::Unary { f, .. } => match f {
                UnaryFn::Sigmoid => "sigmoid",
                UnaryFn::Tanh => "tanh",
                UnaryFn::Relu => "relu",
                UnaryFn::Exp => "exp",
                UnaryFn::Log => "log",
            },
            Op::Binary { f, .. } => match f {
                BinaryFn::Add => "add",
                BinaryFn::Sub => "sub",
                BinaryFn::Mul => "mul",
                BinaryFn::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::AddRow { .. } => "add_row",
            Op::AddCol { .. } => "add_col",
            Op::DivCol { .. } => "div_col",
            Op::SumAll { .. } => "sum",
            Op::SumRows { .. } => "sum_rows",
            Op::SumCols { .. } => "sum_cols",
            Op::CumSum { .. } => "cumsum",
            Op::CosSim { .. } => "cosine_similarity",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Binary { a, b, .. }
            | Op::AddRow { a, b }
            | Op::AddCol { a, b }
            | Op::DivCol { a, b }
            | Op::CosSim { a, b } => vec![*a, *b],
            Op::Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::GruStep { gx, h, w, b } => vec![*gx, *h, *w, *b],
            Op::LstmStep { gx, state, w, b } => vec![*gx, *state, *w, *b],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Shift { x, .. }
            | Op::SumAll { x }
            | Op::SumRows { x }
            | Op::SumCols { x }
            | Op::CumSum { x }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x } => vec![*x],
            Op::ConcatRows { xs } => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    cache: Vec<T>,
}

/// Gradients of a scalar output with respect to every named
/// differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

/// Define-by-run computation graph. Nodes are appended in topological
/// order and evaluated as they are added; shapes are validated on
/// insertion.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, (NodeId, bool)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: NodeId,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Smallest distance of any ReLU input from the kink (infinite when
    /// the graph has no ReLU).
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { x, f: UnaryFn::Relu } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.to_f64().unwrap_or(0.0).abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Which side of the kink every ReLU input lies on, in node order.
    /// Two evaluations with equal patterns lie on one smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { x, f: UnaryFn::Relu } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()))
            .collect()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims2()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, cache: Vec<T>) -> Result<NodeId, DiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            cache,
        });
        Ok(NodeId(id))
    }

    fn leaf(&mut self, name: Option<&str>, t: Tensor<T>, diff: bool) -> Result<NodeId, DiffError> {
        if let Some(n) = name {
            if self.names.contains_key(n) {
                return Err(DiffError::Duplicate(n.to_string()));
            }
        }
        let id = self.push(Op::Leaf, t, Vec::new())?;
        self.nodes[id.0].requires_grad = diff;
        if let Some(n) = name {
            self.names.insert(n.to_string(), (id, diff));
        }
        Ok(id)
    }

    /// Named differentiable leaf (a parameter or a differentiable input).
    pub fn variable(&mut self, name: &str, t: Tensor<T>) -> Result<NodeId, DiffError> {
        self.leaf(Some(name), t, true)
    }

    /// Named input, optionally differentiable.
    pub fn input(
        &mut self,
        name: &str,
        t: Tensor<T>,
        differentiable: bool,
    ) -> Result<NodeId, DiffError> {
        self.leaf(Some(name), t, differentiable)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<NodeId, DiffError> {
        self.leaf(None, t, false)
    }

    /// Looks up a named leaf.
    pub fn var(&self, name: &str) -> Result<NodeId, DiffError> {
        self.names
            .get(name)
            .map(|(id, _)| *id)
            .ok_or_else(|| DiffError::Unbound(name.to_string()))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ----- dense -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    ) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be 2-D, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "{sa:?}{} x {sb:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let av = self.view(a, ta);
        let bv = self.view(b, tb);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), av, bv, T::zero(), &mut out, 0, n, 1);
        self.push(
            Op::MatMul { a, b, ta, tb },
            Tensor::matrix(m, n, out)?,
            Vec::new(),
        )
    }

    fn view(&self, id: NodeId, t: bool) -> MatRef<'_, T> {
        let v = &self.nodes[id.0].value;
        let c = v.shape()[1];
        let r = MatRef::new(v.data(), c, 1);
        if t {
            r.t()
        } else {
            r
        }
    }

    /// Strided 1-D convolution over time. `x` is `[T, C_in]`, `w` is
    /// `[kernel·C_in, C_out]` (tap-major rows), `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: Conv1dSpec,
    ) -> Result<NodeId, DiffError> {
        let (len, cin) = self.dims(x);
        let sw = self.shape(w).to_vec();
        if self.shape(x).len() != 2 || sw.len() != 2 || sw[0] != spec.kernel * cin {
            return Err(shape_err(
                "conv1d",
                format!(
                    "input {:?}, weight {sw:?}, kernel {}",
                    self.shape(x),
                    spec.kernel
                ),
            ));
        }
        let cout = sw[1];
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err(
                    "conv1d",
                    format!("bias {:?} for {cout} channels", self.shape(b)),
                ));
            }
        }
        let tout = spec.output_len(len).filter(|&t| t > 0).ok_or_else(|| {
            shape_err(
                "conv1d",
                format!("input length {len} shorter than kernel {}", spec.kernel),
            )
        })?;
        let padded = pad_rows(self.value(x).data(), len, cin, spec);
        let mut out = vec![T::zero(); tout * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            tout,
            spec.kernel * cin,
            cout,
            T::one(),
            MatRef::new(&padded, spec.stride * cin, 1),
            MatRef::new(self.value(w).data(), cout, 1),
            beta,
            &mut out,
            0,
            cout,
            1,
        );
        self.push(
            Op::Conv1d { x, w, bias, spec },
            Tensor::matrix(tout, cout, out)?,
            padded,
        )
    }

    /// One GRU step. `gx` is the input projection `[B, 3H]` (bias
    /// included), `h` is `[B, H]`, `w` is `[H, 3H]`, `b` is `[3H]`.
    /// Gate order: reset, update, candidate.
    pub fn gru_step(
        &mut self,
        gx: NodeId,
        h: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (bsz, hd) = self.dims(h);
        if self.shape(gx) != [bsz, 3 * hd]
            || self.shape(w) != [hd, 3 * hd]
            || self.value(b).len() != 3 * hd
        {
            return Err(shape_err(
                "gru_step",
                format!(
                    "gx {:?}, h {:?}, w {:?}, b {:?}",
                    self.shape(gx),
                    self.shape(h),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let g3 = 3 * hd;
        let mut gh = vec![T::zero(); bsz * g3];
        for row in gh.chunks_mut(g3) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            bsz,
            hd,
            g3,
            T::one(),
            self.view(h, false),
            self.view(w, false),
            T::one(),
            &mut gh,
            0,
            g3,
            1,
        );
        let gxv = self.value(gx).data();
        let hv = self.value(h).data();
        let mut r = vec![T::zero(); bsz * hd];
        let mut u = vec![T::zero(); bsz * hd];
        let mut n = vec![T::zero(); bsz * hd];
        let mut out = vec![T::zero(); bsz * hd];
        for bi in 0..bsz {
            for j in 0..hd {
                let o = bi * g3;
                let k = bi * hd + j;
                r[k] = sigmoid(gxv[o + j] + gh[o + j]);
                u[k] = sigmoid(gxv[o + hd + j] + gh[o + hd + j]);
                n[k] = (gxv[o + 2 * hd + j] + r[k] * gh[o + 2 * hd + j]).tanh();
                out[k] = (T::one() - u[k]) * n[k] + u[k] * hv[k];
            }
        }
        let mut cache = gh;
        cache.extend(r);
        cache.extend(u);
        cache.extend(n);
        self.push(
            Op::GruStep { gx, h, w, b },
            Tensor::matrix(bsz, hd, out)?,
            cache,
        )
    }

    /// One LSTM step. `state` is `[B, 2H]` holding `[h | c]`; output has
    /// the same layout. `gx` is `[B, 4H]`, `w` is `[H, 4H]`, `b` is `[4H]`.
    /// Gate order: input, forget, cell, output.
    pub fn lstm_step(
        &mut self,
        gx: NodeId,
        state: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (bsz, h2) = self.dims(state);
        let hd = h2 / 2;
        if h2 % 2 != 0
            || self.shape(gx) != [bsz, 4 * hd]
            || self.shape(w) != [hd, 4 * hd]
            || self.value(b).len() != 4 * hd
        {
            return Err(shape_err(
                "lstm_step",
                format!(
                    "gx {:?}, state {:?}, w {:?}",
                    self.shape(gx),
                    self.shape(state),
                    self.shape(w)
                ),
            ));
        }
        let g4 = 4 * hd;
        let mut pre = vec![T::zero(); bsz * g4];
        for (row, gxr) in pre.chunks_mut(g4).zip(self.value(gx).data().chunks(g4)) {
            for ((p, &bb), &g) in row.iter_mut().zip(self.value(b).data()).zip(gxr) {
                *p = bb + g;
            }
        }
        let sv = self.value(state).data();
        gemm(
            bsz,
            hd,
            g4,
            T::one(),
            MatRef::new(sv, h2, 1),
            self.view(w, false),
            T::one(),
            &mut pre,
            0,
            g4,
            1,
        );
        let mut cache = vec![T::zero(); 5 * bsz * hd];
        let mut out = vec![T::zero(); bsz * h2];
        let bh = bsz * hd;
        for bi in 0..bsz {
            for j in 0..hd {
                let p = bi * g4;
                let k = bi * hd + j;
                let i = sigmoid(pre[p + j]);
                let f = sigmoid(pre[p + hd + j]);
                let g = pre[p + 2 * hd + j].tanh();
                let o = sigmoid(pre[p + 3 * hd + j]);
                let c = f * sv[bi * h2 + hd + j] + i * g;
                let th = c.tanh();
                out[bi * h2 + j] = o * th;
                out[bi * h2 + hd + j] = c;
                cache[k] = i;
                cache[bh + k] = f;
                cache[2 * bh + k] = g;
                cache[3 * bh + k] = o;
                cache[4 * bh + k] = th;
            }
        }
        self.push(
            Op::LstmStep { gx, state, w, b },
            Tensor::matrix(bsz, h2, out)?,
            cache,
        )
    }

    // ----- elementwise -----

    pub fn unary(&mut self, x: NodeId, f: UnaryFn) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| match f {
                UnaryFn::Sigmoid => sigmoid(a),
                UnaryFn::Tanh => a.tanh(),
                UnaryFn::Relu => a.max(T::zero()),
                UnaryFn::Exp => a.exp(),
                UnaryFn::Log => a.ln(),
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Unary { x, f }, t, Vec::new())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryFn::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryFn::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryFn::Relu)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryFn::Exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryFn::Log)
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, f: BinaryFn) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match f {
                BinaryFn::Add => x + y,
                BinaryFn::Sub => x - y,
                BinaryFn::Mul => x * y,
                BinaryFn::Div => x / y,
            })
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Binary { a, b, f }, t, Vec::new())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, BinaryFn::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, BinaryFn::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, BinaryFn::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, BinaryFn::Div)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a * c).collect(),
        )?;
        self.push(Op::Scale { x, c }, t, Vec::new())
    }

    pub fn shift(&mut self, x: NodeId, c: T) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a + c).collect(),
        )?;
        self.push(Op::Shift { x }, t, Vec::new())
    }

    // ----- broadcasting -----

    /// `a[r, c] + b[c]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (_, c) = self.dims(a);
        if self.value(b).len() != c {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::AddRow { a, b }, Tensor::new(shape, out)?, Vec::new())
    }

    /// `a[r, c] + b[r]`.
    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(a);
        if self.value(b).len() != r {
            return Err(shape_err(
                "add_col",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            for o in row {
                *o = *o + bv[i];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::AddCol { a, b }, Tensor::new(shape, out)?, Vec::new())
    }

    /// `a[r, c] / b[r]`.
    pub fn div_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(a);
        if self.value(b).len() != r {
            return Err(shape_err(
                "div_col",
                format!("{:?} / {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            for o in row {
                *o = *o / bv[i];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::DivCol { a, b }, Tensor::new(shape, out)?, Vec::new())
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s), Vec::new())
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over columns: `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let out: Vec<T> = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        self.push(Op::SumRows { x }, Tensor::vector(out), Vec::new())
    }

    /// Sum over rows: `[r, c] -> [c]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (_, c) = self.dims(x);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        self.push(Op::SumCols { x }, Tensor::vector(out), Vec::new())
    }

    /// Inclusive prefix sum along the first (time) axis.
    pub fn cumsum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for i in 1..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + out[(i - 1) * c + j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Op::CumSum { x }, Tensor::new(shape, out)?, Vec::new())
    }

    /// Pairwise cosine similarity of rows: `[r1, d] × [r2, d] -> [r1, r2]`.
    /// Pairs involving a zero-norm row have similarity 0.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (r1, d1) = self.dims(a);
        let (r2, d2) = self.dims(b);
        if d1 != d2 {
            return Err(shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let norms = |v: &[T], rows: usize| -> Vec<T> {
            (0..rows)
                .map(|i| {
                    v[i * d1..(i + 1) * d1]
                        .iter()
                        .map(|&x| x * x)
                        .sum::<T>()
                        .sqrt()
                })
                .collect()
        };
        let na = norms(self.value(a).data(), r1);
        let nb = norms(self.value(b).data(), r2);
        let mut dots = vec![T::zero(); r1 * r2];
        gemm(
            r1,
            d1,
            r2,
            T::one(),
            self.view(a, false),
            self.view(b, true),
            T::zero(),
            &mut dots,
            0,
            r2,
            1,
        );
        for i in 0..r1 {
            for j in 0..r2 {
                let den = na[i] * nb[j];
                let k = i * r2 + j;
                dots[k] = if den > T::zero() {
                    dots[k] / den
                } else {
                    T::zero()
                };
            }
        }
        let mut cache = na;
        cache.extend(nb);
        self.push(Op::CosSim { a, b }, Tensor::matrix(r1, r2, dots)?, cache)
    }

    // ----- structure -----

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        if start >= end || end > r || self.shape(x).len() > 2 {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let shape = if self.shape(x).len() == 2 {
            vec![end - start, c]
        } else {
            vec![end - start]
        };
        self.push(
            Op::SliceRows { x, start },
            Tensor::new(shape, data)?,
            Vec::new(),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        if start >= end || end > c || self.shape(x).len() != 2 {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{end} of {:?}", self.shape(x)),
            ));
        }
        let v = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        self.push(
            Op::SliceCols { x, start },
            Tensor::matrix(r, w, data)?,
            Vec::new(),
        )
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, cx) = self.dims(x);
            if cx != c || self.shape(x).len() != 2 {
                return Err(shape_err(
                    "concat_rows",
                    format!("{:?} with {c} columns", self.shape(x)),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        self.push(
            Op::ConcatRows { xs: xs.to_vec() },
            Tensor::matrix(rows, c, data)?,
            Vec::new(),
        )
    }

    /// Picks flat elements of `x` by index into a tensor of `shape`.
    pub fn gather(
        &mut self,
        x: NodeId,
        idx: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<NodeId, DiffError> {
        let v = self.value(x).data();
        if let Some(bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err(
                "gather",
                format!("index {bad} out of {}", v.len()),
            ));
        }
        let data = idx.iter().map(|&i| v[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(Op::Gather { x, idx }, t, Vec::new())
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape { x }, t, Vec::new())
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose { x }, Tensor::matrix(c, r, out)?, Vec::new())
    }

    // ----- composites -----

    /// Row-wise `log Σ exp`, `[r, c] -> [r]`, shifted by the row maximum.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let maxes: Vec<T> = (0..r)
            .map(|i| {
                v[i * c..(i + 1) * c]
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max)
            })
            .collect();
        let neg = self.constant(Tensor::vector(maxes.iter().map(|&m| -m).collect()))?;
        let pos = self.constant(Tensor::vector(maxes))?;
        let shifted = self.add_col(x, neg)?;
        let e = self.exp(shifted)?;
        let s = self.sum_rows(e)?;
        let l = self.log(s)?;
        self.add(l, pos)
    }

    // ----- reverse pass -----

    /// Reverse-mode gradient of the scalar `out` with respect to every
    /// named differentiable leaf.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<T>, DiffError> {
        let ov = &self.nodes[out.0].value;
        if ov.len() != 1 {
            return Err(DiffError::NotScalar {
                node: out.0,
                shape: ov.shape().to_vec(),
            });
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        if nodes[out.0].requires_grad {
            grads[out.0] = Some(vec![T::one()]);
        }
        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut by_name = BTreeMap::new();
        for (name, &(id, diff)) in &self.names {
            if !diff {
                continue;
            }
            let shape = nodes[id.0].value.shape().to_vec();
            let t = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            by_name.insert(name.clone(), t);
        }
        Ok(Gradients { by_name })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = node.value.dims2();
                let sa = nodes[a.0].value.shape();
                let k = if *ta { sa[0] } else { sa[1] };
                let ca = sa[1];
                let cb = nodes[b.0].value.shape()[1];
                let dc = MatRef::new(g, n, 1);
                if let Some(ga) = acc(grads, nodes, *a) {
                    let (rs, cs) = if *ta { (1, ca) } else { (ca, 1) };
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dc,
                        self.view(*b, *tb).t(),
                        T::one(),
                        ga,
                        0,
                        rs,
                        cs,
                    );
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    let (rs, cs) = if *tb { (1, cb) } else { (cb, 1) };
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.view(*a, *ta).t(),
                        dc,
                        T::one(),
                        gb,
                        0,
                        rs,
                        cs,
                    );
                }
            }
            Op::Conv1d { x, w, bias, spec } => {
                let (len, cin) = nodes[x.0].value.dims2();
                let (tout, cout) = node.value.dims2();
                let padded = &node.cache;
                let kc = spec.kernel * cin;
                let dy = MatRef::new(g, cout, 1);
                if let Some(gw) = acc(grads, nodes, *w) {
                    let view = MatRef::new(padded.as_slice(), spec.stride * cin, 1);
                    gemm(
                        kc,
                        tout,
                        cout,
                        T::one(),
                        view.t(),
                        dy,
                        T::one(),
                        gw,
                        0,
                        cout,
                        1,
                    );
                }
                if let Some(bias) = bias {
                    if let Some(gb) = acc(grads, nodes, *bias) {
                        for row in g.chunks(cout) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let lp = padded.len() / cin.max(1);
                    let mut dxp = vec![T::zero(); lp * cin];
                    let wv = nodes[w.0].value.data();
                    for j in 0..spec.kernel {
                        let wj = MatRef {
                            data: wv,
                            offset: j * cin * cout,
                            rs: cout,
                            cs: 1,
                        }
                        .t();
                        gemm(
                            tout,
                            cout,
                            cin,
                            T::one(),
                            dy,
                            wj,
                            T::one(),
                            &mut dxp,
                            j * cin,
                            spec.stride * cin,
                            1,
                        );
                    }
                    let gx = acc(grads, nodes, *x).expect("requires grad");
                    for p in 0..lp {
                        let src = p as isize - spec.pad_left as isize;
                        let target = if (0..len as isize).contains(&src) {
                            Some(src as usize)
                        } else if spec.pad_mode == PadMode::Replicate {
                            Some(src.clamp(0, len as isize - 1) as usize)
                        } else {
                            None
                        };
                        if let Some(t) = target {
                            for c in 0..cin {
                                gx[t * cin + c] = gx[t * cin + c] + dxp[p * cin + c];
                            }
                        }
                    }
                }
            }
            Op::GruStep { gx, h, w, b } => {
                let (bsz, hd) = node.value.dims2();
                let g3 = 3 * hd;
                let bh = bsz * hd;
                let (gh, rest) = node.cache.split_at(bsz * g3);
                let (r, rest) = rest.split_at(bh);
                let (u, n) = rest.split_at(bh);
                let hv = nodes[h.0].value.data();
                let mut dgx = vec![T::zero(); bsz * g3];
                let mut dgh = vec![T::zero(); bsz * g3];
                let mut dh = vec![T::zero(); bh];
                for bi in 0..bsz {
                    for j in 0..hd {
                        let k = bi * hd + j;
                        let o = bi * g3;
                        let dn = g[k] * (T::one() - u[k]);
                        let du = g[k] * (hv[k] - n[k]);
                        dh[k] = g[k] * u[k];
                        let dpre_n = dn * (T::one() - n[k] * n[k]);
                        let dr = dpre_n * gh[o + 2 * hd + j];
                        let dpre_r = dr * r[k] * (T::one() - r[k]);
                        let dpre_u = du * u[k] * (T::one() - u[k]);
                        dgx[o + j] = dpre_r;
                        dgx[o + hd + j] = dpre_u;
                        dgx[o + 2 * hd + j] = dpre_n;
                        dgh[o + j] = dpre_r;
                        dgh[o + hd + j] = dpre_u;
                        dgh[o + 2 * hd + j] = dpre_n * r[k];
                    }
                }
                if let Some(ggx) = acc(grads, nodes, *gx) {
                    add_into(ggx, &dgx);
                }
                let dghm = MatRef::new(dgh.as_slice(), g3, 1);
                if let Some(gw) = acc(grads, nodes, *w) {
                    gemm(
                        hd,
                        bsz,
                        g3,
                        T::one(),
                        self.view(*h, true),
                        dghm,
                        T::one(),
                        gw,
                        0,
                        g3,
                        1,
                    );
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for row in dgh.chunks(g3) {
                        add_into(gb, row);
                    }
                }
                if nodes[h.0].requires_grad {
                    gemm(
                        bsz,
                        g3,
                        hd,
                        T::one(),
                        dghm,
                        self.view(*w, true),
                        T::one(),
                        &mut dh,
                        0,
                        hd,
                        1,
                    );
                    add_into(acc(grads, nodes, *h).expect("requires grad"), &dh);
                }
            }
            Op::LstmStep { gx, state, w, b } => {
                let (bsz, h2) = node.value.dims2();
                let hd = h2 / 2;
                let g4 = 4 * hd;
                let bh = bsz * hd;
                let cc = &node.cache;
                let sv = nodes[state.0].value.data();
                let mut dpre = vec![T::zero(); bsz * g4];
                let mut dstate = vec![T::zero(); bsz * h2];
                for bi in 0..bsz {
                    for j in 0..hd {
                        let k = bi * hd + j;
                        let (i, f, gg, o, th) = (
                            cc[k],
                            cc[bh + k],
                            cc[2 * bh + k],
                            cc[3 * bh + k],
                            cc[4 * bh + k],
                        );
                        let dh = g[bi * h2 + j];
                        let dc = g[bi * h2 + hd + j] + dh * o * (T::one() - th * th);
                        let c_prev = sv[bi * h2 + hd + j];
                        let p = bi * g4;
                        dpre[p + j] = dc * gg * i * (T::one() - i);
                        dpre[p + hd + j] = dc * c_prev * f * (T::one() - f);
                        dpre[p + 2 * hd + j] = dc * i * (T::one() - gg * gg);
                        dpre[p + 3 * hd + j] = dh * th * o * (T::one() - o);
                        dstate[bi * h2 + hd + j] = dc * f;
                    }
                }
                if let Some(ggx) = acc(grads, nodes, *gx) {
                    add_into(ggx, &dpre);
                }
                let dp = MatRef::new(dpre.as_slice(), g4, 1);
                if let Some(gw) = acc(grads, nodes, *w) {
                    let hview = MatRef::new(sv, h2, 1).t();
                    gemm(hd, bsz, g4, T::one(), hview, dp, T::one(), gw, 0, g4, 1);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for row in dpre.chunks(g4) {
                        add_into(gb, row);
                    }
                }
                if nodes[state.0].requires_grad {
                    gemm(
                        bsz,
                        g4,
                        hd,
                        T::one(),
                        dp,
                        self.view(*w, true),
                        T::one(),
                        &mut dstate,
                        0,
                        h2,
                        1,
                    );
                    add_into(acc(grads, nodes, *state).expect("requires grad"), &dstate);
                }
            }
            Op::Unary { x, f } => {
                let xv = nodes[x.0].value.data();
                let y = node.value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for k in 0..gx.len() {
                        let d = match f {
                            UnaryFn::Sigmoid => y[k] * (T::one() - y[k]),
                            UnaryFn::Tanh => T::one() - y[k] * y[k],
                            UnaryFn::Relu => {
                                if xv[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryFn::Exp => y[k],
                            UnaryFn::Log => T::one() / xv[k],
                        };
                        gx[k] = gx[k] + g[k] * d;
                    }
                }
            }
            Op::Binary { a, b, f } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for k in 0..ga.len() {
                        let d = match f {
                            BinaryFn::Add | BinaryFn::Sub => g[k],
                            BinaryFn::Mul => g[k] * bv[k],
                            BinaryFn::Div => g[k] / bv[k],
                        };
                        ga[k] = ga[k] + d;
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for k in 0..gb.len() {
                        let d = match f {
                            BinaryFn::Add => g[k],
                            BinaryFn::Sub => -g[k],
                            BinaryFn::Mul => g[k] * av[k],
                            BinaryFn::Div => -g[k] * av[k] / (bv[k] * bv[k]),
                        };
                        gb[k] = gb[k] + d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *c;
                    }
                }
            }
            Op::Shift { x, .. } | Op::Reshape { x } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    add_into(gx, g);
                }
            }
            Op::AddRow { a, b } => {
                let (_, c) = node.value.dims2();
                if let Some(ga) = acc(grads, nodes, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddCol { a, b } => {
                let (_, c) = node.value.dims2();
                if let Some(ga) = acc(grads, nodes, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for (i, row) in g.chunks(c.max(1)).enumerate() {
                        gb[i] = gb[i] + row.iter().copied().sum();
                    }
                }
            }
            Op::DivCol { a, b } => {
                let (_, c) = node.value.dims2();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o = *o + g[k] / bv[k / c];
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for (i, o) in gb.iter_mut().enumerate() {
                        let s: T = (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum();
                        *o = *o - s / (bv[i] * bv[i]);
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::SumRows { x } => {
                let (_, c) = nodes[x.0].value.dims2();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (k, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[k / c];
                    }
                }
            }
            Op::SumCols { x } => {
                let (_, c) = nodes[x.0].value.dims2();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (k, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[k % c];
                    }
                }
            }
            Op::CumSum { x } => {
                let (r, c) = nodes[x.0].value.dims2();
                if let Some(gx) = acc(grads, nodes, *x) {
                    let mut run = vec![T::zero(); c];
                    for i in (0..r).rev() {
                        for j in 0..c {
                            run[j] = run[j] + g[i * c + j];
                            gx[i * c + j] = gx[i * c + j] + run[j];
                        }
                    }
                }
            }
            Op::CosSim { a, b } => {
                let (r1, d) = nodes[a.0].value.dims2();
                let (r2, _) = nodes[b.0].value.dims2();
                let (na, nb) = node.cache.split_at(r1);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let y = node.value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for i in 0..r1 {
                        if na[i] == T::zero() {
                            continue;
                        }
                        for j in 0..r2 {
                            let k = i * r2 + j;
                            if nb[j] == T::zero() || g[k] == T::zero() {
                                continue;
                            }
                            let s1 = g[k] / (na[i] * nb[j]);
                            let s2 = g[k] * y[k] / (na[i] * na[i]);
                            for t in 0..d {
                                ga[i * d + t] =
                                    ga[i * d + t] + s1 * bv[j * d + t] - s2 * av[i * d + t];
                            }
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for j in 0..r2 {
                        if nb[j] == T::zero() {
                            continue;
                        }
                        for i in 0..r1 {
                            let k = i * r2 + j;
                            if na[i] == T::zero() || g[k] == T::zero() {
                                continue;
                            }
                            let s1 = g[k] / (na[i] * nb[j]);
                            let s2 = g[k] * y[k] / (nb[j] * nb[j]);
                            for t in 0..d {
                                gb[j * d + t] =
                                    gb[j * d + t] + s1 * av[i * d + t] - s2 * bv[j * d + t];
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = nodes[x.0].value.dims2();
                if let Some(gx) = acc(grads, nodes, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = nodes[x.0].value.dims2();
                let w = node.value.dims2().1;
                if let Some(gx) = acc(grads, nodes, *x) {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for x in xs {
                    let n = nodes[x.0].value.len();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        add_into(gx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] = gx[i] + g[k];
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = nodes[x.0].value.dims2();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn pad_rows<T: Real>(x: &[T], len: usize, cin: usize, spec: Conv1dSpec) -> Vec<T> {
    let lp = len + spec.pad_left + spec.pad_right;
    let mut out = vec![T::zero(); lp * cin];
    out[spec.pad_left * cin..(spec.pad_left + len) * cin].copy_from_slice(x);
    if spec.pad_mode == PadMode::Replicate && len > 0 {
        for p in 0..spec.pad_left {
            out[p * cin..(p + 1) * cin].copy_from_slice(&x[..cin]);
        }
        for p in spec.pad_left + len..lp {
            out[p * cin..(p + 1) * cin].copy_from_slice(&x[(len - 1) * cin..len * cin]);
        }
    }
    out
}
