//! Primitive differentiable operations.
//!
//! Forward results are computed eagerly with plain loops; each operation
//! records a backward rule implementing [`TapeOp`]. Binary operations are
//! shape-strict — broadcasting is explicit through [`Tape::broadcast_to`].

use super::tape::{GradSink, Tape, TapeOp, Values, Var};
use super::{validate_shape, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    kind: BinKind,
    a: Var,
    b: Var,
}

impl TapeOp for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        match self.kind {
            BinKind::Add => {
                if let Some(da) = sink.entry(self.a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = sink.entry(self.b) {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            BinKind::Sub => {
                if let Some(da) = sink.entry(self.a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = sink.entry(self.b) {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            BinKind::Mul => {
                let (av, bv) = (vals.val(self.a).data(), vals.val(self.b).data());
                if let Some(da) = sink.entry(self.a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = sink.entry(self.b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            BinKind::Div => {
                let (av, bv) = (vals.val(self.a).data(), vals.val(self.b).data());
                if let Some(da) = sink.entry(self.a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / bv[i];
                    }
                }
                if let Some(db) = sink.entry(self.b) {
                    for i in 0..g.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    Exp,
}

struct UnaryOp {
    kind: UnKind,
    x: Var,
    /// The operation's own output node; valid because nodes are append-only.
    y: Var,
}

impl TapeOp for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Neg => "neg",
            UnKind::Relu => "relu",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Tanh => "tanh",
            UnKind::Sqrt => "sqrt",
            UnKind::Square => "square",
            UnKind::Exp => "exp",
        }
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let Some(dx) = sink.entry(self.x) else {
            return;
        };
        match self.kind {
            UnKind::Neg => {
                for i in 0..g.len() {
                    dx[i] -= g[i];
                }
            }
            UnKind::Relu => {
                let xv = vals.val(self.x).data();
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            UnKind::Sigmoid => {
                let yv = vals.val(self.y).data();
                for i in 0..g.len() {
                    dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            UnKind::Tanh => {
                let yv = vals.val(self.y).data();
                for i in 0..g.len() {
                    dx[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            UnKind::Sqrt => {
                let yv = vals.val(self.y).data();
                for i in 0..g.len() {
                    dx[i] += g[i] / (2.0 * yv[i]);
                }
            }
            UnKind::Square => {
                let xv = vals.val(self.x).data();
                for i in 0..g.len() {
                    dx[i] += g[i] * 2.0 * xv[i];
                }
            }
            UnKind::Exp => {
                let yv = vals.val(self.y).data();
                for i in 0..g.len() {
                    dx[i] += g[i] * yv[i];
                }
            }
        }
    }
}

struct ScaleOp {
    x: Var,
    c: f64,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for i in 0..g.len() {
                dx[i] += g[i] * self.c;
            }
        }
    }
}

struct AddScalarOp {
    x: Var,
}

impl TapeOp for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for i in 0..g.len() {
                dx[i] += g[i];
            }
        }
    }
}

struct MatmulOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl TapeOp for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = vals.val(self.a).data();
        let bv = vals.val(self.b).data();
        // da = g . b^T
        if let Some(da) = sink.entry(self.a) {
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                for kk in 0..k {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    darow[kk] += acc;
                }
            }
        }
        // db = a^T . g
        if let Some(db) = sink.entry(self.b) {
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let grow = &g[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = arow[kk];
                    let dbrow = &mut db[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        dbrow[j] += aik * grow[j];
                    }
                }
            }
        }
    }
}

struct ReshapeOp {
    x: Var,
}

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for i in 0..g.len() {
                dx[i] += g[i];
            }
        }
    }
}

struct PermuteOp {
    x: Var,
    /// out multi-index position d reads input axis `axes[d]`.
    axes: Vec<usize>,
    out_shape: Vec<usize>,
}

fn permute_map(
    out_shape: &[usize],
    axes: &[usize],
    in_strides: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut multi = vec![0usize; rank];
    for of in 0..numel {
        let mut in_flat = 0;
        for d in 0..rank {
            in_flat += multi[d] * in_strides[axes[d]];
        }
        visit(of, in_flat);
        for d in (0..rank).rev() {
            multi[d] += 1;
            if multi[d] < out_shape[d] {
                break;
            }
            multi[d] = 0;
        }
    }
}

impl TapeOp for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let in_strides = vals.val(self.x).strides();
        if let Some(dx) = sink.entry(self.x) {
            permute_map(&self.out_shape, &self.axes, &in_strides, |of, inf| {
                dx[inf] += g[of];
            });
        }
    }
}

struct ConcatOp {
    parts: Vec<Var>,

    /// (outer, axis_len, inner) for each part.
    blocks: Vec<(usize, usize)>,
    outer: usize,
    inner: usize,
    total_axis: usize,
}

impl TapeOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let inner = self.inner;
        let out_row = self.total_axis * inner;
        let mut offset = 0usize;
        for (p, &(axis_len, _)) in self.parts.iter().zip(&self.blocks) {
            let part_row = axis_len * inner;
            if let Some(dp) = sink.entry(*p) {
                for o in 0..self.outer {
                    let src = &g[o * out_row + offset..o * out_row + offset + part_row];
                    let dst = &mut dp[o * part_row..(o + 1) * part_row];
                    for i in 0..part_row {
                        dst[i] += src[i];
                    }
                }
            }
            offset += part_row;
        }
    }
}

struct SliceOp {
    x: Var,
    outer: usize,
    inner: usize,
    axis_len: usize,
    start: usize,
    end: usize,
}

impl TapeOp for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let Some(dx) = sink.entry(self.x) else {
            return;
        };
        let inner = self.inner;
        let width = self.end - self.start;
        for o in 0..self.outer {
            let src = &g[o * width * inner..(o + 1) * width * inner];
            let dst_base = (o * self.axis_len + self.start) * inner;
            let dst = &mut dx[dst_base..dst_base + width * inner];
            for i in 0..width * inner {
                dst[i] += src[i];
            }
        }
    }
}

struct SumAllOp {
    x: Var,
}

impl TapeOp for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            let gv = g[0];
            for d in dx.iter_mut() {
                *d += gv;
            }
        }
    }
}

struct SumAxisOp {
    x: Var,
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl TapeOp for SumAxisOp {
    fn name(&self) -> &'static str {
        "sum_axis"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let Some(dx) = sink.entry(self.x) else {
            return;
        };
        let inner = self.inner;
        for o in 0..self.outer {
            let grow = &g[o * inner..(o + 1) * inner];
            for j in 0..self.axis_len {
                let dst = &mut dx[(o * self.axis_len + j) * inner..][..inner];
                for i in 0..inner {
                    dst[i] += grow[i];
                }
            }
        }
    }
}

struct ReduceMaxOp {
    x: Var,
    /// Flat input index of the (first) maximum for every output element.
    argmax: Vec<usize>,
}

impl TapeOp for ReduceMaxOp {
    fn name(&self) -> &'static str {
        "reduce_max"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for (out_i, &in_i) in self.argmax.iter().enumerate() {
                dx[in_i] += g[out_i];
            }
        }
    }
}

struct BroadcastOp {
    x: Var,
    /// Stride into the source for every target axis; 0 on broadcast axes.
    eff_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

fn broadcast_map(
    out_shape: &[usize],
    eff_strides: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut multi = vec![0usize; rank];
    let mut src = 0usize;
    for of in 0..numel {
        visit(of, src);
        for d in (0..rank).rev() {
            multi[d] += 1;
            src += eff_strides[d];
            if multi[d] < out_shape[d] {
                break;
            }
            src -= eff_strides[d] * out_shape[d];
            multi[d] = 0;
        }
    }
}

impl TapeOp for BroadcastOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            broadcast_map(&self.out_shape, &self.eff_strides, |of, src| {
                dx[src] += g[of];
            });
        }
    }
}

impl Tape {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: match kind {
                    BinKind::Add => "add",
                    BinKind::Sub => "sub",
                    BinKind::Mul => "mul",
                    BinKind::Div => "div",
                },
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ta.numel()];
        {
            let (av, bv) = (ta.data(), tb.data());
            match kind {
                BinKind::Add => {
                    for i in 0..out.len() {
                        out[i] = av[i] + bv[i];
                    }
                }
                BinKind::Sub => {
                    for i in 0..out.len() {
                        out[i] = av[i] - bv[i];
                    }
                }
                BinKind::Mul => {
                    for i in 0..out.len() {
                        out[i] = av[i] * bv[i];
                    }
                }
                BinKind::Div => {
                    for i in 0..out.len() {
                        out[i] = av[i] / bv[i];
                    }
                }
            }
        }
        let value = Tensor::from_vec(ta.shape(), out)?;
        let req = self.any_requires(&[a, b]);
        self.push_op("binary", value, Box::new(BinaryOp { kind, a, b }), req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = match kind {
            UnKind::Neg => tx.data().iter().map(|v| -v).collect(),
            UnKind::Relu => tx.data().iter().map(|v| v.max(0.0)).collect(),
            UnKind::Sigmoid => tx.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            UnKind::Tanh => tx.data().iter().map(|v| v.tanh()).collect(),
            UnKind::Sqrt => tx.data().iter().map(|v| v.sqrt()).collect(),
            UnKind::Square => tx.data().iter().map(|v| v * v).collect(),
            UnKind::Exp => tx.data().iter().map(|v| v.exp()).collect(),
        };
        let value = Tensor::from_vec(tx.shape(), out)?;
        let req = self.any_requires(&[x]);
        let y = Var(self.len());
        self.push_op("unary", value, Box::new(UnaryOp { kind, x, y }), req)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Neg, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Square, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Exp, x)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::from_vec(tx.shape(), tx.data().iter().map(|v| v * c).collect())?;
        let req = self.any_requires(&[x]);
        self.push_op("scale", value, Box::new(ScaleOp { x, c }), req)
    }

    /// Add the constant `c` to every element.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::from_vec(tx.shape(), tx.data().iter().map(|v| v + c).collect())?;
        let req = self.any_requires(&[x]);
        self.push_op("add_scalar", value, Box::new(AddScalarOp { x }), req)
    }

    /// 2-D matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        {
            let (av, bv) = (ta.data(), tb.data());
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let req = self.any_requires(&[a, b]);
        self.push_op("matmul", value, Box::new(MatmulOp { a, b, m, k, n }), req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape("reshape", shape)?;
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: tx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape, tx.data().to_vec())?;
        let req = self.any_requires(&[x]);
        self.push_op("reshape", value, Box::new(ReshapeOp { x }), req)
    }

    /// Reorder axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("axes {:?} is not a permutation of 0..{rank}", axes),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| tx.shape()[a]).collect();
        let in_strides = tx.strides();
        let mut out = vec![0.0; tx.numel()];
        {
            let xv = tx.data();
            permute_map(&out_shape, axes, &in_strides, |of, inf| out[of] = xv[inf]);
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let req = self.any_requires(&[x]);
        self.push_op(
            "permute",
            value,
            Box::new(PermuteOp {
                x,
                axes: axes.to_vec(),
                out_shape,
            }),
            req,
        )
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no tensors given".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total_axis = 0usize;
        let mut blocks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let mut expect = first.clone();
            expect[axis] = s[axis];
            if s != expect.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
            blocks.push((s[axis], 0usize));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![0.0; outer * total_axis * inner];
        let out_row = total_axis * inner;
        let mut offset = 0usize;
        for (&p, &(axis_len, _)) in parts.iter().zip(&blocks) {
            let pv = self.value(p).data();
            let part_row = axis_len * inner;
            for o in 0..outer {
                out[o * out_row + offset..o * out_row + offset + part_row]
                    .copy_from_slice(&pv[o * part_row..(o + 1) * part_row]);
            }
            offset += part_row;
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let req = self.any_requires(parts);
        self.push_op(
            "concat",
            value,
            Box::new(ConcatOp {
                parts: parts.to_vec(),
                blocks,
                outer,
                inner,
                total_axis,
            }),
            req,
        )
    }

    /// Take the half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!(
                    "range {start}..{end} on axis {axis} of shape {:?}",
                    shape
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let width = end - start;
        let mut out = vec![0.0; outer * width * inner];
        {
            let xv = tx.data();
            for o in 0..outer {
                let src_base = (o * axis_len + start) * inner;
                out[o * width * inner..(o + 1) * width * inner]
                    .copy_from_slice(&xv[src_base..src_base + width * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::from_vec(&out_shape, out)?;
        let req = self.any_requires(&[x]);
        self.push_op(
            "slice",
            value,
            Box::new(SliceOp {
                x,
                outer,
                inner,
                axis_len,
                start,
                end,
            }),
            req,
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let req = self.any_requires(&[x]);
        self.push_op(
            "sum_all",
            Tensor::scalar(total),
            Box::new(SumAllOp { x }),
            req,
        )
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                reason: format!("axis {axis} of shape {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        {
            let xv = tx.data();
            for o in 0..outer {
                for j in 0..axis_len {
                    let row = &xv[(o * axis_len + j) * inner..][..inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for i in 0..inner {
                        dst[i] += row[i];
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_vec(&out_shape, out)?;
        let req = self.any_requires(&[x]);
        self.push_op(
            "sum_axis",
            value,
            Box::new(SumAxisOp {
                x,
                outer,
                axis_len,
                inner,
            }),
            req,
        )
    }

    /// Maximum over one axis, removing it. Gradient flows to the first
    /// maximum position only (ties break toward the lowest flat index).
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "reduce_max",
                reason: format!("axis {axis} of shape {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        {
            let xv = tx.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for j in 0..axis_len {
                        let idx = (o * axis_len + j) * inner + i;
                        if xv[idx] > best {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = best_idx;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_vec(&out_shape, out)?;
        let req = self.any_requires(&[x]);
        self.push_op(
            "reduce_max",
            value,
            Box::new(ReduceMaxOp { x, argmax }),
            req,
        )
    }

    /// Expand to `target` following right-aligned broadcasting rules: each
    /// source dimension must equal the target dimension or be 1.
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        validate_shape("broadcast_to", target)?;
        let tx = self.value(x);
        let src = tx.shape();
        if src.len() > target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: target.to_vec(),
            });
        }
        let pad = target.len() - src.len();
        let src_strides = tx.strides();
        let mut eff = vec![0usize; target.len()];
        for d in 0..target.len() {
            if d < pad {
                continue;
            }
            let sd = src[d - pad];
            if sd == target[d] {
                eff[d] = src_strides[d - pad];
            } else if sd != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src.to_vec(),
                    rhs: target.to_vec(),
                });
            }
        }
        let numel: usize = target.iter().product();
        let mut out = vec![0.0; numel];
        {
            let xv = tx.data();
            broadcast_map(target, &eff, |of, s| out[of] = xv[s]);
        }
        let value = Tensor::from_vec(target, out)?;
        let req = self.any_requires(&[x]);
        self.push_op(
            "broadcast_to",
            value,
            Box::new(BroadcastOp {
                x,
                eff_strides: eff,
                out_shape: target.to_vec(),
            }),
            req,
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_1x1() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(&[1, 1], vec![-4.0]).unwrap(), false);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[-12.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m = rng.random_range(1..6);
            let k = rng.random_range(1..6);
            let n = rng.random_range(1..6);
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let mut expect = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                    }
                    expect[i * n + j] = acc;
                }
            }
            let mut tape = Tape::new();
            let av = tape.leaf(a, false);
            let bv = tape.leaf(b, false);
            let y = tape.matmul(av, bv).unwrap();
            for (got, want) in tape.value(y).data().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 5]), false);
        let y = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[2, 8]);
    }

    #[test]
    fn concat_rejects_mismatched_off_axis_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 5]), false);
        assert!(tape.concat(1, &[a, b]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s1 = tape.sum_all(y).unwrap();
        let s2 = tape.sum_all(y).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reduce_max_ties_break_to_lowest_flat_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![5.0, 5.0, 1.0, 5.0]).unwrap(), true);
        let m = tape.reduce_max(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let loss = tape.sum_all(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_then_reduce_round_trips_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = tape.broadcast_to(x, &[2, 3, 4]).unwrap();
        assert_eq!(tape.shape(b), &[2, 3, 4]);
        // each source element appears 8 times
        let loss = tape.sum_all(b).unwrap();
        assert!((tape.value(loss).item() - 48.0).abs() < 1e-12);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn slice_and_permute_round_trip_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let p = tape.permute(v, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[i2][i0][i1] == in[i0][i1][i2]
        for i0 in 0..2 {
            for i1 in 0..3 {
                for i2 in 0..4 {
                    let want = x.data()[(i0 * 3 + i1) * 4 + i2];
                    let got = tape.value(p).data()[(i2 * 2 + i0) * 3 + i1];
                    assert_eq!(want, got);
                }
            }
        }
        let s = tape.slice(v, 1, 1, 3).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 4]);
        assert_eq!(tape.value(s).data()[0], x.data()[4]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 3]), false);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_on_empty_tape_rejected() {
        let mut tape = Tape::new();
        let err = tape.backward(super::super::Var(0)).unwrap_err();
        assert!(err.to_string().contains("empty tape"));
    }
}
