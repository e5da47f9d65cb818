//! Differentiable neural-network operations recorded on the tape:
//! strided 1-D convolution over raw samples, 2-D convolution, temporal
//! pooling (fixed-window and adaptive, in max/l2/average flavors), 2-D max
//! pooling, inverted dropout, and fused softmax cross-entropy.

use crate::tensor::{
    GradSink, Result, Tape, TapeOp, Tensor, TensorError, Values, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Temporal pooling flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    /// Root of the mean of squares over the window.
    L2,
    Average,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::L2 => "l2",
            PoolMode::Average => "average",
        })
    }
}

impl FromStr for PoolMode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "max" => Ok(PoolMode::Max),
            "l2" => Ok(PoolMode::L2),
            "average" => Ok(PoolMode::Average),
            _ => Err(()),
        }
    }
}

/// Output length of a valid (no padding) strided convolution or pooling.
pub fn conv_output_len(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

struct Conv1dOp {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    batch: usize,
    t_in: usize,
    n_filters: usize,
    width: usize,
    t_out: usize,
}

impl TapeOp for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let (batch, t_in, n, k, t_out, stride) = (
            self.batch,
            self.t_in,
            self.n_filters,
            self.width,
            self.t_out,
            self.stride,
        );
        let xv = vals.val(self.x).data();
        let wv = vals.val(self.w).data();
        if let Some(dw) = sink.entry(self.w) {
            for bi in 0..batch {
                let xrow = &xv[bi * t_in..(bi + 1) * t_in];
                for i in 0..n {
                    let grow = &g[(bi * n + i) * t_out..][..t_out];
                    let dwrow = &mut dw[i * k..(i + 1) * k];
                    for (t, &gv) in grow.iter().enumerate() {
                        let xs = &xrow[t * stride..t * stride + k];
                        for kk in 0..k {
                            dwrow[kk] += gv * xs[kk];
                        }
                    }
                }
            }
        }
        if let Some(db) = sink.entry(self.b) {
            for bi in 0..batch {
                for i in 0..n {
                    let grow = &g[(bi * n + i) * t_out..][..t_out];
                    db[i] += grow.iter().sum::<f64>();
                }
            }
        }
        if let Some(dx) = sink.entry(self.x) {
            for bi in 0..batch {
                let dxrow = &mut dx[bi * t_in..(bi + 1) * t_in];
                for i in 0..n {
                    let grow = &g[(bi * n + i) * t_out..][..t_out];
                    let wrow = &wv[i * k..(i + 1) * k];
                    for (t, &gv) in grow.iter().enumerate() {
                        let dxs = &mut dxrow[t * stride..t * stride + k];
                        for kk in 0..k {
                            dxs[kk] += gv * wrow[kk];
                        }
                    }
                }
            }
        }
    }
}

/// Strided valid 1-D convolution of raw samples.
///
/// `x` is `[batch, T]`, `w` is `[n_filters, width]`, `b` is `[n_filters]`;
/// the result is `[batch, n_filters, (T - width)/stride + 1]` holding the
/// pre-activation `b_i + sum_k w_ik * x[t*stride + k]`.
pub fn conv1d(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let (xs, ws, bs) = (
        tape.shape(x).to_vec(),
        tape.shape(w).to_vec(),
        tape.shape(b).to_vec(),
    );
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[0] != bs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: xs,
            rhs: ws,
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            reason: "stride must be >= 1".into(),
        });
    }
    let (batch, t_in) = (xs[0], xs[1]);
    let (n, k) = (ws[0], ws[1]);
    if t_in < k {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            reason: format!("input length {t_in} shorter than filter width {k}"),
        });
    }
    let t_out = conv_output_len(t_in, k, stride);
    let mut out = vec![0.0; batch * n * t_out];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(w).data();
        let bv = tape.value(b).data();
        for bi in 0..batch {
            let xrow = &xv[bi * t_in..(bi + 1) * t_in];
            for i in 0..n {
                let wrow = &wv[i * k..(i + 1) * k];
                let bias = bv[i];
                let orow = &mut out[(bi * n + i) * t_out..][..t_out];
                for t in 0..t_out {
                    let xs = &xrow[t * stride..t * stride + k];
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += wrow[kk] * xs[kk];
                    }
                    orow[t] = bias + acc;
                }
            }
        }
    }
    let value = Tensor::from_vec(&[batch, n, t_out], out)?;
    let req = tape.any_requires(&[x, w, b]);
    tape.push_op(
        "conv1d",
        value,
        Box::new(Conv1dOp {
            x,
            w,
            b,
            stride,
            batch,
            t_in,
            n_filters: n,
            width: k,
            t_out,
        }),
        req,
    )
}

struct Conv2dOp {
    x: Var,
    w: Var,
    b: Var,
    dims: Conv2dDims,
}

#[derive(Clone, Copy)]
struct Conv2dDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w_in: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let d = self.dims;
        let xv = vals.val(self.x).data();
        let wv = vals.val(self.w).data();
        let x_at = |b: usize, c: usize, i: usize, j: usize| ((b * d.c_in + c) * d.h + i) * d.w_in + j;
        let w_at =
            |f: usize, c: usize, i: usize, j: usize| ((f * d.c_in + c) * d.kh + i) * d.kw + j;
        let g_at =
            |b: usize, f: usize, i: usize, j: usize| ((b * d.filters + f) * d.h_out + i) * d.w_out + j;
        if let Some(dw) = sink.entry(self.w) {
            for b in 0..d.batch {
                for f in 0..d.filters {
                    for oi in 0..d.h_out {
                        for oj in 0..d.w_out {
                            let gv = g[g_at(b, f, oi, oj)];
                            for c in 0..d.c_in {
                                for ki in 0..d.kh {
                                    for kj in 0..d.kw {
                                        dw[w_at(f, c, ki, kj)] +=
                                            gv * xv[x_at(b, c, oi + ki, oj + kj)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(db) = sink.entry(self.b) {
            for b in 0..d.batch {
                for f in 0..d.filters {
                    let base = (b * d.filters + f) * d.h_out * d.w_out;
                    db[f] += g[base..base + d.h_out * d.w_out].iter().sum::<f64>();
                }
            }
        }
        if let Some(dx) = sink.entry(self.x) {
            for b in 0..d.batch {
                for f in 0..d.filters {
                    for oi in 0..d.h_out {
                        for oj in 0..d.w_out {
                            let gv = g[g_at(b, f, oi, oj)];
                            for c in 0..d.c_in {
                                for ki in 0..d.kh {
                                    for kj in 0..d.kw {
                                        dx[x_at(b, c, oi + ki, oj + kj)] +=
                                            gv * wv[w_at(f, c, ki, kj)];
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

/// Valid 2-D cross-correlation with stride 1.
///
/// `x` is `[batch, C, H, W]`, `w` is `[filters, C, kh, kw]`, `b` is
/// `[filters]`; output spatial size is `(H - kh + 1, W - kw + 1)`.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xs, ws, bs) = (
        tape.shape(x).to_vec(),
        tape.shape(w).to_vec(),
        tape.shape(b).to_vec(),
    );
    if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[1] || ws[0] != bs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let d = Conv2dDims {
        batch: xs[0],
        c_in: xs[1],
        h: xs[2],
        w_in: xs[3],
        filters: ws[0],
        kh: ws[2],
        kw: ws[3],
        h_out: 0,
        w_out: 0,
    };
    if d.h < d.kh || d.w_in < d.kw {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!(
                "input {}x{} smaller than filter {}x{}",
                d.h, d.w_in, d.kh, d.kw
            ),
        });
    }
    let d = Conv2dDims {
        h_out: d.h - d.kh + 1,
        w_out: d.w_in - d.kw + 1,
        ..d
    };
    let mut out = vec![0.0; d.batch * d.filters * d.h_out * d.w_out];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(w).data();
        let bv = tape.value(b).data();
        let x_at = |b: usize, c: usize, i: usize, j: usize| ((b * d.c_in + c) * d.h + i) * d.w_in + j;
        let w_at =
            |f: usize, c: usize, i: usize, j: usize| ((f * d.c_in + c) * d.kh + i) * d.kw + j;
        let mut idx = 0usize;
        for b in 0..d.batch {
            for f in 0..d.filters {
                for oi in 0..d.h_out {
                    for oj in 0..d.w_out {
                        let mut acc = bv[f];
                        for c in 0..d.c_in {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    acc += wv[w_at(f, c, ki, kj)] * xv[x_at(b, c, oi + ki, oj + kj)];
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    let value = Tensor::from_vec(&[d.batch, d.filters, d.h_out, d.w_out], out)?;
    let req = tape.any_requires(&[x, w, b]);
    tape.push_op("conv2d", value, Box::new(Conv2dOp { x, w, b, dims: d }), req)
}

struct Pool1dOp {
    x: Var,
    mode: PoolMode,
    ranges: Vec<(usize, usize)>,
    rows: usize,
    t_in: usize,
    /// Flat argmax per output element (max mode only).
    argmax: Vec<usize>,
    /// Own output node, for l2's saved values.
    y: Var,
}

impl TapeOp for Pool1dOp {
    fn name(&self) -> &'static str {
        "pool1d"
    }

    fn backward(&self, vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let f_out = self.ranges.len();
        match self.mode {
            PoolMode::Max => {
                if let Some(dx) = sink.entry(self.x) {
                    for (out_i, &in_i) in self.argmax.iter().enumerate() {
                        dx[in_i] += g[out_i];
                    }
                }
            }
            PoolMode::Average => {
                if let Some(dx) = sink.entry(self.x) {
                    for r in 0..self.rows {
                        for (f, &(s, e)) in self.ranges.iter().enumerate() {
                            let share = g[r * f_out + f] / (e - s) as f64;
                            for i in s..e {
                                dx[r * self.t_in + i] += share;
                            }
                        }
                    }
                }
            }
            PoolMode::L2 => {
                let xv = vals.val(self.x).data();
                let yv = vals.val(self.y).data();
                if let Some(dx) = sink.entry(self.x) {
                    for r in 0..self.rows {
                        for (f, &(s, e)) in self.ranges.iter().enumerate() {
                            let y = yv[r * f_out + f];
                            if y == 0.0 {
                                continue; // subgradient 0 at the origin
                            }
                            let coef = g[r * f_out + f] / ((e - s) as f64 * y);
                            for i in s..e {
                                dx[r * self.t_in + i] += coef * xv[r * self.t_in + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool1d_with_ranges(
    tape: &mut Tape,
    x: Var,
    mode: PoolMode,
    ranges: Vec<(usize, usize)>,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "pool1d",
            shape: xs,
            reason: "expected [batch, channels, time]".into(),
        });
    }
    let (batch, channels, t_in) = (xs[0], xs[1], xs[2]);
    let rows = batch * channels;
    let f_out = ranges.len();
    let mut out = vec![0.0; rows * f_out];
    let mut argmax = vec![0usize; if mode == PoolMode::Max { rows * f_out } else { 0 }];
    {
        let xv = tape.value(x).data();
        for r in 0..rows {
            let xrow = &xv[r * t_in..(r + 1) * t_in];
            for (f, &(s, e)) in ranges.iter().enumerate() {
                let window = &xrow[s..e];
                out[r * f_out + f] = match mode {
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = s;
                        for (i, &v) in window.iter().enumerate() {
                            if v > best {
                                best = v;
                                best_i = s + i;
                            }
                        }
                        argmax[r * f_out + f] = r * t_in + best_i;
                        best
                    }
                    PoolMode::Average => window.iter().sum::<f64>() / window.len() as f64,
                    PoolMode::L2 => {
                        (window.iter().map(|v| v * v).sum::<f64>() / window.len() as f64).sqrt()
                    }
                };
            }
        }
    }
    let value = Tensor::from_vec(&[batch, channels, f_out], out)?;
    let req = tape.any_requires(&[x]);
    let y = Var(tape.len());
    tape.push_op(
        "pool1d",
        value,
        Box::new(Pool1dOp {
            x,
            mode,
            ranges,
            rows,
            t_in,
            argmax,
            y,
        }),
        req,
    )
}

/// Fixed-window temporal pooling over the last axis of `[batch, C, T]`.
pub fn pool1d(
    tape: &mut Tape,
    x: Var,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "pool1d",
            shape: xs.to_vec(),
            reason: "expected [batch, channels, time]".into(),
        });
    }
    let t_in = xs[2];
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "pool1d",
            reason: "window and stride must be >= 1".into(),
        });
    }
    if window > t_in {
        return Err(TensorError::InvalidArgument {
            op: "pool1d",
            reason: format!("window {window} larger than input length {t_in}"),
        });
    }
    let f_out = conv_output_len(t_in, window, stride);
    let ranges = (0..f_out)
        .map(|f| (f * stride, f * stride + window))
        .collect();
    pool1d_with_ranges(tape, x, mode, ranges)
}

/// Pool `[batch, C, T]` down to exactly `out_frames` frames: frame `j`
/// covers input `[floor(j*T/F), floor((j+1)*T/F))`, tiling `[0, T)`.
pub fn adaptive_pool1d(tape: &mut Tape, x: Var, mode: PoolMode, out_frames: usize) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "adaptive_pool1d",
            shape: xs.to_vec(),
            reason: "expected [batch, channels, time]".into(),
        });
    }
    let t_in = xs[2];
    if out_frames == 0 || out_frames > t_in {
        return Err(TensorError::InvalidArgument {
            op: "adaptive_pool1d",
            reason: format!("out_frames {out_frames} must be in 1..={t_in}"),
        });
    }
    let ranges = adaptive_ranges(t_in, out_frames);
    pool1d_with_ranges(tape, x, mode, ranges)
}

/// Window boundaries used by [`adaptive_pool1d`].
pub fn adaptive_ranges(t_in: usize, out_frames: usize) -> Vec<(usize, usize)> {
    (0..out_frames)
        .map(|j| (j * t_in / out_frames, (j + 1) * t_in / out_frames))
        .collect()
}

struct Pool2dOp {
    x: Var,
    argmax: Vec<usize>,
}

impl TapeOp for Pool2dOp {
    fn name(&self) -> &'static str {
        "pool2d"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for (out_i, &in_i) in self.argmax.iter().enumerate() {
                dx[in_i] += g[out_i];
            }
        }
    }
}

/// Max pooling over `[batch, C, H, W]` with window `(ph, pw)` and stride
/// equal to the window. Ties go to the lowest flat index.
pub fn pool2d_max(tape: &mut Tape, x: Var, ph: usize, pw: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "pool2d",
            shape: xs,
            reason: "expected [batch, channels, height, width]".into(),
        });
    }
    let (batch, channels, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(TensorError::InvalidArgument {
            op: "pool2d",
            reason: format!("pool size {ph}x{pw} invalid for input {h}x{w}"),
        });
    }
    let h_out = conv_output_len(h, ph, ph);
    let w_out = conv_output_len(w, pw, pw);
    let mut out = vec![0.0; batch * channels * h_out * w_out];
    let mut argmax = vec![0usize; out.len()];
    {
        let xv = tape.value(x).data();
        let mut idx = 0usize;
        for bc in 0..batch * channels {
            let plane = &xv[bc * h * w..(bc + 1) * h * w];
            for oi in 0..h_out {
                for oj in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ki in 0..ph {
                        for kj in 0..pw {
                            let at = (oi * ph + ki) * w + oj * pw + kj;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out[idx] = best;
                    argmax[idx] = bc * h * w + best_at;
                    idx += 1;
                }
            }
        }
    }
    let value = Tensor::from_vec(&[batch, channels, h_out, w_out], out)?;
    let req = tape.any_requires(&[x]);
    tape.push_op("pool2d", value, Box::new(Pool2dOp { x, argmax }), req)
}

struct DropoutOp {
    x: Var,
    mask: Vec<f64>,
}

impl TapeOp for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.entry(self.x) {
            for i in 0..g.len() {
                dx[i] += g[i] * self.mask[i];
            }
        }
    }
}

/// Inverted dropout: in train mode, zero each unit with probability `rate`
/// and scale survivors by `1/(1-rate)`; eval mode (and `rate == 0`) is
/// identity.
pub fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: super::Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument {
            op: "dropout",
            reason: format!("rate must be in [0, 1), got {rate}"),
        });
    }
    if rate == 0.0 || mode == super::Mode::Eval {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let tx = tape.value(x);
    let mask: Vec<f64> = (0..tx.numel())
        .map(|_| if rng.random_range(0.0..1.0) < rate { 0.0 } else { scale })
        .collect();
    let out: Vec<f64> = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let value = Tensor::from_vec(tx.shape(), out)?;
    let req = tape.any_requires(&[x]);
    tape.push_op("dropout", value, Box::new(DropoutOp { x, mask }), req)
}

struct SoftmaxXentOp {
    logits: Var,
    labels: Vec<usize>,
    softmax: Vec<f64>,
    classes: usize,
}

impl TapeOp for SoftmaxXentOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, _vals: &Values<'_>, g: &[f64], sink: &mut GradSink<'_>) {
        let Some(dl) = sink.entry(self.logits) else {
            return;
        };
        let batch = self.labels.len();
        let scale = g[0] / batch as f64;
        for (b, &label) in self.labels.iter().enumerate() {
            for k in 0..self.classes {
                let onehot = if k == label { 1.0 } else { 0.0 };
                dl[b * self.classes + k] += scale * (self.softmax[b * self.classes + k] - onehot);
            }
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed in the
/// log domain with max subtraction so large logits stay finite.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(TensorError::InvalidShape {
            op: "softmax_cross_entropy",
            shape: ls,
            reason: format!("expected [batch={}, classes]", labels.len()),
        });
    }
    let (batch, classes) = (ls[0], ls[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: format!("label {bad} out of range for {classes} classes"),
        });
    }
    let lv = tape.value(logits).data();
    let mut softmax = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &lv[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - m).exp();
        }
        let log_denom = denom.ln();
        for (k, &v) in row.iter().enumerate() {
            softmax[b * classes + k] = (v - m - log_denom).exp();
        }
        total += -(row[label] - m - log_denom);
    }
    let value = Tensor::scalar(total / batch as f64);
    let req = tape.any_requires(&[logits]);
    tape.push_op(
        "softmax_cross_entropy",
        value,
        Box::new(SoftmaxXentOp {
            logits,
            labels: labels.to_vec(),
            softmax,
            classes,
        }),
        req,
    )
}

/// Row-wise softmax of a plain `[batch, classes]` tensor (no tape).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    assert_eq!(logits.rank(), 2, "softmax_rows wants [batch, classes]");
    let classes = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}
