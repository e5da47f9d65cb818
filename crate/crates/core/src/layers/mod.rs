//! Neural building blocks: parameterized layers over the tape ops.
//!
//! Layers own no tensors — parameters live in a [`ParamSet`] and layers
//! keep [`ParamId`] handles plus hyperparameters, so a forward pass is a
//! pure function of `(params, input)` and training state stays in one
//! place. Batch norm returns its batch statistics instead of mutating
//! running buffers; the training loop applies them explicitly.

mod ops;

pub use ops::{
    adaptive_pool1d, adaptive_ranges, conv1d, conv2d, conv_output_len, dropout, pool1d,
    pool2d_max, softmax_cross_entropy, softmax_rows, PoolMode,
};

use crate::tensor::{Bindings, ParamId, ParamSet, Result, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Train / eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Zero-mean normal init with variance `2 / fan_in`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Strided 1-D convolution layer reading raw samples.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub n_filters: usize,
    pub width: usize,
    pub stride: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1dLayer {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        n_filters: usize,
        width: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(n_filters >= 1 && width >= 1 && stride >= 1);
        let w = params.register(
            &format!("{prefix}.w"),
            he_normal(&[n_filters, width], width, rng),
            true,
        );
        let b = params.register(&format!("{prefix}.b"), Tensor::zeros(&[n_filters]), true);
        Self {
            n_filters,
            width,
            stride,
            w,
            b,
        }
    }

    /// `[batch, T] -> [batch, n_filters, (T - width)/stride + 1]`, pre-activation.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        conv1d(tape, x, bind.var(self.w), bind.var(self.b), self.stride)
    }
}

/// Valid 2-D convolution layer, stride 1.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub filters: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2dLayer {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kh * kw;
        let w = params.register(
            &format!("{prefix}.w"),
            he_normal(&[filters, in_channels, kh, kw], fan_in, rng),
            true,
        );
        let b = params.register(&format!("{prefix}.b"), Tensor::zeros(&[filters]), true);
        Self {
            filters,
            in_channels,
            kh,
            kw,
            w,
            b,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        conv2d(tape, x, bind.var(self.w), bind.var(self.b))
    }
}

/// Per-channel batch normalization over `[B, C]`, `[B, C, T]` or `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics produced by a train-mode forward pass; fold into the
/// running buffers with [`BatchNormLayer::apply_update`].
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub layer_mean: ParamId,
    pub layer_var: ParamId,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    pub momentum: f64,
}

impl BnUpdate {
    pub fn apply(&self, params: &mut ParamSet) {
        let m = self.momentum;
        let rm = params.get_mut(self.layer_mean);
        for (r, &b) in rm.value.data_mut().iter_mut().zip(self.batch_mean.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
        let rv = params.get_mut(self.layer_var);
        for (r, &b) in rv.value.data_mut().iter_mut().zip(self.batch_var.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

impl BatchNormLayer {
    pub fn init(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        let gamma = params.register(
            &format!("{prefix}.gamma"),
            Tensor::filled(&[channels], 1.0),
            true,
        );
        let beta = params.register(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), true);
        let running_mean = params.register(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        );
        let running_var = params.register(
            &format!("{prefix}.running_var"),
            Tensor::filled(&[channels], 1.0),
            false,
        );
        Self {
            channels,
            momentum: 0.9,
            epsilon: 1e-5,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Mean over every axis except the channel axis (1), as a `[C]` var.
    fn channel_mean(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let count: usize = shape.iter().product::<usize>() / shape[1];
        let mut acc = x;
        // reduce trailing axes first, then the batch axis
        for axis in (2..shape.len()).rev() {
            acc = tape.sum_axis(acc, axis)?;
        }
        acc = tape.sum_axis(acc, 0)?;
        tape.scale(acc, 1.0 / count as f64)
    }

    fn broadcast_channel(&self, tape: &mut Tape, v: Var, like: &[usize]) -> Result<Var> {
        let mut shape = vec![1usize; like.len()];
        shape[1] = self.channels;
        let r = tape.reshape(v, &shape)?;
        tape.broadcast_to(r, like)
    }

    /// Normalize `x`. Train mode standardizes with batch statistics and
    /// returns a [`BnUpdate`]; eval mode uses the running buffers and is a
    /// deterministic affine map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(TensorError::InvalidShape {
                op: "batchnorm",
                shape,
                reason: format!("expected channel axis 1 of size {}", self.channels),
            });
        }
        let (xhat, update) = match mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(TensorError::InvalidArgument {
                        op: "batchnorm",
                        reason: format!(
                            "train-mode batch must have at least 2 utterances, got {}",
                            shape[0]
                        ),
                    });
                }
                let mean = self.channel_mean(tape, x)?;
                let mean_b = self.broadcast_channel(tape, mean, &shape)?;
                let centered = tape.sub(x, mean_b)?;
                let sq = tape.square(centered)?;
                let var = self.channel_mean(tape, sq)?;
                let var_eps = tape.add_scalar(var, self.epsilon)?;
                let std = tape.sqrt(var_eps)?;
                let std_b = self.broadcast_channel(tape, std, &shape)?;
                let xhat = tape.div(centered, std_b)?;
                let update = BnUpdate {
                    layer_mean: self.running_mean,
                    layer_var: self.running_var,
                    batch_mean: tape.value(mean).clone(),
                    batch_var: tape.value(var).clone(),
                    momentum: self.momentum,
                };
                (xhat, Some(update))
            }
            Mode::Eval => {
                let mean_b = self.broadcast_channel(tape, bind.var(self.running_mean), &shape)?;
                let var = bind.var(self.running_var);
                let var_eps = tape.add_scalar(var, self.epsilon)?;
                let std = tape.sqrt(var_eps)?;
                let std_b = self.broadcast_channel(tape, std, &shape)?;
                let centered = tape.sub(x, mean_b)?;
                (tape.div(centered, std_b)?, None)
            }
        };
        let gamma_b = self.broadcast_channel(tape, bind.var(self.gamma), &shape)?;
        let beta_b = self.broadcast_channel(tape, bind.var(self.beta), &shape)?;
        let scaled = tape.mul(xhat, gamma_b)?;
        let y = tape.add(scaled, beta_b)?;
        Ok((y, update))
    }
}

/// Fully connected layer; weights are `[out, in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseLayer {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.register(
            &format!("{prefix}.w"),
            he_normal(&[out_features, in_features], in_features, rng),
            true,
        );
        let b = params.register(&format!("{prefix}.b"), Tensor::zeros(&[out_features]), true);
        Self {
            in_features,
            out_features,
            w,
            b,
        }
    }

    /// `[batch, in] -> [batch, out]`, `y = x W^T + b`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let wt = tape.permute(bind.var(self.w), &[1, 0])?;
        let xw = tape.matmul(x, wt)?;
        let batch = tape.shape(x)[0];
        let b = tape.reshape(bind.var(self.b), &[1, self.out_features])?;
        let b = tape.broadcast_to(b, &[batch, self.out_features])?;
        tape.add(xw, b)
    }
}

/// Single-direction LSTM with standard gating and a forget-gate bias of 1.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input, forget, cell, output gate parameters: x-weights `[D, H]`,
    /// recurrent weights `[H, H]`, biases `[H]`.
    pub w_x: [ParamId; 4],
    pub w_h: [ParamId; 4],
    pub bias: [ParamId; 4],
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmLayer {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w_x = Vec::with_capacity(4);
        let mut w_h = Vec::with_capacity(4);
        let mut bias = Vec::with_capacity(4);
        for (g, name) in GATE_NAMES.iter().enumerate() {
            w_x.push(params.register(
                &format!("{prefix}.{name}.w_x"),
                he_normal(&[input_size, hidden_size], input_size, rng),
                true,
            ));
            w_h.push(params.register(
                &format!("{prefix}.{name}.w_h"),
                he_normal(&[hidden_size, hidden_size], hidden_size, rng),
                true,
            ));
            let init = if g == 1 { 1.0 } else { 0.0 }; // forget gate starts open
            bias.push(params.register(
                &format!("{prefix}.{name}.b"),
                Tensor::filled(&[hidden_size], init),
                true,
            ));
        }
        Self {
            input_size,
            hidden_size,
            w_x: w_x.try_into().unwrap(),
            w_h: w_h.try_into().unwrap(),
            bias: bias.try_into().unwrap(),
        }
    }

    fn gate_preact(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        g: usize,
        xt: Var,
        h: Var,
        batch: usize,
    ) -> Result<Var> {
        let xw = tape.matmul(xt, bind.var(self.w_x[g]))?;
        let hw = tape.matmul(h, bind.var(self.w_h[g]))?;
        let sum = tape.add(xw, hw)?;
        let b = tape.reshape(bind.var(self.bias[g]), &[1, self.hidden_size])?;
        let b = tape.broadcast_to(b, &[batch, self.hidden_size])?;
        tape.add(sum, b)
    }

    /// Run the recurrence over `[batch, T, D]` from zero initial states and
    /// return every hidden state as `[batch, T, H]`.
    pub fn forward_sequence(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size {
            return Err(TensorError::InvalidShape {
                op: "lstm",
                shape,
                reason: format!("expected [batch, time, {}]", self.input_size),
            });
        }
        let (batch, t_len) = (shape[0], shape[1]);
        let h_dim = self.hidden_size;
        let mut h = tape.leaf(Tensor::zeros(&[batch, h_dim]), false);
        let mut c = tape.leaf(Tensor::zeros(&[batch, h_dim]), false);
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.slice(x, 1, t, t + 1)?;
            let xt = tape.reshape(xt, &[batch, self.input_size])?;
            let i_pre = self.gate_preact(tape, bind, 0, xt, h, batch)?;
            let f_pre = self.gate_preact(tape, bind, 1, xt, h, batch)?;
            let g_pre = self.gate_preact(tape, bind, 2, xt, h, batch)?;
            let o_pre = self.gate_preact(tape, bind, 3, xt, h, batch)?;
            let i = tape.sigmoid(i_pre)?;
            let f = tape.sigmoid(f_pre)?;
            let g = tape.tanh(g_pre)?;
            let o = tape.sigmoid(o_pre)?;
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let ct = tape.tanh(c)?;
            h = tape.mul(o, ct)?;
            states.push(tape.reshape(h, &[batch, 1, h_dim])?);
        }
        tape.concat(1, &states)
    }
}

#[cfg(test)]
mod tests;
