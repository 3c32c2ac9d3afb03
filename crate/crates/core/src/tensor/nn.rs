//! Parameterized layers built from tape primitives.

use rand_chacha::ChaCha8Rng;

use super::{BufferId, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `y = x W + b` for `x` of shape `(N, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = fan_in_bound(inputs);
        let w = store.add_uniform(format!("{name}.weight"), &[inputs, outputs], bound, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[outputs], bound, rng);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cg = in_ch / groups.max(1);
        let bound = fan_in_bound(cg * kernel * kernel);
        let w = store.add_uniform(format!("{name}.weight"), &[out_ch, cg, kernel, kernel], bound, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_ch], bound, rng));
        Self {
            w,
            b,
            stride,
            padding,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = fan_in_bound(in_ch * kernel.iter().product::<usize>());
        let mut shape = vec![out_ch, in_ch];
        shape.extend_from_slice(&kernel);
        let w = store.add_uniform(format!("{name}.weight"), &shape, bound, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_ch], bound, rng));
        Self {
            w,
            b,
            stride: [1, 1, 1],
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv3d(x, w, b, self.stride, self.padding, 1)
    }
}

/// Batch normalization with learned affine terms and running statistics.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl NormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let (rm, rv) = store.buffer_pair_mut(self.running_mean, self.running_var);
        tape.batch_norm(x, g, b, rm, rv, self.momentum, self.eps)
    }
}

/// Hidden and cell state of a (conv) LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

fn gates<T: Scalar>(tape: &mut Tape<T>, z: Var, hidden: usize, prev_c: Var) -> Result<LstmState> {
    let i = tape.slice(z, 1, 0, hidden)?;
    let f = tape.slice(z, 1, hidden, hidden)?;
    let g = tape.slice(z, 1, 2 * hidden, hidden)?;
    let o = tape.slice(z, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, prev_c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

pub(crate) fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let zx = tape.matmul(x, wx)?;
    let zh = tape.matmul(state.h, wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, b)?;
    gates(tape, z, hidden, state.c)
}

/// Same-padded (odd kernel) convolutional gate map over `concat[x, h]`.
pub(crate) fn conv_lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    b: Option<Var>,
    hidden: usize,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let k = tape.shape(w)[2];
    let xh = tape.concat(&[x, state.h], 1)?;
    let z = tape.conv2d(xh, w, b, 1, k / 2, 1)?;
    gates(tape, z, hidden, state.c)
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = fan_in_bound(hidden);
        Self {
            wx: store.add_uniform(format!("{name}.wx"), &[inputs, 4 * hidden], bound, rng),
            wh: store.add_uniform(format!("{name}.wh"), &[hidden, 4 * hidden], bound, rng),
            b: store.add_uniform(format!("{name}.bias"), &[4 * hidden], bound, rng),
            inputs,
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        lstm_step(tape, wx, wh, b, self.hidden, x, state)
    }
}

/// Convolutional LSTM: the gate pre-activations come from a same-padded
/// convolution over the channel concatenation of input and hidden maps.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub conv: Conv2dLayer,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2dLayer::new(store, name, in_ch + hidden, 4 * hidden, kernel, 1, kernel / 2, 1, true, rng);
        Self { conv, hidden }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, h: usize, w: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden, h, w])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden, h, w])),
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let w = tape.param(store, self.conv.w);
        let b = self.conv.b.map(|b| tape.param(store, b));
        conv_lstm_step(tape, w, b, self.hidden, x, state)
    }
}
