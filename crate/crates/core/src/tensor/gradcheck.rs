//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::nn::{conv_lstm_step, lstm_step};
use super::{LstmState, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
    pub seed: u64,
    /// Mode of the tapes the function is evaluated on.
    pub training: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-3,
            max_entries: 64,
            seed: 0,
            training: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            if err >= self.max_rel_err {
                self.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
            }
        }
    }
}

fn picks(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = crate::seed::rng(seed);
    let mut v = sample(&mut rng, n, max).into_vec();
    v.sort_unstable();
    v
}

impl GradCheck {
    /// Checks gradients of `f` with respect to each of `inputs`.
    pub fn inputs<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new(self.training);
            let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };
        let mut tape = Tape::new(self.training);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let mut report = GradCheckReport::default();
        let mut work = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for idx in picks(inputs[k].numel(), self.max_entries, self.seed ^ k as u64) {
                let orig = work[k].data()[idx];
                work[k].data_mut()[idx] = orig + self.h;
                let fp = eval(&work)?;
                work[k].data_mut()[idx] = orig - self.h;
                let fm = eval(&work)?;
                work[k].data_mut()[idx] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                report.record(format!("input {k}[{idx}]"), analytic.data()[idx], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Checks gradients of `f` with respect to every parameter in `store`.
    pub fn params<F>(&self, store: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
    {
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut s = s.clone();
            let mut tape = Tape::new(self.training);
            let out = f(&mut tape, &mut s)?;
            Ok(tape.value(out).item())
        };
        let mut base = store.clone();
        base.zero_grads();
        let mut scratch = base.clone();
        let mut tape = Tape::new(self.training);
        let out = f(&mut tape, &mut scratch)?;
        let grads = tape.backward(out)?;
        let mut analytic = base.clone();
        tape.accumulate_param_grads(&grads, &mut analytic);

        let mut report = GradCheckReport::default();
        let mut work = base.clone();
        let ids: Vec<_> = base.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let n = base.value(id).numel();
            for idx in picks(n, self.max_entries, self.seed ^ (k as u64).wrapping_mul(31)) {
                let orig = work.value(id).data()[idx];
                work.value_mut(id).data_mut()[idx] = orig + self.h;
                let fp = eval(&work)?;
                work.value_mut(id).data_mut()[idx] = orig - self.h;
                let fm = eval(&work)?;
                work.value_mut(id).data_mut()[idx] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                let label = format!("{}[{idx}]", base.name(id));
                report.record(label, analytic.grad(id).data()[idx], numeric, self.floor);
            }
        }
        Ok(report)
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Random signs with magnitudes in `[0.05, 1)`, for ops with a kink at zero.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Reduces `v` to a scalar through fixed random weights so that every output
/// element receives a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = crate::seed::rng(seed);
    let w = random(tape.shape(v), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, bool, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Runs the finite-difference check on every differentiable tape operation,
/// including a few multi-step compositions (LSTM cells unrolled three steps).
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = crate::seed::rng(seed);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, -1.0, 1.0, rng);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, true, vec![$($t),*], Box::new($f)))
        };
        (eval $name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, false, vec![$($t),*], Box::new($f)))
        };
    }
    case!("add", [r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 1)
    });
    case!("sub", [r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)], |t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y, 2)
    });
    case!("mul", [r(&[3, 2], &mut rng), r(&[3, 2], &mut rng)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, 3)
    });
    case!("scale", [r(&[4], &mut rng)], |t, v| {
        let y = t.scale(v[0], -1.7);
        probe(t, y, 4)
    });
    case!("add_scalar", [r(&[4], &mut rng)], |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        let y = t.square(y);
        probe(t, y, 5)
    });
    case!("neg", [r(&[4], &mut rng)], |t, v| {
        let y = t.neg(v[0]);
        probe(t, y, 6)
    });
    case!("matmul", [r(&[3, 4], &mut rng), r(&[4, 2], &mut rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, 7)
    });
    case!("add_bias", [r(&[2, 3, 2], &mut rng), r(&[3], &mut rng)], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        probe(t, y, 8)
    });
    case!("concat", [r(&[2, 1, 3], &mut rng), r(&[2, 2, 3], &mut rng)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        probe(t, y, 9)
    });
    case!("reshape", [r(&[2, 6], &mut rng)], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        probe(t, y, 10)
    });
    case!("flatten", [r(&[2, 2, 3], &mut rng)], |t, v| {
        let y = t.flatten(v[0])?;
        probe(t, y, 11)
    });
    case!("slice", [r(&[2, 5, 2], &mut rng)], |t, v| {
        let y = t.slice(v[0], 1, 1, 3)?;
        probe(t, y, 12)
    });
    case!("permute", [r(&[2, 3, 4], &mut rng)], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        probe(t, y, 13)
    });
    case!("transpose", [r(&[3, 2], &mut rng)], |t, v| {
        let y = t.transpose(v[0])?;
        probe(t, y, 14)
    });
    case!("index_select", [r(&[3, 2], &mut rng)], |t, v| {
        let y = t.index_select(v[0], &[2, 0, 2, 1])?;
        probe(t, y, 15)
    });
    case!("relu", [random_off_zero(&[3, 3], &mut rng)], |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, 16)
    });
    case!("sigmoid", [r(&[5], &mut rng)], |t, v| {
        let y = t.sigmoid(v[0]);
        probe(t, y, 17)
    });
    case!("tanh", [r(&[5], &mut rng)], |t, v| {
        let y = t.tanh(v[0]);
        probe(t, y, 18)
    });
    case!("cos", [r(&[5], &mut rng)], |t, v| {
        let y = t.cos(v[0]);
        probe(t, y, 19)
    });
    case!("sin", [r(&[5], &mut rng)], |t, v| {
        let y = t.sin(v[0]);
        probe(t, y, 20)
    });
    case!("acos_clamped", [random(&[5], -0.9, 0.9, &mut rng)], |t, v| {
        let y = t.acos_clamped(v[0]);
        probe(t, y, 21)
    });
    case!("square", [r(&[5], &mut rng)], |t, v| {
        let y = t.square(v[0]);
        probe(t, y, 22)
    });
    case!("sum", [r(&[2, 3], &mut rng)], |t, v| {
        let y = t.square(v[0]);
        Ok(t.sum(y))
    });
    case!("mean", [r(&[2, 3], &mut rng)], |t, v| {
        let y = t.square(v[0]);
        Ok(t.mean(y))
    });
    case!("sum_axis", [r(&[2, 3, 2], &mut rng)], |t, v| {
        let y = t.sum_axis(v[0], 1)?;
        probe(t, y, 23)
    });
    case!(
        "conv2d",
        [r(&[2, 2, 5, 4], &mut rng), r(&[3, 2, 3, 3], &mut rng), r(&[3], &mut rng)],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            probe(t, y, 24)
        }
    );
    case!(
        "conv2d_grouped",
        [r(&[2, 4, 4, 4], &mut rng), r(&[4, 2, 3, 3], &mut rng)],
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1, 2)?;
            probe(t, y, 25)
        }
    );
    case!(
        "conv3d",
        [r(&[1, 2, 3, 4, 4], &mut rng), r(&[2, 2, 3, 3, 3], &mut rng), r(&[2], &mut rng)],
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1], 1)?;
            probe(t, y, 26)
        }
    );
    case!("channel_shuffle", [r(&[2, 6, 2], &mut rng)], |t, v| {
        let y = t.channel_shuffle(v[0], 3)?;
        probe(t, y, 27)
    });
    case!(
        "batch_norm",
        [r(&[3, 2, 2, 2], &mut rng), random(&[2], 0.5, 1.5, &mut rng), r(&[2], &mut rng)],
        |t, v| {
            let mut rm = Tensor::zeros(&[2]);
            let mut rv = Tensor::full(&[2], 1.0);
            let y = t.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, 0.1, 1e-5)?;
            probe(t, y, 28)
        }
    );
    case!(
        eval "batch_norm_eval",
        [r(&[2, 3, 2], &mut rng), random(&[3], 0.5, 1.5, &mut rng), r(&[3], &mut rng)],
        |t, v| {
            let mut rm = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3])?;
            let mut rv = Tensor::from_f64(&[3], &[0.5, 1.5, 2.0])?;
            let y = t.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, 0.1, 1e-5)?;
            probe(t, y, 29)
        }
    );
    case!("dropout", [r(&[4, 4], &mut rng)], |t, v| {
        let y = t.dropout(v[0], 0.3, 99)?;
        probe(t, y, 30)
    });
    case!(
        "lstm_3_steps",
        [
            r(&[3, 2, 3], &mut rng),
            random(&[3, 8], -0.5, 0.5, &mut rng),
            random(&[2, 8], -0.5, 0.5, &mut rng),
            random(&[8], -0.5, 0.5, &mut rng)
        ],
        |t, v| {
            let mut state = LstmState {
                h: t.constant(Tensor::zeros(&[2, 2])),
                c: t.constant(Tensor::zeros(&[2, 2])),
            };
            let mut outs = Vec::new();
            for step in 0..3 {
                let x = t.slice(v[0], 0, step, 1)?;
                let x = t.reshape(x, &[2, 3])?;
                state = lstm_step(t, v[1], v[2], v[3], 2, x, state)?;
                outs.push(state.h);
            }
            let y = t.concat(&outs, 1)?;
            probe(t, y, 31)
        }
    );
    case!(
        "conv_lstm_3_steps",
        [
            r(&[3, 1, 2, 3, 3], &mut rng),
            random(&[8, 4, 3, 3], -0.3, 0.3, &mut rng),
            random(&[8], -0.3, 0.3, &mut rng)
        ],
        |t, v| {
            let mut state = LstmState {
                h: t.constant(Tensor::zeros(&[1, 2, 3, 3])),
                c: t.constant(Tensor::zeros(&[1, 2, 3, 3])),
            };
            let mut outs = Vec::new();
            for step in 0..3 {
                let x = t.slice(v[0], 0, step, 1)?;
                let x = t.reshape(x, &[1, 2, 3, 3])?;
                state = conv_lstm_step(t, v[1], Some(v[2]), 2, x, state)?;
                outs.push(state.h);
            }
            let y = t.concat(&outs, 1)?;
            probe(t, y, 32)
        }
    );

    cases
        .into_iter()
        .map(|(name, training, inputs, f)| {
            let checker = GradCheck {
                seed,
                training,
                ..GradCheck::default()
            };
            Ok((name, checker.inputs(&inputs, f)?))
        })
        .collect()
}
