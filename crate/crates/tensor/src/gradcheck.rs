//! Central finite-difference checks of every differentiable tape op (64-bit).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::conv::{Conv2dSpec, Padding};
use crate::ops::norm::{BnMode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One seeded instance: inputs (those with grad are checked) plus the graph.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

pub struct GradOp {
    pub name: &'static str,
    pub make_case: Box<dyn Fn(&mut ChaCha8Rng) -> GradCase>,
}

impl GradOp {
    pub fn new(name: &'static str, make_case: impl Fn(&mut ChaCha8Rng) -> GradCase + 'static) -> Self {
        GradOp {
            name,
            make_case: Box::new(make_case),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub error: Option<String>,
}

/// Scalar objective `sum(out * r)` with fixed pseudo-random weights `r`.
fn objective(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let rv = tape.constant(shape, r, false)?;
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

fn evaluate(case: &GradCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = objective(&mut tape, out)?;
    Ok(tape.value(loss)[0])
}

/// Maximum relative error between analytic and central-difference gradients
/// over every element of every input that requires grad.
pub fn check_case(case: &GradCase) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = objective(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = case.inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        if !case.inputs[i].requires_grad() {
            continue;
        }
        let zeros = vec![0.0; case.inputs[i].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for j in 0..case.inputs[i].numel() {
            let x0 = case.inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let fp = evaluate(case, &probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let fm = evaluate(case, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs `cases` seeded instances of each op.
pub fn run_suite(ops: &[GradOp], cases: usize, seed: u64) -> Vec<OpReport> {
    ops.iter()
        .enumerate()
        .map(|(k, op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
            let mut worst: f64 = 0.0;
            let mut error = None;
            for _ in 0..cases {
                let case = (op.make_case)(&mut rng);
                match check_case(&case) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            OpReport {
                name: op.name,
                cases,
                max_rel_error: worst,
                passed: error.is_none() && worst < TOLERANCE,
                error,
            }
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng).with_grad()
}

/// Values bounded away from zero so relu stays differentiable under the probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Distinct values spaced 0.01 apart, so pooling windows have a clear maximum.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap().with_grad()
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    ]
}

fn case(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable op of the tape, each exactly once.
pub fn registered_ops() -> Vec<GradOp> {
    vec![
        GradOp::new("conv2d", |rng| {
            let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
            let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = Padding::new(
                rng.random_range(0..=2),
                rng.random_range(0..=2),
                rng.random_range(0..=2),
                rng.random_range(0..=2),
            );
            let spec = Conv2dSpec { stride, padding };
            case(
                vec![
                    rand_tensor(rng, vec![b, cin, h, w]),
                    rand_tensor(rng, vec![cout, cin, k, k]),
                    rand_tensor(rng, vec![cout]),
                ],
                move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec),
            )
        }),
        GradOp::new("batchnorm2d_train", |rng| {
            let mut s = nchw(rng);
            if s[0] * s[2] * s[3] < 2 {
                s[0] = 2;
            }
            let c = s[1];
            let gamma = Tensor::uniform(vec![c], 0.5, 1.5, rng).with_grad();
            case(
                vec![rand_tensor(rng, s), gamma, rand_tensor(rng, vec![c])],
                move |t, v| {
                    let mut stats = RunningStats::new(c);
                    t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, 0.1, 1e-5)
                },
            )
        }),
        GradOp::new("batchnorm2d_eval", |rng| {
            let s = nchw(rng);
            let c = s[1];
            let stats = RunningStats {
                mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            case(
                vec![rand_tensor(rng, s), rand_tensor(rng, vec![c]), rand_tensor(rng, vec![c])],
                move |t, v| {
                    let mut st = stats.clone();
                    t.batchnorm2d(v[0], v[1], v[2], &mut st, BnMode::Eval, 0.1, 1e-5)
                },
            )
        }),
        GradOp::new("relu", |rng| {
            let s = nchw(rng);
            case(vec![away_from_zero(rng, s)], |t, v| t.relu(v[0]))
        }),
        GradOp::new("maxpool2x2", |rng| {
            let mut s = nchw(rng);
            s[2] = s[2].max(2);
            s[3] = s[3].max(2);
            case(vec![distinct(rng, s)], |t, v| t.maxpool2x2(v[0]))
        }),
        GradOp::new("upsample_nearest2x", |rng| {
            let mut s = nchw(rng);
            s[2] = s[2].min(3);
            s[3] = s[3].min(3);
            case(vec![rand_tensor(rng, s)], |t, v| t.upsample_nearest2x(v[0]))
        }),
        GradOp::new("add", |rng| {
            let s = nchw(rng);
            case(vec![rand_tensor(rng, s.clone()), rand_tensor(rng, s)], |t, v| t.add(v[0], v[1]))
        }),
        GradOp::new("mul", |rng| {
            let s = nchw(rng);
            case(vec![rand_tensor(rng, s.clone()), rand_tensor(rng, s)], |t, v| t.mul(v[0], v[1]))
        }),
        GradOp::new("scale", |rng| {
            let s = nchw(rng);
            let f = rng.random_range(-3.0..3.0);
            case(vec![rand_tensor(rng, s)], move |t, v| t.scale(v[0], f))
        }),
        GradOp::new("concat_channels", |rng| {
            let s = nchw(rng);
            let parts = rng.random_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    rand_tensor(rng, vec![s[0], c, s[2], s[3]])
                })
                .collect();
            case(inputs, |t, v| t.concat_channels(v))
        }),
        GradOp::new("mse_loss", |rng| {
            let s = nchw(rng);
            case(vec![rand_tensor(rng, s.clone()), rand_tensor(rng, s)], |t, v| t.mse_loss(v[0], v[1]))
        }),
        GradOp::new("sum", |rng| {
            let s = nchw(rng);
            case(vec![rand_tensor(rng, s)], |t, v| t.sum(v[0]))
        }),
        GradOp::new("global_avg_pool", |rng| {
            let s = nchw(rng);
            case(vec![rand_tensor(rng, s)], |t, v| t.global_avg_pool(v[0]))
        }),
        GradOp::new("reshape", |rng| {
            let s = nchw(rng);
            let n: usize = s.iter().product();
            case(vec![rand_tensor(rng, s)], move |t, v| t.reshape(v[0], vec![n]))
        }),
    ]
}
