//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use lcnet::data::{EncodedSample, Label, BANDS};
use lcnet::loss::{cross_entropy, mine_batch_all, MarginConfig, TripletBatch};
use lcnet::nn::{self, ActivationMap, ConvParams, InceptionSpec};
use lcnet::tensor::ConvPadding;
use lcnet::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut TestRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.01 apart in random order, so no maximum changes
/// under a 1e-3 perturbation.
pub fn distinct_tensor(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| -1.0 + 0.02 * i as f64 + rng.random_range(0.0..0.005))
        .collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// Values with `|x| >= 0.05`, away from the ReLU kink.
pub fn off_kink_tensor(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

// ---- finite differences -----------------------------------------------------

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> lcnet::Result<Var>>;

/// A scalar-valued graph over some input tensors.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// The graph has kinks (ReLU, max); points where a perturbation
    /// crosses one are excluded.
    pub kinked: bool,
}

pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut TestRng) -> Instance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Check {
    /// Worst norm-relative error over all inputs.
    Measured(f64),
    /// Kink-adjacent point.
    Excluded,
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// `sum(y ⊙ r)` with a fixed random `r`, making any output scalar
/// without symmetric cancellations.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> lcnet::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = rand_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn eval(inst: &Instance, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

fn numeric(inst: &Instance, eps: f64) -> Vec<Vec<f64>> {
    let mut inputs = inst.inputs.clone();
    let mut grads = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + eps;
            let fp = eval(inst, &inputs);
            inputs[i].data_mut()[j] = x0 - eps;
            let fm = eval(inst, &inputs);
            inputs[i].data_mut()[j] = x0;
            g.push((fp - fm) / (2.0 * eps));
        }
        grads.push(g);
    }
    grads
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Compares tape gradients against central differences at [`FD_EPS`].
pub fn check_instance(inst: &Instance) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = (inst.build)(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inst.inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    let num = numeric(inst, FD_EPS);
    if inst.kinked {
        let half = numeric(inst, FD_EPS / 2.0);
        let unstable = num.iter().zip(&half).any(|(a, b)| rel_err(a, b) > 1e-5);
        if unstable {
            return Check::Excluded;
        }
    }
    let worst = analytic
        .iter()
        .zip(&num)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Check::Measured(worst)
}

fn inst(
    inputs: Vec<Tensor>,
    kinked: bool,
    build: impl Fn(&mut Tape, &[Var]) -> lcnet::Result<Var> + 'static,
) -> Instance {
    Instance {
        inputs,
        build: Box::new(build),
        kinked,
    }
}

fn shape3(rng: &mut TestRng) -> Vec<usize> {
    vec![
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=16),
    ]
}

fn small_shape(rng: &mut TestRng) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![rng.random_range(1..=16)],
        1 => vec![rng.random_range(1..=4), rng.random_range(1..=8)],
        _ => shape3(rng),
    }
}

fn elementwise(rng: &mut TestRng, op: fn(&mut Tape, Var, Var) -> lcnet::Result<Var>) -> Instance {
    let s = small_shape(rng);
    let a = rand_tensor(rng, &s, -2.0, 2.0);
    let b = rand_tensor(rng, &s, -2.0, 2.0);
    let seed = rng.random();
    inst(vec![a, b], false, move |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, seed)
    })
}

fn unary(
    rng: &mut TestRng,
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var) -> lcnet::Result<Var>,
) -> Instance {
    let s = small_shape(rng);
    let a = rand_tensor(rng, &s, lo, hi);
    let seed = rng.random();
    inst(vec![a], false, move |t, v| {
        let y = op(t, v[0])?;
        project(t, y, seed)
    })
}

/// Every differentiable primitive, layer and loss.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            make: |r| elementwise(r, |t, a, b| t.add(a, b)),
        },
        GradCase {
            name: "sub",
            make: |r| elementwise(r, |t, a, b| t.sub(a, b)),
        },
        GradCase {
            name: "mul",
            make: |r| elementwise(r, |t, a, b| t.mul(a, b)),
        },
        GradCase {
            name: "mul_scalar",
            make: |r| {
                let s = small_shape(r);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let b = rand_tensor(r, &[], -2.0, 2.0);
                let seed = r.random();
                inst(vec![a, b], false, move |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "scale",
            make: |r| unary(r, -2.0, 2.0, |t, a| Ok(t.scale(a, -1.7))),
        },
        GradCase {
            name: "div_scalar",
            make: |r| unary(r, -2.0, 2.0, |t, a| t.div_scalar(a, 3.0)),
        },
        GradCase {
            name: "relu",
            make: |r| {
                let s = small_shape(r);
                let a = off_kink_tensor(r, &s);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "exp",
            make: |r| unary(r, -2.0, 2.0, |t, a| Ok(t.exp(a))),
        },
        GradCase {
            name: "log",
            make: |r| unary(r, 0.5, 3.0, |t, a| t.log(a)),
        },
        GradCase {
            name: "sqrt",
            make: |r| unary(r, 0.5, 3.0, |t, a| t.sqrt(a)),
        },
        GradCase {
            name: "clamp_min",
            make: |r| {
                let s = small_shape(r);
                let a = off_kink_tensor(r, &s);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.clamp_min(v[0], 0.0);
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "matmul",
            make: |r| {
                let (m, k, n) = (
                    r.random_range(1..=4),
                    r.random_range(1..=8),
                    r.random_range(1..=16),
                );
                let a = rand_tensor(r, &[m, k], -1.0, 1.0);
                let b = rand_tensor(r, &[k, n], -1.0, 1.0);
                let seed = r.random();
                inst(vec![a, b], false, move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "sum",
            make: |r| {
                let s = small_shape(r);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                inst(vec![a], false, |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                })
            },
        },
        GradCase {
            name: "sum_axis",
            make: |r| {
                let s = shape3(r);
                let axis = r.random_range(0..3);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.sum_axis(v[0], axis)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "softmax",
            make: |r| {
                let s = [r.random_range(1..=4), r.random_range(2..=8)];
                let a = rand_tensor(r, &s, -3.0, 3.0);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.softmax(v[0])?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "pairwise_l2",
            make: |r| {
                let (n, m, d) = (
                    r.random_range(1..=4),
                    r.random_range(1..=8),
                    r.random_range(1..=6),
                );
                let a = rand_tensor(r, &[n, d], -1.0, 1.0);
                let b = rand_tensor(r, &[m, d], 2.0, 3.0);
                let seed = r.random();
                inst(vec![a, b], false, move |t, v| {
                    let y = t.pairwise_l2(v[0], v[1])?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "reshape",
            make: |r| {
                let s = shape3(r);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let seed = r.random();
                let flat = [s[0] * s[1], s[2]];
                inst(vec![a], false, move |t, v| {
                    let y = t.reshape(v[0], &flat)?;
                    let y = t.mul(y, y)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "gather",
            make: |r| {
                let s = small_shape(r);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let n = a.len();
                let idx: Vec<usize> = (0..r.random_range(1..=2 * n))
                    .map(|_| r.random_range(0..n))
                    .collect();
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.gather(v[0], &idx)?;
                    let y = t.mul(y, y)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "slice",
            make: |r| {
                let s = shape3(r);
                let axis = r.random_range(0..3);
                let len = r.random_range(1..=s[axis]);
                let start = r.random_range(0..=s[axis] - len);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.slice(v[0], axis, start, len)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "pad_width",
            make: |r| {
                let s = shape3(r);
                let (left, right) = (r.random_range(0..3), r.random_range(0..3));
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.pad_width(v[0], left, right, 0.5)?;
                    let y = t.mul(y, y)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "concat",
            make: |r| {
                let s = shape3(r);
                let axis = r.random_range(0..3);
                let mut s2 = s.clone();
                s2[axis] = r.random_range(1..=4);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let b = rand_tensor(r, &s2, -2.0, 2.0);
                let seed = r.random();
                inst(vec![a, b], false, move |t, v| {
                    let y = t.concat(&[v[0], v[1], v[0]], axis)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "reduce_max_axis",
            make: |r| {
                let s = shape3(r);
                let axis = r.random_range(0..3);
                let a = distinct_tensor(r, &s);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let (y, _) = t.reduce_max_axis(v[0], axis)?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "conv_temporal",
            make: |r| {
                let (b, c, o) = (
                    r.random_range(1..=2),
                    r.random_range(1..=4),
                    r.random_range(1..=4),
                );
                let h = if r.random::<bool>() { 1 } else { 4 };
                let w = r.random_range(4..=16);
                let kw = [1, 3, 5][r.random_range(0..3)];
                let stride = r.random_range(1..=2);
                let valid: Vec<usize> = (0..b).map(|_| r.random_range(1..=w)).collect();
                let x = rand_tensor(r, &[b, c, h, w], -1.0, 1.0);
                let wt = rand_tensor(r, &[o, c, 1, kw], -1.0, 1.0);
                let bias = rand_tensor(r, &[o], -1.0, 1.0);
                let seed = r.random();
                inst(vec![x, wt, bias], false, move |t, v| {
                    let (y, _) =
                        t.conv2d(v[0], v[1], v[2], stride, ConvPadding::Same, Some(&valid))?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "conv_color",
            make: |r| {
                let (b, c, o) = (
                    r.random_range(1..=2),
                    r.random_range(1..=4),
                    r.random_range(1..=4),
                );
                let w = r.random_range(1..=16);
                let valid: Vec<usize> = (0..b).map(|_| r.random_range(1..=w)).collect();
                let x = rand_tensor(r, &[b, c, 4, w], -1.0, 1.0);
                let wt = rand_tensor(r, &[o, c, 4, 1], -1.0, 1.0);
                let bias = rand_tensor(r, &[o], -1.0, 1.0);
                let seed = r.random();
                inst(vec![x, wt, bias], false, move |t, v| {
                    let (y, _) = t.conv2d(v[0], v[1], v[2], 1, ConvPadding::Valid, Some(&valid))?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "maxpool_width",
            make: |r| {
                let s = [
                    r.random_range(1..=2),
                    r.random_range(1..=4),
                    r.random_range(1..=4),
                    r.random_range(2..=16),
                ];
                let stride = r.random_range(1..=2);
                let valid: Vec<usize> = (0..s[0]).map(|_| r.random_range(1..=s[3])).collect();
                let a = distinct_tensor(r, &s);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let (y, _) = t.maxpool_width(v[0], 3, stride, Some(&valid))?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "global_max",
            make: |r| {
                let s = [
                    r.random_range(1..=2),
                    r.random_range(1..=4),
                    r.random_range(1..=4),
                    r.random_range(1..=16),
                ];
                let valid: Vec<usize> = (0..s[0]).map(|_| r.random_range(1..=s[3])).collect();
                let a = distinct_tensor(r, &s);
                let seed = r.random();
                inst(vec![a], false, move |t, v| {
                    let y = t.masked_global_max(v[0], Some(&valid))?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "dense",
            make: |r| {
                let (b, i, o) = (
                    r.random_range(1..=4),
                    r.random_range(1..=8),
                    r.random_range(1..=16),
                );
                let x = rand_tensor(r, &[b, i], -1.0, 1.0);
                let w = rand_tensor(r, &[i, o], -1.0, 1.0);
                let bias = rand_tensor(r, &[o], -1.0, 1.0);
                let seed = r.random();
                inst(vec![x, w, bias], false, move |t, v| {
                    let y = nn::dense(t, v[0], v[1], v[2])?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "dropout",
            make: |r| {
                let s = small_shape(r);
                let a = rand_tensor(r, &s, -2.0, 2.0);
                let (seed, mask_seed) = (r.random(), r.random());
                inst(vec![a], false, move |t, v| {
                    let y = nn::dropout(t, v[0], 0.4, true, &mut rng(mask_seed))?;
                    project(t, y, seed)
                })
            },
        },
        GradCase {
            name: "cross_entropy",
            make: |r| {
                let b = r.random_range(1..=4);
                let logits = rand_tensor(r, &[b, 2], -3.0, 3.0);
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..2)).collect();
                inst(vec![logits], false, move |t, v| {
                    let p = t.softmax(v[0])?;
                    cross_entropy(t, p, &labels)
                })
            },
        },
        GradCase {
            name: "inception",
            make: |r| {
                let (c, w) = (r.random_range(1..=4), r.random_range(3..=10));
                let stride = r.random_range(1..=2);
                let spec = InceptionSpec {
                    in_channels: c,
                    b1: r.random_range(1..=2),
                    b3r: r.random_range(1..=2),
                    b3: r.random_range(1..=2),
                    b5r: r.random_range(1..=2),
                    b5: r.random_range(1..=2),
                    pp: r.random_range(1..=2),
                    stride_w: stride,
                };
                let valid = vec![r.random_range(1..=w), w];
                let mut inputs = vec![distinct_tensor(r, &[2, c, 1, w])];
                for cs in spec.convs() {
                    inputs.push(rand_tensor(r, &cs.weight_shape(), -1.0, 1.0));
                    inputs.push(rand_tensor(r, &[cs.out_channels], -0.5, 0.5));
                }
                let seed = r.random();
                inst(inputs, true, move |t, v| {
                    let x = ActivationMap::new(t, v[0], valid.clone())?;
                    let p: [ConvParams; 6] = std::array::from_fn(|k| ConvParams {
                        weight: v[1 + 2 * k],
                        bias: v[2 + 2 * k],
                    });
                    let y = nn::inception_forward(t, &x, &spec, &p)?;
                    project(t, y.data, seed)
                })
            },
        },
        GradCase {
            name: "triplet_losses",
            make: |r| loop {
                let b = r.random_range(4..=8);
                let m = r.random_range(2..=4);
                let mut labels: Vec<Label> = (0..b)
                    .map(|i| if i % 2 == 0 { Label::Ia } else { Label::NotIa })
                    .collect();
                labels.shuffle(r);
                let e = rand_tensor(r, &[b, m], -1.0, 1.0);
                let s = rand_tensor(r, &[b, m], -1.0, 1.0);
                let margins = MarginConfig {
                    margin: r.random_range(0.2..1.5),
                    margin_prime: r.random_range(0.2..1.5),
                };
                if !off_hinge(&e, &s, &labels, &margins, 1e-2) {
                    continue;
                }
                break inst(vec![e, s], false, move |t, v| {
                    let batch = TripletBatch {
                        embeddings: v[0],
                        subsampled: v[1],
                        labels: &labels,
                    };
                    Ok(mine_batch_all(t, &batch, &margins)?.loss)
                });
            },
        },
    ]
}

// ---- reference implementations ---------------------------------------------

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let m = t.shape()[1];
    &t.data()[i * m..(i + 1) * m]
}

/// Every hinge argument is at least `gap` away from zero and no anchor
/// coincides with its sub-sampled copy.
pub fn off_hinge(e: &Tensor, s: &Tensor, labels: &[Label], m: &MarginConfig, gap: f64) -> bool {
    let b = labels.len();
    for a in 0..b {
        if dist(row(e, a), row(s, a)) < gap {
            return false;
        }
        for n in (0..b).filter(|&n| labels[n] != labels[a]) {
            let dan = dist(row(e, a), row(e, n));
            if (m.margin_prime - dan).abs() < gap {
                return false;
            }
            for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
                if (dist(row(e, a), row(e, p)) - dan + m.margin).abs() < gap {
                    return false;
                }
            }
        }
    }
    true
}

/// Full enumeration of both triplet losses: `(mean, mean', N, N')`,
/// each mean over strictly positive terms (0 when there are none).
pub fn brute_mining(
    e: &Tensor,
    s: &Tensor,
    labels: &[Label],
    m: &MarginConfig,
) -> (f64, f64, usize, usize) {
    let b = labels.len();
    let (mut sum, mut n_useful) = (0.0, 0);
    let (mut sum_p, mut n_useful_p) = (0.0, 0);
    for a in 0..b {
        for p in 0..b {
            for n in 0..b {
                if p == a || labels[p] != labels[a] || labels[n] == labels[a] {
                    continue;
                }
                let v = dist(row(e, a), row(e, p)) - dist(row(e, a), row(e, n)) + m.margin;
                if v > 0.0 {
                    sum += v;
                    n_useful += 1;
                }
            }
        }
    }
    for a in 0..b {
        for n in 0..b {
            if labels[n] == labels[a] {
                continue;
            }
            let hinge = m.margin_prime - dist(row(e, a), row(e, n));
            let v = dist(row(e, a), row(s, a)) + if hinge > 0.0 { hinge } else { 0.0 };
            if v > 0.0 {
                sum_p += v;
                n_useful_p += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (
        mean(sum, n_useful),
        mean(sum_p, n_useful_p),
        n_useful,
        n_useful_p,
    )
}

/// Cross-correlation by direct enumeration, accumulating each output as
/// bias, then kernel column, input channel, kernel row.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    same: bool,
    valid: &[usize],
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let pad = if same { kw / 2 } else { 0 };
    let wo = if same {
        wd.div_ceil(stride)
    } else {
        (wd - kw) / stride + 1
    };
    let ho = h - kh + 1;
    let vo: Vec<usize> = valid
        .iter()
        .map(|&v| {
            if same {
                v.div_ceil(stride)
            } else {
                (v - kw) / stride + 1
            }
        })
        .collect();
    let xi =
        |bi: usize, ci: usize, r: usize, col: usize| x.data()[((bi * c + ci) * h + r) * wd + col];
    let wi =
        |oi: usize, ci: usize, r: usize, col: usize| w.data()[((oi * c + ci) * kh + r) * kw + col];
    let mut out = vec![0.0; nb * o * ho * wo];
    for bi in 0..nb {
        for oi in 0..o {
            for r in 0..ho {
                for j in 0..vo[bi] {
                    let mut acc = b.data()[oi];
                    for kx in 0..kw {
                        let col = (j * stride + kx) as isize - pad as isize;
                        if col < 0 || col as usize >= valid[bi] {
                            continue;
                        }
                        for ci in 0..c {
                            for ky in 0..kh {
                                acc += wi(oi, ci, ky, kx) * xi(bi, ci, r + ky, col as usize);
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + r) * wo + j] = acc;
                }
            }
        }
    }
    (vec![nb, o, ho, wo], out, vo)
}

/// Draws a random temporal (or color) convolution and reports whether the
/// library output equals [`naive_conv`] bit for bit, valid widths included.
pub fn conv_matches_oracle(seed: u64, color: bool) -> bool {
    let mut r = rng(seed);
    let (b, c, o) = (
        r.random_range(1..=2),
        r.random_range(1..=8),
        r.random_range(1..=8),
    );
    let h = if color || r.random::<bool>() { 4 } else { 1 };
    let w = r.random_range(1..=32);
    let spec = if color {
        nn::ConvSpec::color(c, o)
    } else {
        nn::ConvSpec::temporal(c, o, [1, 3, 5][r.random_range(0..3)], r.random_range(1..=2))
    };
    let valid: Vec<usize> = (0..b).map(|_| r.random_range(1..=w)).collect();
    let x = rand_tensor(&mut r, &[b, c, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &spec.weight_shape(), -1.0, 1.0);
    let bias = rand_tensor(&mut r, &[o], -1.0, 1.0);
    let (shape, data, vo) = naive_conv(
        &x,
        &wt,
        &bias,
        spec.stride_w,
        spec.padding == ConvPadding::Same,
        &valid,
    );

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let map = ActivationMap::new(&tape, xv, valid).unwrap();
    let p = ConvParams {
        weight: tape.constant(wt),
        bias: tape.constant(bias),
    };
    let y = if color {
        nn::conv_color(&mut tape, &map, &spec, p)
    } else {
        nn::conv_temporal(&mut tape, &map, &spec, p)
    }
    .unwrap();
    let t = tape.value(y.data);
    t.shape() == shape.as_slice()
        && y.valid_w == vo
        && t.data()
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// `P(s_pos > s_neg) + ½ P(s_pos = s_neg)` over all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == Label::Ia && labels[j] == Label::NotIa {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Two prototype classes that a linear read-out of band energy separates:
/// Ia curves carry a positive pulse in the green row, the others in the
/// infrared row, both with sparse sampling and small noise elsewhere.
pub fn toy_dataset(n: usize, seed: u64) -> Vec<EncodedSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Ia } else { Label::NotIa };
            let width = r.random_range(40..=80);
            let active = if label == Label::Ia { 0 } else { BANDS - 1 };
            let peak = r.random_range(0.3..0.7) * width as f64;
            let mut matrix = vec![0.0; BANDS * width];
            for col in 0..width {
                if r.random::<f64>() > 0.3 {
                    continue;
                }
                for band in 0..BANDS {
                    let v = if band == active {
                        (-((col as f64 - peak) / 8.0).powi(2)).exp() + r.random_range(-0.05..0.05)
                    } else if r.random::<f64>() < 0.3 {
                        r.random_range(-0.1..0.1)
                    } else {
                        0.0
                    };
                    matrix[band * width + col] = v;
                }
            }
            let peak_val = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            matrix.iter_mut().for_each(|v| *v /= peak_val);
            EncodedSample {
                matrix,
                width,
                valid_w: width,
                label,
                norm_factor: peak_val,
            }
        })
        .collect()
}
