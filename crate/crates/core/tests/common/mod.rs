//! Independent oracles shared by the integration suites. Nothing here calls
//! into the fast paths it is used to check.
#![allow(dead_code)]

use fedoap::autodiff::{Rng, Tape, Tensor, Var};

pub fn random_tensor(rng: &mut Rng, shape: &[usize], low: f64, high: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(low, high)).collect()).unwrap()
}

/// Grid spacing for finite-difference inputs: a power of two next to 1e-6.
pub const FD_STEP: f64 = 1.0 / 1048576.0;

/// Step of the five-point stencil for primitives. A power of two, so every
/// stencil point of an on-grid input is exact. Three-point quotients at
/// [`FD_STEP`] lose about 1e-6 relative accuracy to round-off wherever the
/// gradient is near 1e-5.
pub const PRIMITIVE_STEP: f64 = 1.0 / 4096.0;

/// Snaps values to multiples of [`FD_STEP`], nudging exact zeros off the
/// grid origin. Products of two grid values need at most 42 mantissa bits,
/// so multilinear ops evaluate exactly and the central difference carries
/// no round-off from them.
pub fn on_fd_grid(t: &Tensor) -> Tensor {
    t.map(|v| {
        let q = (v / FD_STEP).round() * FD_STEP;
        if q == 0.0 {
            FD_STEP.copysign(v)
        } else {
            q
        }
    })
    .unwrap()
}

/// Relative error with a small floor so exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Scalar objective `Σ out ⊙ weights` for an op built by `build`; used so
/// every output element contributes with a distinct weight.
pub struct ProjectedOp<'a> {
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>,
}

impl<'a> ProjectedOp<'a> {
    pub fn new(build: impl Fn(&mut Tape, &[Var]) -> Var + 'a) -> Self {
        ProjectedOp { build: Box::new(build) }
    }

    pub fn eval(&self, inputs: &[Tensor], weights: Option<&Tensor>) -> (Tape, Vec<Var>, Var, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars);
        let out_shape = tape.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let n: usize = out_shape.iter().product();
                let mut rng = Rng::new(0xC0FFEE ^ n as u64);
                random_tensor(&mut rng, &out_shape, -1.0, 1.0)
            }
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let root = tape.sum(prod).unwrap();
        (tape, vars, root, w)
    }

    pub fn value(&self, inputs: &[Tensor], weights: &Tensor) -> f64 {
        let (tape, _, root, _) = self.eval(inputs, Some(weights));
        tape.value(root).data()[0]
    }

    /// Output of the op and the smooth piece it was evaluated on.
    pub fn output(&self, inputs: &[Tensor]) -> (Tensor, u64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars);
        (tape.value(out).clone(), tape.branch_fingerprint())
    }

    /// Largest relative error between the tape gradient and a five-point
    /// central difference, over `probes` random coordinates of every input.
    /// Probes whose stencil crosses a relu or max-pool switch are redrawn.
    pub fn max_grad_error(&self, inputs: &[Tensor], probes: usize, h: f64, rng: &mut Rng) -> f64 {
        let inputs: Vec<Tensor> = inputs.iter().map(on_fd_grid).collect();
        let inputs = &inputs[..];
        let (tape, vars, root, weights) = self.eval(inputs, None);
        let base = tape.branch_fingerprint();
        let grads = tape.backward(root).unwrap();
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[k]).unwrap();
            assert_eq!(g.shape(), input.shape());
            let (mut accepted, mut attempts) = (0, 0);
            while accepted < probes && attempts < 20 * probes {
                attempts += 1;
                let idx = rng.below(input.numel());
                let mut smooth = true;
                // differencing per output element before projecting keeps
                // round-off from the untouched elements out of the quotient
                let mut diff = |step: f64| -> f64 {
                    let shifted = |s: f64| {
                        let mut p = inputs.to_vec();
                        p[k].data_mut()[idx] += s;
                        self.output(&p)
                    };
                    let ((op, fp), (om, fm)) = (shifted(step), shifted(-step));
                    smooth &= fp == base && fm == base;
                    op.data()
                        .iter()
                        .zip(om.data())
                        .zip(weights.data())
                        .map(|((a, b), w)| (a - b) * w)
                        .sum()
                };
                let (near, far) = (diff(h), diff(2.0 * h));
                if !smooth {
                    continue;
                }
                let numeric = (8.0 * near - far) / (12.0 * h);
                worst = worst.max(rel_err(g.data()[idx], numeric));
                accepted += 1;
            }
            assert!(accepted == probes, "every probe straddled a kink");
        }
        worst
    }
}

/// Direct nested-loop 2-D convolution with zero padding.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xv = |s: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((s * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ch in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let wv = w.data()[((oc * c + ch) * kh + a) * kw + bb];
                                let ii = (i * stride + a) as isize - pad as isize;
                                let jj = (j * stride + bb) as isize - pad as isize;
                                acc += wv * xv(s, ch, ii, jj);
                            }
                        }
                    }
                    out[((s * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Full-matrix multi-head attention: materializes the whole concatenated
/// score matrix for each head with plain loops.
pub fn attention_reference(q: &Tensor, keys: &[&Tensor], values: &[&Tensor], heads: usize) -> Tensor {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let mut k_rows: Vec<&[f64]> = Vec::new();
    let mut v_rows: Vec<&[f64]> = Vec::new();
    for (k, v) in keys.iter().zip(values) {
        k_rows.extend(k.data().chunks(d));
        v_rows.extend(v.data().chunks(d));
    }
    let total = k_rows.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..nq {
            let qi = &q.data()[i * d..(i + 1) * d];
            let mut scores = vec![0.0; total];
            for (t, kr) in k_rows.iter().enumerate() {
                scores[t] = cols.clone().map(|c| qi[c] * kr[c]).sum::<f64>() * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i * d + c] = (0..total).map(|t| e[t] / z * v_rows[t][c]).sum();
            }
        }
    }
    Tensor::new(vec![nq, d], out).unwrap()
}

/// Group normalization of a `[N, C, S]` view, no affine, written with plain loops.
pub fn group_norm_reference(x: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let cg = c / groups;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for g in 0..groups {
            let idx: Vec<usize> = (g * cg..(g + 1) * cg)
                .flat_map(|ch| (0..s).map(move |p| (b * c + ch) * s + p))
                .collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                out[i] = (x.data()[i] - mean) / (var + eps).sqrt();
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Pixel-counting Dice with the empty/empty convention.
pub fn dice_reference(pred: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (a, b) in pred.iter().zip(target) {
        let (a, b) = (*a == 1.0, *b == 1.0);
        if a {
            p += 1;
        }
        if b {
            t += 1;
        }
        if a && b {
            inter += 1;
        }
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.05, 1.5);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst finite-difference error per primitive over `trials` randomized
/// small shapes, five probes per input per trial.
pub fn primitive_gradient_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut results = Vec::new();
    let mut run = |name: &'static str,
                   rng: &mut Rng,
                   make: &dyn Fn(&mut Rng) -> Vec<Tensor>,
                   op: &ProjectedOp| {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs = make(rng);
            worst = worst.max(op.max_grad_error(&inputs, 5, PRIMITIVE_STEP, rng));
        }
        results.push((name, worst));
    };
    let dims = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);

    run(
        "add",
        &mut rng,
        &|r| {
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 4));
            vec![random_tensor(r, &[a, b], -1.0, 1.0), random_tensor(r, &[b], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.add(v[0], v[1]).unwrap()),
    );
    run(
        "sub",
        &mut rng,
        &|r| {
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 4));
            vec![random_tensor(r, &[a, b], -1.0, 1.0), random_tensor(r, &[a, b], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.sub(v[0], v[1]).unwrap()),
    );
    run(
        "mul",
        &mut rng,
        &|r| {
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 4));
            vec![random_tensor(r, &[2, a, b], -1.0, 1.0), random_tensor(r, &[a, b], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.mul(v[0], v[1]).unwrap()),
    );
    run(
        "div",
        &mut rng,
        &|r| {
            let a = dims(r, 1, 5);
            vec![random_tensor(r, &[a], -1.0, 1.0), random_tensor(r, &[a], 0.5, 2.0)]
        },
        &ProjectedOp::new(|t, v| t.div(v[0], v[1]).unwrap()),
    );
    run(
        "scale",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 6);
            vec![random_tensor(r, &[d0], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.scale(v[0], -1.7).unwrap()),
    );
    run(
        "add_scalar",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 6);
            vec![random_tensor(r, &[d0], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.add_scalar(v[0], 0.3).unwrap()),
    );
    run(
        "matmul",
        &mut rng,
        &|r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
            vec![random_tensor(r, &[m, k], -1.0, 1.0), random_tensor(r, &[k, n], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
    );
    run(
        "transpose",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 4); let d1 = dims(r, 1, 4);
            vec![random_tensor(r, &[d0, d1], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.transpose(v[0]).unwrap()),
    );
    run(
        "conv2d",
        &mut rng,
        &|r| {
            let (c, o, h) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 3, 6));
            let k = [1, 3][r.below(2)];
            vec![
                random_tensor(r, &[2, c, h, h], -1.0, 1.0),
                random_tensor(r, &[o, c, k, k], -1.0, 1.0),
                random_tensor(r, &[o], -1.0, 1.0),
            ]
        },
        &ProjectedOp::new(|t, v| {
            let k = t.value(v[1]).shape()[2];
            t.conv2d(v[0], v[1], Some(v[2]), 1, k / 2).unwrap()
        }),
    );
    run(
        "conv2d_strided",
        &mut rng,
        &|r| {
            let (c, o, h) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 4, 7));
            vec![random_tensor(r, &[1, c, h, h], -1.0, 1.0), random_tensor(r, &[o, c, 3, 3], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1).unwrap()),
    );
    run(
        "conv_transpose2d",
        &mut rng,
        &|r| {
            let (c, o, h) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4));
            vec![
                random_tensor(r, &[2, c, h, h], -1.0, 1.0),
                random_tensor(r, &[c, o, 2, 2], -1.0, 1.0),
                random_tensor(r, &[o], -1.0, 1.0),
            ]
        },
        &ProjectedOp::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2).unwrap()),
    );
    run(
        "maxpool2d",
        &mut rng,
        &|r| {
            let h = 2 * dims(r, 1, 3);
            vec![random_tensor(r, &[2, 2, h, h], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.maxpool2d(v[0]).unwrap()),
    );
    run(
        "relu",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 8);
            vec![away_from_zero(r, &[d0])]
        },
        &ProjectedOp::new(|t, v| t.relu(v[0]).unwrap()),
    );
    run(
        "sigmoid",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 8);
            vec![random_tensor(r, &[d0], -3.0, 3.0)]
        },
        &ProjectedOp::new(|t, v| t.sigmoid(v[0]).unwrap()),
    );
    run(
        "softmax",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 3); let d1 = dims(r, 2, 5);
            vec![random_tensor(r, &[d0, d1], -2.0, 2.0)]
        },
        &ProjectedOp::new(|t, v| t.softmax(v[0]).unwrap()),
    );
    run(
        "group_norm",
        &mut rng,
        &|r| {
            let c = 2 * dims(r, 1, 2);
            vec![
                random_tensor(r, &[2, c, 3, 3], -2.0, 2.0),
                random_tensor(r, &[c], 0.5, 1.5),
                random_tensor(r, &[c], -0.5, 0.5),
            ]
        },
        &ProjectedOp::new(|t, v| t.group_norm(v[0], 2, Some(v[1]), Some(v[2]), 1e-5).unwrap()),
    );
    run(
        "instance_norm",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 3);
            vec![random_tensor(r, &[2, d0, 3, 3], -2.0, 2.0)]
        },
        &ProjectedOp::new(|t, v| t.instance_norm(v[0], 1e-5).unwrap()),
    );
    run(
        "concat",
        &mut rng,
        &|r| {
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 3));
            vec![random_tensor(r, &[2, a, 3], -1.0, 1.0), random_tensor(r, &[2, b, 3], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
    );
    run(
        "slice",
        &mut rng,
        &|r| {
            let d0 = dims(r, 3, 6);
            vec![random_tensor(r, &[3, d0, 2], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.slice(v[0], 1, 1, 2).unwrap()),
    );
    run(
        "reshape",
        &mut rng,
        &|r| vec![random_tensor(r, &[2, 3, 2], -1.0, 1.0)],
        &ProjectedOp::new(|t, v| t.reshape(v[0], &[3, 4]).unwrap()),
    );
    run(
        "sum",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 8);
            vec![random_tensor(r, &[d0], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.sum(v[0]).unwrap()),
    );
    run(
        "mean",
        &mut rng,
        &|r| {
            let d0 = dims(r, 1, 8);
            vec![random_tensor(r, &[d0], -1.0, 1.0)]
        },
        &ProjectedOp::new(|t, v| t.mean(v[0]).unwrap()),
    );
    run(
        "bce_with_logits",
        &mut rng,
        &|r| {
            let n = dims(r, 1, 8);
            let target: Vec<f64> = (0..n).map(|_| r.below(2) as f64).collect();
            vec![random_tensor(r, &[n], -4.0, 4.0), Tensor::new(vec![n], target).unwrap()]
        },
        &ProjectedOp::new(|t, v| t.bce_with_logits(v[0], v[1]).unwrap()),
    );
    results
}

/// Composite of conv, group norm and softmax, checked end to end.
pub fn composite_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let op = ProjectedOp::new(|t, v| {
        let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        let n = t.group_norm(c, 2, Some(v[3]), None, 1e-5).unwrap();
        let r = t.reshape(n, &[4, 9]).unwrap();
        t.softmax(r).unwrap()
    });
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs = vec![
            random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
            random_tensor(&mut rng, &[4, 2, 3, 3], -1.0, 1.0),
            random_tensor(&mut rng, &[4], -1.0, 1.0),
            random_tensor(&mut rng, &[4], 0.5, 1.5),
        ];
        worst = worst.max(op.max_grad_error(&inputs, 5, PRIMITIVE_STEP, &mut rng));
    }
    worst
}

/// Small but complete network used for end-to-end gradient probes.
pub fn probe_model_config() -> fedoap::segnet::ModelConfig {
    fedoap::segnet::ModelConfig {
        image_size: 16,
        in_channels: 1,
        base_channels: 4,
        depth: 3,
        attention_heads: 4,
    }
}

/// Composite-loss settings with a low threshold so the inconsistency mask
/// is non-empty at initialization and the perturbed branch is exercised.
pub fn probe_pbl_config() -> fedoap::calibration::PblConfig {
    fedoap::calibration::PblConfig {
        tau: 0.45,
        lambda: 0.3,
        noise_variance: 0.1,
    }
}

/// Composite PBL loss of the full forward pass, plus a fingerprint of the
/// smooth piece it was evaluated on: the inconsistency mask bits and the
/// tape's relu/max-pool branch pattern. The noise stream restarts from the
/// same seed on every call.
pub fn end_to_end_loss(
    params: &fedoap::segnet::ParameterStore,
    config: &fedoap::segnet::ModelConfig,
    x: &Tensor,
    y: &Tensor,
    foreign: &[fedoap::segnet::KVTokens],
) -> (f64, (Tensor, u64)) {
    use fedoap::calibration::{composite_pbl_on_tape, inconsistency_mask};
    use fedoap::segnet::{forward_on_tape, ForwardOptions};
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let logits = forward_on_tape(&mut tape, &vars, config, xv, foreign, ForwardOptions::default()).unwrap();
    let cfg = probe_pbl_config();
    let delta = inconsistency_mask(y, tape.value(logits), cfg.tau).unwrap();
    let (l, _) = composite_pbl_on_tape(&mut tape, logits, yv, &cfg, &mut Rng::new(99)).unwrap();
    (tape.value(l).data()[0], (delta, tape.branch_fingerprint()))
}

pub struct EndToEndReport {
    pub worst: f64,
    pub probes: usize,
    /// Probes redrawn because the stencil straddled a kink or a mask flip,
    /// where no difference quotient approximates the derivative.
    pub redrawn: usize,
}

/// Step of the end-to-end stencil. Smaller steps drown gradients near 1e-6
/// in round-off of an O(1) loss (1e-5 still reached 4e-5 relative error);
/// the five-point stencil keeps truncation error at O(h^4).
pub const END_TO_END_STEP: f64 = 1.0 / 16384.0;

/// Five-point central differences on five random parameter coordinates
/// per trial, for the full network plus composite PBL loss.
pub fn end_to_end_gradient_error(trials: usize, seed: u64) -> EndToEndReport {
    use fedoap::segnet::{forward_on_tape, init_model, ForwardOptions, KVTokens, ParameterStore};
    let h = END_TO_END_STEP;
    let config = probe_model_config();
    let d = config.bottleneck_dim();
    let s = config.image_size;
    let mut rng = Rng::new(seed);
    let mut report = EndToEndReport {
        worst: 0.0,
        probes: 0,
        redrawn: 0,
    };
    for trial in 0..trials {
        let params = init_model(&config, seed ^ (trial as u64 + 1)).unwrap();
        let x = random_tensor(&mut rng, &[2, 1, s, s], 0.0, 1.0);
        let y = random_tensor(&mut rng, &[2, 1, s, s], 0.0, 1.0)
            .map(|v| if v > 0.7 { 1.0 } else { 0.0 })
            .unwrap();
        let foreign: Vec<KVTokens> = (1..3)
            .map(|c| {
                let k = random_tensor(&mut rng, &[4, d], -1.0, 1.0);
                let v = random_tensor(&mut rng, &[4, d], -1.0, 1.0);
                KVTokens::new(c, 0, k, v).unwrap()
            })
            .collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let logits = forward_on_tape(&mut tape, &vars, &config, xv, &foreign, ForwardOptions::default()).unwrap();
        let (root, _) =
            fedoap::calibration::composite_pbl_on_tape(&mut tape, logits, yv, &probe_pbl_config(), &mut Rng::new(99))
                .unwrap();
        let mut grads = tape.backward(root).unwrap();
        let analytic = ParameterStore::collect_grads(&vars, &mut grads);
        let (_, (base_delta, base_branches)) = end_to_end_loss(&params, &config, &x, &y, &foreign);

        let names: Vec<String> = params.names().map(String::from).collect();
        let mut accepted = 0;
        while accepted < 5 {
            let name = &names[rng.below(names.len())];
            let idx = rng.below(params.get(name).unwrap().numel());
            let mut smooth = true;
            let mut eval = |step: f64| {
                let mut p = params.clone();
                let mut t = p.get(name).unwrap().clone();
                t.data_mut()[idx] += step;
                p.set(name, t).unwrap();
                let (l, (delta, branches)) = end_to_end_loss(&p, &config, &x, &y, &foreign);
                smooth &= branches == base_branches && delta.bit_eq(&base_delta);
                l
            };
            let near = eval(h) - eval(-h);
            let far = eval(2.0 * h) - eval(-2.0 * h);
            if !smooth {
                report.redrawn += 1;
                continue;
            }
            let numeric = (8.0 * near - far) / (12.0 * h);
            report.worst = report.worst.max(rel_err(analytic[name].data()[idx], numeric));
            accepted += 1;
        }
        report.probes += accepted;
    }
    report
}

/// Bernoulli(p) mask of the given shape.
pub fn random_mask(rng: &mut Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| if rng.next_unit() < p { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

/// Group norm over the channel axis of `[n, d]` tokens, through the NCHW oracle.
pub fn tokens_group_norm(x: &Tensor, groups: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut channels_first = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            channels_first[c * n + i] = x.data()[i * d + c];
        }
    }
    let normed = group_norm_reference(&Tensor::new(vec![1, d, n], channels_first).unwrap(), groups, 1e-5);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            out[i * d + c] = normed.data()[c * n + i];
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// A federation small enough to train in well under a second per round.
pub fn tiny_experiment() -> fedoap::harness::ExperimentConfig {
    fedoap::harness::ExperimentConfig {
        samples_per_client: 20,
        rounds: 2,
        finetune_epochs: 1,
        image_size: 16,
        base_channels: 4,
        depth: 2,
        attention_heads: 4,
        lr: 1e-3,
        batch_size: 4,
        anchor_size: 2,
        ..Default::default()
    }
}
