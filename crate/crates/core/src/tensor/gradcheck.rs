//! Central finite-difference checking of tape gradients in f64.
//!
//! Coordinates whose ±h perturbation flips a ReLU sign or a max-pool winner
//! are not differentiable at that scale; they are counted as skipped rather
//! than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|i| i.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.max_rel_error() < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences. Non-scalar
/// outputs are contracted with fixed random weights first.
pub fn check_gradients<F>(inputs: &[(String, Tensor<f64>)], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<u64>, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), with_grad)).collect();
        let mut out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            let dims = tape.value(out).dims().to_vec();
            let r = projection
                .get_or_insert_with(|| Tensor::uniform(&dims, -1.0, 1.0, &mut rng))
                .clone();
            out = tape.weighted_sum(out, &r)?;
        }
        let value = tape.value(out).item();
        let sig = tape.kink_signature();
        if !with_grad {
            return Ok((value, sig, None));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .map(|v| grads.wrt(*v).cloned().expect("leaf requires grad"))
            .collect();
        Ok((value, sig, Some(g)))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, base_sig, analytic) = eval(&base, true)?;
    let analytic = analytic.expect("requested");

    let mut coord_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..t.len()).collect();
        if let Some(limit) = opts.max_coords {
            if limit < coords.len() {
                for i in 0..limit {
                    let j = coord_rng.random_range(i..coords.len());
                    coords.swap(i, j);
                }
                coords.truncate(limit);
            }
        }
        let mut report = InputReport {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for &c in &coords {
            let mut plus = base.clone();
            plus[k].data_mut()[c] += opts.step;
            let (fp, sp, _) = eval(&plus, false)?;
            let mut minus = base.clone();
            minus[k].data_mut()[c] -= opts.step;
            let (fm, sm, _) = eval(&minus, false)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = rel_error(analytic[k].data()[c], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
    })
}

/// Members of the operation set, with the extra hyperparameters needed to
/// synthesise their inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNormTrain,
    BatchNormEval,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        out_features: usize,
    },
    Add,
    ChannelConcat {
        other_channels: usize,
    },
    Softmax,
    CrossEntropy,
    KlSoft {
        temperature: f64,
    },
    RgbToGray,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNormTrain => "batchnorm2d(train)",
            OpKind::BatchNormEval => "batchnorm2d(eval)",
            OpKind::Relu => "relu",
            OpKind::MaxPool { .. } => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avgpool",
            OpKind::Linear { .. } => "linear",
            OpKind::Add => "elementwise_add",
            OpKind::ChannelConcat { .. } => "channel_concat",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy_with_logits",
            OpKind::KlSoft { .. } => "kl_divergence_of_softened_logits",
            OpKind::RgbToGray => "rgb_to_gray",
        }
    }

    /// One representative configuration per operation, used by test suites.
    pub fn catalogue() -> Vec<(OpKind, Vec<usize>)> {
        vec![
            (
                OpKind::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
                vec![2, 3, 7, 7],
            ),
            (
                OpKind::Conv2d {
                    out_channels: 5,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    bias: true,
                },
                vec![2, 3, 4, 4],
            ),
            (
                OpKind::Conv2d {
                    out_channels: 3,
                    kernel: 7,
                    stride: 2,
                    padding: 3,
                    bias: false,
                },
                vec![1, 2, 9, 9],
            ),
            (OpKind::BatchNormTrain, vec![4, 3, 3, 3]),
            (OpKind::BatchNormEval, vec![4, 3, 3, 3]),
            (OpKind::Relu, vec![2, 3, 4, 4]),
            (
                OpKind::MaxPool {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                vec![2, 2, 7, 7],
            ),
            (OpKind::GlobalAvgPool, vec![2, 3, 4, 5]),
            (OpKind::Linear { out_features: 4 }, vec![3, 6]),
            (OpKind::Add, vec![2, 3, 3, 3]),
            (OpKind::ChannelConcat { other_channels: 2 }, vec![2, 3, 3, 3]),
            (OpKind::Softmax, vec![3, 5]),
            (OpKind::CrossEntropy, vec![4, 5]),
            (OpKind::KlSoft { temperature: 2.0 }, vec![4, 5]),
            (OpKind::RgbToGray, vec![2, 3, 4, 4]),
        ]
    }
}

/// Finite-difference check of one operation on random f64 inputs of the
/// given leading-input dims.
pub fn grad_check(op: OpKind, dims: &[usize], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tolerance,
        seed,
        ..GradCheckOptions::default()
    };
    let x = Tensor::<f64>::uniform(dims, -1.0, 1.0, &mut rng);
    let named = |pairs: Vec<(&str, Tensor<f64>)>| -> Vec<(String, Tensor<f64>)> {
        pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };
    match op {
        OpKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let w = Tensor::uniform(&[out_channels, dims[1], kernel, kernel], -0.5, 0.5, &mut rng);
            let mut inputs = vec![("x", x), ("weight", w)];
            if bias {
                inputs.push(("bias", Tensor::uniform(&[out_channels], -0.5, 0.5, &mut rng)));
            }
            check_gradients(
                &named(inputs),
                |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, padding),
                opts,
            )
        }
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            let c = dims[1];
            let gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut rng);
            let beta = Tensor::uniform(&[c], -0.5, 0.5, &mut rng);
            let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
            let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
            let mode = if op == OpKind::BatchNormTrain {
                super::tape::BnMode::Batch
            } else {
                super::tape::BnMode::Running
            };
            check_gradients(
                &named(vec![("x", x), ("gamma", gamma), ("beta", beta)]),
                |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], 1e-5, mode, Some((&rm, &rv)))?.0),
                opts,
            )
        }
        OpKind::Relu => {
            // Keep inputs away from the kink.
            let x = x.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
            check_gradients(&named(vec![("x", x)]), |t, v| t.relu(v[0]), opts)
        }
        OpKind::MaxPool {
            kernel,
            stride,
            padding,
        } => check_gradients(
            &named(vec![("x", x)]),
            |t, v| t.maxpool2d(v[0], kernel, stride, padding),
            opts,
        ),
        OpKind::GlobalAvgPool => check_gradients(&named(vec![("x", x)]), |t, v| t.global_avgpool(v[0]), opts),
        OpKind::Linear { out_features } => {
            let w = Tensor::uniform(&[out_features, dims[1]], -0.5, 0.5, &mut rng);
            let b = Tensor::uniform(&[out_features], -0.5, 0.5, &mut rng);
            check_gradients(
                &named(vec![("x", x), ("weight", w), ("bias", b)]),
                |t, v| t.linear(v[0], v[1], Some(v[2])),
                opts,
            )
        }
        OpKind::Add => {
            let y = Tensor::uniform(dims, -1.0, 1.0, &mut rng);
            check_gradients(&named(vec![("a", x), ("b", y)]), |t, v| t.add(v[0], v[1]), opts)
        }
        OpKind::ChannelConcat { other_channels } => {
            let y = Tensor::uniform(&[dims[0], other_channels, dims[2], dims[3]], -1.0, 1.0, &mut rng);
            check_gradients(
                &named(vec![("a", x), ("b", y)]),
                |t, v| t.concat_channels(v[0], v[1]),
                opts,
            )
        }
        OpKind::Softmax => check_gradients(&named(vec![("x", x)]), |t, v| t.softmax(v[0]), opts),
        OpKind::CrossEntropy => {
            let targets: Vec<usize> = (0..dims[0]).map(|_| rng.random_range(0..dims[1])).collect();
            check_gradients(
                &named(vec![("logits", x.map(|v| 3.0 * v))]),
                |t, v| t.cross_entropy(v[0], &targets),
                opts,
            )
        }
        OpKind::KlSoft { temperature } => {
            let teacher = Tensor::uniform(dims, -3.0, 3.0, &mut rng);
            check_gradients(
                &named(vec![("student", x.map(|v| 3.0 * v))]),
                |t, v| t.kl_soft(v[0], &teacher, temperature),
                opts,
            )
        }
        OpKind::RgbToGray => check_gradients(
            &named(vec![("x", x)]),
            |t, v| t.rgb_to_gray(v[0], [0.299, 0.587, 0.114]),
            opts,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_away_from_kink_is_near_exact() {
        let r = grad_check(OpKind::Relu, &[2, 3, 4, 4], 1e-6, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn pointwise_conv_passes() {
        let op = OpKind::Conv2d {
            out_channels: 4,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: true,
        };
        let r = grad_check(op, &[2, 3, 5, 5], 1e-4, 1).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn batchnorm_train_batch_four_passes() {
        let r = grad_check(OpKind::BatchNormTrain, &[4, 3, 2, 2], 1e-4, 7).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_op_passes_across_seeds() {
        for seed in 0..5 {
            for (op, dims) in OpKind::catalogue() {
                let r = grad_check(op, &dims, 1e-4, seed).unwrap();
                assert!(r.passed(), "{} seed {seed}: {r:?}", op.name());
            }
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // d/dx of 3x reported by a tape that computes 2x must fail.
        let x = Tensor::<f64>::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = check_gradients(
            &[("x".into(), x)],
            |t, v| {
                let y = t.scale(v[0], 2.0)?;
                let s = t.sum(y)?;
                // The x-dependence of this constant is invisible to the tape.
                let hidden = t.value(v[0]).sum_f64();
                let c = t.constant(Tensor::scalar(hidden));
                t.add(s, c)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
