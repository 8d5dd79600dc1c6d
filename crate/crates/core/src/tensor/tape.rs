//! Wengert tape. Every op appends a node holding its output and whatever it
//! needs for the backward rule; `backward` replays the nodes in reverse
//! insertion order, which is a reverse topological order because inputs are
//! always recorded before their consumers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvShape};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Index of a trainable parameter in a model's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with supplied running statistics.
    Running,
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        shape: ConvShape,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BlockAvgPool {
        x: usize,
    },
    Flatten {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
    },
    CrossEntropy {
        x: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    KlSoft {
        x: usize,
        p_student: Vec<T>,
        p_teacher: Vec<T>,
        temperature: f64,
    },
    RgbToGray {
        x: usize,
        coeffs: [f64; 3],
    },
    SumSquares {
        x: usize,
    },
    WeightedSqDist {
        x: usize,
        anchor: Tensor<T>,
        weight: Tensor<T>,
    },
    WeightedSum {
        x: usize,
        weights: Tensor<T>,
    },
    Scale {
        x: usize,
        factor: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    scope: String,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    tape: u64,
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Elem> Grads<T> {
    /// Gradient of a requires-grad leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.index)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

fn accumulate<T: Elem>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            scope: String::from("<root>"),
        }
    }

    /// Names the layer that subsequent ops belong to, for error messages.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope.clear();
        self.scope.push_str(scope);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerics {
                layer: self.scope.clone(),
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape_err(&self, msg: String) -> Error {
        Error::shape(self.scope.clone(), msg)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a model parameter. Only trainable parameters receive
    /// gradients.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: Some(id) },
            requires_grad: trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let xt = &self.nodes[xi].value;
        let wt = &self.nodes[wi].value;
        let [n, cin, h, wd] = xt.nchw(&self.scope)?;
        let (cout, kh, kw) = match wt.dims()[..] {
            [co, ci, kh, kw] if ci == cin => (co, kh, kw),
            _ => {
                return Err(self.shape_err(format!(
                    "conv weight {:?} incompatible with input {:?}",
                    wt.dims(),
                    xt.dims()
                )))
            }
        };
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(self.shape_err(format!(
                "kernel {kh}×{kw} stride {stride} pad {pad} does not fit {h}×{wd}"
            )));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.dims() != [cout] {
                return Err(self.shape_err(format!(
                    "conv bias {:?} but {cout} output channels",
                    self.nodes[bi].value.dims()
                )));
            }
        }
        let shape = ConvShape {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let y = kernels::conv2d_forward(xt, wt, bi.map(|b| &self.nodes[b].value), &shape);
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let rg = self.rg(&ids);
        self.push(
            y,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                shape,
            },
            rg,
        )
    }

    /// Batch normalisation. With [`BnMode::Batch`] the batch statistics are
    /// returned as `(mean, biased var)` so the caller can update running
    /// estimates; with [`BnMode::Running`] `running` must be supplied.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let xt = &self.nodes[xi].value;
        let [_, c, _, _] = xt.nchw(&self.scope)?;
        if self.nodes[gi].value.dims() != [c] || self.nodes[bi].value.dims() != [c] {
            return Err(self.shape_err(format!("batchnorm affine params must be [{c}]")));
        }
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let (m, v) = kernels::channel_mean_var(xt);
                (m.clone(), v.clone(), Some((m, v)))
            }
            BnMode::Running => {
                let (m, v) = running.ok_or_else(|| self.shape_err("running stats missing".into()))?;
                if m.len() != c || v.len() != c {
                    return Err(self.shape_err(format!("running stats must have {c} entries")));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let out = kernels::bn_apply(xt, &self.nodes[gi].value, &self.nodes[bi].value, &mean, &var, eps);
        let rg = self.rg(&[xi, gi, bi]);
        let v = self.push(
            out.y,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: out.xhat,
                inv_std: out.inv_std,
                mode,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let y = self.nodes[xi].value.map(|v| v.max(T::zero()));
        let rg = self.rg(&[xi]);
        self.push(y, Op::Relu { x: xi }, rg)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        let [_, _, h, w] = xt.nchw(&self.scope)?;
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k || pad >= k {
            return Err(self.shape_err(format!("maxpool k={k} s={stride} p={pad} does not fit {h}×{w}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let (y, argmax) = kernels::maxpool_forward(xt, k, stride, pad, ho, wo);
        let rg = self.rg(&[xi]);
        self.push(y, Op::MaxPool { x: xi, argmax }, rg)
    }

    /// Average over equal non-overlapping blocks down to `out_h × out_w`.
    pub fn block_avgpool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        let [_, _, h, w] = xt.nchw(&self.scope)?;
        if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
            return Err(self.shape_err(format!("{h}×{w} does not split into {out_h}×{out_w} equal blocks")));
        }
        let y = kernels::block_avgpool(xt, out_h, out_w);
        let rg = self.rg(&[xi]);
        self.push(y, Op::BlockAvgPool { x: xi }, rg)
    }

    /// N×C×H×W → N×C×1×1.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        self.block_avgpool(x, 1, 1)
    }

    /// N×… → N×(product of the rest).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        let n = xt.dims()[0];
        let y = xt.clone().reshape(&[n, xt.len() / n])?;
        let rg = self.rg(&[xi]);
        self.push(y, Op::Flatten { x: xi }, rg)
    }

    /// `y = x·Wᵀ + b` with `x: N×In`, `W: Out×In`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let xt = &self.nodes[xi].value;
        let wt = &self.nodes[wi].value;
        let (n, fin) = match xt.dims()[..] {
            [n, f] => (n, f),
            _ => return Err(self.shape_err(format!("linear expects N×In, got {:?}", xt.dims()))),
        };
        let fout = match wt.dims()[..] {
            [o, i] if i == fin => o,
            _ => {
                return Err(self.shape_err(format!(
                    "linear weight {:?} incompatible with input {:?}",
                    wt.dims(),
                    xt.dims()
                )))
            }
        };
        let mut y = vec![T::zero(); n * fout];
        let mut beta = T::zero();
        if let Some(bi) = bi {
            let bt = &self.nodes[bi].value;
            if bt.dims() != [fout] {
                return Err(self.shape_err(format!("linear bias {:?} but {fout} outputs", bt.dims())));
            }
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(bt.data());
            }
            beta = T::one();
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            xt.data(),
            fin as isize,
            1,
            wt.data(),
            1,
            fin as isize,
            beta,
            &mut y,
            fout as isize,
            1,
        );
        let y = Tensor::from_vec(vec![n, fout], y)?;
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let rg = self.rg(&ids);
        self.push(y, Op::Linear { x: xi, w: wi, b: bi }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if at.dims() != bt.dims() {
            return Err(self.shape_err(format!("residual add of {:?} and {:?}", at.dims(), bt.dims())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| *x + *y).collect();
        let y = Tensor::from_vec(at.dims().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        self.push(y, Op::Add { a: ai, b: bi }, rg)
    }

    /// Concatenation along the channel axis of two N×C×H×W tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let [n, ca, h, w] = at.nchw(&self.scope)?;
        let [nb, cb, hb, wb] = bt.nchw(&self.scope)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(self.shape_err(format!("cannot concat {:?} with {:?}", at.dims(), bt.dims())));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(at.len() + bt.len());
        for s in 0..n {
            data.extend_from_slice(&at.data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&bt.data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let y = Tensor::from_vec(vec![n, ca + cb, h, w], data)?;
        let rg = self.rg(&[ai, bi]);
        self.push(y, Op::ConcatChannels { a: ai, b: bi }, rg)
    }

    /// Row-wise softmax of N×K logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        let k = self.matrix_cols(xt)?;
        let y = Tensor::from_vec(xt.dims().to_vec(), kernels::softmax_rows(xt.data(), k, 1.0))?;
        let rg = self.rg(&[xi]);
        self.push(y, Op::Softmax { x: xi }, rg)
    }

    fn matrix_cols(&self, t: &Tensor<T>) -> Result<usize> {
        match t.dims()[..] {
            [_, k] => Ok(k),
            _ => Err(self.shape_err(format!("expected N×K logits, got {:?}", t.dims()))),
        }
    }

    /// Mean cross-entropy of N×K logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let xi = self.idx(logits);
        let xt = &self.nodes[xi].value;
        let k = self.matrix_cols(xt)?;
        let n = xt.dims()[0];
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(self.shape_err(format!("{} targets for {n} rows of {k} classes", targets.len())));
        }
        let logp = kernels::log_softmax_rows(xt.data(), k, 1.0);
        let loss = -targets.iter().enumerate().map(|(r, &t)| logp[r * k + t]).sum::<f64>() / n as f64;
        let probs = logp.iter().map(|l| T::of(l.exp())).collect();
        let rg = self.rg(&[xi]);
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                x: xi,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Batch mean of KL(softmax(teacher/T) ‖ softmax(student/T)); the teacher
    /// logits are constants.
    pub fn kl_soft(&mut self, student: Var, teacher: &Tensor<T>, temperature: f64) -> Result<Var> {
        let xi = self.idx(student);
        let xt = &self.nodes[xi].value;
        let k = self.matrix_cols(xt)?;
        if teacher.dims() != xt.dims() {
            return Err(self.shape_err(format!(
                "teacher logits {:?} vs student {:?}",
                teacher.dims(),
                xt.dims()
            )));
        }
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let n = xt.dims()[0];
        let log_s = kernels::log_softmax_rows(xt.data(), k, temperature);
        let log_t = kernels::log_softmax_rows(teacher.data(), k, temperature);
        let loss = log_t
            .iter()
            .zip(&log_s)
            .map(|(lt, ls)| lt.exp() * (lt - ls))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(&[xi]);
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::KlSoft {
                x: xi,
                p_student: log_s.iter().map(|l| T::of(l.exp())).collect(),
                p_teacher: log_t.iter().map(|l| T::of(l.exp())).collect(),
                temperature,
            },
            rg,
        )
    }

    /// Weighted channel sum N×3×H×W → N×1×H×W.
    pub fn rgb_to_gray(&mut self, x: Var, coeffs: [f64; 3]) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        let [n, c, h, w] = xt.nchw(&self.scope)?;
        if c != 3 {
            return Err(self.shape_err(format!("grayscale needs 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let base = s * 3 * plane;
            for p in 0..plane {
                let v: f64 = (0..3)
                    .map(|ch| coeffs[ch] * xt.data()[base + ch * plane + p].as_f64())
                    .sum();
                out.push(T::of(v));
            }
        }
        let y = Tensor::from_vec(vec![n, 1, h, w], out)?;
        let rg = self.rg(&[xi]);
        self.push(y, Op::RgbToGray { x: xi, coeffs }, rg)
    }

    /// Σ x².
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.sq_norm_f64();
        let rg = self.rg(&[xi]);
        self.push(Tensor::scalar(T::of(s)), Op::SumSquares { x: xi }, rg)
    }

    /// Σ wᵢ·(xᵢ − aᵢ)² with constant anchor `a` and weights `w`.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        if anchor.dims() != xt.dims() || weight.dims() != xt.dims() {
            return Err(Error::State(format!(
                "anchor {:?} / importance {:?} do not match parameter {:?} in `{}`",
                anchor.dims(),
                weight.dims(),
                xt.dims(),
                self.scope
            )));
        }
        let s: f64 = xt
            .data()
            .iter()
            .zip(anchor.data())
            .zip(weight.data())
            .map(|((x, a), w)| w.as_f64() * (x.as_f64() - a.as_f64()).powi(2))
            .sum();
        let rg = self.rg(&[xi]);
        self.push(
            Tensor::scalar(T::of(s)),
            Op::WeightedSqDist {
                x: xi,
                anchor: anchor.clone(),
                weight: weight.clone(),
            },
            rg,
        )
    }

    /// Σ rᵢ·xᵢ with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x);
        let xt = &self.nodes[xi].value;
        if weights.dims() != xt.dims() {
            return Err(self.shape_err(format!("weights {:?} vs input {:?}", weights.dims(), xt.dims())));
        }
        let s: f64 = xt
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, r)| x.as_f64() * r.as_f64())
            .sum();
        let rg = self.rg(&[xi]);
        self.push(
            Tensor::scalar(T::of(s)),
            Op::WeightedSum {
                x: xi,
                weights: weights.clone(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let dims = self.nodes[self.idx(x)].value.dims().to_vec();
        self.weighted_sum(x, &Tensor::ones(&dims))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x);
        let y = self.nodes[xi].value.map(|v| v * T::of(factor));
        let rg = self.rg(&[xi]);
        self.push(y, Op::Scale { x: xi, factor }, rg)
    }

    /// Piecewise-linear branch decisions (ReLU signs and max-pool winners);
    /// two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    let mut word = 0u64;
                    for (i, v) in self.nodes[*x].value.data().iter().enumerate() {
                        if *v > T::zero() {
                            word |= 1 << (i % 64);
                        }
                        if i % 64 == 63 {
                            sig.push(word);
                            word = 0;
                        }
                    }
                    sig.push(word);
                }
                Op::MaxPool { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Tape("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got {:?}",
                self.nodes[loss.index].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::ones(self.nodes[loss.index].value.dims()));
        }
        let mut leaves = BTreeMap::new();
        let mut params = BTreeMap::new();

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf { param } = node.op {
                if node.requires_grad {
                    let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                    if let Some(pid) = param {
                        let slot = params.remove(&pid);
                        let mut slot: Option<Tensor<T>> = slot;
                        accumulate(&mut slot, g.clone());
                        params.insert(pid, slot.expect("just set"));
                    }
                    leaves.insert(i, g);
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(Grads {
            tape: self.id,
            leaves,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let wants = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, shape } => {
                let cg = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    &g,
                    shape,
                    (wants(*x), wants(*w), b.is_some_and(wants)),
                );
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[*x], dx);
                }
                if let Some(dw) = cg.dw {
                    accumulate(&mut grads[*w], dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    accumulate(&mut grads[*b], db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (dx, dg, db) = kernels::bn_backward(&g, xhat, inv_std, val(*gamma), *mode == BnMode::Batch);
                if wants(*x) {
                    accumulate(&mut grads[*x], dx);
                }
                if wants(*gamma) {
                    accumulate(&mut grads[*gamma], dg);
                }
                if wants(*beta) {
                    accumulate(&mut grads[*beta], db);
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(d, v)| if *v > T::zero() { *d } else { T::zero() })
                    .collect();
                accumulate(
                    &mut grads[*x],
                    Tensor::from_vec(xv.dims().to_vec(), data).expect("relu dims"),
                );
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).dims());
                for (d, &a) in g.data().iter().zip(argmax) {
                    dx.data_mut()[a] += *d;
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::BlockAvgPool { x } => {
                accumulate(&mut grads[*x], kernels::block_avgpool_backward(&g, val(*x).dims()));
            }
            Op::Flatten { x } => {
                let dx = g.reshape(val(*x).dims()).expect("flatten dims");
                accumulate(&mut grads[*x], dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, fin) = (xv.dims()[0], xv.dims()[1]);
                let fout = wv.dims()[0];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g.data(),
                        fout as isize,
                        1,
                        wv.data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        fin as isize,
                        1,
                    );
                    accumulate(&mut grads[*x], Tensor::from_vec(vec![n, fin], dx).expect("dx"));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g.data(),
                        1,
                        fout as isize,
                        xv.data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        fin as isize,
                        1,
                    );
                    accumulate(&mut grads[*w], Tensor::from_vec(vec![fout, fin], dw).expect("dw"));
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    accumulate(&mut grads[b], Tensor::from_vec(vec![fout], db).expect("db"));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g);
                }
            }
            Op::ConcatChannels { a, b } => {
                let ca = val(*a).dims()[1];
                let c = g.dims()[1];
                if wants(*a) {
                    accumulate(&mut grads[*a], g.slice_channels(0, ca).expect("concat split"));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.slice_channels(ca, c).expect("concat split"));
                }
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let k = y.dims()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(yv, gv)| T::of(yv.as_f64() * (gv.as_f64() - dot))),
                    );
                }
                accumulate(
                    &mut grads[*x],
                    Tensor::from_vec(y.dims().to_vec(), dx).expect("softmax dx"),
                );
            }
            Op::CrossEntropy { x, probs, targets } => {
                let dims = val(*x).dims().to_vec();
                let (n, k) = (dims[0], dims[1]);
                let scale = g.item().as_f64() / n as f64;
                let mut dx: Vec<T> = probs.iter().map(|p| T::of(p.as_f64() * scale)).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] -= T::of(scale);
                }
                accumulate(&mut grads[*x], Tensor::from_vec(dims, dx).expect("ce dx"));
            }
            Op::KlSoft {
                x,
                p_student,
                p_teacher,
                temperature,
            } => {
                let dims = val(*x).dims().to_vec();
                let scale = g.item().as_f64() / (dims[0] as f64 * temperature);
                let dx = p_student
                    .iter()
                    .zip(p_teacher)
                    .map(|(s, t)| T::of((s.as_f64() - t.as_f64()) * scale))
                    .collect();
                accumulate(&mut grads[*x], Tensor::from_vec(dims, dx).expect("kl dx"));
            }
            Op::RgbToGray { x, coeffs } => {
                let dims = val(*x).dims().to_vec();
                let (n, plane) = (dims[0], dims[2] * dims[3]);
                let mut dx = vec![T::zero(); n * 3 * plane];
                for s in 0..n {
                    for (ch, c) in coeffs.iter().enumerate() {
                        let c = T::of(*c);
                        for p in 0..plane {
                            dx[(s * 3 + ch) * plane + p] = c * g.data()[s * plane + p];
                        }
                    }
                }
                accumulate(&mut grads[*x], Tensor::from_vec(dims, dx).expect("gray dx"));
            }
            Op::SumSquares { x } => {
                let s = g.item() + g.item();
                accumulate(&mut grads[*x], val(*x).map(|v| v * s));
            }
            Op::WeightedSqDist { x, anchor, weight } => {
                let s = g.item() + g.item();
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .zip(weight.data())
                    .map(|((x, a), w)| s * *w * (*x - *a))
                    .collect();
                accumulate(
                    &mut grads[*x],
                    Tensor::from_vec(xv.dims().to_vec(), data).expect("wsd dx"),
                );
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                accumulate(&mut grads[*x], weights.map(|r| r * s));
            }
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                accumulate(&mut grads[*x], g.map(|v| v * f));
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Relu { .. } => "relu",
        Op::MaxPool { .. } => "maxpool2d",
        Op::BlockAvgPool { .. } => "avgpool",
        Op::Flatten { .. } => "flatten",
        Op::Linear { .. } => "linear",
        Op::Add { .. } => "add",
        Op::ConcatChannels { .. } => "channel_concat",
        Op::Softmax { .. } => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlSoft { .. } => "kl_soft",
        Op::RgbToGray { .. } => "rgb_to_gray",
        Op::SumSquares { .. } => "sum_squares",
        Op::WeightedSqDist { .. } => "weighted_sq_dist",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Scale { .. } => "scale",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &z), true);
        let loss = tape.cross_entropy(x, &[2, 0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Closed form: (softmax(z) − y)/N, softmax computed by hand here.
        let mut expect = Vec::new();
        for (r, target) in [(0usize, 2usize), (1, 0)] {
            let row = &z[r * 3..r * 3 + 3];
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                let y = if j == target { 1.0 } else { 0.0 };
                expect.push((ej / s - y) / 2.0);
            }
        }
        for (a, b) in grads.wrt(x).unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn foreign_loss_is_a_tape_error() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = b.leaf(t(&[1], &[1.0]), true);
        let lb = b.sum(x).unwrap();
        let _ = a.leaf(t(&[1], &[1.0]), true);
        assert!(matches!(a.backward(lb), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[f64::MAX]), true);
        tape.set_scope("stem");
        match tape.scale(x, 10.0) {
            Err(Error::Numerics { layer, op }) => {
                assert_eq!(layer, "stem");
                assert_eq!(op, "scale");
            }
            other => panic!("expected numerics error, got {other:?}"),
        }
    }

    #[test]
    fn shape_errors_are_caught_before_compute() {
        let mut tape = Tape::<f64>::new();
        tape.set_scope("layer1.0.conv1");
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        match tape.conv2d(x, w, None, 1, 1) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "layer1.0.conv1"),
            other => panic!("{other:?}"),
        }
        let a = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn softened_kl_matches_direct_computation() {
        // teacher (1,0), student (0,1), T = 2.
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(t(&[1, 2], &[0.0, 1.0]), true);
        let loss = tape.kl_soft(s, &t(&[1, 2], &[1.0, 0.0]), 2.0).unwrap();
        let p = [0.5f64.exp() / (0.5f64.exp() + 1.0), 1.0 / (0.5f64.exp() + 1.0)];
        let q = [p[1], p[0]];
        let expect = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((expect - 0.122459).abs() < 1e-6);
    }
}
