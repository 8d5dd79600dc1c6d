use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{AccuracyMatrix, ModeMetrics, RunMetrics};
use super::{TaskSplit, TrainConfig, IMPROVEMENT_EPS};
use crate::clreg::{RegConfig, Regularizer, REGSTATE_SECTION};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nets::{build_multihead, ArchConfig, ArchKind, Mode, Model, Trainable};
use crate::tensor::optim::Sgd;
use crate::tensor::{Elem, Tape, Tensor};

type Reg = Regularizer<f32, Model<f32>>;

const SHUFFLE_SALT: u64 = 0x5eed_ba7c_4e55_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// The task id picks the head; argmax within it.
    Aware,
    /// Argmax over the softmax outputs of every head seen so far.
    Agnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub lr_index: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub penalty: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub lr_index: usize,
    pub lr: f64,
    pub val_acc: f64,
    pub log: Vec<EpochLog>,
}

fn local_labels(ds: &Dataset, idx: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let g = ds.labels[i];
            classes
                .iter()
                .position(|&c| c == g)
                .ok_or_else(|| Error::Data(format!("sample {i} (class {g}) is not in this task")))
        })
        .collect()
}

fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = logits.dims();
    let (n, k) = (d[0], d[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Percentage of samples of task `task` classified correctly, given the
/// logits of heads `0..logits.len()` on those samples.
pub fn accuracy_from_logits(logits: &[Tensor<f32>], task: usize, labels: &[usize], mode: EvalMode) -> Result<f64> {
    if task >= logits.len() {
        return Err(Error::Eval(format!("no logits for task {task}")));
    }
    if labels.is_empty() {
        return Err(Error::Eval(format!("task {task} has no samples")));
    }
    let probs: Vec<Vec<Vec<f64>>> = logits.iter().map(softmax_rows).collect();
    if probs.iter().any(|p| p.len() != labels.len()) {
        return Err(Error::Eval("logit rows do not match the labels".into()));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let hit = match mode {
            EvalMode::Aware => argmax(&probs[task][i]) == y,
            EvalMode::Agnostic => {
                // first maximum in head-major order
                let (mut bh, mut bc, mut bv) = (0, 0, f64::NEG_INFINITY);
                for (h, p) in probs.iter().enumerate() {
                    for (c, &v) in p[i].iter().enumerate() {
                        if v > bv {
                            (bh, bc, bv) = (h, c, v);
                        }
                    }
                }
                bh == task && bc == y
            }
        };
        correct += hit as usize;
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Test accuracy on every task `0..=upto` in both modes, from a single set
/// of softmax outputs.
pub fn evaluate_both(
    model: &Model<f32>,
    split: &TaskSplit,
    test: &Dataset,
    upto: usize,
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if upto >= split.len() || upto >= model.n_tasks() {
        return Err(Error::Eval(format!("task {upto} has not been defined")));
    }
    let heads: Vec<usize> = (0..=upto).collect();
    let mut aware = Vec::with_capacity(upto + 1);
    let mut agnostic = Vec::with_capacity(upto + 1);
    for k in 0..=upto {
        let task = &split.tasks[k];
        let labels = local_labels(test, &task.test, &task.classes)?;
        let x = test.images.gather_batch(&task.test)?;
        let logits = model.predict(&x, &heads, Mode::Eval, batch)?;
        aware.push(accuracy_from_logits(&logits, k, &labels, EvalMode::Aware)?);
        agnostic.push(accuracy_from_logits(&logits, k, &labels, EvalMode::Agnostic)?);
    }
    Ok((aware, agnostic))
}

pub fn evaluate(
    model: &Model<f32>,
    split: &TaskSplit,
    test: &Dataset,
    upto: usize,
    mode: EvalMode,
    batch: usize,
) -> Result<Vec<f64>> {
    let (a, g) = evaluate_both(model, split, test, upto, batch)?;
    Ok(match mode {
        EvalMode::Aware => a,
        EvalMode::Agnostic => g,
    })
}

/// Mean cross-entropy and accuracy (percent) of head `task` in eval mode.
fn score(model: &Model<f32>, x: &Tensor<f32>, y: &[usize], task: usize, batch: usize) -> Result<(f64, f64)> {
    let logits = model.predict(x, &[task], Mode::Eval, batch)?.remove(0);
    let probs = softmax_rows(&logits);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &t) in probs.iter().zip(y) {
        loss -= p[t].max(f64::MIN_POSITIVE).ln();
        correct += (argmax(p) == t) as usize;
    }
    let n = y.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// One-epoch batches: shuffled, with a trailing single sample folded into
/// the previous batch so batch statistics never see one element.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        out[n - 1] = &order[(n - 1) * size..];
    }
    out
}

struct Attempt {
    model: Model<f32>,
    reg: Reg,
    val_acc: f64,
    val_loss: f64,
    log: Vec<EpochLog>,
}

#[allow(clippy::too_many_arguments)]
fn train_one_lr(
    mut model: Model<f32>,
    mut reg: Reg,
    task: usize,
    lr_index: usize,
    (xt, yt): (&Tensor<f32>, &[usize]),
    (xv, yv): (&Tensor<f32>, &[usize]),
    cfg: &TrainConfig,
) -> Result<Attempt> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    rng.set_stream((task * cfg.lr_grid.len() + lr_index) as u64);
    let shared = model.shared_ids();
    let mut step_ids = shared.clone();
    step_ids.extend(model.head_ids(task));
    let mut heads: Vec<usize> = reg.distill_tasks().to_vec();
    heads.push(task);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);

    // without a validation set the training loss drives the schedule
    let (sx, sy) = if yv.is_empty() { (xt, yt) } else { (xv, yv) };

    let mut lr = cfg.lr_grid[lr_index];
    let (mut best_loss, mut best_acc) = score(&model, sx, sy, task, cfg.eval_batch)?;
    let mut best = model.snapshot();
    let mut wait = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..yt.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        for b in batches(&order, cfg.batch_size) {
            let x = xt.gather_batch(b)?;
            let y: Vec<usize> = b.iter().map(|&i| yt[i]).collect();
            let mut tape = Tape::new();
            let xvar = tape.constant(x.clone());
            let out = model.forward(&mut tape, xvar, &heads, Mode::Train, Trainable::SharedAndHead(task))?;
            let (cur, old) = out.logits.split_last().expect("current head requested");
            let ce = tape.cross_entropy(*cur, &y)?;
            loss_sum += tape.value(ce).item().as_f64() * b.len() as f64;
            let loss = match reg.penalty(&mut tape, &model, &x, old)? {
                Some(p) => {
                    pen_sum += tape.value(p).item().as_f64() * b.len() as f64;
                    tape.add(ce, p)?
                }
                None => ce,
            };
            let total = tape.value(loss).item().as_f64();
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "task {task}, lr {lr}: loss became {total} in epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let store = model.store_mut();
            store.zero_grads();
            store.accumulate_grads(grads.into_params());
            reg.before_step(model.store())?;
            sgd.step(model.store_mut(), &step_ids, lr)?;
            reg.after_step(model.store())?;
            model.apply_bn_updates(&out.bn_updates);
        }
        let n = yt.len() as f64;
        let (val_loss, val_acc) = score(&model, sx, sy, task, cfg.eval_batch)?;
        let mut entry = EpochLog {
            task,
            lr_index,
            epoch,
            lr,
            train_loss: loss_sum / n,
            penalty: pen_sum / n,
            val_loss,
            val_acc,
            event: None,
        };
        if val_loss < best_loss - IMPROVEMENT_EPS {
            best_loss = val_loss;
            best_acc = val_acc;
            best = model.snapshot();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                wait = 0;
                lr /= cfg.lr_decay_factor;
                model.restore(&best);
                sgd.reset();
                if lr < cfg.min_lr {
                    entry.event = Some("stop".into());
                    log.push(entry);
                    break;
                }
                entry.event = Some("decay".into());
            }
        }
        log.push(entry);
    }
    model.restore(&best);
    Ok(Attempt {
        model,
        reg,
        val_acc: best_acc,
        val_loss: best_loss,
        log,
    })
}

/// Trains head `task` (and the shared extractor) with every learning rate
/// in the grid, each from the same starting point, keeps the run with the
/// best validation accuracy and finishes the regularizer's task.
///
/// `reg.on_task_start` must already have been called for `task`.
pub fn train_task(
    model: &mut Model<f32>,
    reg: &mut Reg,
    split: &TaskSplit,
    train: &Dataset,
    task: usize,
    cfg: &TrainConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    let t = split
        .tasks
        .get(task)
        .ok_or_else(|| Error::Config(format!("task {task} is not in the split")))?;
    if t.train.is_empty() {
        return Err(Error::Data(format!("task {task} has no training samples")));
    }
    let xt = train.images.gather_batch(&t.train)?;
    let yt = local_labels(train, &t.train, &t.classes)?;
    let xv = train.images.gather_batch(&t.val)?;
    let yv = local_labels(train, &t.val, &t.classes)?;

    let mut winner: Option<(usize, Attempt)> = None;
    let mut log = Vec::new();
    let mut failure = None;
    for i in 0..cfg.lr_grid.len() {
        let mut a = match train_one_lr(model.clone(), reg.clone(), task, i, (&xt, &yt), (&xv, &yv), cfg) {
            Ok(a) => a,
            // a grid value that blows up is dropped; the others may be fine
            Err(e @ (Error::Divergence(_) | Error::Numerics { .. })) => {
                log.push(EpochLog {
                    task,
                    lr_index: i,
                    epoch: 0,
                    lr: cfg.lr_grid[i],
                    train_loss: f64::NAN,
                    penalty: f64::NAN,
                    val_loss: f64::NAN,
                    val_acc: 0.0,
                    event: Some(format!("diverged: {e}")),
                });
                failure = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        log.append(&mut a.log);
        // equal accuracy (common on easy tasks) falls back to the loss
        let better = |w: &Attempt| a.val_acc > w.val_acc || (a.val_acc == w.val_acc && a.val_loss < w.val_loss);
        if winner.as_ref().is_none_or(|(_, w)| better(w)) {
            winner = Some((i, a));
        }
    }
    let Some((lr_index, a)) = winner else {
        return Err(failure.expect("every grid value failed"));
    };
    *model = a.model;
    *reg = a.reg;
    reg.on_task_end(model, task, &xt, &yt)?;
    Ok(TaskOutcome {
        lr_index,
        lr: cfg.lr_grid[lr_index],
        val_acc: a.val_acc,
        log,
    })
}

/// Everything needed to reproduce one task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub arch: ArchKind,
    pub arch_config: ArchConfig,
    pub reg: RegConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub aware: AccuracyMatrix,
    pub agnostic: AccuracyMatrix,
    pub log: Vec<EpochLog>,
    pub model: Model<f32>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs tasks `0..split.len()` in order. The split's class lists are used
/// as given; its index sets are (re)assigned from `spec.seed`. When
/// `out_dir` is set, per-task checkpoints, both accuracy matrices, the
/// metrics summary and the epoch log are written there.
pub fn run_sequence(
    spec: &RunSpec,
    train: &Dataset,
    test: &Dataset,
    split: &TaskSplit,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    spec.arch_config.validate()?;
    spec.reg.validate()?;
    let cfg = TrainConfig {
        seed: spec.seed,
        ..spec.train.clone()
    };
    cfg.validate()?;
    for ds in [train, test] {
        if ds.image_size() != spec.arch_config.input_size {
            return Err(Error::Config(format!(
                "images are {0}×{0} but the network expects {1}×{1}",
                ds.image_size(),
                spec.arch_config.input_size
            )));
        }
    }
    let mut split = split.clone();
    split.assign(train, test, cfg.val_fraction, spec.seed)?;

    let mh = build_multihead(spec.arch, &spec.arch_config, &split.sizes())?;
    let fe_params = mh.fe_param_count();
    let mut model: Model<f32> = Model::new(mh, spec.seed)?;
    let mut reg: Reg = Regularizer::new(&spec.reg)?;

    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("log.jsonl");
            Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };

    let n = split.len();
    let mut aware = AccuracyMatrix::new(n);
    let mut agnostic = AccuracyMatrix::new(n);
    let mut chosen = Vec::with_capacity(n);
    let mut log = Vec::new();
    for t in 0..n {
        reg.on_task_start(&model, t)?;
        let outcome = train_task(&mut model, &mut reg, &split, train, t, &cfg)?;
        chosen.push(outcome.lr);
        let (a, g) = evaluate_both(&model, &split, test, t, cfg.eval_batch)?;
        aware.set_row(t, &a)?;
        agnostic.set_row(t, &g)?;
        if let (Some(f), Some(d)) = (log_file.as_mut(), out_dir) {
            let p = d.join("log.jsonl");
            for e in &outcome.log {
                writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(&p, e))?;
            }
            let mut ck = model.to_checkpoint();
            ck.sections
                .push((REGSTATE_SECTION.to_string(), reg.state.to_records(model.store())));
            ck.save(&d.join(format!("task_{t}.dscl")))?;
        }
        log.extend(outcome.log);
    }

    let metrics = RunMetrics {
        arch: spec.arch.to_string(),
        method: spec.reg.method.to_string(),
        seed: spec.seed,
        n_tasks: n,
        fe_params,
        chosen_lr: chosen,
        aware: ModeMetrics::from_matrix(&aware)?,
        agnostic: ModeMetrics::from_matrix(&agnostic)?,
    };
    if let Some(d) = out_dir {
        write(&d.join("matrix_aware.csv"), &aware.to_csv())?;
        write(&d.join("matrix_agnostic.csv"), &agnostic.to_csv())?;
        write(
            &d.join("metrics.json"),
            &(serde_json::to_string_pretty(&metrics)? + "\n"),
        )?;
    }
    Ok(RunOutput {
        metrics,
        aware,
        agnostic,
        log,
        model,
    })
}
