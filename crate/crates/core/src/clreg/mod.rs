//! Continual-learning regularizers behind one lifecycle:
//! `on_task_start` → (`before_step`, `after_step`)* → `on_task_end`, with
//! `penalty` added to the task loss on every batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Mode, Model, Trainable};
use crate::tensor::checkpoint::Records;
use crate::tensor::optim::ParamStore;
use crate::tensor::{Elem, ParamId, Tape, Tensor, Var};

pub const REGSTATE_SECTION: &str = "regstate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Finetune,
    Lwf,
    Ewc,
    Si,
    Mas,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Finetune,
        MethodKind::Lwf,
        MethodKind::Ewc,
        MethodKind::Si,
        MethodKind::Mas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Finetune => "finetune",
            MethodKind::Lwf => "lwf",
            MethodKind::Ewc => "ewc",
            MethodKind::Si => "si",
            MethodKind::Mas => "mas",
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            MethodKind::Finetune => 0.0,
            MethodKind::Ewc => 5000.0,
            MethodKind::Lwf | MethodKind::Si | MethodKind::Mas => 1.0,
        }
    }

    fn tag(self) -> usize {
        self as usize
    }

    fn from_tag(tag: usize) -> Option<Self> {
        MethodKind::ALL.get(tag).copied()
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels used for the empirical Fisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherLabels {
    GroundTruth,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub method: MethodKind,
    /// Defaults per method when absent.
    pub lambda: Option<f64>,
    pub temperature: f64,
    pub xi: f64,
    pub fisher_labels: FisherLabels,
    /// Cap on samples used by the Fisher and MAS importance passes.
    pub importance_samples: Option<usize>,
    pub sample_seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            method: MethodKind::Finetune,
            lambda: None,
            temperature: 2.0,
            xi: 0.1,
            fisher_labels: FisherLabels::GroundTruth,
            importance_samples: None,
            sample_seed: 0,
        }
    }
}

impl RegConfig {
    pub fn new(method: MethodKind) -> Self {
        RegConfig {
            method,
            ..Default::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.method.default_lambda())
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.importance_samples == Some(0) {
            return Err(Error::Config("importance_samples must be positive".into()));
        }
        Ok(())
    }
}

/// What the regularizers need from a network: its parameters, which of them
/// are shared across tasks, and per-head logits recorded on a tape.
pub trait Learner<T: Elem>: Clone {
    fn store(&self) -> &ParamStore<T>;

    fn shared_ids(&self) -> Vec<ParamId>;

    fn task_logits(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        tasks: &[usize],
        mode: Mode,
        trainable: Trainable,
    ) -> Result<Vec<Var>>;
}

impl<T: Elem> Learner<T> for Model<T> {
    fn store(&self) -> &ParamStore<T> {
        Model::store(self)
    }

    fn shared_ids(&self) -> Vec<ParamId> {
        Model::shared_ids(self)
    }

    fn task_logits(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        tasks: &[usize],
        mode: Mode,
        trainable: Trainable,
    ) -> Result<Vec<Var>> {
        Ok(self.forward(tape, x, tasks, mode, trainable)?.logits)
    }
}

/// Anchors, importances and SI accumulators, aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState<T> {
    pub method: MethodKind,
    pub lambda: f64,
    pub temperature: f64,
    pub xi: f64,
    pub tasks_done: usize,
    pub ids: Vec<ParamId>,
    pub anchors: Vec<Tensor<T>>,
    pub omega: Vec<Tensor<T>>,
    pub si_omega: Vec<Tensor<T>>,
    pub si_start: Vec<Tensor<T>>,
}

impl<T: Elem> RegularizerState<T> {
    fn empty(cfg: &RegConfig) -> Self {
        RegularizerState {
            method: cfg.method,
            lambda: cfg.lambda(),
            temperature: cfg.temperature,
            xi: cfg.xi,
            tasks_done: 0,
            ids: Vec::new(),
            anchors: Vec::new(),
            omega: Vec::new(),
            si_omega: Vec::new(),
            si_start: Vec::new(),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.method, MethodKind::Ewc | MethodKind::Si | MethodKind::Mas)
    }

    /// Checkpoint records; tensors are named after the parameters in `store`.
    pub fn to_records(&self, store: &ParamStore<T>) -> Records<T> {
        let scalar = |v: f64| Tensor::from_vec(vec![1], vec![T::of(v)]).expect("scalar");
        let mut r: Records<T> = vec![
            ("method".into(), scalar(self.method.tag() as f64)),
            ("lambda".into(), scalar(self.lambda)),
            ("temperature".into(), scalar(self.temperature)),
            ("xi".into(), scalar(self.xi)),
            ("tasks_done".into(), scalar(self.tasks_done as f64)),
        ];
        for (kind, vals) in [
            ("anchor", &self.anchors),
            ("omega", &self.omega),
            ("si_omega", &self.si_omega),
            ("si_start", &self.si_start),
        ] {
            for (id, t) in self.ids.iter().zip(vals) {
                r.push((format!("{kind}.{}", store.get(*id).name), t.clone()));
            }
        }
        r
    }

    pub fn from_records(recs: &Records<T>, store: &ParamStore<T>) -> Result<Self> {
        let get = |name: &str| recs.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let scalar = |name: &str| -> Result<f64> {
            get(name)
                .filter(|t| t.len() == 1)
                .map(|t| t.data()[0].as_f64())
                .ok_or_else(|| Error::State(format!("regstate lacks scalar `{name}`")))
        };
        let method = MethodKind::from_tag(scalar("method")? as usize)
            .ok_or_else(|| Error::State("unknown method tag".into()))?;
        let mut state = RegularizerState {
            method,
            lambda: scalar("lambda")?,
            temperature: scalar("temperature")?,
            xi: scalar("xi")?,
            tasks_done: scalar("tasks_done")? as usize,
            ..RegularizerState::empty(&RegConfig::new(method))
        };
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in recs {
            if let Some(pname) = name.strip_prefix("anchor.") {
                let id = store
                    .find(pname)
                    .ok_or_else(|| Error::State(format!("anchor for unknown parameter `{pname}`")))?;
                seen.insert(id);
            }
        }
        state.ids = seen.into_iter().collect();
        for id in &state.ids {
            let p = store.get(*id);
            let fetch = |kind: &str| -> Result<Option<Tensor<T>>> {
                match get(&format!("{kind}.{}", p.name)) {
                    None => Ok(None),
                    Some(t) if t.dims() == p.value.dims() => Ok(Some(t.clone())),
                    Some(t) => Err(Error::State(format!(
                        "{kind} for `{}` has shape {:?}, parameter is {:?}",
                        p.name,
                        t.dims(),
                        p.value.dims()
                    ))),
                }
            };
            state.anchors.push(fetch("anchor")?.expect("listed above"));
            for (kind, dst) in [
                ("omega", &mut state.omega),
                ("si_omega", &mut state.si_omega),
                ("si_start", &mut state.si_start),
            ] {
                if let Some(t) = fetch(kind)? {
                    dst.push(t);
                }
            }
        }
        for (kind, v) in [
            ("omega", &state.omega),
            ("si_omega", &state.si_omega),
            ("si_start", &state.si_start),
        ] {
            if !v.is_empty() && v.len() != state.ids.len() {
                return Err(Error::State(format!(
                    "{kind} covers {} of {} parameters",
                    v.len(),
                    state.ids.len()
                )));
            }
        }
        Ok(state)
    }
}

/// A regularizer instance bound to one learner type.
#[derive(Debug, Clone)]
pub struct Regularizer<T, L> {
    pub state: RegularizerState<T>,
    cfg: RegConfig,
    teacher: Option<L>,
    old_tasks: Vec<usize>,
    step_scratch: Option<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

fn snapshot<T: Elem>(store: &ParamStore<T>, ids: &[ParamId]) -> Vec<Tensor<T>> {
    ids.iter().map(|&id| store.get(id).value.clone()).collect()
}

fn check_data<T: Elem>(x: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let n = x.dims().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::State("importance estimation needs at least one sample".into()));
    }
    if labels.len() != n {
        return Err(Error::State(format!("{n} samples but {} labels", labels.len())));
    }
    Ok(n)
}

/// Evenly spaced sample indices, at most `cap` of them.
fn sample_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

impl<T: Elem, L: Learner<T>> Regularizer<T, L> {
    pub fn new(cfg: &RegConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Regularizer {
            state: RegularizerState::empty(cfg),
            cfg: cfg.clone(),
            teacher: None,
            old_tasks: Vec::new(),
            step_scratch: None,
        })
    }

    /// Resumes from a saved state section.
    pub fn with_state(cfg: &RegConfig, state: RegularizerState<T>) -> Result<Self> {
        let mut r = Self::new(cfg)?;
        if state.method != cfg.method {
            return Err(Error::State(format!(
                "saved state is for {}, config asks for {}",
                state.method, cfg.method
            )));
        }
        // the config stays authoritative for hyperparameters; the saved
        // scalars may have been rounded to the checkpoint precision
        r.state = RegularizerState {
            lambda: cfg.lambda(),
            temperature: cfg.temperature,
            xi: cfg.xi,
            ..state
        };
        Ok(r)
    }

    pub fn method(&self) -> MethodKind {
        self.state.method
    }

    /// Heads whose logits `penalty` needs from the student (LwF only).
    pub fn distill_tasks(&self) -> &[usize] {
        &self.old_tasks
    }

    pub fn on_task_start(&mut self, learner: &L, task: usize) -> Result<()> {
        let ids = learner.shared_ids();
        match self.state.method {
            MethodKind::Lwf if task > 0 => {
                self.teacher = Some(learner.clone());
                self.old_tasks = (0..task).collect();
            }
            MethodKind::Si => {
                if self.state.ids.is_empty() {
                    self.state.ids = ids.clone();
                }
                self.state.si_start = snapshot(learner.store(), &ids);
                self.state.si_omega = ids
                    .iter()
                    .map(|&id| Tensor::zeros(learner.store().get(id).value.dims()))
                    .collect();
            }
            _ => {}
        }
        Ok(())
    }

    /// Regularization term to add to the task loss, or `None` when it is
    /// identically zero. `x` is the current batch and `old_logits` the
    /// student's logits for [`distill_tasks`](Self::distill_tasks).
    pub fn penalty(&self, tape: &mut Tape<T>, learner: &L, x: &Tensor<T>, old_logits: &[Var]) -> Result<Option<Var>> {
        let s = &self.state;
        if s.lambda == 0.0 {
            return Ok(None);
        }
        match s.method {
            MethodKind::Finetune => Ok(None),
            MethodKind::Lwf => {
                let Some(teacher) = &self.teacher else {
                    return Ok(None);
                };
                if old_logits.len() != self.old_tasks.len() {
                    return Err(Error::State(format!(
                        "distillation needs {} old-head outputs, got {}",
                        self.old_tasks.len(),
                        old_logits.len()
                    )));
                }
                let mut t_tape = Tape::new();
                let xv = t_tape.constant(x.clone());
                let t_out = teacher.task_logits(&mut t_tape, xv, &self.old_tasks, Mode::BatchStats, Trainable::None)?;
                tape.set_scope("lwf");
                let mut total: Option<Var> = None;
                for (student, t) in old_logits.iter().zip(t_out) {
                    let kl = tape.kl_soft(*student, t_tape.value(t), s.temperature)?;
                    total = Some(match total {
                        None => kl,
                        Some(acc) => tape.add(acc, kl)?,
                    });
                }
                match total {
                    Some(v) => Ok(Some(tape.scale(v, s.lambda)?)),
                    None => Ok(None),
                }
            }
            MethodKind::Ewc | MethodKind::Si | MethodKind::Mas => {
                if s.tasks_done == 0 {
                    return Ok(None);
                }
                self.quadratic(tape, learner.store())
            }
        }
    }

    /// `(λ/2)·Σ Ω(θ−θ*)²` over the anchored parameters.
    fn quadratic(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Option<Var>> {
        let s = &self.state;
        if s.omega.len() != s.ids.len() || s.anchors.len() != s.ids.len() {
            return Err(Error::State(format!(
                "{} parameters but {} importances and {} anchors",
                s.ids.len(),
                s.omega.len(),
                s.anchors.len()
            )));
        }
        tape.set_scope("penalty");
        let mut total: Option<Var> = None;
        for ((id, anchor), omega) in s.ids.iter().zip(&s.anchors).zip(&s.omega) {
            let p = tape.param(*id, store.get(*id).value.clone(), true);
            let d = tape.weighted_sq_dist(p, anchor, omega)?;
            total = Some(match total {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
        match total {
            Some(v) => Ok(Some(tape.scale(v, s.lambda / 2.0)?)),
            None => Ok(None),
        }
    }

    /// Call with the full objective gradient in the store, right before the
    /// optimizer step.
    pub fn before_step(&mut self, store: &ParamStore<T>) -> Result<()> {
        if self.state.method != MethodKind::Si {
            return Ok(());
        }
        let grads = self
            .state
            .ids
            .iter()
            .map(|&id| {
                store
                    .get(id)
                    .grad
                    .clone()
                    .ok_or_else(|| Error::State(format!("no gradient for `{}` before step", store.get(id).name)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.step_scratch = Some((grads, snapshot(store, &self.state.ids)));
        Ok(())
    }

    /// Accumulates the SI path integral `ω += −g·Δθ` for the step just taken.
    pub fn after_step(&mut self, store: &ParamStore<T>) -> Result<()> {
        if self.state.method != MethodKind::Si {
            return Ok(());
        }
        let (grads, before) = self
            .step_scratch
            .take()
            .ok_or_else(|| Error::State("after_step without before_step".into()))?;
        for (k, &id) in self.state.ids.iter().enumerate() {
            let now = store.get(id).value.data();
            let w = self.state.si_omega[k].data_mut();
            for (((w, g), a), b) in w.iter_mut().zip(grads[k].data()).zip(before[k].data()).zip(now) {
                *w -= *g * (*b - *a);
            }
        }
        Ok(())
    }

    /// Importance update at the end of `task`, from that task's training
    /// data.
    pub fn on_task_end(&mut self, learner: &L, task: usize, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let ids = learner.shared_ids();
        let fresh = match self.state.method {
            MethodKind::Finetune => {
                self.state.tasks_done += 1;
                return Ok(());
            }
            MethodKind::Lwf => {
                self.teacher = None;
                self.old_tasks.clear();
                self.state.tasks_done += 1;
                return Ok(());
            }
            MethodKind::Ewc => self.fisher(learner, task, x, labels)?,
            MethodKind::Mas => self.mas(learner, task, x, labels)?,
            MethodKind::Si => self.si_importance(learner)?,
        };
        if self.state.omega.is_empty() {
            self.state.ids = ids.clone();
            self.state.omega = fresh;
        } else {
            if self.state.ids != ids {
                return Err(Error::State("shared parameter set changed between tasks".into()));
            }
            for (acc, f) in self.state.omega.iter_mut().zip(fresh) {
                for (a, b) in acc.data_mut().iter_mut().zip(f.data()) {
                    *a += *b;
                }
            }
        }
        self.state.ids = ids;
        self.state.anchors = snapshot(learner.store(), &self.state.ids);
        self.state.tasks_done += 1;
        Ok(())
    }

    /// Per-sample squared-gradient average of the task loss (eval mode).
    pub fn fisher(&self, learner: &L, task: usize, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<Tensor<T>>> {
        let n = check_data(x, labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.sample_seed);
        let sampled = self.cfg.fisher_labels == FisherLabels::Sampled;
        self.per_sample_mean(
            learner,
            task,
            x,
            n,
            |tape, logits, i| {
                let label = if sampled {
                    let p = tape.value(logits).data().to_vec();
                    let probs = softmax_f64(&p);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    probs
                        .iter()
                        .position(|q| {
                            acc += q;
                            u < acc
                        })
                        .unwrap_or(probs.len() - 1)
                } else {
                    labels[i]
                };
                tape.cross_entropy(logits, &[label])
            },
            |g| g * g,
        )
    }

    /// Per-sample mean of |∂‖f(x)‖²/∂θ| for the task head output (eval mode).
    pub fn mas(&self, learner: &L, task: usize, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<Tensor<T>>> {
        let n = check_data(x, labels)?;
        self.per_sample_mean(
            learner,
            task,
            x,
            n,
            |tape, logits, _| tape.sum_squares(logits),
            |g| g.abs(),
        )
    }

    fn per_sample_mean(
        &self,
        learner: &L,
        task: usize,
        x: &Tensor<T>,
        n: usize,
        mut loss: impl FnMut(&mut Tape<T>, Var, usize) -> Result<Var>,
        reduce: impl Fn(T) -> T,
    ) -> Result<Vec<Tensor<T>>> {
        let ids = learner.shared_ids();
        let mut acc: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| vec![0.0; learner.store().get(id).value.len()])
            .collect();
        let idx = sample_indices(n, self.cfg.importance_samples);
        for &i in &idx {
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_batch(i, i + 1)?);
            let logits = learner.task_logits(&mut tape, xv, &[task], Mode::Eval, Trainable::Shared)?[0];
            let l = loss(&mut tape, logits, i)?;
            let grads = tape.backward(l)?;
            for (k, id) in ids.iter().enumerate() {
                if let Some(g) = grads.param(*id) {
                    for (a, v) in acc[k].iter_mut().zip(g.data()) {
                        *a += reduce(*v).as_f64();
                    }
                }
            }
        }
        let m = idx.len() as f64;
        ids.iter()
            .zip(acc)
            .map(|(&id, a)| {
                Tensor::from_vec(
                    learner.store().get(id).value.dims().to_vec(),
                    a.into_iter().map(|v| T::of(v / m)).collect(),
                )
            })
            .collect()
    }

    fn si_importance(&self, learner: &L) -> Result<Vec<Tensor<T>>> {
        let s = &self.state;
        if s.si_start.len() != s.ids.len() || s.si_omega.len() != s.ids.len() {
            return Err(Error::State("SI task ended without on_task_start".into()));
        }
        let xi = s.xi;
        Ok(s.ids
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let end = learner.store().get(id).value.data();
                let data = s.si_omega[k]
                    .data()
                    .iter()
                    .zip(s.si_start[k].data())
                    .zip(end)
                    .map(|((w, a), b)| {
                        let drift = b.as_f64() - a.as_f64();
                        T::of(w.as_f64().max(0.0) / (drift * drift + xi))
                    })
                    .collect();
                Tensor::from_vec(s.si_omega[k].dims().to_vec(), data).expect("same dims")
            })
            .collect())
    }
}

fn softmax_f64<T: Elem>(z: &[T]) -> Vec<f64> {
    let m = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        assert_eq!(RegConfig::new(MethodKind::Ewc).lambda(), 5000.0);
        assert_eq!(RegConfig::new(MethodKind::Si).lambda(), 1.0);
        let bad = RegConfig {
            xi: 0.0,
            ..RegConfig::new(MethodKind::Si)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!("MAS".parse::<MethodKind>().is_ok());
        assert!("gem".parse::<MethodKind>().is_err());
    }

    #[test]
    fn sample_indices_are_spread() {
        assert_eq!(sample_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(sample_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
