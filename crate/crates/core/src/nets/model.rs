use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::builders::{Fusion, MultiHeadSpec};
use super::spec::{LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{Checkpoint, Records};
use crate::tensor::optim::ParamStore;
use crate::tensor::tape::BnMode;
use crate::tensor::{Elem, ParamId, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalisation behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running estimates are reported for update.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching the running estimates.
    BatchStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Shared,
    Head(usize),
}

/// Batch statistics observed by one BN layer during a training forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    name: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct NetSlot {
    spec: NetworkSpec,
    group: ParamGroup,
    /// Parameter ids per layer, in `param_shapes` order.
    params: Vec<Vec<ParamId>>,
    /// Running-statistics slot per layer (BN layers only).
    bn: Vec<Option<usize>>,
}

/// Which parameters a forward pass records as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    Shared,
    SharedAndHead(usize),
    Head(usize),
}

impl Trainable {
    fn covers(self, g: ParamGroup) -> bool {
        match (self, g) {
            (Trainable::None, _) => false,
            (Trainable::All, _) => true,
            (Trainable::Shared, g) => g == ParamGroup::Shared,
            (Trainable::SharedAndHead(_), ParamGroup::Shared) => true,
            (Trainable::SharedAndHead(t), ParamGroup::Head(h)) | (Trainable::Head(t), ParamGroup::Head(h)) => t == h,
            (Trainable::Head(_), ParamGroup::Shared) => false,
        }
    }
}

/// Output of a forward pass on a tape.
#[derive(Debug)]
pub struct ForwardOut {
    pub features: Var,
    /// Logits for each requested head, in request order.
    pub logits: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Parameters, BN running statistics and the layer graph of a multi-head
/// network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: MultiHeadSpec,
    store: ParamStore<T>,
    groups: Vec<ParamGroup>,
    branches: Vec<NetSlot>,
    heads: Vec<NetSlot>,
    running: Vec<RunningStats>,
}

fn kaiming_std(kind: &LayerKind) -> f64 {
    let fan_in = match *kind {
        LayerKind::Conv2d {
            in_channels, kernel, ..
        } => in_channels * kernel * kernel,
        LayerKind::Linear { in_features, .. } => in_features,
        _ => 1,
    };
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Elem> Model<T> {
    /// Allocates and initialises every parameter: Kaiming-normal (fan-in)
    /// weights for conv and linear layers, zero biases, unit BN scale.
    pub fn new(spec: MultiHeadSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model {
            spec: spec.clone(),
            store: ParamStore::new(),
            groups: Vec::new(),
            branches: Vec::new(),
            heads: Vec::new(),
            running: Vec::new(),
        };
        for b in &spec.branches {
            let slot = m.alloc(b, ParamGroup::Shared, &mut rng);
            m.branches.push(slot);
        }
        for (t, h) in spec.heads.iter().enumerate() {
            let slot = m.alloc(h, ParamGroup::Head(t), &mut rng);
            m.heads.push(slot);
        }
        Ok(m)
    }

    fn alloc(&mut self, net: &NetworkSpec, group: ParamGroup, rng: &mut ChaCha8Rng) -> NetSlot {
        let mut params = Vec::with_capacity(net.layers.len());
        let mut bn = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            let prefix = format!("{}.{}", net.name, layer.name);
            let is_bn = matches!(layer.kind, LayerKind::BatchNorm2d { .. });
            let mut ids = Vec::new();
            for (suffix, dims) in layer.kind.param_shapes() {
                let value = match (is_bn, suffix) {
                    (true, "weight") => Tensor::ones(&dims),
                    (_, "bias") => Tensor::zeros(&dims),
                    _ => Tensor::randn(&dims, kaiming_std(&layer.kind), rng),
                };
                ids.push(self.store.push(format!("{prefix}.{suffix}"), value));
                self.groups.push(group);
            }
            params.push(ids);
            bn.push(match layer.kind {
                LayerKind::BatchNorm2d { channels } => {
                    self.running.push(RunningStats {
                        name: prefix,
                        mean: vec![0.0; channels],
                        var: vec![1.0; channels],
                    });
                    Some(self.running.len() - 1)
                }
                _ => None,
            });
        }
        NetSlot {
            spec: net.clone(),
            group,
            params,
            bn,
        }
    }

    pub fn spec(&self) -> &MultiHeadSpec {
        &self.spec
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn param_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.groups.len())
            .filter(|&i| self.groups[i] == group)
            .map(ParamId)
            .collect()
    }

    pub fn shared_ids(&self) -> Vec<ParamId> {
        self.param_ids(ParamGroup::Shared)
    }

    pub fn head_ids(&self, task: usize) -> Vec<ParamId> {
        self.param_ids(ParamGroup::Head(task))
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.store.total_elements(self.param_ids(group))
    }

    pub fn total_param_count(&self) -> usize {
        self.store.total_elements((0..self.groups.len()).map(ParamId))
    }

    /// Running `(mean, var)` of the named BN layer (`<net>.<layer>`).
    pub fn running_stats(&self, layer: &str) -> Option<(&[f64], &[f64])> {
        self.running
            .iter()
            .find(|r| r.name == layer)
            .map(|r| (r.mean.as_slice(), r.var.as_slice()))
    }

    /// Folds training-batch statistics into the running estimates with an
    /// unbiased variance. Estimates are kept representable in `T` so a
    /// checkpoint round trip is exact.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let r = &mut self.running[u.slot];
            let corr = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..r.mean.len() {
                let m = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * u.mean[c];
                let v = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * u.var[c] * corr;
                r.mean[c] = T::of(m).as_f64();
                r.var[c] = T::of(v).as_f64();
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match *x.dims() {
            [n, 3, h, w] if n > 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::shape("input", format!("expected N×3×H×W, got {:?}", x.dims()))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_net(
        &self,
        tape: &mut Tape<T>,
        slot: &NetSlot,
        input: Var,
        mode: Mode,
        trainable: Trainable,
        bind: Option<&[Var]>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let train = trainable.covers(slot.group);
        let mut outs: Vec<Var> = Vec::with_capacity(slot.spec.layers.len());
        for (i, layer) in slot.spec.layers.iter().enumerate() {
            tape.set_scope(&format!("{}.{}", slot.spec.name, layer.name));
            let src: Vec<Var> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    super::spec::Src::Input => input,
                    super::spec::Src::Layer(j) => outs[j],
                })
                .collect();
            let x = src[0];
            let mut p = slot.params[i].iter().map(|&id| match bind {
                Some(vars) => vars[id.0],
                None => tape.param(id, self.store.get(id).value.clone(), train),
            });
            let y = match layer.kind {
                LayerKind::RgbToGray { coeffs } => tape.rgb_to_gray(x, coeffs)?,
                LayerKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let w = p.next().expect("conv weight");
                    let b = if bias { p.next() } else { None };
                    drop(p);
                    tape.conv2d(x, w, b, stride, padding)?
                }
                LayerKind::BatchNorm2d { .. } => {
                    let g = p.next().expect("bn weight");
                    let b = p.next().expect("bn bias");
                    drop(p);
                    let r = &self.running[slot.bn[i].expect("bn slot")];
                    let (bn_mode, running) = match mode {
                        Mode::Eval => (BnMode::Running, Some((r.mean.as_slice(), r.var.as_slice()))),
                        _ => (BnMode::Batch, None),
                    };
                    let (y, stats) = tape.batchnorm2d(x, g, b, BN_EPS, bn_mode, running)?;
                    if let (Mode::Train, Some((mean, var))) = (mode, stats) {
                        let d = tape.value(x).dims();
                        updates.push(BnUpdate {
                            slot: slot.bn[i].expect("bn slot"),
                            mean,
                            var,
                            count: d[0] * d[2] * d[3],
                        });
                    }
                    y
                }
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                } => tape.maxpool2d(x, kernel, stride, padding)?,
                LayerKind::BlockAvgPool { block } => {
                    let d = tape.value(x).dims().to_vec();
                    if d.len() != 4 || !d[2].is_multiple_of(block) || !d[3].is_multiple_of(block) {
                        return Err(Error::shape(
                            format!("{}.{}", slot.spec.name, layer.name),
                            format!("{d:?} does not tile into {block}×{block} blocks"),
                        ));
                    }
                    tape.block_avgpool(x, d[2] / block, d[3] / block)?
                }
                LayerKind::GlobalAvgPool => tape.global_avgpool(x)?,
                LayerKind::Flatten => tape.flatten(x)?,
                LayerKind::Linear { bias, .. } => {
                    let w = p.next().expect("linear weight");
                    let b = if bias { p.next() } else { None };
                    drop(p);
                    tape.linear(x, w, b)?
                }
                LayerKind::Add => tape.add(x, src[1])?,
                LayerKind::ChannelConcat => tape.concat_channels(x, src[1])?,
            };
            outs.push(y);
        }
        Ok(*outs.last().unwrap_or(&input))
    }

    /// Shared representation: the single branch output, or the channel
    /// concatenation of the branch maps.
    pub fn features(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        trainable: Trainable,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        self.features_bound(tape, x, mode, trainable, None, updates)
    }

    fn features_bound(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        trainable: Trainable,
        bind: Option<&[Var]>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(self.run_net(tape, b, x, mode, trainable, bind, updates)?);
        }
        match self.spec.fusion {
            Fusion::None => Ok(outs[0]),
            Fusion::ChannelConcat => {
                tape.set_scope("fusion");
                tape.concat_channels(outs[0], outs[1])
            }
        }
    }

    pub fn head_logits(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        task: usize,
        mode: Mode,
        trainable: Trainable,
    ) -> Result<Var> {
        let slot = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Config(format!("no head for task {task}")))?;
        self.run_net(tape, slot, features, mode, trainable, None, &mut Vec::new())
    }

    /// Forward pass reading parameter `ParamId(i)` from `params[i]` instead
    /// of the store, so callers can differentiate with respect to their own
    /// leaves.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        params: &[Var],
        tasks: &[usize],
        mode: Mode,
    ) -> Result<ForwardOut> {
        if params.len() != self.store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter variables, got {}",
                self.store.len(),
                params.len()
            )));
        }
        let mut bn_updates = Vec::new();
        let features = self.features_bound(tape, x, mode, Trainable::None, Some(params), &mut bn_updates)?;
        let mut logits = Vec::with_capacity(tasks.len());
        for &t in tasks {
            let slot = self
                .heads
                .get(t)
                .ok_or_else(|| Error::Config(format!("no head for task {t}")))?;
            logits.push(self.run_net(
                tape,
                slot,
                features,
                mode,
                Trainable::None,
                Some(params),
                &mut Vec::new(),
            )?);
        }
        Ok(ForwardOut {
            features,
            logits,
            bn_updates,
        })
    }

    /// Shared features followed by each head in `tasks`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        tasks: &[usize],
        mode: Mode,
        trainable: Trainable,
    ) -> Result<ForwardOut> {
        let mut bn_updates = Vec::new();
        let features = self.features(tape, x, mode, trainable, &mut bn_updates)?;
        let logits = tasks
            .iter()
            .map(|&t| self.head_logits(tape, features, t, mode, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOut {
            features,
            logits,
            bn_updates,
        })
    }

    /// Gradient-free logits of several heads, evaluated in chunks of
    /// `batch` samples.
    pub fn predict(&self, x: &Tensor<T>, tasks: &[usize], mode: Mode, batch: usize) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let n = x.dims()[0];
        let batch = batch.max(1);
        let mut parts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); tasks.len()];
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_batch(start, end)?);
            let out = self.forward(&mut tape, xv, tasks, mode, Trainable::None)?;
            for (k, v) in out.logits.iter().enumerate() {
                parts[k].push(tape.value(*v).clone());
            }
            start = end;
        }
        parts.iter().map(|p| Tensor::concat_batch(p)).collect()
    }

    /// Gradient-free shared representation.
    pub fn feature_map(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features(&mut tape, xv, mode, Trainable::None, &mut Vec::new())?;
        Ok(tape.value(f).clone())
    }

    /// Parameters and running statistics as checkpoint records.
    pub fn to_records(&self) -> Records<T> {
        let mut recs: Records<T> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        for r in &self.running {
            let to_t = |v: &[f64]| {
                Tensor::from_vec(vec![v.len()], v.iter().map(|&x| T::of(x)).collect()).expect("length matches")
            };
            recs.push((format!("{}.running_mean", r.name), to_t(&r.mean)));
            recs.push((format!("{}.running_var", r.name), to_t(&r.var)));
        }
        recs
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            records: self.to_records(),
            sections: Vec::new(),
        }
    }

    /// Overwrites parameters and running statistics from records whose
    /// names and shapes must match this model exactly.
    pub fn load_records(&mut self, recs: &Records<T>, origin: &Path) -> Result<()> {
        let find = |name: &str| recs.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let expected = self.store.len() + 2 * self.running.len();
        if recs.len() != expected {
            return Err(Error::format(
                origin,
                format!("expected {expected} records, found {}", recs.len()),
            ));
        }
        let mut values = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            let t = find(&p.name).ok_or_else(|| Error::format(origin, format!("missing record `{}`", p.name)))?;
            if t.dims() != p.value.dims() {
                return Err(Error::format(
                    origin,
                    format!("`{}` has shape {:?}, expected {:?}", p.name, t.dims(), p.value.dims()),
                ));
            }
            values.push(t.clone());
        }
        let mut stats = Vec::with_capacity(self.running.len());
        for r in &self.running {
            let get = |suffix: &str| -> Result<Vec<f64>> {
                let name = format!("{}.{suffix}", r.name);
                let t = find(&name).ok_or_else(|| Error::format(origin, format!("missing record `{name}`")))?;
                if t.dims() != [r.mean.len()] {
                    return Err(Error::format(origin, format!("`{name}` has shape {:?}", t.dims())));
                }
                Ok(t.data().iter().map(|v| v.as_f64()).collect())
            };
            stats.push((get("running_mean")?, get("running_var")?));
        }
        for (i, v) in values.into_iter().enumerate() {
            self.store.get_mut(ParamId(i)).value = v;
        }
        for (r, (m, v)) in self.running.iter_mut().zip(stats) {
            r.mean = m;
            r.var = v;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::<T>::load(path)?;
        self.load_records(&ck.records, path)
    }

    /// Same network at another precision.
    pub fn cast<U: Elem>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.push(p.name.clone(), p.value.cast());
        }
        Model {
            spec: self.spec.clone(),
            store,
            groups: self.groups.clone(),
            branches: self.branches.clone(),
            heads: self.heads.clone(),
            running: self.running.clone(),
        }
    }

    /// Snapshot of all parameter values (for best-weights restore).
    pub fn snapshot(&self) -> (Vec<Tensor<T>>, Vec<(Vec<f64>, Vec<f64>)>) {
        (
            self.store.iter().map(|(_, p)| p.value.clone()).collect(),
            self.running.iter().map(|r| (r.mean.clone(), r.var.clone())).collect(),
        )
    }

    pub fn restore(&mut self, snap: &(Vec<Tensor<T>>, Vec<(Vec<f64>, Vec<f64>)>)) {
        for (i, v) in snap.0.iter().enumerate() {
            self.store.get_mut(ParamId(i)).value = v.clone();
        }
        for (r, (m, v)) in self.running.iter_mut().zip(&snap.1) {
            r.mean = m.clone();
            r.var = v.clone();
        }
    }
}
