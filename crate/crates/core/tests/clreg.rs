#![allow(clippy::needless_range_loop)]

use dscl_core::clreg::{Learner, MethodKind, RegConfig, Regularizer, RegularizerState};
use dscl_core::nets::{build_ds_network, ArchConfig, Mode, Model, Trainable};
use dscl_core::tensor::optim::{ParamStore, Sgd};
use dscl_core::tensor::{ParamId, Tape, Tensor, Var};
use dscl_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// logits = W·x + b with W (2×3) shared and b (2) the task head.
#[derive(Clone)]
struct Tiny {
    store: ParamStore<f64>,
}

impl Tiny {
    fn new(w: [f64; 6], b: [f64; 2]) -> Self {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(vec![2, 3], w.to_vec()).unwrap());
        store.push("head.0.b", Tensor::from_vec(vec![2], b.to_vec()).unwrap());
        Tiny { store }
    }

    fn w(&self) -> &[f64] {
        self.store.get(ParamId(0)).value.data()
    }

    fn b(&self) -> &[f64] {
        self.store.get(ParamId(1)).value.data()
    }
}

impl Learner<f64> for Tiny {
    fn store(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn shared_ids(&self) -> Vec<ParamId> {
        vec![ParamId(0)]
    }

    fn task_logits(&self, tape: &mut Tape<f64>, x: Var, tasks: &[usize], _: Mode, tr: Trainable) -> Result<Vec<Var>> {
        let shared = !matches!(tr, Trainable::None | Trainable::Head(_));
        let head = !matches!(tr, Trainable::None | Trainable::Shared);
        let w = tape.param(ParamId(0), self.store.get(ParamId(0)).value.clone(), shared);
        let b = tape.param(ParamId(1), self.store.get(ParamId(1)).value.clone(), head);
        let flat = tape.flatten(x)?;
        let y = tape.linear(flat, w, Some(b))?;
        Ok(tasks.iter().map(|_| y).collect())
    }
}

fn data() -> (Tensor<f64>, Vec<usize>) {
    let x = vec![
        0.5, -1.0, 2.0, //
        1.5, 0.25, -0.5, //
        -0.75, 0.8, 0.1, //
        0.3, 0.3, -1.2,
    ];
    (Tensor::from_vec(vec![4, 3, 1, 1], x).unwrap(), vec![0, 1, 1, 0])
}

fn tiny() -> Tiny {
    Tiny::new([0.2, -0.4, 0.1, 0.7, 0.05, -0.3], [0.1, -0.2])
}

fn reg(method: MethodKind, lambda: Option<f64>) -> Regularizer<f64, Tiny> {
    Regularizer::new(&RegConfig {
        lambda,
        ..RegConfig::new(method)
    })
    .unwrap()
}

fn logits(m: &Tiny, x: &[f64]) -> [f64; 2] {
    let (w, b) = (m.w(), m.b());
    [
        w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b[0],
        w[3] * x[0] + w[4] * x[1] + w[5] * x[2] + b[1],
    ]
}

#[test]
fn fisher_matches_per_sample_loop() {
    let m = tiny();
    let (x, y) = data();
    let f = reg(MethodKind::Ewc, None).fisher(&m, 0, &x, &y).unwrap();
    let mut oracle = [0.0; 6];
    for s in 0..4 {
        let xs = &x.data()[s * 3..s * 3 + 3];
        let z = logits(&m, xs);
        let mx = z[0].max(z[1]);
        let e = [(z[0] - mx).exp(), (z[1] - mx).exp()];
        let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        for k in 0..2 {
            let d = p[k] - if y[s] == k { 1.0 } else { 0.0 };
            for j in 0..3 {
                oracle[k * 3 + j] += (d * xs[j]).powi(2) / 4.0;
            }
        }
    }
    assert_eq!(f.len(), 1, "importance must only cover shared parameters");
    for (a, b) in f[0].data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn mas_matches_per_sample_loop() {
    let m = tiny();
    let (x, y) = data();
    let r = reg(MethodKind::Mas, None);
    let omega = r.mas(&m, 0, &x, &y).unwrap();
    let mut oracle = [0.0; 6];
    for s in 0..4 {
        let xs = &x.data()[s * 3..s * 3 + 3];
        let z = logits(&m, xs);
        for k in 0..2 {
            for j in 0..3 {
                oracle[k * 3 + j] += (2.0 * z[k] * xs[j]).abs() / 4.0;
            }
        }
    }
    for (a, b) in omega[0].data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    // duplicating every sample leaves the mean unchanged
    let xx = Tensor::concat_batch(&[x.clone(), x.clone()]).unwrap();
    let yy: Vec<usize> = y.iter().chain(&y).copied().collect();
    let twice = r.mas(&m, 0, &xx, &yy).unwrap();
    assert!(twice[0].max_abs_diff(&omega[0]) < 1e-12);
}

#[test]
fn mas_single_weight_example() {
    // f(x) = w·x with one weight: Ω_w = |2·w·x²|
    let m = Tiny::new([1.5, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0]);
    let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![0.4, 0.0, 0.0]).unwrap();
    let omega = reg(MethodKind::Mas, None).mas(&m, 0, &x, &[0]).unwrap();
    assert!((omega[0].data()[0] - 2.0 * 1.5 * 0.16).abs() < 1e-12);
}

#[test]
fn empty_data_is_a_state_error() {
    let m = tiny();
    let x = Tensor::<f64>::zeros(&[0, 3, 1, 1]);
    assert!(matches!(
        reg(MethodKind::Ewc, None).fisher(&m, 0, &x, &[]),
        Err(Error::State(_))
    ));
    assert!(matches!(
        reg(MethodKind::Mas, None).mas(&m, 0, &x, &[]),
        Err(Error::State(_))
    ));
}

fn grads_into(m: &mut Tiny, r: &Regularizer<f64, Tiny>, x: &Tensor<f64>, y: &[usize]) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = m
        .task_logits(&mut tape, xv, &[0], Mode::Train, Trainable::SharedAndHead(0))
        .unwrap();
    let mut loss = tape.cross_entropy(out[0], y).unwrap();
    if let Some(p) = r.penalty(&mut tape, m, x, &[]).unwrap() {
        loss = tape.add(loss, p).unwrap();
    }
    let g = tape.backward(loss).unwrap();
    m.store.accumulate_grads(g.into_params());
}

#[test]
fn si_one_step_identity() {
    let mut m = tiny();
    let (x, y) = data();
    let mut r = reg(MethodKind::Si, None);
    r.on_task_start(&m, 0).unwrap();
    grads_into(&mut m, &r, &x, &y);
    let g = m.store.get(ParamId(0)).grad.clone().unwrap();
    let lr = 0.05;
    r.before_step(&m.store).unwrap();
    Sgd::new(0.0, 0.0)
        .step(&mut m.store, &[ParamId(0), ParamId(1)], lr)
        .unwrap();
    r.after_step(&m.store).unwrap();
    for (w, g) in r.state.si_omega[0].data().iter().zip(g.data()) {
        assert!((w - lr * g * g).abs() < 1e-6, "{w} vs {}", lr * g * g);
    }
}

#[test]
fn si_task_end_example() {
    let mut m = tiny();
    let mut r = reg(MethodKind::Si, None);
    r.on_task_start(&m, 0).unwrap();
    r.state.si_omega[0].data_mut()[0] = 0.02;
    r.state.si_omega[0].data_mut()[1] = -0.5;
    m.store.get_mut(ParamId(0)).value.data_mut()[0] += 0.1;
    let (x, y) = data();
    r.on_task_end(&m, 0, &x, &y).unwrap();
    let om = r.state.omega[0].data();
    assert!((om[0] - 0.02 / 0.11).abs() < 1e-12);
    assert!((om[0] - 0.1818).abs() < 1e-4);
    assert_eq!(om[1], 0.0, "negative path contribution is clamped");
    assert_eq!(om[2], 0.0, "untouched parameter contributes nothing");
    assert_eq!(r.state.anchors[0], m.store.get(ParamId(0)).value);
}

fn state_with(omega: Vec<f64>, anchor: Vec<f64>, lambda: f64) -> RegularizerState<f64> {
    let n = omega.len();
    RegularizerState {
        method: MethodKind::Ewc,
        lambda,
        temperature: 2.0,
        xi: 0.1,
        tasks_done: 1,
        ids: vec![ParamId(0)],
        anchors: vec![Tensor::from_vec(vec![n], anchor).unwrap()],
        omega: vec![Tensor::from_vec(vec![n], omega).unwrap()],
        si_omega: vec![],
        si_start: vec![],
    }
}

#[derive(Clone)]
struct Vector(ParamStore<f64>);

impl Learner<f64> for Vector {
    fn store(&self) -> &ParamStore<f64> {
        &self.0
    }
    fn shared_ids(&self) -> Vec<ParamId> {
        vec![ParamId(0)]
    }
    fn task_logits(&self, _: &mut Tape<f64>, _: Var, _: &[usize], _: Mode, _: Trainable) -> Result<Vec<Var>> {
        unreachable!()
    }
}

fn vector(theta: Vec<f64>) -> Vector {
    let mut s = ParamStore::new();
    s.push("theta", Tensor::from_vec(vec![theta.len()], theta).unwrap());
    Vector(s)
}

fn penalty_value(r: &Regularizer<f64, Vector>, v: &Vector) -> Option<f64> {
    let mut tape = Tape::new();
    let x = Tensor::zeros(&[1, 3, 1, 1]);
    r.penalty(&mut tape, v, &x, &[]).unwrap().map(|p| tape.value(p).item())
}

#[test]
fn quadratic_penalty_example_and_zero_at_anchor() {
    let cfg = RegConfig {
        lambda: Some(2.0),
        ..RegConfig::new(MethodKind::Ewc)
    };
    let r2 = Regularizer::<f64, Vector>::with_state(&cfg, state_with(vec![1.0, 2.0], vec![0.0, 0.0], 2.0)).unwrap();
    assert_eq!(penalty_value(&r2, &vector(vec![1.0, 1.0])), Some(3.0));
    assert_eq!(penalty_value(&r2, &vector(vec![0.0, 0.0])), Some(0.0));
}

#[test]
fn quadratic_penalty_gradient_matches_finite_differences() {
    let cfg = RegConfig {
        lambda: Some(3.0),
        ..RegConfig::new(MethodKind::Mas)
    };
    let mut st = state_with(vec![0.5, 2.0, 0.0, 1.25], vec![0.1, -0.3, 0.7, 0.0], 3.0);
    st.method = MethodKind::Mas;
    let r = Regularizer::<f64, Vector>::with_state(&cfg, st).unwrap();
    let theta = vec![0.4, 0.2, -0.1, 0.9];
    let v = vector(theta.clone());
    let mut tape = Tape::new();
    let p = r
        .penalty(&mut tape, &v, &Tensor::zeros(&[1, 3, 1, 1]), &[])
        .unwrap()
        .unwrap();
    let g = tape.backward(p).unwrap();
    let g = g.param(ParamId(0)).unwrap();
    let h = 1e-5;
    for i in 0..4 {
        let mut a = theta.clone();
        a[i] += h;
        let mut b = theta.clone();
        b[i] -= h;
        let num = (penalty_value(&r, &vector(a)).unwrap() - penalty_value(&r, &vector(b)).unwrap()) / (2.0 * h);
        let ana = g.data()[i];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        assert!(rel < 1e-4, "coord {i}: {ana} vs {num}");
        let closed = 3.0 * [0.5, 2.0, 0.0, 1.25][i] * (theta[i] - [0.1, -0.3, 0.7, 0.0][i]);
        assert!((ana - closed).abs() < 1e-12);
    }
}

#[test]
fn penalty_shape_mismatch_is_a_state_error() {
    let cfg = RegConfig::new(MethodKind::Ewc);
    let r = Regularizer::<f64, Vector>::with_state(&cfg, state_with(vec![1.0, 2.0, 3.0], vec![0.0; 3], 1.0)).unwrap();
    let mut tape = Tape::new();
    let res = r.penalty(&mut tape, &vector(vec![1.0, 1.0]), &Tensor::zeros(&[1, 3, 1, 1]), &[]);
    assert!(matches!(res, Err(Error::State(_))));
}

#[test]
fn no_penalty_before_first_task_or_with_zero_lambda() {
    let m = tiny();
    let x = data().0;
    for method in MethodKind::ALL {
        let r = reg(method, None);
        let mut tape = Tape::new();
        assert!(r.penalty(&mut tape, &m, &x, &[]).unwrap().is_none(), "{method}");
    }
    let mut r = reg(MethodKind::Ewc, Some(0.0));
    let (x, y) = data();
    r.on_task_end(&m, 0, &x, &y).unwrap();
    let mut tape = Tape::new();
    assert!(r.penalty(&mut tape, &m, &x, &[]).unwrap().is_none());
}

#[test]
fn ewc_importance_accumulates_by_sum() {
    let mut m = tiny();
    let (x, y) = data();
    let mut r = reg(MethodKind::Ewc, None);
    let f1 = r.fisher(&m, 0, &x, &y).unwrap();
    r.on_task_end(&m, 0, &x, &y).unwrap();
    m.store.get_mut(ParamId(0)).value.data_mut()[3] += 0.3;
    let y2 = vec![1, 1, 0, 0];
    let f2 = r.fisher(&m, 0, &x, &y2).unwrap();
    r.on_task_end(&m, 1, &x, &y2).unwrap();
    for ((o, a), b) in r.state.omega[0].data().iter().zip(f1[0].data()).zip(f2[0].data()) {
        assert!((o - (a + b)).abs() < 1e-12);
        assert!(*o >= 0.0);
    }
    assert_eq!(r.state.ids, vec![ParamId(0)]);
}

/// Trains `m` on task B for `steps` plain-SGD steps after importance from
/// task A, returning ‖θ − θ*‖.
fn drift_after(method: MethodKind, lambda: f64, lr: f64, steps: usize) -> f64 {
    let mut m = tiny();
    let (x, y) = data();
    let mut r = reg(method, Some(lambda));
    r.on_task_start(&m, 0).unwrap();
    let mut sgd = Sgd::new(0.0, 0.0);
    for _ in 0..20 {
        grads_into(&mut m, &r, &x, &y);
        r.before_step(&m.store).unwrap();
        sgd.step(&mut m.store, &[ParamId(0), ParamId(1)], 0.1).unwrap();
        r.after_step(&m.store).unwrap();
    }
    r.on_task_end(&m, 0, &x, &y).unwrap();
    let anchor = m.store.get(ParamId(0)).value.clone();
    let y2: Vec<usize> = y.iter().map(|v| 1 - v).collect();
    r.on_task_start(&m, 1).unwrap();
    for _ in 0..steps {
        grads_into(&mut m, &r, &x, &y2);
        r.before_step(&m.store).unwrap();
        sgd.step(&mut m.store, &[ParamId(0), ParamId(1)], lr).unwrap();
        r.after_step(&m.store).unwrap();
    }
    let now = m.store.get(ParamId(0)).value.data();
    now.iter()
        .zip(anchor.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn larger_lambda_means_less_drift() {
    for method in [MethodKind::Ewc, MethodKind::Si, MethodKind::Mas] {
        let lr = 1e-7;
        let drifts: Vec<f64> = [0.0, 1e2, 1e4, 1e6]
            .iter()
            .map(|&l| drift_after(method, l, lr, 50))
            .collect();
        for w in drifts.windows(2) {
            assert!(w[1] < w[0], "{method}: {drifts:?}");
        }
    }
}

#[test]
fn regstate_roundtrips_through_a_checkpoint_section() {
    let mut m = tiny();
    let (x, y) = data();
    let cfg = RegConfig::new(MethodKind::Si);
    let mut r: Regularizer<f64, Tiny> = Regularizer::new(&cfg).unwrap();
    r.on_task_start(&m, 0).unwrap();
    grads_into(&mut m, &r, &x, &y);
    r.before_step(&m.store).unwrap();
    Sgd::new(0.9, 0.0)
        .step(&mut m.store, &[ParamId(0), ParamId(1)], 0.1)
        .unwrap();
    r.after_step(&m.store).unwrap();
    r.on_task_end(&m, 0, &x, &y).unwrap();
    let recs = r.state.to_records(&m.store);
    let back = RegularizerState::from_records(&recs, &m.store).unwrap();
    assert_eq!(back, r.state);
    assert!(recs.iter().all(|(n, _)| !n.contains("head.")));
    let bad: Vec<_> = recs
        .iter()
        .map(|(n, t)| {
            if n.starts_with("omega.") {
                (n.clone(), Tensor::zeros(&[7]))
            } else {
                (n.clone(), t.clone())
            }
        })
        .collect();
    assert!(matches!(
        RegularizerState::from_records(&bad, &m.store),
        Err(Error::State(_))
    ));
}

#[test]
fn untouched_student_has_zero_distillation_loss() {
    let spec = build_ds_network(&ArchConfig::new(32, 0.125), &[2, 2]).unwrap();
    let m: Model<f32> = Model::new(spec, 3).unwrap();
    let mut r: Regularizer<f32, Model<f32>> = Regularizer::new(&RegConfig::new(MethodKind::Lwf)).unwrap();
    r.on_task_start(&m, 0).unwrap();
    assert!(r.distill_tasks().is_empty());
    r.on_task_end(&m, 0, &Tensor::zeros(&[1, 3, 32, 32]), &[0]).unwrap();
    r.on_task_start(&m, 1).unwrap();
    assert_eq!(r.distill_tasks(), &[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = m
        .forward(&mut tape, xv, &[0, 1], Mode::Train, Trainable::SharedAndHead(1))
        .unwrap();
    let p = r.penalty(&mut tape, &m, &x, &out.logits[..1]).unwrap().unwrap();
    assert_eq!(tape.value(p).item(), 0.0);
}
