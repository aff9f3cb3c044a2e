//! Central-difference checks of every analytic gradient.

use crl_core::distillation::{
    classification_loss, fkd_old_loss, kl_divergence, lfl_loss, lwf_old_loss, tempered_softmax,
};
use crl_core::numerics::forward;
use crl_core::trainer::batch_gradients;
use crl_core::{Architecture, DenseTensor, DistillConfig, Method, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: u64 = 24;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn numeric_grad(x: &DenseTensor, f: impl Fn(&DenseTensor) -> f64) -> DenseTensor {
    let mut g = DenseTensor::zeros(x.shape());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let v = x.data()[k];
        probe.data_mut()[k] = v + H;
        let up = f(&probe);
        probe.data_mut()[k] = v - H;
        let down = f(&probe);
        probe.data_mut()[k] = v;
        g.data_mut()[k] = (up - down) / (2.0 * H);
    }
    g
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, tiny)`.
fn rel_error(analytic: &DenseTensor, numeric: &DenseTensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.data().iter().copied()) + norm(&mut numeric.data().iter().copied());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn classification_loss_gradient() {
    for c in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(c);
        let n = rng.gen_range(1..7);
        let classes = rng.gen_range(2..9);
        let acts = random_matrix(&mut rng, n, classes, 4.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let (_, g) = classification_loss(&acts, &labels).unwrap();
        let num = numeric_grad(&acts, |a| classification_loss(a, &labels).unwrap().0);
        let e = rel_error(&g, &num);
        assert!(e < TOL, "config {c}: rel error {e}");
    }
}

#[test]
fn tempered_kl_gradient_single_row() {
    // d KL(p || softmax(b/T)) / db = (q - p) / T
    for c in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
        let l = rng.gen_range(2..10);
        let t = rng.gen_range(0.5..4.0);
        let a: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = random_matrix(&mut rng, 1, l, 3.0);
        let p = tempered_softmax(&a, t).unwrap();
        let q = tempered_softmax(b.data(), t).unwrap();
        let analytic =
            DenseTensor::matrix(1, l, q.iter().zip(&p).map(|(q, p)| (q - p) / t).collect()).unwrap();
        let num = numeric_grad(&b, |b| kl_divergence(&p, &tempered_softmax(b.data(), t).unwrap()).unwrap());
        let e = rel_error(&analytic, &num);
        assert!(e < TOL, "config {c}: rel error {e}");
    }
}

/// Random FKD problem whose per-sample divergences all sit at least `gap`
/// away from their margins, so the hinge does not switch under the probe.
fn fkd_problem(seed: u64, method: Method, gap: f64) -> (DenseTensor, DenseTensor, DistillConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.gen_range(1..6);
        let l = rng.gen_range(2..12);
        let mut cfg = DistillConfig::new(method);
        cfg.temperature = rng.gen_range(0.5..4.0);
        cfg.neighborhood_size = rng.gen_range(0..l + 2);
        cfg.margin_beta = [0.0, 0.01, 0.05, 0.2][rng.gen_range(0..4)];
        let old = random_matrix(&mut rng, n, l, 3.0);
        let new = random_matrix(&mut rng, n, l, 3.0);
        let mut plain = cfg.clone();
        plain.margin_beta = 0.0;
        let d = fkd_old_loss(&old, &new, &plain).unwrap().relaxed_divergences;
        let m = fkd_old_loss(&old, &new, &cfg).unwrap().margins;
        if d.iter().zip(&m).all(|(d, m)| (d - m).abs() > gap) {
            return (old, new, cfg);
        }
    }
}

#[test]
fn fkd_gradient_every_variant() {
    for method in [Method::FkdBasic, Method::FkdNs, Method::FkdCr, Method::FkdNsCr] {
        for c in 0..CONFIGS {
            let (old, new, cfg) = fkd_problem(1000 * method as u64 + c, method, 1e-4);
            let out = fkd_old_loss(&old, &new, &cfg).unwrap();
            let num = numeric_grad(&new, |b| fkd_old_loss(&old, b, &cfg).unwrap().loss);
            let e = rel_error(&out.grads, &num);
            assert!(e < TOL, "{method} config {c} ({cfg:?}): rel error {e}");
        }
    }
}

#[test]
fn inactive_samples_have_zero_gradient() {
    let mut seen = 0;
    for c in 0..200 {
        let (old, new, cfg) = fkd_problem(5000 + c, Method::FkdNsCr, 1e-4);
        let out = fkd_old_loss(&old, &new, &cfg).unwrap();
        for (i, &r) in out.relaxed_divergences.iter().enumerate() {
            if r == 0.0 {
                seen += 1;
                assert!(out.grads.row(i).iter().all(|&g| g == 0.0));
            }
        }
    }
    assert!(seen > 0, "no inactive sample drawn");
}

#[test]
fn lwf_gradient() {
    for c in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + c);
        let n = rng.gen_range(1..6);
        let l = rng.gen_range(1..10);
        let t = rng.gen_range(0.5..4.0);
        let old = random_matrix(&mut rng, n, l, 3.0);
        let new = random_matrix(&mut rng, n, l, 3.0);
        let (_, g) = lwf_old_loss(&old, &new, t).unwrap();
        let num = numeric_grad(&new, |b| lwf_old_loss(&old, b, t).unwrap().0);
        let e = rel_error(&g, &num);
        assert!(e < TOL, "config {c}: rel error {e}");
    }
}

#[test]
fn lfl_gradient() {
    for c in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + c);
        let n = rng.gen_range(1..6);
        let d = rng.gen_range(1..8);
        let w = rng.gen_range(0.1..3.0);
        let old = random_matrix(&mut rng, n, d, 2.0);
        let new = random_matrix(&mut rng, n, d, 2.0);
        let (_, g) = lfl_loss(&old, &new, w).unwrap();
        let num = numeric_grad(&new, |b| lfl_loss(&old, b, w).unwrap().0);
        let e = rel_error(&g, &num);
        assert!(e < TOL, "config {c}: rel error {e}");
    }
}

fn perturb_param(model: &ModelState, p: usize, k: usize, delta: f64) -> ModelState {
    let mut m = model.clone();
    m.params_mut()[p].data_mut()[k] += delta;
    m
}

/// Total objective of the full model against every parameter, through
/// the trainer's own batch routine.
#[test]
fn total_objective_parameter_gradients() {
    let methods = [
        Method::Finetune,
        Method::Lwf,
        Method::Lfl,
        Method::FkdBasic,
        Method::FkdNs,
        Method::FkdCr,
        Method::FkdNsCr,
    ];
    let mut checked = 0;
    for c in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + c);
        let method = methods[c as usize % methods.len()];
        let arch = Architecture {
            input_dim: rng.gen_range(2..6),
            hidden: vec![rng.gen_range(3..7); rng.gen_range(0..3)],
            embed_dim: rng.gen_range(2..5),
        };
        let l_old = rng.gen_range(2..6);
        let l_new = rng.gen_range(1..4);
        let teacher = ModelState::init(&arch, l_old, &mut rng).unwrap();
        let mut model = teacher.clone();
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        model.expand_classifier(l_new, &mut rng);
        let n = rng.gen_range(2..6);
        let x = random_matrix(&mut rng, n, arch.input_dim, 1.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(l_old..l_old + l_new)).collect();
        let mut cfg = DistillConfig::new(method);
        cfg.lambda_old = rng.gen_range(0.1..5.0);
        cfg.neighborhood_size = rng.gen_range(0..l_old + 1);
        cfg.margin_beta = 0.02;
        let teacher_ref = (method != Method::Finetune).then_some(&teacher);
        let total = |m: &ModelState| batch_gradients(m, teacher_ref, &x, &labels, &cfg).unwrap().0.total;

        // Skip draws where a ReLU pre-activation or a hinge is within reach
        // of the probe.
        if !relu_margin_ok(&model, &x, 1e-3) || !hinge_margin_ok(&model, &teacher, &x, &cfg, 1e-4) {
            continue;
        }
        let (_, grads) = batch_gradients(&model, teacher_ref, &x, &labels, &cfg).unwrap();
        for (p, g) in grads.tensors().into_iter().enumerate() {
            let mut num = DenseTensor::zeros(g.shape());
            for k in 0..g.len() {
                let up = total(&perturb_param(&model, p, k, H));
                let down = total(&perturb_param(&model, p, k, -H));
                num.data_mut()[k] = (up - down) / (2.0 * H);
            }
            let e = rel_error(g, &num);
            assert!(e < TOL, "{method} config {c} param {p}: rel error {e}");
        }
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} configs were smooth enough");
}

fn relu_margin_ok(model: &ModelState, x: &DenseTensor, gap: f64) -> bool {
    let mut h = x.clone();
    for l in &model.layers {
        let mut z = h.matmul(&l.weight).unwrap();
        z.add_row_vector(&l.bias).unwrap();
        if l.relu && z.data().iter().any(|v| v.abs() < gap) {
            return false;
        }
        h = if l.relu { z.map(|v| v.max(0.0)) } else { z };
    }
    true
}

fn hinge_margin_ok(model: &ModelState, teacher: &ModelState, x: &DenseTensor, cfg: &DistillConfig, gap: f64) -> bool {
    if !cfg.method.consistency_relaxation() {
        return true;
    }
    let old = forward(teacher, x).unwrap().activations;
    let new = forward(model, x).unwrap().activations.column_slice(0, teacher.class_count).unwrap();
    let mut plain = cfg.clone();
    plain.margin_beta = 0.0;
    let d = fkd_old_loss(&old, &new, &plain).unwrap().relaxed_divergences;
    let m = fkd_old_loss(&old, &new, cfg).unwrap().margins;
    d.iter().zip(&m).all(|(d, m)| (d - m).abs() > gap)
}
