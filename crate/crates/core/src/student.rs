//! Two-layer students trained by one-pass SGD.

use nalgebra::DMatrix;

use crate::config::ExperimentConfig;
use crate::datagen::{
    self, folding_coefficients, make_gaussian_features, make_gaussian_features_normalized,
    make_hadamard_features, FeatureKind, FeatureMatrix, Folding, FoldingCoefficients, InputBatch, NetworkParams,
};
use crate::error::{HmlError, Result};
use crate::odeflow::generalisation_error;
use crate::orderparams::{measure_order_params, omega_spectrum, OrderParameterSet, Spectrum, Trajectory};
use crate::rng::Purpose;

/// Training samples generated per projection block.
const CHUNK: usize = 256;

/// φ(x) = Σ_k v_k g(w_k·x/√N).
pub fn forward(net: &NetworkParams, x: &[f64]) -> Result<f64> {
    net.forward(x)
}

/// Reusable buffers for SGD steps.
#[derive(Debug, Default, Clone)]
pub struct SgdWorkspace {
    lambda: Vec<f64>,
    coef: Vec<f64>,
    dv: Vec<f64>,
    grad: Vec<f64>,
}

/// One online SGD step on ½Δ² with Δ = φ(x) − y.
///
/// First layer: w_k ← w_k − (η/√N) v_k Δ g'(λ_k) x; second layer:
/// v_k ← v_k − (η/N) Δ g(λ_k), both from the pre-update weights.
/// Returns Δ.
pub fn sgd_step(net: &mut NetworkParams, x: &[f64], label: f64, eta: f64) -> Result<f64> {
    if x.len() != net.input_dim() {
        return Err(HmlError::Dimension(format!("input has length {}, network expects {}", x.len(), net.input_dim())));
    }
    Ok(step_with(net, x, label, eta, &mut SgdWorkspace::default()))
}

fn local_fields(net: &NetworkParams, x: &[f64], out: &mut Vec<f64>) {
    let k = net.hidden();
    out.clear();
    out.resize(k, 0.0);
    let data = net.w.as_slice();
    for (i, &xi) in x.iter().enumerate() {
        let col = &data[i * k..(i + 1) * k];
        for (l, &w) in out.iter_mut().zip(col) {
            *l += w * xi;
        }
    }
    let scale = 1.0 / (x.len() as f64).sqrt();
    for l in out.iter_mut() {
        *l *= scale;
    }
}

/// Per-node coefficients of the update for one sample; returns Δ.
fn coefficients(net: &NetworkParams, x: &[f64], label: f64, eta: f64, ws: &mut SgdWorkspace) -> f64 {
    let k = net.hidden();
    let n = x.len() as f64;
    local_fields(net, x, &mut ws.lambda);
    let act = net.activation;
    let out: f64 = (0..k).map(|a| net.v[a] * act.g(ws.lambda[a])).sum();
    let delta = out - label;
    ws.coef.resize(k, 0.0);
    ws.dv.resize(k, 0.0);
    for a in 0..k {
        ws.coef[a] = -eta / n.sqrt() * net.v[a] * delta * act.g_prime(ws.lambda[a]);
        ws.dv[a] = -eta / n * delta * act.g(ws.lambda[a]);
    }
    delta
}

pub(crate) fn step_with(net: &mut NetworkParams, x: &[f64], label: f64, eta: f64, ws: &mut SgdWorkspace) -> f64 {
    let delta = coefficients(net, x, label, eta, ws);
    let k = net.hidden();
    let data = net.w.as_mut_slice();
    for (i, &xi) in x.iter().enumerate() {
        let col = &mut data[i * k..(i + 1) * k];
        for (w, &c) in col.iter_mut().zip(&ws.coef) {
            *w += c * xi;
        }
    }
    for a in 0..k {
        net.v[a] += ws.dv[a];
    }
    delta
}

/// Mini-batch step: the per-sample updates of every sample in the batch,
/// all evaluated at the pre-batch weights, are summed.
fn batch_step(net: &mut NetworkParams, xs: &DMatrix<f64>, cols: std::ops::Range<usize>, labels: &[f64], eta: f64, ws: &mut SgdWorkspace) {
    let k = net.hidden();
    let n = net.input_dim();
    let mut grad = std::mem::take(&mut ws.grad);
    grad.clear();
    grad.resize(k * n, 0.0);
    let mut dv_sum = vec![0.0; k];
    for mu in cols {
        let x = xs.column(mu);
        let x = x.as_slice();
        coefficients(net, x, labels[mu], eta, ws);
        for (i, &xi) in x.iter().enumerate() {
            for a in 0..k {
                grad[i * k + a] += ws.coef[a] * xi;
            }
        }
        for a in 0..k {
            dv_sum[a] += ws.dv[a];
        }
    }
    for (w, g) in net.w.as_mut_slice().iter_mut().zip(&grad) {
        *w += g;
    }
    for a in 0..k {
        net.v[a] += dv_sum[a];
    }
    ws.grad = grad;
}

/// (1/2P) Σ_μ (φ(x_μ) − y_μ)² over a held-out batch.
pub fn empirical_test_error(net: &NetworkParams, inputs: &InputBatch, labels: &[f64]) -> Result<f64> {
    let p = inputs.entries.nrows();
    if p == 0 {
        return Err(HmlError::InvalidArgument("empty test batch".into()));
    }
    if labels.len() != p {
        return Err(HmlError::Dimension(format!("{p} inputs but {} labels", labels.len())));
    }
    if inputs.entries.ncols() != net.input_dim() {
        return Err(HmlError::Dimension(format!(
            "inputs have dimension {}, network expects {}",
            inputs.entries.ncols(),
            net.input_dim()
        )));
    }
    let fields = &inputs.entries * net.w.transpose() / (net.input_dim() as f64).sqrt();
    Ok(squared_error(net, &fields, labels, true))
}

/// Half mean squared error from a P×K (or K×P when `!rows`) field matrix.
fn squared_error(net: &NetworkParams, fields: &DMatrix<f64>, labels: &[f64], rows: bool) -> f64 {
    let mut total = 0.0;
    for (mu, &y) in labels.iter().enumerate() {
        let mut out = 0.0;
        for a in 0..net.hidden() {
            let l = if rows { fields[(mu, a)] } else { fields[(a, mu)] };
            out += net.v[a] * net.activation.g(l);
        }
        total += (out - y) * (out - y);
    }
    total / (2.0 * labels.len() as f64)
}

/// A held-out test set stored in single precision, one column per sample.
#[derive(Debug, Clone)]
pub struct TestSet {
    inputs: DMatrix<f32>,
    labels: Vec<f64>,
}

impl TestSet {
    pub fn sample(
        features: &FeatureMatrix,
        folding: &Folding,
        teacher: &NetworkParams,
        p: usize,
        seed: u64,
    ) -> Result<Self> {
        if p == 0 {
            return Err(HmlError::InvalidArgument("empty test batch".into()));
        }
        let mut inputs = DMatrix::<f32>::zeros(features.n(), p);
        let mut labels = Vec::with_capacity(p);
        let mut start = 0;
        while start < p {
            let b = CHUNK.min(p - start);
            let lat = datagen::latent_columns(features.d(), b, seed, Purpose::TestLatents, start as u64);
            let x = features.project_columns(&lat);
            for j in 0..b {
                for (dst, &src) in inputs.column_mut(start + j).iter_mut().zip(x.column(j).iter()) {
                    *dst = folding.apply(src) as f32;
                }
            }
            labels.extend(datagen::labels_for_columns(&lat, teacher));
            start += b;
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Empirical ε_g of `net` on this set.
    pub fn error(&self, net: &NetworkParams) -> Result<f64> {
        if net.input_dim() != self.inputs.nrows() {
            return Err(HmlError::Dimension("test inputs do not match the network".into()));
        }
        let w32 = net.w.map(|x| x as f32);
        let fields32 = &w32 * &self.inputs;
        let scale = 1.0 / (net.input_dim() as f64).sqrt();
        let fields = fields32.map(|x| x as f64 * scale);
        Ok(squared_error(net, &fields, &self.labels, false))
    }
}

/// Features, folding, teacher and initial student of one experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub features: FeatureMatrix,
    pub folding: Folding,
    pub coefficients: FoldingCoefficients,
    pub teacher: NetworkParams,
    pub student: NetworkParams,
    pub spectrum: Spectrum,
}

impl Setup {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let features = match cfg.features {
            FeatureKind::Gaussian if cfg.normalize_features => make_gaussian_features_normalized(cfg.n, cfg.d, cfg.seed)?,
            FeatureKind::Gaussian => make_gaussian_features(cfg.n, cfg.d, cfg.seed)?,
            FeatureKind::Hadamard => {
                if cfg.n != cfg.d {
                    return Err(HmlError::InvalidArgument(format!(
                        "hadamard features need n = d (got n={}, d={})",
                        cfg.n, cfg.d
                    )));
                }
                make_hadamard_features(cfg.n)?
            }
        };
        let folding = Folding::from_name(&cfg.folding)?;
        let coefficients = folding_coefficients(&folding)?;
        let teacher = NetworkParams::random_teacher(
            cfg.m,
            cfg.d,
            cfg.teacher_activation,
            cfg.teacher_second,
            cfg.teacher_orthonormal,
            cfg.seed,
        )?;
        let student = NetworkParams::random_student(cfg.k, cfg.n, cfg.init_std, cfg.student_activation, cfg.seed);
        let spectrum = omega_spectrum(&features)?;
        Ok(Self { features, folding, coefficients, teacher, student, spectrum })
    }

    pub fn measure(&self, student: &NetworkParams) -> Result<OrderParameterSet> {
        measure_order_params(student, &self.teacher, &self.features, &self.spectrum, &self.coefficients)
    }
}

/// Analytic ε_g at measured order parameters, when a closed form exists.
pub fn theory_error(op: &OrderParameterSet, student: &NetworkParams, teacher: &NetworkParams) -> Option<f64> {
    generalisation_error(&op.q, &op.r, &op.t, &op.v, &op.v_tilde, student.activation, teacher.activation, None).ok()
}

/// Train the configured student from scratch.
pub fn train_online(cfg: &ExperimentConfig) -> Result<Trajectory> {
    let setup = Setup::from_config(cfg)?;
    let test = TestSet::sample(&setup.features, &setup.folding, &setup.teacher, cfg.p_test, cfg.seed)?;
    train(&setup, setup.student.clone(), &test, cfg)
}

/// Train `student` on fresh samples from `setup`, recording ε_g on `test`
/// and order parameters at the configured snapshot times.
pub fn train(setup: &Setup, student: NetworkParams, test: &TestSet, cfg: &ExperimentConfig) -> Result<Trajectory> {
    train_with(setup, student, test, cfg, |_, _| {})
}

/// As [`train`], calling `observe(t, &student)` at every snapshot.
pub fn train_with(
    setup: &Setup,
    mut student: NetworkParams,
    test: &TestSet,
    cfg: &ExperimentConfig,
    mut observe: impl FnMut(f64, &NetworkParams),
) -> Result<Trajectory> {
    let n = setup.features.n();
    let d = setup.features.d();
    if student.input_dim() != n {
        return Err(HmlError::Dimension("student does not match the features".into()));
    }
    let batch = cfg.batch.max(1);
    let times = cfg.snapshots.times(cfg.t_max, n);
    let marks: Vec<u64> = times.iter().map(|t| (t * n as f64).round() as u64).collect();
    let total = *marks.last().unwrap_or(&0);
    let mut traj = Trajectory::default();
    let mut ws = SgdWorkspace::default();
    let mut next = 0usize;
    let mut mu: u64 = 0;
    let mut record = |mu: u64, student: &NetworkParams, traj: &mut Trajectory| -> Result<bool> {
        let t = mu as f64 / n as f64;
        let eps = test.error(student)?;
        let op = setup.measure(student)?;
        let theory = theory_error(&op, student, &setup.teacher);
        observe(t, student);
        traj.push(t, eps, theory, op);
        if !eps.is_finite() || eps > cfg.divergence_ceiling {
            traj.diverged_at = Some(t);
            return Ok(false);
        }
        Ok(true)
    };
    while mu < total || next < marks.len() {
        if next < marks.len() && mu >= marks[next] {
            while next < marks.len() && marks[next] <= mu {
                next += 1;
            }
            if !record(mu, &student, &mut traj)? {
                break;
            }
            continue;
        }
        let until = marks[next];
        let b = (CHUNK as u64).min(until - mu) as usize;
        let lat = datagen::latent_columns(d, b, cfg.seed, Purpose::TrainLatents, mu);
        let mut x = setup.features.project_columns(&lat);
        x.apply(|v| *v = setup.folding.apply(*v));
        let labels = datagen::labels_for_columns(&lat, &setup.teacher);
        if batch == 1 {
            for j in 0..b {
                step_with(&mut student, x.column(j).as_slice(), labels[j], cfg.eta, &mut ws);
            }
        } else {
            let mut j = 0;
            while j < b {
                let end = (j + batch).min(b);
                batch_step(&mut student, &x, j..end, &labels, cfg.eta, &mut ws);
                j = end;
            }
        }
        mu += b as u64;
    }
    traj.samples_used = mu;
    Ok(traj)
}

/// Largest relative deviation between one SGD step and the central
/// finite-difference gradient of ½Δ² scaled by −η (first layer) or −η/N
/// (second layer), over all weights.
pub fn finite_difference_error(net: &NetworkParams, x: &[f64], label: f64, eta: f64) -> Result<f64> {
    let loss = |n: &NetworkParams| -> Result<f64> {
        let d = n.forward(x)? - label;
        Ok(0.5 * d * d)
    };
    let mut stepped = net.clone();
    sgd_step(&mut stepped, x, label, eta)?;
    let h = 1e-5;
    let nf = x.len() as f64;
    let rel = |got: f64, expect: f64| (got - expect).abs() / expect.abs().max(1e-8);
    let mut worst = 0.0f64;
    for a in 0..net.hidden() {
        for i in 0..x.len() {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.w[(a, i)] += h;
            m.w[(a, i)] -= h;
            let g = (loss(&p)? - loss(&m)?) / (2.0 * h);
            worst = worst.max(rel(stepped.w[(a, i)] - net.w[(a, i)], -eta * g));
        }
        let (mut p, mut m) = (net.clone(), net.clone());
        p.v[a] += h;
        m.v[a] -= h;
        let g = (loss(&p)? - loss(&m)?) / (2.0 * h);
        worst = worst.max(rel(stepped.v[a] - net.v[a], -eta / nf * g));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Activation, Role};
    use crate::rng;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn net(w: &[f64], k: usize, v: &[f64], act: Activation) -> NetworkParams {
        let n = w.len() / k;
        NetworkParams::new(DMatrix::from_row_slice(k, n, w), DVector::from_column_slice(v), act, Role::Student).unwrap()
    }

    #[test]
    fn forward_examples() {
        let z = net(&[0.0; 6], 2, &[0.0, 0.0], Activation::Erf);
        assert_eq!(forward(&z, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        for act in [Activation::Erf, Activation::Relu] {
            let one = net(&[1.0, -1.0], 1, &[1.0], act);
            assert_eq!(forward(&one, &[2.0, 2.0]).unwrap(), 0.0);
            let pair = net(&[0.3, -0.2, 0.3, -0.2], 2, &[1.0, -1.0], act);
            assert_eq!(forward(&pair, &[1.7, 0.4]).unwrap(), 0.0);
        }
        assert!(forward(&z, &[1.0]).is_err());
    }

    #[test]
    fn single_step_oracle() {
        let mut n1 = net(&[0.0], 1, &[1.0], Activation::Erf);
        let delta = sgd_step(&mut n1, &[1.0], 1.0, 1.0).unwrap();
        assert_eq!(delta, -1.0);
        assert!((n1.w[(0, 0)] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(n1.v[0], 1.0);
    }

    #[test]
    fn no_change_cases() {
        let mut a = net(&[0.4, -0.1, 0.2, 0.9], 2, &[0.5, -0.3], Activation::Erf);
        let before = a.clone();
        sgd_step(&mut a, &[0.3, 1.2], 0.7, 0.0).unwrap();
        assert_eq!(a.w, before.w);
        assert_eq!(a.v, before.v);
        let y = forward(&a, &[0.3, 1.2]).unwrap();
        sgd_step(&mut a, &[0.3, 1.2], y, 0.5).unwrap();
        assert_eq!(a.w, before.w);
        assert_eq!(a.v, before.v);
    }

    fn gradient_check(k: usize, n: usize, seed: u64, act: Activation) {
        let w = rng::normal_row(seed, Purpose::Covariances, 0, k * n);
        let v = rng::normal_row(seed, Purpose::Covariances, 1, k);
        let x = rng::normal_row(seed, Purpose::Covariances, 2, n);
        let err = finite_difference_error(&net(&w, k, &v, act), &x, 0.37, 0.3).unwrap();
        assert!(err <= 1e-6, "relative error {err} at k={k} n={n} seed={seed}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let k = 1 + (seed as usize % 3);
            let n = 2 + (seed as usize % 7);
            gradient_check(k, n, seed, Activation::Erf);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn erf_output_is_odd_in_all_weights(seed in 0u64..1000, k in 1usize..4, n in 1usize..9) {
            let w = rng::normal_row(seed, Purpose::Covariances, 0, k * n);
            let v = rng::normal_row(seed, Purpose::Covariances, 1, k);
            let x = rng::normal_row(seed, Purpose::Covariances, 2, n);
            let a = net(&w, k, &v, Activation::Erf);
            let neg: Vec<f64> = w.iter().map(|x| -x).collect();
            let negv: Vec<f64> = v.iter().map(|x| -x).collect();
            let b = net(&neg, k, &negv, Activation::Erf);
            prop_assert_eq!(forward(&a, &x).unwrap(), forward(&b, &x).unwrap());
        }

        #[test]
        fn gradient_check_random(seed in 0u64..10_000, k in 1usize..4, n in 1usize..9) {
            gradient_check(k, n, seed, Activation::Erf);
        }
    }

    #[test]
    fn test_error_examples() {
        let a = net(&[0.4, -0.1, 0.2, 0.9], 2, &[0.5, -0.3], Activation::Erf);
        let xs = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, 0.3]);
        let labels: Vec<f64> = (0..3).map(|i| forward(&a, xs.row(i).transpose().as_slice()).unwrap()).collect();
        let batch = InputBatch { entries: xs.clone(), folding: "identity".into() };
        assert!(empirical_test_error(&a, &batch, &labels).unwrap().abs() < 1e-15);
        let zero = net(&[0.0; 4], 2, &[0.0, 0.0], Activation::Erf);
        let ys = [1.0, -2.0, 0.5];
        let e = empirical_test_error(&zero, &batch, &ys).unwrap();
        assert!((e - (1.0 + 4.0 + 0.25) / 6.0).abs() < 1e-15);
        let empty = InputBatch { entries: DMatrix::zeros(0, 2), folding: "identity".into() };
        assert!(empirical_test_error(&a, &empty, &[]).is_err());
    }

    #[test]
    fn monte_carlo_error_matches_closed_form() {
        // Gaussian inputs with identity features: the local fields are exactly
        // jointly Gaussian with the measured Q, R, T.
        let (n, k, m) = (50, 2, 2);
        let student = NetworkParams::random_student(k, n, 1.0, Activation::Erf, 4);
        let teacher = NetworkParams {
            w: DMatrix::from_fn(m, n, |a, i| rng::normal_row(9, Purpose::TeacherFirst, a as u64, n)[i]),
            v: DVector::from_vec(vec![1.0, -0.7]),
            activation: Activation::Erf,
            role: Role::Teacher,
        };
        let p = 100_000;
        let mut xs = DMatrix::zeros(p, n);
        for mu in 0..p {
            let row = rng::normal_row(1, Purpose::GaussianInputs, mu as u64, n);
            for i in 0..n {
                xs[(mu, i)] = row[i];
            }
        }
        let labels: Vec<f64> = (0..p).map(|mu| teacher.forward_unchecked(xs.row(mu).transpose().as_slice())).collect();
        let batch = InputBatch { entries: xs.clone(), folding: "identity".into() };
        let e = empirical_test_error(&student, &batch, &labels).unwrap();
        let nf = n as f64;
        let q = &student.w * student.w.transpose() / nf;
        let r = &student.w * teacher.w.transpose() / nf;
        let t = &teacher.w * teacher.w.transpose() / nf;
        let theory =
            generalisation_error(&q, &r, &t, &student.v, &teacher.v, Activation::Erf, Activation::Erf, None).unwrap();
        let per: Vec<f64> = (0..p)
            .map(|mu| {
                let d = student.forward_unchecked(xs.row(mu).transpose().as_slice()) - labels[mu];
                0.5 * d * d
            })
            .collect();
        let mean = per.iter().sum::<f64>() / p as f64;
        let var = per.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (p as f64 - 1.0);
        let se = (var / p as f64).sqrt();
        assert!((mean - e).abs() < 1e-12);
        assert!((e - theory).abs() < 5.0 * se, "{e} ± {se} vs {theory}");
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.n = 200;
        cfg.d = 20;
        cfg.k = 2;
        cfg.m = 2;
        cfg.t_max = 2.0;
        cfg.p_test = 500;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_error_constant() {
        let mut cfg = tiny_config();
        cfg.eta = 0.0;
        let tr = train_online(&cfg).unwrap();
        assert!(tr.len() > 3);
        assert!(tr.eps.iter().all(|&e| e == tr.eps[0]));
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(*tr.times.last().unwrap(), 2.0);
        assert_eq!(tr.samples_used, 400);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut cfg = tiny_config();
        cfg.t_max = 5.0;
        cfg.eta = 0.5;
        let a = train_online(&cfg).unwrap();
        let b = train_online(&cfg).unwrap();
        assert_eq!(a.eps, b.eps);
        assert!(a.final_eps().unwrap() < a.eps[0]);
        assert!(a.diverged_at.is_none());
        let tr = train_online(&ExperimentConfig { batch: 4, ..cfg.clone() }).unwrap();
        assert!(tr.final_eps().unwrap() < tr.eps[0]);
    }

    #[test]
    fn divergence_guard_stops_run() {
        let mut cfg = tiny_config();
        cfg.student_activation = Activation::Relu;
        cfg.eta = 20.0;
        cfg.t_max = 20.0;
        let tr = train_online(&cfg).unwrap();
        assert!(tr.diverged_at.is_some());
        assert!(tr.samples_used < 4000);
    }
}
