//! Feature matrices, latent draws, folded inputs and teacher labels.

use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HmlError, Result};
use crate::quadrature::gauss_hermite_normal;
use crate::rng::{self, Purpose};

/// How the columns of the manifold are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Gaussian,
    Hadamard,
}

/// The D×N matrix F spanning the manifold.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    /// D×N entries.
    pub entries: DMatrix<f64>,
    /// N×D copy used for batched projections.
    transposed: DMatrix<f64>,
    pub kind: FeatureKind,
    pub seed: Option<u64>,
    pub normalized: bool,
}

impl FeatureMatrix {
    fn new(entries: DMatrix<f64>, kind: FeatureKind, seed: Option<u64>, normalized: bool) -> Self {
        let transposed = entries.transpose();
        Self { entries, transposed, kind, seed, normalized }
    }

    pub fn d(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    pub fn delta(&self) -> f64 {
        self.d() as f64 / self.n() as f64
    }

    /// Pre-activations u = Fᵀc/√D for each column c of `latents` (D×B), as an N×B matrix.
    pub fn project_columns(&self, latents: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d();
        assert_eq!(latents.nrows(), d);
        let scale = 1.0 / (d as f64).sqrt();
        match self.kind {
            FeatureKind::Hadamard => {
                let mut out = latents.clone();
                for mut col in out.column_iter_mut() {
                    fwht(col.as_mut_slice());
                    col.scale_mut(scale);
                }
                out
            }
            FeatureKind::Gaussian => {
                let mut out = &self.transposed * latents;
                out.scale_mut(scale);
                out
            }
        }
    }

    /// Largest |Σ_r F_ri² − D| over ambient coordinates i.
    pub fn norm_deviation(&self) -> f64 {
        let d = self.d() as f64;
        self.entries
            .column_iter()
            .map(|c| (c.norm_squared() - d).abs())
            .fold(0.0, f64::max)
    }
}

/// In-place unnormalised Walsh–Hadamard transform (Sylvester ordering).
pub fn fwht(x: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let a = x[j];
                let b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// D×N matrix of i.i.d. standard normal entries. Column i comes from stream i.
pub fn make_gaussian_features(n: usize, d: usize, seed: u64) -> Result<FeatureMatrix> {
    if n == 0 || d == 0 {
        return Err(HmlError::Dimension(format!("feature matrix needs n, d >= 1 (got n={n}, d={d})")));
    }
    let mut entries = DMatrix::zeros(d, n);
    for (i, mut col) in entries.column_iter_mut().enumerate() {
        let mut r = rng::stream(seed, Purpose::Features, i as u64);
        rng::fill_normal(&mut r, col.as_mut_slice());
    }
    Ok(FeatureMatrix::new(entries, FeatureKind::Gaussian, Some(seed), false))
}

/// Gaussian features with every ambient column rescaled so that Σ_r F_ri² = D exactly.
pub fn make_gaussian_features_normalized(n: usize, d: usize, seed: u64) -> Result<FeatureMatrix> {
    let mut f = make_gaussian_features(n, d, seed)?;
    let target = (d as f64).sqrt();
    for mut col in f.entries.column_iter_mut() {
        let norm = col.norm();
        col.scale_mut(target / norm);
    }
    Ok(FeatureMatrix::new(f.entries, FeatureKind::Gaussian, Some(seed), true))
}

/// Sylvester Hadamard matrix of order n (D = N = n).
pub fn make_hadamard_features(n: usize) -> Result<FeatureMatrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(HmlError::InvalidArgument(format!(
            "Hadamard features need a power-of-two order (got {n}); the Sylvester construction only exists for 2^k"
        )));
    }
    let entries = DMatrix::from_fn(n, n, |i, j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 });
    Ok(FeatureMatrix::new(entries, FeatureKind::Hadamard, None, true))
}

/// The pointwise folding f.
#[derive(Clone)]
pub enum Folding {
    /// sign(x) with sign(0) = +1.
    Sign,
    Custom { name: String, f: Arc<dyn Fn(f64) -> f64 + Send + Sync> },
}

impl fmt::Debug for Folding {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(fm, "Folding({})", self.name())
    }
}

impl Folding {
    pub fn custom(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Folding::Custom { name: name.to_string(), f: Arc::new(f) }
    }

    /// Built-in foldings by name: sign, tanh, identity, erf.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sign" => Ok(Folding::Sign),
            "tanh" => Ok(Folding::custom("tanh", f64::tanh)),
            "identity" => Ok(Folding::custom("identity", |x| x)),
            "erf" => Ok(Folding::custom("erf", |x| libm::erf(x / SQRT_2))),
            _ => Err(HmlError::Config(format!("unknown folding '{name}' (expected sign, tanh, identity or erf)"))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Folding::Sign => "sign",
            Folding::Custom { name, .. } => name,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Folding::Sign => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Folding::Custom { f, .. } => f(x),
        }
    }
}

/// a = ⟨f(u)⟩, b = ⟨u f(u)⟩, c = ⟨f(u)²⟩ for standard normal u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldingCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl FoldingCoefficients {
    pub fn sign() -> Self {
        Self { a: 0.0, b: (2.0 / PI).sqrt(), c: 1.0 }
    }
}

/// Folding coefficients by Gauss–Hermite quadrature, doubling the node count
/// until every coefficient changes by less than 1e-10.
pub fn folding_coefficients(folding: &Folding) -> Result<FoldingCoefficients> {
    if let Folding::Sign = folding {
        return Ok(FoldingCoefficients::sign());
    }
    let eval = |n: usize| {
        let rule = gauss_hermite_normal(n);
        FoldingCoefficients {
            a: rule.integrate(|u| folding.apply(u)),
            b: rule.integrate(|u| u * folding.apply(u)),
            c: rule.integrate(|u| folding.apply(u).powi(2)),
        }
    };
    let mut n = 32;
    let mut prev = eval(n);
    while n < 512 {
        n *= 2;
        let next = eval(n);
        let change = (next.a - prev.a).abs().max((next.b - prev.b).abs()).max((next.c - prev.c).abs());
        if !next.a.is_finite() || !next.b.is_finite() || !next.c.is_finite() {
            break;
        }
        if change < 1e-10 {
            return Ok(next);
        }
        prev = next;
    }
    Err(HmlError::Quadrature(format!(
        "folding coefficients for '{}' still changing at {n} Gauss-Hermite nodes",
        folding.name()
    )))
}

/// Hidden-unit activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// erf(x/√2)
    Erf,
    Relu,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "erf" => Ok(Activation::Erf),
            "relu" => Ok(Activation::Relu),
            _ => Err(HmlError::Config(format!("unknown activation '{name}' (expected erf or relu)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Erf => "erf",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    pub fn g(self, x: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(x / SQRT_2),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn g_prime(self, x: f64) -> f64 {
        match self {
            // √(2/π) e^{−x²/2}
            Activation::Erf => FRAC_2_SQRT_PI / SQRT_2 * (-0.5 * x * x).exp(),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

/// Two-layer network φ(x) = Σ_k v_k g(w_k·x/√Din).
#[derive(Debug, Clone)]
pub struct NetworkParams {
    /// H×Din first-layer weights.
    pub w: DMatrix<f64>,
    /// Length-H second-layer weights.
    pub v: DVector<f64>,
    pub activation: Activation,
    pub role: Role,
}

/// Second-layer initialisation of a teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SecondLayer {
    Normal,
    Constant(f64),
}

impl NetworkParams {
    pub fn new(w: DMatrix<f64>, v: DVector<f64>, activation: Activation, role: Role) -> Result<Self> {
        if w.nrows() != v.len() {
            return Err(HmlError::Dimension(format!(
                "{} hidden rows but {} second-layer weights",
                w.nrows(),
                v.len()
            )));
        }
        Ok(Self { w, v, activation, role })
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Student with both layers i.i.d. N(0, std²).
    pub fn random_student(k: usize, n: usize, std: f64, activation: Activation, seed: u64) -> Self {
        let w = random_rows(k, n, seed, Purpose::StudentFirst) * std;
        let v = DVector::from_vec(rng::normal_row(seed, Purpose::StudentSecond, 0, k)) * std;
        Self { w, v, activation, role: Role::Student }
    }

    /// Teacher with i.i.d. standard normal first layer, optionally made
    /// row-orthonormal and rescaled to norm √D so that T = 1 exactly.
    pub fn random_teacher(
        m: usize,
        d: usize,
        activation: Activation,
        second: SecondLayer,
        orthonormal: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut w = random_rows(m, d, seed, Purpose::TeacherFirst);
        if orthonormal {
            if m > d {
                return Err(HmlError::Dimension(format!("cannot orthonormalise {m} teacher rows in dimension {d}")));
            }
            let q = w.transpose().qr().q();
            let scale = (d as f64).sqrt();
            w = q.transpose() * scale;
        }
        let v = match second {
            SecondLayer::Normal => DVector::from_vec(rng::normal_row(seed, Purpose::TeacherSecond, 0, m)),
            SecondLayer::Constant(c) => DVector::from_element(m, c),
        };
        Ok(Self { w, v, activation, role: Role::Teacher })
    }

    /// φ(x) for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(HmlError::Dimension(format!("input has length {}, network expects {}", x.len(), self.input_dim())));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let scale = 1.0 / (self.input_dim() as f64).sqrt();
        let mut out = 0.0;
        for k in 0..self.hidden() {
            let lambda = row_dot(&self.w, k, x) * scale;
            out += self.v[k] * self.activation.g(lambda);
        }
        out
    }
}

/// Dot product of row `k` of a column-major matrix with `x`.
#[inline]
pub(crate) fn row_dot(m: &DMatrix<f64>, k: usize, x: &[f64]) -> f64 {
    let rows = m.nrows();
    let data = m.as_slice();
    let mut s = 0.0;
    for (i, xi) in x.iter().enumerate() {
        s += data[i * rows + k] * xi;
    }
    s
}

fn random_rows(h: usize, din: usize, seed: u64, purpose: Purpose) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(h, din);
    for k in 0..h {
        let row = rng::normal_row(seed, purpose, k as u64, din);
        for (i, x) in row.into_iter().enumerate() {
            w[(k, i)] = x;
        }
    }
    w
}

/// P×D latent coordinates; row μ is drawn from stream `offset + μ`.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub entries: DMatrix<f64>,
    pub seed: u64,
    pub purpose: Purpose,
    pub offset: u64,
}

impl LatentBatch {
    pub fn sample(p: usize, d: usize, seed: u64, purpose: Purpose, offset: u64) -> Self {
        let cols = latent_columns(d, p, seed, purpose, offset);
        Self { entries: cols.transpose(), seed, purpose, offset }
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }
}

/// D×P latents as columns (the layout used by the training loop).
pub fn latent_columns(d: usize, p: usize, seed: u64, purpose: Purpose, offset: u64) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(d, p);
    for (mu, mut col) in c.column_iter_mut().enumerate() {
        let mut r = rng::stream(seed, purpose, offset + mu as u64);
        rng::fill_normal(&mut r, col.as_mut_slice());
    }
    c
}

/// P×N folded inputs.
#[derive(Debug, Clone)]
pub struct InputBatch {
    pub entries: DMatrix<f64>,
    pub folding: String,
}

/// X = f(C F / √D) entrywise.
pub fn fold_inputs(latents: &LatentBatch, features: &FeatureMatrix, folding: &Folding) -> Result<InputBatch> {
    if latents.entries.ncols() != features.d() {
        return Err(HmlError::Dimension(format!(
            "latent dimension {} does not match feature dimension {}",
            latents.entries.ncols(),
            features.d()
        )));
    }
    let mut u = features.project_columns(&latents.entries.transpose());
    u.apply(|x| *x = folding.apply(*x));
    Ok(InputBatch { entries: u.transpose(), folding: folding.name().to_string() })
}

/// y*_μ = Σ_m ṽ_m g̃(w̃_m·c_μ/√D).
pub fn teacher_labels(latents: &LatentBatch, teacher: &NetworkParams) -> Result<Vec<f64>> {
    if teacher.role != Role::Teacher {
        return Err(HmlError::InvalidArgument("teacher_labels needs a network with the teacher role".into()));
    }
    if latents.entries.ncols() != teacher.input_dim() {
        return Err(HmlError::Dimension(format!(
            "latent dimension {} does not match teacher input dimension {}",
            latents.entries.ncols(),
            teacher.input_dim()
        )));
    }
    Ok(labels_for_columns(&latents.entries.transpose(), teacher))
}

/// Labels for latents stored as columns (D×P).
pub fn labels_for_columns(latents: &DMatrix<f64>, teacher: &NetworkParams) -> Vec<f64> {
    let scale = 1.0 / (teacher.input_dim() as f64).sqrt();
    let nu = &teacher.w * latents;
    (0..latents.ncols())
        .map(|mu| (0..teacher.hidden()).map(|m| teacher.v[m] * teacher.activation.g(nu[(m, mu)] * scale)).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_features_are_deterministic() {
        let a = make_gaussian_features(4, 2, 11).unwrap();
        let b = make_gaussian_features(4, 2, 11).unwrap();
        assert_eq!(a.entries, b.entries);
        assert!(make_gaussian_features(0, 2, 1).is_err());
    }

    #[test]
    fn ambient_norms_concentrate() {
        let (n, d) = (10000, 100);
        let f = make_gaussian_features(n, d, 3).unwrap();
        let df = d as f64;
        let band = 3.0 * (2.0 * df).sqrt();
        // Independent oracle: recompute the squared norms elementwise.
        let inside = (0..n)
            .filter(|&i| {
                let s: f64 = (0..d).map(|r| f.entries[(r, i)] * f.entries[(r, i)]).sum();
                (s - df).abs() <= band
            })
            .count();
        assert!(inside as f64 >= 0.99 * n as f64, "{inside} of {n}");
    }

    #[test]
    fn scalar_feature_has_unit_variance() {
        let m = 100_000;
        let xs: Vec<f64> = (0..m).map(|s| make_gaussian_features(1, 1, s as u64).unwrap().entries[(0, 0)]).collect();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn normalized_features_have_exact_norms() {
        let f = make_gaussian_features_normalized(50, 10, 1).unwrap();
        assert!(f.norm_deviation() < 1e-12);
    }

    #[test]
    fn hadamard_small_cases() {
        let h2 = make_hadamard_features(2).unwrap();
        assert_eq!(h2.entries, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]));
        for n in [2, 4, 64] {
            let h = make_hadamard_features(n).unwrap();
            let g = &h.entries * h.entries.transpose();
            assert_eq!(g, DMatrix::identity(n, n) * n as f64);
        }
        let err = make_hadamard_features(1023).unwrap_err();
        assert!(err.to_string().contains("power-of-two"));
    }

    #[test]
    fn hadamard_projection_matches_dense_product() {
        let h = make_hadamard_features(16).unwrap();
        let c = latent_columns(16, 3, 5, Purpose::TrainLatents, 0);
        let fast = h.project_columns(&c);
        let dense = h.entries.transpose() * &c / 4.0;
        assert!((fast - dense).amax() < 1e-12);
    }

    #[test]
    fn zero_latents_fold_to_ones() {
        let f = make_gaussian_features(7, 3, 2).unwrap();
        let lat = LatentBatch { entries: DMatrix::zeros(4, 3), seed: 0, purpose: Purpose::TrainLatents, offset: 0 };
        let x = fold_inputs(&lat, &f, &Folding::Sign).unwrap();
        assert!(x.entries.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_folding_is_linear_projection() {
        let f = make_gaussian_features(9, 4, 2).unwrap();
        let lat = LatentBatch::sample(1, 4, 8, Purpose::TrainLatents, 0);
        let x = fold_inputs(&lat, &f, &Folding::from_name("identity").unwrap()).unwrap();
        for i in 0..9 {
            let expect: f64 = (0..4).map(|r| lat.entries[(0, r)] * f.entries[(r, i)]).sum::<f64>() / 2.0;
            assert_abs_diff_eq!(x.entries[(0, i)], expect, epsilon = 1e-12);
        }
        let bad = LatentBatch::sample(1, 5, 8, Purpose::TrainLatents, 0);
        assert!(fold_inputs(&bad, &f, &Folding::Sign).is_err());
    }

    #[test]
    fn sign_folded_columns_are_centred() {
        let (n, p) = (1000, 10_000);
        let f = make_gaussian_features(n, 20, 4).unwrap();
        let lat = LatentBatch::sample(p, 20, 9, Purpose::TrainLatents, 0);
        let x = fold_inputs(&lat, &f, &Folding::Sign).unwrap();
        assert!(x.entries.iter().all(|&v| v == 1.0 || v == -1.0));
        // Each column mean has standard error 1/√P; allow 4 SE. With 1000
        // columns a few exceedances are expected, so bound the count.
        let se = 1.0 / (p as f64).sqrt();
        let bad = (0..n).filter(|&i| (x.entries.column(i).sum() / p as f64).abs() > 4.0 * se).count();
        assert!(bad <= 3, "{bad} columns beyond 4 SE");
    }

    #[test]
    fn teacher_label_examples() {
        let d = 9;
        let lat0 = LatentBatch { entries: DMatrix::zeros(1, d), seed: 0, purpose: Purpose::TrainLatents, offset: 0 };
        for act in [Activation::Erf, Activation::Relu] {
            let t = NetworkParams::random_teacher(3, d, act, SecondLayer::Normal, false, 1).unwrap();
            assert_eq!(teacher_labels(&lat0, &t).unwrap(), vec![0.0]);
        }
        let mut w = DMatrix::zeros(1, d);
        w[(0, 0)] = 3.0;
        let t = NetworkParams::new(w, DVector::from_element(1, 1.0), Activation::Erf, Role::Teacher).unwrap();
        let mut c = DMatrix::zeros(1, d);
        c[(0, 0)] = 1.0;
        let lat = LatentBatch { entries: c, seed: 0, purpose: Purpose::TrainLatents, offset: 0 };
        assert_abs_diff_eq!(teacher_labels(&lat, &t).unwrap()[0], 0.682689492137086, epsilon = 1e-12);
        let s = NetworkParams::random_student(1, d, 1.0, Activation::Erf, 0);
        assert!(teacher_labels(&lat, &s).is_err());
    }

    #[test]
    fn orthonormal_teacher_has_unit_overlap() {
        let t = NetworkParams::random_teacher(3, 40, Activation::Erf, SecondLayer::Constant(1.0), true, 2).unwrap();
        let tt = &t.w * t.w.transpose() / 40.0;
        assert!((tt - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn sign_coefficients() {
        let c = folding_coefficients(&Folding::Sign).unwrap();
        assert_eq!(c.a, 0.0);
        assert_eq!(c.c, 1.0);
        // Independent oracle: E|u| by Gauss–Hermite on the smooth half-line
        // integrand u e^{-u²/2} via substitution, i.e. 2∫_0^∞ u φ(u) du.
        let rule = crate::quadrature::gauss_legendre(200);
        let upper = 40.0;
        let e_abs: f64 = 2.0
            * rule.integrate(|x| {
                let u = 0.5 * upper * (x + 1.0);
                u * (-0.5 * u * u).exp() / (2.0 * PI).sqrt() * 0.5 * upper
            });
        assert_abs_diff_eq!(c.b, e_abs, epsilon = 1e-10);
        assert_abs_diff_eq!(c.b, 0.797884560802865, epsilon = 1e-12);
    }

    #[test]
    fn smooth_folding_coefficients() {
        let id = folding_coefficients(&Folding::from_name("identity").unwrap()).unwrap();
        assert_abs_diff_eq!(id.a, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.b, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.c, 1.0, epsilon = 1e-12);
        // erf(u/√2): b = E[g'(u)] = 1/√2·√(2/π)... = √(1/π); c = (2/π) arcsin(1/2)
        let e = folding_coefficients(&Folding::from_name("erf").unwrap()).unwrap();
        assert_abs_diff_eq!(e.b, (1.0 / PI).sqrt(), epsilon = 1e-10);
        assert_abs_diff_eq!(e.c, 1.0 / 3.0, epsilon = 1e-10);
        let shifted = folding_coefficients(&Folding::custom("shifted", |u: f64| (u + 0.5).tanh())).unwrap();
        assert!(shifted.a > 0.0);
    }
}
