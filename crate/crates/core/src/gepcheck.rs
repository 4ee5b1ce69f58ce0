//! Statistical checks of Gaussian equivalence on concrete instances.
//!
//! Local fields λ = W f(Fᵀc/√D)/√N and ν = W̃c/√D are sampled from fresh
//! latents and compared with the covariance predicted by the order
//! parameters. Standard errors come from a delete-one-group jackknife over
//! [`JACKKNIFE_GROUPS`] contiguous blocks of samples, and an entry fails when
//! its |z| exceeds [`Z_THRESHOLD`].

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{folding_coefficients, latent_columns, FeatureMatrix, Folding, NetworkParams, Role};
use crate::error::{HmlError, Result};
use crate::gint::pivoted_cholesky;
use crate::orderparams::OrderParameterSet;
use crate::rng::{self, Purpose};

pub const Z_THRESHOLD: f64 = 5.0;
pub const JACKKNIFE_GROUPS: usize = 100;
pub const MIN_COVARIANCE_SAMPLES: usize = 1_000;
pub const MIN_GAUSSIANITY_SAMPLES: usize = 10_000;

const FIELD_CHUNK: usize = 512;
const LEMMA_CHUNK: usize = 1 << 16;

/// Joint draws of the local fields, one row per sample: λ¹..λᴷ then ν¹..νᴹ.
#[derive(Debug, Clone)]
pub struct LocalFields {
    pub values: DMatrix<f64>,
    pub k: usize,
    pub m: usize,
}

impl LocalFields {
    /// Wrap a samples×(K+M) matrix.
    pub fn new(values: DMatrix<f64>, k: usize, m: usize) -> Result<Self> {
        if values.ncols() != k + m {
            return Err(HmlError::Dimension(format!("expected {} columns, got {}", k + m, values.ncols())));
        }
        Ok(Self { values, k, m })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    fn label(&self, a: usize) -> String {
        if a < self.k {
            format!("l{}", a + 1)
        } else {
            format!("n{}", a - self.k + 1)
        }
    }

    /// Negative control: every student field replaced by its cube.
    pub fn cubed_students(&self) -> Self {
        let mut out = self.clone();
        for a in 0..self.k {
            out.values.column_mut(a).apply(|x| *x = *x * *x * *x);
        }
        out
    }
}

/// Draw `n_samples` joint local fields from fresh latents.
///
/// Sample μ uses latent stream μ of the `GepLatents` purpose, so the draws do
/// not depend on chunking or thread count.
pub fn sample_local_fields(
    student: &NetworkParams,
    teacher: &NetworkParams,
    features: &FeatureMatrix,
    folding: &Folding,
    n_samples: usize,
    seed: u64,
) -> Result<LocalFields> {
    if student.role != Role::Student || teacher.role != Role::Teacher {
        return Err(HmlError::InvalidArgument("expected a student and a teacher".into()));
    }
    if student.input_dim() != features.n() || teacher.input_dim() != features.d() {
        return Err(HmlError::Dimension(format!(
            "student input {} / teacher input {} do not match features N={} D={}",
            student.input_dim(),
            teacher.input_dim(),
            features.n(),
            features.d()
        )));
    }
    let (k, m) = (student.hidden(), teacher.hidden());
    let (n, d) = (features.n() as f64, features.d() as f64);
    let chunks = n_samples.div_ceil(FIELD_CHUNK);
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let count = FIELD_CHUNK.min(n_samples - ch * FIELD_CHUNK);
            let c = latent_columns(features.d(), count, seed, Purpose::GepLatents, (ch * FIELD_CHUNK) as u64);
            let mut x = features.project_columns(&c);
            x.apply(|u| *u = folding.apply(*u));
            let lambda = (&student.w * x) / n.sqrt();
            let nu = (&teacher.w * c) / d.sqrt();
            (lambda, nu)
        })
        .collect();
    let mut values = DMatrix::zeros(n_samples, k + m);
    let mut row = 0;
    for (lambda, nu) in parts {
        for s in 0..lambda.ncols() {
            for a in 0..k {
                values[(row, a)] = lambda[(a, s)];
            }
            for b in 0..m {
                values[(row, k + b)] = nu[(b, s)];
            }
            row += 1;
        }
    }
    LocalFields::new(values, k, m)
}

/// Draws from N(0, cov), for calibration runs.
pub fn sample_gaussian_fields(cov: &DMatrix<f64>, k: usize, n_samples: usize, seed: u64) -> Result<LocalFields> {
    let p = cov.nrows();
    if k > p {
        return Err(HmlError::Dimension(format!("k={k} exceeds covariance size {p}")));
    }
    let l = pivoted_cholesky(cov)?;
    let mut values = DMatrix::zeros(n_samples, p);
    for s in 0..n_samples {
        let z = DMatrix::from_vec(p, 1, rng::normal_row(seed, Purpose::GaussianInputs, s as u64, p));
        let x = &l * z;
        for a in 0..p {
            values[(s, a)] = x[a];
        }
    }
    LocalFields::new(values, k, p - k)
}

/// Group sums of all raw moments up to fourth order, keyed by sorted index tuples.
struct MomentSums {
    p: usize,
    groups: usize,
    group_sizes: Vec<usize>,
    /// tuples[i] lists indices of moment i; sums[g][i] its group sum.
    tuples: Vec<Vec<usize>>,
    sums: Vec<Vec<f64>>,
}

impl MomentSums {
    fn new(fields: &LocalFields, max_order: usize) -> Self {
        let p = fields.values.ncols();
        let mut tuples = Vec::new();
        fn rec(p: usize, start: usize, cur: &mut Vec<usize>, left: usize, out: &mut Vec<Vec<usize>>) {
            if !cur.is_empty() {
                out.push(cur.clone());
            }
            if left == 0 {
                return;
            }
            for a in start..p {
                cur.push(a);
                rec(p, a, cur, left - 1, out);
                cur.pop();
            }
        }
        rec(p, 0, &mut Vec::new(), max_order, &mut tuples);
        let n = fields.len();
        let groups = JACKKNIFE_GROUPS.min(n);
        let mut sums = vec![vec![0.0; tuples.len()]; groups];
        let mut group_sizes = vec![0; groups];
        let mut row = vec![0.0; p];
        for s in 0..n {
            let g = s * groups / n;
            group_sizes[g] += 1;
            for a in 0..p {
                row[a] = fields.values[(s, a)];
            }
            for (i, t) in tuples.iter().enumerate() {
                sums[g][i] += t.iter().map(|&a| row[a]).product::<f64>();
            }
        }
        Self { p, groups, group_sizes, tuples, sums }
    }

    fn position(&self, idx: &[usize]) -> usize {
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.tuples.iter().position(|t| *t == key).expect("moment not tracked")
    }

    /// Raw moments with group `skip` removed (or none).
    fn estimate(&self, skip: Option<usize>) -> RawMoments<'_> {
        let mut acc = vec![0.0; self.tuples.len()];
        let mut count = 0;
        for g in 0..self.groups {
            if Some(g) == skip {
                continue;
            }
            count += self.group_sizes[g];
            for (a, s) in acc.iter_mut().zip(&self.sums[g]) {
                *a += s;
            }
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        RawMoments { sums: self, values: acc }
    }

    /// Full-sample value and jackknife standard error of `stat`.
    fn jackknife(&self, stat: impl Fn(&RawMoments) -> f64) -> (f64, f64) {
        let full = stat(&self.estimate(None));
        let g = self.groups as f64;
        let loo: Vec<f64> = (0..self.groups).map(|i| stat(&self.estimate(Some(i)))).collect();
        let mean = loo.iter().sum::<f64>() / g;
        let var = loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (g - 1.0) / g;
        (full, var.sqrt())
    }
}

struct RawMoments<'a> {
    sums: &'a MomentSums,
    values: Vec<f64>,
}

impl RawMoments<'_> {
    fn raw(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            1.0
        } else {
            self.values[self.sums.position(idx)]
        }
    }

    /// E[Π (x_a − E x_a)] by inclusion–exclusion over subsets.
    fn centered(&self, idx: &[usize]) -> f64 {
        let n = idx.len();
        let mut out = 0.0;
        for mask in 0..(1u32 << n) {
            let mut inside = Vec::with_capacity(n);
            let mut factor = 1.0;
            for (pos, &a) in idx.iter().enumerate() {
                if mask & (1 << pos) != 0 {
                    inside.push(a);
                } else {
                    factor *= -self.raw(&[a]);
                }
            }
            out += factor * self.raw(&inside);
        }
        out
    }

    fn wick_residual(&self, q: [usize; 4]) -> f64 {
        let c = |a: usize, b: usize| self.centered(&[a, b]);
        let [a, b, cc, d] = q;
        self.centered(&q) - (c(a, b) * c(cc, d) + c(a, cc) * c(b, d) + c(a, d) * c(b, cc))
    }
}

/// z-score of one covariance entry (or mean) against its prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryZ {
    pub label: String,
    pub empirical: f64,
    pub predicted: f64,
    pub se: f64,
    pub z: f64,
}

impl EntryZ {
    fn new(label: String, empirical: f64, predicted: f64, se: f64) -> Self {
        Self { label, empirical, predicted, se, z: (empirical - predicted) / se }
    }

    pub fn passes(&self) -> bool {
        self.z.abs() < Z_THRESHOLD
    }
}

/// Predicted joint covariance [[Q, R], [Rᵀ, T]].
pub fn predicted_covariance(op: &OrderParameterSet) -> DMatrix<f64> {
    let (k, m) = (op.q.nrows(), op.t.nrows());
    DMatrix::from_fn(k + m, k + m, |a, b| match (a < k, b < k) {
        (true, true) => op.q[(a, b)],
        (true, false) => op.r[(a, b - k)],
        (false, true) => op.r[(b, a - k)],
        (false, false) => op.t[(a - k, b - k)],
    })
}

fn cov_label(k: usize, a: usize, b: usize) -> String {
    match (a < k, b < k) {
        (true, true) => format!("Q{}{}", a + 1, b + 1),
        (true, false) => format!("R{}{}", a + 1, b - k + 1),
        _ => format!("T{}{}", a - k + 1, b - k + 1),
    }
}

/// Jackknife z-scores of the sample means and of every upper-triangular
/// covariance entry against the order-parameter prediction.
pub fn covariance_test(fields: &LocalFields, predicted: &OrderParameterSet) -> Result<Vec<EntryZ>> {
    if fields.len() < MIN_COVARIANCE_SAMPLES {
        return Err(HmlError::InvalidArgument(format!(
            "covariance test needs at least {MIN_COVARIANCE_SAMPLES} samples, got {}",
            fields.len()
        )));
    }
    let (k, m) = (fields.k, fields.m);
    if predicted.q.nrows() != k || predicted.t.nrows() != m {
        return Err(HmlError::Dimension(format!(
            "prediction is for K={} M={}, samples have K={k} M={m}",
            predicted.q.nrows(),
            predicted.t.nrows()
        )));
    }
    let sums = MomentSums::new(fields, 2);
    let cov = predicted_covariance(predicted);
    let mut out = Vec::new();
    for a in 0..k + m {
        let mean = if a < k { predicted.mean[a] } else { 0.0 };
        let (e, se) = sums.jackknife(|r| r.raw(&[a]));
        out.push(EntryZ::new(format!("mean_{}", fields.label(a)), e, mean, se));
    }
    for a in 0..k + m {
        for b in a..k + m {
            let (e, se) = sums.jackknife(|r| r.centered(&[a, b]));
            out.push(EntryZ::new(cov_label(k, a, b), e, cov[(a, b)], se));
        }
    }
    debug_assert_eq!(sums.p, k + m);
    Ok(out)
}

/// Fourth-moment Wick residual for one index quadruple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WickResidual {
    pub indices: [usize; 4],
    pub label: String,
    pub residual: f64,
    pub se: f64,
    pub z: f64,
}

impl WickResidual {
    pub fn passes(&self) -> bool {
        self.z.abs() < Z_THRESHOLD
    }
}

/// Centered fourth moment minus the Wick pairing sum, for every multiset of
/// four field indices.
pub fn gaussianity_test(fields: &LocalFields) -> Result<Vec<WickResidual>> {
    if fields.len() < MIN_GAUSSIANITY_SAMPLES {
        return Err(HmlError::InvalidArgument(format!(
            "gaussianity test needs at least {MIN_GAUSSIANITY_SAMPLES} samples, got {}",
            fields.len()
        )));
    }
    let sums = MomentSums::new(fields, 4);
    let p = sums.p;
    let mut out = Vec::new();
    for a in 0..p {
        for b in a..p {
            for c in b..p {
                for d in c..p {
                    let q = [a, b, c, d];
                    let (residual, se) = sums.jackknife(|r| r.wick_residual(q));
                    let label = q.iter().map(|&i| fields.label(i)).collect::<Vec<_>>().join(",");
                    out.push(WickResidual { indices: q, label, residual, se, z: residual / se });
                }
            }
        }
    }
    Ok(out)
}

/// Combined covariance and fourth-moment check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GepReport {
    pub samples: usize,
    pub threshold: f64,
    pub jackknife_groups: usize,
    pub covariance: Vec<EntryZ>,
    pub wick: Vec<WickResidual>,
    pub max_abs_z_covariance: f64,
    pub max_abs_z_wick: f64,
    pub passed: bool,
}

impl GepReport {
    pub fn new(samples: usize, covariance: Vec<EntryZ>, wick: Vec<WickResidual>) -> Self {
        let max_c = covariance.iter().map(|e| e.z.abs()).fold(0.0, f64::max);
        let max_w = wick.iter().map(|e| e.z.abs()).fold(0.0, f64::max);
        let passed = max_c < Z_THRESHOLD && max_w < Z_THRESHOLD;
        Self {
            samples,
            threshold: Z_THRESHOLD,
            jackknife_groups: JACKKNIFE_GROUPS,
            covariance,
            wick,
            max_abs_z_covariance: max_c,
            max_abs_z_wick: max_w,
            passed,
        }
    }
}

/// Covariance test, plus the fourth-moment test when requested.
pub fn gep_check(
    fields: &LocalFields,
    predicted: &OrderParameterSet,
    with_fourth_moments: bool,
) -> Result<GepReport> {
    let covariance = covariance_test(fields, predicted)?;
    let wick = if with_fourth_moments { gaussianity_test(fields)? } else { Vec::new() };
    Ok(GepReport::new(fields.len(), covariance, wick))
}

/// One ε value of the weak-correlation lemma checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaRow {
    pub eps: f64,
    /// E[f̃₁(u₁)f̃₂(u₂)] and its standard error.
    pub pair: f64,
    pub pair_se: f64,
    /// ε·m₁₂·b₁·b₂.
    pub pair_prediction: f64,
    /// pair / prediction (NaN when the prediction vanishes).
    pub ratio: f64,
    pub ratio_se: f64,
    /// E[f̃₁(u₁)f̃₂(u₂)f̃₁(u₃)] with all pairwise correlations ε·m₁₂.
    pub triple: f64,
    pub triple_se: f64,
    /// triple / ε^{3/2}.
    pub triple_scaled: f64,
}

/// Monte Carlo checks of the weak-correlation expansions for the pair
/// (f₁, f₂), with `samples` draws per ε.
pub fn lemma_checks(
    eps_grid: &[f64],
    f1: &Folding,
    f2: &Folding,
    m12: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<LemmaRow>> {
    if samples < 1000 {
        return Err(HmlError::InvalidArgument(format!("need at least 1000 samples, got {samples}")));
    }
    let c1 = folding_coefficients(f1)?;
    let c2 = folding_coefficients(f2)?;
    eps_grid
        .iter()
        .enumerate()
        .map(|(index, &eps)| {
            if !(0.0..=0.3).contains(&eps) {
                return Err(HmlError::InvalidArgument(format!("eps must lie in [0, 0.3], got {eps}")));
            }
            let rho = eps * m12;
            if rho.abs() >= 0.5 {
                return Err(HmlError::InvalidArgument(format!("correlation eps*m12 = {rho} too large")));
            }
            let cov = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { rho });
            let l = pivoted_cholesky(&cov)?;
            let chunks = samples.div_ceil(LEMMA_CHUNK);
            let parts: Vec<[f64; 4]> = (0..chunks)
                .into_par_iter()
                .map(|ch| {
                    let count = LEMMA_CHUNK.min(samples - ch * LEMMA_CHUNK);
                    let stream_index = ((index as u64) << 32) | ch as u64;
                    let mut r = rng::stream(seed, Purpose::Lemma, stream_index);
                    let mut z = [0.0; 3];
                    let mut acc = [0.0; 4];
                    for _ in 0..count {
                        rng::fill_normal(&mut r, &mut z);
                        let u: [f64; 3] = std::array::from_fn(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum());
                        let p = (f1.apply(u[0]) - c1.a) * (f2.apply(u[1]) - c2.a);
                        let t = p * (f1.apply(u[2]) - c1.a);
                        acc[0] += p;
                        acc[1] += p * p;
                        acc[2] += t;
                        acc[3] += t * t;
                    }
                    acc
                })
                .collect();
            let tot = parts.iter().fold([0.0; 4], |a, p| std::array::from_fn(|i| a[i] + p[i]));
            let nf = samples as f64;
            let moments = |s1: f64, s2: f64| {
                let mean = s1 / nf;
                let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
                (mean, (var / nf).sqrt())
            };
            let (pair, pair_se) = moments(tot[0], tot[1]);
            let (triple, triple_se) = moments(tot[2], tot[3]);
            let pred = rho * c1.b * c2.b;
            let (ratio, ratio_se) =
                if pred != 0.0 { (pair / pred, pair_se / pred.abs()) } else { (f64::NAN, f64::NAN) };
            let triple_scaled = if eps > 0.0 { triple / eps.powf(1.5) } else { f64::NAN };
            Ok(LemmaRow { eps, pair, pair_se, pair_prediction: pred, ratio, ratio_se, triple, triple_se, triple_scaled })
        })
        .collect()
}
