//! Gaussian averages I2, I3, I4 of erf units, in closed form and by Monte Carlo.
//!
//! With g(x) = erf(x/√2) and zero-mean jointly Gaussian fields of covariance φ:
//!
//! * I2 = E[g(x₁) g(x₂)]
//! * I3 = E[g'(x₁) x₂ g(x₃)]
//! * I4 = E[g'(x₁) g'(x₂) g(x₃) g(x₄)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::datagen::Activation;
use crate::error::{HmlError, Result};
use crate::rng::{self, Purpose};

/// Tolerance for PSD checks and determinant guards.
pub const PSD_TOL: f64 = 1e-10;
/// Arcsin arguments within this distance of ±1 are clamped.
pub const CLAMP_TOL: f64 = 1e-12;

/// Symmetric positive semidefinite 3×3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub [[f64; 3]; 3]);

/// Symmetric positive semidefinite 4×4 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance4(pub [[f64; 4]; 4]);

impl Covariance3 {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        check_psd(&DMatrix::from_fn(3, 3, |i, j| m[i][j]))?;
        Ok(Self(m))
    }
}

impl Covariance4 {
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        check_psd(&DMatrix::from_fn(4, 4, |i, j| m[i][j]))?;
        Ok(Self(m))
    }
}

/// Reject asymmetric or indefinite matrices (tolerance 1e-10).
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(HmlError::Dimension("covariance must be square".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(HmlError::DegenerateCovariance("covariance has non-finite entries".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > PSD_TOL * (1.0 + m[(i, j)].abs()) {
                return Err(HmlError::DegenerateCovariance(format!("covariance not symmetric at ({i},{j})")));
            }
        }
    }
    let scale = m.amax().max(1.0);
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(HmlError::DegenerateCovariance(format!("covariance not PSD (smallest eigenvalue {min:e})")));
    }
    Ok(())
}

fn clamped_asin(x: f64, what: &str) -> Result<f64> {
    if !x.is_finite() || x.abs() > 1.0 + CLAMP_TOL {
        return Err(HmlError::DegenerateCovariance(format!("{what}: arcsin argument {x} outside [-1, 1]")));
    }
    Ok(x.clamp(-1.0, 1.0).asin())
}

/// I2 = (2/π) arcsin(q_kj / √((1+q_kk)(1+q_jj))).
pub fn i2_erf(q_kk: f64, q_jj: f64, q_kj: f64) -> Result<f64> {
    let den = ((1.0 + q_kk) * (1.0 + q_jj)).sqrt();
    Ok(2.0 / PI * clamped_asin(q_kj / den, "I2")?)
}

/// Closed-form I3 without the PSD check.
#[inline]
pub fn i3_erf_raw(p: &[[f64; 3]; 3]) -> Result<f64> {
    let lambda3 = (1.0 + p[0][0]) * (1.0 + p[2][2]) - p[0][2] * p[0][2];
    if !(lambda3 > PSD_TOL) {
        return Err(HmlError::DegenerateCovariance(format!("I3: Lambda3 = {lambda3:e}")));
    }
    Ok(2.0 / PI / lambda3.sqrt() * (p[1][2] * (1.0 + p[0][0]) - p[0][1] * p[0][2]) / (1.0 + p[0][0]))
}

/// I3 = (2/π)(1/√Λ₃)(φ₂₃(1+φ₁₁) − φ₁₂φ₁₃)/(1+φ₁₁), Λ₃ = (1+φ₁₁)(1+φ₃₃) − φ₁₃².
pub fn i3_erf(phi: &Covariance3) -> Result<f64> {
    i3_erf_raw(&phi.0)
}

/// Closed-form I4 without the PSD check.
#[inline]
pub fn i4_erf_raw(p: &[[f64; 4]; 4]) -> Result<f64> {
    let (p11, p22, p33, p44) = (p[0][0], p[1][1], p[2][2], p[3][3]);
    let (p12, p13, p14, p23, p24, p34) = (p[0][1], p[0][2], p[0][3], p[1][2], p[1][3], p[2][3]);
    let l4 = (1.0 + p11) * (1.0 + p22) - p12 * p12;
    let l0 = l4 * p34 - p23 * p24 * (1.0 + p11) - p13 * p14 * (1.0 + p22) + p12 * p13 * p24 + p12 * p14 * p23;
    let l1 = l4 * (1.0 + p33) - p23 * p23 * (1.0 + p11) - p13 * p13 * (1.0 + p22) + 2.0 * p12 * p13 * p23;
    let l2 = l4 * (1.0 + p44) - p24 * p24 * (1.0 + p11) - p14 * p14 * (1.0 + p22) + 2.0 * p12 * p14 * p24;
    if !(l4 > PSD_TOL && l1 > PSD_TOL && l2 > PSD_TOL) {
        return Err(HmlError::DegenerateCovariance(format!("I4: Lambda4={l4:e} Lambda1={l1:e} Lambda2={l2:e}")));
    }
    Ok(4.0 / (PI * PI) / l4.sqrt() * clamped_asin(l0 / (l1 * l2).sqrt(), "I4")?)
}

/// I4 = (4/π²)(1/√Λ₄) arcsin(Λ₀/√(Λ₁Λ₂)).
pub fn i4_erf(phi: &Covariance4) -> Result<f64> {
    i4_erf_raw(&phi.0)
}

/// What a slot of a Monte Carlo average applies to its field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    G(Activation),
    GPrime(Activation),
    /// The bare field value.
    Field,
}

impl Slot {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            Slot::G(a) => a.g(x),
            Slot::GPrime(a) => a.g_prime(x),
            Slot::Field => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralKind {
    I2,
    I3,
    I4,
}

impl IntegralKind {
    pub fn arity(self) -> usize {
        match self {
            IntegralKind::I2 => 2,
            IntegralKind::I3 => 3,
            IntegralKind::I4 => 4,
        }
    }
}

/// Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

impl McEstimate {
    /// (value − mean)/se.
    pub fn z(&self, value: f64) -> f64 {
        (value - self.mean) / self.se
    }
}

/// Lower factor L with L Lᵀ = A, from Cholesky with diagonal pivoting.
/// Directions with remaining variance below the tolerance are dropped,
/// so rank-deficient covariances still sample correctly.
pub fn pivoted_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_psd(a)?;
    let n = a.nrows();
    let scale = a.amax().max(1.0);
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let (mut piv, mut best) = (j, f64::NEG_INFINITY);
        for i in j..n {
            if work[(perm[i], perm[i])] > best {
                best = work[(perm[i], perm[i])];
                piv = i;
            }
        }
        if best <= PSD_TOL * scale {
            break;
        }
        perm.swap(j, piv);
        let pj = perm[j];
        let d = best.sqrt();
        for i in j..n {
            let pi = perm[i];
            l[(pi, j)] = work[(pi, pj)] / d;
        }
        for i in j + 1..n {
            for k in j + 1..n {
                let (pi, pk) = (perm[i], perm[k]);
                work[(pi, pk)] -= l[(pi, j)] * l[(pk, j)];
            }
        }
        work[(pj, pj)] = 0.0;
    }
    Ok(l)
}

const CHUNK: usize = 1 << 16;

/// Monte Carlo estimate of E[Π_a slot_a(x_a)] for x ~ N(0, cov).
///
/// Samples are drawn in fixed chunks, each from its own indexed stream, and
/// the partial sums are reduced in chunk order, so the result does not
/// depend on the number of worker threads.
pub fn i_monte_carlo(
    kind: IntegralKind,
    cov: &DMatrix<f64>,
    slots: &[Slot],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let n = kind.arity();
    if cov.nrows() != n || slots.len() != n {
        return Err(HmlError::Dimension(format!("{kind:?} needs a {n}x{n} covariance and {n} slots")));
    }
    if samples < 1000 {
        return Err(HmlError::InvalidArgument(format!("need at least 1000 samples, got {samples}")));
    }
    let l = pivoted_cholesky(cov)?;
    let mut lf = [[0.0; 4]; 4];
    for a in 0..n {
        for b in 0..n {
            lf[a][b] = l[(a, b)];
        }
    }
    let chunks = samples.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(samples - c * CHUNK);
            let mut r = rng::stream(seed, Purpose::MonteCarlo, c as u64);
            let mut z = [0.0; 4];
            let mut x = [0.0; 4];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                rng::fill_normal(&mut r, &mut z[..n]);
                let mut prod = 1.0;
                for a in 0..n {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += lf[a][b] * z[b];
                    }
                    x[a] = acc;
                    prod *= slots[a].eval(x[a]);
                }
                s1 += prod;
                s2 += prod * prod;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = partial.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let nf = samples as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok(McEstimate { mean, se: (var / nf).sqrt(), samples })
}

/// Random covariance A Aᵀ / n + 0.05·1 with A a standard normal n×n matrix,
/// drawn from stream `index`. Used by oracle checks.
pub fn random_psd(n: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let a = DMatrix::from_vec(n, n, rng::normal_row(seed, Purpose::Covariances, index, n * n));
    (&a * a.transpose()) / n as f64 + DMatrix::identity(n, n) * 0.05
}

pub fn to3(m: &DMatrix<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

pub fn to4(m: &DMatrix<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// One row of the oracle-equivalence table.
#[derive(Debug, Clone)]
pub struct OracleRow {
    pub index: usize,
    pub closed: f64,
    pub mc: McEstimate,
}

impl OracleRow {
    pub fn z(&self) -> f64 {
        self.mc.z(self.closed)
    }
}

/// Compare closed-form I3 or I4 with Monte Carlo on `count` random PSD blocks.
pub fn oracle_table(kind: IntegralKind, count: usize, samples: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let erf = Activation::Erf;
    (0..count)
        .map(|i| {
            let (closed, mc) = match kind {
                IntegralKind::I3 => {
                    let c = random_psd(3, seed, i as u64);
                    let slots = [Slot::GPrime(erf), Slot::Field, Slot::G(erf)];
                    (i3_erf(&Covariance3::new(to3(&c))?)?, i_monte_carlo(kind, &c, &slots, samples, seed + i as u64)?)
                }
                IntegralKind::I4 => {
                    let c = random_psd(4, seed, 1_000_000 + i as u64);
                    let slots = [Slot::GPrime(erf), Slot::GPrime(erf), Slot::G(erf), Slot::G(erf)];
                    (i4_erf(&Covariance4::new(to4(&c))?)?, i_monte_carlo(kind, &c, &slots, samples, seed + i as u64)?)
                }
                IntegralKind::I2 => {
                    let c = random_psd(2, seed, 2_000_000 + i as u64);
                    let slots = [Slot::G(erf), Slot::G(erf)];
                    (i2_erf(c[(0, 0)], c[(1, 1)], c[(0, 1)])?, i_monte_carlo(kind, &c, &slots, samples, seed + i as u64)?)
                }
            };
            Ok(OracleRow { index: i, closed, mc })
        })
        .collect()
}
