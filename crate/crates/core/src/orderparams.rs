//! Macroscopic order parameters measured from concrete weights.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureKind, FeatureMatrix, FoldingCoefficients, NetworkParams};
use crate::error::{HmlError, Result};
use crate::odeflow::grid::SpectralGrid;
use crate::rng::{self, Purpose};

/// Largest latent dimension handled by the dense eigensolver.
pub const SPECTRUM_CAP: usize = 4096;

/// Eigenpairs of Ω = F Fᵀ / N with eigenvectors scaled to squared norm D.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// ρ_τ, ascending.
    pub eigenvalues: Vec<f64>,
    /// Row τ is ψ_τ, with Σ_s ψ_τs² = D.
    pub psi: DMatrix<f64>,
    pub d: usize,
    pub n: usize,
}

impl Spectrum {
    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// Ω = F Fᵀ / N (D×D).
pub fn omega(features: &FeatureMatrix) -> DMatrix<f64> {
    let f = &features.entries;
    (f * f.transpose()) / features.n() as f64
}

/// Full eigendecomposition of Ω.
pub fn omega_spectrum(features: &FeatureMatrix) -> Result<Spectrum> {
    let (d, n) = (features.d(), features.n());
    if d > SPECTRUM_CAP {
        return Err(HmlError::InvalidArgument(format!(
            "latent dimension {d} exceeds the dense eigensolver cap {SPECTRUM_CAP}"
        )));
    }
    let sd = (d as f64).sqrt();
    if features.kind == FeatureKind::Hadamard {
        // F Fᵀ = N·1 holds exactly in floating point for ±1 entries.
        return Ok(Spectrum { eigenvalues: vec![1.0; d], psi: DMatrix::identity(d, d) * sd, d, n });
    }
    let eig = SymmetricEigen::new(omega(features));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut psi = DMatrix::zeros(d, d);
    for (tau, &i) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        for s in 0..d {
            psi[(tau, s)] = col[s] * sd;
        }
    }
    Ok(Spectrum { eigenvalues, psi, d, n })
}

/// The macroscopic state of a student/teacher pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameterSet {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub t_tilde: DMatrix<f64>,
    pub v: DVector<f64>,
    pub v_tilde: DVector<f64>,
    /// a·(1/√N)Σ_i w_i^k, the mean of λ^k (zero for odd foldings).
    pub mean: DVector<f64>,
    pub coefficients: FoldingCoefficients,
}

impl OrderParameterSet {
    /// Q = (c − a² − b²) W + b² Σ.
    pub fn assemble_q(w: &DMatrix<f64>, sigma: &DMatrix<f64>, co: &FoldingCoefficients) -> DMatrix<f64> {
        w * (co.c - co.a * co.a - co.b * co.b) + sigma * (co.b * co.b)
    }

    /// Flat column names in the order of [`Self::flatten`].
    pub fn column_names(k: usize, m: usize) -> Vec<String> {
        let mut names = Vec::new();
        for a in 0..k {
            for b in 0..k {
                names.push(format!("Q_{a}{b}"));
            }
        }
        for a in 0..k {
            for b in 0..m {
                names.push(format!("R_{a}{b}"));
            }
        }
        for a in 0..m {
            for b in 0..m {
                names.push(format!("T_{a}{b}"));
            }
        }
        for a in 0..k {
            for b in 0..k {
                names.push(format!("W_{a}{b}"));
            }
        }
        for a in 0..k {
            for b in 0..k {
                names.push(format!("Sigma_{a}{b}"));
            }
        }
        for a in 0..k {
            names.push(format!("v_{a}"));
        }
        names
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let row_major = |m: &DMatrix<f64>, out: &mut Vec<f64>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        };
        row_major(&self.q, &mut out);
        row_major(&self.r, &mut out);
        row_major(&self.t, &mut out);
        row_major(&self.w, &mut out);
        row_major(&self.sigma, &mut out);
        out.extend(self.v.iter());
        out
    }
}

/// ε_g and order-parameter snapshots along a run (simulated or integrated).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trajectory {
    /// Times t = μ/N.
    pub times: Vec<f64>,
    pub eps: Vec<f64>,
    /// ε_g predicted from the snapshot's order parameters, where available.
    pub eps_theory: Vec<Option<f64>>,
    pub snapshots: Vec<OrderParameterSet>,
    /// Time at which the divergence guard stopped the run.
    pub diverged_at: Option<f64>,
    /// Training samples consumed.
    pub samples_used: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, eps: f64, theory: Option<f64>, snap: OrderParameterSet) {
        self.times.push(t);
        self.eps.push(eps);
        self.eps_theory.push(theory);
        self.snapshots.push(snap);
    }

    pub fn final_eps(&self) -> Option<f64> {
        self.eps.last().copied()
    }

    /// ε_g linearly interpolated at `t` (clamped to the recorded range).
    pub fn eps_at(&self, t: f64) -> Option<f64> {
        let n = self.times.len();
        if n == 0 {
            return None;
        }
        let i = self.times.partition_point(|&x| x < t);
        if i == 0 {
            return Some(self.eps[0]);
        }
        if i == n {
            return Some(self.eps[n - 1]);
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        Some(self.eps[i - 1] + f * (self.eps[i] - self.eps[i - 1]))
    }
}

fn check_pair(student: &NetworkParams, teacher: &NetworkParams, features: &FeatureMatrix) -> Result<()> {
    if student.input_dim() != features.n() || teacher.input_dim() != features.d() {
        return Err(HmlError::Dimension(format!(
            "student input {} / teacher input {} do not match features (n={}, d={})",
            student.input_dim(),
            teacher.input_dim(),
            features.n(),
            features.d()
        )));
    }
    Ok(())
}

/// S = W Fᵀ / √N (K×D).
pub fn projections(student: &NetworkParams, features: &FeatureMatrix) -> DMatrix<f64> {
    (&student.w * features.entries.transpose()) / (features.n() as f64).sqrt()
}

/// Measure all order parameters of the pair.
pub fn measure_order_params(
    student: &NetworkParams,
    teacher: &NetworkParams,
    features: &FeatureMatrix,
    spectrum: &Spectrum,
    coefficients: &FoldingCoefficients,
) -> Result<OrderParameterSet> {
    check_pair(student, teacher, features)?;
    if spectrum.d != features.d() {
        return Err(HmlError::Dimension("spectrum does not belong to these features".into()));
    }
    let (n, d) = (features.n() as f64, features.d() as f64);
    let s = projections(student, features);
    let w = (&student.w * student.w.transpose()) / n;
    let sigma = (&s * s.transpose()) / d;
    let r = (&s * teacher.w.transpose()) * (coefficients.b / d);
    let t = (&teacher.w * teacher.w.transpose()) / d;
    let omega_t = teacher_projections(teacher, spectrum);
    let mut weighted = omega_t.clone();
    for (tau, mut col) in weighted.column_iter_mut().enumerate() {
        col.scale_mut(spectrum.eigenvalues[tau]);
    }
    let t_tilde = (&weighted * omega_t.transpose()) / d;
    let q = OrderParameterSet::assemble_q(&w, &sigma, coefficients);
    let mean = DVector::from_iterator(
        student.hidden(),
        (0..student.hidden()).map(|k| coefficients.a * student.w.row(k).sum() / n.sqrt()),
    );
    Ok(OrderParameterSet {
        q,
        r,
        t,
        w,
        sigma,
        t_tilde,
        v: student.v.clone(),
        v_tilde: teacher.v.clone(),
        mean,
        coefficients: *coefficients,
    })
}

/// ω̃_τ^m = (1/√D) Σ_r w̃_r^m ψ_τr as an M×D matrix (column τ).
pub fn teacher_projections(teacher: &NetworkParams, spectrum: &Spectrum) -> DMatrix<f64> {
    (&teacher.w * spectrum.psi.transpose()) / (spectrum.d as f64).sqrt()
}

/// Γ_τ^k = (1/√D) Σ_r S_r^k ψ_τr as a K×D matrix (column τ).
pub fn student_projections(s: &DMatrix<f64>, spectrum: &Spectrum) -> DMatrix<f64> {
    (s * spectrum.psi.transpose()) / (spectrum.d as f64).sqrt()
}

/// ρ-resolved densities r^{km}(ρ_i) and σ^{kℓ}(ρ_i) on grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityState {
    pub k: usize,
    pub m: usize,
    pub nodes: usize,
    /// Index `(i*K + k)*M + m`.
    pub r: Vec<f64>,
    /// Index `(i*K + k)*K + l`.
    pub sigma: Vec<f64>,
    /// Grid nodes that received no eigenvalue when binned.
    pub empty_bins: usize,
}

impl DensityState {
    pub fn zeros(k: usize, m: usize, nodes: usize) -> Self {
        Self { k, m, nodes, r: vec![0.0; nodes * k * m], sigma: vec![0.0; nodes * k * k], empty_bins: 0 }
    }

    /// Constant densities r(ρ) = r0, σ(ρ) = s0 at every node.
    pub fn constant(r0: &DMatrix<f64>, s0: &DMatrix<f64>, nodes: usize) -> Self {
        let (k, m) = r0.shape();
        let mut st = Self::zeros(k, m, nodes);
        for i in 0..nodes {
            for a in 0..k {
                for b in 0..m {
                    *st.r_mut(i, a, b) = r0[(a, b)];
                }
                for b in 0..k {
                    *st.sigma_mut(i, a, b) = s0[(a, b)];
                }
            }
        }
        st
    }

    #[inline]
    pub fn r_at(&self, i: usize, k: usize, m: usize) -> f64 {
        self.r[(i * self.k + k) * self.m + m]
    }

    #[inline]
    pub fn r_mut(&mut self, i: usize, k: usize, m: usize) -> &mut f64 {
        &mut self.r[(i * self.k + k) * self.m + m]
    }

    #[inline]
    pub fn sigma_at(&self, i: usize, k: usize, l: usize) -> f64 {
        self.sigma[(i * self.k + k) * self.k + l]
    }

    #[inline]
    pub fn sigma_mut(&mut self, i: usize, k: usize, l: usize) -> &mut f64 {
        &mut self.sigma[(i * self.k + k) * self.k + l]
    }

    /// (Σ_i u_i r_i, Σ_i u_i σ_i).
    pub fn integrate(&self, grid: &SpectralGrid) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = DMatrix::zeros(self.k, self.m);
        let mut s = DMatrix::zeros(self.k, self.k);
        for (i, &u) in grid.weights.iter().enumerate() {
            for a in 0..self.k {
                for b in 0..self.m {
                    r[(a, b)] += u * self.r_at(i, a, b);
                }
                for b in 0..self.k {
                    s[(a, b)] += u * self.sigma_at(i, a, b);
                }
            }
        }
        (r, s)
    }
}

/// Bin the eigenbasis products onto the grid.
///
/// Each eigenvalue goes to its nearest node. A node's value is the bin sum
/// divided by D·u_i, the indicator-bin density normalised by the grid mass of
/// the bin. When the bin population matches the grid mass (always the case
/// for an empirical grid) this is the plain bin average; in general it makes
/// the quadrature of r reproduce R/b and that of σ reproduce Σ exactly.
pub fn bin_densities(
    student: &NetworkParams,
    teacher: &NetworkParams,
    features: &FeatureMatrix,
    spectrum: &Spectrum,
    grid: &SpectralGrid,
) -> Result<DensityState> {
    check_pair(student, teacher, features)?;
    let (k, m, d) = (student.hidden(), teacher.hidden(), spectrum.d);
    let s = projections(student, features);
    let gamma = student_projections(&s, spectrum);
    let omega_t = teacher_projections(teacher, spectrum);
    let mut st = DensityState::zeros(k, m, grid.len());
    let mut counts = vec![0usize; grid.len()];
    for tau in 0..d {
        let i = grid.nearest(spectrum.eigenvalues[tau]);
        counts[i] += 1;
        for a in 0..k {
            for b in 0..m {
                *st.r_mut(i, a, b) += gamma[(a, tau)] * omega_t[(b, tau)];
            }
            for b in 0..k {
                *st.sigma_mut(i, a, b) += gamma[(a, tau)] * gamma[(b, tau)];
            }
        }
    }
    for (i, &u) in grid.weights.iter().enumerate() {
        let scale = if u > 0.0 { 1.0 / (d as f64 * u) } else { 0.0 };
        for x in &mut st.r[i * k * m..(i + 1) * k * m] {
            *x *= scale;
        }
        for x in &mut st.sigma[i * k * k..(i + 1) * k * k] {
            *x *= scale;
        }
    }
    st.empty_bins = counts.iter().filter(|&&c| c == 0).count();
    Ok(st)
}

/// Magnitudes of the balance sums (1/√N) Σ_i w_i^{k1}…w_i^{kp} F_{r1 i}…F_{rq i}
/// over random index tuples with p, q ∈ {1, 2, 3} and distinct r's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub samples: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn balance_diagnostics(
    student: &NetworkParams,
    features: &FeatureMatrix,
    samples: usize,
    seed: u64,
) -> BalanceReport {
    use rand::Rng;
    let (k, n, d) = (student.hidden(), features.n(), features.d());
    let mut r = rng::stream(seed, Purpose::Shuffle, u64::MAX);
    let mut max_abs = 0.0f64;
    let mut total = 0.0;
    for _ in 0..samples {
        let p = r.random_range(1..=3usize);
        let q = r.random_range(1..=3usize.min(d));
        let ks: Vec<usize> = (0..p).map(|_| r.random_range(0..k)).collect();
        let mut rs: Vec<usize> = Vec::new();
        while rs.len() < q {
            let x = r.random_range(0..d);
            if !rs.contains(&x) {
                rs.push(x);
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            let mut term = 1.0;
            for &kk in &ks {
                term *= student.w[(kk, i)];
            }
            for &rr in &rs {
                term *= features.entries[(rr, i)];
            }
            acc += term;
        }
        let val = (acc / (n as f64).sqrt()).abs();
        max_abs = max_abs.max(val);
        total += val;
    }
    BalanceReport { samples, max_abs, mean_abs: if samples > 0 { total / samples as f64 } else { 0.0 } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_gaussian_features, make_hadamard_features, Activation, SecondLayer};
    use crate::odeflow::grid::{make_grid, GridMode};

    fn pair(k: usize, m: usize, n: usize, d: usize, seed: u64) -> (NetworkParams, NetworkParams, FeatureMatrix) {
        let f = make_gaussian_features(n, d, seed).unwrap();
        let s = NetworkParams::random_student(k, n, 1.0, Activation::Erf, seed + 1);
        let t = NetworkParams::random_teacher(m, d, Activation::Erf, SecondLayer::Normal, false, seed + 2).unwrap();
        (s, t, f)
    }

    #[test]
    fn hadamard_spectrum_is_flat() {
        let f = make_hadamard_features(256).unwrap();
        let sp = omega_spectrum(&f).unwrap();
        assert!(sp.eigenvalues.iter().all(|&r| r == 1.0));
        assert!((omega(&f) - DMatrix::identity(256, 256)).amax() == 0.0);
    }

    #[test]
    fn trace_and_orthogonality() {
        let f = make_gaussian_features(300, 30, 5).unwrap();
        let sp = omega_spectrum(&f).unwrap();
        let tr = omega(&f).trace();
        assert!((sp.trace() - tr).abs() < 1e-6 * tr);
        let g = &sp.psi * sp.psi.transpose();
        assert!((g - DMatrix::identity(30, 30) * 30.0).amax() < 1e-9);
    }

    #[test]
    fn spectrum_follows_marchenko_pastur() {
        let (n, d) = (2000, 200);
        let delta = 0.1;
        let f = make_gaussian_features(n, d, 8).unwrap();
        let sp = omega_spectrum(&f).unwrap();
        // KS distance against the MP CDF, tabulated with a fine midpoint rule.
        let (lo, hi) = crate::odeflow::grid::mp_edges(delta);
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let mut cdf = vec![0.0; steps + 1];
        for j in 0..steps {
            let x = lo + (j as f64 + 0.5) * h;
            cdf[j + 1] = cdf[j] + crate::odeflow::grid::mp_density(delta, x).unwrap() * h;
        }
        let cdf_at = |x: f64| {
            if x <= lo {
                0.0
            } else if x >= hi {
                1.0
            } else {
                cdf[((x - lo) / h) as usize]
            }
        };
        let mut ks = 0.0f64;
        for (i, &x) in sp.eigenvalues.iter().enumerate() {
            let c = cdf_at(x);
            ks = ks.max((c - i as f64 / d as f64).abs()).max((c - (i + 1) as f64 / d as f64).abs());
        }
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn zero_student_gives_zero_overlaps() {
        let (mut s, t, f) = pair(2, 3, 100, 10, 1);
        s.w.fill(0.0);
        let sp = omega_spectrum(&f).unwrap();
        let op = measure_order_params(&s, &t, &f, &sp, &FoldingCoefficients::sign()).unwrap();
        assert_eq!(op.q.amax(), 0.0);
        assert_eq!(op.r.amax(), 0.0);
        assert_eq!(op.sigma.amax(), 0.0);
        let g = make_grid(GridMode::MarchenkoPastur { delta: 0.1 }, 50).unwrap();
        let dens = bin_densities(&s, &t, &f, &sp, &g).unwrap();
        assert!(dens.r.iter().chain(&dens.sigma).all(|&x| x == 0.0));
    }

    #[test]
    fn order_parameters_match_direct_sums() {
        let (s, t, f) = pair(2, 2, 60, 12, 3);
        let sp = omega_spectrum(&f).unwrap();
        let co = FoldingCoefficients::sign();
        let op = measure_order_params(&s, &t, &f, &sp, &co).unwrap();
        let (n, d) = (60.0f64, 12.0f64);
        // Direct index sums as the oracle.
        let s_kr = |k: usize, r: usize| (0..60).map(|i| s.w[(k, i)] * f.entries[(r, i)]).sum::<f64>() / n.sqrt();
        for k in 0..2 {
            for m in 0..2 {
                let r_direct: f64 = (0..12).map(|r| s_kr(k, r) * t.w[(m, r)]).sum::<f64>() * co.b / d;
                assert!((op.r[(k, m)] - r_direct).abs() < 1e-10);
            }
            for l in 0..2 {
                let w_direct: f64 = (0..60).map(|i| s.w[(k, i)] * s.w[(l, i)]).sum::<f64>() / n;
                let sig: f64 = (0..12).map(|r| s_kr(k, r) * s_kr(l, r)).sum::<f64>() / d;
                assert!((op.w[(k, l)] - w_direct).abs() < 1e-10);
                assert!((op.sigma[(k, l)] - sig).abs() < 1e-10);
                let q = (co.c - co.b * co.b) * w_direct + co.b * co.b * sig;
                assert!((op.q[(k, l)] - q).abs() < 1e-10);
            }
        }
        // T̃ as an eigen-sum equals W̃ Ω W̃ᵀ / D.
        let tt = &t.w * omega(&f) * t.w.transpose() / d;
        assert!((op.t_tilde - tt).amax() < 1e-9);
    }

    #[test]
    fn hadamard_t_tilde_equals_t() {
        let f = make_hadamard_features(64).unwrap();
        let s = NetworkParams::random_student(2, 64, 1.0, Activation::Erf, 1);
        let t = NetworkParams::random_teacher(2, 64, Activation::Erf, SecondLayer::Normal, false, 2).unwrap();
        let sp = omega_spectrum(&f).unwrap();
        let op = measure_order_params(&s, &t, &f, &sp, &FoldingCoefficients::sign()).unwrap();
        assert!((&op.t_tilde - &op.t).amax() < 1e-12);
        let g = make_grid(GridMode::Empirical { eigenvalues: sp.eigenvalues.clone() }, 0).unwrap();
        assert_eq!(g.len(), 1);
        let dens = bin_densities(&s, &t, &f, &sp, &g).unwrap();
        let (r, sig) = dens.integrate(&g);
        assert!((r * FoldingCoefficients::sign().b - &op.r).amax() < 1e-12);
        assert!((sig - &op.sigma).amax() < 1e-12);
    }

    #[test]
    fn binned_densities_reproduce_overlaps() {
        let (s, t, f) = pair(2, 2, 4000, 400, 9);
        let sp = omega_spectrum(&f).unwrap();
        let co = FoldingCoefficients::sign();
        let op = measure_order_params(&s, &t, &f, &sp, &co).unwrap();
        let g = make_grid(GridMode::MarchenkoPastur { delta: 0.1 }, 200).unwrap();
        let dens = bin_densities(&s, &t, &f, &sp, &g).unwrap();
        let (r, sig) = dens.integrate(&g);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
        for k in 0..2 {
            for m in 0..2 {
                assert!(rel(r[(k, m)] * co.b, op.r[(k, m)]) < 0.02);
            }
            for l in 0..2 {
                assert!(rel(sig[(k, l)], op.sigma[(k, l)]) < 0.02);
                assert_eq!(dens.sigma_at(5, k, l), dens.sigma_at(5, l, k));
            }
        }
    }

    #[test]
    fn balance_sums_are_order_one() {
        let (s, _, f) = pair(2, 2, 2000, 50, 4);
        // Products of up to six Gaussians are heavy-tailed, so bound the mean
        // and check that it does not grow with N as an unbalanced sum would.
        let rep = balance_diagnostics(&s, &f, 200, 1);
        assert!(rep.mean_abs < 5.0, "{rep:?}");
        let (s4, _, f4) = pair(2, 2, 8000, 50, 4);
        let rep4 = balance_diagnostics(&s4, &f4, 200, 1);
        assert!(rep4.mean_abs < 2.0 * rep.mean_abs, "{rep:?} {rep4:?}");
    }
}
