//! The small-δ reduced system.
//!
//! Densities are taken constant in ρ, r(ρ) = R/b and σ(ρ) = Σ, and the
//! overlaps follow the symmetric ansatz: an entry is "diagonal" when the two
//! indices agree modulo M (students k and k+M specialise to the same teacher
//! node). K = M gives the matched ansatz, K = ZM the many-to-one one. The
//! right-hand side is the full equation of motion evaluated on that state,
//! integrated over the Marchenko–Pastur grid and averaged over each class.

use nalgebra::{DMatrix, DVector, SVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Activation, FoldingCoefficients};
use crate::error::{HmlError, Result};
use crate::gint::check_psd;
use crate::odeflow::{eom_rhs, generalisation_error, make_grid, FlowState, GridMode, SpectralGrid};
use crate::orderparams::{DensityState, OrderParameterSet};
use crate::rng::{self, Purpose};

/// Number of dynamical scalars (R, r, S, s, W, w, v).
pub const DIM: usize = 7;
/// Fixed points must have ‖rhs‖∞ below this.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Fixed points closer than this (max-norm) are merged.
pub const DEDUP_TOL: f64 = 1e-6;
/// |R−r|, |S−s|, |W−w| below this means unspecialised.
pub const CLASS_TOL: f64 = 1e-4;

type Vec7 = SVector<f64, DIM>;

/// Teacher overlaps under the ansatz: T (diag), t (off), T̃ (diag), t̃ (off).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConstants {
    pub t_diag: f64,
    pub t_off: f64,
    pub tt_diag: f64,
    pub tt_off: f64,
}

impl TeacherConstants {
    /// T = T̃ = 1, t = t̃ = 0.
    pub fn identity() -> Self {
        Self { t_diag: 1.0, t_off: 0.0, tt_diag: 1.0, tt_off: 0.0 }
    }

    /// T = 1, t = 0, T̃ = 1 − x, t̃ = x.
    pub fn perturbed(x: f64) -> Self {
        Self { t_diag: 1.0, t_off: 0.0, tt_diag: 1.0 - x, tt_off: x }
    }
}

/// Ansatz values and the constants of the reduced flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub big_r: f64,
    pub r: f64,
    pub big_s: f64,
    pub s: f64,
    pub big_w: f64,
    pub w: f64,
    pub v: f64,
    pub teacher: TeacherConstants,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    pub delta: f64,
    pub coefficients: FoldingCoefficients,
    /// Marchenko–Pastur grid size used for the ρ-integrals.
    pub nodes: usize,
}

/// Time derivatives of the seven scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedDerivative {
    pub big_r: f64,
    pub r: f64,
    pub big_s: f64,
    pub s: f64,
    pub big_w: f64,
    pub w: f64,
    pub v: f64,
}

impl ReducedDerivative {
    pub fn to_array(self) -> [f64; DIM] {
        [self.big_r, self.r, self.big_s, self.s, self.big_w, self.w, self.v]
    }

    pub fn max_abs(self) -> f64 {
        self.to_array().iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

fn same_class(a: usize, b: usize, m: usize) -> bool {
    a % m == b % m
}

impl ReducedState {
    /// Matched K = M = `k` state with sign folding and the given teacher.
    pub fn new(k: usize, m: usize, eta: f64, delta: f64, teacher: TeacherConstants) -> Self {
        Self {
            big_r: 0.0,
            r: 0.0,
            big_s: 0.0,
            s: 0.0,
            big_w: 0.0,
            w: 0.0,
            v: 0.0,
            teacher,
            k,
            m,
            eta,
            delta,
            coefficients: FoldingCoefficients::sign(),
            nodes: 200,
        }
    }

    /// Z = K/M.
    pub fn z(&self) -> usize {
        self.k / self.m
    }

    pub fn to_array(&self) -> [f64; DIM] {
        [self.big_r, self.r, self.big_s, self.s, self.big_w, self.w, self.v]
    }

    pub fn with_array(&self, x: &[f64; DIM]) -> Self {
        Self {
            big_r: x[0],
            r: x[1],
            big_s: x[2],
            s: x[3],
            big_w: x[4],
            w: x[5],
            v: x[6],
            ..self.clone()
        }
    }

    fn check(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || !self.k.is_multiple_of(self.m) {
            return Err(HmlError::InvalidArgument(format!(
                "the reduced system needs K a positive multiple of M (got K={}, M={})",
                self.k, self.m
            )));
        }
        Ok(())
    }

    /// Whether the off-diagonal classes of R and of Σ/W are non-empty.
    fn active(&self) -> [bool; DIM] {
        let r_off = self.m > 1;
        let s_off = self.k > 1 && (0..self.k).any(|a| (0..self.k).any(|b| !same_class(a, b, self.m)));
        [true, r_off, true, s_off, true, s_off, true]
    }

    /// Full matrices (R, Σ, W, T, T̃, v, ṽ) of the ansatz.
    pub fn matrices(&self) -> AnsatzMatrices {
        let (k, m) = (self.k, self.m);
        let pick = |same: bool, d: f64, o: f64| if same { d } else { o };
        let r = DMatrix::from_fn(k, m, |a, b| pick(same_class(a, b, m), self.big_r, self.r));
        let sigma = DMatrix::from_fn(k, k, |a, b| pick(same_class(a, b, m), self.big_s, self.s));
        let w = DMatrix::from_fn(k, k, |a, b| pick(same_class(a, b, m), self.big_w, self.w));
        let tc = self.teacher;
        let t = DMatrix::from_fn(m, m, |a, b| pick(a == b, tc.t_diag, tc.t_off));
        let t_tilde = DMatrix::from_fn(m, m, |a, b| pick(a == b, tc.tt_diag, tc.tt_off));
        let q = OrderParameterSet::assemble_q(&w, &sigma, &self.coefficients);
        AnsatzMatrices {
            q,
            r,
            sigma,
            w,
            t,
            t_tilde,
            v: DVector::from_element(k, self.v),
            v_tilde: DVector::from_element(m, 1.0),
        }
    }

    /// Constant-density flow state on the Marchenko–Pastur grid.
    pub fn expand(&self) -> Result<FlowState> {
        self.check()?;
        let grid = cached_grid(self.delta, self.nodes)?;
        let mats = self.matrices();
        let density = DensityState::constant(&(&mats.r / self.coefficients.b), &mats.sigma, grid.len());
        Ok(FlowState {
            time: 0.0,
            density,
            w: mats.w,
            v: mats.v,
            t: mats.t,
            t_tilde: mats.t_tilde,
            v_tilde: mats.v_tilde,
            coefficients: self.coefficients,
            delta: self.delta,
            eta: self.eta,
            student_activation: Activation::Erf,
            teacher_activation: Activation::Erf,
            grid,
        })
    }

    /// ε_g of the ansatz state.
    pub fn error(&self) -> Result<f64> {
        let m = self.matrices();
        generalisation_error(&m.q, &m.r, &m.t, &m.v, &m.v_tilde, Activation::Erf, Activation::Erf, None)
    }

    /// Project order parameters onto the ansatz by class averages, after
    /// relabelling students so that student k specialises to teacher k mod M
    /// and flipping signs so that every v_k ≥ 0.
    #[allow(clippy::too_many_arguments)]
    pub fn from_order_params(op: &OrderParameterSet, eta: f64, delta: f64, teacher: TeacherConstants, nodes: usize) -> Result<Self> {
        let (k, m) = op.r.shape();
        let mut st = Self::new(k, m, eta, delta, teacher);
        st.coefficients = op.coefficients;
        st.nodes = nodes;
        st.check()?;
        // Signs: v_k ≥ 0.
        let sign: Vec<f64> = op.v.iter().map(|&x| if x < 0.0 { -1.0 } else { 1.0 }).collect();
        // Greedy assignment of students to teacher slots by |v_k R_km|.
        let score = DMatrix::from_fn(k, m, |a, b| (op.v[a] * op.r[(a, b)]).abs());
        let mut order = vec![usize::MAX; k];
        let mut used = vec![false; k];
        for slot in 0..k {
            let target = slot % m;
            let best = (0..k).filter(|&a| !used[a]).max_by(|&a, &b| score[(a, target)].total_cmp(&score[(b, target)]));
            let a = best.expect("student available");
            used[a] = true;
            order[slot] = a;
        }
        let mut acc = [[0.0, 0.0]; 3];
        let mut cnt = [[0usize; 2]; 3];
        let mut r_acc = [0.0, 0.0];
        let mut r_cnt = [0usize; 2];
        let mut v_acc = 0.0;
        for (slot, &a) in order.iter().enumerate() {
            v_acc += op.v[a].abs();
            for b in 0..m {
                let c = usize::from(!same_class(slot, b, m));
                r_acc[c] += sign[a] * op.r[(a, b)];
                r_cnt[c] += 1;
            }
            for (slot2, &a2) in order.iter().enumerate() {
                let c = usize::from(!same_class(slot, slot2, m));
                let sg = sign[a] * sign[a2];
                acc[0][c] += sg * op.sigma[(a, a2)];
                acc[1][c] += sg * op.w[(a, a2)];
                cnt[0][c] += 1;
                cnt[1][c] += 1;
            }
        }
        let avg = |s: f64, n: usize, fallback: f64| if n > 0 { s / n as f64 } else { fallback };
        st.big_r = avg(r_acc[0], r_cnt[0], 0.0);
        st.r = avg(r_acc[1], r_cnt[1], st.big_r);
        st.big_s = avg(acc[0][0], cnt[0][0], 0.0);
        st.s = avg(acc[0][1], cnt[0][1], st.big_s);
        st.big_w = avg(acc[1][0], cnt[1][0], 0.0);
        st.w = avg(acc[1][1], cnt[1][1], st.big_w);
        st.v = v_acc / k as f64;
        Ok(st)
    }
}

thread_local! {
    static GRID: std::cell::RefCell<Option<(u64, usize, SpectralGrid)>> = const { std::cell::RefCell::new(None) };
}

/// The Marchenko–Pastur grid, rebuilt only when δ or the node count change.
fn cached_grid(delta: f64, nodes: usize) -> Result<SpectralGrid> {
    GRID.with(|cell| {
        let mut slot = cell.borrow_mut();
        if let Some((d, n, g)) = slot.as_ref() {
            if *d == delta.to_bits() && *n == nodes {
                return Ok(g.clone());
            }
        }
        let g = make_grid(GridMode::MarchenkoPastur { delta }, nodes)?;
        *slot = Some((delta.to_bits(), nodes, g.clone()));
        Ok(g)
    })
}

/// Full matrices of an ansatz state.
#[derive(Debug, Clone)]
pub struct AnsatzMatrices {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub t_tilde: DMatrix<f64>,
    pub v: DVector<f64>,
    pub v_tilde: DVector<f64>,
}

/// Class-resolved time derivatives of the expanded state.
#[derive(Debug, Clone)]
pub struct ProjectedFlow {
    pub derivative: ReducedDerivative,
    /// Largest deviation of any full-matrix derivative from its class mean.
    pub spread: f64,
}

/// Apply the full equations of motion to the expanded ansatz and average
/// each derivative over its symmetry class.
pub fn project_full_rhs(state: &ReducedState) -> Result<ProjectedFlow> {
    let flow = state.expand()?;
    let d = eom_rhs(&flow)?;
    let (k, m) = (state.k, state.m);
    let b = state.coefficients.b;
    let mut dr = DMatrix::<f64>::zeros(k, m);
    let mut ds = DMatrix::<f64>::zeros(k, k);
    for (i, &u) in flow.grid.weights.iter().enumerate() {
        for a in 0..k {
            for c in 0..m {
                dr[(a, c)] += b * u * d.dr[(i * k + a) * m + c];
            }
            for c in 0..k {
                ds[(a, c)] += u * d.dsigma[(i * k + a) * k + c];
            }
        }
    }
    let mut sums = [[0.0; 2]; 3];
    let mut counts = [[0usize; 2]; 3];
    for a in 0..k {
        for c in 0..m {
            let cl = usize::from(!same_class(a, c, m));
            sums[0][cl] += dr[(a, c)];
            counts[0][cl] += 1;
        }
        for c in 0..k {
            let cl = usize::from(!same_class(a, c, m));
            sums[1][cl] += ds[(a, c)];
            sums[2][cl] += d.dw[(a, c)];
            counts[1][cl] += 1;
            counts[2][cl] += 1;
        }
    }
    let mean = |g: usize, cl: usize| if counts[g][cl] > 0 { sums[g][cl] / counts[g][cl] as f64 } else { 0.0 };
    let derivative = ReducedDerivative {
        big_r: mean(0, 0),
        r: mean(0, 1),
        big_s: mean(1, 0),
        s: mean(1, 1),
        big_w: mean(2, 0),
        w: mean(2, 1),
        v: d.dv.mean(),
    };
    let mut spread = 0.0_f64;
    for a in 0..k {
        for c in 0..m {
            let cl = usize::from(!same_class(a, c, m));
            spread = spread.max((dr[(a, c)] - mean(0, cl)).abs());
        }
        for c in 0..k {
            let cl = usize::from(!same_class(a, c, m));
            spread = spread.max((ds[(a, c)] - mean(1, cl)).abs());
            spread = spread.max((d.dw[(a, c)] - mean(2, cl)).abs());
        }
        spread = spread.max((d.dv[a] - derivative.v).abs());
    }
    Ok(ProjectedFlow { derivative, spread })
}

/// (Ṙ, ṙ, Ṡ, ṡ, Ẇ, ẇ, v̇) of the reduced system.
pub fn reduced_rhs(state: &ReducedState) -> Result<ReducedDerivative> {
    Ok(project_full_rhs(state)?.derivative)
}

/// Kind of fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointClass {
    Unspecialised,
    Specialised,
}

impl FixedPointClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Unspecialised => "unspecialised",
            Self::Specialised => "specialised",
        }
    }
}

/// A converged fixed point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPoint {
    pub state: ReducedState,
    pub class: FixedPointClass,
    pub residual: f64,
    pub eps: f64,
}

/// Outcome of a multi-start search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointSearch {
    pub points: Vec<FixedPoint>,
    pub starts: usize,
    pub converged_starts: usize,
}

impl FixedPointSearch {
    /// Specialised fixed point of lowest ε_g.
    pub fn best_specialised(&self) -> Option<&FixedPoint> {
        self.points
            .iter()
            .filter(|p| p.class == FixedPointClass::Specialised)
            .min_by(|a, b| a.eps.total_cmp(&b.eps))
    }

    pub fn unspecialised(&self) -> impl Iterator<Item = &FixedPoint> {
        self.points.iter().filter(|p| p.class == FixedPointClass::Unspecialised)
    }
}

fn classify(st: &ReducedState) -> FixedPointClass {
    if (st.big_r - st.r).abs() < CLASS_TOL && (st.big_s - st.s).abs() < CLASS_TOL && (st.big_w - st.w).abs() < CLASS_TOL
    {
        FixedPointClass::Unspecialised
    } else {
        FixedPointClass::Specialised
    }
}

/// Residual vector with inactive components pinned to their diagonal partner.
fn residual(base: &ReducedState, x: &Vec7, active: &[bool; DIM]) -> Result<Vec7> {
    let st = base.with_array(&pinned(x, active));
    let q = st.matrices();
    check_psd(&q.q)?;
    let d = reduced_rhs(&st)?.to_array();
    Ok(Vec7::from_fn(|i, _| if active[i] { d[i] } else { 0.0 }))
}

fn pinned(x: &Vec7, active: &[bool; DIM]) -> [f64; DIM] {
    let mut a: [f64; DIM] = std::array::from_fn(|i| x[i]);
    for (off, diag) in [(1, 0), (3, 2), (5, 4)] {
        if !active[off] {
            a[off] = a[diag];
        }
    }
    a
}

fn newton(base: &ReducedState, mut x: Vec7, active: &[bool; DIM]) -> Option<(Vec7, f64)> {
    let mut f = residual(base, &x, active).ok()?;
    for _ in 0..100 {
        let norm = f.amax();
        if norm < 1e-12 {
            break;
        }
        let mut jac = nalgebra::SMatrix::<f64, DIM, DIM>::zeros();
        for j in 0..DIM {
            if !active[j] {
                jac[(j, j)] = 1.0;
                continue;
            }
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fp = residual(base, &xp, active).ok()?;
            let fm = residual(base, &xm, active).ok()?;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let svd = jac.svd(true, true);
        let dx = svd.solve(&(-f), 1e-12 * svd.singular_values.max()).ok()?;
        let mut lam = 1.0;
        let mut accepted = false;
        while lam > 1e-4 {
            let xn = x + dx * lam;
            if let Ok(fnew) = residual(base, &xn, active) {
                if fnew.amax() < (1.0 - 1e-4 * lam) * norm {
                    x = xn;
                    f = fnew;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = f.amax();
    (res < RESIDUAL_TOL).then_some((x, res))
}

/// Long-time Euler relaxation of the reduced flow.
fn relax(base: &ReducedState, mut x: Vec7, active: &[bool; DIM], t_end: f64) -> Option<Vec7> {
    let dt = 0.5 * crate::odeflow::default_dt(base.eta, base.delta);
    let steps = (t_end / dt).ceil() as usize;
    for _ in 0..steps {
        let f = residual(base, &x, active).ok()?;
        x += f * dt;
        if f.amax() < 1e-10 {
            break;
        }
    }
    Some(x)
}

fn random_start(base: &ReducedState, seed: u64, index: u64, symmetric: bool) -> Option<Vec7> {
    let mut rng = rng::stream(seed, Purpose::FixedPointStarts, index);
    for _ in 0..200 {
        let big_r = rng.random_range(-1.0..1.0);
        let big_s = rng.random_range(0.0..2.0);
        let big_w = rng.random_range(0.0..2.0);
        let v = rng.random_range(0.0..3.0);
        let (r, s, w) = if symmetric {
            (big_r, big_s, big_w)
        } else {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0) * big_s,
                rng.random_range(-1.0..1.0) * big_w,
            )
        };
        let x = Vec7::from_column_slice(&[big_r, r, big_s, s, big_w, w, v]);
        let st = base.with_array(&std::array::from_fn(|i| x[i]));
        let mats = st.matrices();
        let (k, m) = mats.r.shape();
        let mut c = DMatrix::zeros(k + m, k + m);
        c.view_mut((0, 0), (k, k)).copy_from(&mats.q);
        c.view_mut((0, k), (k, m)).copy_from(&mats.r);
        c.view_mut((k, 0), (m, k)).copy_from(&mats.r.transpose());
        c.view_mut((k, k), (m, m)).copy_from(&mats.t);
        if check_psd(&c).is_ok() && check_psd(&mats.w).is_ok() && check_psd(&mats.sigma).is_ok() {
            return Some(x);
        }
    }
    None
}

/// Canonical representative: v ≥ 0 (the flow is invariant under
/// v, R, r → −v, −R, −r) and, for M = 2, |R| ≥ |r| (relabelling the two
/// teacher nodes swaps R and r).
fn canonical(mut x: [f64; DIM], m: usize) -> [f64; DIM] {
    if x[6] < 0.0 {
        x = [-x[0], -x[1], x[2], x[3], x[4], x[5], -x[6]];
    }
    if m == 2 && x[1].abs() > x[0].abs() {
        x.swap(0, 1);
    }
    x
}

/// Multi-start fixed-point search. Even-numbered starts lie in the symmetric
/// subspace R = r, S = s, W = w; odd ones are unconstrained.
pub fn find_fixed_points(base: &ReducedState, n_starts: usize, seed: u64) -> Result<FixedPointSearch> {
    base.check()?;
    if base.eta == 0.0 {
        return Err(HmlError::InvalidArgument("eta = 0 makes every state a fixed point".into()));
    }
    if n_starts == 0 {
        return Err(HmlError::InvalidArgument("need at least one start".into()));
    }
    let active = base.active();
    // The symmetric subspace is invariant, so symmetric starts are solved
    // within it (off-diagonal values pinned to the diagonal ones).
    let symmetric = [true, false, true, false, true, false, true];
    let found: Vec<Option<[f64; DIM]>> = (0..n_starts)
        .into_par_iter()
        .map(|j| {
            let mask = if j % 2 == 0 { &symmetric } else { &active };
            let x0 = random_start(base, seed, j as u64, j % 2 == 0)?;
            let (x, _) = newton(base, x0, mask).or_else(|| {
                let x1 = relax(base, x0, mask, 200.0)?;
                newton(base, x1, mask)
            })?;
            Some(pinned(&x, mask))
        })
        .collect();
    let converged_starts = found.iter().filter(|f| f.is_some()).count();
    let mut pts: Vec<[f64; DIM]> = found.into_iter().flatten().map(|x| canonical(x, base.m)).collect();
    pts.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut unique: Vec<[f64; DIM]> = Vec::new();
    for x in pts {
        let dup = unique.iter().any(|u| u.iter().zip(&x).all(|(a, b)| (a - b).abs() < DEDUP_TOL));
        if !dup {
            unique.push(x);
        }
    }
    let mut points = Vec::with_capacity(unique.len());
    for x in unique {
        let state = base.with_array(&x);
        let residual = reduced_rhs(&state)?.max_abs();
        if residual >= RESIDUAL_TOL {
            continue;
        }
        let eps = state.error()?;
        points.push(FixedPoint { class: classify(&state), state, residual, eps });
    }
    Ok(FixedPointSearch { points, starts: n_starts, converged_starts })
}

/// Which parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Delta,
    Eta,
    /// Z = K/M at fixed M.
    Width,
}

impl SweepKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "delta" => Ok(Self::Delta),
            "eta" => Ok(Self::Eta),
            "width" => Ok(Self::Width),
            other => Err(HmlError::InvalidArgument(format!("unknown sweep kind '{other}' (delta, eta, width)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Delta => "delta",
            Self::Eta => "eta",
            Self::Width => "width",
        }
    }
}

/// One row of an asymptotic-error curve; `eps_star` is `None` when no
/// specialised fixed point was found.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub value: f64,
    pub eps_star: Option<f64>,
    pub class: Option<FixedPointClass>,
    pub residual: Option<f64>,
    pub fixed_point: Option<ReducedState>,
}

/// ε_g* at the specialised fixed point for every sweep value.
pub fn asymptotic_error_curve(
    kind: SweepKind,
    values: &[f64],
    base: &ReducedState,
    n_starts: usize,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut st = base.clone();
        match kind {
            SweepKind::Delta => st.delta = value,
            SweepKind::Eta => st.eta = value,
            SweepKind::Width => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(HmlError::InvalidArgument(format!("width ratio must be a positive integer (got {value})")));
                }
                st.k = value as usize * st.m;
            }
        }
        let row = match find_fixed_points(&st, n_starts, seed) {
            Ok(search) => match search.best_specialised() {
                Some(fp) => CurveRow {
                    value,
                    eps_star: Some(fp.eps),
                    class: Some(fp.class),
                    residual: Some(fp.residual),
                    fixed_point: Some(fp.state.clone()),
                },
                None => CurveRow { value, eps_star: None, class: None, residual: None, fixed_point: None },
            },
            Err(e) if e.is_numerical() => CurveRow { value, eps_star: None, class: None, residual: None, fixed_point: None },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ReducedState {
        let mut st = ReducedState::new(2, 2, 0.2, 0.01, TeacherConstants::identity());
        st.nodes = 64;
        st
    }

    fn sample_state() -> ReducedState {
        let mut st = base();
        st.big_r = 0.5;
        st.r = 0.1;
        st.big_s = 0.9;
        st.s = 0.2;
        st.big_w = 1.1;
        st.w = 0.15;
        st.v = 1.2;
        st
    }

    #[test]
    fn zero_learning_rate_gives_zero_derivatives() {
        let mut st = sample_state();
        st.eta = 0.0;
        assert_eq!(reduced_rhs(&st).unwrap().max_abs(), 0.0);
        assert!(find_fixed_points(&st, 4, 1).is_err());
    }

    #[test]
    fn ansatz_is_invariant_under_full_flow() {
        for (k, m) in [(2, 2), (3, 3), (4, 2), (6, 2)] {
            let mut st = sample_state();
            st.k = k;
            st.m = m;
            let p = project_full_rhs(&st).unwrap();
            assert!(p.spread < 1e-12, "K={k} M={m}: spread {}", p.spread);
        }
    }

    #[test]
    fn projection_roundtrip() {
        let st = sample_state();
        let m = st.matrices();
        let op = OrderParameterSet {
            q: m.q.clone(),
            r: m.r.clone(),
            t: m.t.clone(),
            w: m.w.clone(),
            sigma: m.sigma.clone(),
            t_tilde: m.t_tilde.clone(),
            v: m.v.clone(),
            v_tilde: m.v_tilde.clone(),
            mean: DVector::zeros(2),
            coefficients: st.coefficients,
        };
        let back = ReducedState::from_order_params(&op, st.eta, st.delta, st.teacher, st.nodes).unwrap();
        assert!(back.to_array().iter().zip(st.to_array()).all(|(a, b)| (a - b).abs() < 1e-14));
        // Swapped specialisation and a negative second layer map to the same state.
        let mut swapped = op.clone();
        swapped.r.swap_columns(0, 1);
        swapped.v[1] = -swapped.v[1];
        for c in 0..2 {
            swapped.r[(1, c)] = -swapped.r[(1, c)];
        }
        swapped.sigma[(0, 1)] = -swapped.sigma[(0, 1)];
        swapped.sigma[(1, 0)] = -swapped.sigma[(1, 0)];
        swapped.w[(0, 1)] = -swapped.w[(0, 1)];
        swapped.w[(1, 0)] = -swapped.w[(1, 0)];
        let back = ReducedState::from_order_params(&swapped, st.eta, st.delta, st.teacher, st.nodes).unwrap();
        assert!(back.to_array().iter().zip(st.to_array()).all(|(a, b)| (a - b).abs() < 1e-14), "{back:?}");
    }

    #[test]
    fn finds_both_kinds_of_fixed_points() {
        let search = find_fixed_points(&base(), 24, 7).unwrap();
        assert!(search.points.iter().all(|p| p.residual < RESIDUAL_TOL));
        let unspec: Vec<_> = search.unspecialised().filter(|p| p.state.v.abs() > 1e-3).collect();
        let spec = search.best_specialised().expect("specialised fixed point");
        assert!(!unspec.is_empty(), "{:?}", search.points);
        for u in unspec {
            assert!(spec.eps < u.eps, "specialised {} vs unspecialised {}", spec.eps, u.eps);
        }
    }

    #[test]
    fn converged_full_flow_is_near_a_fixed_point() {
        use crate::datagen::{make_gaussian_features, NetworkParams, SecondLayer};
        use crate::odeflow::{default_dt, integrate_to, state_error};
        use crate::orderparams::omega_spectrum;
        let (n, d) = (4000, 40);
        let feats = make_gaussian_features(n, d, 1).unwrap();
        let spec = omega_spectrum(&feats).unwrap();
        let teacher =
            NetworkParams::random_teacher(2, d, Activation::Erf, SecondLayer::Constant(1.0), true, 1).unwrap();
        let student = NetworkParams::random_student(2, n, 1e-3, Activation::Erf, 1);
        let grid = make_grid(GridMode::MarchenkoPastur { delta: 0.01 }, 200).unwrap();
        let mut flow =
            FlowState::from_weights(&student, &teacher, &feats, &spec, grid, &FoldingCoefficients::sign(), 0.2).unwrap();
        flow.t_tilde = DMatrix::identity(2, 2);
        let end = integrate_to(&flow, default_dt(0.2, 0.01), 1000.0).unwrap();
        let op = end.order_params();
        let mut st = ReducedState::from_order_params(&op, 0.2, 0.01, TeacherConstants::identity(), 200).unwrap();
        st.nodes = 200;
        let rhs = reduced_rhs(&st).unwrap();
        assert!(rhs.max_abs() < 1e-3, "{rhs:?} at {st:?}");
        let eps_full = state_error(&end).unwrap();
        let eps_red = st.error().unwrap();
        assert!((eps_full - eps_red).abs() < 0.05 * eps_full, "{eps_full} vs {eps_red}");
    }

    #[test]
    fn rejects_incompatible_widths() {
        let mut st = base();
        st.k = 3;
        assert!(reduced_rhs(&st).is_err());
    }
}
