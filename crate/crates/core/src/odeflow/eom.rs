//! Equations of motion for r(ρ), σ(ρ), W and v.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{Activation, FeatureMatrix, FoldingCoefficients, NetworkParams};
use crate::error::{HmlError, Result};
use crate::gint::{check_psd, i2_erf, i3_erf_raw, i4_erf_raw};
use crate::orderparams::{bin_densities, measure_order_params, DensityState, OrderParameterSet, Spectrum};

use super::grid::SpectralGrid;

/// Tolerance below which the folding mean a counts as zero.
const A_TOL: f64 = 1e-12;

/// State of the order-parameter flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    /// Time in units of samples/N.
    pub time: f64,
    pub density: DensityState,
    pub w: DMatrix<f64>,
    pub v: DVector<f64>,
    pub t: DMatrix<f64>,
    pub t_tilde: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    pub coefficients: FoldingCoefficients,
    pub delta: f64,
    pub eta: f64,
    pub student_activation: Activation,
    pub teacher_activation: Activation,
    pub grid: SpectralGrid,
}

/// Time derivatives matching the layout of [`FlowState`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative {
    pub dr: Vec<f64>,
    pub dsigma: Vec<f64>,
    pub dw: DMatrix<f64>,
    pub dv: DVector<f64>,
}

impl FlowState {
    /// Initial state measured from concrete weights: densities are binned on
    /// `grid`, W, v, T, T̃ and ṽ are taken from the order parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn from_weights(
        student: &NetworkParams,
        teacher: &NetworkParams,
        features: &FeatureMatrix,
        spectrum: &Spectrum,
        grid: SpectralGrid,
        coefficients: &FoldingCoefficients,
        eta: f64,
    ) -> Result<Self> {
        let op = measure_order_params(student, teacher, features, spectrum, coefficients)?;
        let density = bin_densities(student, teacher, features, spectrum, &grid)?;
        let st = Self {
            time: 0.0,
            density,
            w: op.w,
            v: op.v,
            t: op.t,
            t_tilde: op.t_tilde,
            v_tilde: op.v_tilde,
            coefficients: *coefficients,
            delta: features.delta(),
            eta,
            student_activation: student.activation,
            teacher_activation: teacher.activation,
            grid,
        };
        st.check_supported()?;
        Ok(st)
    }

    /// State with ρ-independent densities r = R/b and σ = Σ taken from `op`.
    pub fn from_order_params(
        op: &OrderParameterSet,
        grid: SpectralGrid,
        delta: f64,
        eta: f64,
        student_activation: Activation,
        teacher_activation: Activation,
    ) -> Result<Self> {
        if op.coefficients.b == 0.0 {
            return Err(HmlError::Unsupported("constant densities need a folding with b != 0".into()));
        }
        let density = DensityState::constant(&(&op.r / op.coefficients.b), &op.sigma, grid.len());
        let st = Self {
            time: 0.0,
            density,
            w: op.w.clone(),
            v: op.v.clone(),
            t: op.t.clone(),
            t_tilde: op.t_tilde.clone(),
            v_tilde: op.v_tilde.clone(),
            coefficients: op.coefficients,
            delta,
            eta,
            student_activation,
            teacher_activation,
            grid,
        };
        st.check_supported()?;
        Ok(st)
    }

    pub fn k(&self) -> usize {
        self.density.k
    }

    pub fn m(&self) -> usize {
        self.density.m
    }

    fn check_supported(&self) -> Result<()> {
        if self.coefficients.a.abs() > A_TOL {
            return Err(HmlError::Unsupported(format!(
                "the equations of motion are restricted to foldings with a = 0 (got a = {})",
                self.coefficients.a
            )));
        }
        if self.student_activation != Activation::Erf || self.teacher_activation != Activation::Erf {
            return Err(HmlError::Unsupported(format!(
                "the equations of motion need erf units (got {} student, {} teacher)",
                self.student_activation.name(),
                self.teacher_activation.name()
            )));
        }
        if self.density.nodes != self.grid.len() {
            return Err(HmlError::Dimension("density state and grid have different node counts".into()));
        }
        Ok(())
    }

    /// Apply `self += h · d`.
    pub fn advance(&mut self, d: &FlowDerivative, h: f64) {
        for (x, dx) in self.density.r.iter_mut().zip(&d.dr) {
            *x += h * dx;
        }
        for (x, dx) in self.density.sigma.iter_mut().zip(&d.dsigma) {
            *x += h * dx;
        }
        self.w += &d.dw * h;
        self.v += &d.dv * h;
        self.time += h;
    }

    /// The order parameters implied by the state.
    pub fn order_params(&self) -> OrderParameterSet {
        let (q, r, sigma) = assemble(self);
        OrderParameterSet {
            q,
            r,
            t: self.t.clone(),
            w: self.w.clone(),
            sigma,
            t_tilde: self.t_tilde.clone(),
            v: self.v.clone(),
            v_tilde: self.v_tilde.clone(),
            mean: DVector::zeros(self.k()),
            coefficients: self.coefficients,
        }
    }
}

/// (Q, R, Σ) with R = b⟨r⟩, Σ = ⟨σ⟩ and Q = (c − b²)W + b²Σ.
pub fn assemble(state: &FlowState) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (r_mean, sigma) = state.density.integrate(&state.grid);
    let r = r_mean * state.coefficients.b;
    let q = OrderParameterSet::assemble_q(&state.w, &sigma, &state.coefficients);
    (q, r, sigma)
}

/// Λ = (1+Q_kk)(1+Q_jj) − Q_kj² for the pair of fields (k, j).
fn lambda(qkk: f64, qjj: f64, qkj: f64) -> Result<f64> {
    let l = (1.0 + qkk) * (1.0 + qjj) - qkj * qkj;
    if !(l > 0.0) || !l.is_finite() {
        return Err(HmlError::DegenerateCovariance(format!("pair covariance with Lambda = {l:e}")));
    }
    Ok(l)
}

/// (Q_jj I3(k,k,j) − Q_kj I3(k,j,j)) / (Q_kk Q_jj − Q_kj²) in closed form.
///
/// For erf units the ratio simplifies to −(2/π) Q_kj / ((1+Q_kk)√Λ), which
/// stays finite when the denominator vanishes.
pub fn stein_diag(qkk: f64, qjj: f64, qkj: f64) -> Result<f64> {
    Ok(-2.0 / PI * qkj / ((1.0 + qkk) * lambda(qkk, qjj, qkj)?.sqrt()))
}

/// (Q_kk I3(k,j,j) − Q_kj I3(k,k,j)) / (Q_kk Q_jj − Q_kj²) = (2/π)/√Λ.
pub fn stein_cross(qkk: f64, qjj: f64, qkj: f64) -> Result<f64> {
    Ok(2.0 / PI / lambda(qkk, qjj, qkj)?.sqrt())
}

/// I3(k,k,k)/Q_kk = (2/π) / ((1+Q_kk)√(1+2Q_kk)).
pub fn stein_self(qkk: f64) -> Result<f64> {
    if !(qkk > -0.5) || !qkk.is_finite() {
        return Err(HmlError::DegenerateCovariance(format!("student variance {qkk:e}")));
    }
    Ok(2.0 / PI / ((1.0 + qkk) * (1.0 + 2.0 * qkk).sqrt()))
}

/// Joint covariance of (λ¹..λᴷ, ν¹..νᴹ).
fn field_covariance(q: &DMatrix<f64>, r: &DMatrix<f64>, t: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, m) = r.shape();
    let mut c = DMatrix::zeros(k + m, k + m);
    c.view_mut((0, 0), (k, k)).copy_from(q);
    c.view_mut((0, k), (k, m)).copy_from(r);
    c.view_mut((k, 0), (m, k)).copy_from(&r.transpose());
    c.view_mut((k, k), (m, m)).copy_from(t);
    c
}

fn i3(c: &DMatrix<f64>, a: usize, b: usize, e: usize) -> Result<f64> {
    let idx = [a, b, e];
    let p = std::array::from_fn(|i| std::array::from_fn(|j| c[(idx[i], idx[j])]));
    i3_erf_raw(&p)
}

fn i4(c: &DMatrix<f64>, a: usize, b: usize, e: usize, f: usize) -> Result<f64> {
    let idx = [a, b, e, f];
    let p = std::array::from_fn(|i| std::array::from_fn(|j| c[(idx[i], idx[j])]));
    i4_erf_raw(&p)
}

/// Node-independent coefficients of the equations of motion.
struct Coefficients {
    /// A_k + C_k − D_k.
    linear: Vec<f64>,
    /// B_kj.
    cross: DMatrix<f64>,
    /// E_kn.
    teacher: DMatrix<f64>,
    /// J_kl, the bracket of the η² terms.
    noise: DMatrix<f64>,
    dw: DMatrix<f64>,
    dv: DVector<f64>,
}

fn coefficients(state: &FlowState, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Coefficients> {
    let (k, m) = r.shape();
    let (v, vt, t) = (&state.v, &state.v_tilde, &state.t);
    let c = field_covariance(q, r, t);
    let mut linear = vec![0.0; k];
    let mut cross = DMatrix::zeros(k, k);
    let mut teacher = DMatrix::zeros(k, m);
    for a in 0..k {
        let mut lin = v[a] * stein_self(q[(a, a)])?;
        for j in 0..k {
            if j != a {
                lin += v[j] * stein_diag(q[(a, a)], q[(j, j)], q[(a, j)])?;
                cross[(a, j)] = stein_cross(q[(a, a)], q[(j, j)], q[(a, j)])?;
            }
        }
        for n in 0..m {
            lin -= vt[n] * stein_diag(q[(a, a)], t[(n, n)], r[(a, n)])?;
            teacher[(a, n)] = stein_cross(q[(a, a)], t[(n, n)], r[(a, n)])?;
        }
        linear[a] = lin;
    }

    // Output weights of every field: students v_j, teachers −ṽ_n.
    let weights: Vec<f64> = v.iter().copied().chain(vt.iter().map(|x| -x)).collect();
    let mut noise = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut s = 0.0;
            for (e, &we) in weights.iter().enumerate() {
                if we == 0.0 {
                    continue;
                }
                for (f, &wf) in weights.iter().enumerate() {
                    if wf != 0.0 {
                        s += we * wf * i4(&c, a, b, e, f)?;
                    }
                }
            }
            noise[(a, b)] = s;
            noise[(b, a)] = s;
        }
    }

    // h_kl = Σ_j v_j I3(k,l,j) − Σ_n ṽ_n I3(k,l,n).
    let mut h = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for (e, &we) in weights.iter().enumerate() {
                if we != 0.0 {
                    s += we * i3(&c, a, b, e)?;
                }
            }
            h[(a, b)] = s;
        }
    }
    let (eta, cc) = (state.eta, state.coefficients.c);
    let mut dw = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let x = -eta * v[a] * h[(a, b)] - eta * v[b] * h[(b, a)] + cc * eta * eta * v[a] * v[b] * noise[(a, b)];
            dw[(a, b)] = x;
            dw[(b, a)] = x;
        }
    }

    let mut dv = DVector::zeros(k);
    for a in 0..k {
        let mut s = 0.0;
        for n in 0..m {
            s += vt[n] * i2_erf(q[(a, a)], t[(n, n)], r[(a, n)])?;
        }
        for j in 0..k {
            s -= v[j] * i2_erf(q[(a, a)], q[(j, j)], q[(a, j)])?;
        }
        dv[a] = eta * s;
    }
    Ok(Coefficients { linear, cross, teacher, noise, dw, dv })
}

/// Time derivatives of every component of the state.
pub fn eom_rhs(state: &FlowState) -> Result<FlowDerivative> {
    state.check_supported()?;
    let (k, m) = (state.k(), state.m());
    let (q, r, _) = assemble(state);
    check_psd(&q)?;
    let co = coefficients(state, &q, &r)?;
    let FoldingCoefficients { b, c, .. } = state.coefficients;
    let (eta, delta) = (state.eta, state.delta);
    let (v, vt, tt) = (&state.v, &state.v_tilde, &state.t_tilde);
    let dens = &state.density;

    // Σ_n ṽ_n T̃_nm E_kn and the node-independent part of the r source.
    let mut source = DMatrix::zeros(k, m);
    for a in 0..k {
        for mm in 0..m {
            source[(a, mm)] = (0..m).map(|n| vt[n] * tt[(n, mm)] * co.teacher[(a, n)]).sum::<f64>();
        }
    }

    let mut dr = vec![0.0; dens.r.len()];
    let mut dsigma = vec![0.0; dens.sigma.len()];
    let mut x = DMatrix::zeros(k, k);
    for (i, &rho) in state.grid.nodes.iter().enumerate() {
        let d = (c - b * b) * delta + b * b * rho;
        for a in 0..k {
            for mm in 0..m {
                let mut s = d * co.linear[a] * dens.r_at(i, a, mm);
                for j in 0..k {
                    if j != a {
                        s += d * v[j] * co.cross[(a, j)] * dens.r_at(i, j, mm);
                    }
                }
                s -= b * rho * source[(a, mm)];
                dr[(i * k + a) * m + mm] = -eta / delta * v[a] * s;
            }
        }
        for a in 0..k {
            for l in 0..k {
                let mut s = d * co.linear[a] * dens.sigma_at(i, a, l);
                for j in 0..k {
                    if j != a {
                        s += d * v[j] * co.cross[(a, j)] * dens.sigma_at(i, j, l);
                    }
                }
                for n in 0..m {
                    s -= b * rho * vt[n] * co.teacher[(a, n)] * dens.r_at(i, l, n);
                }
                x[(a, l)] = v[a] * s;
            }
        }
        let noise_scale = (c - b * b) * rho + b * b * rho * rho / delta;
        for a in 0..k {
            for l in 0..k {
                dsigma[(i * k + a) * k + l] = -eta / delta * (x[(a, l)] + x[(l, a)])
                    + eta * eta * v[a] * v[l] * noise_scale * co.noise[(a, l)];
            }
        }
    }
    Ok(FlowDerivative { dr, dsigma, dw: co.dw, dv: co.dv })
}
