//! Generalisation error from order parameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::datagen::Activation;
use crate::error::{HmlError, Result};
use crate::gint::{i2_erf, pivoted_cholesky};
use crate::rng::{self, Purpose};

/// Monte Carlo settings for activation pairs without a closed form.
#[derive(Debug, Clone, Copy)]
pub struct McFallback {
    pub samples: usize,
    pub seed: u64,
}

/// ε_g = ½ E[(Σ_k v_k g(λ_k) − Σ_n ṽ_n g̃(ν_n))²] for zero-mean Gaussian fields
/// with covariances Q (student), R (cross) and T (teacher).
pub fn generalisation_error(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    t: &DMatrix<f64>,
    v: &DVector<f64>,
    vt: &DVector<f64>,
    student: Activation,
    teacher: Activation,
    mc: Option<McFallback>,
) -> Result<f64> {
    let (k, m) = r.shape();
    if q.shape() != (k, k) || t.shape() != (m, m) || v.len() != k || vt.len() != m {
        return Err(HmlError::Dimension("inconsistent order-parameter shapes".into()));
    }
    match (student, teacher) {
        (Activation::Erf, Activation::Erf) => {
            let mut e = 0.0;
            for a in 0..k {
                for b in 0..k {
                    e += v[a] * v[b] * i2_erf(q[(a, a)], q[(b, b)], q[(a, b)])?;
                }
                for n in 0..m {
                    e -= 2.0 * v[a] * vt[n] * i2_erf(q[(a, a)], t[(n, n)], r[(a, n)])?;
                }
            }
            for n in 0..m {
                for p in 0..m {
                    e += vt[n] * vt[p] * i2_erf(t[(n, n)], t[(p, p)], t[(n, p)])?;
                }
            }
            Ok(0.5 * e)
        }
        (Activation::Erf, Activation::Relu) => {
            let mut e = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let arg = q[(a, b)] / ((1.0 + q[(a, a)]) * (1.0 + q[(b, b)])).sqrt();
                    e += v[a] * v[b] * arg.clamp(-1.0, 1.0).asin() / PI;
                }
                for n in 0..m {
                    e -= v[a] * vt[n] * r[(a, n)] / ((2.0 * PI).sqrt() * (1.0 + q[(a, a)]).sqrt());
                }
            }
            for n in 0..m {
                for p in 0..m {
                    let tnm = t[(n, p)];
                    let s = (t[(p, p)] * t[(n, n)] - tnm * tnm).max(0.0).sqrt();
                    e += vt[n] * vt[p] * (2.0 * s + tnm * (PI + 2.0 * (tnm / s).atan())) / (8.0 * PI);
                }
            }
            Ok(e)
        }
        _ => {
            let mc = mc.ok_or_else(|| {
                HmlError::Unsupported(format!(
                    "no closed form for {} student with {} teacher; enable the Monte Carlo fallback",
                    student.name(),
                    teacher.name()
                ))
            })?;
            Ok(mc_error(q, r, t, v, vt, student, teacher, mc)?.0)
        }
    }
}

/// Monte Carlo ε_g and its standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_error(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    t: &DMatrix<f64>,
    v: &DVector<f64>,
    vt: &DVector<f64>,
    student: Activation,
    teacher: Activation,
    mc: McFallback,
) -> Result<(f64, f64)> {
    let (k, m) = r.shape();
    let mut c = DMatrix::zeros(k + m, k + m);
    c.view_mut((0, 0), (k, k)).copy_from(q);
    c.view_mut((0, k), (k, m)).copy_from(r);
    c.view_mut((k, 0), (m, k)).copy_from(&r.transpose());
    c.view_mut((k, k), (m, m)).copy_from(t);
    let l = pivoted_cholesky(&c)?;
    let dim = k + m;
    let mut rng = rng::stream(mc.seed, Purpose::MonteCarlo, u64::MAX - 1);
    let mut z = vec![0.0; dim];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..mc.samples {
        rng::fill_normal(&mut rng, &mut z);
        let x = &l * DVector::from_column_slice(&z);
        let mut delta = 0.0;
        for a in 0..k {
            delta += v[a] * student.g(x[a]);
        }
        for n in 0..m {
            delta -= vt[n] * teacher.g(x[k + n]);
        }
        let e = 0.5 * delta * delta;
        s1 += e;
        s2 += e * e;
    }
    let nf = mc.samples as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn trivial_cases() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::zeros(2, 2);
        let z = DVector::zeros(2);
        let e = generalisation_error(&q, &r, &q, &z, &z, Activation::Erf, Activation::Erf, None).unwrap();
        assert_eq!(e, 0.0);
        let t = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        let v = DVector::from_vec(vec![0.7, -1.1]);
        let e = generalisation_error(&t, &t, &t, &v, &v, Activation::Erf, Activation::Erf, None).unwrap();
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn relu_teacher_example() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::zeros(2, 2);
        let t = DMatrix::identity(2, 2);
        let v = DVector::zeros(2);
        let vt = DVector::from_element(2, 1.0);
        let e = generalisation_error(&q, &r, &t, &v, &vt, Activation::Erf, Activation::Relu, None).unwrap();
        assert_abs_diff_eq!(e, 0.5 + 1.0 / (2.0 * PI), epsilon = 1e-14);
        // Cross-check by sampling teacher outputs.
        let (mc, se) = mc_error(&q, &r, &t, &v, &vt, Activation::Erf, Activation::Relu, McFallback { samples: 400_000, seed: 3 })
            .unwrap();
        assert!((mc - e).abs() < 5.0 * se, "{mc} ± {se} vs {e}");
    }

    #[test]
    fn closed_forms_agree_with_sampling() {
        let q = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.3]);
        let r = DMatrix::from_row_slice(2, 1, &[0.4, -0.3]);
        let t = DMatrix::from_row_slice(1, 1, &[1.1]);
        let v = DVector::from_vec(vec![0.8, 0.5]);
        let vt = DVector::from_vec(vec![1.2]);
        for teacher in [Activation::Erf, Activation::Relu] {
            let e = generalisation_error(&q, &r, &t, &v, &vt, Activation::Erf, teacher, None).unwrap();
            let (mc, se) =
                mc_error(&q, &r, &t, &v, &vt, Activation::Erf, teacher, McFallback { samples: 400_000, seed: 5 }).unwrap();
            assert!((mc - e).abs() < 5.0 * se, "{teacher:?}: {mc} ± {se} vs {e}");
        }
        let err = generalisation_error(&q, &r, &t, &v, &vt, Activation::Relu, Activation::Relu, None);
        assert!(err.is_err());
        let ok = generalisation_error(
            &q,
            &r,
            &t,
            &v,
            &vt,
            Activation::Relu,
            Activation::Relu,
            Some(McFallback { samples: 10_000, seed: 1 }),
        )
        .unwrap();
        assert!(ok > 0.0);
    }
}
