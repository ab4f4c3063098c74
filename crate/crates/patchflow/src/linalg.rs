//! Small dense-free iterative solvers used by the projection, the implicit
//! momentum step, the eigenvalue iteration and the saddle-point solver.
//!
//! Operators are closures `apply(x, out)`; preconditioning is diagonal.

use thiserror::Error;

#[derive(Debug, Error)]
#[error("{method} did not converge after {iters} iterations (relative residual {residual:.3e})")]
pub struct SolveFailure {
    pub method: &'static str,
    pub iters: usize,
    pub residual: f64,
}

/// Reusable buffers for CG.
pub struct CgScratch {
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
}

impl CgScratch {
    pub fn new(n: usize) -> Self {
        Self { r: vec![0.0; n], z: vec![0.0; n], p: vec![0.0; n], ap: vec![0.0; n] }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for (x, y) in a.iter().zip(b) {
        let v = x * y - c;
        let t = sum + v;
        c = (t - sum) - v;
        sum = t;
    }
    sum
}

/// Preconditioned conjugate gradient for SPD operators. `x` holds the initial
/// guess on entry and the solution on exit. Converges on the relative
/// residual ||b - Ax|| / ||b||; a zero right-hand side returns x = 0.
pub fn cg(
    apply: &dyn Fn(&[f64], &mut [f64]),
    inv_diag: Option<&[f64]>,
    b: &[f64],
    x: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
    s: &mut CgScratch,
) -> Result<usize, SolveFailure> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    apply(x, &mut s.ap);
    for k in 0..n {
        s.r[k] = b[k] - s.ap[k];
    }
    let precon = |r: &[f64], z: &mut [f64]| match inv_diag {
        Some(d) => {
            for k in 0..r.len() {
                z[k] = r[k] * d[k];
            }
        }
        None => z.copy_from_slice(r),
    };
    precon(&s.r, &mut s.z);
    s.p.copy_from_slice(&s.z);
    let mut rz = dot(&s.r, &s.z);
    let mut res = dot(&s.r, &s.r).sqrt();
    if res / bnorm <= tol {
        return Ok(0);
    }
    for it in 1..=max_iter {
        apply(&s.p, &mut s.ap);
        let pap = dot(&s.p, &s.ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(SolveFailure { method: "cg", iters: it, residual: res / bnorm });
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * s.p[k];
            s.r[k] -= alpha * s.ap[k];
        }
        res = dot(&s.r, &s.r).sqrt();
        if res / bnorm <= tol {
            return Ok(it);
        }
        precon(&s.r, &mut s.z);
        let rz_new = dot(&s.r, &s.z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            s.p[k] = s.z[k] + beta * s.p[k];
        }
    }
    Err(SolveFailure { method: "cg", iters: max_iter, residual: res / bnorm })
}

/// Reusable buffers for BiCGStab.
pub struct BiCgScratch {
    r: Vec<f64>,
    r0: Vec<f64>,
    p: Vec<f64>,
    v: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    ph: Vec<f64>,
    sh: Vec<f64>,
}

impl BiCgScratch {
    pub fn new(n: usize) -> Self {
        Self {
            r: vec![0.0; n],
            r0: vec![0.0; n],
            p: vec![0.0; n],
            v: vec![0.0; n],
            s: vec![0.0; n],
            t: vec![0.0; n],
            ph: vec![0.0; n],
            sh: vec![0.0; n],
        }
    }
}

/// BiCGStab with diagonal preconditioning, for the positive-definite but
/// nonsymmetric momentum systems (SPD plus a skew convection part).
pub fn bicgstab(
    apply: &dyn Fn(&[f64], &mut [f64]),
    inv_diag: Option<&[f64]>,
    b: &[f64],
    x: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
    w: &mut BiCgScratch,
) -> Result<usize, SolveFailure> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let precon = |r: &[f64], z: &mut [f64]| match inv_diag {
        Some(d) => {
            for k in 0..r.len() {
                z[k] = r[k] * d[k];
            }
        }
        None => z.copy_from_slice(r),
    };
    apply(x, &mut w.v);
    for k in 0..n {
        w.r[k] = b[k] - w.v[k];
    }
    w.r0.copy_from_slice(&w.r);
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    w.p.iter_mut().for_each(|v| *v = 0.0);
    w.v.iter_mut().for_each(|v| *v = 0.0);
    let mut res = dot(&w.r, &w.r).sqrt();
    if res / bnorm <= tol {
        return Ok(0);
    }
    for it in 1..=max_iter {
        let rho_new = dot(&w.r0, &w.r);
        if rho_new.abs() < 1e-300 {
            // restart with the current residual as the shadow vector
            w.r0.copy_from_slice(&w.r);
            rho = dot(&w.r0, &w.r);
            w.p.copy_from_slice(&w.r);
            w.v.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for k in 0..n {
                w.p[k] = w.r[k] + beta * (w.p[k] - omega * w.v[k]);
            }
        }
        precon(&w.p, &mut w.ph);
        apply(&w.ph, &mut w.v);
        let r0v = dot(&w.r0, &w.v);
        if r0v.abs() < 1e-300 {
            return Err(SolveFailure { method: "bicgstab", iters: it, residual: res / bnorm });
        }
        alpha = rho / r0v;
        for k in 0..n {
            w.s[k] = w.r[k] - alpha * w.v[k];
        }
        let snorm = dot(&w.s, &w.s).sqrt();
        if snorm / bnorm <= tol {
            for k in 0..n {
                x[k] += alpha * w.ph[k];
            }
            return Ok(it);
        }
        precon(&w.s, &mut w.sh);
        apply(&w.sh, &mut w.t);
        let tt = dot(&w.t, &w.t);
        if tt == 0.0 {
            return Err(SolveFailure { method: "bicgstab", iters: it, residual: snorm / bnorm });
        }
        omega = dot(&w.t, &w.s) / tt;
        for k in 0..n {
            x[k] += alpha * w.ph[k] + omega * w.sh[k];
            w.r[k] = w.s[k] - omega * w.t[k];
        }
        res = dot(&w.r, &w.r).sqrt();
        if res / bnorm <= tol {
            return Ok(it);
        }
        if omega.abs() < 1e-300 {
            return Err(SolveFailure { method: "bicgstab", iters: it, residual: res / bnorm });
        }
    }
    Err(SolveFailure { method: "bicgstab", iters: max_iter, residual: res / bnorm })
}
