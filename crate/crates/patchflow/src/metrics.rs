//! Norms, functionals and decay-rate fitting for the stability
//! verification: kinetic energy, the W^{-1}_2 dual norm via a Neumann
//! Riesz solve, the vacuum-weighted X-norm, the intermediate-data
//! construction and the paired-run stability functionals.

use crate::grid::{kahan_sum, Grid, ScalarField, VectorField};
use crate::linalg::{self, CgScratch};
use crate::timeseries::TimeSeries;
use crate::transport::DensityField;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("negative-norm exponent must satisfy p > 1, got {p}")]
    BadExponent { p: f64 },
    #[error("Riesz solve failed: {0}")]
    Riesz(linalg::SolveFailure),
    #[error("viscosity must be positive, got {mu}")]
    BadViscosity { mu: f64 },
    #[error("channel '{channel}' not positive on the fit window")]
    NonPositiveChannel { channel: String },
    #[error("need at least {need} samples in the fit window, found {found}")]
    TooFewSamples { need: usize, found: usize },
    #[error(transparent)]
    TimeSeries(#[from] crate::timeseries::TimeSeriesError),
    #[error("grid mismatch between fields")]
    GridMismatch,
}

/// Kinetic energy integral rho |v|^2 (no 1/2), with face-to-center
/// averaging of the staggered velocity.
pub fn kinetic_energy(rho: &DensityField, v: &VectorField) -> f64 {
    let g = rho.grid();
    assert_eq!(g, v.grid);
    let mut acc = 0.0;
    let mut c = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let uc = 0.5 * (v.u_at(i, j) + v.u_at(i + 1, j));
            let vc = 0.5 * (v.v_at(i, j) + v.v_at(i, j + 1));
            let val = rho.field.get(i, j) * (uc * uc + vc * vc) - c;
            let t = acc + val;
            c = (t - acc) - val;
            acc = t;
        }
    }
    acc * g.cell_volume()
}

/// ||sqrt(rho) v||_2 with cell-centered weights and face-averaged velocity.
pub fn weighted_velocity_l2(weight: &ScalarField, v: &VectorField) -> f64 {
    let g = weight.grid;
    let mut acc = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let uc = 0.5 * (v.u_at(i, j) + v.u_at(i + 1, j));
            let vc = 0.5 * (v.v_at(i, j) + v.v_at(i, j + 1));
            acc += weight.get(i, j) * (uc * uc + vc * vc);
        }
    }
    (acc * g.cell_volume()).max(0.0).sqrt()
}

/// Result of a negative-norm evaluation: exact Riesz value at p = 2,
/// dictionary lower bound otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegNorm {
    Exact(f64),
    LowerBound(f64),
}

impl NegNorm {
    pub fn value(&self) -> f64 {
        match self {
            NegNorm::Exact(v) | NegNorm::LowerBound(v) => *v,
        }
    }

    pub fn is_lower_bound(&self) -> bool {
        matches!(self, NegNorm::LowerBound(_))
    }
}

/// W^{-1}_p dual norm of a cell-centered field.
///
/// p = 2: solves (Id - lap_N) psi = drho with natural (no-flux) walls and
/// returns sqrt(<drho, psi>), the exact Riesz characterization with test
/// space W^1_2 (no zero trace). Other p: the maximum of <drho, phi> over a
/// fixed dictionary of normalized test functions, flagged as a lower bound.
pub fn neg_sobolev_norm(drho: &ScalarField, p: f64) -> Result<NegNorm, MetricsError> {
    if !(p > 1.0) || p.is_nan() {
        return Err(MetricsError::BadExponent { p });
    }
    if p == 2.0 {
        let psi = riesz_solve(drho)?;
        return Ok(NegNorm::Exact(drho.dot(&psi).max(0.0).sqrt()));
    }
    Ok(NegNorm::LowerBound(dictionary_bound(drho, p)))
}

/// Solves (Id - lap_N) psi = f to a tight tolerance.
fn riesz_solve(f: &ScalarField) -> Result<ScalarField, MetricsError> {
    let g = f.grid;
    let apply = |x: &[f64], out: &mut [f64]| {
        let p = ScalarField { grid: g, data: x.to_vec() };
        let lap = crate::grid::scalar_laplacian_neumann(&p);
        for k in 0..out.len() {
            out[k] = x[k] - lap.data[k];
        }
    };
    let mut x = vec![0.0; g.cells()];
    let mut scratch = CgScratch::new(g.cells());
    linalg::cg(&apply, None, &f.data, &mut x, 1e-12, 200_000, &mut scratch)
        .map_err(MetricsError::Riesz)?;
    Ok(ScalarField { grid: g, data: x })
}

/// The documented dictionary: constant, tensor cosines, and two localized
/// bump profiles. Each entry is paired with its exact gradient.
fn dictionary(g: Grid) -> Vec<(ScalarField, ScalarField, ScalarField)> {
    use std::f64::consts::PI;
    type Fxy = Box<dyn Fn(f64, f64) -> f64>;
    let mut entries: Vec<(Fxy, Fxy, Fxy)> = Vec::new();
    entries.push((Box::new(|_, _| 1.0), Box::new(|_, _| 0.0), Box::new(|_, _| 0.0)));
    for k in 1..=4u32 {
        let ax = k as f64 * PI / g.lx;
        entries.push((
            Box::new(move |x, _| (ax * x).cos()),
            Box::new(move |x, _| -ax * (ax * x).sin()),
            Box::new(|_, _| 0.0),
        ));
        let ay = k as f64 * PI / g.ly;
        entries.push((
            Box::new(move |_, y| (ay * y).cos()),
            Box::new(|_, _| 0.0),
            Box::new(move |_, y| -ay * (ay * y).sin()),
        ));
    }
    for kx in 1..=2u32 {
        for ky in 1..=2u32 {
            let ax = kx as f64 * PI / g.lx;
            let ay = ky as f64 * PI / g.ly;
            entries.push((
                Box::new(move |x, y| (ax * x).cos() * (ay * y).cos()),
                Box::new(move |x, y| -ax * (ax * x).sin() * (ay * y).cos()),
                Box::new(move |x, y| -ay * (ax * x).cos() * (ay * y).sin()),
            ));
        }
    }
    let sigma = 0.15 * g.lx.min(g.ly);
    for (cx, cy) in [(0.3, 0.3), (0.7, 0.6)] {
        let (cx, cy) = (cx * g.lx, cy * g.ly);
        let bump = move |x: f64, y: f64| {
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        };
        entries.push((
            Box::new(bump),
            Box::new(move |x, y| -(x - cx) / (sigma * sigma) * bump(x, y)),
            Box::new(move |x, y| -(y - cy) / (sigma * sigma) * bump(x, y)),
        ));
    }
    entries
        .into_iter()
        .map(|(f, fx, fy)| {
            (
                ScalarField::from_fn(g, &*f),
                ScalarField::from_fn(g, &*fx),
                ScalarField::from_fn(g, &*fy),
            )
        })
        .collect()
}

fn dictionary_bound(drho: &ScalarField, p: f64) -> f64 {
    let g = drho.grid;
    let pprime = p / (p - 1.0);
    let vol = g.cell_volume();
    let mut best = 0.0_f64;
    for (phi, gx, gy) in dictionary(g) {
        let pairing = drho.dot(&phi);
        let norm_pp = kahan_sum(
            phi.data
                .iter()
                .zip(&gx.data)
                .zip(&gy.data)
                .map(|((f, dx), dy)| {
                    f.abs().powf(pprime) + dx.abs().powf(pprime) + dy.abs().powf(pprime)
                }),
        ) * vol;
        let norm = norm_pp.powf(1.0 / pprime);
        if norm > 0.0 {
            best = best.max(pairing.abs() / norm);
        }
    }
    best
}

/// Hoelder factor used by the dictionary sanity cross-check: the worst
/// ratio ||phi||_{W1_2} / ||phi||_{W1_{p'}} over the dictionary.
pub fn dictionary_hoelder_factor(g: Grid, p: f64) -> f64 {
    let pprime = p / (p - 1.0);
    let vol = g.cell_volume();
    let mut worst = 0.0_f64;
    for (phi, gx, gy) in dictionary(g) {
        let n2 = (kahan_sum(
            phi.data
                .iter()
                .zip(&gx.data)
                .zip(&gy.data)
                .map(|((f, dx), dy)| f * f + dx * dx + dy * dy),
        ) * vol)
            .sqrt();
        let npp = (kahan_sum(
            phi.data
                .iter()
                .zip(&gx.data)
                .zip(&gy.data)
                .map(|((f, dx), dy)| {
                    f.abs().powf(pprime) + dx.abs().powf(pprime) + dy.abs().powf(pprime)
                }),
        ) * vol)
            .powf(1.0 / pprime);
        if npp > 0.0 {
            worst = worst.max(n2 / npp);
        }
    }
    worst
}

/// The X-norm || drho0 / sqrt(rho0_ref) ||_4 over the support of the
/// reference density; infinite (flagged) if the perturbation escapes it.
#[derive(Debug, Clone, Copy)]
pub struct XNorm {
    pub value: f64,
    pub infinite: bool,
}

impl XNorm {
    pub fn display_value(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.value
        }
    }
}

pub fn x_norm(drho0: &ScalarField, rho0_ref: &DensityField) -> XNorm {
    let g = drho0.grid;
    let vol = g.cell_volume();
    let mut acc = 0.0;
    let mut infinite = false;
    for (d, r) in drho0.data.iter().zip(&rho0_ref.field.data) {
        if *r > 0.0 {
            let q = d / r.sqrt();
            acc += q * q * q * q * vol;
        } else if *d != 0.0 {
            infinite = true;
        }
    }
    XNorm { value: acc.powf(0.25), infinite }
}

/// The intermediate data (1/2 (rho1 + rho2), v2) of the general-case
/// comparison, with the measured X-norm of the half-difference and the
/// right-hand side of its a-priori bound.
#[derive(Debug, Clone)]
pub struct IntermediateData {
    pub rho: DensityField,
    pub v: VectorField,
    /// || (1/2)(rho2 - rho1) / sqrt(rho1 + rho2) ||_4
    pub xnorm_half_diff: f64,
    /// || rho1 - rho2 ||_2^{1/2}
    pub bound_rhs: f64,
}

pub fn intermediate_data(
    rho01: &DensityField,
    rho02: &DensityField,
    v02: &VectorField,
) -> Result<IntermediateData, MetricsError> {
    let g = rho01.grid();
    if g != rho02.grid() || g != v02.grid {
        return Err(MetricsError::GridMismatch);
    }
    let mut mid = ScalarField::zeros(g);
    for k in 0..mid.data.len() {
        mid.data[k] = 0.5 * (rho01.field.data[k] + rho02.field.data[k]);
    }
    let rho_star = rho01.rho_star.max(rho02.rho_star);
    let vol = g.cell_volume();
    let mut acc = 0.0;
    let mut l2 = 0.0;
    for (a, b) in rho01.field.data.iter().zip(&rho02.field.data) {
        let diff = b - a;
        l2 += diff * diff * vol;
        let denom = a + b;
        if denom > 0.0 {
            let q = 0.5 * diff / denom.sqrt();
            acc += q * q * q * q * vol;
        }
        // denom == 0 forces diff == 0 for admissible densities
    }
    Ok(IntermediateData {
        rho: DensityField::new(mid, rho_star),
        v: v02.clone(),
        xnorm_half_diff: acc.powf(0.25),
        bound_rhs: l2.sqrt().sqrt(),
    })
}

/// Exponential fit result.
#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    pub rate: f64,
    pub amplitude: f64,
    pub rms_residual: f64,
    pub samples: usize,
}

/// Least-squares line fit to log(channel) against t on [t0, t1].
pub fn fit_decay_rate(
    ts: &TimeSeries,
    channel: &str,
    window: (f64, f64),
) -> Result<FitResult, MetricsError> {
    let t = ts.time();
    let y = ts.channel(channel)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (tk, yk) in t.iter().zip(y) {
        if *tk >= window.0 && *tk <= window.1 {
            if !(*yk > 0.0) {
                return Err(MetricsError::NonPositiveChannel { channel: channel.to_string() });
            }
            xs.push(*tk);
            ys.push(yk.ln());
        }
    }
    if xs.len() < 10 {
        return Err(MetricsError::TooFewSamples { need: 10, found: xs.len() });
    }
    let n = xs.len() as f64;
    let sx = kahan_sum(xs.iter().copied());
    let sy = kahan_sum(ys.iter().copied());
    let sxx = kahan_sum(xs.iter().map(|v| v * v));
    let sxy = kahan_sum(xs.iter().zip(&ys).map(|(a, b)| a * b));
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let rms = (kahan_sum(
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (y - (intercept + slope * x)).powi(2)),
    ) / n)
        .sqrt();
    Ok(FitResult { rate: -slope, amplitude: intercept.exp(), rms_residual: rms, samples: xs.len() })
}

/// (rho_star)^{3/2} ||sqrt(rho0) v0||_2 ||grad v0||_2 / mu^2, the 3D
/// smallness number, reported as a diagnostic in 2D.
pub fn smallness_indicator(
    rho0: &DensityField,
    v0: &VectorField,
    mu: f64,
) -> Result<f64, MetricsError> {
    if !(mu > 0.0) {
        return Err(MetricsError::BadViscosity { mu });
    }
    let sqrho = kinetic_energy(rho0, v0).max(0.0).sqrt();
    let grad = crate::grid::h1_seminorm(v0);
    Ok(rho0.rho_star.powf(1.5) * sqrho * grad / (mu * mu))
}

/// Per-step difference channels of a synchronized pair run.
#[derive(Debug, Clone, Copy)]
pub struct PairStepSample {
    pub t: f64,
    pub dt: f64,
    /// Lagrangian ||grad_y du||_2^2
    pub grad_du_sq: f64,
    /// Eulerian ||grad dv||_2^2
    pub grad_dv_sq: f64,
}

/// Sampled (cadenced) difference channels of a pair run.
#[derive(Debug, Clone, Copy)]
pub struct PairSample {
    pub t: f64,
    /// || min(sqrt(rho1_0), sqrt(rho2_0)) du(t) ||_2 over particles
    pub min_rho_du_l2: f64,
    /// || drho(t) ||_{W^{-1}_2}
    pub drho_wneg2: f64,
    /// A1(t) = int (rho1_0 - rho2_0) phi(X^1) dy for the fixed test phi
    pub a1: f64,
    /// A2(t) = int rho2_0 (phi(X^1) - phi(X^2)) dy
    pub a2: f64,
}

/// Everything a stability report needs from one synchronized pair run.
#[derive(Debug, Clone)]
pub struct PairedRunData {
    pub grid: Grid,
    pub mu: f64,
    pub steps: Vec<PairStepSample>,
    pub samples: Vec<PairSample>,
    /// || sqrt(rho1_0) dv_0 ||_2
    pub data_dv0: f64,
    /// || drho_0 ||_2
    pub drho0_l2: f64,
    /// || drho_0 / sqrt(rho2_0) ||_4
    pub xnorm_direct: XNorm,
    /// Fitted energy decay rate of member 1 (sets the default weight).
    pub member1_energy_rate: Option<f64>,
    /// Flow-map diagnostics.
    pub max_det_deviation: f64,
    pub clamping_fraction: f64,
    /// w/z decomposition residuals at sampled times, when computed.
    pub wz_residuals: Vec<f64>,
}

/// The stability quantities of the Lagrangian theorem and its Eulerian
/// corollary, all entries finite and nonnegative.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub beta: f64,
    /// sup_t e^{beta t} || min(sqrt(rho1_0), sqrt(rho2_0)) du ||_2
    pub sup_weighted_du: f64,
    /// ( int e^{2 beta t} ||grad du||_2^2 dt )^{1/2}
    pub l2l2_grad_du: f64,
    /// Eulerian analog for dv
    pub l2l2_grad_dv: f64,
    /// sup_t || drho(t) ||_{W^{-1}_2} (unweighted, sampling cadence)
    pub sup_neg_sobolev: f64,
    /// || sqrt(rho1_0) dv_0 ||_2 + || drho_0 ||_2^{1/2}
    pub data_functional: f64,
    pub x_norm_direct: f64,
    pub x_norm_infinite: bool,
    pub sup_a1: f64,
    pub sup_a2: f64,
    /// Robustness column: the weighted functionals at beta / 2.
    pub sup_weighted_du_half: f64,
    pub l2l2_grad_du_half: f64,
    pub l2l2_grad_dv_half: f64,
    pub sample_cadence_note: String,
}

impl StabilityReport {
    pub fn csv_header() -> &'static str {
        "beta,sup_weighted_du,l2l2_grad_du,l2l2_grad_dv,sup_neg_sobolev,data_functional,\
         x_norm_direct,x_norm_infinite,sup_a1,sup_a2,sup_weighted_du_half,l2l2_grad_du_half,\
         l2l2_grad_dv_half"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.beta,
            self.sup_weighted_du,
            self.l2l2_grad_du,
            self.l2l2_grad_dv,
            self.sup_neg_sobolev,
            self.data_functional,
            self.x_norm_direct,
            self.x_norm_infinite,
            self.sup_a1,
            self.sup_a2,
            self.sup_weighted_du_half,
            self.l2l2_grad_du_half,
            self.l2l2_grad_dv_half,
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("beta                 = {:.6e}\n", self.beta));
        s.push_str(&format!("sup_weighted_du      = {:.6e}\n", self.sup_weighted_du));
        s.push_str(&format!("l2l2_grad_du         = {:.6e}\n", self.l2l2_grad_du));
        s.push_str(&format!("l2l2_grad_dv         = {:.6e}\n", self.l2l2_grad_dv));
        s.push_str(&format!("sup_neg_sobolev      = {:.6e}\n", self.sup_neg_sobolev));
        s.push_str(&format!("data_functional      = {:.6e}\n", self.data_functional));
        s.push_str(&format!(
            "x_norm_direct        = {}\n",
            if self.x_norm_infinite { "inf".to_string() } else { format!("{:.6e}", self.x_norm_direct) }
        ));
        s.push_str(&format!("sup_a1               = {:.6e}\n", self.sup_a1));
        s.push_str(&format!("sup_a2               = {:.6e}\n", self.sup_a2));
        s.push_str(&format!("sup_weighted_du_b/2  = {:.6e}\n", self.sup_weighted_du_half));
        s.push_str(&format!("l2l2_grad_du_b/2     = {:.6e}\n", self.l2l2_grad_du_half));
        s.push_str(&format!("l2l2_grad_dv_b/2     = {:.6e}\n", self.l2l2_grad_dv_half));
        s.push_str(&format!("cadence              = {}\n", self.sample_cadence_note));
        s
    }
}

/// Assembles the stability report from accumulated pair channels.
pub fn stability_functionals(pair: &PairedRunData, beta: f64) -> StabilityReport {
    let weighted_sup = |b: f64| -> f64 {
        pair.samples
            .iter()
            .map(|s| (b * s.t).exp() * s.min_rho_du_l2)
            .fold(0.0, f64::max)
    };
    let weighted_l2l2 = |b: f64, grad_of: fn(&PairStepSample) -> f64| -> f64 {
        kahan_sum(
            pair.steps
                .iter()
                .map(|s| s.dt * (2.0 * b * s.t).exp() * grad_of(s)),
        )
        .max(0.0)
        .sqrt()
    };
    StabilityReport {
        beta,
        sup_weighted_du: weighted_sup(beta),
        l2l2_grad_du: weighted_l2l2(beta, |s| s.grad_du_sq),
        l2l2_grad_dv: weighted_l2l2(beta, |s| s.grad_dv_sq),
        sup_neg_sobolev: pair.samples.iter().map(|s| s.drho_wneg2).fold(0.0, f64::max),
        data_functional: pair.data_dv0 + pair.drho0_l2.max(0.0).sqrt(),
        x_norm_direct: pair.xnorm_direct.value,
        x_norm_infinite: pair.xnorm_direct.infinite,
        sup_a1: pair.samples.iter().map(|s| s.a1.abs()).fold(0.0, f64::max),
        sup_a2: pair.samples.iter().map(|s| s.a2.abs()).fold(0.0, f64::max),
        sup_weighted_du_half: weighted_sup(0.5 * beta),
        l2l2_grad_du_half: weighted_l2l2(0.5 * beta, |s| s.grad_du_sq),
        l2l2_grad_dv_half: weighted_l2l2(0.5 * beta, |s| s.grad_dv_sq),
        sample_cadence_note: format!("{} samples over {} steps", pair.samples.len(), pair.steps.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::transport::{make_patch, PatchShape, PatchSpec};
    use std::f64::consts::PI;

    fn unit_grid(n: usize) -> Grid {
        Grid::new(n, n, 1.0, 1.0).unwrap()
    }

    #[test]
    fn kinetic_energy_examples() {
        let g = unit_grid(32);
        let zero_rho = DensityField::new(ScalarField::zeros(g), 1.0);
        let v = VectorField::from_fns(g, |_, _| 1.0, |_, _| 0.0);
        assert_eq!(kinetic_energy(&zero_rho, &v), 0.0);
        let one = DensityField::new(ScalarField::constant(g, 1.0), 1.0);
        assert!((kinetic_energy(&one, &v) - 1.0).abs() < 1e-13);
        let half = make_patch(
            &PatchSpec {
                background: 0.0,
                shapes: vec![PatchShape::Rect { min: [0.0, 0.0], max: [0.5, 1.0], level: 1.0 }],
            },
            g,
            1.0,
        )
        .unwrap();
        assert!((kinetic_energy(&half, &v) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn neg_sobolev_constant_and_cosine() {
        let g = unit_grid(64);
        let zero = ScalarField::zeros(g);
        assert_eq!(neg_sobolev_norm(&zero, 2.0).unwrap().value(), 0.0);
        let c = ScalarField::constant(g, 0.7);
        let n = neg_sobolev_norm(&c, 2.0).unwrap();
        assert!(!n.is_lower_bound());
        assert!((n.value() - 0.7).abs() < 1e-6, "constant norm {}", n.value());
        let cosx = ScalarField::from_fn(g, |x, _| (PI * x).cos());
        let exact = 1.0 / (2.0 * (1.0 + PI * PI)).sqrt();
        let n = neg_sobolev_norm(&cosx, 2.0).unwrap().value();
        assert!((n - exact).abs() / exact < 0.01, "{n} vs {exact}");
        assert!(neg_sobolev_norm(&cosx, 1.0).is_err());
    }

    #[test]
    fn neg_sobolev_is_a_norm() {
        let g = unit_grid(24);
        let mut seed = 42u64;
        let mut rng = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a = ScalarField::from_fn(g, |_, _| rng());
        let b = ScalarField::from_fn(g, |_, _| rng());
        let na = neg_sobolev_norm(&a, 2.0).unwrap().value();
        let nb = neg_sobolev_norm(&b, 2.0).unwrap().value();
        // absolute homogeneity
        let mut a3 = a.clone();
        a3.data.iter_mut().for_each(|v| *v *= -3.0);
        let na3 = neg_sobolev_norm(&a3, 2.0).unwrap().value();
        assert!((na3 - 3.0 * na).abs() < 1e-8 * na3.max(1.0));
        // triangle inequality
        let mut sum = a.clone();
        for (x, y) in sum.data.iter_mut().zip(&b.data) {
            *x += *y;
        }
        let ns = neg_sobolev_norm(&sum, 2.0).unwrap().value();
        assert!(ns <= na + nb + 1e-9);
    }

    #[test]
    fn dictionary_bound_stays_below_exact_times_factor() {
        let g = unit_grid(32);
        let f = ScalarField::from_fn(g, |x, y| (PI * x).cos() + 0.3 * (PI * y).cos() - 0.1);
        let exact = neg_sobolev_norm(&f, 2.0).unwrap().value();
        for p in [1.5, 3.0, 4.0] {
            let lb = neg_sobolev_norm(&f, p).unwrap();
            assert!(lb.is_lower_bound());
            let factor = dictionary_hoelder_factor(g, p);
            assert!(
                lb.value() <= exact * factor * (1.0 + 1e-8),
                "p={p}: {} vs {} * {factor}",
                lb.value(),
                exact
            );
        }
    }

    #[test]
    fn x_norm_examples() {
        let g = unit_grid(32);
        let zero = ScalarField::zeros(g);
        let one = DensityField::new(ScalarField::constant(g, 1.0), 1.0);
        let x = x_norm(&zero, &one);
        assert!(!x.infinite);
        assert_eq!(x.value, 0.0);
        let dr = ScalarField::constant(g, 1.0);
        let x = x_norm(&dr, &one);
        assert!((x.value - 1.0).abs() < 1e-12);
        // perturbation off the support
        let disk = make_patch(
            &PatchSpec {
                background: 0.0,
                shapes: vec![PatchShape::Disk { center: [0.3, 0.3], radius: 0.15, level: 1.0 }],
            },
            g,
            1.0,
        )
        .unwrap();
        let far = make_patch(
            &PatchSpec {
                background: 0.0,
                shapes: vec![PatchShape::Disk { center: [0.75, 0.75], radius: 0.1, level: 1.0 }],
            },
            g,
            1.0,
        )
        .unwrap();
        let x = x_norm(&far.field, &disk);
        assert!(x.infinite);
    }

    #[test]
    fn intermediate_data_bound_holds() {
        let g = unit_grid(48);
        let a = make_patch(
            &PatchSpec {
                background: 0.0,
                shapes: vec![PatchShape::Disk { center: [0.3, 0.5], radius: 0.15, level: 1.0 }],
            },
            g,
            1.0,
        )
        .unwrap();
        let b = make_patch(
            &PatchSpec {
                background: 0.0,
                shapes: vec![PatchShape::Disk { center: [0.7, 0.5], radius: 0.12, level: 0.8 }],
            },
            g,
            1.0,
        )
        .unwrap();
        let v = VectorField::zeros(g);
        let mid = intermediate_data(&a, &b, &v).unwrap();
        // support condition restored
        let x1 = x_norm(
            &ScalarField {
                grid: g,
                data: a
                    .field
                    .data
                    .iter()
                    .zip(&mid.rho.field.data)
                    .map(|(r, m)| m - r)
                    .collect(),
            },
            &mid.rho,
        );
        assert!(!x1.infinite);
        assert!(mid.xnorm_half_diff <= mid.bound_rhs + 1e-12);
        // identical members collapse
        let same = intermediate_data(&a, &a, &v).unwrap();
        assert_eq!(same.xnorm_half_diff, 0.0);
        for (m, r) in same.rho.field.data.iter().zip(&a.field.data) {
            assert!((m - r).abs() < 1e-15);
        }
    }

    #[test]
    fn intermediate_bound_on_randomized_pairs() {
        let g = unit_grid(24);
        let mut seed = 7u64;
        let mut rng = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) as f64 / (1u64 << 32) as f64
        };
        let v = VectorField::zeros(g);
        for _ in 0..50 {
            let mk = |rng: &mut dyn FnMut() -> f64| {
                let cx = 0.2 + 0.6 * rng();
                let cy = 0.2 + 0.6 * rng();
                let r = (0.05 + 0.12 * rng()).min(cx.min(cy).min((1.0 - cx).min(1.0 - cy)));
                let level = 0.2 + 0.8 * rng();
                make_patch(
                    &PatchSpec {
                        background: 0.0,
                        shapes: vec![PatchShape::Disk { center: [cx, cy], radius: r, level }],
                    },
                    g,
                    1.0,
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let mid = intermediate_data(&a, &b, &v).unwrap();
            assert!(
                mid.xnorm_half_diff <= mid.bound_rhs + 1e-12,
                "{} > {}",
                mid.xnorm_half_diff,
                mid.bound_rhs
            );
        }
    }

    #[test]
    fn fit_decay_examples() {
        let mut ts = TimeSeries::new(&["t", "e", "c"]);
        for k in 0..40 {
            let t = k as f64 * 0.25;
            ts.push_row(&[t, 3.0 * (-2.0 * t).exp(), 5.0]);
        }
        let f = fit_decay_rate(&ts, "e", (0.0, 10.0)).unwrap();
        assert!((f.rate - 2.0).abs() < 1e-12);
        assert!((f.amplitude - 3.0).abs() < 1e-12);
        assert!(f.rms_residual < 1e-12);
        let c = fit_decay_rate(&ts, "c", (0.0, 10.0)).unwrap();
        assert!(c.rate.abs() < 1e-13);
        // two-rate signal fitted late is dominated by the slow mode
        let mut ts2 = TimeSeries::new(&["t", "e"]);
        for k in 0..200 {
            let t = k as f64 * 0.05;
            ts2.push_row(&[t, (-t).exp() + (-3.0 * t).exp()]);
        }
        let late = fit_decay_rate(&ts2, "e", (5.0, 10.0)).unwrap();
        assert!((late.rate - 1.0).abs() < 0.05, "late rate {}", late.rate);
        // error paths
        assert!(fit_decay_rate(&ts, "e", (9.0, 10.0)).is_err());
        let mut neg = TimeSeries::new(&["t", "e"]);
        for k in 0..20 {
            neg.push_row(&[k as f64, -1.0]);
        }
        assert!(fit_decay_rate(&neg, "e", (0.0, 20.0)).is_err());
    }

    #[test]
    fn smallness_indicator_scaling() {
        let g = unit_grid(32);
        let rho = DensityField::new(ScalarField::constant(g, 1.0), 1.0);
        let v0 = VectorField::zeros(g);
        assert_eq!(smallness_indicator(&rho, &v0, 1.0).unwrap(), 0.0);
        let v = crate::solver::stream_function_velocity(g, 0.5, 1, 1);
        let s1 = smallness_indicator(&rho, &v, 1.0).unwrap();
        let v2 = v.scaled(3.0);
        let s2 = smallness_indicator(&rho, &v2, 1.0).unwrap();
        assert!((s2 / s1 - 9.0).abs() < 1e-10);
        assert!(smallness_indicator(&rho, &v, 0.0).is_err());
    }

    #[test]
    fn translation_scaling_separates_norms() {
        // rigid translation of a patch by eps: W^{-1}_2 ~ eps, L2 ~ sqrt(eps)
        let g = unit_grid(256);
        let base = 0.35;
        let mk = |cx: f64| {
            make_patch(
                &PatchSpec {
                    background: 0.0,
                    shapes: vec![PatchShape::Disk { center: [cx, 0.5], radius: 0.2, level: 1.0 }],
                },
                g,
                1.0,
            )
            .unwrap()
        };
        let a = mk(base);
        let mut wnegs = Vec::new();
        let mut l2s = Vec::new();
        let epss: Vec<f64> = [4.0, 8.0, 16.0, 32.0].iter().map(|m| m * g.hx).collect();
        for eps in &epss {
            let b = mk(base + eps);
            let d = ScalarField {
                grid: g,
                data: b.field.data.iter().zip(&a.field.data).map(|(x, y)| x - y).collect(),
            };
            wnegs.push(neg_sobolev_norm(&d, 2.0).unwrap().value());
            l2s.push(d.norm_l2());
        }
        let slope = |ys: &[f64]| {
            let n = ys.len() as f64;
            let xs: Vec<f64> = epss.iter().map(|e| e.ln()).collect();
            let ls: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
            let sx: f64 = xs.iter().sum();
            let sy: f64 = ls.iter().sum();
            let sxx: f64 = xs.iter().map(|v| v * v).sum();
            let sxy: f64 = xs.iter().zip(&ls).map(|(a, b)| a * b).sum();
            (n * sxy - sx * sy) / (n * sxx - sx * sx)
        };
        let s_w = slope(&wnegs);
        let s_l = slope(&l2s);
        assert!((s_w - 1.0).abs() < 0.25, "W^-1 slope {s_w}");
        assert!((s_l - 0.5).abs() < 0.15, "L2 slope {s_l}");
    }
}
