//! Flow-map integration, cofactor algebra and Eulerian/Lagrangian
//! transforms.
//!
//! Particles are seeded at cell centers, one per cell, so Lagrangian
//! quadrature aligns with the Eulerian midpoint rule. Positions and the
//! accumulated displacement gradient D = int grad_y u dt are advanced
//! together by Heun's rule (trapezoidal RK2) on interpolated velocities.

use crate::grid::{Grid, ScalarField, VectorField};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LagrangianError {
    #[error("velocity history does not cover t = {t}")]
    HistoryGap { t: f64 },
    #[error("flow maps disagree in seeds or time")]
    SeedMismatch,
    #[error("intermediate-flow parameter s = {s} outside [1, 2]")]
    BadBlend { s: f64 },
    #[error("history must contain at least two frames")]
    TooShort,
}

/// 2x2 matrix per particle, row-major [m11, m12, m21, m22].
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub grid: Grid,
    pub data: Vec<[f64; 4]>,
}

impl MatrixField {
    pub fn constant(grid: Grid, m: [f64; 4]) -> Self {
        Self { grid, data: vec![m; grid.cells()] }
    }

    pub fn max_abs_diff(&self, other: &MatrixField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Particle positions and accumulated displacement gradients.
#[derive(Debug, Clone)]
pub struct FlowMap {
    pub grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// D = int grad_y u dt, per particle.
    pub d: Vec<[f64; 4]>,
    pub t: f64,
    /// Number of position clampings to the domain closure.
    pub clamp_events: u64,
    /// Particle-steps taken so far (for the clamping fraction).
    pub particle_steps: u64,
}

impl FlowMap {
    /// X(0, y) = y exactly, D = 0.
    pub fn identity(grid: Grid) -> Self {
        let n = grid.cells();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (px, py) = grid.cell_center(i, j);
                x.push(px);
                y.push(py);
            }
        }
        Self { grid, x, y, d: vec![[0.0; 4]; n], t: 0.0, clamp_events: 0, particle_steps: 0 }
    }

    pub fn clamping_fraction(&self) -> f64 {
        if self.particle_steps == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.particle_steps as f64
        }
    }

    /// Worst-case |det(I + D) - 1| over particles (measure preservation).
    pub fn max_det_deviation(&self) -> f64 {
        self.d
            .iter()
            .map(|d| ((1.0 + d[0]) * (1.0 + d[3]) - d[1] * d[2] - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Maximum displacement |X - y| over particles.
    pub fn max_displacement(&self) -> f64 {
        let mut m = 0.0_f64;
        for (k, (xp, yp)) in self.x.iter().zip(&self.y).enumerate() {
            let i = k % self.grid.nx;
            let j = k / self.grid.nx;
            let (sx, sy) = self.grid.cell_center(i, j);
            m = m.max((xp - sx).hypot(yp - sy));
        }
        m
    }

    /// One Heun step using the velocity frames at t and t + dt.
    pub fn advance(&mut self, v0: &VectorField, v1: &VectorField, t: f64, dt: f64) {
        debug_assert!((self.t - t).abs() <= 1e-12 * t.abs().max(1.0));
        let g0 = VelGrad::new(v0);
        let g1 = VelGrad::new(v1);
        let (lx, ly) = (self.grid.lx, self.grid.ly);
        for k in 0..self.x.len() {
            let (px, py) = (self.x[k], self.y[k]);
            let d = self.d[k];
            let (u1, w1) = v0.sample(px, py);
            let gd1 = mat_mul(&g0.sample(px, py), &plus_id(&d));
            // Euler predictor
            let (ex, ey) = clamp_pos(px + dt * u1, py + dt * w1, lx, ly).0;
            let de = [
                d[0] + dt * gd1[0],
                d[1] + dt * gd1[1],
                d[2] + dt * gd1[2],
                d[3] + dt * gd1[3],
            ];
            let (u2, w2) = v1.sample(ex, ey);
            let gd2 = mat_mul(&g1.sample(ex, ey), &plus_id(&de));
            let ((nx, ny), clamped) =
                clamp_pos(px + 0.5 * dt * (u1 + u2), py + 0.5 * dt * (w1 + w2), lx, ly);
            self.x[k] = nx;
            self.y[k] = ny;
            for c in 0..4 {
                self.d[k][c] = d[c] + 0.5 * dt * (gd1[c] + gd2[c]);
            }
            if clamped {
                self.clamp_events += 1;
            }
            self.particle_steps += 1;
        }
        self.t = t + dt;
    }
}

fn plus_id(d: &[f64; 4]) -> [f64; 4] {
    [1.0 + d[0], d[1], d[2], 1.0 + d[3]]
}

fn mat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn clamp_pos(x: f64, y: f64, lx: f64, ly: f64) -> ((f64, f64), bool) {
    let cx = x.clamp(0.0, lx);
    let cy = y.clamp(0.0, ly);
    ((cx, cy), cx != x || cy != y)
}

/// The four components of grad_x v on their natural staggered grids,
/// with bilinear samplers.
pub struct VelGrad {
    grid: Grid,
    /// du/dx at cell centers
    dudx: Vec<f64>,
    /// du/dy at nodes
    dudy: Vec<f64>,
    /// dv/dx at nodes
    dvdx: Vec<f64>,
    /// dv/dy at cell centers
    dvdy: Vec<f64>,
}

impl VelGrad {
    pub fn new(v: &VectorField) -> Self {
        let g = v.grid;
        let (nx, ny) = (g.nx, g.ny);
        let mut dudx = vec![0.0; nx * ny];
        let mut dvdy = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                dudx[j * nx + i] = (v.u_at(i + 1, j) - v.u_at(i, j)) / g.hx;
                dvdy[j * nx + i] = (v.v_at(i, j + 1) - v.v_at(i, j)) / g.hy;
            }
        }
        let mut dudy = vec![0.0; (nx + 1) * (ny + 1)];
        let mut dvdx = vec![0.0; (nx + 1) * (ny + 1)];
        for j in 0..=ny {
            for i in 0..=nx {
                let below = if j == 0 { -v.u_at(i, 0) } else { v.u_at(i, j - 1) };
                let above = if j == ny { -v.u_at(i, ny - 1) } else { v.u_at(i, j) };
                dudy[j * (nx + 1) + i] = (above - below) / g.hy;
                let left = if i == 0 { -v.v_at(0, j) } else { v.v_at(i - 1, j) };
                let right = if i == nx { -v.v_at(nx - 1, j) } else { v.v_at(i, j) };
                dvdx[j * (nx + 1) + i] = (right - left) / g.hx;
            }
        }
        Self { grid: g, dudx, dudy, dvdx, dvdy }
    }

    fn sample_cc(&self, data: &[f64], x: f64, y: f64) -> f64 {
        let g = self.grid;
        let fx = (x / g.hx - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let fy = (y / g.hy - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(g.nx - 2);
        let j0 = (fy.floor() as usize).min(g.ny - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let at = |i: usize, j: usize| data[j * g.nx + i];
        at(i0, j0) * (1.0 - tx) * (1.0 - ty)
            + at(i0 + 1, j0) * tx * (1.0 - ty)
            + at(i0, j0 + 1) * (1.0 - tx) * ty
            + at(i0 + 1, j0 + 1) * tx * ty
    }

    fn sample_node(&self, data: &[f64], x: f64, y: f64) -> f64 {
        let g = self.grid;
        let fx = (x / g.hx).clamp(0.0, g.nx as f64);
        let fy = (y / g.hy).clamp(0.0, g.ny as f64);
        let i0 = (fx.floor() as usize).min(g.nx - 1);
        let j0 = (fy.floor() as usize).min(g.ny - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let at = |i: usize, j: usize| data[j * (g.nx + 1) + i];
        at(i0, j0) * (1.0 - tx) * (1.0 - ty)
            + at(i0 + 1, j0) * tx * (1.0 - ty)
            + at(i0, j0 + 1) * (1.0 - tx) * ty
            + at(i0 + 1, j0 + 1) * tx * ty
    }

    /// grad_x v as [du/dx, du/dy, dv/dx, dv/dy] at a point.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 4] {
        [
            self.sample_cc(&self.dudx, x, y),
            self.sample_node(&self.dudy, x, y),
            self.sample_node(&self.dvdx, x, y),
            self.sample_cc(&self.dvdy, x, y),
        ]
    }
}

/// A time-indexed velocity record (frame times strictly increasing).
pub struct StoredHistory {
    pub frames: Vec<(f64, VectorField)>,
}

impl StoredHistory {
    pub fn new(frames: Vec<(f64, VectorField)>) -> Result<Self, LagrangianError> {
        if frames.len() < 2 {
            return Err(LagrangianError::TooShort);
        }
        Ok(Self { frames })
    }

    pub fn t_end(&self) -> f64 {
        self.frames.last().unwrap().0
    }

    /// Linear interpolation between bracketing frames.
    pub fn frame_at(&self, t: f64) -> Result<VectorField, LagrangianError> {
        let first = self.frames.first().unwrap();
        let last = self.frames.last().unwrap();
        if t < first.0 - 1e-12 || t > last.0 + 1e-12 {
            return Err(LagrangianError::HistoryGap { t });
        }
        if t <= first.0 {
            return Ok(first.1.clone());
        }
        let k = self
            .frames
            .windows(2)
            .position(|w| t <= w[1].0 + 1e-12)
            .ok_or(LagrangianError::HistoryGap { t })?;
        let (t0, ref v0) = self.frames[k];
        let (t1, ref v1) = self.frames[k + 1];
        if t >= t1 {
            return Ok(v1.clone());
        }
        let a = (t - t0) / (t1 - t0);
        Ok(v0.add_scaled(&v1.add_scaled(v0, -1.0), a))
    }
}

/// Integrates the flow of a stored velocity history from 0 to t_end, one
/// Heun step per stored frame interval (the solver's own dt sequence).
pub fn integrate_flow(
    history: &StoredHistory,
    seeds: Grid,
    t_end: f64,
) -> Result<FlowMap, LagrangianError> {
    if t_end > history.t_end() + 1e-12 {
        return Err(LagrangianError::HistoryGap { t: t_end });
    }
    let mut fm = FlowMap::identity(seeds);
    for k in 0..history.frames.len() - 1 {
        let (t0, ref v0) = history.frames[k];
        let (t1, ref v1) = history.frames[k + 1];
        if t0 >= t_end - 1e-15 {
            break;
        }
        if t1 <= t_end + 1e-15 {
            fm.advance(v0, v1, t0, t1 - t0);
        } else {
            let vmid = history.frame_at(t_end)?;
            fm.advance(v0, &vmid, t0, t_end - t0);
            break;
        }
    }
    Ok(fm)
}

/// Blend of two histories: (2 - s) v1 + (s - 1) v2, the intermediate
/// measure-preserving flows. Requires matching frame times.
pub fn intermediate_flow(
    h1: &StoredHistory,
    h2: &StoredHistory,
    s: f64,
    seeds: Grid,
    t_end: f64,
) -> Result<FlowMap, LagrangianError> {
    if !(1.0..=2.0).contains(&s) {
        return Err(LagrangianError::BadBlend { s });
    }
    if h1.frames.len() != h2.frames.len() {
        return Err(LagrangianError::SeedMismatch);
    }
    let blended: Vec<(f64, VectorField)> = h1
        .frames
        .iter()
        .zip(&h2.frames)
        .map(|((t1, v1), (t2, v2))| {
            debug_assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1.0));
            let mut v = v1.scaled(2.0 - s);
            for (a, b) in v.u.iter_mut().zip(&v2.u) {
                *a += (s - 1.0) * b;
            }
            for (a, b) in v.v.iter_mut().zip(&v2.v) {
                *a += (s - 1.0) * b;
            }
            (*t1, v)
        })
        .collect();
    integrate_flow(&StoredHistory { frames: blended }, seeds, t_end)
}

/// A_u = [cof(I + D)]^T per particle; equals (I + D)^{-1} when det = 1.
pub fn cofactor_matrix(fm: &FlowMap) -> MatrixField {
    let data = fm
        .d
        .iter()
        .map(|d| {
            let m = plus_id(d);
            [m[3], -m[1], -m[2], m[0]]
        })
        .collect();
    MatrixField { grid: fm.grid, data }
}

/// Closed 2D formula for delta A = A^1 - A^2 straight from the accumulated
/// displacement gradients; affine in D, so it matches the cofactor
/// difference identically.
pub fn delta_a_2d(fm1: &FlowMap, fm2: &FlowMap) -> Result<MatrixField, LagrangianError> {
    if fm1.grid != fm2.grid || (fm1.t - fm2.t).abs() > 1e-12 * fm1.t.abs().max(1.0) {
        return Err(LagrangianError::SeedMismatch);
    }
    let data = fm1
        .d
        .iter()
        .zip(&fm2.d)
        .map(|(d1, d2)| {
            [
                d1[3] - d2[3],
                -(d1[1] - d2[1]),
                -(d1[2] - d2[2]),
                d1[0] - d2[0],
            ]
        })
        .collect();
    Ok(MatrixField { grid: fm1.grid, data })
}

/// Samples an Eulerian field along the flow map: f(t, X(t, y)) per particle,
/// returned on the seed grid.
pub fn pull_back(f: &ScalarField, fm: &FlowMap) -> ScalarField {
    let mut out = ScalarField::zeros(fm.grid);
    for k in 0..fm.x.len() {
        out.data[k] = f.sample(fm.x[k], fm.y[k]);
    }
    out
}

/// || rho(t, X(t, .)) - rho_0 ||_1: discrete violation of Lagrangian
/// density constancy.
pub fn lagrangian_density_residual(
    rho_t: &crate::transport::DensityField,
    rho_0: &crate::transport::DensityField,
    fm: &FlowMap,
) -> f64 {
    let pulled = pull_back(&rho_t.field, fm);
    let vol = fm.grid.cell_volume();
    crate::grid::kahan_sum(
        pulled
            .data
            .iter()
            .zip(&rho_0.field.data)
            .map(|(a, b)| (a - b).abs()),
    ) * vol
}

/// v(t_k, X(t_k, y)) along the history frames: the Lagrangian velocity.
pub fn eulerian_to_lagrangian_velocity(
    history: &StoredHistory,
    seeds: Grid,
) -> Result<Vec<(f64, Vec<[f64; 2]>)>, LagrangianError> {
    let mut fm = FlowMap::identity(seeds);
    let mut out = Vec::with_capacity(history.frames.len());
    let record = |fm: &FlowMap, v: &VectorField| -> Vec<[f64; 2]> {
        (0..fm.x.len())
            .map(|k| {
                let (u, w) = v.sample(fm.x[k], fm.y[k]);
                [u, w]
            })
            .collect()
    };
    out.push((history.frames[0].0, record(&fm, &history.frames[0].1)));
    for k in 0..history.frames.len() - 1 {
        let (t0, ref v0) = history.frames[k];
        let (t1, ref v1) = history.frames[k + 1];
        fm.advance(v0, v1, t0, t1 - t0);
        out.push((t1, record(&fm, v1)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn unit_grid(n: usize) -> Grid {
        Grid::new(n, n, 1.0, 1.0).unwrap()
    }

    fn constant_history(g: Grid, u: f64, w: f64, t_end: f64, steps: usize) -> StoredHistory {
        let frames = (0..=steps)
            .map(|k| {
                let t = t_end * k as f64 / steps as f64;
                (t, VectorField::from_fns(g, |_, _| u, |_, _| w))
            })
            .collect();
        StoredHistory::new(frames).unwrap()
    }

    #[test]
    fn zero_velocity_keeps_identity() {
        let g = unit_grid(16);
        let h = constant_history(g, 0.0, 0.0, 1.0, 4);
        let fm = integrate_flow(&h, g, 1.0).unwrap();
        let id = FlowMap::identity(g);
        assert_eq!(fm.x, id.x);
        assert_eq!(fm.y, id.y);
        assert!(fm.d.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn constant_field_translates_particles() {
        // synthetic field ignoring walls
        let g = unit_grid(16);
        let h = constant_history(g, 0.25, 0.0, 1.0, 8);
        let fm = integrate_flow(&h, g, 1.0).unwrap();
        for k in 0..fm.x.len() {
            let i = k % g.nx;
            let j = k / g.nx;
            let (sx, sy) = g.cell_center(i, j);
            let expect_x = (sx + 0.25).min(1.0); // clamped at the wall
            assert!((fm.x[k] - expect_x).abs() < 1e-12);
            assert!((fm.y[k] - sy).abs() < 1e-12);
        }
        assert!(fm.max_det_deviation() < 1e-13);
    }

    #[test]
    fn cofactor_trivial_and_shear() {
        let g = unit_grid(8);
        let mut fm = FlowMap::identity(g);
        let a = cofactor_matrix(&fm);
        for m in &a.data {
            assert_eq!(*m, [1.0, 0.0, 0.0, 1.0]);
        }
        // shear D = [[0, gt], [0, 0]] -> A = [[1, -gt], [0, 1]]
        // cof(I+D)^T with M = [[1, gt],[0, 1]] gives [[1, -gt],[-0, 1]]
        let gt = 0.37;
        for d in fm.d.iter_mut() {
            *d = [0.0, gt, 0.0, 0.0];
        }
        let a = cofactor_matrix(&fm);
        for m in &a.data {
            assert!((m[0] - 1.0).abs() < 1e-15);
            assert!((m[1] + gt).abs() < 1e-15);
            assert!(m[2].abs() < 1e-15);
            assert!((m[3] - 1.0).abs() < 1e-15);
        }
        // A (I + D) = Id for det(I+D) = 1
        let m = plus_id(&fm.d[0]);
        let prod = mat_mul(&a.data[0], &m);
        assert!((prod[0] - 1.0).abs() < 1e-15 && (prod[3] - 1.0).abs() < 1e-15);
        assert!(prod[1].abs() < 1e-15 && prod[2].abs() < 1e-15);
    }

    #[test]
    fn cofactor_inverts_unimodular_matrices() {
        let g = unit_grid(8);
        let mut fm = FlowMap::identity(g);
        // random-ish D with det(I+D) = 1: compose two shears
        let mut seed = 1234u64;
        for d in fm.d.iter_mut() {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            // M = L(a) U(b): [[1,0],[a,1]] [[1,b],[0,1]] = [[1, b],[a, ab+1]]
            *d = [0.0, b, a, a * b];
        }
        let a = cofactor_matrix(&fm);
        for (m, d) in a.data.iter().zip(&fm.d) {
            let prod = mat_mul(m, &plus_id(d));
            assert!((prod[0] - 1.0).abs() < 1e-12);
            assert!((prod[3] - 1.0).abs() < 1e-12);
            assert!(prod[1].abs() < 1e-12 && prod[2].abs() < 1e-12);
        }
    }

    #[test]
    fn delta_a_matches_cofactor_difference() {
        let g = unit_grid(8);
        let mut fm1 = FlowMap::identity(g);
        let mut fm2 = FlowMap::identity(g);
        for d in fm1.d.iter_mut() {
            *d = [0.0, 0.4, 0.0, 0.0];
        }
        for d in fm2.d.iter_mut() {
            *d = [0.0, 0.0, -0.7, 0.0];
        }
        let da = delta_a_2d(&fm1, &fm2).unwrap();
        let mut diff = cofactor_matrix(&fm1);
        for (m, n) in diff.data.iter_mut().zip(&cofactor_matrix(&fm2).data) {
            for c in 0..4 {
                m[c] -= n[c];
            }
        }
        assert!(da.max_abs_diff(&diff) < 1e-12);
        // antisymmetry
        let da_swapped = delta_a_2d(&fm2, &fm1).unwrap();
        for (a, b) in da.data.iter().zip(&da_swapped.data) {
            for c in 0..4 {
                assert!((a[c] + b[c]).abs() < 1e-15);
            }
        }
        // identical maps give zero
        let z = delta_a_2d(&fm1, &fm1).unwrap();
        assert!(z.data.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn intermediate_flow_endpoints_match_members() {
        let g = unit_grid(12);
        let mk = |amp: f64| {
            let frames = (0..=6)
                .map(|k| (0.05 * k as f64, crate::solver::stream_function_velocity(g, amp, 1, 1)))
                .collect();
            StoredHistory::new(frames).unwrap()
        };
        let h1 = mk(0.4);
        let h2 = mk(-0.3);
        let f1 = integrate_flow(&h1, g, 0.3).unwrap();
        let f2 = integrate_flow(&h2, g, 0.3).unwrap();
        let b1 = intermediate_flow(&h1, &h2, 1.0, g, 0.3).unwrap();
        let b2 = intermediate_flow(&h1, &h2, 2.0, g, 0.3).unwrap();
        assert_eq!(f1.x, b1.x);
        assert_eq!(f1.y, b1.y);
        assert_eq!(f2.x, b2.x);
        assert_eq!(f2.y, b2.y);
        assert!(intermediate_flow(&h1, &h2, 0.5, g, 0.3).is_err());
        // identical members: independent of s
        let bmid = intermediate_flow(&h1, &h1, 1.5, g, 0.3).unwrap();
        let f11 = integrate_flow(&h1, g, 0.3).unwrap();
        for (a, b) in bmid.x.iter().zip(&f11.x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pull_back_identity_and_constant() {
        let g = unit_grid(16);
        let fm = FlowMap::identity(g);
        let f = ScalarField::from_fn(g, |x, y| 2.0 * x + 3.0 * y);
        let p = pull_back(&f, &fm);
        for (a, b) in p.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-13);
        }
        let c = ScalarField::constant(g, 4.2);
        let pc = pull_back(&c, &fm);
        assert!(pc.data.iter().all(|&v| (v - 4.2).abs() < 1e-15));
    }

    #[test]
    fn history_gap_detected() {
        let g = unit_grid(8);
        let h = constant_history(g, 0.1, 0.0, 0.5, 4);
        assert!(matches!(
            integrate_flow(&h, g, 1.0),
            Err(LagrangianError::HistoryGap { .. })
        ));
    }
}
