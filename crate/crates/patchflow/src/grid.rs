//! Rectangular domain discretization on a MAC staggered grid.
//!
//! Scalars (density, pressure) live at cell centers; velocity components
//! live on cell faces (x-component on vertical faces, y-component on
//! horizontal faces). No-slip walls are the outer rectangle boundary:
//! wall-normal face values are identically zero and tangential components
//! see the wall through odd ghost reflection.

use thiserror::Error;

/// Minimum cell count per direction.
pub const MIN_CELLS: usize = 8;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least {MIN_CELLS} cells per direction, got {nx}x{ny}")]
    TooCoarse { nx: usize, ny: usize },
    #[error("domain side lengths must be positive, got {lx}x{ly}")]
    BadExtent { lx: f64, ly: f64 },
    #[error("field dimensions do not match grid {expected_nx}x{expected_ny}")]
    DimensionMismatch { expected_nx: usize, expected_ny: usize },
    #[error("eigenvalue iteration did not converge after {iters} iterations (residual {residual:.3e})")]
    EigNonConvergence { iters: usize, residual: f64 },
}

/// Uniform rectangular grid over the open box (0,lx) x (0,ly).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(GridError::TooCoarse { nx, ny });
        }
        if !(lx > 0.0) || !(ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(GridError::BadExtent { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly, hx: lx / nx as f64, hy: ly / ny as f64 })
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell volume (area in 2D), the midpoint quadrature weight.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.hx * self.hy
    }

    #[inline]
    pub fn h_min(&self) -> f64 {
        self.hx.min(self.hy)
    }

    /// Domain diameter sqrt(lx^2 + ly^2).
    #[inline]
    pub fn diameter(&self) -> f64 {
        self.lx.hypot(self.ly)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }

    /// Position of the x-face (i, j), i in 0..=nx.
    #[inline]
    pub fn x_face_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.hx, (j as f64 + 0.5) * self.hy)
    }

    /// Position of the y-face (i, j), j in 0..=ny.
    #[inline]
    pub fn y_face_pos(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, j as f64 * self.hy)
    }
}

/// Cell-centered scalar field, row-major (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, data: vec![0.0; grid.cells()] }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, data: vec![value; grid.cells()] }
    }

    /// Sample a function at cell centers.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.cells());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                data.push(f(x, y));
            }
        }
        Self { grid, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i, j);
        self.data[k] = v;
    }

    /// Midpoint-quadrature integral over the domain.
    pub fn integral(&self) -> f64 {
        kahan_sum(self.data.iter().copied()) * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.integral() / (self.grid.lx * self.grid.ly)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L2 inner product with quadrature weight.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.grid, other.grid);
        kahan_sum(self.data.iter().zip(&other.data).map(|(a, b)| a * b)) * self.grid.cell_volume()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }

    /// Bilinear sample at a point; clamps to the cell-center hull.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let g = self.grid;
        let fx = (x / g.hx - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let fy = (y / g.hy - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(g.nx - 2);
        let j0 = (fy.floor() as usize).min(g.ny - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let v00 = self.get(i0, j0);
        let v10 = self.get(i0 + 1, j0);
        let v01 = self.get(i0, j0 + 1);
        let v11 = self.get(i0 + 1, j0 + 1);
        v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty
    }
}

/// MAC staggered vector field: u on x-faces ((nx+1) x ny), v on y-faces (nx x (ny+1)).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            u: vec![0.0; (grid.nx + 1) * grid.ny],
            v: vec![0.0; grid.nx * (grid.ny + 1)],
        }
    }

    /// Sample component functions at their face positions. Does not zero walls.
    pub fn from_fns(
        grid: Grid,
        mut fu: impl FnMut(f64, f64) -> f64,
        mut fv: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let mut out = Self::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                let (x, y) = grid.x_face_pos(i, j);
                out.u[j * (grid.nx + 1) + i] = fu(x, y);
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.y_face_pos(i, j);
                out.v[j * grid.nx + i] = fv(x, y);
            }
        }
        out
    }

    #[inline]
    pub fn u_idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.grid.nx && j < self.grid.ny);
        j * (self.grid.nx + 1) + i
    }

    #[inline]
    pub fn v_idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.grid.nx && j <= self.grid.ny);
        j * self.grid.nx + i
    }

    #[inline]
    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.u[j * (self.grid.nx + 1) + i]
    }

    #[inline]
    pub fn v_at(&self, i: usize, j: usize) -> f64 {
        self.v[j * self.grid.nx + i]
    }

    pub fn max_abs(&self) -> f64 {
        let mu = self.u.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        let mv = self.v.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        mu.max(mv)
    }

    pub fn all_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite()) && self.v.iter().all(|v| v.is_finite())
    }

    /// Force wall-normal faces to zero (the no-slip normal part).
    pub fn zero_walls(&mut self) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        for j in 0..ny {
            let a = self.u_idx(0, j);
            let b = self.u_idx(nx, j);
            self.u[a] = 0.0;
            self.u[b] = 0.0;
        }
        for i in 0..nx {
            let a = self.v_idx(i, 0);
            let b = self.v_idx(i, ny);
            self.v[a] = 0.0;
            self.v[b] = 0.0;
        }
    }

    pub fn walls_are_zero(&self) -> bool {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        (0..ny).all(|j| self.u_at(0, j) == 0.0 && self.u_at(nx, j) == 0.0)
            && (0..nx).all(|i| self.v_at(i, 0) == 0.0 && self.v_at(i, ny) == 0.0)
    }

    /// Face-weighted L2 inner product (every face carries the full cell volume).
    pub fn dot(&self, other: &VectorField) -> f64 {
        assert_eq!(self.grid, other.grid);
        let s = kahan_sum(self.u.iter().zip(&other.u).map(|(a, b)| a * b))
            + kahan_sum(self.v.iter().zip(&other.v).map(|(a, b)| a * b));
        s * self.grid.cell_volume()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }

    pub fn scaled(&self, a: f64) -> VectorField {
        let mut out = self.clone();
        out.u.iter_mut().for_each(|x| *x *= a);
        out.v.iter_mut().for_each(|x| *x *= a);
        out
    }

    pub fn add_scaled(&self, other: &VectorField, a: f64) -> VectorField {
        assert_eq!(self.grid, other.grid);
        let mut out = self.clone();
        for (x, y) in out.u.iter_mut().zip(&other.u) {
            *x += a * y;
        }
        for (x, y) in out.v.iter_mut().zip(&other.v) {
            *x += a * y;
        }
        out
    }

    /// Bilinear sample of the u-component; odd reflection across y-walls
    /// reproduces the zero wall value.
    pub fn sample_u(&self, x: f64, y: f64) -> f64 {
        let g = self.grid;
        let fx = (x / g.hx).clamp(0.0, g.nx as f64);
        let i0 = (fx.floor() as usize).min(g.nx - 1);
        let tx = fx - i0 as f64;
        let fy = y / g.hy - 0.5;
        let (j0, ty) = (fy.floor(), fy - fy.floor());
        let row = |jj: f64| -> f64 {
            // odd ghost: u(-1) = -u(0), u(ny) = -u(ny-1)
            let j = jj as isize;
            let fetch = |i: usize| -> f64 {
                if j < 0 {
                    -self.u_at(i, 0)
                } else if j >= g.ny as isize {
                    -self.u_at(i, g.ny - 1)
                } else {
                    self.u_at(i, j as usize)
                }
            };
            fetch(i0) * (1.0 - tx) + fetch(i0 + 1) * tx
        };
        row(j0) * (1.0 - ty) + row(j0 + 1.0) * ty
    }

    /// Bilinear sample of the v-component; odd reflection across x-walls.
    pub fn sample_v(&self, x: f64, y: f64) -> f64 {
        let g = self.grid;
        let fy = (y / g.hy).clamp(0.0, g.ny as f64);
        let j0 = (fy.floor() as usize).min(g.ny - 1);
        let ty = fy - j0 as f64;
        let fx = x / g.hx - 0.5;
        let (i0, tx) = (fx.floor(), fx - fx.floor());
        let col = |ii: f64| -> f64 {
            let i = ii as isize;
            let fetch = |j: usize| -> f64 {
                if i < 0 {
                    -self.v_at(0, j)
                } else if i >= g.nx as isize {
                    -self.v_at(g.nx - 1, j)
                } else {
                    self.v_at(i as usize, j)
                }
            };
            fetch(j0) * (1.0 - ty) + fetch(j0 + 1) * ty
        };
        col(i0) * (1.0 - tx) + col(i0 + 1.0) * tx
    }

    /// Velocity vector at an arbitrary point.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (self.sample_u(x, y), self.sample_v(x, y))
    }
}

/// Compensated (Kahan) summation; keeps quadrature deterministic and tight.
pub fn kahan_sum(iter: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in iter {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Discrete divergence: cell-centered, second order for smooth fields.
pub fn divergence(v: &VectorField) -> ScalarField {
    let g = v.grid;
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let du = (v.u_at(i + 1, j) - v.u_at(i, j)) / g.hx;
            let dv = (v.v_at(i, j + 1) - v.v_at(i, j)) / g.hy;
            out.data[g.idx(i, j)] = du + dv;
        }
    }
    out
}

/// Discrete gradient: face-centered differences, adjoint to -divergence.
/// Wall faces carry zero (the natural pairing with zero-wall velocities).
pub fn gradient(p: &ScalarField) -> VectorField {
    let g = p.grid;
    let mut out = VectorField::zeros(g);
    for j in 0..g.ny {
        for i in 1..g.nx {
            out.u[j * (g.nx + 1) + i] = (p.get(i, j) - p.get(i - 1, j)) / g.hx;
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            out.v[j * g.nx + i] = (p.get(i, j) - p.get(i, j - 1)) / g.hy;
        }
    }
    out
}

/// Componentwise 5-point Laplacian of a velocity field scaled by `mu`,
/// with no-slip walls: wall-normal faces are Dirichlet nodes (kept zero in
/// the output), tangential neighbors use odd ghost reflection so the wall
/// value vanishes.
pub fn laplacian_dirichlet(field: &VectorField, mu: f64) -> VectorField {
    let g = field.grid;
    let mut out = VectorField::zeros(g);
    let hx2 = g.hx * g.hx;
    let hy2 = g.hy * g.hy;
    for j in 0..g.ny {
        for i in 1..g.nx {
            let c = field.u_at(i, j);
            let w = field.u_at(i - 1, j);
            let e = field.u_at(i + 1, j);
            let s = if j == 0 { -c } else { field.u_at(i, j - 1) };
            let n = if j + 1 == g.ny { -c } else { field.u_at(i, j + 1) };
            out.u[j * (g.nx + 1) + i] = mu * ((e - 2.0 * c + w) / hx2 + (n - 2.0 * c + s) / hy2);
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            let c = field.v_at(i, j);
            let s = field.v_at(i, j - 1);
            let n = field.v_at(i, j + 1);
            let w = if i == 0 { -c } else { field.v_at(i - 1, j) };
            let e = if i + 1 == g.nx { -c } else { field.v_at(i + 1, j) };
            out.v[j * g.nx + i] = mu * ((e - 2.0 * c + w) / hx2 + (n - 2.0 * c + s) / hy2);
        }
    }
    out
}

/// Discrete H1 seminorm ||grad v||_2 built from the same stencils as
/// `laplacian_dirichlet`, so that <-lap v, v> = h1_seminorm(v)^2 to rounding.
pub fn h1_seminorm(field: &VectorField) -> f64 {
    let g = field.grid;
    let vol = g.cell_volume();
    let mut acc = 0.0;
    let mut c = 0.0;
    let mut add = |v: f64| {
        let y = v - c;
        let t = acc + y;
        c = (t - acc) - y;
        acc = t;
    };
    // u-component: x-edges (walls included as zero-valued Dirichlet neighbors)
    for j in 0..g.ny {
        for i in 0..g.nx {
            let d = (field.u_at(i + 1, j) - field.u_at(i, j)) / g.hx;
            add(d * d * vol);
        }
        // y-edges between interior rows
        for i in 1..g.nx {
            if j + 1 < g.ny {
                let d = (field.u_at(i, j + 1) - field.u_at(i, j)) / g.hy;
                add(d * d * vol);
            }
        }
    }
    // u ghost edges at y-walls: ghost value -u gives (2u/hy)^2 with half weight
    for i in 1..g.nx {
        let b = field.u_at(i, 0);
        let t = field.u_at(i, g.ny - 1);
        add(0.5 * (2.0 * b / g.hy).powi(2) * vol);
        add(0.5 * (2.0 * t / g.hy).powi(2) * vol);
    }
    // v-component: y-edges
    for i in 0..g.nx {
        for j in 0..g.ny {
            let d = (field.v_at(i, j + 1) - field.v_at(i, j)) / g.hy;
            add(d * d * vol);
        }
    }
    // v x-edges between interior columns
    for j in 1..g.ny {
        for i in 0..g.nx {
            if i + 1 < g.nx {
                let d = (field.v_at(i + 1, j) - field.v_at(i, j)) / g.hx;
                add(d * d * vol);
            }
        }
    }
    // v ghost edges at x-walls
    for j in 1..g.ny {
        let l = field.v_at(0, j);
        let r = field.v_at(g.nx - 1, j);
        add(0.5 * (2.0 * l / g.hx).powi(2) * vol);
        add(0.5 * (2.0 * r / g.hx).powi(2) * vol);
    }
    acc.max(0.0).sqrt()
}

/// 5-point scalar Laplacian with homogeneous Neumann walls (mirror ghosts).
pub fn scalar_laplacian_neumann(p: &ScalarField) -> ScalarField {
    let g = p.grid;
    let mut out = ScalarField::zeros(g);
    let hx2 = g.hx * g.hx;
    let hy2 = g.hy * g.hy;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = p.get(i, j);
            let w = if i == 0 { c } else { p.get(i - 1, j) };
            let e = if i + 1 == g.nx { c } else { p.get(i + 1, j) };
            let s = if j == 0 { c } else { p.get(i, j - 1) };
            let n = if j + 1 == g.ny { c } else { p.get(i, j + 1) };
            out.data[g.idx(i, j)] = (e - 2.0 * c + w) / hx2 + (n - 2.0 * c + s) / hy2;
        }
    }
    out
}

/// 5-point scalar Laplacian with homogeneous Dirichlet walls (odd ghosts).
pub fn scalar_laplacian_dirichlet(p: &ScalarField) -> ScalarField {
    let g = p.grid;
    let mut out = ScalarField::zeros(g);
    let hx2 = g.hx * g.hx;
    let hy2 = g.hy * g.hy;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = p.get(i, j);
            let w = if i == 0 { -c } else { p.get(i - 1, j) };
            let e = if i + 1 == g.nx { -c } else { p.get(i + 1, j) };
            let s = if j == 0 { -c } else { p.get(i, j - 1) };
            let n = if j + 1 == g.ny { -c } else { p.get(i, j + 1) };
            out.data[g.idx(i, j)] = (e - 2.0 * c + w) / hx2 + (n - 2.0 * c + s) / hy2;
        }
    }
    out
}

/// Domain constants entering the decay estimates.
#[derive(Debug, Clone, Copy)]
pub struct DomainConstants {
    /// Best constant in ||v||_2 <= C_P ||grad v||_2 over zero-trace fields.
    pub poincare_constant: f64,
    /// Smallest eigenvalue of the discrete Dirichlet Laplacian.
    pub lambda1: f64,
    /// Domain diameter.
    pub diameter: f64,
}

/// Smallest Dirichlet-Laplacian eigenvalue by inverse power iteration
/// (zero shift), C_P = 1/sqrt(lambda1). Inner solves use CG.
pub fn poincare_constant(grid: Grid) -> Result<DomainConstants, GridError> {
    let n = grid.cells();
    let apply = |x: &[f64], out: &mut [f64]| {
        let p = ScalarField { grid, data: x.to_vec() };
        let lap = scalar_laplacian_dirichlet(&p);
        for (o, l) in out.iter_mut().zip(&lap.data) {
            *o = -l;
        }
    };
    // deterministic non-degenerate start: positive bump
    let mut x: Vec<f64> = (0..n)
        .map(|k| {
            let i = k % grid.nx;
            let j = k / grid.nx;
            let (px, py) = grid.cell_center(i, j);
            (std::f64::consts::PI * px / grid.lx).sin() * (std::f64::consts::PI * py / grid.ly).sin() + 1e-3
        })
        .collect();
    normalize(&mut x);
    let mut lambda = 0.0_f64;
    let cap = 10_000usize;
    let tol = 1e-8;
    let mut y = vec![0.0; n];
    let mut cg_scratch = crate::linalg::CgScratch::new(n);
    for it in 0..cap {
        // y = A^{-1} x
        crate::linalg::cg(
            &apply,
            None,
            &x,
            &mut y,
            1e-13,
            200_000,
            &mut cg_scratch,
        )
        .map_err(|e| GridError::EigNonConvergence { iters: it, residual: e.residual })?;
        let ynorm = norm(&y);
        // with ||x|| = 1 and y = A^{-1}x, the estimate 1/(x.y) -> lambda_1
        let lambda_new = 1.0 / dot(&x, &y).abs().max(f64::MIN_POSITIVE);
        let rel = ((lambda_new - lambda) / lambda_new).abs();
        lambda = lambda_new;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ynorm;
        }
        if it > 0 && rel < tol {
            let cp = 1.0 / lambda.sqrt();
            return Ok(DomainConstants {
                poincare_constant: cp,
                lambda1: lambda,
                diameter: grid.diameter(),
            });
        }
    }
    Err(GridError::EigNonConvergence { iters: cap, residual: f64::NAN })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    kahan_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).max(0.0).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
}
