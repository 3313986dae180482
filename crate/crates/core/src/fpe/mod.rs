//! Two-dimensional Fokker-Planck steady states on a finite-volume grid.
//!
//! For a force field `F` and isotropic diffusion `σ`, the density obeys
//! `∂ρ/∂t = -∇·(Fρ - σ∇ρ)`. The grid turns this into a master equation on
//! cells with nearest-neighbor jump rates
//!
//! ```text
//! r(i -> j) = (σ / h²) · exp(F_e h / (2σ))
//! ```
//!
//! where `F_e` is the force component along the edge `i -> j`, averaged
//! over the two cell centers. The walls reflect (no rates leave the grid).
//! Detailed balance then holds exactly whenever `F_e h` are differences of a
//! potential, so conservative fields recover their Gibbs density.
//!
//! The stationary density `ρ_ss` defines the effective loss
//! `Ũ = -ln ρ_ss` and the probability flux `J = Fρ - σ∇ρ`; the force splits
//! into the effective gradient `-σ∇Ũ` plus the effective flux `J/ρ`.

mod band;
pub mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EmbeddingTable, MiniBatch};
use crate::qlinear::{bellman_loss, SolutionPair, Theta, Vec2};
use crate::{Error, Result};

use band::{gth_stationary, BandLu, BandMatrix};

/// Diffusion constant of the landscape experiments, `2^-8`.
pub const DEFAULT_SIGMA: f64 = 1.0 / 256.0;
pub const DEFAULT_CELLS: usize = 100;
pub const DEFAULT_RESOLUTION: f64 = 0.095;
pub const DEFAULT_PROPAGATION_TIME: f64 = 100_000.0;
/// Densities below this are treated as empty when taking logarithms.
pub const RHO_FLOOR: f64 = 1e-300;

/// A rectangular grid of square cells. Values are stored row-major with
/// rows along `y` (`θ(a2)`) and columns along `x` (`θ(a1)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_min: f64,
    pub y_min: f64,
    pub resolution: f64,
    pub n_x: usize,
    pub n_y: usize,
}

impl Grid2D {
    pub fn new(x_min: f64, y_min: f64, resolution: f64, n_x: usize, n_y: usize) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::precondition(format!("grid resolution {resolution} must be positive")));
        }
        if n_x == 0 || n_y == 0 {
            return Err(Error::precondition("grid needs at least one cell per axis"));
        }
        if !(x_min.is_finite() && y_min.is_finite()) {
            return Err(Error::precondition("grid origin must be finite"));
        }
        Ok(Grid2D { x_min, y_min, resolution, n_x, n_y })
    }

    /// An `n x n` grid whose center is `center`.
    pub fn centered(center: Theta, n: usize, resolution: f64) -> Result<Self> {
        let half = 0.5 * n as f64 * resolution;
        Grid2D::new(center.a1 - half, center.a2 - half, resolution, n, n)
    }

    /// Grid covering `[x_lo, x_hi] x [y_lo, y_hi]` with cells of `resolution`
    /// (the cell count rounds to the nearest integer).
    pub fn from_extent(extent: [f64; 4], resolution: f64) -> Result<Self> {
        let [x_lo, x_hi, y_lo, y_hi] = extent;
        if !(x_hi > x_lo && y_hi > y_lo) {
            return Err(Error::precondition("extent must be x_min,x_max,y_min,y_max with max > min"));
        }
        let n_x = ((x_hi - x_lo) / resolution).round().max(1.0) as usize;
        let n_y = ((y_hi - y_lo) / resolution).round().max(1.0) as usize;
        Grid2D::new(x_lo, y_lo, resolution, n_x, n_y)
    }

    /// 100 x 100 cells of 0.095 around the midpoint of both solutions, or
    /// around the only one.
    pub fn default_for(solutions: &SolutionPair) -> Result<Self> {
        let center = solutions
            .center()
            .ok_or_else(|| Error::precondition("the batch has no solution to center the grid on"))?;
        Grid2D::centered(center, DEFAULT_CELLS, DEFAULT_RESOLUTION)
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n_x + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.n_x, k / self.n_x)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Theta {
        Theta::new(
            self.x_min + (i as f64 + 0.5) * self.resolution,
            self.y_min + (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing `theta` (clamped to the grid), or `None` when the
    /// point lies outside.
    pub fn nearest_cell(&self, theta: Theta) -> Option<(usize, usize)> {
        let fx = (theta.a1 - self.x_min) / self.resolution;
        let fy = (theta.a2 - self.y_min) / self.resolution;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= self.n_x as f64 && fy <= self.n_y as f64) {
            return None;
        }
        Some(((fx as usize).min(self.n_x - 1), (fy as usize).min(self.n_y - 1)))
    }

    /// Whether `(i, j)` is at least `margin` cells away from every wall.
    pub fn is_interior(&self, i: usize, j: usize, margin: usize) -> bool {
        i >= margin && j >= margin && i + margin < self.n_x && j + margin < self.n_y
    }
}

/// Scalar values on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// Whether cell `(i, j)` is no larger than any of its eight neighbors.
    pub fn is_local_min(&self, i: usize, j: usize) -> bool {
        let v = self.get(i, j);
        for dj in -1isize..=1 {
            for di in -1isize..=1 {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if (di, dj) == (0, 0) || ni < 0 || nj < 0 {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if ni < self.grid.n_x && nj < self.grid.n_y && self.get(ni, nj) < v {
                    return false;
                }
            }
        }
        true
    }
}

/// A force vector per cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    pub grid: Grid2D,
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
}

impl ForceField {
    pub fn at(&self, k: usize) -> Vec2 {
        [self.fx[k], self.fy[k]]
    }

    pub fn max_norm(&self) -> f64 {
        self.fx
            .iter()
            .zip(&self.fy)
            .map(|(x, y)| x.abs().max(y.abs()))
            .fold(0.0, f64::max)
    }
}

/// Evaluates `force` at every cell center.
pub fn sample_force_field<F>(force: F, grid: Grid2D) -> Result<ForceField>
where
    F: Fn(Theta) -> Vec2 + Sync,
{
    let values: Vec<Vec2> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = grid.coords(k);
            force(grid.cell_center(i, j))
        })
        .collect();
    for (k, v) in values.iter().enumerate() {
        if !(v[0].is_finite() && v[1].is_finite()) {
            let (i, j) = grid.coords(k);
            return Err(Error::NonFiniteForce { i, j, value: *v });
        }
    }
    Ok(ForceField {
        grid,
        fx: values.iter().map(|v| v[0]).collect(),
        fy: values.iter().map(|v| v[1]).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Implicit-Euler propagation from the uniform density.
    Propagate,
    /// Direct stationary solve of the master equation.
    Nullspace,
}

impl std::str::FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propagate" => Ok(SolverMode::Propagate),
            "nullspace" => Ok(SolverMode::Nullspace),
            other => Err(Error::Parse(format!("unknown solver mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpeConfig {
    /// Diffusion constant; the diffusion matrix is `σ I`.
    pub sigma: f64,
    pub propagation_time: f64,
    /// Implicit-Euler step used by `Propagate`.
    pub time_step: f64,
    pub solver_mode: SolverMode,
    /// Accepted stationarity residual, relative to the operator's
    /// infinity norm.
    pub steady_tolerance: f64,
}

impl Default for FpeConfig {
    fn default() -> Self {
        FpeConfig {
            sigma: DEFAULT_SIGMA,
            propagation_time: DEFAULT_PROPAGATION_TIME,
            time_step: 100.0,
            solver_mode: SolverMode::Nullspace,
            steady_tolerance: 1e-10,
        }
    }
}

impl FpeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::precondition(format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.propagation_time >= 0.0) {
            return Err(Error::precondition("propagation time must be non-negative"));
        }
        if self.solver_mode == SolverMode::Propagate && !(self.time_step > 0.0) {
            return Err(Error::precondition("propagation needs a positive time step"));
        }
        Ok(())
    }
}

/// Jump rates of the discretized operator, four per cell in the order
/// `+x, -x, +y, -y`; zero where the neighbor is off the grid.
struct EdgeRates {
    grid: Grid2D,
    rates: Vec<[f64; 4]>,
}

impl EdgeRates {
    fn neighbor(grid: &Grid2D, k: usize, dir: usize) -> Option<usize> {
        let (i, j) = grid.coords(k);
        match dir {
            0 if i + 1 < grid.n_x => Some(k + 1),
            1 if i > 0 => Some(k - 1),
            2 if j + 1 < grid.n_y => Some(k + grid.n_x),
            3 if j > 0 => Some(k - grid.n_x),
            _ => None,
        }
    }

    fn build(field: &ForceField, sigma: f64) -> Result<Self> {
        let grid = field.grid;
        let h = grid.resolution;
        let base = sigma / (h * h);
        let mut rates = vec![[0.0; 4]; grid.len()];
        for (k, slot) in rates.iter_mut().enumerate() {
            for (dir, r) in slot.iter_mut().enumerate() {
                let Some(nb) = Self::neighbor(&grid, k, dir) else { continue };
                let along = match dir {
                    0 => 0.5 * (field.fx[k] + field.fx[nb]),
                    1 => -0.5 * (field.fx[k] + field.fx[nb]),
                    2 => 0.5 * (field.fy[k] + field.fy[nb]),
                    _ => -0.5 * (field.fy[k] + field.fy[nb]),
                };
                let exponent = along * h / (2.0 * sigma);
                if exponent.abs() > 700.0 {
                    return Err(Error::RateOverflow { exponent, from: k, to: nb });
                }
                *r = base * exponent.exp();
            }
        }
        Ok(EdgeRates { grid, rates })
    }

    fn outflow(&self, k: usize) -> f64 {
        self.rates[k].iter().sum()
    }

    /// `dρ/dt` for the master equation.
    fn apply(&self, rho: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..rho.len()).map(|k| -self.outflow(k) * rho[k]).collect();
        for k in 0..rho.len() {
            for dir in 0..4 {
                if let Some(nb) = Self::neighbor(&self.grid, k, dir) {
                    out[nb] += self.rates[k][dir] * rho[k];
                }
            }
        }
        out
    }

    /// Infinity norm of the generator acting on densities.
    fn operator_norm(&self) -> f64 {
        let mut row = vec![0.0; self.rates.len()];
        for (k, r) in row.iter_mut().enumerate() {
            *r += self.outflow(k);
            for dir in 0..4 {
                if let Some(nb) = Self::neighbor(&self.grid, k, dir) {
                    // rate nb -> k; the reverse direction index flips the low bit
                    *r += self.rates[nb][dir ^ 1];
                }
            }
        }
        row.into_iter().fold(0.0, f64::max)
    }

    fn jump_matrix(&self) -> BandMatrix {
        let mut m = BandMatrix::zeros(self.grid.len(), self.grid.n_x);
        for k in 0..self.grid.len() {
            for dir in 0..4 {
                if let Some(nb) = Self::neighbor(&self.grid, k, dir) {
                    m.set(k, nb, self.rates[k][dir]);
                }
            }
        }
        m
    }

    /// `I - dt Q` in the density ordering (row = destination).
    fn implicit_matrix(&self, dt: f64) -> BandMatrix {
        let mut m = BandMatrix::zeros(self.grid.len(), self.grid.n_x);
        for k in 0..self.grid.len() {
            m.set(k, k, 1.0 + dt * self.outflow(k));
            for dir in 0..4 {
                if let Some(nb) = Self::neighbor(&self.grid, k, dir) {
                    m.set(nb, k, -dt * self.rates[k][dir]);
                }
            }
        }
        m
    }
}

/// Stationary density, effective loss and flux of a force field.
#[derive(Clone, Debug)]
pub struct StationaryResult {
    pub grid: Grid2D,
    pub sigma: f64,
    /// Probability mass per cell, summing to one.
    pub rho: Vec<f64>,
    /// `-ln ρ`, shifted so its minimum is zero.
    pub u_eff: Vec<f64>,
    pub flux_x: Vec<f64>,
    pub flux_y: Vec<f64>,
    /// Infinity norm of `dρ/dt` at the returned density.
    pub residual_norm: f64,
    /// Absolute residual bound that was enforced.
    pub tolerance: f64,
    /// Largest deviation of the total mass from one during propagation.
    pub mass_drift: f64,
    /// Cells whose density is below [`RHO_FLOOR`] or whose difference
    /// stencil touches such a cell; flux is reported as zero there.
    pub masked: Vec<usize>,
}

impl StationaryResult {
    pub fn rho_grid(&self) -> ScalarGrid {
        ScalarGrid { grid: self.grid, values: self.rho.clone() }
    }

    pub fn u_eff_grid(&self) -> ScalarGrid {
        ScalarGrid { grid: self.grid, values: self.u_eff.clone() }
    }
}

/// Central difference of `values` at `(i, j)`, one-sided on the walls.
/// `None` if any value used is not finite.
fn gradient_at(grid: &Grid2D, values: &[f64], i: usize, j: usize) -> Option<Vec2> {
    let h = grid.resolution;
    let v = |i: usize, j: usize| values[grid.index(i, j)];
    let diff = |lo: f64, hi: f64, span: f64| {
        let d = (hi - lo) / span;
        d.is_finite().then_some(d)
    };
    let gx = if grid.n_x == 1 {
        Some(0.0)
    } else if i == 0 {
        diff(v(0, j), v(1, j), h)
    } else if i + 1 == grid.n_x {
        diff(v(i - 1, j), v(i, j), h)
    } else {
        diff(v(i - 1, j), v(i + 1, j), 2.0 * h)
    }?;
    let gy = if grid.n_y == 1 {
        Some(0.0)
    } else if j == 0 {
        diff(v(i, 0), v(i, 1), h)
    } else if j + 1 == grid.n_y {
        diff(v(i, j - 1), v(i, j), h)
    } else {
        diff(v(i, j - 1), v(i, j + 1), 2.0 * h)
    }?;
    Some([gx, gy])
}

fn propagate(rates: &EdgeRates, cfg: &FpeConfig) -> (Vec<f64>, f64) {
    let n = rates.grid.len();
    let mut rho = vec![1.0 / n as f64; n];
    let steps = (cfg.propagation_time / cfg.time_step).round() as usize;
    if steps == 0 {
        return (rho, 0.0);
    }
    let dt = cfg.propagation_time / steps as f64;
    let lu = BandLu::factor(rates.implicit_matrix(dt));
    let mut drift: f64 = 0.0;
    for _ in 0..steps {
        lu.solve_in_place(&mut rho);
        drift = drift.max((rho.iter().sum::<f64>() - 1.0).abs());
    }
    (rho, drift)
}

/// Stationary solution of the discretized Fokker-Planck equation.
pub fn steady_state(field: &ForceField, cfg: &FpeConfig) -> Result<StationaryResult> {
    cfg.validate()?;
    let grid = field.grid;
    if let Some(k) = (0..grid.len()).find(|&k| !(field.fx[k].is_finite() && field.fy[k].is_finite())) {
        let (i, j) = grid.coords(k);
        return Err(Error::NonFiniteForce { i, j, value: field.at(k) });
    }
    let rates = EdgeRates::build(field, cfg.sigma)?;

    let (mut rho, mass_drift) = match cfg.solver_mode {
        SolverMode::Nullspace if grid.len() == 1 => (vec![1.0], 0.0),
        SolverMode::Nullspace => (gth_stationary(rates.jump_matrix()), 0.0),
        SolverMode::Propagate => propagate(&rates, cfg),
    };
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|p| *p /= total);

    let residual_norm = rates.apply(&rho).into_iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tolerance = cfg.steady_tolerance * rates.operator_norm();
    if !(residual_norm <= tolerance) {
        return Err(Error::NotConverged { residual: residual_norm, tolerance });
    }

    let neg_log: Vec<f64> = rho
        .iter()
        .map(|&p| if p > RHO_FLOOR { -p.ln() } else { f64::INFINITY })
        .collect();
    let floor = neg_log.iter().copied().fold(f64::INFINITY, f64::min);
    let u_eff: Vec<f64> = neg_log.iter().map(|u| u - floor).collect();

    // J = Fρ - σ∇ρ with ∇ρ taken as ρ ∇ln ρ, which stays accurate where the
    // density changes by large factors from cell to cell.
    let mut flux_x = vec![0.0; grid.len()];
    let mut flux_y = vec![0.0; grid.len()];
    let mut masked = Vec::new();
    for k in 0..grid.len() {
        let (i, j) = grid.coords(k);
        match gradient_at(&grid, &u_eff, i, j) {
            Some([gx, gy]) if rho[k] > RHO_FLOOR => {
                flux_x[k] = rho[k] * (field.fx[k] + cfg.sigma * gx);
                flux_y[k] = rho[k] * (field.fy[k] + cfg.sigma * gy);
            }
            _ => masked.push(k),
        }
    }

    Ok(StationaryResult {
        grid,
        sigma: cfg.sigma,
        rho,
        u_eff,
        flux_x,
        flux_y,
        residual_norm,
        tolerance,
        mass_drift,
        masked,
    })
}

/// The force split into its effective-gradient and effective-flux parts.
#[derive(Clone, Debug)]
pub struct Decomposition {
    /// `-σ∇Ũ`.
    pub gradient: ForceField,
    /// `J / ρ`.
    pub flux: ForceField,
    /// Cells where the split is undefined (set to zero in both fields).
    pub masked: Vec<usize>,
}

pub fn decompose_force(field: &ForceField, result: &StationaryResult) -> Result<Decomposition> {
    if field.grid != result.grid {
        return Err(Error::precondition("force field and stationary result use different grids"));
    }
    let grid = field.grid;
    let n = grid.len();
    let mut gradient = ForceField { grid, fx: vec![0.0; n], fy: vec![0.0; n] };
    let mut flux = gradient.clone();
    let mut masked = result.masked.clone();
    for k in 0..n {
        if result.masked.binary_search(&k).is_ok() {
            continue;
        }
        let (i, j) = grid.coords(k);
        match gradient_at(&grid, &result.u_eff, i, j) {
            Some([gx, gy]) => {
                gradient.fx[k] = -result.sigma * gx;
                gradient.fy[k] = -result.sigma * gy;
                flux.fx[k] = result.flux_x[k] / result.rho[k];
                flux.fy[k] = result.flux_y[k] / result.rho[k];
            }
            None => masked.push(k),
        }
    }
    masked.sort_unstable();
    masked.dedup();
    Ok(Decomposition { gradient, flux, masked })
}

/// The Bellman loss itself at every cell center.
pub fn direct_loss_grid(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64, grid: Grid2D) -> Result<ScalarGrid> {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = grid.coords(k);
            bellman_loss(batch, emb, gamma, grid.cell_center(i, j))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScalarGrid { grid, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Minimum,
    Maximum,
    Saddle,
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub kind: CriticalKind,
    pub cell: (usize, usize),
    /// Hessian eigenvalues, ascending.
    pub eigenvalues: Vec2,
}

/// Finite-difference Hessian of a scalar grid at `(i, j)`, using neighbors
/// `step` cells away.
pub fn hessian_at(values: &ScalarGrid, i: usize, j: usize, step: usize) -> Result<[[f64; 2]; 2]> {
    let g = &values.grid;
    if step == 0 || !g.is_interior(i, j, step) {
        return Err(Error::precondition(format!(
            "cell ({i}, {j}) is within {step} cells of the wall; the Hessian stencil does not fit"
        )));
    }
    let d = step as f64 * g.resolution;
    let v = |di: isize, dj: isize| {
        values.get(
            (i as isize + di * step as isize) as usize,
            (j as isize + dj * step as isize) as usize,
        )
    };
    let c = v(0, 0);
    let uxx = (v(1, 0) - 2.0 * c + v(-1, 0)) / (d * d);
    let uyy = (v(0, 1) - 2.0 * c + v(0, -1)) / (d * d);
    let uxy = (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / (4.0 * d * d);
    let h = [[uxx, uxy], [uxy, uyy]];
    if h.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::precondition(format!("non-finite values around cell ({i}, {j})")));
    }
    Ok(h)
}

/// Classifies the landscape at the cell containing `theta` by the signs of
/// the finite-difference Hessian eigenvalues.
pub fn classify_critical_point(values: &ScalarGrid, theta: Theta, step: usize) -> Result<CriticalPoint> {
    let (i, j) = values
        .grid
        .nearest_cell(theta)
        .ok_or_else(|| Error::precondition(format!("({}, {}) lies outside the grid", theta.a1, theta.a2)))?;
    let [[a, b], [_, d]] = hessian_at(values, i, j, step)?;
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let eigenvalues = [mean - radius, mean + radius];
    let kind = if eigenvalues[0] > 0.0 {
        CriticalKind::Minimum
    } else if eigenvalues[1] < 0.0 {
        CriticalKind::Maximum
    } else if eigenvalues[0] < 0.0 && eigenvalues[1] > 0.0 {
        CriticalKind::Saddle
    } else {
        CriticalKind::Degenerate
    };
    Ok(CriticalPoint { kind, cell: (i, j), eigenvalues })
}
