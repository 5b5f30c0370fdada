//! Conjugate-gradient solves of `(sigma I - kappa Δ_h) x = b` with the
//! Neumann Laplacian from [`crate::operators`].
//!
//! The operator is symmetric positive definite for `sigma > 0, kappa >= 0`.
//! `sigma = kappa = 1` is the quasi-static signal equation `v - Δv = u`.

use crate::error::{Error, Result};
use crate::grid::{norm_unchecked, Grid, Norm, ScalarField};
use crate::operators::{laplacian_diagonal, laplacian_into};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticOptions {
    /// Relative residual target `||A x - b||_2 <= tol ||b||_2`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 * (nx + ny)`.
    pub max_iters: Option<usize>,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: None,
        }
    }
}

impl EllipticOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Construction(format!(
                "elliptic tolerance must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    pub fn iteration_cap(&self, grid: &Grid) -> usize {
        self.max_iters.unwrap_or(10 * (grid.nx() + grid.ny()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    /// Plain CG. Residuals stay mean-free when the initial residual is, so
    /// `sum(x)` is preserved for `sigma = 1` operators.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Scratch vectors for one CG solve at a time.
#[derive(Debug, Clone)]
pub struct CgWorkspace {
    grid: Grid,
    lap_diag: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CgWorkspace {
    pub fn new(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            lap_diag: laplacian_diagonal(&grid),
            r: vec![0.0; n],
            z: vec![0.0; n],
            p: vec![0.0; n],
            ap: vec![0.0; n],
        }
    }

    fn apply(grid: &Grid, sigma: f64, kappa: f64, x: &[f64], out: &mut [f64]) {
        laplacian_into(grid, x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = sigma * xi - kappa * *o;
        }
    }

    /// Solves in place, using the incoming `x` as the initial guess.
    pub fn solve(
        &mut self,
        sigma: f64,
        kappa: f64,
        b: &[f64],
        x: &mut [f64],
        opts: &EllipticOptions,
        precond: Preconditioner,
    ) -> Result<SolveStats> {
        opts.validate()?;
        if !(sigma > 0.0 && kappa >= 0.0) {
            return Err(Error::Domain(format!(
                "operator sigma I - kappa Δ needs sigma > 0, kappa >= 0 (got {sigma}, {kappa})"
            )));
        }
        let grid = self.grid;
        let b_norm = dot(b, b).sqrt();
        if !b_norm.is_finite() {
            return Err(Error::Domain("non-finite right-hand side".into()));
        }
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            });
        }
        let target = opts.tol * b_norm;
        let cap = opts.iteration_cap(&grid);
        let inv_diag: Vec<f64> = match precond {
            Preconditioner::Jacobi => self
                .lap_diag
                .iter()
                .map(|d| 1.0 / (sigma - kappa * d))
                .collect(),
            Preconditioner::Identity => Vec::new(),
        };

        let mut iterations = 0;
        // Restart from the current iterate if the recursive residual drifted.
        for _attempt in 0..3 {
            Self::apply(&grid, sigma, kappa, x, &mut self.r);
            for (ri, bi) in self.r.iter_mut().zip(b) {
                *ri = bi - *ri;
            }
            let mut res = dot(&self.r, &self.r).sqrt();
            if res <= target {
                return Ok(SolveStats {
                    iterations,
                    relative_residual: res / b_norm,
                });
            }
            let precondition = |r: &[f64], z: &mut [f64]| match precond {
                Preconditioner::Jacobi => {
                    for ((zi, ri), di) in z.iter_mut().zip(r).zip(&inv_diag) {
                        *zi = ri * di;
                    }
                }
                Preconditioner::Identity => z.copy_from_slice(r),
            };
            precondition(&self.r, &mut self.z);
            self.p.copy_from_slice(&self.z);
            let mut rz = dot(&self.r, &self.z);
            while iterations < cap {
                iterations += 1;
                Self::apply(&grid, sigma, kappa, &self.p, &mut self.ap);
                let alpha = rz / dot(&self.p, &self.ap);
                for ((xi, pi), (ri, api)) in x
                    .iter_mut()
                    .zip(&self.p)
                    .zip(self.r.iter_mut().zip(&self.ap))
                {
                    *xi += alpha * pi;
                    *ri -= alpha * api;
                }
                res = dot(&self.r, &self.r).sqrt();
                if !res.is_finite() {
                    return Err(Error::SolverFailure {
                        iterations,
                        residual: res,
                    });
                }
                if res <= target {
                    break;
                }
                precondition(&self.r, &mut self.z);
                let rz_new = dot(&self.r, &self.z);
                let beta = rz_new / rz;
                rz = rz_new;
                for (pi, zi) in self.p.iter_mut().zip(&self.z) {
                    *pi = zi + beta * *pi;
                }
            }
            if res > target {
                break;
            }
        }
        Self::apply(&grid, sigma, kappa, x, &mut self.r);
        let true_res = self
            .r
            .iter()
            .zip(b)
            .map(|(a, bi)| (bi - a) * (bi - a))
            .sum::<f64>()
            .sqrt();
        if true_res <= target {
            Ok(SolveStats {
                iterations,
                relative_residual: true_res / b_norm,
            })
        } else {
            Err(Error::SolverFailure {
                iterations,
                residual: true_res / b_norm,
            })
        }
    }
}

/// Solves `(I - Δ_h) v = u`, starting from `v = u`.
pub fn solve_helmholtz(u: &ScalarField, opts: &EllipticOptions) -> Result<ScalarField> {
    solve_helmholtz_from(u, u, opts)
}

/// Solves `(I - Δ_h) v = u` warm-started from `guess`, then checks the
/// discrete maximum principle when `u >= 0`.
pub fn solve_helmholtz_from(
    u: &ScalarField,
    guess: &ScalarField,
    opts: &EllipticOptions,
) -> Result<ScalarField> {
    u.ensure_finite()?;
    let grid = *u.grid();
    let mut v = guess.clone();
    if !v.data().iter().all(|x| x.is_finite()) {
        v = u.clone();
    }
    let mut ws = CgWorkspace::new(grid);
    ws.solve(1.0, 1.0, u.data(), v.data_mut(), opts, Preconditioner::Jacobi)?;
    check_maximum_principle(u, &v, opts.tol)?;
    Ok(v)
}

pub(crate) fn check_maximum_principle(u: &ScalarField, v: &ScalarField, tol: f64) -> Result<()> {
    if u.min() >= 0.0 {
        let slack = -10.0 * tol * norm_unchecked(u, Norm::L2);
        if let Some(index) = v.data().iter().position(|&x| x < slack) {
            return Err(Error::PositivityViolation {
                index,
                value: v.data()[index],
            });
        }
    }
    Ok(())
}
