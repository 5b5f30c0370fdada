//! Lower bounds for the Gagliardo-Nirenberg constant of the instance
//!
//! ```text
//! ||w||_4 <= C_GN (||∇w||_2^{1/2} ||w||_2^{1/2} + ||w||_2)
//! ```
//!
//! on a discretized rectangle. Every trial field gives a ratio that the
//! constant must exceed, so the running maximum is a certified lower bound
//! for the discrete constant.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{norm_unchecked, Grid, Norm, ScalarField};
use crate::operators::face_gradient_l2_squared;

/// Random trials evaluated per block between local-search phases.
const RANDOM_BLOCK: usize = 64;
/// Local-search moves per block.
const LOCAL_BLOCK: usize = 16;

/// The `(p, q, s) = (4, 2, 2)` instance in two dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnInstance {
    pub grid: Grid,
}

impl GnInstance {
    pub const P: f64 = 4.0;
    pub const Q: f64 = 2.0;
    pub const S: f64 = 2.0;
    pub const DIM: f64 = 2.0;

    pub fn new(grid: Grid) -> Self {
        Self { grid }
    }

    /// Interpolation exponent `(1/q - 1/p) / (1/q - 1/2 + 1/n)`.
    pub fn delta(&self) -> f64 {
        (1.0 / Self::Q - 1.0 / Self::P) / (1.0 / Self::Q - 0.5 + 1.0 / Self::DIM)
    }
}

/// `||w||_4 / (||∇_h w||_2^{1/2} ||w||_2^{1/2} + ||w||_2)`.
pub fn gn_ratio(w: &ScalarField, inst: &GnInstance) -> Result<f64> {
    w.ensure_finite()?;
    if w.data().iter().all(|&x| x == 0.0) {
        return Err(Error::Domain("GN ratio of the zero field".into()));
    }
    if w.grid() != &inst.grid {
        return Err(Error::Domain("field grid differs from GN instance grid".into()));
    }
    let l4 = norm_unchecked(w, Norm::L4);
    let l2 = norm_unchecked(w, Norm::L2);
    let grad = face_gradient_l2_squared(w).sqrt();
    Ok(l4 / ((grad * l2).sqrt() + l2))
}

/// Trial field shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trial {
    Constant,
    /// `exp(-|x - c|^2 / (2 width^2))`.
    Bump { cx: f64, cy: f64, width: f64 },
}

impl Trial {
    pub fn field(&self, grid: Grid) -> ScalarField {
        match *self {
            Trial::Constant => ScalarField::constant(grid, 1.0),
            Trial::Bump { cx, cy, width } => {
                let inv = 1.0 / (2.0 * width * width);
                ScalarField::from_fn(grid, |x, y| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp()
                })
            }
        }
    }
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trial::Constant => f.write_str("constant"),
            Trial::Bump { cx, cy, width } => {
                write!(f, "gaussian_bump center=({cx}, {cy}) width={width}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialFamily {
    ConstantsOnly,
    Bumps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgnEstimate {
    pub lower_bound: f64,
    pub best: Trial,
    pub evaluations: usize,
}

/// Best ratio over `budget` trials with the default bump family.
pub fn estimate_cgn(inst: &GnInstance, budget: usize, seed: u64) -> Result<CgnEstimate> {
    estimate_cgn_with(inst, budget, seed, TrialFamily::Bumps)
}

fn bump_bounds(grid: &Grid) -> (f64, f64) {
    let h = grid.hx().min(grid.hy());
    (0.25 * h, grid.lx().max(grid.ly()))
}

fn random_trial(grid: &Grid, seed: u64, index: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (wmin, wmax) = bump_bounds(grid);
    Trial::Bump {
        cx: rng.gen_range(0.0..=grid.lx()),
        cy: rng.gen_range(0.0..=grid.ly()),
        width: rng.gen_range(wmin.ln()..wmax.ln()).exp(),
    }
}

/// Coordinate ascent over `(cx, cy, ln width)` from the incumbent.
struct LocalSearch {
    coord: usize,
    sign: f64,
    steps: [f64; 3],
    failures: usize,
}

impl LocalSearch {
    fn new(grid: &Grid) -> Self {
        Self {
            coord: 0,
            sign: 1.0,
            steps: [0.1 * grid.lx(), 0.1 * grid.ly(), 0.5],
            failures: 0,
        }
    }

    fn propose(&self, best: &Trial, grid: &Grid) -> Option<Trial> {
        let Trial::Bump { cx, cy, width } = *best else {
            return None;
        };
        let d = self.sign * self.steps[self.coord];
        let (wmin, wmax) = bump_bounds(grid);
        let (cx, cy, width) = match self.coord {
            0 => ((cx + d).clamp(0.0, grid.lx()), cy, width),
            1 => (cx, (cy + d).clamp(0.0, grid.ly()), width),
            _ => (cx, cy, (width.ln() + d).exp().clamp(wmin, wmax)),
        };
        Some(Trial::Bump { cx, cy, width })
    }

    fn advance(&mut self, improved: bool) {
        if improved {
            self.failures = 0;
            return;
        }
        self.failures += 1;
        if self.sign > 0.0 {
            self.sign = -1.0;
        } else {
            self.sign = 1.0;
            self.coord = (self.coord + 1) % 3;
        }
        if self.failures >= 6 {
            self.steps.iter_mut().for_each(|s| *s *= 0.5);
            self.failures = 0;
        }
    }
}

/// Evaluates a fixed, budget-independent sequence of trials and keeps the
/// running maximum, so the estimate is nondecreasing in `budget`.
pub fn estimate_cgn_with(
    inst: &GnInstance,
    budget: usize,
    seed: u64,
    family: TrialFamily,
) -> Result<CgnEstimate> {
    if budget == 0 {
        return Err(Error::Domain("GN search budget must be positive".into()));
    }
    let grid = inst.grid;
    let ratio = |t: &Trial| gn_ratio(&t.field(grid), inst).unwrap_or(0.0);

    let mut best = Trial::Constant;
    let mut best_ratio = ratio(&best);
    let mut used = 1;
    if family == TrialFamily::ConstantsOnly {
        return Ok(CgnEstimate {
            lower_bound: best_ratio,
            best,
            evaluations: budget,
        });
    }

    let mut random_index = 0;
    let mut local = LocalSearch::new(&grid);
    while used < budget {
        let n = RANDOM_BLOCK.min(budget - used);
        let candidates: Vec<(f64, Trial)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let t = random_trial(&grid, seed, random_index + k);
                (ratio(&t), t)
            })
            .collect();
        random_index += n;
        used += n;
        for (r, t) in candidates {
            if r > best_ratio {
                best_ratio = r;
                best = t;
            }
        }
        for _ in 0..LOCAL_BLOCK {
            if used >= budget {
                break;
            }
            let Some(t) = local.propose(&best, &grid) else {
                break;
            };
            let r = ratio(&t);
            used += 1;
            let improved = r > best_ratio;
            if improved {
                best_ratio = r;
                best = t;
            }
            local.advance(improved);
        }
    }
    Ok(CgnEstimate {
        lower_bound: best_ratio,
        best,
        evaluations: used,
    })
}
