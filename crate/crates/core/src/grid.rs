//! Uniform cell-centered rectangular grids and scalar fields on them.
//!
//! Cells are indexed row-major: cell `(i, j)` (column `i` along x, row `j`
//! along y) lives at `j * nx + i`, with its center at
//! `((i + 1/2) hx, (j + 1/2) hy)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Smallest admissible cell count per axis.
pub const MIN_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(Error::Construction(format!(
                "grid needs at least {MIN_CELLS} cells per axis, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::Construction(format!(
                "side lengths must be positive and finite, got {lx} x {ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// Unit square with `n x n` cells.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    /// Measure of the domain, `lx * ly`.
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Cell center of column `i`, row `j`.
    #[inline]
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy())
    }
}

/// Norms supported by [`norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    L4,
    Linf,
}

/// One real value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Construction(format!(
                "field needs {} values, got {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let (x, y) = grid.center(i, j);
                data.push(f(x, y));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ScalarField) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::DivergedField {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn ensure_nonnegative(&self) -> Result<()> {
        self.ensure_finite()?;
        match self.data.iter().position(|&x| x < 0.0) {
            Some(index) => Err(Error::PositivityViolation {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    /// Writes the snapshot format: a `CHEMOFIELD v1 nx ny lx ly t` header
    /// followed by one value per line in row-major order.
    pub fn write_snapshot(&self, mut w: impl Write, t: f64) -> std::io::Result<()> {
        let g = &self.grid;
        let mut buf = String::with_capacity(24 * (self.data.len() + 1));
        writeln!(buf, "CHEMOFIELD v1 {} {} {} {} {}", g.nx, g.ny, g.lx, g.ly, t).unwrap();
        for x in &self.data {
            writeln!(buf, "{x}").unwrap();
        }
        w.write_all(buf.as_bytes())
    }

    pub fn save_snapshot(&self, path: &Path, t: f64) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_snapshot(&mut w, t)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a snapshot, returning the field and its time stamp.
    pub fn read_snapshot(r: impl BufRead) -> Result<(Self, f64)> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| Error::Parse(e.to_string()))?,
            None => return Err(Error::Parse("empty snapshot".into())),
        };
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 7 || parts[0] != "CHEMOFIELD" || parts[1] != "v1" {
            return Err(Error::Parse(format!("bad snapshot header: {header:?}")));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
        };
        let parse_n = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
        };
        let grid = Grid::new(
            parse_n(parts[2])?,
            parse_n(parts[3])?,
            parse_f(parts[4])?,
            parse_f(parts[5])?,
        )?;
        let t = parse_f(parts[6])?;
        let mut data = Vec::with_capacity(grid.len());
        for line in lines {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            data.push(parse_f(line)?);
        }
        Ok((Self::from_vec(grid, data)?, t))
    }
}

/// Discrete integral over the domain: `cell_area * sum(data)`.
pub fn integrate(field: &ScalarField) -> Result<f64> {
    field.ensure_finite()?;
    Ok(sum_unchecked(field))
}

pub(crate) fn sum_unchecked(field: &ScalarField) -> f64 {
    field.grid.cell_area() * field.data.iter().sum::<f64>()
}

/// Discrete L^p norm, `(cell_area * sum |x|^p)^(1/p)`, or the max norm.
pub fn norm(field: &ScalarField, p: Norm) -> Result<f64> {
    field.ensure_finite()?;
    Ok(norm_unchecked(field, p))
}

pub(crate) fn norm_unchecked(field: &ScalarField, p: Norm) -> f64 {
    let a = field.grid.cell_area();
    let d = &field.data;
    match p {
        Norm::L1 => a * d.iter().map(|x| x.abs()).sum::<f64>(),
        Norm::L2 => (a * d.iter().map(|x| x * x).sum::<f64>()).sqrt(),
        Norm::L4 => (a * d.iter().map(|x| (x * x) * (x * x)).sum::<f64>())
            .sqrt()
            .sqrt(),
        Norm::Linf => d.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

/// `s ln s`, continuously extended by 0 at `s = 0`.
#[inline]
pub fn s_ln_s(s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        s * s.ln()
    }
}

/// Discrete `∫ u ln u` for a nonnegative field.
pub fn entropy_integrand(u: &ScalarField) -> Result<f64> {
    u.ensure_nonnegative()?;
    Ok(u.grid.cell_area() * u.data.iter().map(|&s| s_ln_s(s)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(n: usize) -> Grid {
        Grid::unit_square(n).unwrap()
    }

    #[test]
    fn rejects_small_or_degenerate_grids() {
        assert!(Grid::new(3, 8, 1.0, 1.0).is_err());
        assert!(Grid::new(8, 8, 0.0, 1.0).is_err());
        assert!(Grid::new(8, 8, 1.0, f64::NAN).is_err());
        let g = Grid::new(8, 4, 2.0, 3.0).unwrap();
        assert_eq!(g.cell_area(), 0.25 * 0.75);
        assert_eq!(g.area(), 6.0);
    }

    #[test]
    fn integrate_constants() {
        let f = ScalarField::constant(unit(16), 1.0);
        assert!((integrate(&f).unwrap() - 1.0).abs() < 1e-14);
        let g = Grid::new(10, 7, 2.5, 0.4).unwrap();
        let f = ScalarField::constant(g, 3.0);
        assert!((integrate(&f).unwrap() - 3.0 * 2.5 * 0.4).abs() < 1e-13);
    }

    #[test]
    fn midpoint_rule_exact_for_linear() {
        let f = ScalarField::from_fn(unit(64), |x, _| x);
        assert!((integrate(&f).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn integrate_rejects_non_finite() {
        let mut f = ScalarField::constant(unit(4), 1.0);
        f.data_mut()[5] = f64::NAN;
        assert!(matches!(
            integrate(&f),
            Err(Error::DivergedField { index: 5, .. })
        ));
        assert!(norm(&f, Norm::L2).is_err());
    }

    #[test]
    fn norm_examples() {
        let f = ScalarField::constant(unit(8), 1.0);
        for p in [Norm::L1, Norm::L2, Norm::L4, Norm::Linf] {
            assert!((norm(&f, p).unwrap() - 1.0).abs() < 1e-14);
        }
        let mut spike = ScalarField::zeros(unit(8));
        spike.data_mut()[17] = 5.0;
        assert_eq!(norm(&spike, Norm::Linf).unwrap(), 5.0);

        let half = ScalarField::from_fn(unit(8), |x, _| if x < 0.5 { 1.0 } else { 0.0 });
        assert!((norm(&half, Norm::L2).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn entropy_examples() {
        let g = unit(8);
        assert_eq!(entropy_integrand(&ScalarField::constant(g, 1.0)).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((entropy_integrand(&ScalarField::constant(g, e)).unwrap() - e).abs() < 1e-13);
        let half = entropy_integrand(&ScalarField::constant(g, 0.5)).unwrap();
        assert!((half + 0.5 * 2f64.ln()).abs() < 1e-14);
        assert_eq!(entropy_integrand(&ScalarField::zeros(g)).unwrap(), 0.0);
    }

    #[test]
    fn entropy_rejects_negative() {
        let mut f = ScalarField::constant(unit(4), 1.0);
        f.data_mut()[3] = -1e-9;
        assert!(matches!(
            entropy_integrand(&f),
            Err(Error::PositivityViolation { index: 3, .. })
        ));
    }

    #[test]
    fn snapshot_header_and_roundtrip() {
        let g = Grid::new(5, 4, 1.5, 2.0).unwrap();
        let f = ScalarField::from_fn(g, |x, y| x.sin() + 1e-17 * y);
        let mut buf = Vec::new();
        f.write_snapshot(&mut buf, 0.25).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("CHEMOFIELD v1 5 4 1.5 2 0.25\n"));
        assert_eq!(text.lines().count(), 21);
        let (back, t) = ScalarField::read_snapshot(&buf[..]).unwrap();
        assert_eq!(t, 0.25);
        assert_eq!(back, f);
    }

    fn field_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-10.0..10.0f64, 36),
            prop::collection::vec(-10.0..10.0f64, 36),
        )
    }

    proptest! {
        #[test]
        fn integrate_is_linear((a, b) in field_strategy(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
            let g = Grid::new(6, 6, 1.3, 0.7).unwrap();
            let f = ScalarField::from_vec(g, a).unwrap();
            let h = ScalarField::from_vec(g, b).unwrap();
            let combo = f.scaled(alpha).axpy(beta, &h);
            let lhs = integrate(&combo).unwrap();
            let rhs = alpha * integrate(&f).unwrap() + beta * integrate(&h).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn norms_homogeneous_and_subadditive((a, b) in field_strategy(), c in -5.0..5.0f64) {
            let g = Grid::new(6, 6, 1.0, 2.0).unwrap();
            let f = ScalarField::from_vec(g, a).unwrap();
            let h = ScalarField::from_vec(g, b).unwrap();
            for p in [Norm::L1, Norm::L2, Norm::L4, Norm::Linf] {
                let nf = norm(&f, p).unwrap();
                let nh = norm(&h, p).unwrap();
                let scaled = norm(&f.scaled(c), p).unwrap();
                prop_assert!((scaled - c.abs() * nf).abs() <= 1e-12 * (1.0 + nf));
                let sum = norm(&f.axpy(1.0, &h), p).unwrap();
                prop_assert!(sum <= nf + nh + 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_below(a in prop::collection::vec(0.0..5.0f64, 64)) {
            let g = Grid::new(8, 8, 2.0, 0.5).unwrap();
            let f = ScalarField::from_vec(g, a).unwrap();
            let lower = -(-1.0f64).exp() * g.area();
            prop_assert!(entropy_integrand(&f).unwrap() >= lower - 1e-15);
        }
    }
}
