//! Matrix-free finite-volume operators with homogeneous Neumann boundaries.
//!
//! Boundary cells see a mirrored ghost layer, so every boundary face carries
//! zero flux. All divergences are written as differences of face fluxes and
//! telescope to zero over the domain.

use crate::error::Result;
use crate::grid::{Grid, ScalarField};

/// Face value used in the chemotactic flux `chi * u_face * dv/dn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FluxScheme {
    /// Takes `u` from the cell the flux leaves. Keeps `u >= 0` under the
    /// advective CFL restriction.
    #[default]
    Upwind,
    /// Arithmetic mean of the two cells. Second order, no positivity guarantee.
    Central,
}

/// Ghost-padded copies of the operands plus face flux buffers.
///
/// Padded arrays are `(nx + 2) x (ny + 2)`, row-major, with the ghost layer
/// mirroring the adjacent interior cell.
#[derive(Debug, Clone)]
pub struct StencilWorkspace {
    grid: Grid,
    u_pad: Vec<f64>,
    v_pad: Vec<f64>,
    /// Fluxes through x-faces, `(nx + 1) x ny`.
    flux_x: Vec<f64>,
    /// Fluxes through y-faces, `nx x (ny + 1)`.
    flux_y: Vec<f64>,
}

impl StencilWorkspace {
    pub fn new(grid: Grid) -> Self {
        let padded = (grid.nx() + 2) * (grid.ny() + 2);
        Self {
            grid,
            u_pad: vec![0.0; padded],
            v_pad: vec![0.0; padded],
            flux_x: vec![0.0; (grid.nx() + 1) * grid.ny()],
            flux_y: vec![0.0; grid.nx() * (grid.ny() + 1)],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn pad(grid: &Grid, src: &[f64], dst: &mut [f64]) {
        let (nx, ny) = (grid.nx(), grid.ny());
        let w = nx + 2;
        for j in 0..ny {
            let row = &src[j * nx..(j + 1) * nx];
            let out = &mut dst[(j + 1) * w..(j + 2) * w];
            out[1..=nx].copy_from_slice(row);
            out[0] = row[0];
            out[nx + 1] = row[nx - 1];
        }
        dst.copy_within(w..2 * w, 0);
        dst.copy_within(ny * w..(ny + 1) * w, (ny + 1) * w);
    }

    /// Ghost-padded view of the last `u` operand.
    pub fn padded_u(&self) -> &[f64] {
        &self.u_pad
    }

    /// Face fluxes from the last [`Self::chemotactic_divergence_into`] call.
    pub fn face_fluxes(&self) -> (&[f64], &[f64]) {
        (&self.flux_x, &self.flux_y)
    }

    /// Writes `-chi * div(u grad v)` in face-flux form into `out`.
    pub fn chemotactic_divergence_into(
        &mut self,
        u: &[f64],
        v: &[f64],
        chi: f64,
        scheme: FluxScheme,
        out: &mut [f64],
    ) {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let (hx, hy) = (g.hx(), g.hy());
        let w = nx + 2;
        Self::pad(&g, u, &mut self.u_pad);
        Self::pad(&g, v, &mut self.v_pad);
        let up = &self.u_pad;
        let vp = &self.v_pad;

        let face = |ul: f64, ur: f64, grad: f64| -> f64 {
            let uf = match scheme {
                FluxScheme::Upwind => {
                    if grad > 0.0 {
                        ul
                    } else {
                        ur
                    }
                }
                FluxScheme::Central => 0.5 * (ul + ur),
            };
            chi * uf * grad
        };

        // x-face f sits between padded columns f and f + 1.
        for j in 0..ny {
            let row = (j + 1) * w;
            for f in 0..=nx {
                let (l, r) = (row + f, row + f + 1);
                let grad = (vp[r] - vp[l]) / hx;
                self.flux_x[j * (nx + 1) + f] = face(up[l], up[r], grad);
            }
        }
        // y-face f sits between padded rows f and f + 1.
        for f in 0..=ny {
            for i in 0..nx {
                let (s, n) = (f * w + i + 1, (f + 1) * w + i + 1);
                let grad = (vp[n] - vp[s]) / hy;
                self.flux_y[f * nx + i] = face(up[s], up[n], grad);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                let fe = self.flux_x[j * (nx + 1) + i + 1];
                let fw = self.flux_x[j * (nx + 1) + i];
                let fnn = self.flux_y[(j + 1) * nx + i];
                let fs = self.flux_y[j * nx + i];
                out[j * nx + i] = -(fe - fw) / hx - (fnn - fs) / hy;
            }
        }
    }
}

/// Five-point Neumann Laplacian of raw row-major data.
pub fn laplacian_into(grid: &Grid, src: &[f64], dst: &mut [f64]) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let ihx2 = 1.0 / (grid.hx() * grid.hx());
    let ihy2 = 1.0 / (grid.hy() * grid.hy());
    for j in 0..ny {
        let row = j * nx;
        let south = if j == 0 { row } else { row - nx };
        let north = if j + 1 == ny { row } else { row + nx };
        for i in 0..nx {
            let c = src[row + i];
            let w = if i == 0 { c } else { src[row + i - 1] };
            let e = if i + 1 == nx { c } else { src[row + i + 1] };
            let s = src[south + i];
            let n = src[north + i];
            dst[row + i] = ((e - c) - (c - w)) * ihx2 + ((n - c) - (c - s)) * ihy2;
        }
    }
}

/// Diagonal of the Neumann Laplacian (boundary cells have fewer neighbours).
pub fn laplacian_diagonal(grid: &Grid) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let ihx2 = 1.0 / (grid.hx() * grid.hx());
    let ihy2 = 1.0 / (grid.hy() * grid.hy());
    let mut d = vec![0.0; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let kx = (i > 0) as u8 + (i + 1 < nx) as u8;
            let ky = (j > 0) as u8 + (j + 1 < ny) as u8;
            d[j * nx + i] = -(kx as f64) * ihx2 - (ky as f64) * ihy2;
        }
    }
    d
}

/// Discrete Neumann Laplacian.
pub fn laplacian(field: &ScalarField) -> Result<ScalarField> {
    field.ensure_finite()?;
    let mut out = ScalarField::zeros(*field.grid());
    laplacian_into(field.grid(), field.data(), out.data_mut());
    Ok(out)
}

/// `-chi * div(u grad v)` with upwind face values.
pub fn chemotactic_divergence(u: &ScalarField, v: &ScalarField, chi: f64) -> Result<ScalarField> {
    chemotactic_divergence_with(u, v, chi, FluxScheme::Upwind)
}

pub fn chemotactic_divergence_with(
    u: &ScalarField,
    v: &ScalarField,
    chi: f64,
    scheme: FluxScheme,
) -> Result<ScalarField> {
    u.ensure_nonnegative()?;
    v.ensure_finite()?;
    let grid = *u.grid();
    let mut ws = StencilWorkspace::new(grid);
    let mut out = ScalarField::zeros(grid);
    ws.chemotactic_divergence_into(u.data(), v.data(), chi, scheme, out.data_mut());
    Ok(out)
}

/// Cellwise `|grad v|^2` from central differences with mirrored ghosts.
pub fn gradient_squared(v: &ScalarField) -> Result<ScalarField> {
    v.ensure_finite()?;
    let g = *v.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let (hx2, hy2) = (2.0 * g.hx(), 2.0 * g.hy());
    let d = v.data();
    let mut out = ScalarField::zeros(g);
    let o = out.data_mut();
    for j in 0..ny {
        for i in 0..nx {
            let c = d[j * nx + i];
            let w = if i == 0 { c } else { d[j * nx + i - 1] };
            let e = if i + 1 == nx { c } else { d[j * nx + i + 1] };
            let s = if j == 0 { c } else { d[(j - 1) * nx + i] };
            let n = if j + 1 == ny { c } else { d[(j + 1) * nx + i] };
            let gx = (e - w) / hx2;
            let gy = (n - s) / hy2;
            o[j * nx + i] = gx * gx + gy * gy;
        }
    }
    Ok(out)
}

/// `sum over interior faces of (jump / h)^2 * cell_area`, the face-difference
/// analogue of `||grad w||_2^2`.
pub fn face_gradient_l2_squared(w: &ScalarField) -> f64 {
    let g = w.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let (hx, hy) = (g.hx(), g.hy());
    let d = w.data();
    let mut sx = 0.0;
    let mut sy = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let c = d[j * nx + i];
            if i + 1 < nx {
                let q = d[j * nx + i + 1] - c;
                sx += q * q;
            }
            if j + 1 < ny {
                let q = d[(j + 1) * nx + i] - c;
                sy += q * q;
            }
        }
    }
    g.cell_area() * (sx / (hx * hx) + sy / (hy * hy))
}

/// Largest `|dv/dn|` over all interior faces.
pub fn max_face_gradient(v: &[f64], grid: &Grid) -> f64 {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut m: f64 = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let c = v[j * nx + i];
            if i + 1 < nx {
                m = m.max((v[j * nx + i + 1] - c).abs() / hx);
            }
            if j + 1 < ny {
                m = m.max((v[(j + 1) * nx + i] - c).abs() / hy);
            }
        }
    }
    m
}

/// Largest per-cell upwind outflow rate `chi * sum_out (dv/dn) / h`.
///
/// An explicit upwind step with `dt * rate <= 1` keeps `u >= 0`.
pub fn max_outflow_rate(v: &[f64], grid: &Grid, chi: f64) -> f64 {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut m: f64 = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let c = v[j * nx + i];
            let mut rate = 0.0;
            if i > 0 {
                rate += (v[j * nx + i - 1] - c).max(0.0) / (hx * hx);
            }
            if i + 1 < nx {
                rate += (v[j * nx + i + 1] - c).max(0.0) / (hx * hx);
            }
            if j > 0 {
                rate += (v[(j - 1) * nx + i] - c).max(0.0) / (hy * hy);
            }
            if j + 1 < ny {
                rate += (v[(j + 1) * nx + i] - c).max(0.0) / (hy * hy);
            }
            m = m.max(chi * rate);
        }
    }
    m
}
