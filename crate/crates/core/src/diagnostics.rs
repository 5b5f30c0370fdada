//! Per-step functionals of the solution and a posteriori bound checks.

use std::fmt::Write as _;

use crate::grid::{norm_unchecked, s_ln_s, sum_unchecked, Norm, ScalarField};
use crate::integrator::{SimState, StepperOptions};
use crate::kinetics::RegimeReport;
use crate::operators::{face_gradient_l2_squared, laplacian_into};

pub const CSV_HEADER: &str = "t,dt,u_l1,u_l2,u_linf,u_lnu_l1,entropy,v_l2,grad_v_l2,grad_v_l4,delta_v_l2,mass_odi_residual,step_count";

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    pub u_l1: f64,
    pub u_l2: f64,
    pub u_linf: f64,
    pub u_lnu_l1: f64,
    pub entropy: f64,
    pub v_l2: f64,
    pub grad_v_l2: f64,
    pub grad_v_l4: f64,
    pub delta_v_l2: f64,
    /// `d/dt ∫u - ∫f(u)` over the interval since the previous record,
    /// with the source taken at the left endpoint. Zero for the first record.
    pub mass_odi_residual: f64,
    pub step_count: usize,
    /// `∫ f(u)` at this record; not written to CSV.
    pub source_integral: f64,
    /// Some functional was non-finite.
    pub diverged: bool,
}

impl DiagnosticsRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let vals = [
            self.t,
            self.dt,
            self.u_l1,
            self.u_l2,
            self.u_linf,
            self.u_lnu_l1,
            self.entropy,
            self.v_l2,
            self.grad_v_l2,
            self.grad_v_l4,
            self.delta_v_l2,
            self.mass_odi_residual,
        ];
        for v in vals {
            let _ = write!(s, "{v},");
        }
        let _ = write!(s, "{}", self.step_count);
        s
    }

    /// Parses a row written by [`Self::csv_row`].
    pub fn parse_csv_row(line: &str) -> crate::Result<Self> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 13 {
            return Err(crate::Error::Parse(format!(
                "expected 13 columns, found {}",
                parts.len()
            )));
        }
        let f = |k: usize| -> crate::Result<f64> {
            parts[k]
                .parse()
                .map_err(|_| crate::Error::Parse(format!("bad number {:?}", parts[k])))
        };
        let step_count = parts[12]
            .parse()
            .map_err(|_| crate::Error::Parse(format!("bad step count {:?}", parts[12])))?;
        let mut rec = Self {
            t: f(0)?,
            dt: f(1)?,
            u_l1: f(2)?,
            u_l2: f(3)?,
            u_linf: f(4)?,
            u_lnu_l1: f(5)?,
            entropy: f(6)?,
            v_l2: f(7)?,
            grad_v_l2: f(8)?,
            grad_v_l4: f(9)?,
            delta_v_l2: f(10)?,
            mass_odi_residual: f(11)?,
            step_count,
            source_integral: f64::NAN,
            diverged: false,
        };
        rec.diverged = !rec.all_finite();
        Ok(rec)
    }

    fn all_finite(&self) -> bool {
        [
            self.u_l1,
            self.u_l2,
            self.u_linf,
            self.u_lnu_l1,
            self.entropy,
            self.v_l2,
            self.grad_v_l2,
            self.grad_v_l4,
            self.delta_v_l2,
            self.mass_odi_residual,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    pub fn value(&self, f: Functional) -> f64 {
        match f {
            Functional::UL1 => self.u_l1,
            Functional::UL2 => self.u_l2,
            Functional::ULinf => self.u_linf,
            Functional::ULnUL1 => self.u_lnu_l1,
            Functional::Entropy => self.entropy,
            Functional::VL2 => self.v_l2,
            Functional::GradVL2 => self.grad_v_l2,
            Functional::GradVL4 => self.grad_v_l4,
            Functional::DeltaVL2 => self.delta_v_l2,
        }
    }
}

/// The tracked functionals, named as in the CSV header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Functional {
    UL1,
    UL2,
    ULinf,
    ULnUL1,
    Entropy,
    VL2,
    GradVL2,
    GradVL4,
    DeltaVL2,
}

impl Functional {
    pub const ALL: [Functional; 9] = [
        Functional::UL1,
        Functional::UL2,
        Functional::ULinf,
        Functional::ULnUL1,
        Functional::Entropy,
        Functional::VL2,
        Functional::GradVL2,
        Functional::GradVL4,
        Functional::DeltaVL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::UL1 => "u_l1",
            Functional::UL2 => "u_l2",
            Functional::ULinf => "u_linf",
            Functional::ULnUL1 => "u_lnu_l1",
            Functional::Entropy => "entropy",
            Functional::VL2 => "v_l2",
            Functional::GradVL2 => "grad_v_l2",
            Functional::GradVL4 => "grad_v_l4",
            Functional::DeltaVL2 => "delta_v_l2",
        }
    }
}

/// Computes all functionals of `state`.
pub fn record(state: &SimState, opts: &StepperOptions, prev: Option<&DiagnosticsRecord>) -> DiagnosticsRecord {
    let u = &state.u;
    let v = &state.v;
    let g = *u.grid();
    let area = g.cell_area();

    let u_l1 = norm_unchecked(u, Norm::L1);
    let mass = sum_unchecked(u);
    let u_lnu_l1 = area * u.data().iter().map(|&s| s_ln_s(s).abs()).sum::<f64>();
    let ulnu = area
        * u.data()
            .iter()
            .map(|&s| if s >= 0.0 { s_ln_s(s) } else { f64::NAN })
            .sum::<f64>();
    let grad_sq = face_gradient_l2_squared(v);
    let entropy = ulnu + 0.5 * opts.tau * opts.chi * grad_sq;

    let mut lap = vec![0.0; g.len()];
    laplacian_into(&g, v.data(), &mut lap);
    let delta_v_l2 = (area * lap.iter().map(|x| x * x).sum::<f64>()).sqrt();

    let source_integral = area
        * u.data()
            .iter()
            .map(|&s| opts.source.value(s.max(0.0)))
            .sum::<f64>();
    let mass_odi_residual = match prev {
        Some(p) if state.t > p.t => {
            let prev_mass = p.u_l1;
            (mass - prev_mass) / (state.t - p.t) - p.source_integral
        }
        _ => 0.0,
    };

    let mut rec = DiagnosticsRecord {
        t: state.t,
        dt: state.dt,
        u_l1,
        u_l2: norm_unchecked(u, Norm::L2),
        u_linf: norm_unchecked(u, Norm::Linf),
        u_lnu_l1,
        entropy,
        v_l2: norm_unchecked(v, Norm::L2),
        grad_v_l2: grad_sq.sqrt(),
        grad_v_l4: face_gradient_l4(v),
        delta_v_l2,
        mass_odi_residual,
        step_count: state.step_count,
        source_integral,
        diverged: false,
    };
    rec.diverged = !rec.all_finite() || !source_integral.is_finite();
    rec
}

/// Face-difference `||grad v||_4`, pairing x- and y-jumps at each cell.
fn face_gradient_l4(v: &ScalarField) -> f64 {
    let g = v.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let (hx, hy) = (g.hx(), g.hy());
    let d = v.data();
    let mut acc = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let c = d[j * nx + i];
            let gx = if i + 1 < nx { (d[j * nx + i + 1] - c) / hx } else { 0.0 };
            let gy = if j + 1 < ny { (d[(j + 1) * nx + i] - c) / hy } else { 0.0 };
            let q = gx * gx + gy * gy;
            acc += q * q;
        }
    }
    (g.cell_area() * acc).sqrt().sqrt()
}

/// Thresholds for [`check_bounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCaps {
    pub caps: Vec<(Functional, f64)>,
    /// Relative slack on `sup ||u||_1 <= M`.
    pub mass_slack: f64,
    /// Growth of `||u||_inf` over the final tenth of the run above this
    /// relative amount raises the alarm.
    pub growth_threshold: f64,
}

impl Default for BoundCaps {
    fn default() -> Self {
        Self {
            caps: vec![(Functional::ULinf, 1e8)],
            mass_slack: 0.01,
            growth_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckSummary {
    pub maxima: Vec<(Functional, f64)>,
    /// One entry per configured cap.
    pub caps_ok: Vec<(Functional, bool)>,
    /// `None` when M is infinite.
    pub mass_within_m: Option<bool>,
    /// Relative growth of `||u||_inf` over the last tenth of the run.
    pub late_growth: f64,
    pub growth_alarm: bool,
    pub diverged: bool,
}

impl BoundCheckSummary {
    pub fn max_of(&self, f: Functional) -> f64 {
        self.maxima
            .iter()
            .find(|(g, _)| *g == f)
            .map(|&(_, v)| v)
            .unwrap_or(f64::NAN)
    }

    pub fn all_ok(&self) -> bool {
        !self.diverged
            && !self.growth_alarm
            && self.caps_ok.iter().all(|&(_, ok)| ok)
            && self.mass_within_m != Some(false)
    }
}

pub fn check_bounds(series: &[DiagnosticsRecord], report: &RegimeReport, caps: &BoundCaps) -> BoundCheckSummary {
    let maxima: Vec<(Functional, f64)> = Functional::ALL
        .iter()
        .map(|&f| {
            let m = series
                .iter()
                .map(|r| r.value(f))
                .fold(f64::NEG_INFINITY, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) });
            (f, m)
        })
        .collect();
    let get = |f: Functional| maxima.iter().find(|(g, _)| *g == f).map(|&(_, v)| v).unwrap_or(f64::NAN);
    let caps_ok = caps.caps.iter().map(|&(f, c)| (f, get(f) <= c)).collect();
    let mass_within_m = report
        .m
        .is_finite()
        .then(|| get(Functional::UL1) <= report.m * (1.0 + caps.mass_slack));

    let mut late_growth = 0.0;
    if let (Some(first), Some(last)) = (series.first(), series.last()) {
        let cut = last.t - 0.1 * (last.t - first.t);
        if let Some(start) = series.iter().rev().find(|r| r.t <= cut) {
            if start.u_linf > 0.0 && last.t > start.t {
                late_growth = last.u_linf / start.u_linf - 1.0;
            }
        }
    }
    BoundCheckSummary {
        maxima,
        caps_ok,
        mass_within_m,
        late_growth,
        growth_alarm: late_growth > caps.growth_threshold,
        diverged: series.iter().any(|r| r.diverged),
    }
}

/// Writes the CSV header and rows.
pub fn write_csv(mut w: impl std::io::Write, series: &[DiagnosticsRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in series {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
