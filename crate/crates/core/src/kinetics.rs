//! Kinetic sources `f(u)` and the analysis of their damping strength.
//!
//! For a source `f` this module estimates
//! `mu = liminf_{s→∞} -f(s) ln(s) / s^2`, computes the mass bound
//! `M = ||u0||_1 + |Ω| inf_η sup_s {f(s) + η s} / η`, and classifies the
//! parameters `(mu, chi, M, C_GN)` into the boundedness regimes B1/B2/B3.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Value treated as effectively infinite in floating point.
pub const DEFAULT_HUGE_CAP: f64 = 1e12;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Piecewise-linear source given by breakpoints `(s_k, f_k)`.
///
/// Below the first breakpoint the first value is held constant; beyond the
/// last one the final segment is extended linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    s: Vec<f64>,
    f: Vec<f64>,
}

impl Table {
    pub fn new(s: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        if s.len() != f.len() || s.len() < 2 {
            return Err(Error::Construction(
                "tabulated source needs at least two (s, f) pairs".into(),
            ));
        }
        if s.iter().chain(&f).any(|x| !x.is_finite()) {
            return Err(Error::Construction("tabulated source has non-finite entries".into()));
        }
        if s[0] < 0.0 {
            return Err(Error::Construction("tabulated s values must be nonnegative".into()));
        }
        if s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Construction("tabulated s values must be strictly increasing".into()));
        }
        Ok(Self { s, f })
    }

    /// Reads a two-column CSV `s,f(s)`; a non-numeric first line is a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Vec::new();
        let mut f = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match cols.as_slice() {
                [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some((a, b)) => {
                    s.push(a);
                    f.push(b);
                }
                None if lineno == 0 => continue,
                None => {
                    return Err(Error::Parse(format!(
                        "{}:{}: expected two numeric columns",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(s, f)
    }

    pub fn breakpoints(&self) -> (&[f64], &[f64]) {
        (&self.s, &self.f)
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.s.len();
        match self.s.partition_point(|&x| x <= s) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    fn slope(&self, k: usize) -> f64 {
        (self.f[k + 1] - self.f[k]) / (self.s[k + 1] - self.s[k])
    }

    fn value(&self, s: f64) -> f64 {
        if s <= self.s[0] {
            return self.f[0];
        }
        let k = self.segment(s);
        self.f[k] + self.slope(k) * (s - self.s[k])
    }

    fn derivative(&self, s: f64) -> f64 {
        if s < self.s[0] {
            0.0
        } else {
            self.slope(self.segment(s))
        }
    }

    fn final_slope(&self) -> f64 {
        self.slope(self.s.len() - 2)
    }
}

/// Parameterized kinetic source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    /// `f ≡ 0`, the pure Keller-Segel system.
    Zero,
    /// `f(s) = a s - b s^theta`.
    Logistic { a: f64, b: f64, theta: f64 },
    /// `f(s) = a s - b s^2 / ln^gamma(s + 1)`.
    Sublog { a: f64, b: f64, gamma: f64 },
    /// `f(s) = a s - b s^2 / ln(ln(s + e))`.
    SublogLogLog { a: f64, b: f64 },
    Tabulated(Table),
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Construction(msg()))
    }
}

impl SourceSpec {
    pub fn logistic(a: f64, b: f64, theta: f64) -> Result<Self> {
        require(a.is_finite(), || format!("a must be finite, got {a}"))?;
        require(b > 0.0 && b.is_finite(), || format!("b must be positive, got {b}"))?;
        require(theta > 1.0 && theta.is_finite(), || {
            format!("theta must exceed 1, got {theta}")
        })?;
        Self::Logistic { a, b, theta }.checked()
    }

    pub fn sublog(a: f64, b: f64, gamma: f64) -> Result<Self> {
        require(a.is_finite(), || format!("a must be finite, got {a}"))?;
        require(b > 0.0 && b.is_finite(), || format!("b must be positive, got {b}"))?;
        require(gamma > 0.0 && gamma <= 1.0, || {
            format!("gamma must lie in (0, 1], got {gamma}")
        })?;
        Self::Sublog { a, b, gamma }.checked()
    }

    pub fn sublog_loglog(a: f64, b: f64) -> Result<Self> {
        require(a.is_finite(), || format!("a must be finite, got {a}"))?;
        require(b > 0.0 && b.is_finite(), || format!("b must be positive, got {b}"))?;
        Self::SublogLogLog { a, b }.checked()
    }

    pub fn tabulated(table: Table) -> Result<Self> {
        Self::Tabulated(table).checked()
    }

    fn checked(self) -> Result<Self> {
        let f0 = self.value(0.0);
        require(f0 >= 0.0, || format!("source must satisfy f(0) >= 0, got {f0}"))?;
        Ok(self)
    }

    /// Parses `zero`, `logistic a b theta`, `sublog a b gamma`,
    /// `subloglog a b` or `tabulated <path>` (relative to `base_dir`).
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let nums = |rest: &[&str], n: usize| -> Result<Vec<f64>> {
            if rest.len() != n {
                return Err(Error::Parse(format!(
                    "source {:?} expects {n} parameters, got {}",
                    words[0],
                    rest.len()
                )));
            }
            rest.iter()
                .map(|w| {
                    w.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("source parameter {w:?}: {e}")))
                })
                .collect()
        };
        match words.as_slice() {
            ["zero"] => Ok(Self::Zero),
            ["logistic", rest @ ..] => {
                let p = nums(rest, 3)?;
                Self::logistic(p[0], p[1], p[2])
            }
            ["sublog", rest @ ..] => {
                let p = nums(rest, 3)?;
                Self::sublog(p[0], p[1], p[2])
            }
            ["subloglog", rest @ ..] => {
                let p = nums(rest, 2)?;
                Self::sublog_loglog(p[0], p[1])
            }
            ["tabulated", path] => {
                let path = Path::new(path);
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.to_path_buf(),
                };
                Self::tabulated(Table::from_csv(&full)?)
            }
            _ => Err(Error::Parse(format!("unknown source family {text:?}"))),
        }
    }

    /// `f(s)` for `s >= 0`.
    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("source evaluated at s = {s} < 0")));
        }
        Ok(self.value(s))
    }

    /// `f(s)` without the domain check.
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Logistic { a, b, theta } => a * s - b * s.powf(*theta),
            Self::Sublog { a, b, gamma } => {
                if s == 0.0 {
                    0.0
                } else {
                    a * s - b * s * s / s.ln_1p().powf(*gamma)
                }
            }
            Self::SublogLogLog { a, b } => {
                if s == 0.0 {
                    0.0
                } else {
                    a * s - b * s * s / loglog_shifted(s)
                }
            }
            Self::Tabulated(t) => t.value(s),
        }
    }

    /// `f'(s)` (right derivative at kinks and at zero).
    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Logistic { a, b, theta } => {
                if s == 0.0 {
                    if *theta > 1.0 {
                        *a
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    a - b * theta * s.powf(theta - 1.0)
                }
            }
            Self::Sublog { a, b, gamma } => {
                if s == 0.0 {
                    return a - if *gamma == 1.0 { *b } else { 0.0 };
                }
                let l = s.ln_1p();
                let lg = l.powf(*gamma);
                a - b * (2.0 * s / lg - gamma * s * s / ((1.0 + s) * lg * l))
            }
            Self::SublogLogLog { a, b } => {
                if s == 0.0 {
                    return a - b * std::f64::consts::E;
                }
                let q = loglog_shifted(s);
                let lse = 1.0 + (s / std::f64::consts::E).ln_1p();
                let dq = 1.0 / (lse * (s + std::f64::consts::E));
                a - b * (2.0 * s / q - s * s * dq / (q * q))
            }
            Self::Tabulated(t) => t.derivative(s),
        }
    }

    /// Closed-form `mu` for the built-in families.
    pub fn closed_form_mu(&self) -> Option<ExtReal> {
        match self {
            Self::Zero => Some(ExtReal::Finite(0.0)),
            Self::Logistic { theta, .. } => Some(if *theta >= 2.0 {
                ExtReal::Infinite
            } else {
                ExtReal::Finite(0.0)
            }),
            Self::Sublog { b, gamma, .. } => Some(if *gamma < 1.0 {
                ExtReal::Infinite
            } else {
                ExtReal::Finite(*b)
            }),
            Self::SublogLogLog { .. } => Some(ExtReal::Infinite),
            Self::Tabulated(_) => None,
        }
    }

    /// False for sources with `mu = 0` such as `a s - b s^theta, theta < 2`.
    pub fn is_covered(&self) -> bool {
        !matches!(self.closed_form_mu(), Some(ExtReal::Finite(m)) if m <= 0.0)
    }

    /// Family name as written in config files.
    pub fn family(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Logistic { .. } => "logistic",
            Self::Sublog { .. } => "sublog",
            Self::SublogLogLog { .. } => "subloglog",
            Self::Tabulated(_) => "tabulated",
        }
    }
}

/// `ln(ln(s + e))` computed without cancellation near `s = 0`.
fn loglog_shifted(s: f64) -> f64 {
    (s / std::f64::consts::E).ln_1p().ln_1p()
}

/// Nonnegative extended real.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Self::Finite(x) => x,
            Self::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(x) => write!(f, "{x}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Plateau,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Increasing => "increasing",
            Self::Decreasing => "decreasing",
            Self::Plateau => "plateau",
        })
    }
}

/// Sampling parameters for the numeric `mu` estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuSearch {
    pub s_min: f64,
    pub s_max: f64,
    pub points_per_decade: usize,
    pub huge_cap: f64,
    /// Relative change over the final decade below which the tail is flat.
    pub plateau_tol: f64,
}

impl Default for MuSearch {
    fn default() -> Self {
        Self {
            s_min: 1.0,
            s_max: 1e12,
            points_per_decade: 16,
            huge_cap: DEFAULT_HUGE_CAP,
            plateau_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuEstimate {
    /// Closed form when known, otherwise the tail minimum (or `Infinite`).
    pub value: ExtReal,
    /// Minimum of `-f(s) ln s / s^2` over the last two sampled decades.
    pub numeric: ExtReal,
    pub trend: Trend,
    /// Conservative lower end used for classification.
    pub lower: ExtReal,
    pub closed_form: bool,
}

/// `-f(s) ln(s) / s^2`.
pub fn log_weighted_damping(spec: &SourceSpec, s: f64) -> f64 {
    -spec.value(s) * s.ln() / (s * s)
}

/// Samples the damping ratio on a geometric grid and summarizes its tail.
pub fn estimate_mu_numeric(spec: &SourceSpec, search: &MuSearch) -> Result<MuEstimate> {
    let MuSearch {
        s_min,
        s_max,
        points_per_decade,
        huge_cap,
        plateau_tol,
    } = *search;
    if !(s_min > 0.0 && s_max >= 1e6 * s_min && s_max.is_finite()) {
        return Err(Error::Domain(format!(
            "mu search needs 0 < s_min and s_max >= 1e6 s_min (got {s_min}, {s_max})"
        )));
    }
    if points_per_decade < 8 {
        return Err(Error::Domain(format!(
            "mu search needs at least 8 points per decade, got {points_per_decade}"
        )));
    }
    let decades = (s_max / s_min).log10();
    let n = (decades * points_per_decade as f64).ceil() as usize;
    let sample = |k: usize| s_min * (s_max / s_min).powf(k as f64 / n as f64);
    let two_dec = s_max / 100.0;
    let one_dec = s_max / 10.0;

    let mut tail_min = f64::INFINITY;
    let mut last_min = f64::INFINITY;
    let mut g_decade_start = None;
    let mut g_end = f64::NAN;
    for k in 0..=n {
        let s = if k == n { s_max } else { sample(k) };
        if s < two_dec * (1.0 - 1e-12) {
            continue;
        }
        let g = log_weighted_damping(spec, s);
        if !g.is_finite() {
            return Err(Error::EstimationFailure(format!(
                "damping ratio is {g} at s = {s:e}"
            )));
        }
        tail_min = tail_min.min(g);
        if s >= one_dec * (1.0 - 1e-12) {
            last_min = last_min.min(g);
            g_decade_start.get_or_insert(g);
        }
        g_end = g;
    }
    let g_start = g_decade_start.unwrap_or(g_end);
    let scale = g_start.abs().max(g_end.abs()).max(f64::MIN_POSITIVE);
    let rel = (g_end - g_start) / scale;
    let trend = if rel > plateau_tol {
        Trend::Increasing
    } else if rel < -plateau_tol {
        Trend::Decreasing
    } else {
        Trend::Plateau
    };
    let numeric = if last_min > huge_cap {
        ExtReal::Infinite
    } else {
        ExtReal::Finite(tail_min.max(0.0))
    };
    let lower = match (numeric, trend) {
        (ExtReal::Infinite, _) => ExtReal::Infinite,
        (_, Trend::Decreasing) => ExtReal::Finite(0.0),
        (v, _) => v,
    };
    Ok(MuEstimate {
        value: numeric,
        numeric,
        trend,
        lower,
        closed_form: false,
    })
}

/// Numeric estimate with the closed-form value substituted for built-in
/// families.
pub fn estimate_mu(spec: &SourceSpec, search: &MuSearch) -> Result<MuEstimate> {
    let closed = spec.closed_form_mu();
    match estimate_mu_numeric(spec, search) {
        Ok(mut est) => {
            if let Some(mu) = closed {
                est.value = mu;
                est.lower = mu;
                est.closed_form = true;
            }
            Ok(est)
        }
        Err(e) => match closed {
            Some(mu) => Ok(MuEstimate {
                value: mu,
                numeric: mu,
                trend: Trend::Plateau,
                lower: mu,
                closed_form: true,
            }),
            None => Err(e),
        },
    }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`.
pub(crate) fn golden_min(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        // `!(fd < fc)` keeps the search moving left when both are +inf.
        if fc < fd || (!(fd < fc) && fc.is_infinite()) {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    [(x, fx), (c, fc), (d, fd)]
        .into_iter()
        .fold((x, fx), |best, cand| if cand.1 < best.1 { cand } else { best })
}

/// Smallest positive abscissa searched for `sup {f(s) + η s}`.
pub const M_ETA_S_FLOOR: f64 = 1e-12;

/// `M_η = sup_{s>0} f(s) + η s` and the abscissa attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MEta {
    pub value: f64,
    pub argmax: f64,
}

/// `sup { f(s) + η s : s > 0 }`.
pub fn compute_m_eta(spec: &SourceSpec, eta: f64) -> Result<f64> {
    compute_m_eta_with(spec, eta, DEFAULT_HUGE_CAP).map(|m| m.value)
}

pub fn compute_m_eta_with(spec: &SourceSpec, eta: f64, huge_cap: f64) -> Result<MEta> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let f0 = spec.value(0.0);
    let h = |s: f64| spec.value(s) + eta * s;

    if let SourceSpec::Tabulated(t) = spec {
        if t.final_slope() + eta > 0.0 {
            return Err(Error::UnboundedSource(format!(
                "tabulated source grows faster than -{eta} s beyond its last breakpoint"
            )));
        }
        let (best_s, best) = t
            .s
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| (s, h(s)))
            .fold((0.0, f0), |acc, c| if c.1 > acc.1 { c } else { acc });
        return Ok(MEta {
            value: best,
            argmax: best_s,
        });
    }

    // f(s)/s is nonincreasing for the built-in families, so once h < 0 it
    // stays negative.
    let mut s_hi = 1.0;
    while !(h(s_hi) < 0.0) {
        s_hi *= 2.0;
        if s_hi > huge_cap {
            return Err(Error::UnboundedSource(format!(
                "f(s) + {eta} s stays nonnegative up to s = {huge_cap:e}"
            )));
        }
    }
    let (x, neg_h) = golden_min(
        |x| -h(x.exp()),
        M_ETA_S_FLOOR.ln(),
        s_hi.ln(),
        1e-10,
    );
    let top = -neg_h;
    if top >= f0 {
        Ok(MEta {
            value: top,
            argmax: x.exp(),
        })
    } else {
        Ok(MEta {
            value: f0,
            argmax: 0.0,
        })
    }
}

/// Range searched for the optimal `η`.
pub const ETA_RANGE: (f64, f64) = (1e-6, 1e6);

/// Result of the `inf_η M_η / η` minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassBound {
    /// `u0_mass + omega_area * ratio`.
    pub m: f64,
    /// `inf_η M_η / η`.
    pub ratio: f64,
    pub eta_star: f64,
    pub m_eta_star: f64,
}

/// `M = u0_mass + |Ω| inf_η sup_s {f(s) + η s} / η`.
pub fn compute_m(spec: &SourceSpec, u0_mass: f64, omega_area: f64) -> Result<f64> {
    compute_mass_bound(spec, u0_mass, omega_area).map(|b| b.m)
}

pub fn compute_mass_bound(spec: &SourceSpec, u0_mass: f64, omega_area: f64) -> Result<MassBound> {
    if !(u0_mass >= 0.0 && u0_mass.is_finite()) {
        return Err(Error::Domain(format!("initial mass must be >= 0, got {u0_mass}")));
    }
    if !(omega_area > 0.0 && omega_area.is_finite()) {
        return Err(Error::Domain(format!("domain area must be > 0, got {omega_area}")));
    }
    let ratio = |x: f64| {
        let eta = x.exp();
        match compute_m_eta_with(spec, eta, DEFAULT_HUGE_CAP) {
            Ok(m) => m.value / eta,
            Err(_) => f64::INFINITY,
        }
    };
    let (lo, hi) = (ETA_RANGE.0.ln(), ETA_RANGE.1.ln());
    let (x, r) = golden_min(ratio, lo, hi, 1e-8);
    let (x, r) = [(lo, ratio(lo)), (hi, ratio(hi))]
        .into_iter()
        .fold((x, r), |best, c| if c.1 < best.1 { c } else { best });
    if !r.is_finite() {
        return Err(Error::UnboundedSource(
            "sup {f(s) + η s} is infinite for every η in [1e-6, 1e6]".into(),
        ));
    }
    let eta_star = x.exp();
    Ok(MassBound {
        m: u0_mass + omega_area * r,
        ratio: r,
        eta_star,
        m_eta_star: r * eta_star,
    })
}

/// Boundedness regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `mu = ∞`.
    B1,
    /// `0 < mu < ∞`, `mu >= chi`.
    B2,
    /// `0 < mu < chi`, `(chi - mu) M < 1 / (2 C_GN^4)`.
    B3,
    NotCovered,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::B1 => "B1",
            Self::B2 => "B2",
            Self::B3 => "B3",
            Self::NotCovered => "NotCovered",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_whitespace().next() {
            Some("B1") => Ok(Self::B1),
            Some("B2") => Ok(Self::B2),
            Some("B3") => Ok(Self::B3),
            Some("NotCovered") => Ok(Self::NotCovered),
            _ => Err(Error::Parse(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub mu: ExtReal,
    pub mu_trend: Option<Trend>,
    /// Mass bound; `+inf` when the source admits none.
    pub m: f64,
    pub c_gn: f64,
    /// `1 / (2 C_GN^4)`.
    pub threshold: f64,
    /// `threshold - (chi - mu)^+ M`.
    pub gap: f64,
    pub regime: Regime,
    pub epsilon0: Option<f64>,
    pub reason: Option<String>,
}

impl RegimeReport {
    /// Regime label, with the reason appended for uncovered cases.
    pub fn label(&self) -> String {
        match &self.reason {
            Some(r) if self.regime == Regime::NotCovered => format!("{} ({r})", self.regime),
            _ => self.regime.to_string(),
        }
    }
}

impl fmt::Display for RegimeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "regime = {}", self.label())?;
        writeln!(f, "mu = {}", self.mu)?;
        if let Some(t) = self.mu_trend {
            writeln!(f, "mu_trend = {t}")?;
        }
        writeln!(f, "M = {}", self.m)?;
        writeln!(f, "c_gn = {}", self.c_gn)?;
        writeln!(f, "threshold = {}", self.threshold)?;
        writeln!(f, "gap = {}", self.gap)?;
        match self.epsilon0 {
            Some(e) => writeln!(f, "epsilon0 = {e}"),
            None => writeln!(f, "epsilon0 = none"),
        }
    }
}

/// `1 / (2 c^4)`.
pub fn gn_threshold(c_gn: f64) -> f64 {
    let c2 = c_gn * c_gn;
    1.0 / (2.0 * c2 * c2)
}

/// Case analysis on raw `(mu, chi, M, C_GN)`. An infinite `m` means the
/// mass bound does not exist.
pub fn classify_values(mu: ExtReal, chi: f64, m: f64, c_gn: f64) -> RegimeReport {
    let threshold = gn_threshold(c_gn);
    let excess = match mu {
        ExtReal::Infinite => 0.0,
        ExtReal::Finite(mu) => (chi - mu).max(0.0),
    };
    let pressure = if excess == 0.0 { 0.0 } else { excess * m };
    let gap = threshold - pressure;

    let (regime, reason) = if !m.is_finite() {
        (Regime::NotCovered, Some("M unbounded".to_string()))
    } else {
        match mu {
            ExtReal::Infinite => (Regime::B1, None),
            ExtReal::Finite(mu) if !(mu > 0.0) => {
                (Regime::NotCovered, Some("mu = 0".to_string()))
            }
            ExtReal::Finite(mu) if mu >= chi => (Regime::B2, None),
            ExtReal::Finite(_) if gap > 0.0 => (Regime::B3, None),
            ExtReal::Finite(_) => (
                Regime::NotCovered,
                Some("(chi - mu) M >= 1/(2 C_GN^4)".to_string()),
            ),
        }
    };
    let epsilon0 = match (regime, mu) {
        (Regime::B2 | Regime::B3, ExtReal::Finite(mu)) => {
            let room = if m == 0.0 {
                f64::INFINITY
            } else {
                threshold / m - excess
            };
            let e = 0.5 * mu.min(room);
            (e > 0.0).then_some(e)
        }
        _ => None,
    };
    RegimeReport {
        mu,
        mu_trend: None,
        m,
        c_gn,
        threshold,
        gap,
        regime,
        epsilon0,
        reason,
    }
}

/// Estimates `mu` and `M` for `spec` and classifies the regime.
pub fn classify(
    spec: &SourceSpec,
    chi: f64,
    c_gn: f64,
    u0_mass: f64,
    omega_area: f64,
) -> Result<RegimeReport> {
    classify_with(spec, chi, c_gn, u0_mass, omega_area, &MuSearch::default())
}

pub fn classify_with(
    spec: &SourceSpec,
    chi: f64,
    c_gn: f64,
    u0_mass: f64,
    omega_area: f64,
    search: &MuSearch,
) -> Result<RegimeReport> {
    if !(chi > 0.0 && chi.is_finite()) {
        return Err(Error::Domain(format!("chi must be positive, got {chi}")));
    }
    if !(c_gn > 0.0 && c_gn.is_finite()) {
        return Err(Error::Domain(format!("C_GN must be positive, got {c_gn}")));
    }
    let mu = estimate_mu(spec, search)?;
    let m = match compute_m(spec, u0_mass, omega_area) {
        Ok(m) => m,
        Err(Error::UnboundedSource(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let mut report = classify_values(mu.lower, chi, m, c_gn);
    report.mu_trend = (!mu.closed_form).then_some(mu.trend);
    if !mu.closed_form && mu.lower != mu.numeric {
        report.reason.get_or_insert_with(|| {
            format!("numeric mu tail is {}, using lower end", mu.trend)
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn eval_examples() {
        let logistic = SourceSpec::logistic(1.0, 1.0, 2.0).unwrap();
        assert_eq!(logistic.eval(1.0).unwrap(), 0.0);
        let ll = SourceSpec::sublog_loglog(0.0, 1.0).unwrap();
        assert_eq!(ll.eval(0.0).unwrap(), 0.0);
        let sp = SourceSpec::sublog(2.0, 3.0, 0.5).unwrap();
        let s = E - 1.0;
        let expected = 2.0 * s - 3.0 * s * s;
        assert!((sp.eval(s).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(logistic.eval(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn construction_checks() {
        assert!(SourceSpec::logistic(1.0, 0.0, 2.0).is_err());
        assert!(SourceSpec::logistic(1.0, 1.0, 1.0).is_err());
        assert!(SourceSpec::sublog(1.0, 1.0, 1.2).is_err());
        assert!(SourceSpec::sublog(1.0, 1.0, 0.0).is_err());
        let weak = SourceSpec::logistic(1.0, 1.0, 1.5).unwrap();
        assert!(!weak.is_covered());
        assert!(SourceSpec::logistic(1.0, 1.0, 2.0).unwrap().is_covered());
        let neg_f0 = Table::new(vec![0.0, 1.0], vec![-1.0, 0.0]).unwrap();
        assert!(SourceSpec::tabulated(neg_f0).is_err());
        assert!(Table::new(vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn parse_families() {
        assert_eq!(SourceSpec::parse("zero", None).unwrap(), SourceSpec::Zero);
        assert_eq!(
            SourceSpec::parse("logistic 1 2 3", None).unwrap(),
            SourceSpec::Logistic { a: 1.0, b: 2.0, theta: 3.0 }
        );
        assert_eq!(
            SourceSpec::parse("sublog -1 0.5 1", None).unwrap(),
            SourceSpec::Sublog { a: -1.0, b: 0.5, gamma: 1.0 }
        );
        assert_eq!(
            SourceSpec::parse("  subloglog 1   1 ", None).unwrap(),
            SourceSpec::SublogLogLog { a: 1.0, b: 1.0 }
        );
        assert!(SourceSpec::parse("logistic 1 2", None).is_err());
        assert!(SourceSpec::parse("cubic 1 2 3", None).is_err());
    }

    #[test]
    fn tabulated_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "s,f\n0,0\n1,0.5\n2,-1\n4,-5\n").unwrap();
        let spec = SourceSpec::parse("tabulated f.csv", Some(dir.path())).unwrap();
        assert_eq!(spec.eval(0.5).unwrap(), 0.25);
        assert_eq!(spec.eval(3.0).unwrap(), -3.0);
        // linear extension of the last segment
        assert_eq!(spec.eval(6.0).unwrap(), -9.0);
        assert_eq!(spec.derivative(3.0), -2.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let specs = [
            SourceSpec::logistic(1.3, 0.7, 2.5).unwrap(),
            SourceSpec::sublog(-0.4, 1.5, 0.6).unwrap(),
            SourceSpec::sublog(2.0, 1.0, 1.0).unwrap(),
            SourceSpec::sublog_loglog(0.5, 2.0).unwrap(),
        ];
        for spec in &specs {
            for &s in &[1e-3, 0.1, 1.0, 7.0, 300.0] {
                let h = 1e-6 * s;
                let fd = (spec.value(s + h) - spec.value(s - h)) / (2.0 * h);
                let d = spec.derivative(s);
                assert!((fd - d).abs() <= 1e-5 * d.abs().max(1.0), "{spec:?} at {s}: {fd} vs {d}");
            }
            let d0 = spec.derivative(0.0);
            let d_small = spec.derivative(1e-9);
            assert!((d0 - d_small).abs() < 1e-2 * d0.abs().max(1.0), "{spec:?}: {d0} vs {d_small}");
        }
    }

    #[test]
    fn mu_closed_forms() {
        let search = MuSearch::default();
        let est = estimate_mu(&SourceSpec::logistic(1.0, 1.0, 2.0).unwrap(), &search).unwrap();
        assert_eq!(est.value, ExtReal::Infinite);
        let est = estimate_mu(&SourceSpec::logistic(1.0, 1.0, 1.5).unwrap(), &search).unwrap();
        assert_eq!(est.value, ExtReal::Finite(0.0));
        assert_eq!(est.trend, Trend::Decreasing);
        let est = estimate_mu(&SourceSpec::sublog(0.0, 2.0, 1.0).unwrap(), &search).unwrap();
        assert_eq!(est.value, ExtReal::Finite(2.0));
    }

    #[test]
    fn numeric_mu_of_sublog_gamma_one() {
        let spec = SourceSpec::sublog(0.0, 2.0, 1.0).unwrap();
        let g = log_weighted_damping(&spec, 1e12);
        assert!((g - 2.0).abs() < 1e-10);
        let est = estimate_mu_numeric(&spec, &MuSearch::default()).unwrap();
        assert_eq!(est.trend, Trend::Plateau);
        match est.numeric {
            ExtReal::Finite(m) => assert!((m - 2.0).abs() < 1e-6),
            ExtReal::Infinite => panic!("finite mu expected"),
        }
    }

    #[test]
    fn numeric_mu_flags_huge_values_as_infinite() {
        let spec = SourceSpec::logistic(0.0, 1.0, 4.0).unwrap();
        let est = estimate_mu_numeric(&spec, &MuSearch::default()).unwrap();
        assert_eq!(est.numeric, ExtReal::Infinite);
        assert_eq!(est.trend, Trend::Increasing);
    }

    #[test]
    fn numeric_mu_for_subquadratic_damping_decays() {
        let spec = SourceSpec::logistic(1.0, 1.0, 1.5).unwrap();
        for s_max in [1e8, 1e12, 1e16] {
            let search = MuSearch { s_max, ..MuSearch::default() };
            let est = estimate_mu_numeric(&spec, &search).unwrap();
            assert_eq!(est.trend, Trend::Decreasing);
            assert_eq!(est.lower, ExtReal::Finite(0.0));
            let bound = 10.0 * (s_max / 100.0).ln() / (s_max / 100.0).sqrt();
            assert!(est.numeric.to_f64() < bound);
        }
    }

    #[test]
    fn mu_search_preconditions() {
        let spec = SourceSpec::Zero;
        let narrow = MuSearch { s_max: 1e5, ..MuSearch::default() };
        assert!(estimate_mu_numeric(&spec, &narrow).is_err());
        let sparse = MuSearch { points_per_decade: 4, ..MuSearch::default() };
        assert!(estimate_mu_numeric(&spec, &sparse).is_err());
    }

    #[test]
    fn m_eta_examples() {
        let spec = SourceSpec::logistic(1.0, 1.0, 2.0).unwrap();
        assert!(close(compute_m_eta(&spec, 1.0).unwrap(), 1.0, 1e-10));
        let spec = SourceSpec::logistic(-2.0, 1.0, 2.0).unwrap();
        assert_eq!(compute_m_eta(&spec, 1.0).unwrap(), 0.0);
        assert!(matches!(
            compute_m_eta(&SourceSpec::Zero, 1.0),
            Err(Error::UnboundedSource(_))
        ));
        assert!(compute_m_eta(&spec, 0.0).is_err());
    }

    #[test]
    fn m_eta_closed_form_logistic() {
        for &(a, b, eta) in &[(1.0, 2.0, 0.5), (3.0, 0.1, 2.0), (-0.5, 1.0, 4.0), (0.0, 5.0, 1e-3)] {
            let spec = SourceSpec::logistic(a, b, 2.0).unwrap();
            let expected = if a + eta > 0.0 { (a + eta) * (a + eta) / (4.0 * b) } else { 0.0 };
            let got = compute_m_eta(&spec, eta).unwrap();
            assert!(close(got, expected, 1e-9), "{a} {b} {eta}: {got} vs {expected}");
        }
    }

    #[test]
    fn m_eta_tabulated_is_exact() {
        let t = Table::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 2.0, 1.0, -4.0]).unwrap();
        let spec = SourceSpec::tabulated(t).unwrap();
        let m = compute_m_eta_with(&spec, 1.0, DEFAULT_HUGE_CAP).unwrap();
        assert_eq!(m.value, 3.0);
        assert_eq!(m.argmax, 1.0);
        assert!(matches!(
            compute_m_eta(&spec, 10.0),
            Err(Error::UnboundedSource(_))
        ));
    }

    #[test]
    fn compute_m_examples() {
        let spec = SourceSpec::logistic(1.0, 2.0, 2.0).unwrap();
        let b = compute_mass_bound(&spec, 1.0, 1.0).unwrap();
        assert!(close(b.m, 1.5, 1e-9), "{b:?}");
        assert!(close(b.eta_star, 1.0, 1e-3));

        let spec = SourceSpec::logistic(-1.0, 1.0, 2.0).unwrap();
        assert_eq!(compute_m(&spec, 3.0, 7.0).unwrap(), 3.0);

        let spec = SourceSpec::logistic(0.0, 1.0, 2.0).unwrap();
        let m = compute_m(&spec, 0.0, 1.0).unwrap();
        assert!((0.0..1e-6).contains(&m), "{m}");

        assert!(matches!(
            compute_m(&SourceSpec::Zero, 1.0, 1.0),
            Err(Error::UnboundedSource(_))
        ));
    }

    #[test]
    fn compute_m_is_monotone_in_mass_and_area() {
        let spec = SourceSpec::sublog(1.0, 1.0, 0.5).unwrap();
        let base = compute_m(&spec, 1.0, 1.0).unwrap();
        assert!(compute_m(&spec, 2.0, 1.0).unwrap() >= base);
        assert!(compute_m(&spec, 1.0, 2.0).unwrap() >= base);
    }

    #[test]
    fn classify_examples() {
        let r = classify(&SourceSpec::logistic(1.0, 1.0, 2.0).unwrap(), 3.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(r.regime, Regime::B1);
        assert_eq!(r.epsilon0, None);

        let r = classify(&SourceSpec::sublog(0.0, 2.0, 1.0).unwrap(), 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(r.regime, Regime::B2);
        assert_eq!(r.mu, ExtReal::Finite(2.0));
        assert!(r.epsilon0.unwrap() > 0.0);

        // mu = 1 < chi = 5, M = 1: gap = 0.5 - 4 < 0
        let r = classify(&SourceSpec::sublog(0.0, 1.0, 1.0).unwrap(), 5.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(r.regime, Regime::NotCovered);

        let r = classify(&SourceSpec::Zero, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(r.regime, Regime::NotCovered);
        assert_eq!(r.label(), "NotCovered (M unbounded)");
    }

    #[test]
    fn classify_b3_epsilon() {
        let r = classify_values(ExtReal::Finite(1.0), 1.2, 1.0, 1.0);
        assert_eq!(r.regime, Regime::B3);
        let eps = r.epsilon0.unwrap();
        assert!((eps - 0.5 * (0.5f64 - 0.2)).abs() < 1e-15);
        assert!((r.gap - 0.3).abs() < 1e-15);
    }

    #[test]
    fn threshold_scales_with_fourth_power() {
        let base = classify_values(ExtReal::Infinite, 1.0, 1.0, 0.8);
        let scaled = classify_values(ExtReal::Infinite, 1.0, 1.0, 1.6);
        assert_eq!(base.threshold / scaled.threshold, 16.0);
    }

    #[test]
    fn classify_rejects_bad_inputs() {
        let spec = SourceSpec::logistic(1.0, 1.0, 2.0).unwrap();
        assert!(classify(&spec, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(classify(&spec, 1.0, -1.0, 1.0, 1.0).is_err());
    }
}
