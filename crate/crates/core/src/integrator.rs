//! Time stepping for the coupled system with positivity-preserving splitting.
//!
//! One step advances `(u, v)` by
//! 1. explicit upwind chemotaxis, `u* = u - dt χ ∇·(u ∇v)`,
//! 2. diffusion of `u*` (backward Euler by default, or explicit),
//! 3. a cellwise backward-Euler reaction substep `w = ũ + dt f(w)`,
//! 4. the signal update: an elliptic solve for `τ = 0`, otherwise a
//!    backward-Euler step of `τ v_t = Δv - v + u` with `u` explicit.
//!
//! The step size obeys the upwind CFL bound recomputed from the current
//! `∇v`. Blow-up is reported operationally: sup-norm cap exceeded, the CFL
//! step fell below `dt_min`, or the mass inside a few cells around the peak
//! exceeded their share of the domain by a fixed fraction of the total
//! for `collapse_time`. A bounded density
//! cannot hold O(1) mass in an O(h) region, so the last route is the
//! grid-level signature of a forming Dirac mass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{self, DiagnosticsRecord};
use crate::elliptic::{check_maximum_principle, CgWorkspace, EllipticOptions, Preconditioner};
use crate::error::{Error, Result};
use crate::grid::{sum_unchecked, Grid, ScalarField};
use crate::kinetics::SourceSpec;
use crate::operators::{
    laplacian_into, max_face_gradient, max_outflow_rate, FluxScheme, StencilWorkspace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Completed,
    BlowupDetected,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub u: ScalarField,
    pub v: ScalarField,
    /// Size of the last step taken.
    pub dt: f64,
    pub step_count: usize,
    pub status: Status,
    /// Start of the current grid-scale concentration episode.
    pub concentrated_since: Option<f64>,
}

impl SimState {
    pub fn grid(&self) -> &Grid {
        self.u.grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffusionMode {
    /// Backward Euler; the step is limited by advection only.
    #[default]
    Implicit,
    /// Forward Euler under `dt <= cfl * h^2 / 4`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepperOptions {
    pub tau: f64,
    pub chi: f64,
    pub cfl: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub blowup_linf_cap: f64,
    /// Excess of the mass fraction inside the `(2r+1)^2` block around the
    /// peak over the block's area fraction, `r = collapse_radius`, that
    /// counts as grid-scale concentration.
    /// Values above 1 disable the check.
    pub collapse_fraction: f64,
    pub collapse_radius: usize,
    /// How long concentration must persist before blow-up is declared.
    pub collapse_time: f64,
    pub t_end: f64,
    pub source: SourceSpec,
    pub flux: FluxScheme,
    pub diffusion: DiffusionMode,
    pub elliptic: EllipticOptions,
}

impl Default for StepperOptions {
    fn default() -> Self {
        Self {
            tau: 0.0,
            chi: 1.0,
            cfl: 0.4,
            dt_min: 1e-12,
            dt_max: 1e-2,
            blowup_linf_cap: 1e8,
            collapse_fraction: 0.5,
            collapse_radius: 3,
            collapse_time: 0.1,
            t_end: 1.0,
            source: SourceSpec::Zero,
            flux: FluxScheme::Upwind,
            diffusion: DiffusionMode::Implicit,
            elliptic: EllipticOptions::default(),
        }
    }
}

impl StepperOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Construction(msg));
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.chi >= 0.0 && self.chi.is_finite()) {
            return bad(format!("chi must be >= 0, got {}", self.chi));
        }
        if !(self.cfl > 0.0 && self.cfl < 1.0) {
            return bad(format!("cfl must lie in (0, 1), got {}", self.cfl));
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min) {
            return bad(format!(
                "need 0 < dt_min <= dt_max, got {} and {}",
                self.dt_min, self.dt_max
            ));
        }
        if !(self.blowup_linf_cap > 0.0) {
            return bad(format!("blow-up cap must be positive, got {}", self.blowup_linf_cap));
        }
        if !(self.collapse_fraction > 0.0) {
            return bad(format!(
                "collapse fraction must be positive, got {}",
                self.collapse_fraction
            ));
        }
        if !(self.collapse_time >= 0.0 && self.collapse_time.is_finite()) {
            return bad(format!("collapse time must be >= 0, got {}", self.collapse_time));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be >= 0, got {}", self.t_end));
        }
        self.elliptic.validate()
    }
}

/// Mass bookkeeping for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub dt: f64,
    pub mass_start: f64,
    /// Mass after chemotaxis and diffusion.
    pub mass_transported: f64,
    pub mass_end: f64,
    /// `∫ f(ũ)` for the reaction-substep input `ũ`.
    pub source_integral: f64,
}

/// Owns the workspaces for repeated steps on one grid.
pub struct Stepper {
    opts: StepperOptions,
    grid: Grid,
    stencil: StencilWorkspace,
    cg: CgWorkspace,
    buf: Vec<f64>,
    rhs: Vec<f64>,
    u_next: Vec<f64>,
}

impl Stepper {
    pub fn new(grid: Grid, opts: StepperOptions) -> Result<Self> {
        opts.validate()?;
        let n = grid.len();
        Ok(Self {
            opts,
            grid,
            stencil: StencilWorkspace::new(grid),
            cg: CgWorkspace::new(grid),
            buf: vec![0.0; n],
            rhs: vec![0.0; n],
            u_next: vec![0.0; n],
        })
    }

    pub fn options(&self) -> &StepperOptions {
        &self.opts
    }

    /// Largest step allowed by the CFL restrictions for the current `v`.
    pub fn cfl_dt(&self, v: &ScalarField) -> f64 {
        let g = &self.grid;
        let o = &self.opts;
        let hmin = g.hx().min(g.hy());
        let mut dt = o.dt_max;
        if o.chi > 0.0 {
            let grad = max_face_gradient(v.data(), g);
            if grad > 0.0 {
                dt = dt.min(o.cfl * hmin / (2.0 * grad * o.chi));
            }
        }
        let outflow = if o.chi > 0.0 && o.flux == FluxScheme::Upwind {
            max_outflow_rate(v.data(), g, o.chi)
        } else {
            0.0
        };
        match o.diffusion {
            DiffusionMode::Implicit => {
                if outflow > 0.0 {
                    dt = dt.min(o.cfl / outflow);
                }
            }
            DiffusionMode::Explicit => {
                let diff_rate = 2.0 / (g.hx() * g.hx()) + 2.0 / (g.hy() * g.hy());
                dt = dt.min(o.cfl * hmin * hmin / 4.0);
                dt = dt.min(o.cfl / (diff_rate + outflow));
            }
        }
        dt
    }

    /// Chemotaxis plus diffusion over `dt`, in place. Conserves `∫u`.
    pub fn transport(&mut self, u: &mut ScalarField, v: &ScalarField, dt: f64) -> Result<()> {
        let o = &self.opts;
        let n = self.grid.len();
        if o.chi > 0.0 {
            self.stencil
                .chemotactic_divergence_into(u.data(), v.data(), o.chi, o.flux, &mut self.buf);
        } else {
            self.buf.iter_mut().for_each(|x| *x = 0.0);
        }
        match o.diffusion {
            DiffusionMode::Explicit => {
                laplacian_into(&self.grid, u.data(), &mut self.rhs);
                for k in 0..n {
                    let d = u.data()[k] + dt * (self.buf[k] + self.rhs[k]);
                    u.data_mut()[k] = d;
                }
            }
            DiffusionMode::Implicit => {
                for k in 0..n {
                    self.rhs[k] = u.data()[k] + dt * self.buf[k];
                }
                let mass = self.rhs.iter().sum::<f64>();
                self.u_next.copy_from_slice(&self.rhs);
                let tol = EllipticOptions {
                    tol: self.opts.elliptic.tol.min(1e-12),
                    max_iters: Some(self.opts.elliptic.iteration_cap(&self.grid).max(2000)),
                };
                self.cg.solve(
                    1.0,
                    dt,
                    &self.rhs,
                    &mut self.u_next,
                    &tol,
                    Preconditioner::Identity,
                )?;
                if self.rhs.iter().all(|&x| x >= 0.0) {
                    conservative_clip(&mut self.u_next, mass);
                }
                u.data_mut().copy_from_slice(&self.u_next);
            }
        }
        Ok(())
    }

    /// Cellwise backward-Euler reaction substep. Returns `∫ f(ũ)`.
    pub fn react(&self, u: &mut ScalarField, dt: f64) -> Result<f64> {
        let source = &self.opts.source;
        let area = self.grid.cell_area();
        if matches!(source, SourceSpec::Zero) {
            return Ok(0.0);
        }
        let mut source_sum = 0.0;
        for x in u.data_mut() {
            let input = *x;
            source_sum += source.value(input.max(0.0));
            *x = implicit_reaction(source, input, dt)?;
        }
        Ok(area * source_sum)
    }

    /// Advances `state` by one step.
    pub fn step(&mut self, state: &mut SimState) -> Result<StepInfo> {
        if state.status != Status::Running {
            return Err(Error::Domain(format!(
                "cannot step a state with status {:?}",
                state.status
            )));
        }
        let result = self.step_inner(state);
        if result.is_err() {
            state.status = Status::Failed;
        }
        result
    }

    fn step_inner(&mut self, state: &mut SimState) -> Result<StepInfo> {
        let t_end = self.opts.t_end;
        let remaining = t_end - state.t;
        let mass_start = sum_unchecked(&state.u);
        if remaining <= 0.0 {
            state.status = Status::Completed;
            return Ok(StepInfo {
                dt: 0.0,
                mass_start,
                mass_transported: mass_start,
                mass_end: mass_start,
                source_integral: 0.0,
            });
        }
        let cfl_dt = self.cfl_dt(&state.v);
        if cfl_dt < self.opts.dt_min {
            state.status = Status::BlowupDetected;
            return Ok(StepInfo {
                dt: 0.0,
                mass_start,
                mass_transported: mass_start,
                mass_end: mass_start,
                source_integral: 0.0,
            });
        }
        // Absorb slivers left by accumulated rounding into this step.
        let (dt, last) = if cfl_dt * (1.0 + 1e-9) >= remaining {
            (remaining, true)
        } else {
            (cfl_dt, false)
        };

        let u_prev = state.u.clone();
        self.transport(&mut state.u, &state.v, dt)?;
        state.u.ensure_nonnegative()?;
        let mass_transported = sum_unchecked(&state.u);
        let source_integral = self.react(&mut state.u, dt)?;
        let mass_end = sum_unchecked(&state.u);

        self.update_signal(&u_prev, &mut state.u, &mut state.v, dt)?;

        state.t = if last { t_end } else { state.t + dt };
        state.dt = dt;
        state.step_count += 1;
        self.classify_status(state);
        Ok(StepInfo {
            dt,
            mass_start,
            mass_transported,
            mass_end,
            source_integral,
        })
    }

    fn update_signal(
        &mut self,
        u_prev: &ScalarField,
        u: &mut ScalarField,
        v: &mut ScalarField,
        dt: f64,
    ) -> Result<()> {
        let tau = self.opts.tau;
        let opts = self.opts.elliptic;
        if tau == 0.0 {
            self.cg
                .solve(1.0, 1.0, u.data(), v.data_mut(), &opts, Preconditioner::Jacobi)?;
            check_maximum_principle(u, v, opts.tol)?;
        } else {
            let shift = tau / dt;
            for (r, (vi, ui)) in self.rhs.iter_mut().zip(v.data().iter().zip(u_prev.data())) {
                *r = shift * vi + ui;
            }
            self.cg.solve(
                shift + 1.0,
                1.0,
                &self.rhs,
                v.data_mut(),
                &opts,
                Preconditioner::Jacobi,
            )?;
        }
        Ok(())
    }

    fn classify_status(&self, state: &mut SimState) {
        if state.u.data().iter().chain(state.v.data()).any(|x| !x.is_finite()) {
            state.status = Status::Failed;
            return;
        }
        let peak = state.u.max();
        let mass = sum_unchecked(&state.u);
        let concentrated = self.opts.collapse_fraction <= 1.0
            && mass > 0.0
            && peak_block_excess(&state.u, self.opts.collapse_radius, mass)
                >= self.opts.collapse_fraction;
        let collapsed = if concentrated {
            let since = *state.concentrated_since.get_or_insert(state.t);
            state.t - since >= self.opts.collapse_time
        } else {
            state.concentrated_since = None;
            false
        };
        if peak > self.opts.blowup_linf_cap || collapsed {
            state.status = Status::BlowupDetected;
        } else if state.t >= self.opts.t_end {
            state.status = Status::Completed;
        }
    }
}

/// Mass in the `(2r+1)^2` cell block centred on the first maximum, and the
/// number of cells in that block after truncation at the boundary.
pub fn peak_block_mass(u: &ScalarField, r: usize) -> (f64, usize) {
    let g = u.grid();
    let d = u.data();
    let (mut best, mut k) = (f64::NEG_INFINITY, 0);
    for (idx, &x) in d.iter().enumerate() {
        if x > best {
            best = x;
            k = idx;
        }
    }
    let (bi, bj) = (k % g.nx(), k / g.nx());
    let (mut s, mut cells) = (0.0, 0);
    for j in bj.saturating_sub(r)..=(bj + r).min(g.ny() - 1) {
        for i in bi.saturating_sub(r)..=(bi + r).min(g.nx() - 1) {
            s += d[g.index(i, j)];
            cells += 1;
        }
    }
    (s * g.cell_area(), cells)
}

/// Peak-block mass fraction minus the block's area fraction; zero for a
/// constant field and close to 1 for a grid-scale spike.
pub fn peak_block_excess(u: &ScalarField, r: usize, mass: f64) -> f64 {
    let (m, cells) = peak_block_mass(u, r);
    m / mass - cells as f64 / u.grid().len() as f64
}

/// Clips negative roundoff from an iterative solve and rescales so the
/// discrete mass stays `mass`.
fn conservative_clip(u: &mut [f64], mass: f64) {
    if u.iter().all(|&x| x >= 0.0) {
        return;
    }
    u.iter_mut().for_each(|x| *x = x.max(0.0));
    let clipped: f64 = u.iter().sum();
    if clipped > 0.0 {
        let scale = mass / clipped;
        u.iter_mut().for_each(|x| *x *= scale);
    }
}

/// Solves `w - dt f(w) = input` for `w >= 0` by safeguarded Newton.
pub fn implicit_reaction(source: &SourceSpec, input: f64, dt: f64) -> Result<f64> {
    let g = |w: f64| w - dt * source.value(w) - input;
    let mut lo = 0.0;
    let g_lo = g(lo);
    if g_lo >= 0.0 {
        // f(0) >= 0 and input >= 0 force g(0) <= 0, so g(0) = 0 here.
        return Ok(0.0);
    }
    let mut hi = input + dt * source.value(input).max(0.0) + 1.0;
    let mut expansions = 0;
    while g(hi) <= 0.0 {
        hi = 2.0 * hi + 1.0;
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(Error::UnboundedSource(format!(
                "reaction substep has no root above u = {input}"
            )));
        }
    }
    let mut w = input.clamp(lo, hi);
    for _ in 0..200 {
        let gw = g(w);
        if gw == 0.0 {
            return Ok(w);
        }
        if gw < 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let dg = 1.0 - dt * source.derivative(w);
        let newton = w - gw / dg;
        let next = if dg.is_finite() && dg > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - w).abs() <= 1e-15 * w.abs() || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        w = next;
    }
    Ok(w)
}

/// Convenience one-shot step; prefer [`Stepper`] in loops.
pub fn step(state: &SimState, opts: &StepperOptions) -> Result<SimState> {
    let mut stepper = Stepper::new(*state.grid(), opts.clone())?;
    let mut next = state.clone();
    stepper.step(&mut next)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Bounded,
    Blowup,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Bounded => "bounded",
            Verdict::Blowup => "blowup",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bounded" => Ok(Verdict::Bounded),
            "blowup" => Ok(Verdict::Blowup),
            "inconclusive" => Ok(Verdict::Inconclusive),
            _ => Err(Error::Parse(format!("unknown verdict {s:?}"))),
        }
    }
}

/// Recording cadence and callbacks for [`run`].
pub struct RunHooks<'a> {
    /// Record every this many steps (the initial and final states are
    /// always recorded).
    pub record_every: usize,
    pub on_record: Option<RecordHook<'a>>,
    /// Called after every step with the new state.
    pub on_step: Option<StepHook<'a>>,
}

pub type RecordHook<'a> = Box<dyn FnMut(&DiagnosticsRecord) -> Result<()> + 'a>;
pub type StepHook<'a> = Box<dyn FnMut(&SimState, &StepInfo) -> Result<()> + 'a>;

impl Default for RunHooks<'_> {
    fn default() -> Self {
        Self {
            record_every: 1,
            on_record: None,
            on_step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: SimState,
    pub verdict: Verdict,
    pub records: Vec<DiagnosticsRecord>,
    /// The error that ended the run, when it failed.
    pub error: Option<String>,
}

/// Advances to `t_end` or until blow-up is detected.
pub fn run(initial: SimState, opts: &StepperOptions, mut hooks: RunHooks<'_>) -> Result<RunOutcome> {
    let mut state = initial;
    let mut stepper = Stepper::new(*state.grid(), opts.clone())?;
    let every = hooks.record_every.max(1);
    let mut records = Vec::new();

    let emit = |rec: DiagnosticsRecord,
                    records: &mut Vec<DiagnosticsRecord>,
                    hooks: &mut RunHooks<'_>|
     -> Result<()> {
        if let Some(cb) = hooks.on_record.as_mut() {
            cb(&rec)?;
        }
        records.push(rec);
        Ok(())
    };
    let first = diagnostics::record(&state, opts, None);
    emit(first, &mut records, &mut hooks)?;

    if state.t >= opts.t_end && state.status == Status::Running {
        state.status = Status::Completed;
    }
    let mut peak = state.u.max();
    let mut error = None;
    while state.status == Status::Running {
        let info = match stepper.step(&mut state) {
            Ok(info) => info,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        peak = peak.max(state.u.max());
        if let Some(cb) = hooks.on_step.as_mut() {
            cb(&state, &info)?;
        }
        if state.step_count.is_multiple_of(every) || state.status != Status::Running {
            let rec = diagnostics::record(&state, opts, records.last());
            emit(rec, &mut records, &mut hooks)?;
        }
    }
    let verdict = match state.status {
        Status::Completed if peak <= opts.blowup_linf_cap => Verdict::Bounded,
        Status::Completed | Status::BlowupDetected => Verdict::Blowup,
        Status::Running | Status::Failed => Verdict::Inconclusive,
    };
    Ok(RunOutcome {
        state,
        verdict,
        records,
        error,
    })
}

/// Initial cell density profiles.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialKind {
    Constant { value: f64 },
    GaussianBump { center: (f64, f64), width: f64, mass: f64 },
    RandomPerturbation { seed: u64, amplitude: f64, base: f64 },
}

/// How `v0` is chosen when `τ > 0`; for `τ = 0` it is always the
/// elliptic solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SignalInit {
    #[default]
    Elliptic,
    Constant(f64),
}

pub fn make_initial(kind: &InitialKind, grid: Grid, tau: f64) -> Result<SimState> {
    make_initial_with(kind, grid, tau, SignalInit::Elliptic, &EllipticOptions::default())
}

pub fn make_initial_with(
    kind: &InitialKind,
    grid: Grid,
    tau: f64,
    signal: SignalInit,
    elliptic: &EllipticOptions,
) -> Result<SimState> {
    let u = initial_density(kind, grid)?;
    let v = match signal {
        SignalInit::Constant(c) if tau > 0.0 => {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Construction(format!("v0 must be >= 0, got {c}")));
            }
            ScalarField::constant(grid, c)
        }
        _ => crate::elliptic::solve_helmholtz(&u, elliptic)?,
    };
    Ok(SimState {
        t: 0.0,
        u,
        v,
        dt: 0.0,
        step_count: 0,
        status: Status::Running,
        concentrated_since: None,
    })
}

fn initial_density(kind: &InitialKind, grid: Grid) -> Result<ScalarField> {
    let bad = |msg: String| Err(Error::Construction(msg));
    match *kind {
        InitialKind::Constant { value } => {
            if !(value > 0.0 && value.is_finite()) {
                return bad(format!("constant initial density must be positive, got {value}"));
            }
            Ok(ScalarField::constant(grid, value))
        }
        InitialKind::GaussianBump {
            center: (cx, cy),
            width,
            mass,
        } => {
            if !(mass > 0.0 && mass.is_finite()) {
                return bad(format!("bump mass must be positive, got {mass}"));
            }
            if !(width > 0.0 && width.is_finite()) {
                return bad(format!("bump width must be positive, got {width}"));
            }
            let inv = 1.0 / (2.0 * width * width);
            let mut u = ScalarField::from_fn(grid, |x, y| {
                (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp()
            });
            let raw = sum_unchecked(&u);
            if !(raw > 0.0) {
                return bad("bump vanishes on this grid; widen it or move its center".into());
            }
            let scale = mass / raw;
            u.data_mut().iter_mut().for_each(|x| *x *= scale);
            Ok(u)
        }
        InitialKind::RandomPerturbation {
            seed,
            amplitude,
            base,
        } => {
            if !(base > 0.0 && amplitude >= 0.0 && amplitude < base) {
                return bad(format!(
                    "perturbation needs 0 <= amplitude < base, got amplitude {amplitude}, base {base}"
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..grid.len())
                .map(|_| base + amplitude * rng.gen_range(-1.0..=1.0))
                .collect();
            ScalarField::from_vec(grid, data)
        }
    }
}
