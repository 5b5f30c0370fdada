use chemolab::integrator::{
    make_initial, run, InitialKind, RunHooks, SimState, Status, Stepper, StepperOptions, Verdict,
};
use chemolab::{entropy_integrand, integrate, norm, Grid, Norm, SourceSpec};
use proptest::prelude::*;

fn logistic_exact(u0: f64, t: f64) -> f64 {
    1.0 / (1.0 + (1.0 / u0 - 1.0) * (-t).exp())
}

fn logistic_opts(dt: f64, t_end: f64) -> StepperOptions {
    StepperOptions {
        source: SourceSpec::logistic(1.0, 1.0, 2.0).unwrap(),
        dt_max: dt,
        dt_min: 1e-14,
        t_end,
        ..StepperOptions::default()
    }
}

fn logistic_error(dt: f64) -> f64 {
    let g = Grid::unit_square(8).unwrap();
    let init = make_initial(&InitialKind::Constant { value: 0.2 }, g, 0.0).unwrap();
    let out = run(init, &logistic_opts(dt, 1.0), RunHooks::default()).unwrap();
    assert_eq!(out.verdict, Verdict::Bounded);
    assert!((out.state.t - 1.0).abs() < 1e-12);
    let exact = logistic_exact(0.2, 1.0);
    out.state.u.data().iter().map(|&x| (x - exact).abs()).fold(0.0, f64::max)
}

#[test]
fn logistic_equilibrium_is_preserved() {
    let g = Grid::unit_square(8).unwrap();
    let init = make_initial(&InitialKind::Constant { value: 1.0 }, g, 0.0).unwrap();
    let out = run(init, &logistic_opts(1e-2, 5.0), RunHooks::default()).unwrap();
    assert_eq!(out.verdict, Verdict::Bounded);
    for &x in out.state.u.data() {
        assert!((x - 1.0).abs() <= 1e-6, "{x}");
    }
}

#[test]
fn logistic_growth_converges_first_order() {
    let e1 = logistic_error(0.02);
    let e2 = logistic_error(0.01);
    let e3 = logistic_error(0.005);
    assert!(e1 < 1e-2, "{e1}");
    for (a, b) in [(e1, e2), (e2, e3)] {
        let r = a / b;
        assert!((1.8..2.2).contains(&r), "ratio {r} from {a} / {b}");
    }
}

#[test]
fn small_tau_matches_elliptic_signal() {
    let g = Grid::unit_square(32).unwrap();
    let kind = InitialKind::GaussianBump {
        center: (0.5, 0.5),
        width: 0.1,
        mass: 5.0,
    };
    let mut l2 = Vec::new();
    for tau in [0.0, 1e-6] {
        let opts = StepperOptions {
            tau,
            t_end: 0.2,
            dt_max: 2e-3,
            ..StepperOptions::default()
        };
        let init = make_initial(&kind, g, tau).unwrap();
        let out = run(init, &opts, RunHooks::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Bounded);
        l2.push(norm(&out.state.u, Norm::L2).unwrap());
    }
    let rel = (l2[0] - l2[1]).abs() / l2[0];
    assert!(rel <= 0.02, "{l2:?}");
}

#[test]
fn heat_flow_dissipates_entropy() {
    let g = Grid::new(24, 16, 1.5, 1.0).unwrap();
    let init = make_initial(
        &InitialKind::RandomPerturbation {
            seed: 11,
            amplitude: 0.9,
            base: 1.0,
        },
        g,
        0.0,
    )
    .unwrap();
    let opts = StepperOptions {
        chi: 0.0,
        dt_max: 1e-3,
        t_end: 10.0,
        ..StepperOptions::default()
    };
    let mut stepper = Stepper::new(g, opts).unwrap();
    let mut state = init;
    let mut prev = entropy_integrand(&state.u).unwrap();
    for _ in 0..100 {
        stepper.step(&mut state).unwrap();
        let e = entropy_integrand(&state.u).unwrap();
        assert!(e <= prev + 1e-13, "{e} > {prev}");
        prev = e;
    }
}

fn reaction_residual(dt: f64) -> f64 {
    let g = Grid::unit_square(16).unwrap();
    let init = make_initial(
        &InitialKind::GaussianBump {
            center: (0.5, 0.5),
            width: 0.3,
            mass: 0.3,
        },
        g,
        0.0,
    )
    .unwrap();
    assert!(init.u.max() < 1.0);
    let opts = StepperOptions {
        source: SourceSpec::logistic(2.0, 1.0, 2.0).unwrap(),
        dt_max: dt,
        t_end: 1.0,
        ..StepperOptions::default()
    };
    let mut stepper = Stepper::new(g, opts).unwrap();
    let mut state = init;
    let info = stepper.step(&mut state).unwrap();
    assert_eq!(info.dt, dt);
    assert!((info.mass_transported - info.mass_start).abs() <= 1e-12 * info.mass_start);
    (info.mass_end - info.mass_transported - dt * info.source_integral).abs()
}

#[test]
fn per_step_mass_balance_is_second_order() {
    let r1 = reaction_residual(4e-3);
    let r2 = reaction_residual(2e-3);
    let ratio = r1 / r2;
    assert!((3.5..4.5).contains(&ratio), "{r1} {r2} {ratio}");
}

fn source_strategy() -> impl Strategy<Value = SourceSpec> {
    prop_oneof![
        Just(SourceSpec::Zero),
        (0.0..2.0f64, 0.1..2.0f64).prop_map(|(a, b)| SourceSpec::logistic(a, b, 2.0).unwrap()),
        (0.0..2.0f64, 0.1..2.0f64, 0.1..=1.0f64)
            .prop_map(|(a, b, g)| SourceSpec::sublog(a, b, g).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn steps_preserve_positivity(
        seed in 0u64..1000,
        amplitude in 0.0..0.99f64,
        chi in 0.0..3.0f64,
        tau in prop_oneof![Just(0.0), 0.1..2.0f64],
        source in source_strategy(),
    ) {
        let g = Grid::new(12, 10, 1.2, 1.0).unwrap();
        let init = make_initial(
            &InitialKind::RandomPerturbation { seed, amplitude, base: 1.0 },
            g,
            tau,
        ).unwrap();
        let opts = StepperOptions { tau, chi, source: source.clone(), t_end: 10.0, ..StepperOptions::default() };
        let mut stepper = Stepper::new(g, opts).unwrap();
        let mut state: SimState = init;
        let m0 = integrate(&state.u).unwrap();
        for _ in 0..20 {
            stepper.step(&mut state).unwrap();
            prop_assert_eq!(state.status, Status::Running);
            prop_assert!(state.u.min() >= 0.0);
            prop_assert!(state.v.min() >= 0.0);
        }
        if source == SourceSpec::Zero {
            let m = integrate(&state.u).unwrap();
            prop_assert!((m - m0).abs() <= 1e-12 * m0);
        }
    }
}
