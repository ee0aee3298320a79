use std::sync::Arc;

use rough_heat::algebra::{loglog_slope, TimeGrid, Vector};
use rough_heat::convrp::ConvolutionalRoughPath;
use rough_heat::dynamics::*;
use rough_heat::semigroup::{apply_heat, sobolev_norm, GridFunction, SpectralGrid};
use rough_heat::signal::{sample_fbm, DrivingPath, RoughSignal};

fn spectral(modes: usize) -> Arc<SpectralGrid> {
    Arc::new(SpectralGrid::new(1, modes, 4 * modes).unwrap())
}

fn dyadic(level: u32) -> Arc<TimeGrid> {
    Arc::new(TimeGrid::dyadic(1.0, level).unwrap())
}

fn crp_of(path: DrivingPath, lift: usize, spec: &Arc<SpectralGrid>) -> ConvolutionalRoughPath {
    ConvolutionalRoughPath::new(Arc::new(RoughSignal::new(path, lift).unwrap()), spec.clone())
}

fn fbm(hurst: f64, level: u32, seed: u64, spec: &Arc<SpectralGrid>) -> ConvolutionalRoughPath {
    crp_of(sample_fbm(hurst, 2, dyadic(level), seed).unwrap(), 3, spec)
}

fn sin_field() -> SinField {
    SinField::new(vec![1.0, 1.0], vec![0.0, 0.5], None).unwrap()
}

fn quiet(scheme: Scheme, steps: usize) -> SolverConfig {
    SolverConfig { scheme, steps, epsilon: 0.05, audit_remainder: false, ..SolverConfig::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn additive_fields_telescope_for_every_scheme_and_mesh() {
    let spec = spectral(16);
    let crp = fbm(0.4, 8, 1, &spec);
    let g: Vec<GridFunction> = (0..2).map(|s| GridFunction::random_real(spec.clone(), 8, 1.0, 30 + s)).collect();
    let field = AdditiveField::new(g.clone()).unwrap();
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 3);
    let smoothed: Vec<GridFunction> = g.iter().map(|v| apply_heat(v, 0.05).unwrap()).collect();
    for steps in [1, 4, 16, 64, 256] {
        for scheme in Scheme::ALL {
            let rep = solve(&quiet(scheme, steps), &psi, &crp, &field).unwrap();
            let source = if scheme == Scheme::Rough2Regularized { &smoothed } else { &g };
            for (m, &node) in rep.path.nodes.iter().enumerate() {
                let want = additive_solution(source, &psi, &crp, node).unwrap();
                let err = rep.path.y[m].distance(&want).unwrap();
                assert!(err <= 1e-10, "{scheme} steps {steps} node {node}: {err:e}");
            }
        }
    }
}

#[test]
fn additive_fields_give_identical_bits_across_schemes() {
    let spec = spectral(16);
    let crp = fbm(0.3, 8, 2, &spec);
    let field = AdditiveField::new((0..2).map(|s| GridFunction::random_real(spec.clone(), 6, 0.5, 40 + s)).collect())
        .unwrap();
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 4);
    for include_xa in [true, false] {
        let bits: Vec<Vec<_>> = [Scheme::YoungEuler, Scheme::Rough2, Scheme::Rough3]
            .into_iter()
            .map(|scheme| {
                let cfg = SolverConfig { include_xa, ..quiet(scheme, 32) };
                let rep = solve(&cfg, &psi, &crp, &field).unwrap();
                rep.path.y.iter().flat_map(|y| y.coeffs().iter().map(|c| (c.re.to_bits(), c.im.to_bits()))).collect()
            })
            .collect();
        assert!(bits[0] == bits[1] && bits[1] == bits[2], "include_xa = {include_xa}");
    }
}

#[test]
fn euler_on_the_linear_flow() {
    // x_t = t and f(φ) = φ keep 2 cos ξ stationary, and the exponential
    // integrator reproduces that exactly. The cos 2ξ mode decays and
    // carries a first-order error.
    let spec = spectral(8);
    let crp = crp_of(DrivingPath::linear(dyadic(10), &[1.0]).unwrap(), 2, &spec);
    let field = LinearField { coefficients: vec![1.0] };
    let still = GridFunction::from_fn(spec.clone(), |xi| 2.0 * xi[0].cos());
    let rep = solve(&quiet(Scheme::YoungEuler, 8), &still, &crp, &field).unwrap();
    assert!(rep.terminal().distance(&still).unwrap() <= 1e-13);

    let psi = GridFunction::from_fn(spec.clone(), |xi| 2.0 * xi[0].cos() + (2.0 * xi[0]).cos());
    let want = commuting_flow_solution(&[1.0], &psi, &crp, 1024).unwrap();
    let pts: Vec<(f64, f64)> = (3..=9)
        .map(|level| {
            let rep = solve(&quiet(Scheme::YoungEuler, 1 << level), &psi, &crp, &field).unwrap();
            (0.5f64.powi(level), rep.terminal().distance(&want).unwrap())
        })
        .collect();
    let order = loglog_slope(&pts).unwrap();
    assert!((0.8..1.3).contains(&order), "order {order} from {pts:?}");
}

#[test]
fn commuting_flow_orders_on_a_smooth_signal() {
    let spec = spectral(32);
    let path = DrivingPath::sine(dyadic(10), &[1.0, 0.6], &[2.0, 3.0], &[0.3, 1.1]).unwrap();
    let crp = crp_of(path, 3, &spec);
    let field = LinearField { coefficients: vec![0.5, -0.35] };
    let psi = GridFunction::constant(spec.clone(), 1.0).add(&GridFunction::random_real(spec.clone(), 8, 1.0, 3).scale(0.1));
    let want = commuting_flow_solution(&field.coefficients, &psi, &crp, 1024).unwrap();
    let errors = |scheme| -> Vec<(f64, f64)> {
        (4..=10)
            .map(|level| {
                let rep = solve(&quiet(scheme, 1 << level), &psi, &crp, &field).unwrap();
                (0.5f64.powi(level), rep.terminal().distance(&want).unwrap())
            })
            .collect()
    };
    let (young, rough2, rough3) = (errors(Scheme::YoungEuler), errors(Scheme::Rough2), errors(Scheme::Rough3));
    for e in [&young, &rough2, &rough3] {
        assert!(e.windows(2).all(|w| w[1].1 < w[0].1), "not monotone: {e:?}");
    }
    assert!(loglog_slope(&young).unwrap() >= 0.8, "{young:?}");
    assert!(loglog_slope(&rough2).unwrap() >= 1.5, "{rough2:?}");
    for (a, b) in rough2.iter().zip(&rough3) {
        assert!(b.1 <= a.1, "rough3 {} above rough2 {} at h = {}", b.1, a.1, a.0);
    }
}

#[test]
fn sin_field_composition_stays_sobolev_bounded() {
    let spec = spectral(32);
    let field = sin_field();
    let mut worst_small = 0.0f64;
    let mut worst_large = 0.0f64;
    for seed in 0..8 {
        let base = GridFunction::random_real(spec.clone(), 12, 1.0, 60 + seed);
        for amp in [0.25, 1.0, 4.0, 16.0, 64.0] {
            let phi = base.scale(amp / base.sup_norm());
            let f = f_eval(&field, 0, &phi).unwrap();
            let r = sobolev_norm(&f, 0.25, 2.0).unwrap() / (1.0 + sobolev_norm(&phi, 0.25, 2.0).unwrap());
            if amp <= 1.0 {
                worst_small = worst_small.max(r);
            } else {
                worst_large = worst_large.max(r);
            }
        }
    }
    assert!(worst_large <= worst_small.max(1.0), "{worst_small} {worst_large}");
}

#[test]
fn large_regularization_leaves_only_constant_forcing() {
    let spec = spectral(16);
    let crp = fbm(0.4, 6, 5, &spec);
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 6);
    let cfg = SolverConfig { epsilon: 60.0, ..quiet(Scheme::Rough2Regularized, 8) };
    let inc = step_increment(&cfg, &psi, 0, 8, &crp, &sin_field()).unwrap();
    let mean = inc.mean().re;
    let rest = inc.sub(&GridFunction::constant(spec.clone(), mean));
    assert!(rest.l2_norm() <= 1e-20 * inc.l2_norm().max(1.0), "{}", rest.l2_norm());
    assert!(mean != 0.0);
}

#[test]
fn sewn_young_integral_is_the_fine_riemann_sum() {
    let spec = spectral(16);
    let crp = fbm(0.75, 8, 7, &spec);
    let field = sin_field();
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 8);
    let cfg = quiet(Scheme::YoungEuler, 256);
    let rep = solve(&cfg, &psi, &crp, &field).unwrap();
    let path = &rep.path;
    let grid = crp.signal().grid();
    for (s, t) in [(0, 256), (17, 200), (64, 128)] {
        let (sewn, _) = rough_integral(&cfg, path, s, t, &crp, &field).unwrap();
        let mut sum = GridFunction::zeros(spec.clone());
        for k in s..t {
            let kern = crp.kernels(k, k + 1).unwrap();
            let mut piece = GridFunction::zeros(spec.clone());
            for i in 0..2 {
                piece.add_multiplied(&f_eval(&field, i, &path.y[k]).unwrap(), kern.x(i));
            }
            sum = sum.add(&apply_heat(&piece, grid.time(t) - grid.time(k + 1)).unwrap());
        }
        let err = sewn.distance(&sum).unwrap();
        assert!(err <= 1e-8, "[{s}, {t}]: {err:e}");
        // The scheme's own path satisfies y_t = S_{t-s} y_s + J_ts.
        let mild = apply_heat(&path.y[s], grid.time(t) - grid.time(s)).unwrap().add(&sewn);
        assert!(mild.distance(&path.y[t]).unwrap() <= 1e-10);
    }
}

#[test]
fn free_heat_flow_has_no_remainder() {
    let spec = spectral(16);
    let crp = fbm(0.4, 8, 9, &spec);
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 10);
    let cfg = SolverConfig { steps: 64, ..SolverConfig::default() };
    let rep = solve(&cfg, &psi, &crp, &ZeroField { components: 2 }).unwrap();
    let sharp = rep.remainder.sharp.unwrap();
    // Zero up to the rounding of S_{t-s} against S_{t-u} S_{u-s}.
    assert!(sharp.samples.iter().all(|s| s.1 <= 1e-14), "{:?}", sharp.samples);
}

/// Median `(y^♯, y^{x,♯}, Taylor order 2, Taylor order 3)` exponents over seeds.
fn remainder_exponents(hurst: f64, scheme: Scheme, kappa: f64) -> [f64; 4] {
    let spec = spectral(16);
    let field = sin_field();
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 3);
    let runs: Vec<[f64; 4]> = (0..5)
        .map(|seed| {
            let crp = fbm(hurst, 12, 100 + seed, &spec);
            let cfg = SolverConfig { scheme, steps: 4096, kappa, ..SolverConfig::default() };
            let rep = solve(&cfg, &psi, &crp, &field).unwrap();
            let taylor = taylor_consistency_audit(&rep.path, &crp, &field).unwrap();
            let sharp_x = rep.remainder.sharp_x.map_or(f64::NAN, |e| e.exponent);
            [rep.remainder.sharp.unwrap().exponent, sharp_x, taylor.order2.exponent, taylor.order3.exponent]
        })
        .collect();
    std::array::from_fn(|k| median(runs.iter().map(|r| r[k]).collect()))
}

#[test]
fn young_remainder_exponent() {
    let [sharp, ..] = remainder_exponents(0.75, Scheme::YoungEuler, 0.7);
    assert!(sharp >= 2.0 * 0.7 * 0.9, "{sharp}");
}

#[test]
fn rough2_remainder_and_taylor_exponents() {
    let kappa = 0.35;
    let [sharp, _, order2, order3] = remainder_exponents(0.4, Scheme::Rough2, kappa);
    assert!(sharp >= 2.0 * kappa * 0.8, "y^♯ {sharp}");
    assert!(order2 >= 2.0 * kappa * 0.8, "order 2 {order2}");
    assert!(order3 >= 3.0 * kappa * 0.8, "order 3 {order3}");
}

#[test]
fn rough3_remainder_and_taylor_exponents() {
    let kappa = 0.28;
    let [sharp, sharp_x, order2, order3] = remainder_exponents(0.3, Scheme::Rough3, kappa);
    assert!(sharp >= 2.0 * kappa * 0.8, "y^♯ {sharp}");
    assert!(sharp_x >= 2.0 * kappa * 0.8, "y^x♯ {sharp_x}");
    assert!(order2 >= 2.0 * kappa * 0.8, "order 2 {order2}");
    assert!(order3 >= 3.0 * kappa * 0.8, "order 3 {order3}");
}

#[test]
fn picard_agrees_with_steps_on_a_short_interval() {
    let spec = spectral(32);
    let crp = crp_of(DrivingPath::sine(dyadic(8), &[1.0], &[2.0], &[0.4]).unwrap(), 2, &spec);
    let field = LinearField { coefficients: vec![0.7] };
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 11);
    let mut cfg = quiet(Scheme::Rough2, 64);
    cfg.picard.end = 0.25;
    let pic = picard_solve(&cfg, &psi, &crp, &field).unwrap();
    let steps = solve(&cfg, &psi, &crp, &field).unwrap();
    assert!(pic.picard.iter().all(|a| a.converged && a.factor < 1.0), "{:?}", pic.picard);
    for (m, y) in pic.path.y.iter().enumerate() {
        assert!(y.sub(&steps.path.y[m]).sup_norm() <= 1e-6);
    }
}

#[test]
fn area_perturbation_response_is_stable() {
    let spec = spectral(16);
    let sig = RoughSignal::new(sample_fbm(0.4, 2, dyadic(10), 12).unwrap(), 2).unwrap();
    let field = sin_field();
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 13);
    let cfg = quiet(Scheme::Rough2, 256);
    let run = |s: RoughSignal| {
        let crp = ConvolutionalRoughPath::new(Arc::new(s), spec.clone());
        solve(&cfg, &psi, &crp, &field).unwrap().path.y
    };
    let base = run(sig.clone());
    let size = base.iter().map(|y| y.sup_norm()).fold(0.0, f64::max);
    let levy = (0..=sig.cells())
        .map(|t| {
            let a = sig.area(0, t).unwrap();
            0.5 * (a[1] - a[2]).abs()
        })
        .fold(0.0, f64::max);
    let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&delta| {
            let moved = run(sig.perturb_area(delta * levy).unwrap());
            let change = moved.iter().zip(&base).map(|(a, b)| a.sub(b).sup_norm()).fold(0.0, f64::max);
            (change / size) / delta
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
    assert!(lo > 0.0 && hi <= 3.0 * lo, "{ratios:?}");
}

#[test]
fn solves_are_reproducible() {
    let spec = spectral(16);
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, 14);
    let cfg = SolverConfig { steps: 64, seed: Some(15), ..SolverConfig::default() };
    let json: Vec<String> = (0..2)
        .map(|_| {
            let crp = fbm(0.4, 8, 15, &spec);
            serde_json::to_string(&solve(&cfg, &psi, &crp, &sin_field()).unwrap()).unwrap()
        })
        .collect();
    assert_eq!(json[0], json[1]);
}
