use std::sync::Arc;

use rough_heat::algebra::{measure_exponent, ExponentOptions, Increment2, TimeGrid};
use rough_heat::convrp::ConvolutionalRoughPath;
use rough_heat::semigroup::{sobolev_norm, GridFunction, SpectralGrid};
use rough_heat::signal::{random_triples, sample_fbm, DrivingPath, RoughSignal};

const H: f64 = 0.4;
const ALPHA: f64 = 0.25;

fn fbm_crp(level: u32, lift: usize, modes: usize, seed: u64) -> ConvolutionalRoughPath {
    let grid = Arc::new(TimeGrid::dyadic(1.0, level).unwrap());
    let sig = RoughSignal::new(sample_fbm(H, 2, grid, seed).unwrap(), lift).unwrap();
    let spec = Arc::new(SpectralGrid::new(1, modes, 4 * modes).unwrap());
    ConvolutionalRoughPath::new(Arc::new(sig), spec)
}

#[test]
fn mode_kernels_are_additive_on_ten_thousand_triples() {
    let crp = fbm_crp(10, 2, 32, 11).with_cache_capacity(0);
    let grid = crp.signal().grid().clone();
    let lambdas = crp.spectral().distinct_eigenvalues().to_vec();
    let mut worst = 0.0f64;
    for (s, u, t) in random_triples(1024, 10_000, 12) {
        let (kts, ktu, kus) = (crp.kernels(s, t).unwrap(), crp.kernels(u, t).unwrap(), crp.kernels(s, u).unwrap());
        let tau = grid.time(t) - grid.time(u);
        for i in 0..2 {
            for (c, &lam) in lambdas.iter().enumerate() {
                let want = ktu.x(i)[c] + (-lam * tau).exp() * kus.x(i)[c];
                // Relative to the absolute-value kernel, the natural size
                // for cancelling sums of increments.
                worst = worst.max((kts.x(i)[c] - want).abs() / kts.x_scale(i)[c]);
            }
        }
    }
    assert!(worst <= 1e-12, "worst relative additivity defect {worst:e}");
}

#[test]
fn relations_hold_for_linear_and_fbm_signals() {
    let spec = Arc::new(SpectralGrid::new(1, 32, 128).unwrap());
    let grid = Arc::new(TimeGrid::dyadic(1.0, 10).unwrap());
    let linear = RoughSignal::new(DrivingPath::linear(grid, &[1.0, -0.5]).unwrap(), 3).unwrap();
    let phi = GridFunction::random_real(spec.clone(), 32, 0.5, 1);
    let psi = GridFunction::random_real(spec.clone(), 16, 1.0, 2);
    for crp in [ConvolutionalRoughPath::new(Arc::new(linear), spec.clone()), fbm_crp(10, 3, 32, 3)] {
        let rep = crp.relation_audit(&random_triples(1024, 60, 4), &phi, &psi, 1e-2, false).unwrap();
        assert!(rep.x <= 1e-10 && rep.ax <= 1e-10 && rep.xx <= 1e-10, "{rep:?}");
        assert!(rep.xxx.unwrap() <= 1e-9, "{rep:?}");
        assert!(rep.commutation <= 1e-13, "{rep:?}");
    }
}

#[test]
fn xa_relation_improves_under_mesh_doubling() {
    let spec = Arc::new(SpectralGrid::new(1, 8, 32).unwrap());
    let phi = GridFunction::random_real(spec.clone(), 4, 0.0, 5);
    let psi = GridFunction::random_real(spec.clone(), 4, 0.0, 6);
    let mut residuals = Vec::new();
    for level in 3..=6u32 {
        let grid = Arc::new(TimeGrid::dyadic(1.0, level).unwrap());
        let path = DrivingPath::sine(grid, &[1.0], &[1.0], &[0.4]).unwrap();
        let crp = ConvolutionalRoughPath::new(Arc::new(RoughSignal::new(path, 2).unwrap()), spec.clone());
        let cells = 1usize << level;
        // Same times s = 0, u = 3/8, t = 1 at every level.
        residuals.push(crp.xa_residual(0, 3 * cells / 8, cells, 0, &phi, &psi, 1).unwrap());
    }
    for w in residuals.windows(2) {
        assert!(w[1] <= 0.5 * w[0], "{residuals:?}");
    }
}

fn exponent_of(crp: &ConvolutionalRoughPath, pairs: usize, eval: impl Fn(usize, usize) -> f64 + Send + Sync) -> f64 {
    let inc = Increment2::new(crp.signal().grid().clone(), eval);
    let opts = ExponentOptions { min_gap: 2, max_gap: usize::MAX, max_pairs_per_gap: pairs };
    measure_exponent(&inc, |v| *v, opts).unwrap().exponent
}

/// `sup_λ |m_λ| / w(λ)`: the norm of a Fourier multiplier from the space
/// with weight `w` into `L^2`.
fn multiplier_norm(m: &[f64], lambdas: &[f64], w: impl Fn(f64) -> f64) -> f64 {
    m.iter().zip(lambdas).map(|(v, &l)| v.abs() / w(l)).fold(0.0, f64::max)
}

/// Exponents of X^x, X^xx, X^ax, X^axx and X^xa for one fBm sample.
fn operator_exponents(seed: u64) -> [f64; 5] {
    let crp = fbm_crp(12, 2, 16, seed);
    let spec = crp.spectral().clone();
    let lambdas = spec.distinct_eigenvalues().to_vec();
    let flat = |_: f64| 1.0;
    let bessel = |a: f64| move |l: f64| 1.0 + l.powf(a);
    let kern = |t: usize, s: usize| crp.kernels(s, t).unwrap();

    let x = exponent_of(&crp, 64, |t, s| multiplier_norm(kern(t, s).x(0), &lambdas, flat));
    let xx = exponent_of(&crp, 64, |t, s| multiplier_norm(kern(t, s).xx(0, 1), &lambdas, flat));
    let ax = exponent_of(&crp, 64, |t, s| multiplier_norm(&kern(t, s).ax(1), &lambdas, bessel(ALPHA)));
    let axx = exponent_of(&crp, 64, |t, s| multiplier_norm(&kern(t, s).axx(1, 0), &lambdas, bessel(2.0 * ALPHA)));
    // X^xa mixes modes, so it is measured on data: φ in B_{α,2}, ψ in L^2.
    let phi = GridFunction::random_real(spec.clone(), 16, 0.5, seed + 100);
    let psi = GridFunction::random_real(spec.clone(), 8, 1.0, seed + 200);
    let scale = sobolev_norm(&phi, ALPHA, 2.0).unwrap() * psi.l2_norm();
    let xa = exponent_of(&crp, 6, |t, s| crp.xxa_op(s, t, 0, &phi, &psi).unwrap().l2_norm() / scale);
    [x, xx, ax, axx, xa]
}

#[test]
fn measured_holder_regularity_of_the_operators() {
    // A single path gives a noisy fit, so take the median over samples.
    let runs: Vec<[f64; 5]> = (0..5).map(|seed| operator_exponents(40 + seed)).collect();
    let median = |k: usize| {
        let mut v: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let gamma = H - 0.05;
    let want = [H - 0.1, 2.0 * H - 0.15, gamma + ALPHA - 0.15, 2.0 * (gamma + ALPHA) - 0.15, H + ALPHA - 0.15];
    for (k, name) in ["x", "xx", "ax", "axx", "xa"].iter().enumerate() {
        assert!(median(k) >= want[k], "X^{name} exponent {} below {} ({runs:?})", median(k), want[k]);
    }
}
