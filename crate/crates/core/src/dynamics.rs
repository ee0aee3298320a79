//! Vector fields, controlled paths and the time-stepping solvers.
//!
//! A noise field is `f_i(φ)(ξ) = σ_i(ξ, φ(ξ))`. Each scheme advances the
//! mild solution over one coarse step `[u, v]` by
//!
//! ```text
//! y_v = S_{v-u} y_u + Σ_i X^{x,i}_{vu} f_i(y_u) + corrections
//! ```
//!
//! where the corrections are the compensating terms of the order at hand:
//! `X^xa(y, f'_i(y)) + X^{xx,ij}(f_j f'_i)` for rough2, their `S_ε`
//! regularized counterparts, and an extra `X^{xxx,kji}(f_i f'_j f'_k +
//! f_i f_j f''_k)` for rough3. Payloads are formed on the physical grid and
//! projected once, and corrections are added after the first-order part so
//! that fields constant in `η` give the same bits under every unregularized
//! scheme.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::algebra::{
    delta_hat_one, holder_norm, measure_exponent, sew_unchecked, ExponentEstimate, ExponentOptions, HolderOptions,
    Increment2, Path, SewReport, TimeGrid, Vector,
};
use crate::convrp::ConvolutionalRoughPath;
use crate::error::{Error, Result};
use crate::semigroup::{apply_heat, GridFunction, HeatFlow, SpectralGrid};

/// Highest `η`-derivative a field must provide.
pub const MAX_ETA_ORDER: usize = 4;

/// `σ_i(ξ, η)` with its partial derivatives.
pub trait Nonlinearity: Send + Sync {
    /// Number of components `N`.
    fn components(&self) -> usize;

    /// `∂_η^m σ_i(ξ, η)` for `m <= 4`.
    fn eta_derivative(&self, i: usize, m: usize, xi: &[f64], eta: f64) -> f64;

    /// `∂_{ξ_axis} ∂_η^m σ_i(ξ, η)` for `m <= 3`.
    fn xi_eta_derivative(&self, i: usize, axis: usize, m: usize, xi: &[f64], eta: f64) -> f64;

    /// Largest `k` with `f ∈ X_k`.
    fn class_index(&self) -> usize;

    /// Declared `sup |∂_η^m σ_i|` for `m = 0..=4`; `None` when unbounded.
    fn declared_bounds(&self) -> Option<[f64; MAX_ETA_ORDER + 1]>;

    /// Radius of the `ξ`-support around the centre of the torus, if cut off.
    fn cutoff(&self) -> Option<f64> {
        None
    }

    /// Fields violating the boundedness hypotheses, admitted for oracles.
    fn oracle_only(&self) -> bool {
        false
    }

    /// The exact field when `σ_i` does not depend on `η`.
    fn constant_field(&self, _i: usize, _grid: &Arc<SpectralGrid>) -> Option<GridFunction> {
        None
    }

    fn name(&self) -> String;
}

/// `σ = 0`.
#[derive(Clone, Debug)]
pub struct ZeroField {
    pub components: usize,
}

impl Nonlinearity for ZeroField {
    fn components(&self) -> usize {
        self.components
    }
    fn eta_derivative(&self, _: usize, _: usize, _: &[f64], _: f64) -> f64 {
        0.0
    }
    fn xi_eta_derivative(&self, _: usize, _: usize, _: usize, _: &[f64], _: f64) -> f64 {
        0.0
    }
    fn class_index(&self) -> usize {
        MAX_ETA_ORDER
    }
    fn declared_bounds(&self) -> Option<[f64; MAX_ETA_ORDER + 1]> {
        Some([0.0; MAX_ETA_ORDER + 1])
    }
    fn constant_field(&self, _: usize, grid: &Arc<SpectralGrid>) -> Option<GridFunction> {
        Some(GridFunction::zeros(grid.clone()))
    }
    fn name(&self) -> String {
        "zero".into()
    }
}

/// `σ_i(ξ, η) = g_i(ξ)` for band-limited `g_i`.
#[derive(Clone)]
pub struct AdditiveField {
    fields: Vec<GridFunction>,
    bound: f64,
}

impl AdditiveField {
    pub fn new(fields: Vec<GridFunction>) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::InvalidParameter("additive field needs a component".into()))?;
        let mut bound = 0.0f64;
        for g in &fields {
            if **g.grid() != **first.grid() {
                return Err(Error::Shape("additive components on different grids".into()));
            }
            // Σ |ĝ_k| bounds the sup norm of a trigonometric polynomial.
            bound = bound.max(g.coeffs().iter().map(|c| c.norm()).sum());
        }
        Ok(Self { fields, bound })
    }

    pub fn fields(&self) -> &[GridFunction] {
        &self.fields
    }

    fn evaluate(&self, i: usize, xi: &[f64], axis: Option<usize>) -> f64 {
        let g = &self.fields[i];
        let mut acc = 0.0;
        for (idx, c) in g.coeffs().iter().enumerate() {
            let k = g.grid().wave_vector(idx);
            let phase: f64 = k.iter().zip(xi).map(|(&kj, &x)| kj as f64 * x).sum();
            let (s, co) = phase.sin_cos();
            acc += match axis {
                None => c.re * co - c.im * s,
                Some(a) => -(k[a] as f64) * (c.re * s + c.im * co),
            };
        }
        acc
    }
}

impl Nonlinearity for AdditiveField {
    fn components(&self) -> usize {
        self.fields.len()
    }
    fn eta_derivative(&self, i: usize, m: usize, xi: &[f64], _: f64) -> f64 {
        if m == 0 {
            self.evaluate(i, xi, None)
        } else {
            0.0
        }
    }
    fn xi_eta_derivative(&self, i: usize, axis: usize, m: usize, xi: &[f64], _: f64) -> f64 {
        if m == 0 {
            self.evaluate(i, xi, Some(axis))
        } else {
            0.0
        }
    }
    fn class_index(&self) -> usize {
        MAX_ETA_ORDER
    }
    fn declared_bounds(&self) -> Option<[f64; MAX_ETA_ORDER + 1]> {
        let mut b = [0.0; MAX_ETA_ORDER + 1];
        b[0] = self.bound;
        Some(b)
    }
    fn constant_field(&self, i: usize, grid: &Arc<SpectralGrid>) -> Option<GridFunction> {
        (**grid == **self.fields[i].grid()).then(|| self.fields[i].clone())
    }
    fn name(&self) -> String {
        "additive".into()
    }
}

/// `σ_i(ξ, η) = c_i η`. Unbounded, so only usable as an oracle.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub coefficients: Vec<f64>,
}

impl Nonlinearity for LinearField {
    fn components(&self) -> usize {
        self.coefficients.len()
    }
    fn eta_derivative(&self, i: usize, m: usize, _: &[f64], eta: f64) -> f64 {
        match m {
            0 => self.coefficients[i] * eta,
            1 => self.coefficients[i],
            _ => 0.0,
        }
    }
    fn xi_eta_derivative(&self, _: usize, _: usize, _: usize, _: &[f64], _: f64) -> f64 {
        0.0
    }
    fn class_index(&self) -> usize {
        MAX_ETA_ORDER
    }
    fn declared_bounds(&self) -> Option<[f64; MAX_ETA_ORDER + 1]> {
        None
    }
    fn oracle_only(&self) -> bool {
        true
    }
    fn name(&self) -> String {
        "linear".into()
    }
}

/// `σ_i(ξ, η) = a_i χ_M(ξ) sin(η + b_i)`; `χ_M = 1` without a cutoff.
///
/// The cutoff is a product of smooth bumps `exp(1 - 1/(1 - (r/M)^2))` in
/// `r = ξ_a - π`, so it equals one at the centre and vanishes for `|r| >= M`.
#[derive(Clone, Debug)]
pub struct SinField {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub cutoff: Option<f64>,
}

impl SinField {
    pub fn new(amplitudes: Vec<f64>, phases: Vec<f64>, cutoff: Option<f64>) -> Result<Self> {
        if amplitudes.len() != phases.len() || amplitudes.is_empty() {
            return Err(Error::Shape("sin field needs one phase per amplitude".into()));
        }
        if let Some(m) = cutoff {
            if !(m > 0.0) {
                return Err(Error::InvalidParameter(format!("cutoff radius must be positive, got {m}")));
            }
        }
        Ok(Self { amplitudes, phases, cutoff })
    }

    fn bump(&self, r: f64) -> (f64, f64) {
        let Some(m) = self.cutoff else { return (1.0, 0.0) };
        let q = r / m;
        if q.abs() >= 1.0 {
            return (0.0, 0.0);
        }
        let w = 1.0 - q * q;
        let v = (1.0 - 1.0 / w).exp();
        (v, v * (-2.0 * q / (m * w * w)))
    }

    fn chi(&self, xi: &[f64], axis: Option<usize>) -> f64 {
        xi.iter()
            .enumerate()
            .map(|(a, &x)| {
                let (v, dv) = self.bump(x - std::f64::consts::PI);
                if axis == Some(a) {
                    dv
                } else {
                    v
                }
            })
            .product()
    }

    fn wave(&self, i: usize, m: usize, eta: f64) -> f64 {
        self.amplitudes[i] * (eta + self.phases[i] + m as f64 * std::f64::consts::FRAC_PI_2).sin()
    }
}

impl Nonlinearity for SinField {
    fn components(&self) -> usize {
        self.amplitudes.len()
    }
    fn eta_derivative(&self, i: usize, m: usize, xi: &[f64], eta: f64) -> f64 {
        self.chi(xi, None) * self.wave(i, m, eta)
    }
    fn xi_eta_derivative(&self, i: usize, axis: usize, m: usize, xi: &[f64], eta: f64) -> f64 {
        self.chi(xi, Some(axis)) * self.wave(i, m, eta)
    }
    fn class_index(&self) -> usize {
        MAX_ETA_ORDER
    }
    fn declared_bounds(&self) -> Option<[f64; MAX_ETA_ORDER + 1]> {
        let a = self.amplitudes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Some([a; MAX_ETA_ORDER + 1])
    }
    fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }
    fn name(&self) -> String {
        match self.cutoff {
            Some(m) => format!("sin(cutoff={m})"),
            None => "sin".into(),
        }
    }
}

fn real_tol(phi: &GridFunction) -> f64 {
    1e-8 * (1.0 + phi.l2_norm())
}

fn physical_coordinates(grid: &SpectralGrid) -> Vec<Vec<f64>> {
    (0..grid.sample_count()).map(|q| grid.coordinate(q)).collect()
}

fn compose(f: &dyn Nonlinearity, i: usize, m: usize, phi: &GridFunction) -> Result<GridFunction> {
    if i >= f.components() {
        return Err(Error::OutOfRange { index: i, limit: f.components() });
    }
    if let Some(g) = f.constant_field(i, phi.grid()) {
        phi.real_samples(real_tol(phi))?;
        return Ok(if m == 0 { g } else { GridFunction::zeros(phi.grid().clone()) });
    }
    let eta = phi.real_samples(real_tol(phi))?;
    let vals: Vec<f64> = physical_coordinates(phi.grid())
        .iter()
        .zip(&eta)
        .map(|(xi, &e)| f.eta_derivative(i, m, xi, e))
        .collect();
    GridFunction::from_real_samples(phi.grid().clone(), &vals)
}

/// `f_i(φ)`.
pub fn f_eval(f: &dyn Nonlinearity, i: usize, phi: &GridFunction) -> Result<GridFunction> {
    compose(f, i, 0, phi)
}

/// `f'_i(φ) = ∂_η σ_i(·, φ)`.
pub fn f_prime(f: &dyn Nonlinearity, i: usize, phi: &GridFunction) -> Result<GridFunction> {
    compose(f, i, 1, phi)
}

/// `f''_i(φ) = ∂_η^2 σ_i(·, φ)`.
pub fn f_second(f: &dyn Nonlinearity, i: usize, phi: &GridFunction) -> Result<GridFunction> {
    compose(f, i, 2, phi)
}

/// Observed derivative sizes of a field on a `(ξ, η)` lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularityReport {
    pub field: String,
    pub order: usize,
    /// `sup |∂_η^m σ|` for `m <= order` over `|η| <= 10`.
    pub eta_sups: Vec<f64>,
    /// `sup |∂_ξ ∂_η^m σ|` for `m <= min(order, 3)`.
    pub xi_sups: Vec<f64>,
    /// Declared bounds hold and no growth in `η` was seen.
    pub bounded: bool,
    pub oracle_only: bool,
    /// Whether every derivative vanishes outside the cutoff, when one is declared.
    pub support_ok: Option<bool>,
}

/// Sample the derivative sup bounds of `f` up to order `k` on a lattice
/// in `dim` space dimensions.
pub fn regularity_audit(f: &dyn Nonlinearity, k: usize, dim: usize) -> RegularityReport {
    let k = k.min(MAX_ETA_ORDER);
    let side: usize = if dim == 1 { 256 } else { 48 };
    let lattice: Vec<Vec<f64>> = (0..side.pow(dim as u32))
        .map(|q| {
            let mut rest = q;
            (0..dim)
                .map(|_| {
                    let v = (rest % side) as f64 * 2.0 * std::f64::consts::PI / side as f64;
                    rest /= side;
                    v
                })
                .collect()
        })
        .collect();
    let etas = |r: f64| (0..=64).map(move |q| -r + 2.0 * r * q as f64 / 64.0);
    let sup = |m: usize, r: f64| {
        let mut s = 0.0f64;
        for i in 0..f.components() {
            for xi in &lattice {
                for e in etas(r) {
                    s = s.max(f.eta_derivative(i, m, xi, e).abs());
                }
            }
        }
        s
    };
    let eta_sups: Vec<f64> = (0..=k).map(|m| sup(m, 10.0)).collect();
    let far: Vec<f64> = (0..=k).map(|m| sup(m, 1000.0)).collect();
    let mut xi_sups = Vec::new();
    for m in 0..=k.min(3) {
        let mut s = 0.0f64;
        for i in 0..f.components() {
            for xi in &lattice {
                for e in etas(10.0) {
                    for axis in 0..dim {
                        s = s.max(f.xi_eta_derivative(i, axis, m, xi, e).abs());
                    }
                }
            }
        }
        xi_sups.push(s);
    }
    let grows = eta_sups.iter().zip(&far).any(|(near, far)| *far > 10.0 * near.max(1e-300) && *far > 1e-12);
    let declared_ok = match f.declared_bounds() {
        Some(b) => eta_sups.iter().zip(&far).enumerate().all(|(m, (n, fa))| n.max(*fa) <= b[m] * (1.0 + 1e-12) + 1e-15),
        None => false,
    };
    let support_ok = f.cutoff().map(|radius| {
        lattice
            .iter()
            .filter(|xi| xi.iter().any(|&x| (x - std::f64::consts::PI).abs() >= radius))
            .all(|xi| {
                (0..f.components()).all(|i| {
                    (0..=k).all(|m| etas(10.0).all(|e| f.eta_derivative(i, m, xi, e) == 0.0))
                })
            })
    });
    RegularityReport {
        field: f.name(),
        order: k,
        eta_sups,
        xi_sups,
        bounded: declared_ok && !grows,
        oracle_only: f.oracle_only(),
        support_ok,
    }
}

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    YoungEuler,
    Rough2,
    Rough2Regularized,
    Rough3,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::YoungEuler, Scheme::Rough2, Scheme::Rough2Regularized, Scheme::Rough3];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::YoungEuler => "young_euler",
            Scheme::Rough2 => "rough2",
            Scheme::Rough2Regularized => "rough2_regularized",
            Scheme::Rough3 => "rough3",
        }
    }

    fn order3(&self) -> bool {
        matches!(self, Scheme::Rough3)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme '{s}'")))
    }
}

/// Fixed-point iteration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardSettings {
    /// Interval `[start, end]`; both must be coarse nodes.
    pub start: f64,
    pub end: f64,
    pub max_iterations: usize,
    /// Stop once successive iterates differ by less than this.
    pub tolerance: f64,
    /// Upper bound on the dyadic sewing depth.
    pub sew_depth: usize,
    /// How often a failing interval may be halved.
    pub max_bisections: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { start: 0.0, end: 1.0, max_iterations: 30, tolerance: 1e-10, sew_depth: 16, max_bisections: 8 }
    }
}

/// Solver configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Number of coarse steps; must divide the number of fine cells.
    pub steps: usize,
    /// Hölder index of the controlled-path diagnostics.
    pub kappa: f64,
    /// Spatial regularity index of the diagnostics.
    pub alpha: f64,
    /// Integrability index of the diagnostics.
    pub p: f64,
    /// Regularization time; must be positive for `rough2_regularized`.
    pub epsilon: f64,
    /// Keep the `X^xa` term in rough2 and rough3.
    pub include_xa: bool,
    /// Abort once `‖y‖ > blowup_factor · max(‖ψ‖, 1)`.
    pub blowup_factor: f64,
    /// Run the controlled-remainder audit after solving.
    pub audit_remainder: bool,
    pub picard: PicardSettings,
    /// Seed of the driving signal, echoed for provenance.
    pub seed: Option<u64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rough2,
            steps: 64,
            kappa: 0.35,
            alpha: 0.25,
            p: 2.0,
            epsilon: 0.0,
            include_xa: true,
            blowup_factor: 1e6,
            audit_remainder: true,
            picard: PicardSettings::default(),
            seed: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, fine: &TimeGrid) -> Result<()> {
        if self.steps == 0 || fine.cells() % self.steps != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coarse steps do not divide {} fine cells",
                self.steps,
                fine.cells()
            )));
        }
        if self.scheme == Scheme::Rough2Regularized && !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("rough2_regularized needs epsilon > 0".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidParameter(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        if !(self.blowup_factor > 0.0) {
            return Err(Error::InvalidParameter("blow-up factor must be positive".into()));
        }
        Ok(())
    }

    fn stride(&self, fine: &TimeGrid) -> usize {
        fine.cells() / self.steps
    }
}

/// A solution with its Gubinelli derivatives at the coarse nodes.
#[derive(Clone)]
pub struct ControlledPath {
    /// Coarse grid, relative to `start`.
    pub grid: Arc<TimeGrid>,
    /// Absolute time of the first node.
    pub start: f64,
    /// Fine-grid index of every coarse node.
    pub nodes: Vec<usize>,
    pub y: Vec<GridFunction>,
    /// `y^{x,i} = f_i(y)`, per node and component.
    pub yx: Vec<Vec<GridFunction>>,
    /// `y^{xx,ij} = f_j(y) f'_i(y)` (paired with `X^{xx,ij}`), order-3 mode only.
    pub yxx: Option<Vec<Vec<GridFunction>>>,
}

impl ControlledPath {
    /// Absolute node times.
    pub fn times(&self) -> Vec<f64> {
        self.grid.points().iter().map(|t| t + self.start).collect()
    }

    pub fn last(&self) -> &GridFunction {
        self.y.last().expect("non-empty path")
    }

    fn from_values(
        grid: Arc<TimeGrid>,
        start: f64,
        nodes: Vec<usize>,
        y: Vec<GridFunction>,
        f: &dyn Nonlinearity,
        order3: bool,
    ) -> Result<Self> {
        let mut yx = Vec::with_capacity(y.len());
        let mut yxx = order3.then(|| Vec::with_capacity(y.len()));
        for v in &y {
            let p = Payloads::new(f, v, if order3 { 2 } else { 1 })?;
            yx.push(p.f.iter().map(|s| p.project(s)).collect::<Result<Vec<_>>>()?);
            if let Some(out) = yxx.as_mut() {
                let n = p.f.len();
                let mut row = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        row.push(p.project(&p.product(&[&p.f[j], &p.fp[i]]))?);
                    }
                }
                out.push(row);
            }
        }
        Ok(Self { grid, start, nodes, y, yx, yxx })
    }
}

/// Pointwise payload samples at one state.
struct Payloads {
    grid: Arc<SpectralGrid>,
    f: Vec<Vec<f64>>,
    fp: Vec<Vec<f64>>,
    fpp: Vec<Vec<f64>>,
    /// Field index `i` whose values were taken from an exact constant field.
    exact: Vec<Option<GridFunction>>,
}

impl Payloads {
    fn new(field: &dyn Nonlinearity, y: &GridFunction, order: usize) -> Result<Self> {
        let grid = y.grid().clone();
        let eta = y.real_samples(real_tol(y))?;
        let coords = physical_coordinates(&grid);
        let n = field.components();
        let eval = |i: usize, m: usize| -> Vec<f64> {
            coords.iter().zip(&eta).map(|(xi, &e)| field.eta_derivative(i, m, xi, e)).collect()
        };
        let exact: Vec<Option<GridFunction>> = (0..n).map(|i| field.constant_field(i, &grid)).collect();
        let zeros = vec![0.0; eta.len()];
        let f = (0..n)
            .map(|i| match &exact[i] {
                Some(g) => g.real_samples(real_tol(g)),
                None => Ok(eval(i, 0)),
            })
            .collect::<Result<Vec<_>>>()?;
        let deriv = |m: usize| -> Vec<Vec<f64>> {
            (0..n).map(|i| if exact[i].is_some() { zeros.clone() } else { eval(i, m) }).collect()
        };
        let fp = if order >= 1 { deriv(1) } else { Vec::new() };
        let fpp = if order >= 2 { deriv(2) } else { Vec::new() };
        Ok(Self { grid, f, fp, fpp, exact })
    }

    fn product(&self, factors: &[&Vec<f64>]) -> Vec<f64> {
        (0..factors[0].len()).map(|q| factors.iter().map(|v| v[q]).product()).collect()
    }

    fn project(&self, samples: &[f64]) -> Result<GridFunction> {
        GridFunction::from_real_samples(self.grid.clone(), samples)
    }

    fn field(&self, i: usize) -> Result<GridFunction> {
        match &self.exact[i] {
            Some(g) => Ok(g.clone()),
            None => self.project(&self.f[i]),
        }
    }

    fn all_zero(v: &[f64]) -> bool {
        v.iter().all(|&x| x == 0.0)
    }
}

/// The increment `y_v - S_{v-u} y_u` produced by one step of `scheme`
/// from state `y` at fine node `u` to fine node `v`.
pub fn step_increment(
    config: &SolverConfig,
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<GridFunction> {
    let n = f.components();
    if n != crp.dim() {
        return Err(Error::Shape(format!("field has {n} components but the signal has {}", crp.dim())));
    }
    if config.scheme.order3() && !crp.signal().has_level3() {
        return Err(Error::MissingLift(3));
    }
    let order = match config.scheme {
        Scheme::YoungEuler => 0,
        Scheme::Rough2 | Scheme::Rough2Regularized => 1,
        Scheme::Rough3 => 2,
    };
    let p = Payloads::new(f, y, order)?;
    let kern = crp.kernels(u, v)?;
    let eps = config.epsilon;
    let regularize = |g: GridFunction| -> Result<GridFunction> {
        if config.scheme == Scheme::Rough2Regularized {
            apply_heat(&g, eps)
        } else {
            Ok(g)
        }
    };

    let mut out = GridFunction::zeros(y.grid().clone());
    for i in 0..n {
        out.add_multiplied(&regularize(p.field(i)?)?, kern.x(i));
    }
    if order == 0 {
        return Ok(out);
    }

    let mut corr = GridFunction::zeros(y.grid().clone());
    if config.include_xa && config.scheme != Scheme::Rough2Regularized {
        for i in 0..n {
            if Payloads::all_zero(&p.fp[i]) {
                continue;
            }
            let fpi = p.project(&p.fp[i])?;
            corr = corr.add(&crp.xxa_op(u, v, i, y, &fpi)?);
        }
    }
    for i in 0..n {
        for j in 0..n {
            let s = p.product(&[&p.f[j], &p.fp[i]]);
            if Payloads::all_zero(&s) {
                continue;
            }
            corr.add_multiplied(&regularize(p.project(&s)?)?, kern.xx(i, j));
        }
    }
    if order == 2 {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let a = p.product(&[&p.f[i], &p.fp[j], &p.fp[k]]);
                    let b = p.product(&[&p.f[i], &p.f[j], &p.fpp[k]]);
                    let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                    if Payloads::all_zero(&s) {
                        continue;
                    }
                    corr.add_multiplied(&p.project(&s)?, kern.xxx(k, j, i)?);
                }
            }
        }
    }
    Ok(out.add(&corr))
}

fn step_with(
    scheme: Scheme,
    config: &SolverConfig,
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<GridFunction> {
    let cfg = SolverConfig { scheme, ..config.clone() };
    let grid = crp.signal().grid();
    if v <= u {
        return Err(Error::Ordering(format!("step from node {u} to {v}")));
    }
    let h = grid.time(v) - grid.time(u);
    Ok(apply_heat(y, h)?.add(&step_increment(&cfg, y, u, v, crp, f)?))
}

/// One Young/Euler step `S_h y + Σ X^{x,i} f_i(y)` between fine nodes.
pub fn step_young(
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<GridFunction> {
    step_with(Scheme::YoungEuler, &SolverConfig::default(), y, u, v, crp, f)
}

/// One second-order step.
pub fn step_rough2(
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
    include_xa: bool,
) -> Result<GridFunction> {
    let cfg = SolverConfig { include_xa, ..SolverConfig::default() };
    step_with(Scheme::Rough2, &cfg, y, u, v, crp, f)
}

/// One second-order step with `S_ε` applied to both payloads.
pub fn step_regularized(
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
    epsilon: f64,
) -> Result<GridFunction> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("regularization needs epsilon > 0, got {epsilon}")));
    }
    let cfg = SolverConfig { epsilon, ..SolverConfig::default() };
    step_with(Scheme::Rough2Regularized, &cfg, y, u, v, crp, f)
}

/// One third-order step.
pub fn step_rough3(
    y: &GridFunction,
    u: usize,
    v: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
    include_xa: bool,
) -> Result<GridFunction> {
    let cfg = SolverConfig { include_xa, ..SolverConfig::default() };
    step_with(Scheme::Rough3, &cfg, y, u, v, crp, f)
}

/// Measured exponents of the controlled remainders.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RemainderReport {
    pub kappa: f64,
    /// Fitted exponent of `y^♯`; target `2κ`.
    pub sharp: Option<ExponentEstimate>,
    /// Fitted exponent of `y^{x,♯}` in order-3 mode; target `2κ`.
    pub sharp_x: Option<ExponentEstimate>,
}

/// One fixed-point attempt on a subinterval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardAttempt {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
    /// Largest ratio of successive iterate differences.
    pub factor: f64,
    pub converged: bool,
    /// Smallest fitted sewing rate seen in the last iteration (`NaN` if none).
    pub sew_rate: f64,
}

/// Outcome of a solve.
#[derive(Clone, Serialize)]
pub struct SolveReport {
    pub config: SolverConfig,
    pub field: String,
    pub times: Vec<f64>,
    pub l2_norms: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub remainder: RemainderReport,
    /// Fixed-point attempts, for `picard_solve`.
    pub picard: Vec<PicardAttempt>,
    #[serde(skip)]
    pub path: ControlledPath,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn terminal(&self) -> &GridFunction {
        self.path.last()
    }
}

fn coarse_nodes(config: &SolverConfig, fine: &Arc<TimeGrid>) -> Result<(Arc<TimeGrid>, Vec<usize>)> {
    config.validate(fine)?;
    let stride = config.stride(fine);
    let coarse = Arc::new(fine.coarsen(stride)?);
    let nodes = coarse.embedding_in(fine)?;
    Ok((coarse, nodes))
}

fn check_norm(y: &GridFunction, time: f64, ceiling: f64) -> Result<f64> {
    let norm = y.l2_norm();
    if !norm.is_finite() || norm > ceiling {
        return Err(Error::BlowUp { time, norm, ceiling });
    }
    Ok(norm)
}

/// Iterate the configured scheme over the coarse grid.
pub fn solve(
    config: &SolverConfig,
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<SolveReport> {
    let started = Instant::now();
    let fine = crp.signal().grid().clone();
    let (coarse, nodes) = coarse_nodes(config, &fine)?;
    if **psi.grid() != **crp.spectral() {
        return Err(Error::Shape("initial condition is not on the rough path's spectral grid".into()));
    }
    psi.real_samples(real_tol(psi))?;
    let ceiling = config.blowup_factor * psi.l2_norm().max(1.0);
    let mut y = vec![psi.clone()];
    for w in nodes.windows(2) {
        let next = step_with(config.scheme, config, y.last().unwrap(), w[0], w[1], crp, f)?;
        check_norm(&next, fine.time(w[1]), ceiling)?;
        y.push(next);
    }
    finish(config, f, crp, coarse, 0.0, nodes, y, Vec::new(), started)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    config: &SolverConfig,
    f: &dyn Nonlinearity,
    crp: &ConvolutionalRoughPath,
    coarse: Arc<TimeGrid>,
    offset: f64,
    nodes: Vec<usize>,
    y: Vec<GridFunction>,
    picard: Vec<PicardAttempt>,
    started: Instant,
) -> Result<SolveReport> {
    let path = ControlledPath::from_values(coarse, offset, nodes, y, f, config.scheme.order3())?;
    let remainder = if config.audit_remainder && path.y.len() >= 5 {
        controlled_remainder_audit(&path, crp, config.kappa)?
    } else {
        RemainderReport { kappa: config.kappa, ..RemainderReport::default() }
    };
    Ok(SolveReport {
        config: config.clone(),
        field: f.name(),
        times: path.times(),
        l2_norms: path.y.iter().map(|v| v.l2_norm()).collect(),
        sup_norms: path.y.iter().map(|v| v.sup_norm()).collect(),
        remainder,
        picard,
        path,
        wall_time: started.elapsed(),
    })
}

/// `J_{ts}(d̂x f(y))` by dyadic sewing of the scheme's step increments
/// between coarse nodes `s < t` of `path`. The fitted rate is returned
/// rather than enforced: on short coarse grids it is pre-asymptotic.
pub fn rough_integral(
    config: &SolverConfig,
    path: &ControlledPath,
    s: usize,
    t: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<(GridFunction, SewReport)> {
    let nodes = &path.nodes;
    let g = Increment2::new(path.grid.clone(), |b, a| {
        step_increment(config, &path.y[a], nodes[a], nodes[b], crp, f)
            .expect("step increment on validated nodes")
    });
    sew_unchecked(&g, s, t, &HeatFlow, config.picard.sew_depth)
}

fn relative_grid(points: &[f64]) -> Result<TimeGrid> {
    TimeGrid::new(points.iter().map(|t| t - points[0]).collect())
}

fn hat_kappa_distance(grid: &Arc<TimeGrid>, a: &[GridFunction], b: &[GridFunction], kappa: f64) -> Result<f64> {
    let diff: Vec<GridFunction> = a.iter().zip(b).map(|(x, y)| x.sub(y)).collect();
    let sup = diff.iter().map(|d| d.l2_norm()).fold(0.0, f64::max);
    if diff.len() < 2 {
        return Ok(sup);
    }
    let path = Path::new(grid.clone(), diff)?;
    let inc = delta_hat_one(&path, &HeatFlow);
    Ok(sup + holder_norm(&inc, kappa, |v| v.l2_norm(), HolderOptions::default())?)
}

/// Fixed-point solve of the mild equation over the configured interval,
/// computing each `Γ(y)` by sewing. Intervals on which the iteration does
/// not contract are halved, and the second half restarts from the first
/// half's terminal value.
pub fn picard_solve(
    config: &SolverConfig,
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<SolveReport> {
    let started = Instant::now();
    let fine = crp.signal().grid().clone();
    let (coarse, nodes) = coarse_nodes(config, &fine)?;
    let settings = &config.picard;
    let a = coarse.index_of(settings.start)?;
    let b = coarse.index_of(settings.end)?;
    if a >= b {
        return Err(Error::Ordering(format!("Picard interval [{}, {}] is empty", settings.start, settings.end)));
    }
    let sub = Arc::new(relative_grid(&coarse.points()[a..=b])?);
    let offset = coarse.time(a);
    let sub_nodes = nodes[a..=b].to_vec();

    let mut attempts = Vec::new();
    let mut y = vec![psi.clone()];
    let mut pending = vec![(0usize, sub_nodes.len() - 1, 0usize)];
    while let Some((lo, hi, depth)) = pending.pop() {
        let start = y.last().unwrap().clone();
        let (values, attempt) = picard_interval(config, &start, &sub, offset, &sub_nodes, lo, hi, crp, f)?;
        let ok = attempt.converged;
        let (s_time, e_time, factor) = (attempt.start, attempt.end, attempt.factor);
        attempts.push(attempt);
        if ok {
            y.extend(values.into_iter().skip(1));
        } else if hi - lo >= 2 && depth < settings.max_bisections {
            let mid = lo + (hi - lo) / 2;
            pending.push((mid, hi, depth + 1));
            pending.push((lo, mid, depth + 1));
        } else {
            return Err(Error::NoContraction { start: s_time, end: e_time, factor });
        }
    }
    finish(config, f, crp, sub, offset, sub_nodes, y, attempts, started)
}

#[allow(clippy::too_many_arguments)]
fn picard_interval(
    config: &SolverConfig,
    start: &GridFunction,
    grid: &Arc<TimeGrid>,
    offset: f64,
    nodes: &[usize],
    lo: usize,
    hi: usize,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<(Vec<GridFunction>, PicardAttempt)> {
    let local_grid = Arc::new(relative_grid(&grid.points()[lo..=hi])?);
    let local_nodes = nodes[lo..=hi].to_vec();
    let (t0, t1) = (offset + grid.time(lo), offset + grid.time(hi));
    let free: Vec<GridFunction> = (0..local_grid.len())
        .map(|m| apply_heat(start, local_grid.time(m)))
        .collect::<Result<_>>()?;
    let mut current = free.clone();
    let mut last_diff: Option<f64> = None;
    let mut factor = 0.0f64;
    let mut sew_rate = f64::NAN;
    let settings = &config.picard;
    for iteration in 1..=settings.max_iterations {
        let path = ControlledPath {
            grid: local_grid.clone(),
            start: t0,
            nodes: local_nodes.clone(),
            y: current.clone(),
            yx: Vec::new(),
            yxx: None,
        };
        let mut next = vec![start.clone()];
        sew_rate = f64::NAN;
        for m in 1..local_grid.len() {
            let (j, rep) = rough_integral(config, &path, 0, m, crp, f)?;
            if rep.rate.is_finite() {
                sew_rate = if sew_rate.is_nan() { rep.rate } else { sew_rate.min(rep.rate) };
            }
            next.push(free[m].add(&j));
        }
        let diff = hat_kappa_distance(&local_grid, &next, &current, config.kappa)?;
        if let Some(prev) = last_diff {
            if prev > 0.0 {
                factor = factor.max(diff / prev);
            }
        }
        current = next;
        if diff < settings.tolerance {
            let attempt = PicardAttempt {
                start: t0,
                end: t1,
                iterations: iteration - 1,
                factor,
                converged: true,
                sew_rate,
            };
            return Ok((current, attempt));
        }
        if factor >= 1.0 || !diff.is_finite() {
            break;
        }
        last_diff = Some(diff);
    }
    let attempt = PicardAttempt {
        start: t0,
        end: t1,
        iterations: settings.max_iterations,
        factor: factor.max(1.0),
        converged: false,
        sew_rate,
    };
    Ok((current, attempt))
}

/// Measured Hölder exponents of `y^♯` and, in order-3 mode, `y^{x,♯}`.
pub fn controlled_remainder_audit(
    path: &ControlledPath,
    crp: &ConvolutionalRoughPath,
    kappa: f64,
) -> Result<RemainderReport> {
    let fine = crp.signal().grid().clone();
    let n = crp.dim();
    let nodes = &path.nodes;
    let opts = ExponentOptions::default();
    let sharp_inc = Increment2::new(path.grid.clone(), |t, s| {
        let (a, b) = (nodes[s], nodes[t]);
        let mut r = path.y[t].sub(&apply_heat(&path.y[s], fine.time(b) - fine.time(a)).expect("forward time"));
        if a < b {
            let k = crp.kernels(a, b).expect("validated nodes");
            for i in 0..n {
                r.add_multiplied(&path.yx[s][i], &k.x(i).iter().map(|v| -v).collect::<Vec<_>>());
            }
            if let Some(yxx) = &path.yxx {
                for i in 0..n {
                    for j in 0..n {
                        let m: Vec<f64> = k.xx(i, j).iter().map(|v| -v).collect();
                        r.add_multiplied(&yxx[s][i * n + j], &m);
                    }
                }
            }
        }
        r
    });
    let sharp = measure_exponent(&sharp_inc, |v| v.l2_norm(), opts)?;
    let sharp_x = match &path.yxx {
        None => None,
        Some(yxx) => {
            let sig = crp.signal();
            let inc = Increment2::new(path.grid.clone(), |t, s| {
                let dx = sig.increment(nodes[s], nodes[t]).expect("validated nodes");
                let mut acc = 0.0f64;
                for i in 0..n {
                    let mut r = path.yx[t][i].sub(&path.yx[s][i]);
                    for (j, d) in dx.iter().enumerate() {
                        r = r.sub(&yxx[s][i * n + j].scale(*d));
                    }
                    acc = acc.max(r.l2_norm());
                }
                acc
            });
            Some(measure_exponent(&inc, |v| *v, opts)?)
        }
    };
    Ok(RemainderReport { kappa, sharp: Some(sharp), sharp_x })
}

/// Measured exponents of the Taylor remainders of `f(y)` along a path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaylorReport {
    /// `δf_i(y) - (a y) f'_i(y) - δx^j y^{x,j} f'_i(y)`; target `2κ`.
    pub order2: ExponentEstimate,
    /// Additionally minus `x2^{jk}(f_k f'_j f'_i + f_j f_k f''_i)`; target `3κ`.
    pub order3: ExponentEstimate,
}

/// Taylor-decomposition consistency of `f(y)` along a stored path.
/// Residual norms are root-mean-square values over the physical grid.
pub fn taylor_consistency_audit(
    path: &ControlledPath,
    crp: &ConvolutionalRoughPath,
    f: &dyn Nonlinearity,
) -> Result<TaylorReport> {
    let fine = crp.signal().grid().clone();
    let sig = crp.signal();
    let n = f.components();
    let payloads: Vec<Payloads> = path.y.iter().map(|y| Payloads::new(f, y, 2)).collect::<Result<_>>()?;
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let residual = |t: usize, s: usize, third: bool| -> f64 {
        let (a, b) = (path.nodes[s], path.nodes[t]);
        let tau = fine.time(b) - fine.time(a);
        let ay = path.y[s].multiply(|l| (-l * tau).exp_m1());
        let ay = ay.real_samples(f64::INFINITY).expect("real");
        let dx = sig.increment(a, b).expect("nodes");
        let x2 = sig.area(a, b).expect("nodes");
        let (ps, pt) = (&payloads[s], &payloads[t]);
        let mut worst = 0.0f64;
        for i in 0..n {
            let r: Vec<f64> = (0..ay.len())
                .map(|q| {
                    let mut v = pt.f[i][q] - ps.f[i][q] - ay[q] * ps.fp[i][q];
                    for j in 0..n {
                        v -= dx[j] * ps.f[j][q] * ps.fp[i][q];
                    }
                    if third {
                        for j in 0..n {
                            for k in 0..n {
                                let c = x2[j * n + k];
                                v -= c * (ps.f[k][q] * ps.fp[j][q] * ps.fp[i][q] + ps.f[j][q] * ps.f[k][q] * ps.fpp[i][q]);
                            }
                        }
                    }
                    v
                })
                .collect();
            worst = worst.max(rms(&r));
        }
        worst
    };
    let opts = ExponentOptions::default();
    let order2 = measure_exponent(&Increment2::new(path.grid.clone(), |t, s| residual(t, s, false)), |v| *v, opts)?;
    let order3 = measure_exponent(&Increment2::new(path.grid.clone(), |t, s| residual(t, s, true)), |v| *v, opts)?;
    Ok(TaylorReport { order2, order3 })
}

/// `e^{Σ c_i δx^i_{t0}} S_t ψ`, the exact solution for `f_i(φ) = c_i φ`.
pub fn commuting_flow_solution(
    coefficients: &[f64],
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    node: usize,
) -> Result<GridFunction> {
    let sig = crp.signal();
    let dx = sig.increment(0, node)?;
    if dx.len() != coefficients.len() {
        return Err(Error::Shape("one coefficient per signal component".into()));
    }
    let growth: f64 = coefficients.iter().zip(&dx).map(|(c, d)| c * d).sum();
    Ok(apply_heat(psi, sig.grid().time(node))?.scale(growth.exp()))
}

/// `S_t ψ + Σ_i X^{x,i}_{t0}(g_i)`, the exact solution for additive fields.
pub fn additive_solution(
    fields: &[GridFunction],
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    node: usize,
) -> Result<GridFunction> {
    let mut out = apply_heat(psi, crp.signal().grid().time(node))?;
    for (i, g) in fields.iter().enumerate() {
        out = out.add(&crp.xx_op(0, node, i, g)?);
    }
    Ok(out)
}
