//! Discrete k-increment calculus on a time grid.
//!
//! Paths (1-increments), 2-increments and 3-increments are indexed by grid
//! positions with the later time first: `at(t, s)` with `s <= t`, and
//! `at(t, u, s)` with `s <= u <= t`. Values live in any [`Vector`] space; the
//! twisted coboundary takes an [`EvolutionFamily`] which supplies `S_tau` and
//! `a_tau = S_tau - id`.
//!
//! Increments are lazy: they wrap an evaluator closure and only materialise a
//! dense table when [`Increment2::densify`] is called (used by audits on
//! small grids).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normed vector space over the reals.
pub trait Vector: Clone + Send + Sync {
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn norm(&self) -> f64;

    fn zero_like(&self) -> Self {
        self.scale(0.0)
    }
}

impl Vector for f64 {
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn sub(&self, other: &Self) -> Self {
        self - other
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
}

/// Two-parameter evolution `S_{t-s}` acting on a value space.
pub trait EvolutionFamily<V: Vector>: Send + Sync {
    /// `S_tau v`, with `tau >= 0`.
    fn apply_s(&self, tau: f64, v: &V) -> V;

    /// `a_tau v = S_tau v - v`.
    fn apply_a(&self, tau: f64, v: &V) -> V {
        self.apply_s(tau, v).sub(v)
    }
}

/// `S = id`; the twisted coboundary reduces to the plain one.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<V: Vector> EvolutionFamily<V> for Identity {
    fn apply_s(&self, _tau: f64, v: &V) -> V {
        v.clone()
    }
    fn apply_a(&self, _tau: f64, v: &V) -> V {
        v.zero_like()
    }
}

/// Scalar semigroup `S_tau = exp(-rate * tau)`, the one-mode heat flow.
#[derive(Clone, Copy, Debug)]
pub struct ScalarDecay {
    pub rate: f64,
}

impl EvolutionFamily<f64> for ScalarDecay {
    fn apply_s(&self, tau: f64, v: &f64) -> f64 {
        (-self.rate * tau).exp() * v
    }
}

/// A linear operator acting on values of type `V`.
pub trait LinearOp<V>: Send + Sync {
    fn apply(&self, v: &V) -> V;
}

/// Real scalars act by multiplication.
impl<V: Vector> LinearOp<V> for f64 {
    fn apply(&self, v: &V) -> V {
        v.scale(*self)
    }
}

/// Strictly increasing time nodes on `[0, T]` starting at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    dyadic_level: Option<u32>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Shape("a time grid needs at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "time grid must start at 0, got {}",
                points[0]
            )));
        }
        if points.iter().any(|t| !t.is_finite()) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Ordering("time grid points must be finite and strictly increasing".into()));
        }
        Ok(Self { points, dyadic_level: None })
    }

    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if cells == 0 {
            return Err(Error::InvalidParameter("a grid needs at least one cell".into()));
        }
        let points = (0..=cells).map(|j| horizon * j as f64 / cells as f64).collect();
        let mut grid = Self::new(points)?;
        if cells.is_power_of_two() {
            grid.dyadic_level = Some(cells.trailing_zeros());
        }
        Ok(grid)
    }

    /// Rebuild a grid from stored points, restoring the dyadic tag when the
    /// points coincide bit for bit with the uniform dyadic grid.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let grid = Self::new(points)?;
        let cells = grid.cells();
        if cells.is_power_of_two() {
            let uniform = Self::uniform(grid.horizon(), cells)?;
            if uniform.points == grid.points {
                return Ok(uniform);
            }
        }
        Ok(grid)
    }

    pub fn dyadic(horizon: f64, level: u32) -> Result<Self> {
        Self::uniform(horizon, 1usize << level)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().expect("grid is never empty")
    }

    pub fn time(&self, index: usize) -> f64 {
        self.points[index]
    }

    pub fn dyadic_level(&self) -> Option<u32> {
        self.dyadic_level
    }

    /// Smallest cell width.
    pub fn min_step(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn is_uniform(&self) -> bool {
        let h0 = self.points[1] - self.points[0];
        self.points.windows(2).all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-12 * h0.max(1.0))
    }

    /// Grid index of `t`, which must coincide with a node up to rounding.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        let pos = self.points.partition_point(|&p| p < t - tol);
        match self.points.get(pos) {
            Some(&p) if (p - t).abs() <= tol => Ok(pos),
            _ => Err(Error::OffGrid { time: t }),
        }
    }

    /// Keep every `stride`-th node; the result is an exact subsequence.
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.cells() % stride != 0 {
            return Err(Error::Shape(format!(
                "stride {stride} does not divide {} cells",
                self.cells()
            )));
        }
        let points: Vec<f64> = self.points.iter().step_by(stride).copied().collect();
        let level = match self.dyadic_level {
            Some(l) if stride.is_power_of_two() => Some(l - stride.trailing_zeros()),
            _ => None,
        };
        Ok(Self { points, dyadic_level: level })
    }

    /// Positions of this grid's nodes inside `fine`; errors unless this grid
    /// is a subsequence of `fine`.
    pub fn embedding_in(&self, fine: &TimeGrid) -> Result<Vec<usize>> {
        self.points.iter().map(|&t| fine.index_of(t)).collect()
    }
}

/// A 1-increment: one value per grid node.
#[derive(Clone, Debug)]
pub struct Path<V> {
    grid: Arc<TimeGrid>,
    values: Vec<V>,
}

impl<V> Path<V> {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<V>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "path has {} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<TimeGrid>, f: impl Fn(f64) -> V) -> Self {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn at(&self, index: usize) -> &V {
        &self.values[index]
    }
}

type Eval2<'a, V> = Box<dyn Fn(usize, usize) -> V + Send + Sync + 'a>;
type Eval3<'a, V> = Box<dyn Fn(usize, usize, usize) -> V + Send + Sync + 'a>;

/// A lazily evaluated 2-increment `v_{ts}`.
pub struct Increment2<'a, V> {
    grid: Arc<TimeGrid>,
    eval: Eval2<'a, V>,
}

impl<'a, V> Increment2<'a, V> {
    pub fn new(grid: Arc<TimeGrid>, eval: impl Fn(usize, usize) -> V + Send + Sync + 'a) -> Self {
        Self { grid, eval: Box::new(eval) }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn at(&self, t: usize, s: usize) -> Result<V> {
        if t >= self.grid.len() {
            return Err(Error::OutOfRange { index: t, limit: self.grid.len() });
        }
        if s > t {
            return Err(Error::Ordering(format!("2-increment requested at (t={t}, s={s}) with s > t")));
        }
        Ok((self.eval)(t, s))
    }

    /// Evaluate every ordered pair; O(n^2) memory.
    pub fn densify(&self) -> DenseIncrement2<V> {
        let n = self.grid.len();
        let mut values = Vec::with_capacity(n * (n + 1) / 2);
        for t in 0..n {
            for s in 0..=t {
                values.push((self.eval)(t, s));
            }
        }
        DenseIncrement2 { grid: self.grid.clone(), values }
    }
}

/// All pairs of a 2-increment stored in a lower-triangular table.
#[derive(Clone, Debug)]
pub struct DenseIncrement2<V> {
    grid: Arc<TimeGrid>,
    values: Vec<V>,
}

impl<V: Clone + Send + Sync> DenseIncrement2<V> {
    pub fn get(&self, t: usize, s: usize) -> &V {
        debug_assert!(s <= t);
        &self.values[t * (t + 1) / 2 + s]
    }

    pub fn as_increment(&self) -> Increment2<'_, V> {
        Increment2::new(self.grid.clone(), move |t, s| self.get(t, s).clone())
    }
}

/// A lazily evaluated 3-increment `v_{tus}`.
pub struct Increment3<'a, V> {
    grid: Arc<TimeGrid>,
    eval: Eval3<'a, V>,
}

impl<'a, V> Increment3<'a, V> {
    pub fn new(grid: Arc<TimeGrid>, eval: impl Fn(usize, usize, usize) -> V + Send + Sync + 'a) -> Self {
        Self { grid, eval: Box::new(eval) }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn at(&self, t: usize, u: usize, s: usize) -> Result<V> {
        if t >= self.grid.len() {
            return Err(Error::OutOfRange { index: t, limit: self.grid.len() });
        }
        if s > u || u > t {
            return Err(Error::Ordering(format!(
                "3-increment requested at (t={t}, u={u}, s={s}) out of order"
            )));
        }
        Ok((self.eval)(t, u, s))
    }
}

fn tau(grid: &TimeGrid, t: usize, s: usize) -> f64 {
    grid.time(t) - grid.time(s)
}

/// `(delta y)_{ts} = y_t - y_s`.
pub fn delta_one<V: Vector>(y: &Path<V>) -> Increment2<'_, V> {
    Increment2::new(y.grid.clone(), move |t, s| y.values[t].sub(&y.values[s]))
}

/// `(delta-hat y)_{ts} = y_t - S_{t-s} y_s`.
pub fn delta_hat_one<'a, V: Vector, E: EvolutionFamily<V>>(y: &'a Path<V>, family: &'a E) -> Increment2<'a, V> {
    let grid = y.grid.clone();
    Increment2::new(y.grid.clone(), move |t, s| {
        y.values[t].sub(&family.apply_s(tau(&grid, t, s), &y.values[s]))
    })
}

/// `(delta M)_{tus} = M_{ts} - M_{tu} - M_{us}`.
pub fn delta_two<'a, V: Vector>(m: &'a Increment2<'a, V>) -> Increment3<'a, V> {
    Increment3::new(m.grid.clone(), move |t, u, s| {
        let ts = (m.eval)(t, s);
        let tu = (m.eval)(t, u);
        let us = (m.eval)(u, s);
        ts.sub(&tu).sub(&us)
    })
}

/// `(delta-hat M)_{tus} = M_{ts} - M_{tu} - S_{t-u} M_{us}`.
pub fn delta_hat_two<'a, V: Vector, E: EvolutionFamily<V>>(
    m: &'a Increment2<'a, V>,
    family: &'a E,
) -> Increment3<'a, V> {
    let grid = m.grid.clone();
    Increment3::new(m.grid.clone(), move |t, u, s| {
        let ts = (m.eval)(t, s);
        let tu = (m.eval)(t, u);
        let us = family.apply_s(tau(&grid, t, u), &(m.eval)(u, s));
        ts.sub(&tu).sub(&us)
    })
}

/// Twisted coboundary of a 3-increment at one ordered quadruple `s <= u <= v <= t`:
/// `h_{tus} - h_{tvs} + h_{tvu} - S_{t-v} h_{vus}`.
pub fn delta_hat_three_at<V: Vector, E: EvolutionFamily<V>>(
    h: &Increment3<'_, V>,
    family: &E,
    t: usize,
    v: usize,
    u: usize,
    s: usize,
) -> Result<V> {
    if !(s <= u && u <= v && v <= t) {
        return Err(Error::Ordering(format!("quadruple ({t}, {v}, {u}, {s}) out of order")));
    }
    let grid = h.grid();
    let vus = family.apply_s(tau(grid, t, v), &h.at(v, u, s)?);
    Ok(h.at(t, u, s)?.sub(&h.at(t, v, s)?).add(&h.at(t, v, u)?).sub(&vus))
}

/// Plain coboundary of a 3-increment at one quadruple.
pub fn delta_three_at<V: Vector>(h: &Increment3<'_, V>, t: usize, v: usize, u: usize, s: usize) -> Result<V> {
    delta_hat_three_at(h, &Identity, t, v, u, s)
}

/// `(M L)_{ts} = M_{ts} L_s` for an operator-valued `M` and a path `L`.
pub fn cochain_product_path<'a, O, V>(m: &'a Increment2<'a, O>, l: &'a Path<V>) -> Result<Increment2<'a, V>>
where
    O: LinearOp<V>,
    V: Vector,
{
    if m.grid.as_ref() != l.grid.as_ref() {
        return Err(Error::Shape("operator increment and path live on different grids".into()));
    }
    Ok(Increment2::new(m.grid.clone(), move |t, s| (m.eval)(t, s).apply(&l.values[s])))
}

/// `(M L)_{tus} = M_{tu} L_{us}` for operator-valued `M` and a 2-increment `L`.
pub fn cochain_product<'a, O, V>(m: &'a Increment2<'a, O>, l: &'a Increment2<'a, V>) -> Result<Increment3<'a, V>>
where
    O: LinearOp<V>,
    V: Vector,
{
    if m.grid.as_ref() != l.grid.as_ref() {
        return Err(Error::Shape("operator increment and value increment live on different grids".into()));
    }
    Ok(Increment3::new(m.grid.clone(), move |t, u, s| (m.eval)(t, u).apply(&(l.eval)(u, s))))
}

/// Pair filter for Hölder estimators.
#[derive(Clone, Copy, Debug, Default)]
pub struct HolderOptions {
    /// Pairs with `t - s` strictly below this span are skipped.
    pub min_span: f64,
}

impl HolderOptions {
    /// Skip pairs shorter than `cells` cells of a mesh with step `fine_step`.
    pub fn excluding_below(cells: usize, fine_step: f64) -> Self {
        Self { min_span: cells as f64 * fine_step * (1.0 - 1e-9) }
    }
}

/// `max_{s<t} |v_{ts}| / (t-s)^kappa` over the grid.
pub fn holder_norm<V>(
    v: &Increment2<'_, V>,
    kappa: f64,
    norm: impl Fn(&V) -> f64,
    opts: HolderOptions,
) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParameter(format!("Hölder exponent must be >= 0, got {kappa}")));
    }
    let grid = v.grid();
    if grid.len() < 2 {
        return Err(Error::Shape("Hölder norm needs at least two grid points".into()));
    }
    let mut best = 0.0f64;
    let mut seen = false;
    for t in 1..grid.len() {
        for s in 0..t {
            let span = tau(grid, t, s);
            if span < opts.min_span {
                continue;
            }
            seen = true;
            best = best.max(norm(&(v.eval)(t, s)) / span.powf(kappa));
        }
    }
    if !seen {
        return Err(Error::Shape("no grid pair passes the minimum-span filter".into()));
    }
    Ok(best)
}

/// `max_{s<u<t} |v_{tus}| / ((t-u)^kappa (u-s)^rho)`.
pub fn holder_norm3<V>(
    v: &Increment3<'_, V>,
    kappa: f64,
    rho: f64,
    norm: impl Fn(&V) -> f64,
    opts: HolderOptions,
) -> Result<f64> {
    if !(kappa >= 0.0 && rho >= 0.0) {
        return Err(Error::InvalidParameter("Hölder exponents must be >= 0".into()));
    }
    let grid = v.grid();
    if grid.len() < 3 {
        return Err(Error::Shape("3-increment Hölder norm needs at least three grid points".into()));
    }
    let mut best = 0.0f64;
    for t in 2..grid.len() {
        for u in 1..t {
            for s in 0..u {
                let (tu, us) = (tau(grid, t, u), tau(grid, u, s));
                if tu < opts.min_span || us < opts.min_span {
                    continue;
                }
                best = best.max(norm(&(v.eval)(t, u, s)) / (tu.powf(kappa) * us.powf(rho)));
            }
        }
    }
    Ok(best)
}

/// Least-squares slope of `log y` against `log x`, skipping non-positive or
/// non-finite samples. `None` when fewer than two usable samples remain.
pub fn loglog_slope(samples: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Which pairs enter a measured-exponent fit.
#[derive(Clone, Copy, Debug)]
pub struct ExponentOptions {
    /// Smallest index gap (inclusive).
    pub min_gap: usize,
    /// Largest index gap (inclusive); clipped to an eighth of the grid,
    /// beyond which sup estimates saturate at the path's range.
    pub max_gap: usize,
    /// Start points sampled per gap, evenly spread.
    pub max_pairs_per_gap: usize,
}

impl Default for ExponentOptions {
    fn default() -> Self {
        Self { min_gap: 1, max_gap: usize::MAX, max_pairs_per_gap: 64 }
    }
}

/// Result of a dyadic-gap Hölder exponent fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExponentEstimate {
    /// Fitted exponent; `+inf` when the increment vanishes identically.
    pub exponent: f64,
    /// `(t - s, sup |v_{ts}|)` per dyadic gap.
    pub samples: Vec<(f64, f64)>,
}

/// Fit `sup_{t-s=h} |v_{ts}| ~ h^theta` over dyadic index gaps.
pub fn measure_exponent<V>(
    v: &Increment2<'_, V>,
    norm: impl Fn(&V) -> f64,
    opts: ExponentOptions,
) -> Result<ExponentEstimate> {
    let grid = v.grid();
    let n = grid.len();
    let mut gap = opts.min_gap.max(1).next_power_of_two();
    let limit = opts.max_gap.min((n.saturating_sub(1) / 8).max(2));
    let mut samples = Vec::new();
    while gap < n && gap <= limit {
        let starts = n - gap;
        let take = opts.max_pairs_per_gap.max(1).min(starts);
        let mut sup = 0.0f64;
        let mut span_sum = 0.0;
        for k in 0..take {
            let s = if take == 1 { 0 } else { k * (starts - 1) / (take - 1) };
            sup = sup.max(norm(&(v.eval)(s + gap, s)));
            span_sum += tau(grid, s + gap, s);
        }
        samples.push((span_sum / take as f64, sup));
        gap *= 2;
    }
    if samples.len() < 2 {
        return Err(Error::Shape("exponent fit needs at least two dyadic gaps".into()));
    }
    // An increment that vanishes at all but one gap has no finite exponent.
    let positive = samples.iter().filter(|p| p.1 > 0.0).count();
    let exponent = if positive < 2 {
        f64::INFINITY
    } else {
        loglog_slope(&samples).ok_or_else(|| Error::Shape("degenerate exponent fit".into()))?
    };
    Ok(ExponentEstimate { exponent, samples })
}

/// Default relative slack for measured-rate assertions.
pub const DEFAULT_RATE_SLACK: f64 = 0.2;

/// Diagnostics of a dyadic sewing run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SewReport {
    /// Depth actually reached (`2^depth` pieces, capped by the grid).
    pub depth: usize,
    /// Norm of the change between consecutive depths.
    pub corrections: Vec<f64>,
    /// Fitted contraction rate `r` in `corrections ~ 2^{-r d}`; `+inf` when
    /// the sums do not move at all, NaN when too few depths were available.
    pub rate: f64,
    /// `rate + 1`, the exponent of the coboundary it corresponds to.
    pub measured_mu: f64,
}

impl SewReport {
    /// Whether the fitted rate meets `mu - 1` up to the relative slack.
    pub fn meets(&self, mu: f64, slack: f64) -> bool {
        self.rate >= (mu - 1.0) * (1.0 - slack)
    }
}

/// Compensated Riemann sum `sum_k S_{t t_{k+1}} g_{t_{k+1} t_k}` over nested
/// dyadic partitions of `[s, t]`, refined up to `max_depth` or the grid.
/// Fails with [`Error::Divergence`] when the fitted rate is not positive.
pub fn sew<V: Vector, E: EvolutionFamily<V>>(
    g: &Increment2<'_, V>,
    s: usize,
    t: usize,
    family: &E,
    max_depth: usize,
) -> Result<(V, SewReport)> {
    let (value, report) = sew_unchecked(g, s, t, family, max_depth)?;
    if report.rate <= 0.0 {
        return Err(Error::Divergence { rate: report.rate, measured_mu: report.measured_mu });
    }
    Ok((value, report))
}

/// [`sew`] without the divergence check, for callers that inspect the
/// report themselves.
pub fn sew_unchecked<V: Vector, E: EvolutionFamily<V>>(
    g: &Increment2<'_, V>,
    s: usize,
    t: usize,
    family: &E,
    max_depth: usize,
) -> Result<(V, SewReport)> {
    let grid = g.grid().clone();
    if t >= grid.len() {
        return Err(Error::OutOfRange { index: t, limit: grid.len() });
    }
    if s > t {
        return Err(Error::Ordering(format!("sewing interval [{s}, {t}] reversed")));
    }
    let span = t - s;
    let first = (g.eval)(t, s);
    if span <= 1 {
        return Ok((first, SewReport { depth: 0, corrections: vec![], rate: f64::INFINITY, measured_mu: f64::INFINITY }));
    }
    // No refinement below the grid: 2^depth pieces at most reach every node.
    let grid_depth = (usize::BITS - (span - 1).leading_zeros()) as usize;
    let depth = max_depth.min(grid_depth);

    let mut previous = first;
    let mut corrections = Vec::with_capacity(depth);
    for d in 1..=depth {
        let pieces = 1usize << d;
        let node = |k: usize| s + (k * span) / pieces;
        let mut acc: Option<V> = None;
        for k in 0..pieces {
            let (lo, hi) = (node(k), node(k + 1));
            if lo == hi {
                continue;
            }
            let piece = family.apply_s(tau(&grid, t, hi), &(g.eval)(hi, lo));
            acc = Some(match acc {
                None => piece,
                Some(a) => a.add(&piece),
            });
        }
        let current = acc.expect("at least one non-degenerate piece");
        corrections.push(current.sub(&previous).norm());
        previous = current;
    }

    let scale = previous.norm().max(f64::MIN_POSITIVE);
    let rate = if corrections.iter().all(|&c| c <= 1e-14 * scale) {
        f64::INFINITY
    } else {
        let pts: Vec<(f64, f64)> = corrections
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 1e-14 * scale)
            .map(|(d, &c)| ((d as f64 + 1.0).exp2(), c))
            .collect();
        match loglog_slope(&pts) {
            // corrections ~ 2^{-r d}: slope in log(2^d) is -r.
            Some(slope) => -slope,
            None => f64::NAN,
        }
    };
    Ok((previous, SewReport { depth, corrections, rate, measured_mu: rate + 1.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid8() -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(1.0, 7).unwrap())
    }

    fn random_path(grid: Arc<TimeGrid>, seed: u64) -> Path<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Path::new(grid, values).unwrap()
    }

    #[test]
    fn delta_of_constant_is_zero() {
        let grid = grid8();
        let y = Path::from_fn(grid.clone(), |_| 3.5);
        let d = delta_one(&y);
        for t in 0..grid.len() {
            for s in 0..=t {
                assert_eq!(d.at(t, s).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn delta_is_direct_subtraction() {
        let grid = Arc::new(TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap());
        let y = Path::new(grid, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(delta_one(&y).at(2, 0).unwrap(), 1.0);
    }

    #[test]
    fn delta_delta_vanishes_on_all_triples() {
        let y = random_path(grid8(), 1);
        let d = delta_one(&y);
        let dd = delta_two(&d);
        for t in 0..8 {
            for u in 0..=t {
                for s in 0..=u {
                    assert!(dd.at(t, u, s).unwrap().abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn delta_hat_reduces_to_delta_for_identity() {
        let y = random_path(grid8(), 2);
        let a = delta_one(&y);
        let b = delta_hat_one(&y, &Identity);
        for t in 0..8 {
            for s in 0..=t {
                assert_eq!(a.at(t, s).unwrap(), b.at(t, s).unwrap());
            }
        }
    }

    #[test]
    fn delta_hat_of_free_flow_is_zero() {
        let fam = ScalarDecay { rate: 2.0 };
        let grid = grid8();
        let y = Path::from_fn(grid.clone(), |t| (-2.0 * t).exp() * 0.7);
        let d = delta_hat_one(&y, &fam);
        for t in 0..8 {
            for s in 0..=t {
                assert!(d.at(t, s).unwrap().abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn delta_hat_squared_vanishes() {
        let fam = ScalarDecay { rate: 3.0 };
        let y = random_path(grid8(), 3);
        let d = delta_hat_one(&y, &fam);
        let dd = delta_hat_two(&d, &fam);
        for t in 0..8 {
            for u in 0..=t {
                for s in 0..=u {
                    assert!(dd.at(t, u, s).unwrap().abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn delta_hat_on_three_increments_kills_exact_ones() {
        let fam = ScalarDecay { rate: 1.5 };
        let grid = grid8();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Increment2::new(grid.clone(), move |t, s| if t == s { 0.0 } else { table[t * 8 + s] });
        let h = delta_hat_two(&m, &fam);
        for t in 0..8 {
            for v in 0..=t {
                for u in 0..=v {
                    for s in 0..=u {
                        let r = delta_hat_three_at(&h, &fam, t, v, u, s).unwrap();
                        assert!(r.abs() <= 1e-13, "residual {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn additive_increment_is_closed() {
        let grid = grid8();
        let g = grid.clone();
        let m = Increment2::new(grid.clone(), move |t, s| g.time(t) - g.time(s));
        let h = delta_two(&m);
        for t in 0..8 {
            for u in 0..=t {
                for s in 0..=u {
                    assert!(h.at(t, u, s).unwrap().abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_operator_product_reindexes() {
        let grid = grid8();
        let m = Increment2::new(grid.clone(), |_, _| 1.0f64);
        let l = random_path(grid.clone(), 5);
        let ml = cochain_product_path(&m, &l).unwrap();
        for t in 0..8 {
            for s in 0..=t {
                assert_eq!(ml.at(t, s).unwrap(), *l.at(s));
            }
        }
    }

    #[test]
    fn scalar_product_of_span_and_one() {
        let grid = grid8();
        let g = grid.clone();
        let m = Increment2::new(grid.clone(), move |t, s| g.time(t) - g.time(s));
        let l = Path::from_fn(grid.clone(), |_| 1.0);
        let ml = cochain_product_path(&m, &l).unwrap();
        assert!((ml.at(7, 2).unwrap() - (grid.time(7) - grid.time(2))).abs() < 1e-15);
    }

    #[test]
    fn leibniz_rule_brute_force() {
        let fam = ScalarDecay { rate: 0.8 };
        let grid = grid8();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Increment2::new(grid.clone(), move |t, s| table[t * 8 + s]);
        let l = random_path(grid.clone(), 7);
        let ml = cochain_product_path(&m, &l).unwrap();
        let lhs = delta_hat_two(&ml, &fam);
        let dm = delta_hat_two(&m, &fam);
        let dl = delta_one(&l);
        let m_dl = cochain_product(&m, &dl).unwrap();
        for t in 0..8 {
            for u in 0..=t {
                for s in 0..=u {
                    let rhs = dm.at(t, u, s).unwrap() * l.at(s) - m_dl.at(t, u, s).unwrap();
                    assert!((lhs.at(t, u, s).unwrap() - rhs).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn product_rejects_grid_mismatch() {
        let m = Increment2::new(grid8(), |_, _| 1.0f64);
        let l = Path::from_fn(Arc::new(TimeGrid::uniform(1.0, 3).unwrap()), |_| 1.0);
        assert!(matches!(cochain_product_path(&m, &l), Err(Error::Shape(_))));
    }

    #[test]
    fn reversed_pair_is_an_ordering_error() {
        let y = random_path(grid8(), 8);
        assert!(matches!(delta_hat_one(&y, &Identity).at(1, 4), Err(Error::Ordering(_))));
    }

    #[test]
    fn holder_norm_examples() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 4).unwrap());
        let g = grid.clone();
        let lin = Increment2::new(grid.clone(), move |t, s| g.time(t) - g.time(s));
        let n = holder_norm(&lin, 1.0, |v: &f64| v.abs(), HolderOptions::default()).unwrap();
        assert!((n - 1.0).abs() < 1e-12);

        let zero = Increment2::new(grid.clone(), |_, _| 0.0f64);
        assert_eq!(holder_norm(&zero, 0.5, |v: &f64| v.abs(), HolderOptions::default()).unwrap(), 0.0);

        let g = grid.clone();
        let sq = Increment2::new(grid.clone(), move |t, s| (g.time(t) - g.time(s)).sqrt());
        let n = holder_norm(&sq, 0.5, |v: &f64| v.abs(), HolderOptions::default()).unwrap();
        assert!((n - 1.0).abs() < 1e-12);

        assert!(holder_norm(&sq, -1.0, |v: &f64| v.abs(), HolderOptions::default()).is_err());
    }

    #[test]
    fn holder_filter_skips_short_pairs() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 4).unwrap());
        let g = grid.clone();
        // Large on single cells only.
        let v = Increment2::new(grid.clone(), move |t, s| if t - s == 1 { 100.0 } else { g.time(t) - g.time(s) });
        let opts = HolderOptions::excluding_below(2, grid.min_step());
        let n = holder_norm(&v, 1.0, |x: &f64| x.abs(), opts).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_exponent_norm_of_product_kernel() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 3).unwrap());
        let g = grid.clone();
        let v = Increment3::new(grid.clone(), move |t, u, s| {
            (g.time(t) - g.time(u)).powf(0.5) * (g.time(u) - g.time(s)).powf(0.75)
        });
        let n = holder_norm3(&v, 0.5, 0.75, |x: &f64| x.abs(), HolderOptions::default()).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exponent_fit_recovers_power() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 8).unwrap());
        let g = grid.clone();
        let v = Increment2::new(grid.clone(), move |t, s| (g.time(t) - g.time(s)).powf(0.3));
        let est = measure_exponent(&v, |x: &f64| x.abs(), ExponentOptions::default()).unwrap();
        assert!((est.exponent - 0.3).abs() < 1e-9);
    }

    #[test]
    fn sew_reproduces_exact_increments() {
        let fam = ScalarDecay { rate: 1.0 };
        let grid = Arc::new(TimeGrid::dyadic(1.0, 5).unwrap());
        let y = random_path(grid.clone(), 9);
        let g = delta_hat_one(&y, &fam);
        let (value, report) = sew(&g, 0, 32, &fam, 1).unwrap();
        assert!((value - g.at(32, 0).unwrap()).abs() < 1e-14);
        assert!(report.rate.is_infinite());
        let (value, _) = sew(&g, 3, 29, &fam, 10).unwrap();
        assert!((value - g.at(29, 3).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn sew_of_square_increment_halves_each_depth() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 10).unwrap());
        let g = grid.clone();
        let sq = Increment2::new(grid.clone(), move |t, s| (g.time(t) - g.time(s)).powi(2));
        for depth in [1usize, 3, 6] {
            let (value, _) = sew(&sq, 0, 1024, &Identity, depth).unwrap();
            assert!((value - (-(depth as f64)).exp2()).abs() < 1e-14);
        }
        let (_, report) = sew(&sq, 0, 1024, &Identity, 10).unwrap();
        assert!((report.rate - 1.0).abs() < 1e-9);
        assert!(report.meets(2.0, DEFAULT_RATE_SLACK));
    }

    #[test]
    fn sew_flags_divergence() {
        let grid = Arc::new(TimeGrid::dyadic(1.0, 8).unwrap());
        let g = grid.clone();
        // delta g ~ |t-s|^{1/2}: refinements grow.
        let rough = Increment2::new(grid.clone(), move |t, s| (g.time(t) - g.time(s)).sqrt());
        assert!(matches!(sew(&rough, 0, 256, &Identity, 8), Err(Error::Divergence { .. })));
    }

    #[test]
    fn grid_helpers() {
        let fine = TimeGrid::dyadic(2.0, 6).unwrap();
        assert_eq!(fine.dyadic_level(), Some(6));
        let coarse = fine.coarsen(8).unwrap();
        assert_eq!(coarse.cells(), 8);
        assert_eq!(coarse.embedding_in(&fine).unwrap()[3], 24);
        assert!(fine.coarsen(7).is_err());
        assert!(matches!(fine.index_of(0.01), Err(Error::OffGrid { .. })));
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.4]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
    }
}
