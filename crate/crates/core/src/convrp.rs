//! Convolutional rough path over a lifted signal.
//!
//! Every operator except `X^xa` is diagonal in Fourier space. For a mode
//! with eigenvalue `λ` the multipliers are
//!
//! ```text
//! X^{x,i}_{ts}     = ∫_s^t e^{-λ(t-u)} dx^i_u
//! X^{xx,ij}_{ts}   = ∫_s^t e^{-λ(t-u)} dx^i_u δx^j_{us}
//! X^{xxx,ijk}_{ts} = ∫_s^t e^{-λ(t-u)} dx^i_u x2^{jk}_{us}
//! ```
//!
//! with `X^ax = X^x - δx` and `X^axx = X^xx - x2`. On a cell `[a, b]` of
//! width `h` the lift is polynomial in `θ = (u - a) / h`, so each cell
//! contributes `e^{-λ(t-b)}` times a combination of
//! `g_m(z) = ∫_0^1 e^{-zσ} (1-σ)^m dσ` at `z = λh`. A Horner sweep over the
//! cells of `[s, t]` gives every multiplier in `O(t - s)` per eigenvalue.
//!
//! The level-3 operator uses the index order above; the other common
//! convention `∫ S dx^k x2^{(ji)}` is `xxx3_op(s, t, k, j, i, ..)`.
//!
//! `X^xa_{ts}(φ, ψ) = ∫_s^t X^x_{tu}((Δ S_{u-s} φ) · ψ) du` mixes modes
//! and is computed by the composite trapezoid rule on the fine nodes,
//! optionally subdivided.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::algebra::Vector;
use crate::error::{Error, Result};
use crate::semigroup::{apply_heat, pointwise_product, GridFunction, SpectralGrid};
use crate::signal::RoughSignal;

/// `[g_0(z), g_1(z), g_2(z), g_3(z)]` with `g_m(z) = ∫_0^1 e^{-zσ}(1-σ)^m dσ`.
pub fn g_moments(z: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    if z <= 2.0 {
        // g_m = Σ_n (-z)^n m! / (n+m+1)!
        for (m, gm) in g.iter_mut().enumerate() {
            let mut term = 1.0 / (m as f64 + 1.0);
            let mut sum = term;
            let mut n = 0usize;
            while term.abs() > 1e-18 * sum.abs() && n < 60 {
                n += 1;
                term *= -z / (n + m + 1) as f64;
                sum += term;
            }
            *gm = sum;
        }
    } else {
        g[0] = -(-z).exp_m1() / z;
        for m in 1..4 {
            g[m] = (1.0 - m as f64 * g[m - 1]) / z;
        }
    }
    g
}

/// All diagonal multipliers over one interval, indexed by distinct eigenvalue.
#[derive(Clone, Debug)]
pub struct IntervalKernels {
    dim: usize,
    classes: usize,
    dx: Vec<f64>,
    area: Vec<f64>,
    x: Vec<f64>,
    x_scale: Vec<f64>,
    xx: Vec<f64>,
    xxx: Option<Vec<f64>>,
}

impl IntervalKernels {
    fn slice(v: &[f64], q: usize, classes: usize) -> &[f64] {
        &v[q * classes..(q + 1) * classes]
    }

    /// Multiplier of `X^{x,i}`.
    pub fn x(&self, i: usize) -> &[f64] {
        Self::slice(&self.x, i, self.classes)
    }

    /// `∫_s^t e^{-λ(t-u)} |dx^i_u|`: the size against which rounding in
    /// [`Self::x`] is measured.
    pub fn x_scale(&self, i: usize) -> &[f64] {
        Self::slice(&self.x_scale, i, self.classes)
    }

    /// Multiplier of `X^{xx,ij}`.
    pub fn xx(&self, i: usize, j: usize) -> &[f64] {
        Self::slice(&self.xx, i * self.dim + j, self.classes)
    }

    /// Multiplier of `X^{xxx,ijk}`.
    pub fn xxx(&self, i: usize, j: usize, k: usize) -> Result<&[f64]> {
        let v = self.xxx.as_ref().ok_or(Error::MissingLift(3))?;
        Ok(Self::slice(v, (i * self.dim + j) * self.dim + k, self.classes))
    }

    /// Multiplier of `X^{ax,i}`; exactly zero on the constant mode.
    pub fn ax(&self, i: usize) -> Vec<f64> {
        let mut m: Vec<f64> = self.x(i).iter().map(|v| v - self.dx[i]).collect();
        m[0] = 0.0;
        m
    }

    /// Multiplier of `X^{axx,ij}`; exactly zero on the constant mode.
    pub fn axx(&self, i: usize, j: usize) -> Vec<f64> {
        let a = self.area[i * self.dim + j];
        let mut m: Vec<f64> = self.xx(i, j).iter().map(|v| v - a).collect();
        m[0] = 0.0;
        m
    }
}

/// Worst relative residuals of the algebraic relations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationReport {
    pub triples: usize,
    /// `δ̂X^x = 0`.
    pub x: f64,
    /// `X^x = X^ax + δx`.
    pub ax: f64,
    /// `δ̂X^{xx,ij} = X^{x,i}(δx^j)`.
    pub xx: f64,
    /// `δ̂X^{xxx,ijk} = X^{x,i} x2^{jk} + X^{xx,ij} δx^k`, when level 3 exists.
    pub xxx: Option<f64>,
    /// Quadrature-limited `δ̂X^xa = X^xa(a ⊗ id) + X^x(a ⊗ id)`; informational.
    pub xa: f64,
    /// `X ∘ S_ε - S_ε ∘ X` for the diagonal operators.
    pub commutation: f64,
}

/// One row of an `X^xa` refinement study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct XaRefinement {
    pub nodes_per_cell: Vec<usize>,
    pub residuals: Vec<f64>,
    /// Fitted order of the residual in the quadrature step.
    pub order: f64,
}

const DEFAULT_CACHE_CAPACITY: usize = 4096;

/// The operators `X^x, X^ax, X^xa, X^xx, X^axx, X^xxx` over a signal.
pub struct ConvolutionalRoughPath {
    signal: Arc<RoughSignal>,
    spectral: Arc<SpectralGrid>,
    cache: RwLock<HashMap<(usize, usize), Arc<IntervalKernels>>>,
    cache_capacity: usize,
    xa_nodes_per_cell: usize,
}

impl ConvolutionalRoughPath {
    pub fn new(signal: Arc<RoughSignal>, spectral: Arc<SpectralGrid>) -> Self {
        Self {
            signal,
            spectral,
            cache: RwLock::new(HashMap::new()),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            xa_nodes_per_cell: 1,
        }
    }

    /// Quadrature nodes per fine cell for `X^xa` (default 1: fine nodes only).
    pub fn with_xa_nodes(mut self, nodes_per_cell: usize) -> Self {
        self.xa_nodes_per_cell = nodes_per_cell.max(1);
        self
    }

    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.cache_capacity = capacity;
        self
    }

    pub fn signal(&self) -> &Arc<RoughSignal> {
        &self.signal
    }

    pub fn spectral(&self) -> &Arc<SpectralGrid> {
        &self.spectral
    }

    pub fn dim(&self) -> usize {
        self.signal.dim()
    }

    pub fn xa_nodes_per_cell(&self) -> usize {
        self.xa_nodes_per_cell
    }

    /// Fine-grid index of time `t`.
    pub fn node(&self, t: f64) -> Result<usize> {
        self.signal.grid().index_of(t)
    }

    fn check(&self, s: usize, t: usize, idx: &[usize]) -> Result<()> {
        let len = self.signal.grid().len();
        if t >= len {
            return Err(Error::OutOfRange { index: t, limit: len });
        }
        if s > t {
            return Err(Error::Ordering(format!("operator interval [{s}, {t}] reversed")));
        }
        for &i in idx {
            if i >= self.dim() {
                return Err(Error::OutOfRange { index: i, limit: self.dim() });
            }
        }
        Ok(())
    }

    fn check_field(&self, phi: &GridFunction) -> Result<()> {
        if **phi.grid() != *self.spectral {
            return Err(Error::Shape("field does not live on the rough path's spectral grid".into()));
        }
        Ok(())
    }

    /// Diagonal multipliers over `[s, t]` (fine node indices), cached.
    pub fn kernels(&self, s: usize, t: usize) -> Result<Arc<IntervalKernels>> {
        self.check(s, t, &[])?;
        if let Some(k) = self.cache.read().get(&(s, t)) {
            return Ok(k.clone());
        }
        let k = Arc::new(self.compute_kernels(s, t)?);
        let mut cache = self.cache.write();
        if cache.len() < self.cache_capacity {
            // Write once: a concurrent writer's value is kept.
            return Ok(cache.entry((s, t)).or_insert(k).clone());
        }
        Ok(k)
    }

    fn compute_kernels(&self, s: usize, t: usize) -> Result<IntervalKernels> {
        let sig = &self.signal;
        let grid = sig.grid();
        let n = sig.dim();
        let (n2, n3) = (n * n, n * n * n);
        let lambdas = self.spectral.distinct_eigenvalues();
        let nc = lambdas.len();
        let level3 = sig.has_level3();

        let mut x = vec![0.0; n * nc];
        let mut x_scale = vec![0.0; n * nc];
        let mut xx = vec![0.0; n2 * nc];
        let mut xxx = if level3 { vec![0.0; n3 * nc] } else { Vec::new() };
        // Per-cell coefficients of g_0, g_1, g_2.
        let mut c_xx = vec![[0.0f64; 2]; n2];
        let mut c_xxx = vec![[0.0f64; 3]; if level3 { n3 } else { 0 }];

        for j in s..t {
            let h = grid.time(j + 1) - grid.time(j);
            let d = sig.cell_increment(j);
            let area = sig.cell_area(j);
            let dx_as = sig.increment(s, j)?;
            for a in 0..n {
                for b in 0..n {
                    c_xx[a * n + b] = [d[a] * dx_as[b], 2.0 * area[a * n + b]];
                }
            }
            if level3 {
                let x2_as = sig.area(s, j)?;
                let cube = sig.cell_triple(j)?;
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            let q = (a * n + b) * n + c;
                            c_xxx[q] = [d[a] * x2_as[b * n + c], 2.0 * area[a * n + b] * dx_as[c], 3.0 * cube[q]];
                        }
                    }
                }
            }
            for (ci, &lam) in lambdas.iter().enumerate() {
                let z = lam * h;
                let e = (-z).exp();
                let g = g_moments(z);
                for a in 0..n {
                    let v = &mut x[a * nc + ci];
                    *v = *v * e + d[a] * g[0];
                    let w = &mut x_scale[a * nc + ci];
                    *w = *w * e + d[a].abs() * g[0];
                }
                for (q, c) in c_xx.iter().enumerate() {
                    let v = &mut xx[q * nc + ci];
                    *v = *v * e + c[0] * g[0] + c[1] * g[1];
                }
                for (q, c) in c_xxx.iter().enumerate() {
                    let v = &mut xxx[q * nc + ci];
                    *v = *v * e + c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
                }
            }
        }
        Ok(IntervalKernels {
            dim: n,
            classes: nc,
            dx: sig.increment(s, t)?,
            area: sig.area(s, t)?,
            x,
            x_scale,
            xx,
            xxx: level3.then_some(xxx),
        })
    }

    /// `X^{x,i}_{ts}(φ)`.
    pub fn xx_op(&self, s: usize, t: usize, i: usize, phi: &GridFunction) -> Result<GridFunction> {
        self.check(s, t, &[i])?;
        self.check_field(phi)?;
        Ok(phi.multiply_classes(self.kernels(s, t)?.x(i)))
    }

    /// `X^{ax,i}_{ts}(φ)`.
    pub fn xax_op(&self, s: usize, t: usize, i: usize, phi: &GridFunction) -> Result<GridFunction> {
        self.check(s, t, &[i])?;
        self.check_field(phi)?;
        Ok(phi.multiply_classes(&self.kernels(s, t)?.ax(i)))
    }

    /// `X^{xx,ij}_{ts}(φ)`.
    pub fn xxx2_op(&self, s: usize, t: usize, i: usize, j: usize, phi: &GridFunction) -> Result<GridFunction> {
        self.check(s, t, &[i, j])?;
        self.check_field(phi)?;
        Ok(phi.multiply_classes(self.kernels(s, t)?.xx(i, j)))
    }

    /// `X^{axx,ij}_{ts}(φ)`.
    pub fn xaxx_op(&self, s: usize, t: usize, i: usize, j: usize, phi: &GridFunction) -> Result<GridFunction> {
        self.check(s, t, &[i, j])?;
        self.check_field(phi)?;
        Ok(phi.multiply_classes(&self.kernels(s, t)?.axx(i, j)))
    }

    /// `X^{xxx,ijk}_{ts}(φ)`.
    pub fn xxx3_op(
        &self,
        s: usize,
        t: usize,
        i: usize,
        j: usize,
        k: usize,
        phi: &GridFunction,
    ) -> Result<GridFunction> {
        self.check(s, t, &[i, j, k])?;
        self.check_field(phi)?;
        if !self.signal.has_level3() {
            return Err(Error::MissingLift(3));
        }
        Ok(phi.multiply_classes(self.kernels(s, t)?.xxx(i, j, k)?))
    }

    /// `X^{xa,i}_{ts}(φ, ψ)` with the configured quadrature.
    pub fn xxa_op(&self, s: usize, t: usize, i: usize, phi: &GridFunction, psi: &GridFunction) -> Result<GridFunction> {
        self.xxa_op_with(s, t, i, phi, psi, self.xa_nodes_per_cell)
    }

    /// `X^{xa,i}_{ts}(φ, ψ)` with `nodes_per_cell` trapezoid panels per fine cell.
    pub fn xxa_op_with(
        &self,
        s: usize,
        t: usize,
        i: usize,
        phi: &GridFunction,
        psi: &GridFunction,
        nodes_per_cell: usize,
    ) -> Result<GridFunction> {
        self.check(s, t, &[i])?;
        self.check_field(phi)?;
        self.check_field(psi)?;
        if nodes_per_cell == 0 {
            return Err(Error::InvalidParameter("X^xa quadrature needs at least one panel per cell".into()));
        }
        let mut out = GridFunction::zeros(self.spectral.clone());
        if s == t {
            return Ok(out);
        }
        let grid = self.signal.grid();
        let lambdas = self.spectral.distinct_eigenvalues();
        let nc = lambdas.len();
        let m = nodes_per_cell;

        // Sweep backwards from t: chi(b) = X^x_{t b} and decay(b) = e^{-λ(t-b)}.
        let mut chi_right = vec![0.0; nc];
        let mut decay = vec![1.0; nc];
        let t0 = grid.time(s);
        let mut push = |u: f64, weight: f64, chi: &[f64]| -> Result<()> {
            if weight == 0.0 {
                return Ok(());
            }
            let a_phi = apply_heat(phi, u - t0)?.multiply(|l| -l);
            let prod = pointwise_product(&a_phi, psi, true)?;
            let scaled: Vec<f64> = chi.iter().map(|c| c * weight).collect();
            out.add_multiplied(&prod, &scaled);
            Ok(())
        };
        for j in (s..t).rev() {
            let (a, b) = (grid.time(j), grid.time(j + 1));
            let h = b - a;
            let d = self.signal.cell_increment(j)[i];
            let w = h / m as f64;
            // Right end point of the cell (u = b): weight w/2 from this cell,
            // plus w/2 from the next cell unless b = t, where X^x_{tt} = 0.
            // Interior nodes at θ = r / m.
            for r in (1..m).rev() {
                let theta = r as f64 / m as f64;
                let chi: Vec<f64> = lambdas
                    .iter()
                    .zip(&decay)
                    .zip(&chi_right)
                    .map(|((&lam, &e), &c)| {
                        let z = lam * h * (1.0 - theta);
                        c + e * d * (1.0 - theta) * g_moments(z)[0]
                    })
                    .collect();
                push(a + theta * h, w, &chi)?;
            }
            for (ci, &lam) in lambdas.iter().enumerate() {
                let z = lam * h;
                chi_right[ci] += decay[ci] * d * g_moments(z)[0];
                decay[ci] *= (-z).exp();
            }
            // Node u = a: half weight from this cell, half from the previous one.
            let weight = if j == s { 0.5 * w } else { 0.5 * w + 0.5 * (grid.time(j) - grid.time(j - 1)) / m as f64 };
            push(a, weight, &chi_right)?;
        }
        Ok(out)
    }

    /// Residuals of the algebraic relations on a test pair `(φ, ψ)` over
    /// the given `(s, u, t)` triples. `eps` is the `S_ε` time for the
    /// commutation check.
    pub fn relation_audit(
        &self,
        triples: &[(usize, usize, usize)],
        phi: &GridFunction,
        psi: &GridFunction,
        eps: f64,
        include_xa: bool,
    ) -> Result<RelationReport> {
        let n = self.dim();
        let grid = self.signal.grid();
        let rel = |res: f64, scale: f64| if scale > 0.0 { res / scale } else { res };
        let mut report = RelationReport {
            triples: triples.len(),
            x: 0.0,
            ax: 0.0,
            xx: 0.0,
            xxx: self.signal.has_level3().then_some(0.0),
            xa: 0.0,
            commutation: 0.0,
        };
        let heat = |f: &GridFunction, tau: f64| apply_heat(f, tau);
        for &(s, u, t) in triples {
            if !(s <= u && u <= t) {
                return Err(Error::Ordering(format!("audit triple ({s}, {u}, {t}) out of order")));
            }
            let tau = grid.time(t) - grid.time(u);
            let (kts, ktu, kus) = (self.kernels(s, t)?, self.kernels(u, t)?, self.kernels(s, u)?);
            let dx_us = self.signal.increment(s, u)?;
            let x2_us = self.signal.area(s, u)?;
            let dx_ts = self.signal.increment(s, t)?;
            for i in 0..n {
                let ts = phi.multiply_classes(kts.x(i));
                let tu = phi.multiply_classes(ktu.x(i));
                let us = heat(&phi.multiply_classes(kus.x(i)), tau)?;
                let res = ts.sub(&tu).sub(&us).norm();
                report.x = report.x.max(rel(res, ts.norm().max(tu.norm()).max(us.norm())));

                let ax = phi.multiply_classes(&kts.ax(i)).add(&phi.scale(dx_ts[i]));
                report.ax = report.ax.max(rel(ax.sub(&ts).norm(), ts.norm()));

                let eps_first = phi.multiply(|l| (-l * eps).exp()).multiply_classes(kts.x(i));
                let eps_after = heat(&ts, eps)?;
                report.commutation = report.commutation.max(rel(eps_first.sub(&eps_after).norm(), eps_after.norm()));

                for j in 0..n {
                    let ts = phi.multiply_classes(kts.xx(i, j));
                    let tu = phi.multiply_classes(ktu.xx(i, j));
                    let us = heat(&phi.multiply_classes(kus.xx(i, j)), tau)?;
                    let rhs = phi.multiply_classes(ktu.x(i)).scale(dx_us[j]);
                    let res = ts.sub(&tu).sub(&us).sub(&rhs).norm();
                    let scale = ts.norm().max(tu.norm()).max(us.norm()).max(rhs.norm());
                    report.xx = report.xx.max(rel(res, scale));

                    if let Some(worst) = report.xxx.as_mut() {
                        for k in 0..n {
                            let ts = phi.multiply_classes(kts.xxx(i, j, k)?);
                            let tu = phi.multiply_classes(ktu.xxx(i, j, k)?);
                            let us = heat(&phi.multiply_classes(kus.xxx(i, j, k)?), tau)?;
                            let r1 = phi.multiply_classes(ktu.x(i)).scale(x2_us[j * n + k]);
                            let r2 = phi.multiply_classes(ktu.xx(i, j)).scale(dx_us[k]);
                            let res = ts.sub(&tu).sub(&us).sub(&r1).sub(&r2).norm();
                            let scale = [ts.norm(), tu.norm(), us.norm(), r1.norm(), r2.norm()]
                                .into_iter()
                                .fold(0.0, f64::max);
                            *worst = worst.max(rel(res, scale));
                        }
                    }
                }
                if include_xa {
                    report.xa = report.xa.max(self.xa_residual(s, u, t, i, phi, psi, self.xa_nodes_per_cell)?);
                }
            }
        }
        Ok(report)
    }

    /// Relative residual of `δ̂X^xa_{tus} = X^xa_{tu}(a_{us}φ, ψ) + X^x_{tu}((a_{us}φ)·ψ)`.
    #[allow(clippy::too_many_arguments)]
    pub fn xa_residual(
        &self,
        s: usize,
        u: usize,
        t: usize,
        i: usize,
        phi: &GridFunction,
        psi: &GridFunction,
        nodes_per_cell: usize,
    ) -> Result<f64> {
        let grid = self.signal.grid();
        let (tu, us) = (grid.time(t) - grid.time(u), grid.time(u) - grid.time(s));
        let ts_v = self.xxa_op_with(s, t, i, phi, psi, nodes_per_cell)?;
        let tu_v = self.xxa_op_with(u, t, i, phi, psi, nodes_per_cell)?;
        let us_v = apply_heat(&self.xxa_op_with(s, u, i, phi, psi, nodes_per_cell)?, tu)?;
        let a_phi = phi.multiply(|l| (-l * us).exp_m1());
        let r1 = self.xxa_op_with(u, t, i, &a_phi, psi, nodes_per_cell)?;
        let r2 = self.xx_op(u, t, i, &pointwise_product(&a_phi, psi, true)?)?;
        let res = ts_v.sub(&tu_v).sub(&us_v).sub(&r1).sub(&r2).norm();
        let scale = [ts_v.norm(), tu_v.norm(), us_v.norm(), r1.norm(), r2.norm()].into_iter().fold(0.0, f64::max);
        Ok(if scale > 0.0 { res / scale } else { res })
    }

    /// `X^xa` relation residual as the quadrature is refined.
    pub fn xa_refinement(
        &self,
        (s, u, t): (usize, usize, usize),
        i: usize,
        phi: &GridFunction,
        psi: &GridFunction,
        nodes: &[usize],
    ) -> Result<XaRefinement> {
        let residuals = nodes
            .iter()
            .map(|&m| self.xa_residual(s, u, t, i, phi, psi, m))
            .collect::<Result<Vec<f64>>>()?;
        let pts: Vec<(f64, f64)> = nodes.iter().zip(&residuals).map(|(&m, &r)| (1.0 / m as f64, r)).collect();
        let order = crate::algebra::loglog_slope(&pts).unwrap_or(f64::NAN);
        Ok(XaRefinement { nodes_per_cell: nodes.to_vec(), residuals, order })
    }
}
