//! Spectral heat semigroup on the torus `[0, 2π)^n`.
//!
//! Fields are stored by their Fourier coefficients `φ̂_k` for `|k_j| <= K`.
//! The generator is the Laplacian, with eigenvalue `-λ_k`, `λ_k = |k|^2`, so
//! `S_τ` multiplies mode `k` by `exp(-λ_k τ)`. Physical samples on the
//! `P^n` grid are produced on demand and cached.
//!
//! Norms use the normalised measure `(2π)^{-n} ∫`, so the constant field 1
//! has every `L^p` norm equal to 1. The fractional power `(-Δ)^α` acts by
//! `λ_k^α` and vanishes on the zero mode.

use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use crate::algebra::{EvolutionFamily, Vector};
use crate::error::{Error, Result};

/// Discretisation parameters plus shared transform plans.
pub struct SpectralGrid {
    dim: usize,
    modes: usize,
    points: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    eigen: Vec<f64>,
    class_of: Vec<usize>,
    classes: Vec<f64>,
    padded: OnceLock<(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGrid")
            .field("dim", &self.dim)
            .field("modes", &self.modes)
            .field("points", &self.points)
            .finish()
    }
}

impl PartialEq for SpectralGrid {
    fn eq(&self, other: &Self) -> bool {
        (self.dim, self.modes, self.points) == (other.dim, other.modes, other.points)
    }
}

impl SpectralGrid {
    pub fn new(dim: usize, modes: usize, points: usize) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidParameter(format!("spatial dimension must be 1 or 2, got {dim}")));
        }
        if !points.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("physical points per axis must be a power of two, got {points}")));
        }
        if points < 2 * modes + 1 {
            return Err(Error::InvalidParameter(format!(
                "need P >= 2K+1 (K = {modes}, P = {points})"
            )));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(points);
        let inverse = planner.plan_fft_inverse(points);

        let side = 2 * modes + 1;
        let count = side.pow(dim as u32);
        let mut eigen = Vec::with_capacity(count);
        for idx in 0..count {
            let k = Self::unravel(idx, side, dim, modes);
            eigen.push(k.iter().map(|&kj| (kj * kj) as f64).sum());
        }
        let mut classes: Vec<f64> = eigen.clone();
        classes.sort_by(f64::total_cmp);
        classes.dedup();
        let class_of = eigen
            .iter()
            .map(|l| classes.binary_search_by(|c| c.total_cmp(l)).expect("eigenvalue listed"))
            .collect();
        Ok(Self {
            dim,
            modes,
            points,
            forward,
            inverse,
            eigen,
            class_of,
            classes,
            padded: OnceLock::new(),
        })
    }

    /// `n = 1`, `K = 64`, `P = 256`.
    pub fn default_1d() -> Self {
        Self::new(1, 64, 256).expect("valid defaults")
    }

    /// `n = 2`, `K = 16`, `P = 64`.
    pub fn default_2d() -> Self {
        Self::new(2, 16, 64).expect("valid defaults")
    }

    fn unravel(idx: usize, side: usize, dim: usize, modes: usize) -> Vec<i64> {
        let mut k = vec![0i64; dim];
        let mut rest = idx;
        for j in (0..dim).rev() {
            k[j] = (rest % side) as i64 - modes as i64;
            rest /= side;
        }
        k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// Number of stored coefficients, `(2K+1)^n`.
    pub fn coeff_count(&self) -> usize {
        self.eigen.len()
    }

    /// Number of physical samples, `P^n`.
    pub fn sample_count(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    /// Wave vector of coefficient `idx`.
    pub fn wave_vector(&self, idx: usize) -> Vec<i64> {
        Self::unravel(idx, 2 * self.modes + 1, self.dim, self.modes)
    }

    /// Coefficient index of a wave vector, if retained.
    pub fn coeff_index(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.dim || k.iter().any(|kj| kj.unsigned_abs() as usize > self.modes) {
            return None;
        }
        let side = 2 * self.modes + 1;
        Some(k.iter().fold(0, |acc, &kj| acc * side + (kj + self.modes as i64) as usize))
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen
    }

    /// Distinct eigenvalues, ascending.
    pub fn distinct_eigenvalues(&self) -> &[f64] {
        &self.classes
    }

    /// Position of each coefficient's eigenvalue in [`Self::distinct_eigenvalues`].
    pub fn eigen_classes(&self) -> &[usize] {
        &self.class_of
    }

    /// Spatial coordinates of physical sample `idx`.
    pub fn coordinate(&self, idx: usize) -> Vec<f64> {
        let h = 2.0 * std::f64::consts::PI / self.points as f64;
        let mut x = vec![0.0; self.dim];
        let mut rest = idx;
        for j in (0..self.dim).rev() {
            x[j] = (rest % self.points) as f64 * h;
            rest /= self.points;
        }
        x
    }

    fn fft_nd(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>, side: usize) {
        plan.process(data);
        if self.dim == 2 {
            transpose(data, side);
            plan.process(data);
            transpose(data, side);
        }
    }

    fn padded_plans(&self) -> &(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        self.padded.get_or_init(|| {
            let side = (3 * self.modes + 1).next_power_of_two().max(self.points);
            let mut planner = FftPlanner::new();
            (side, planner.plan_fft_forward(side), planner.plan_fft_inverse(side))
        })
    }

    fn scatter(&self, coeffs: &[Complex64], side: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); side.pow(self.dim as u32)];
        for (idx, c) in coeffs.iter().enumerate() {
            let k = self.wave_vector(idx);
            let pos = k.iter().fold(0usize, |acc, &kj| acc * side + kj.rem_euclid(side as i64) as usize);
            buf[pos] = *c;
        }
        buf
    }

    fn gather(&self, buf: &[Complex64], side: usize) -> Vec<Complex64> {
        let scale = 1.0 / side.pow(self.dim as u32) as f64;
        (0..self.coeff_count())
            .map(|idx| {
                let k = self.wave_vector(idx);
                let pos = k.iter().fold(0usize, |acc, &kj| acc * side + kj.rem_euclid(side as i64) as usize);
                buf[pos] * scale
            })
            .collect()
    }

    fn synthesize(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut buf = self.scatter(coeffs, self.points);
        self.fft_nd(&mut buf, &self.inverse, self.points);
        buf
    }

    fn analyze(&self, samples: &[Complex64]) -> Vec<Complex64> {
        let mut buf = samples.to_vec();
        self.fft_nd(&mut buf, &self.forward, self.points);
        self.gather(&buf, self.points)
    }
}

fn transpose(data: &mut [Complex64], side: usize) {
    for i in 0..side {
        for j in (i + 1)..side {
            data.swap(i * side + j, j * side + i);
        }
    }
}

/// A field on the torus, band-limited to the grid's retained modes.
#[derive(Clone)]
pub struct GridFunction {
    grid: Arc<SpectralGrid>,
    coeffs: Vec<Complex64>,
    physical: OnceLock<Arc<Vec<Complex64>>>,
}

impl std::fmt::Debug for GridFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridFunction").field("grid", &self.grid).field("l2", &self.l2_norm()).finish()
    }
}

impl GridFunction {
    pub fn from_coeffs(grid: Arc<SpectralGrid>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.coeff_count() {
            return Err(Error::Shape(format!(
                "{} coefficients for a grid holding {}",
                coeffs.len(),
                grid.coeff_count()
            )));
        }
        Ok(Self { grid, coeffs, physical: OnceLock::new() })
    }

    /// Project physical samples onto the retained modes.
    pub fn from_samples(grid: Arc<SpectralGrid>, samples: &[Complex64]) -> Result<Self> {
        if samples.len() != grid.sample_count() {
            return Err(Error::Shape(format!(
                "{} samples for a grid holding {}",
                samples.len(),
                grid.sample_count()
            )));
        }
        let coeffs = grid.analyze(samples);
        Ok(Self { grid, coeffs, physical: OnceLock::new() })
    }

    pub fn from_real_samples(grid: Arc<SpectralGrid>, samples: &[f64]) -> Result<Self> {
        let z: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Self::from_samples(grid, &z)
    }

    /// Sample `f` on the physical grid and project.
    pub fn from_fn(grid: Arc<SpectralGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let samples: Vec<f64> = (0..grid.sample_count()).map(|i| f(&grid.coordinate(i))).collect();
        Self::from_real_samples(grid, &samples).expect("sample count matches")
    }

    pub fn zeros(grid: Arc<SpectralGrid>) -> Self {
        let n = grid.coeff_count();
        Self { grid, coeffs: vec![Complex64::new(0.0, 0.0); n], physical: OnceLock::new() }
    }

    pub fn constant(grid: Arc<SpectralGrid>, c: f64) -> Self {
        let mut f = Self::zeros(grid);
        let zero = f.grid.coeff_index(&vec![0; f.grid.dim]).expect("zero mode retained");
        f.coeffs[zero] = Complex64::new(c, 0.0);
        f
    }

    /// The complex exponential `exp(i k·ξ)`.
    pub fn mode(grid: Arc<SpectralGrid>, k: &[i64]) -> Result<Self> {
        let idx = grid
            .coeff_index(k)
            .ok_or_else(|| Error::InvalidParameter(format!("wave vector {k:?} is not retained")))?;
        let mut f = Self::zeros(grid);
        f.coeffs[idx] = Complex64::new(1.0, 0.0);
        Ok(f)
    }

    /// A real field with random coefficients on `|k|_∞ <= band`, amplitude
    /// decaying like `(1 + |k|^2)^{-decay/2}`.
    pub fn random_real(grid: Arc<SpectralGrid>, band: usize, decay: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.coeff_count()];
        for idx in 0..grid.coeff_count() {
            let k = grid.wave_vector(idx);
            if k.iter().any(|kj| kj.unsigned_abs() as usize > band) {
                continue;
            }
            // Fill one representative of each ±k pair, mirror the other.
            let neg: Vec<i64> = k.iter().map(|kj| -kj).collect();
            let partner = grid.coeff_index(&neg).expect("symmetric band");
            if partner < idx {
                continue;
            }
            let amp = (1.0 + grid.eigen[idx]).powf(-decay / 2.0);
            let z = if partner == idx {
                Complex64::new(rng.random_range(-1.0..1.0) * amp, 0.0)
            } else {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp
            };
            coeffs[idx] = z;
            coeffs[partner] = z.conj();
        }
        Self { grid, coeffs, physical: OnceLock::new() }
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeff(&self, k: &[i64]) -> Option<Complex64> {
        self.grid.coeff_index(k).map(|i| self.coeffs[i])
    }

    /// Physical samples, computed once per value.
    pub fn samples(&self) -> Arc<Vec<Complex64>> {
        self.physical.get_or_init(|| Arc::new(self.grid.synthesize(&self.coeffs))).clone()
    }

    /// Largest imaginary part of the physical samples.
    pub fn max_imag(&self) -> f64 {
        self.samples().iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    /// Real samples; errors if any imaginary part exceeds `tol` times the sup norm.
    pub fn real_samples(&self, tol: f64) -> Result<Vec<f64>> {
        let s = self.samples();
        let sup = s.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let max_imag = self.max_imag();
        if max_imag > tol * sup.max(1.0) {
            return Err(Error::ComplexValued { max_imag });
        }
        Ok(s.iter().map(|z| z.re).collect())
    }

    /// Whether the spectrum is Hermitian symmetric to within `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        (0..self.coeffs.len()).all(|idx| {
            let neg: Vec<i64> = self.grid.wave_vector(idx).iter().map(|k| -k).collect();
            let partner = self.grid.coeff_index(&neg).expect("symmetric band");
            (self.coeffs[idx] - self.coeffs[partner].conj()).norm() <= tol
        })
    }

    fn check_grid(&self, other: &GridFunction) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && *self.grid != *other.grid {
            return Err(Error::Shape("fields live on different spectral grids".into()));
        }
        Ok(())
    }

    fn with_coeffs(&self, coeffs: Vec<Complex64>) -> Self {
        Self { grid: self.grid.clone(), coeffs, physical: OnceLock::new() }
    }

    /// Multiply mode `k` by `m(λ_k)`.
    pub fn multiply(&self, m: impl Fn(f64) -> f64) -> Self {
        let coeffs = self.coeffs.iter().zip(&self.grid.eigen).map(|(c, &l)| c * m(l)).collect();
        self.with_coeffs(coeffs)
    }

    /// Multiply mode `k` by `per_class[class(k)]`, indexed by distinct eigenvalue.
    pub fn multiply_classes(&self, per_class: &[f64]) -> Self {
        debug_assert_eq!(per_class.len(), self.grid.classes.len());
        let coeffs = self
            .coeffs
            .iter()
            .zip(&self.grid.class_of)
            .map(|(c, &k)| c * per_class[k])
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Accumulate `per_class ⊙ other` into `self` in place.
    pub fn add_multiplied(&mut self, other: &GridFunction, per_class: &[f64]) {
        for ((c, o), &k) in self.coeffs.iter_mut().zip(&other.coeffs).zip(&self.grid.class_of) {
            *c += o * per_class[k];
        }
        self.physical = OnceLock::new();
    }

    /// Translate by `v`: samples of `ξ -> φ(ξ + v)`.
    pub fn shift(&self, v: &[f64]) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let phase: f64 = self.grid.wave_vector(idx).iter().zip(v).map(|(&k, &x)| k as f64 * x).sum();
                c * Complex64::from_polar(1.0, phase)
            })
            .collect();
        self.with_coeffs(coeffs)
    }

    /// Apply a pointwise real map in physical space and project back.
    pub fn map_real(&self, f: impl Fn(f64) -> f64, tol: f64) -> Result<Self> {
        let vals: Vec<f64> = self.real_samples(tol)?.into_iter().map(f).collect();
        Self::from_real_samples(self.grid.clone(), &vals)
    }

    pub fn mean(&self) -> Complex64 {
        self.coeff(&vec![0; self.grid.dim]).expect("zero mode")
    }

    /// `sqrt(Σ |φ̂_k|^2)`, equal to the normalised `L^2` norm.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Normalised `L^p` norm by grid averaging; `p = ∞` gives the sup norm.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidParameter(format!("L^p norm needs p >= 1, got {p}")));
        }
        let s = self.samples();
        if p.is_infinite() {
            return Ok(s.iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        let mean = s.iter().map(|z| z.norm().powf(p)).sum::<f64>() / s.len() as f64;
        Ok(mean.powf(1.0 / p))
    }

    pub fn sup_norm(&self) -> f64 {
        self.lp_norm(f64::INFINITY).expect("p = inf is valid")
    }

    /// Inner product `(2π)^{-n} ∫ φ conj(ψ)`.
    pub fn inner(&self, other: &GridFunction) -> Result<Complex64> {
        self.check_grid(other)?;
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b.conj()).sum())
    }

    pub fn distance(&self, other: &GridFunction) -> Result<f64> {
        self.check_grid(other)?;
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt())
    }

    pub fn try_add(&self, other: &GridFunction) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.with_coeffs(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect()))
    }

    pub fn try_sub(&self, other: &GridFunction) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.with_coeffs(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect()))
    }

    /// Serialise as little-endian `u32 n, K, P` followed by the coefficients
    /// (row-major over the wave vector, each as `re, im` `f64`).
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        for v in [self.grid.dim, self.grid.modes, self.grid.points] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for c in &self.coeffs {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| Error::Format("truncated field header".into()))?;
        let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        let grid = Arc::new(SpectralGrid::new(word(0), word(1), word(2))?);
        let mut coeffs = Vec::with_capacity(grid.coeff_count());
        let mut buf = [0u8; 16];
        for _ in 0..grid.coeff_count() {
            r.read_exact(&mut buf).map_err(|_| Error::Format("truncated field coefficients".into()))?;
            let re = f64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(buf[8..].try_into().expect("8 bytes"));
            coeffs.push(Complex64::new(re, im));
        }
        Self::from_coeffs(grid, coeffs)
    }

    /// CSV of physical samples: coordinates, real part, imaginary part.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let axes = if self.grid.dim == 1 { "x" } else { "x,y" };
        writeln!(w, "{axes},re,im")?;
        for (i, z) in self.samples().iter().enumerate() {
            let x = self.grid.coordinate(i);
            let coords: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{},{:.17e},{:.17e}", coords.join(","), z.re, z.im)?;
        }
        Ok(())
    }
}

impl Vector for GridFunction {
    fn add(&self, other: &Self) -> Self {
        self.try_add(other).expect("fields on the same grid")
    }
    fn sub(&self, other: &Self) -> Self {
        self.try_sub(other).expect("fields on the same grid")
    }
    fn scale(&self, c: f64) -> Self {
        self.with_coeffs(self.coeffs.iter().map(|a| a * c).collect())
    }
    fn norm(&self) -> f64 {
        self.l2_norm()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::Ordering(format!("semigroup time must be >= 0, got {tau}")));
    }
    Ok(())
}

/// `S_τ φ`.
pub fn apply_heat(phi: &GridFunction, tau: f64) -> Result<GridFunction> {
    check_tau(tau)?;
    Ok(phi.multiply(|l| (-l * tau).exp()))
}

/// `a_τ φ = S_τ φ - φ`, computed as `expm1(-λτ) φ̂`.
pub fn apply_a(phi: &GridFunction, tau: f64) -> Result<GridFunction> {
    check_tau(tau)?;
    Ok(phi.multiply(|l| (-l * tau).exp_m1()))
}

/// `Δ φ`.
pub fn apply_generator(phi: &GridFunction) -> GridFunction {
    phi.multiply(|l| -l)
}

/// `(-Δ)^α φ`, zero on the constant mode.
pub fn frac_laplacian(phi: &GridFunction, alpha: f64) -> Result<GridFunction> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("fractional order must be >= 0, got {alpha}")));
    }
    Ok(phi.multiply(|l| if l == 0.0 { 0.0 } else { l.powf(alpha) }))
}

/// `‖φ‖_{L^p} + ‖(-Δ)^α φ‖_{L^p}`.
pub fn sobolev_norm(phi: &GridFunction, alpha: f64, p: f64) -> Result<f64> {
    Ok(phi.lp_norm(p)? + frac_laplacian(phi, alpha)?.lp_norm(p)?)
}

/// Sup over `λ >= 0` of `τ^α (1 + λ^α e^{-λτ})`-type bounds: the constant
/// `1 + α^α e^{-α}` dominating `τ^α ‖S_τ φ‖_{B_{α,2}} / ‖φ‖_{L^2}` for `τ <= 1`.
pub fn regularization_constant(alpha: f64) -> f64 {
    1.0 + alpha.powf(alpha) * (-alpha).exp()
}

/// `(1-α)^{1-α} e^{α-1}`, dominating `τ^{1-α} ‖Δ S_τ φ‖_{L^2} / ‖(-Δ)^α φ‖_{L^2}`.
pub fn generator_constant(alpha: f64) -> f64 {
    (1.0 - alpha).powf(1.0 - alpha) * (alpha - 1.0).exp()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Quadrature resolution for [`strichartz_norm`].
#[derive(Clone, Copy, Debug)]
pub struct StrichartzQuadrature {
    /// Dyadic panels `[2^{-m-1}, 2^{-m}]` in `r`.
    pub panels: usize,
    /// Gauss–Legendre nodes per panel.
    pub nodes_per_panel: usize,
    /// Gauss–Legendre nodes per radial direction of the unit ball.
    pub ball_nodes: usize,
    /// Angular nodes (two dimensions only).
    pub angles: usize,
}

impl Default for StrichartzQuadrature {
    fn default() -> Self {
        Self { panels: 24, nodes_per_panel: 4, ball_nodes: 12, angles: 12 }
    }
}

/// `‖f‖_{L^p} + ‖T_α f‖_{L^p}` with
/// `T_α f(ξ)^2 = ∫_0^1 r^{-1-4α} (∫_{|η|<=1} |f(ξ+rη) - f(ξ)| dη)^2 dr`.
/// Off-grid values are obtained by exact spectral translation.
pub fn strichartz_norm(phi: &GridFunction, alpha: f64, p: f64, quad: StrichartzQuadrature) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidParameter(format!("Strichartz exponent must lie in (0, 1/2), got {alpha}")));
    }
    let base = phi.lp_norm(p)?;
    let grid = phi.grid();
    let f0 = phi.samples();
    let (gx, gw) = gauss_legendre(quad.nodes_per_panel);
    let (bx, bw) = gauss_legendre(quad.ball_nodes);

    // Ball nodes η with weights (Lebesgue measure).
    let mut ball: Vec<(Vec<f64>, f64)> = Vec::new();
    if grid.dim() == 1 {
        for (x, w) in bx.iter().zip(&bw) {
            ball.push((vec![*x], *w));
        }
    } else {
        // Radius in [0,1] mapped from [-1,1], Jacobian rho, uniform angles.
        let dtheta = 2.0 * std::f64::consts::PI / quad.angles as f64;
        for (x, w) in bx.iter().zip(&bw) {
            let rho = 0.5 * (x + 1.0);
            for a in 0..quad.angles {
                let th = a as f64 * dtheta;
                ball.push((vec![rho * th.cos(), rho * th.sin()], 0.5 * w * rho * dtheta));
            }
        }
    }

    let mut t2 = vec![0.0; grid.sample_count()];
    for m in 0..quad.panels {
        let (lo, hi) = ((-(m as f64) - 1.0).exp2(), (-(m as f64)).exp2());
        for (x, w) in gx.iter().zip(&gw) {
            let r = lo + 0.5 * (x + 1.0) * (hi - lo);
            let wr = 0.5 * (hi - lo) * w * r.powf(-1.0 - 4.0 * alpha);
            let mut inner = vec![0.0; grid.sample_count()];
            for (eta, we) in &ball {
                let v: Vec<f64> = eta.iter().map(|e| r * e).collect();
                let shifted = phi.shift(&v).samples();
                for ((acc, a), b) in inner.iter_mut().zip(shifted.iter()).zip(f0.iter()) {
                    *acc += we * (a - b).norm();
                }
            }
            for (t, i) in t2.iter_mut().zip(&inner) {
                *t += wr * i * i;
            }
        }
    }
    let n = t2.len() as f64;
    let tnorm = if p.is_infinite() {
        t2.iter().map(|v| v.sqrt()).fold(0.0, f64::max)
    } else {
        (t2.iter().map(|v| v.sqrt().powf(p)).sum::<f64>() / n).powf(1.0 / p)
    };
    Ok(base + tnorm)
}

/// Pointwise product in physical space, projected onto the retained modes.
/// With `dealias` the product is formed on a grid of at least `3K+1`
/// points per axis, so the retained modes are exact.
pub fn pointwise_product(phi: &GridFunction, psi: &GridFunction, dealias: bool) -> Result<GridFunction> {
    phi.check_grid(psi)?;
    let grid = phi.grid();
    if !dealias {
        let (a, b) = (phi.samples(), psi.samples());
        let prod: Vec<Complex64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        return GridFunction::from_samples(grid.clone(), &prod);
    }
    let (side, fwd, inv) = grid.padded_plans();
    let mut a = grid.scatter(phi.coeffs(), *side);
    let mut b = grid.scatter(psi.coeffs(), *side);
    grid.fft_nd(&mut a, inv, *side);
    grid.fft_nd(&mut b, inv, *side);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    grid.fft_nd(&mut a, fwd, *side);
    GridFunction::from_coeffs(grid.clone(), grid.gather(&a, *side))
}

/// The heat flow as an evolution family on fields.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeatFlow;

impl EvolutionFamily<GridFunction> for HeatFlow {
    fn apply_s(&self, tau: f64, v: &GridFunction) -> GridFunction {
        v.multiply(|l| (-l * tau).exp())
    }
    fn apply_a(&self, tau: f64, v: &GridFunction) -> GridFunction {
        v.multiply(|l| (-l * tau).exp_m1())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g1() -> Arc<SpectralGrid> {
        Arc::new(SpectralGrid::default_1d())
    }

    fn close(a: &GridFunction, b: &GridFunction, tol: f64) {
        let d = a.distance(b).unwrap();
        assert!(d <= tol, "distance {d:e} > {tol:e}");
    }

    #[test]
    fn grid_validation() {
        assert!(SpectralGrid::new(1, 64, 128).is_err());
        assert!(SpectralGrid::new(1, 8, 24).is_err());
        assert!(SpectralGrid::new(3, 4, 16).is_err());
        let g = SpectralGrid::new(2, 4, 16).unwrap();
        assert_eq!(g.coeff_count(), 81);
        assert_eq!(g.distinct_eigenvalues()[..4], [0.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn transforms_round_trip() {
        for grid in [g1(), Arc::new(SpectralGrid::default_2d())] {
            let f = GridFunction::random_real(grid.clone(), grid.modes(), 0.0, 11);
            let back = GridFunction::from_samples(grid.clone(), &f.samples()).unwrap();
            close(&f, &back, 1e-12 * f.l2_norm());
            assert!(f.is_real(1e-15));
            assert!(f.max_imag() < 1e-12);
        }
    }

    #[test]
    fn physical_samples_of_a_mode() {
        let grid = g1();
        let e = GridFunction::mode(grid.clone(), &[3]).unwrap();
        let s = e.samples();
        for (i, z) in s.iter().enumerate() {
            let x = grid.coordinate(i)[0];
            assert!((z - Complex64::from_polar(1.0, 3.0 * x)).norm() < 1e-12);
        }
    }

    #[test]
    fn heat_examples() {
        let grid = g1();
        let f = GridFunction::random_real(grid.clone(), 20, 1.0, 1);
        close(&apply_heat(&f, 0.0).unwrap(), &f, 0.0);
        let e = GridFunction::mode(grid.clone(), &[1]).unwrap();
        let h = apply_heat(&e, 0.5).unwrap();
        assert!((h.coeff(&[1]).unwrap().re - (-0.5f64).exp()).abs() < 1e-15);
        let two = apply_heat(&apply_heat(&f, 0.3).unwrap(), 0.2).unwrap();
        close(&two, &apply_heat(&f, 0.5).unwrap(), 1e-13);
        assert!(apply_heat(&f, -1.0).is_err());
    }

    #[test]
    fn a_examples() {
        let grid = g1();
        let c = GridFunction::constant(grid.clone(), 2.0);
        assert_eq!(apply_a(&c, 0.7).unwrap().l2_norm(), 0.0);
        let e = GridFunction::mode(grid.clone(), &[1]).unwrap();
        let a = apply_a(&e, 0.5).unwrap();
        assert!((a.coeff(&[1]).unwrap().re - ((-0.5f64).exp() - 1.0)).abs() < 1e-15);
        assert!(apply_a(&e, -0.1).is_err());
    }

    #[test]
    fn generator_examples() {
        let grid = g1();
        assert_eq!(apply_generator(&GridFunction::constant(grid.clone(), 1.0)).l2_norm(), 0.0);
        let e = GridFunction::mode(grid.clone(), &[1]).unwrap();
        let le = apply_generator(&e);
        close(&le, &e.scale(-1.0), 0.0);
        // Centred second difference on the P = 256 grid.
        let s = e.samples();
        let p = grid.points();
        let h = 2.0 * std::f64::consts::PI / p as f64;
        let ls = le.samples();
        for i in 0..p {
            let fd = (s[(i + 1) % p] - 2.0 * s[i] + s[(i + p - 1) % p]) / (h * h);
            assert!((fd - ls[i]).norm() < h * h);
        }
    }

    #[test]
    fn fractional_examples() {
        let grid = g1();
        let f = GridFunction::random_real(grid.clone(), 30, 0.5, 2);
        close(&frac_laplacian(&f, 1.0).unwrap(), &apply_generator(&f).scale(-1.0), 1e-12);
        let minus_mean = f.sub(&GridFunction::constant(grid.clone(), f.mean().re));
        close(&frac_laplacian(&f, 0.0).unwrap(), &minus_mean, 1e-15);
        let e2 = GridFunction::mode(grid.clone(), &[2]).unwrap();
        close(&frac_laplacian(&e2, 0.5).unwrap(), &e2.scale(2.0), 1e-15);
        assert!(frac_laplacian(&f, -0.5).is_err());
    }

    #[test]
    fn sobolev_examples() {
        let grid = g1();
        let one = GridFunction::constant(grid.clone(), 1.0);
        for p in [1.0, 2.0, 3.0, 4.0] {
            assert!((sobolev_norm(&one, 0.3, p).unwrap() - 1.0).abs() < 1e-14);
        }
        let e = GridFunction::mode(grid.clone(), &[1]).unwrap();
        assert!((sobolev_norm(&e, 0.5, 2.0).unwrap() - 2.0).abs() < 1e-13);
        assert!(sobolev_norm(&e, 0.5, 0.5).is_err());
    }

    #[test]
    fn sobolev_algebra_constant_is_bounded() {
        // n = 1, p = 2, α = 0.5 so 2αp > n.
        let grid = g1();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let f = GridFunction::random_real(grid.clone(), 20, 1.0, seed);
            let g = GridFunction::random_real(grid.clone(), 20, 1.0, seed + 100);
            let fg = pointwise_product(&f, &g, true).unwrap();
            let c = sobolev_norm(&fg, 0.5, 2.0).unwrap()
                / (sobolev_norm(&f, 0.5, 2.0).unwrap() * sobolev_norm(&g, 0.5, 2.0).unwrap());
            worst = worst.max(c);
        }
        assert!(worst.is_finite() && worst < 10.0, "constant {worst}");
    }

    #[test]
    fn product_examples() {
        let grid = g1();
        let f = GridFunction::random_real(grid.clone(), 40, 0.0, 3);
        let one = GridFunction::constant(grid.clone(), 1.0);
        close(&pointwise_product(&f, &one, false).unwrap(), &f, 1e-12);
        let e = GridFunction::mode(grid.clone(), &[1]).unwrap();
        let e2 = GridFunction::mode(grid.clone(), &[2]).unwrap();
        close(&pointwise_product(&e, &e, false).unwrap(), &e2, 1e-13);
        close(&pointwise_product(&e, &e, true).unwrap(), &e2, 1e-13);
        let other = Arc::new(SpectralGrid::new(1, 8, 32).unwrap());
        assert!(pointwise_product(&f, &GridFunction::constant(other, 1.0), false).is_err());
    }

    #[test]
    fn dealiased_product_matches_direct_convolution() {
        let grid = Arc::new(SpectralGrid::new(1, 15, 32).unwrap());
        let f = GridFunction::random_real(grid.clone(), 15, 0.0, 4);
        let g = GridFunction::random_real(grid.clone(), 15, 0.0, 5);
        let p = pointwise_product(&f, &g, true).unwrap();
        for k in -15i64..=15 {
            let mut want = Complex64::new(0.0, 0.0);
            for j in -15i64..=15 {
                if let (Some(a), Some(b)) = (f.coeff(&[j]), g.coeff(&[k - j])) {
                    want += a * b;
                }
            }
            assert!((p.coeff(&[k]).unwrap() - want).norm() < 1e-12);
        }
    }

    #[test]
    fn smoothing_of_l1_data_is_bounded() {
        // ‖S_τ g‖_2 <= ‖G_τ‖_2 ‖g‖_1 with ‖G_τ‖_2^2 = Σ e^{-2k^2 τ} <= 1 + sqrt(π/(2τ)).
        let grid = g1();
        let mut worst = 0.0f64;
        for seed in 0..10 {
            let f = GridFunction::random_real(grid.clone(), 30, 0.0, seed);
            let g = GridFunction::random_real(grid.clone(), 30, 0.0, seed + 50);
            let fg = pointwise_product(&f, &g, true).unwrap();
            for j in 0..=12 {
                let tau = (-(j as f64)).exp2();
                let r = apply_heat(&fg, tau).unwrap().l2_norm() / fg.lp_norm(1.0).unwrap();
                worst = worst.max(r * tau.powf(0.25));
            }
        }
        let bound = (1.0 + (std::f64::consts::PI / 2.0).sqrt()).sqrt();
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn semigroup_estimates() {
        let grid = g1();
        for seed in 0..5 {
            let f = GridFunction::random_real(grid.clone(), 64, 0.0, seed);
            for j in 0..=12 {
                let tau = (-(j as f64)).exp2();
                let st = apply_heat(&f, tau).unwrap();
                assert!(st.l2_norm() <= f.l2_norm());
                for alpha in [0.25, 0.5] {
                    let hold = apply_a(&f, tau).unwrap().l2_norm()
                        / (tau.powf(alpha) * sobolev_norm(&f, alpha, 2.0).unwrap());
                    assert!(hold <= 1.0 + 1e-9);
                    let reg = tau.powf(alpha) * sobolev_norm(&st, alpha, 2.0).unwrap() / f.l2_norm();
                    assert!(reg <= regularization_constant(alpha) * (1.0 + 1e-9));
                    let gen = tau.powf(1.0 - alpha) * apply_generator(&st).l2_norm()
                        / frac_laplacian(&f, alpha).unwrap().l2_norm();
                    assert!(gen <= generator_constant(alpha) * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((int - 2.0 / 9.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn strichartz_examples() {
        let grid = Arc::new(SpectralGrid::new(1, 16, 64).unwrap());
        let q = StrichartzQuadrature::default();
        let c = GridFunction::constant(grid.clone(), 3.0);
        assert!((strichartz_norm(&c, 0.25, 2.0, q).unwrap() - 3.0).abs() < 1e-12);
        let e = GridFunction::from_fn(grid.clone(), |x| x[0].cos());
        let s = strichartz_norm(&e, 0.25, 2.0, q).unwrap();
        assert!(s.is_finite() && s > e.lp_norm(2.0).unwrap());
        assert!(strichartz_norm(&e, 0.5, 2.0, q).is_err());
    }

    #[test]
    fn strichartz_equivalence_ratio_is_tight() {
        let grid = Arc::new(SpectralGrid::new(1, 16, 64).unwrap());
        let q = StrichartzQuadrature::default();
        let ratios: Vec<f64> = (0..20)
            .map(|seed| {
                let f = GridFunction::random_real(grid.clone(), 1 + (seed as usize % 16), 0.0, seed);
                strichartz_norm(&f, 0.25, 2.0, q).unwrap() / sobolev_norm(&f, 0.25, 2.0).unwrap()
            })
            .collect();
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(lo > 0.0 && hi / lo <= 10.0, "ratio spread {lo}..{hi}");
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let grid = Arc::new(SpectralGrid::new(2, 4, 16).unwrap());
        let f = GridFunction::random_real(grid, 4, 0.0, 6);
        let mut bytes = Vec::new();
        f.write_binary(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + 81 * 16);
        let g = GridFunction::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(f.coeffs(), g.coeffs());
        assert!(GridFunction::read_binary(&bytes[..40]).is_err());
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 256);
    }

    #[test]
    fn heat_flow_family_matches_apply_heat() {
        let grid = g1();
        let f = GridFunction::random_real(grid, 10, 0.0, 7);
        close(&HeatFlow.apply_s(0.25, &f), &apply_heat(&f, 0.25).unwrap(), 0.0);
        close(&HeatFlow.apply_a(0.25, &f), &apply_a(&f, 0.25).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn semigroup_law_per_mode(l in 0.0f64..4096.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let lhs = (-l * t1).exp() * (-l * t2).exp();
            let rhs = (-l * (t1 + t2)).exp();
            prop_assert!((lhs - rhs).abs() <= 1e-13);
        }

        #[test]
        fn holder_multiplier_bound(z in 0.0f64..1e4, alpha in 0.0f64..1.0) {
            prop_assert!(-(-z).exp_m1() <= z.powf(alpha) * (1.0 + 1e-12) || z == 0.0);
        }

        #[test]
        fn contraction_on_random_fields(seed in 0u64..1000, tau in 0.0f64..2.0) {
            let grid = Arc::new(SpectralGrid::new(1, 16, 64).unwrap());
            let f = GridFunction::random_real(grid, 16, 0.0, seed);
            prop_assert!(apply_heat(&f, tau).unwrap().l2_norm() <= f.l2_norm());
        }
    }
}
