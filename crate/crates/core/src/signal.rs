//! Driving signals and their piecewise-linear lifts.
//!
//! A [`DrivingPath`] is an `R^N`-valued path sampled on a fine [`TimeGrid`]
//! with `x_0 = 0`. Its canonical data are the per-cell increments; node
//! values are rebuilt from them by a running sum, which makes persistence
//! bit exact.
//!
//! The lifts follow the convention
//!
//! ```text
//! x2^{ij}_{ts}  = ∫_s^t dx^i_u (x^j_u - x^j_s)
//! x3^{ijk}_{ts} = ∫_s^t dx^i_u x2^{jk}_{us}
//! ```
//!
//! so that `δx2_{tus} = δx_{tu} ⊗ δx_{us}` and
//! `δx3^{ijk}_{tus} = x2^{ij}_{tu} δx^k_{us} + δx^i_{tu} x2^{jk}_{us}`.
//! Inside a cell with increment `d` the polyline gives `d ⊗ d / 2` and
//! `d ⊗ d ⊗ d / 6`. Values over `[s, t]` come from prefix scans.
//!
//! Tensors are flattened row-major: `area[i * N + j]`,
//! `triple[(i * N + j) * N + k]`.

use std::io::{Read, Write};
use std::path::Path as FsPath;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::algebra::TimeGrid;
use crate::error::{Error, Result};

/// Identifier written into signal files for sampled paths.
pub const FBM_GENERATOR: &str = "fbm-davies-harte-chacha8/1";

/// An `R^N`-valued sampled path with `x_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingPath {
    grid: Arc<TimeGrid>,
    dim: usize,
    increments: Vec<f64>,
    values: Vec<f64>,
    hurst: f64,
    seed: u64,
    generator: String,
}

fn running_sum(dim: usize, increments: &[f64]) -> Vec<f64> {
    let cells = increments.len() / dim;
    let mut values = vec![0.0; (cells + 1) * dim];
    for j in 0..cells {
        for i in 0..dim {
            values[(j + 1) * dim + i] = values[j * dim + i] + increments[j * dim + i];
        }
    }
    values
}

impl DrivingPath {
    /// Build from per-cell increments (`cells * dim`, cell-major).
    pub fn from_increments(
        grid: Arc<TimeGrid>,
        dim: usize,
        increments: Vec<f64>,
        hurst: f64,
        seed: u64,
        generator: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("a path needs at least one component".into()));
        }
        if increments.len() != grid.cells() * dim {
            return Err(Error::Shape(format!(
                "{} increments for {} cells of dimension {dim}",
                increments.len(),
                grid.cells()
            )));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("path increments must be finite".into()));
        }
        let values = running_sum(dim, &increments);
        Ok(Self { grid, dim, increments, values, hurst, seed, generator: generator.into() })
    }

    /// Sample a deterministic path `t -> x(t)`, shifted so that `x_0 = 0`.
    pub fn from_fn(
        grid: Arc<TimeGrid>,
        dim: usize,
        hurst: f64,
        generator: impl Into<String>,
        f: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let nodes: Vec<Vec<f64>> = grid.points().iter().map(|&t| f(t)).collect();
        if nodes.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape(format!("path function must return {dim} components")));
        }
        let mut increments = Vec::with_capacity(grid.cells() * dim);
        for w in nodes.windows(2) {
            for i in 0..dim {
                increments.push(w[1][i] - w[0][i]);
            }
        }
        Self::from_increments(grid, dim, increments, hurst, 0, generator)
    }

    /// `x^i_t = c_i t`.
    pub fn linear(grid: Arc<TimeGrid>, slopes: &[f64]) -> Result<Self> {
        let c = slopes.to_vec();
        Self::from_fn(grid, slopes.len(), 1.0, "linear", move |t| c.iter().map(|ci| ci * t).collect())
    }

    /// `x^i_t = amp_i sin(2π freq_i t + phase_i) - amp_i sin(phase_i)`.
    pub fn sine(grid: Arc<TimeGrid>, amp: &[f64], freq: &[f64], phase: &[f64]) -> Result<Self> {
        if amp.len() != freq.len() || amp.len() != phase.len() {
            return Err(Error::Shape("sine path parameters differ in length".into()));
        }
        let (a, f, p) = (amp.to_vec(), freq.to_vec(), phase.to_vec());
        Self::from_fn(grid, amp.len(), 1.0, "sine", move |t| {
            (0..a.len())
                .map(|i| a[i] * ((2.0 * std::f64::consts::PI * f[i] * t + p[i]).sin() - p[i].sin()))
                .collect()
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generator(&self) -> &str {
        &self.generator
    }

    /// `x_j` (all components) at node `j`.
    pub fn node(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Increment of cell `j`, i.e. `x_{j+1} - x_j` as stored.
    pub fn cell_increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Component `i` at every node.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.chunks(self.dim).map(|v| v[i]).collect()
    }
}

/// Fractional Gaussian noise autocovariance for steps of length `h`.
pub fn fgn_autocovariance(hurst: f64, h: f64, lag: usize) -> f64 {
    let k = lag as f64;
    let e = 2.0 * hurst;
    0.5 * h.powf(e) * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

fn cholesky(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = cov[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::InvalidParameter("fGn covariance is not positive definite".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (cov[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// One fractional Gaussian noise sample of length `n` with step `h`.
fn sample_fgn(hurst: f64, h: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma: Vec<f64> = (0..=n).map(|k| fgn_autocovariance(hurst, h, k)).collect();
    // Circulant embedding of size 2n.
    if n >= 8 {
        let m = 2 * n;
        let mut c: Vec<Complex64> = (0..m)
            .map(|j| Complex64::new(if j <= n { gamma[j] } else { gamma[m - j] }, 0.0))
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut c);
        let top = c.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
        if c.iter().all(|z| z.re >= -1e-10 * top) {
            let mut w: Vec<Complex64> = c
                .iter()
                .map(|z| {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    Complex64::new(a, b) * (z.re.max(0.0) / m as f64).sqrt()
                })
                .collect();
            fft.process(&mut w);
            return Ok(w[..n].iter().map(|z| z.re).collect());
        }
    }
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = gamma[i.abs_diff(j)];
        }
    }
    let l = cholesky(&cov, n)?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..n).map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum()).collect())
}

/// `N` independent fBm components with Hurst index `H` on a uniform grid.
/// Component `i` draws from ChaCha stream `i` of `seed`.
pub fn sample_fbm(hurst: f64, dim: usize, grid: Arc<TimeGrid>, seed: u64) -> Result<DrivingPath> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidParameter(format!("Hurst index must lie in (0, 1), got {hurst}")));
    }
    if !grid.is_uniform() {
        return Err(Error::InvalidParameter("fBm sampling needs a uniform grid".into()));
    }
    let n = grid.cells();
    let h = grid.horizon() / n as f64;
    let mut comps = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        comps.push(sample_fgn(hurst, h, n, &mut rng)?);
    }
    let mut increments = vec![0.0; n * dim];
    for j in 0..n {
        for i in 0..dim {
            increments[j * dim + i] = comps[i][j];
        }
    }
    DrivingPath::from_increments(grid, dim, increments, hurst, seed, FBM_GENERATOR)
}

/// Per-cell areas plus the running second-level prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Level2Lift {
    dim: usize,
    areas: Vec<f64>,
    prefix: Vec<f64>,
}

/// Per-cell third-level integrals plus the running prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Level3Lift {
    dim: usize,
    triples: Vec<f64>,
    prefix: Vec<f64>,
}

fn build_level2(path: &DrivingPath, areas: Vec<f64>) -> Level2Lift {
    let n = path.dim;
    let n2 = n * n;
    let cells = path.cells();
    let mut prefix = vec![0.0; (cells + 1) * n2];
    for j in 0..cells {
        let d = path.cell_increment(j);
        let x = path.node(j);
        for a in 0..n {
            for b in 0..n {
                let q = a * n + b;
                prefix[(j + 1) * n2 + q] = prefix[j * n2 + q] + areas[j * n2 + q] + d[a] * x[b];
            }
        }
    }
    Level2Lift { dim: n, areas, prefix }
}

fn build_level3(path: &DrivingPath, lift2: &Level2Lift, triples: Vec<f64>) -> Level3Lift {
    let n = path.dim;
    let (n2, n3) = (n * n, n * n * n);
    let cells = path.cells();
    let mut prefix = vec![0.0; (cells + 1) * n3];
    for j in 0..cells {
        let d = path.cell_increment(j);
        let x = path.node(j);
        let p2 = &lift2.prefix[j * n2..(j + 1) * n2];
        let area = &lift2.areas[j * n2..(j + 1) * n2];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let q = (a * n + b) * n + c;
                    prefix[(j + 1) * n3 + q] = prefix[j * n3 + q]
                        + triples[j * n3 + q]
                        + d[a] * p2[b * n + c]
                        + area[a * n + b] * x[c];
                }
            }
        }
    }
    Level3Lift { dim: n, triples, prefix }
}

/// Exact second-level lift of the sampled polyline.
pub fn lift_pl_level2(path: &DrivingPath) -> Level2Lift {
    let n = path.dim;
    let mut areas = Vec::with_capacity(path.cells() * n * n);
    for j in 0..path.cells() {
        let d = path.cell_increment(j);
        for a in 0..n {
            for b in 0..n {
                areas.push(0.5 * d[a] * d[b]);
            }
        }
    }
    build_level2(path, areas)
}

/// Exact third-level lift of the sampled polyline.
pub fn lift_pl_level3(path: &DrivingPath) -> Level3Lift {
    let lift2 = lift_pl_level2(path);
    build_level3(path, &lift2, polyline_triples(path))
}

fn polyline_triples(path: &DrivingPath) -> Vec<f64> {
    let n = path.dim;
    let mut triples = Vec::with_capacity(path.cells() * n * n * n);
    for j in 0..path.cells() {
        let d = path.cell_increment(j);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    triples.push(d[a] * d[b] * d[c] / 6.0);
                }
            }
        }
    }
    triples
}

/// A driving path with its level-2 (and optionally level-3) lift.
#[derive(Clone, Debug, PartialEq)]
pub struct RoughSignal {
    path: DrivingPath,
    level2: Level2Lift,
    level3: Option<Level3Lift>,
}

impl RoughSignal {
    /// Lift a path geometrically; `level` is 2 or 3.
    pub fn new(path: DrivingPath, level: usize) -> Result<Self> {
        let level2 = lift_pl_level2(&path);
        let level3 = match level {
            2 => None,
            3 => Some(build_level3(&path, &level2, polyline_triples(&path))),
            _ => return Err(Error::InvalidParameter(format!("lift level must be 2 or 3, got {level}"))),
        };
        Ok(Self { path, level2, level3 })
    }

    /// Assemble from explicit per-cell data.
    pub fn from_cells(path: DrivingPath, areas: Vec<f64>, triples: Option<Vec<f64>>) -> Result<Self> {
        let n = path.dim;
        if areas.len() != path.cells() * n * n {
            return Err(Error::Shape("area table does not match the path".into()));
        }
        if let Some(t) = &triples {
            if t.len() != path.cells() * n * n * n {
                return Err(Error::Shape("triple table does not match the path".into()));
            }
        }
        let level2 = build_level2(&path, areas);
        let level3 = triples.map(|t| build_level3(&path, &level2, t));
        Ok(Self { path, level2, level3 })
    }

    /// Add `delta * h_j * J` to every cell area, `J = e_0 ⊗ e_1 - e_1 ⊗ e_0`.
    /// Chen's relation and the shuffle identity survive; the Lévy area over
    /// `[s, t]` moves by `delta (t - s)`.
    pub fn perturb_area(&self, delta: f64) -> Result<Self> {
        let n = self.dim();
        if n < 2 {
            return Err(Error::InvalidParameter("area perturbation needs at least two components".into()));
        }
        let grid = self.path.grid.clone();
        let mut areas = self.level2.areas.clone();
        for j in 0..self.cells() {
            let h = grid.time(j + 1) - grid.time(j);
            areas[j * n * n + 1] += delta * h;
            areas[j * n * n + n] -= delta * h;
        }
        let triples = self.level3.as_ref().map(|l| l.triples.clone());
        Self::from_cells(self.path.clone(), areas, triples)
    }

    pub fn path(&self) -> &DrivingPath {
        &self.path
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.path.grid
    }

    pub fn dim(&self) -> usize {
        self.path.dim
    }

    pub fn cells(&self) -> usize {
        self.path.cells()
    }

    pub fn level(&self) -> usize {
        if self.level3.is_some() {
            3
        } else {
            2
        }
    }

    pub fn has_level3(&self) -> bool {
        self.level3.is_some()
    }

    pub fn level2(&self) -> &Level2Lift {
        &self.level2
    }

    pub fn level3(&self) -> Option<&Level3Lift> {
        self.level3.as_ref()
    }

    pub fn cell_increment(&self, j: usize) -> &[f64] {
        self.path.cell_increment(j)
    }

    pub fn cell_area(&self, j: usize) -> &[f64] {
        let n2 = self.dim() * self.dim();
        &self.level2.areas[j * n2..(j + 1) * n2]
    }

    pub fn cell_triple(&self, j: usize) -> Result<&[f64]> {
        let n3 = self.dim().pow(3);
        let l = self.level3.as_ref().ok_or(Error::MissingLift(3))?;
        Ok(&l.triples[j * n3..(j + 1) * n3])
    }

    fn check(&self, s: usize, t: usize) -> Result<()> {
        let len = self.path.grid.len();
        if t >= len {
            return Err(Error::OutOfRange { index: t, limit: len });
        }
        if s > t {
            return Err(Error::Ordering(format!("signal interval [{s}, {t}] reversed")));
        }
        Ok(())
    }

    /// `δx_{ts}` for node indices `s <= t`.
    pub fn increment(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let (xs, xt) = (self.path.node(s), self.path.node(t));
        Ok(xt.iter().zip(xs).map(|(a, b)| a - b).collect())
    }

    /// `x2_{ts}` for node indices `s <= t`.
    pub fn area(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let n = self.dim();
        let n2 = n * n;
        let dx = self.increment(s, t)?;
        let xs = self.path.node(s);
        let (ps, pt) = (&self.level2.prefix[s * n2..(s + 1) * n2], &self.level2.prefix[t * n2..(t + 1) * n2]);
        let mut out = vec![0.0; n2];
        for a in 0..n {
            for b in 0..n {
                let q = a * n + b;
                out[q] = pt[q] - ps[q] - dx[a] * xs[b];
            }
        }
        Ok(out)
    }

    /// `(x2_{ts})^T`, the opposite index convention.
    pub fn area_transposed(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        let n = self.dim();
        let a = self.area(s, t)?;
        Ok((0..n * n).map(|q| a[(q % n) * n + q / n]).collect())
    }

    /// `x3_{ts}` for node indices `s <= t`.
    pub fn triple(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let l3 = self.level3.as_ref().ok_or(Error::MissingLift(3))?;
        let n = self.dim();
        let (n2, n3) = (n * n, n * n * n);
        let dx = self.increment(s, t)?;
        let x2 = self.area(s, t)?;
        let xs = self.path.node(s);
        let p2s = &self.level2.prefix[s * n2..(s + 1) * n2];
        let (ps, pt) = (&l3.prefix[s * n3..(s + 1) * n3], &l3.prefix[t * n3..(t + 1) * n3]);
        let mut out = vec![0.0; n3];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let q = (a * n + b) * n + c;
                    out[q] = pt[q] - ps[q] - dx[a] * p2s[b * n + c] - x2[a * n + b] * xs[c];
                }
            }
        }
        Ok(out)
    }

    /// [`Self::increment`] addressed by time.
    pub fn increment_at(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        self.increment(self.grid().index_of(s)?, self.grid().index_of(t)?)
    }

    pub fn area_at(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        self.area(self.grid().index_of(s)?, self.grid().index_of(t)?)
    }

    pub fn triple_at(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        self.triple(self.grid().index_of(s)?, self.grid().index_of(t)?)
    }

    /// Maximum residuals of the level-2 and level-3 Chen relations and of
    /// the shuffle identity over the given `(s, u, t)` triples.
    pub fn chen_audit(&self, triples: &[(usize, usize, usize)]) -> Result<ChenReport> {
        let n = self.dim();
        let mut report = ChenReport { level2: 0.0, level3: self.level3.as_ref().map(|_| 0.0), shuffle: 0.0 };
        for &(s, u, t) in triples {
            if !(s <= u && u <= t) {
                return Err(Error::Ordering(format!("audit triple ({s}, {u}, {t}) out of order")));
            }
            let (dtu, dus, dts) = (self.increment(u, t)?, self.increment(s, u)?, self.increment(s, t)?);
            let (ats, atu, aus) = (self.area(s, t)?, self.area(u, t)?, self.area(s, u)?);
            for a in 0..n {
                for b in 0..n {
                    let q = a * n + b;
                    let r = ats[q] - atu[q] - aus[q] - dtu[a] * dus[b];
                    report.level2 = report.level2.max(r.abs());
                    let sh = ats[q] + ats[b * n + a] - dts[a] * dts[b];
                    report.shuffle = report.shuffle.max(sh.abs());
                }
            }
            if let Some(worst) = report.level3.as_mut() {
                let (tts, ttu, tus) = (self.triple(s, t)?, self.triple(u, t)?, self.triple(s, u)?);
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            let q = (a * n + b) * n + c;
                            let r = tts[q] - ttu[q] - tus[q] - atu[a * n + b] * dus[c] - dtu[a] * aus[b * n + c];
                            *worst = worst.max(r.abs());
                        }
                    }
                }
            }
        }
        Ok(report)
    }

    /// Write the versioned little-endian signal format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let bytes = self.to_bytes();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Layout: magic `RHSG`, `u32` version, `u32` N, `u32` level, `f64` H,
    /// `u64` seed, `u32` generator length and UTF-8 bytes, `u64` cells,
    /// grid points, per-cell increments, areas, (triples), then the SHA-256
    /// of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(SIGNAL_MAGIC);
        b.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        b.extend_from_slice(&(self.level() as u32).to_le_bytes());
        b.extend_from_slice(&self.path.hurst.to_le_bytes());
        b.extend_from_slice(&self.path.seed.to_le_bytes());
        b.extend_from_slice(&(self.path.generator.len() as u32).to_le_bytes());
        b.extend_from_slice(self.path.generator.as_bytes());
        b.extend_from_slice(&(self.cells() as u64).to_le_bytes());
        let floats = self
            .grid()
            .points()
            .iter()
            .chain(&self.path.increments)
            .chain(&self.level2.areas)
            .chain(self.level3.iter().flat_map(|l| l.triples.iter()));
        for v in floats {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Checksum);
        }
        if &bytes[..4] != SIGNAL_MAGIC {
            return Err(Error::Format("not a signal file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SIGNAL_VERSION {
            return Err(Error::Version { found: version, expected: SIGNAL_VERSION });
        }
        if bytes.len() < 40 {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut cur = Cursor { bytes: body, pos: 8 };
        let dim = cur.u32()? as usize;
        let level = cur.u32()? as usize;
        let hurst = cur.f64()?;
        let seed = cur.u64()?;
        let glen = cur.u32()? as usize;
        let generator = String::from_utf8(cur.take(glen)?.to_vec())
            .map_err(|_| Error::Format("generator id is not UTF-8".into()))?;
        let cells = cur.u64()? as usize;
        let points = cur.f64s(cells + 1)?;
        let increments = cur.f64s(cells * dim)?;
        let areas = cur.f64s(cells * dim * dim)?;
        let triples = match level {
            2 => None,
            3 => Some(cur.f64s(cells * dim * dim * dim)?),
            _ => return Err(Error::Format(format!("unknown lift level {level}"))),
        };
        if cur.pos != body.len() {
            return Err(Error::Format("trailing bytes in signal file".into()));
        }
        let grid = Arc::new(TimeGrid::from_points(points)?);
        let path = DrivingPath::from_increments(grid, dim, increments, hurst, seed, generator)?;
        Self::from_cells(path, areas, triples)
    }
}

const SIGNAL_MAGIC: &[u8; 4] = b"RHSG";
/// Current signal file version.
pub const SIGNAL_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("signal file ends early".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Worst absolute residuals of the lift identities.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChenReport {
    pub level2: f64,
    pub level3: Option<f64>,
    pub shuffle: f64,
}

/// Every ordered triple `s <= u <= t` of a grid with `cells` cells.
pub fn all_triples(cells: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for t in 0..=cells {
        for u in 0..=t {
            for s in 0..=u {
                out.push((s, u, t));
            }
        }
    }
    out
}

/// `count` random ordered triples `s <= u <= t`.
pub fn random_triples(cells: usize, count: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v = [0usize; 3].map(|_| rng.random_range(0..=cells));
            v.sort_unstable();
            (v[0], v[1], v[2])
        })
        .collect()
}
