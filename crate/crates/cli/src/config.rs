//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma separated.
//! Every key has a default; unknown keys and malformed values are errors.
//! See [`KEYS`] for the full list.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rough_heat::algebra::TimeGrid;
use rough_heat::dynamics::{
    AdditiveField, LinearField, Nonlinearity, PicardSettings, Scheme, SinField, SolverConfig, ZeroField,
};
use rough_heat::semigroup::{GridFunction, SpectralGrid};
use rough_heat::signal::{sample_fbm, DrivingPath, RoughSignal};
use rough_heat::Vector;

use crate::CliError;

/// How the driving path is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Fbm,
    Linear,
    Sine,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Zero,
    Additive,
    Linear,
    Sin,
}

/// What the convergence runner compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// Closed-form solution; needs a zero, additive or linear field.
    Oracle,
    /// The run on the finest mesh.
    Finest,
}

/// All settings, with defaults.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub signal_kind: SignalKind,
    pub hurst: f64,
    pub signal_dim: usize,
    /// The fine grid has `2^level` cells on `[0, 1]`.
    pub level: u32,
    pub seed: u64,
    pub lift: usize,
    pub signal_file: Option<PathBuf>,
    pub slopes: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,

    pub space_dim: usize,
    pub modes: usize,
    /// Physical points per axis; 0 means `4 * modes`.
    pub points: usize,

    pub field_kind: FieldKind,
    pub coefficients: Vec<f64>,
    pub field_amplitudes: Vec<f64>,
    pub field_phases: Vec<f64>,
    pub cutoff: Option<f64>,
    pub field_band: usize,
    pub field_decay: f64,
    pub field_seed: u64,

    pub initial_band: usize,
    pub initial_decay: f64,
    pub initial_seed: u64,
    pub initial_offset: f64,
    pub initial_scale: f64,

    pub solver: SolverConfig,
    pub picard_enabled: bool,

    pub min_level: u32,
    pub max_level: u32,
    pub reference: Reference,
    pub seeds: u64,
    pub min_order: Option<f64>,

    pub audit_triples: usize,
    pub audit_relation_triples: usize,
    pub audit_epsilon: f64,

    /// Snapshot every this many coarse nodes; 0 keeps only the last.
    pub snapshot_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            signal_kind: SignalKind::Fbm,
            hurst: 0.4,
            signal_dim: 2,
            level: 10,
            seed: 7,
            lift: 3,
            signal_file: None,
            slopes: vec![1.0, -0.5],
            amplitudes: vec![1.0, 0.6],
            frequencies: vec![2.0, 3.0],
            phases: vec![0.3, 1.1],
            space_dim: 1,
            modes: 16,
            points: 0,
            field_kind: FieldKind::Sin,
            coefficients: vec![0.5, -0.35],
            field_amplitudes: vec![1.0, 1.0],
            field_phases: vec![0.0, 0.5],
            cutoff: None,
            field_band: 8,
            field_decay: 1.0,
            field_seed: 1,
            initial_band: 8,
            initial_decay: 1.0,
            initial_seed: 3,
            initial_offset: 0.0,
            initial_scale: 1.0,
            solver: SolverConfig::default(),
            picard_enabled: false,
            min_level: 4,
            max_level: 8,
            reference: Reference::Finest,
            seeds: 1,
            min_order: None,
            audit_triples: 10_000,
            audit_relation_triples: 60,
            audit_epsilon: 0.01,
            snapshot_stride: 16,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "signal.kind",
    "signal.hurst",
    "signal.dim",
    "signal.level",
    "signal.seed",
    "signal.lift",
    "signal.file",
    "signal.slopes",
    "signal.amplitudes",
    "signal.frequencies",
    "signal.phases",
    "grid.dim",
    "grid.modes",
    "grid.points",
    "field.kind",
    "field.coefficients",
    "field.amplitudes",
    "field.phases",
    "field.cutoff",
    "field.band",
    "field.decay",
    "field.seed",
    "initial.band",
    "initial.decay",
    "initial.seed",
    "initial.offset",
    "initial.scale",
    "solver.scheme",
    "solver.steps",
    "solver.kappa",
    "solver.alpha",
    "solver.p",
    "solver.epsilon",
    "solver.include_xa",
    "solver.blowup_factor",
    "solver.audit_remainder",
    "picard.enabled",
    "picard.start",
    "picard.end",
    "picard.max_iterations",
    "picard.tolerance",
    "picard.sew_depth",
    "picard.max_bisections",
    "convergence.min_level",
    "convergence.max_level",
    "convergence.reference",
    "convergence.seeds",
    "convergence.min_order",
    "audit.triples",
    "audit.relation_triples",
    "audit.epsilon",
    "output.snapshot_stride",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| CliError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>, CliError> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Read `text`, then apply `overrides` in order.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let s = &mut self.solver;
        match key {
            "signal.kind" => {
                self.signal_kind = match value {
                    "fbm" => SignalKind::Fbm,
                    "linear" => SignalKind::Linear,
                    "sine" => SignalKind::Sine,
                    "file" => SignalKind::File,
                    _ => return Err(CliError::Config(format!("{key}: expected fbm, linear, sine or file"))),
                }
            }
            "signal.hurst" => self.hurst = parse(key, value)?,
            "signal.dim" => self.signal_dim = parse(key, value)?,
            "signal.level" => self.level = parse(key, value)?,
            "signal.seed" => self.seed = parse(key, value)?,
            "signal.lift" => self.lift = parse(key, value)?,
            "signal.file" => self.signal_file = (!value.is_empty()).then(|| PathBuf::from(value)),
            "signal.slopes" => self.slopes = parse_list(key, value)?,
            "signal.amplitudes" => self.amplitudes = parse_list(key, value)?,
            "signal.frequencies" => self.frequencies = parse_list(key, value)?,
            "signal.phases" => self.phases = parse_list(key, value)?,
            "grid.dim" => self.space_dim = parse(key, value)?,
            "grid.modes" => self.modes = parse(key, value)?,
            "grid.points" => self.points = parse(key, value)?,
            "field.kind" => {
                self.field_kind = match value {
                    "zero" => FieldKind::Zero,
                    "additive" => FieldKind::Additive,
                    "linear" => FieldKind::Linear,
                    "sin" => FieldKind::Sin,
                    _ => return Err(CliError::Config(format!("{key}: expected zero, additive, linear or sin"))),
                }
            }
            "field.coefficients" => self.coefficients = parse_list(key, value)?,
            "field.amplitudes" => self.field_amplitudes = parse_list(key, value)?,
            "field.phases" => self.field_phases = parse_list(key, value)?,
            "field.cutoff" => self.cutoff = parse_optional(key, value)?,
            "field.band" => self.field_band = parse(key, value)?,
            "field.decay" => self.field_decay = parse(key, value)?,
            "field.seed" => self.field_seed = parse(key, value)?,
            "initial.band" => self.initial_band = parse(key, value)?,
            "initial.decay" => self.initial_decay = parse(key, value)?,
            "initial.seed" => self.initial_seed = parse(key, value)?,
            "initial.offset" => self.initial_offset = parse(key, value)?,
            "initial.scale" => self.initial_scale = parse(key, value)?,
            "solver.scheme" => s.scheme = value.parse::<Scheme>().map_err(|e| CliError::Config(format!("{key}: {e}")))?,
            "solver.steps" => s.steps = parse(key, value)?,
            "solver.kappa" => s.kappa = parse(key, value)?,
            "solver.alpha" => s.alpha = parse(key, value)?,
            "solver.p" => s.p = parse(key, value)?,
            "solver.epsilon" => s.epsilon = parse(key, value)?,
            "solver.include_xa" => s.include_xa = parse(key, value)?,
            "solver.blowup_factor" => s.blowup_factor = parse(key, value)?,
            "solver.audit_remainder" => s.audit_remainder = parse(key, value)?,
            "picard.enabled" => self.picard_enabled = parse(key, value)?,
            "picard.start" => s.picard.start = parse(key, value)?,
            "picard.end" => s.picard.end = parse(key, value)?,
            "picard.max_iterations" => s.picard.max_iterations = parse(key, value)?,
            "picard.tolerance" => s.picard.tolerance = parse(key, value)?,
            "picard.sew_depth" => s.picard.sew_depth = parse(key, value)?,
            "picard.max_bisections" => s.picard.max_bisections = parse(key, value)?,
            "convergence.min_level" => self.min_level = parse(key, value)?,
            "convergence.max_level" => self.max_level = parse(key, value)?,
            "convergence.reference" => {
                self.reference = match value {
                    "oracle" => Reference::Oracle,
                    "finest" => Reference::Finest,
                    _ => return Err(CliError::Config(format!("{key}: expected oracle or finest"))),
                }
            }
            "convergence.seeds" => self.seeds = parse(key, value)?,
            "convergence.min_order" => self.min_order = parse_optional(key, value)?,
            "audit.triples" => self.audit_triples = parse(key, value)?,
            "audit.relation_triples" => self.audit_relation_triples = parse(key, value)?,
            "audit.epsilon" => self.audit_epsilon = parse(key, value)?,
            "output.snapshot_stride" => self.snapshot_stride = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// The value of `key` in the form [`ExperimentConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.solver;
        Some(match key {
            "signal.kind" => match self.signal_kind {
                SignalKind::Fbm => "fbm",
                SignalKind::Linear => "linear",
                SignalKind::Sine => "sine",
                SignalKind::File => "file",
            }
            .to_string(),
            "signal.hurst" => self.hurst.to_string(),
            "signal.dim" => self.signal_dim.to_string(),
            "signal.level" => self.level.to_string(),
            "signal.seed" => self.seed.to_string(),
            "signal.lift" => self.lift.to_string(),
            "signal.file" => self.signal_file.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "signal.slopes" => list(&self.slopes),
            "signal.amplitudes" => list(&self.amplitudes),
            "signal.frequencies" => list(&self.frequencies),
            "signal.phases" => list(&self.phases),
            "grid.dim" => self.space_dim.to_string(),
            "grid.modes" => self.modes.to_string(),
            "grid.points" => self.points.to_string(),
            "field.kind" => match self.field_kind {
                FieldKind::Zero => "zero",
                FieldKind::Additive => "additive",
                FieldKind::Linear => "linear",
                FieldKind::Sin => "sin",
            }
            .to_string(),
            "field.coefficients" => list(&self.coefficients),
            "field.amplitudes" => list(&self.field_amplitudes),
            "field.phases" => list(&self.field_phases),
            "field.cutoff" => optional(self.cutoff),
            "field.band" => self.field_band.to_string(),
            "field.decay" => self.field_decay.to_string(),
            "field.seed" => self.field_seed.to_string(),
            "initial.band" => self.initial_band.to_string(),
            "initial.decay" => self.initial_decay.to_string(),
            "initial.seed" => self.initial_seed.to_string(),
            "initial.offset" => self.initial_offset.to_string(),
            "initial.scale" => self.initial_scale.to_string(),
            "solver.scheme" => s.scheme.to_string(),
            "solver.steps" => s.steps.to_string(),
            "solver.kappa" => s.kappa.to_string(),
            "solver.alpha" => s.alpha.to_string(),
            "solver.p" => s.p.to_string(),
            "solver.epsilon" => s.epsilon.to_string(),
            "solver.include_xa" => s.include_xa.to_string(),
            "solver.blowup_factor" => s.blowup_factor.to_string(),
            "solver.audit_remainder" => s.audit_remainder.to_string(),
            "picard.enabled" => self.picard_enabled.to_string(),
            "picard.start" => s.picard.start.to_string(),
            "picard.end" => s.picard.end.to_string(),
            "picard.max_iterations" => s.picard.max_iterations.to_string(),
            "picard.tolerance" => s.picard.tolerance.to_string(),
            "picard.sew_depth" => s.picard.sew_depth.to_string(),
            "picard.max_bisections" => s.picard.max_bisections.to_string(),
            "convergence.min_level" => self.min_level.to_string(),
            "convergence.max_level" => self.max_level.to_string(),
            "convergence.reference" => match self.reference {
                Reference::Oracle => "oracle",
                Reference::Finest => "finest",
            }
            .to_string(),
            "convergence.seeds" => self.seeds.to_string(),
            "convergence.min_order" => optional(self.min_order),
            "audit.triples" => self.audit_triples.to_string(),
            "audit.relation_triples" => self.audit_relation_triples.to_string(),
            "audit.epsilon" => self.audit_epsilon.to_string(),
            "output.snapshot_stride" => self.snapshot_stride.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn echo(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    /// Range checks that need no computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return fail(format!("signal.hurst must lie in (0, 1), got {}", self.hurst));
        }
        if self.signal_dim == 0 {
            return fail("signal.dim must be positive".into());
        }
        if !(1..=20).contains(&self.level) {
            return fail(format!("signal.level must lie in 1..=20, got {}", self.level));
        }
        if self.lift != 2 && self.lift != 3 {
            return fail(format!("signal.lift must be 2 or 3, got {}", self.lift));
        }
        if self.signal_kind == SignalKind::File && self.signal_file.is_none() {
            return fail("signal.kind = file needs signal.file".into());
        }
        if !(1..=3).contains(&self.space_dim) || self.modes == 0 {
            return fail("grid.dim must lie in 1..=3 and grid.modes must be positive".into());
        }
        if self.min_level > self.max_level || self.max_level > 20 {
            return fail(format!(
                "convergence levels {}..={} are not an increasing range below 21",
                self.min_level, self.max_level
            ));
        }
        if self.seeds == 0 {
            return fail("convergence.seeds must be positive".into());
        }
        if self.solver.scheme == Scheme::Rough3 && self.lift < 3 {
            return fail("solver.scheme = rough3 needs signal.lift = 3".into());
        }
        if self.signal_kind != SignalKind::File {
            let fine = TimeGrid::dyadic(1.0, self.level).map_err(|e| CliError::Config(e.to_string()))?;
            self.solver.validate(&fine).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn spectral(&self) -> Result<Arc<SpectralGrid>, CliError> {
        let points = if self.points == 0 { 4 * self.modes } else { self.points };
        Ok(Arc::new(SpectralGrid::new(self.space_dim, self.modes, points).map_err(|e| CliError::Config(e.to_string()))?))
    }

    /// The driving signal, with `seed` replacing `signal.seed` for fBm.
    pub fn signal_with_seed(&self, seed: u64) -> Result<RoughSignal, CliError> {
        let cfg = |e: rough_heat::Error| CliError::Config(e.to_string());
        let grid = || TimeGrid::dyadic(1.0, self.level).map(Arc::new).map_err(cfg);
        let path = match self.signal_kind {
            SignalKind::File => {
                let file = self.signal_file.as_ref().expect("validated");
                return RoughSignal::load(file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())));
            }
            SignalKind::Fbm => sample_fbm(self.hurst, self.signal_dim, grid()?, seed),
            SignalKind::Linear => {
                self.check_len("signal.slopes", &self.slopes)?;
                DrivingPath::linear(grid()?, &self.slopes)
            }
            SignalKind::Sine => {
                self.check_len("signal.amplitudes", &self.amplitudes)?;
                DrivingPath::sine(grid()?, &self.amplitudes, &self.frequencies, &self.phases)
            }
        }
        .map_err(cfg)?;
        RoughSignal::new(path, self.lift).map_err(cfg)
    }

    pub fn signal(&self) -> Result<RoughSignal, CliError> {
        self.signal_with_seed(self.seed)
    }

    fn check_len(&self, key: &str, v: &[f64]) -> Result<(), CliError> {
        if v.len() != self.signal_dim {
            return Err(CliError::Config(format!("{key} has {} entries but signal.dim is {}", v.len(), self.signal_dim)));
        }
        Ok(())
    }

    /// The additive field's components.
    pub fn additive_components(&self, spec: &Arc<SpectralGrid>, dim: usize) -> Vec<GridFunction> {
        (0..dim as u64)
            .map(|i| GridFunction::random_real(spec.clone(), self.field_band, self.field_decay, self.field_seed + i))
            .collect()
    }

    /// The configured vector field with `dim` components.
    pub fn field(&self, spec: &Arc<SpectralGrid>, dim: usize) -> Result<Box<dyn Nonlinearity>, CliError> {
        let cfg = |e: rough_heat::Error| CliError::Config(e.to_string());
        Ok(match self.field_kind {
            FieldKind::Zero => Box::new(ZeroField { components: dim }),
            FieldKind::Additive => Box::new(AdditiveField::new(self.additive_components(spec, dim)).map_err(cfg)?),
            FieldKind::Linear => {
                self.field_len("field.coefficients", &self.coefficients, dim)?;
                Box::new(LinearField { coefficients: self.coefficients.clone() })
            }
            FieldKind::Sin => {
                self.field_len("field.amplitudes", &self.field_amplitudes, dim)?;
                Box::new(SinField::new(self.field_amplitudes.clone(), self.field_phases.clone(), self.cutoff).map_err(cfg)?)
            }
        })
    }

    fn field_len(&self, key: &str, v: &[f64], dim: usize) -> Result<(), CliError> {
        if v.len() != dim {
            return Err(CliError::Config(format!("{key} has {} entries but the signal has {dim} components", v.len())));
        }
        Ok(())
    }

    /// `ψ = offset + scale · (random band-limited field)`.
    pub fn initial(&self, spec: &Arc<SpectralGrid>) -> GridFunction {
        let random = GridFunction::random_real(spec.clone(), self.initial_band, self.initial_decay, self.initial_seed);
        GridFunction::constant(spec.clone(), self.initial_offset).add(&random.scale(self.initial_scale))
    }

    /// Solver settings with the seed echoed for provenance.
    pub fn solver_for(&self, seed: u64) -> SolverConfig {
        SolverConfig { seed: Some(seed), ..self.solver.clone() }
    }

    pub fn picard(&self) -> &PicardSettings {
        &self.solver.picard
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = ExperimentConfig::default();
        let mut again = ExperimentConfig::default();
        for (k, v) in cfg.echo() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(cfg.echo(), again.echo());
        assert_eq!(cfg.echo().len(), KEYS.len());
    }

    #[test]
    fn parsing_and_overrides() {
        let text = "# comment\nsignal.hurst = 0.3  # trailing\n\nsolver.scheme=rough3\nfield.cutoff = 1.5\n";
        let cfg = ExperimentConfig::from_text(text, &[("signal.hurst".into(), "0.45".into())]).unwrap();
        assert_eq!(cfg.hurst, 0.45);
        assert_eq!(cfg.solver.scheme, Scheme::Rough3);
        assert_eq!(cfg.cutoff, Some(1.5));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for text in ["signal.hurts = 0.4", "signal.hurst = fast", "solver.scheme = rough4", "no equals sign"] {
            assert!(matches!(ExperimentConfig::from_text(text, &[]), Err(CliError::Config(_))), "{text}");
        }
        let cfg = ExperimentConfig::from_text("solver.steps = 3", &[]).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
