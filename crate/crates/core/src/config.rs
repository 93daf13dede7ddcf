//! Experiment description, presets and JSON handling.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bath::{markov_constants, BathSpec, MarkovConstants, DEFAULT_QUADRATURE_POINTS};
use crate::error::{Error, Result};
use crate::grid::{
    build_coupling, gaussian_packet, nongaussian_packet, uniform_state, CouplingFunction, CouplingSpec, GaussianTerm,
    PotentialPair, PotentialSpec, SpatialGrid, SpinorState,
};
use crate::observables::DEFAULT_BINS;
use crate::qme::step_count;
use crate::sse::{DriftConvention, StepperConfig, StepperMode};

/// Preset names accepted by [`SimulationConfig::preset`].
pub const PRESETS: [&str; 4] = ["example1", "example2", "example3", "sse_vs_qme"];

/// Key added to the config echo for derived quantities; ignored on parse.
const DERIVED_KEY: &str = "derived";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub a: f64,
    pub b: f64,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "one")]
    pub sample_stride: usize,
}

fn one() -> usize {
    1
}

fn default_quadrature() -> usize {
    DEFAULT_QUADRATURE_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
    pub e_minus: f64,
    pub e_plus: f64,
    #[serde(default)]
    pub mu: f64,
    /// Overrides the default `c0± = 2πε`.
    #[serde(default)]
    pub c0: Option<MarkovConstants>,
    #[serde(default)]
    pub mode: StepperMode,
    #[serde(default)]
    pub memory_window: f64,
    #[serde(default = "one")]
    pub memory_stride: usize,
    #[serde(default)]
    pub convention: DriftConvention,
    #[serde(default = "default_quadrature")]
    pub quadrature_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Coherent state at `(q0, p0)` of width `√ε`.
    Gaussian { q0: f64, p0: f64 },
    /// `∝ exp(−5(x+1)² + i sin(x)/ε)`.
    NonGaussian,
    /// `∝ 1`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_trajectories: usize,
    pub master_seed: u64,
    #[serde(default = "one")]
    pub worker_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Writes the final spinor of every trajectory.
    #[serde(default)]
    pub snapshots: bool,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QmeKind {
    #[default]
    Markovian,
    FiniteHistory,
    Redfield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmeConfig {
    pub dt: f64,
    #[serde(default)]
    pub kind: QmeKind,
    #[serde(default = "one")]
    pub sample_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseValidationConfig {
    pub samples: usize,
}

impl Default for NoiseValidationConfig {
    fn default() -> Self {
        NoiseValidationConfig { samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub name: String,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub physics: PhysicsConfig,
    pub potentials: PotentialSpec,
    pub coupling: CouplingSpec,
    pub initial: InitialState,
    pub ensemble: EnsembleConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub qme: Option<QmeConfig>,
    #[serde(default)]
    pub noise_validation: NoiseValidationConfig,
}

impl SimulationConfig {
    /// Built-in experiments with desk-scale trajectory counts.
    pub fn preset(name: &str) -> Result<Self> {
        let eps = 1.0 / 32.0;
        let examples_base = |name: &str, coupling: CouplingSpec, initial: InitialState| SimulationConfig {
            name: name.to_string(),
            grid: GridConfig { a: -PI, b: PI, m: 256 },
            time: TimeConfig {
                dt: 0.005,
                t_final: 10.0,
                sample_stride: 20,
            },
            physics: PhysicsConfig {
                epsilon: eps,
                lambda: eps,
                beta: 0.0,
                e_minus: -1.0,
                e_plus: 1.0,
                mu: 0.0,
                c0: None,
                mode: StepperMode::Markovian,
                memory_window: 0.0,
                memory_stride: 1,
                convention: DriftConvention::TracePreserving,
                quadrature_points: DEFAULT_QUADRATURE_POINTS,
            },
            potentials: PotentialSpec::harmonic_tilted(0.1),
            coupling,
            initial,
            ensemble: EnsembleConfig {
                n_trajectories: 4000,
                master_seed: 20240101,
                worker_count: 1,
            },
            output: OutputConfig {
                directory: PathBuf::from(format!("results/{name}")),
                histogram_bins: DEFAULT_BINS,
                snapshots: false,
            },
            qme: None,
            noise_validation: NoiseValidationConfig::default(),
        };
        match name {
            "example1" => Ok(examples_base(
                name,
                CouplingSpec::gaussians(vec![
                    GaussianTerm::new(1.0, 0.5, 10.0, 0.0),
                    GaussianTerm::new(1.0, -2.0, 40.0, -1.0),
                ]),
                InitialState::Gaussian { q0: -1.0, p0: 0.5 },
            )),
            "example2" => Ok(examples_base(
                name,
                CouplingSpec::gaussians(vec![
                    GaussianTerm::new(2.0, 0.9, 10.0, 0.0),
                    GaussianTerm::new(5.0, -0.5, 40.0, 0.0),
                ]),
                InitialState::Gaussian { q0: -1.0, p0: 0.5 },
            )),
            "example3" => Ok(examples_base(
                name,
                CouplingSpec::gaussians(vec![GaussianTerm::new(1.0, 0.0, 10.0, 0.0)]),
                InitialState::NonGaussian,
            )),
            "sse_vs_qme" => {
                let mut c = examples_base(name, CouplingSpec::constant(1.0), InitialState::Uniform);
                c.grid = GridConfig {
                    a: -10.0,
                    b: 10.0,
                    m: 256,
                };
                c.time = TimeConfig {
                    dt: 0.01,
                    t_final: 30.0,
                    sample_stride: 10,
                };
                c.physics.lambda = eps / 4.0;
                c.physics.c0 = Some(MarkovConstants::real(2.0, 2.0));
                c.potentials = PotentialSpec::holstein(0.1, 0.1);
                c.qme = Some(QmeConfig {
                    dt: 0.1,
                    kind: QmeKind::Markovian,
                    sample_stride: 1,
                });
                Ok(c)
            }
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        SpatialGrid::new(self.grid.a, self.grid.b, self.grid.m)?;
        step_count(self.time.t_final, self.time.dt)?;
        if self.time.sample_stride == 0 {
            return Err(Error::InvalidParameter("sample_stride must be at least 1".into()));
        }
        self.bath()?;
        self.stepper_config().validate()?;
        self.coupling.validate()?;
        if self.ensemble.n_trajectories == 0 {
            return Err(Error::InvalidParameter("n_trajectories must be at least 1".into()));
        }
        if self.output.histogram_bins == 0 {
            return Err(Error::InvalidParameter("histogram_bins must be at least 1".into()));
        }
        if self.physics.mode == StepperMode::NonMarkovian && self.physics.memory_window > self.time.t_final {
            return Err(Error::InvalidParameter("memory_window exceeds the final time".into()));
        }
        if let Some(q) = &self.qme {
            step_count(self.time.t_final, q.dt)?;
            if q.sample_stride == 0 {
                return Err(Error::InvalidParameter("qme.sample_stride must be at least 1".into()));
            }
        }
        if self.noise_validation.samples == 0 {
            return Err(Error::InvalidParameter("noise_validation.samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bath(&self) -> Result<BathSpec> {
        let p = &self.physics;
        let spec = BathSpec::new(p.beta, p.e_minus, p.e_plus, p.epsilon)?
            .with_mu(p.mu)
            .with_quadrature_points(p.quadrature_points);
        spec.validate()?;
        Ok(spec)
    }

    pub fn markov_constants(&self) -> Result<MarkovConstants> {
        Ok(markov_constants(&self.bath()?, self.physics.c0))
    }

    pub fn stepper_config(&self) -> StepperConfig {
        let p = &self.physics;
        let c0 = markov_constants(
            &BathSpec {
                beta: p.beta,
                e_minus: p.e_minus,
                e_plus: p.e_plus,
                epsilon: p.epsilon,
                mu: p.mu,
                quadrature_points: p.quadrature_points,
            },
            p.c0,
        );
        StepperConfig {
            dt: self.time.dt,
            epsilon: p.epsilon,
            lambda: p.lambda,
            c0,
            mode: p.mode,
            memory_window: p.memory_window,
            memory_stride: p.memory_stride,
            convention: p.convention,
        }
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.grid.a, self.grid.b, self.grid.m)
    }

    pub fn potential_pair(&self, grid: &SpatialGrid) -> Result<PotentialPair> {
        PotentialPair::from_spec(grid, &self.potentials)
    }

    pub fn coupling_function(&self, grid: &SpatialGrid) -> Result<CouplingFunction> {
        build_coupling(grid, &self.coupling)
    }

    pub fn initial_state(&self, grid: &SpatialGrid) -> Result<SpinorState> {
        let eps = self.physics.epsilon;
        match self.initial {
            InitialState::Gaussian { q0, p0 } => gaussian_packet(grid, q0, p0, eps),
            InitialState::NonGaussian => nongaussian_packet(grid, eps),
            InitialState::Uniform => Ok(uniform_state(grid)),
        }
    }

    /// Time grid `0, dt, ..., T` of the SSE.
    pub fn times(&self) -> Result<Vec<f64>> {
        let n = step_count(self.time.t_final, self.time.dt)?;
        Ok((0..=n).map(|k| k as f64 * self.time.dt).collect())
    }

    pub fn lambda_over_epsilon(&self) -> f64 {
        self.physics.lambda / self.physics.epsilon
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `physics.lambda=0.0078125` or `ensemble.n_trajectories=100`.
    /// Values are parsed as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("override `{item}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key.trim(), value)?;
        }
        let c = Self::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    fn from_value(mut v: Value) -> Result<Self> {
        if let Value::Object(map) = &mut v {
            map.remove(DERIVED_KEY);
        }
        serde_json::from_value(v).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        let c = Self::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON of the config plus a `derived` block (`lambda_over_epsilon`).
    pub fn echo_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(map) = &mut v {
            map.insert(
                DERIVED_KEY.to_string(),
                serde_json::json!({ "lambda_over_epsilon": self.lambda_over_epsilon() }),
            );
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                let entry = map.entry(part.to_string()).or_insert(Value::Null);
                if entry.is_null() {
                    *entry = Value::Object(Default::default());
                }
                entry
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("override key `{key}`: `{part}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::InvalidParameter(format!("override key `{key}`: index {idx} out of range ({len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "override key `{key}`: `{part}` is not inside an object"
                )))
            }
        };
    }
    Err(Error::InvalidParameter("empty override key".into()))
}
