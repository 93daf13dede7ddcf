//! Trajectory steppers for the linear SSE.
//!
//! Each step applies the potential phase, the spectral kinetic phase and then
//! an Euler-Maruyama stage built from the post-Hamiltonian values:
//!
//! ```text
//! ψ0 ← ψ0 − i(λ/ε) V ΔW+ ψ1 + (λ/ε)² D−[ψ0] Δt
//! ψ1 ← ψ1 − i(λ/ε) V ΔW− ψ0 + (λ/ε)² D+[ψ1] Δt
//! ```
//!
//! where `D∓` is either the Markovian drift `κ∓ V² ψ` or the memory sum
//! `σ Σ_k w_k c∓(τ_k) V e^{-i h τ_k/ε} V ψ(t − τ_k)`.

use std::collections::VecDeque;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bath::{BandKernel, BathSpec, Branch, MarkovConstants};
use crate::error::{Error, Result};
use crate::grid::{SpatialGrid, SpinorState, SplitPropagator};
use crate::noise::NoisePath;
use crate::observables::ObservableSample;

/// Sign and size of the dissipative drift.
///
/// `TracePreserving` uses `κ = −c0/2` (and memory sign `σ = −1`), which makes
/// the ensemble-averaged norm exactly conserved when the noise intensity is
/// `Re c0`. `Printed` uses `κ = +c0` and `σ = +1`; its trajectories grow in
/// norm and it is kept for comparison only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftConvention {
    #[default]
    TracePreserving,
    Printed,
}

impl DriftConvention {
    pub fn drift(self, c0: Complex64) -> Complex64 {
        match self {
            DriftConvention::TracePreserving => -0.5 * c0,
            DriftConvention::Printed => c0,
        }
    }

    pub fn memory_sign(self) -> f64 {
        match self {
            DriftConvention::TracePreserving => -1.0,
            DriftConvention::Printed => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperMode {
    #[default]
    Markovian,
    NonMarkovian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub dt: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub c0: MarkovConstants,
    pub mode: StepperMode,
    pub memory_window: f64,
    pub memory_stride: usize,
    pub convention: DriftConvention,
}

impl StepperConfig {
    pub fn markovian(dt: f64, epsilon: f64, lambda: f64, c0: MarkovConstants) -> Self {
        StepperConfig {
            dt,
            epsilon,
            lambda,
            c0,
            mode: StepperMode::Markovian,
            memory_window: 0.0,
            memory_stride: 1,
            convention: DriftConvention::TracePreserving,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive (got {})", self.dt)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive (got {})",
                self.epsilon
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidParameter("lambda must be finite".into()));
        }
        if !(self.memory_window >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "memory_window must be non-negative (got {})",
                self.memory_window
            )));
        }
        if self.memory_stride == 0 {
            return Err(Error::InvalidParameter("memory_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// `(λ/ε)²`.
    pub fn coupling_factor(&self) -> f64 {
        (self.lambda / self.epsilon).powi(2)
    }

    /// Number of whole steps covered by the memory window.
    pub fn window_steps(&self) -> usize {
        (self.memory_window / self.dt * (1.0 + 1e-12)).floor() as usize
    }
}

/// Kernel tables `c±(k Δt)` for `k = 0..=len-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryKernels {
    pub dt: f64,
    pub plus: Vec<Complex64>,
    pub minus: Vec<Complex64>,
}

impl MemoryKernels {
    /// Tables covering `window_steps + 1` lags of the band kernels.
    pub fn from_bath(spec: &BathSpec, dt: f64, window_steps: usize) -> Result<Self> {
        let taus: Vec<f64> = (0..=window_steps).map(|k| k as f64 * dt).collect();
        Ok(MemoryKernels {
            dt,
            plus: BandKernel::new(spec, Branch::Plus)?.table(&taus),
            minus: BandKernel::new(spec, Branch::Minus)?.table(&taus),
        })
    }

    pub fn from_fn(dt: f64, window_steps: usize, f: impl Fn(Branch, f64) -> Complex64) -> Self {
        let taus: Vec<f64> = (0..=window_steps).map(|k| k as f64 * dt).collect();
        MemoryKernels {
            dt,
            plus: taus.iter().map(|&t| f(Branch::Plus, t)).collect(),
            minus: taus.iter().map(|&t| f(Branch::Minus, t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty()
    }
}

/// Immutable inputs shared by all steppers of an ensemble.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub propagator: &'a SplitPropagator,
    pub coupling: &'a [f64],
    pub config: &'a StepperConfig,
}

impl<'a> StepContext<'a> {
    pub fn new(
        propagator: &'a SplitPropagator,
        coupling: &'a [f64],
        config: &'a StepperConfig,
    ) -> Result<Self> {
        config.validate()?;
        if coupling.len() != propagator.len() {
            return Err(Error::DimensionMismatch {
                expected: propagator.len(),
                found: coupling.len(),
            });
        }
        if (propagator.dt() - config.dt).abs() > 1e-12 * config.dt {
            return Err(Error::InvalidParameter(format!(
                "propagator dt {} differs from stepper dt {}",
                propagator.dt(),
                config.dt
            )));
        }
        Ok(StepContext {
            propagator,
            coupling,
            config,
        })
    }
}

fn check_finite(state: &SpinorState, step: usize) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalBlowup { step })
    }
}

fn hamiltonian_stage(ctx: &StepContext<'_>, state: &mut SpinorState, fft: &mut [Complex64]) {
    ctx.propagator.step(0, &mut state.psi0, fft);
    ctx.propagator.step(1, &mut state.psi1, fft);
}

/// Markovian stepper: drift `κ∓ V² ψ` with `κ` from the drift convention.
#[derive(Debug)]
pub struct MarkovianStepper<'a> {
    ctx: StepContext<'a>,
    fft: Vec<Complex64>,
    steps: usize,
}

impl<'a> MarkovianStepper<'a> {
    pub fn new(ctx: StepContext<'a>) -> Self {
        MarkovianStepper {
            fft: ctx.propagator.scratch(),
            ctx,
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, state: &mut SpinorState, dw_plus: Complex64, dw_minus: Complex64) -> Result<()> {
        let cfg = self.ctx.config;
        hamiltonian_stage(&self.ctx, state, &mut self.fft);
        let g = cfg.coupling_factor();
        let noise = Complex64::new(0.0, -cfg.lambda / cfg.epsilon);
        let k0 = g * cfg.convention.drift(cfg.c0.minus) * cfg.dt;
        let k1 = g * cfg.convention.drift(cfg.c0.plus) * cfg.dt;
        let (n0, n1) = (noise * dw_plus, noise * dw_minus);
        for ((a, b), &v) in state
            .psi0
            .iter_mut()
            .zip(state.psi1.iter_mut())
            .zip(self.ctx.coupling)
        {
            let (p0, p1) = (*a, *b);
            let v2 = v * v;
            *a = p0 + n0 * v * p1 + k0 * v2 * p0;
            *b = p1 + n1 * v * p0 + k1 * v2 * p1;
        }
        self.steps += 1;
        state.time += cfg.dt;
        check_finite(state, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct HistoryEntry {
    birth_step: usize,
    /// Propagated under `h1` from `V ψ0(t_birth)`.
    phi0: Vec<Complex64>,
    /// Propagated under `h0` from `V ψ1(t_birth)`.
    phi1: Vec<Complex64>,
}

/// History states for the memory convolution, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryBuffer {
    entries: VecDeque<HistoryEntry>,
}

impl HistoryBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Birth steps, oldest first.
    pub fn birth_steps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.birth_step).collect()
    }
}

/// Trapezoid weights on the ascending nodes `0 = τ_0 < τ_1 < ...`.
pub fn trapezoid_nodes(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = 0.5 * (nodes[k + 1] - nodes[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// Memory-kernel stepper for the wide-band SSE.
#[derive(Debug)]
pub struct NonMarkovianStepper<'a> {
    ctx: StepContext<'a>,
    kernels: &'a MemoryKernels,
    history: HistoryBuffer,
    window_steps: usize,
    fft: Vec<Complex64>,
    acc0: Vec<Complex64>,
    acc1: Vec<Complex64>,
    steps: usize,
}

impl<'a> NonMarkovianStepper<'a> {
    pub fn new(ctx: StepContext<'a>, kernels: &'a MemoryKernels) -> Result<Self> {
        let window_steps = ctx.config.window_steps();
        if kernels.len() < window_steps + 1 {
            return Err(Error::DimensionMismatch {
                expected: window_steps + 1,
                found: kernels.len(),
            });
        }
        if (kernels.dt - ctx.config.dt).abs() > 1e-12 * ctx.config.dt {
            return Err(Error::InvalidParameter(
                "memory kernel tables use a different dt".into(),
            ));
        }
        let m = ctx.propagator.len();
        Ok(NonMarkovianStepper {
            fft: ctx.propagator.scratch(),
            ctx,
            kernels,
            history: HistoryBuffer::default(),
            window_steps,
            acc0: vec![Complex64::new(0.0, 0.0); m],
            acc1: vec![Complex64::new(0.0, 0.0); m],
            steps: 0,
        })
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, state: &mut SpinorState, dw_plus: Complex64, dw_minus: Complex64) -> Result<()> {
        let cfg = self.ctx.config;
        let v = self.ctx.coupling;
        if self.window_steps > 0 && self.steps % cfg.memory_stride == 0 {
            self.history.entries.push_back(HistoryEntry {
                birth_step: self.steps,
                phi0: state.psi0.iter().zip(v).map(|(z, &c)| z * c).collect(),
                phi1: state.psi1.iter().zip(v).map(|(z, &c)| z * c).collect(),
            });
        }
        hamiltonian_stage(&self.ctx, state, &mut self.fft);
        for e in self.history.entries.iter_mut() {
            self.ctx.propagator.step(1, &mut e.phi0, &mut self.fft);
            self.ctx.propagator.step(0, &mut e.phi1, &mut self.fft);
        }
        let now = self.steps + 1;
        while let Some(front) = self.history.entries.front() {
            if now - front.birth_step > self.window_steps {
                self.history.entries.pop_front();
            } else {
                break;
            }
        }

        // Quadrature nodes: the current state (age 0) then entries by age.
        let ages: Vec<usize> = std::iter::once(0)
            .chain(self.history.entries.iter().rev().map(|e| now - e.birth_step))
            .collect();
        let taus: Vec<f64> = ages.iter().map(|&a| a as f64 * cfg.dt).collect();
        let weights = trapezoid_nodes(&taus);

        let zero = Complex64::new(0.0, 0.0);
        self.acc0.iter_mut().for_each(|z| *z = zero);
        self.acc1.iter_mut().for_each(|z| *z = zero);
        let w0 = weights[0];
        if w0 != 0.0 {
            let (c0m, c0p) = (self.kernels.minus[0] * w0, self.kernels.plus[0] * w0);
            for j in 0..v.len() {
                self.acc0[j] += c0m * v[j] * state.psi0[j];
                self.acc1[j] += c0p * v[j] * state.psi1[j];
            }
        }
        for (k, e) in self.history.entries.iter().rev().enumerate() {
            let (w, age) = (weights[k + 1], ages[k + 1]);
            let cm = self.kernels.minus[age] * w;
            let cp = self.kernels.plus[age] * w;
            for j in 0..v.len() {
                self.acc0[j] += cm * e.phi0[j];
                self.acc1[j] += cp * e.phi1[j];
            }
        }

        let g = cfg.coupling_factor();
        let noise = Complex64::new(0.0, -cfg.lambda / cfg.epsilon);
        let mem = cfg.convention.memory_sign() * g * cfg.dt;
        let (n0, n1) = (noise * dw_plus, noise * dw_minus);
        for j in 0..v.len() {
            let (p0, p1) = (state.psi0[j], state.psi1[j]);
            state.psi0[j] = p0 + n0 * v[j] * p1 + mem * v[j] * self.acc0[j];
            state.psi1[j] = p1 + n1 * v[j] * p0 + mem * v[j] * self.acc1[j];
        }
        self.steps = now;
        state.time += cfg.dt;
        check_finite(state, self.steps)
    }
}

/// Either stepper behind one interface.
#[derive(Debug)]
pub enum Stepper<'a> {
    Markovian(MarkovianStepper<'a>),
    NonMarkovian(Box<NonMarkovianStepper<'a>>),
}

impl<'a> Stepper<'a> {
    /// Builds the stepper named by `ctx.config.mode`; non-Markovian mode needs
    /// kernel tables.
    pub fn new(ctx: StepContext<'a>, kernels: Option<&'a MemoryKernels>) -> Result<Self> {
        match ctx.config.mode {
            StepperMode::Markovian => Ok(Stepper::Markovian(MarkovianStepper::new(ctx))),
            StepperMode::NonMarkovian => {
                let k = kernels.ok_or_else(|| {
                    Error::InvalidParameter("non-Markovian mode needs memory kernels".into())
                })?;
                Ok(Stepper::NonMarkovian(Box::new(NonMarkovianStepper::new(ctx, k)?)))
            }
        }
    }

    pub fn step(&mut self, state: &mut SpinorState, dw_plus: Complex64, dw_minus: Complex64) -> Result<()> {
        match self {
            Stepper::Markovian(s) => s.step(state, dw_plus, dw_minus),
            Stepper::NonMarkovian(s) => s.step(state, dw_plus, dw_minus),
        }
    }
}

/// Sampling options for [`propagate_trajectory`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordOptions {
    pub sample_stride: usize,
    pub snapshots: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions {
            sample_stride: 1,
            snapshots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<ObservableSample>,
    pub snapshots: Vec<SpinorState>,
    pub final_state: SpinorState,
}

impl TrajectoryRecord {
    /// CSV columns `t,R,X,norm0,norm1`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "t,R,X,norm0,norm1")?;
        for s in &self.samples {
            writeln!(
                out,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                s.time, s.r, s.x_mean, s.norm0, s.norm1
            )?;
        }
        Ok(())
    }
}

/// Step indices at which observables are recorded: every `stride` steps
/// plus the final step.
pub fn sample_steps(n_steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut s: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *s.last().expect("non-empty") != n_steps {
        s.push(n_steps);
    }
    s
}

/// Runs one trajectory over the noise grid, recording observables at
/// [`sample_steps`].
pub fn propagate_trajectory(
    ctx: StepContext<'_>,
    kernels: Option<&MemoryKernels>,
    grid: &SpatialGrid,
    initial: &SpinorState,
    noise: &NoisePath,
    options: RecordOptions,
    trajectory_id: u64,
) -> Result<TrajectoryRecord> {
    if initial.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            found: initial.len(),
        });
    }
    if noise.times.is_empty() {
        return Err(Error::EmptyInput("noise time grid"));
    }
    let n_steps = noise.steps();
    for w in noise.times.windows(2) {
        if ((w[1] - w[0]) - ctx.config.dt).abs() > 1e-9 * ctx.config.dt {
            return Err(Error::InvalidParameter(
                "noise time grid does not match the stepper dt".into(),
            ));
        }
    }
    let mut stepper = Stepper::new(ctx, kernels)?;
    let mut state = initial.clone();
    state.time = noise.times[0];
    let stride = options.sample_stride.max(1);
    let mut samples = Vec::new();
    let mut snapshots = Vec::new();
    let mut record = |state: &SpinorState| -> Result<()> {
        samples.push(ObservableSample::from_state(state, grid, trajectory_id)?);
        if options.snapshots {
            snapshots.push(state.clone());
        }
        Ok(())
    };
    record(&state)?;
    for n in 0..n_steps {
        stepper.step(&mut state, noise.plus.increments[n], noise.minus.increments[n])?;
        state.time = noise.times[n + 1];
        if (n + 1) % stride == 0 || n + 1 == n_steps {
            record(&state)?;
        }
    }
    Ok(TrajectoryRecord {
        samples,
        snapshots,
        final_state: state,
    })
}
