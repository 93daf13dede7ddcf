//! Periodic Fourier grid, potentials, coupling functions, initial states and
//! the split-step Hamiltonian propagator shared by both solvers.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    a: f64,
    b: f64,
    points: Vec<f64>,
    /// `2πl/(b-a)` in FFT order: `l = 0, 1, .., m/2-1, -m/2, .., -1`.
    wavenumbers: Vec<f64>,
}

impl SpatialGrid {
    pub fn new(a: f64, b: f64, m: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidParameter(format!(
                "grid domain must satisfy a < b (got [{a}, {b}])"
            )));
        }
        if m < 8 || !m.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "grid size must be a power of two >= 8 (got {m})"
            )));
        }
        let dx = (b - a) / m as f64;
        let points = (0..m).map(|j| a + j as f64 * dx).collect();
        let half = (m / 2) as isize;
        let wavenumbers = (0..m as isize)
            .map(|j| {
                let l = if j < half { j } else { j - m as isize };
                2.0 * PI * l as f64 / (b - a)
            })
            .collect();
        Ok(SpatialGrid {
            a,
            b,
            points,
            wavenumbers,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.points.len() as f64
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// Index of the grid point closest to `x`.
    pub fn nearest_index(&self, x: f64) -> usize {
        let j = ((x - self.a) / self.dx()).round();
        (j.max(0.0) as usize).min(self.len() - 1)
    }
}

/// Polynomial coefficients in ascending powers of `x`.
pub fn eval_polynomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `U0` as a polynomial and `U1 = U0 + h` with `h` another polynomial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub u0: Vec<f64>,
    pub shift: Vec<f64>,
}

impl PotentialSpec {
    /// `U0 = x²/2`, `U1 = U0 + slope x`.
    pub fn harmonic_tilted(slope: f64) -> Self {
        PotentialSpec {
            u0: vec![0.0, 0.0, 0.5],
            shift: vec![0.0, slope],
        }
    }

    /// Displaced oscillator: `U1 = U0 + √2 g x + g² + E_d`.
    pub fn holstein(g: f64, e_d: f64) -> Self {
        PotentialSpec {
            u0: vec![0.0, 0.0, 0.5],
            shift: vec![g * g + e_d, 2f64.sqrt() * g],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialPair {
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
}

impl PotentialPair {
    pub fn from_spec(grid: &SpatialGrid, spec: &PotentialSpec) -> Result<Self> {
        let u0: Vec<f64> = grid.points().iter().map(|&x| eval_polynomial(&spec.u0, x)).collect();
        let u1: Vec<f64> = grid
            .points()
            .iter()
            .zip(&u0)
            .map(|(&x, &u)| u + eval_polynomial(&spec.shift, x))
            .collect();
        Self::new(u0, u1)
    }

    pub fn new(u0: Vec<f64>, u1: Vec<f64>) -> Result<Self> {
        if u0.len() != u1.len() {
            return Err(Error::DimensionMismatch {
                expected: u0.len(),
                found: u1.len(),
            });
        }
        if u0.iter().chain(&u1).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("potential has non-finite entries".into()));
        }
        Ok(PotentialPair { u0, u1 })
    }

    pub fn level(&self, level: usize) -> &[f64] {
        if level == 0 {
            &self.u0
        } else {
            &self.u1
        }
    }
}

/// `amplitude * exp(-width (x - center)² + offset)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTerm {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    #[serde(default)]
    pub offset: f64,
}

impl GaussianTerm {
    pub fn new(amplitude: f64, center: f64, width: f64, offset: f64) -> Self {
        GaussianTerm {
            amplitude,
            center,
            width,
            offset,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let d = x - self.center;
        self.amplitude * (-self.width * d * d + self.offset).exp()
    }
}

/// `V(x) = constant + Σ gaussians`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub gaussians: Vec<GaussianTerm>,
}

impl CouplingSpec {
    pub fn constant(v: f64) -> Self {
        CouplingSpec {
            constant: v,
            gaussians: Vec::new(),
        }
    }

    pub fn gaussians(terms: Vec<GaussianTerm>) -> Self {
        CouplingSpec {
            constant: 0.0,
            gaussians: terms,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.constant + self.gaussians.iter().map(|g| g.eval(x)).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.constant.is_finite() {
            return Err(Error::InvalidParameter("coupling constant must be finite".into()));
        }
        for g in &self.gaussians {
            if !(g.width > 0.0) || !g.width.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "coupling width must be positive (got {})",
                    g.width
                )));
            }
            if !(g.amplitude.is_finite() && g.center.is_finite() && g.offset.is_finite()) {
                return Err(Error::InvalidParameter("coupling terms must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingFunction {
    pub values: Vec<f64>,
    pub spec: CouplingSpec,
}

impl CouplingFunction {
    /// True when `V` takes the same value at every grid point.
    pub fn is_uniform(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

pub fn build_coupling(grid: &SpatialGrid, spec: &CouplingSpec) -> Result<CouplingFunction> {
    spec.validate()?;
    Ok(CouplingFunction {
        values: grid.points().iter().map(|&x| spec.eval(x)).collect(),
        spec: spec.clone(),
    })
}

/// Two-level nuclear wavefunction `(ψ0, ψ1)` sampled on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinorState {
    pub psi0: Vec<Complex64>,
    pub psi1: Vec<Complex64>,
    pub time: f64,
}

impl SpinorState {
    pub fn new(psi0: Vec<Complex64>, psi1: Vec<Complex64>) -> Result<Self> {
        if psi0.len() != psi1.len() {
            return Err(Error::DimensionMismatch {
                expected: psi0.len(),
                found: psi1.len(),
            });
        }
        Ok(SpinorState {
            psi0,
            psi1,
            time: 0.0,
        })
    }

    /// Neutral state: `ψ1 = 0`.
    pub fn neutral(psi0: Vec<Complex64>) -> Self {
        let n = psi0.len();
        SpinorState {
            psi0,
            psi1: vec![Complex64::new(0.0, 0.0); n],
            time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.psi0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi0.is_empty()
    }

    pub fn component(&self, level: usize) -> &[Complex64] {
        if level == 0 {
            &self.psi0
        } else {
            &self.psi1
        }
    }

    pub fn norm0(&self, dx: f64) -> f64 {
        dx * self.psi0.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn norm1(&self, dx: f64) -> f64 {
        dx * self.psi1.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn total_norm(&self, dx: f64) -> f64 {
        self.norm0(dx) + self.norm1(dx)
    }

    pub fn is_finite(&self) -> bool {
        self.psi0
            .iter()
            .chain(&self.psi1)
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Rescales so that the total norm is one.
    pub fn normalize(&mut self, dx: f64) -> Result<()> {
        let n = self.total_norm(dx);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let s = 1.0 / n.sqrt();
        self.psi0.iter_mut().chain(self.psi1.iter_mut()).for_each(|z| *z *= s);
        Ok(())
    }

    /// CSV snapshot: `x, re ψ0, im ψ0, re ψ1, im ψ1`.
    pub fn write_csv(&self, grid: &SpatialGrid, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "x,re_psi0,im_psi0,re_psi1,im_psi1")?;
        for ((x, a), b) in grid.points().iter().zip(&self.psi0).zip(&self.psi1) {
            writeln!(out, "{x:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", a.re, a.im, b.re, b.im)?;
        }
        Ok(())
    }
}

fn check_resolution(grid: &SpatialGrid, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive (got {epsilon})"
        )));
    }
    let required = epsilon.sqrt();
    if grid.dx() >= required {
        return Err(Error::GridTooCoarse {
            dx: grid.dx(),
            required,
        });
    }
    Ok(())
}

/// Coherent state `(πε)^{-1/4} exp(-(x-q0)²/2ε + i p0 (x-q0)/ε)` on level 0.
pub fn gaussian_packet(grid: &SpatialGrid, q0: f64, p0: f64, epsilon: f64) -> Result<SpinorState> {
    check_resolution(grid, epsilon)?;
    let pref = (PI * epsilon).powf(-0.25);
    let psi0 = grid
        .points()
        .iter()
        .map(|&x| {
            let d = x - q0;
            Complex64::from_polar(pref * (-d * d / (2.0 * epsilon)).exp(), p0 * d / epsilon)
        })
        .collect();
    Ok(SpinorState::neutral(psi0))
}

/// Normalized `exp(-5(x+1)² + i sin(x)/ε)` on level 0.
pub fn nongaussian_packet(grid: &SpatialGrid, epsilon: f64) -> Result<SpinorState> {
    check_resolution(grid, epsilon)?;
    let psi0 = grid
        .points()
        .iter()
        .map(|&x| Complex64::from_polar((-5.0 * (x + 1.0) * (x + 1.0)).exp(), x.sin() / epsilon))
        .collect();
    let mut state = SpinorState::neutral(psi0);
    state.normalize(grid.dx())?;
    Ok(state)
}

/// Normalized constant wavefunction on level 0.
pub fn uniform_state(grid: &SpatialGrid) -> SpinorState {
    let v = Complex64::new(grid.length().powf(-0.5), 0.0);
    SpinorState::neutral(vec![v; grid.len()])
}

/// Spectral kinetic phases `exp(-i ε μ_l² dt / 2)` in FFT order.
pub fn kinetic_phase(grid: &SpatialGrid, epsilon: f64, dt: f64) -> Vec<Complex64> {
    grid.wavenumbers()
        .iter()
        .map(|&mu| Complex64::from_polar(1.0, -epsilon * mu * mu * dt / 2.0))
        .collect()
}

/// First-order split step `e^{-iTΔt/ε} e^{-iU_iΔt/ε}` for both levels.
///
/// Immutable and shareable; callers provide their own FFT scratch.
#[derive(Clone)]
pub struct SplitPropagator {
    potential_phase: [Vec<Complex64>; 2],
    /// Kinetic phase with the inverse-FFT normalization folded in.
    kinetic: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    dt: f64,
}

impl std::fmt::Debug for SplitPropagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplitPropagator")
            .field("m", &self.kinetic.len())
            .field("dt", &self.dt)
            .finish()
    }
}

impl SplitPropagator {
    pub fn new(grid: &SpatialGrid, potentials: &PotentialPair, epsilon: f64, dt: f64) -> Result<Self> {
        let m = grid.len();
        if potentials.u0.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: potentials.u0.len(),
            });
        }
        if !(dt > 0.0) || !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(
                "propagator needs dt > 0 and epsilon > 0".into(),
            ));
        }
        let phase = |u: &[f64]| -> Vec<Complex64> {
            u.iter()
                .map(|&v| Complex64::from_polar(1.0, -v * dt / epsilon))
                .collect()
        };
        let scale = 1.0 / m as f64;
        let kinetic = kinetic_phase(grid, epsilon, dt)
            .into_iter()
            .map(|z| z * scale)
            .collect();
        let mut planner = FftPlanner::new();
        Ok(SplitPropagator {
            potential_phase: [phase(&potentials.u0), phase(&potentials.u1)],
            kinetic,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.kinetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinetic.is_empty()
    }

    pub fn scratch(&self) -> Vec<Complex64> {
        let n = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        vec![Complex64::new(0.0, 0.0); n]
    }

    pub fn apply_potential(&self, level: usize, psi: &mut [Complex64]) {
        for (z, p) in psi.iter_mut().zip(&self.potential_phase[level]) {
            *z *= p;
        }
    }

    pub fn apply_kinetic(&self, psi: &mut [Complex64], scratch: &mut [Complex64]) {
        self.forward.process_with_scratch(psi, scratch);
        for (z, k) in psi.iter_mut().zip(&self.kinetic) {
            *z *= k;
        }
        self.inverse.process_with_scratch(psi, scratch);
    }

    /// Potential phase then kinetic phase under the Hamiltonian of `level`.
    pub fn step(&self, level: usize, psi: &mut [Complex64], scratch: &mut [Complex64]) {
        self.apply_potential(level, psi);
        self.apply_kinetic(psi, scratch);
    }
}
