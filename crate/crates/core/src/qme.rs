//! Block density matrix dynamics.
//!
//! The Markovian, finite-history and Redfield master equations share one
//! dissipator template (blocks `ρ_ij` are `m × m` matrices over the grid):
//!
//! ```text
//! D00 = g [L0 ρ00 + ρ00 L0† + t0 B ρ11 B†]
//! D11 = g [L1 ρ11 + ρ11 L1† + t1 B† ρ00 B]
//! D01 = g [M0 ρ01 + ρ01 M1† + x B ρ10 B]
//! ```
//!
//! with `g = (λ/ε)²` and `B = V` in the position basis. The integrator works
//! in the eigenbases of `h0`, `h1` and in the interaction picture, so the
//! Hamiltonian flow is exact and RK4 only sees the dissipator.

use std::f64::consts::PI;
use std::io::Write;

use gauss_quad::GaussLegendre;
use ndarray::{Array2, Zip};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bath::{BathSpec, Branch, MarkovConstants};
use crate::error::{Error, Result};
use crate::grid::{PotentialPair, SpatialGrid, SpinorState};
use crate::sse::{sample_steps, DriftConvention};

/// Largest grid accepted by the dense eigendecomposition.
pub const MAX_DENSE_GRID: usize = 2048;

type CMatrix = Array2<Complex64>;

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDensityMatrix {
    pub rho00: CMatrix,
    pub rho01: CMatrix,
    pub rho10: CMatrix,
    pub rho11: CMatrix,
    pub dx: f64,
    pub time: f64,
}

impl BlockDensityMatrix {
    pub fn zeros(m: usize, dx: f64) -> Self {
        BlockDensityMatrix {
            rho00: CMatrix::zeros((m, m)),
            rho01: CMatrix::zeros((m, m)),
            rho10: CMatrix::zeros((m, m)),
            rho11: CMatrix::zeros((m, m)),
            dx,
            time: 0.0,
        }
    }

    /// Pure state `|Ψ⟩⟨Ψ|` with entries `ψ_i(x_j) ψ_k*(x_l)`.
    pub fn pure(state: &SpinorState, dx: f64) -> Self {
        let m = state.len();
        let outer = |a: &[Complex64], b: &[Complex64]| CMatrix::from_shape_fn((m, m), |(j, l)| a[j] * b[l].conj());
        BlockDensityMatrix {
            rho00: outer(&state.psi0, &state.psi0),
            rho01: outer(&state.psi0, &state.psi1),
            rho10: outer(&state.psi1, &state.psi0),
            rho11: outer(&state.psi1, &state.psi1),
            dx,
            time: state.time,
        }
    }

    pub fn dim(&self) -> usize {
        self.rho00.nrows()
    }

    pub fn population0(&self) -> f64 {
        self.dx * self.rho00.diag().iter().map(|z| z.re).sum::<f64>()
    }

    pub fn population1(&self) -> f64 {
        self.dx * self.rho11.diag().iter().map(|z| z.re).sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.population0() + self.population1()
    }

    /// `tr(ρ²)` of the continuum operator, `dx² Σ |ρ_ij(x, x')|²`.
    pub fn purity(&self) -> f64 {
        let s: f64 = [&self.rho00, &self.rho01, &self.rho10, &self.rho11]
            .iter()
            .map(|b| b.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        self.dx * self.dx * s
    }

    /// Largest deviation from global Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        let m = self.dim();
        let mut e = 0.0f64;
        for j in 0..m {
            for l in 0..m {
                e = e.max((self.rho00[[j, l]] - self.rho00[[l, j]].conj()).norm());
                e = e.max((self.rho11[[j, l]] - self.rho11[[l, j]].conj()).norm());
                e = e.max((self.rho01[[j, l]] - self.rho10[[l, j]].conj()).norm());
            }
        }
        e
    }

    /// Projects onto the Hermitian part, blockwise consistently.
    pub fn symmetrize(&mut self) {
        hermitize(&mut self.rho00);
        hermitize(&mut self.rho11);
        let avg = (&self.rho01 + &self.rho10.t().mapv(|z| z.conj())) * 0.5;
        self.rho10 = avg.t().mapv(|z| z.conj());
        self.rho01 = avg;
    }

    fn check_dims(&self, m: usize) -> Result<()> {
        for b in [&self.rho00, &self.rho01, &self.rho10, &self.rho11] {
            if b.nrows() != m || b.ncols() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: b.nrows().max(b.ncols()),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.rho00, &self.rho01, &self.rho10, &self.rho11]
            .iter()
            .all(|b| b.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

fn hermitize(a: &mut CMatrix) {
    let m = a.nrows();
    for j in 0..m {
        a[[j, j]].im = 0.0;
        for l in (j + 1)..m {
            let avg = 0.5 * (a[[j, l]] + a[[l, j]].conj());
            a[[j, l]] = avg;
            a[[l, j]] = avg.conj();
        }
    }
}

fn dagger(a: &CMatrix) -> CMatrix {
    a.t().mapv(|z| z.conj())
}

/// Dense `-ε²/2 Δ + U` with the spectral Laplacian of the grid.
pub fn hamiltonian_matrix(grid: &SpatialGrid, potential: &[f64], epsilon: f64) -> Result<Array2<f64>> {
    let m = grid.len();
    if potential.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: potential.len(),
        });
    }
    let mu = grid.wavenumbers();
    let scale = epsilon * epsilon / (2.0 * m as f64);
    // Circulant kinetic row: t[d] = scale Σ_l μ_l² cos(2π l d / m).
    let row: Vec<f64> = (0..m)
        .map(|d| {
            mu.iter()
                .enumerate()
                .map(|(l, &k)| {
                    let idx = if l < m / 2 { l as f64 } else { l as f64 - m as f64 };
                    k * k * (2.0 * PI * idx * d as f64 / m as f64).cos()
                })
                .sum::<f64>()
                * scale
        })
        .collect();
    Ok(Array2::from_shape_fn((m, m), |(j, l)| {
        let d = (j + m - l) % m;
        row[d] + if j == l { potential[j] } else { 0.0 }
    }))
}

/// Dissipator operators in a fixed basis.
#[derive(Clone, Debug)]
enum Op {
    Scalar(Complex64),
    Matrix(CMatrix),
}

impl Op {
    fn left(&self, rho: &CMatrix) -> CMatrix {
        match self {
            Op::Scalar(s) => rho * *s,
            Op::Matrix(a) => a.dot(rho),
        }
    }

    /// `ρ A†`.
    fn right_dagger(&self, rho: &CMatrix) -> CMatrix {
        match self {
            Op::Scalar(s) => rho * s.conj(),
            Op::Matrix(a) => rho.dot(&dagger(a)),
        }
    }
}

#[derive(Clone, Debug)]
struct DissipatorOps {
    l0: Op,
    l1: Op,
    m0: Op,
    m1: Op,
    t0: f64,
    t1: f64,
    x: Complex64,
}

/// Applies the template. `b`/`bd` are `B` and `B†`; returns `(D00, D01, D11)`
/// and, when `rho10` is given, `D10` computed explicitly.
fn apply_template(
    ops: &DissipatorOps,
    b: &CMatrix,
    bd: &CMatrix,
    g: f64,
    rho00: &CMatrix,
    rho01: &CMatrix,
    rho10: &CMatrix,
    rho11: &CMatrix,
    with_d10: bool,
) -> (CMatrix, CMatrix, Option<CMatrix>, CMatrix) {
    let mut d00 = ops.l0.left(rho00) + ops.l0.right_dagger(rho00);
    if ops.t0 != 0.0 {
        d00 = d00 + b.dot(&rho11.dot(bd)) * ops.t0;
    }
    let mut d11 = ops.l1.left(rho11) + ops.l1.right_dagger(rho11);
    if ops.t1 != 0.0 {
        d11 = d11 + bd.dot(&rho00.dot(b)) * ops.t1;
    }
    let mut d01 = ops.m0.left(rho01) + ops.m1.right_dagger(rho01);
    if ops.x != czero() {
        d01 = d01 + b.dot(&rho10.dot(b)) * ops.x;
    }
    let d10 = if with_d10 {
        let mut d = ops.m1.left(rho10) + ops.m0.right_dagger(rho10);
        if ops.x != czero() {
            d = d + bd.dot(&rho01.dot(bd)) * ops.x.conj();
        }
        Some(d * g)
    } else {
        None
    };
    (d00 * g, d01 * g, d10, d11 * g)
}

fn markovian_ops(c0: MarkovConstants, convention: DriftConvention, vsq: [Op; 2]) -> DissipatorOps {
    let [v0, v1] = vsq;
    let scale = |op: &Op, s: Complex64| match op {
        Op::Scalar(a) => Op::Scalar(a * s),
        Op::Matrix(a) => Op::Matrix(a * s),
    };
    match convention {
        DriftConvention::TracePreserving => {
            let km = convention.drift(c0.minus);
            let kp = convention.drift(c0.plus);
            DissipatorOps {
                l0: scale(&v0, km),
                l1: scale(&v1, kp),
                m0: scale(&v0, km),
                m1: scale(&v1, kp),
                t0: c0.plus.re,
                t1: c0.minus.re,
                x: czero(),
            }
        }
        DriftConvention::Printed => {
            let c = 0.5 * (c0.plus.norm() + c0.minus.norm());
            let half = Complex64::new(0.5 * c, 0.0);
            let quarter = Complex64::new(0.25 * c, 0.0);
            DissipatorOps {
                l0: scale(&v0, half),
                l1: scale(&v1, half),
                m0: scale(&v0, quarter),
                m1: scale(&v1, quarter),
                t0: -c,
                t1: -c,
                x: Complex64::new(0.5 * c, 0.0),
            }
        }
    }
}

/// Right-hand side of the Markovian QME in the position basis.
///
/// With `TracePreserving` this is the Lindblad equation with jump operators
/// `V d` and `V d†`; with `Printed` it is the explicit block matrix
/// `g |V|² [[c(ρ00−ρ11), c/2(ρ01+ρ10)], [c/2(ρ01+ρ10), c(ρ11−ρ00)]]`
/// (`c = |c0|`, so `c = 2` gives the integer coefficients), with `|V|²`
/// realised as `(V²ρ + ρV²)/2` on same-block terms and `VρV` across blocks.
#[allow(clippy::too_many_arguments)]
pub fn qme_rhs_markovian(
    rho: &BlockDensityMatrix,
    h0: &Array2<f64>,
    h1: &Array2<f64>,
    v: &[f64],
    epsilon: f64,
    lambda: f64,
    c0: MarkovConstants,
    convention: DriftConvention,
) -> Result<BlockDensityMatrix> {
    let m = v.len();
    rho.check_dims(m)?;
    for h in [h0, h1] {
        if h.nrows() != m || h.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: h.nrows(),
            });
        }
    }
    let h0c = h0.mapv(|x| Complex64::new(x, 0.0));
    let h1c = h1.mapv(|x| Complex64::new(x, 0.0));
    let vd = CMatrix::from_shape_fn((m, m), |(j, l)| if j == l { Complex64::new(v[j], 0.0) } else { czero() });
    let vsq = vd.dot(&vd);
    let ops = markovian_ops(c0, convention, [Op::Matrix(vsq.clone()), Op::Matrix(vsq)]);
    let g = (lambda / epsilon).powi(2);
    let (d00, d01, d10, d11) = apply_template(&ops, &vd, &vd, g, &rho.rho00, &rho.rho01, &rho.rho10, &rho.rho11, true);
    let mi = Complex64::new(0.0, -1.0 / epsilon);
    let comm = |hl: &CMatrix, r: &CMatrix, hr: &CMatrix| (hl.dot(r) - r.dot(hr)) * mi;
    Ok(BlockDensityMatrix {
        rho00: comm(&h0c, &rho.rho00, &h0c) + d00,
        rho01: comm(&h0c, &rho.rho01, &h1c) + d01,
        rho10: comm(&h1c, &rho.rho10, &h0c) + d10.expect("requested"),
        rho11: comm(&h1c, &rho.rho11, &h1c) + d11,
        dx: rho.dx,
        time: rho.time,
    })
}

/// Spectral data of the two level Hamiltonians and the coupling.
#[derive(Clone, Debug)]
pub struct QmeSystem {
    epsilon: f64,
    dx: f64,
    v: Vec<f64>,
    uniform_v: Option<f64>,
    energies: [Vec<f64>; 2],
    /// Orthonormal eigenvectors (columns) of `h0`, `h1`.
    modes: [CMatrix; 2],
    /// `Φ0† V Φ1` and its adjoint.
    b: CMatrix,
    bd: CMatrix,
    /// `Φi† V² Φi`, absent when `V` is uniform.
    vsq: Option<[CMatrix; 2]>,
}

impl QmeSystem {
    pub fn new(grid: &SpatialGrid, potentials: &PotentialPair, coupling: &[f64], epsilon: f64) -> Result<Self> {
        let m = grid.len();
        if m > MAX_DENSE_GRID {
            return Err(Error::InvalidParameter(format!(
                "dense QME needs m <= {MAX_DENSE_GRID} (got {m})"
            )));
        }
        if coupling.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: coupling.len(),
            });
        }
        let mut energies: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut modes: [CMatrix; 2] = [CMatrix::zeros((0, 0)), CMatrix::zeros((0, 0))];
        for level in 0..2 {
            // The Hermitian solver is used even though h is real: the real
            // symmetric LAPACK path returns non-orthogonal vectors for some
            // near-degenerate spectra.
            let h = hamiltonian_matrix(grid, potentials.level(level), epsilon)?.mapv(|x| Complex64::new(x, 0.0));
            let (e, phi) = h.eigh(UPLO::Lower)?;
            energies[level] = e.to_vec();
            modes[level] = phi;
        }
        let uniform_v = if coupling.windows(2).all(|w| w[0] == w[1]) {
            Some(coupling[0])
        } else {
            None
        };
        let vphi1 = CMatrix::from_shape_fn((m, m), |(j, n)| modes[1][[j, n]] * coupling[j]);
        let b = dagger(&modes[0]).dot(&vphi1);
        let bd = dagger(&b);
        let vsq = if uniform_v.is_some() {
            None
        } else {
            let proj = |phi: &CMatrix| {
                let w = CMatrix::from_shape_fn((m, m), |(j, n)| phi[[j, n]] * (coupling[j] * coupling[j]));
                dagger(phi).dot(&w)
            };
            Some([proj(&modes[0]), proj(&modes[1])])
        };
        Ok(QmeSystem {
            epsilon,
            dx: grid.dx(),
            v: coupling.to_vec(),
            uniform_v,
            energies,
            modes,
            b,
            bd,
            vsq,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn energies(&self, level: usize) -> &[f64] {
        &self.energies[level]
    }

    pub fn modes(&self, level: usize) -> &CMatrix {
        &self.modes[level]
    }

    fn vsq_ops(&self) -> [Op; 2] {
        match (&self.vsq, self.uniform_v) {
            (_, Some(v)) => [Op::Scalar(Complex64::new(v * v, 0.0)), Op::Scalar(Complex64::new(v * v, 0.0))],
            (Some([a, b]), None) => [Op::Matrix(a.clone()), Op::Matrix(b.clone())],
            (None, None) => unreachable!("non-uniform coupling always carries V² blocks"),
        }
    }

    fn to_eigen(&self, rho: &BlockDensityMatrix) -> [CMatrix; 3] {
        let [p0, p1] = &self.modes;
        let t = |pl: &CMatrix, r: &CMatrix, pr: &CMatrix| dagger(pl).dot(r).dot(pr);
        [
            t(p0, &rho.rho00, p0),
            t(p0, &rho.rho01, p1),
            t(p1, &rho.rho11, p1),
        ]
    }

    fn from_eigen(&self, blocks: &[CMatrix; 3], time: f64) -> BlockDensityMatrix {
        let [p0, p1] = &self.modes;
        let t = |pl: &CMatrix, r: &CMatrix, pr: &CMatrix| pl.dot(r).dot(&dagger(pr));
        let rho01 = t(p0, &blocks[1], p1);
        BlockDensityMatrix {
            rho00: t(p0, &blocks[0], p0),
            rho10: dagger(&rho01),
            rho01,
            rho11: t(p1, &blocks[2], p1),
            dx: self.dx,
            time,
        }
    }
}

/// Integration horizon of the dissipator coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

/// `Λ∓ = ∫₀^T c∓(τ) V e^{-i h_{1,0} τ/ε} V dτ` in the position basis, plus the
/// scalar horizon integrals `γ± = ∫₀^T c±(τ) dτ` used for the transfer terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DissipatorCoefficients {
    pub lambda_plus: CMatrix,
    pub lambda_minus: CMatrix,
    pub gamma_plus: Complex64,
    pub gamma_minus: Complex64,
    pub horizon: Horizon,
}

/// `∫₀^T e^{-iωτ} dτ`.
fn finite_fourier(omega: f64, t: f64) -> Complex64 {
    let x = omega * t;
    if x.abs() < 1e-4 {
        // Taylor series of (1 - e^{-ix}) / (iω).
        Complex64::new(t * (1.0 - x * x / 6.0), -t * x / 2.0 * (1.0 - x * x / 12.0))
    } else {
        (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -x)) / Complex64::new(0.0, omega)
    }
}

/// Gauss-Legendre nodes on the band, split at `μ` when it lies inside.
fn band_rule(spec: &BathSpec, n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n + 2);
    let mut panel = |a: f64, b: f64, k: usize| {
        let gl = GaussLegendre::new(k.max(2).try_into().expect("k >= 2")).expect("positive degree");
        let (h, c) = (0.5 * (b - a), 0.5 * (a + b));
        for (x, w) in gl.iter() {
            out.push((c + h * x, h * w));
        }
    };
    let (a, b) = (spec.e_minus, spec.e_plus);
    if spec.beta > 0.0 && spec.mu > a && spec.mu < b {
        let left = (((n as f64) * (spec.mu - a) / (b - a)).round() as usize).clamp(2, n.max(4) - 2);
        panel(a, spec.mu, left);
        panel(spec.mu, b, n.max(4) - left);
    } else {
        panel(a, b, n);
    }
    out
}

/// `∫₀^T c_s(τ) e^{-iEτ/ε} dτ` for every `E` in `energies`.
pub fn horizon_integrals(spec: &BathSpec, branch: Branch, energies: &[f64], horizon: Horizon) -> Result<Vec<Complex64>> {
    spec.validate()?;
    let s = branch.sign();
    let eps = spec.epsilon;
    match horizon {
        Horizon::Finite(t) => {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::InvalidParameter(format!("horizon must be finite and >= 0 (got {t})")));
            }
            if t == 0.0 {
                return Ok(vec![czero(); energies.len()]);
            }
            let n = spec.quadrature_points.max(spec.oscillation_nodes(t));
            let rule = band_rule(spec, n);
            Ok(energies
                .iter()
                .map(|&e| {
                    rule.iter()
                        .map(|&(ep, w)| finite_fourier((s * ep + e) / eps, t) * (w * spec.fermi_weight(branch, ep)))
                        .sum()
                })
                .collect())
        }
        Horizon::Infinite => {
            let rule = band_rule(spec, spec.quadrature_points);
            let (lo, hi) = (spec.e_minus, spec.e_plus);
            let edge_tol = 1e-9 * spec.bandwidth();
            energies
                .iter()
                .map(|&e| {
                    // Pole of 1/(sE' + E) at E' = a.
                    let a = -s * e;
                    if (a - lo).abs() < edge_tol || (a - hi).abs() < edge_tol {
                        return Err(Error::HorizonNotConverged(format!(
                            "resonance at band edge (E = {e})"
                        )));
                    }
                    let wa = spec.fermi_weight(branch, a);
                    let pv: f64 = rule
                        .iter()
                        .map(|&(ep, w)| {
                            let d = ep - a;
                            if d == 0.0 {
                                0.0
                            } else {
                                w * (spec.fermi_weight(branch, ep) - wa) / d
                            }
                        })
                        .sum::<f64>()
                        + wa * ((hi - a) / (lo - a)).abs().ln();
                    let delta = if a > lo && a < hi { PI * eps * wa } else { 0.0 };
                    Ok(Complex64::new(delta, -eps * s * pv))
                })
                .collect()
        }
    }
}

/// `Λ = V Φ diag(∫₀^T c(τ) e^{-iE_nτ/ε} dτ) Φ† V` for both branches:
/// `Λ-` uses `h1`, `Λ+` uses `h0`.
pub fn dissipator_coefficients(spec: &BathSpec, system: &QmeSystem, horizon: Horizon) -> Result<DissipatorCoefficients> {
    let m = system.dim();
    let build = |branch: Branch, level: usize| -> Result<CMatrix> {
        let g = horizon_integrals(spec, branch, &system.energies[level], horizon)?;
        let phi = &system.modes[level];
        let scaled = CMatrix::from_shape_fn((m, m), |(j, n)| phi[[j, n]] * g[n] * system.v[j]);
        let right = CMatrix::from_shape_fn((m, m), |(n, l)| phi[[l, n]].conj() * system.v[l]);
        Ok(scaled.dot(&right))
    };
    let gamma = |branch: Branch| -> Result<Complex64> { Ok(horizon_integrals(spec, branch, &[0.0], horizon)?[0]) };
    Ok(DissipatorCoefficients {
        lambda_minus: build(Branch::Minus, 1)?,
        lambda_plus: build(Branch::Plus, 0)?,
        gamma_plus: gamma(Branch::Plus)?,
        gamma_minus: gamma(Branch::Minus)?,
        horizon,
    })
}

impl DissipatorCoefficients {
    /// Delta-kernel collapse `c±(τ) = c0± δ(τ)`. The trace-preserving
    /// convention counts the delta at the origin with weight ½ (so the
    /// generator matches the Markovian SSE with drift `−c0/2`); the printed
    /// convention uses full weight.
    pub fn delta(c0: MarkovConstants, coupling: &[f64], convention: DriftConvention) -> Self {
        let w = match convention {
            DriftConvention::TracePreserving => 0.5,
            DriftConvention::Printed => 1.0,
        };
        let m = coupling.len();
        let diag = |c: Complex64| {
            CMatrix::from_shape_fn((m, m), |(j, l)| if j == l { c * (w * coupling[j] * coupling[j]) } else { czero() })
        };
        DissipatorCoefficients {
            lambda_plus: diag(c0.plus),
            lambda_minus: diag(c0.minus),
            gamma_plus: c0.plus * w,
            gamma_minus: c0.minus * w,
            horizon: Horizon::Finite(0.0),
        }
    }
}

/// Which dissipator drives [`integrate_qme`].
#[derive(Clone, Debug, PartialEq)]
pub enum QmeDissipator {
    /// Constant Markovian rates from `c0±`.
    Markovian {
        c0: MarkovConstants,
        convention: DriftConvention,
    },
    /// Finite-history coefficients with horizon `t` (start time 0).
    FiniteHistory { bath: BathSpec },
    /// Infinite-horizon (Redfield) coefficients.
    Redfield { bath: BathSpec },
}

/// Eigenbasis operators for the coefficient-based generators, `Λ̂` in the
/// basis of the level it acts on: `Λ̂- = B diag(g-) B†`, `Λ̂+ = B† diag(g+) B`.
fn coefficient_ops(system: &QmeSystem, spec: &BathSpec, horizon: Horizon) -> Result<DissipatorOps> {
    let m = system.dim();
    let gm = horizon_integrals(spec, Branch::Minus, &system.energies[1], horizon)?;
    let gp = horizon_integrals(spec, Branch::Plus, &system.energies[0], horizon)?;
    let scaled_cols = |a: &CMatrix, g: &[Complex64]| CMatrix::from_shape_fn((m, m), |(j, n)| a[[j, n]] * g[n]);
    let lm = scaled_cols(&system.b, &gm).dot(&system.bd);
    let lp = scaled_cols(&system.bd, &gp).dot(&system.b);
    let gamma_p = horizon_integrals(spec, Branch::Plus, &[0.0], horizon)?[0];
    let gamma_m = horizon_integrals(spec, Branch::Minus, &[0.0], horizon)?[0];
    let sigma = DriftConvention::TracePreserving.memory_sign();
    Ok(DissipatorOps {
        l0: Op::Matrix(&lm * sigma),
        l1: Op::Matrix(&lp * sigma),
        m0: Op::Matrix(lm * sigma),
        m1: Op::Matrix(lp * sigma),
        t0: 2.0 * gamma_p.re,
        t1: 2.0 * gamma_m.re,
        x: czero(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QmeSeries {
    pub times: Vec<f64>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub trace: Vec<f64>,
    pub purity: Vec<f64>,
    pub final_state: BlockDensityMatrix,
}

impl QmeSeries {
    /// CSV columns `t,P0,P1,trace,purity`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "t,P0,P1,trace,purity")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.times[i], self.p0[i], self.p1[i], self.trace[i], self.purity[i]
            )?;
        }
        Ok(())
    }
}

/// Step count for `t_end / dt`, which must be (nearly) an integer.
pub fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be positive (got {dt})")));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidParameter(format!("final time must be >= 0 (got {t_end})")));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(Error::InvalidParameter(format!(
            "final time {t_end} is not a multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

struct Integrator<'a> {
    system: &'a QmeSystem,
    g: f64,
    kind: &'a QmeDissipator,
    constant_ops: Option<DissipatorOps>,
}

impl Integrator<'_> {
    fn ops_at(&self, t: f64) -> Result<DissipatorOps> {
        if let Some(ops) = &self.constant_ops {
            return Ok(ops.clone());
        }
        match self.kind {
            QmeDissipator::FiniteHistory { bath } => coefficient_ops(self.system, bath, Horizon::Finite(t)),
            _ => unreachable!("constant generators are cached"),
        }
    }

    /// Interaction-picture phases `e^{iE t/ε}` of both levels.
    fn phases(&self, t: f64) -> [Vec<Complex64>; 2] {
        let eps = self.system.epsilon;
        [0, 1].map(|l| {
            self.system.energies[l]
                .iter()
                .map(|&e| Complex64::from_polar(1.0, e * t / eps))
                .collect()
        })
    }

    /// `dy/dt` for the interaction-picture blocks `(y00, y01, y11)`.
    fn rhs(&self, t: f64, ops: &DissipatorOps, y: &[CMatrix; 3]) -> [CMatrix; 3] {
        if self.g == 0.0 {
            return [0, 1, 2].map(|k| CMatrix::zeros(y[k].raw_dim()));
        }
        let ph = self.phases(t);
        let pairs = [(0usize, 0usize), (0, 1), (1, 1)];
        // ρ̂_ij[a,b] = e^{-i(E_i,a − E_j,b)t/ε} y_ij[a,b]
        let rho: Vec<CMatrix> = pairs
            .iter()
            .zip(y)
            .map(|(&(i, j), yb)| {
                let mut r = yb.clone();
                Zip::indexed(&mut r).for_each(|(a, b), z| *z *= ph[i][a].conj() * ph[j][b]);
                r
            })
            .collect();
        let rho10 = dagger(&rho[1]);
        let (d00, d01, _, d11) = apply_template(
            ops,
            &self.system.b,
            &self.system.bd,
            self.g,
            &rho[0],
            &rho[1],
            &rho10,
            &rho[2],
            false,
        );
        let mut out = [d00, d01, d11];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            Zip::indexed(&mut out[k]).for_each(|(a, b), z| *z *= ph[i][a] * ph[j][b].conj());
        }
        out
    }
}

fn axpy(y: &[CMatrix; 3], k: &[CMatrix; 3], h: f64) -> [CMatrix; 3] {
    [0, 1, 2].map(|i| &y[i] + &(&k[i] * h))
}

/// Classical RK4 for the QME in the interaction picture of `h0 ⊕ h1`.
/// Returns populations, trace and purity at [`sample_steps`] and the final
/// density matrix.
pub fn integrate_qme(
    system: &QmeSystem,
    dissipator: &QmeDissipator,
    lambda: f64,
    rho0: &BlockDensityMatrix,
    dt: f64,
    t_end: f64,
    sample_stride: usize,
) -> Result<QmeSeries> {
    rho0.check_dims(system.dim())?;
    let n_steps = step_count(t_end, dt)?;
    let g = (lambda / system.epsilon).powi(2);
    let constant_ops = match dissipator {
        QmeDissipator::Markovian { c0, convention } => Some(markovian_ops(*c0, *convention, system.vsq_ops())),
        QmeDissipator::Redfield { bath } => Some(coefficient_ops(system, bath, Horizon::Infinite)?),
        QmeDissipator::FiniteHistory { .. } => None,
    };
    let integ = Integrator {
        system,
        g,
        kind: dissipator,
        constant_ops,
    };
    let mut start = rho0.clone();
    start.symmetrize();
    let t0 = 0.0;
    let mut y = system.to_eigen(&start);
    let dxx = system.dx;
    let mut series = QmeSeries {
        times: Vec::new(),
        p0: Vec::new(),
        p1: Vec::new(),
        trace: Vec::new(),
        purity: Vec::new(),
        final_state: start.clone(),
    };
    let mut record = |y: &[CMatrix; 3], t: f64| {
        let p0 = dxx * y[0].diag().iter().map(|z| z.re).sum::<f64>();
        let p1 = dxx * y[2].diag().iter().map(|z| z.re).sum::<f64>();
        let fro = |a: &CMatrix| a.iter().map(|z| z.norm_sqr()).sum::<f64>();
        series.times.push(t);
        series.p0.push(p0);
        series.p1.push(p1);
        series.trace.push(p0 + p1);
        series.purity.push(dxx * dxx * (fro(&y[0]) + 2.0 * fro(&y[1]) + fro(&y[2])));
    };
    record(&y, t0);
    let stride = sample_stride.max(1);
    let mut ops_start = integ.ops_at(t0)?;
    for n in 0..n_steps {
        let t = t0 + n as f64 * dt;
        let ops_mid = integ.ops_at(t + 0.5 * dt)?;
        let ops_end = integ.ops_at(t + dt)?;
        let k1 = integ.rhs(t, &ops_start, &y);
        let k2 = integ.rhs(t + 0.5 * dt, &ops_mid, &axpy(&y, &k1, 0.5 * dt));
        let k3 = integ.rhs(t + 0.5 * dt, &ops_mid, &axpy(&y, &k2, 0.5 * dt));
        let k4 = integ.rhs(t + dt, &ops_end, &axpy(&y, &k3, dt));
        for i in 0..3 {
            y[i] = &y[i] + &((&k1[i] + &(&k2[i] * 2.0) + &(&k3[i] * 2.0) + &k4[i]) * (dt / 6.0));
        }
        hermitize(&mut y[0]);
        hermitize(&mut y[2]);
        if !y.iter().all(|b| b.iter().all(|z| z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NumericalBlowup { step: n + 1 });
        }
        ops_start = ops_end;
        if (n + 1) % stride == 0 || n + 1 == n_steps {
            record(&y, t + dt);
        }
    }
    let t_final = t0 + n_steps as f64 * dt;
    // Back to the Schrödinger picture and the position basis.
    let ph = integ.phases(t_final);
    let pairs = [(0usize, 0usize), (0, 1), (1, 1)];
    let mut blocks = y;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        Zip::indexed(&mut blocks[k]).for_each(|(a, b), z| *z *= ph[i][a].conj() * ph[j][b]);
    }
    series.final_state = system.from_eigen(&blocks, t_final);
    debug_assert_eq!(series.times.len(), sample_steps(n_steps, stride).len());
    Ok(series)
}

/// Ensemble density matrices from trajectory states at a common time:
/// the average of `|Ψ⟩⟨Ψ|` (unnormalized) and of `|Ψ⟩⟨Ψ|/⟨Ψ|Ψ⟩`.
pub fn ensemble_density(states: &[SpinorState], dx: f64) -> Result<(BlockDensityMatrix, BlockDensityMatrix)> {
    let first = states.first().ok_or(Error::EmptyInput("trajectory states"))?;
    let m = first.len();
    let mut raw = BlockDensityMatrix::zeros(m, dx);
    let mut normed = BlockDensityMatrix::zeros(m, dx);
    raw.time = first.time;
    normed.time = first.time;
    let inv = 1.0 / states.len() as f64;
    for s in states {
        if s.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: s.len(),
            });
        }
        let p = BlockDensityMatrix::pure(s, dx);
        let n = s.total_norm(dx);
        if !(n > 0.0) {
            return Err(Error::ZeroNorm);
        }
        for (acc, (accn, b)) in [&mut raw.rho00, &mut raw.rho01, &mut raw.rho10, &mut raw.rho11]
            .into_iter()
            .zip([&mut normed.rho00, &mut normed.rho01, &mut normed.rho10, &mut normed.rho11].into_iter().zip([
                &p.rho00, &p.rho01, &p.rho10, &p.rho11,
            ]))
        {
            acc.scaled_add(Complex64::new(inv, 0.0), b);
            accn.scaled_add(Complex64::new(inv / n, 0.0), b);
        }
    }
    Ok((raw, normed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gaussian_packet, PotentialSpec};

    fn small_system(m: usize, v: impl Fn(f64) -> f64) -> (SpatialGrid, QmeSystem) {
        let grid = SpatialGrid::new(-3.0, 3.0, m).unwrap();
        let pots = PotentialPair::from_spec(&grid, &PotentialSpec::holstein(0.3, 0.2)).unwrap();
        let coupling: Vec<f64> = grid.points().iter().map(|&x| v(x)).collect();
        let sys = QmeSystem::new(&grid, &pots, &coupling, 0.5).unwrap();
        (grid, sys)
    }

    #[test]
    fn hamiltonian_is_symmetric_and_matches_fft_kinetic() {
        let grid = SpatialGrid::new(-2.0, 2.0, 16).unwrap();
        let h = hamiltonian_matrix(&grid, &vec![0.0; 16], 0.5).unwrap();
        for j in 0..16 {
            for l in 0..16 {
                assert!((h[[j, l]] - h[[l, j]]).abs() < 1e-12);
            }
        }
        // A plane wave e^{iμx} is an eigenvector with eigenvalue ε²μ²/2.
        let mu = grid.wavenumbers()[3];
        let psi: Vec<Complex64> = grid.points().iter().map(|&x| Complex64::from_polar(1.0, mu * x)).collect();
        for j in 0..16 {
            let hp: Complex64 = (0..16).map(|l| psi[l] * h[[j, l]]).sum();
            assert!((hp - psi[j] * (0.125 * mu * mu)).norm() < 1e-12);
        }
    }

    #[test]
    fn markovian_dissipator_conserves_trace() {
        let (grid, sys) = small_system(8, |x| 1.0 + 0.3 * x);
        let mut st = SpinorState::neutral(grid.points().iter().map(|&x| Complex64::new((-x * x).exp(), 0.2 * x)).collect());
        st.psi1 = st.psi0.iter().map(|z| z * Complex64::new(0.3, -0.4)).collect();
        let rho = BlockDensityMatrix::pure(&st, grid.dx());
        let zero = Array2::<f64>::zeros((8, 8));
        for conv in [DriftConvention::TracePreserving, DriftConvention::Printed] {
            let d = qme_rhs_markovian(&rho, &zero, &zero, &sys.v, 0.5, 0.5, MarkovConstants::real(2.0, 2.0), conv).unwrap();
            assert!(d.trace().abs() < 1e-12, "{conv:?}: {}", d.trace());
        }
    }

    #[test]
    fn printed_dissipator_fixed_point() {
        let m = 8;
        let mut rho = BlockDensityMatrix::zeros(m, 0.1);
        for j in 0..m {
            for l in 0..m {
                let z = Complex64::new((j + l) as f64 * 0.1, (j as f64 - l as f64) * 0.05);
                rho.rho00[[j, l]] = z;
                rho.rho11[[j, l]] = z;
                rho.rho01[[j, l]] = Complex64::new(0.3 * j as f64, 0.1 * l as f64);
                rho.rho10[[j, l]] = -rho.rho01[[j, l]];
            }
        }
        let zero = Array2::<f64>::zeros((m, m));
        let v = vec![1.0; m];
        let d = qme_rhs_markovian(&rho, &zero, &zero, &v, 1.0, 1.0, MarkovConstants::real(2.0, 2.0), DriftConvention::Printed)
            .unwrap();
        assert!(d.rho00.iter().all(|z| z.norm() < 1e-14));
        assert!(d.rho11.iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn zero_horizon_gives_zero_coefficients() {
        let (_, sys) = small_system(8, |_| 1.0);
        let bath = BathSpec::new(1.0, -2.0, 2.0, 0.5).unwrap();
        let c = dissipator_coefficients(&bath, &sys, Horizon::Finite(0.0)).unwrap();
        assert!(c.lambda_plus.iter().all(|z| *z == czero()));
        assert!(c.lambda_minus.iter().all(|z| *z == czero()));
    }

    #[test]
    fn delta_collapse_weights() {
        let v = vec![2.0, 1.0];
        let c0 = MarkovConstants::real(3.0, 3.0);
        let full = DissipatorCoefficients::delta(c0, &v, DriftConvention::Printed);
        assert_eq!(full.lambda_plus[[0, 0]], Complex64::new(12.0, 0.0));
        let half = DissipatorCoefficients::delta(c0, &v, DriftConvention::TracePreserving);
        assert_eq!(half.lambda_minus[[1, 1]], Complex64::new(1.5, 0.0));
    }

    #[test]
    fn zero_final_time_returns_initial_state() {
        let (grid, sys) = small_system(8, |_| 1.0);
        let st = SpinorState::neutral(vec![Complex64::new(0.5, 0.0); 8]);
        let rho = BlockDensityMatrix::pure(&st, grid.dx());
        let diss = QmeDissipator::Markovian {
            c0: MarkovConstants::real(2.0, 2.0),
            convention: DriftConvention::TracePreserving,
        };
        let s = integrate_qme(&sys, &diss, 0.1, &rho, 0.1, 0.0, 1).unwrap();
        assert_eq!(s.times, vec![0.0]);
        let err = (&s.final_state.rho00 - &rho.rho00).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(err < 1e-12);
    }

    #[test]
    fn ensemble_density_purity() {
        let grid = SpatialGrid::new(-4.0, 4.0, 64).unwrap();
        let a = gaussian_packet(&grid, -1.0, 0.0, 0.1).unwrap();
        let (raw, _) = ensemble_density(&[a.clone()], grid.dx()).unwrap();
        assert!((raw.purity() - 1.0).abs() < 1e-10);
        assert!((raw.trace() - 1.0).abs() < 1e-10);
        // Orthogonal partner: the same packet on the other level.
        let b = SpinorState::new(vec![czero(); 64], a.psi0.clone()).unwrap();
        let (raw, _) = ensemble_density(&[a, b], grid.dx()).unwrap();
        assert!((raw.purity() - 0.5).abs() < 1e-10);
        assert!(ensemble_density(&[], 0.1).is_err());
    }

    #[test]
    fn step_count_rules() {
        assert_eq!(step_count(1.0, 0.1).unwrap(), 10);
        assert_eq!(step_count(0.0, 0.1).unwrap(), 0);
        assert!(step_count(1.05, 0.1).is_err());
        assert!(step_count(1.0, 0.0).is_err());
    }
}
