//! Wide-band fermionic bath: Fermi weights, band correlation functions
//! `c±(τ)`, their discrete counterparts `C_k±(τ)`, Markovian constants and
//! the noise covariance kernels `K±(s, t) = ∫₀ˢ∫₀ᵗ c±(τ1 − τ2)`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gauss_quad::GaussLegendre;
use ndarray::Array2;
use ndarray_linalg::{Cholesky, EigValsh, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUADRATURE_POINTS: usize = 400;

/// Relative tolerance for negative eigenvalues of covariance kernels.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Relative tolerance used by the uniform-grid checks.
const GRID_TOLERANCE: f64 = 1e-9;

/// Absolute band-integral error (per unit bandwidth) accepted by
/// [`c_continuous`].
const QUADRATURE_TOLERANCE: f64 = 1e-11;

const MAX_REFINEMENTS: usize = 6;

/// Which of the two bath correlation functions is meant.
///
/// `Plus` carries `e^{-iEτ/ε}` with weight `w+`, `Minus` carries `e^{+iEτ/ε}`
/// with weight `w-`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    pub fn opposite(self) -> Branch {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }
}

fn default_quadrature_points() -> usize {
    DEFAULT_QUADRATURE_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    pub beta: f64,
    pub e_minus: f64,
    #[serde(alias = "e_maximum")]
    pub e_plus: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_quadrature_points")]
    pub quadrature_points: usize,
}

impl BathSpec {
    pub fn new(beta: f64, e_minus: f64, e_plus: f64, epsilon: f64) -> Result<Self> {
        let spec = BathSpec {
            beta,
            e_minus,
            e_plus,
            epsilon,
            mu: 0.0,
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_quadrature_points(mut self, n: usize) -> Self {
        self.quadrature_points = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.e_minus, self.e_plus, self.epsilon, self.mu]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(
                "bath parameters must be finite".into(),
            ));
        }
        if self.e_minus >= self.e_plus {
            return Err(Error::InvalidParameter(format!(
                "band edges must satisfy e_minus < e_plus (got {} and {})",
                self.e_minus, self.e_plus
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta must be non-negative (got {})",
                self.beta
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive (got {})",
                self.epsilon
            )));
        }
        if self.quadrature_points < 2 {
            return Err(Error::InvalidParameter(format!(
                "quadrature_points must be at least 2 (got {})",
                self.quadrature_points
            )));
        }
        Ok(())
    }

    pub fn bandwidth(&self) -> f64 {
        self.e_plus - self.e_minus
    }

    /// Node count needed to resolve the phase `e^{∓iEτ/ε}` across the band.
    pub fn oscillation_nodes(&self, tau: f64) -> usize {
        (10.0 * self.bandwidth() * tau.abs() / (2.0 * PI * self.epsilon)).ceil() as usize
    }

    pub fn fermi_weight(&self, branch: Branch, energy: f64) -> f64 {
        match branch {
            Branch::Plus => fermi_weight_plus(energy, self.beta, self.mu),
            Branch::Minus => fermi_weight_minus(energy, self.beta, self.mu),
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-β(E - μ)))`.
pub fn fermi_weight_plus(energy: f64, beta: f64, mu: f64) -> f64 {
    logistic(beta * (energy - mu))
}

/// `1 / (1 + exp(β(E - μ)))`.
pub fn fermi_weight_minus(energy: f64, beta: f64, mu: f64) -> f64 {
    logistic(-beta * (energy - mu))
}

/// Gauss-Legendre nodes on the band with the Fermi weight folded into the
/// quadrature weights. The band is split at `μ` so the Fermi step never sits
/// inside a panel.
#[derive(Clone, Debug)]
struct EnergyRule {
    energies: Vec<f64>,
    weights: Vec<f64>,
}

impl EnergyRule {
    fn new(spec: &BathSpec, branch: Branch, n: usize) -> Self {
        let (a, b) = (spec.e_minus, spec.e_plus);
        let mut rule = EnergyRule {
            energies: Vec::with_capacity(n + 2),
            weights: Vec::with_capacity(n + 2),
        };
        if spec.beta > 0.0 && spec.mu > a && spec.mu < b {
            let left = ((n as f64) * (spec.mu - a) / (b - a)).round() as usize;
            let left = left.clamp(2, n.max(4) - 2);
            rule.push_panel(spec, branch, a, spec.mu, left);
            rule.push_panel(spec, branch, spec.mu, b, n.max(4) - left);
        } else {
            rule.push_panel(spec, branch, a, b, n);
        }
        rule
    }

    fn push_panel(&mut self, spec: &BathSpec, branch: Branch, a: f64, b: f64, n: usize) {
        let gl = GaussLegendre::new(n.max(2).try_into().expect("n >= 2"))
            .expect("Gauss-Legendre rule of positive degree");
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in gl.iter() {
            let e = mid + half * x;
            self.energies.push(e);
            self.weights.push(half * w * spec.fermi_weight(branch, e));
        }
    }

    fn integrate(&self, branch: Branch, tau: f64, epsilon: f64) -> Complex64 {
        let scale = -branch.sign() * tau / epsilon;
        let (mut re, mut im) = (0.0, 0.0);
        for (&e, &w) in self.energies.iter().zip(&self.weights) {
            let (s, c) = (e * scale).sin_cos();
            re += w * c;
            im += w * s;
        }
        Complex64::new(re, im)
    }
}

/// Checked evaluation of `c±(τ) = ∫ w±(E) e^{∓iEτ/ε} dE`.
///
/// The node count starts at `max(quadrature_points, oscillation guard)` and is
/// doubled until two successive rules agree.
pub fn c_continuous(branch: Branch, tau: f64, spec: &BathSpec) -> Result<Complex64> {
    spec.validate()?;
    if !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be finite (got {tau})")));
    }
    let tol = QUADRATURE_TOLERANCE * spec.bandwidth().max(1.0);
    let mut n = spec.quadrature_points.max(spec.oscillation_nodes(tau));
    let mut coarse = EnergyRule::new(spec, branch, n).integrate(branch, tau, spec.epsilon);
    let mut estimate = f64::INFINITY;
    for _ in 0..MAX_REFINEMENTS {
        n *= 2;
        let fine = EnergyRule::new(spec, branch, n).integrate(branch, tau, spec.epsilon);
        estimate = (fine - coarse).norm();
        if estimate <= tol {
            return Ok(fine);
        }
        coarse = fine;
    }
    Err(Error::InsufficientQuadrature { tau, estimate })
}

/// Fast evaluator of one branch with a reusable base rule. The oscillation
/// guard still applies: large `|τ|` get a larger ad hoc rule.
#[derive(Clone, Debug)]
pub struct BandKernel {
    spec: BathSpec,
    branch: Branch,
    base: EnergyRule,
}

impl BandKernel {
    pub fn new(spec: &BathSpec, branch: Branch) -> Result<Self> {
        spec.validate()?;
        Ok(BandKernel {
            spec: spec.clone(),
            branch,
            base: EnergyRule::new(spec, branch, spec.quadrature_points),
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn spec(&self) -> &BathSpec {
        &self.spec
    }

    pub fn eval(&self, tau: f64) -> Complex64 {
        let needed = self.spec.oscillation_nodes(tau);
        if needed <= self.spec.quadrature_points {
            self.base.integrate(self.branch, tau, self.spec.epsilon)
        } else {
            EnergyRule::new(&self.spec, self.branch, needed).integrate(
                self.branch,
                tau,
                self.spec.epsilon,
            )
        }
    }

    /// Evaluates the kernel at every `τ` with a single rule sized for the
    /// largest `|τ|`.
    pub fn table(&self, taus: &[f64]) -> Vec<Complex64> {
        let tau_max = taus.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let needed = self.spec.oscillation_nodes(tau_max);
        let owned;
        let rule = if needed <= self.spec.quadrature_points {
            &self.base
        } else {
            owned = EnergyRule::new(&self.spec, self.branch, needed);
            &owned
        };
        taus.iter()
            .map(|&t| rule.integrate(self.branch, t, self.spec.epsilon))
            .collect()
    }
}

/// Band energy `E_k = E- + (k - 1/2) h_N` of the `N`-point equidistant grid.
pub fn band_energy(k: usize, n: usize, spec: &BathSpec) -> f64 {
    let h = spec.bandwidth() / n as f64;
    spec.e_minus + (k as f64 - 0.5) * h
}

/// Discrete correlation function `C_k±(τ) = w±(E_k) e^{∓iE_kτ/ε}`, `1 ≤ k ≤ N`.
pub fn c_discrete(branch: Branch, tau: f64, k: usize, n: usize, spec: &BathSpec) -> Result<Complex64> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "band index k = {k} outside 1..={n}"
        )));
    }
    let e = band_energy(k, n, spec);
    let phase = -branch.sign() * e * tau / spec.epsilon;
    Ok(Complex64::from_polar(spec.fermi_weight(branch, e), phase))
}

/// `h_N Σ_k C_k±(τ)`, the finite-bath approximation of `c±(τ)`.
pub fn discrete_band_sum(branch: Branch, tau: f64, n: usize, spec: &BathSpec) -> Complex64 {
    let h = spec.bandwidth() / n as f64;
    let scale = -branch.sign() * tau / spec.epsilon;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 1..=n {
        let e = band_energy(k, n, spec);
        acc += Complex64::from_polar(spec.fermi_weight(branch, e), e * scale);
    }
    acc * h
}

/// The constants `c0±` of the Markovian kernels `c±(τ) = c0± δ(τ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovConstants {
    pub plus: Complex64,
    pub minus: Complex64,
}

impl MarkovConstants {
    pub fn new(plus: Complex64, minus: Complex64) -> Self {
        MarkovConstants { plus, minus }
    }

    pub fn real(plus: f64, minus: f64) -> Self {
        Self::new(Complex64::new(plus, 0.0), Complex64::new(minus, 0.0))
    }

    pub fn get(&self, branch: Branch) -> Complex64 {
        match branch {
            Branch::Plus => self.plus,
            Branch::Minus => self.minus,
        }
    }
}

/// Markovian constants: the override when given, otherwise `2πε` for both
/// branches (the infinite-band, infinite-temperature limit).
pub fn markov_constants(spec: &BathSpec, overrides: Option<MarkovConstants>) -> MarkovConstants {
    overrides.unwrap_or_else(|| {
        let c0 = 2.0 * PI * spec.epsilon;
        MarkovConstants::real(c0, c0)
    })
}

/// `∫_{-∞}^{∞} c±(τ) dτ = 2πε w±(0)` for the finite band, zero when `E = 0`
/// lies outside it and half weight on a band edge.
pub fn delta_weight(branch: Branch, spec: &BathSpec) -> f64 {
    let full = 2.0 * PI * spec.epsilon * spec.fermi_weight(branch, 0.0);
    if spec.e_minus < 0.0 && spec.e_plus > 0.0 {
        full
    } else if spec.e_minus == 0.0 || spec.e_plus == 0.0 {
        0.5 * full
    } else {
        0.0
    }
}

/// Hermitian covariance kernel sampled on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    times: Vec<f64>,
    values: Array2<Complex64>,
}

impl KernelMatrix {
    /// Wraps a matrix after checking shape and Hermiticity (to a relative
    /// `1e-12`); the stored matrix is exactly Hermitian.
    pub fn from_values(times: Vec<f64>, values: Array2<Complex64>) -> Result<Self> {
        let n = times.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: values.nrows().max(values.ncols()),
            });
        }
        let scale = values.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((values[[i, j]] - values[[j, i]].conj()).norm());
            }
        }
        if asym > 1e-12 * scale.max(1e-300) && asym > 0.0 {
            return Err(Error::InvalidKernel(format!(
                "matrix is not Hermitian (max |K - K^H| = {asym:.3e})"
            )));
        }
        Ok(KernelMatrix {
            times,
            values: hermitian_part(values),
        })
    }

    /// `K(s, t) = intensity * min(s, t)`: the covariance of `W` for the
    /// white kernel `c(τ) = intensity * δ(τ)`.
    pub fn brownian(times: &[f64], intensity: f64) -> Result<Self> {
        check_uniform(times)?;
        let n = times.len();
        let values = Array2::from_shape_fn((n, n), |(i, j)| {
            Complex64::new(intensity * times[i].min(times[j]), 0.0)
        });
        Ok(KernelMatrix {
            times: times.to_vec(),
            values,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Time step of the uniform grid (zero for a single point).
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Row-major CSV: first column `t`, then `re_j,im_j` pairs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let n = self.len();
        let mut header = String::from("t");
        for j in 0..n {
            header.push_str(&format!(",re_{j},im_{j}"));
        }
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        for i in 0..n {
            let mut line = format!("{:.17e}", self.times[i]);
            for j in 0..n {
                let z = self.values[[i, j]];
                line.push_str(&format!(",{:.17e},{:.17e}", z.re, z.im));
            }
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn hermitian_part(mut values: Array2<Complex64>) -> Array2<Complex64> {
    let n = values.nrows();
    for i in 0..n {
        values[[i, i]] = Complex64::new(values[[i, i]].re, 0.0);
        for j in (i + 1)..n {
            let avg = 0.5 * (values[[i, j]] + values[[j, i]].conj());
            values[[i, j]] = avg;
            values[[j, i]] = avg.conj();
        }
    }
    values
}

/// Checks that `times` is uniform and starts at zero; returns the step.
pub fn check_uniform(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::EmptyInput("time grid"));
    }
    if times[0] != 0.0 {
        return Err(Error::InvalidParameter(format!(
            "time grid must start at 0 (got {})",
            times[0]
        )));
    }
    if times.len() == 1 {
        return Ok(0.0);
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter("time grid must be increasing".into()));
    }
    for (i, &t) in times.iter().enumerate() {
        let expected = i as f64 * dt;
        if (t - expected).abs() > GRID_TOLERANCE * expected.abs().max(dt) {
            return Err(Error::InvalidParameter(format!(
                "time grid is not uniform at index {i}"
            )));
        }
    }
    Ok(dt)
}

/// `K(s_i, t_j) = ∫₀^{s_i}∫₀^{t_j} c(τ1 - τ2)` by nested cumulative
/// trapezoid rules. `lags[k] = c(k dt)`; negative lags use `c(-τ) = conj c(τ)`.
pub fn covariance_from_lags(times: &[f64], lags: &[Complex64]) -> Result<KernelMatrix> {
    let dt = check_uniform(times)?;
    let n = times.len();
    if lags.len() < n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: lags.len(),
        });
    }
    let lag = |d: isize| -> Complex64 {
        if d >= 0 {
            lags[d as usize]
        } else {
            lags[(-d) as usize].conj()
        }
    };
    let half = 0.5 * dt;
    // g[a, j] = ∫₀^{t_j} c(t_a - τ2) dτ2
    let mut g = Array2::<Complex64>::zeros((n, n));
    for a in 0..n {
        for j in 1..n {
            let d = a as isize - j as isize;
            g[[a, j]] = g[[a, j - 1]] + half * (lag(d + 1) + lag(d));
        }
    }
    let mut k = Array2::<Complex64>::zeros((n, n));
    for i in 1..n {
        for j in 0..n {
            k[[i, j]] = k[[i - 1, j]] + half * (g[[i - 1, j]] + g[[i, j]]);
        }
    }
    let values = hermitian_part(k);
    check_psd(&values, PSD_TOLERANCE)?;
    Ok(KernelMatrix {
        times: times.to_vec(),
        values,
    })
}

/// Covariance kernel of `W±` for the band correlation function `c±`.
pub fn covariance_matrix(branch: Branch, times: &[f64], spec: &BathSpec) -> Result<KernelMatrix> {
    let dt = check_uniform(times)?;
    let kernel = BandKernel::new(spec, branch)?;
    let taus: Vec<f64> = (0..times.len()).map(|k| k as f64 * dt).collect();
    covariance_from_lags(times, &kernel.table(&taus))
}

/// Largest eigenvalue estimate of a Hermitian matrix by power iteration.
fn dominant_eigenvalue(m: &Array2<Complex64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(1.0 + 0.1 * ((i * 7919) % 13) as f64, 0.0))
        .collect();
    let mut estimate = 0.0;
    for _ in 0..60 {
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|z| *z /= norm);
        let w: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|j| m[[i, j]] * v[j]).sum())
            .collect();
        estimate = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>();
        v = w;
    }
    estimate
}

/// Fails with [`Error::KernelNotPsd`] if an eigenvalue lies below
/// `-tol * λ_max`.
pub fn check_psd(values: &Array2<Complex64>, tol: f64) -> Result<()> {
    let n = values.nrows();
    if n == 0 {
        return Ok(());
    }
    let diag_max = (0..n).fold(0.0f64, |m, i| m.max(values[[i, i]].re.abs()));
    let scale = dominant_eigenvalue(values).abs().max(diag_max);
    if scale == 0.0 {
        return Ok(());
    }
    let shift = tol * scale;
    let mut shifted = values.clone();
    for i in 0..n {
        shifted[[i, i]] += shift;
    }
    if shifted.cholesky(UPLO::Lower).is_ok() {
        return Ok(());
    }
    let eig = values.eigvalsh(UPLO::Lower)?;
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -shift {
        Err(Error::KernelNotPsd {
            min_eigenvalue: min,
            tolerance: shift,
        })
    } else {
        Ok(())
    }
}

/// One row of a kernel table: `(τ, c+(τ), c-(τ))`.
pub type KernelRow = (f64, Complex64, Complex64);

pub fn kernel_table(spec: &BathSpec, taus: &[f64]) -> Result<Vec<KernelRow>> {
    let plus = BandKernel::new(spec, Branch::Plus)?.table(taus);
    let minus = BandKernel::new(spec, Branch::Minus)?.table(taus);
    Ok(taus
        .iter()
        .zip(plus.into_iter().zip(minus))
        .map(|(&t, (p, m))| (t, p, m))
        .collect())
}

pub fn write_kernel_table(rows: &[KernelRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "tau,re_c_plus,im_c_plus,re_c_minus,im_c_minus")?;
    for (t, p, m) in rows {
        writeln!(
            out,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            t, p.re, p.im, m.re, m.im
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(beta: f64, e: f64, eps: f64) -> BathSpec {
        BathSpec::new(beta, -e, e, eps).unwrap()
    }

    #[test]
    fn fermi_weights_limits() {
        assert_eq!(fermi_weight_plus(0.0, 3.7, 0.0), 0.5);
        assert_eq!(fermi_weight_minus(0.0, 3.7, 0.0), 0.5);
        assert_eq!(fermi_weight_plus(-12.0, 0.0, 0.0), 0.5);
        assert_eq!(fermi_weight_minus(8.0, 0.0, 0.0), 0.5);
        assert!((fermi_weight_plus(5.0, 100.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(fermi_weight_minus(5.0, 100.0, 0.0).abs() < 1e-12);
        assert_eq!(fermi_weight_plus(1e6, 1e6, 0.0), 1.0);
        assert_eq!(fermi_weight_plus(-1e6, 1e6, 0.0), 0.0);
    }

    #[test]
    fn fermi_weight_shifts_with_mu() {
        assert_eq!(fermi_weight_plus(0.7, 5.0, 0.7), 0.5);
    }

    #[test]
    fn constant_integrand_at_zero_tau() {
        let c = c_continuous(Branch::Plus, 0.0, &spec(0.0, 1.0, 1.0 / 32.0)).unwrap();
        assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn discrete_kernel_examples() {
        let s = spec(2.0, 1.0, 1.0 / 32.0);
        // N = 2: E_1 = -0.5, E_2 = 0.5; N = 3 puts E_2 at zero.
        let c = c_discrete(Branch::Plus, 0.0, 2, 3, &s).unwrap();
        assert!((c - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        for tau in [0.0, 0.3, -2.0] {
            let z = c_discrete(Branch::Minus, tau, 1, 2, &s).unwrap();
            assert!((z.norm() - fermi_weight_minus(-0.5, 2.0, 0.0)).abs() < 1e-15);
        }
        assert!(c_discrete(Branch::Plus, 0.0, 0, 3, &s).is_err());
        assert!(c_discrete(Branch::Plus, 0.0, 4, 3, &s).is_err());
    }

    #[test]
    fn markov_defaults_and_override() {
        let s = spec(0.0, 1.0, 1.0 / 32.0);
        let c = markov_constants(&s, None);
        assert!((c.plus.re - 2.0 * PI / 32.0).abs() < 1e-15);
        assert!((c.minus.norm() - 0.19634954084936207).abs() < 1e-12);
        let o = MarkovConstants::real(1.0, 1.0);
        assert_eq!(markov_constants(&s, Some(o)), o);
    }

    #[test]
    fn delta_weight_is_half_of_2pi_eps_at_infinite_temperature() {
        let s = spec(0.0, 50.0, 1.0 / 32.0);
        assert!((delta_weight(Branch::Plus, &s) - PI / 32.0).abs() < 1e-15);
        let off = BathSpec::new(0.0, 1.0, 2.0, 0.1).unwrap();
        assert_eq!(delta_weight(Branch::Minus, &off), 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(BathSpec::new(1.0, 1.0, -1.0, 0.1).is_err());
        assert!(BathSpec::new(-1.0, -1.0, 1.0, 0.1).is_err());
        assert!(BathSpec::new(1.0, -1.0, 1.0, 0.0).is_err());
        let s = spec(1.0, 1.0, 0.1).with_quadrature_points(1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn brownian_kernel_is_min() {
        let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.25).collect();
        let k = KernelMatrix::brownian(&times, 2.0).unwrap();
        assert_eq!(k.values()[[1, 3]], Complex64::new(0.5, 0.0));
        assert_eq!(k.values()[[0, 4]], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn covariance_first_row_vanishes() {
        let times: Vec<f64> = (0..17).map(|i| i as f64 / 16.0).collect();
        let k = covariance_matrix(Branch::Minus, &times, &spec(1.0, 2.0, 1.0 / 32.0)).unwrap();
        for j in 0..times.len() {
            assert_eq!(k.values()[[0, j]], Complex64::new(0.0, 0.0));
            assert_eq!(k.values()[[j, 0]], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn non_uniform_grid_rejected() {
        assert!(check_uniform(&[0.0, 0.1, 0.3]).is_err());
        assert!(check_uniform(&[0.1, 0.2]).is_err());
        assert!(check_uniform(&[]).is_err());
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let mut m = Array2::<Complex64>::zeros((2, 2));
        m[[0, 0]] = Complex64::new(1.0, 0.0);
        m[[1, 1]] = Complex64::new(-0.5, 0.0);
        assert!(matches!(check_psd(&m, 1e-8), Err(Error::KernelNotPsd { .. })));
    }

    #[test]
    fn non_hermitian_input_rejected() {
        let mut m = Array2::<Complex64>::zeros((2, 2));
        m[[0, 1]] = Complex64::new(1.0, 0.0);
        assert!(matches!(
            KernelMatrix::from_values(vec![0.0, 1.0], m),
            Err(Error::InvalidKernel(_))
        ));
    }
}
