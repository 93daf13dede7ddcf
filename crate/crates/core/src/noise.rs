//! Karhunen-Loève sampling of the complex Gaussian processes `W±(t)`.
//!
//! Convention: `E[W*(s) W(t)] = K(s, t)` and `E[W(s) W(t)] = 0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bath::{KernelMatrix, PSD_TOLERANCE};
use crate::error::{Error, Result};

/// Modes with `λ_k ≤ DEFAULT_TRUNCATION * λ_1` are dropped by default.
pub const DEFAULT_TRUNCATION: f64 = 1e-12;

/// Counter-based seed splitting (SplitMix64 finalizer).
pub fn hash64(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Circularly symmetric standard complex normal: `E|z|² = 1`, `E z² = 0`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Trapezoid weights on a uniform grid.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let dt = times[1] - times[0];
    let mut w = vec![dt; n];
    w[0] = 0.5 * dt;
    w[n - 1] = 0.5 * dt;
    w
}

#[derive(Clone, Debug)]
pub struct KlBasis {
    times: Vec<f64>,
    weights: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Column `k` holds `φ_k(t_i)`.
    eigenfunctions: Array2<Complex64>,
}

impl KlBasis {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &Array2<Complex64> {
        &self.eigenfunctions
    }

    /// Number of modes kept by the default truncation rule.
    pub fn default_truncation(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues
            .iter()
            .take_while(|&&l| l > DEFAULT_TRUNCATION * top && l > 0.0)
            .count()
    }

    /// Weighted Gram matrix `Σ_i w_i φ_k*(t_i) φ_l(t_i)`.
    pub fn gram(&self) -> Array2<Complex64> {
        let (n, m) = self.eigenfunctions.dim();
        Array2::from_shape_fn((m, m), |(k, l)| {
            (0..n)
                .map(|i| {
                    self.weights[i] * self.eigenfunctions[[i, k]].conj() * self.eigenfunctions[[i, l]]
                })
                .sum()
        })
    }

    /// Draws one path `W(t_i) = Σ_k α_k √λ_k φ_k*(t_i)` with `W(0) = 0`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, truncation: usize) -> Vec<Complex64> {
        let n = self.times.len();
        let modes = truncation.min(self.eigenvalues.len());
        let mut path = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..modes {
            let amp = complex_normal(rng) * self.eigenvalues[k].sqrt();
            for (i, w) in path.iter_mut().enumerate().skip(1) {
                *w += amp * self.eigenfunctions[[i, k]].conj();
            }
        }
        path
    }
}

/// Nyström discretization of `∫K(s,t)φ(t)dt = λφ(s)` with trapezoid weights,
/// solved through the Hermitian matrix `D^{1/2} K D^{1/2}`.
pub fn kl_decompose(kernel: &KernelMatrix) -> Result<KlBasis> {
    let times = kernel.times().to_vec();
    let n = times.len();
    let k = kernel.values();
    for i in 0..n {
        for j in 0..n {
            if k[[i, j]] != k[[j, i]].conj() {
                return Err(Error::InvalidKernel(format!(
                    "kernel is not Hermitian at ({i}, {j})"
                )));
            }
        }
    }
    let weights = trapezoid_weights(&times);
    if n < 2 {
        return Ok(KlBasis {
            times,
            weights,
            eigenvalues: vec![0.0; n],
            eigenfunctions: Array2::zeros((n, n)),
        });
    }
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let m = Array2::from_shape_fn((n, n), |(i, j)| k[[i, j]] * (sqrt_w[i] * sqrt_w[j]));
    // ndarray-linalg hands row-major input to LAPACK as its transpose, so the
    // returned vectors are the conjugates of the eigenvectors of `m`.
    let (vals, vecs) = m.eigh(UPLO::Lower)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let top = vals[order[0]].max(0.0);
    let tol = PSD_TOLERANCE * top;
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenfunctions = Array2::<Complex64>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let l = vals[src];
        if l < -tol {
            return Err(Error::KernelNotPsd {
                min_eigenvalue: l,
                tolerance: tol,
            });
        }
        eigenvalues.push(l.max(0.0));
        for i in 0..n {
            eigenfunctions[[i, col]] = vecs[[i, src]].conj() / sqrt_w[i];
        }
    }
    Ok(KlBasis {
        times,
        weights,
        eigenvalues,
        eigenfunctions,
    })
}

/// A single sampled process on the time grid with its per-step increments.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessPath {
    pub values: Vec<Complex64>,
    pub increments: Vec<Complex64>,
}

impl ProcessPath {
    pub fn from_values(values: Vec<Complex64>) -> Self {
        let increments = values.windows(2).map(|w| w[1] - w[0]).collect();
        ProcessPath { values, increments }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_values(vec![Complex64::new(0.0, 0.0); n])
    }
}

/// Samples a single process from `basis`. `truncation = None` keeps every
/// mode above the default relative cutoff.
pub fn sample_path(basis: &KlBasis, seed: u64, truncation: Option<usize>) -> ProcessPath {
    let mut rng = rng_from_seed(seed);
    let modes = truncation.unwrap_or_else(|| basis.default_truncation());
    ProcessPath::from_values(basis.sample(&mut rng, modes))
}

/// The pair `W±(t)` driving one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    pub times: Vec<f64>,
    pub plus: ProcessPath,
    pub minus: ProcessPath,
    pub seed: u64,
}

impl NoisePath {
    pub fn zero(times: &[f64]) -> Self {
        NoisePath {
            times: times.to_vec(),
            plus: ProcessPath::zeros(times.len()),
            minus: ProcessPath::zeros(times.len()),
            seed: 0,
        }
    }

    /// KL sample of both branches from one seeded stream (plus first).
    pub fn from_kl(plus: &KlBasis, minus: &KlBasis, seed: u64) -> Result<Self> {
        if plus.times() != minus.times() {
            return Err(Error::DimensionMismatch {
                expected: plus.times().len(),
                found: minus.times().len(),
            });
        }
        let mut rng = rng_from_seed(seed);
        let wp = plus.sample(&mut rng, plus.default_truncation());
        let wm = minus.sample(&mut rng, minus.default_truncation());
        Ok(NoisePath {
            times: plus.times().to_vec(),
            plus: ProcessPath::from_values(wp),
            minus: ProcessPath::from_values(wm),
            seed,
        })
    }

    /// Exact sample of the white-kernel processes, `K±(s,t) = q± min(s,t)`,
    /// built from independent increments of variance `q± dt`.
    pub fn white(times: &[f64], intensity_plus: f64, intensity_minus: f64, seed: u64) -> Result<Self> {
        if intensity_plus < 0.0 || intensity_minus < 0.0 {
            return Err(Error::InvalidParameter(
                "white-noise intensities must be non-negative".into(),
            ));
        }
        let mut rng = rng_from_seed(seed);
        let n = times.len();
        let mut wp = Vec::with_capacity(n);
        let mut wm = Vec::with_capacity(n);
        let zero = Complex64::new(0.0, 0.0);
        wp.push(zero);
        wm.push(zero);
        for i in 1..n {
            let dt = times[i] - times[i - 1];
            let dp = complex_normal(&mut rng) * (intensity_plus * dt).sqrt();
            let dm = complex_normal(&mut rng) * (intensity_minus * dt).sqrt();
            wp.push(wp[i - 1] + dp);
            wm.push(wm[i - 1] + dm);
        }
        Ok(NoisePath {
            times: times.to_vec(),
            plus: ProcessPath::from_values(wp),
            minus: ProcessPath::from_values(wm),
            seed,
        })
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// Little-endian `f64` stream, one record per time point:
    /// `re W+, im W+, re W-, im W-`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (p, m) in self.plus.values.iter().zip(&self.minus.values) {
            for v in [p.re, p.im, m.re, m.im] {
                out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a stream written by [`NoisePath::write_binary`] back onto `times`.
    pub fn read_binary(path: &Path, times: &[f64]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let expected = times.len() * 32;
        if bytes.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let wp = vals.chunks_exact(4).map(|r| Complex64::new(r[0], r[1])).collect();
        let wm = vals.chunks_exact(4).map(|r| Complex64::new(r[2], r[3])).collect();
        Ok(NoisePath {
            times: times.to_vec(),
            plus: ProcessPath::from_values(wp),
            minus: ProcessPath::from_values(wm),
            seed: 0,
        })
    }
}

/// `(ξ̃+, ξ̃-) ↦ (ξ1, ξ2)` with `ξ1 = ξ̃- − ξ̃+`, `ξ2 = i(ξ̃+ + ξ̃-)`.
pub fn xi_cross_transform(
    xi_plus: &[Complex64],
    xi_minus: &[Complex64],
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if xi_plus.len() != xi_minus.len() {
        return Err(Error::DimensionMismatch {
            expected: xi_plus.len(),
            found: xi_minus.len(),
        });
    }
    let i = Complex64::i();
    Ok(xi_plus
        .iter()
        .zip(xi_minus)
        .map(|(&p, &m)| (m - p, i * (p + m)))
        .unzip())
}

/// Inverse of [`xi_cross_transform`]: `ξ̃+ = (−ξ1 − iξ2)/2`, `ξ̃- = (ξ1 − iξ2)/2`.
pub fn xi_cross_inverse(
    xi1: &[Complex64],
    xi2: &[Complex64],
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if xi1.len() != xi2.len() {
        return Err(Error::DimensionMismatch {
            expected: xi1.len(),
            found: xi2.len(),
        });
    }
    let i = Complex64::i();
    Ok(xi1
        .iter()
        .zip(xi2)
        .map(|(&a, &b)| ((-a - i * b) * 0.5, (a - i * b) * 0.5))
        .unzip())
}

/// Monte-Carlo comparison of sampled paths against a target kernel. Each
/// entry is reported as a z-score (deviation over standard error) taken over
/// the real and imaginary parts separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub samples: usize,
    pub max_z_covariance: f64,
    pub max_z_pseudo: f64,
    pub max_z_mean: f64,
    pub max_abs_covariance_error: f64,
}

#[derive(Clone)]
struct Moments {
    sum: Vec<[f64; 2]>,
    sq: Vec<[f64; 2]>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            sum: vec![[0.0; 2]; len],
            sq: vec![[0.0; 2]; len],
        }
    }

    fn add(&mut self, idx: usize, z: Complex64) {
        self.sum[idx][0] += z.re;
        self.sum[idx][1] += z.im;
        self.sq[idx][0] += z.re * z.re;
        self.sq[idx][1] += z.im * z.im;
    }

    /// Largest z-score of the mean against `target(idx)`, and the largest
    /// absolute deviation.
    fn max_z(&self, n: usize, target: impl Fn(usize) -> Complex64) -> (f64, f64) {
        let nf = n as f64;
        let mut zmax = 0.0f64;
        let mut dmax = 0.0f64;
        for idx in 0..self.sum.len() {
            let t = target(idx);
            let mean = Complex64::new(self.sum[idx][0] / nf, self.sum[idx][1] / nf);
            dmax = dmax.max((mean - t).norm());
            for (part, (m, tv)) in [(0, (mean.re, t.re)), (1, (mean.im, t.im))] {
                let var = ((self.sq[idx][part] / nf - m * m) * nf / (nf - 1.0)).max(0.0);
                let se = (var / nf).sqrt();
                let dev = (m - tv).abs();
                let z = if se > 0.0 {
                    dev / se
                } else if dev > 1e-14 {
                    f64::INFINITY
                } else {
                    0.0
                };
                zmax = zmax.max(z);
            }
        }
        (zmax, dmax)
    }
}

/// Draws `samples` paths from `basis` (seeds `hash64(seed, i)`) and scores
/// `E[W*(s)W(t)]` against `kernel`, `E[W(s)W(t)]` and `E[W(t)]` against zero.
pub fn validate_covariance(
    basis: &KlBasis,
    kernel: &KernelMatrix,
    samples: usize,
    seed: u64,
) -> Result<CovarianceReport> {
    if samples < 2 {
        return Err(Error::InvalidParameter(
            "covariance validation needs at least 2 samples".into(),
        ));
    }
    let n = basis.times().len();
    if kernel.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: kernel.len(),
        });
    }
    let modes = basis.default_truncation();
    let mut cov = Moments::new(n * n);
    let mut pseudo = Moments::new(n * n);
    let mut mean = Moments::new(n);
    for s in 0..samples {
        let mut rng = rng_from_seed(hash64(seed, s as u64));
        let w = basis.sample(&mut rng, modes);
        for a in 0..n {
            mean.add(a, w[a]);
            let ca = w[a].conj();
            for b in 0..n {
                cov.add(a * n + b, ca * w[b]);
                pseudo.add(a * n + b, w[a] * w[b]);
            }
        }
    }
    let k = kernel.values();
    let zero = Complex64::new(0.0, 0.0);
    let (zc, dc) = cov.max_z(samples, |idx| k[[idx / n, idx % n]]);
    let (zp, _) = pseudo.max_z(samples, |_| zero);
    let (zm, _) = mean.max_z(samples, |_| zero);
    Ok(CovarianceReport {
        samples,
        max_z_covariance: zc,
        max_z_pseudo: zp,
        max_z_mean: zm,
        max_abs_covariance_error: dc,
    })
}
