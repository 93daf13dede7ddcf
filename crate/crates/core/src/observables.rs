//! Ratio observables of (possibly unnormalized) SSE states and histogram
//! summaries of ensemble samples.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SpatialGrid, SpinorState};
use crate::qme::BlockDensityMatrix;

/// Default histogram resolution.
pub const DEFAULT_BINS: usize = 40;

/// `R = ‖ψ0‖² / (‖ψ0‖² + ‖ψ1‖²)`.
pub fn transition_rate(state: &SpinorState) -> Result<f64> {
    let n0: f64 = state.psi0.iter().map(|z| z.norm_sqr()).sum();
    let n1: f64 = state.psi1.iter().map(|z| z.norm_sqr()).sum();
    let total = n0 + n1;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(n0 / total)
}

/// `X = ∫ x (|ψ0|² + |ψ1|²) dx / ∫ (|ψ0|² + |ψ1|²) dx`.
pub fn mean_position(state: &SpinorState, grid: &SpatialGrid) -> Result<f64> {
    if state.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            found: state.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, a), b) in grid.points().iter().zip(&state.psi0).zip(&state.psi1) {
        let d = a.norm_sqr() + b.norm_sqr();
        num += x * d;
        den += d;
    }
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(num / den)
}

/// Level populations `(Δx tr ρ00, Δx tr ρ11)`.
pub fn populations_from_density(rho: &BlockDensityMatrix) -> (f64, f64) {
    (rho.population0(), rho.population1())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSample {
    pub time: f64,
    pub r: f64,
    pub x_mean: f64,
    pub norm0: f64,
    pub norm1: f64,
    pub trajectory_id: u64,
}

impl ObservableSample {
    pub fn from_state(state: &SpinorState, grid: &SpatialGrid, trajectory_id: u64) -> Result<Self> {
        let dx = grid.dx();
        Ok(ObservableSample {
            time: state.time,
            r: transition_rate(state)?,
            x_mean: mean_position(state, grid)?,
            norm0: state.norm0(dx),
            norm1: state.norm1(dx),
            trajectory_id,
        })
    }

    pub fn total_norm(&self) -> f64 {
        self.norm0 + self.norm1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub mean: f64,
    /// Unbiased sample variance (zero for a single sample).
    pub variance: f64,
    pub n: usize,
}

impl HistogramSummary {
    /// CSV with one row per bin: `left,right,count`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "left,right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{:.17e},{:.17e},{}", self.bin_edges[i], self.bin_edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Left-closed bins over `[lo, hi]`; the last bin also includes `hi`.
/// Samples outside the range are counted in `underflow` / `overflow`, so
/// `Σ counts + underflow + overflow = n`.
pub fn histogram(samples: &[f64], n_bins: usize, range: (f64, f64)) -> Result<HistogramSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("histogram samples"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "histogram range must satisfy lo < hi (got [{lo}, {hi}])"
        )));
    }
    let width = (hi - lo) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + (hi - lo) * i as f64 / n_bins as f64 })
        .collect();
    let mut counts = vec![0u64; n_bins];
    let (mut underflow, mut overflow) = (0u64, 0u64);
    for &s in samples {
        if s.is_nan() || s > hi {
            overflow += 1;
        } else if s < lo {
            underflow += 1;
        } else {
            let mut k = (((s - lo) / width).floor() as usize).min(n_bins - 1);
            // Guard against rounding in the bin index near an edge.
            while k > 0 && s < bin_edges[k] {
                k -= 1;
            }
            while k + 1 < n_bins && s >= bin_edges[k + 1] {
                k += 1;
            }
            counts[k] += 1;
        }
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(HistogramSummary {
        bin_edges,
        counts,
        underflow,
        overflow,
        mean,
        variance,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn transition_rate_examples() {
        let s = SpinorState::neutral(vec![c(1.0); 8]);
        assert_eq!(transition_rate(&s).unwrap(), 1.0);
        let s = SpinorState::new(vec![c(0.0); 8], vec![c(2.0); 8]).unwrap();
        assert_eq!(transition_rate(&s).unwrap(), 0.0);
        let s = SpinorState::new(vec![c(1.0); 8], vec![Complex64::new(0.0, 1.0); 8]).unwrap();
        assert_eq!(transition_rate(&s).unwrap(), 0.5);
        let z = SpinorState::neutral(vec![c(0.0); 8]);
        assert!(matches!(transition_rate(&z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn histogram_single_and_edges() {
        let h = histogram(&[0.3], 10, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 1);
        assert_eq!(h.counts[3], 1);
        assert_eq!(h.variance, 0.0);
        let h = histogram(&[0.0, 1.0, -0.1, 1.1], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 1]);
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert!(histogram(&[], 4, (0.0, 1.0)).is_err());
        assert!(histogram(&[0.5], 0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn populations_of_pure_neutral_state() {
        let s = SpinorState::neutral(vec![c(0.5); 4]);
        let rho = BlockDensityMatrix::pure(&s, 1.0);
        let (p0, p1) = populations_from_density(&rho);
        assert!((p0 - 1.0).abs() < 1e-15);
        assert_eq!(p1, 0.0);
        assert_eq!(p0 + p1, rho.trace());
    }

    #[test]
    fn histogram_csv_rows() {
        let h = histogram(&[0.1, 0.2, 0.9], 5, (0.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
    }
}
