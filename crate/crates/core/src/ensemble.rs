//! Deterministic parallel ensembles of SSE trajectories.
//!
//! Trajectory `i` draws its noise from the seed `hash64(master_seed, i)` and
//! results are merged in index order with compensated sums, so the output
//! does not depend on the number of worker threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{covariance_matrix, BathSpec, Branch};
use crate::config::{QmeKind, SimulationConfig};
use crate::error::{Error, Result};
use crate::grid::{PotentialPair, SpatialGrid, SpinorState, SplitPropagator};
use crate::noise::{hash64, kl_decompose, KlBasis, NoisePath};
use crate::observables::{histogram, HistogramSummary, ObservableSample};
use crate::qme::{integrate_qme, BlockDensityMatrix, QmeDissipator, QmeSeries, QmeSystem};
use crate::sse::{propagate_trajectory, MemoryKernels, RecordOptions, StepContext, StepperConfig, StepperMode, TrajectoryRecord};

/// Environment variable overriding `ensemble.worker_count`.
pub const THREADS_ENV: &str = "AHSSE_THREADS";

/// Largest tolerated fraction of failed trajectories.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

const CHUNK: usize = 64;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Per-time ensemble mean and standard error `std / √n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Moments {
    s1: Vec<CompensatedSum>,
    s2: Vec<CompensatedSum>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            s1: vec![CompensatedSum::default(); len],
            s2: vec![CompensatedSum::default(); len],
        }
    }

    fn add(&mut self, k: usize, x: f64) {
        self.s1[k].add(x);
        self.s2[k].add(x * x);
    }

    fn finish(&self, n: usize) -> SeriesStats {
        let nf = n as f64;
        let mut out = SeriesStats::default();
        for (a, b) in self.s1.iter().zip(&self.s2) {
            let mean = a.value() / nf;
            let se = if n > 1 {
                let var = ((b.value() - a.value() * mean) / (nf - 1.0)).max(0.0);
                (var / nf).sqrt()
            } else {
                0.0
            };
            out.mean.push(mean);
            out.std_error.push(se);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub completed: usize,
    pub aborted: usize,
    /// `(trajectory index, error message)` of every aborted trajectory.
    pub failures: Vec<(u64, String)>,
    pub version: String,
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub config: SimulationConfig,
    pub times: Vec<f64>,
    pub r: SeriesStats,
    pub x: SeriesStats,
    /// Unnormalized populations `‖ψ0‖²`, `‖ψ1‖²`.
    pub p0: SeriesStats,
    pub p1: SeriesStats,
    /// Populations of the normalized states.
    pub p0_normalized: SeriesStats,
    pub p1_normalized: SeriesStats,
    /// Final-time samples of the completed trajectories, by index.
    pub final_samples: Vec<ObservableSample>,
    /// Final states (only when `output.snapshots` is set).
    pub final_states: Vec<SpinorState>,
    pub qme: Option<QmeSeries>,
    pub metadata: RunMetadata,
}

impl EnsembleResult {
    /// Equality of everything except wall-clock metadata.
    pub fn same_payload(&self, other: &EnsembleResult) -> bool {
        self.config == other.config
            && self.times == other.times
            && self.r == other.r
            && self.x == other.x
            && self.p0 == other.p0
            && self.p1 == other.p1
            && self.p0_normalized == other.p0_normalized
            && self.p1_normalized == other.p1_normalized
            && self.final_samples == other.final_samples
            && self.final_states == other.final_states
            && self.qme == other.qme
            && self.metadata.completed == other.metadata.completed
            && self.metadata.aborted == other.metadata.aborted
    }

    pub fn histogram_r(&self) -> Result<HistogramSummary> {
        let r: Vec<f64> = self.final_samples.iter().map(|s| s.r).collect();
        histogram(&r, self.config.output.histogram_bins, (0.0, 1.0))
    }

    pub fn histogram_x(&self) -> Result<HistogramSummary> {
        let x: Vec<f64> = self.final_samples.iter().map(|s| s.x_mean).collect();
        histogram(&x, self.config.output.histogram_bins, (self.config.grid.a, self.config.grid.b))
    }

    /// Columns `t` then mean and standard error of R, X, P0, P1 and the
    /// normalized populations.
    pub fn write_timeseries(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "t,R_mean,R_se,X_mean,X_se,P0_mean,P0_se,P1_mean,P1_se,P0n_mean,P0n_se,P1n_mean,P1n_se"
        )?;
        let cols = [&self.r, &self.x, &self.p0, &self.p1, &self.p0_normalized, &self.p1_normalized];
        for (k, t) in self.times.iter().enumerate() {
            write!(out, "{t:.17e}")?;
            for c in cols {
                write!(out, ",{:.17e},{:.17e}", c.mean[k], c.std_error[k])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Columns `trajectory_id,t,R,X,norm0,norm1`.
    pub fn write_final_samples(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "trajectory_id,t,R,X,norm0,norm1")?;
        for s in &self.final_samples {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                s.trajectory_id, s.time, s.r, s.x_mean, s.norm0, s.norm1
            )?;
        }
        Ok(())
    }
}

/// Immutable inputs shared by all trajectories of a run.
#[derive(Debug)]
pub struct EnsembleInputs {
    pub config: SimulationConfig,
    pub grid: SpatialGrid,
    pub potentials: PotentialPair,
    pub coupling: Vec<f64>,
    pub propagator: SplitPropagator,
    pub stepper: StepperConfig,
    pub kernels: Option<MemoryKernels>,
    pub kl: Option<(KlBasis, KlBasis)>,
    pub initial: SpinorState,
    pub times: Vec<f64>,
}

impl EnsembleInputs {
    pub fn new(config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.spatial_grid()?;
        let potentials = config.potential_pair(&grid)?;
        let coupling = config.coupling_function(&grid)?.values;
        let stepper = config.stepper_config();
        let propagator = SplitPropagator::new(&grid, &potentials, stepper.epsilon, stepper.dt)?;
        let times = config.times()?;
        let (kernels, kl) = match stepper.mode {
            StepperMode::Markovian => (None, None),
            StepperMode::NonMarkovian => {
                let bath = config.bath()?;
                let kernels = MemoryKernels::from_bath(&bath, stepper.dt, stepper.window_steps())?;
                (Some(kernels), Some(kl_pair(&bath, &times)?))
            }
        };
        let initial = config.initial_state(&grid)?;
        Ok(EnsembleInputs {
            config: config.clone(),
            grid,
            potentials,
            coupling,
            propagator,
            stepper,
            kernels,
            kl,
            initial,
            times,
        })
    }

    /// Seed of trajectory `index`.
    pub fn seed(&self, index: u64) -> u64 {
        hash64(self.config.ensemble.master_seed, index)
    }

    pub fn noise(&self, index: u64) -> Result<NoisePath> {
        let seed = self.seed(index);
        match &self.kl {
            Some((plus, minus)) => NoisePath::from_kl(plus, minus, seed),
            None => {
                let c0 = self.stepper.c0;
                NoisePath::white(&self.times, c0.plus.re, c0.minus.re, seed)
            }
        }
    }

    pub fn run_trajectory(&self, index: u64) -> Result<TrajectoryRecord> {
        let ctx = StepContext::new(&self.propagator, &self.coupling, &self.stepper)?;
        let noise = self.noise(index)?;
        let options = RecordOptions {
            sample_stride: self.config.time.sample_stride,
            snapshots: false,
        };
        propagate_trajectory(ctx, self.kernels.as_ref(), &self.grid, &self.initial, &noise, options, index)
    }
}

/// KL bases of the `+` and `−` covariance kernels on `times`.
pub fn kl_pair(bath: &BathSpec, times: &[f64]) -> Result<(KlBasis, KlBasis)> {
    let plus = kl_decompose(&covariance_matrix(Branch::Plus, times, bath)?)?;
    let minus = kl_decompose(&covariance_matrix(Branch::Minus, times, bath)?)?;
    Ok((plus, minus))
}

/// Worker count: `AHSSE_THREADS` when set to a positive integer, otherwise
/// the configured value.
pub fn worker_count(config: &SimulationConfig) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(config.ensemble.worker_count)
        .max(1)
}

pub fn run_ensemble(config: &SimulationConfig) -> Result<EnsembleResult> {
    run_ensemble_with_threads(config, worker_count(config))
}

/// [`run_ensemble`] with an explicit thread count (ignores the environment).
pub fn run_ensemble_with_threads(config: &SimulationConfig, threads: usize) -> Result<EnsembleResult> {
    let start = Instant::now();
    let inputs = EnsembleInputs::new(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let n = config.ensemble.n_trajectories;
    let keep_states = config.output.snapshots;

    let mut times: Option<Vec<f64>> = None;
    let mut moments: Vec<Moments> = Vec::new();
    let mut final_samples = Vec::new();
    let mut final_states = Vec::new();
    let mut failures = Vec::new();
    let mut completed = 0usize;

    for chunk_start in (0..n).step_by(CHUNK) {
        let ids: Vec<u64> = (chunk_start..(chunk_start + CHUNK).min(n)).map(|i| i as u64).collect();
        let records: Vec<Result<TrajectoryRecord>> =
            pool.install(|| ids.par_iter().map(|&i| inputs.run_trajectory(i)).collect());
        for (id, rec) in ids.into_iter().zip(records) {
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    failures.push((id, e.to_string()));
                    continue;
                }
            };
            let t = times.get_or_insert_with(|| rec.samples.iter().map(|s| s.time).collect());
            if moments.is_empty() {
                moments = vec![Moments::new(t.len()); 6];
            }
            for (k, s) in rec.samples.iter().enumerate() {
                let total = s.total_norm();
                moments[0].add(k, s.r);
                moments[1].add(k, s.x_mean);
                moments[2].add(k, s.norm0);
                moments[3].add(k, s.norm1);
                moments[4].add(k, s.norm0 / total);
                moments[5].add(k, s.norm1 / total);
            }
            final_samples.push(*rec.samples.last().expect("at least the initial sample"));
            if keep_states {
                final_states.push(rec.final_state);
            }
            completed += 1;
        }
    }

    let aborted = failures.len();
    if aborted as f64 > MAX_ABORT_FRACTION * n as f64 || completed == 0 {
        return Err(Error::TooManyAborts { aborted, total: n });
    }
    let stats: Vec<SeriesStats> = moments.iter().map(|m| m.finish(completed)).collect();
    let [r, x, p0, p1, p0n, p1n]: [SeriesStats; 6] = stats.try_into().expect("six series");
    Ok(EnsembleResult {
        config: config.clone(),
        times: times.unwrap_or_default(),
        r,
        x,
        p0,
        p1,
        p0_normalized: p0n,
        p1_normalized: p1n,
        final_samples,
        final_states,
        qme: None,
        metadata: RunMetadata {
            threads,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            completed,
            aborted,
            failures,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// The QME matching a config: same grid, potentials, coupling and initial
/// state, with the dissipator chosen by `qme.kind`.
pub fn run_qme(config: &SimulationConfig) -> Result<QmeSeries> {
    config.validate()?;
    let q = config
        .qme
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("config has no `qme` section".into()))?;
    let grid = config.spatial_grid()?;
    let pots = config.potential_pair(&grid)?;
    let coupling = config.coupling_function(&grid)?.values;
    let system = QmeSystem::new(&grid, &pots, &coupling, config.physics.epsilon)?;
    let rho0 = BlockDensityMatrix::pure(&config.initial_state(&grid)?, grid.dx());
    let dissipator = qme_dissipator(config, q.kind)?;
    integrate_qme(
        &system,
        &dissipator,
        config.physics.lambda,
        &rho0,
        q.dt,
        config.time.t_final,
        q.sample_stride,
    )
}

fn qme_dissipator(config: &SimulationConfig, kind: QmeKind) -> Result<QmeDissipator> {
    Ok(match kind {
        QmeKind::Markovian => QmeDissipator::Markovian {
            c0: config.markov_constants()?,
            convention: config.physics.convention,
        },
        QmeKind::FiniteHistory => QmeDissipator::FiniteHistory { bath: config.bath()? },
        QmeKind::Redfield => QmeDissipator::Redfield { bath: config.bath()? },
    })
}

/// Runs a named preset with `key=value` overrides; presets with a `qme`
/// section also integrate the matching QME.
pub fn run_preset<S: AsRef<str>>(name: &str, overrides: &[S]) -> Result<EnsembleResult> {
    let config = SimulationConfig::preset(name)?.with_overrides(overrides)?;
    run_config(&config)
}

/// Ensemble plus, when configured, the QME series.
pub fn run_config(config: &SimulationConfig) -> Result<EnsembleResult> {
    let mut result = run_ensemble(config)?;
    if config.qme.is_some() {
        result.qme = Some(run_qme(config)?);
    }
    Ok(result)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes the result artifacts into `dir` and returns their paths:
/// `config.json`, `metadata.json`, `timeseries.csv`, `final_samples.csv`,
/// `histogram_r.csv`, `histogram_x.csv`, plus `qme.csv` when a QME series is
/// present and `final_states.csv` when final states were kept.
pub fn write_results(result: &EnsembleResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let echo = result.config.echo_json()?;
    written.push(write_with(&dir.join("config.json"), |w| writeln!(w, "{echo}"))?);
    let meta = serde_json::to_string_pretty(&result.metadata)?;
    written.push(write_with(&dir.join("metadata.json"), |w| writeln!(w, "{meta}"))?);
    written.push(write_with(&dir.join("timeseries.csv"), |w| result.write_timeseries(w))?);
    written.push(write_with(&dir.join("final_samples.csv"), |w| result.write_final_samples(w))?);
    let hr = result.histogram_r()?;
    written.push(write_with(&dir.join("histogram_r.csv"), |w| hr.write_csv(w))?);
    let hx = result.histogram_x()?;
    written.push(write_with(&dir.join("histogram_x.csv"), |w| hx.write_csv(w))?);
    if let Some(q) = &result.qme {
        written.push(write_with(&dir.join("qme.csv"), |w| q.write_csv(w))?);
    }
    if !result.final_states.is_empty() {
        let grid = result.config.spatial_grid()?;
        written.push(write_with(&dir.join("final_states.csv"), |w| {
            writeln!(w, "trajectory_id,x,re_psi0,im_psi0,re_psi1,im_psi1")?;
            for (s, st) in result.final_samples.iter().zip(&result.final_states) {
                for (j, x) in grid.points().iter().enumerate() {
                    let (a, b) = (st.psi0[j], st.psi1[j]);
                    writeln!(
                        w,
                        "{},{x:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                        s.trajectory_id, a.re, a.im, b.re, b.im
                    )?;
                }
            }
            Ok(())
        })?);
    }
    Ok(written)
}
