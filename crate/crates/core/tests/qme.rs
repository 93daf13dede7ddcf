use ahsse_core::bath::{c_continuous, BathSpec, Branch, MarkovConstants};
use ahsse_core::grid::{gaussian_packet, PotentialPair, PotentialSpec, SpatialGrid, SpinorState};
use ahsse_core::qme::{
    dissipator_coefficients, hamiltonian_matrix, horizon_integrals, integrate_qme, qme_rhs_markovian,
    BlockDensityMatrix, Horizon, QmeDissipator, QmeSystem,
};
use ahsse_core::sse::DriftConvention;
use ndarray::Array2;
use num_complex::Complex64;

const EPS: f64 = 0.5;

fn setup(m: usize, v: impl Fn(f64) -> f64) -> (SpatialGrid, PotentialPair, Vec<f64>, BlockDensityMatrix) {
    let grid = SpatialGrid::new(-3.0, 3.0, m).unwrap();
    let pots = PotentialPair::from_spec(&grid, &PotentialSpec::holstein(0.5, 0.3)).unwrap();
    let coupling: Vec<f64> = grid.points().iter().map(|&x| v(x)).collect();
    let psi = gaussian_packet(&grid, -0.5, 0.3, EPS).unwrap();
    let rho = BlockDensityMatrix::pure(&psi, grid.dx());
    (grid, pots, coupling, rho)
}

fn max_diff(a: &BlockDensityMatrix, b: &BlockDensityMatrix) -> f64 {
    [(&a.rho00, &b.rho00), (&a.rho01, &b.rho01), (&a.rho10, &b.rho10), (&a.rho11, &b.rho11)]
        .iter()
        .map(|(x, y)| (*x - *y).iter().fold(0.0f64, |m, z| m.max(z.norm())))
        .fold(0.0, f64::max)
}

/// Plain RK4 on the position-basis right-hand side.
fn reference_rk4(
    rho: &BlockDensityMatrix,
    h0: &Array2<f64>,
    h1: &Array2<f64>,
    v: &[f64],
    lambda: f64,
    c0: MarkovConstants,
    conv: DriftConvention,
    dt: f64,
    steps: usize,
) -> BlockDensityMatrix {
    let f = |r: &BlockDensityMatrix| qme_rhs_markovian(r, h0, h1, v, EPS, lambda, c0, conv).unwrap();
    let add = |r: &BlockDensityMatrix, k: &BlockDensityMatrix, h: f64| {
        let s = Complex64::new(h, 0.0);
        BlockDensityMatrix {
            rho00: &r.rho00 + &(&k.rho00 * s),
            rho01: &r.rho01 + &(&k.rho01 * s),
            rho10: &r.rho10 + &(&k.rho10 * s),
            rho11: &r.rho11 + &(&k.rho11 * s),
            dx: r.dx,
            time: r.time,
        }
    };
    let mut r = rho.clone();
    for _ in 0..steps {
        let k1 = f(&r);
        let k2 = f(&add(&r, &k1, dt / 2.0));
        let k3 = f(&add(&r, &k2, dt / 2.0));
        let k4 = f(&add(&r, &k3, dt));
        r = add(&r, &k1, dt / 6.0);
        r = add(&r, &k2, dt / 3.0);
        r = add(&r, &k3, dt / 3.0);
        r = add(&r, &k4, dt / 6.0);
    }
    r
}

#[test]
fn eigen_integrator_matches_position_basis_rk4() {
    for conv in [DriftConvention::TracePreserving, DriftConvention::Printed] {
        let (grid, pots, v, rho) = setup(16, |x| 1.0 + 0.2 * x.sin());
        let h0 = hamiltonian_matrix(&grid, pots.level(0), EPS).unwrap();
        let h1 = hamiltonian_matrix(&grid, pots.level(1), EPS).unwrap();
        let c0 = MarkovConstants::real(1.5, 1.0);
        let lambda = 0.3;
        let reference = reference_rk4(&rho, &h0, &h1, &v, lambda, c0, conv, 2e-4, 2500);
        let sys = QmeSystem::new(&grid, &pots, &v, EPS).unwrap();
        let diss = QmeDissipator::Markovian { c0, convention: conv };
        let series = integrate_qme(&sys, &diss, lambda, &rho, 0.01, 0.5, 10).unwrap();
        let err = max_diff(&series.final_state, &reference);
        assert!(err < 1e-7, "{conv:?}: {err}");
    }
}

#[test]
fn trace_drift_over_many_steps() {
    let (grid, pots, v, rho) = setup(16, |x| 1.0 + 0.3 * x.cos());
    let sys = QmeSystem::new(&grid, &pots, &v, EPS).unwrap();
    let diss = QmeDissipator::Markovian {
        c0: MarkovConstants::real(2.0, 2.0),
        convention: DriftConvention::TracePreserving,
    };
    let s = integrate_qme(&sys, &diss, 0.2, &rho, 0.005, 50.0, 100).unwrap();
    assert_eq!(s.times.len(), 101);
    for (i, tr) in s.trace.iter().enumerate() {
        assert!((tr - s.trace[0]).abs() < 1e-8, "sample {i}: {tr}");
    }
    for (&p0, &p1) in s.p0.iter().zip(&s.p1) {
        assert!((-1e-8..=1.0 + 1e-8).contains(&p0));
        assert!((-1e-8..=1.0 + 1e-8).contains(&p1));
    }
    assert!(s.final_state.hermiticity_error() < 1e-10);
}

#[test]
fn hamiltonian_flow_is_exact() {
    let (grid, pots, v, rho) = setup(16, |_| 1.0);
    let sys = QmeSystem::new(&grid, &pots, &v, EPS).unwrap();
    let diss = QmeDissipator::Markovian {
        c0: MarkovConstants::real(2.0, 2.0),
        convention: DriftConvention::TracePreserving,
    };
    let s = integrate_qme(&sys, &diss, 0.0, &rho, 0.25, 5.0, 1).unwrap();
    for &p in &s.purity {
        assert!((p - s.purity[0]).abs() < 1e-10);
    }
}

#[test]
fn rk4_self_convergence_is_fourth_order() {
    let (grid, pots, v, rho) = setup(16, |x| 1.0 + 0.3 * x);
    let sys = QmeSystem::new(&grid, &pots, &v, EPS).unwrap();
    let diss = QmeDissipator::Markovian {
        c0: MarkovConstants::real(2.0, 2.0),
        convention: DriftConvention::TracePreserving,
    };
    let lambda = 0.5;
    let run = |dt: f64| integrate_qme(&sys, &diss, lambda, &rho, dt, 2.0, 1000).unwrap().final_state;
    let fine = run(0.0125 / 8.0);
    let e1 = max_diff(&run(0.1), &fine);
    let e2 = max_diff(&run(0.05), &fine);
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio} ({e1:e} / {e2:e})");
}

#[test]
fn scalar_horizon_integral_matches_direct_quadrature() {
    let spec = BathSpec::new(2.0, -3.0, 3.0, 0.5).unwrap();
    let e0 = 0.7;
    let t = 1.3;
    for branch in [Branch::Plus, Branch::Minus] {
        let got = horizon_integrals(&spec, branch, &[e0], Horizon::Finite(t)).unwrap()[0];
        // Composite Simpson in τ over the kernel.
        let n = 2000;
        let h = t / n as f64;
        let mut sum = Complex64::new(0.0, 0.0);
        for k in 0..=n {
            let tau = k as f64 * h;
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            sum += c_continuous(branch, tau, &spec).unwrap() * Complex64::from_polar(1.0, -e0 * tau / spec.epsilon) * w;
        }
        let direct = sum * (h / 3.0);
        assert!((got - direct).norm() < 1e-8, "{branch:?}: {got} vs {direct}");
    }
}

#[test]
fn single_point_coefficients_are_the_scalar_integral() {
    // A constant potential shifts every eigenvalue; the uniform mode has E = U.
    let spec = BathSpec::new(1.0, -2.0, 2.0, EPS).unwrap();
    let grid = SpatialGrid::new(-1.0, 1.0, 8).unwrap();
    let pots = PotentialPair::new(vec![0.4; 8], vec![-0.2; 8]).unwrap();
    let sys = QmeSystem::new(&grid, &pots, &vec![1.0; 8], EPS).unwrap();
    let coeffs = dissipator_coefficients(&spec, &sys, Horizon::Finite(0.8)).unwrap();
    let flat = SpinorState::neutral(vec![Complex64::new(1.0 / (8.0f64).sqrt(), 0.0); 8]);
    let apply = |a: &Array2<Complex64>| -> Complex64 {
        (0..8).map(|j| (0..8).map(|l| flat.psi0[j].conj() * a[[j, l]] * flat.psi0[l]).sum::<Complex64>()).sum()
    };
    let gp = horizon_integrals(&spec, Branch::Plus, &[0.4], Horizon::Finite(0.8)).unwrap()[0];
    let gm = horizon_integrals(&spec, Branch::Minus, &[-0.2], Horizon::Finite(0.8)).unwrap()[0];
    assert!((apply(&coeffs.lambda_plus) - gp).norm() < 1e-12);
    assert!((apply(&coeffs.lambda_minus) - gm).norm() < 1e-12);
}

#[test]
fn finite_horizon_approaches_redfield() {
    let spec = BathSpec::new(0.0, -2.0, 2.0, 0.25).unwrap();
    let energies = [0.3, -0.9];
    for branch in [Branch::Plus, Branch::Minus] {
        let inf = horizon_integrals(&spec, branch, &energies, Horizon::Infinite).unwrap();
        let long = horizon_integrals(&spec, branch, &energies, Horizon::Finite(400.0)).unwrap();
        for (a, b) in inf.iter().zip(&long) {
            // Residual oscillation decays like ε/T away from the band edges.
            assert!((a - b).norm() < 5e-3, "{branch:?}: {a} vs {b}");
        }
    }
    // β = 0: real part is πε inside the band.
    let inf = horizon_integrals(&spec, Branch::Plus, &[0.0], Horizon::Infinite).unwrap()[0];
    assert!((inf.re - std::f64::consts::PI * 0.25 * 0.5).abs() < 1e-12);
    assert!(inf.im.abs() < 1e-10);
}

#[test]
fn redfield_resonance_at_band_edge_is_rejected() {
    let spec = BathSpec::new(1.0, -2.0, 2.0, 0.25).unwrap();
    assert!(horizon_integrals(&spec, Branch::Plus, &[2.0], Horizon::Infinite).is_err());
}

#[test]
fn finite_history_and_redfield_runs_stay_finite() {
    let (grid, pots, v, rho) = setup(16, |_| 1.0);
    let sys = QmeSystem::new(&grid, &pots, &v, EPS).unwrap();
    let bath = BathSpec::new(1.0, -4.0, 4.0, EPS).unwrap();
    for diss in [QmeDissipator::FiniteHistory { bath: bath.clone() }, QmeDissipator::Redfield { bath: bath.clone() }] {
        let s = integrate_qme(&sys, &diss, 0.2, &rho, 0.02, 1.0, 10).unwrap();
        assert!(s.final_state.is_finite());
        assert!(s.p0.iter().all(|p| p.is_finite()));
    }
}

#[test]
fn dense_system_size_limit() {
    let grid = SpatialGrid::new(-1.0, 1.0, 4096).unwrap();
    let pots = PotentialPair::new(vec![0.0; 4096], vec![0.0; 4096]).unwrap();
    assert!(QmeSystem::new(&grid, &pots, &vec![1.0; 4096], 0.1).is_err());
}
