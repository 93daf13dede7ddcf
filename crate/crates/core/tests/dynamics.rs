use ahsse_core::bath::{Branch, MarkovConstants};
use ahsse_core::grid::{gaussian_packet, PotentialPair, PotentialSpec, SpatialGrid, SpinorState, SplitPropagator};
use ahsse_core::noise::{hash64, NoisePath};
use ahsse_core::observables::mean_position;
use ahsse_core::sse::{
    propagate_trajectory, MarkovianStepper, MemoryKernels, NonMarkovianStepper, RecordOptions, StepContext,
    StepperConfig, StepperMode,
};
use num_complex::Complex64;
use proptest::prelude::*;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[test]
fn harmonic_packet_follows_classical_orbit() {
    // For U = x²/2 Ehrenfest's theorem is exact: <x>(t) = q0 cos t + p0 sin t.
    let eps = 0.1;
    let grid = SpatialGrid::new(-8.0, 8.0, 256).unwrap();
    let pots = PotentialPair::from_spec(&grid, &PotentialSpec::harmonic_tilted(0.0)).unwrap();
    let dt = 1e-3;
    let prop = SplitPropagator::new(&grid, &pots, eps, dt).unwrap();
    let (q0, p0) = (1.0, 0.5);
    let mut state = gaussian_packet(&grid, q0, p0, eps).unwrap();
    let mut scratch = prop.scratch();
    for n in 1..=2000 {
        prop.step(0, &mut state.psi0, &mut scratch);
        if n % 500 == 0 {
            let t = n as f64 * dt;
            let x = mean_position(&state, &grid).unwrap();
            let exact = q0 * t.cos() + p0 * t.sin();
            assert!((x - exact).abs() < 2e-3, "t = {t}: {x} vs {exact}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn uncoupled_evolution_is_unitary(slope in -1.0f64..1.0, q0 in -1.0f64..1.0, p0 in -1.0f64..1.0, mix in 0.0f64..1.0) {
        let eps = 0.25;
        let grid = SpatialGrid::new(-6.0, 6.0, 64).unwrap();
        let pots = PotentialPair::from_spec(&grid, &PotentialSpec::harmonic_tilted(slope)).unwrap();
        let dt = 0.01;
        let prop = SplitPropagator::new(&grid, &pots, eps, dt).unwrap();
        let coupling = vec![1.0; 64];
        let cfg = StepperConfig::markovian(dt, eps, 0.0, MarkovConstants::real(1.0, 1.0));
        let mut stepper = MarkovianStepper::new(StepContext::new(&prop, &coupling, &cfg).unwrap());
        let mut state = gaussian_packet(&grid, q0, p0, eps).unwrap();
        state.psi1 = state.psi0.iter().map(|z| z * mix).collect();
        let before = (state.norm0(grid.dx()), state.norm1(grid.dx()));
        for _ in 0..200 {
            stepper.step(&mut state, ZERO, ZERO).unwrap();
        }
        prop_assert!((state.norm0(grid.dx()) - before.0).abs() < 1e-12);
        prop_assert!((state.norm1(grid.dx()) - before.1).abs() < 1e-12);
    }
}

#[test]
fn zero_memory_kernel_matches_driftless_markovian_step() {
    let eps = 0.25;
    let grid = SpatialGrid::new(-6.0, 6.0, 64).unwrap();
    let pots = PotentialPair::from_spec(&grid, &PotentialSpec::holstein(0.3, 0.1)).unwrap();
    let dt = 0.01;
    let prop = SplitPropagator::new(&grid, &pots, eps, dt).unwrap();
    let coupling: Vec<f64> = grid.points().iter().map(|x| (-x * x).exp()).collect();
    let markov = StepperConfig::markovian(dt, eps, 0.1, MarkovConstants::real(0.0, 0.0));
    let mut memory = markov.clone();
    memory.mode = StepperMode::NonMarkovian;
    memory.memory_window = 0.1;
    let kernels = MemoryKernels::from_fn(dt, memory.window_steps() + 1, |_, _| ZERO);
    let mut a = MarkovianStepper::new(StepContext::new(&prop, &coupling, &markov).unwrap());
    let mut b = NonMarkovianStepper::new(StepContext::new(&prop, &coupling, &memory).unwrap(), &kernels).unwrap();
    let mut sa = gaussian_packet(&grid, -1.0, 0.5, eps).unwrap();
    let mut sb = sa.clone();
    for n in 0..100 {
        let dw = Complex64::new((n as f64 * 0.37).sin(), (n as f64 * 0.11).cos()) * 0.1;
        a.step(&mut sa, dw, -dw).unwrap();
        b.step(&mut sb, dw, -dw).unwrap();
    }
    let diff = sa.psi0.iter().zip(&sb.psi0).chain(sa.psi1.iter().zip(&sb.psi1)).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn trace_preserving_drift_conserves_mean_norm() {
    // With V = 1 the Itô drift cancels the noise variance: E‖ψ‖² = 1 + O(dt).
    let eps = 0.25;
    let grid = SpatialGrid::new(-6.0, 6.0, 32).unwrap();
    let pots = PotentialPair::from_spec(&grid, &PotentialSpec::holstein(0.3, 0.1)).unwrap();
    let dt = 0.01;
    let prop = SplitPropagator::new(&grid, &pots, eps, dt).unwrap();
    let coupling = vec![1.0; 32];
    let c0 = MarkovConstants::real(1.0, 1.0);
    let cfg = StepperConfig::markovian(dt, eps, 0.1, c0);
    let times: Vec<f64> = (0..=100).map(|i| i as f64 * dt).collect();
    let initial = gaussian_packet(&grid, -0.5, 0.0, eps).unwrap();
    let n = 2000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for i in 0..n {
        let noise = NoisePath::white(&times, c0.get(Branch::Plus).re, c0.get(Branch::Minus).re, hash64(9, i)).unwrap();
        let ctx = StepContext::new(&prop, &coupling, &cfg).unwrap();
        let rec = propagate_trajectory(ctx, None, &grid, &initial, &noise, RecordOptions::default(), i).unwrap();
        let norm = rec.final_state.total_norm(grid.dx());
        sum += norm;
        sq += norm * norm;
        assert_eq!(rec.samples.len(), 101);
    }
    let nf = n as f64;
    let mean = sum / nf;
    let se = ((sq / nf - mean * mean) / nf).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se + 1e-3, "mean {mean} ± {se}");
}

#[test]
fn trajectories_are_seed_deterministic() {
    let eps = 0.25;
    let grid = SpatialGrid::new(-6.0, 6.0, 32).unwrap();
    let pots = PotentialPair::from_spec(&grid, &PotentialSpec::holstein(0.3, 0.1)).unwrap();
    let prop = SplitPropagator::new(&grid, &pots, eps, 0.01).unwrap();
    let coupling = vec![1.0; 32];
    let cfg = StepperConfig::markovian(0.01, eps, 0.1, MarkovConstants::real(1.0, 1.0));
    let times: Vec<f64> = (0..=50).map(|i| i as f64 * 0.01).collect();
    let initial = SpinorState::neutral(gaussian_packet(&grid, 0.0, 0.0, eps).unwrap().psi0);
    let run = |seed| {
        let noise = NoisePath::white(&times, 1.0, 1.0, seed).unwrap();
        let ctx = StepContext::new(&prop, &coupling, &cfg).unwrap();
        propagate_trajectory(ctx, None, &grid, &initial, &noise, RecordOptions::default(), 0).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).final_state, run(6).final_state);
}
