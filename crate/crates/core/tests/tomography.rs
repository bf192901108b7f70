use bbm92_core::polmath::{
    bell_state, fidelity, projector_probability, tomography_reconstruct, werner_state, BellState, PauliEigenstate,
    TomographyCounts, WernerParameter,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// 10^4 expected counts per basis setting, Poisson noise.
fn noisy_counts(p: f64, seed: u64) -> TomographyCounts {
    let rho = werner_state(WernerParameter::new(p).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PauliEigenstate::pairs()
        .map(|(a, b)| {
            let mean = 1e4 * projector_probability(&rho, a, b);
            let n = if mean > 0.0 {
                Poisson::new(mean).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            ((a, b), n)
        })
        .collect()
}

#[test]
fn noisy_werner_fidelity() {
    let phi = bell_state(BellState::PhiPlus);
    for seed in 0..10 {
        let rec = tomography_reconstruct(&noisy_counts(0.97, seed)).unwrap();
        let f = fidelity(&rec, &phi);
        assert!((f - 0.97).abs() <= 0.01, "seed {seed}: F = {f}");
        // Generating-state oracle.
        assert!((f - (1.0 + 3.0 * 0.97) / 4.0).abs() < 0.005, "seed {seed}: F = {f}");
    }
}
