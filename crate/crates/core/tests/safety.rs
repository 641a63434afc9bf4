mod support;

use meadow::grid::{GridDistribution, GridSpec, Topology};
use meadow::safety::{
    compute_margins, evaluate_constraint, log_barrier, max_entropy_safe_init, pessimistic_slack,
    validate_lipschitz, LipschitzBundle, SafetySpec,
};
use meadow::transport::wasserstein1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::fuzz::random_distribution;

fn bundle(l_f: f64, l_pi: f64, l_sigma: f64, beta: f64) -> LipschitzBundle {
    LipschitzBundle { l_f, l_pi, l_sigma, l_h: 1.0, beta, delta: 0.05 }
}

fn grid(two_d: bool, bins: usize) -> GridSpec {
    if two_d {
        GridSpec::square(bins, Topology::ClippedBox)
    } else {
        GridSpec::line(bins, Topology::Torus)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn barrier_is_c1_at_the_switch(lambda in 0.1f64..20.0, delta in 1e-4f64..1e-1) {
        let eps = delta * 1e-7;
        let below = log_barrier(delta - eps, lambda, delta);
        let above = log_barrier(delta + eps, lambda, delta);
        prop_assert!((above - below).abs() <= 4.0 * lambda * eps / delta);
        let slope = |x: f64| (log_barrier(x + eps, lambda, delta) - log_barrier(x - eps, lambda, delta)) / (2.0 * eps);
        let left = slope(delta - 2.0 * eps);
        let right = slope(delta + 2.0 * eps);
        prop_assert!((left - right).abs() / (lambda / delta) < 1e-4, "{} vs {}", left, right);
        prop_assert!((log_barrier(delta, lambda, delta) - lambda * delta.ln()).abs() < 1e-9 * lambda.max(1.0));
    }

    #[test]
    fn barrier_is_finite_and_increasing_everywhere(lambda in 0.1f64..20.0, a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let delta = 1e-3;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (x, y) = (log_barrier(lo, lambda, delta), log_barrier(hi, lambda, delta));
        prop_assert!(x.is_finite() && y.is_finite());
        prop_assert!(x <= y);
    }

    #[test]
    fn margins_scale_linearly_and_grow_with_time(
        sigma in 1e-6f64..1.0,
        factor in 0.0f64..10.0,
        l_f in 0.0f64..2.0,
        l_pi in 0.0f64..2.0,
        l_sigma in 0.0f64..2.0,
        beta in 0.1f64..3.0,
    ) {
        let b = bundle(l_f, l_pi, l_sigma, beta);
        let steps = 8;
        let base = compute_margins(&b, sigma, steps);
        let scaled = compute_margins(&b, sigma * factor, steps);
        for t in 1..=steps {
            let expected = factor * base.at(t);
            prop_assert!((scaled.at(t) - expected).abs() <= 1e-12 * expected.abs().max(1e-300));
            prop_assert!(base.at(t) > 0.0);
            if t > 1 {
                prop_assert!(base.at(t) > base.at(t - 1));
            }
        }
        prop_assert_eq!(base.at(0), 0.0);
        prop_assert!(compute_margins(&b, 0.0, steps).as_slice().iter().all(|c| *c == 0.0));
    }

    /// `h = C - W1(., nu0)` is 1-Lipschitz, so a non-negative slack with `L_h = 1` and a margin
    /// that really bounds the model error certifies the true distribution.
    #[test]
    fn similarity_slack_certifies_true_distribution(seed in any::<u64>(), two_d in any::<bool>(), threshold in 0.0f64..0.5) {
        let g = grid(two_d, if two_d { 5 } else { 12 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_distribution(g, &mut rng);
        let truth = random_distribution(g, &mut rng);
        let model = random_distribution(g, &mut rng);
        let spec = SafetySpec::similarity(threshold, reference).unwrap();
        let gap = (evaluate_constraint(&spec, &truth).unwrap() - evaluate_constraint(&spec, &model).unwrap()).abs();
        let error = wasserstein1(&model, &truth).unwrap();
        prop_assert!(gap <= error + 1e-12);
        let slack = pessimistic_slack(&spec, &model, &bundle(1.0, 1.0, 1.0, 1.0), error).unwrap();
        if slack >= 0.0 {
            prop_assert!(evaluate_constraint(&spec, &truth).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn safe_init_is_feasible(seed in any::<u64>(), two_d in any::<bool>(), fraction in 0.0f64..=1.0, threshold in 0.0f64..0.6) {
        let g = grid(two_d, if two_d { 5 } else { 16 });
        let entropy = SafetySpec::entropy(fraction * (g.cells() as f64).ln()).unwrap();
        let init = max_entropy_safe_init(&entropy, g).unwrap();
        prop_assert!(evaluate_constraint(&entropy, &init).unwrap() >= 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_distribution(g, &mut rng);
        let similarity = SafetySpec::similarity(threshold, reference.clone()).unwrap();
        let init = max_entropy_safe_init(&similarity, g).unwrap();
        prop_assert!(evaluate_constraint(&similarity, &init).unwrap() >= 0.0);
        prop_assert!(init.shannon_entropy() >= reference.shannon_entropy() - 1e-12);
    }
}

#[test]
fn growth_factor_with_unit_constants() {
    let b = bundle(1.0, 1.0, 1.0, 1.0);
    assert_eq!(b.growth(), 13.0);
    let m = compute_margins(&b, 0.5, 3);
    assert!((m.at(1) - 1.0).abs() < 1e-15);
    assert!((m.at(2) - 26.0).abs() < 1e-12);
    assert!((m.at(3) - 3.0 * 2.0 * 169.0 * 0.5).abs() < 1e-9);
}

#[test]
fn entropy_threshold_above_maximum_is_infeasible() {
    let g = GridSpec::line(8, Topology::Torus);
    let spec = SafetySpec::entropy(8f64.ln() + 1e-6).unwrap();
    assert!(matches!(max_entropy_safe_init(&spec, g), Err(meadow::Error::InfeasibleConstraint(_))));
}

#[test]
fn lipschitz_check_accepts_its_own_estimate() {
    let g = GridSpec::square(6, Topology::ClippedBox);
    let spec = SafetySpec::entropy(0.5).unwrap();
    let worst = validate_lipschitz(&spec, g, 1e6, 40, 11).unwrap();
    assert!(worst > 0.0);
    assert!(validate_lipschitz(&spec, g, worst, 40, 11).is_ok());
    assert!(validate_lipschitz(&spec, g, worst * 0.5, 40, 11).is_err());
    let point = GridDistribution::point_mass(g, 0);
    assert!(evaluate_constraint(&spec, &point).unwrap() < 0.0);
}
