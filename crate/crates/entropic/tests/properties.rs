//! Randomized invariants across the public API: lattice mass balance,
//! one-step variational identities, entropy inequalities, solver
//! monotonicity, and scalar-type agreement.

use entropic::bsde::{
    driver_g, gateaux_derivative, one_step_entropic, one_step_minimizer, solve_bsdej, Scheme,
};
use entropic::lattice::{build_lattice, AdaptedProcess, DiscountSpec, LatticeKind, TimeGrid};
use entropic::measure::{
    criterion_gamma, kl_divergence, relative_entropy, relative_entropy_pathwise, CriterionSpec,
    EntropyForm, NodeMeasure,
};
use entropic::oracle::random_measure;
use entropic::plan::Utility;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Small mixed tree with one Brownian coordinate and one jump channel.
fn mixed_tree(steps: usize) -> entropic::lattice::Lattice<f64> {
    let grid = TimeGrid::uniform(0.6, steps);
    build_lattice(grid, 1, 1, |_, _| vec![0.25], LatticeKind::Tree).unwrap()
}

fn random_spec(
    lattice: &entropic::lattice::Lattice<f64>,
    rng: &mut ChaCha8Rng,
    rate: f64,
) -> CriterionSpec<f64> {
    let u = AdaptedProcess {
        values: (0..lattice.num_nodes())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    };
    let u_bar = (0..lattice.leaf_count())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    CriterionSpec {
        u,
        u_bar,
        discount: DiscountSpec::constant(rate, lattice).unwrap(),
        beta: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn branch_mass_balances_and_nodes_count_up(
        p in 0usize..=2,
        lam in proptest::collection::vec(0.05f64..0.6, 0..=2),
        steps in 1usize..=3,
        horizon in 0.1f64..1.5,
    ) {
        prop_assume!(p > 0 || !lam.is_empty());
        let dt = horizon / steps as f64;
        prop_assume!(lam.iter().sum::<f64>() * dt < 0.9);
        let grid = TimeGrid::uniform(horizon, steps);
        let lam2 = lam.clone();
        let lattice =
            build_lattice(grid, p, lam.len(), move |_, _| lam2.clone(), LatticeKind::Tree)
                .unwrap();
        let fanout = (1usize << p) * (lam.len() + 1);
        prop_assert_eq!(lattice.fanout(), fanout);
        let mut expected_nodes = 0usize;
        let mut layer = 1usize;
        for _ in 0..=steps {
            expected_nodes += layer;
            layer *= fanout;
        }
        prop_assert_eq!(lattice.num_nodes(), expected_nodes);
        prop_assert_eq!(lattice.leaf_count(), fanout.pow(steps as u32));
        for node in 0..lattice.num_nodes() {
            if lattice.is_leaf(node) {
                continue;
            }
            let total: f64 = lattice.children(node).iter().map(|e| e.prob).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(lattice.children(node).iter().all(|e| e.prob > 0.0));
        }
    }

    #[test]
    fn one_step_value_is_monotone_translating_and_dual(
        weights in proptest::collection::vec(0.05f64..1.0, 2..=6),
        values in proptest::collection::vec(-3.0f64..3.0, 6),
        bumps in proptest::collection::vec(0.0f64..2.0, 6),
        shift in -2.0f64..2.0,
    ) {
        let n = weights.len();
        let probs = normalize(&weights);
        let v = &values[..n];
        let y = one_step_entropic(&probs, v);

        let raised: Vec<f64> = v.iter().zip(&bumps).map(|(a, b)| a + b).collect();
        prop_assert!(one_step_entropic(&probs, &raised) >= y - 1e-12);

        let shifted: Vec<f64> = v.iter().map(|a| a + shift).collect();
        prop_assert!((one_step_entropic(&probs, &shifted) - (y + shift)).abs() <= 1e-10);

        let qstar = one_step_minimizer(&probs, v);
        prop_assert!((qstar.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let at = |q: &[f64]| -> f64 {
            q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + kl_divergence(q, &probs)
        };
        prop_assert!((at(&qstar) - y).abs() <= 1e-10);
        let contender = normalize(&bumps[..n].iter().map(|b| b + 0.01).collect::<Vec<_>>());
        prop_assert!(at(&contender) >= y - 1e-12);
    }

    #[test]
    fn driver_is_nonnegative_and_convex(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        prop_assert_eq!(driver_g(0.0), 0.0);
        prop_assert!(driver_g(x) >= 0.0);
        let mid = driver_g(0.5 * (x + y));
        let avg = 0.5 * (driver_g(x) + driver_g(y));
        prop_assert!(mid <= avg + 1e-12 * (1.0 + avg.abs()));
        let naive = (-x).exp() + x - 1.0;
        prop_assert!((driver_g(x) - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
    }

    #[test]
    fn relative_weights_obey_the_entropy_inequality(
        weights in proptest::collection::vec(0.05f64..1.0, 2..=6),
        tilts in proptest::collection::vec(0.1f64..2.0, 6),
    ) {
        let n = weights.len();
        let p = normalize(&weights);
        let q = normalize(
            &p.iter()
                .zip(&tilts[..n])
                .map(|(a, b)| a * b)
                .collect::<Vec<_>>(),
        );
        let kl = kl_divergence(&q, &p);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p), 0.0);
        let l1: f64 = q.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(kl >= 0.499 * l1 * l1 - 1e-15);
    }

    #[test]
    fn pathwise_and_recursive_entropy_agree(seed in any::<u64>()) {
        let lattice = mixed_tree(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_measure(&lattice, &mut rng, 0.05);
        let fast = relative_entropy(&q, &lattice);
        let slow = relative_entropy_pathwise(&q, &lattice).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * (1.0 + fast.abs()));
        prop_assert!(fast >= -1e-13);
        prop_assert!(relative_entropy(&NodeMeasure::base(&lattice), &lattice).abs() <= 1e-15);
    }

    #[test]
    fn constant_utility_shift_translates_the_value(seed in any::<u64>(), c in -1.0f64..1.0) {
        let lattice = mixed_tree(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&lattice, &mut rng, 0.0);
        let shifted = CriterionSpec {
            u: AdaptedProcess {
                values: spec.u.values.iter().map(|v| v + c).collect(),
            },
            u_bar: spec.u_bar.clone(),
            discount: DiscountSpec::zero_rate(&lattice),
            beta: 1.0,
        };
        for scheme in [Scheme::Dp, Scheme::Recursion] {
            let base = solve_bsdej(&spec, &lattice, scheme).unwrap().value();
            let moved = solve_bsdej(&shifted, &lattice, scheme).unwrap().value();
            prop_assert!((moved - (base + c * 0.6)).abs() <= 1e-10);
        }
        // At zero rate the two schemes run the same recursion.
        let a = solve_bsdej(&spec, &lattice, Scheme::Dp).unwrap().value();
        let b = solve_bsdej(&spec, &lattice, Scheme::Recursion).unwrap().value();
        prop_assert!((a - b).abs() <= 1e-14);
    }

    #[test]
    fn richer_rewards_never_lower_the_value(seed in any::<u64>(), rate in 0.0f64..0.8) {
        let lattice = mixed_tree(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&lattice, &mut rng, rate);
        let richer = CriterionSpec {
            u: AdaptedProcess {
                values: spec
                    .u
                    .values
                    .iter()
                    .map(|v| v + rng.gen_range(0.0..1.0))
                    .collect(),
            },
            u_bar: spec.u_bar.iter().map(|v| v + rng.gen_range(0.0..1.0)).collect(),
            discount: spec.discount.clone(),
            beta: 1.0,
        };
        for scheme in [Scheme::Dp, Scheme::Recursion] {
            let lo = solve_bsdej(&spec, &lattice, scheme).unwrap().value();
            let hi = solve_bsdej(&richer, &lattice, scheme).unwrap().value();
            prop_assert!(lo <= hi + 1e-12);
        }
    }

    #[test]
    fn dynamic_value_lower_bounds_every_measure(seed in any::<u64>(), rate in 0.0f64..0.8) {
        let lattice = mixed_tree(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&lattice, &mut rng, rate);
        let sol = solve_bsdej(&spec, &lattice, Scheme::Dp).unwrap();
        let contender = random_measure(&lattice, &mut rng, 0.05);
        let against =
            criterion_gamma(&spec, &contender, &lattice, EntropyForm::StepwiseKl).unwrap();
        prop_assert!(against >= sol.value() - 1e-10);
        let attained =
            criterion_gamma(&spec, &sol.qstar, &lattice, EntropyForm::StepwiseKl).unwrap();
        prop_assert!((attained - sol.value()).abs() <= 1e-9);
    }

    #[test]
    fn value_gradient_matches_finite_differences(seed in any::<u64>(), rate in 0.0f64..0.8) {
        let lattice = mixed_tree(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&lattice, &mut rng, rate);
        let direction = AdaptedProcess {
            values: (0..lattice.num_nodes())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        };
        let du_bar: Vec<f64> = (0..lattice.leaf_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let eps = 1e-5;
        for scheme in [Scheme::Dp, Scheme::Recursion] {
            let sol = solve_bsdej(&spec, &lattice, scheme).unwrap();
            let grad = gateaux_derivative(&sol, &spec, &lattice, &direction, &du_bar).unwrap();
            let bump = |sign: f64| -> f64 {
                let moved = CriterionSpec {
                    u: AdaptedProcess {
                        values: spec
                            .u
                            .values
                            .iter()
                            .zip(&direction.values)
                            .map(|(u, a)| u + sign * eps * a)
                            .collect(),
                    },
                    u_bar: spec
                        .u_bar
                        .iter()
                        .zip(&du_bar)
                        .map(|(u, a)| u + sign * eps * a)
                        .collect(),
                    discount: spec.discount.clone(),
                    beta: 1.0,
                };
                solve_bsdej(&moved, &lattice, scheme).unwrap().value()
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * eps);
            prop_assert!(
                (grad - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "scheme {:?}: {} vs {}",
                scheme,
                grad,
                fd
            );
        }
    }

    #[test]
    fn marginal_utility_inverts(exponent in -6.0f64..6.0, gamma in 0.05f64..0.95) {
        let x = 10f64.powf(exponent);
        for utility in [Utility::Log, Utility::Power { gamma }] {
            let back: f64 = utility.inverse_marginal(utility.marginal(x));
            prop_assert!((back - x).abs() <= 1e-12 * x);
            // Marginal utility decreases: concavity seen through the derivative.
            prop_assert!(utility.marginal(x * 1.5) < utility.marginal(x));
        }
    }
}

#[test]
fn single_precision_solves_track_double_precision() {
    let grid32 = TimeGrid::<f32>::uniform(0.6, 4);
    let lat32 = build_lattice(grid32, 1, 1, |_, _| vec![0.25f32], LatticeKind::Tree).unwrap();
    let grid64 = TimeGrid::<f64>::uniform(0.6, 4);
    let lat64 = build_lattice(grid64, 1, 1, |_, _| vec![0.25f64], LatticeKind::Tree).unwrap();
    let u32v = AdaptedProcess {
        values: (0..lat32.num_nodes())
            .map(|n| ((n % 7) as f32 - 3.0) / 4.0)
            .collect::<Vec<f32>>(),
    };
    let u64v = AdaptedProcess {
        values: (0..lat64.num_nodes())
            .map(|n| ((n % 7) as f64 - 3.0) / 4.0)
            .collect::<Vec<f64>>(),
    };
    let spec32 = CriterionSpec {
        u: u32v,
        u_bar: vec![0.25f32; lat32.leaf_count()],
        discount: DiscountSpec::constant(0.4f32, &lat32).unwrap(),
        beta: 1.5,
    };
    let spec64 = CriterionSpec {
        u: u64v,
        u_bar: vec![0.25f64; lat64.leaf_count()],
        discount: DiscountSpec::constant(0.4f64, &lat64).unwrap(),
        beta: 1.5,
    };
    for scheme in [Scheme::Dp, Scheme::Recursion] {
        let y32 = solve_bsdej(&spec32, &lat32, scheme).unwrap().value() as f64;
        let y64 = solve_bsdej(&spec64, &lat64, scheme).unwrap().value();
        assert!((y32 - y64).abs() <= 1e-3, "{scheme:?}: {y32} vs {y64}");
    }
}
