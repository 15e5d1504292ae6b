//! Logarithmic-utility closed forms: the deterministic weight `alpha`, the
//! slope transform `k = -alpha / (1 + alpha)`, the auxiliary measure built
//! from them, and the decomposition `value = alpha ln c* + (1 + alpha) J`
//! with its deterministic reference equation for `J`.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, DiscountSpec, Lattice, LatticeKind, TimeGrid};
use crate::measure::{GirsanovTilt, NodeMeasure};
use crate::scalar::{lit, Scalar};

/// Integrates `alpha' = rate * alpha - 1`, `alpha(horizon) = 0`, backward
/// over the grid. `rates` holds the deterministic rate at each grid time.
///
/// Each step uses the exact exponential formula for a rate frozen on the
/// step, so constant rates reproduce `(1 - e^{-rate (T - t)}) / rate` to
/// roundoff and a zero rate gives exactly `T - t`.
pub fn alpha_solve<S: Scalar>(rates: &[S], grid: &TimeGrid<S>) -> Vec<S> {
    assert_eq!(rates.len(), grid.steps() + 1);
    let dt = grid.dt();
    let mut alpha = vec![S::zero(); grid.steps() + 1];
    for k in (0..grid.steps()).rev() {
        let r = rates[k];
        let integral = if r == S::zero() {
            dt
        } else {
            -(-r * dt).exp_m1() / r
        };
        alpha[k] = integral + (-r * dt).exp() * alpha[k + 1];
    }
    alpha
}

/// `k = -alpha / (1 + alpha)`; satisfies `(1 + k)(1 + alpha) = 1`.
pub fn kfun<S: Scalar>(alpha: S) -> Result<S> {
    let denom = S::one() + alpha;
    if denom == S::zero() {
        return Err(Error::Singular {
            value: denom.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(-alpha / denom)
}

/// [`kfun`] on a whole grid of values.
pub fn kfun_values<S: Scalar>(alpha: &[S]) -> Result<Vec<S>> {
    alpha.iter().map(|&a| kfun(a)).collect()
}

/// Measure with per-step weights `prod_m (1 - k theta_m b_m sqrt(dt))` on the
/// Brownian signs and `exp(k z_j)` on jump outcome `j`, renormalized per
/// node; `k` is read off the node's time slice.
///
/// Under the result the mean Brownian increment is exactly `-k theta dt` per
/// coordinate, and the implied jump intensity is `exp(k z_j) lambda_j` up to
/// O(dt).
pub fn pbar_measure<S: Scalar>(
    k: &[S],
    tilt: &GirsanovTilt<S>,
    lattice: &Lattice<S>,
) -> Result<NodeMeasure<S>> {
    assert_eq!(k.len(), lattice.steps() + 1);
    assert_eq!(tilt.theta.len(), lattice.brownian_dim());
    assert_eq!(tilt.z.len(), lattice.jump_channels());
    let sq = lattice.grid().dt().sqrt();
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let fanout = lattice.fanout();

    let mut q = Vec::with_capacity(lattice.edges_flat().len());
    let mut weight = vec![S::one(); fanout];
    for kk in 0..lattice.steps() {
        let kt = k[kk];
        for &th in &tilt.theta {
            let worst = S::one() - (kt * th).abs() * sq;
            if !(worst > S::zero()) {
                return Err(Error::TiltTooLarge {
                    factor: worst.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        if lattice.kind() != LatticeKind::SinglePath {
            for bidx in 0..(1usize << p) {
                let mut wb = S::one();
                for (m, &th) in tilt.theta.iter().enumerate() {
                    let inc = if bidx >> m & 1 == 1 { sq } else { -sq };
                    wb *= S::one() - kt * th * inc;
                }
                for j in 0..=d {
                    weight[bidx * (d + 1) + j] = if j == 0 {
                        wb
                    } else {
                        wb * (kt * tilt.z[j - 1]).exp()
                    };
                }
            }
        }
        for node in lattice.slice(kk) {
            let start = q.len();
            let mut sum = S::zero();
            for (e, &w) in lattice.children(node).iter().zip(weight.iter()) {
                let u = e.prob * w;
                q.push(u);
                sum += u;
            }
            for qe in &mut q[start..] {
                *qe /= sum;
            }
        }
    }
    NodeMeasure::from_edge_probs(q, lattice)
}

/// Inverts the decomposition `v = alpha ln c* + (1 + alpha) j` node by node.
pub fn extract_j<S: Scalar>(
    v: &AdaptedProcess<S>,
    cstar: &AdaptedProcess<S>,
    alpha: &[S],
    lattice: &Lattice<S>,
) -> Result<Vec<S>> {
    v.check_len(lattice)?;
    cstar.check_len(lattice)?;
    assert_eq!(alpha.len(), lattice.steps() + 1);
    let mut j = vec![S::zero(); lattice.num_nodes()];
    for k in 0..=lattice.steps() {
        let a = alpha[k];
        let denom = S::one() + a;
        if denom == S::zero() {
            return Err(Error::Singular {
                value: denom.to_f64().unwrap_or(f64::NAN),
            });
        }
        for node in lattice.slice(k) {
            let c = cstar.values[node];
            if !(c > S::zero()) {
                return Err(Error::NonpositivePlan {
                    value: c.to_f64().unwrap_or(f64::NAN),
                });
            }
            j[node] = (v.values[node] - a * c.ln()) / denom;
        }
    }
    Ok(j)
}

/// Deterministic reference for `j` under constant-in-state coefficients:
/// backward Euler on
/// `j' = (1 + rate)(1 + k) j - k rate + k (1 + k) |theta|^2 / 2
///        + sum_i (k (e^{-z_i} - 1) + e^{k z_i} - 1) lambda_i`,
/// `j(horizon) = 0`, with `k` from [`alpha_solve`] and [`kfun`].
pub fn solve_j_ode<S: Scalar>(
    rates: &[S],
    lambda: &[S],
    z: &[S],
    theta: &[S],
    grid: &TimeGrid<S>,
) -> Result<Vec<S>> {
    assert_eq!(rates.len(), grid.steps() + 1);
    assert_eq!(lambda.len(), z.len());
    let alpha = alpha_solve(rates, grid);
    let kv = kfun_values(&alpha)?;
    let dt = grid.dt();
    let half = lit::<S>(0.5);
    let theta_sq = theta.iter().fold(S::zero(), |a, &t| a + t * t);
    let mut j = vec![S::zero(); grid.steps() + 1];
    for k in (0..grid.steps()).rev() {
        let kt = kv[k];
        let one_k = S::one() + kt;
        let mut source = -kt * rates[k] + half * kt * one_k * theta_sq;
        for (&lam, &zi) in lambda.iter().zip(z) {
            source += (kt * ((-zi).exp() - S::one()) + (kt * zi).exp() - S::one()) * lam;
        }
        // Implicit in the linear term, so the step is stable for any dt.
        j[k] = (j[k + 1] - dt * source) / (S::one() + dt * (S::one() + rates[k]) * one_k);
    }
    Ok(j)
}

/// Forward formula for the optimal consumption of the logarithmic problem:
/// `c* = sdelta zstar / (nu ztilde)` per node, given the two path densities.
pub fn cstar_forward<S: Scalar>(
    nu: S,
    zstar: &[S],
    ztilde: &[S],
    discount: &DiscountSpec<S>,
    lattice: &Lattice<S>,
) -> Result<AdaptedProcess<S>> {
    if !(nu > S::zero()) {
        return Err(Error::NonpositiveNu {
            value: nu.to_f64().unwrap_or(f64::NAN),
        });
    }
    if zstar.len() != lattice.num_nodes() || ztilde.len() != lattice.num_nodes() {
        return Err(Error::MismatchedLattice {
            got: zstar.len().min(ztilde.len()),
            expected: lattice.num_nodes(),
        });
    }
    let values = (0..lattice.num_nodes())
        .map(|n| {
            debug_assert!(zstar[n] > S::zero() && ztilde[n] > S::zero());
            discount.sdelta[n] * zstar[n] / (nu * ztilde[n])
        })
        .collect();
    Ok(AdaptedProcess { values })
}

/// Everything the logarithmic closed form yields on one lattice.
#[derive(Debug, Clone)]
pub struct LogCaseSolution<S> {
    /// Deterministic weight per grid time.
    pub alpha: Vec<S>,
    /// Slope transform per grid time.
    pub k: Vec<S>,
    /// Multiplier used for the plan.
    pub nu: S,
    /// Optimal consumption per node.
    pub cstar: AdaptedProcess<S>,
    /// Robust value per node.
    pub v: AdaptedProcess<S>,
    /// Extracted remainder per node.
    pub j: Vec<S>,
    /// Deterministic reference remainder per grid time.
    pub j_ode: Vec<S>,
    /// Auxiliary measure built from `k` and the pricing tilt.
    pub pbar: NodeMeasure<S>,
}

impl<S: Scalar> LogCaseSolution<S> {
    /// Per-slice mean and standard deviation of the extracted remainder,
    /// both weighted by the base-measure probability of reaching each node.
    ///
    /// Weighting matters: a slice also contains paths whose probability
    /// vanishes with the step (every step jumping, say), and the remainder's
    /// per-step drift away from its deterministic limit never averages out
    /// along those. A plain max minus min is pinned to such corners and
    /// stalls at O(1); the weighted deviation shrinks at O(dt).
    pub fn j_slice_stats(&self, lattice: &Lattice<S>) -> Vec<(S, S)> {
        let mut reach = vec![S::zero(); lattice.num_nodes()];
        reach[0] = S::one();
        for k in 0..lattice.steps() {
            for node in lattice.slice(k) {
                let r = reach[node];
                for e in lattice.children(node) {
                    reach[e.child as usize] += r * e.prob;
                }
            }
        }
        (0..=lattice.steps())
            .map(|k| {
                let slice = lattice.slice(k);
                let mut mean = S::zero();
                for node in slice.clone() {
                    mean += reach[node] * self.j[node];
                }
                let mut var = S::zero();
                for node in slice {
                    let dev = self.j[node] - mean;
                    var += reach[node] * dev * dev;
                }
                (mean, var.max(S::zero()).sqrt())
            })
            .collect()
    }

    /// Largest gap between the slice means of the extracted remainder and
    /// the deterministic reference.
    pub fn j_gap(&self, lattice: &Lattice<S>) -> S {
        self.j_slice_stats(lattice)
            .iter()
            .zip(&self.j_ode)
            .fold(S::zero(), |worst, ((mean, _), &ode)| {
                worst.max((*mean - ode).abs())
            })
    }

    /// Largest reconstruction residual `v - alpha ln c* - (1 + alpha) j`;
    /// zero up to roundoff by construction of the extraction.
    pub fn reconstruction_residual(&self, lattice: &Lattice<S>) -> S {
        let mut worst = S::zero();
        for k in 0..=lattice.steps() {
            let a = self.alpha[k];
            for node in lattice.slice(k) {
                let rec = a * self.cstar.values[node].ln() + (S::one() + a) * self.j[node];
                worst = worst.max((self.v.values[node] - rec).abs());
            }
        }
        worst
    }
}

/// Runs the whole logarithmic pipeline on one lattice: fixed-point plan at
/// multiplier `nu` under the tilt-induced pricing measure, then the
/// deterministic functions, the extraction and the reference equation.
///
/// The rate must depend on time only, and the reference column is
/// meaningful when the jump intensities are constant as well (the root
/// values are used).
pub fn solve_log_case<S: Scalar>(
    lattice: &Lattice<S>,
    tilt: &GirsanovTilt<S>,
    discount: &DiscountSpec<S>,
    nu: S,
    scheme: crate::bsde::Scheme,
    opts: &crate::plan::SolveOptions,
) -> Result<LogCaseSolution<S>> {
    if !(nu > S::zero()) {
        return Err(Error::NonpositiveNu {
            value: nu.to_f64().unwrap_or(f64::NAN),
        });
    }
    let rates = discount
        .deterministic_rates(lattice)
        .ok_or(Error::StateDependentRate)?;
    let pricing = crate::measure::tilt_to_measure(tilt, lattice)?;
    let problem = crate::plan::PlanProblem {
        utility: crate::plan::UtilityPair {
            running: crate::plan::Utility::Log,
            terminal: None,
        },
        discount: discount.clone(),
        beta: S::one(),
        pricing,
        capital: lattice.grid().horizon() / nu,
    };
    let fp = crate::plan::solve_fixed_point(&problem, lattice, scheme, nu, None, opts)?;
    let alpha = alpha_solve(&rates, lattice.grid());
    let k = kfun_values(&alpha)?;
    let v = AdaptedProcess {
        values: fp.solution.y.clone(),
    };
    let j = extract_j(&v, &fp.plan.c, &alpha, lattice)?;
    let j_ode = solve_j_ode(
        &rates,
        lattice.lambda(0),
        &tilt.z,
        &tilt.theta,
        lattice.grid(),
    )?;
    let pbar = pbar_measure(&k, tilt, lattice)?;
    Ok(LogCaseSolution {
        alpha,
        k,
        nu,
        cstar: fp.plan.c,
        v,
        j,
        j_ode,
        pbar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, LatticeKind, StateView};
    use approx::assert_abs_diff_eq;

    fn no_jumps(_: f64, _: StateView<'_>) -> Vec<f64> {
        vec![]
    }

    #[test]
    fn alpha_zero_rate_is_time_to_horizon() {
        let grid = TimeGrid::uniform(2.0, 8);
        let alpha = alpha_solve(&[0.0; 9], &grid);
        for k in 0..=8 {
            assert_abs_diff_eq!(alpha[k], 2.0 - grid.time(k), epsilon = 1e-15);
        }
    }

    #[test]
    fn alpha_constant_rate_matches_closed_form() {
        let grid = TimeGrid::uniform(1.0, 16);
        let alpha = alpha_solve(&[1.0; 17], &grid);
        assert_abs_diff_eq!(alpha[0], 0.6321205588285577, epsilon = 1e-15);
        assert_eq!(alpha[16], 0.0);
        for k in 0..=16 {
            let t: f64 = grid.time(k);
            assert_abs_diff_eq!(alpha[k], 1.0 - (-(1.0 - t)).exp(), epsilon = 1e-14);
            assert!(k == 16 || alpha[k] > 0.0);
        }
    }

    #[test]
    fn k_transform_and_its_identity() {
        assert_eq!(kfun(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(kfun(1.0).unwrap(), -0.5, epsilon = 1e-16);
        assert!(matches!(kfun(-1.0), Err(Error::Singular { .. })));
        for &a in &[0.0, 0.3, 1.7, 12.0] {
            let k = kfun(a).unwrap();
            assert_abs_diff_eq!((1.0 + k) * (1.0 + a), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn pbar_with_zero_k_is_the_base_measure() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 3),
            1,
            1,
            |_, _| vec![0.3],
            LatticeKind::Tree,
        )
        .unwrap();
        let tilt = GirsanovTilt {
            theta: vec![0.7],
            z: vec![0.4],
        };
        let pbar = pbar_measure(&[0.0; 4], &tilt, &lat).unwrap();
        assert_eq!(pbar, NodeMeasure::base(&lat));
    }

    #[test]
    fn pbar_weights_follow_the_stated_formula() {
        // Jump-only single step: base (0.7, 0.3), jump weight e^{k z}.
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 1),
            0,
            1,
            |_, _| vec![0.3],
            LatticeKind::Tree,
        )
        .unwrap();
        let tilt = GirsanovTilt {
            theta: vec![],
            z: vec![2.0f64.ln()],
        };
        let k = vec![-0.5; 2];
        let pbar = pbar_measure(&k, &tilt, &lat).unwrap();
        let w = (-0.5 * 2.0f64.ln()).exp();
        assert_abs_diff_eq!(w, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-16);
        let norm = 0.7 + 0.3 * w;
        let probs = pbar.node_probs(&lat, 0);
        assert_abs_diff_eq!(probs[0], 0.7 / norm, epsilon = 1e-15);
        assert_abs_diff_eq!(probs[1], 0.3 * w / norm, epsilon = 1e-15);
    }

    #[test]
    fn pbar_brownian_mean_is_exactly_minus_k_theta() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 4),
            2,
            1,
            |_, _| vec![0.5],
            LatticeKind::Tree,
        )
        .unwrap();
        let tilt = GirsanovTilt {
            theta: vec![0.8, -0.3],
            z: vec![0.6],
        };
        let grid = TimeGrid::uniform(1.0, 4);
        let alpha = alpha_solve(&[0.7; 5], &grid);
        let kv = kfun_values(&alpha).unwrap();
        let pbar = pbar_measure(&kv, &tilt, &lat).unwrap();
        for kk in 0..lat.steps() {
            for node in lat.slice(kk) {
                let drift = pbar.implied_drift(&lat, node);
                assert_abs_diff_eq!(drift[0], -kv[kk] * 0.8, epsilon = 1e-13);
                assert_abs_diff_eq!(drift[1], -kv[kk] * -0.3, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn pbar_rejects_oversized_slope() {
        let lat = build_lattice(
            TimeGrid::uniform(4.0, 4),
            1,
            0,
            no_jumps,
            LatticeKind::Tree,
        )
        .unwrap();
        let tilt = GirsanovTilt {
            theta: vec![1.2],
            z: vec![],
        };
        let k = vec![-1.0; 5];
        assert!(matches!(
            pbar_measure(&k, &tilt, &lat),
            Err(Error::TiltTooLarge { .. })
        ));
    }

    #[test]
    fn extraction_inverts_the_decomposition() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 4),
            1,
            0,
            no_jumps,
            LatticeKind::Tree,
        )
        .unwrap();
        let grid = *lat.grid();
        let alpha = alpha_solve(&[0.5; 5], &grid);
        let v = crate::lattice::adapted_from_fn(|t, s| 0.3 * t - 0.1 * s.bsum[0] as f64, &lat);
        let cstar = crate::lattice::adapted_from_fn(
            |_, s| (0.2 * s.bsum[0] as f64).exp(),
            &lat,
        );
        let j = extract_j(&v, &cstar, &alpha, &lat).unwrap();
        for k in 0..=lat.steps() {
            let a = alpha[k];
            for node in lat.slice(k) {
                let rec = a * cstar.values[node].ln() + (1.0 + a) * j[node];
                assert_abs_diff_eq!(v.values[node], rec, epsilon = 1e-14);
            }
        }
        // Terminal slice: alpha is 0 there, so j equals v.
        for node in lat.leaf_range() {
            assert_eq!(j[node], v.values[node]);
        }
    }

    #[test]
    fn j_reference_vanishes_without_discounting() {
        // rate = 0 kills the only source term when theta = 0 and no jumps.
        let grid = TimeGrid::uniform(1.0, 10);
        let j = solve_j_ode(&[0.0; 11], &[], &[], &[], &grid).unwrap();
        assert!(j.iter().all(|&x| x == 0.0));
        let j2 = solve_j_ode(&[1.0; 11], &[], &[], &[0.0], &grid).unwrap();
        assert_eq!(*j2.last().unwrap(), 0.0);
        assert!(j2[0] != 0.0);
    }

    #[test]
    fn j_reference_is_grid_stable() {
        let run = |steps: usize| -> f64 {
            let grid = TimeGrid::uniform(1.0, steps);
            solve_j_ode(
                &vec![0.8; steps + 1],
                &[0.4],
                &[0.3],
                &[0.5],
                &grid,
            )
            .unwrap()[0]
        };
        let coarse = run(64);
        let fine = run(128);
        let finer = run(256);
        let ratio = (coarse - fine).abs() / (fine - finer).abs();
        assert!(
            (1.5..=2.5).contains(&ratio),
            "first-order convergence expected, ratio {ratio}"
        );
    }

    #[test]
    fn pipeline_decomposes_the_value_process() {
        use crate::bsde::Scheme;
        use crate::plan::SolveOptions;
        let run = |steps: usize| {
            let lat = build_lattice(
                TimeGrid::uniform(1.0, steps),
                1,
                1,
                |_, _| vec![0.4],
                LatticeKind::Tree,
            )
            .unwrap();
            let tilt = GirsanovTilt {
                theta: vec![0.3],
                z: vec![0.2],
            };
            let disc = DiscountSpec::constant(0.5, &lat).unwrap();
            let sol = solve_log_case(
                &lat,
                &tilt,
                &disc,
                1.0,
                Scheme::Dp,
                &SolveOptions::default(),
            )
            .unwrap();
            assert!(sol.reconstruction_residual(&lat) < 1e-12);
            // No terminal reward, so the value and the remainder vanish at
            // the horizon.
            for node in lat.leaf_range() {
                assert_eq!(sol.j[node], 0.0);
            }
            let spread = sol
                .j_slice_stats(&lat)
                .iter()
                .fold(0.0f64, |w, &(_, s)| w.max(s));
            (spread, sol.j_gap(&lat))
        };
        let (spread8, gap8) = run(8);
        assert!(spread8 < 0.05, "slice spread {spread8}");
        assert!(gap8 < 0.05, "reference gap {gap8}");
        let (spread4, gap4) = run(4);
        assert!(
            spread8 < spread4,
            "spread should shrink with dt: {spread4} -> {spread8}"
        );
        assert!(gap8 < gap4, "gap should shrink with dt: {gap4} -> {gap8}");
    }

    #[test]
    fn cstar_formula_matches_the_candidate_plan() {
        use crate::bsde::Scheme;
        use crate::measure::tilt_to_measure;
        use crate::plan::{
            candidate_plan, plan_value, Plan, PlanProblem, Utility, UtilityPair,
        };
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 3),
            1,
            1,
            |_, _| vec![0.4],
            LatticeKind::Tree,
        )
        .unwrap();
        let tilt = GirsanovTilt {
            theta: vec![0.4],
            z: vec![-0.3],
        };
        let pricing = tilt_to_measure(&tilt, &lat).unwrap();
        let problem = PlanProblem {
            utility: UtilityPair {
                running: Utility::Log,
                terminal: None,
            },
            discount: DiscountSpec::constant(0.6, &lat).unwrap(),
            beta: 1.0,
            pricing: pricing.clone(),
            capital: 1.0,
        };
        let plan = Plan::flat(&lat, 0.9, None);
        let sol = plan_value(&problem, &plan, &lat, Scheme::Dp).unwrap();
        let nu = 1.3;
        let cand = candidate_plan(&problem, &sol, &lat, nu).unwrap();
        let direct = cstar_forward(
            nu,
            &sol.qstar.density(&lat).unwrap(),
            &pricing.density(&lat).unwrap(),
            &problem.discount,
            &lat,
        )
        .unwrap();
        for node in 0..lat.num_nodes() {
            assert_abs_diff_eq!(
                cand.c.values[node],
                direct.values[node],
                epsilon = 1e-12
            );
        }
        assert!(matches!(
            cstar_forward(
                0.0,
                &sol.qstar.density(&lat).unwrap(),
                &pricing.density(&lat).unwrap(),
                &problem.discount,
                &lat,
            ),
            Err(Error::NonpositiveNu { .. })
        ));
    }
}
