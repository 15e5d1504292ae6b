//! Independent brute-force checks: simplex grid minimization of the
//! penalized one-step problem, grid-based backward induction, random
//! measure sampling and concavity probes.
//!
//! Nothing here shares formulas with the solver; these routines exist to
//! confirm it from the definition of the minimization problem.

use rand::Rng;

use crate::error::Result;
use crate::lattice::Lattice;
use crate::measure::{beta_reduce, kl_divergence, CriterionSpec, NodeMeasure};
use crate::scalar::Scalar;

/// Visits every probability vector with `n` entries on the grid of
/// resolution `1/m` (all compositions of `m` into `n` parts).
pub fn for_each_simplex_point<S: Scalar>(n: usize, m: usize, mut visit: impl FnMut(&[S])) {
    assert!(n >= 1 && m >= 1);
    let mut counts = vec![0usize; n];
    let mut point = vec![S::zero(); n];
    let scale = S::from_usize(m).unwrap().recip();
    fn rec<S: Scalar>(
        i: usize,
        left: usize,
        counts: &mut [usize],
        point: &mut [S],
        scale: S,
        visit: &mut impl FnMut(&[S]),
    ) {
        if i + 1 == counts.len() {
            counts[i] = left;
            point[i] = S::from_usize(left).unwrap() * scale;
            visit(point);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            point[i] = S::from_usize(c).unwrap() * scale;
            rec(i + 1, left - c, counts, point, scale, visit);
        }
    }
    rec(0, m, &mut counts, &mut point, scale, &mut visit);
}

/// Minimum and minimizer found by exhaustive grid search.
#[derive(Debug, Clone)]
pub struct GridMin<S> {
    pub value: S,
    pub argmin: Vec<S>,
}

/// Minimizes `q . v + KL(q || p)` over the simplex grid of resolution `1/m`.
///
/// The result upper-bounds the true minimum `-ln sum p e^{-v}`, with a gap
/// controlled by the grid spacing.
pub fn dv_onestep_grid<S: Scalar>(probs: &[S], values: &[S], m: usize) -> GridMin<S> {
    assert_eq!(probs.len(), values.len());
    let mut best = GridMin {
        value: S::infinity(),
        argmin: vec![S::zero(); probs.len()],
    };
    for_each_simplex_point(probs.len(), m, |q| {
        let mut obj = kl_divergence(q, probs);
        for (&qi, &vi) in q.iter().zip(values) {
            obj += qi * vi;
        }
        if obj < best.value {
            best.value = obj;
            best.argmin.copy_from_slice(q);
        }
    });
    best
}

/// Backward induction with per-node exhaustive grid minimization; an
/// independent reference for the dynamic-programming scheme.
///
/// At each node the continuation values are discounted by the node's
/// one-step factor and the penalized transition problem is minimized over
/// the simplex grid, so the result upper-bounds the solver's root value by
/// monotonicity of the recursion in its continuation data.
pub fn tree_min_grid<S: Scalar>(
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
    m: usize,
) -> Result<S> {
    spec.check(lattice)?;
    let red = beta_reduce(spec)?;
    let dt = lattice.grid().dt();
    let mut v = vec![S::zero(); lattice.num_nodes()];
    let leaf_start = lattice.leaf_range().start;
    for node in lattice.leaf_range() {
        v[node] = red.u_bar[node - leaf_start];
    }
    for k in (0..lattice.steps()).rev() {
        for node in lattice.slice(k) {
            let edges = lattice.children(node);
            let fac = red.discount.step_factor[node];
            let probs: Vec<S> = edges.iter().map(|e| e.prob).collect();
            let w: Vec<S> = edges.iter().map(|e| fac * v[e.child as usize]).collect();
            v[node] = red.u.values[node] * dt + dv_onestep_grid(&probs, &w, m).value;
        }
    }
    Ok(spec.beta * v[0])
}

/// Random measure equivalent to the base one: every transition probability
/// is the base probability times a uniform draw from `[floor, 1]`,
/// renormalized per node. Draws happen in node order, so a seeded generator
/// reproduces the measure.
pub fn random_measure<S: Scalar, R: Rng>(
    lattice: &Lattice<S>,
    rng: &mut R,
    floor: f64,
) -> NodeMeasure<S> {
    assert!((0.0..1.0).contains(&floor) && floor > 0.0);
    let mut q = NodeMeasure::base(lattice);
    let mut probs = vec![S::zero(); lattice.fanout()];
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let mut sum = S::zero();
            for (slot, e) in probs.iter_mut().zip(lattice.children(node)) {
                *slot = e.prob * S::from_f64(rng.gen_range(floor..=1.0)).unwrap();
                sum += *slot;
            }
            probs.iter_mut().for_each(|x| *x /= sum);
            q.set_node_probs(lattice, node, &probs);
        }
    }
    q
}

/// Smallest midpoint concavity defect of `f` over `samples` random pairs in
/// `[lo, hi]`: nonnegative results are consistent with concavity.
pub fn concavity_check<S: Scalar, R: Rng>(
    f: impl Fn(S) -> S,
    lo: S,
    hi: S,
    samples: usize,
    rng: &mut R,
) -> S {
    let lo_f = lo.to_f64().unwrap();
    let hi_f = hi.to_f64().unwrap();
    let mut worst = S::infinity();
    let two = S::one() + S::one();
    for _ in 0..samples {
        let a = S::from_f64(rng.gen_range(lo_f..=hi_f)).unwrap();
        let b = S::from_f64(rng.gen_range(lo_f..=hi_f)).unwrap();
        let defect = f((a + b) / two) - (f(a) + f(b)) / two;
        worst = worst.min(defect);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{one_step_entropic, one_step_minimizer, solve_bsdej, Scheme};
    use crate::lattice::{build_lattice, DiscountSpec, LatticeKind, TimeGrid};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simplex_grid_enumerates_all_compositions() {
        let mut count = 0usize;
        let mut sums_ok = true;
        for_each_simplex_point::<f64>(3, 4, |q| {
            count += 1;
            sums_ok &= (q.iter().sum::<f64>() - 1.0).abs() < 1e-15;
        });
        // Compositions of 4 into 3 parts: C(6, 2).
        assert_eq!(count, 15);
        assert!(sums_ok);
    }

    #[test]
    fn grid_minimum_brackets_the_entropic_value() {
        let p = [0.35, 0.15, 0.35, 0.15];
        let v = [0.0, 1.0, -0.5, 0.25];
        let exact = one_step_entropic(&p, &v);
        let grid = dv_onestep_grid(&p, &v, 50);
        assert!(grid.value >= exact - 1e-14);
        assert!(grid.value <= exact + 2e-3, "gap {}", grid.value - exact);
        let qstar = one_step_minimizer(&p, &v);
        for (g, q) in grid.argmin.iter().zip(&qstar) {
            assert_abs_diff_eq!(g, q, epsilon = 0.03);
        }
    }

    #[test]
    fn grid_induction_brackets_the_dp_solution() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 3),
            1,
            1,
            |_, _| vec![0.4],
            LatticeKind::Tree,
        )
        .unwrap();
        let spec = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, _| 0.3 - t, &lat),
            u_bar: crate::lattice::terminal_from_fn(
                |s| 0.4 * s.bsum[0] as f64 - 0.3 * s.jumps[0] as f64,
                &lat,
            ),
            discount: DiscountSpec::constant(0.6, &lat).unwrap(),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let grid = tree_min_grid(&spec, &lat, 60).unwrap();
        assert!(grid >= sol.value() - 1e-13);
        assert!(grid <= sol.value() + 5e-3, "gap {}", grid - sol.value());
    }

    #[test]
    fn random_measures_are_valid_and_reproducible() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 4),
            1,
            1,
            |_, _| vec![0.3],
            LatticeKind::Tree,
        )
        .unwrap();
        let a = random_measure(&lat, &mut ChaCha8Rng::seed_from_u64(11), 0.1);
        let b = random_measure(&lat, &mut ChaCha8Rng::seed_from_u64(11), 0.1);
        a.check(&lat).unwrap();
        assert_eq!(a, b);
        let c = random_measure(&lat, &mut ChaCha8Rng::seed_from_u64(12), 0.1);
        assert_ne!(a, c);
    }

    #[test]
    fn concavity_probe_separates_ln_from_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ln_defect = concavity_check(|x: f64| x.ln(), 0.1, 5.0, 500, &mut rng);
        assert!(ln_defect >= 0.0);
        let exp_defect = concavity_check(|x: f64| x.exp(), 0.1, 5.0, 500, &mut rng);
        assert!(exp_defect < 0.0);
    }

    #[test]
    fn grid_minimum_with_a_degenerate_optimum() {
        // Large spread pushes the optimum toward a vertex; the grid search
        // must handle zero entries through the 0 ln 0 convention.
        let p = [0.5, 0.5];
        let v = [0.0, 50.0];
        let grid = dv_onestep_grid(&p, &v, 100);
        let exact = one_step_entropic(&p, &v);
        assert!(grid.value >= exact - 1e-14);
        assert!(grid.value - exact < 0.05);
    }
}
