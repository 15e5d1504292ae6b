//! Backward solver for the entropy-penalized value process, its martingale
//! loadings, the induced worst-case measure and the verification identities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, Lattice, LatticeKind};
use crate::measure::{beta_reduce, CriterionSpec, NodeMeasure};
use crate::scalar::{lit, Scalar};

/// Penalty function of the quadratic-exponential driver: `e^{-x} + x - 1`.
/// Nonnegative, strictly convex, zero only at the origin.
pub fn driver_g<S: Scalar>(x: S) -> S {
    (-x).exp_m1() + x
}

/// Backward discretizations of the value process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// `y = u dt - ln sum p exp(-exp(-rate dt) y_child)`.
    ///
    /// Makes the minimax duality against the stepwise-KL criterion and the
    /// one-sided comparison bound hold exactly on the lattice.
    Dp,
    /// `y = (u dt - ln sum p exp(-y_child)) / (1 + rate dt)`.
    ///
    /// Makes the multi-step recursion identity and the exponential-martingale
    /// property hold exactly on the lattice.
    Recursion,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Dp => "dp",
            Scheme::Recursion => "recursion",
        }
    }
}

/// `-ln sum_i p_i exp(-v_i)`, shifted by the smallest value for stability.
pub fn one_step_entropic<S: Scalar>(probs: &[S], values: &[S]) -> S {
    debug_assert_eq!(probs.len(), values.len());
    let m = values.iter().cloned().fold(S::infinity(), S::min);
    let mut sum = S::zero();
    for (&p, &v) in probs.iter().zip(values) {
        sum += p * (m - v).exp();
    }
    m - sum.ln()
}

/// Minimizer of `q . v + KL(q || p)`: the Gibbs reweighting `q ∝ p e^{-v}`.
pub fn one_step_minimizer<S: Scalar>(probs: &[S], values: &[S]) -> Vec<S> {
    let m = values.iter().cloned().fold(S::infinity(), S::min);
    let mut q: Vec<S> = probs
        .iter()
        .zip(values)
        .map(|(&p, &v)| p * (m - v).exp())
        .collect();
    let sum = q.iter().fold(S::zero(), |a, &b| a + b);
    q.iter_mut().for_each(|qi| *qi /= sum);
    q
}

/// Output of [`solve_bsdej`]: the value process, its Brownian and jump
/// loadings, and the minimizing measure, all on the solving lattice.
#[derive(Debug, Clone)]
pub struct BsdeSolution<S> {
    pub scheme: Scheme,
    /// Value per node; equals the terminal data on the last slice.
    pub y: Vec<S>,
    /// Brownian loadings, `brownian_dim` entries per node (zero on leaves).
    pub z: Vec<S>,
    /// Jump loadings, `jump_channels` entries per node (zero on leaves).
    pub yjump: Vec<S>,
    /// Worst-case transition probabilities.
    pub qstar: NodeMeasure<S>,
}

impl<S: Scalar> BsdeSolution<S> {
    /// Value at the root.
    pub fn value(&self) -> S {
        self.y[0]
    }

    pub fn z_at(&self, lattice: &Lattice<S>, node: usize) -> &[S] {
        let p = lattice.brownian_dim();
        &self.z[node * p..(node + 1) * p]
    }

    pub fn yjump_at(&self, lattice: &Lattice<S>, node: usize) -> &[S] {
        let d = lattice.jump_channels();
        &self.yjump[node * d..(node + 1) * d]
    }
}

/// Solves the penalized backward equation by one sweep from the terminal
/// slice to the root.
///
/// The criterion is first rescaled to unit penalty weight; values and
/// loadings are scaled back by `beta` afterwards, while the minimizing
/// measure is invariant under that rescaling. Within each slice the nodes
/// are independent, so they are processed in parallel; every write lands in
/// a disjoint scratch chunk and results are scattered in node order, which
/// keeps the output identical for any thread count.
pub fn solve_bsdej<S: Scalar>(
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
    scheme: Scheme,
) -> Result<BsdeSolution<S>> {
    spec.check(lattice)?;
    let red = beta_reduce(spec)?;
    let n = lattice.num_nodes();
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let f = lattice.fanout();
    let dt = lattice.grid().dt();
    let sq = dt.sqrt();

    let mut y = vec![S::zero(); n];
    let mut z = vec![S::zero(); n * p];
    let mut yjump = vec![S::zero(); n * d];
    let mut q = vec![S::zero(); lattice.edges_flat().len()];

    let leaf_start = lattice.leaf_range().start;
    for node in lattice.leaf_range() {
        y[node] = red.u_bar[node - leaf_start];
    }

    // Scratch layout per node: value, z row, jump row, transition row.
    let chunk = 1 + p + d + f;
    for k in (0..lattice.steps()).rev() {
        let slice = lattice.slice(k);
        let mut scratch = vec![S::zero(); slice.len() * chunk];
        let y_ref = &y;
        let red_ref = &red;
        slice
            .clone()
            .into_par_iter()
            .zip(scratch.par_chunks_mut(chunk))
            .with_min_len(64)
            .for_each(|(node, out)| {
                let edges = lattice.children(node);
                let mut v = [S::zero(); 1 << MAX_LOCAL_LOG2];
                let v = &mut v[..f];
                match scheme {
                    Scheme::Dp => {
                        let fac = red_ref.discount.step_factor[node];
                        for (vi, e) in v.iter_mut().zip(edges) {
                            *vi = fac * y_ref[e.child as usize];
                        }
                    }
                    Scheme::Recursion => {
                        for (vi, e) in v.iter_mut().zip(edges) {
                            *vi = y_ref[e.child as usize];
                        }
                    }
                }

                let m = v.iter().cloned().fold(S::infinity(), S::min);
                let mut sum = S::zero();
                for (qi, (&vi, e)) in out[1 + p + d..].iter_mut().zip(v.iter().zip(edges)) {
                    *qi = e.prob * (m - vi).exp();
                    sum += *qi;
                }
                for qi in &mut out[1 + p + d..] {
                    *qi /= sum;
                }
                let lse = m - sum.ln();
                let u_dt = red_ref.u.values[node] * dt;
                out[0] = match scheme {
                    Scheme::Dp => u_dt + lse,
                    Scheme::Recursion => {
                        (u_dt + lse) / (S::one() + red_ref.discount.rate.values[node] * dt)
                    }
                };

                // Loadings from differences of child values on the raw
                // (undiscounted) scale.
                let two = lit::<S>(2.0);
                for m_ix in 0..p {
                    let mut up = S::zero();
                    let mut dn = S::zero();
                    for e in edges.iter().filter(|e| e.jump == 0) {
                        let yv = y_ref[e.child as usize];
                        if e.bsigns >> m_ix & 1 == 1 {
                            up += yv;
                        } else {
                            dn += yv;
                        }
                    }
                    let half = lit::<S>((1u64 << (p - 1)) as f64);
                    out[1 + m_ix] = (up - dn) / (half * two * sq);
                }
                if d > 0 {
                    let patterns = lit::<S>((1u64 << p) as f64);
                    let mut base = S::zero();
                    for e in edges.iter().filter(|e| e.jump == 0) {
                        base += y_ref[e.child as usize];
                    }
                    base /= patterns;
                    for j in 1..=d {
                        let mut avg = S::zero();
                        for e in edges.iter().filter(|e| e.jump == j as u8) {
                            avg += y_ref[e.child as usize];
                        }
                        out[1 + p + (j - 1)] = avg / patterns - base;
                    }
                }
            });

        for (i, node) in slice.clone().enumerate() {
            let out = &scratch[i * chunk..(i + 1) * chunk];
            y[node] = out[0];
            z[node * p..(node + 1) * p].copy_from_slice(&out[1..1 + p]);
            yjump[node * d..(node + 1) * d].copy_from_slice(&out[1 + p..1 + p + d]);
            q[node * f..(node + 1) * f].copy_from_slice(&out[1 + p + d..]);
        }
    }

    let beta = spec.beta;
    if beta != S::one() {
        y.iter_mut().for_each(|v| *v *= beta);
        z.iter_mut().for_each(|v| *v *= beta);
        yjump.iter_mut().for_each(|v| *v *= beta);
    }

    Ok(BsdeSolution {
        scheme,
        y,
        z,
        yjump,
        qstar: NodeMeasure::from_edge_probs(q, lattice)?,
    })
}

// Fanout bound for the per-node stack buffer: 2^MAX_BROWNIAN_DIM sign
// patterns times (MAX_JUMP_CHANNELS + 1) outcomes fits in 2^14.
const MAX_LOCAL_LOG2: usize = 14;

/// Zero-rate reference value: `-ln E[exp(-(sum_k u_k dt + u_bar))]`, the
/// closed form both schemes collapse to when the rate vanishes.
///
/// Accumulates along paths, so recombining lattices are rejected.
pub fn closed_form_zero_rate<S: Scalar>(
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
) -> Result<S> {
    assert!(
        spec.discount.zero,
        "closed form requires an identically zero rate"
    );
    if lattice.kind() == LatticeKind::Recombining {
        return Err(Error::RequiresTree {
            what: "the pathwise closed form",
        });
    }
    let red = beta_reduce(spec)?;
    let dt = lattice.grid().dt();
    // logw accumulates ln(path probability) - sum of rewards along the path.
    let mut logw = vec![S::zero(); lattice.num_nodes()];
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let base = logw[node] - red.u.values[node] * dt;
            for e in lattice.children(node) {
                logw[e.child as usize] = base + e.prob.ln();
            }
        }
    }
    let leaf_start = lattice.leaf_range().start;
    let mut m = S::neg_infinity();
    for node in lattice.leaf_range() {
        logw[node] -= red.u_bar[node - leaf_start];
        m = m.max(logw[node]);
    }
    let mut sum = S::zero();
    for node in lattice.leaf_range() {
        sum += (logw[node] - m).exp();
    }
    Ok(-spec.beta * (m + sum.ln()))
}

/// Largest absolute gap in the multi-step recursion identity
/// `y_from = -ln E[exp(-y_to + sum (rate * y - u) dt) | slice from]`
/// over all pairs `from < to`.
///
/// Exact (up to roundoff) for the recursion scheme; for the dp scheme the
/// returned residual measures its O(dt) deviation from the identity, which
/// is what refinement studies track.
pub fn verify_recursion<S: Scalar>(
    sol: &BsdeSolution<S>,
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
) -> Result<S> {
    spec.check(lattice)?;
    let red = beta_reduce(spec)?;
    let beta = spec.beta;
    let dt = lattice.grid().dt();
    let mut worst = S::zero();
    // One backward sweep per target slice; each sweep checks every earlier
    // slice, so all (from, to) pairs are covered in O(steps * edges).
    for to in 1..=lattice.steps() {
        let mut logw = vec![S::zero(); lattice.slice(to).end];
        for node in lattice.slice(to) {
            logw[node] = -sol.y[node] / beta;
        }
        for k in (0..to).rev() {
            for node in lattice.slice(k) {
                let edges = lattice.children(node);
                let mut m = S::neg_infinity();
                for e in edges {
                    m = m.max(logw[e.child as usize]);
                }
                let mut sum = S::zero();
                for e in edges {
                    sum += e.prob * (logw[e.child as usize] - m).exp();
                }
                let drift = (red.discount.rate.values[node] * sol.y[node] / beta
                    - red.u.values[node])
                    * dt;
                logw[node] = drift + m + sum.ln();
                worst = worst.max((sol.y[node] / beta + logw[node]).abs());
            }
        }
    }
    Ok(worst)
}

/// Exponential transform of the value process along paths:
/// `exp(-y_k + sum_{j<k} (rate_j y_j - u_j) dt)`, a base-measure martingale
/// for the recursion scheme. Path-dependent, hence tree only.
pub fn k_process<S: Scalar>(
    sol: &BsdeSolution<S>,
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
) -> Result<Vec<S>> {
    if lattice.kind() == LatticeKind::Recombining {
        return Err(Error::RequiresTree {
            what: "the exponential transform along paths",
        });
    }
    spec.check(lattice)?;
    let red = beta_reduce(spec)?;
    let beta = spec.beta;
    let dt = lattice.grid().dt();
    let mut acc = vec![S::zero(); lattice.num_nodes()];
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let step = (red.discount.rate.values[node] * sol.y[node] / beta
                - red.u.values[node])
                * dt;
            for e in lattice.children(node) {
                acc[e.child as usize] = acc[node] + step;
            }
        }
    }
    Ok((0..lattice.num_nodes())
        .map(|node| (acc[node] - sol.y[node] / beta).exp())
        .collect())
}

/// Largest absolute deviation of the one-step martingale ratio
/// `E[K_{k+1} | node] / K_k` from 1.
///
/// The ratio telescopes through the path accumulator, so the check is local
/// and works on any lattice kind.
pub fn verify_k_martingale<S: Scalar>(
    sol: &BsdeSolution<S>,
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
) -> Result<S> {
    if sol.scheme != Scheme::Recursion {
        return Err(Error::SchemeMismatch {
            expected: Scheme::Recursion.name(),
            got: sol.scheme.name(),
        });
    }
    spec.check(lattice)?;
    let red = beta_reduce(spec)?;
    let beta = spec.beta;
    let dt = lattice.grid().dt();
    let mut worst = S::zero();
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let yn = sol.y[node] / beta;
            let step = (red.discount.rate.values[node] * yn - red.u.values[node]) * dt;
            let mut ratio = S::zero();
            for e in lattice.children(node) {
                ratio += e.prob * (step + yn - sol.y[e.child as usize] / beta).exp();
            }
            worst = worst.max((ratio - S::one()).abs());
        }
    }
    Ok(worst)
}

/// Drift and per-channel intensity ratio of the worst-case measure, for
/// comparison against the loadings: as `dt` shrinks, the drift at a node
/// tends to `-z` and the intensity ratio to `exp(-yjump / beta)`.
#[derive(Debug, Clone)]
pub struct ImpliedTilt<S> {
    /// `brownian_dim` entries per node.
    pub drift: Vec<S>,
    /// `jump_channels` entries per node; arrival rate over base intensity.
    pub intensity_ratio: Vec<S>,
}

pub fn implied_tilt<S: Scalar>(
    sol: &BsdeSolution<S>,
    lattice: &Lattice<S>,
) -> ImpliedTilt<S> {
    let n = lattice.num_nodes();
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let mut drift = vec![S::zero(); n * p];
    let mut ratio = vec![S::zero(); n * d];
    let leaf_start = lattice.leaf_range().start;
    for node in 0..leaf_start {
        let dr = sol.qstar.implied_drift(lattice, node);
        drift[node * p..(node + 1) * p].copy_from_slice(&dr);
        let rate = sol.qstar.implied_intensity(lattice, node);
        let lam = lattice.lambda(node);
        for j in 0..d {
            ratio[node * d + j] = rate[j] / lam[j];
        }
    }
    ImpliedTilt {
        drift,
        intensity_ratio: ratio,
    }
}

/// Exact directional derivative of the root value along a perturbation of
/// the reward data, obtained by differentiating the scheme one step at a
/// time: the envelope term is the perturbation itself, weighted by the
/// worst-case transition probabilities and the per-step discount factor.
pub fn gateaux_derivative<S: Scalar>(
    sol: &BsdeSolution<S>,
    spec: &CriterionSpec<S>,
    lattice: &Lattice<S>,
    du: &AdaptedProcess<S>,
    du_bar: &[S],
) -> Result<S> {
    spec.check(lattice)?;
    du.check_len(lattice)?;
    if du_bar.len() != lattice.leaf_count() {
        return Err(Error::MismatchedLattice {
            got: du_bar.len(),
            expected: lattice.leaf_count(),
        });
    }
    let dt = lattice.grid().dt();
    let mut a = vec![S::zero(); lattice.num_nodes()];
    let leaf_start = lattice.leaf_range().start;
    for node in lattice.leaf_range() {
        a[node] = du_bar[node - leaf_start];
    }
    for k in (0..lattice.steps()).rev() {
        for node in lattice.slice(k) {
            let mut exp_a = S::zero();
            for (e, &qe) in lattice
                .children(node)
                .iter()
                .zip(sol.qstar.node_probs(lattice, node))
            {
                exp_a += qe * a[e.child as usize];
            }
            a[node] = match sol.scheme {
                Scheme::Dp => du.values[node] * dt + spec.discount.step_factor[node] * exp_a,
                Scheme::Recursion => (du.values[node] * dt + exp_a)
                    / (S::one() + spec.discount.rate.values[node] * dt),
            };
        }
    }
    Ok(a[0])
}

/// Result of [`comparison_check`].
#[derive(Debug, Clone)]
pub struct ComparisonReport<S> {
    /// `max_node (y1 - y2)`; at most roundoff when the rewards are ordered.
    pub pointwise_excess: S,
    /// Root gap `y1(0) - y2(0)`.
    pub root_gap: S,
    /// Reward-difference bound evaluated under the second worst-case measure.
    pub bound: S,
    /// `root_gap - bound`; nonpositive up to the scheme's consistency error.
    pub slack: S,
}

/// Quantitative comparison of two solved problems on one lattice.
///
/// Checks `y1 <= y2` pointwise and the stability bound
/// `y1(0) - y2(0) <= E2[sum sdelta (u1 - u2) dt + sdelta_T (u_bar1 - u_bar2)]`
/// under the second problem's worst-case measure. Requires ordered rewards
/// (`u1 <= u2` everywhere), matching penalty weights and discounting, and
/// solutions from the same scheme.
pub fn comparison_check<S: Scalar>(
    sol1: &BsdeSolution<S>,
    spec1: &CriterionSpec<S>,
    sol2: &BsdeSolution<S>,
    spec2: &CriterionSpec<S>,
    lattice: &Lattice<S>,
) -> Result<ComparisonReport<S>> {
    spec1.check(lattice)?;
    spec2.check(lattice)?;
    if sol1.scheme != sol2.scheme {
        return Err(Error::SchemeMismatch {
            expected: sol1.scheme.name(),
            got: sol2.scheme.name(),
        });
    }
    if spec1.beta != spec2.beta
        || spec1.discount.rate.values != spec2.discount.rate.values
    {
        return Err(Error::NotComparable);
    }
    let ordered = spec1
        .u
        .values
        .iter()
        .zip(&spec2.u.values)
        .all(|(&a, &b)| a <= b)
        && spec1.u_bar.iter().zip(&spec2.u_bar).all(|(&a, &b)| a <= b);
    if !ordered {
        return Err(Error::InputsNotOrdered);
    }

    let mut pointwise = S::neg_infinity();
    for node in 0..lattice.num_nodes() {
        pointwise = pointwise.max(sol1.y[node] - sol2.y[node]);
    }

    let reach = sol2.qstar.reach(lattice);
    let dt = lattice.grid().dt();
    let mut bound = S::zero();
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            bound += reach[node]
                * spec1.discount.sdelta[node]
                * (spec1.u.values[node] - spec2.u.values[node])
                * dt;
        }
    }
    let leaf_start = lattice.leaf_range().start;
    for node in lattice.leaf_range() {
        bound += reach[node]
            * spec1.discount.sdelta[node]
            * (spec1.u_bar[node - leaf_start] - spec2.u_bar[node - leaf_start]);
    }

    let root_gap = sol1.y[0] - sol2.y[0];
    Ok(ComparisonReport {
        pointwise_excess: pointwise,
        root_gap,
        bound,
        slack: root_gap - bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, DiscountSpec, LatticeKind, StateView, TimeGrid};
    use crate::measure::{
        criterion_gamma, discounted_entropy, relative_entropy, tilt_to_measure, EntropyForm,
        GirsanovTilt,
    };
    use approx::assert_abs_diff_eq;

    fn no_jumps(_: f64, _: StateView<'_>) -> Vec<f64> {
        vec![]
    }

    fn coin(steps: usize) -> Lattice<f64> {
        build_lattice(
            TimeGrid::uniform(steps as f64, steps),
            1,
            0,
            no_jumps,
            LatticeKind::Tree,
        )
        .unwrap()
    }

    fn one_step_spec(rate: f64) -> (Lattice<f64>, CriterionSpec<f64>) {
        let lat = coin(1);
        let spec = CriterionSpec {
            u: AdaptedProcess::zero(&lat),
            u_bar: vec![0.0, 1.0],
            discount: DiscountSpec::constant(rate, &lat).unwrap(),
            beta: 1.0,
        };
        (lat, spec)
    }

    #[test]
    fn driver_is_convex_nonnegative_with_root_at_zero() {
        assert_eq!(driver_g(0.0), 0.0);
        assert_abs_diff_eq!(driver_g(1.0), (-1.0f64).exp(), epsilon = 1e-16);
        for &x in &[-2.0, -0.5, 1e-9, 0.3, 4.0] {
            assert!(driver_g(x) >= 0.0);
        }
    }

    #[test]
    fn one_step_values_match_both_schemes() {
        let plain = one_step_entropic(&[0.5, 0.5], &[0.0, 1.0]);
        assert_abs_diff_eq!(plain, 0.3798854930417225, epsilon = 1e-16);

        let (lat, spec0) = one_step_spec(0.0);
        for scheme in [Scheme::Dp, Scheme::Recursion] {
            let sol = solve_bsdej(&spec0, &lat, scheme).unwrap();
            assert_abs_diff_eq!(sol.value(), plain, epsilon = 1e-16);
        }

        let (lat, spec) = one_step_spec(0.1);
        let rec = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap();
        assert_abs_diff_eq!(rec.value(), 0.3453504482197477, epsilon = 1e-16);
        let dp = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        assert_abs_diff_eq!(dp.value(), 0.35338916113737023, epsilon = 1e-16);
    }

    #[test]
    fn one_step_minimizers_are_gibbs_reweightings() {
        let (lat, spec) = one_step_spec(0.1);
        let rec = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap();
        let q = rec.qstar.node_probs(&lat, 0);
        assert_abs_diff_eq!(q[0], 0.7310585786300049, epsilon = 1e-16);
        assert_abs_diff_eq!(q[1], 0.2689414213699951, epsilon = 1e-16);

        let dp = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let q = dp.qstar.node_probs(&lat, 0);
        assert_abs_diff_eq!(q[0], 0.7119425781966999, epsilon = 1e-15);
        assert_abs_diff_eq!(q[1], 0.2880574218033001, epsilon = 1e-15);

        let direct = one_step_minimizer(&[0.5, 0.5], &[0.0, 1.0]);
        assert_abs_diff_eq!(direct[0], 0.7310585786300049, epsilon = 1e-16);
    }

    #[test]
    fn terminal_condition_is_exact() {
        let lat = coin(3);
        let u_bar: Vec<f64> = (0..lat.leaf_count()).map(|i| i as f64 * 0.3 - 1.0).collect();
        let spec = CriterionSpec {
            u: AdaptedProcess::constant(&lat, 0.2),
            u_bar: u_bar.clone(),
            discount: DiscountSpec::constant(0.5, &lat).unwrap(),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let leaf_start = lat.leaf_range().start;
        for node in lat.leaf_range() {
            assert_eq!(sol.y[node], u_bar[node - leaf_start]);
        }
    }

    #[test]
    fn zero_rate_closed_form_matches_both_schemes() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 4),
            1,
            1,
            |_, _| vec![0.4],
            LatticeKind::Tree,
        )
        .unwrap();
        let u = crate::lattice::adapted_from_fn(
            |t, s| 0.3 * t + 0.1 * s.bsum[0] as f64 - 0.2 * s.jumps[0] as f64,
            &lat,
        );
        let u_bar = crate::lattice::terminal_from_fn(
            |s| 0.5 * s.bsum[0] as f64 + 0.25 * s.jumps[0] as f64,
            &lat,
        );
        let spec = CriterionSpec {
            u,
            u_bar,
            discount: DiscountSpec::zero_rate(&lat),
            beta: 1.0,
        };
        let reference = closed_form_zero_rate(&spec, &lat).unwrap();
        let dp = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let rec = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap();
        assert_abs_diff_eq!(dp.value(), reference, epsilon = 1e-13);
        assert_abs_diff_eq!(rec.value(), reference, epsilon = 1e-13);
        assert_abs_diff_eq!(dp.value(), rec.value(), epsilon = 1e-14);
    }

    #[test]
    fn beta_scales_values_and_fixes_minimizer() {
        let lat = coin(2);
        let base = CriterionSpec {
            u: AdaptedProcess::constant(&lat, 0.4),
            u_bar: vec![0.0, 1.0, -0.5, 2.0],
            discount: DiscountSpec::constant(0.2, &lat).unwrap(),
            beta: 1.0,
        };
        let mut scaled = base.clone();
        scaled.beta = 2.0;
        scaled.u.values.iter_mut().for_each(|u| *u *= 2.0);
        scaled.u_bar.iter_mut().for_each(|u| *u *= 2.0);
        let a = solve_bsdej(&base, &lat, Scheme::Dp).unwrap();
        let b = solve_bsdej(&scaled, &lat, Scheme::Dp).unwrap();
        for node in 0..lat.num_nodes() {
            assert_abs_diff_eq!(2.0 * a.y[node], b.y[node], epsilon = 1e-14);
        }
        assert_eq!(a.qstar, b.qstar);
    }

    #[test]
    fn dp_root_value_equals_criterion_at_minimizer() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 5),
            1,
            1,
            |_, _| vec![0.5],
            LatticeKind::Tree,
        )
        .unwrap();
        let spec = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, s| t - 0.2 * s.jumps[0] as f64, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.4 * s.bsum[0] as f64, &lat),
            discount: DiscountSpec::constant(0.8, &lat).unwrap(),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let gamma =
            criterion_gamma(&spec, &sol.qstar, &lat, EntropyForm::StepwiseKl).unwrap();
        assert_abs_diff_eq!(sol.value(), gamma, epsilon = 1e-13);

        // Any competitor measure must do at least as badly.
        let tilt = GirsanovTilt {
            theta: vec![0.3],
            z: vec![-0.2],
        };
        let q = tilt_to_measure(&tilt, &lat).unwrap();
        let other = criterion_gamma(&spec, &q, &lat, EntropyForm::StepwiseKl).unwrap();
        assert!(other >= sol.value() - 1e-13);
    }

    #[test]
    fn recursion_identity_holds_at_machine_precision() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 6),
            1,
            1,
            |_, _| vec![0.3],
            LatticeKind::Tree,
        )
        .unwrap();
        let spec = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|_, s| 0.1 * s.bsum[0] as f64, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.3 * s.jumps[0] as f64, &lat),
            discount: DiscountSpec::constant(1.0, &lat).unwrap(),
            beta: 1.0,
        };
        let rec = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap();
        assert!(verify_recursion(&rec, &spec, &lat).unwrap() < 1e-12);
        assert!(verify_k_martingale(&rec, &spec, &lat).unwrap() < 1e-13);

        let dp = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        // The dp scheme misses the identity by O(dt), not by roundoff.
        let residual = verify_recursion(&dp, &spec, &lat).unwrap();
        assert!(residual > 1e-6 && residual < 0.5, "residual {residual}");
    }

    #[test]
    fn k_process_starts_at_exp_minus_value() {
        let lat = coin(3);
        let spec = CriterionSpec {
            u: AdaptedProcess::constant(&lat, 0.3),
            u_bar: vec![0.0; lat.leaf_count()],
            discount: DiscountSpec::constant(0.4, &lat).unwrap(),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap();
        let kp = k_process(&sol, &spec, &lat).unwrap();
        assert_abs_diff_eq!(kp[0], (-sol.value()).exp(), epsilon = 1e-15);
        // Global martingale property: E[K_k] = K_0 for every slice.
        let base = NodeMeasure::base(&lat);
        let reach = base.reach(&lat);
        for k in 0..=lat.steps() {
            let mean: f64 = lat.slice(k).map(|n| reach[n] * kp[n]).sum();
            assert_abs_diff_eq!(mean, kp[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn loadings_describe_the_worst_case_tilt() {
        // Terminal value -W_T: z = -1 exactly at every node, and the
        // worst-case drift tends to -z = +1 (the exact per-node drift is
        // tanh(sqrt(dt))/sqrt(dt), which is 1 up to O(dt)).
        let lat = build_lattice(
            TimeGrid::uniform(0.01, 10),
            1,
            0,
            no_jumps,
            LatticeKind::Tree,
        )
        .unwrap();
        let sq = lat.grid().dt().sqrt();
        let spec = CriterionSpec {
            u: AdaptedProcess::zero(&lat),
            u_bar: crate::lattice::terminal_from_fn(|s| -(s.bsum[0] as f64) * sq, &lat),
            discount: DiscountSpec::zero_rate(&lat),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let tilt = implied_tilt(&sol, &lat);
        for node in 0..lat.leaf_range().start {
            assert_abs_diff_eq!(sol.z_at(&lat, node)[0], -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(tilt.drift[node], 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn jump_loading_drives_intensity_ratio() {
        let lat = build_lattice(
            TimeGrid::uniform(0.5, 8),
            0,
            1,
            |_, _| vec![0.4],
            LatticeKind::Tree,
        )
        .unwrap();
        // Terminal value = jump count, so yjump = 1 and the worst case
        // damps arrivals by about e^{-1}.
        let spec = CriterionSpec {
            u: AdaptedProcess::zero(&lat),
            u_bar: crate::lattice::terminal_from_fn(|s| s.jumps[0] as f64, &lat),
            discount: DiscountSpec::zero_rate(&lat),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        let tilt = implied_tilt(&sol, &lat);
        for node in 0..lat.leaf_range().start {
            assert_abs_diff_eq!(sol.yjump_at(&lat, node)[0], 1.0, epsilon = 1e-12);
            let expected = (-sol.yjump_at(&lat, node)[0]).exp();
            assert_abs_diff_eq!(tilt.intensity_ratio[node], expected, epsilon = 0.05);
        }
    }

    #[test]
    fn gateaux_matches_finite_differences() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 4),
            1,
            1,
            |_, _| vec![0.3],
            LatticeKind::Tree,
        )
        .unwrap();
        let spec = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, _| 0.5 - t, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.2 * s.bsum[0] as f64, &lat),
            discount: DiscountSpec::constant(0.7, &lat).unwrap(),
            beta: 1.0,
        };
        let du = crate::lattice::adapted_from_fn(|t, s| t + 0.3 * s.jumps[0] as f64, &lat);
        let du_bar = crate::lattice::terminal_from_fn(|s| 0.1 * s.bsum[0] as f64 + 1.0, &lat);
        for scheme in [Scheme::Dp, Scheme::Recursion] {
            let sol = solve_bsdej(&spec, &lat, scheme).unwrap();
            let deriv = gateaux_derivative(&sol, &spec, &lat, &du, &du_bar).unwrap();
            let mut fd = Vec::new();
            for &eps in &[1e-5, -1e-5] {
                let mut pert = spec.clone();
                for (u, duv) in pert.u.values.iter_mut().zip(&du.values) {
                    *u += eps * duv;
                }
                for (u, duv) in pert.u_bar.iter_mut().zip(&du_bar) {
                    *u += eps * duv;
                }
                fd.push(solve_bsdej(&pert, &lat, scheme).unwrap().value());
            }
            let central = (fd[0] - fd[1]) / 2e-5;
            assert_abs_diff_eq!(deriv, central, epsilon = 1e-8);
        }
    }

    #[test]
    fn comparison_bound_is_exact_for_dp() {
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 5),
            1,
            1,
            |_, _| vec![0.4],
            LatticeKind::Tree,
        )
        .unwrap();
        let disc = DiscountSpec::constant(0.6, &lat).unwrap();
        let spec1 = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, _| -1.0 - t, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.3 * s.bsum[0] as f64 - 1.0, &lat),
            discount: disc.clone(),
            beta: 1.0,
        };
        let spec2 = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, s| 0.2 * s.jumps[0] as f64 - t, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.3 * s.bsum[0] as f64, &lat),
            discount: disc,
            beta: 1.0,
        };
        let sol1 = solve_bsdej(&spec1, &lat, Scheme::Dp).unwrap();
        let sol2 = solve_bsdej(&spec2, &lat, Scheme::Dp).unwrap();
        let report = comparison_check(&sol1, &spec1, &sol2, &spec2, &lat).unwrap();
        assert!(report.pointwise_excess <= 1e-13);
        assert!(report.root_gap <= 0.0);
        assert!(
            report.slack <= 1e-12,
            "dp slack should vanish, got {}",
            report.slack
        );

        // Swapped order violates the hypothesis.
        assert!(matches!(
            comparison_check(&sol2, &spec2, &sol1, &spec1, &lat),
            Err(Error::InputsNotOrdered)
        ));
    }

    #[test]
    fn dp_value_is_dual_optimal_among_random_measures() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let lat = build_lattice(
            TimeGrid::uniform(1.0, 3),
            1,
            1,
            |_, _| vec![0.5],
            LatticeKind::Tree,
        )
        .unwrap();
        let spec = CriterionSpec {
            u: crate::lattice::adapted_from_fn(|_, s| 0.2 * s.bsum[0] as f64, &lat),
            u_bar: crate::lattice::terminal_from_fn(|s| s.jumps[0] as f64 - 0.5, &lat),
            discount: DiscountSpec::constant(0.9, &lat).unwrap(),
            beta: 1.0,
        };
        let sol = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap();
        for _ in 0..50 {
            let mut q = NodeMeasure::base(&lat);
            for k in 0..lat.steps() {
                for node in lat.slice(k) {
                    let mut w: Vec<f64> = lat
                        .children(node)
                        .iter()
                        .map(|e| e.prob * rng.gen_range(0.05..1.0))
                        .collect();
                    let s: f64 = w.iter().sum();
                    w.iter_mut().for_each(|x| *x /= s);
                    q.set_node_probs(&lat, node, &w);
                }
            }
            let gamma = criterion_gamma(&spec, &q, &lat, EntropyForm::StepwiseKl).unwrap();
            assert!(gamma >= sol.value() - 1e-12);
        }
        let _ = (relative_entropy(&sol.qstar, &lat), discounted_entropy(
            &sol.qstar,
            &spec.discount,
            &lat,
            EntropyForm::StepwiseKl,
        ));
    }

    #[test]
    fn schemes_converge_to_each_other_as_dt_shrinks() {
        let gap = |steps: usize| {
            let lat = build_lattice(
                TimeGrid::uniform(1.0, steps),
                1,
                0,
                no_jumps,
                LatticeKind::Recombining,
            )
            .unwrap();
            let sq: f64 = lat.grid().dt().sqrt();
            let spec = CriterionSpec {
                u: AdaptedProcess::constant(&lat, 0.5),
                u_bar: crate::lattice::terminal_from_fn(|s| 0.4 * s.bsum[0] as f64 * sq, &lat),
                discount: DiscountSpec::constant(1.0, &lat).unwrap(),
                beta: 1.0,
            };
            let dp = solve_bsdej(&spec, &lat, Scheme::Dp).unwrap().value();
            let rec = solve_bsdej(&spec, &lat, Scheme::Recursion).unwrap().value();
            (dp - rec).abs()
        };
        let ratio = gap(8) / gap(16);
        assert!(
            (1.5..=2.5).contains(&ratio),
            "scheme gap should shrink linearly in dt, got ratio {ratio}"
        );
    }

    #[test]
    fn recombining_and_tree_agree_on_state_data() {
        let make_spec = |lat: &Lattice<f64>| CriterionSpec {
            u: crate::lattice::adapted_from_fn(|t, s| t + 0.2 * s.bsum[0] as f64, lat),
            u_bar: crate::lattice::terminal_from_fn(|s| 0.3 * s.jumps[0] as f64, lat),
            discount: DiscountSpec::constant(0.5, lat).unwrap(),
            beta: 1.0,
        };
        let grid = TimeGrid::uniform(1.0, 6);
        let tree = build_lattice(grid, 1, 1, |_, _| vec![0.4], LatticeKind::Tree).unwrap();
        let rec = build_lattice(grid, 1, 1, |_, _| vec![0.4], LatticeKind::Recombining).unwrap();
        let spec_t = make_spec(&tree);
        let spec_r = make_spec(&rec);
        let a = solve_bsdej(&spec_t, &tree, Scheme::Dp).unwrap();
        let b = solve_bsdej(&spec_r, &rec, Scheme::Dp).unwrap();
        assert_abs_diff_eq!(a.value(), b.value(), epsilon = 1e-12);
    }
}
