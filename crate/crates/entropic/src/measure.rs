//! Equivalent measures on a lattice: exponential tilts, density processes,
//! relative entropy and the entropy-penalized criterion.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, DiscountSpec, Lattice, LatticeKind};
use crate::scalar::{lit, Scalar};

/// Probability measure given by per-node transition probabilities.
///
/// `q` is indexed exactly like the lattice edge table. Densities relative to
/// the base measure are derived, never stored, so the representation is
/// O(edges) and every node-level normalization stays exact.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMeasure<S> {
    q: Vec<S>,
}

impl<S: Scalar> NodeMeasure<S> {
    /// The base measure itself.
    pub fn base(lattice: &Lattice<S>) -> Self {
        NodeMeasure {
            q: lattice
                .edges_flat()
                .iter()
                .map(|e| e.prob)
                .collect(),
        }
    }

    /// Builds from a raw per-edge vector; validates shape and per-node sums.
    pub fn from_edge_probs(q: Vec<S>, lattice: &Lattice<S>) -> Result<Self> {
        let m = NodeMeasure { q };
        m.check(lattice)?;
        Ok(m)
    }

    /// Transition probabilities out of a non-leaf node.
    pub fn node_probs(&self, lattice: &Lattice<S>, node: usize) -> &[S] {
        let f = lattice.fanout();
        &self.q[node * f..(node + 1) * f]
    }

    /// Overwrites the transition probabilities of one node.
    pub fn set_node_probs(&mut self, lattice: &Lattice<S>, node: usize, probs: &[S]) {
        let f = lattice.fanout();
        self.q[node * f..(node + 1) * f].copy_from_slice(probs);
    }

    /// Verifies shape, nonnegativity and unit per-node mass. The mass
    /// tolerance is 1e-12 for double precision and scales with the
    /// scalar's epsilon for narrower types.
    pub fn check(&self, lattice: &Lattice<S>) -> Result<()> {
        let expected = lattice.edges_flat().len();
        if self.q.len() != expected {
            return Err(Error::MismatchedLattice {
                got: self.q.len(),
                expected,
            });
        }
        let tol = lit::<S>(1e-12).max(S::epsilon() * lit::<S>(64.0));
        for k in 0..lattice.steps() {
            for node in lattice.slice(k) {
                let probs = self.node_probs(lattice, node);
                let mut sum = S::zero();
                for &qi in probs {
                    debug_assert!(qi >= S::zero() && qi.is_finite());
                    sum += qi;
                }
                if (sum - S::one()).abs() > tol {
                    return Err(Error::UnnormalizedMeasure {
                        node,
                        sum: sum.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(())
    }

    /// Probability of reaching each node under this measure.
    pub fn reach(&self, lattice: &Lattice<S>) -> Vec<S> {
        let mut reach = vec![S::zero(); lattice.num_nodes()];
        reach[0] = S::one();
        for k in 0..lattice.steps() {
            for node in lattice.slice(k) {
                let r = reach[node];
                if r == S::zero() {
                    continue;
                }
                for (e, &qe) in lattice
                    .children(node)
                    .iter()
                    .zip(self.node_probs(lattice, node))
                {
                    reach[e.child as usize] += r * qe;
                }
            }
        }
        reach
    }

    /// Density process `Z^Q` per node: the product of `q/p` along the path.
    ///
    /// Needs path/node bijection, so recombining lattices are rejected.
    /// Unreachable nodes (some `q = 0` upstream) carry density 0.
    pub fn density(&self, lattice: &Lattice<S>) -> Result<Vec<S>> {
        if lattice.kind() == LatticeKind::Recombining {
            return Err(Error::RequiresTree {
                what: "the pathwise density process",
            });
        }
        let mut z = vec![S::zero(); lattice.num_nodes()];
        z[0] = S::one();
        for k in 0..lattice.steps() {
            for node in lattice.slice(k) {
                let zn = z[node];
                for (e, &qe) in lattice
                    .children(node)
                    .iter()
                    .zip(self.node_probs(lattice, node))
                {
                    z[e.child as usize] = zn * qe / e.prob;
                }
            }
        }
        Ok(z)
    }

    /// Log-density per node; `-inf` marks unreachable nodes.
    pub fn log_density(&self, lattice: &Lattice<S>) -> Result<Vec<S>> {
        if lattice.kind() == LatticeKind::Recombining {
            return Err(Error::RequiresTree {
                what: "the pathwise density process",
            });
        }
        let mut z = vec![S::zero(); lattice.num_nodes()];
        for k in 0..lattice.steps() {
            for node in lattice.slice(k) {
                let zn = z[node];
                for (e, &qe) in lattice
                    .children(node)
                    .iter()
                    .zip(self.node_probs(lattice, node))
                {
                    z[e.child as usize] = if qe > S::zero() {
                        zn + (qe.ln() - e.prob.ln())
                    } else {
                        S::neg_infinity()
                    };
                }
            }
        }
        Ok(z)
    }

    /// Mean Brownian increment per unit time under this measure at a node.
    pub fn implied_drift(&self, lattice: &Lattice<S>, node: usize) -> Vec<S> {
        let dt = lattice.grid().dt();
        let sq = dt.sqrt();
        let p = lattice.brownian_dim();
        let mut drift = vec![S::zero(); p];
        for (e, &qe) in lattice
            .children(node)
            .iter()
            .zip(self.node_probs(lattice, node))
        {
            for (m, dm) in drift.iter_mut().enumerate() {
                let inc = if e.bsigns >> m & 1 == 1 { sq } else { -sq };
                *dm += qe * inc;
            }
        }
        drift.iter_mut().for_each(|dm| *dm /= dt);
        drift
    }

    /// Jump arrival rate per channel implied by one step of this measure.
    pub fn implied_intensity(&self, lattice: &Lattice<S>, node: usize) -> Vec<S> {
        let dt = lattice.grid().dt();
        let d = lattice.jump_channels();
        let mut rate = vec![S::zero(); d];
        for (e, &qe) in lattice
            .children(node)
            .iter()
            .zip(self.node_probs(lattice, node))
        {
            if e.jump >= 1 {
                rate[e.jump as usize - 1] += qe;
            }
        }
        rate.iter_mut().for_each(|r| *r /= dt);
        rate
    }
}

/// Drift loading per Brownian coordinate and log intensity shift per channel.
///
/// The induced one-step reweighting multiplies the base probability by
/// `prod_m (1 + theta_m b_m sqrt(dt))` and by `exp(-z_j)` on jump outcome `j`,
/// then renormalizes; see [`tilt_to_measure`].
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovTilt<S> {
    pub theta: Vec<S>,
    pub z: Vec<S>,
}

impl<S: Scalar> GirsanovTilt<S> {
    pub fn identity(p: usize, d: usize) -> Self {
        GirsanovTilt {
            theta: vec![S::zero(); p],
            z: vec![S::zero(); d],
        }
    }
}

/// Applies an exponential tilt to every node of the lattice.
///
/// Renormalization keeps each node exact at the price of the implied jump
/// intensity being `lambda_j exp(-z_j)` only to first order in `dt`; the
/// exact value is available through [`NodeMeasure::implied_intensity`].
/// The zero tilt returns the base measure, and the mean Brownian increment
/// under the result is exactly `theta_m dt` per coordinate.
pub fn tilt_to_measure<S: Scalar>(
    tilt: &GirsanovTilt<S>,
    lattice: &Lattice<S>,
) -> Result<NodeMeasure<S>> {
    assert_eq!(tilt.theta.len(), lattice.brownian_dim());
    assert_eq!(tilt.z.len(), lattice.jump_channels());
    let sq = lattice.grid().dt().sqrt();
    for &th in &tilt.theta {
        let worst = S::one() - th.abs() * sq;
        if !(worst > S::zero()) {
            return Err(Error::TiltTooLarge {
                factor: worst.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    // Per (sign pattern, outcome) weight; independent of the node.
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let jump_w: Vec<S> = tilt.z.iter().map(|&z| (-z).exp()).collect();
    let mut weight = vec![S::zero(); lattice.fanout()];
    if lattice.kind() != LatticeKind::SinglePath {
        for bidx in 0..(1usize << p) {
            let mut wb = S::one();
            for (m, &th) in tilt.theta.iter().enumerate() {
                let inc = if bidx >> m & 1 == 1 { sq } else { -sq };
                wb *= S::one() + th * inc;
            }
            for j in 0..=d {
                weight[bidx * (d + 1) + j] = if j == 0 { wb } else { wb * jump_w[j - 1] };
            }
        }
    } else {
        weight[0] = S::one();
    }

    let mut q = Vec::with_capacity(lattice.edges_flat().len());
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
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
    Ok(NodeMeasure { q })
}

/// Per-node Kullback-Leibler divergence with the `0 ln 0 = 0` convention.
pub fn kl_divergence<S: Scalar>(q: &[S], p: &[S]) -> S {
    let mut sum = S::zero();
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > S::zero() {
            sum += qi * (qi.ln() - pi.ln());
        }
    }
    sum
}

/// Relative entropy of `Q` with respect to the base measure.
///
/// Computed as the reach-weighted sum of per-node divergences, which equals
/// the expectation of the terminal log density by telescoping; the sum form
/// also covers recombining lattices.
pub fn relative_entropy<S: Scalar>(q: &NodeMeasure<S>, lattice: &Lattice<S>) -> S {
    let reach = q.reach(lattice);
    let mut total = S::zero();
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let r = reach[node];
            if r > S::zero() {
                let probs: Vec<S> = lattice.children(node).iter().map(|e| e.prob).collect();
                total += r * kl_divergence(q.node_probs(lattice, node), &probs);
            }
        }
    }
    total
}

/// Pathwise form of the relative entropy, the expectation of `ln Z^Q_T`.
/// Agrees with [`relative_entropy`] by telescoping; kept as a cross-check.
pub fn relative_entropy_pathwise<S: Scalar>(
    q: &NodeMeasure<S>,
    lattice: &Lattice<S>,
) -> Result<S> {
    let reach = q.reach(lattice);
    let logz = q.log_density(lattice)?;
    let mut total = S::zero();
    for node in lattice.leaf_range() {
        if reach[node] > S::zero() {
            total += reach[node] * logz[node];
        }
    }
    Ok(total)
}

/// Discretization used for the discounted entropy penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyForm {
    /// Left-endpoint sum over `rate * sdelta * ln Z^Q` plus the terminal
    /// term; pathwise, so it needs a non-recombining lattice.
    Riemann,
    /// Reach-weighted sum of `sdelta * KL(q_node || p_node)`; the form the
    /// dynamic-programming scheme makes exactly dual. Default.
    StepwiseKl,
}

/// Discount-weighted entropy penalty of `Q`.
///
/// Both forms are nonnegative for deterministic rates, vanish at the base
/// measure, reduce to [`relative_entropy`] when the rate is zero, and differ
/// by O(dt) otherwise.
pub fn discounted_entropy<S: Scalar>(
    q: &NodeMeasure<S>,
    discount: &DiscountSpec<S>,
    lattice: &Lattice<S>,
    form: EntropyForm,
) -> Result<S> {
    let reach = q.reach(lattice);
    match form {
        EntropyForm::StepwiseKl => {
            let mut total = S::zero();
            for k in 0..lattice.steps() {
                for node in lattice.slice(k) {
                    let r = reach[node];
                    if r > S::zero() {
                        let probs: Vec<S> =
                            lattice.children(node).iter().map(|e| e.prob).collect();
                        total += r
                            * discount.sdelta[node]
                            * kl_divergence(q.node_probs(lattice, node), &probs);
                    }
                }
            }
            Ok(total)
        }
        EntropyForm::Riemann => {
            let logz = q.log_density(lattice)?;
            let dt = lattice.grid().dt();
            let mut total = S::zero();
            for k in 0..lattice.steps() {
                for node in lattice.slice(k) {
                    let r = reach[node];
                    if r > S::zero() {
                        total += r
                            * discount.rate.values[node]
                            * discount.sdelta[node]
                            * logz[node]
                            * dt;
                    }
                }
            }
            for node in lattice.leaf_range() {
                if reach[node] > S::zero() {
                    total += reach[node] * discount.sdelta[node] * logz[node];
                }
            }
            Ok(total)
        }
    }
}

/// Cost data of the penalized criterion: a running reward, terminal values,
/// discounting and the entropy penalty weight.
#[derive(Debug, Clone)]
pub struct CriterionSpec<S> {
    pub u: AdaptedProcess<S>,
    pub u_bar: Vec<S>,
    pub discount: DiscountSpec<S>,
    pub beta: S,
}

impl<S: Scalar> CriterionSpec<S> {
    pub fn check(&self, lattice: &Lattice<S>) -> Result<()> {
        self.u.check_len(lattice)?;
        if self.u_bar.len() != lattice.leaf_count() {
            return Err(Error::MismatchedLattice {
                got: self.u_bar.len(),
                expected: lattice.leaf_count(),
            });
        }
        Ok(())
    }
}

/// Discounted expected reward plus `beta` times the entropy penalty.
pub fn criterion_gamma<S: Scalar>(
    spec: &CriterionSpec<S>,
    q: &NodeMeasure<S>,
    lattice: &Lattice<S>,
    form: EntropyForm,
) -> Result<S> {
    spec.check(lattice)?;
    let reach = q.reach(lattice);
    let dt = lattice.grid().dt();
    let mut total = S::zero();
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            total += reach[node] * spec.discount.sdelta[node] * spec.u.values[node] * dt;
        }
    }
    let leaf_start = lattice.leaf_range().start;
    for node in lattice.leaf_range() {
        total += reach[node] * spec.discount.sdelta[node] * spec.u_bar[node - leaf_start];
    }
    Ok(total + spec.beta * discounted_entropy(q, &spec.discount, lattice, form)?)
}

/// Rescales the criterion so the penalty weight becomes 1.
///
/// The minimizing measure is unchanged and the value scales by `beta`.
pub fn beta_reduce<S: Scalar>(spec: &CriterionSpec<S>) -> Result<CriterionSpec<S>> {
    if !(spec.beta > S::zero()) {
        return Err(Error::NonpositiveBeta {
            value: spec.beta.to_f64().unwrap_or(f64::NAN),
        });
    }
    let inv = spec.beta.recip();
    Ok(CriterionSpec {
        u: AdaptedProcess {
            values: spec.u.values.iter().map(|&u| u * inv).collect(),
        },
        u_bar: spec.u_bar.iter().map(|&u| u * inv).collect(),
        discount: spec.discount.clone(),
        beta: S::one(),
    })
}
