//! Scenario lattices: uniform time grids, signed Brownian increments,
//! multinomial jump outcomes, adapted processes and discount accumulation.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Hard cap on lattice size; protects against runaway configurations.
pub const MAX_NODES: u64 = 16_000_000;

/// Largest supported number of Brownian coordinates (sign patterns fit a byte).
pub const MAX_BROWNIAN_DIM: usize = 8;

/// Largest supported number of jump channels.
pub const MAX_JUMP_CHANNELS: usize = 64;

/// Uniform partition of `[0, horizon]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    steps: usize,
    dt: S,
}

impl<S: Scalar> TimeGrid<S> {
    /// Uniform grid with `steps` intervals of length `horizon / steps`.
    pub fn uniform(horizon: S, steps: usize) -> Self {
        assert!(steps > 0, "time grid needs at least one step");
        assert!(
            horizon > S::zero() && horizon.is_finite(),
            "horizon must be positive and finite"
        );
        let dt = horizon / S::from_usize(steps).unwrap();
        TimeGrid { horizon, steps, dt }
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    /// Time at grid index `k`, with `time(steps) == horizon` up to rounding.
    pub fn time(&self, k: usize) -> S {
        debug_assert!(k <= self.steps);
        S::from_usize(k).unwrap() * self.dt
    }
}

/// How nodes are identified across a time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeKind {
    /// Every branch creates a fresh node; paths and nodes are in bijection.
    Tree,
    /// Nodes are merged on equal state (Brownian sign sums, jump counts).
    /// Path functionals are unavailable; per-node backward induction is exact.
    Recombining,
    /// One deterministic branch per step; needs no Brownian or jump sources.
    SinglePath,
}

/// One branch out of a node: target, base probability, sign pattern, outcome.
///
/// Bit `m` of `bsigns` set means the m-th Brownian increment is `+sqrt(dt)`.
/// `jump == 0` means no jump; `jump == j >= 1` means channel `j` fires once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<S> {
    pub child: u32,
    pub prob: S,
    pub bsigns: u8,
    pub jump: u8,
}

/// Borrowed view of a node's state: per-coordinate sums of Brownian signs
/// and per-channel jump counts along any path reaching the node.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub bsum: &'a [i32],
    pub jumps: &'a [u32],
}

/// Immutable scenario lattice over a uniform grid.
#[derive(Debug)]
pub struct Lattice<S> {
    grid: TimeGrid<S>,
    p: usize,
    d: usize,
    kind: LatticeKind,
    /// `offsets[k]..offsets[k + 1]` is the node-id range of slice `k`.
    offsets: Vec<u32>,
    bsum: Vec<i32>,
    jumps: Vec<u32>,
    /// Jump intensities evaluated at each node, `d` entries per node.
    lambda: Vec<S>,
    /// `fanout` edges per non-leaf node, stored contiguously by node id.
    edges: Vec<Edge<S>>,
    fanout: usize,
}

/// Builds a lattice with `p` Brownian coordinates and `d` jump channels.
///
/// Each non-leaf node fans out into `2^p * (d + 1)` children, one per
/// (sign pattern, jump outcome) pair. The outcome `j >= 1` has base
/// probability `2^{-p} * lambda_j * dt`, the no-jump outcome gets the
/// complement, so one-step jump compensation is exact. Intensities are
/// evaluated per node from `(time, state)` and must keep
/// `sum_j lambda_j * dt < 1`.
pub fn build_lattice<S: Scalar>(
    grid: TimeGrid<S>,
    p: usize,
    d: usize,
    intensity_fn: impl Fn(S, StateView<'_>) -> Vec<S>,
    kind: LatticeKind,
) -> Result<Lattice<S>> {
    if p > MAX_BROWNIAN_DIM {
        return Err(Error::DimensionTooLarge {
            dim: p,
            max: MAX_BROWNIAN_DIM,
        });
    }
    if d > MAX_JUMP_CHANNELS {
        return Err(Error::DimensionTooLarge {
            dim: d,
            max: MAX_JUMP_CHANNELS,
        });
    }
    match kind {
        LatticeKind::SinglePath => {
            if p != 0 || d != 0 {
                return Err(Error::DegenerateLattice);
            }
        }
        _ => {
            if p + d == 0 {
                return Err(Error::DegenerateLattice);
            }
        }
    }

    let fanout = if kind == LatticeKind::SinglePath {
        1
    } else {
        (1usize << p) * (d + 1)
    };
    let steps = grid.steps();
    let dt = grid.dt();
    let base_b = lit::<S>((1u64 << p) as f64).recip();

    let mut offsets: Vec<u32> = Vec::with_capacity(steps + 2);
    offsets.push(0);
    offsets.push(1);
    let mut bsum: Vec<i32> = vec![0; p];
    let mut jumps: Vec<u32> = vec![0; d];
    let mut lambda: Vec<S> = Vec::new();
    let mut edges: Vec<Edge<S>> = Vec::new();

    for k in 0..steps {
        let t = grid.time(k);
        let slice: Range<usize> =
            offsets[k] as usize..offsets[k + 1] as usize;
        // Upper bound on the next slice; exact for non-recombining kinds.
        let projected = offsets[k + 1] as u64 + slice.len() as u64 * fanout as u64;
        if projected > MAX_NODES {
            return Err(Error::TreeTooLarge {
                nodes: projected,
                max: MAX_NODES,
            });
        }
        let mut next_ids: HashMap<(Vec<i32>, Vec<u32>), u32> = HashMap::new();
        let mut next_bsum: Vec<i32> = Vec::new();
        let mut next_jumps: Vec<u32> = Vec::new();
        let mut next_count: u64 = 0;
        let next_base = offsets[k + 1];

        for node in slice {
            let state = StateView {
                bsum: &bsum[node * p..(node + 1) * p],
                jumps: &jumps[node * d..(node + 1) * d],
            };
            let rates = intensity_fn(t, state);
            assert_eq!(rates.len(), d, "intensity function must return d rates");
            let mut sum_dt = S::zero();
            for (j, &r) in rates.iter().enumerate() {
                if !(r > S::zero()) || !r.is_finite() {
                    return Err(Error::NonpositiveIntensity {
                        channel: j + 1,
                        value: r.to_f64().unwrap_or(f64::NAN),
                    });
                }
                sum_dt += r * dt;
            }
            if !(sum_dt < S::one()) {
                return Err(Error::IntensityTooLarge {
                    sum_dt: sum_dt.to_f64().unwrap_or(f64::NAN),
                });
            }
            lambda.extend_from_slice(&rates);
            let pi0 = S::one() - sum_dt;

            for bidx in 0..(1usize << p) {
                for j in 0..=d {
                    let pi_j = if j == 0 { pi0 } else { rates[j - 1] * dt };
                    let prob = base_b * pi_j;

                    let mut child_b: Vec<i32> = state.bsum.to_vec();
                    for (m, cb) in child_b.iter_mut().enumerate() {
                        *cb += if bidx >> m & 1 == 1 { 1 } else { -1 };
                    }
                    let mut child_j: Vec<u32> = state.jumps.to_vec();
                    if j >= 1 {
                        child_j[j - 1] += 1;
                    }

                    let child = match kind {
                        LatticeKind::Recombining => {
                            let key = (child_b.clone(), child_j.clone());
                            match next_ids.get(&key) {
                                Some(&id) => id,
                                None => {
                                    let id = next_base + next_count as u32;
                                    next_ids.insert(key, id);
                                    next_bsum.extend_from_slice(&child_b);
                                    next_jumps.extend_from_slice(&child_j);
                                    next_count += 1;
                                    id
                                }
                            }
                        }
                        _ => {
                            let id = next_base + next_count as u32;
                            next_bsum.extend_from_slice(&child_b);
                            next_jumps.extend_from_slice(&child_j);
                            next_count += 1;
                            id
                        }
                    };
                    edges.push(Edge {
                        child,
                        prob,
                        bsigns: bidx as u8,
                        jump: j as u8,
                    });
                }
            }
        }

        bsum.extend_from_slice(&next_bsum);
        jumps.extend_from_slice(&next_jumps);
        offsets.push(next_base + next_count as u32);
    }

    // Leaf intensities keep `lambda` uniform across slices for diagnostics.
    let t_end = grid.time(steps);
    let leaf_range = offsets[steps] as usize..offsets[steps + 1] as usize;
    for node in leaf_range {
        let state = StateView {
            bsum: &bsum[node * p..(node + 1) * p],
            jumps: &jumps[node * d..(node + 1) * d],
        };
        let rates = intensity_fn(t_end, state);
        assert_eq!(rates.len(), d, "intensity function must return d rates");
        lambda.extend_from_slice(&rates);
    }

    Ok(Lattice {
        grid,
        p,
        d,
        kind,
        offsets,
        bsum,
        jumps,
        lambda,
        edges,
        fanout,
    })
}

impl<S: Scalar> Lattice<S> {
    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn brownian_dim(&self) -> usize {
        self.p
    }

    pub fn jump_channels(&self) -> usize {
        self.d
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap() as usize
    }

    /// Node-id range of time slice `k`, for `k` in `0..=steps`.
    pub fn slice(&self, k: usize) -> Range<usize> {
        self.offsets[k] as usize..self.offsets[k + 1] as usize
    }

    pub fn leaf_range(&self) -> Range<usize> {
        self.slice(self.steps())
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_range().len()
    }

    /// Index of a leaf node within the terminal slice.
    pub fn leaf_local(&self, node: usize) -> usize {
        debug_assert!(self.is_leaf(node));
        node - self.leaf_range().start
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.leaf_range().start
    }

    /// Time-slice index holding `node`.
    pub fn slice_of(&self, node: usize) -> usize {
        debug_assert!(node < self.num_nodes());
        // offsets[k] == node + 1 means node closes slice k - 1.
        match self.offsets.binary_search(&(node as u32 + 1)) {
            Ok(k) | Err(k) => k - 1,
        }
    }

    /// All edges in node order: `fanout` consecutive entries per non-leaf
    /// node, so edge `node * fanout + i` is the i-th branch out of `node`.
    pub fn edges_flat(&self) -> &[Edge<S>] {
        &self.edges
    }

    /// Outgoing edges of a non-leaf node; empty for leaves.
    pub fn children(&self, node: usize) -> &[Edge<S>] {
        if self.is_leaf(node) {
            &[]
        } else {
            &self.edges[node * self.fanout..(node + 1) * self.fanout]
        }
    }

    pub fn state(&self, node: usize) -> StateView<'_> {
        StateView {
            bsum: &self.bsum[node * self.p..(node + 1) * self.p],
            jumps: &self.jumps[node * self.d..(node + 1) * self.d],
        }
    }

    /// Jump intensities evaluated at the node, one per channel.
    pub fn lambda(&self, node: usize) -> &[S] {
        &self.lambda[node * self.d..(node + 1) * self.d]
    }

    /// Writes the node/edge table as CSV:
    /// `time_index,node_id,parent_id,brownian_signs,jump_outcome,base_prob`.
    ///
    /// One row per incoming edge plus a root row with empty parent fields;
    /// on recombining lattices merged nodes therefore repeat with each parent.
    pub fn dump_nodes(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "time_index,node_id,parent_id,brownian_signs,jump_outcome,base_prob"
        )?;
        writeln!(w, "0,0,,,,1")?;
        for k in 0..self.steps() {
            for node in self.slice(k) {
                for e in self.children(node) {
                    let mut signs = String::with_capacity(self.p);
                    for m in 0..self.p {
                        signs.push(if e.bsigns >> m & 1 == 1 { '+' } else { '-' });
                    }
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        k + 1,
                        e.child,
                        node,
                        signs,
                        e.jump,
                        e.prob
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Process with one value per lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<S> {
    pub values: Vec<S>,
}

impl<S: Scalar> AdaptedProcess<S> {
    pub fn constant(lattice: &Lattice<S>, v: S) -> Self {
        AdaptedProcess {
            values: vec![v; lattice.num_nodes()],
        }
    }

    pub fn zero(lattice: &Lattice<S>) -> Self {
        Self::constant(lattice, S::zero())
    }

    /// Values on the terminal slice.
    pub fn terminal<'a>(&'a self, lattice: &Lattice<S>) -> &'a [S] {
        &self.values[lattice.leaf_range()]
    }

    pub fn check_len(&self, lattice: &Lattice<S>) -> Result<()> {
        if self.values.len() != lattice.num_nodes() {
            return Err(Error::MismatchedLattice {
                got: self.values.len(),
                expected: lattice.num_nodes(),
            });
        }
        Ok(())
    }
}

/// Evaluates `f(time, state)` on every node.
pub fn adapted_from_fn<S: Scalar>(
    f: impl Fn(S, StateView<'_>) -> S,
    lattice: &Lattice<S>,
) -> AdaptedProcess<S> {
    let mut values = Vec::with_capacity(lattice.num_nodes());
    for k in 0..=lattice.steps() {
        let t = lattice.grid().time(k);
        for node in lattice.slice(k) {
            values.push(f(t, lattice.state(node)));
        }
    }
    AdaptedProcess { values }
}

/// Evaluates `f(state)` on every terminal node.
pub fn terminal_from_fn<S: Scalar>(
    f: impl Fn(StateView<'_>) -> S,
    lattice: &Lattice<S>,
) -> Vec<S> {
    lattice
        .leaf_range()
        .map(|node| f(lattice.state(node)))
        .collect()
}

/// Nonnegative short-rate style discounting accumulated along the lattice.
///
/// `sdelta` holds the left-endpoint product `prod_{j<k} exp(-rate_j * dt)`
/// along the path to each node, so it equals 1 at the root and is
/// node-independent whenever the rate is deterministic.
#[derive(Debug, Clone)]
pub struct DiscountSpec<S> {
    pub rate: AdaptedProcess<S>,
    /// One-step factor `exp(-rate * dt)` per node.
    pub step_factor: Vec<S>,
    /// Accumulated discount per node.
    pub sdelta: Vec<S>,
    /// Set when the rate is identically zero; then `sdelta` is exactly 1.
    pub zero: bool,
}

/// Accumulates the discount process for a nonnegative rate.
///
/// A rate that vanishes somewhere must vanish everywhere; mixed
/// zero/positive rates are rejected so zero-rate fast paths stay exact.
pub fn discount_process<S: Scalar>(
    rate: &AdaptedProcess<S>,
    lattice: &Lattice<S>,
) -> Result<DiscountSpec<S>> {
    rate.check_len(lattice)?;
    let mut any_zero = false;
    let mut all_zero = true;
    for &r in &rate.values {
        if r < S::zero() || !r.is_finite() {
            return Err(Error::NegativeRate {
                value: r.to_f64().unwrap_or(f64::NAN),
            });
        }
        if r == S::zero() {
            any_zero = true;
        } else {
            all_zero = false;
        }
    }
    if any_zero && !all_zero {
        return Err(Error::PartiallyZeroRate);
    }
    let zero = all_zero;
    let dt = lattice.grid().dt();
    let n = lattice.num_nodes();

    let step_factor: Vec<S> = rate.values.iter().map(|&r| (-r * dt).exp()).collect();

    let mut sdelta = vec![S::nan(); n];
    sdelta[0] = S::one();
    let tol = lit::<S>(1e-12);
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let s_child = sdelta[node] * step_factor[node];
            for e in lattice.children(node) {
                let slot = &mut sdelta[e.child as usize];
                if slot.is_nan() {
                    *slot = s_child;
                } else if ((*slot - s_child) / s_child).abs() > tol {
                    // Merged nodes disagree: the rate is state-dependent.
                    return Err(Error::RequiresTree {
                        what: "discount accumulation under a state-dependent rate",
                    });
                }
            }
        }
    }

    Ok(DiscountSpec {
        rate: rate.clone(),
        step_factor,
        sdelta,
        zero,
    })
}

impl<S: Scalar> DiscountSpec<S> {
    /// Zero-rate discounting: factors and accumulation identically 1.
    pub fn zero_rate(lattice: &Lattice<S>) -> Self {
        let n = lattice.num_nodes();
        DiscountSpec {
            rate: AdaptedProcess::zero(lattice),
            step_factor: vec![S::one(); n],
            sdelta: vec![S::one(); n],
            zero: true,
        }
    }

    /// Constant-rate discounting.
    pub fn constant(rate: S, lattice: &Lattice<S>) -> Result<Self> {
        discount_process(&AdaptedProcess::constant(lattice, rate), lattice)
    }

    /// Per-slice rate values when the rate is deterministic in time,
    /// `None` if any slice holds two different values.
    pub fn deterministic_rates(&self, lattice: &Lattice<S>) -> Option<Vec<S>> {
        let mut out = Vec::with_capacity(lattice.steps() + 1);
        for k in 0..=lattice.steps() {
            let slice = lattice.slice(k);
            let first = self.rate.values[slice.start];
            if self.rate.values[slice.clone()].iter().any(|&r| r != first) {
                return None;
            }
            out.push(first);
        }
        Some(out)
    }
}
