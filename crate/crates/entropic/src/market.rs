//! Jump-diffusion asset market on a lattice.
//!
//! Assets grow by a multiplicative factor per branch:
//! `1 + mu dt + sum_m sigma[i,m] b_m sqrt(dt) + sum_j phi[i,j] (dH_j - lambda_j dt)`.
//! Jumps enter compensated, so the combined loading matrix alone decides
//! the drift correction that prices the market: solving it against `-mu`
//! yields the Girsanov tilt whose measure makes every asset a martingale
//! up to `O(dt^2)` per step. The module also propagates self-financed
//! wealth and checks the no-bankruptcy constraint.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, Lattice, LatticeKind};
use crate::measure::{tilt_to_measure, GirsanovTilt, NodeMeasure};
use crate::scalar::{lit, Scalar};
use rayon::prelude::*;

/// Price system for `p + d` risky assets driven by the lattice's Brownian
/// signs and jump outcomes. The savings account is the constant 1, so
/// prices are never discounted.
#[derive(Debug, Clone)]
pub struct Market<S> {
    mu: Vec<S>,
    sigma: Vec<S>,
    phi: Vec<S>,
    lambda: Vec<S>,
    sigma_big: Vec<S>,
    condition: S,
    prices: Vec<S>,
    n_assets: usize,
}

impl<S: Scalar> Market<S> {
    /// Number of risky assets, `p + d`.
    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    /// Appreciation rates, one per asset.
    pub fn mu(&self) -> &[S] {
        &self.mu
    }

    /// Volatility loadings, row-major `n_assets x p`.
    pub fn sigma(&self) -> &[S] {
        &self.sigma
    }

    /// Relative jump sizes, row-major `n_assets x d`, each entry above -1.
    pub fn phi(&self) -> &[S] {
        &self.phi
    }

    /// Jump intensities shared with the lattice.
    pub fn lambda(&self) -> &[S] {
        &self.lambda
    }

    /// Combined square loading matrix, row-major `n x n`: the volatility
    /// block followed by jump columns scaled as `lambda_j * phi[., j]`.
    pub fn sigma_big(&self) -> &[S] {
        &self.sigma_big
    }

    /// One-norm condition number of the combined loading matrix.
    pub fn condition(&self) -> S {
        self.condition
    }

    /// All prices, node-major with `n_assets` entries per node.
    pub fn prices(&self) -> &[S] {
        &self.prices
    }

    /// Price of one asset at one node. Initial prices are normalized to 1.
    pub fn price(&self, node: usize, asset: usize) -> S {
        self.prices[node * self.n_assets + asset]
    }

    /// Prices of all assets at one node.
    pub fn node_prices(&self, node: usize) -> &[S] {
        &self.prices[node * self.n_assets..(node + 1) * self.n_assets]
    }
}

/// Builds asset prices on the lattice from constant coefficients.
///
/// `sigma` is row-major `n x p`, `phi` row-major `n x d` with `n = p + d`;
/// `lambda` must equal the lattice's intensities at every node. All branch
/// growth factors are checked positive up front, which keeps every price
/// positive since the root starts at 1. Recombining lattices are accepted
/// only when the merged nodes agree on the price (always true without
/// jumps); mixed diffusion/jump products are path-dependent and need a
/// tree.
pub fn build_market<S: Scalar>(
    mu: &[S],
    sigma: &[S],
    phi: &[S],
    lambda: &[S],
    lattice: &Lattice<S>,
) -> Result<Market<S>> {
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let n = p + d;
    if n == 0 {
        return Err(Error::DegenerateLattice);
    }
    if mu.len() != n {
        return Err(Error::MismatchedLattice {
            got: mu.len(),
            expected: n,
        });
    }
    if sigma.len() != n * p {
        return Err(Error::MismatchedLattice {
            got: sigma.len(),
            expected: n * p,
        });
    }
    if phi.len() != n * d {
        return Err(Error::MismatchedLattice {
            got: phi.len(),
            expected: n * d,
        });
    }
    if lambda.len() != d {
        return Err(Error::MismatchedLattice {
            got: lambda.len(),
            expected: d,
        });
    }
    for &v in phi {
        if !(v > -S::one()) {
            return Err(Error::BadJumpSize {
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let tol = lit::<S>(1e-12);
    for node in 0..lattice.num_nodes() {
        for (&lat, &mkt) in lattice.lambda(node).iter().zip(lambda) {
            if (lat - mkt).abs() > tol * (S::one() + lat.abs()) {
                return Err(Error::IntensityMismatch {
                    got: mkt.to_f64().unwrap_or(f64::NAN),
                    expected: lat.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
    }

    // Volatility block first, then one column per jump channel.
    let mut sigma_big = vec![S::zero(); n * n];
    for i in 0..n {
        for m in 0..p {
            sigma_big[i * n + m] = sigma[i * p + m];
        }
        for j in 0..d {
            sigma_big[i * n + p + j] = lambda[j] * phi[i * d + j];
        }
    }
    let inverse = invert_matrix(&sigma_big, n)?;
    let condition = one_norm(&sigma_big, n) * one_norm(&inverse, n);

    let dt = lattice.grid().dt();
    let sq = dt.sqrt();
    // Growth factors depend on the branch pattern only, never on the node,
    // so positivity of the full price system reduces to this small table.
    for bidx in 0..1usize << p {
        for j in 0..=d {
            for i in 0..n {
                let f = growth_factor(mu, sigma, phi, lambda, p, d, dt, sq, bidx as u8, j as u8, i);
                if !(f > S::zero()) {
                    return Err(Error::NonpositivePrice {
                        value: f.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
    }

    let mut prices = vec![S::zero(); lattice.num_nodes() * n];
    for v in prices.iter_mut().take(n) {
        *v = S::one();
    }
    match lattice.kind() {
        LatticeKind::Tree | LatticeKind::SinglePath => {
            let fanout = lattice.fanout();
            for k in 0..lattice.steps() {
                let slice = lattice.slice(k);
                let mut scratch = vec![S::zero(); slice.len() * fanout * n];
                let snapshot = &prices;
                slice
                    .clone()
                    .into_par_iter()
                    .zip(scratch.par_chunks_mut(fanout * n))
                    .with_min_len(256)
                    .for_each(|(node, out)| {
                        let base = &snapshot[node * n..(node + 1) * n];
                        for (e, edge) in lattice.children(node).iter().enumerate() {
                            for i in 0..n {
                                out[e * n + i] = base[i]
                                    * growth_factor(
                                        mu, sigma, phi, lambda, p, d, dt, sq, edge.bsigns,
                                        edge.jump, i,
                                    );
                            }
                        }
                    });
                for (local, node) in slice.clone().enumerate() {
                    for (e, edge) in lattice.children(node).iter().enumerate() {
                        let child = edge.child as usize;
                        prices[child * n..(child + 1) * n]
                            .copy_from_slice(&scratch[(local * fanout + e) * n..][..n]);
                    }
                }
            }
        }
        LatticeKind::Recombining => {
            // Merged nodes may be reached along several paths; the price is
            // well defined only when all of them yield the same product.
            let mut seen = vec![false; lattice.num_nodes()];
            seen[0] = true;
            for k in 0..lattice.steps() {
                for node in lattice.slice(k) {
                    for edge in lattice.children(node) {
                        let child = edge.child as usize;
                        for i in 0..n {
                            let f = growth_factor(
                                mu, sigma, phi, lambda, p, d, dt, sq, edge.bsigns, edge.jump, i,
                            );
                            let v = prices[node * n + i] * f;
                            if seen[child] {
                                let old = prices[child * n + i];
                                if (v - old).abs() > lit::<S>(1e-10) * (S::one() + old.abs()) {
                                    return Err(Error::RequiresTree {
                                        what: "this price system",
                                    });
                                }
                            } else {
                                prices[child * n + i] = v;
                            }
                        }
                        seen[child] = true;
                    }
                }
            }
        }
    }

    Ok(Market {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        phi: phi.to_vec(),
        lambda: lambda.to_vec(),
        sigma_big,
        condition,
        prices,
        n_assets: n,
    })
}

/// One-step growth factor of asset `i` on a branch with Brownian sign
/// pattern `bsigns` and jump outcome `jump` (0 means no jump).
#[allow(clippy::too_many_arguments)]
fn growth_factor<S: Scalar>(
    mu: &[S],
    sigma: &[S],
    phi: &[S],
    lambda: &[S],
    p: usize,
    d: usize,
    dt: S,
    sq: S,
    bsigns: u8,
    jump: u8,
    i: usize,
) -> S {
    let mut f = S::one() + mu[i] * dt;
    for m in 0..p {
        let b = if bsigns >> m & 1 == 1 { sq } else { -sq };
        f += sigma[i * p + m] * b;
    }
    for j in 0..d {
        let dh = if jump as usize == j + 1 {
            S::one()
        } else {
            S::zero()
        };
        f += phi[i * d + j] * (dh - lambda[j] * dt);
    }
    f
}

/// Market prices of risk: the drift correction `(theta, gamma)` solving
/// `sigma_big * (theta, gamma) = -mu`, plus the log jump tilt
/// `z_j = -ln(1 + gamma_j)`.
#[derive(Debug, Clone)]
pub struct RiskPremia<S> {
    pub theta: Vec<S>,
    pub gamma: Vec<S>,
    pub z: Vec<S>,
}

impl<S: Scalar> RiskPremia<S> {
    /// The change of measure carrying these premia.
    pub fn girsanov(&self) -> GirsanovTilt<S> {
        GirsanovTilt {
            theta: self.theta.clone(),
            z: self.z.clone(),
        }
    }
}

/// Solves for the market prices of risk by Gaussian elimination with
/// partial pivoting. Fails when the loading matrix is singular or when
/// some `1 + gamma_j` is nonpositive, which would leave the jump tilt
/// undefined.
pub fn market_price_of_risk<S: Scalar>(market: &Market<S>) -> Result<RiskPremia<S>> {
    let n = market.n_assets;
    let p = n - market.lambda.len();
    let rhs: Vec<S> = market.mu.iter().map(|&v| -v).collect();
    let sol = solve_linear(&market.sigma_big, n, &rhs)?;
    let theta = sol[..p].to_vec();
    let gamma = sol[p..].to_vec();
    let mut z = Vec::with_capacity(gamma.len());
    for &g in &gamma {
        let w = S::one() + g;
        if !(w > S::zero()) {
            return Err(Error::JumpPremiumOutOfRange {
                value: w.to_f64().unwrap_or(f64::NAN),
            });
        }
        z.push(-w.ln());
    }
    Ok(RiskPremia { theta, gamma, z })
}

/// The pricing measure: the tilted measure under which every asset's
/// one-step expected return is `O(dt^2)`.
pub fn pricing_measure<S: Scalar>(
    market: &Market<S>,
    lattice: &Lattice<S>,
) -> Result<NodeMeasure<S>> {
    let premia = market_price_of_risk(market)?;
    tilt_to_measure(&premia.girsanov(), lattice)
}

/// Largest one-step relative drift of any asset under `q`:
/// `max |E_q[S_child - S_node]| / S_node` over nodes and assets.
pub fn martingale_residual<S: Scalar>(
    market: &Market<S>,
    q: &NodeMeasure<S>,
    lattice: &Lattice<S>,
) -> S {
    let n = market.n_assets;
    let mut worst = S::zero();
    for node in 0..lattice.num_nodes() {
        if lattice.is_leaf(node) {
            continue;
        }
        let probs = q.node_probs(lattice, node);
        for i in 0..n {
            let here = market.price(node, i);
            let mut drift = S::zero();
            for (e, edge) in lattice.children(node).iter().enumerate() {
                drift += probs[e] * (market.price(edge.child as usize, i) - here);
            }
            worst = worst.max((drift / here).abs());
        }
    }
    worst
}

/// Propagates self-financed wealth forward: starting from `x`, each step
/// adds the position's price gains and removes consumption,
/// `X_child = X_node + sum_i pi[node, i] (S_child^i - S_node^i) - c_node dt`.
/// `pi` is node-major with one share count per asset. Wealth is a path
/// functional, so recombining lattices are rejected.
pub fn wealth_path<S: Scalar>(
    x: S,
    pi: &[S],
    c: &AdaptedProcess<S>,
    market: &Market<S>,
    lattice: &Lattice<S>,
) -> Result<AdaptedProcess<S>> {
    if lattice.kind() == LatticeKind::Recombining {
        return Err(Error::RequiresTree {
            what: "wealth propagation",
        });
    }
    let n = market.n_assets;
    if pi.len() != lattice.num_nodes() * n {
        return Err(Error::MismatchedLattice {
            got: pi.len(),
            expected: lattice.num_nodes() * n,
        });
    }
    c.check_len(lattice)?;
    let dt = lattice.grid().dt();
    let mut wealth = vec![S::zero(); lattice.num_nodes()];
    wealth[0] = x;
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            let base = wealth[node] - c.values[node] * dt;
            for edge in lattice.children(node) {
                let child = edge.child as usize;
                let mut gain = S::zero();
                for i in 0..n {
                    gain += pi[node * n + i] * (market.price(child, i) - market.price(node, i));
                }
                wealth[child] = base + gain;
            }
        }
    }
    Ok(AdaptedProcess { values: wealth })
}

/// Checks the no-bankruptcy constraint `X >= 0` at every node. Returns
/// whether it holds and, if not, the earliest violation as a
/// `(time index, node)` pair; ties at the same time break toward the
/// lower node index. Exact zero wealth is admissible.
pub fn check_admissible<S: Scalar>(
    x: &AdaptedProcess<S>,
    lattice: &Lattice<S>,
) -> (bool, Option<(usize, usize)>) {
    for k in 0..=lattice.steps() {
        for node in lattice.slice(k) {
            if x.values[node] < S::zero() {
                return (false, Some((k, node)));
            }
        }
    }
    (true, None)
}

fn one_norm<S: Scalar>(a: &[S], n: usize) -> S {
    let mut worst = S::zero();
    for col in 0..n {
        let mut sum = S::zero();
        for row in 0..n {
            sum += a[row * n + col].abs();
        }
        worst = worst.max(sum);
    }
    worst
}

fn pivot_floor<S: Scalar>(a: &[S], n: usize) -> S {
    let mut scale = S::zero();
    for &v in a {
        scale = scale.max(v.abs());
    }
    S::epsilon() * lit::<S>(16.0 * n as f64) * scale
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve_linear<S: Scalar>(a: &[S], n: usize, b: &[S]) -> Result<Vec<S>> {
    let floor = pivot_floor(a, n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[best * n + col].abs() {
                best = row;
            }
        }
        if !(m[best * n + col].abs() > floor) {
            return Err(Error::SingularSigma);
        }
        if best != col {
            for j in 0..n {
                m.swap(col * n + j, best * n + j);
            }
            x.swap(col, best);
        }
        let inv = S::one() / m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] * inv;
            if factor == S::zero() {
                continue;
            }
            for j in col..n {
                m[row * n + j] = m[row * n + j] - factor * m[col * n + j];
            }
            x[row] = x[row] - factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= m[col * n + j] * x[j];
        }
        x[col] = acc / m[col * n + col];
    }
    Ok(x)
}

/// Inverts a square matrix by Gauss-Jordan elimination with partial
/// pivoting; used to report the condition number.
fn invert_matrix<S: Scalar>(a: &[S], n: usize) -> Result<Vec<S>> {
    let floor = pivot_floor(a, n);
    let mut m = a.to_vec();
    let mut inv = vec![S::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = S::one();
    }
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[best * n + col].abs() {
                best = row;
            }
        }
        if !(m[best * n + col].abs() > floor) {
            return Err(Error::SingularSigma);
        }
        if best != col {
            for j in 0..n {
                m.swap(col * n + j, best * n + j);
                inv.swap(col * n + j, best * n + j);
            }
        }
        let scale = S::one() / m[col * n + col];
        for j in 0..n {
            m[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = m[row * n + col];
            if factor == S::zero() {
                continue;
            }
            for j in 0..n {
                m[row * n + j] = m[row * n + j] - factor * m[col * n + j];
                inv[row * n + j] = inv[row * n + j] - factor * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}
