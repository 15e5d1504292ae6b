//! Consumption/terminal-payout optimization under the penalized worst-case
//! criterion: utilities, budget accounting, the first-order candidate map,
//! multiplier search and optimality diagnostics.

use crate::bsde::{solve_bsdej, BsdeSolution, Scheme};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, DiscountSpec, Lattice};
use crate::measure::{CriterionSpec, NodeMeasure};
use crate::scalar::{lit, Scalar};

/// Strictly concave utilities with explicit inverse marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility<S> {
    /// `u(c) = ln c`.
    Log,
    /// `u(c) = c^gamma / gamma` for `gamma` strictly between 0 and 1.
    Power { gamma: S },
}

impl<S: Scalar> Utility<S> {
    pub fn validate(&self) -> Result<()> {
        if let Utility::Power { gamma } = self {
            if !(*gamma > S::zero() && *gamma < S::one()) {
                return Err(Error::BadUtilityExponent {
                    value: gamma.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    pub fn value(&self, c: S) -> S {
        match *self {
            Utility::Log => c.ln(),
            Utility::Power { gamma } => c.powf(gamma) / gamma,
        }
    }

    /// `u'(c)`.
    pub fn marginal(&self, c: S) -> S {
        match *self {
            Utility::Log => c.recip(),
            Utility::Power { gamma } => c.powf(gamma - S::one()),
        }
    }

    /// Inverse of the marginal: `i(y)` with `u'(i(y)) = y`.
    pub fn inverse_marginal(&self, y: S) -> S {
        match *self {
            Utility::Log => y.recip(),
            Utility::Power { gamma } => y.powf((gamma - S::one()).recip()),
        }
    }
}

/// Running utility plus an optional terminal one; omitting the terminal
/// part models pure consumption streams (the payout is pinned to zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityPair<S> {
    pub running: Utility<S>,
    pub terminal: Option<Utility<S>>,
}

impl<S: Scalar> UtilityPair<S> {
    pub fn validate(&self) -> Result<()> {
        self.running.validate()?;
        if let Some(t) = &self.terminal {
            t.validate()?;
        }
        Ok(())
    }
}

/// Consumption per node and payout per leaf (empty when there is no
/// terminal utility).
#[derive(Debug, Clone, PartialEq)]
pub struct Plan<S> {
    pub c: AdaptedProcess<S>,
    pub psi: Vec<S>,
}

impl<S: Scalar> Plan<S> {
    /// Constant plan; the natural seed for iteration.
    pub fn flat(lattice: &Lattice<S>, c: S, psi: Option<S>) -> Self {
        Plan {
            c: AdaptedProcess::constant(lattice, c),
            psi: match psi {
                Some(v) => vec![v; lattice.leaf_count()],
                None => Vec::new(),
            },
        }
    }

    pub fn check(&self, lattice: &Lattice<S>, terminal: bool) -> Result<()> {
        self.c.check_len(lattice)?;
        let want = if terminal { lattice.leaf_count() } else { 0 };
        if self.psi.len() != want {
            return Err(Error::MismatchedLattice {
                got: self.psi.len(),
                expected: want,
            });
        }
        for &v in self.c.values.iter().chain(&self.psi) {
            if !(v > S::zero()) || !v.is_finite() {
                return Err(Error::NonpositivePlan {
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        self.c.values.iter_mut().for_each(|v| *v *= factor);
        self.psi.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Data of one optimization instance: preferences, discounting, penalty
/// weight, the pricing measure the budget is quoted under, and capital.
#[derive(Debug, Clone)]
pub struct PlanProblem<S> {
    pub utility: UtilityPair<S>,
    pub discount: DiscountSpec<S>,
    pub beta: S,
    pub pricing: NodeMeasure<S>,
    pub capital: S,
}

impl<S: Scalar> PlanProblem<S> {
    pub fn validate(&self, lattice: &Lattice<S>) -> Result<()> {
        self.utility.validate()?;
        if !(self.capital > S::zero()) {
            return Err(Error::NonpositiveCapital {
                value: self.capital.to_f64().unwrap_or(f64::NAN),
            });
        }
        self.pricing.check(lattice)
    }

    pub fn has_terminal(&self) -> bool {
        self.utility.terminal.is_some()
    }
}

/// Cost of a plan under the pricing measure: consumption is financed at the
/// left endpoints and the payout at the horizon, in units of the riskless
/// account (identically 1 here, so no discounting appears).
pub fn budget<S: Scalar>(
    plan: &Plan<S>,
    pricing: &NodeMeasure<S>,
    lattice: &Lattice<S>,
) -> Result<S> {
    plan.c.check_len(lattice)?;
    let reach = pricing.reach(lattice);
    let dt = lattice.grid().dt();
    let mut total = S::zero();
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            total += reach[node] * plan.c.values[node] * dt;
        }
    }
    for (i, node) in lattice.leaf_range().enumerate() {
        if let Some(&psi) = plan.psi.get(i) {
            total += reach[node] * psi;
        }
    }
    Ok(total)
}

/// Criterion whose rewards are the utilities of the plan.
pub fn criterion_from_plan<S: Scalar>(
    problem: &PlanProblem<S>,
    plan: &Plan<S>,
    lattice: &Lattice<S>,
) -> CriterionSpec<S> {
    let u = AdaptedProcess {
        values: plan
            .c
            .values
            .iter()
            .map(|&c| problem.utility.running.value(c))
            .collect(),
    };
    let u_bar = match &problem.utility.terminal {
        Some(t) => plan.psi.iter().map(|&x| t.value(x)).collect(),
        None => vec![S::zero(); lattice.leaf_count()],
    };
    CriterionSpec {
        u,
        u_bar,
        discount: problem.discount.clone(),
        beta: problem.beta,
    }
}

/// Robust value of a plan: the root of the penalized backward equation with
/// the plan's utilities as rewards.
pub fn plan_value<S: Scalar>(
    problem: &PlanProblem<S>,
    plan: &Plan<S>,
    lattice: &Lattice<S>,
    scheme: Scheme,
) -> Result<BsdeSolution<S>> {
    problem.validate(lattice)?;
    plan.check(lattice, problem.has_terminal())?;
    solve_bsdej(&criterion_from_plan(problem, plan, lattice), lattice, scheme)
}

/// First-order candidate for multiplier `nu`: marginal utility equals
/// `nu` times the pricing density over the discounted worst-case density,
/// inverted through the marginal. Path densities make this tree-only.
pub fn candidate_plan<S: Scalar>(
    problem: &PlanProblem<S>,
    sol: &BsdeSolution<S>,
    lattice: &Lattice<S>,
    nu: S,
) -> Result<Plan<S>> {
    if !(nu > S::zero()) {
        return Err(Error::NonpositiveNu {
            value: nu.to_f64().unwrap_or(f64::NAN),
        });
    }
    let log_price = problem.pricing.log_density(lattice)?;
    let log_star = sol.qstar.log_density(lattice)?;
    let ln_nu = nu.ln();
    let mut c = Vec::with_capacity(lattice.num_nodes());
    for node in 0..lattice.num_nodes() {
        let ratio =
            (ln_nu + log_price[node] - log_star[node]).exp() / problem.discount.sdelta[node];
        c.push(problem.utility.running.inverse_marginal(ratio));
    }
    let psi = match &problem.utility.terminal {
        Some(t) => lattice
            .leaf_range()
            .map(|node| {
                let ratio = (ln_nu + log_price[node] - log_star[node]).exp()
                    / problem.discount.sdelta[node];
                t.inverse_marginal(ratio)
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(Plan {
        c: AdaptedProcess { values: c },
        psi,
    })
}

/// Iteration controls for [`solve_fixed_point`] and [`solve_nu`].
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Relaxation weight on the new candidate, in `(0, 1]`.
    pub damping: f64,
    /// Stop when the undamped candidate moves less than this (sup norm,
    /// relative to `1 + |value|`).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// Converged plan with its solution and iteration diagnostics.
#[derive(Debug, Clone)]
pub struct FixedPoint<S> {
    pub plan: Plan<S>,
    pub solution: BsdeSolution<S>,
    pub iterations: usize,
    pub residual: S,
}

/// Damped fixed-point iteration of the candidate map at fixed `nu`.
///
/// The candidate depends on the plan through the worst-case density, so the
/// map is iterated: solve, re-derive the candidate, relax toward it. The
/// reported residual is the sup-norm move of the undamped candidate.
pub fn solve_fixed_point<S: Scalar>(
    problem: &PlanProblem<S>,
    lattice: &Lattice<S>,
    scheme: Scheme,
    nu: S,
    init: Option<Plan<S>>,
    opts: &SolveOptions,
) -> Result<FixedPoint<S>> {
    problem.validate(lattice)?;
    if !(nu > S::zero()) {
        return Err(Error::NonpositiveNu {
            value: nu.to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut plan = match init {
        Some(p) => {
            p.check(lattice, problem.has_terminal())?;
            p
        }
        None => {
            let mut p = Plan::flat(
                lattice,
                S::one(),
                problem.has_terminal().then_some(S::one()),
            );
            let b = budget(&p, &problem.pricing, lattice)?;
            p.scale(problem.capital / b);
            p
        }
    };
    let rho = lit::<S>(opts.damping);
    let tol = lit::<S>(opts.tol);
    let mut residual = S::infinity();
    for it in 1..=opts.max_iter {
        let sol = solve_bsdej(&criterion_from_plan(problem, &plan, lattice), lattice, scheme)?;
        let cand = candidate_plan(problem, &sol, lattice, nu)?;
        residual = S::zero();
        for (&old, &new) in plan
            .c
            .values
            .iter()
            .zip(&cand.c.values)
            .chain(plan.psi.iter().zip(&cand.psi))
        {
            residual = residual.max((new - old).abs() / (S::one() + old.abs()));
        }
        if residual <= tol {
            return Ok(FixedPoint {
                plan,
                solution: sol,
                iterations: it,
                residual,
            });
        }
        for (old, &new) in plan
            .c
            .values
            .iter_mut()
            .zip(&cand.c.values)
            .chain(plan.psi.iter_mut().zip(&cand.psi))
        {
            *old = (S::one() - rho) * *old + rho * new;
        }
    }
    Err(Error::NoConvergence {
        iters: opts.max_iter,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// Multiplier solve: the budget of the fixed-point plan is strictly
/// decreasing in `nu`, so the capital constraint is met by bracketing and
/// bisection, warm-starting each evaluation from the previous plan.
#[derive(Debug, Clone)]
pub struct NuSolve<S> {
    pub nu: S,
    pub fixed_point: FixedPoint<S>,
    pub budget: S,
}

pub fn solve_nu<S: Scalar>(
    problem: &PlanProblem<S>,
    lattice: &Lattice<S>,
    scheme: Scheme,
    opts: &SolveOptions,
) -> Result<NuSolve<S>> {
    problem.validate(lattice)?;
    let two = lit::<S>(2.0);
    let mut warm: Option<Plan<S>> = None;
    let eval = |nu: S, warm: &mut Option<Plan<S>>| -> Result<(S, FixedPoint<S>)> {
        let fp = solve_fixed_point(problem, lattice, scheme, nu, warm.clone(), opts)?;
        let b = budget(&fp.plan, &problem.pricing, lattice)?;
        *warm = Some(fp.plan.clone());
        Ok((b, fp))
    };

    let mut lo = S::one();
    let mut hi = S::one();
    let (b1, fp1) = eval(S::one(), &mut warm)?;
    let mut best = (S::one(), b1, fp1);
    if b1 > problem.capital {
        // Too expensive: raise nu until the budget drops below capital.
        for _ in 0..60 {
            hi *= two;
            let (b, fp) = eval(hi, &mut warm)?;
            let below = b <= problem.capital;
            best = (hi, b, fp);
            if below {
                break;
            }
            lo = hi;
        }
        if best.1 > problem.capital {
            return Err(Error::BracketFailure);
        }
    } else if b1 < problem.capital {
        for _ in 0..60 {
            lo /= two;
            let (b, fp) = eval(lo, &mut warm)?;
            let above = b >= problem.capital;
            best = (lo, b, fp);
            if above {
                break;
            }
            hi = lo;
        }
        if best.1 < problem.capital {
            return Err(Error::BracketFailure);
        }
    }

    let btol = lit::<S>(1e-10) * problem.capital;
    for _ in 0..200 {
        if (best.1 - problem.capital).abs() <= btol {
            break;
        }
        let mid = (lo + hi) / two;
        if mid == lo || mid == hi {
            break;
        }
        let (b, fp) = eval(mid, &mut warm)?;
        best = (mid, b, fp);
        if b > problem.capital {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 - problem.capital).abs() > lit::<S>(1e-6) * problem.capital {
        return Err(Error::NoConvergence {
            iters: 200,
            residual: (best.1 - problem.capital).abs().to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(NuSolve {
        nu: best.0,
        fixed_point: best.2,
        budget: best.1,
    })
}

/// Largest relative violation of the first-order condition
/// `u'(c) * sdelta * zstar = nu * ztilde` over nodes and leaves.
pub fn verify_stationarity<S: Scalar>(
    problem: &PlanProblem<S>,
    plan: &Plan<S>,
    sol: &BsdeSolution<S>,
    lattice: &Lattice<S>,
    nu: S,
) -> Result<S> {
    plan.check(lattice, problem.has_terminal())?;
    let log_price = problem.pricing.log_density(lattice)?;
    let log_star = sol.qstar.log_density(lattice)?;
    let ln_nu = nu.ln();
    let mut worst = S::zero();
    let mut check = |marginal: S, node: usize| {
        let lhs = marginal.ln() + problem.discount.sdelta[node].ln() + log_star[node];
        let rhs = ln_nu + log_price[node];
        worst = worst.max((lhs - rhs).exp() - S::one()).max(
            S::one() - (lhs - rhs).exp(),
        );
    };
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            check(problem.utility.running.marginal(plan.c.values[node]), node);
        }
    }
    if let Some(t) = &problem.utility.terminal {
        for (i, node) in lattice.leaf_range().enumerate() {
            check(t.marginal(plan.psi[i]), node);
        }
    }
    Ok(worst)
}

/// Lagrangian `value(plan) + nu * (capital - budget(plan))`; the solved plan
/// maximizes it over all positive plans at the solved multiplier.
pub fn lagrangian<S: Scalar>(
    problem: &PlanProblem<S>,
    plan: &Plan<S>,
    lattice: &Lattice<S>,
    scheme: Scheme,
    nu: S,
) -> Result<S> {
    let sol = plan_value(problem, plan, lattice, scheme)?;
    let b = budget(plan, &problem.pricing, lattice)?;
    Ok(sol.value() + nu * (problem.capital - b))
}
