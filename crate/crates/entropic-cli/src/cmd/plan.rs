//! `optimal-plan`: maximize expected utility of consumption (and, when
//! enabled, a terminal claim) under the budget constraint, then report the
//! plan, the multiplier and the first-order residuals.

use std::io::Write;
use std::path::Path;

use entropic::lattice::LatticeKind;
use entropic::market::pricing_measure;
use entropic::measure::NodeMeasure;
use entropic::plan::{solve_nu, verify_stationarity, PlanProblem, UtilityPair};

use crate::config::{
    build_discount, build_lattice_cfg, build_market_cfg, parse_scheme, parse_utility,
    solve_options, Config,
};
use crate::fail::{as_config, Fail, Result};
use crate::output::{self, Rows};

/// Command line overrides for the optimization section.
pub struct Overrides {
    pub x: Option<f64>,
    pub utility: Option<String>,
    pub scheme: Option<String>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

pub fn run(cfg: &Config, out: &Path, over: Overrides) -> Result<()> {
    let lattice = build_lattice_cfg(&cfg.lattice)?;
    if lattice.kind() == LatticeKind::Recombining {
        return Err(Fail::config(
            "plan optimization weighs whole paths; use lattice.kind \"tree\" or \"single-path\"",
        ));
    }

    let mut opt = cfg.optimization.clone();
    if let Some(x) = over.x {
        opt.capital = x;
    }
    if let Some(u) = over.utility {
        opt.utility = u;
    }
    if let Some(s) = over.scheme {
        opt.scheme = s;
    }
    if let Some(t) = over.tol {
        opt.tol = t;
    }
    if let Some(m) = over.max_iter {
        opt.max_iter = m;
    }

    let utility = parse_utility(&opt.utility)?;
    let scheme = parse_scheme(&opt.scheme)?;
    let opts = solve_options(&opt)?;
    if !(opt.capital > 0.0 && opt.capital.is_finite()) {
        return Err(Fail::config(format!(
            "initial capital must be a positive number, got {}",
            opt.capital
        )));
    }

    let discount = build_discount(&cfg.lattice, &lattice)?;
    let beta = cfg.criterion.as_ref().map(|c| c.beta).unwrap_or(1.0);
    let pricing = match &cfg.market {
        Some(mcfg) => {
            let market = build_market_cfg(mcfg, &lattice)?;
            pricing_measure(&market, &lattice).map_err(as_config)?
        }
        None => NodeMeasure::base(&lattice),
    };

    let problem = PlanProblem {
        utility: UtilityPair {
            running: utility,
            terminal: opt.terminal_claim.then_some(utility),
        },
        discount,
        beta,
        pricing,
        capital: opt.capital,
    };
    problem.validate(&lattice).map_err(as_config)?;

    let solved = solve_nu(&problem, &lattice, scheme, &opts)?;
    let plan = &solved.fixed_point.plan;
    let solution = &solved.fixed_point.solution;
    let stationarity = verify_stationarity(&problem, plan, solution, &lattice, solved.nu)?;

    let mut w = output::create(out, "plan.csv")?;
    writeln!(w, "time_index,node_id,c,psi").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        for node in lattice.slice(k) {
            let c = plan.c.values[node];
            if lattice.is_leaf(node) && problem.has_terminal() {
                let psi = plan.psi[lattice.leaf_local(node)];
                writeln!(w, "{k},{node},{c},{psi}").map_err(output::io)?;
            } else {
                writeln!(w, "{k},{node},{c},").map_err(output::io)?;
            }
        }
    }
    w.flush().map_err(output::io)?;

    let mut rows = Rows::default();
    rows.add("nu", solved.nu);
    rows.add("value", solution.value());
    rows.add("budget", solved.budget);
    rows.add("budget_gap", (solved.budget - problem.capital).abs());
    rows.add("stationarity_residual", stationarity);
    rows.add("iterations", solved.fixed_point.iterations);
    rows.add("fixed_point_residual", solved.fixed_point.residual);
    rows.write(out, "summary.csv")?;
    rows.print();
    Ok(())
}
