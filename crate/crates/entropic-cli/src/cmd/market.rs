//! `market-demo`: build the price lattice, solve for the risk premia,
//! check the pricing measure, and propagate a buy-and-hold wealth path.

use std::io::Write;
use std::path::Path;

use entropic::lattice::{AdaptedProcess, LatticeKind};
use entropic::market::{check_admissible, market_price_of_risk, martingale_residual, wealth_path};
use entropic::measure::tilt_to_measure;

use crate::config::{build_lattice_cfg, build_market_cfg, Config};
use crate::fail::{as_config, Fail, Result};
use crate::output::{self, Rows};

pub fn run(cfg: &Config, out: &Path) -> Result<()> {
    let lattice = build_lattice_cfg(&cfg.lattice)?;
    let mcfg = cfg
        .market
        .as_ref()
        .ok_or_else(|| Fail::config("market-demo requires a market section"))?;
    if lattice.kind() != LatticeKind::Tree {
        return Err(Fail::config(
            "wealth propagation follows individual paths; use lattice.kind \"tree\"",
        ));
    }
    let market = build_market_cfg(mcfg, &lattice)?;
    let premia = market_price_of_risk(&market).map_err(as_config)?;
    let pricing = tilt_to_measure(&premia.girsanov(), &lattice).map_err(as_config)?;
    let residual = martingale_residual(&market, &pricing, &lattice);

    let n = market.n_assets();
    let mut w = output::create(out, "prices.csv")?;
    let mut header = String::from("time_index,node_id");
    for i in 1..=n {
        header.push_str(&format!(",s_{i}"));
    }
    writeln!(w, "{header}").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        for node in lattice.slice(k) {
            let mut line = format!("{k},{node}");
            for &s in market.node_prices(node) {
                line.push_str(&format!(",{s}"));
            }
            writeln!(w, "{line}").map_err(output::io)?;
        }
    }
    w.flush().map_err(output::io)?;

    // Demo strategy: half the capital spread evenly over the assets as a
    // fixed share count, the rest consumed at a constant rate.
    let x = cfg.optimization.capital;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Fail::config(format!(
            "optimization.capital must be a positive number, got {x}"
        )));
    }
    let share = x / (2.0 * n as f64);
    let pi = vec![share; lattice.num_nodes() * n];
    let rate = x / (2.0 * lattice.grid().horizon());
    let consumption = AdaptedProcess::constant(&lattice, rate);
    let wealth = wealth_path(x, &pi, &consumption, &market, &lattice)?;
    let (admissible, violation) = check_admissible(&wealth, &lattice);

    let mut w = output::create(out, "wealth.csv")?;
    writeln!(w, "time_index,node_id,x").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        for node in lattice.slice(k) {
            writeln!(w, "{k},{node},{}", wealth.values[node]).map_err(output::io)?;
        }
    }
    w.flush().map_err(output::io)?;

    // Funding identity under the pricing measure: consumption plus final
    // wealth is worth the initial capital, up to the step error.
    let reach = pricing.reach(&lattice);
    let dt = lattice.grid().dt();
    let mut funded = 0.0f64;
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            funded += reach[node] * consumption.values[node] * dt;
        }
    }
    for node in lattice.leaf_range() {
        funded += reach[node] * wealth.values[node];
    }

    let mut rows = Rows::default();
    for (m, &th) in premia.theta.iter().enumerate() {
        rows.add(&format!("theta_{}", m + 1), th);
    }
    for (j, &g) in premia.gamma.iter().enumerate() {
        rows.add(&format!("gamma_{}", j + 1), g);
    }
    for (j, &z) in premia.z.iter().enumerate() {
        rows.add(&format!("z_{}", j + 1), z);
    }
    rows.add("sigma_condition", market.condition());
    rows.add("martingale_residual", residual);
    rows.add("budget_gap", (funded - x).abs());
    rows.add("admissible", admissible);
    if let Some((k, node)) = violation {
        rows.add("first_violation_time_index", k);
        rows.add("first_violation_node", node);
    }
    rows.write(out, "risk_premia.csv")?;
    rows.print();
    Ok(())
}
