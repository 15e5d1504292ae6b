//! `log-case`: the logarithmic problem at fixed multiplier, where the
//! value separates into deterministic weights and a remainder. Emits the
//! weight functions, the remainder against its reference equation, and the
//! separation residual.

use std::io::Write;
use std::path::Path;

use entropic::lattice::LatticeKind;
use entropic::logcase::solve_log_case;
use entropic::market::market_price_of_risk;
use entropic::measure::GirsanovTilt;

use crate::config::{
    build_discount, build_lattice_cfg, build_market_cfg, parse_scheme, solve_options, Config,
};
use crate::fail::{as_config, Fail, Result};
use crate::output::{self, Rows};

pub fn run(cfg: &Config, out: &Path) -> Result<()> {
    let lattice = build_lattice_cfg(&cfg.lattice)?;
    if lattice.kind() == LatticeKind::Recombining {
        return Err(Fail::config(
            "the log case weighs whole paths; use lattice.kind \"tree\" or \"single-path\"",
        ));
    }
    let discount = build_discount(&cfg.lattice, &lattice)?;
    if discount.deterministic_rates(&lattice).is_none() {
        return Err(Fail::config(
            "the log case needs a deterministic rate; make lattice.discount a constant or a function of t only",
        ));
    }
    let tilt = match &cfg.market {
        Some(mcfg) => {
            let market = build_market_cfg(mcfg, &lattice)?;
            market_price_of_risk(&market).map_err(as_config)?.girsanov()
        }
        None => GirsanovTilt::identity(lattice.brownian_dim(), lattice.jump_channels()),
    };

    let opt = &cfg.optimization;
    if !(opt.nu > 0.0 && opt.nu.is_finite()) {
        return Err(Fail::config(format!(
            "optimization.nu must be a positive number, got {}",
            opt.nu
        )));
    }
    let scheme = parse_scheme(&opt.scheme)?;
    let opts = solve_options(opt)?;
    let sol = solve_log_case(&lattice, &tilt, &discount, opt.nu, scheme, &opts)?;

    let grid = lattice.grid();
    let mut w = output::create(out, "alpha_k.csv")?;
    writeln!(w, "t,alpha,k").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        writeln!(w, "{},{},{}", grid.time(k), sol.alpha[k], sol.k[k]).map_err(output::io)?;
    }
    w.flush().map_err(output::io)?;

    let stats = sol.j_slice_stats(&lattice);
    let mut w = output::create(out, "J_compare.csv")?;
    writeln!(w, "t,j_ode,j_extracted_mean,spread").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        let (mean, spread) = stats[k];
        writeln!(w, "{},{},{},{}", grid.time(k), sol.j_ode[k], mean, spread)
            .map_err(output::io)?;
    }
    w.flush().map_err(output::io)?;

    // Per slice: how well the separated form rebuilds the solved value.
    let mut w = output::create(out, "reconstruction.csv")?;
    writeln!(w, "t,max_residual").map_err(output::io)?;
    for k in 0..=lattice.steps() {
        let a = sol.alpha[k];
        let mut worst = 0.0f64;
        for node in lattice.slice(k) {
            let rebuilt = a * sol.cstar.values[node].ln() + (1.0 + a) * sol.j[node];
            worst = worst.max((sol.v.values[node] - rebuilt).abs());
        }
        writeln!(w, "{},{}", grid.time(k), worst).map_err(output::io)?;
    }
    w.flush().map_err(output::io)?;

    let mut rows = Rows::default();
    rows.add("nu", sol.nu);
    rows.add("alpha_0", sol.alpha[0]);
    rows.add("value_0", sol.v.values[0]);
    rows.add("j_gap", sol.j_gap(&lattice));
    rows.add(
        "reconstruction_residual",
        sol.reconstruction_residual(&lattice),
    );
    rows.write(out, "summary.csv")?;
    rows.print();
    Ok(())
}
