//! `convergence`: rebuild the problem over a doubling sequence of step
//! counts and tabulate how fast the step-size effects shrink. Each series
//! row carries the refinement ratio against the previous row; first-order
//! effects show ratios near 2.

use std::io::Write;
use std::path::Path;

use entropic::bsde::{implied_tilt, solve_bsdej, verify_recursion, Scheme};
use entropic::lattice::LatticeKind;
use entropic::logcase::solve_log_case;
use entropic::market::market_price_of_risk;

use crate::config::{
    build_criterion, build_discount, build_lattice_cfg, build_market_cfg, parse_scheme,
    solve_options, Config,
};
use crate::fail::{as_config, Fail, Result};
use crate::output;

struct Series {
    name: &'static str,
    /// (delta, value, gap) per refinement.
    rows: Vec<(f64, f64, f64)>,
}

pub fn run(cfg: &Config, out: &Path) -> Result<()> {
    let run_cfg = cfg
        .run
        .as_ref()
        .ok_or_else(|| Fail::config("convergence requires a run section with refinements"))?;
    let refinements = &run_cfg.refinements;
    if refinements.is_empty() {
        return Err(Fail::config("run.refinements must list at least one step count"));
    }
    for pair in refinements.windows(2) {
        if pair[1] != 2 * pair[0] {
            return Err(Fail::config(format!(
                "run.refinements must double at every entry, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    let crit = cfg
        .criterion
        .as_ref()
        .ok_or_else(|| Fail::config("convergence requires a criterion section"))?;

    let p = cfg.lattice.brownian_dim;
    let d = cfg.lattice.jump_channels.len();
    let mut gap_series = Series {
        name: "scheme_gap",
        rows: Vec::new(),
    };
    let mut residual_series = Series {
        name: "recursion_residual_dp",
        rows: Vec::new(),
    };
    let mut drift_series = Series {
        name: "implied_drift_error",
        rows: Vec::new(),
    };
    let mut intensity_series = Series {
        name: "implied_intensity_error",
        rows: Vec::new(),
    };
    let mut spread_series = Series {
        name: "log_j_spread",
        rows: Vec::new(),
    };

    for &steps in refinements {
        let mut lattice_cfg = cfg.lattice.clone();
        lattice_cfg.steps = steps;
        let lattice = build_lattice_cfg(&lattice_cfg)?;
        let spec = build_criterion(crit, &lattice_cfg, &lattice)?;
        let delta = lattice.grid().dt();

        let dp = solve_bsdej(&spec, &lattice, Scheme::Dp)?;
        let rec = solve_bsdej(&spec, &lattice, Scheme::Recursion)?;
        gap_series
            .rows
            .push((delta, dp.value(), (dp.value() - rec.value()).abs()));
        residual_series
            .rows
            .push((delta, dp.value(), verify_recursion(&dp, &spec, &lattice)?));

        // Root-node contract between the extracted measure and the
        // loadings: the drift approaches -z and the per-channel intensity
        // ratio approaches exp(-yjump), both per unit of penalty weight.
        let tilt = implied_tilt(&dp, &lattice);
        if p > 0 {
            let mut err = 0.0f64;
            for m in 0..p {
                err = err.max((tilt.drift[m] + dp.z[m] / spec.beta).abs());
            }
            drift_series.rows.push((delta, tilt.drift[0], err));
        }
        if d > 0 {
            let mut err = 0.0f64;
            for j in 0..d {
                err = err
                    .max((tilt.intensity_ratio[j] - (-dp.yjump[j] / spec.beta).exp()).abs());
            }
            intensity_series
                .rows
                .push((delta, tilt.intensity_ratio[0], err));
        }

        if let Some(mcfg) = &cfg.market {
            let discount = build_discount(&lattice_cfg, &lattice)?;
            if lattice.kind() != LatticeKind::Recombining
                && discount.deterministic_rates(&lattice).is_some()
            {
                let market = build_market_cfg(mcfg, &lattice)?;
                let tilt = market_price_of_risk(&market).map_err(as_config)?.girsanov();
                let sol = solve_log_case(
                    &lattice,
                    &tilt,
                    &discount,
                    cfg.optimization.nu,
                    parse_scheme(&cfg.optimization.scheme)?,
                    &solve_options(&cfg.optimization)?,
                )?;
                let spread = sol
                    .j_slice_stats(&lattice)
                    .iter()
                    .fold(0.0f64, |acc, &(_, s)| acc.max(s));
                spread_series.rows.push((delta, sol.j[0], spread));
            }
        }
    }

    let mut w = output::create(out, "convergence.csv")?;
    writeln!(w, "series,delta,value,gap,ratio").map_err(output::io)?;
    println!("series,delta,value,gap,ratio");
    for series in [
        &gap_series,
        &residual_series,
        &drift_series,
        &intensity_series,
        &spread_series,
    ] {
        for (i, &(delta, value, gap)) in series.rows.iter().enumerate() {
            let ratio = if i == 0 {
                String::new()
            } else {
                let r = series.rows[i - 1].2 / gap;
                if r.is_finite() {
                    r.to_string()
                } else {
                    String::new()
                }
            };
            let line = format!("{},{delta},{value},{gap},{ratio}", series.name);
            writeln!(w, "{line}").map_err(output::io)?;
            println!("{line}");
        }
    }
    w.flush().map_err(output::io)
}
