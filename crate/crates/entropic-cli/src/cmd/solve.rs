//! `solve`: run both schemes on the configured criterion and dump the
//! lattice, the per-node solutions and a summary.

use std::io::Write;
use std::path::Path;

use entropic::bsde::{
    closed_form_zero_rate, solve_bsdej, verify_k_martingale, verify_recursion, BsdeSolution,
    Scheme,
};
use entropic::lattice::{Lattice, LatticeKind};
use entropic::measure::{criterion_gamma, EntropyForm};
use entropic::Real;

use crate::config::{build_criterion, build_lattice_cfg, Config};
use crate::fail::{Fail, Result};
use crate::output::{self, Rows};

pub fn run(cfg: &Config, out: &Path) -> Result<()> {
    let lattice = build_lattice_cfg(&cfg.lattice)?;
    let crit = cfg
        .criterion
        .as_ref()
        .ok_or_else(|| Fail::config("solve requires a criterion section"))?;
    let spec = build_criterion(crit, &cfg.lattice, &lattice)?;

    let dp = solve_bsdej(&spec, &lattice, Scheme::Dp)?;
    let rec = solve_bsdej(&spec, &lattice, Scheme::Recursion)?;

    let mut nodes = output::create(out, "nodes.csv")?;
    lattice.dump_nodes(&mut nodes).map_err(output::io)?;
    nodes.flush().map_err(output::io)?;

    write_solution(out, "solution_dp.csv", &dp, &lattice)?;
    write_solution(out, "solution_recursion.csv", &rec, &lattice)?;

    let mut rows = Rows::default();
    rows.add("y0_dp", dp.value());
    rows.add("y0_recursion", rec.value());
    rows.add("scheme_gap", (dp.value() - rec.value()).abs());
    rows.add(
        "recursion_identity_residual",
        verify_recursion(&rec, &spec, &lattice)?,
    );
    rows.add(
        "k_martingale_residual",
        verify_k_martingale(&rec, &spec, &lattice)?,
    );
    let gamma = criterion_gamma(&spec, &dp.qstar, &lattice, EntropyForm::StepwiseKl)?;
    rows.add("duality_gap_dp", (gamma - dp.value()).abs());
    if spec.discount.zero && lattice.kind() != LatticeKind::Recombining {
        let reference = closed_form_zero_rate(&spec, &lattice)?;
        rows.add("zero_rate_reference", reference);
        rows.add("zero_rate_gap_dp", (dp.value() - reference).abs());
        rows.add("zero_rate_gap_recursion", (rec.value() - reference).abs());
    }
    rows.write(out, "summary.csv")?;
    rows.print();
    Ok(())
}

/// One row per node: value, loadings and the worst-case transition
/// probabilities. Leaves keep the loading columns at zero and leave the
/// probability columns empty.
pub fn write_solution(
    out: &Path,
    name: &str,
    sol: &BsdeSolution<Real>,
    lattice: &Lattice<Real>,
) -> Result<()> {
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let fanout = lattice.fanout();
    let mut w = output::create(out, name)?;

    let mut header = String::from("time_index,node_id,y");
    for m in 1..=p {
        header.push_str(&format!(",z_{m}"));
    }
    for j in 1..=d {
        header.push_str(&format!(",yjump_{j}"));
    }
    for c in 1..=fanout {
        header.push_str(&format!(",qstar_{c}"));
    }
    writeln!(w, "{header}").map_err(output::io)?;

    for k in 0..=lattice.steps() {
        for node in lattice.slice(k) {
            let mut line = format!("{k},{node},{}", sol.y[node]);
            for &z in sol.z_at(lattice, node) {
                line.push_str(&format!(",{z}"));
            }
            for &yj in sol.yjump_at(lattice, node) {
                line.push_str(&format!(",{yj}"));
            }
            if lattice.is_leaf(node) {
                for _ in 0..fanout {
                    line.push(',');
                }
            } else {
                for &v in sol.qstar.node_probs(lattice, node) {
                    line.push_str(&format!(",{v}"));
                }
            }
            writeln!(w, "{line}").map_err(output::io)?;
        }
    }
    w.flush().map_err(output::io)
}
