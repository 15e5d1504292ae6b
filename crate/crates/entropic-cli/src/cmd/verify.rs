//! `verify`: solve the configured problem and cross-check it against
//! independent references, writing one row per check to oracle_report.csv.
//!
//! The suite enumerates whole trees (grid searches, pathwise sums), so it
//! refuses lattices beyond a small size instead of running for hours.

use std::io::Write;
use std::path::Path;

use entropic::bsde::{
    closed_form_zero_rate, comparison_check, gateaux_derivative, one_step_entropic, solve_bsdej,
    verify_k_martingale, verify_recursion, Scheme,
};
use entropic::lattice::{AdaptedProcess, DiscountSpec, LatticeKind};
use entropic::measure::{criterion_gamma, CriterionSpec, EntropyForm};
use entropic::oracle::{concavity_check, dv_onestep_grid, random_measure, tree_min_grid};
use entropic::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    build_criterion, build_lattice_cfg, Config, CriterionSection, JumpChannel, LatticeSection,
    NumberOrText, OptimizationSection,
};
use crate::fail::{Fail, Result};
use crate::output;

const MAX_STEPS: usize = 12;
const MAX_NODES: usize = 200_000;

struct Check {
    name: &'static str,
    value: f64,
    tol: f64,
    pass: bool,
}

/// Two-sided check: |value| must stay within tol.
fn within(name: &'static str, value: f64, tol: f64) -> Check {
    Check {
        name,
        value,
        tol,
        pass: value.abs() <= tol,
    }
}

/// One-sided check: value must not drop below -tol.
fn at_least(name: &'static str, value: f64, tol: f64) -> Check {
    Check {
        name,
        value,
        tol,
        pass: value >= -tol,
    }
}

/// Small mixed lattice used when no configuration file is given.
pub fn default_config() -> Config {
    Config {
        lattice: LatticeSection {
            horizon: 0.6,
            steps: 6,
            brownian_dim: 1,
            jump_channels: vec![JumpChannel {
                intensity: NumberOrText::Number(0.25),
            }],
            kind: "tree".to_string(),
            discount: Some(NumberOrText::Number(0.4)),
        },
        criterion: Some(CriterionSection {
            running: NumberOrText::Text("0.2*w1 - 0.1*n1 + 0.05*t".to_string()),
            terminal: NumberOrText::Text("0.1*w1 + 0.05*n1".to_string()),
            beta: 1.0,
        }),
        market: None,
        optimization: OptimizationSection::default(),
        run: None,
    }
}

pub fn run(cfg: &Config, out: &Path, seed: u64, corrupt: bool) -> Result<()> {
    let lattice = build_lattice_cfg(&cfg.lattice)?;
    if lattice.kind() != LatticeKind::Tree {
        return Err(Fail::config(
            "the verification suite needs pathwise references; set lattice.kind to \"tree\"",
        ));
    }
    if lattice.steps() > MAX_STEPS || lattice.num_nodes() > MAX_NODES {
        return Err(Fail::config(format!(
            "the verification suite enumerates whole trees and this one has {} steps and {} nodes; \
             keep steps at most {MAX_STEPS} and nodes at most {MAX_NODES} by lowering lattice.steps, \
             brownian_dim or the number of jump channels",
            lattice.steps(),
            lattice.num_nodes()
        )));
    }
    let crit = cfg
        .criterion
        .as_ref()
        .ok_or_else(|| Fail::config("verify requires a criterion section"))?;
    let spec = build_criterion(crit, &cfg.lattice, &lattice)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<Check> = Vec::new();

    let mut dp = solve_bsdej(&spec, &lattice, Scheme::Dp)?;
    if corrupt {
        // Negative control: a biased solver must make the duality checks fail.
        dp.y[0] += 1e-6;
    }
    let rec = solve_bsdej(&spec, &lattice, Scheme::Recursion)?;

    // One-step penalized minimum against a brute-force simplex grid.
    {
        let m = 500usize;
        let probs = normalized(&mut rng, 4);
        let values: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = one_step_entropic(&probs, &values);
        let grid = dv_onestep_grid(&probs, &values, m);
        let spread = values.iter().cloned().fold(f64::MIN, f64::max)
            - values.iter().cloned().fold(f64::MAX, f64::min);
        let gap = grid.value - exact;
        checks.push(Check {
            name: "one_step_grid_bracket",
            value: gap,
            tol: 10.0 * (spread + 1.0) / m as f64,
            pass: gap >= -1e-12 && gap <= 10.0 * (spread + 1.0) / m as f64,
        });
    }

    // Whole-tree grid minimization on a truncated copy of the lattice.
    {
        let mut small_cfg = cfg.lattice.clone();
        small_cfg.steps = cfg.lattice.steps.min(3);
        let small = build_lattice_cfg(&small_cfg)?;
        let small_spec = build_criterion(crit, &small_cfg, &small)?;
        let small_dp = solve_bsdej(&small_spec, &small, Scheme::Dp)?;
        let fanout = small.fanout();
        let m = if fanout <= 2 {
            200
        } else if fanout <= 4 {
            40
        } else if fanout <= 6 {
            16
        } else {
            8
        };
        let grid_value = tree_min_grid(&small_spec, &small, m)?;
        let gap = grid_value - small_dp.value();
        let tol = 10.0 * (small.steps() + 1) as f64 / m as f64;
        checks.push(Check {
            name: "tree_grid_bracket",
            value: gap,
            tol,
            pass: gap >= -1e-8 && gap <= tol,
        });
    }

    // The extracted measure attains the dual value exactly.
    {
        let gamma = criterion_gamma(&spec, &dp.qstar, &lattice, EntropyForm::StepwiseKl)?;
        checks.push(within("duality_attained", gamma - dp.value(), 1e-10));
    }

    // No equivalent measure does better.
    {
        let mut worst = f64::INFINITY;
        for _ in 0..100 {
            let q = random_measure(&lattice, &mut rng, 0.15);
            let gamma = criterion_gamma(&spec, &q, &lattice, EntropyForm::StepwiseKl)?;
            worst = worst.min(gamma - dp.value());
        }
        checks.push(at_least("duality_lower_bound", worst, 1e-10));
    }

    checks.push(within(
        "recursion_identity",
        verify_recursion(&rec, &spec, &lattice)?,
        1e-10,
    ));
    checks.push(within(
        "k_martingale",
        verify_k_martingale(&rec, &spec, &lattice)?,
        1e-10,
    ));

    // With no discounting both schemes collapse to one pathwise expectation.
    {
        let zero_spec = CriterionSpec {
            u: spec.u.clone(),
            u_bar: spec.u_bar.clone(),
            discount: DiscountSpec::zero_rate(&lattice),
            beta: spec.beta,
        };
        let a = solve_bsdej(&zero_spec, &lattice, Scheme::Dp)?;
        let b = solve_bsdej(&zero_spec, &lattice, Scheme::Recursion)?;
        let reference = closed_form_zero_rate(&zero_spec, &lattice)?;
        let gap = (a.value() - reference)
            .abs()
            .max((b.value() - reference).abs());
        checks.push(within("zero_rate_closed_form", gap, 1e-12));
    }

    // Ordered rewards keep ordered values, quantitatively.
    {
        let mut worst_excess = f64::MIN;
        let mut worst_slack = f64::MIN;
        let hi = solve_bsdej(&spec, &lattice, Scheme::Dp)?;
        for _ in 0..20 {
            let mut lo_spec = spec.clone();
            for v in lo_spec.u.values.iter_mut() {
                *v -= rng.gen_range(0.0..0.5);
            }
            for v in lo_spec.u_bar.iter_mut() {
                *v -= rng.gen_range(0.0..0.5);
            }
            let lo = solve_bsdej(&lo_spec, &lattice, Scheme::Dp)?;
            let report = comparison_check(&lo, &lo_spec, &hi, &spec, &lattice)?;
            worst_excess = worst_excess.max(report.pointwise_excess);
            worst_slack = worst_slack.max(report.slack);
        }
        checks.push(Check {
            name: "comparison_pointwise",
            value: worst_excess,
            tol: 1e-12,
            pass: worst_excess <= 1e-12,
        });
        checks.push(Check {
            name: "comparison_bound",
            value: worst_slack,
            tol: 1e-10,
            pass: worst_slack <= 1e-10,
        });
    }

    // The value is concave in the reward data.
    {
        let ua: Vec<f64> = (0..lattice.num_nodes())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let uba: Vec<f64> = (0..lattice.leaf_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let ub: Vec<f64> = (0..lattice.num_nodes())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let ubb: Vec<f64> = (0..lattice.leaf_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let blend = |theta: f64| -> f64 {
            let mut s = spec.clone();
            for (i, v) in s.u.values.iter_mut().enumerate() {
                *v = (1.0 - theta) * ua[i] + theta * ub[i];
            }
            for (i, v) in s.u_bar.iter_mut().enumerate() {
                *v = (1.0 - theta) * uba[i] + theta * ubb[i];
            }
            solve_bsdej(&s, &lattice, Scheme::Dp)
                .map(|sol| sol.value())
                .unwrap_or(f64::NAN)
        };
        let defect = concavity_check(blend, 0.0, 1.0, 25, &mut rng);
        checks.push(at_least("reward_concavity", defect, 1e-12));
    }

    // Directional derivative against central finite differences.
    {
        let base = solve_bsdej(&spec, &lattice, Scheme::Dp)?;
        let mut worst_ratio = f64::MIN;
        let mut worst_rel = f64::MIN;
        for _ in 0..5 {
            let du = AdaptedProcess {
                values: (0..lattice.num_nodes())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            };
            let du_bar: Vec<f64> = (0..lattice.leaf_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let derivative = gateaux_derivative(&base, &spec, &lattice, &du, &du_bar)?;
            let fd = |eps: f64| -> Result<f64> {
                let mut up = spec.clone();
                let mut down = spec.clone();
                for i in 0..lattice.num_nodes() {
                    up.u.values[i] += eps * du.values[i];
                    down.u.values[i] -= eps * du.values[i];
                }
                for i in 0..lattice.leaf_count() {
                    up.u_bar[i] += eps * du_bar[i];
                    down.u_bar[i] -= eps * du_bar[i];
                }
                let a = solve_bsdej(&up, &lattice, Scheme::Dp)?;
                let b = solve_bsdej(&down, &lattice, Scheme::Dp)?;
                Ok((a.value() - b.value()) / (2.0 * eps))
            };
            let err_coarse = (fd(1e-2)? - derivative).abs();
            let err_fine = (fd(1e-3)? - derivative).abs();
            worst_ratio = worst_ratio.max(err_fine / (err_coarse + 1e-15));
            worst_rel = worst_rel.max(err_fine / derivative.abs().max(1e-6));
        }
        checks.push(Check {
            name: "gateaux_step_order",
            value: worst_ratio,
            tol: 0.2,
            pass: worst_ratio <= 0.2,
        });
        checks.push(Check {
            name: "gateaux_accuracy",
            value: worst_rel,
            tol: 1e-2,
            pass: worst_rel <= 1e-2,
        });
    }

    let mut w = output::create(out, "oracle_report.csv")?;
    writeln!(w, "check,value,tolerance,pass").map_err(output::io)?;
    println!("check,value,tolerance,pass");
    let mut failed = 0usize;
    for c in &checks {
        let line = format!(
            "{},{},{},{}",
            c.name,
            c.value,
            c.tol,
            if c.pass { "true" } else { "false" }
        );
        writeln!(w, "{line}").map_err(output::io)?;
        println!("{line}");
        if !c.pass {
            failed += 1;
        }
    }
    w.flush().map_err(output::io)?;

    if failed > 0 {
        return Err(Fail::numerical(format!(
            "{failed} of {} verification checks failed; see oracle_report.csv",
            checks.len()
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn normalized(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    p
}
