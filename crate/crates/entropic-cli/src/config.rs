//! JSON configuration and its conversion into solver inputs.
//!
//! One file drives every command. Scalar fields accept either a number or
//! an expression string; expressions may use `t` (current time), `w1..wp`
//! (Brownian coordinates, sign sums scaled by the step width) and `n1..nd`
//! (jump counts per channel), in addition to the usual math functions.
//! Jump intensities may depend on `t` and the jump counts only.

use std::path::Path;

use entropic::lattice::{
    build_lattice, discount_process, AdaptedProcess, DiscountSpec, Lattice, LatticeKind, StateView,
    TimeGrid,
};
use entropic::market::{build_market, Market};
use entropic::measure::CriterionSpec;
use entropic::plan::{SolveOptions, Utility};
use entropic::Real;
use meval::{Context, Expr};
use serde::Deserialize;

use crate::fail::{as_config, Fail, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub lattice: LatticeSection,
    #[serde(default)]
    pub criterion: Option<CriterionSection>,
    #[serde(default)]
    pub market: Option<MarketSection>,
    #[serde(default)]
    pub optimization: OptimizationSection,
    #[serde(default)]
    pub run: Option<RunSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub brownian_dim: usize,
    #[serde(default)]
    pub jump_channels: Vec<JumpChannel>,
    /// "tree" (default), "recombining" or "single-path".
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Number, expression in the state variables, or the string "zero".
    #[serde(default)]
    pub discount: Option<NumberOrText>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpChannel {
    pub intensity: NumberOrText,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum NumberOrText {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSection {
    /// Running reward rate, evaluated at every node.
    pub running: NumberOrText,
    /// Terminal reward, evaluated at the leaves.
    pub terminal: NumberOrText,
    /// Entropy penalty weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    /// Excess drift rate per asset.
    pub mu: Vec<f64>,
    /// Volatility loadings, one row per asset, `brownian_dim` columns.
    #[serde(default)]
    pub sigma: Vec<Vec<f64>>,
    /// Relative jump sizes, one row per asset, `jump_channels` columns.
    #[serde(default)]
    pub phi: Vec<Vec<f64>>,
    /// Jump intensities; must match the lattice channels.
    #[serde(default)]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationSection {
    pub capital: f64,
    /// "log" or "power:<gamma>" with gamma in (0, 1).
    pub utility: String,
    /// Whether the plan carries a terminal claim alongside consumption.
    pub terminal_claim: bool,
    /// "dp" or "recursion".
    pub scheme: String,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Budget multiplier for the log-case command, which runs at fixed nu.
    pub nu: f64,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        OptimizationSection {
            capital: 1.0,
            utility: "log".to_string(),
            terminal_claim: true,
            scheme: "dp".to_string(),
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            nu: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Step counts for refinement studies; each entry must double the last.
    pub refinements: Vec<usize>,
}

fn default_kind() -> String {
    "tree".to_string()
}

fn default_beta() -> f64 {
    1.0
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::config(format!("cannot read {}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| Fail::config(format!("{}: {}", path.display(), e)))
}

/// Parsed expression together with its source, for error messages.
struct Formula {
    src: String,
    expr: Expr,
}

impl Formula {
    fn parse(src: &str) -> Result<Formula> {
        let expr = src
            .parse::<Expr>()
            .map_err(|e| Fail::config(format!("expression '{src}': {e}")))?;
        Ok(Formula {
            src: src.to_string(),
            expr,
        })
    }

    fn eval(&self, ctx: &Context) -> Result<f64> {
        self.expr
            .eval_with_context(ctx)
            .map_err(|e| Fail::config(format!("expression '{}': {}", self.src, e)))
    }
}

/// Binds `t`, `w1..wp` and `n1..nd` for one node.
fn state_context(t: f64, sq: f64, state: &StateView<'_>) -> Context<'static> {
    let mut ctx = Context::new();
    ctx.var("t", t);
    for (m, &b) in state.bsum.iter().enumerate() {
        ctx.var(format!("w{}", m + 1), b as f64 * sq);
    }
    for (j, &c) in state.jumps.iter().enumerate() {
        ctx.var(format!("n{}", j + 1), c as f64);
    }
    ctx
}

/// Evaluates a scalar-or-expression field at every node.
pub fn eval_adapted(field: &NumberOrText, lattice: &Lattice<Real>) -> Result<AdaptedProcess<Real>> {
    match field {
        NumberOrText::Number(v) => Ok(AdaptedProcess::constant(lattice, *v)),
        NumberOrText::Text(src) => {
            let f = Formula::parse(src)?;
            let sq = lattice.grid().dt().sqrt();
            let mut values = Vec::with_capacity(lattice.num_nodes());
            for k in 0..=lattice.steps() {
                let t = lattice.grid().time(k);
                for node in lattice.slice(k) {
                    let ctx = state_context(t, sq, &lattice.state(node));
                    values.push(f.eval(&ctx)?);
                }
            }
            Ok(AdaptedProcess { values })
        }
    }
}

/// Evaluates a scalar-or-expression field at the leaves, at the horizon.
pub fn eval_terminal(field: &NumberOrText, lattice: &Lattice<Real>) -> Result<Vec<Real>> {
    match field {
        NumberOrText::Number(v) => Ok(vec![*v; lattice.leaf_count()]),
        NumberOrText::Text(src) => {
            let f = Formula::parse(src)?;
            let sq = lattice.grid().dt().sqrt();
            let t = lattice.grid().horizon();
            let mut values = Vec::with_capacity(lattice.leaf_count());
            for node in lattice.leaf_range() {
                let ctx = state_context(t, sq, &lattice.state(node));
                values.push(f.eval(&ctx)?);
            }
            Ok(values)
        }
    }
}

fn parse_kind(kind: &str) -> Result<LatticeKind> {
    match kind {
        "tree" => Ok(LatticeKind::Tree),
        "recombining" => Ok(LatticeKind::Recombining),
        "single-path" | "single_path" => Ok(LatticeKind::SinglePath),
        other => Err(Fail::config(format!(
            "lattice.kind '{other}' is not one of \"tree\", \"recombining\", \"single-path\""
        ))),
    }
}

pub fn build_lattice_cfg(cfg: &LatticeSection) -> Result<Lattice<Real>> {
    if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
        return Err(Fail::config(format!(
            "lattice.horizon must be a positive number, got {}",
            cfg.horizon
        )));
    }
    if cfg.steps == 0 {
        return Err(Fail::config("lattice.steps must be at least 1"));
    }
    let kind = parse_kind(&cfg.kind)?;
    let d = cfg.jump_channels.len();

    enum Rate {
        Const(f64),
        Fun(Formula),
    }
    let mut rates = Vec::with_capacity(d);
    for (j, channel) in cfg.jump_channels.iter().enumerate() {
        match &channel.intensity {
            NumberOrText::Number(v) => rates.push(Rate::Const(*v)),
            NumberOrText::Text(src) => {
                let f = Formula::parse(src)?;
                // The variable set is the same at every node, so evaluating
                // once catches every name resolution problem upfront.
                let mut probe = Context::new();
                probe.var("t", 0.0);
                for i in 0..d {
                    probe.var(format!("n{}", i + 1), 0.0);
                }
                f.eval(&probe).map_err(|_| {
                    Fail::config(format!(
                        "jump intensity {} '{src}' may only use t and n1..n{d}",
                        j + 1
                    ))
                })?;
                rates.push(Rate::Fun(f));
            }
        }
    }

    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps);
    let lattice = build_lattice(
        grid,
        cfg.brownian_dim,
        d,
        |t, state| {
            rates
                .iter()
                .map(|r| match r {
                    Rate::Const(v) => *v,
                    Rate::Fun(f) => {
                        let mut ctx = Context::new();
                        ctx.var("t", t);
                        for (j, &c) in state.jumps.iter().enumerate() {
                            ctx.var(format!("n{}", j + 1), c as f64);
                        }
                        f.eval(&ctx).unwrap_or(f64::NAN)
                    }
                })
                .collect()
        },
        kind,
    )
    .map_err(as_config)?;

    // Expression-driven intensities can produce non-finite values that the
    // positivity checks cannot flag; scan once.
    for k in 0..lattice.steps() {
        for node in lattice.slice(k) {
            if lattice.lambda(node).iter().any(|l| !l.is_finite()) {
                return Err(Fail::config(format!(
                    "a jump intensity expression produced a non-finite value at node {node}"
                )));
            }
        }
    }
    Ok(lattice)
}

pub fn build_discount(
    cfg: &LatticeSection,
    lattice: &Lattice<Real>,
) -> Result<DiscountSpec<Real>> {
    match &cfg.discount {
        None => Ok(DiscountSpec::zero_rate(lattice)),
        Some(NumberOrText::Number(v)) if *v == 0.0 => Ok(DiscountSpec::zero_rate(lattice)),
        Some(NumberOrText::Number(v)) => DiscountSpec::constant(*v, lattice).map_err(as_config),
        Some(NumberOrText::Text(s)) if s == "zero" => Ok(DiscountSpec::zero_rate(lattice)),
        Some(field @ NumberOrText::Text(_)) => {
            let rate = eval_adapted(field, lattice)?;
            discount_process(&rate, lattice).map_err(as_config)
        }
    }
}

pub fn build_criterion(
    cfg: &CriterionSection,
    lattice_cfg: &LatticeSection,
    lattice: &Lattice<Real>,
) -> Result<CriterionSpec<Real>> {
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(Fail::config(format!(
            "criterion.beta must be a positive number, got {}",
            cfg.beta
        )));
    }
    let spec = CriterionSpec {
        u: eval_adapted(&cfg.running, lattice)?,
        u_bar: eval_terminal(&cfg.terminal, lattice)?,
        discount: build_discount(lattice_cfg, lattice)?,
        beta: cfg.beta,
    };
    spec.check(lattice).map_err(as_config)?;
    Ok(spec)
}

pub fn build_market_cfg(cfg: &MarketSection, lattice: &Lattice<Real>) -> Result<Market<Real>> {
    let n = cfg.mu.len();
    let p = lattice.brownian_dim();
    let d = lattice.jump_channels();
    let mut sigma = Vec::with_capacity(n * p);
    let mut phi = Vec::with_capacity(n * d);
    if cfg.sigma.len() != n || cfg.phi.len() != n {
        return Err(Fail::config(format!(
            "market needs one sigma row and one phi row per asset: {} assets, {} sigma rows, {} phi rows",
            n,
            cfg.sigma.len(),
            cfg.phi.len()
        )));
    }
    for (i, row) in cfg.sigma.iter().enumerate() {
        if row.len() != p {
            return Err(Fail::config(format!(
                "market.sigma row {i} has {} entries, the lattice has {p} Brownian coordinates",
                row.len()
            )));
        }
        sigma.extend_from_slice(row);
    }
    for (i, row) in cfg.phi.iter().enumerate() {
        if row.len() != d {
            return Err(Fail::config(format!(
                "market.phi row {i} has {} entries, the lattice has {d} jump channels",
                row.len()
            )));
        }
        phi.extend_from_slice(row);
    }
    build_market(&cfg.mu, &sigma, &phi, &cfg.lambda, lattice).map_err(as_config)
}

pub fn parse_utility(s: &str) -> Result<Utility<Real>> {
    let utility = if s == "log" {
        Utility::Log
    } else if let Some(g) = s.strip_prefix("power:") {
        let gamma: f64 = g
            .parse()
            .map_err(|_| Fail::config(format!("utility exponent '{g}' is not a number")))?;
        Utility::Power { gamma }
    } else {
        return Err(Fail::config(format!(
            "utility '{s}' is not \"log\" or \"power:<gamma>\""
        )));
    };
    utility.validate().map_err(as_config)?;
    Ok(utility)
}

pub fn parse_scheme(s: &str) -> Result<entropic::bsde::Scheme> {
    match s {
        "dp" => Ok(entropic::bsde::Scheme::Dp),
        "recursion" => Ok(entropic::bsde::Scheme::Recursion),
        other => Err(Fail::config(format!(
            "scheme '{other}' is not \"dp\" or \"recursion\""
        ))),
    }
}

pub fn solve_options(opt: &OptimizationSection) -> Result<SolveOptions> {
    if !(opt.damping > 0.0 && opt.damping <= 1.0) {
        return Err(Fail::config(format!(
            "optimization.damping must lie in (0, 1], got {}",
            opt.damping
        )));
    }
    if !(opt.tol > 0.0) {
        return Err(Fail::config(format!(
            "optimization.tol must be positive, got {}",
            opt.tol
        )));
    }
    Ok(SolveOptions {
        damping: opt.damping,
        tol: opt.tol,
        max_iter: opt.max_iter,
    })
}
