//! Command-line arguments and JSON config files.
//!
//! A config file is a JSON object whose keys are the long flag names of the chosen
//! subcommand (`{"beta": 37.7, "L": 8, "M": 3, "zeta": 0.01}`). Its entries are spliced in
//! right after the subcommand, so flags given on the command line override them.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SGRG_OUT_DIR";

#[derive(Debug, Parser, Serialize)]
#[command(name = "sgrg", version, about = "Polymer-expansion RG engine for the 2D sine-Gordon model")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Output directory for CSV, JSON and snapshot artifacts
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "sgrg-out")]
    pub out: PathBuf,
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file with flag names as keys; command-line flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Tabulate the slice, full or continuum covariance and its derivatives at a point
    Covariance(CovarianceArgs),
    /// Run the algebraic identity suites on random fields
    Identities(IdentityArgs),
    /// Run an infrared flow (beta > 8π)
    FlowIr(IrArgs),
    /// Run an ultraviolet flow (beta < 8π)
    FlowUv(UvArgs),
    /// Compare Monte Carlo partition functions across one IR step
    Oracle(OracleArgs),
    /// Write plot-ready CSV from a saved trajectory
    Plotdata(PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Covariance(_) => "covariance",
            Command::Identities(_) => "identities",
            Command::FlowIr(_) => "flow-ir",
            Command::FlowUv(_) => "flow-uv",
            Command::Oracle(_) => "oracle",
            Command::Plotdata(_) => "plotdata",
        }
    }
}

pub const COMMANDS: [&str; 6] = ["covariance", "identities", "flow-ir", "flow-uv", "oracle", "plotdata"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Slice,
    Full,
    Continuum,
}

#[derive(Debug, Args, Serialize)]
pub struct CovarianceArgs {
    #[arg(long = "L", default_value_t = 2)]
    pub l: u32,
    /// Torus side is L^M (ignored for the continuum kernel)
    #[arg(long = "M", default_value_t = 2)]
    pub m: u32,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub sigma: f64,
    /// Evaluation point as `x0` or `x0,x1`
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    pub x: String,
    /// Highest derivative order to tabulate
    #[arg(long, default_value_t = 0)]
    pub order: u32,
    #[arg(long, value_enum, default_value_t = KernelChoice::Slice)]
    pub kind: KernelChoice,
}

#[derive(Debug, Args, Serialize)]
pub struct IdentityArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Block torus for the polymer-exponential and extraction identities, as `NxN`
    #[arg(long, default_value = "3x3")]
    pub torus: String,
    /// Random fields per identity
    #[arg(long, default_value_t = 20)]
    pub fields: usize,
}

/// Truncation and schedule overrides shared by both flow modes.
#[derive(Debug, Args, Serialize)]
pub struct FlowTuning {
    #[arg(long)]
    pub kappa0: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Grid points per unit side for charge positions
    #[arg(long)]
    pub grid: Option<u32>,
    #[arg(long = "max-charge")]
    pub max_charge: Option<i32>,
    #[arg(long = "max-blocks")]
    pub max_blocks: Option<usize>,
    #[arg(long = "source-range")]
    pub source_range: Option<i64>,
    #[arg(long)]
    pub prune: Option<f64>,
    /// Midpoint nodes per side for the potential
    #[arg(long)]
    pub quad: Option<usize>,
    #[arg(long = "norm-order")]
    pub norm_order: Option<u32>,
    #[arg(long = "aniso-tol")]
    pub aniso_tol: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct IrArgs {
    #[arg(long)]
    pub beta: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub zeta: f64,
    #[arg(long = "L", default_value_t = 2)]
    pub l: u32,
    /// Volume exponent of the torus Λ_M
    #[arg(long = "M")]
    pub m: u32,
    /// Number of steps (default M)
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub tuning: FlowTuning,
}

#[derive(Debug, Args, Serialize)]
pub struct UvArgs {
    #[arg(long)]
    pub beta: f64,
    /// Coupling at j = 0, real or complex (`0.01`, `0.01+0.002i`)
    #[arg(long, allow_hyphen_values = true)]
    pub zeta: String,
    #[arg(long = "L", default_value_t = 2)]
    pub l: u32,
    /// Depth: the flow runs j = -N, ..., 0
    #[arg(long = "N")]
    pub n: u32,
    #[command(flatten)]
    pub tuning: FlowTuning,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub zeta: f64,
    #[arg(long = "L", default_value_t = 2)]
    pub l: u32,
    #[arg(long = "M", default_value_t = 1)]
    pub m: u32,
    #[arg(long, default_value_t = 40_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub chains: usize,
    /// Taylor order of the per-block Mayer factor
    #[arg(long = "mayer-order", default_value_t = 6)]
    pub mayer_order: u32,
    /// Sampled fields to write as binary snapshots
    #[arg(long, default_value_t = 0)]
    pub snapshots: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    /// A `trajectory.json` written by flow-ir or flow-uv
    #[arg(long)]
    pub trajectory: PathBuf,
    /// One of: contraction, zeta-schedule
    #[arg(long)]
    pub kind: String,
}

/// Splices the entries of any `--config FILE` into `argv` after the subcommand.
pub fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut args = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            args.push(a);
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?;
    let serde_json::Value::Object(map) = value else { bail!("config {path} must be a JSON object") };
    let mut flags = Vec::new();
    for (key, v) in map {
        let flag = format!("--{key}");
        match v {
            serde_json::Value::Bool(true) => flags.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Number(n) => flags.extend([flag, n.to_string()]),
            serde_json::Value::String(s) => flags.extend([flag, s]),
            _ => bail!("config key `{key}` must be a number, string or boolean"),
        }
    }
    let at = args.iter().position(|a| COMMANDS.contains(&a.as_str())).map_or(args.len(), |i| i + 1);
    args.splice(at..at, flags);
    Ok(args)
}

/// Parses `x0` or `x0,x1` into a planar point.
pub fn parse_point(s: &str) -> anyhow::Result<[f64; 2]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid value for `x`: {s}"))?;
    match parts.as_slice() {
        [a] => Ok([*a, 0.0]),
        [a, b] => Ok([*a, *b]),
        _ => bail!("invalid value for `x`: expected one or two coordinates"),
    }
}

/// Parses a square torus `NxN` into its side.
pub fn parse_torus(s: &str) -> anyhow::Result<u32> {
    let (a, b) = s.split_once(['x', 'X']).with_context(|| format!("invalid value for `torus`: {s}, expected NxN"))?;
    let (a, b): (u32, u32) = (
        a.trim().parse().with_context(|| format!("invalid value for `torus`: {s}"))?,
        b.trim().parse().with_context(|| format!("invalid value for `torus`: {s}"))?,
    );
    if a != b {
        bail!("invalid value for `torus`: only square tori are supported, got {s}");
    }
    Ok(a)
}
