//! Subcommand execution.

use std::f64::consts::PI;
use std::str::FromStr;

use anyhow::{bail, Context};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use sgrg::checks::{self, Check};
use sgrg::covariance::{continuum_at_zero_closed_form, CovarianceKernel};
use sgrg::fields::{spectral_sample, FieldGrid};
use sgrg::flow::{
    contraction_report, emit_plotdata, ir_flow, uv_flow, z_invariance_check, FlowConfig, FlowMode, FlowTrajectory, OracleConfig,
    PLOT_KINDS,
};
use sgrg::lattice::{multi_indices, order, TorusSpec, MAX_DIM};

use crate::args::{parse_point, parse_torus, Command, CovarianceArgs, FlowTuning, IdentityArgs, IrArgs, KernelChoice, OracleArgs, PlotArgs, UvArgs};
use crate::output::{num, opt, OutDir};

/// Outcome of a command that ran to completion.
pub struct Outcome {
    pub passed: bool,
    pub resolved: serde_json::Value,
    pub warnings: Vec<String>,
    pub summary: serde_json::Value,
}

fn missing_seed(command: &str) -> sgrg::Error {
    sgrg::Error::InvalidParameter { name: "seed", reason: format!("`{command}` is stochastic and needs --seed") }
}

pub fn run(command: &Command, out: &mut OutDir) -> anyhow::Result<Outcome> {
    match command {
        Command::Covariance(a) => covariance(a, out),
        Command::Identities(a) => identities(a, out),
        Command::FlowIr(a) => flow_ir(a, out),
        Command::FlowUv(a) => flow_uv(a, out),
        Command::Oracle(a) => oracle(a, out),
        Command::Plotdata(a) => plotdata(a, out),
    }
}

fn covariance(a: &CovarianceArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let x = parse_point(&a.x)?;
    let kernel = match a.kind {
        KernelChoice::Continuum => CovarianceKernel::continuum(a.l, a.sigma)?,
        KernelChoice::Slice => CovarianceKernel::slice(TorusSpec::plane(a.l, a.m)?, a.sigma)?,
        KernelChoice::Full => CovarianceKernel::full(TorusSpec::plane(a.l, a.m)?, a.sigma)?,
    };
    if a.order > kernel.max_order() {
        bail!(sgrg::Error::InvalidParameter { name: "order", reason: format!("at most {}", kernel.max_order()) });
    }
    let mut point = [0.0; MAX_DIM];
    point[..2].copy_from_slice(&x);
    let mut rows = Vec::new();
    let mut value = f64::NAN;
    for alpha in multi_indices(2, 0, a.order) {
        let v = kernel.try_eval(&point, &alpha)?;
        if order(&alpha) == 0 {
            value = v;
        }
        rows.push(vec![num(x[0]), num(x[1]), format!("{}{}", alpha[0], alpha[1]), num(v), num(kernel.tail_bound(order(&alpha)))]);
    }
    out.csv("covariance.csv", &["x0", "x1", "alpha", "value", "tail_bound"], &rows)?;
    println!("C(x = ({}, {})) = {value:.12}", x[0], x[1]);
    let mut summary = json!({ "value": value, "n_modes": kernel.n_modes(), "p_max": kernel.p_max() });
    if a.kind == KernelChoice::Slice && x == [0.0, 0.0] {
        let closed = continuum_at_zero_closed_form(a.l, a.sigma);
        println!("continuum closed form log L / (2π(1+σ)) = {closed:.12}");
        println!("periodization correction = {:.3e}", value - closed);
        summary["closed_form"] = json!(closed);
        summary["periodization_correction"] = json!(value - closed);
    }
    Ok(Outcome { passed: true, resolved: serde_json::to_value(a)?, warnings: Vec::new(), summary })
}

fn report_checks(checks: &[Check], out: &mut OutDir, name: &str) -> anyhow::Result<bool> {
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.clone(), num(c.value), num(c.tolerance), c.passed.to_string(), c.detail.clone()])
        .collect();
    out.csv(name, &["check", "value", "tolerance", "passed", "detail"], &rows)?;
    for c in checks {
        println!("{} {}: {:.3e} (tolerance {:.1e}) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance, c.detail);
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("{passed} of {} suites passed", checks.len());
    Ok(passed == checks.len())
}

fn identities(a: &IdentityArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let seed = a.seed.ok_or_else(|| missing_seed("identities"))?;
    let side = parse_torus(&a.torus)?;
    if a.fields == 0 {
        bail!(sgrg::Error::InvalidParameter { name: "fields", reason: "need at least one field".into() });
    }
    let checks = checks::identity_suites(seed, side, a.fields)?;
    let passed = report_checks(&checks, out, "identities.csv")?;
    let summary = json!({ "suites": checks.len(), "passed": checks.iter().filter(|c| c.passed).count() });
    Ok(Outcome { passed, resolved: serde_json::to_value(a)?, warnings: Vec::new(), summary })
}

fn tune(cfg: &mut FlowConfig, t: &FlowTuning) {
    let tr = &mut cfg.truncation;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(cfg.kappa0, t.kappa0);
    set!(cfg.eps, t.eps);
    set!(tr.grid, t.grid);
    set!(tr.max_charge, t.max_charge);
    set!(tr.max_blocks, t.max_blocks);
    set!(tr.source_range, t.source_range);
    set!(tr.prune, t.prune);
    set!(tr.quad_m, t.quad);
    set!(tr.norm_order, t.norm_order);
    set!(cfg.aniso_tol, t.aniso_tol);
}

fn flow_ir(a: &IrArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let steps = a.steps.unwrap_or(a.m as usize);
    let mut cfg = FlowConfig::ir(a.beta, a.zeta, a.l, steps);
    cfg.m = a.m;
    tune(&mut cfg, &a.tuning);
    cfg.validate()?;
    let traj = ir_flow(&cfg)?;
    write_flow(&traj, out)
}

fn flow_uv(a: &UvArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let zeta = Complex64::from_str(a.zeta.trim())
        .map_err(|_| sgrg::Error::InvalidParameter { name: "zeta", reason: format!("cannot parse `{}` as a complex number", a.zeta) })?;
    let mut cfg = FlowConfig::uv(a.beta, zeta, a.l, a.n);
    tune(&mut cfg, &a.tuning);
    cfg.validate()?;
    let traj = uv_flow(&cfg)?;
    write_flow(&traj, out)
}

fn write_flow(t: &FlowTrajectory, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let header = [
        "j", "zeta_re", "zeta_im", "norm", "remainder_norm", "sigma", "energy_re", "energy_im", "delta_e_re", "delta_e_im",
        "delta_sigma", "h", "kappa", "norm_ratio", "zeta_multiplier", "charged_multiplier", "large_multiplier",
        "n_shapes", "n_terms",
    ];
    let rows: Vec<Vec<String>> = t
        .states
        .iter()
        .map(|s| {
            vec![
                s.j.to_string(),
                num(s.zeta.re),
                num(s.zeta.im),
                num(s.norm),
                num(s.remainder_norm),
                num(s.sigma),
                num(s.energy.re),
                num(s.energy.im),
                num(s.delta_e.re),
                num(s.delta_e.im),
                num(s.delta_sigma),
                num(s.h),
                num(s.kappa),
                opt(s.norm_ratio),
                opt(s.zeta_multiplier),
                opt(s.charged_multiplier),
                opt(s.large_multiplier),
                s.n_shapes.to_string(),
                s.n_terms.to_string(),
            ]
        })
        .collect();
    out.csv("trajectory.csv", &header, &rows)?;
    out.json("trajectory.json", t)?;

    let report: Vec<Vec<String>> = contraction_report(t)
        .iter()
        .map(|r| {
            vec![
                r.j.to_string(),
                opt(r.norm_ratio),
                num(r.delta),
                opt(r.charged_multiplier),
                num(r.charged_reference),
                opt(r.large_multiplier),
                num(r.large_reference),
                opt(r.higher_order_share),
                num(r.higher_order_prediction),
                opt(r.zeta_multiplier),
            ]
        })
        .collect();
    let report_header = [
        "j", "norm_ratio", "delta", "charged_multiplier", "charged_reference", "large_multiplier", "large_reference",
        "higher_order_share", "higher_order_prediction", "zeta_multiplier",
    ];
    out.csv("contraction.csv", &report_header, &report)?;
    for kind in PLOT_KINDS {
        write_plot(t, kind, out)?;
    }

    let c = &t.constants;
    println!("{} states written to {}", t.states.len(), out.root().join("trajectory.csv").display());
    println!("worst norm ratio {:.4}, delta {:.4}", c.worst_ratio, t.delta());
    if let (FlowMode::Ir, Some(m)) = (t.config.mode, c.charged_multiplier) {
        println!("charged multiplier {m:.4} (reference {:.4})", f64::from(t.config.l).powf(2.0 - t.config.beta / (4.0 * PI)));
    }
    if let Some(reason) = &t.stopped {
        println!("stopped early: {reason}");
    }
    let summary = json!({ "states": t.states.len(), "stopped": t.stopped, "constants": c, "delta": t.delta() });
    Ok(Outcome { passed: t.stopped.is_none(), resolved: serde_json::to_value(t.config)?, warnings: t.warnings.clone(), summary })
}

fn write_plot(t: &FlowTrajectory, kind: &str, out: &mut OutDir) -> anyhow::Result<Option<f64>> {
    let p = emit_plotdata(t, kind)?;
    let header: Vec<&str> = p.header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = p.rows.iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
    out.csv(&format!("plot_{kind}.csv"), &header, &rows)?;
    Ok(p.slope)
}

fn plotdata(a: &PlotArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(&a.trajectory).with_context(|| format!("reading {}", a.trajectory.display()))?;
    let t: FlowTrajectory = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.trajectory.display()))?;
    let slope = write_plot(&t, &a.kind, out)?;
    if let Some(s) = slope {
        println!("fitted slope {s:.9}");
    }
    let summary = json!({ "kind": a.kind, "slope": slope });
    Ok(Outcome { passed: true, resolved: serde_json::to_value(a)?, warnings: Vec::new(), summary })
}

#[derive(Serialize)]
struct OracleResolved<'a> {
    seed: u64,
    snapshots: usize,
    oracle: &'a OracleConfig,
}

fn oracle(a: &OracleArgs, out: &mut OutDir) -> anyhow::Result<Outcome> {
    let seed = a.seed.ok_or_else(|| missing_seed("oracle"))?;
    let mut cfg = OracleConfig::new(a.beta, a.zeta, a.l, a.m);
    cfg.n_samples = a.samples;
    cfg.n_chains = a.chains;
    cfg.mayer_order = a.mayer_order;
    let torus = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = z_invariance_check(&cfg, &mut rng)?;
    let rse = r.z_before.relative_error().max(r.z_after.relative_error());
    let checks = vec![
        Check::at_most("pull |Z_j - Z_j+1| / sigma_pool", r.pull, 3.0, ""),
        Check::at_most("relative standard error", rse, 0.01, ""),
        Check::at_most("dZ/dzeta pull", r.dz_pull, 3.0, format!("expected {:e}", r.dz_expected)),
    ];
    println!("Z_j   = {:.9} +- {:.2e}", r.z_before.value, r.z_before.std_err);
    println!("Z_j+1 = {:.9} +- {:.2e}", r.z_after.value, r.z_after.std_err);
    let passed = report_checks(&checks, out, "oracle.csv")?;
    out.json("oracle.json", &r)?;

    if a.snapshots > 0 {
        let kernel = CovarianceKernel::full(torus, 0.0)?.scaled(a.beta);
        // A separate stream so that snapshots do not perturb the estimates above.
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        srng.set_stream(1);
        for i in 0..a.snapshots {
            let phi = spectral_sample(&kernel, &mut srng)?;
            let grid = FieldGrid::from_field(&phi, 4)?;
            out.binary(&format!("field_{i:04}.bin"), |w| grid.write_snapshot(w, Some(seed)))?;
        }
    }
    let resolved = serde_json::to_value(OracleResolved { seed, snapshots: a.snapshots, oracle: &cfg })?;
    Ok(Outcome { passed, resolved, warnings: Vec::new(), summary: serde_json::to_value(&r)? })
}
