//! Named residual checks shared by the `identities` command and the acceptance suite.
//!
//! Every check reports a measured value against a tolerance. Identities report the
//! largest residual over random fields; bound suites report the violation count.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activities::{
    activity_norm, charge_component, mayer_cloud, mayer_init, polymer_exp, potential_v, vbd_norms, vbd_threshold,
    ActivityFlags, ActivityNorm, CloudTerm, MaskActivity, PolymerActivity, VQuadrature, DEFAULT_CHARGE_ORDER,
};
use crate::covariance::{continuum_at_zero_closed_form, verify_scale_decomposition, CovarianceKernel};
use crate::error::Result;
use crate::fields::{log_regulator, measure_sobolev_constant, AnalyticField, RegulatorParams, ScaledField};
use crate::interpolation::{
    enumerate_forests, factorial_bound_check, forest_interpolation_check, sigma_min_eigenvalue, tree_count, ExpLinear,
    Forest, Multilinear,
};
use crate::lattice::{Block, EnumerationCap, MaskTorus, Point, Polymer, SetRegulatorParams, TorusSpec, MAX_DIM};
use crate::rgmap::{
    extraction_coefficients, extraction_values, fluctuate, fluctuate_linear, fluctuation_oracle, scaling_values,
    ExtractionPreset, McOptions,
};

/// One measured quantity against its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check { name: name.into(), value, tolerance, passed: value <= tolerance, detail: detail.into() }
    }

    /// Passes when the flag holds; value and tolerance are recorded for the report.
    pub fn flag(name: &str, passed: bool, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check { name: name.into(), value, tolerance, passed, detail: detail.into() }
    }
}

fn mask_torus(l: u32, m: u32) -> Result<MaskTorus> {
    MaskTorus::new(TorusSpec::plane(l, m)?, EnumerationCap::default())
}

fn random_field(t: TorusSpec, rng: &mut ChaCha8Rng) -> AnalyticField {
    AnalyticField::random(t, 3, 2.0, 1.0, rng)
}

fn point(x: f64, y: f64) -> Point {
    let mut p = [0.0; MAX_DIM];
    p[0] = x;
    p[1] = y;
    p
}

/// Two random pure terms per polymer, each with one or two charges `±1` inside it.
pub fn random_cloud(t: TorusSpec, polymers: &[Polymer], rng: &mut ChaCha8Rng) -> PolymerActivity {
    let mut terms = BTreeMap::new();
    for x in polymers {
        let ts: Vec<CloudTerm> = (0..2)
            .map(|_| {
                let n = rng.gen_range(1..=2);
                let charges = (0..n)
                    .map(|_| {
                        let b = x.blocks()[rng.gen_range(0..x.size())];
                        let p = point(b.0[0] as f64 + rng.gen::<f64>(), b.0[1] as f64 + rng.gen::<f64>());
                        (if rng.gen::<bool>() { 1 } else { -1 }, p)
                    })
                    .collect();
                CloudTerm::pure(Complex64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)), charges)
            })
            .collect();
        terms.insert(x.clone(), ts);
    }
    PolymerActivity::cloud(t, terms, ActivityFlags { even: false, periodic: true, neutral: false })
}

fn relative(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / a.norm().max(1.0)
}

// ---------------------------------------------------------------------------
// Covariance.

/// `C_∞(σ, 0)` against `log L / (2π(1+σ))`, and the torus correction at the origin
/// against `c e^{-L^{M-1}/2}` with `c` measured on the smallest torus of each `L`.
pub fn covariance_closed_form() -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for l in [2u32, 4, 8] {
        for sigma in [0.0, 0.05, 0.1] {
            let k = CovarianceKernel::continuum(l, sigma)?;
            worst = worst.max((k.at_zero() - continuum_at_zero_closed_form(l, sigma)).abs());
        }
    }
    let mut out = vec![Check::at_most("continuum closed form", worst, 1e-6, "L in {2,4,8}, sigma in {0,0.05,0.1}")];
    let mut excess = 0.0f64;
    let mut detail = Vec::new();
    for (l, ms) in [(2u32, [2u32, 3, 4, 5]), (4, [1, 2, 3, 3])] {
        let closed = continuum_at_zero_closed_form(l, 0.0);
        let mut c = None;
        for m in ms {
            let k = CovarianceKernel::slice(TorusSpec::plane(l, m)?, 0.0)?;
            let corr = (k.at_zero() - closed).abs();
            let envelope = (-f64::from(l).powi(m as i32 - 1) / 2.0).exp();
            let c0 = *c.get_or_insert(corr / envelope);
            excess = excess.max(corr / (c0 * envelope).max(1e-13));
            detail.push(format!("L={l} M={m}: {corr:.3e}"));
        }
    }
    detail.dedup();
    out.push(Check::at_most("torus correction envelope", excess, 1.0, detail.join(", ")));
    Ok(out)
}

/// Scale-decomposition residual at `n` sampled points for `(L,M,j) ∈ {(2,2,1),(2,3,2)}`.
pub fn scale_decomposition(n: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (l, m, j) in [(2u32, 2u32, 1u32), (2, 3, 2)] {
        let side = f64::from(l).powi(m as i32);
        for _ in 0..n {
            let x = point(rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            worst = worst.max(verify_scale_decomposition(l, m, j, 0.0, &x)?);
        }
    }
    Ok(Check::at_most("scale decomposition", worst, 1e-8, format!("{n} points per (L,M,j)")))
}

// ---------------------------------------------------------------------------
// Interpolation.

/// Forest interpolation on multilinear and smooth functions, and the Cayley count.
pub fn forest_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lin = 0.0f64;
    for n in 2..=4 {
        let f = Multilinear::random(n, 6, &mut rng);
        lin = lin.max(forest_interpolation_check(&f, 8)?);
    }
    let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let smooth = forest_interpolation_check(&ExpLinear { n: 3, c }, 16)?;
    let mut by_degree = 0u128;
    for a in 1..=3u32 {
        for b in 1..=3 {
            for c in 1..=3 {
                for d in 1..=3 {
                    by_degree += tree_count(&[a, b, c, d]);
                }
            }
        }
    }
    let trees = enumerate_forests(4)?.into_iter().filter(Forest::is_tree).count() as u128;
    Ok(vec![
        Check::at_most("forest formula, multilinear", lin, 1e-12, "n = 2..4"),
        Check::at_most("forest formula, smooth", smooth, 1e-8, "n = 3, exp-linear"),
        Check::flag(
            "Cayley count N=4",
            by_degree == 16 && trees == 16,
            by_degree as f64,
            16.0,
            format!("degree sum {by_degree}, enumerated trees {trees}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// Algebraic identities, pointwise in the field.

/// `exp(ζΣV) = ℰxp(□+K_0)` for the Mayer activity on the `side × side` torus.
pub fn polymer_exp_identity(side: u32, n_fields: usize, seed: u64) -> Result<Check> {
    let m = mask_torus(side, 1)?;
    let zeta = Complex64::new(0.4, 0.1);
    let q = VQuadrature::default();
    let k = mayer_init(zeta, &m, m.n_blocks(), q);
    let x = m.polymer_of(m.full())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let phi = random_field(m.torus, &mut rng);
        let lhs = (zeta * m.torus.all_blocks().iter().map(|b| potential_v(b, &phi, q)).sum::<f64>()).exp();
        worst = worst.max(relative(lhs, polymer_exp(&k, &x, &phi, &m)?));
    }
    Ok(Check::at_most("polymer exponential", worst, 1e-8, format!("{side}x{side} torus, {n_fields} fields")))
}

/// `∫ℰxp(□+K)(φ+ψ)dμ(ψ) = ℰxp(□+ℱK)(φ)` on the 2×2 torus with exact charge-cloud Gaussians.
pub fn fluctuation_identity(n_fields: usize, seed: u64) -> Result<Check> {
    let m = mask_torus(2, 1)?;
    let k = mayer_cloud(Complex64::new(0.4, 0.0), &m, 4, VQuadrature { m: 1 }, 2, 1e-16)?;
    let cov = CovarianceKernel::slice(m.torus, 0.0)?.scaled(2.0);
    let fk = fluctuate(&k, &cov, &m, 4)?;
    let full = m.polymer_of(m.full())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let phi = random_field(m.torus, &mut rng);
        let lhs = fluctuation_oracle(&k, &cov, &m, &phi)?;
        worst = worst.max(relative(lhs, polymer_exp(&fk, &full, &phi, &m)?));
    }
    Ok(Check::at_most("fluctuation", worst, 1e-8, format!("2x2 torus, {n_fields} fields")))
}

/// `ℰxp(□+K) = e^{ΣF} ℰxp(□+ℰ(K,F))` with `F` from the extraction coefficients.
pub fn extraction_identity(side: u32, n_fields: usize, seed: u64) -> Result<Check> {
    let m = mask_torus(side, 1)?;
    let k = mayer_cloud(Complex64::new(0.3, 0.0), &m, 2, VQuadrature { m: 1 }, 2, 1e-16)?;
    let cov = CovarianceKernel::slice(m.torus, 0.0)?.scaled(6.0);
    let k = fluctuate_linear(&k, &cov, McOptions::default())?;
    let f = extraction_coefficients(&k, ExtractionPreset::Ir, 6.0, 1e-8)?.activity();
    let support = f.support();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let phi = random_field(m.torus, &mut rng);
        let lhs = MaskActivity::from_activity(&m, &k, m.full(), &phi).exp(m.full())?;
        let e = extraction_values(&k, &f, &m, m.full(), &phi)?;
        let sum_f: Complex64 = support.iter().map(|x| f.eval(x, &phi)).sum();
        let rhs = sum_f.exp() * MaskActivity::new(&m, e).exp(m.full())?;
        worst = worst.max(relative(lhs, rhs));
    }
    Ok(Check::at_most("extraction", worst, 1e-8, format!("{side}x{side} torus, {n_fields} fields")))
}

/// `ℰxp(□+K)(Λ, φ_L) = ℰxp(□+𝒮K)(L^{-1}Λ, φ)` for a random cloud on the `L = 2`, `M = 1` torus.
pub fn scaling_identity(n_fields: usize, seed: u64) -> Result<Check> {
    let fine = mask_torus(2, 1)?;
    let coarse = MaskTorus::new(fine.torus.coarser()?, EnumerationCap::default())?;
    let t = fine.torus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let polys = vec![Polymer::single(&t, Block::at(0, 0)), Polymer::new(&t, [Block::at(0, 1), Block::at(1, 1)])?];
    let k = random_cloud(t, &polys, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let phi = random_field(coarse.torus, &mut rng);
        let phi_l = ScaledField::new(&phi);
        let kv: Vec<(u64, Complex64)> = polys.iter().map(|x| (fine.mask_of(x), k.eval(x, &phi_l))).collect();
        let s = scaling_values(&k, &fine, &coarse, coarse.full(), &phi)?;
        let lhs = MaskActivity::new(&fine, kv).exp(fine.full())?;
        let rhs = MaskActivity::new(&coarse, s).exp(coarse.full())?;
        worst = worst.max(relative(lhs, rhs));
    }
    Ok(Check::at_most("scaling", worst, 1e-8, format!("L=2, M=1, {n_fields} fields")))
}

/// `Σ_q k_q = K` and `k_q(φ+c) = e^{iqc} k_q(φ)` for a Mayer activity read as a functional.
pub fn charge_identity(n_fields: usize, seed: u64) -> Result<Check> {
    let m = mask_torus(2, 1)?;
    let k = mayer_cloud(Complex64::new(0.3, 0.0), &m, 2, VQuadrature { m: 1 }, 3, 1e-20)?;
    let f = k.to_functional();
    let comps: Vec<(i32, PolymerActivity)> =
        (-8..=8).map(|q| charge_component(&f, q, DEFAULT_CHARGE_ORDER).map(|c| (q, c))).collect::<Result<_>>()?;
    let support = k.support();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let phi = random_field(m.torus, &mut rng);
        let c = rng.gen_range(-PI..PI);
        let sh = phi.shifted(c);
        let x = &support[rng.gen_range(0..support.len())];
        let mut sum = Complex64::new(0.0, 0.0);
        for (q, kq) in &comps {
            let v = kq.eval(x, &phi);
            sum += v;
            worst = worst.max((kq.eval(x, &sh) - Complex64::from_polar(1.0, f64::from(*q) * c) * v).norm());
        }
        worst = worst.max((sum - k.eval(x, &phi)).norm());
    }
    Ok(Check::at_most("charge decomposition", worst, 1e-8, format!("resummation and shift law, {n_fields} fields")))
}

/// The six identity suites of the `identities` command; `side` sets the torus of the
/// polymer-exponential and extraction suites.
pub fn identity_suites(seed: u64, side: u32, n_fields: usize) -> Result<Vec<Check>> {
    let mut out = forest_suite(seed)?;
    out.push(polymer_exp_identity(side, n_fields, seed.wrapping_add(1))?);
    out.push(extraction_identity(side, n_fields, seed.wrapping_add(2))?);
    out.push(scaling_identity(n_fields, seed.wrapping_add(3))?);
    out.push(fluctuation_identity(n_fields, seed.wrapping_add(4))?);
    out.push(charge_identity(n_fields, seed.wrapping_add(5))?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Randomized bound suites.

fn violations(name: &str, trials: usize, count: usize, detail: impl Into<String>) -> Check {
    Check::at_most(name, count as f64, 0.0, format!("{} over {trials} trials", detail.into()))
}

/// `n! ≤ γ^n Π_j d(Δ,Δ_j)^d` on random distinct block sets.
pub fn factorial_bound_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=14);
        let mut blocks: Vec<Vec<i64>> = Vec::with_capacity(n);
        while blocks.len() < n {
            let b = vec![rng.gen_range(-5..=5), rng.gen_range(-5..=5)];
            if b != [0, 0] && !blocks.contains(&b) {
                blocks.push(b);
            }
        }
        bad += usize::from(!factorial_bound_check(&[0, 0], &blocks, 2)?.holds);
    }
    Ok(violations("factorial distance bound", trials, bad, "violations"))
}

/// `‖k_q‖ ≤ ‖K‖` for random charge clouds.
pub fn charge_norm_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = TorusSpec::plane(2, 2)?;
    let reg = RegulatorParams::uv(0.1, 0.5, 1.0, 1.0);
    let mut bad = 0;
    for _ in 0..trials {
        let polys = [
            Polymer::single(&t, Block::at(rng.gen_range(0..4), rng.gen_range(0..4))),
            Polymer::new(&t, [Block::at(0, 0), Block::at(1, 0)])?,
        ];
        let k = random_cloud(t, &polys, &mut rng);
        let norm = ActivityNorm::new(reg, rng.gen_range(0.5..2.0), SetRegulatorParams::standard(&t));
        let q = rng.gen_range(-2..=2);
        let kq = charge_component(&k, q, DEFAULT_CHARGE_ORDER)?;
        let a = activity_norm(&kq, &norm)?.value;
        let b = activity_norm(&k, &norm)?.value;
        bad += usize::from(a > b * (1.0 + 1e-12));
    }
    Ok(violations("charge-sector norm bound", trials, bad, "violations"))
}

/// `k_q(X, φ+c) = e^{iqc} k_q(X, φ)` at random `c`, `φ` for random clouds read as functionals.
pub fn shift_law_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = TorusSpec::plane(2, 1)?;
    let x = Polymer::single(&t, Block::at(0, 0));
    let mut bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = random_cloud(t, std::slice::from_ref(&x), &mut rng).to_functional();
        let q = rng.gen_range(-2..=2);
        let kq = charge_component(&k, q, DEFAULT_CHARGE_ORDER)?;
        let phi = random_field(t, &mut rng);
        let c = rng.gen_range(-PI..PI);
        let r = (kq.eval(&x, &phi.shifted(c)) - Complex64::from_polar(1.0, f64::from(q) * c) * kq.eval(&x, &phi)).norm();
        worst = worst.max(r);
        bad += usize::from(r > 1e-10);
    }
    Ok(violations("shift law", trials, bad, format!("violations above 1e-10 (largest residual {worst:.1e})")))
}

/// `G(X∪Y) = G(X)G(Y)` for boundary-disjoint `X`, `Y`, and `G(X) ≤ G(Z)` for `X ⊂ Z`
/// with `c < (2d c_s)^{-1}`.
pub fn regulator_suites(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = TorusSpec::plane(2, 3)?;
    let c_s = measure_sobolev_constant(&t, 4, 200, seed, 1.0);
    let mult = RegulatorParams::uv(0.05, 0.1, 1.0, 1.0);
    let dissolve = RegulatorParams::uv(0.05, 0.9 / (4.0 * c_s), c_s, 1.0);
    let (mut bad_mult, mut bad_mono) = (0, 0);
    for _ in 0..trials {
        let phi = AnalyticField::random(t, rng.gen_range(1..=4), rng.gen_range(0.5..3.0), 0.5, &mut rng);
        let a = Block::at(rng.gen_range(0..8), rng.gen_range(0..8));
        let gap = [rng.gen_range(2..=4), rng.gen_range(-4..=4)];
        let b = Block::at(a.0[0] + gap[0], a.0[1] + gap[1]);
        let x = Polymer::single(&t, t.reduce(a));
        let y = Polymer::single(&t, t.reduce(b));
        let z = Polymer::new(&t, [t.reduce(a), t.reduce(b)])?;
        let lhs = log_regulator(&phi, &x, &mult, None) + log_regulator(&phi, &y, &mult, None);
        let rhs = log_regulator(&phi, &z, &mult, None);
        bad_mult += usize::from((lhs - rhs).abs() > 1e-12 * rhs.abs().max(1.0));
        let grown = Polymer::new(&t, [t.reduce(a), t.reduce(Block::at(a.0[0] + 1, a.0[1]))])?;
        let small = log_regulator(&phi, &x, &dissolve, None);
        let large = log_regulator(&phi, &grown, &dissolve, None);
        bad_mono += usize::from(small > large + 1e-12 * large.abs().max(1.0));
    }
    Ok(vec![
        violations("regulator multiplicativity", trials, bad_mult, "violations"),
        violations("regulator monotone under dissolving", trials, bad_mono, format!("violations (c_s = {c_s:.3})")),
    ])
}

/// `σ(T, s)` positive semidefinite for random trees on at most five vertices.
pub fn sigma_psd_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees: Vec<Vec<Forest>> =
        (2..=5).map(|n| enumerate_forests(n).map(|f| f.into_iter().filter(Forest::is_tree).collect())).collect::<Result<_>>()?;
    let mut bad = 0;
    let mut lowest = f64::INFINITY;
    for _ in 0..trials {
        let set = &trees[rng.gen_range(0..trees.len())];
        let t = &set[rng.gen_range(0..set.len())];
        let s: Vec<f64> = (0..t.bonds.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let e = sigma_min_eigenvalue(t, &s);
        lowest = lowest.min(e);
        bad += usize::from(e < -1e-10);
    }
    Ok(violations("sigma(T,s) PSD", trials, bad, format!("violations (lowest eigenvalue {lowest:.2e})")))
}

/// All randomized bound suites.
pub fn bound_suites(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![
        factorial_bound_suite(trials, seed)?,
        charge_norm_suite(trials, seed.wrapping_add(1))?,
        shift_law_suite(trials, seed.wrapping_add(2))?,
    ];
    out.extend(regulator_suites(trials, seed.wrapping_add(3))?);
    out.push(sigma_psd_suite(trials, seed.wrapping_add(4))?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Potential norms.

/// `‖V‖_{1,h} ≤ e^h` and `‖e^{ζV}-1‖_{1,h} ≤ |ζ|^{1-ε}` below the measured threshold, for
/// `h ∈ {1, 2}`.
pub fn potential_norm_suite(eps: f64) -> Vec<Check> {
    let mut out = Vec::new();
    for h in [1.0, 2.0] {
        let r = vbd_norms(1e-3, h, eps);
        out.push(Check::at_most(&format!("|V| <= e^h at h={h}"), r.v_norm / r.v_bound, 1.0 + 1e-12, format!("|V| = {:.6}", r.v_norm)));
        let th = vbd_threshold(h, eps);
        let worst = [1.0, 0.5, 0.1, 0.01, 1e-4]
            .iter()
            .map(|f| {
                let r = vbd_norms(th * f, h, eps);
                r.exp_minus_one / r.exp_minus_one_bound
            })
            .fold(0.0f64, f64::max);
        out.push(Check::flag(
            &format!("|exp(zV)-1| <= |z|^(1-eps) at h={h}"),
            th > 0.0 && worst <= 1.0,
            worst,
            1.0,
            format!("threshold {th:.3e}"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_suites_pass_on_three_by_three() {
        let checks = identity_suites(42, 3, 4).unwrap();
        assert!(checks.len() >= 6);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn covariance_checks_pass() {
        for c in covariance_closed_form().unwrap() {
            assert!(c.passed, "{c:?}");
        }
        assert!(scale_decomposition(3, 1).unwrap().passed);
    }

    #[test]
    fn bound_suites_have_no_violations_on_a_short_run() {
        for c in bound_suites(20, 7).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn potential_norms_hold() {
        for c in potential_norm_suite(0.1) {
            assert!(c.passed, "{c:?}");
        }
    }
}
