//! Polymer activities in three representations, the polymer exponential, Mayer
//! initialization, the potential, charge sectors and activity norms.
//!
//! Two polymers are disjoint when no block of one equals or touches a block of the
//! other; with closed unit blocks this is the reading under which the Mayer identity
//! holds exactly.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceKernel;
use crate::error::{Error, Result};
use crate::fields::{
    field_norms, log_regulator, AnalyticField, Field, RegulatorParams, ShiftField,
};
use crate::lattice::{
    gamma_p, order, Block, MaskTorus, MultiIndex, Point, Polymer, SetRegulatorParams,
    TorusSpec, MAX_DIM,
};
use crate::numerics::factorial;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Default number of constant-shift quadrature nodes is `2Q + 1` with this `Q`.
pub const DEFAULT_CHARGE_ORDER: usize = 8;

/// Cap on memoized states of the polymer exponential recursion.
const EXP_STATE_CAP: usize = 1 << 22;

/// `∂^a φ(y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradFactor {
    pub y: Point,
    pub a: MultiIndex,
}

impl GradFactor {
    pub fn eval(&self, phi: &dyn Field) -> f64 {
        phi.deriv(&self.y, &self.a)
    }
}

/// A polynomial of degree at most two in field derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradPoly {
    pub constant: Complex64,
    pub linear: Vec<(Complex64, GradFactor)>,
    pub quadratic: Vec<(Complex64, GradFactor, GradFactor)>,
}

impl GradPoly {
    pub fn one() -> Self {
        GradPoly { constant: ONE, linear: Vec::new(), quadratic: Vec::new() }
    }

    pub fn eval(&self, phi: &dyn Field) -> Complex64 {
        let mut v = self.constant;
        for (c, g) in &self.linear {
            v += c * g.eval(phi);
        }
        for (c, g1, g2) in &self.quadratic {
            v += c * (g1.eval(phi) * g2.eval(phi));
        }
        v
    }

    pub fn is_constant(&self) -> bool {
        self.linear.is_empty() && self.quadratic.is_empty()
    }

    fn factors(&self) -> impl Iterator<Item = &GradFactor> {
        self.linear.iter().map(|t| &t.1).chain(self.quadratic.iter().flat_map(|t| [&t.1, &t.2]))
    }
}

/// `coeff · exp(i Σ_a q_a φ(x_a)) · P(φ)`, with `P = 1` when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudTerm {
    pub coeff: Complex64,
    pub charges: Vec<(i32, Point)>,
    pub poly: Option<GradPoly>,
}

impl CloudTerm {
    pub fn pure(coeff: Complex64, charges: Vec<(i32, Point)>) -> Self {
        CloudTerm { coeff, charges, poly: None }
    }

    pub fn constant(coeff: Complex64) -> Self {
        CloudTerm { coeff, charges: Vec::new(), poly: None }
    }

    pub fn total_charge(&self) -> i32 {
        self.charges.iter().map(|c| c.0).sum()
    }

    pub fn eval(&self, phi: &dyn Field) -> Complex64 {
        let arg: f64 = self.charges.iter().map(|(q, x)| f64::from(*q) * phi.value(x)).sum();
        let p = self.poly.as_ref().map_or(ONE, |p| p.eval(phi));
        self.coeff * Complex64::from_polar(1.0, arg) * p
    }

    /// Product of two terms; fails if the polynomial degree would exceed two.
    pub fn product(&self, other: &CloudTerm) -> Result<CloudTerm> {
        let mut charges = self.charges.clone();
        charges.extend(other.charges.iter().copied());
        let poly = match (&self.poly, &other.poly) {
            (None, None) => None,
            (Some(p), None) | (None, Some(p)) => Some(p.clone()),
            (Some(a), Some(b)) => {
                if !a.is_constant() && !b.is_constant() && (a.quadratic.len() + b.quadratic.len() > 0) {
                    return Err(Error::param("poly", "product exceeds quadratic degree"));
                }
                let mut out = GradPoly {
                    constant: a.constant * b.constant,
                    linear: Vec::new(),
                    quadratic: Vec::new(),
                };
                for (c, g) in &a.linear {
                    out.linear.push((c * b.constant, *g));
                }
                for (c, g) in &b.linear {
                    out.linear.push((c * a.constant, *g));
                }
                for (c, g1, g2) in &a.quadratic {
                    out.quadratic.push((c * b.constant, *g1, *g2));
                }
                for (c, g1, g2) in &b.quadratic {
                    out.quadratic.push((c * a.constant, *g1, *g2));
                }
                for (ca, ga) in &a.linear {
                    for (cb, gb) in &b.linear {
                        out.quadratic.push((ca * cb, *ga, *gb));
                    }
                }
                Some(out)
            }
        };
        Ok(CloudTerm { coeff: self.coeff * other.coeff, charges, poly })
    }

    /// `∫ term(φ + ζ) dμ_C(ζ)`, exactly.
    pub fn convolve(&self, c: &CovarianceKernel, torus: &TorusSpec) -> CloudTerm {
        let w = quad_form(&self.charges, c, torus);
        let damp = (-0.5 * w).exp();
        let Some(p) = &self.poly else {
            return CloudTerm { coeff: self.coeff * damp, charges: self.charges.clone(), poly: None };
        };
        // Covariance of ∂^a ζ(y) with Σ q ζ(x).
        let m = |g: &GradFactor| -> f64 {
            self.charges
                .iter()
                .map(|(q, x)| f64::from(*q) * c.eval(&torus.point_delta(&g.y, x), &g.a))
                .sum()
        };
        // Covariance of ∂^a ζ(y) with ∂^b ζ(z).
        let cab = |g1: &GradFactor, g2: &GradFactor| -> f64 {
            let sign = if order(&g2.a) % 2 == 0 { 1.0 } else { -1.0 };
            let ab = crate::lattice::add_index(&g1.a, &g2.a);
            sign * c.eval(&torus.point_delta(&g1.y, &g2.y), &ab)
        };
        let mut out = GradPoly { constant: p.constant, linear: Vec::new(), quadratic: Vec::new() };
        for (k, g) in &p.linear {
            out.linear.push((*k, *g));
            out.constant += k * I * m(g);
        }
        for (k, g1, g2) in &p.quadratic {
            let (m1, m2) = (m(g1), m(g2));
            out.quadratic.push((*k, *g1, *g2));
            out.linear.push((k * I * m2, *g1));
            out.linear.push((k * I * m1, *g2));
            out.constant += k * (cab(g1, g2) - m1 * m2);
        }
        out.linear.retain(|t| t.0.norm() > 0.0);
        CloudTerm { coeff: self.coeff * damp, charges: self.charges.clone(), poly: Some(out) }
    }

    /// The term read at `φ_L(x) = φ(x/L)` (d = 2), re-expressed on the coarse torus.
    pub fn rescaled(&self, l: f64, d: usize) -> CloudTerm {
        let mut t = self.clone();
        let shrink = |x: &mut Point| {
            for v in x.iter_mut().take(d) {
                *v /= l;
            }
        };
        t.charges.iter_mut().for_each(|c| shrink(&mut c.1));
        if let Some(p) = &mut t.poly {
            for (c, g) in &mut p.linear {
                *c *= l.powi(-(order(&g.a) as i32));
                shrink(&mut g.y);
            }
            for (c, g1, g2) in &mut p.quadratic {
                *c *= l.powi(-(order(&g1.a) as i32 + order(&g2.a) as i32));
                shrink(&mut g1.y);
                shrink(&mut g2.y);
            }
        }
        t
    }

    /// The term with every field reversed, `φ → -φ`.
    pub fn reflected(&self) -> CloudTerm {
        let mut t = self.clone();
        t.charges.iter_mut().for_each(|c| c.0 = -c.0);
        if let Some(p) = &mut t.poly {
            p.linear.iter_mut().for_each(|l| l.0 = -l.0);
        }
        t
    }

    /// Every point the term reads.
    pub fn points(&self) -> Vec<Point> {
        let mut v: Vec<Point> = self.charges.iter().map(|c| c.1).collect();
        if let Some(p) = &self.poly {
            v.extend(p.factors().map(|g| g.y));
        }
        v
    }
}

/// `Σ_{a,b} q_a q_b C(x_a - x_b)`.
pub fn quad_form(charges: &[(i32, Point)], c: &CovarianceKernel, torus: &TorusSpec) -> f64 {
    let mut s = 0.0;
    for (i, (qa, xa)) in charges.iter().enumerate() {
        s += f64::from(qa * qa) * c.at_zero();
        for (qb, xb) in &charges[i + 1..] {
            s += 2.0 * f64::from(qa * qb) * c.value(&torus.point_delta(xa, xb));
        }
    }
    s
}

/// Claimed symmetries of an activity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityFlags {
    pub even: bool,
    pub periodic: bool,
    pub neutral: bool,
}

/// Evaluator of a functional activity. Must be pure and read the field only on `X`.
pub type Evaluator = Arc<dyn Fn(&Polymer, &dyn Field) -> Complex64 + Send + Sync>;

/// Per-polymer coefficients of a truncated activity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncatedEntry {
    /// Constant per block.
    pub a0: Complex64,
    /// Coefficients of `∫_X ∂_μ φ ∂_ν φ`, row-major `d × d`.
    pub a2: Vec<f64>,
    /// Coefficients of `∫_X ∂_μ φ ∂_ν ∂_ρ φ`, row-major `d × d × d`.
    pub a3: Vec<f64>,
    /// Amplitudes `ζ_q` of `∫_X e^{iqφ}`.
    pub charges: Vec<(i32, Complex64)>,
}

/// Activity representations.
#[derive(Clone)]
pub enum Representation {
    /// Opaque evaluator with an explicit support list.
    Functional { eval: Evaluator, support: Vec<Polymer> },
    /// Finite charge-cloud term lists per polymer.
    ChargeCloud(BTreeMap<Polymer, Vec<CloudTerm>>),
    /// Constant, quadratic-gradient and charge amplitudes per polymer, integrated with
    /// `quad_pts` midpoint nodes per unit side.
    Truncated { entries: BTreeMap<Polymer, TruncatedEntry>, quad_pts: usize },
}

/// A polymer activity `K(X, φ)` on a torus.
#[derive(Clone)]
pub struct PolymerActivity {
    pub torus: TorusSpec,
    pub flags: ActivityFlags,
    pub repr: Representation,
}

impl std::fmt::Debug for PolymerActivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.repr {
            Representation::Functional { .. } => "Functional",
            Representation::ChargeCloud(_) => "ChargeCloud",
            Representation::Truncated { .. } => "Truncated",
        };
        f.debug_struct("PolymerActivity")
            .field("torus", &self.torus)
            .field("flags", &self.flags)
            .field("repr", &kind)
            .field("support", &self.support().len())
            .finish()
    }
}

impl PolymerActivity {
    pub fn zero(torus: TorusSpec) -> Self {
        let flags = ActivityFlags { even: true, periodic: true, neutral: true };
        PolymerActivity { torus, flags, repr: Representation::ChargeCloud(BTreeMap::new()) }
    }

    pub fn functional(torus: TorusSpec, mut support: Vec<Polymer>, flags: ActivityFlags, eval: Evaluator) -> Self {
        support.sort();
        support.dedup();
        PolymerActivity { torus, flags, repr: Representation::Functional { eval, support } }
    }

    pub fn cloud(torus: TorusSpec, terms: BTreeMap<Polymer, Vec<CloudTerm>>, flags: ActivityFlags) -> Self {
        PolymerActivity { torus, flags, repr: Representation::ChargeCloud(terms) }
    }

    /// Polymers on which the activity may be nonzero.
    pub fn support(&self) -> Vec<Polymer> {
        match &self.repr {
            Representation::Functional { support, .. } => support.clone(),
            Representation::ChargeCloud(m) => m.keys().cloned().collect(),
            Representation::Truncated { entries, .. } => entries.keys().cloned().collect(),
        }
    }

    /// `K(X, φ)`; zero off the support.
    pub fn eval(&self, x: &Polymer, phi: &dyn Field) -> Complex64 {
        match &self.repr {
            Representation::Functional { eval, support } => {
                if support.binary_search(x).is_ok() {
                    eval(x, phi)
                } else {
                    ZERO
                }
            }
            Representation::ChargeCloud(m) => {
                m.get(x).map_or(ZERO, |ts| ts.iter().map(|t| t.eval(phi)).sum())
            }
            Representation::Truncated { entries, quad_pts } => {
                entries.get(x).map_or(ZERO, |e| eval_truncated(x, e, *quad_pts, phi))
            }
        }
    }

    /// Charge-cloud terms, promoting a truncated activity.
    pub fn to_cloud(&self) -> Result<BTreeMap<Polymer, Vec<CloudTerm>>> {
        match &self.repr {
            Representation::ChargeCloud(m) => Ok(m.clone()),
            Representation::Truncated { entries, quad_pts } => Ok(entries
                .iter()
                .map(|(x, e)| (x.clone(), truncated_terms(x, e, *quad_pts, self.torus.d)))
                .collect()),
            Representation::Functional { .. } => {
                Err(Error::param("repr", "functional activities have no charge-cloud form"))
            }
        }
    }

    /// The same activity behind an evaluator.
    pub fn to_functional(&self) -> PolymerActivity {
        if let Representation::Functional { .. } = self.repr {
            return self.clone();
        }
        let me = self.clone();
        let mut support = self.support();
        support.sort();
        let eval: Evaluator = Arc::new(move |x, phi| me.eval(x, phi));
        PolymerActivity::functional(self.torus, support, self.flags, eval)
    }

    /// JSON of the polymer → term list map; functional activities are not serializable.
    pub fn to_json(&self) -> Result<serde_json::Value> {
        #[derive(Serialize)]
        struct Entry<'a, T: Serialize> {
            polymer: &'a Polymer,
            value: &'a T,
        }
        let v = match &self.repr {
            Representation::ChargeCloud(m) => serde_json::to_value(
                m.iter().map(|(p, v)| Entry { polymer: p, value: v }).collect::<Vec<_>>(),
            ),
            Representation::Truncated { entries, .. } => serde_json::to_value(
                entries.iter().map(|(p, v)| Entry { polymer: p, value: v }).collect::<Vec<_>>(),
            ),
            Representation::Functional { .. } => {
                return Err(Error::param("repr", "functional activities are not serializable"))
            }
        };
        v.map_err(|e| Error::param("repr", e.to_string()))
    }

    /// Pointwise linear combination `a·self + b·other` as a functional activity.
    pub fn combine(&self, a: Complex64, other: &PolymerActivity, b: Complex64) -> PolymerActivity {
        let mut support = self.support();
        support.extend(other.support());
        support.sort();
        support.dedup();
        let (k1, k2) = (self.clone(), other.clone());
        let flags = ActivityFlags {
            even: self.flags.even && other.flags.even,
            periodic: self.flags.periodic && other.flags.periodic,
            neutral: self.flags.neutral && other.flags.neutral,
        };
        PolymerActivity::functional(
            self.torus,
            support,
            flags,
            Arc::new(move |x, phi| a * k1.eval(x, phi) + b * k2.eval(x, phi)),
        )
    }
}

/// Midpoint nodes, `pts` per unit side, over the blocks of `X`.
fn block_integral_nodes(x: &Polymer, d: usize, pts: usize) -> Vec<(Point, f64)> {
    let n = pts.pow(d as u32);
    let w = 1.0 / n as f64;
    let mut out = Vec::with_capacity(x.size() * n);
    for b in x.blocks() {
        for code in 0..n {
            let mut p = [0.0; MAX_DIM];
            let mut t = code;
            for a in 0..d {
                p[a] = b.0[a] as f64 + ((t % pts) as f64 + 0.5) / pts as f64;
                t /= pts;
            }
            out.push((p, w));
        }
    }
    out
}

fn eval_truncated(x: &Polymer, e: &TruncatedEntry, pts: usize, phi: &dyn Field) -> Complex64 {
    let d = phi.torus().d;
    let mut v = e.a0 * x.size() as f64;
    let firsts: Vec<MultiIndex> = (0..d).map(crate::lattice::unit_index).collect();
    let needs_grad = e.a2.iter().chain(&e.a3).any(|c| *c != 0.0);
    for (p, w) in block_integral_nodes(x, d, pts) {
        if needs_grad {
            let g: Vec<f64> = firsts.iter().map(|a| phi.deriv(&p, a)).collect();
            for mu in 0..d {
                for nu in 0..d {
                    let c2 = e.a2.get(mu * d + nu).copied().unwrap_or(0.0);
                    if c2 != 0.0 {
                        v += w * c2 * g[mu] * g[nu];
                    }
                    for rho in 0..d {
                        let c3 = e.a3.get((mu * d + nu) * d + rho).copied().unwrap_or(0.0);
                        if c3 != 0.0 {
                            let ab = crate::lattice::add_index(&firsts[nu], &firsts[rho]);
                            v += w * c3 * g[mu] * phi.deriv(&p, &ab);
                        }
                    }
                }
            }
        }
        if !e.charges.is_empty() {
            let u = phi.value(&p);
            for (q, z) in &e.charges {
                v += w * z * Complex64::from_polar(1.0, f64::from(*q) * u);
            }
        }
    }
    v
}

fn truncated_terms(x: &Polymer, e: &TruncatedEntry, pts: usize, d: usize) -> Vec<CloudTerm> {
    let mut out = Vec::new();
    let firsts: Vec<MultiIndex> = (0..d).map(crate::lattice::unit_index).collect();
    let nodes = block_integral_nodes(x, d, pts);
    let mut poly = GradPoly { constant: e.a0 * x.size() as f64, linear: vec![], quadratic: vec![] };
    for (p, w) in &nodes {
        for mu in 0..d {
            for nu in 0..d {
                let c2 = e.a2.get(mu * d + nu).copied().unwrap_or(0.0);
                if c2 != 0.0 {
                    let g1 = GradFactor { y: *p, a: firsts[mu] };
                    let g2 = GradFactor { y: *p, a: firsts[nu] };
                    poly.quadratic.push((Complex64::new(w * c2, 0.0), g1, g2));
                }
                for rho in 0..d {
                    let c3 = e.a3.get((mu * d + nu) * d + rho).copied().unwrap_or(0.0);
                    if c3 != 0.0 {
                        let g1 = GradFactor { y: *p, a: firsts[mu] };
                        let g2 = GradFactor { y: *p, a: crate::lattice::add_index(&firsts[nu], &firsts[rho]) };
                        poly.quadratic.push((Complex64::new(w * c3, 0.0), g1, g2));
                    }
                }
            }
        }
        for (q, z) in &e.charges {
            out.push(CloudTerm::pure(z * w, vec![(*q, *p)]));
        }
    }
    if poly.constant.norm() > 0.0 || !poly.quadratic.is_empty() {
        out.push(CloudTerm { coeff: ONE, charges: Vec::new(), poly: Some(poly) });
    }
    out
}

// ---------------------------------------------------------------------------
// Potential and Mayer initialization.

/// Midpoint quadrature for `V(Δ, φ) = ∫_Δ cos φ` with `m^d` nodes per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VQuadrature {
    pub m: usize,
}

impl Default for VQuadrature {
    fn default() -> Self {
        VQuadrature { m: 2 }
    }
}

impl VQuadrature {
    pub fn nodes(&self, b: &Block, d: usize) -> Vec<(Point, f64)> {
        let m = self.m.max(1);
        let n = m.pow(d as u32);
        let w = 1.0 / n as f64;
        (0..n)
            .map(|mut k| {
                let mut p = [0.0; MAX_DIM];
                for a in 0..d {
                    p[a] = b.0[a] as f64 + ((k % m) as f64 + 0.5) / m as f64;
                    k /= m;
                }
                (p, w)
            })
            .collect()
    }
}

/// `V(Δ, φ) = ∫_Δ cos φ` by midpoint quadrature.
pub fn potential_v(b: &Block, phi: &dyn Field, quad: VQuadrature) -> f64 {
    quad.nodes(b, phi.torus().d).iter().map(|(p, w)| w * phi.value(p).cos()).sum()
}

/// `ζ V(Δ)` as charge-cloud terms.
pub fn v_terms(b: &Block, d: usize, zeta: Complex64, quad: VQuadrature) -> Vec<CloudTerm> {
    quad.nodes(b, d)
        .into_iter()
        .flat_map(|(p, w)| {
            [1, -1].map(|q| CloudTerm::pure(zeta * (w / 2.0), vec![(q, p)]))
        })
        .collect()
}

/// `ζ V` on single blocks as a charge-cloud activity.
pub fn potential_activity(torus: TorusSpec, zeta: Complex64, quad: VQuadrature) -> PolymerActivity {
    let terms = torus
        .all_blocks()
        .into_iter()
        .map(|b| (Polymer::single(&torus, b), v_terms(&b, torus.d, zeta, quad)))
        .collect();
    PolymerActivity::cloud(torus, terms, ActivityFlags { even: true, periodic: true, neutral: false })
}

/// Modified Bessel function `I_k(z)` for small complex `z`, by its power series.
pub fn bessel_i(k: u32, z: Complex64) -> Complex64 {
    let half = z / 2.0;
    let mut term = half.powu(k) / factorial(k);
    let mut sum = term;
    let sq = half * half;
    for m in 1..200u32 {
        term *= sq / (f64::from(m) * f64::from(m + k));
        sum += term;
        if term.norm() <= 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    sum
}

/// `K_0(X) = Π_{Δ⊂X} (e^{ζ V(Δ)} - 1)` on connected polymers of the torus.
pub fn mayer_init(zeta: Complex64, mt: &MaskTorus, max_size: usize, quad: VQuadrature) -> PolymerActivity {
    let torus = mt.torus;
    let mut support: Vec<Polymer> = mt
        .connected_masks(max_size)
        .into_iter()
        .map(|m| mt.polymer_of(m).expect("nonempty mask"))
        .collect();
    support.sort();
    let flags = ActivityFlags { even: true, periodic: true, neutral: false };
    if zeta == ZERO {
        return PolymerActivity::zero(torus);
    }
    let eval: Evaluator = Arc::new(move |x, phi| {
        x.blocks().iter().map(|b| (zeta * potential_v(b, phi, quad)).exp() - 1.0).product()
    });
    PolymerActivity::functional(torus, support, flags, eval)
}

/// `e^{ζ V(Δ)} - 1` as a charge cloud, with Bessel coefficients truncated at `|k| ≤ k_max`
/// per node and products pruned below `prune`.
pub fn mayer_block_terms(b: &Block, d: usize, zeta: Complex64, quad: VQuadrature, k_max: u32, prune: f64) -> Vec<CloudTerm> {
    let mut acc = vec![CloudTerm::constant(ONE)];
    for (p, w) in quad.nodes(b, d) {
        let z = zeta * w;
        let coeffs: Vec<(i32, Complex64)> = (-(k_max as i32)..=k_max as i32)
            .map(|k| (k, bessel_i(k.unsigned_abs(), z)))
            .collect();
        let mut next = Vec::new();
        for t in &acc {
            for (k, c) in &coeffs {
                let coeff = t.coeff * c;
                if coeff.norm() < prune {
                    continue;
                }
                let mut charges = t.charges.clone();
                if *k != 0 {
                    charges.push((*k, p));
                }
                next.push(CloudTerm::pure(coeff, charges));
            }
        }
        acc = next;
    }
    acc.push(CloudTerm::constant(-ONE));
    merge_terms(acc)
}

/// `K_0` as a charge cloud on connected polymers of at most `max_size` blocks.
pub fn mayer_cloud(zeta: Complex64, mt: &MaskTorus, max_size: usize, quad: VQuadrature, k_max: u32, prune: f64) -> Result<PolymerActivity> {
    let torus = mt.torus;
    let d = torus.d;
    let per_block: HashMap<Block, Vec<CloudTerm>> = torus
        .all_blocks()
        .into_iter()
        .map(|b| (b, mayer_block_terms(&b, d, zeta, quad, k_max, prune)))
        .collect();
    let mut terms = BTreeMap::new();
    for m in mt.connected_masks(max_size) {
        let x = mt.polymer_of(m)?;
        let mut acc = vec![CloudTerm::constant(ONE)];
        for b in x.blocks() {
            let mut next = Vec::new();
            for t in &acc {
                for u in &per_block[b] {
                    let p = t.product(u)?;
                    if p.coeff.norm() >= prune {
                        next.push(p);
                    }
                }
            }
            acc = next;
        }
        if !acc.is_empty() {
            terms.insert(x, acc);
        }
    }
    Ok(PolymerActivity::cloud(torus, terms, ActivityFlags { even: true, periodic: true, neutral: false }))
}

/// Merge pure terms with identical charge multisets.
pub fn merge_terms(terms: Vec<CloudTerm>) -> Vec<CloudTerm> {
    let mut pure: BTreeMap<Vec<(i32, [u64; MAX_DIM])>, (Vec<(i32, Point)>, Complex64)> = BTreeMap::new();
    let mut rest = Vec::new();
    for t in terms {
        if t.poly.is_some() {
            rest.push(t);
            continue;
        }
        let mut key: Vec<(i32, [u64; MAX_DIM])> = t.charges.iter().map(|(q, x)| (*q, x.map(f64::to_bits))).collect();
        key.sort();
        let e = pure.entry(key).or_insert_with(|| (t.charges.clone(), ZERO));
        e.1 += t.coeff;
    }
    let mut out: Vec<CloudTerm> = pure
        .into_values()
        .filter(|(_, c)| c.norm() > 0.0)
        .map(|(ch, c)| CloudTerm::pure(c, ch))
        .collect();
    out.extend(rest);
    out
}

// ---------------------------------------------------------------------------
// Polymer exponential.

/// Activity values on masks, indexed by lowest block.
pub struct MaskActivity<'a> {
    mt: &'a MaskTorus,
    by_low: Vec<Vec<(u64, Complex64)>>,
}

impl<'a> MaskActivity<'a> {
    pub fn new(mt: &'a MaskTorus, values: impl IntoIterator<Item = (u64, Complex64)>) -> Self {
        let mut by_low = vec![Vec::new(); mt.n_blocks()];
        for (m, v) in values {
            if m != 0 && v != ZERO {
                by_low[m.trailing_zeros() as usize].push((m, v));
            }
        }
        MaskActivity { mt, by_low }
    }

    /// Values of `K(·, φ)` on every support polymer inside `region`.
    pub fn from_activity(mt: &'a MaskTorus, k: &PolymerActivity, region: u64, phi: &dyn Field) -> Self {
        let support = k.support();
        let vals: Vec<(u64, Complex64)> = support
            .par_iter()
            .filter_map(|x| {
                let m = mt.mask_of(x);
                (m & !region == 0).then(|| (m, k.eval(x, phi)))
            })
            .collect();
        Self::new(mt, vals)
    }

    pub fn entries(&self) -> impl Iterator<Item = &(u64, Complex64)> {
        self.by_low.iter().flatten()
    }

    /// `ℰxp(□+K)(W)` by removing the lowest block: either it is uncovered, or it lies
    /// in a polymer `P`, which excludes `P` and its neighbours.
    pub fn exp(&self, region: u64) -> Result<Complex64> {
        let mut memo: HashMap<u64, Complex64> = HashMap::new();
        self.exp_memo(region, &mut memo)
    }

    fn exp_memo(&self, w: u64, memo: &mut HashMap<u64, Complex64>) -> Result<Complex64> {
        if w == 0 {
            return Ok(ONE);
        }
        if let Some(v) = memo.get(&w) {
            return Ok(*v);
        }
        if memo.len() > EXP_STATE_CAP {
            return Err(Error::ResourceCap("polymer exponential state table".into()));
        }
        let b = w.trailing_zeros() as usize;
        let mut v = self.exp_memo(w & !(1u64 << b), memo)?;
        for (p, k) in &self.by_low[b] {
            if p & !w == 0 {
                let rest = w & !p & !self.mt.neighbourhood(*p);
                v += k * self.exp_memo(rest, memo)?;
            }
        }
        memo.insert(w, v);
        Ok(v)
    }

    /// `ℰxp(□+K)(W)` for every `W ⊆ full`, as a dense table indexed by mask.
    pub fn exp_table(&self) -> Result<Vec<Complex64>> {
        let n = self.mt.n_blocks();
        if n > 22 {
            return Err(Error::ResourceCap(format!("dense table over {n} blocks")));
        }
        let mut a = vec![ZERO; 1 << n];
        a[0] = ONE;
        for w in 1u64..(1u64 << n) {
            let b = w.trailing_zeros() as usize;
            let mut v = a[(w & !(1u64 << b)) as usize];
            for (p, k) in &self.by_low[b] {
                if p & !w == 0 {
                    v += k * a[(w & !p & !self.mt.neighbourhood(*p)) as usize];
                }
            }
            a[w as usize] = v;
        }
        Ok(a)
    }
}

/// Invert a dense table `A(W) = ℰxp(□+E)(W)` for the activity `E` on connected masks.
pub fn log_table(mt: &MaskTorus, a: &[Complex64]) -> Result<Vec<(u64, Complex64)>> {
    let n = mt.n_blocks();
    if a.len() != 1 << n {
        return Err(Error::param("table", "length must be 2^blocks"));
    }
    let mut e: Vec<Complex64> = vec![ZERO; 1 << n];
    let mut by_low: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut out = Vec::new();
    let mut order: Vec<u64> = (1u64..(1u64 << n)).filter(|m| mt.is_connected(*m)).collect();
    order.sort_by_key(|m| m.count_ones());
    for w in order {
        let b = w.trailing_zeros() as usize;
        let mut v = a[w as usize] - a[(w & !(1u64 << b)) as usize];
        for p in &by_low[b] {
            if p & !w == 0 {
                v -= e[*p as usize] * a[(w & !p & !mt.neighbourhood(*p)) as usize];
            }
        }
        e[w as usize] = v;
        by_low[b].push(w);
        out.push((w, v));
    }
    Ok(out)
}

/// `ℰxp(□+K)(X, φ)`.
pub fn polymer_exp(k: &PolymerActivity, x: &Polymer, phi: &dyn Field, mt: &MaskTorus) -> Result<Complex64> {
    let region = mt.mask_of(x);
    MaskActivity::from_activity(mt, k, region, phi).exp(region)
}

/// Brute-force polymer exponential over explicit collections of pairwise disjoint masks.
pub fn polymer_exp_brute(mt: &MaskTorus, values: &[(u64, Complex64)], region: u64) -> Complex64 {
    fn rec(mt: &MaskTorus, vals: &[(u64, Complex64)], start: usize, blocked: u64) -> Complex64 {
        let mut s = ZERO;
        for i in start..vals.len() {
            let (m, v) = vals[i];
            if m & blocked == 0 {
                s += v * (ONE + rec(mt, vals, i + 1, blocked | m | mt.neighbourhood(m)));
            }
        }
        s
    }
    let inside: Vec<(u64, Complex64)> = values.iter().copied().filter(|(m, _)| m & !region == 0).collect();
    ONE + rec(mt, &inside, 0, 0)
}

// ---------------------------------------------------------------------------
// Charge sectors.

/// `k_q(X, φ) = (2π)^{-1} ∫ e^{-iqΦ} K(X, φ + Φ) dΦ`; exact filtering for charge
/// clouds, `2Q + 1` trapezoid nodes for functionals.
pub fn charge_component(k: &PolymerActivity, q: i32, order_q: usize) -> Result<PolymerActivity> {
    if !k.flags.periodic {
        return Err(Error::Hypothesis {
            name: "periodic",
            detail: "charge decomposition needs 2π-periodicity in constant shifts".into(),
        });
    }
    let flags = ActivityFlags { even: k.flags.even && q == 0, periodic: true, neutral: q == 0 };
    match &k.repr {
        Representation::Functional { support, .. } => {
            let inner = k.clone();
            let n = 2 * order_q + 1;
            let eval: Evaluator = Arc::new(move |x, phi| {
                let mut s = ZERO;
                for j in 0..n {
                    let c = 2.0 * PI * j as f64 / n as f64;
                    let shifted = ShiftField { inner: phi, shift: c };
                    s += Complex64::from_polar(1.0, -f64::from(q) * c) * inner.eval(x, &shifted);
                }
                s / n as f64
            });
            Ok(PolymerActivity::functional(k.torus, support.clone(), flags, eval))
        }
        _ => {
            let terms = k
                .to_cloud()?
                .into_iter()
                .filter_map(|(x, ts)| {
                    let kept: Vec<CloudTerm> = ts.into_iter().filter(|t| t.total_charge() == q).collect();
                    (!kept.is_empty()).then_some((x, kept))
                })
                .collect();
            Ok(PolymerActivity::cloud(k.torus, terms, flags))
        }
    }
}

// ---------------------------------------------------------------------------
// Symmetry and locality checks.

/// A field equal to `inner` on the closed polymer `X` and perturbed elsewhere.
pub struct MaskedField<'a> {
    pub inner: &'a dyn Field,
    pub x: &'a Polymer,
    pub junk: f64,
}

/// Whether a point lies in the closed union of the blocks of `X`.
pub fn point_in_closed(torus: &TorusSpec, x: &Polymer, p: &Point) -> bool {
    let d = torus.d;
    x.blocks().iter().any(|b| {
        let delta = torus.point_delta(p, &b.center(d));
        delta[..d].iter().all(|c| c.abs() <= 0.5 + 1e-12)
    })
}

impl Field for MaskedField<'_> {
    fn torus(&self) -> &TorusSpec {
        self.inner.torus()
    }
    fn value(&self, p: &Point) -> f64 {
        self.deriv(p, &[0; MAX_DIM])
    }
    fn deriv(&self, p: &Point, alpha: &MultiIndex) -> f64 {
        let v = self.inner.deriv(p, alpha);
        if point_in_closed(self.inner.torus(), self.x, p) {
            v
        } else {
            v + self.junk * (1.0 + p[0].sin() + 0.7 * p[1].cos())
        }
    }
}

/// Largest `|K(X, φ) - K(X, φ masked outside X)|` over the support.
pub fn locality_defect(k: &PolymerActivity, phi: &dyn Field, junk: f64) -> f64 {
    k.support()
        .iter()
        .map(|x| {
            let masked = MaskedField { inner: phi, x, junk };
            (k.eval(x, phi) - k.eval(x, &masked)).norm()
        })
        .fold(0.0, f64::max)
}

/// Largest `|K(X, -φ) - K(X, φ)|` over the support.
pub fn evenness_defect(k: &PolymerActivity, phi: &AnalyticField) -> f64 {
    let neg = phi.negated();
    k.support().iter().map(|x| (k.eval(x, phi) - k.eval(x, &neg)).norm()).fold(0.0, f64::max)
}

/// Largest `|K(X, φ + 2π) - K(X, φ)|` over the support.
pub fn periodicity_defect(k: &PolymerActivity, phi: &AnalyticField) -> f64 {
    let sh = phi.shifted(2.0 * PI);
    k.support().iter().map(|x| (k.eval(x, phi) - k.eval(x, &sh)).norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Norms.

/// Settings of `‖K‖_{G,h,Γ}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ActivityNorm {
    pub reg: RegulatorParams,
    pub h: f64,
    pub gamma: SetRegulatorParams,
    /// Highest derivative order for functional estimates.
    pub n_max: u32,
    /// Fields per polymer for functional estimates.
    pub n_fields: usize,
    pub seed: u64,
}

impl ActivityNorm {
    pub fn new(reg: RegulatorParams, h: f64, gamma: SetRegulatorParams) -> Self {
        ActivityNorm { reg, h, gamma, n_max: 6, n_fields: 24, seed: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < 4 {
            return Err(Error::param("n_max", "derivative truncation must be at least 4"));
        }
        if !(self.h >= 0.0) {
            return Err(Error::param("h", "must be nonnegative"));
        }
        Ok(())
    }
}

/// A norm value with its provenance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub value: f64,
    /// True when the value is an exact or certified upper bound; false for estimates.
    pub upper_bound: bool,
    /// Declared slack: relative size of neglected tail terms.
    pub slack: f64,
    /// Field samples behind an estimate.
    pub n_samples: usize,
}

/// Geodesic distances between `points` inside the closed polymer `X`, in the ℓ¹ metric
/// along straight segments within single blocks.
fn geodesic_l1(torus: &TorusSpec, x: &Polymer, points: &[Point]) -> Vec<Vec<f64>> {
    let d = torus.d;
    let mut nodes: Vec<Point> = points.to_vec();
    for b in x.blocks() {
        for k in 0..(1usize << d) {
            let mut p = [0.0; MAX_DIM];
            for a in 0..d {
                p[a] = b.0[a] as f64 + ((k >> a) & 1) as f64;
            }
            nodes.push(p);
        }
    }
    let n = nodes.len();
    let l1 = |a: &Point, b: &Point| -> f64 { torus.point_delta(a, b)[..d].iter().map(|c| c.abs()).sum() };
    let mut dist = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        dist[i][i] = 0.0;
        for j in 0..n {
            if segment_in_closed(torus, x, &nodes[i], &nodes[j]) {
                dist[i][j] = l1(&nodes[i], &nodes[j]);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let v = dist[i][k] + dist[k][j];
                if v < dist[i][j] {
                    dist[i][j] = v;
                }
            }
        }
    }
    dist.truncate(points.len());
    dist.iter_mut().for_each(|r| r.truncate(points.len()));
    dist
}

/// Whether the minimal-image segment from `a` to `b` lies in the closed polymer: every
/// piece between crossings of integer coordinate lines must have its midpoint in `X`.
fn segment_in_closed(torus: &TorusSpec, x: &Polymer, a: &Point, b: &Point) -> bool {
    let d = torus.d;
    let delta = torus.point_delta(b, a);
    let mut cuts = vec![0.0, 1.0];
    for k in 0..d {
        if delta[k].abs() < 1e-15 {
            continue;
        }
        let (lo, hi) = if delta[k] > 0.0 { (a[k], a[k] + delta[k]) } else { (a[k] + delta[k], a[k]) };
        let mut n = lo.ceil();
        while n <= hi {
            cuts.push((n - a[k]) / delta[k]);
            n += 1.0;
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2).all(|w| {
        let t = 0.5 * (w[0] + w[1]);
        let mut p = *a;
        for k in 0..d {
            p[k] += t * delta[k];
        }
        point_in_closed(torus, x, &p)
    })
}

/// Upper bound on `sup { |Σ q_a f(x_a)| : ‖f‖_{C^r(X)} ≤ 1 }`.
pub fn charge_test_bound(torus: &TorusSpec, x: &Polymer, charges: &[(i32, Point)]) -> f64 {
    let abs: f64 = charges.iter().map(|c| f64::from(c.0.abs())).sum();
    if charges.len() < 2 {
        return abs;
    }
    let total = f64::from(charges.iter().map(|c| c.0).sum::<i32>().abs());
    let pts: Vec<Point> = charges.iter().map(|c| c.1).collect();
    let dist = geodesic_l1(torus, x, &pts);
    let pivot = (0..pts.len())
        .map(|k| charges.iter().enumerate().map(|(a, c)| f64::from(c.0.abs()) * dist[a][k]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    abs.min(total + pivot)
}

/// `sup_{u ≥ 0} e^{-u} (a + b √u + c u)`.
fn sup_damped(a: f64, b: f64, c: f64) -> f64 {
    let mut best = a;
    let mut u = 1e-3f64;
    while u < 60.0 {
        best = best.max((-u).exp() * (a + b * u.sqrt() + c * u));
        u *= 1.05;
    }
    best
}

/// Upper bound on `‖t(X)‖_{G,h}` for one charge-cloud term.
///
/// Derivative factors are bounded through `|∂^a φ(y)|² ≤ c_s κ^{-1} log G`, and the
/// supremum over fields is taken over the single variable `log G`.
pub fn term_norm(t: &CloudTerm, x: &Polymer, torus: &TorusSpec, reg: &RegulatorParams, h: f64) -> f64 {
    let rho = charge_test_bound(torus, x, &t.charges);
    let scale = t.coeff.norm() * (h * rho).exp();
    let Some(p) = &t.poly else {
        return scale;
    };
    let root = (reg.c_s / reg.kappa).sqrt();
    let lin: f64 = p.linear.iter().map(|l| l.0.norm()).sum();
    let quad: f64 = p.quadratic.iter().map(|q| q.0.norm()).sum();
    // B_0 = |P(φ)|, B_1 = |P_1(φ; f)|, B_2 = |P_2(φ; f, f)|.
    let b0 = sup_damped(p.constant.norm(), lin * root, quad * root * root);
    let b1 = sup_damped(lin, 2.0 * quad * root, 0.0);
    let b2 = 2.0 * quad;
    scale * (b0 + h * b1 + h * h / 2.0 * b2)
}

/// Upper bound on `‖K(X)‖_{G,h}` for a charge cloud by the triangle inequality.
pub fn cloud_polymer_norm(terms: &[CloudTerm], x: &Polymer, torus: &TorusSpec, reg: &RegulatorParams, h: f64) -> f64 {
    terms.iter().map(|t| term_norm(t, x, torus, reg, h)).sum()
}

/// `K(X, φ + t f)` along a line of fields.
struct LineField<'a> {
    phi: &'a dyn Field,
    f: &'a dyn Field,
    t: f64,
}

impl Field for LineField<'_> {
    fn torus(&self) -> &TorusSpec {
        self.phi.torus()
    }
    fn value(&self, x: &Point) -> f64 {
        self.phi.value(x) + self.t * self.f.value(x)
    }
    fn deriv(&self, x: &Point, a: &MultiIndex) -> f64 {
        self.phi.deriv(x, a) + self.t * self.f.deriv(x, a)
    }
}

/// Taylor coefficients `d^n/dt^n K(φ + t f)|_0`, `n ≤ n_max`, from a Chebyshev fit.
pub fn line_derivatives(k: &PolymerActivity, x: &Polymer, phi: &dyn Field, f: &dyn Field, n_max: u32, tau: f64) -> Vec<Complex64> {
    let m = (n_max as usize + 8).max(12);
    // Chebyshev nodes on [-τ, τ] and the interpolating polynomial in monomial form.
    let ts: Vec<f64> = (0..m).map(|j| tau * (PI * (j as f64 + 0.5) / m as f64).cos()).collect();
    let vals: Vec<Complex64> = ts
        .iter()
        .map(|t| k.eval(x, &LineField { phi, f, t: *t }))
        .collect();
    let vand = nalgebra::DMatrix::from_fn(m, m, |i, j| (ts[i] / tau).powi(j as i32));
    let lu = vand.lu();
    let re = lu.solve(&nalgebra::DVector::from_iterator(m, vals.iter().map(|v| v.re))).unwrap_or_else(|| nalgebra::DVector::zeros(m));
    let im = lu.solve(&nalgebra::DVector::from_iterator(m, vals.iter().map(|v| v.im))).unwrap_or_else(|| nalgebra::DVector::zeros(m));
    (0..=n_max as usize)
        .map(|n| Complex64::new(re[n], im[n]) * factorial(n as u32) / tau.powi(n as i32))
        .collect()
}

/// Lower-bound estimate of `‖K(X)‖_{G,h}` over a random field/direction ensemble.
pub fn functional_polymer_norm(k: &PolymerActivity, x: &Polymer, norm: &ActivityNorm) -> Result<NormReport> {
    norm.validate()?;
    let torus = k.torus;
    let mut rng = ChaCha8Rng::seed_from_u64(norm.seed ^ (x.size() as u64).wrapping_mul(0x9e37_79b9));
    let mut best = vec![0.0f64; norm.n_max as usize + 1];
    let zero = AnalyticField::constant(torus, 0.0);
    for s in 0..norm.n_fields {
        let phi = if s == 0 { zero.clone() } else { AnalyticField::random(torus, 2, 1.5, 0.6, &mut rng) };
        let f = if s % 2 == 0 {
            AnalyticField::constant(torus, 1.0)
        } else {
            AnalyticField::random(torus, 2, 1.0, 1.0, &mut rng)
        };
        let (fnorm, _) = field_norms(&f, x, norm.reg.r, 0, 5);
        if fnorm <= 0.0 {
            continue;
        }
        let g = log_regulator(&phi, x, &norm.reg, None).exp();
        let ds = line_derivatives(k, x, &phi, &f, norm.n_max, 0.25);
        for (n, v) in ds.iter().enumerate() {
            best[n] = best[n].max(v.norm() / fnorm.powi(n as i32) / g);
        }
    }
    let value: f64 = best.iter().enumerate().map(|(n, b)| norm.h.powi(n as i32) / factorial(n as u32) * b).sum();
    let last = best[norm.n_max as usize] * norm.h.powi(norm.n_max as i32) / factorial(norm.n_max);
    Ok(NormReport { value, upper_bound: false, slack: if value > 0.0 { last / value } else { 0.0 }, n_samples: norm.n_fields })
}

/// `‖K(X)‖_{G,h}`: a bound for charge clouds, an estimate for functionals.
pub fn polymer_norm(k: &PolymerActivity, x: &Polymer, norm: &ActivityNorm) -> Result<NormReport> {
    match &k.repr {
        Representation::Functional { .. } => functional_polymer_norm(k, x, norm),
        _ => {
            let cloud = k.to_cloud()?;
            let v = cloud.get(x).map_or(0.0, |ts| cloud_polymer_norm(ts, x, &k.torus, &norm.reg, norm.h));
            Ok(NormReport { value: v, upper_bound: true, slack: 0.0, n_samples: 0 })
        }
    }
}

/// `‖K‖_{G,h,Γ} = max_Δ Σ_{X ∋ Δ} Γ(X) ‖K(X)‖_{G,h}`.
pub fn activity_norm(k: &PolymerActivity, norm: &ActivityNorm) -> Result<NormReport> {
    norm.validate()?;
    let support = k.support();
    let per: Vec<(Polymer, NormReport)> = support
        .par_iter()
        .map(|x| polymer_norm(k, x, norm).map(|r| (x.clone(), r)))
        .collect::<Result<_>>()?;
    let mut by_block: HashMap<Block, f64> = HashMap::new();
    let mut upper = true;
    let mut slack = 0.0f64;
    let mut n_samples = 0;
    for (x, r) in &per {
        let g = gamma_p(x, &k.torus, &norm.gamma);
        for b in x.blocks() {
            *by_block.entry(*b).or_default() += g * r.value;
        }
        upper &= r.upper_bound;
        slack = slack.max(r.slack);
        n_samples += r.n_samples;
    }
    let value = by_block.values().copied().fold(0.0, f64::max);
    Ok(NormReport { value, upper_bound: upper, slack, n_samples })
}

// ---------------------------------------------------------------------------
// Potential norms.

/// Series norms of single-block potentials with `G = 1`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VbdReport {
    pub zeta: f64,
    pub h: f64,
    pub eps: f64,
    pub v_norm: f64,
    pub v_bound: f64,
    pub exp_minus_one: f64,
    pub exp_minus_one_bound: f64,
    pub exp_second: f64,
    pub exp_second_bound: f64,
}

/// `Σ_n h^n/n! sup_u |Σ_k (ik)^n c_k e^{iku}|` for a trigonometric polynomial in one
/// variable, with the supremum over a fine grid and the tail bounded termwise.
pub fn trig_series_norm(coeffs: &[(i32, Complex64)], h: f64, n_max: u32) -> f64 {
    let grid = 2048;
    let mut total = 0.0;
    for n in 0..=n_max {
        let mut best = 0.0f64;
        for g in 0..grid {
            let u = 2.0 * PI * g as f64 / grid as f64;
            let v: Complex64 = coeffs
                .iter()
                .map(|(k, c)| (I * f64::from(*k)).powu(n) * c * Complex64::from_polar(1.0, f64::from(*k) * u))
                .sum();
            best = best.max(v.norm());
        }
        total += h.powi(n as i32) / factorial(n) * best;
    }
    // Termwise bound on the tail n > n_max.
    let tail: f64 = coeffs
        .iter()
        .map(|(k, c)| {
            let a = h * f64::from(k.abs());
            let head: f64 = (0..=n_max).map(|n| a.powi(n as i32) / factorial(n)).sum();
            c.norm() * (a.exp() - head).max(0.0)
        })
        .sum();
    total + tail
}

/// Norms of `V`, `e^{ζV} - 1` and `e^{ζV} - 1 - ζV` on one block with one quadrature
/// node, where each is a trigonometric series in the node value.
pub fn vbd_norms(zeta: f64, h: f64, eps: f64) -> VbdReport {
    let k_max: i32 = 24;
    let z = Complex64::new(zeta, 0.0);
    let v: Vec<(i32, Complex64)> = vec![(1, Complex64::new(0.5, 0.0)), (-1, Complex64::new(0.5, 0.0))];
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    for k in -k_max..=k_max {
        let mut c = bessel_i(k.unsigned_abs(), z);
        if k == 0 {
            c -= 1.0;
        }
        e1.push((k, c));
        if k.abs() == 1 {
            c -= zeta / 2.0;
        }
        e2.push((k, c));
    }
    let n_max = 40;
    VbdReport {
        zeta,
        h,
        eps,
        v_norm: trig_series_norm(&v, h, n_max),
        v_bound: h.exp(),
        exp_minus_one: trig_series_norm(&e1, h, n_max),
        exp_minus_one_bound: zeta.abs().powf(1.0 - eps),
        exp_second: trig_series_norm(&e2, h, n_max),
        exp_second_bound: zeta.abs().powf(2.0 - eps),
    }
}

/// Largest `|ζ|` on a log grid below which `‖e^{ζV} - 1‖_{1,h} ≤ |ζ|^{1-ε}`.
pub fn vbd_threshold(h: f64, eps: f64) -> f64 {
    let mut z = 1.0f64;
    while z > 1e-14 {
        let r = vbd_norms(z, h, eps);
        if r.exp_minus_one <= r.exp_minus_one_bound {
            // Confirm on a decade below.
            let ok = (1..=10).all(|k| {
                let zz = z * 10f64.powf(-k as f64 / 5.0);
                let rr = vbd_norms(zz, h, eps);
                rr.exp_minus_one <= rr.exp_minus_one_bound
            });
            if ok {
                return z;
            }
        }
        z /= 10f64.powf(0.1);
    }
    0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::EnumerationCap;
    use crate::fields::ZeroField;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mt(l: u32, m: u32) -> MaskTorus {
        MaskTorus::new(TorusSpec::plane(l, m).unwrap(), EnumerationCap::default()).unwrap()
    }

    fn rand_field(t: TorusSpec, seed: u64) -> AnalyticField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AnalyticField::random(t, 3, 2.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_activity_exponential_is_one() {
        let m = mt(3, 1);
        let k = PolymerActivity::zero(m.torus);
        let x = m.polymer_of(m.full()).unwrap();
        assert_eq!(polymer_exp(&k, &x, &ZeroField(m.torus), &m).unwrap(), ONE);
    }

    #[test]
    fn single_block_exponential() {
        let m = mt(3, 1);
        let k = potential_activity(m.torus, Complex64::new(0.3, 0.0), VQuadrature::default());
        let phi = rand_field(m.torus, 3);
        let x = Polymer::single(&m.torus, Block::at(1, 2));
        let v = polymer_exp(&k, &x, &phi, &m).unwrap();
        assert_relative_eq!(v.re, 1.0 + k.eval(&x, &phi).re, epsilon = 1e-14);
    }

    #[test]
    fn independent_set_polynomial() {
        // Constant activity on blocks of a 4x4 torus: the exponential counts independent
        // sets of the king graph weighted by c^size.
        let m = mt(2, 2);
        let c = Complex64::new(0.37, 0.0);
        let vals: Vec<(u64, Complex64)> = (0..16).map(|i| (1u64 << i, c)).collect();
        let ma = MaskActivity::new(&m, vals.clone());
        let full = m.full();
        let mut brute = ZERO;
        for s in crate::lattice::submasks(full) {
            let independent = crate::lattice::iter_bits(s).all(|i| m.neighbourhood(1u64 << i) & s == 0);
            if independent {
                brute += c.powu(s.count_ones());
            }
        }
        assert_relative_eq!(ma.exp(full).unwrap().re, brute.re, epsilon = 1e-13);
        assert_relative_eq!(polymer_exp_brute(&m, &vals, full).re, brute.re, epsilon = 1e-13);
        // Pairwise separated blocks factorize into (1 + c)^n.
        let sep = 1u64 | (1u64 << 10);
        assert_relative_eq!(ma.exp(sep).unwrap().re, (ONE + c).powu(2).re, epsilon = 1e-14);
    }

    #[test]
    fn exp_table_matches_recursion_and_log_inverts() {
        let m = mt(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let vals: Vec<(u64, Complex64)> = m
            .connected_masks(3)
            .into_iter()
            .map(|x| (x, Complex64::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2))))
            .collect();
        let ma = MaskActivity::new(&m, vals.clone());
        let table = ma.exp_table().unwrap();
        for w in [m.full(), 0b1011_0110_0001_1101u64, 0x00ffu64] {
            assert_relative_eq!(table[w as usize].re, ma.exp(w).unwrap().re, epsilon = 1e-12);
        }
        let back = log_table(&m, &table).unwrap();
        let orig: HashMap<u64, Complex64> = vals.into_iter().collect();
        for (w, v) in back {
            let o = orig.get(&w).copied().unwrap_or(ZERO);
            assert!((v - o).norm() < 1e-12, "mask {w:b}: {v} vs {o}");
        }
    }

    #[test]
    fn mayer_identity_on_three_by_three() {
        let m = mt(3, 1);
        let zeta = Complex64::new(0.4, 0.1);
        let q = VQuadrature::default();
        let k = mayer_init(zeta, &m, 9, q);
        let x = m.polymer_of(m.full()).unwrap();
        for s in 0..5 {
            let phi = rand_field(m.torus, s);
            let lhs: Complex64 = (zeta * m.torus.all_blocks().iter().map(|b| potential_v(b, &phi, q)).sum::<f64>()).exp();
            let rhs = polymer_exp(&k, &x, &phi, &m).unwrap();
            assert!((lhs - rhs).norm() / lhs.norm() < 1e-10);
        }
    }

    #[test]
    fn mayer_pair_is_product_of_singles() {
        let m = mt(3, 1);
        let zeta = Complex64::new(0.2, 0.0);
        let k = mayer_init(zeta, &m, 9, VQuadrature::default());
        let phi = rand_field(m.torus, 1);
        let a = Polymer::single(&m.torus, Block::at(0, 0));
        let b = Polymer::single(&m.torus, Block::at(1, 0));
        let ab = Polymer::new(&m.torus, [Block::at(0, 0), Block::at(1, 0)]).unwrap();
        let p = k.eval(&a, &phi) * k.eval(&b, &phi);
        assert!((k.eval(&ab, &phi) - p).norm() < 1e-15);
        assert_eq!(mayer_init(ZERO, &m, 9, VQuadrature::default()).support().len(), 0);
    }

    #[test]
    fn mayer_cloud_matches_functional() {
        let m = mt(2, 1);
        let zeta = Complex64::new(0.05, 0.0);
        let q = VQuadrature { m: 1 };
        let f = mayer_init(zeta, &m, 4, q);
        let c = mayer_cloud(zeta, &m, 4, q, 8, 1e-22).unwrap();
        let phi = rand_field(m.torus, 9);
        for x in f.support() {
            assert!((f.eval(&x, &phi) - c.eval(&x, &phi)).norm() < 1e-15);
        }
    }

    #[test]
    fn potential_at_zero_field_is_one() {
        let t = TorusSpec::plane(2, 2).unwrap();
        assert_relative_eq!(potential_v(&Block::at(1, 1), &ZeroField(t), VQuadrature { m: 3 }), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn charge_components() {
        let m = mt(3, 1);
        let t = m.torus;
        let x = Polymer::single(&t, Block::at(0, 0));
        let single = PolymerActivity::cloud(
            t,
            [(x.clone(), vec![CloudTerm::pure(ONE, vec![(1, [0.3, 0.4, 0.0, 0.0])])])].into(),
            ActivityFlags { even: false, periodic: true, neutral: false },
        );
        let phi = rand_field(t, 2);
        for q in -3..=3 {
            let kq = charge_component(&single.to_functional(), q, DEFAULT_CHARGE_ORDER).unwrap();
            let expect = if q == 1 { single.eval(&x, &phi) } else { ZERO };
            assert!((kq.eval(&x, &phi) - expect).norm() < 1e-14);
        }
        let v = potential_activity(t, ONE, VQuadrature::default());
        let k0 = charge_component(&v, 0, DEFAULT_CHARGE_ORDER).unwrap();
        assert!(k0.support().is_empty());
        let k0f = charge_component(&v.to_functional(), 0, DEFAULT_CHARGE_ORDER).unwrap();
        assert!(k0f.eval(&x, &phi).norm() < 1e-14);
        let mut nonper = v.to_functional();
        nonper.flags.periodic = false;
        assert!(charge_component(&nonper, 0, 8).is_err());
    }

    #[test]
    fn resummation_and_shift_law() {
        let m = mt(2, 2);
        let t = m.torus;
        let k = mayer_cloud(Complex64::new(0.3, 0.0), &m, 2, VQuadrature { m: 1 }, 3, 1e-20).unwrap();
        let f = k.to_functional();
        let phi = rand_field(t, 4);
        let c = 0.77;
        let sh = phi.shifted(c);
        for x in k.support().iter().take(20) {
            let mut sum = ZERO;
            for q in -8..=8 {
                let kq = charge_component(&f, q, DEFAULT_CHARGE_ORDER).unwrap();
                let v = kq.eval(x, &phi);
                sum += v;
                let shifted = kq.eval(x, &sh);
                assert!((shifted - Complex64::from_polar(1.0, f64::from(q) * c) * v).norm() < 1e-12);
            }
            assert!((sum - k.eval(x, &phi)).norm() < 1e-10);
        }
    }

    #[test]
    fn locality_and_symmetry_of_mayer() {
        let m = mt(2, 2);
        let k = mayer_init(Complex64::new(0.3, 0.0), &m, 3, VQuadrature::default());
        let phi = rand_field(m.torus, 8);
        assert!(locality_defect(&k, &phi, 0.9) < 1e-15);
        assert!(evenness_defect(&k, &phi) < 1e-13);
        assert!(periodicity_defect(&k, &phi) < 1e-13);
        // A nonlocal evaluator is caught.
        let bad = PolymerActivity::functional(
            m.torus,
            k.support(),
            k.flags,
            Arc::new(|_, phi| Complex64::new(phi.value(&[3.5, 3.5, 0.0, 0.0]), 0.0)),
        );
        assert!(locality_defect(&bad, &phi, 0.9) > 1e-3);
    }

    #[test]
    fn convolution_of_single_charge() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let c = CovarianceKernel::slice(t, 0.0).unwrap().scaled(4.0 * PI);
        let term = CloudTerm::pure(ONE, vec![(2, [0.5, 0.5, 0.0, 0.0])]);
        let out = term.convolve(&c, &t);
        assert_relative_eq!(out.coeff.re, (-2.0 * c.at_zero()).exp(), epsilon = 1e-14);
    }

    #[test]
    fn convolution_with_polynomial_matches_monte_carlo() {
        // E[∂_1ζ(y)^2 e^{iζ(x)}] = (C_yy - m^2) e^{-C(0)/2}, checked by sampling.
        let t = TorusSpec::plane(2, 1).unwrap();
        let c = CovarianceKernel::slice(t, 0.0).unwrap().scaled(400.0);
        let x = [0.2, 0.3, 0.0, 0.0];
        let y = [0.9, 1.4, 0.0, 0.0];
        let g = GradFactor { y, a: crate::lattice::unit_index(0) };
        let term = CloudTerm {
            coeff: ONE,
            charges: vec![(1, x)],
            poly: Some(GradPoly { constant: ZERO, linear: vec![(ONE, g)], quadratic: vec![(ONE, g, g)] }),
        };
        let exact = term.convolve(&c, &t).eval(&ZeroField(t));
        // Sample (ζ(x), ∂_1ζ(y)) jointly.
        let e0 = [0u32; MAX_DIM];
        let e1 = crate::lattice::unit_index(0);
        let e11 = crate::lattice::add_index(&e1, &e1);
        let cxx = c.at_zero();
        let cyy = -c.eval(&[0.0; MAX_DIM], &e11);
        let cxy = c.eval(&t.point_delta(&y, &x), &e1);
        let _ = e0;
        let cov = nalgebra::Matrix2::new(cxx, cxy, cxy, cyy);
        let chol = cov.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut acc = ZERO;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = nalgebra::Vector2::new(
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng),
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng),
            );
            let s = chol * z;
            let v = Complex64::from_polar(1.0, s[0]) * (s[1] + s[1] * s[1]);
            acc += v;
            acc2 += v.norm_sqr();
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean.norm_sqr()) / n as f64).sqrt();
        assert!((mean - exact).norm() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn rescaled_term_reads_scaled_field() {
        let fine = TorusSpec::plane(2, 2).unwrap();
        let coarse = fine.coarser().unwrap();
        let g = GradFactor { y: [1.5, 2.5, 0.0, 0.0], a: crate::lattice::unit_index(1) };
        let term = CloudTerm {
            coeff: Complex64::new(0.3, 0.1),
            charges: vec![(1, [0.5, 3.2, 0.0, 0.0]), (-2, [2.0, 1.0, 0.0, 0.0])],
            poly: Some(GradPoly { constant: ONE, linear: vec![(ONE, g)], quadratic: vec![(ONE, g, g)] }),
        };
        let phi = rand_field(coarse, 6);
        let scaled = crate::fields::ScaledField::new(&phi);
        let a = term.eval(&scaled);
        let b = term.rescaled(2.0, 2).eval(&phi);
        assert!((a - b).norm() < 1e-13);
    }

    #[test]
    fn truncated_promotes_to_cloud() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let x = Polymer::new(&t, [Block::at(0, 0), Block::at(1, 0)]).unwrap();
        let e = TruncatedEntry {
            a0: Complex64::new(0.2, 0.0),
            a2: vec![0.3, 0.1, 0.1, -0.2],
            a3: vec![0.05, 0.0, 0.0, 0.01, 0.0, 0.02, 0.0, 0.0],
            charges: vec![(1, Complex64::new(0.1, 0.0)), (-1, Complex64::new(0.1, 0.0))],
        };
        let k = PolymerActivity {
            torus: t,
            flags: ActivityFlags::default(),
            repr: Representation::Truncated { entries: [(x.clone(), e)].into(), quad_pts: 5 },
        };
        let c = PolymerActivity::cloud(t, k.to_cloud().unwrap(), ActivityFlags::default());
        let phi = rand_field(t, 12);
        assert!((k.eval(&x, &phi) - c.eval(&x, &phi)).norm() < 1e-12);
        assert!(k.to_json().is_ok());
        assert!(k.to_functional().to_json().is_err());
    }

    #[test]
    fn vbd_potential_norm_bounded_by_exp_h() {
        for h in [1.0, 2.0] {
            let r = vbd_norms(1e-3, h, 0.1);
            assert!(r.v_norm <= r.v_bound * (1.0 + 1e-12));
            assert!(r.v_norm > 0.5 * r.v_bound);
        }
        let th = vbd_threshold(1.0, 0.1);
        assert!(th > 1e-6 && th < 1e-3, "threshold {th}");
        let r = vbd_norms(th / 10.0, 1.0, 0.1);
        assert!(r.exp_minus_one <= r.exp_minus_one_bound);
        assert!(r.exp_second <= r.exp_second_bound);
    }

    #[test]
    fn cloud_norm_of_potential() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let reg = RegulatorParams::uv(0.1, 0.5, 1.0, 1.0);
        let zeta = 0.01;
        let k = potential_activity(t, Complex64::new(zeta, 0.0), VQuadrature::default());
        let norm = ActivityNorm::new(reg, 1.0, SetRegulatorParams::standard(&t));
        let r = activity_norm(&k, &norm).unwrap();
        let gamma = SetRegulatorParams::standard(&t).gamma_from(1, 1.0);
        assert_relative_eq!(r.value, zeta * 1f64.exp() * gamma, max_relative = 1e-12);
        assert!(activity_norm(&PolymerActivity::zero(t), &norm).unwrap().value == 0.0);
    }

    #[test]
    fn functional_estimate_does_not_exceed_bound() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let reg = RegulatorParams::uv(0.1, 0.5, 1.0, 1.0);
        let k = potential_activity(t, Complex64::new(0.01, 0.0), VQuadrature { m: 1 });
        let norm = ActivityNorm::new(reg, 1.0, SetRegulatorParams::standard(&t));
        let x = Polymer::single(&t, Block::at(0, 0));
        let est = functional_polymer_norm(&k.to_functional(), &x, &norm).unwrap();
        let bound = polymer_norm(&k, &x, &norm).unwrap();
        assert!(est.value <= bound.value * (1.0 + 1e-6), "{} > {}", est.value, bound.value);
        assert!(est.value > 0.5 * bound.value);
    }

    #[test]
    fn neutral_pair_test_bound() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let x = Polymer::new(&t, [Block::at(0, 0), Block::at(1, 0)]).unwrap();
        let near = [(1, [0.5, 0.5, 0.0, 0.0]), (-1, [0.6, 0.5, 0.0, 0.0])];
        assert_relative_eq!(charge_test_bound(&t, &x, &near), 0.1, epsilon = 1e-12);
        let far = [(1, [0.1, 0.5, 0.0, 0.0]), (-1, [1.9, 0.5, 0.0, 0.0])];
        assert_relative_eq!(charge_test_bound(&t, &x, &far), 1.8, epsilon = 1e-12);
        let same = [(1, [0.1, 0.5, 0.0, 0.0]), (1, [1.9, 0.5, 0.0, 0.0])];
        assert_relative_eq!(charge_test_bound(&t, &x, &same), 2.0, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn charge_sector_norm_never_exceeds_total(seed in 0u64..10_000, q in -2i32..=2) {
            let m = mt(2, 2);
            let k = mayer_cloud(Complex64::new(0.2, 0.0), &m, 2, VQuadrature { m: 1 }, 3, 1e-14).unwrap();
            let reg = RegulatorParams::uv(0.1, 0.5, 1.0, 1.0);
            let mut norm = ActivityNorm::new(reg, 1.0 + (seed % 7) as f64 / 7.0, SetRegulatorParams::standard(&m.torus));
            norm.seed = seed;
            let kq = charge_component(&k, q, DEFAULT_CHARGE_ORDER).unwrap();
            let a = activity_norm(&kq, &norm).unwrap().value;
            let b = activity_norm(&k, &norm).unwrap().value;
            prop_assert!(a <= b * (1.0 + 1e-12));
        }

        #[test]
        fn polymer_exp_factorizes_on_separated_regions(seed in 0u64..10_000) {
            use rand::Rng;
            let m = mt(2, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<(u64, Complex64)> = m
                .connected_masks(2)
                .into_iter()
                .map(|x| (x, Complex64::new(rng.gen_range(-0.3..0.3), 0.0)))
                .collect();
            let ma = MaskActivity::new(&m, vals);
            // Two 2x2 squares with a gap of two columns on the 8x8 torus.
            let sq = |ox: i64, oy: i64| -> u64 {
                let mut s = 0u64;
                for dx in 0..2 {
                    for dy in 0..2 {
                        s |= 1u64 << m.index_of(Block::at(ox + dx, oy + dy));
                    }
                }
                s
            };
            let (a, b) = (sq(0, 0), sq(4, 4));
            let lhs = ma.exp(a | b).unwrap();
            let rhs = ma.exp(a).unwrap() * ma.exp(b).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
