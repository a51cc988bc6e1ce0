//! IR and UV flow drivers, energy and field-strength bookkeeping, the partition-function
//! oracle and contraction reporting.
//!
//! Desk-scale flows run on translation-invariant activities: one term list per polymer
//! shape, carried in infinite volume with the continuum slice covariance. Each step keeps
//! the exact linear map and the second-order tree sources of `ζV × ζV`; charge positions
//! are re-gridded after scaling, exactly for quadratics, so term counts stay bounded.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activities::{
    mayer_block_terms, mayer_cloud, merge_terms, polymer_exp, potential_v, v_terms, ActivityFlags, CloudTerm,
    GradFactor, GradPoly, PolymerActivity, VQuadrature,
};
use crate::covariance::{trlog_t, CovarianceKernel};
use crate::error::{Error, Result};
use crate::fields::{field_norms, spectral_sample, AnalyticField, Field, RegulatorParams};
use crate::lattice::{
    gamma_p, is_small, Block, EnumerationCap, MaskTorus, MultiIndex, Point, Polymer, SetRegulatorParams, TorusSpec,
    add_index, unit_index, MAX_DIM,
};
use crate::numerics::{binomial, factorial, RunningStats};
use crate::rgmap::{
    extraction_coefficients, polymer_centroids, rg_step, ExtractionPreset, RgStepParams, TestField,
};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Flows are two-dimensional.
const D: usize = 2;

/// Which end of the scale range a flow runs toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Ir,
    Uv,
}

/// Truncation of the translation-invariant flow representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Grid points per unit side for charge and derivative positions.
    pub grid: u32,
    /// Largest `|q|` per point and per term.
    pub max_charge: i32,
    /// Largest number of blocks in a shape.
    pub max_blocks: usize,
    /// Largest Chebyshev block distance of a second-order source pair.
    pub source_range: i64,
    /// Terms below this fraction of the largest coefficient are dropped.
    pub prune: f64,
    /// Midpoint nodes per side for `V`.
    pub quad_m: usize,
    /// Highest derivative order in norm estimates.
    pub norm_order: u32,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { grid: 4, max_charge: 3, max_blocks: 4, source_range: 4, prune: 1e-10, quad_m: 1, norm_order: 24 }
    }
}

/// Flow configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub beta: f64,
    /// IR: the initial coupling `ζ_0`. UV: the coupling `ζ = ζ_0` reached at the end.
    pub zeta: Complex64,
    pub l: u32,
    /// Volume exponent: energies count `|Λ_{M-j}| = L^{2(M-j)}` blocks at scale `j`.
    pub m: u32,
    /// UV depth: the flow runs `j = -N, …, 0`.
    pub n: u32,
    /// Number of IR steps.
    pub steps: usize,
    /// `κ_0`; `h_∞ = κ_0^{-1/2}`.
    pub kappa0: f64,
    pub eps: f64,
    pub truncation: Truncation,
    /// Relative anisotropy of the gradient sums tolerated before a step fails.
    pub aniso_tol: f64,
}

impl FlowConfig {
    /// IR flow over `steps` steps on `Λ_M` with `M = steps`.
    pub fn ir(beta: f64, zeta: f64, l: u32, steps: usize) -> Self {
        FlowConfig {
            mode: FlowMode::Ir,
            beta,
            zeta: Complex64::new(zeta, 0.0),
            l,
            m: steps as u32,
            n: 0,
            steps,
            kappa0: 0.25,
            eps: 0.1,
            truncation: Truncation::default(),
            aniso_tol: 1e-6,
        }
    }

    /// UV flow from `j = -N` to `0`.
    pub fn uv(beta: f64, zeta: Complex64, l: u32, n: u32) -> Self {
        FlowConfig {
            mode: FlowMode::Uv,
            beta,
            zeta,
            l,
            m: 0,
            n,
            steps: n as usize,
            kappa0: 0.25,
            eps: 0.2,
            truncation: Truncation::default(),
            aniso_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta", "must be positive"));
        }
        if self.l < 2 {
            return Err(Error::param("L", "block scale must be at least 2"));
        }
        if !(self.kappa0 > 0.0 && self.kappa0 <= 1.0) {
            return Err(Error::param("kappa0", "need 0 < kappa0 <= 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if self.mode == FlowMode::Uv && self.eps >= 0.25 {
            return Err(Error::param("eps", "UV flows need eps < 1/4"));
        }
        if self.mode == FlowMode::Ir {
            if self.zeta.im != 0.0 {
                return Err(Error::param("zeta", "IR flows take real zeta"));
            }
            if self.steps as u32 > self.m {
                return Err(Error::param("steps", format!("{} steps exceed M = {}", self.steps, self.m)));
            }
        }
        if !self.zeta.norm().is_finite() {
            return Err(Error::param("zeta", "must be finite"));
        }
        let t = &self.truncation;
        if t.grid < 2 || t.max_blocks == 0 || t.source_range < 2 || t.quad_m == 0 || t.norm_order < 4 {
            return Err(Error::param("truncation", "grid >= 2; max_blocks, quad_m > 0; source_range >= 2; norm_order >= 4"));
        }
        if !(self.aniso_tol > 0.0) {
            return Err(Error::param("aniso_tol", "must be positive"));
        }
        Ok(())
    }

    /// Preset warnings: IR flows are meant for `β > 8π`, UV flows for `β < 8π`.
    pub fn warnings(&self) -> Vec<String> {
        let kt = 8.0 * PI;
        match self.mode {
            FlowMode::Ir if self.beta <= kt => {
                vec![format!("beta = {} <= 8π: the IR flow is not expected to contract", self.beta)]
            }
            FlowMode::Uv if self.beta >= kt => {
                vec![format!("beta = {} >= 8π: the UV flow is not expected to contract", self.beta)]
            }
            _ => Vec::new(),
        }
    }

    /// `h_∞ = κ_0^{-1/2}`.
    pub fn h_inf(&self) -> f64 {
        self.kappa0.powf(-0.5)
    }

    /// `(h, κ)` after `k` steps. IR: `h_j = h_∞ (1 + 2^{-j})`, `κ_j = κ_0 Σ_{i≤j} 2^{-i}`.
    /// UV: `h_j = h_∞ (1 + Σ_{i=1}^{|j|} 2^{-i})` and `κ = κ_0` fixed.
    pub fn schedule(&self, k: usize) -> (f64, f64) {
        match self.mode {
            FlowMode::Ir => {
                let two = 2f64.powi(-(k as i32));
                (self.h_inf() * (1.0 + two), self.kappa0 * (2.0 - two))
            }
            FlowMode::Uv => {
                let depth = (self.n as i64 - k as i64).max(0) as i32;
                (self.h_inf() * (2.0 - 2f64.powi(-depth)), self.kappa0)
            }
        }
    }

    /// Index of the first state.
    pub fn j_start(&self) -> i64 {
        match self.mode {
            FlowMode::Ir => 0,
            FlowMode::Uv => -i64::from(self.n),
        }
    }

    fn n_steps(&self) -> usize {
        match self.mode {
            FlowMode::Ir => self.steps,
            FlowMode::Uv => self.n as usize,
        }
    }

    /// `C(0)` of the continuum slice at `σ`, per unit `β`.
    fn kernel(&self, sigma: f64) -> Result<CovarianceKernel> {
        Ok(CovarianceKernel::continuum(self.l, sigma)?.scaled(self.beta))
    }
}

/// One recorded scale of a flow. Multipliers and ratios refer to the step that produced
/// the state and are absent on the first one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub j: i64,
    pub zeta: Complex64,
    pub sigma: f64,
    pub energy: Complex64,
    /// `δE` and `δσ` extracted by the step out of this scale (zero on the last state).
    pub delta_e: Complex64,
    pub delta_sigma: f64,
    pub h: f64,
    pub kappa: f64,
    /// `‖K_j‖_j` for `K_j = ζ_j V + K̃_j`.
    pub norm: f64,
    /// `‖K̃_j‖_j`.
    pub remainder_norm: f64,
    /// Norm of the charged part of `K_j`, at the norm parameters of the previous scale.
    pub charged_norm: f64,
    /// Norm of `K_j` on large shapes.
    pub large_norm: f64,
    pub norm_ratio: Option<f64>,
    pub zeta_multiplier: Option<f64>,
    pub charged_multiplier: Option<f64>,
    pub large_multiplier: Option<f64>,
    /// `‖𝒮₁(ℛ_{≥2})‖ / ‖K_{j-1}‖` of the step into this state.
    pub higher_order_share: Option<f64>,
    pub anisotropy: f64,
    pub n_shapes: usize,
    pub n_terms: usize,
}

/// Measured constants of a trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowConstants {
    /// `max_j |δσ_j| h_∞² / (δ^j |ζ|^{1-ε})` (IR).
    pub delta_sigma: f64,
    /// `max_j ‖K̃_j‖ / |ζ_j|^{2-4ε}` (UV).
    pub remainder: f64,
    /// `max_j |δE_j| / |ζ_j|^{2-4ε}` (UV).
    pub delta_e: f64,
    /// `max_j ‖K_{j+1}‖ / ‖K_j‖`.
    pub worst_ratio: f64,
    /// Charged-sector multiplier over the last step, once the initial transient is gone.
    pub charged_multiplier: Option<f64>,
}

/// A flow run: states in order, and the reason if it stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub config: FlowConfig,
    pub states: Vec<FlowState>,
    pub stopped: Option<String>,
    pub constants: FlowConstants,
    pub warnings: Vec<String>,
}

impl FlowTrajectory {
    /// `δ = max(L^{-2}, L^{2-β/4π})`.
    pub fn delta(&self) -> f64 {
        let l = f64::from(self.config.l);
        l.powi(-2).max(l.powf(2.0 - self.config.beta / (4.0 * PI)))
    }

    /// `log L^{2-β/4π}`, the scale-invariant slope of `log|ζ_j|`.
    pub fn zeta_slope_reference(&self) -> f64 {
        (2.0 - self.config.beta / (4.0 * PI)) * f64::from(self.config.l).ln()
    }

    /// Least-squares slope of `log|ζ_j|` against `j`.
    pub fn zeta_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> =
            self.states.iter().filter(|s| s.zeta.norm() > 0.0).map(|s| (s.j as f64, s.zeta.norm().ln())).collect();
        least_squares_slope(&pts)
    }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

// ---------------------------------------------------------------------------
// Translation-invariant activities.

/// A polymer up to translation: sorted blocks with the bounding box at the origin.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Shape(Vec<[i64; 2]>);

impl Shape {
    /// Normalizes `blocks`, returning the shape and the translation that was subtracted.
    fn normalize(blocks: impl IntoIterator<Item = [i64; 2]>) -> (Shape, [i64; 2]) {
        let set: BTreeSet<[i64; 2]> = blocks.into_iter().collect();
        let lo = [
            set.iter().map(|b| b[0]).min().unwrap_or(0),
            set.iter().map(|b| b[1]).min().unwrap_or(0),
        ];
        (Shape(set.into_iter().map(|b| [b[0] - lo[0], b[1] - lo[1]]).collect()), lo)
    }

    fn size(&self) -> usize {
        self.0.len()
    }

    fn extent(&self) -> i64 {
        self.0.iter().flat_map(|b| b.iter().copied()).max().unwrap_or(0) + 1
    }

    fn polymer(&self, frame: &TorusSpec) -> Polymer {
        Polymer::new(frame, self.0.iter().map(|b| Block::at(b[0], b[1]))).expect("nonempty shape")
    }
}

/// Term lists per shape, with charge positions in the frame of the normalized shape.
#[derive(Clone, Debug, Default)]
struct TiActivity {
    terms: BTreeMap<Shape, Vec<CloudTerm>>,
}

impl TiActivity {
    fn n_terms(&self) -> usize {
        self.terms.values().map(Vec::len).sum()
    }

    fn add(&mut self, other: TiActivity) {
        for (s, t) in other.terms {
            self.terms.entry(s).or_default().extend(t);
        }
        self.tidy();
    }

    fn tidy(&mut self) {
        for t in self.terms.values_mut() {
            *t = tidy_terms(std::mem::take(t));
        }
        self.terms.retain(|_, t| !t.is_empty());
    }

    fn map_terms(&self, f: impl Fn(&CloudTerm) -> CloudTerm + Sync) -> TiActivity {
        let terms = self.terms.par_iter().map(|(s, ts)| (s.clone(), ts.iter().map(&f).collect())).collect();
        TiActivity { terms }
    }

    /// The activity placed once per shape on a large torus, for per-polymer routines.
    fn embed(&self, frame: &TorusSpec) -> PolymerActivity {
        let terms = self.terms.iter().map(|(s, t)| (s.polymer(frame), t.clone())).collect();
        PolymerActivity::cloud(*frame, terms, ActivityFlags { even: true, periodic: true, neutral: false })
    }
}

fn point_key(p: &Point) -> [u64; MAX_DIM] {
    p.map(|v| (v + 0.0).to_bits())
}

type FactorKey = ([u64; MAX_DIM], MultiIndex);

fn factor_key(g: &GradFactor) -> FactorKey {
    (point_key(&g.y), g.a)
}

/// Merges pure terms by charge multiset and sums all polynomial terms with equal charges
/// into one polynomial with merged factors. A bare constant joins the charge-free
/// polynomial, so constants that cancel are cancelled exactly.
fn tidy_terms(terms: Vec<CloudTerm>) -> Vec<CloudTerm> {
    let has_poly = terms.iter().any(|t| t.charges.is_empty() && t.poly.is_some());
    let (poly, pure): (Vec<_>, Vec<_>) =
        terms.into_iter().partition(|t| t.poly.is_some() || (has_poly && t.charges.is_empty()));
    let mut out = merge_terms(pure);
    type Acc = (Vec<(i32, Point)>, Complex64, BTreeMap<FactorKey, (GradFactor, Complex64)>, BTreeMap<(FactorKey, FactorKey), (GradFactor, GradFactor, Complex64)>);
    let mut by_charges: BTreeMap<Vec<(i32, [u64; MAX_DIM])>, Acc> = BTreeMap::new();
    for t in poly {
        let mut key: Vec<_> = t.charges.iter().map(|(q, x)| (*q, point_key(x))).collect();
        key.sort();
        let e = by_charges.entry(key).or_insert_with(|| (t.charges.clone(), ZERO, BTreeMap::new(), BTreeMap::new()));
        let one = GradPoly::one();
        let p = t.poly.as_ref().unwrap_or(&one);
        e.1 += t.coeff * p.constant;
        for (c, g) in &p.linear {
            e.2.entry(factor_key(g)).or_insert((*g, ZERO)).1 += t.coeff * c;
        }
        for (c, g1, g2) in &p.quadratic {
            let (k1, k2) = (factor_key(g1), factor_key(g2));
            let (k, a, b) = if k1 <= k2 { ((k1, k2), g1, g2) } else { ((k2, k1), g2, g1) };
            e.3.entry(k).or_insert((*a, *b, ZERO)).2 += t.coeff * c;
        }
    }
    for (_, (charges, constant, lin, quad)) in by_charges {
        let poly = GradPoly {
            constant,
            linear: lin.into_values().filter(|v| v.1.norm() > 0.0).map(|(g, c)| (c, g)).collect(),
            quadratic: quad.into_values().filter(|v| v.2.norm() > 0.0).map(|(a, b, c)| (c, a, b)).collect(),
        };
        if poly.is_constant() {
            if poly.constant.norm() != 0.0 {
                out.push(CloudTerm { coeff: poly.constant, charges, poly: None });
            }
            continue;
        }
        out.push(CloudTerm { coeff: ONE, charges, poly: Some(poly) });
    }
    out
}

fn shift_point(p: &mut Point, v: [f64; 2]) {
    p[0] += v[0];
    p[1] += v[1];
}

fn shift_term(t: &CloudTerm, v: [f64; 2]) -> CloudTerm {
    let mut t = t.clone();
    t.charges.iter_mut().for_each(|c| shift_point(&mut c.1, v));
    if let Some(p) = &mut t.poly {
        p.linear.iter_mut().for_each(|l| shift_point(&mut l.1.y, v));
        p.quadratic.iter_mut().for_each(|q| {
            shift_point(&mut q.1.y, v);
            shift_point(&mut q.2.y, v);
        });
    }
    t
}

/// Three-point Lagrange weights of `p` on the grid of spacing `1/g`, with every stencil
/// inside the closed unit block holding `p`. Exact for quadratics, so a re-gridded charge
/// keeps its weight, first and second moments.
fn regrid_weights(p: &Point, g: f64) -> Vec<(Point, f64)> {
    let mut out = vec![([0.0; MAX_DIM], 1.0)];
    for a in 0..D {
        let s = p[a] * g;
        let lo = p[a].floor() * g;
        let mut axis: Vec<(f64, f64)> = Vec::with_capacity(3);
        if (s - s.round()).abs() < 1e-9 {
            axis.push((s.round(), 1.0));
        } else {
            let center = s.round().clamp(lo + 1.0, lo + g - 1.0);
            let n0 = center - 1.0;
            let u = s - n0;
            axis.extend([
                (n0, 0.5 * (u - 1.0) * (u - 2.0)),
                (n0 + 1.0, -u * (u - 2.0)),
                (n0 + 2.0, 0.5 * u * (u - 1.0)),
            ]);
        }
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (q, w) in &out {
            for (node, wt) in &axis {
                if *wt != 0.0 {
                    let mut r = *q;
                    r[a] = node / g;
                    next.push((r, w * wt));
                }
            }
        }
        out = next;
    }
    out
}

/// A neutral term whose charges all fit in one grid cell, replaced by its expansion to
/// second order in the charge offsets from their centroid. On the grid such a cluster
/// would keep a separation of one spacing forever, and its irrelevant higher moments
/// would then grow by `L^2` per step; as gradient factors they scale down instead.
fn collapse_neutral(t: &CloudTerm, cell: f64) -> Option<CloudTerm> {
    if t.charges.is_empty() || t.total_charge() != 0 {
        return None;
    }
    let n = t.charges.len() as f64;
    let mut c = [0.0; MAX_DIM];
    for (_, x) in &t.charges {
        for a in 0..D {
            c[a] += x[a] / n;
        }
    }
    let fits = (0..D).all(|a| {
        let lo = t.charges.iter().map(|p| p.1[a]).fold(f64::INFINITY, f64::min);
        let hi = t.charges.iter().map(|p| p.1[a]).fold(f64::NEG_INFINITY, f64::max);
        hi - lo <= cell + 1e-12
    });
    if !fits {
        return None;
    }
    let mut dipole = [0.0; D];
    let mut second = [[0.0; D]; D];
    for (q, x) in &t.charges {
        let q = f64::from(*q);
        for a in 0..D {
            dipole[a] += q * (x[a] - c[a]);
            for b in 0..D {
                second[a][b] += q * (x[a] - c[a]) * (x[b] - c[b]);
            }
        }
    }
    let at = |a: MultiIndex| GradFactor { y: c, a };
    let i = Complex64::i();
    let mut lin: Vec<(Complex64, GradFactor)> = Vec::new();
    for a in 0..D {
        if dipole[a] != 0.0 {
            lin.push((i * dipole[a], at(unit_index(a))));
        }
        for b in a..D {
            let w = if a == b { 0.5 * second[a][a] } else { second[a][b] };
            if w != 0.0 {
                lin.push((i * w, at(add_index(&unit_index(a), &unit_index(b)))));
            }
        }
    }
    let mut quad: Vec<(Complex64, GradFactor, GradFactor)> = Vec::new();
    for a in 0..D {
        for b in 0..D {
            let w = -0.5 * dipole[a] * dipole[b];
            if w != 0.0 {
                quad.push((Complex64::new(w, 0.0), at(unit_index(a)), at(unit_index(b))));
            }
        }
    }
    let p = t.poly.clone().unwrap_or_else(GradPoly::one);
    let mut out = GradPoly { constant: p.constant, linear: p.linear.clone(), quadratic: p.quadratic.clone() };
    out.linear.extend(lin.iter().map(|(w, g)| (p.constant * w, *g)));
    out.quadratic.extend(quad.iter().map(|(w, g1, g2)| (p.constant * w, *g1, *g2)));
    for (cl, gl) in &p.linear {
        out.quadratic.extend(lin.iter().map(|(w, g)| (cl * w, *gl, *g)));
    }
    Some(CloudTerm { coeff: t.coeff, charges: Vec::new(), poly: Some(out) })
}

/// Re-grids every point of a term; linear in each point's field value.
fn snap_term(t: &CloudTerm, g: f64) -> Vec<CloudTerm> {
    let mut acc: Vec<(Vec<(i32, Point)>, f64)> = vec![(Vec::new(), 1.0)];
    for (q, x) in &t.charges {
        let mut next = Vec::with_capacity(acc.len() * 4);
        for (ch, w) in &acc {
            for (p, wt) in regrid_weights(x, g) {
                let mut c = ch.clone();
                c.push((*q, p));
                next.push((c, w * wt));
            }
        }
        acc = next;
    }
    let poly = t.poly.as_ref().map(|p| {
        let snap = |f: &GradFactor| -> Vec<(GradFactor, f64)> {
            regrid_weights(&f.y, g).into_iter().map(|(y, w)| (GradFactor { y, a: f.a }, w)).collect()
        };
        let mut out = GradPoly { constant: p.constant, linear: Vec::new(), quadratic: Vec::new() };
        for (c, f) in &p.linear {
            out.linear.extend(snap(f).into_iter().map(|(s, w)| (c * w, s)));
        }
        for (c, f1, f2) in &p.quadratic {
            for (s1, w1) in snap(f1) {
                for (s2, w2) in snap(f2) {
                    out.quadratic.push((c * (w1 * w2), s1, s2));
                }
            }
        }
        out
    });
    acc.into_iter()
        .map(|(charges, w)| CloudTerm { coeff: t.coeff * w, charges, poly: poly.clone() })
        .collect()
}

fn within_charge_cap(t: &CloudTerm, cap: i32) -> bool {
    t.total_charge().abs() <= cap && t.charges.iter().all(|c| c.0.abs() <= cap)
}

/// Largest coefficient magnitude, polynomial coefficients included.
fn term_size(t: &CloudTerm) -> f64 {
    let p = t.poly.as_ref().map_or(1.0, |p| {
        p.constant.norm()
            + p.linear.iter().map(|l| l.0.norm()).sum::<f64>()
            + p.quadratic.iter().map(|q| q.0.norm()).sum::<f64>()
    });
    t.coeff.norm() * p
}

fn truncate(act: &mut TiActivity, tr: &Truncation) {
    act.terms.retain(|s, _| s.size() <= tr.max_blocks && s.extent() <= tr.source_range + 1);
    let largest = act.terms.values().flatten().map(term_size).fold(0.0, f64::max);
    let floor = tr.prune * largest;
    for t in act.terms.values_mut() {
        t.retain(|t| within_charge_cap(t, tr.max_charge) && term_size(t) > floor);
    }
    act.terms.retain(|_, t| !t.is_empty());
}

// ---------------------------------------------------------------------------
// The truncated step.

/// A frame torus large enough that every shape embeds without wrapping.
fn frame_torus(l: u32, range: i64) -> Result<TorusSpec> {
    let need = 4 * (range + 2);
    let mut m = 1;
    while i64::from(l).pow(m) < need {
        m += 1;
    }
    TorusSpec::plane(l, m)
}

/// `ℱ₁`: every term convolved with the slice covariance.
fn fluctuate_ti(k: &TiActivity, c: &CovarianceKernel, frame: &TorusSpec) -> TiActivity {
    k.map_terms(|t| t.convolve(c, frame))
}

/// Second-order tree sources `ζV(Δ₁) × ζV(Δ₂)` on separated block pairs:
/// `c₁c₂ e^{-(W₁₁+W₂₂)/2} (e^{-W₁₂} - 1)`.
fn tree_sources(zeta: Complex64, c: &CovarianceKernel, frame: &TorusSpec, tr: &Truncation) -> TiActivity {
    let mut out = TiActivity::default();
    if zeta == ZERO {
        return out;
    }
    let quad = VQuadrature { m: tr.quad_m };
    let v0 = v_terms(&Block::origin(), D, zeta, quad);
    for dx in 0..=tr.source_range {
        for dy in -tr.source_range..=tr.source_range {
            if (dx == 0 && dy <= 0) || dx.abs().max(dy.abs()) < 2 {
                continue;
            }
            let (shape, lo) = Shape::normalize([[0, 0], [dx, dy]]);
            let shift = [-(lo[0] as f64), -(lo[1] as f64)];
            let other: Vec<CloudTerm> = v0.iter().map(|t| shift_term(t, [dx as f64, dy as f64])).collect();
            let mut terms = Vec::new();
            for t1 in &v0 {
                for t2 in &other {
                    let (q1, x1) = t1.charges[0];
                    let (q2, x2) = t2.charges[0];
                    let w11 = c.at_zero() * f64::from(q1 * q1);
                    let w22 = c.at_zero() * f64::from(q2 * q2);
                    let w12 = f64::from(q1 * q2) * c.value(&frame.point_delta(&x1, &x2));
                    let coeff = t1.coeff * t2.coeff * (-0.5 * (w11 + w22)).exp() * (-w12).exp_m1();
                    let t = CloudTerm::pure(coeff, vec![(q1, x1), (q2, x2)]);
                    terms.push(shift_term(&t, shift));
                }
            }
            out.terms.insert(shape, terms);
        }
    }
    out.tidy();
    out
}

/// Per-block lattice sums of the extracted coefficients.
#[derive(Clone, Debug, Default)]
struct ExtractionSums {
    s0: Complex64,
    s2: [f64; 4],
    s3: [f64; 8],
}

impl ExtractionSums {
    fn add(&mut self, o: &ExtractionSums) {
        self.s0 += o.s0;
        self.s2.iter_mut().zip(&o.s2).for_each(|(a, b)| *a += b);
        self.s3.iter_mut().zip(&o.s3).for_each(|(a, b)| *a += b);
    }

    fn delta_sigma(&self, beta: f64) -> f64 {
        -2.0 * beta * 0.5 * (self.s2[0] + self.s2[3])
    }

    fn anisotropy(&self) -> f64 {
        let trace = 0.5 * (self.s2[0] + self.s2[3]);
        let scale = self.s2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let dev = (self.s2[0] - trace).abs().max((self.s2[3] - trace).abs()).max(self.s2[1].abs()).max(self.s2[2].abs());
        dev / scale
    }
}

/// `K - F(K)` with `F` from the extraction coefficients of every small shape; the lattice
/// sums count each shape once per block it covers.
fn extract_ti(k: &TiActivity, preset: ExtractionPreset, beta: f64, frame: &TorusSpec) -> Result<(TiActivity, ExtractionSums)> {
    let mut sums = ExtractionSums::default();
    if k.terms.is_empty() {
        return Ok((k.clone(), sums));
    }
    let embedded = k.embed(frame);
    let coeffs = extraction_coefficients(&embedded, preset, beta, f64::INFINITY)?;
    for e in &coeffs.entries {
        let n = e.polymer.size() as f64;
        sums.s0 += e.a0 * n;
        sums.s2.iter_mut().zip(&e.a2).for_each(|(s, a)| *s += n * a);
        sums.s3.iter_mut().zip(&e.a3).for_each(|(s, a)| *s += n * a);
    }
    let f = coeffs.activity().to_cloud()?;
    let by_polymer: BTreeMap<Polymer, Shape> = k.terms.keys().map(|s| (s.polymer(frame), s.clone())).collect();
    let mut out = k.clone();
    for (x, terms) in f {
        let shape = &by_polymer[&x];
        let list = out.terms.get_mut(shape).expect("extracted shape is in the support");
        list.extend(terms.into_iter().map(|mut t| {
            t.coeff = -t.coeff;
            t
        }));
    }
    out.tidy();
    Ok((out, sums))
}

/// `𝒮₁`: every translate of a shape inside an `L`-block grid cell maps to its closure,
/// with positions read at `x/L` and re-gridded when `grid` is given.
fn scale_ti(k: &TiActivity, l: u32, grid: Option<f64>) -> TiActivity {
    let li = i64::from(l);
    let lf = f64::from(l);
    let parts: Vec<BTreeMap<Shape, Vec<CloudTerm>>> = k
        .terms
        .par_iter()
        .map(|(shape, terms)| {
            let mut out: BTreeMap<Shape, Vec<CloudTerm>> = BTreeMap::new();
            for ox in 0..li {
                for oy in 0..li {
                    let coarse = shape.0.iter().map(|b| [(b[0] + ox).div_euclid(li), (b[1] + oy).div_euclid(li)]);
                    let (cs, lo) = Shape::normalize(coarse);
                    let v = [(ox - li * lo[0]) as f64, (oy - li * lo[1]) as f64];
                    let entry = out.entry(cs).or_default();
                    for t in terms {
                        let mut u = shift_term(t, v).rescaled(lf, D);
                        if let Some(g) = grid {
                            u = collapse_neutral(&u, 1.0 / g).unwrap_or(u);
                        }
                        match grid {
                            Some(g) => entry.extend(snap_term(&u, g)),
                            None => entry.push(u),
                        }
                    }
                    *entry = tidy_terms(std::mem::take(entry));
                }
            }
            out
        })
        .collect();
    let mut out = TiActivity::default();
    for part in parts {
        for (s, t) in part {
            let e = out.terms.entry(s).or_default();
            e.extend(t);
            *e = tidy_terms(std::mem::take(e));
        }
    }
    out.terms.retain(|_, t| !t.is_empty());
    out
}

/// `Σ` of charge `+1` coefficients of `𝒮₁ℱ₁(V)` on one block over those of `V`: the
/// measured one-step multiplier of the coupling.
pub fn measured_zeta_multiplier(c: &CovarianceKernel, l: u32, quad: VQuadrature) -> Result<f64> {
    let frame = frame_torus(l, 2)?;
    let v = v_terms(&Block::origin(), D, ONE, quad);
    let before: Complex64 = v.iter().filter(|t| t.total_charge() == 1).map(|t| t.coeff).sum();
    let mut k = TiActivity::default();
    k.terms.insert(Shape(vec![[0, 0]]), v);
    let after = scale_ti(&fluctuate_ti(&k, c, &frame), l, None);
    let sum: Complex64 = after
        .terms
        .get(&Shape(vec![[0, 0]]))
        .map(|ts| ts.iter().filter(|t| t.total_charge() == 1).map(|t| t.coeff).sum())
        .unwrap_or(ZERO);
    Ok((sum / before).re)
}

// ---------------------------------------------------------------------------
// Norm estimates.

/// `d^n/dt^n t(φ + t f)` at `t = 0` for `n ≤ n_max`, exactly.
fn term_directional_derivatives(t: &CloudTerm, phi: &dyn Field, f: &dyn Field, n_max: u32) -> Vec<Complex64> {
    let arg: f64 = t.charges.iter().map(|(q, x)| f64::from(*q) * phi.value(x)).sum();
    let a = I * t.charges.iter().map(|(q, x)| f64::from(*q) * f.value(x)).sum::<f64>();
    let base = t.coeff * Complex64::from_polar(1.0, arg);
    let p: [Complex64; 3] = match &t.poly {
        None => [ONE, ZERO, ZERO],
        Some(p) => {
            let mut p1 = ZERO;
            let mut p2 = ZERO;
            for (c, g) in &p.linear {
                p1 += c * g.eval(f);
            }
            for (c, g1, g2) in &p.quadratic {
                p1 += c * (g1.eval(phi) * g2.eval(f) + g1.eval(f) * g2.eval(phi));
                p2 += c * (2.0 * g1.eval(f) * g2.eval(f));
            }
            [p.eval(phi), p1, p2]
        }
    };
    (0..=n_max)
        .map(|n| {
            let mut s = ZERO;
            for k in 0..=n.min(2) {
                s += binomial(n, k) * a.powu(n - k) * p[k as usize];
            }
            base * s
        })
        .collect()
}

/// Estimate of `‖K(X)‖_{G,h}`: the supremum over constant fields (where `G = 1`) of
/// `Σ_n h^n/n! max_f |K_n(φ; f, …, f)|` over unit test functions in `C^r(X)`.
/// Derivatives are exact, so neutral cancellations are kept; the value is a lower
/// estimate of the norm, not a bound.
fn shape_norm(terms: &[CloudTerm], x: &Polymer, frame: &TorusSpec, h: f64, r: u32, n_max: u32, seed: u64) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let center = polymer_centroids(frame, x)[0];
    let mut tests: Vec<Box<dyn Field>> = vec![
        Box::new(AnalyticField::constant(*frame, 1.0)),
        Box::new(TestField::linear(*frame, center, 0)),
        Box::new(TestField::linear(*frame, center, 1)),
        Box::new(TestField::linear(*frame, center, 0).plus(1.0, &TestField::linear(*frame, center, 1))),
        Box::new(TestField::linear(*frame, center, 0).plus(-1.0, &TestField::linear(*frame, center, 1))),
        Box::new(TestField::quadratic(*frame, center, 0, 0)),
        Box::new(TestField::quadratic(*frame, center, 1, 1)),
        Box::new(TestField::quadratic(*frame, center, 0, 1)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..2 {
        tests.push(Box::new(AnalyticField::random(*frame, 3, 1.2, 1.0, &mut rng)));
    }
    let scales: Vec<f64> = tests.iter().map(|f| field_norms(f.as_ref(), x, r, 0, 5).0).collect();
    let mut best = 0.0f64;
    for theta in [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0, PI] {
        let phi = AnalyticField::constant(*frame, theta);
        let mut per_order = vec![0.0f64; n_max as usize + 1];
        for (f, s) in tests.iter().zip(&scales) {
            if *s <= 0.0 {
                continue;
            }
            let mut acc = vec![ZERO; n_max as usize + 1];
            for t in terms {
                for (a, v) in acc.iter_mut().zip(term_directional_derivatives(t, &phi, f.as_ref(), n_max)) {
                    *a += v;
                }
            }
            for (n, v) in acc.iter().enumerate() {
                per_order[n] = per_order[n].max(v.norm() / s.powi(n as i32));
            }
        }
        let total: f64 = per_order.iter().enumerate().map(|(n, v)| h.powi(n as i32) / factorial(n as u32) * v).sum();
        best = best.max(total);
    }
    best
}

/// Which terms of an activity a norm counts.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    All,
    Charged,
    Large,
}

/// `Σ_S |S| Γ(S) ‖K(S)‖`: the per-block sum of the translation-invariant norm.
fn ti_norm(k: &TiActivity, frame: &TorusSpec, h: f64, r: u32, n_max: u32, part: Part) -> f64 {
    let gamma = SetRegulatorParams::standard(frame);
    let shapes: Vec<(&Shape, &Vec<CloudTerm>)> = k.terms.iter().collect();
    shapes
        .par_iter()
        .enumerate()
        .map(|(i, (s, terms))| {
            let x = s.polymer(frame);
            let kept: Vec<CloudTerm> = match part {
                Part::All => terms.to_vec(),
                Part::Charged => terms.iter().filter(|t| t.total_charge() != 0).cloned().collect(),
                Part::Large if is_small(&x, frame) => Vec::new(),
                Part::Large => terms.to_vec(),
            };
            s.size() as f64 * gamma_p(&x, frame, &gamma) * shape_norm(&kept, &x, frame, h, r, n_max, i as u64)
        })
        .sum()
}

fn with_potential(k: &TiActivity, zeta: Complex64, quad: VQuadrature) -> TiActivity {
    let mut out = k.clone();
    if zeta != ZERO {
        out.terms.entry(Shape(vec![[0, 0]])).or_default().extend(v_terms(&Block::origin(), D, zeta, quad));
        out.tidy();
    }
    out
}

/// `K̃_0 = K_0 - ζV` for the Mayer activity, to second order: single blocks and adjacent
/// pairs.
fn initial_remainder(zeta: Complex64, tr: &Truncation) -> Result<TiActivity> {
    let mut out = TiActivity::default();
    if zeta == ZERO {
        return Ok(out);
    }
    let quad = VQuadrature { m: tr.quad_m };
    let prune = 1e-18 * zeta.norm().max(1e-300);
    let block = mayer_block_terms(&Block::origin(), D, zeta, quad, 2, prune);
    let mut single = block.clone();
    single.extend(v_terms(&Block::origin(), D, -zeta, quad));
    out.terms.insert(Shape(vec![[0, 0]]), single);
    for off in [[1, 0], [0, 1], [1, 1], [1, -1]] {
        let (shape, lo) = Shape::normalize([[0, 0], off]);
        let other: Vec<CloudTerm> = block.iter().map(|t| shift_term(t, [off[0] as f64, off[1] as f64])).collect();
        let mut terms = Vec::new();
        for a in &block {
            for b in &other {
                let p = a.product(b)?;
                terms.push(shift_term(&p, [-(lo[0] as f64), -(lo[1] as f64)]));
            }
        }
        out.terms.insert(shape, terms);
    }
    out.tidy();
    Ok(out)
}

fn regulator_order(mode: FlowMode) -> u32 {
    match mode {
        FlowMode::Ir => RegulatorParams::ir(1.0, 1.0, 1.0, 1.0).r,
        FlowMode::Uv => RegulatorParams::uv(1.0, 1.0, 1.0, 1.0).r,
    }
}

struct StepResult {
    zeta: Complex64,
    remainder: TiActivity,
    higher: TiActivity,
    sums: ExtractionSums,
    multiplier: f64,
}

fn flow_step(cfg: &FlowConfig, zeta: Complex64, k: &TiActivity, sigma: f64, frame: &TorusSpec) -> Result<StepResult> {
    let tr = &cfg.truncation;
    let c = cfg.kernel(sigma)?;
    let preset = match cfg.mode {
        FlowMode::Ir => ExtractionPreset::Ir,
        FlowMode::Uv => ExtractionPreset::Uv,
    };
    let multiplier = measured_zeta_multiplier(&c, cfg.l, VQuadrature { m: tr.quad_m })?;
    let (lin, mut sums) = extract_ti(&fluctuate_ti(k, &c, frame), preset, cfg.beta, frame)?;
    let (src, src_sums) = extract_ti(&tree_sources(zeta, &c, frame, tr), preset, cfg.beta, frame)?;
    sums.add(&src_sums);
    let grid = Some(f64::from(tr.grid));
    let mut remainder = scale_ti(&lin, cfg.l, grid);
    let higher = scale_ti(&src, cfg.l, grid);
    remainder.add(higher.clone());
    truncate(&mut remainder, tr);
    Ok(StepResult { zeta: zeta * multiplier, remainder, higher, sums, multiplier })
}

fn record(
    cfg: &FlowConfig,
    k_index: usize,
    zeta: Complex64,
    sigma: f64,
    energy: Complex64,
    rem: &TiActivity,
    frame: &TorusSpec,
) -> FlowState {
    let (h, kappa) = cfg.schedule(k_index);
    let quad = VQuadrature { m: cfg.truncation.quad_m };
    let r = regulator_order(cfg.mode);
    let n_max = cfg.truncation.norm_order;
    let full = with_potential(rem, zeta, quad);
    let h_prev = cfg.schedule(k_index.saturating_sub(1)).0;
    FlowState {
        j: cfg.j_start() + k_index as i64,
        zeta,
        sigma,
        energy,
        delta_e: ZERO,
        delta_sigma: 0.0,
        h,
        kappa,
        norm: ti_norm(&full, frame, h, r, n_max, Part::All),
        remainder_norm: ti_norm(rem, frame, h, r, n_max, Part::All),
        charged_norm: ti_norm(&full, frame, h_prev, r, n_max, Part::Charged),
        large_norm: ti_norm(&full, frame, h_prev, r, n_max, Part::Large),
        norm_ratio: None,
        zeta_multiplier: None,
        charged_multiplier: None,
        large_multiplier: None,
        higher_order_share: None,
        anisotropy: 0.0,
        n_shapes: full.terms.len(),
        n_terms: full.n_terms(),
    }
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

/// Runs the configured flow, stopping with a reason at the first failed step.
fn run_flow(cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate()?;
    let tr = cfg.truncation;
    let frame = frame_torus(cfg.l, tr.source_range)?;
    let quad = VQuadrature { m: tr.quad_m };
    let r = regulator_order(cfg.mode);
    let zeta0 = match cfg.mode {
        FlowMode::Ir => cfg.zeta,
        FlowMode::Uv => {
            let m = measured_zeta_multiplier(&cfg.kernel(0.0)?, cfg.l, quad)?;
            cfg.zeta / m.powi(cfg.n as i32)
        }
    };
    let mut rem = initial_remainder(zeta0, &tr)?;
    let mut zeta = zeta0;
    let mut sigma = 0.0;
    let mut energy = ZERO;
    let mut states = vec![record(cfg, 0, zeta, sigma, energy, &rem, &frame)];
    let mut stopped = None;
    for step in 0..cfg.n_steps() {
        let j = cfg.j_start() + step as i64;
        let out = match flow_step(cfg, zeta, &rem, sigma, &frame) {
            Ok(o) => o,
            Err(e) => {
                stopped = Some(format!("step {j}: {e}"));
                break;
            }
        };
        let delta_e = out.sums.s0;
        let delta_sigma = match cfg.mode {
            FlowMode::Ir => out.sums.delta_sigma(cfg.beta),
            FlowMode::Uv => 0.0,
        };
        let anisotropy = out.sums.anisotropy();
        let volume_exp = 2 * (i64::from(cfg.m) - j);
        let volume = f64::from(cfg.l).powf(volume_exp as f64);
        let trlog = if delta_sigma != 0.0 {
            let coarse_m = (i64::from(cfg.m) - j - 1).max(0) as u32;
            match trlog_t(&TorusSpec::plane(cfg.l, coarse_m)?, sigma, delta_sigma) {
                Ok(v) => v,
                Err(e) => {
                    stopped = Some(format!("step {j}: {e}"));
                    break;
                }
            }
        } else {
            0.0
        };
        {
            let last = states.last_mut().expect("initial state");
            last.delta_e = delta_e;
            last.delta_sigma = delta_sigma;
        }
        if cfg.mode == FlowMode::Ir && anisotropy > cfg.aniso_tol {
            stopped = Some(format!("step {j}: gradient sums anisotropic at {anisotropy:.3e}"));
            break;
        }
        let next_sigma = sigma + delta_sigma;
        if next_sigma.abs() > crate::covariance::SIGMA_MAX {
            stopped = Some(format!("step {j}: sigma {next_sigma:.4e} leaves the admissible range"));
            break;
        }
        energy += delta_e * volume - 0.5 * trlog;
        sigma = next_sigma;
        let prev = states.last().expect("initial state").clone();
        let (h_prev, _) = cfg.schedule(step);
        let higher_norm = ti_norm(&out.higher, &frame, h_prev, r, tr.norm_order, Part::All);
        let prev_full = with_potential(&rem, zeta, quad);
        let prev_charged = ti_norm(&prev_full, &frame, h_prev, r, tr.norm_order, Part::Charged);
        let prev_large = ti_norm(&prev_full, &frame, h_prev, r, tr.norm_order, Part::Large);
        zeta = out.zeta;
        rem = out.remainder;
        let mut s = record(cfg, step + 1, zeta, sigma, energy, &rem, &frame);
        s.norm_ratio = ratio(s.norm, prev.norm);
        s.zeta_multiplier = Some(out.multiplier);
        s.charged_multiplier = ratio(s.charged_norm, prev_charged);
        s.large_multiplier = ratio(s.large_norm, prev_large);
        s.higher_order_share = ratio(higher_norm, prev.norm);
        s.anisotropy = anisotropy;
        states.push(s);
    }
    let mut traj =
        FlowTrajectory { config: *cfg, states, stopped, constants: FlowConstants::default(), warnings: cfg.warnings() };
    traj.constants = measure_constants(&traj);
    Ok(traj)
}

fn measure_constants(t: &FlowTrajectory) -> FlowConstants {
    let cfg = &t.config;
    let mut c = FlowConstants::default();
    let delta = t.delta();
    let z0 = cfg.zeta.norm();
    for (k, s) in t.states.iter().enumerate() {
        if let Some(r) = s.norm_ratio {
            c.worst_ratio = c.worst_ratio.max(r);
        }
        match cfg.mode {
            FlowMode::Ir => {
                let scale = delta.powi(k as i32) * z0.powf(1.0 - cfg.eps);
                if scale > 0.0 {
                    c.delta_sigma = c.delta_sigma.max(s.delta_sigma.abs() * cfg.h_inf().powi(2) / scale);
                }
            }
            FlowMode::Uv => {
                let scale = s.zeta.norm().powf(2.0 - 4.0 * cfg.eps);
                if scale > 0.0 {
                    c.remainder = c.remainder.max(s.remainder_norm / scale);
                    c.delta_e = c.delta_e.max(s.delta_e.norm() / scale);
                }
            }
        }
    }
    c.charged_multiplier = t.states.last().and_then(|s| s.charged_multiplier);
    c
}

/// IR flow: truncated second-order steps with gradient extraction, `σ` and energy updates.
pub fn ir_flow(config: &FlowConfig) -> Result<FlowTrajectory> {
    if config.mode != FlowMode::Ir {
        return Err(Error::param("mode", "ir_flow needs an IR configuration"));
    }
    run_flow(config)
}

/// UV flow with the split `K_j = ζ_j V + K̃_j` and constant-only extraction.
pub fn uv_flow(config: &FlowConfig) -> Result<FlowTrajectory> {
    if config.mode != FlowMode::Uv {
        return Err(Error::param("mode", "uv_flow needs a UV configuration"));
    }
    run_flow(config)
}

/// Energy increment `δE |Λ_{M-j}| - ½ tr log(1 + δσ T)` of one step, with the trace on
/// the coarse torus.
pub fn energy_increment(delta_e: f64, fine: &TorusSpec, sigma: f64, delta_sigma: f64) -> Result<f64> {
    let coarse = fine.coarser()?;
    Ok(delta_e * fine.volume() - 0.5 * trlog_t(&coarse, sigma, delta_sigma)?)
}

/// The same increment with the trace from the real-space determinant.
pub fn energy_increment_real_space(delta_e: f64, fine: &TorusSpec, sigma: f64, delta_sigma: f64, n_g: usize) -> Result<f64> {
    let coarse = fine.coarser()?;
    Ok(delta_e * fine.volume() - 0.5 * crate::covariance::trlog_t_real_space(&coarse, sigma, delta_sigma, n_g)?)
}

// ---------------------------------------------------------------------------
// Contraction reporting and plot data.

/// One row of the contraction report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionRow {
    pub j: i64,
    pub norm_ratio: Option<f64>,
    pub delta: f64,
    pub charged_multiplier: Option<f64>,
    pub charged_reference: f64,
    pub large_multiplier: Option<f64>,
    pub large_reference: f64,
    pub higher_order_share: Option<f64>,
    /// `D^{-1} L^d` with `D = ‖K_{j-1}‖^{-1}`.
    pub higher_order_prediction: f64,
    pub zeta_multiplier: Option<f64>,
}

/// Per-step multipliers against their references; empty for fewer than two states.
pub fn contraction_report(t: &FlowTrajectory) -> Vec<ContractionRow> {
    let l = f64::from(t.config.l);
    let charged_reference = l.powf(2.0 - t.config.beta / (4.0 * PI));
    t.states
        .windows(2)
        .map(|w| ContractionRow {
            j: w[1].j,
            norm_ratio: w[1].norm_ratio,
            delta: t.delta(),
            charged_multiplier: w[1].charged_multiplier,
            charged_reference,
            large_multiplier: w[1].large_multiplier,
            large_reference: l.powi(-2),
            higher_order_share: w[1].higher_order_share,
            higher_order_prediction: l.powi(D as i32) * w[0].norm,
            zeta_multiplier: w[1].zeta_multiplier,
        })
        .collect()
}

/// Kinds of plot data.
pub const PLOT_KINDS: [&str; 2] = ["contraction", "zeta-schedule"];

/// A plot-ready table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Fitted slope of the data column, where meaningful.
    pub slope: Option<f64>,
}

/// `contraction`: `j, log‖K_j‖` and the `δ^j` reference line. `zeta-schedule`:
/// `j, log|ζ_j|` and the `L^{2-β/4π}` reference line.
pub fn emit_plotdata(t: &FlowTrajectory, kind: &str) -> Result<PlotData> {
    if t.states.is_empty() {
        return Err(Error::param("trajectory", "no states to plot"));
    }
    let first = &t.states[0];
    let j0 = first.j as f64;
    let (name, values, slope_ref): (&str, Vec<f64>, f64) = match kind {
        "contraction" => ("log_norm", t.states.iter().map(|s| s.norm.ln()).collect(), t.delta().ln()),
        "zeta-schedule" => ("log_abs_zeta", t.states.iter().map(|s| s.zeta.norm().ln()).collect(), t.zeta_slope_reference()),
        other => {
            return Err(Error::param("kind", format!("unknown kind `{other}`; expected one of {}", PLOT_KINDS.join(", "))))
        }
    };
    let rows: Vec<Vec<f64>> = t
        .states
        .iter()
        .zip(&values)
        .map(|(s, v)| vec![s.j as f64, *v, values[0] + (s.j as f64 - j0) * slope_ref])
        .collect();
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r[1].is_finite()).map(|r| (r[0], r[1])).collect();
    Ok(PlotData {
        header: vec!["j".into(), name.into(), "reference".into()],
        rows,
        slope: least_squares_slope(&pts),
    })
}

// ---------------------------------------------------------------------------
// Partition-function oracle.

/// Settings of the Monte Carlo partition-function oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub beta: f64,
    pub zeta: f64,
    pub l: u32,
    pub m: u32,
    pub n_samples: usize,
    pub n_chains: usize,
    pub quad_m: usize,
    /// Taylor order of the per-block Mayer factor `e^{ζV} - 1`.
    pub mayer_order: u32,
}

impl OracleConfig {
    pub fn new(beta: f64, zeta: f64, l: u32, m: u32) -> Self {
        OracleConfig { beta, zeta, l, m, n_samples: 40_000, n_chains: 8, quad_m: 1, mayer_order: 6 }
    }

    pub fn validate(&self) -> Result<TorusSpec> {
        let t = TorusSpec::plane(self.l, self.m)?;
        if t.side() > 4 {
            return Err(Error::ResourceCap(format!("oracle torus side {} exceeds 4", t.side())));
        }
        if self.m == 0 {
            return Err(Error::param("M", "the oracle needs M >= 1"));
        }
        if self.n_samples == 0 || self.n_chains == 0 {
            return Err(Error::param("n_samples", "need at least one sample and one chain"));
        }
        Ok(t)
    }
}

/// A Monte Carlo estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

impl Estimate {
    fn from_stats(s: &RunningStats) -> Self {
        Estimate { value: s.mean(), std_err: s.std_err(), n_samples: s.count() as usize }
    }

    pub fn relative_error(&self) -> f64 {
        self.std_err / self.value.abs()
    }
}

/// Draws `n` samples of `g(φ)` split over chains with per-chain seeds drawn from `rng`.
fn chain_stats<R: Rng + ?Sized>(
    c: &CovarianceKernel,
    n: usize,
    chains: usize,
    rng: &mut R,
    g: impl Fn(&AnalyticField) -> Vec<f64> + Sync,
) -> Result<Vec<RunningStats>> {
    let seeds: Vec<u64> = (0..chains).map(|_| rng.gen()).collect();
    let per: Vec<Vec<RunningStats>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(*seed);
            let count = n / chains + usize::from(i < n % chains);
            let mut stats: Vec<RunningStats> = Vec::new();
            for _ in 0..count {
                let phi = spectral_sample(c, &mut r)?;
                let v = g(&phi);
                if stats.is_empty() {
                    stats = vec![RunningStats::default(); v.len()];
                }
                stats.iter_mut().zip(v).for_each(|(s, x)| s.push(x));
            }
            Ok(stats)
        })
        .collect::<Result<_>>()?;
    let width = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![RunningStats::default(); width];
    for p in &per {
        for (o, s) in out.iter_mut().zip(p) {
            o.merge(s);
        }
    }
    Ok(out)
}

fn sum_v(phi: &dyn Field, torus: &TorusSpec, quad: VQuadrature) -> f64 {
    torus.all_blocks().iter().map(|b| potential_v(b, phi, quad)).sum()
}

/// `Z = ∫ exp(ζ Σ_Δ V(Δ)) dμ_{β v^M_0}` and `dZ/dζ|_0 = ∫ Σ_Δ V(Δ) dμ`, by Monte Carlo.
pub fn partition_oracle<R: Rng + ?Sized>(cfg: &OracleConfig, rng: &mut R) -> Result<(Estimate, Estimate)> {
    let torus = cfg.validate()?;
    let c = CovarianceKernel::full(torus, 0.0)?.scaled(cfg.beta);
    let quad = VQuadrature { m: cfg.quad_m };
    let stats = chain_stats(&c, cfg.n_samples, cfg.n_chains, rng, |phi| {
        let v = sum_v(phi, &torus, quad);
        vec![(cfg.zeta * v).exp(), v]
    })?;
    let z = Estimate::from_stats(&stats[0]);
    if z.relative_error() > 0.02 {
        return Err(Error::Tolerance(format!(
            "relative standard error {:.3} exceeds 2%; increase n_samples",
            z.relative_error()
        )));
    }
    Ok((z, Estimate::from_stats(&stats[1])))
}

/// Comparison of the partition function before and after one IR step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub z_before: Estimate,
    pub z_after: Estimate,
    pub pull: f64,
    pub dz_dzeta: Estimate,
    pub dz_expected: f64,
    pub dz_pull: f64,
    pub delta_e: f64,
    pub delta_sigma: f64,
}

/// `Z` from the scale-`j` representation `∫ exp(ζΣV) dμ` and from the scale-`j+1`
/// representation `e^{ℰ_1} ∫ ℰxp(□ + K_1)(Λ_{M-1}) dμ_{βv^{M-1}_0(σ_1)}` after one exact
/// IR step on the torus, with the pull `|Z_j - Z_{j+1}| / σ_pool`.
pub fn z_invariance_check<R: Rng + ?Sized>(cfg: &OracleConfig, rng: &mut R) -> Result<InvarianceCheck> {
    let torus = cfg.validate()?;
    let quad = VQuadrature { m: cfg.quad_m };
    let (z_before, dz_dzeta) = partition_oracle(cfg, rng)?;
    let full = CovarianceKernel::full(torus, 0.0)?.scaled(cfg.beta);
    let dz_expected = torus.volume() * (-0.5 * full.at_zero()).exp();
    let dz_pull = (dz_dzeta.value - dz_expected).abs() / dz_dzeta.std_err.max(64.0 * f64::EPSILON * dz_expected.abs());

    let mt = MaskTorus::new(torus, EnumerationCap::default())?;
    let k0 = mayer_cloud(Complex64::new(cfg.zeta, 0.0), &mt, mt.n_blocks(), quad, cfg.mayer_order, 1e-18)?;
    let reg = RegulatorParams::ir(0.25, 0.05, 1.0, 1.0);
    let norm = crate::activities::ActivityNorm::new(reg, 1.0, SetRegulatorParams::standard(&torus));
    let mut p = RgStepParams::new(cfg.beta, 0.0, torus, ExtractionPreset::Ir, norm)?;
    p.enforce = false;
    p.aniso_tol = 1e-6;
    let out = rg_step(&k0, &p)?;
    let delta_e = out.coefficients.delta_e.re;
    let delta_sigma = out.coefficients.delta_sigma;
    let coarse = p.coarse.torus;
    let log_prefactor = energy_increment(delta_e, &torus, 0.0, delta_sigma)?;
    let whole = Polymer::new(&coarse, coarse.all_blocks())?;
    let next = out.next;
    let coarse_mt = &p.coarse;
    let kernel = CovarianceKernel::full(coarse, delta_sigma)
        .map(|k| k.fourier_modes().is_some_and(|m| m.iter().any(|(_, w)| *w > 0.0)).then(|| k.scaled(cfg.beta)))?;
    let z_after = match kernel {
        None => {
            let v = polymer_exp(&next, &whole, &crate::fields::ZeroField(coarse), coarse_mt)?;
            Estimate { value: log_prefactor.exp() * v.re, std_err: 0.0, n_samples: 1 }
        }
        Some(k) => {
            let n = (cfg.n_samples / 10).max(cfg.n_chains);
            let stats = chain_stats(&k, n, cfg.n_chains, rng, |phi| {
                vec![polymer_exp(&next, &whole, phi, coarse_mt).map(|v| v.re).unwrap_or(f64::NAN)]
            })?;
            let e = Estimate::from_stats(&stats[0]);
            if !e.value.is_finite() {
                return Err(Error::Tolerance("polymer exponential failed on the coarse torus".into()));
            }
            let s = log_prefactor.exp();
            Estimate { value: s * e.value, std_err: s * e.std_err, n_samples: e.n_samples }
        }
    };
    // When the Gaussian is numerically degenerate both estimates have zero spread, and the
    // floor is the rounding level of `Z` accumulated over the samples.
    let rounding = 64.0 * f64::EPSILON * z_before.value.abs().max(z_after.value.abs());
    let pool = (z_before.std_err.powi(2) + z_after.std_err.powi(2)).sqrt().max(rounding);
    let pull = (z_before.value - z_after.value).abs() / pool;
    Ok(InvarianceCheck { z_before, z_after, pull, dz_dzeta, dz_expected, dz_pull, delta_e, delta_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_ir() -> FlowConfig {
        let mut c = FlowConfig::ir(12.0 * PI, 1e-3, 2, 2);
        c.truncation.source_range = 3;
        c
    }

    #[test]
    fn zero_coupling_flows_stay_at_zero() {
        let mut c = small_ir();
        c.zeta = ZERO;
        let t = ir_flow(&c).unwrap();
        assert_eq!(t.states.len(), 3);
        for s in &t.states {
            assert_eq!(s.norm, 0.0);
            assert_eq!(s.sigma, 0.0);
            assert_eq!(s.energy, ZERO);
        }
    }

    #[test]
    fn zeta_multiplier_is_the_closed_form() {
        for (beta, l) in [(4.0 * PI, 2), (6.0 * PI, 2), (12.0 * PI, 8)] {
            let c = CovarianceKernel::continuum(l, 0.0).unwrap().scaled(beta);
            let m = measured_zeta_multiplier(&c, l, VQuadrature { m: 2 }).unwrap();
            let exact = f64::from(l).powi(2) * (-0.5 * c.at_zero()).exp();
            assert_relative_eq!(m, exact, max_relative = 1e-12);
            let closed = f64::from(l).powf(2.0 - beta / (4.0 * PI));
            assert_relative_eq!(m, closed, max_relative = 1e-6);
        }
    }

    #[test]
    fn uv_flow_has_one_row_per_scale_and_exact_schedule() {
        let mut c = FlowConfig::uv(4.0 * PI, Complex64::new(0.01, 0.0), 2, 3);
        c.truncation.source_range = 3;
        let t = uv_flow(&c).unwrap();
        assert!(t.stopped.is_none(), "{:?}", t.stopped);
        assert_eq!(t.states.len(), 4);
        assert_eq!(t.states[0].j, -3);
        assert_relative_eq!(t.states.last().unwrap().zeta.re, 0.01, max_relative = 1e-12);
        let slope = t.zeta_slope().unwrap();
        assert!((slope - t.zeta_slope_reference()).abs() < 1e-6);
        assert!(t.states.iter().all(|s| s.sigma == 0.0));
    }

    #[test]
    fn ir_flow_contracts_and_updates_sigma() {
        let t = ir_flow(&small_ir()).unwrap();
        assert!(t.stopped.is_none(), "{:?}", t.stopped);
        for s in &t.states[1..] {
            assert!(s.norm_ratio.unwrap() < 1.0);
            assert!(s.anisotropy < 1e-6);
        }
        assert_eq!(t.states[1].sigma, t.states[0].delta_sigma);
    }

    #[test]
    fn energy_paths_agree() {
        let fine = TorusSpec::plane(2, 2).unwrap();
        let a = energy_increment(1e-3, &fine, 0.02, 0.01).unwrap();
        let b = energy_increment_real_space(1e-3, &fine, 0.02, 0.01, 6).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn plot_kinds_and_errors() {
        let mut c = FlowConfig::uv(6.0 * PI, Complex64::new(0.01, 0.0), 2, 2);
        c.truncation.source_range = 2;
        let t = uv_flow(&c).unwrap();
        let z = emit_plotdata(&t, "zeta-schedule").unwrap();
        assert_eq!(z.header.len(), 3);
        assert!((z.slope.unwrap() - t.zeta_slope_reference()).abs() < 1e-6);
        assert_eq!(emit_plotdata(&t, "contraction").unwrap().rows.len(), 3);
        let err = emit_plotdata(&t, "nope").unwrap_err().to_string();
        assert!(err.contains("contraction") && err.contains("zeta-schedule"));
        let empty = FlowTrajectory { states: Vec::new(), ..t };
        assert!(emit_plotdata(&empty, "contraction").is_err());
    }

    #[test]
    fn contraction_report_has_a_row_per_step() {
        let t = ir_flow(&small_ir()).unwrap();
        let rows = contraction_report(&t);
        assert_eq!(rows.len(), t.states.len() - 1);
        assert_relative_eq!(rows[0].charged_reference, 2f64.powi(-1), max_relative = 1e-12);
    }

    #[test]
    fn oracle_at_zero_coupling_is_one() {
        let mut cfg = OracleConfig::new(8.0, 0.0, 2, 1);
        cfg.n_samples = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, _) = partition_oracle(&cfg, &mut rng).unwrap();
        assert_eq!(z.value, 1.0);
        assert_eq!(z.std_err, 0.0);
    }

    #[test]
    fn partition_function_survives_one_ir_step() {
        let mut cfg = OracleConfig::new(8.0 * std::f64::consts::PI, 0.05, 2, 1);
        cfg.n_samples = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = z_invariance_check(&cfg, &mut rng).unwrap();
        assert!(r.pull <= 3.0, "pull {}", r.pull);
        assert!(r.dz_pull <= 3.0, "dZ pull {}", r.dz_pull);
        assert_relative_eq!(r.z_before.value, r.z_after.value, max_relative = 1e-10);
    }

    #[test]
    fn collapsed_neutral_cluster_agrees_to_second_order() {
        let frame = TorusSpec::plane(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = AnalyticField::random(frame, 3, 1.2, 1.0, &mut rng);
        let err = |eps: f64| {
            let c = [1.3, 2.1];
            let at = |dx: f64, dy: f64| {
                let mut p = [0.0; MAX_DIM];
                p[0] = c[0] + eps * dx;
                p[1] = c[1] + eps * dy;
                p
            };
            let t = CloudTerm::pure(ONE, vec![(1, at(0.3, -0.2)), (-1, at(-0.4, 0.1)), (1, at(0.1, 0.5)), (-1, at(0.0, -0.4))]);
            let u = collapse_neutral(&t, 1.0).expect("cluster fits");
            assert!(u.charges.is_empty());
            (t.eval(&phi) - u.eval(&phi)).norm()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 < 1e-4, "{e1}");
        assert!(e1 / e2 > 6.0, "error should shrink like the cube: {e1} {e2}");
        let charged = CloudTerm::pure(ONE, vec![(1, [0.0; MAX_DIM])]);
        assert!(collapse_neutral(&charged, 1.0).is_none());
    }

    #[test]
    fn shape_normalization_is_translation_invariant() {
        let (a, _) = Shape::normalize([[3, 5], [5, 4]]);
        let (b, _) = Shape::normalize([[-2, 1], [0, 0]]);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn regridding_preserves_moments_up_to_two(x in 0.0f64..3.0, y in 0.0f64..3.0, g in 2u32..9) {
            let p = [x, y, 0.0, 0.0];
            let w = regrid_weights(&p, f64::from(g));
            let moment = |f: &dyn Fn(&Point) -> f64| w.iter().map(|(q, c)| c * f(q)).sum::<f64>();
            prop_assert!((moment(&|_| 1.0) - 1.0).abs() < 1e-12);
            prop_assert!((moment(&|q| q[0]) - x).abs() < 1e-12 && (moment(&|q| q[1]) - y).abs() < 1e-12);
            prop_assert!((moment(&|q| q[0] * q[0]) - x * x).abs() < 1e-11);
            prop_assert!((moment(&|q| q[0] * q[1]) - x * y).abs() < 1e-11);
            prop_assert!(w.iter().all(|(q, _)| (0..2).all(|a| q[a] >= p[a].floor() && q[a] <= p[a].floor() + 1.0)));
        }

        #[test]
        fn snapping_preserves_charge_and_coefficient_sum(x in 0.0f64..2.0, y in 0.0f64..2.0, q in -3i32..=3) {
            let t = CloudTerm::pure(Complex64::new(0.3, -0.1), vec![(q, [x, y, 0.0, 0.0]), (-q, [y, x, 0.0, 0.0])]);
            let s = snap_term(&t, 4.0);
            let total: Complex64 = s.iter().map(|t| t.coeff).sum();
            prop_assert!((total - t.coeff).norm() < 1e-12);
            prop_assert!(s.iter().all(|u| u.total_charge() == 0));
        }
    }
}
