//! The RG sub-maps on polymer activities: fluctuation, extraction and scaling, their
//! linearizations, the composed step, extraction coefficients and charge-sector factors.
//!
//! Exact algebra is done on charge clouds and on dense subset tables: at a fixed field
//! the polymer exponential of any activity on a region of `n ≤ 16` blocks is a table of
//! `2^n` numbers, and the maps are inversions of such tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activities::{
    activity_norm, charge_component, line_derivatives, merge_terms, ActivityFlags, ActivityNorm, CloudTerm,
    Evaluator, MaskActivity, NormReport, PolymerActivity, Representation, TruncatedEntry, DEFAULT_CHARGE_ORDER,
};
use crate::covariance::{star_norm, BlockNormConfig, CovarianceKernel};
use crate::error::{Error, Result};
use crate::fields::{spectral_sample, AnalyticField, Field, ScaledField};
use crate::interpolation::{ball_count_gamma, enumerate_forests, Forest};
use crate::lattice::{
    count_small_supersets, gamma_p, is_small, iter_bits, l_closure, order, submasks, MaskTorus, MultiIndex,
    Point, Polymer, SetRegulatorParams, TorusSpec, MAX_DIM,
};
use crate::numerics::{exp_divided_difference, RunningStats};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Largest region for the `3^n` subset recursions.
pub const MAX_REGION_BLOCKS: usize = 16;

// ---------------------------------------------------------------------------
// Subset tables on a region.

/// The blocks of a region relabelled `0..n`, with closed adjacency in local bits.
#[derive(Clone, Debug)]
pub struct Region {
    global: Vec<usize>,
    nbr: Vec<u64>,
}

impl Region {
    pub fn new(mt: &MaskTorus, mask: u64) -> Result<Self> {
        let global: Vec<usize> = iter_bits(mask).collect();
        if global.len() > MAX_REGION_BLOCKS {
            return Err(Error::ResourceCap(format!(
                "subset tables over {} blocks exceed {MAX_REGION_BLOCKS}",
                global.len()
            )));
        }
        let nbr = global
            .iter()
            .map(|g| {
                let around = mt.neighbourhood(1u64 << g);
                global.iter().enumerate().filter(|(_, h)| around >> **h & 1 == 1).fold(0u64, |m, (k, _)| m | 1 << k)
            })
            .collect();
        Ok(Region { global, nbr })
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn full(&self) -> u64 {
        (1u64 << self.len()) - 1
    }

    pub fn to_global(&self, local: u64) -> u64 {
        iter_bits(local).fold(0, |m, k| m | 1u64 << self.global[k])
    }

    /// Local mask of a global mask lying inside the region.
    pub fn to_local(&self, global: u64) -> Option<u64> {
        let mut out = 0u64;
        let mut seen = 0u64;
        for (k, g) in self.global.iter().enumerate() {
            if global >> g & 1 == 1 {
                out |= 1 << k;
                seen |= 1 << g;
            }
        }
        (seen == global).then_some(out)
    }

    /// Blocks of the region adjacent to `mask`, excluding `mask`.
    pub fn neighbourhood(&self, mask: u64) -> u64 {
        iter_bits(mask).fold(0, |m, k| m | self.nbr[k]) & !mask
    }

    /// `ℰxp(□+K)(W)` for every local `W`, from activity values on local masks.
    pub fn exp_table(&self, values: &[(u64, Complex64)]) -> Vec<Complex64> {
        let n = self.len();
        let mut by_low: Vec<Vec<(u64, Complex64)>> = vec![Vec::new(); n];
        for (m, v) in values {
            if *m != 0 && *v != ZERO {
                by_low[m.trailing_zeros() as usize].push((*m, *v));
            }
        }
        let mut a = vec![ZERO; 1 << n];
        a[0] = ONE;
        for w in 1u64..(1u64 << n) {
            let b = w.trailing_zeros() as usize;
            let mut v = a[(w & !(1u64 << b)) as usize];
            for (p, k) in &by_low[b] {
                if p & !w == 0 {
                    v += k * a[(w & !p & !self.neighbourhood(*p)) as usize];
                }
            }
            a[w as usize] = v;
        }
        a
    }

    /// The activity `E` on all local masks, connected or not, with `ℰxp(□+E) = A`.
    pub fn log_table(&self, a: &[Complex64]) -> Vec<Complex64> {
        let n = self.len();
        let mut e = vec![ZERO; 1 << n];
        let mut nz: Vec<Vec<u64>> = vec![Vec::new(); n];
        for w in 1u64..(1u64 << n) {
            let b = w.trailing_zeros() as usize;
            let bit = 1u64 << b;
            let mut v = a[w as usize] - a[(w & !bit) as usize];
            let rest = w & !bit;
            // iterate whichever is shorter: stored entries or submasks of W through b
            if nz[b].len() < 1usize << rest.count_ones() {
                for p in &nz[b] {
                    if *p != w && p & !w == 0 {
                        v -= e[*p as usize] * a[(w & !p & !self.neighbourhood(*p)) as usize];
                    }
                }
            } else {
                for sub in submasks(rest).filter(|s| *s != rest) {
                    let p = sub | bit;
                    let ep = e[p as usize];
                    if ep != ZERO {
                        v -= ep * a[(w & !p & !self.neighbourhood(p)) as usize];
                    }
                }
            }
            if v.norm() > 1e-300 {
                e[w as usize] = v;
                nz[b].push(w);
            }
        }
        e
    }
}

/// `t(W) ← Σ_{U ⊆ W} t(U)`.
pub fn subset_sum(t: &mut [Complex64]) {
    let n = t.len().trailing_zeros();
    for k in 0..n {
        let bit = 1usize << k;
        for w in 0..t.len() {
            if w & bit != 0 {
                let lo = t[w ^ bit];
                t[w] += lo;
            }
        }
    }
}

/// Inverse of [`subset_sum`].
pub fn subset_difference(t: &mut [Complex64]) {
    let n = t.len().trailing_zeros();
    for k in 0..n {
        let bit = 1usize << k;
        for w in 0..t.len() {
            if w & bit != 0 {
                let lo = t[w ^ bit];
                t[w] -= lo;
            }
        }
    }
}

/// Dense local table of activity values at one field.
fn local_values(region: &Region, mt: &MaskTorus, k: &PolymerActivity, phi: &dyn Field) -> Vec<Complex64> {
    let mut t = vec![ZERO; 1 << region.len()];
    let full = region.to_global(region.full());
    let vals: Vec<(u64, Complex64)> = k
        .support()
        .par_iter()
        .filter_map(|x| {
            let m = mt.mask_of(x);
            (m & !full == 0).then(|| (m, k.eval(x, phi)))
        })
        .collect();
    for (m, v) in vals {
        if let Some(l) = region.to_local(m) {
            t[l as usize] += v;
        }
    }
    t
}

fn nonzero(t: &[Complex64]) -> Vec<(u64, Complex64)> {
    t.iter().enumerate().filter(|(_, v)| **v != ZERO).map(|(m, v)| (m as u64, *v)).collect()
}

/// Masks reachable as unions of `base` masks chained by overlap or contact, up to
/// `max_size` blocks.
pub fn overlap_unions(mt: &MaskTorus, base: &[u64], max_size: usize) -> Vec<u64> {
    let base: Vec<u64> = base.iter().copied().filter(|m| *m != 0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut seen: BTreeSet<u64> = base.iter().copied().filter(|m| m.count_ones() as usize <= max_size).collect();
    let mut frontier: Vec<u64> = seen.iter().copied().collect();
    while let Some(u) = frontier.pop() {
        let reach = u | mt.neighbourhood(u);
        for b in &base {
            if b & reach != 0 {
                let v = u | b;
                if v != u && v.count_ones() as usize <= max_size && seen.insert(v) {
                    frontier.push(v);
                }
            }
        }
    }
    seen.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Fluctuation.

/// Monte Carlo settings for convolving functional activities.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
    /// Largest accepted relative standard error of a probe convolution.
    pub rel_tol: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { samples: 4000, seed: 7, rel_tol: 0.02 }
    }
}

/// `ℱ₁K = μ_C * K`: exact for charge clouds, Monte Carlo with common random fields for
/// functionals. `c` is the covariance including its `β`.
pub fn fluctuate_linear(k: &PolymerActivity, c: &CovarianceKernel, mc: McOptions) -> Result<PolymerActivity> {
    let torus = k.torus;
    match &k.repr {
        Representation::Functional { .. } => fluctuate_linear_mc(k, c, mc),
        _ => {
            let cloud = k.to_cloud()?;
            let out = cloud
                .into_iter()
                .map(|(x, ts)| (x, ts.iter().map(|t| t.convolve(c, &torus)).collect()))
                .collect();
            Ok(PolymerActivity::cloud(torus, out, k.flags))
        }
    }
}

fn fluctuate_linear_mc(k: &PolymerActivity, c: &CovarianceKernel, mc: McOptions) -> Result<PolymerActivity> {
    let torus = k.torus;
    if c.torus() != Some(&torus) {
        return Err(Error::param("kernel", "convolution kernel must live on the activity torus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let draws: Vec<AnalyticField> = (0..mc.samples).map(|_| spectral_sample(c, &mut rng)).collect::<Result<_>>()?;
    let draws = Arc::new(draws);
    let probe = AnalyticField::constant(torus, 0.0);
    for x in k.support() {
        let mut re = RunningStats::default();
        let mut im = RunningStats::default();
        for z in draws.iter() {
            let v = k.eval(&x, &crate::fields::SumField { a: &probe, b: z });
            re.push(v.re);
            im.push(v.im);
        }
        let mean = Complex64::new(re.mean(), im.mean()).norm();
        let se = re.std_err().hypot(im.std_err());
        if mean > 0.0 && se > mc.rel_tol * mean {
            let need = (mc.samples as f64 * (se / (mc.rel_tol * mean)).powi(2)).ceil();
            return Err(Error::Tolerance(format!(
                "Monte Carlo convolution on {x:?}: relative error {:.3} needs about {need} samples",
                se / mean
            )));
        }
    }
    let inner = k.clone();
    let eval: Evaluator = Arc::new(move |x, phi| {
        let n = draws.len() as f64;
        draws.iter().map(|z| inner.eval(x, &crate::fields::SumField { a: phi, b: z })).sum::<Complex64>() / n
    });
    Ok(PolymerActivity::functional(torus, k.support(), k.flags, eval))
}

/// `Σ_{a ∈ A, b ∈ B} q_a q_b C(x_a - x_b)`.
fn cross_form(a: &[(i32, Point)], b: &[(i32, Point)], c: &CovarianceKernel, torus: &TorusSpec) -> f64 {
    let mut s = 0.0;
    for (qa, xa) in a {
        for (qb, xb) in b {
            s += f64::from(qa * qb) * c.value(&torus.point_delta(xa, xb));
        }
    }
    s
}

/// All permutations of `0..m`.
fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// A tree on `n` vertices with its pair paths, ready for the `s`-integral.
struct TreeData {
    bonds: Vec<(usize, usize)>,
    /// For each pair `i < j`, the bond indices on its path.
    paths: Vec<(usize, usize, Vec<usize>)>,
    orders: Arc<Vec<Vec<usize>>>,
}

fn tree_data(n: usize) -> Result<Vec<TreeData>> {
    let orders = Arc::new(permutations(n.saturating_sub(1)));
    Ok(enumerate_forests(n)?
        .into_iter()
        .filter(Forest::is_tree)
        .map(|t| {
            let mut paths = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    paths.push((i, j, t.path(i, j).expect("trees connect every pair")));
                }
            }
            TreeData { bonds: t.bonds.clone(), paths, orders: orders.clone() }
        })
        .collect())
}

/// `∫_{[0,1]^T} exp(-Σ_{i<j} σ_ij(T,s) W_ij) ds`, exactly.
///
/// On the region where the bonds are ranked by increasing `s`, the exponent is linear in
/// the ranked values, and the integral over the ordered simplex is the divided difference
/// of `exp` at the partial sums of the rank coefficients.
fn tree_integral(t: &TreeData, w: &[Vec<f64>]) -> f64 {
    let m = t.bonds.len();
    if m == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut rank = vec![0usize; m];
    for perm in t.orders.iter() {
        for (r, b) in perm.iter().enumerate() {
            rank[*b] = r;
        }
        let mut a = vec![0.0; m];
        for (i, j, path) in &t.paths {
            let r = path.iter().map(|b| rank[*b]).min().expect("distinct vertices have a path");
            a[r] -= w[*i][*j];
        }
        let mut nodes = vec![0.0; m + 1];
        let mut acc = 0.0;
        for r in (0..m).rev() {
            acc += a[r];
            nodes[r] = acc;
        }
        total += exp_divided_difference(&nodes);
    }
    total
}

/// The connected tree sum for one collection and one choice of terms.
fn tree_sum(trees: &[TreeData], w: &[Vec<f64>]) -> f64 {
    trees
        .iter()
        .map(|t| {
            let weight: f64 = t.bonds.iter().map(|(i, j)| -w[*i][*j]).product();
            if weight == 0.0 {
                0.0
            } else {
                weight * tree_integral(t, w)
            }
        })
        .sum()
}

/// Pairwise disjoint collections of indices into `masks`, with `1 ≤ size ≤ n_max`.
fn disjoint_collections(mt: &MaskTorus, masks: &[u64], n_max: usize) -> Vec<Vec<usize>> {
    fn rec(mt: &MaskTorus, masks: &[u64], start: usize, blocked: u64, cur: &mut Vec<usize>, n_max: usize, out: &mut Vec<Vec<usize>>) {
        for i in start..masks.len() {
            if masks[i] & blocked == 0 {
                cur.push(i);
                out.push(cur.clone());
                if cur.len() < n_max {
                    rec(mt, masks, i + 1, blocked | masks[i] | mt.neighbourhood(masks[i]), cur, n_max, out);
                }
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(mt, masks, 0, 0, &mut Vec::new(), n_max, &mut out);
    out
}

/// Cap on term products per collection in the exact fluctuation map.
const TERM_PRODUCT_CAP: usize = 1 << 20;

/// `ℱK` for a charge cloud: the tree sum over collections of at most `n_max` disjoint
/// polymers, each collection contributing on its union.
///
/// Collections of two or more polymers need pure terms; polynomial factors are only
/// convolved on single polymers.
pub fn fluctuate(k: &PolymerActivity, c: &CovarianceKernel, mt: &MaskTorus, n_max: usize) -> Result<PolymerActivity> {
    if n_max == 0 {
        return Err(Error::param("n_max", "at least one polymer per collection"));
    }
    let torus = k.torus;
    let cloud = k.to_cloud()?;
    let entries: Vec<(u64, Vec<CloudTerm>)> = cloud.into_iter().map(|(x, ts)| (mt.mask_of(&x), ts)).collect();
    let masks: Vec<u64> = entries.iter().map(|e| e.0).collect();
    let collections = disjoint_collections(mt, &masks, n_max);
    let largest = collections.iter().map(Vec::len).max().unwrap_or(1);
    let trees: Vec<Vec<TreeData>> = (0..=largest).map(|n| if n < 2 { Ok(Vec::new()) } else { tree_data(n) }).collect::<Result<_>>()?;
    let pieces: Vec<(u64, Vec<CloudTerm>)> = collections
        .par_iter()
        .map(|col| -> Result<(u64, Vec<CloudTerm>)> {
            let union = col.iter().fold(0u64, |m, i| m | masks[*i]);
            if col.len() == 1 {
                let ts = entries[col[0]].1.iter().map(|t| t.convolve(c, &torus)).collect();
                return Ok((union, ts));
            }
            let lists: Vec<&Vec<CloudTerm>> = col.iter().map(|i| &entries[*i].1).collect();
            if lists.iter().any(|l| l.iter().any(|t| t.poly.is_some())) {
                return Err(Error::param("poly", "polynomial factors are only convolved on single polymers"));
            }
            let count: usize = lists.iter().map(|l| l.len()).product();
            if count > TERM_PRODUCT_CAP {
                return Err(Error::ResourceCap(format!("{count} term products in one collection")));
            }
            let n = col.len();
            let mut out = Vec::with_capacity(count);
            let mut idx = vec![0usize; n];
            loop {
                let chosen: Vec<&CloudTerm> = (0..n).map(|a| &lists[a][idx[a]]).collect();
                let mut w = vec![vec![0.0; n]; n];
                let mut self_sum = 0.0;
                for a in 0..n {
                    self_sum += cross_form(&chosen[a].charges, &chosen[a].charges, c, &torus);
                    for b in a + 1..n {
                        let v = cross_form(&chosen[a].charges, &chosen[b].charges, c, &torus);
                        w[a][b] = v;
                        w[b][a] = v;
                    }
                }
                let s = tree_sum(&trees[n], &w);
                if s != 0.0 {
                    let coeff = chosen.iter().map(|t| t.coeff).product::<Complex64>() * (-0.5 * self_sum).exp() * s;
                    let charges = chosen.iter().flat_map(|t| t.charges.iter().copied()).collect();
                    out.push(CloudTerm::pure(coeff, charges));
                }
                let mut a = 0;
                loop {
                    if a == n {
                        return Ok((union, merge_terms(out)));
                    }
                    idx[a] += 1;
                    if idx[a] < lists[a].len() {
                        break;
                    }
                    idx[a] = 0;
                    a += 1;
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut by_union: BTreeMap<Polymer, Vec<CloudTerm>> = BTreeMap::new();
    for (m, ts) in pieces {
        if !ts.is_empty() {
            by_union.entry(mt.polymer_of(m)?).or_default().extend(ts);
        }
    }
    let out = by_union.into_iter().map(|(x, ts)| (x, merge_terms(ts))).collect();
    Ok(PolymerActivity::cloud(torus, out, k.flags))
}

/// Direct `μ_C * ℰxp(□+K)(Λ, φ)`: expand the polymer exponential into products of terms
/// and convolve each product exactly.
pub fn fluctuation_oracle(k: &PolymerActivity, c: &CovarianceKernel, mt: &MaskTorus, phi: &dyn Field) -> Result<Complex64> {
    let torus = k.torus;
    let cloud = k.to_cloud()?;
    let entries: Vec<(u64, Vec<CloudTerm>)> = cloud.into_iter().map(|(x, ts)| (mt.mask_of(&x), ts)).collect();
    let masks: Vec<u64> = entries.iter().map(|e| e.0).collect();
    let collections = disjoint_collections(mt, &masks, masks.len().max(1));
    let total: Complex64 = collections
        .par_iter()
        .map(|col| -> Result<Complex64> {
            let mut acc = vec![CloudTerm::constant(ONE)];
            for i in col {
                let mut next = Vec::with_capacity(acc.len() * entries[*i].1.len());
                for t in &acc {
                    for u in &entries[*i].1 {
                        next.push(t.product(u)?);
                    }
                }
                if next.len() > TERM_PRODUCT_CAP {
                    return Err(Error::ResourceCap(format!("{} term products in the oracle", next.len())));
                }
                acc = next;
            }
            Ok(acc.iter().map(|t| t.convolve(c, &torus).eval(phi)).sum())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(ONE + total)
}

// ---------------------------------------------------------------------------
// Extraction.

/// `ℰ(K, F)(W)` for every local `W`, from dense tables of `K` and `F` at one field.
///
/// With `G(W) = Σ_{Y⊆W} F(Y)` one has `ℰxp(□+K)(W) = e^{G(W)} A(W)`, where
/// `A(W) = Σ_{U⊆W} c(U) e^{G(W∖N[U]) - G(W)}`, `c(U)` sums `Π K̃(X_i)` over disjoint
/// collections covering exactly `U`, `K̃ = K - (e^F - 1)^+`, and `N[U]` is `U` with its
/// neighbours. Then `ℰ(K, F)` is the polymer logarithm of `A`.
pub fn extraction_table(region: &Region, k: &[Complex64], f: &[Complex64]) -> Vec<Complex64> {
    let n = region.len();
    let mut g = f.to_vec();
    subset_sum(&mut g);
    let exp_g: Vec<Complex64> = g.iter().map(|v| v.exp()).collect();
    let plus = region.log_table(&exp_g);
    let tilde: Vec<Complex64> = k.iter().zip(&plus).map(|(a, b)| a - b).collect();
    let mut c = region.exp_table(&nonzero(&tilde));
    subset_difference(&mut c);
    let cover: Vec<(u64, Complex64)> = nonzero(&c);
    let closed: Vec<u64> = cover.iter().map(|(u, _)| u | region.neighbourhood(*u)).collect();
    let a: Vec<Complex64> = (0..1u64 << n)
        .into_par_iter()
        .map(|w| {
            let gw = g[w as usize];
            cover
                .iter()
                .zip(&closed)
                .filter(|((u, _), _)| u & !w == 0)
                .map(|((_, cu), nu)| cu * (g[(w & !nu) as usize] - gw).exp())
                .sum()
        })
        .collect();
    region.log_table(&a)
}

/// `ℰ(K, F)` at field `φ` on every polymer of `region_mask` with a nonzero value.
pub fn extraction_values(
    k: &PolymerActivity,
    f: &PolymerActivity,
    mt: &MaskTorus,
    region_mask: u64,
    phi: &dyn Field,
) -> Result<Vec<(u64, Complex64)>> {
    let region = Region::new(mt, region_mask)?;
    let kt = local_values(&region, mt, k, phi);
    let ft = local_values(&region, mt, f, phi);
    let e = extraction_table(&region, &kt, &ft);
    Ok(nonzero(&e).into_iter().map(|(m, v)| (region.to_global(m), v)).collect())
}

/// `ℰ(K, F)` as a functional activity, supported on overlap-connected unions of the
/// supports of `K` and `F` with at most `max_size` blocks.
pub fn extract(k: &PolymerActivity, f: &PolymerActivity, mt: &MaskTorus, max_size: usize) -> Result<PolymerActivity> {
    let base: Vec<u64> = k.support().iter().chain(f.support().iter()).map(|x| mt.mask_of(x)).collect();
    let support = overlap_unions(mt, &base, max_size.min(MAX_REGION_BLOCKS))
        .into_iter()
        .map(|m| mt.polymer_of(m))
        .collect::<Result<Vec<_>>>()?;
    let (k, f, mt2) = (k.clone(), f.clone(), mt.clone());
    let flags = ActivityFlags {
        even: k.flags.even && f.flags.even,
        periodic: k.flags.periodic && f.flags.periodic,
        neutral: k.flags.neutral && f.flags.neutral,
    };
    let eval: Evaluator = Arc::new(move |x, phi| {
        let m = mt2.mask_of(x);
        let region = Region::new(&mt2, m).expect("support respects the region cap");
        let kt = local_values(&region, &mt2, &k, phi);
        let ft = local_values(&region, &mt2, &f, phi);
        extraction_table(&region, &kt, &ft)[region.full() as usize]
    });
    Ok(PolymerActivity::functional(mt.torus, support, flags, eval))
}

/// `ℰ₁(K, F) = K - F`.
pub fn extract_linear(k: &PolymerActivity, f: &PolymerActivity) -> Result<PolymerActivity> {
    match (&k.repr, &f.repr) {
        (Representation::Functional { .. }, _) | (_, Representation::Functional { .. }) => {
            Ok(k.combine(ONE, f, -ONE))
        }
        _ => {
            let mut out = k.to_cloud()?;
            for (x, ts) in f.to_cloud()? {
                out.entry(x).or_default().extend(ts.into_iter().map(|mut t| {
                    t.coeff = -t.coeff;
                    t
                }));
            }
            Ok(PolymerActivity::cloud(k.torus, out, k.flags))
        }
    }
}

/// `ℰ(K, F)(Z)` at one field by direct summation over the defining collections: disjoint
/// `{X_i}` from the support of `K̃` and distinct `{Y_j}` from the support of `F`, each
/// meeting some `X_i`, overlap connected with union `Z`. For tiny supports only.
pub fn extraction_brute(mt: &MaskTorus, k: &[(u64, Complex64)], f: &[(u64, Complex64)]) -> Vec<(u64, Complex64)> {
    let closed = |m: u64| m | mt.neighbourhood(m);
    let connected_family = |ms: &[u64]| -> bool {
        if ms.is_empty() {
            return false;
        }
        let mut reached = vec![false; ms.len()];
        reached[0] = true;
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            for j in 0..ms.len() {
                if !reached[j] && closed(ms[i]) & ms[j] != 0 {
                    reached[j] = true;
                    stack.push(j);
                }
            }
        }
        reached.into_iter().all(|r| r)
    };
    // (e^F - 1)^+ over overlap-connected families of distinct F-polymers
    let mut plus: BTreeMap<u64, Complex64> = BTreeMap::new();
    for sel in 1u64..(1u64 << f.len()) {
        let ms: Vec<u64> = iter_bits(sel).map(|i| f[i].0).collect();
        if connected_family(&ms) {
            let v: Complex64 = iter_bits(sel).map(|i| f[i].1.exp() - 1.0).product();
            *plus.entry(ms.iter().fold(0, |a, b| a | b)).or_default() += v;
        }
    }
    let mut tilde: BTreeMap<u64, Complex64> = BTreeMap::new();
    for (m, v) in k {
        *tilde.entry(*m).or_default() += v;
    }
    for (m, v) in &plus {
        *tilde.entry(*m).or_default() -= v;
    }
    let tilde: Vec<(u64, Complex64)> = tilde.into_iter().filter(|(_, v)| *v != ZERO).collect();
    let mut out: BTreeMap<u64, Complex64> = BTreeMap::new();
    let n_t = tilde.len();
    for sel in 1u64..(1u64 << n_t) {
        let xs: Vec<u64> = iter_bits(sel).map(|i| tilde[i].0).collect();
        let disjoint = xs.iter().enumerate().all(|(a, xa)| xs[a + 1..].iter().all(|xb| closed(*xa) & xb == 0));
        if !disjoint {
            continue;
        }
        let kx: Complex64 = iter_bits(sel).map(|i| tilde[i].1).product();
        let ux = xs.iter().fold(0, |a, b| a | b);
        let touching: Vec<usize> = (0..f.len()).filter(|j| closed(ux) & f[*j].0 != 0).collect();
        for ysel in 0u64..(1u64 << touching.len()) {
            let ys: Vec<u64> = iter_bits(ysel).map(|t| f[touching[t]].0).collect();
            let mut all = xs.clone();
            all.extend(&ys);
            if !connected_family(&all) {
                continue;
            }
            let fy: Complex64 = iter_bits(ysel).map(|t| (-f[touching[t]].1).exp() - 1.0).product();
            *out.entry(all.iter().fold(0, |a, b| a | b)).or_default() += kx * fy;
        }
    }
    out.into_iter().filter(|(_, v)| *v != ZERO).collect()
}

// ---------------------------------------------------------------------------
// Scaling.

/// Fine-torus mask of the blocks inside the coarse blocks of `coarse_mask`.
fn fine_mask_of(coarse: &MaskTorus, fine: &MaskTorus, coarse_mask: u64) -> Result<u64> {
    let mut m = 0u64;
    for i in iter_bits(coarse_mask) {
        let x = Polymer::single(&coarse.torus, coarse.block(i));
        m |= fine.mask_of(&crate::lattice::scale_up(&x, &coarse.torus));
    }
    Ok(m)
}

/// Coarse mask of the L-closure of a fine mask.
fn closure_mask(coarse: &MaskTorus, fine: &MaskTorus, fine_mask: u64) -> Result<u64> {
    let x = fine.polymer_of(fine_mask)?;
    Ok(coarse.mask_of(&l_closure(&x, &fine.torus)?))
}

/// `𝒮K(W, φ)` for every coarse `W` inside `coarse_region`: the polymer logarithm of
/// `B(W) = ℰxp(□+K)(LW, φ_L)`.
pub fn scaling_values(
    k: &PolymerActivity,
    fine: &MaskTorus,
    coarse: &MaskTorus,
    coarse_region: u64,
    phi: &dyn Field,
) -> Result<Vec<(u64, Complex64)>> {
    if fine.torus.coarser()? != coarse.torus {
        return Err(Error::param("torus", "coarse torus must be one scale above the fine torus"));
    }
    let region = Region::new(coarse, coarse_region)?;
    let phi_l = ScaledField::new(phi);
    let fine_region = fine_mask_of(coarse, fine, coarse_region)?;
    let vals = MaskActivity::from_activity(fine, k, fine_region, &phi_l);
    let b: Vec<Complex64> = (0..1u64 << region.len())
        .into_par_iter()
        .map(|w| {
            let lw = fine_mask_of(coarse, fine, region.to_global(w))?;
            vals.exp(lw)
        })
        .collect::<Result<_>>()?;
    let s = region.log_table(&b);
    Ok(nonzero(&s).into_iter().map(|(m, v)| (region.to_global(m), v)).collect())
}

/// `𝒮K` as a functional activity on the coarse torus, supported on overlap-connected
/// unions of L-closures of the support of `K`.
pub fn scale_activity(k: &PolymerActivity, fine: &MaskTorus, coarse: &MaskTorus, max_size: usize) -> Result<PolymerActivity> {
    let base: Vec<u64> = k
        .support()
        .iter()
        .map(|x| closure_mask(coarse, fine, fine.mask_of(x)))
        .collect::<Result<_>>()?;
    let support = overlap_unions(coarse, &base, max_size.min(MAX_REGION_BLOCKS))
        .into_iter()
        .map(|m| coarse.polymer_of(m))
        .collect::<Result<Vec<_>>>()?;
    let (k2, f2, c2) = (k.clone(), fine.clone(), coarse.clone());
    let eval: Evaluator = Arc::new(move |x, phi| {
        let m = c2.mask_of(x);
        scaling_values(&k2, &f2, &c2, m, phi)
            .expect("support respects the region cap")
            .into_iter()
            .find(|(w, _)| *w == m)
            .map_or(ZERO, |(_, v)| v)
    });
    Ok(PolymerActivity::functional(coarse.torus, support, k.flags, eval))
}

/// `𝒮₁K(X, φ) = Σ_{closure(Y) = LX} K(Y, φ_L)`, exact for charge clouds.
pub fn scale_linear(k: &PolymerActivity) -> Result<PolymerActivity> {
    let fine = k.torus;
    let coarse = fine.coarser()?;
    let l = f64::from(fine.l);
    match &k.repr {
        Representation::Functional { .. } => {
            let mut groups: BTreeMap<Polymer, Vec<Polymer>> = BTreeMap::new();
            for y in k.support() {
                groups.entry(l_closure(&y, &fine)?).or_default().push(y);
            }
            let support = groups.keys().cloned().collect();
            let (k2, groups) = (k.clone(), Arc::new(groups));
            let eval: Evaluator = Arc::new(move |x, phi| {
                let phi_l = ScaledField::new(phi);
                groups.get(x).map_or(ZERO, |ys| ys.iter().map(|y| k2.eval(y, &phi_l)).sum())
            });
            Ok(PolymerActivity::functional(coarse, support, k.flags, eval))
        }
        _ => {
            let mut out: BTreeMap<Polymer, Vec<CloudTerm>> = BTreeMap::new();
            for (y, ts) in k.to_cloud()? {
                let x = l_closure(&y, &fine)?;
                out.entry(x).or_default().extend(ts.iter().map(|t| t.rescaled(l, fine.d)));
            }
            Ok(PolymerActivity::cloud(coarse, out, k.flags))
        }
    }
}

/// `𝒮K(W)` at one field by direct summation: disjoint fine collections grouped into
/// clusters whose L-closures are overlap connected. For tiny supports only.
pub fn scaling_brute(fine: &MaskTorus, coarse: &MaskTorus, k: &[(u64, Complex64)]) -> Result<Vec<(u64, Complex64)>> {
    let closures: Vec<u64> = k.iter().map(|(m, _)| closure_mask(coarse, fine, *m)).collect::<Result<_>>()?;
    let mut out: BTreeMap<u64, Complex64> = BTreeMap::new();
    for sel in 1u64..(1u64 << k.len()) {
        let idx: Vec<usize> = iter_bits(sel).collect();
        let disjoint = idx.iter().enumerate().all(|(a, i)| {
            idx[a + 1..].iter().all(|j| (k[*i].0 | fine.neighbourhood(k[*i].0)) & k[*j].0 == 0)
        });
        if !disjoint {
            continue;
        }
        // closures must form one overlap-connected cluster
        let mut reached = vec![false; idx.len()];
        reached[0] = true;
        let mut stack = vec![0];
        while let Some(a) = stack.pop() {
            let reach = closures[idx[a]] | coarse.neighbourhood(closures[idx[a]]);
            for b in 0..idx.len() {
                if !reached[b] && reach & closures[idx[b]] != 0 {
                    reached[b] = true;
                    stack.push(b);
                }
            }
        }
        if reached.iter().all(|r| *r) {
            let w = idx.iter().fold(0, |m, i| m | closures[*i]);
            *out.entry(w).or_default() += idx.iter().map(|i| k[*i].1).product::<Complex64>();
        }
    }
    Ok(out.into_iter().filter(|(_, v)| *v != ZERO).collect())
}

// ---------------------------------------------------------------------------
// Extraction coefficients.

/// What the extraction removes from small sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionPreset {
    /// Constants, `(∂φ)²` and `∂φ ∂²φ`.
    Ir,
    /// Constants only.
    Uv,
}

/// Midpoint nodes per unit side for the integrals inside the extracted activity.
pub const F_QUAD_PTS: usize = 2;

/// Half-width of the line used for finite-difference derivatives of functionals.
const FD_TAU: f64 = 0.05;

/// `Σ_a l_a u_a + Σ_{ab} Q_ab u_a u_b` with `u` the minimal-image offset from `center`.
#[derive(Clone, Copy, Debug)]
pub struct TestField {
    pub torus: TorusSpec,
    pub center: Point,
    pub lin: [f64; MAX_DIM],
    pub quad: [[f64; MAX_DIM]; MAX_DIM],
}

impl TestField {
    pub fn linear(torus: TorusSpec, center: Point, mu: usize) -> Self {
        let mut lin = [0.0; MAX_DIM];
        lin[mu] = 1.0;
        TestField { torus, center, lin, quad: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    /// `u_ν u_ρ`.
    pub fn quadratic(torus: TorusSpec, center: Point, nu: usize, rho: usize) -> Self {
        let mut quad = [[0.0; MAX_DIM]; MAX_DIM];
        quad[nu][rho] += 1.0;
        TestField { torus, center, lin: [0.0; MAX_DIM], quad }
    }

    /// `self + s·other`; both must share the center.
    pub fn plus(&self, s: f64, other: &TestField) -> TestField {
        let mut out = *self;
        for a in 0..MAX_DIM {
            out.lin[a] += s * other.lin[a];
            for b in 0..MAX_DIM {
                out.quad[a][b] += s * other.quad[a][b];
            }
        }
        out
    }

    fn offset(&self, x: &Point) -> Point {
        self.torus.point_delta(x, &self.center)
    }
}

impl Field for TestField {
    fn torus(&self) -> &TorusSpec {
        &self.torus
    }

    fn value(&self, x: &Point) -> f64 {
        let u = self.offset(x);
        let d = self.torus.d;
        let mut v = 0.0;
        for a in 0..d {
            v += self.lin[a] * u[a];
            for b in 0..d {
                v += self.quad[a][b] * u[a] * u[b];
            }
        }
        v
    }

    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        let d = self.torus.d;
        match order(alpha) {
            0 => self.value(x),
            1 => {
                let a = (0..d).find(|k| alpha[*k] == 1).expect("order one index");
                let u = self.offset(x);
                self.lin[a] + (0..d).map(|b| (self.quad[a][b] + self.quad[b][a]) * u[b]).sum::<f64>()
            }
            2 => {
                let idx: Vec<usize> = (0..d).flat_map(|k| std::iter::repeat(k).take(alpha[k] as usize)).collect();
                self.quad[idx[0]][idx[1]] + self.quad[idx[1]][idx[0]]
            }
            _ => 0.0,
        }
    }
}

/// Centroids of the union of the blocks of `X`, one per way of unfolding `X` from its
/// first block through minimal images. Offsets of exactly half the torus side can be
/// unfolded either way; on larger tori the centroid is unique.
pub fn polymer_centroids(torus: &TorusSpec, x: &Polymer) -> Vec<Point> {
    let d = torus.d;
    let half = torus.side() as f64 / 2.0;
    let base = x.blocks()[0].center(d);
    let mut sums: Vec<[f64; MAX_DIM]> = vec![[0.0; MAX_DIM]];
    for b in x.blocks() {
        let delta = torus.point_delta(&b.center(d), &base);
        let mut next = Vec::with_capacity(sums.len());
        for s in &sums {
            let mut options = vec![*s];
            for a in 0..d {
                let flip = (delta[a].abs() - half).abs() < 1e-12;
                let mut grown = Vec::with_capacity(options.len() * 2);
                for o in &options {
                    let mut p = *o;
                    p[a] += delta[a];
                    grown.push(p);
                    if flip {
                        let mut q = *o;
                        q[a] -= delta[a];
                        grown.push(q);
                    }
                }
                options = grown;
            }
            next.extend(options);
        }
        sums = next;
    }
    let mut out: Vec<Point> = Vec::new();
    for s in sums {
        let mut c = base;
        for a in 0..d {
            c[a] += s[a] / x.size() as f64;
        }
        let c = torus.reduce_point(&c);
        if !out.iter().any(|o| torus.point_delta(o, &c)[..d].iter().all(|v| v.abs() < 1e-12)) {
            out.push(c);
        }
    }
    out
}

/// `D²t(0)[f, g]` for one charge-cloud term.
fn term_second_derivative(t: &CloudTerm, f: &dyn Field, g: &dyn Field) -> Complex64 {
    let qf: f64 = t.charges.iter().map(|(q, x)| f64::from(*q) * f.value(x)).sum();
    let qg: f64 = t.charges.iter().map(|(q, x)| f64::from(*q) * g.value(x)).sum();
    let (p0, p1f, p1g, p2) = match &t.poly {
        None => (ONE, ZERO, ZERO, ZERO),
        Some(p) => {
            let p1 = |h: &dyn Field| p.linear.iter().map(|(c, a)| c * a.eval(h)).sum::<Complex64>();
            let p2 = p
                .quadratic
                .iter()
                .map(|(c, a, b)| c * (a.eval(f) * b.eval(g) + a.eval(g) * b.eval(f)))
                .sum::<Complex64>();
            (p.constant, p1(f), p1(g), p2)
        }
    };
    t.coeff * (-(qf * qg) * p0 + I * qf * p1g + I * qg * p1f + p2)
}

/// Derivatives at `φ = 0` of one polymer of an activity against the extraction test
/// functions: the value, `D²[u_μ, u_ν]` (row-major `d × d`) and `D²[u_μ, u_ν u_ρ]`
/// (row-major `d × d × d`).
#[derive(Clone, Debug, Default)]
struct TestDerivatives {
    value: Complex64,
    lin: Vec<Complex64>,
    mixed: Vec<Complex64>,
}

fn test_derivatives(k: &PolymerActivity, x: &Polymer, with_gradients: bool) -> Result<TestDerivatives> {
    let torus = k.torus;
    let d = torus.d;
    let zero = crate::fields::ZeroField(torus);
    let cloud = match &k.repr {
        Representation::Functional { .. } => None,
        _ => Some(k.to_cloud()?.remove(x).unwrap_or_default()),
    };
    let second = |f: &TestField, g: &TestField| -> Complex64 {
        match &cloud {
            Some(ts) => ts.iter().map(|t| term_second_derivative(t, f, g)).sum(),
            None => {
                let p = f.plus(1.0, g);
                let m = f.plus(-1.0, g);
                let dp = line_derivatives(k, x, &zero, &p, 4, FD_TAU)[2];
                let dm = line_derivatives(k, x, &zero, &m, 4, FD_TAU)[2];
                (dp - dm) / 4.0
            }
        }
    };
    let value = match &cloud {
        Some(ts) => ts.iter().map(|t| t.coeff * t.poly.as_ref().map_or(ONE, |p| p.constant)).sum(),
        None => k.eval(x, &zero),
    };
    let mut out = TestDerivatives { value, ..TestDerivatives::default() };
    if !with_gradients {
        return Ok(out);
    }
    out.lin = vec![ZERO; d * d];
    out.mixed = vec![ZERO; d * d * d];
    let centers = polymer_centroids(&torus, x);
    let w = 1.0 / centers.len() as f64;
    for center in centers {
        let lin: Vec<TestField> = (0..d).map(|mu| TestField::linear(torus, center, mu)).collect();
        for mu in 0..d {
            for nu in mu..d {
                let v = w * second(&lin[mu], &lin[nu]);
                out.lin[mu * d + nu] += v;
                if nu != mu {
                    out.lin[nu * d + mu] += v;
                }
            }
        }
        for nu in 0..d {
            for rho in nu..d {
                let quad = TestField::quadratic(torus, center, nu, rho);
                for mu in 0..d {
                    let v = w * second(&lin[mu], &quad);
                    out.mixed[(mu * d + nu) * d + rho] += v;
                    if rho != nu {
                        out.mixed[(mu * d + rho) * d + nu] += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Extraction coefficients of one small polymer.
#[derive(Clone, Debug, Serialize)]
pub struct CoefficientEntry {
    pub polymer: Polymer,
    pub a0: Complex64,
    /// `α_{μν}`, row-major `d × d`.
    pub a2: Vec<f64>,
    /// `α_{μ,νρ}`, row-major `d × d × d`.
    pub a3: Vec<f64>,
}

/// Coefficients of the extracted activity and their lattice sums.
#[derive(Clone, Debug, Serialize)]
pub struct ExtractionCoefficients {
    pub preset: ExtractionPreset,
    pub beta: f64,
    pub torus: TorusSpec,
    pub entries: Vec<CoefficientEntry>,
    /// Block average of `Σ_{X ⊃ Δ} α_0(X)`.
    pub delta_e: Complex64,
    /// `-2β` times the block and direction average of `Σ_{X ⊃ Δ} α_{μμ}(X)`.
    pub delta_sigma: f64,
    /// Largest `|Σ_{X ⊃ Δ} α_{μ,νρ}(X)|`.
    pub mixed_sum: f64,
    /// Largest deviation of `Σ_{X ⊃ Δ} α_{μν}(X)` from `-(2β)^{-1} δσ δ_{μν}`, relative
    /// to the largest such sum.
    pub anisotropy: f64,
    /// Largest imaginary part discarded from the gradient coefficients.
    pub imag_dropped: f64,
}

/// Extraction coefficients of `K̄ = k_0` on small sets: exact for charge clouds, finite
/// differences along polynomial test fields otherwise.
///
/// Fails when the gradient sums are anisotropic beyond `aniso_tol`, since `δσ` is then
/// not defined.
pub fn extraction_coefficients(
    k: &PolymerActivity,
    preset: ExtractionPreset,
    beta: f64,
    aniso_tol: f64,
) -> Result<ExtractionCoefficients> {
    let torus = k.torus;
    let d = torus.d;
    let kbar = charge_component(k, 0, DEFAULT_CHARGE_ORDER)?;
    let grads = preset == ExtractionPreset::Ir;
    let small: Vec<Polymer> = kbar.support().into_iter().filter(|x| is_small(x, &torus)).collect();
    let raw: Vec<(Polymer, TestDerivatives)> = small
        .par_iter()
        .map(|x| test_derivatives(&kbar, x, grads).map(|t| (x.clone(), t)))
        .collect::<Result<_>>()?;
    let mut imag_dropped = 0.0f64;
    let mut entries = Vec::with_capacity(raw.len());
    for (x, t) in raw {
        let n = x.size() as f64;
        let mut a2 = vec![0.0; d * d];
        let mut a3 = vec![0.0; d * d * d];
        if grads {
            for (a, v) in a2.iter_mut().zip(&t.lin) {
                *a = v.re / (2.0 * n);
                imag_dropped = imag_dropped.max(v.im.abs() / (2.0 * n));
            }
            for (a, v) in a3.iter_mut().zip(&t.mixed) {
                *a = v.re / (2.0 * n);
                imag_dropped = imag_dropped.max(v.im.abs() / (2.0 * n));
            }
        }
        entries.push(CoefficientEntry { polymer: x, a0: t.value / n, a2, a3 });
    }
    let mut out = ExtractionCoefficients {
        preset,
        beta,
        torus,
        entries,
        delta_e: ZERO,
        delta_sigma: 0.0,
        mixed_sum: 0.0,
        anisotropy: 0.0,
        imag_dropped,
    };
    out.lattice_sums();
    if out.anisotropy > aniso_tol {
        return Err(Error::Tolerance(format!(
            "gradient coefficient sums are anisotropic: relative deviation {:.3e} exceeds {aniso_tol:.1e}",
            out.anisotropy
        )));
    }
    Ok(out)
}

impl ExtractionCoefficients {
    /// Coefficients of the zero activity.
    pub fn zero(torus: TorusSpec, preset: ExtractionPreset, beta: f64) -> Self {
        ExtractionCoefficients {
            preset,
            beta,
            torus,
            entries: Vec::new(),
            delta_e: ZERO,
            delta_sigma: 0.0,
            mixed_sum: 0.0,
            anisotropy: 0.0,
            imag_dropped: 0.0,
        }
    }

    fn lattice_sums(&mut self) {
        let d = self.torus.d;
        let blocks = self.torus.all_blocks();
        let index: HashMap<_, usize> = blocks.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        let mut s0 = vec![ZERO; blocks.len()];
        let mut s2 = vec![vec![0.0; d * d]; blocks.len()];
        let mut s3 = vec![vec![0.0; d * d * d]; blocks.len()];
        for e in &self.entries {
            for b in e.polymer.blocks() {
                let i = index[b];
                s0[i] += e.a0;
                s2[i].iter_mut().zip(&e.a2).for_each(|(s, a)| *s += a);
                s3[i].iter_mut().zip(&e.a3).for_each(|(s, a)| *s += a);
            }
        }
        let nb = blocks.len() as f64;
        self.delta_e = s0.iter().sum::<Complex64>() / nb;
        let trace = s2.iter().map(|s| (0..d).map(|mu| s[mu * d + mu]).sum::<f64>()).sum::<f64>() / (nb * d as f64);
        self.delta_sigma = -2.0 * self.beta * trace;
        let scale = s2.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = s2
            .iter()
            .flat_map(|s| {
                (0..d * d).map(move |k| {
                    let target = if k / d == k % d { trace } else { 0.0 };
                    (s[k] - target).abs()
                })
            })
            .fold(0.0f64, f64::max);
        self.anisotropy = if scale > 0.0 { dev / scale } else { 0.0 };
        self.mixed_sum = s3.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.a0 == ZERO && e.a2.iter().chain(&e.a3).all(|v| *v == 0.0))
    }

    /// The extracted activity `F(X, φ) = Σ_{Δ ⊂ X} F(X, Δ, φ)`.
    pub fn activity(&self) -> PolymerActivity {
        let flags = ActivityFlags { even: true, periodic: true, neutral: true };
        match self.preset {
            ExtractionPreset::Ir => {
                let entries = self
                    .entries
                    .iter()
                    .map(|e| {
                        let t = TruncatedEntry { a0: e.a0, a2: e.a2.clone(), a3: e.a3.clone(), charges: Vec::new() };
                        (e.polymer.clone(), t)
                    })
                    .collect();
                PolymerActivity {
                    torus: self.torus,
                    flags,
                    repr: Representation::Truncated { entries, quad_pts: F_QUAD_PTS },
                }
            }
            ExtractionPreset::Uv => {
                let terms = self
                    .entries
                    .iter()
                    .map(|e| (e.polymer.clone(), vec![CloudTerm::constant(e.a0 * e.polymer.size() as f64)]))
                    .collect();
                PolymerActivity::cloud(self.torus, terms, flags)
            }
        }
    }

    /// `‖α(X)‖_a = |α_0| + a² (Σ|α_{μν}| + Σ|α_{μ,νρ}|)` per entry.
    pub fn alpha_norms(&self, a: f64) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.a0.norm() + a * a * e.a2.iter().chain(&e.a3).map(|v| v.abs()).sum::<f64>())
            .collect()
    }

    /// Stability constants `40 k ‖α(X)‖_a`, with `k` the number of small sets containing
    /// a block.
    pub fn stability_constants(&self, a: f64) -> Result<Vec<f64>> {
        let k = count_small_supersets(&self.torus, crate::lattice::Block::origin())? as f64;
        Ok(self.alpha_norms(a).into_iter().map(|v| 40.0 * k * v).collect())
    }

    /// `max_Δ Σ_{X ∋ Δ} Γ(X) c(X)` for per-entry constants `c`.
    pub fn weighted_sum(&self, c: &[f64], gamma: &SetRegulatorParams) -> f64 {
        let mut by_block: HashMap<crate::lattice::Block, f64> = HashMap::new();
        for (e, v) in self.entries.iter().zip(c) {
            let g = gamma_p(&e.polymer, &self.torus, gamma);
            for b in e.polymer.blocks() {
                *by_block.entry(*b).or_default() += g * v;
            }
        }
        by_block.values().copied().fold(0.0, f64::max)
    }
}

/// Largest violation of the conditions that define `F`: `|(K̄ - F)(X, 0)|` on small
/// sets and, for the infrared preset, `|(K̄ - F)_2(X, 0; u_μ, u_ν)|` and
/// `|(K̄ - F)_2(X, 0; u_μ, u_ν u_ρ)|`.
pub fn vanishing_defect(k: &PolymerActivity, coeffs: &ExtractionCoefficients) -> Result<f64> {
    let torus = k.torus;
    let kbar = charge_component(k, 0, DEFAULT_CHARGE_ORDER)?;
    let diff = extract_linear(&kbar, &coeffs.activity())?;
    let grads = coeffs.preset == ExtractionPreset::Ir;
    let small: Vec<Polymer> = diff.support().into_iter().filter(|x| is_small(x, &torus)).collect();
    let worst = small
        .par_iter()
        .map(|x| {
            test_derivatives(&diff, x, grads).map(|t| {
                std::iter::once(t.value).chain(t.lin).chain(t.mixed).map(|v| v.norm()).fold(0.0, f64::max)
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Charge sectors.

/// One-step factors of a charge-`q` sector.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChargeFactors {
    pub q: i32,
    /// `m_q = exp(-(|q| - 1/2) C(0))`.
    pub m_q: f64,
    /// The analyticity loss `N_C`.
    pub n_c: f64,
    /// `e^{η h |q|}`.
    pub gain: f64,
    /// `L^d e^{2 N_C |q|} m_q`.
    pub combined: f64,
}

/// Charged-sector factors for covariance `C(0) = c0` (including `β`).
pub fn charge_factors(q: i32, c0: f64, n_c: f64, h: f64, eta: f64, l: u32, d: usize) -> Result<ChargeFactors> {
    if q == 0 {
        return Err(Error::param("q", "charged sectors only"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param("eta", "need 0 <= eta <= 1"));
    }
    let aq = f64::from(q.abs());
    let m_q = (-(aq - 0.5) * c0).exp();
    Ok(ChargeFactors {
        q,
        m_q,
        n_c,
        gain: (eta * h * aq).exp(),
        combined: f64::from(l).powi(d as i32) * (2.0 * n_c * aq).exp() * m_q,
    })
}

/// `Σ_{q ≠ 0} m_q = 2 e^{-C(0)/2} / (1 - e^{-C(0)})`.
pub fn charged_factor_sum(c0: f64) -> f64 {
    2.0 * (-0.5 * c0).exp() / (1.0 - (-c0).exp())
}

// ---------------------------------------------------------------------------
// The composed step.

/// Contour settings for splitting `ℛ(K, F)` into its linear part and remainder.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CauchyOptions {
    /// Radius `D` of the circle `|s| = D`.
    pub radius: f64,
    pub nodes: usize,
    /// Number of `(X, φ)` probes.
    pub probes: usize,
    pub seed: u64,
}

impl CauchyOptions {
    /// `D = L^4`.
    pub fn ir(l: u32) -> Self {
        CauchyOptions { radius: f64::from(l).powi(4), nodes: 24, probes: 3, seed: 11 }
    }

    /// `D = |ζ|^{-1+2ε}`.
    pub fn uv(zeta: f64, eps: f64) -> Self {
        CauchyOptions { radius: zeta.abs().powf(-1.0 + 2.0 * eps).max(2.0), nodes: 24, probes: 3, seed: 11 }
    }
}

/// Settings of one step `K ↦ 𝒮(ℰ(ℱK, F(ℱK)))` on a small torus.
#[derive(Clone, Debug)]
pub struct RgStepParams {
    pub beta: f64,
    /// Slice covariance on the fine torus, including `β`.
    pub covariance: CovarianceKernel,
    pub fine: MaskTorus,
    pub coarse: MaskTorus,
    pub preset: ExtractionPreset,
    /// Largest number of polymers per collection in the fluctuation tree sum.
    pub n_max: usize,
    /// Largest polymer produced by the extraction and scaling maps.
    pub max_size: usize,
    /// Norm at the current scale.
    pub norm: ActivityNorm,
    pub delta_h: f64,
    pub delta_kappa: f64,
    /// Bound on `κ c^{-1} L²` and on the stability sums.
    pub smallness: f64,
    pub aniso_tol: f64,
    /// Turn failed hypotheses into errors.
    pub enforce: bool,
    pub cauchy: Option<CauchyOptions>,
    /// Measure the four-term split of the step.
    pub four_terms: bool,
}

impl RgStepParams {
    /// Defaults for a step from `fine` to its coarser torus with field strength `sigma`.
    pub fn new(beta: f64, sigma: f64, fine: TorusSpec, preset: ExtractionPreset, norm: ActivityNorm) -> Result<Self> {
        let coarse = fine.coarser()?;
        let cap = crate::lattice::EnumerationCap::default();
        let fine_mt = MaskTorus::new(fine, cap)?;
        Ok(RgStepParams {
            beta,
            covariance: CovarianceKernel::slice(fine, sigma)?.scaled(beta),
            n_max: default_n_max(&fine),
            fine: fine_mt,
            coarse: MaskTorus::new(coarse, cap)?,
            preset,
            max_size: MAX_REGION_BLOCKS,
            norm,
            delta_h: 0.5 * norm.h,
            delta_kappa: 0.5 * norm.reg.kappa,
            smallness: 0.1,
            aniso_tol: 1e-8,
            enforce: true,
            cauchy: None,
            four_terms: false,
        })
    }
}

/// The full tree sum on tori with at most 16 blocks, else three polymers.
pub fn default_n_max(torus: &TorusSpec) -> usize {
    if torus.n_blocks() <= 16 {
        torus.n_blocks() as usize
    } else {
        3
    }
}

/// One numerically checked hypothesis of the step.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Linear part and remainder of `s ↦ ℛ(sK, sF)(X, φ)` at one probe.
#[derive(Clone, Debug, Serialize)]
pub struct CauchyProbe {
    pub polymer: Polymer,
    /// `ℛ(K, F)(X, φ)`.
    pub full: Complex64,
    /// Linear coefficient from the contour.
    pub linear_contour: Complex64,
    /// `𝒮₁(ℱ₁K - F)(X, φ)` computed directly.
    pub linear_direct: Complex64,
    /// Remainder `ℛ_{≥2}` from the contour integral with kernel `1/(s²(s-1))`.
    pub higher_contour: Complex64,
}

/// Norms of the four pieces of the next activity: remainder, large sets, charged and
/// neutral small-set sectors.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FourTermNorms {
    pub higher_order: NormReport,
    pub large: NormReport,
    pub charged: NormReport,
    pub neutral: NormReport,
}

/// Diagnostics of one step.
#[derive(Clone, Debug, Serialize)]
pub struct StepDiagnostics {
    pub hypotheses: Vec<HypothesisCheck>,
    pub input_norm: NormReport,
    pub vanishing_defect: f64,
    pub cauchy: Vec<CauchyProbe>,
    /// `D^{-1} L^d`, the predicted size of the remainder relative to the input.
    pub higher_order_prediction: Option<f64>,
    pub four_terms: Option<FourTermNorms>,
}

/// Output of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub next: PolymerActivity,
    pub coefficients: ExtractionCoefficients,
    pub diagnostics: StepDiagnostics,
}

/// The hypotheses of the composed step for input `k` and extracted coefficients.
pub fn check_hypotheses(
    k: &PolymerActivity,
    coeffs: &ExtractionCoefficients,
    p: &RgStepParams,
) -> Result<(Vec<HypothesisCheck>, NormReport)> {
    let torus = k.torus;
    let reg = &p.norm.reg;
    let l = f64::from(torus.l);
    let knorm = activity_norm(k, &p.norm)?;
    let cstar = star_norm(&p.covariance, &BlockNormConfig::default(), 3).value;
    let gamma = ball_count_gamma(torus.d, 8);
    let a = reg.kappa.powf(-0.5).max(p.norm.h);
    let da = p.delta_kappa.powf(-0.5).max(p.norm.h);
    let f = coeffs.weighted_sum(&coeffs.stability_constants(a)?, &p.norm.gamma.with_shift(-1));
    let df = coeffs.weighted_sum(&coeffs.stability_constants(da)?, &p.norm.gamma.with_shift(-3));
    let check = |name, value: f64, bound: f64, passed: bool| HypothesisCheck { name, value, bound, passed };
    Ok((
        vec![
            check("delta_h", p.delta_h, p.norm.h, p.delta_h < p.norm.h),
            check("kappa_scale", reg.kappa / reg.c * l * l, p.smallness, reg.kappa / reg.c * l * l <= p.smallness),
            {
                let need = 8.0 * gamma * gamma * cstar * knorm.value;
                check("delta_h_squared", p.delta_h * p.delta_h, need, p.delta_h * p.delta_h >= need)
            },
            check("stability", f, p.smallness, f <= p.smallness),
            check("stability_delta", df, p.smallness, df <= p.smallness),
        ],
        knorm,
    ))
}

/// `s·K` for a charge cloud or truncated activity.
fn scale_cloud(k: &PolymerActivity, s: Complex64) -> Result<PolymerActivity> {
    let terms = k
        .to_cloud()?
        .into_iter()
        .map(|(x, ts)| {
            let ts = ts
                .into_iter()
                .map(|mut t| {
                    t.coeff *= s;
                    t
                })
                .collect();
            (x, ts)
        })
        .collect();
    Ok(PolymerActivity::cloud(k.torus, terms, k.flags))
}

/// `ℛ(sK, sF)(X, φ)` at one coarse polymer.
fn step_value(k: &PolymerActivity, f: &PolymerActivity, s: Complex64, p: &RgStepParams, x: &Polymer, phi: &dyn Field) -> Result<Complex64> {
    let ks = fluctuate(&scale_cloud(k, s)?, &p.covariance, &p.fine, p.n_max)?;
    let e = extract(&ks, &scale_cloud(f, s)?, &p.fine, p.max_size)?;
    let m = p.coarse.mask_of(x);
    Ok(scaling_values(&e, &p.fine, &p.coarse, m, phi)?.into_iter().find(|(w, _)| *w == m).map_or(ZERO, |(_, v)| v))
}

/// `ℛ₁(K) = 𝒮₁(ℱ₁K - F(ℱ₁K))` with its coefficients.
pub fn linear_step(k: &PolymerActivity, p: &RgStepParams) -> Result<(PolymerActivity, ExtractionCoefficients)> {
    let f1 = fluctuate_linear(k, &p.covariance, McOptions::default())?;
    let coeffs = extraction_coefficients(&f1, p.preset, p.beta, p.aniso_tol)?;
    let next = scale_linear(&extract_linear(&f1, &coeffs.activity())?)?;
    Ok((next, coeffs))
}

/// The part of a charge cloud on polymers and charges selected by `keep`.
pub fn restrict_cloud(k: &PolymerActivity, keep: impl Fn(&Polymer, i32) -> bool) -> Result<PolymerActivity> {
    let terms = k
        .to_cloud()?
        .into_iter()
        .filter_map(|(x, ts)| {
            let kept: Vec<CloudTerm> = ts.into_iter().filter(|t| keep(&x, t.total_charge())).collect();
            (!kept.is_empty()).then_some((x, kept))
        })
        .collect();
    Ok(PolymerActivity::cloud(k.torus, terms, k.flags))
}

/// One step `K' = 𝒮(ℰ(ℱK, F(ℱK)))` for a charge cloud `K` on the fine torus, with the
/// hypotheses checked and the requested diagnostics.
pub fn rg_step(k: &PolymerActivity, p: &RgStepParams) -> Result<StepOutput> {
    if k.torus != p.fine.torus {
        return Err(Error::param("torus", "activity must live on the fine torus of the step"));
    }
    let kf = fluctuate(k, &p.covariance, &p.fine, p.n_max)?;
    let coefficients = extraction_coefficients(&kf, p.preset, p.beta, p.aniso_tol)?;
    let (hypotheses, input_norm) = check_hypotheses(k, &coefficients, p)?;
    if p.enforce {
        if let Some(h) = hypotheses.iter().find(|h| !h.passed) {
            return Err(Error::Hypothesis {
                name: h.name,
                detail: format!("measured {:.4e} against bound {:.4e}", h.value, h.bound),
            });
        }
    }
    let f = coefficients.activity();
    let vanishing_defect = vanishing_defect(&kf, &coefficients)?;
    let next = scale_activity(&extract(&kf, &f, &p.fine, p.max_size)?, &p.fine, &p.coarse, p.max_size)?;

    let mut cauchy = Vec::new();
    let mut higher_order_prediction = None;
    if let Some(opts) = p.cauchy {
        let l = f64::from(k.torus.l);
        higher_order_prediction = Some(l.powi(k.torus.d as i32) / opts.radius);
        let direct = scale_linear(&extract_linear(&fluctuate_linear(k, &p.covariance, McOptions::default())?, &f)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut probes: Vec<Polymer> = next.support().into_iter().filter(|x| is_small(x, &p.coarse.torus)).collect();
        probes.truncate(opts.probes);
        let nodes: Vec<Complex64> = (0..opts.nodes)
            .map(|j| Complex64::from_polar(opts.radius, 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / opts.nodes as f64))
            .collect();
        for x in probes {
            let phi = AnalyticField::random(p.coarse.torus, 2, 1.5, 0.5, &mut rng);
            let g: Vec<Complex64> = nodes.iter().map(|s| step_value(k, &f, *s, p, &x, &phi)).collect::<Result<_>>()?;
            let n = opts.nodes as f64;
            let linear_contour = nodes.iter().zip(&g).map(|(s, v)| v / s).sum::<Complex64>() / n;
            let higher_contour = nodes.iter().zip(&g).map(|(s, v)| v / (s * (s - 1.0))).sum::<Complex64>() / n;
            cauchy.push(CauchyProbe {
                full: next.eval(&x, &phi),
                linear_direct: direct.eval(&x, &phi),
                linear_contour,
                higher_contour,
                polymer: x,
            });
        }
    }

    let four_terms = if p.four_terms {
        let torus = k.torus;
        let next_norm = ActivityNorm { gamma: SetRegulatorParams::standard(&p.coarse.torus), ..p.norm };
        let large = restrict_cloud(k, |x, _| !is_small(x, &torus))?;
        let charged = restrict_cloud(k, |x, q| is_small(x, &torus) && q != 0)?;
        let neutral = restrict_cloud(k, |x, q| is_small(x, &torus) && q == 0)?;
        let r1 = linear_step(k, p)?.0;
        let rest = next.combine(ONE, &r1, -ONE);
        Some(FourTermNorms {
            higher_order: activity_norm(&rest, &next_norm)?,
            large: activity_norm(&linear_step(&large, p)?.0, &next_norm)?,
            charged: activity_norm(&linear_step(&charged, p)?.0, &next_norm)?,
            neutral: activity_norm(&linear_step(&neutral, p)?.0, &next_norm)?,
        })
    } else {
        None
    };

    Ok(StepOutput {
        next,
        coefficients,
        diagnostics: StepDiagnostics { hypotheses, input_norm, vanishing_defect, cauchy, higher_order_prediction, four_terms },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activities::{mayer_cloud, potential_activity, polymer_exp, VQuadrature};
    use crate::lattice::{Block, EnumerationCap};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn mt(l: u32, m: u32) -> MaskTorus {
        MaskTorus::new(TorusSpec::plane(l, m).unwrap(), EnumerationCap::default()).unwrap()
    }

    fn rand_field(t: TorusSpec, seed: u64) -> AnalyticField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AnalyticField::random(t, 3, 2.0, 1.0, &mut rng)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn mayer(m: &MaskTorus, zeta: f64, max_size: usize) -> PolymerActivity {
        mayer_cloud(c(zeta), m, max_size, VQuadrature { m: 1 }, 2, 1e-16).unwrap()
    }

    /// Random pure terms with charges ±1 at random points of the given polymers.
    fn random_cloud(t: TorusSpec, polymers: &[Polymer], seed: u64) -> PolymerActivity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = t.d;
        let mut terms = BTreeMap::new();
        for x in polymers {
            let ts: Vec<CloudTerm> = (0..2)
                .map(|_| {
                    let n = rng.gen_range(1..=2);
                    let charges = (0..n)
                        .map(|_| {
                            let b = x.blocks()[rng.gen_range(0..x.size())];
                            let mut p = [0.0; MAX_DIM];
                            for a in 0..d {
                                p[a] = b.0[a] as f64 + rng.gen::<f64>();
                            }
                            (if rng.gen::<bool>() { 1 } else { -1 }, p)
                        })
                        .collect();
                    CloudTerm::pure(Complex64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)), charges)
                })
                .collect();
            terms.insert(x.clone(), ts);
        }
        PolymerActivity::cloud(t, terms, ActivityFlags::default())
    }

    fn table_value(vals: &[(u64, Complex64)], m: u64) -> Complex64 {
        vals.iter().find(|(w, _)| *w == m).map_or(ZERO, |(_, v)| *v)
    }

    fn assert_tables_close(a: &[(u64, Complex64)], b: &[(u64, Complex64)], tol: f64) {
        let masks: BTreeSet<u64> = a.iter().chain(b).map(|e| e.0).collect();
        for m in masks {
            let (x, y) = (table_value(a, m), table_value(b, m));
            assert!((x - y).norm() <= tol * (1.0 + x.norm()), "mask {m:b}: {x} vs {y}");
        }
    }

    #[test]
    fn region_log_inverts_exp() {
        let m = mt(3, 1);
        let region = Region::new(&m, 0b1_0110_1011).unwrap();
        let vals: Vec<(u64, Complex64)> = vec![(0b1, c(0.2)), (0b10, c(-0.1)), (0b11, Complex64::new(0.05, 0.1)), (0b11000, c(0.3))];
        let e = region.exp_table(&vals);
        let l = nonzero(&region.log_table(&e));
        assert_tables_close(&l, &vals, 1e-13);
    }

    #[test]
    fn subset_transforms_invert() {
        let mut t: Vec<Complex64> = (0..32).map(|i| Complex64::new(i as f64 * 0.1, -(i as f64))).collect();
        let orig = t.clone();
        subset_sum(&mut t);
        subset_difference(&mut t);
        for (a, b) in t.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_activity_is_fixed_by_every_map() {
        let m = mt(2, 2);
        let zero = PolymerActivity::zero(m.torus);
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(4.0);
        assert!(fluctuate(&zero, &cov, &m, 3).unwrap().support().is_empty());
        let phi = rand_field(m.torus, 1);
        assert!(extraction_values(&zero, &zero, &m, 0xffff, &phi).unwrap().is_empty());
        assert!(scale_linear(&zero).unwrap().support().is_empty());
        let coarse = MaskTorus::new(m.torus.coarser().unwrap(), EnumerationCap::default()).unwrap();
        assert!(scaling_values(&zero, &m, &coarse, coarse.full(), &phi).unwrap().is_empty());
    }

    #[test]
    fn fluctuation_identity_on_two_by_two() {
        let m = mt(2, 1);
        let k = mayer(&m, 0.4, 4);
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(2.0);
        let fk = fluctuate(&k, &cov, &m, 4).unwrap();
        let full = m.polymer_of(m.full()).unwrap();
        for s in 0..5 {
            let phi = rand_field(m.torus, 10 + s);
            let lhs = fluctuation_oracle(&k, &cov, &m, &phi).unwrap();
            let rhs = polymer_exp(&fk, &full, &phi, &m).unwrap();
            assert!((lhs - rhs).norm() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn fluctuation_identity_with_trees_on_four_by_four() {
        let m = mt(2, 2);
        let t = m.torus;
        let polymers: Vec<Polymer> = [(0, 0), (2, 0), (0, 2), (2, 2), (1, 3)]
            .iter()
            .map(|(x, y)| Polymer::single(&t, Block::at(*x, *y)))
            .chain(std::iter::once(Polymer::new(&t, [Block::at(3, 1), Block::at(3, 2)]).unwrap()))
            .collect();
        let k = random_cloud(t, &polymers, 5);
        let cov = CovarianceKernel::slice(t, 0.0).unwrap().scaled(1.5);
        let fk = fluctuate(&k, &cov, &m, 6).unwrap();
        assert!(fk.support().iter().any(|x| x.size() > 2), "tree terms on unions are present");
        let full = m.polymer_of(m.full()).unwrap();
        for s in 0..3 {
            let phi = rand_field(t, 20 + s);
            let lhs = fluctuation_oracle(&k, &cov, &m, &phi).unwrap();
            let rhs = polymer_exp(&fk, &full, &phi, &m).unwrap();
            assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn single_polymer_fluctuation_is_convolution() {
        let m = mt(2, 2);
        let x = Polymer::new(&m.torus, [Block::at(0, 0), Block::at(1, 0)]).unwrap();
        let k = random_cloud(m.torus, std::slice::from_ref(&x), 3);
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(3.0);
        let fk = fluctuate(&k, &cov, &m, 4).unwrap();
        let lin = fluctuate_linear(&k, &cov, McOptions::default()).unwrap();
        let phi = rand_field(m.torus, 4);
        assert_eq!(fk.support(), vec![x.clone()]);
        assert_relative_eq!(fk.eval(&x, &phi).re, lin.eval(&x, &phi).re, epsilon = 1e-14);
    }

    #[test]
    fn linear_fluctuation_of_potential() {
        let m = mt(2, 2);
        let beta = 8.0;
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(beta);
        let v = potential_activity(m.torus, c(0.1), VQuadrature::default());
        let fv = fluctuate_linear(&v, &cov, McOptions::default()).unwrap();
        let factor = (-0.5 * cov.at_zero()).exp();
        let phi = rand_field(m.torus, 2);
        for x in v.support() {
            assert_relative_eq!(fv.eval(&x, &phi).re, factor * v.eval(&x, &phi).re, max_relative = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_convolution_matches_exact() {
        let m = mt(2, 2);
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(2.0);
        let v = potential_activity(m.torus, c(0.1), VQuadrature::default());
        let exact = fluctuate_linear(&v, &cov, McOptions::default()).unwrap();
        let mc = fluctuate_linear(&v.to_functional(), &cov, McOptions { samples: 6000, seed: 3, rel_tol: 0.05 }).unwrap();
        let phi = rand_field(m.torus, 9);
        let x = Polymer::single(&m.torus, Block::at(1, 1));
        let (a, b) = (exact.eval(&x, &phi), mc.eval(&x, &phi));
        assert!((a - b).norm() < 0.05 * v.eval(&x, &phi).norm().max(0.02), "{a} vs {b}");
    }

    #[test]
    fn extraction_table_matches_brute_force() {
        let m = mt(3, 1);
        let t = m.torus;
        let kp = [
            Polymer::single(&t, Block::at(0, 0)),
            Polymer::new(&t, [Block::at(1, 1), Block::at(1, 2)]).unwrap(),
            Polymer::single(&t, Block::at(2, 0)),
        ];
        let fp = [Polymer::single(&t, Block::at(0, 0)), Polymer::single(&t, Block::at(1, 2)), Polymer::single(&t, Block::at(2, 2))];
        let k = random_cloud(t, &kp, 1);
        let f = random_cloud(t, &fp, 2);
        let phi = rand_field(t, 3);
        let kv: Vec<(u64, Complex64)> = kp.iter().map(|x| (m.mask_of(x), k.eval(x, &phi))).collect();
        let fv: Vec<(u64, Complex64)> = fp.iter().map(|x| (m.mask_of(x), f.eval(x, &phi))).collect();
        let table = extraction_values(&k, &f, &m, m.full(), &phi).unwrap();
        assert_tables_close(&table, &extraction_brute(&m, &kv, &fv), 1e-12);
    }

    #[test]
    fn extraction_identity_on_three_by_three() {
        let m = mt(3, 1);
        let k = mayer(&m, 0.3, 2);
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(6.0);
        let k = fluctuate_linear(&k, &cov, McOptions::default()).unwrap();
        let coeffs = extraction_coefficients(&k, ExtractionPreset::Ir, 6.0, 1e-8).unwrap();
        let f = coeffs.activity();
        for s in 0..4 {
            let phi = rand_field(m.torus, 30 + s);
            let lhs = MaskActivity::from_activity(&m, &k, m.full(), &phi).exp(m.full()).unwrap();
            let e = extraction_values(&k, &f, &m, m.full(), &phi).unwrap();
            let sum_f: Complex64 = f.support().iter().map(|x| f.eval(x, &phi)).sum();
            let rhs = sum_f.exp() * MaskActivity::new(&m, e).exp(m.full()).unwrap();
            assert!((lhs - rhs).norm() < 1e-10 * lhs.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn extraction_with_zero_f_is_identity() {
        let m = mt(3, 1);
        let k = mayer(&m, 0.3, 2);
        let phi = rand_field(m.torus, 5);
        let zero = PolymerActivity::zero(m.torus);
        let e = extraction_values(&k, &zero, &m, m.full(), &phi).unwrap();
        let direct: Vec<(u64, Complex64)> = k.support().iter().map(|x| (m.mask_of(x), k.eval(x, &phi))).collect();
        assert_tables_close(&e, &direct, 1e-12);
    }

    #[test]
    fn scaling_matches_brute_force_and_identity() {
        for mm in [1, 2] {
            let fine = mt(2, mm);
            let coarse = MaskTorus::new(fine.torus.coarser().unwrap(), EnumerationCap::default()).unwrap();
            let t = fine.torus;
            let polys: Vec<Polymer> = if mm == 1 {
                vec![Polymer::single(&t, Block::at(0, 0)), Polymer::new(&t, [Block::at(0, 1), Block::at(1, 1)]).unwrap()]
            } else {
                vec![
                    Polymer::single(&t, Block::at(0, 0)),
                    Polymer::single(&t, Block::at(2, 1)),
                    Polymer::new(&t, [Block::at(1, 3), Block::at(2, 3)]).unwrap(),
                    Polymer::single(&t, Block::at(0, 2)),
                ]
            };
            let k = random_cloud(t, &polys, 8);
            let phi = rand_field(coarse.torus, 6);
            let phi_l = ScaledField::new(&phi);
            let kv: Vec<(u64, Complex64)> = polys.iter().map(|x| (fine.mask_of(x), k.eval(x, &phi_l))).collect();
            let s = scaling_values(&k, &fine, &coarse, coarse.full(), &phi).unwrap();
            assert_tables_close(&s, &scaling_brute(&fine, &coarse, &kv).unwrap(), 1e-12);
            let lhs = MaskActivity::new(&fine, kv).exp(fine.full()).unwrap();
            let rhs = MaskActivity::new(&coarse, s).exp(coarse.full()).unwrap();
            assert!((lhs - rhs).norm() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn linear_scaling_of_potential() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let v = potential_activity(t, c(0.1), VQuadrature { m: 1 });
        let sv = scale_linear(&v).unwrap();
        let coarse = t.coarser().unwrap();
        let target = potential_activity(coarse, c(0.1 * 4.0), VQuadrature { m: 2 });
        let phi = rand_field(coarse, 7);
        for x in target.support() {
            assert_relative_eq!(sv.eval(&x, &phi).re, target.eval(&x, &phi).re, max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_square_gives_field_strength_shift() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let (eps, beta) = (0.03, 5.0);
        let entries = t
            .all_blocks()
            .into_iter()
            .map(|b| {
                let e = TruncatedEntry { a0: ZERO, a2: vec![eps, 0.0, 0.0, eps], a3: vec![0.0; 8], charges: vec![] };
                (Polymer::single(&t, b), e)
            })
            .collect();
        let flags = ActivityFlags { even: true, periodic: true, neutral: true };
        let k = PolymerActivity { torus: t, flags, repr: Representation::Truncated { entries, quad_pts: 3 } };
        let co = extraction_coefficients(&k, ExtractionPreset::Ir, beta, 1e-8).unwrap();
        assert_relative_eq!(co.delta_sigma, -2.0 * beta * eps, max_relative = 1e-12);
        assert!(co.delta_e.norm() < 1e-15);
        let fun = extraction_coefficients(&k.to_functional(), ExtractionPreset::Ir, beta, 1e-6).unwrap();
        assert_relative_eq!(fun.delta_sigma, -2.0 * beta * eps, max_relative = 1e-7);
    }

    #[test]
    fn potential_has_no_extraction() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let v = potential_activity(t, c(0.2), VQuadrature::default());
        let co = extraction_coefficients(&v, ExtractionPreset::Ir, 8.0, 1e-8).unwrap();
        assert!(co.is_zero());
    }

    #[test]
    fn extracted_activity_removes_low_order_terms() {
        let m = mt(2, 2);
        let beta = 12.0;
        let cov = CovarianceKernel::slice(m.torus, 0.0).unwrap().scaled(beta);
        let k = fluctuate(&mayer(&m, 0.2, 2), &cov, &m, 3).unwrap();
        let co = extraction_coefficients(&k, ExtractionPreset::Ir, beta, 1e-8).unwrap();
        assert!(co.delta_sigma != 0.0 && co.delta_e.norm() > 0.0);
        assert!(co.mixed_sum < 1e-12, "mixed sum {}", co.mixed_sum);
        assert!(vanishing_defect(&k, &co).unwrap() < 1e-10);
        let uv = extraction_coefficients(&k, ExtractionPreset::Uv, beta, 1e-8).unwrap();
        assert_relative_eq!(uv.delta_e.re, co.delta_e.re, max_relative = 1e-14);
        assert!(vanishing_defect(&k, &uv).unwrap() < 1e-12);
    }

    #[test]
    fn charge_factor_values() {
        let c0 = 4.0 * (2f64).ln() / (2.0 * std::f64::consts::PI) * 12.0;
        let f1 = charge_factors(1, c0, 0.1, 1.0, 0.2, 2, 2).unwrap();
        assert_relative_eq!(f1.m_q, (-0.5 * c0).exp(), max_relative = 1e-15);
        let direct: f64 = (1..60).map(|q| 2.0 * charge_factors(q, c0, 0.0, 1.0, 0.0, 2, 2).unwrap().m_q).sum();
        assert_relative_eq!(charged_factor_sum(c0), direct, max_relative = 1e-12);
        assert!(charge_factors(0, c0, 0.1, 1.0, 0.2, 2, 2).is_err());
        assert!(charge_factors(1, c0, 0.1, 1.0, 1.5, 2, 2).is_err());
    }

    fn step_params(t: TorusSpec, beta: f64, preset: ExtractionPreset) -> RgStepParams {
        let reg = RegulatorParams::uv(0.01, 0.05, 1.0, 1.0);
        let norm = ActivityNorm::new(reg, 1.0, SetRegulatorParams::standard(&t));
        let mut p = RgStepParams::new(beta, 0.0, t, preset, norm).unwrap();
        p.enforce = false;
        p
    }

    use crate::fields::RegulatorParams;

    #[test]
    fn step_of_zero_is_zero() {
        let t = TorusSpec::plane(2, 1).unwrap();
        let p = step_params(t, 8.0, ExtractionPreset::Ir);
        let out = rg_step(&PolymerActivity::zero(t), &p).unwrap();
        assert!(out.coefficients.is_zero());
        assert_eq!(out.coefficients.delta_sigma, 0.0);
        let phi = rand_field(p.coarse.torus, 1);
        assert!(out.next.support().iter().all(|x| out.next.eval(x, &phi).norm() == 0.0));
    }

    #[test]
    fn step_contour_split_matches_linearization() {
        let t = TorusSpec::plane(2, 1).unwrap();
        let mut p = step_params(t, 4.0 * std::f64::consts::PI, ExtractionPreset::Uv);
        p.cauchy = Some(CauchyOptions { radius: 4.0, nodes: 32, probes: 1, seed: 2 });
        let m = mt(2, 1);
        let k = mayer(&m, 0.02, 4);
        let out = rg_step(&k, &p).unwrap();
        let probe = &out.diagnostics.cauchy[0];
        assert!((probe.linear_contour - probe.linear_direct).norm() < 1e-9 * probe.linear_direct.norm());
        let split = probe.linear_contour + probe.higher_contour;
        assert!((split - probe.full).norm() < 1e-9 * probe.full.norm());
        assert!(probe.higher_contour.norm() < 0.1 * probe.full.norm());
    }

    #[test]
    fn failed_hypothesis_is_named() {
        let t = TorusSpec::plane(2, 1).unwrap();
        let mut p = step_params(t, 8.0, ExtractionPreset::Uv);
        p.enforce = true;
        p.delta_h = 2.0;
        let m = mt(2, 1);
        match rg_step(&mayer(&m, 0.02, 4), &p) {
            Err(Error::Hypothesis { name, .. }) => assert_eq!(name, "delta_h"),
            other => panic!("expected a hypothesis error, got {other:?}"),
        }
    }

    #[test]
    fn step_preserves_symmetries() {
        let t = TorusSpec::plane(2, 1).unwrap();
        let p = step_params(t, 8.0, ExtractionPreset::Ir);
        let m = mt(2, 1);
        let out = rg_step(&mayer(&m, 0.05, 4), &p).unwrap();
        let phi = rand_field(p.coarse.torus, 3);
        assert!(crate::activities::evenness_defect(&out.next, &phi) < 1e-12);
        assert!(crate::activities::periodicity_defect(&out.next, &phi) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn extraction_identity_holds_for_random_tables(seed in 0u64..1000) {
            let m = mt(3, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks = m.connected_masks(2);
            let mut pick = |n: usize| -> Vec<(u64, Complex64)> {
                (0..n)
                    .map(|_| (masks[rng.gen_range(0..masks.len())], Complex64::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2))))
                    .collect::<BTreeMap<_, _>>()
                    .into_iter()
                    .collect()
            };
            let kv = pick(5);
            let fv = pick(4);
            let region = Region::new(&m, m.full()).unwrap();
            let mut kt = vec![ZERO; 1 << 9];
            let mut ft = vec![ZERO; 1 << 9];
            kv.iter().for_each(|(w, v)| kt[*w as usize] = *v);
            fv.iter().for_each(|(w, v)| ft[*w as usize] = *v);
            let e = nonzero(&extraction_table(&region, &kt, &ft));
            let lhs = MaskActivity::new(&m, kv.clone()).exp(m.full()).unwrap();
            let sum_f: Complex64 = fv.iter().map(|e| e.1).sum();
            let rhs = sum_f.exp() * MaskActivity::new(&m, e).exp(m.full()).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-11 * (1.0 + lhs.norm()));
        }

        #[test]
        fn test_field_derivatives_are_consistent(cx in 0.0f64..4.0, cy in 0.0f64..4.0, px in 0.0f64..4.0, py in 0.0f64..4.0) {
            let t = TorusSpec::plane(2, 2).unwrap();
            let f = TestField::quadratic(t, [cx, cy, 0.0, 0.0], 0, 1).plus(0.7, &TestField::linear(t, [cx, cy, 0.0, 0.0], 0));
            let p = [px, py, 0.0, 0.0];
            let u = t.point_delta(&p, &[cx, cy, 0.0, 0.0]);
            prop_assert!((f.value(&p) - (u[0] * u[1] + 0.7 * u[0])).abs() < 1e-12);
            prop_assert!((f.deriv(&p, &unit(0)) - (u[1] + 0.7)).abs() < 1e-12);
            prop_assert!((f.deriv(&p, &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        }
    }

    fn unit(mu: usize) -> MultiIndex {
        crate::lattice::unit_index(mu)
    }

    #[test]
    fn centroid_wraps_around_the_torus() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let x = Polymer::new(&t, [Block::at(3, 0), Block::at(0, 0)]).unwrap();
        let c = polymer_centroids(&t, &x);
        assert_eq!(c.len(), 1);
        assert_relative_eq!(c[0][0].rem_euclid(4.0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(c[0][1], 0.5, epsilon = 1e-12);
        let small = TorusSpec::plane(2, 1).unwrap();
        let diag = Polymer::new(&small, [Block::at(0, 0), Block::at(1, 1)]).unwrap();
        assert_eq!(polymer_centroids(&small, &diag).len(), 4);
    }
}
