//! Forests on labelled vertices, the forest interpolation formula, path minima,
//! labelled-tree counting and the factorial distance bound.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{binomial, factorial, GaussLegendre};

/// Largest vertex count accepted by forest enumeration.
pub const MAX_FOREST_VERTICES: usize = 6;

/// Index of the unordered pair `{i, j}` among the `n(n-1)/2` pairs, `i != j`.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// All unordered pairs `(i, j)`, `i < j`, in `pair_index` order.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// An acyclic set of bonds on `n` labelled vertices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Forest {
    pub n: usize,
    pub bonds: Vec<(usize, usize)>,
}

impl Forest {
    pub fn new(n: usize, bonds: Vec<(usize, usize)>) -> Result<Self> {
        let mut uf: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut norm = Vec::with_capacity(bonds.len());
        for (i, j) in bonds {
            if i >= n || j >= n || i == j {
                return Err(Error::param("bonds", format!("bad bond ({i}, {j}) for n = {n}")));
            }
            let (a, b) = (find(&mut uf, i), find(&mut uf, j));
            if a == b {
                return Err(Error::param("bonds", "a forest has no cycles"));
            }
            uf[a] = b;
            norm.push((i.min(j), i.max(j)));
        }
        norm.sort_unstable();
        Ok(Forest { n, bonds: norm })
    }

    pub fn is_tree(&self) -> bool {
        self.bonds.len() + 1 == self.n
    }

    /// Bonds on the unique path from `i` to `j`, or `None` if they are not connected.
    pub fn path(&self, i: usize, j: usize) -> Option<Vec<usize>> {
        if i == j {
            return Some(Vec::new());
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.n];
        for (k, (a, b)) in self.bonds.iter().enumerate() {
            adj[*a].push((*b, k));
            adj[*b].push((*a, k));
        }
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.n];
        let mut stack = vec![i];
        let mut seen = vec![false; self.n];
        seen[i] = true;
        while let Some(v) = stack.pop() {
            for (w, k) in &adj[v] {
                if !seen[*w] {
                    seen[*w] = true;
                    prev[*w] = Some((v, *k));
                    stack.push(*w);
                }
            }
        }
        if !seen[j] {
            return None;
        }
        let mut out = Vec::new();
        let mut v = j;
        while v != i {
            let (p, k) = prev[v].expect("path");
            out.push(k);
            v = p;
        }
        Some(out)
    }
}

/// `σ_ij(G, s) = min { s_b : b on the path from i to j }`, with `σ_ii = 1` and `0` when
/// no path exists. `s` is indexed like `G.bonds`.
pub fn sigma(g: &Forest, s: &[f64], i: usize, j: usize) -> f64 {
    if i == j {
        return 1.0;
    }
    match g.path(i, j) {
        None => 0.0,
        Some(p) => p.iter().map(|k| s[*k]).fold(1.0, f64::min),
    }
}

/// The matrix `[σ_ij(G, s)]`.
pub fn sigma_matrix(g: &Forest, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(g.n, g.n, |i, j| sigma(g, s, i, j))
}

/// Smallest eigenvalue of `[σ_ij(G, s)]`.
pub fn sigma_min_eigenvalue(g: &Forest, s: &[f64]) -> f64 {
    SymmetricEigen::new(sigma_matrix(g, s)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Every forest on `n` labelled vertices.
pub fn enumerate_forests(n: usize) -> Result<Vec<Forest>> {
    if n > MAX_FOREST_VERTICES {
        return Err(Error::ResourceCap(format!("forest enumeration limited to n <= {MAX_FOREST_VERTICES}")));
    }
    let all = pairs(n);
    let m = all.len();
    let mut out: Vec<Forest> = (0u32..(1u32 << m))
        .into_par_iter()
        .filter_map(|mask| {
            let bonds: Vec<(usize, usize)> =
                (0..m).filter(|k| mask >> k & 1 == 1).map(|k| all[k]).collect();
            Forest::new(n, bonds).ok()
        })
        .collect();
    out.sort_by(|a, b| (a.bonds.len(), &a.bonds).cmp(&(b.bonds.len(), &b.bonds)));
    Ok(out)
}

/// Number of forests on `n` labelled vertices by the recursion over the tree containing
/// the first vertex, with Cayley's `k^{k-2}` trees on `k` vertices.
pub fn forest_count(n: usize) -> u128 {
    let mut f = vec![1u128; n + 1];
    for m in 1..=n {
        f[m] = (1..=m)
            .map(|k| {
                let trees = if k == 1 { 1 } else { (k as u128).pow(k as u32 - 2) };
                binomial((m - 1) as u32, (k - 1) as u32) as u128 * trees * f[m - k]
            })
            .sum();
    }
    f[n]
}

/// Labelled trees with degree sequence `d`: `(N-2)! / Π (d_i - 1)!`, or 0 if infeasible.
pub fn tree_count(degrees: &[u32]) -> u128 {
    let n = degrees.len();
    if n == 1 {
        return u128::from(degrees[0] == 0);
    }
    if n == 0 || degrees.iter().any(|d| *d == 0) || degrees.iter().sum::<u32>() as usize != 2 * n - 2 {
        return 0;
    }
    let mut num: u128 = (1..=(n as u128 - 2)).product();
    for d in degrees {
        let f: u128 = (1..=u128::from(*d - 1)).product();
        num /= f;
    }
    num
}

/// A function of the pair variables `s_ij` with mixed partial derivatives.
pub trait Interpolant: Sync {
    /// Number of vertices; the function depends on the `n(n-1)/2` pair variables.
    fn n(&self) -> usize;
    /// `Π_{p ∈ pairs} ∂_{s_p} F` at `s`, indexed by pair.
    fn mixed(&self, s: &[f64], pairs: &[usize]) -> f64;
    /// Exact multilinear form, when available.
    fn as_multilinear(&self) -> Option<&Multilinear> {
        None
    }
}

/// `F(s) = Σ_S c_S Π_{p∈S} s_p` over subsets of pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Multilinear {
    pub n: usize,
    /// Monomials as sorted pair-index lists with coefficients.
    pub terms: Vec<(Vec<usize>, f64)>,
}

impl Multilinear {
    /// Random coefficients on every monomial of degree at most `max_degree`.
    pub fn random<R: rand::Rng + ?Sized>(n: usize, max_degree: usize, rng: &mut R) -> Self {
        let m = n * (n - 1) / 2;
        let terms = (0u32..(1u32 << m))
            .filter(|s| s.count_ones() as usize <= max_degree)
            .map(|s| ((0..m).filter(|k| s >> k & 1 == 1).collect(), rng.gen_range(-1.0..1.0)))
            .collect();
        Multilinear { n, terms }
    }
}

impl Interpolant for Multilinear {
    fn n(&self) -> usize {
        self.n
    }
    fn mixed(&self, s: &[f64], pairs: &[usize]) -> f64 {
        self.terms
            .iter()
            .filter(|(mono, _)| pairs.iter().all(|p| mono.contains(p)))
            .map(|(mono, c)| c * mono.iter().filter(|p| !pairs.contains(p)).map(|p| s[*p]).product::<f64>())
            .sum()
    }
    fn as_multilinear(&self) -> Option<&Multilinear> {
        Some(self)
    }
}

/// `F(s) = exp(Σ_p c_p s_p)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpLinear {
    pub n: usize,
    pub c: Vec<f64>,
}

impl Interpolant for ExpLinear {
    fn n(&self) -> usize {
        self.n
    }
    fn mixed(&self, s: &[f64], pairs: &[usize]) -> f64 {
        let e: f64 = self.c.iter().zip(s).map(|(c, x)| c * x).sum::<f64>().exp();
        pairs.iter().map(|p| self.c[*p]).product::<f64>() * e
    }
}

/// Pair-variable vector `σ(G, s)` from bond values `t` (indexed like `G.bonds`).
fn sigma_pairs(g: &Forest, t: &[f64]) -> Vec<f64> {
    pairs(g.n).iter().map(|(i, j)| sigma(g, t, *i, *j)).collect()
}

/// All permutations of `0..k`.
fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// `∫_{[0,1]^G} (Π_{b∈G} ∂_b F)(σ(G, s)) ds` for multilinear `F`, exactly: on each
/// ordering of the bond values every path minimum is a fixed variable, and monomials
/// integrate over the ordered simplex in closed form.
fn forest_term_exact(f: &Multilinear, g: &Forest) -> f64 {
    let n = g.n;
    let k = g.bonds.len();
    let bond_pairs: Vec<usize> = g.bonds.iter().map(|(i, j)| pair_index(n, *i, *j)).collect();
    let paths: Vec<Option<Vec<usize>>> = pairs(n).iter().map(|(i, j)| g.path(*i, *j)).collect();
    let mut total = 0.0;
    for perm in permutations(k) {
        // perm[r] = bond with rank r, ranks increasing in value.
        let mut rank = vec![0usize; k];
        for (r, b) in perm.iter().enumerate() {
            rank[*b] = r;
        }
        for (mono, c) in &f.terms {
            if !bond_pairs.iter().all(|p| mono.contains(p)) {
                continue;
            }
            // Exponent per rank; a disconnected pair kills the monomial.
            let mut expo = vec![0u32; k];
            let mut zero = false;
            for p in mono.iter().filter(|p| !bond_pairs.contains(p)) {
                match &paths[*p] {
                    None => {
                        zero = true;
                        break;
                    }
                    Some(path) => {
                        let r = path.iter().map(|b| rank[*b]).min().expect("nonempty path");
                        expo[r] += 1;
                    }
                }
            }
            if zero {
                continue;
            }
            // ∫_{0<t_0<...<t_{k-1}<1} Π t_r^{e_r} = Π_m 1 / Σ_{r≤m} (e_r + 1).
            let mut acc = 0u32;
            let mut v = 1.0;
            for e in &expo {
                acc += e + 1;
                v /= f64::from(acc);
            }
            total += c * v;
        }
    }
    total
}

/// The same integral by Gauss–Legendre quadrature on each ordered simplex.
fn forest_term_quadrature(f: &dyn Interpolant, g: &Forest, gl: &GaussLegendre) -> f64 {
    let k = g.bonds.len();
    let n = g.n;
    let bond_pairs: Vec<usize> = g.bonds.iter().map(|(i, j)| pair_index(n, *i, *j)).collect();
    if k == 0 {
        return f.mixed(&vec![0.0; n * (n - 1) / 2], &[]);
    }
    let mut total = 0.0;
    for perm in permutations(k) {
        // Nested integral over 0 < t_{perm[0]} < ... < t_{perm[k-1]} < 1.
        fn nest(
            f: &dyn Interpolant,
            g: &Forest,
            gl: &GaussLegendre,
            perm: &[usize],
            bond_pairs: &[usize],
            level: usize,
            upper: f64,
            t: &mut Vec<f64>,
        ) -> f64 {
            if level == usize::MAX {
                return f.mixed(&sigma_pairs(g, t), bond_pairs);
            }
            let b = perm[level];
            let mut s = 0.0;
            for (x, w) in gl.mapped(0.0, upper) {
                t[b] = x;
                let next = if level == 0 { usize::MAX } else { level - 1 };
                s += w * nest(f, g, gl, perm, bond_pairs, next, x, t);
            }
            s
        }
        let mut t = vec![0.0; k];
        total += nest(f, g, gl, &perm, &bond_pairs, k - 1, 1.0, &mut t);
    }
    total
}

/// `|F(1) - Σ_G ∫ Π ds_b (Π ∂_{s_b} F)(σ(G, s))|` over all forests on `n` vertices.
/// Multilinear functions are integrated exactly; others by `gl_points`-point quadrature.
pub fn forest_interpolation_check(f: &dyn Interpolant, gl_points: usize) -> Result<f64> {
    let n = f.n();
    if n > MAX_FOREST_VERTICES {
        return Err(Error::ResourceCap(format!("interpolation check limited to n <= {MAX_FOREST_VERTICES}")));
    }
    let forests = enumerate_forests(n)?;
    let gl = GaussLegendre::new(gl_points);
    let ones = vec![1.0; n * (n - 1) / 2];
    let lhs = f.mixed(&ones, &[]);
    let rhs: f64 = match f.as_multilinear() {
        Some(m) => forests.par_iter().map(|g| forest_term_exact(m, g)).collect::<Vec<_>>().iter().sum(),
        None => forests.par_iter().map(|g| forest_term_quadrature(f, g, &gl)).collect::<Vec<_>>().iter().sum(),
    };
    Ok((lhs - rhs).abs())
}

/// `γ` with `#{Δ' ≠ Δ : dist(Δ, Δ') ≤ r} ≤ γ r^d` for all `r ≥ 1` on `Z^d`, from ball counts.
pub fn ball_count_gamma(d: usize, r_max: i64) -> f64 {
    let mut dist2: HashMap<i64, u64> = HashMap::new();
    let side = 2 * r_max + 1;
    let total = (side as u64).pow(d as u32);
    for idx in 0..total {
        let mut k = idx;
        let mut s2 = 0i64;
        for _ in 0..d {
            let c = (k % side as u64) as i64 - r_max;
            k /= side as u64;
            s2 += c * c;
        }
        if s2 > 0 && s2 <= r_max * r_max {
            *dist2.entry(s2).or_default() += 1;
        }
    }
    let mut keys: Vec<i64> = dist2.keys().copied().collect();
    keys.sort_unstable();
    let mut count = 0u64;
    let mut gamma = 0.0f64;
    for r2 in keys {
        count += dist2[&r2];
        gamma = gamma.max(count as f64 / (r2 as f64).powf(d as f64 / 2.0));
    }
    gamma
}

/// Result of the factorial distance bound on one configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FactorialBound {
    pub gamma: f64,
    pub log_lhs: f64,
    pub log_rhs: f64,
    pub holds: bool,
}

/// `n! ≤ γ^n Π_j d(Δ, Δ_j)^d` for distinct blocks `Δ_j ≠ Δ` of `Z^d`, with `γ` from
/// ball counts. Distances are Euclidean between block centres.
pub fn factorial_bound_check(delta: &[i64], blocks: &[Vec<i64>], d: usize) -> Result<FactorialBound> {
    let mut seen = std::collections::HashSet::new();
    for b in blocks {
        if b.as_slice() == delta || !seen.insert(b.clone()) {
            return Err(Error::param("blocks", "blocks must be distinct and differ from the base block"));
        }
    }
    let gamma = ball_count_gamma(d, 24);
    let n = blocks.len() as u32;
    let log_lhs = factorial(n).ln();
    let log_rhs = f64::from(n) * gamma.ln()
        + blocks
            .iter()
            .map(|b| {
                let r2: i64 = b.iter().zip(delta).map(|(x, y)| (x - y) * (x - y)).sum();
                d as f64 / 2.0 * (r2 as f64).ln()
            })
            .sum::<f64>();
    Ok(FactorialBound { gamma, log_lhs, log_rhs, holds: log_lhs <= log_rhs + 1e-12 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_examples() {
        let t = Forest::new(3, vec![(0, 1), (1, 2)]).unwrap();
        assert_relative_eq!(sigma(&t, &[0.3, 0.7], 0, 2), 0.3);
        assert_relative_eq!(sigma(&t, &[0.3, 0.7], 1, 1), 1.0);
        let g = Forest::new(3, vec![(0, 1)]).unwrap();
        assert_eq!(sigma(&g, &[0.5], 0, 2), 0.0);
        assert!(Forest::new(3, vec![(0, 1), (1, 2), (0, 2)]).is_err());
    }

    #[test]
    fn forest_counts_match_recursion() {
        for n in 1..=6 {
            assert_eq!(enumerate_forests(n).unwrap().len() as u128, forest_count(n), "n = {n}");
        }
        assert_eq!(forest_count(4), 38);
        assert!(enumerate_forests(7).is_err());
    }

    #[test]
    fn cayley_counts() {
        assert_eq!(tree_count(&[1, 1, 1, 3]), 1);
        assert_eq!(tree_count(&[1, 1, 2, 2]), 2);
        assert_eq!(tree_count(&[1, 1, 1, 1]), 0);
        // Sum over all degree sequences for N = 4 equals the tree enumeration, 16.
        let mut total = 0;
        for a in 1..=3u32 {
            for b in 1..=3 {
                for c in 1..=3 {
                    for d in 1..=3 {
                        total += tree_count(&[a, b, c, d]);
                    }
                }
            }
        }
        let trees = enumerate_forests(4).unwrap().into_iter().filter(Forest::is_tree).count();
        assert_eq!(total, 16);
        assert_eq!(trees, 16);
        // Degree sequences of enumerated trees reproduce the formula.
        let mut by_deg: HashMap<Vec<u32>, u128> = HashMap::new();
        for t in enumerate_forests(5).unwrap().into_iter().filter(Forest::is_tree) {
            let mut deg = vec![0u32; 5];
            for (i, j) in &t.bonds {
                deg[*i] += 1;
                deg[*j] += 1;
            }
            *by_deg.entry(deg).or_default() += 1;
        }
        for (deg, count) in by_deg {
            assert_eq!(tree_count(&deg), count);
        }
    }

    #[test]
    fn interpolation_trivial_case() {
        let f = Multilinear { n: 2, terms: vec![(vec![0], 1.0)] };
        assert!(forest_interpolation_check(&f, 8).unwrap() < 1e-15);
    }

    #[test]
    fn interpolation_multilinear_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=4 {
            let f = Multilinear::random(n, 6, &mut rng);
            let r = forest_interpolation_check(&f, 8).unwrap();
            assert!(r < 1e-12, "n = {n}: {r}");
        }
    }

    #[test]
    fn exact_and_quadrature_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Multilinear::random(3, 3, &mut rng);
        let gl = GaussLegendre::new(6);
        for g in enumerate_forests(3).unwrap() {
            let a = forest_term_exact(&f, &g);
            let b = forest_term_quadrature(&f, &g, &gl);
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn interpolation_smooth() {
        let f3 = ExpLinear { n: 3, c: vec![0.3, -0.2, 0.5] };
        assert!(forest_interpolation_check(&f3, 16).unwrap() < 1e-8);
        let f4 = ExpLinear { n: 4, c: vec![0.1, -0.05, 0.2, 0.15, -0.1, 0.05] };
        assert!(forest_interpolation_check(&f4, 12).unwrap() < 1e-8);
    }

    #[test]
    fn factorial_bound_cases() {
        let g = ball_count_gamma(2, 24);
        assert_relative_eq!(g, 4.0, epsilon = 1e-12);
        let r = factorial_bound_check(&[0, 0], &[vec![1, 0]], 2).unwrap();
        assert!(r.holds);
        // Nearest blocks first: the tightest ordering.
        let mut all: Vec<Vec<i64>> = Vec::new();
        for x in -3i64..=3 {
            for y in -3i64..=3 {
                if (x, y) != (0, 0) {
                    all.push(vec![x, y]);
                }
            }
        }
        all.sort_by_key(|b| b[0] * b[0] + b[1] * b[1]);
        for n in 1..=12 {
            assert!(factorial_bound_check(&[0, 0], &all[..n], 2).unwrap().holds, "n = {n}");
        }
        assert!(factorial_bound_check(&[0, 0], &[vec![0, 0]], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sigma_monotone(seed in 0u64..100_000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=5);
            let trees: Vec<Forest> = enumerate_forests(n).unwrap().into_iter().filter(Forest::is_tree).collect();
            let t = &trees[rng.gen_range(0..trees.len())];
            let s: Vec<f64> = (0..t.bonds.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut s2 = s.clone();
            let b = rng.gen_range(0..s.len());
            s2[b] = rng.gen_range(s[b]..=1.0);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!(sigma(t, &s2, i, j) >= sigma(t, &s, i, j));
                }
            }
        }

        #[test]
        fn sigma_matrix_psd(seed in 0u64..100_000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=5);
            let trees: Vec<Forest> = enumerate_forests(n).unwrap().into_iter().filter(Forest::is_tree).collect();
            let t = &trees[rng.gen_range(0..trees.len())];
            let s: Vec<f64> = (0..t.bonds.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            prop_assert!(sigma_min_eigenvalue(t, &s) >= -1e-10);
        }
    }
}
