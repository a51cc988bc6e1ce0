//! Torus block geometry: blocks, polymers, connectivity, enumeration, L-closure
//! and the large-set regulator.
//!
//! A block with integer coordinates `c` is the closed unit cube `[c, c+1]^d`.
//! L-blocks tile the torus: the L-block with coordinates `m` is the union of the
//! unit blocks `L*m + o` with `o` in `{0..L-1}^d`. Two blocks are adjacent when
//! their closed cubes intersect, so corner contact counts.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 4;

/// The torus `R^d / L^M Z^d` measured in unit blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusSpec {
    pub d: usize,
    pub l: u32,
    pub m: u32,
}

impl TorusSpec {
    pub fn new(d: usize, l: u32, m: u32) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::param("d", format!("{d} not in 1..={MAX_DIM}")));
        }
        if l < 2 {
            return Err(Error::param("L", format!("{l} < 2")));
        }
        let side = (l as u128).checked_pow(m).unwrap_or(u128::MAX);
        if side > (1u128 << 40) {
            return Err(Error::param("M", format!("L^M = {l}^{m} is too large")));
        }
        Ok(TorusSpec { d, l, m })
    }

    /// Two-dimensional torus, the default geometry.
    pub fn plane(l: u32, m: u32) -> Result<Self> {
        Self::new(2, l, m)
    }

    /// Side length `L^M` in unit blocks.
    pub fn side(&self) -> i64 {
        (self.l as i64).pow(self.m)
    }

    /// Number of unit blocks, `L^{dM}`.
    pub fn n_blocks(&self) -> u64 {
        (self.side() as u64).pow(self.d as u32)
    }

    /// Volume `|Λ_M|`.
    pub fn volume(&self) -> f64 {
        (self.side() as f64).powi(self.d as i32)
    }

    /// The torus one scale down, `Λ_{M-1}`.
    pub fn coarser(&self) -> Result<TorusSpec> {
        if self.m == 0 {
            return Err(Error::param("M", "no coarser torus below M = 0"));
        }
        Ok(TorusSpec { m: self.m - 1, ..*self })
    }

    /// The torus one scale up, `Λ_{M+1}`.
    pub fn finer(&self) -> TorusSpec {
        TorusSpec { m: self.m + 1, ..*self }
    }

    /// Reduce a block's coordinates modulo the side.
    pub fn reduce(&self, b: Block) -> Block {
        let s = self.side();
        let mut c = [0i64; MAX_DIM];
        for (k, slot) in c.iter_mut().enumerate().take(self.d) {
            *slot = b.0[k].rem_euclid(s);
        }
        Block(c)
    }

    /// Minimal-image representative of a coordinate difference.
    pub fn wrap(&self, dx: f64) -> f64 {
        let s = self.side() as f64;
        dx - s * (dx / s).round()
    }

    /// Minimal-image integer difference.
    pub fn wrap_int(&self, dx: i64) -> i64 {
        let s = self.side();
        let r = dx.rem_euclid(s);
        if 2 * r > s {
            r - s
        } else {
            r
        }
    }

    /// Torus Chebyshev distance between two blocks.
    pub fn chebyshev(&self, a: Block, b: Block) -> i64 {
        (0..self.d).map(|k| self.wrap_int(a.0[k] - b.0[k]).abs()).max().unwrap_or(0)
    }

    /// Closed cubes of distinct blocks intersect.
    pub fn adjacent(&self, a: Block, b: Block) -> bool {
        let (a, b) = (self.reduce(a), self.reduce(b));
        a != b && self.chebyshev(a, b) <= 1
    }

    /// Torus Euclidean distance between block centers.
    pub fn distance(&self, a: Block, b: Block) -> f64 {
        (0..self.d)
            .map(|k| {
                let t = self.wrap_int(a.0[k] - b.0[k]) as f64;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Every block of the torus in lexicographic order.
    pub fn all_blocks(&self) -> Vec<Block> {
        let s = self.side();
        let n = self.n_blocks() as usize;
        (0..n)
            .map(|mut i| {
                let mut c = [0i64; MAX_DIM];
                for slot in c.iter_mut().take(self.d) {
                    *slot = (i as i64) % s;
                    i /= s as usize;
                }
                Block(c)
            })
            .collect()
    }

    /// The 3^d - 1 neighbours of a block (fewer on tiny tori where images coincide).
    pub fn neighbours(&self, b: Block) -> Vec<Block> {
        let mut out = Vec::with_capacity(3usize.pow(self.d as u32));
        let total = 3usize.pow(self.d as u32);
        for code in 0..total {
            let mut c = b.0;
            let mut t = code;
            for slot in c.iter_mut().take(self.d) {
                *slot += (t % 3) as i64 - 1;
                t /= 3;
            }
            let nb = self.reduce(Block(c));
            if nb != self.reduce(b) && !out.contains(&nb) {
                out.push(nb);
            }
        }
        out
    }
}

/// A position in the torus, in unit-block coordinates; unused coordinates are zero.
pub type Point = [f64; MAX_DIM];

/// A derivative multi-index; unused entries are zero.
pub type MultiIndex = [u32; MAX_DIM];

/// `|α|`.
pub fn order(alpha: &MultiIndex) -> u32 {
    alpha.iter().sum()
}

/// All multi-indices in `d` dimensions with `lo <= |α| <= hi`, ordered by degree.
pub fn multi_indices(d: usize, lo: u32, hi: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for deg in lo..=hi {
        let mut cur = [0u32; MAX_DIM];
        fill_degree(d, 0, deg, &mut cur, &mut out);
    }
    out
}

fn fill_degree(d: usize, k: usize, left: u32, cur: &mut MultiIndex, out: &mut Vec<MultiIndex>) {
    if k + 1 == d {
        cur[k] = left;
        out.push(*cur);
        cur[k] = 0;
        return;
    }
    for v in (0..=left).rev() {
        cur[k] = v;
        fill_degree(d, k + 1, left - v, cur, out);
    }
    cur[k] = 0;
}

/// Unit multi-index in direction `mu`.
pub fn unit_index(mu: usize) -> MultiIndex {
    let mut a = [0u32; MAX_DIM];
    a[mu] = 1;
    a
}

/// Sum of two multi-indices.
pub fn add_index(a: &MultiIndex, b: &MultiIndex) -> MultiIndex {
    let mut c = [0u32; MAX_DIM];
    for k in 0..MAX_DIM {
        c[k] = a[k] + b[k];
    }
    c
}

impl TorusSpec {
    /// Minimal-image difference `a - b` of two points.
    pub fn point_delta(&self, a: &Point, b: &Point) -> Point {
        let mut out = [0.0; MAX_DIM];
        for k in 0..self.d {
            out[k] = self.wrap(a[k] - b[k]);
        }
        out
    }

    /// Reduce a point into `[0, side)^d`.
    pub fn reduce_point(&self, x: &Point) -> Point {
        let s = self.side() as f64;
        let mut out = [0.0; MAX_DIM];
        for k in 0..self.d {
            out[k] = x[k].rem_euclid(s);
        }
        out
    }

    /// Block containing a point (points on a face go to the upper block).
    pub fn block_of(&self, x: &Point) -> Block {
        let r = self.reduce_point(x);
        let mut c = [0i64; MAX_DIM];
        for k in 0..self.d {
            c[k] = r[k].floor() as i64;
        }
        self.reduce(Block(c))
    }
}

/// A closed unit block identified by its lower corner; unused coordinates are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block(pub [i64; MAX_DIM]);

impl Block {
    pub fn origin() -> Self {
        Block([0; MAX_DIM])
    }

    /// Two-dimensional block.
    pub fn at(x: i64, y: i64) -> Self {
        Block([x, y, 0, 0])
    }

    pub fn coords(&self, d: usize) -> &[i64] {
        &self.0[..d]
    }

    /// Center of the block.
    pub fn center(&self, d: usize) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        for k in 0..d {
            c[k] = self.0[k] as f64 + 0.5;
        }
        c
    }

    pub fn offset(&self, o: &[i64]) -> Block {
        let mut c = self.0;
        for (k, v) in o.iter().enumerate() {
            c[k] += v;
        }
        Block(c)
    }
}

/// A nonempty set of blocks on a torus, stored sorted and reduced.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Polymer {
    d: usize,
    blocks: Vec<Block>,
    components: usize,
}

impl Polymer {
    pub fn new(torus: &TorusSpec, blocks: impl IntoIterator<Item = Block>) -> Result<Self> {
        let mut v: Vec<Block> = blocks.into_iter().map(|b| torus.reduce(b)).collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::param("blocks", "a polymer needs at least one block"));
        }
        let components = count_components(&v, torus);
        Ok(Polymer { d: torus.d, blocks: v, components })
    }

    pub fn single(torus: &TorusSpec, b: Block) -> Self {
        Polymer { d: torus.d, blocks: vec![torus.reduce(b)], components: 1 }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// `|X|`, the number of blocks.
    pub fn size(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_components(&self) -> usize {
        self.components
    }

    pub fn is_connected(&self) -> bool {
        self.components == 1
    }

    pub fn contains(&self, b: &Block) -> bool {
        self.blocks.binary_search(b).is_ok()
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

impl Serialize for Polymer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let coords: Vec<Vec<i64>> = self.blocks.iter().map(|b| b.coords(self.d).to_vec()).collect();
        coords.serialize(s)
    }
}

fn count_components(blocks: &[Block], torus: &TorusSpec) -> usize {
    components_of(blocks, torus).len()
}

/// Connected components as lists of indices into `blocks`.
fn components_of(blocks: &[Block], torus: &TorusSpec) -> Vec<Vec<usize>> {
    let n = blocks.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if torus.adjacent(blocks[i], blocks[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        let slot = *root_slot.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }
    groups
}

/// Partition a block set into maximal connected polymers, ordered by smallest block.
pub fn connected_components(blocks: &[Block], torus: &TorusSpec) -> Vec<Polymer> {
    let mut v: Vec<Block> = blocks.iter().map(|b| torus.reduce(*b)).collect();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<Polymer> = components_of(&v, torus)
        .into_iter()
        .map(|g| Polymer { d: torus.d, blocks: g.iter().map(|&i| v[i]).collect(), components: 1 })
        .collect();
    out.sort();
    out
}

/// Limits on polymer enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationCap {
    /// Largest polymer size for anchored enumeration.
    pub max_size: usize,
    /// Largest torus side for whole-torus enumeration.
    pub max_side: i64,
}

impl Default for EnumerationCap {
    fn default() -> Self {
        EnumerationCap { max_size: 6, max_side: 8 }
    }
}

/// All connected polymers containing `anchor` with at most `max_size` blocks, sorted.
pub fn enumerate_polymers(
    torus: &TorusSpec,
    max_size: usize,
    anchor: Block,
    cap: EnumerationCap,
) -> Result<Vec<Polymer>> {
    if max_size == 0 {
        return Err(Error::param("max_size", "must be at least 1"));
    }
    if max_size > cap.max_size {
        return Err(Error::ResourceCap(format!(
            "max_size {max_size} exceeds enumeration cap {}",
            cap.max_size
        )));
    }
    let anchor = torus.reduce(anchor);
    let mut seen: HashSet<Vec<Block>> = HashSet::new();
    let mut frontier: Vec<Vec<Block>> = vec![vec![anchor]];
    seen.insert(vec![anchor]);
    let mut all = frontier.clone();
    let mut nb_cache: HashMap<Block, Vec<Block>> = HashMap::new();
    for _ in 1..max_size {
        let mut next = Vec::new();
        for set in &frontier {
            for b in set {
                let nbs = nb_cache.entry(*b).or_insert_with(|| torus.neighbours(*b)).clone();
                for nb in nbs {
                    if set.binary_search(&nb).is_ok() {
                        continue;
                    }
                    let mut grown = set.clone();
                    let pos = grown.binary_search(&nb).unwrap_err();
                    grown.insert(pos, nb);
                    if seen.insert(grown.clone()) {
                        next.push(grown);
                    }
                }
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    let mut out: Vec<Polymer> = all
        .into_iter()
        .map(|blocks| Polymer { d: torus.d, blocks, components: 1 })
        .collect();
    out.sort();
    Ok(out)
}

/// True iff `X` is connected and has at most `2^d` blocks.
pub fn is_small(x: &Polymer, torus: &TorusSpec) -> bool {
    x.is_connected() && x.size() <= (1usize << torus.d)
}

/// Number of small polymers containing a block.
pub fn count_small_supersets(torus: &TorusSpec, anchor: Block) -> Result<usize> {
    Ok(enumerate_polymers(torus, 1 << torus.d, anchor, EnumerationCap::default())?.len())
}

/// The L-closure of `X`: the L-blocks (on the coarser torus) that contain blocks of `X`.
pub fn l_closure(x: &Polymer, torus: &TorusSpec) -> Result<Polymer> {
    let coarse = torus.coarser()?;
    let l = torus.l as i64;
    let blocks = x.blocks().iter().map(|b| {
        let mut c = [0i64; MAX_DIM];
        for k in 0..torus.d {
            c[k] = b.0[k].div_euclid(l);
        }
        Block(c)
    });
    Polymer::new(&coarse, blocks)
}

/// `LX`: the unit blocks of the finer torus covered by the image of `X` under `x -> Lx`.
pub fn scale_up(x: &Polymer, torus: &TorusSpec) -> Polymer {
    let fine = torus.finer();
    let l = torus.l as i64;
    let per = (torus.l as usize).pow(torus.d as u32);
    let mut blocks = Vec::with_capacity(x.size() * per);
    for b in x.blocks() {
        for code in 0..per {
            let mut c = [0i64; MAX_DIM];
            let mut t = code;
            for k in 0..torus.d {
                c[k] = l * b.0[k] + (t % torus.l as usize) as i64;
                t /= torus.l as usize;
            }
            blocks.push(Block(c));
        }
    }
    Polymer::new(&fine, blocks).expect("scale_up of a nonempty polymer is nonempty")
}

/// Euclidean torus distance between block centers and the tree-decay weight `(1+d)^nu`.
pub fn block_metrics(torus: &TorusSpec, a: Block, b: Block, nu: f64) -> (f64, f64) {
    let d = torus.distance(a, b);
    (d, (1.0 + d).powf(nu))
}

/// Length of a minimal spanning tree over block centers (torus distances).
pub fn mst_length(x: &Polymer, torus: &TorusSpec) -> f64 {
    let b = x.blocks();
    let n = b.len();
    if n < 2 {
        return 0.0;
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let (mut u, mut bu) = (usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !in_tree[i] && best[i] < bu {
                u = i;
                bu = best[i];
            }
        }
        in_tree[u] = true;
        total += bu;
        for i in 0..n {
            if !in_tree[i] {
                let dd = torus.distance(b[u], b[i]);
                if dd < best[i] {
                    best[i] = dd;
                }
            }
        }
    }
    total
}

/// Parameters of the large-set regulator `Γ_p(X) = 2^{p|X|} A^{|X|} Θ(X)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetRegulatorParams {
    /// Amplitude `A`.
    pub a: f64,
    /// Integer shift `p`.
    pub p: i32,
    /// Exponent of the tree-decay surrogate `Θ(X) = (1 + MST)^nu`.
    pub nu: f64,
}

impl SetRegulatorParams {
    /// `A = L^{d+3}`, `p = 0`, `nu = 2`.
    pub fn standard(torus: &TorusSpec) -> Self {
        SetRegulatorParams { a: (torus.l as f64).powi(torus.d as i32 + 3), p: 0, nu: 2.0 }
    }

    pub fn with_shift(self, p: i32) -> Self {
        SetRegulatorParams { p, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 1.0) {
            return Err(Error::param("A", format!("{} < 1", self.a)));
        }
        if !(self.nu > 0.0) {
            return Err(Error::param("nu", "must be positive"));
        }
        Ok(())
    }

    /// `Θ(X)`.
    pub fn theta(&self, x: &Polymer, torus: &TorusSpec) -> f64 {
        (1.0 + mst_length(x, torus)).powf(self.nu)
    }

    /// `Γ_p(X)` from the size and the precomputed `Θ(X)`.
    pub fn gamma_from(&self, size: usize, theta: f64) -> f64 {
        let n = size as i32;
        2f64.powi(self.p * n) * self.a.powi(n) * theta
    }
}

/// `Γ_p(X)`.
pub fn gamma_p(x: &Polymer, torus: &TorusSpec, params: &SetRegulatorParams) -> f64 {
    params.gamma_from(x.size(), params.theta(x, torus))
}

/// Ratio `Γ_0(L^{-1} X̄^L) / (L^{-d-2} Γ_{-q}(X))`; bounded for large `X`.
pub fn large_set_gamma_ratio(
    x: &Polymer,
    torus: &TorusSpec,
    params: &SetRegulatorParams,
    q: i32,
) -> Result<f64> {
    let coarse = torus.coarser()?;
    let closure = l_closure(x, torus)?;
    let num = gamma_p(&closure, &coarse, &params.with_shift(0));
    let den = (torus.l as f64).powi(-(torus.d as i32) - 2) * gamma_p(x, torus, &params.with_shift(-q));
    Ok(num / den)
}

/// Dense indexing of a torus with at most 64 blocks, so block sets become bit masks.
#[derive(Clone, Debug)]
pub struct MaskTorus {
    pub torus: TorusSpec,
    blocks: Vec<Block>,
    index: HashMap<Block, usize>,
    adjacency: Vec<u64>,
}

impl MaskTorus {
    pub fn new(torus: TorusSpec, cap: EnumerationCap) -> Result<Self> {
        if torus.side() > cap.max_side || torus.n_blocks() > 64 {
            return Err(Error::ResourceCap(format!(
                "torus with side {} and {} blocks exceeds the whole-torus cap (side {}, 64 blocks)",
                torus.side(),
                torus.n_blocks(),
                cap.max_side
            )));
        }
        let blocks = torus.all_blocks();
        let index: HashMap<Block, usize> = blocks.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        let adjacency = blocks
            .iter()
            .map(|b| torus.neighbours(*b).iter().fold(0u64, |m, nb| m | (1u64 << index[nb])))
            .collect();
        Ok(MaskTorus { torus, blocks, index, adjacency })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Mask of the whole torus.
    pub fn full(&self) -> u64 {
        if self.blocks.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.blocks.len()) - 1
        }
    }

    pub fn block(&self, i: usize) -> Block {
        self.blocks[i]
    }

    pub fn index_of(&self, b: Block) -> usize {
        self.index[&self.torus.reduce(b)]
    }

    pub fn mask_of(&self, x: &Polymer) -> u64 {
        x.blocks().iter().fold(0, |m, b| m | (1u64 << self.index_of(*b)))
    }

    pub fn polymer_of(&self, mask: u64) -> Result<Polymer> {
        Polymer::new(&self.torus, iter_bits(mask).map(|i| self.blocks[i]))
    }

    /// Blocks adjacent to some block of `mask`, excluding `mask` itself.
    pub fn neighbourhood(&self, mask: u64) -> u64 {
        iter_bits(mask).fold(0, |m, i| m | self.adjacency[i]) & !mask
    }

    pub fn is_connected(&self, mask: u64) -> bool {
        if mask == 0 {
            return false;
        }
        let mut reached = mask & mask.wrapping_neg();
        loop {
            let grown = (reached | self.neighbourhood(reached)) & mask;
            if grown == reached {
                return reached == mask;
            }
            reached = grown;
        }
    }

    /// Connected components of a mask.
    pub fn components(&self, mut mask: u64) -> Vec<u64> {
        let mut out = Vec::new();
        while mask != 0 {
            let mut comp = mask & mask.wrapping_neg();
            loop {
                let grown = (comp | self.neighbourhood(comp)) & mask;
                if grown == comp {
                    break;
                }
                comp = grown;
            }
            out.push(comp);
            mask &= !comp;
        }
        out
    }

    /// All connected masks with at most `max_size` blocks.
    pub fn connected_masks(&self, max_size: usize) -> Vec<u64> {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut frontier: Vec<u64> = (0..self.n_blocks()).map(|i| 1u64 << i).collect();
        seen.extend(frontier.iter().copied());
        for _ in 1..max_size {
            let mut next = Vec::new();
            for &m in &frontier {
                for i in iter_bits(self.neighbourhood(m)) {
                    let g = m | (1u64 << i);
                    if seen.insert(g) {
                        next.push(g);
                    }
                }
            }
            frontier = next;
        }
        let mut v: Vec<u64> = seen.into_iter().collect();
        v.sort_unstable_by_key(|m| (m.count_ones(), *m));
        v
    }
}

/// Indices of the set bits of a mask, ascending.
pub fn iter_bits(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if mask == 0 {
            None
        } else {
            let i = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            Some(i)
        }
    })
}

/// All submasks of `mask`, including zero and `mask` itself.
pub fn submasks(mask: u64) -> impl Iterator<Item = u64> {
    let mut sub = mask;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let out = sub;
        if sub == 0 {
            done = true;
        } else {
            sub = (sub - 1) & mask;
        }
        Some(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(l: u32, m: u32) -> TorusSpec {
        TorusSpec::plane(l, m).unwrap()
    }

    #[test]
    fn singleton_component() {
        let torus = t(2, 2);
        let c = connected_components(&[Block::at(0, 0)], &torus);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size(), 1);
    }

    #[test]
    fn corner_contact_connects() {
        let torus = t(2, 3);
        let c = connected_components(&[Block::at(0, 0), Block::at(1, 1)], &torus);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size(), 2);
    }

    #[test]
    fn separated_blocks_split() {
        let torus = t(2, 2);
        let c = connected_components(&[Block::at(0, 0), Block::at(2, 2)], &torus);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn empty_input_gives_no_components() {
        assert!(connected_components(&[], &t(2, 2)).is_empty());
    }

    #[test]
    fn enumerate_size_one_is_anchor() {
        let torus = t(3, 2);
        let v = enumerate_polymers(&torus, 1, Block::at(1, 1), EnumerationCap::default()).unwrap();
        assert_eq!(v, vec![Polymer::single(&torus, Block::at(1, 1))]);
    }

    #[test]
    fn enumerate_pairs_gives_nine() {
        let torus = t(3, 2);
        let v = enumerate_polymers(&torus, 2, Block::at(0, 0), EnumerationCap::default()).unwrap();
        assert_eq!(v.len(), 9);
    }

    /// Brute force over all subsets of a 5x5 torus containing the anchor.
    #[test]
    fn enumerate_matches_subset_scan() {
        let torus = TorusSpec::plane(5, 1).unwrap();
        let mt = MaskTorus::new(torus, EnumerationCap::default()).unwrap();
        let anchor = 1u64 << mt.index_of(Block::at(2, 2));
        let brute = (0u64..(1 << 25))
            .filter(|m| m & anchor != 0 && m.count_ones() <= 4 && mt.is_connected(*m))
            .count();
        let v = enumerate_polymers(&torus, 4, Block::at(2, 2), EnumerationCap::default()).unwrap();
        assert_eq!(v.len(), brute);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let torus = t(3, 2);
        let e = enumerate_polymers(&torus, 7, Block::origin(), EnumerationCap::default());
        assert!(matches!(e, Err(Error::ResourceCap(_))));
    }

    #[test]
    fn small_and_large_sets() {
        let torus = t(4, 2);
        let square = Polymer::new(&torus, [Block::at(0, 0), Block::at(1, 0), Block::at(0, 1), Block::at(1, 1)]).unwrap();
        assert!(is_small(&square, &torus));
        let cross = Polymer::new(
            &torus,
            [Block::at(1, 1), Block::at(0, 1), Block::at(2, 1), Block::at(1, 0), Block::at(1, 2)],
        )
        .unwrap();
        assert!(!is_small(&cross, &torus));
        assert!(is_small(&Polymer::single(&torus, Block::origin()), &torus));
        let pair_far = Polymer::new(&torus, [Block::at(0, 0), Block::at(2, 2)]).unwrap();
        assert!(!is_small(&pair_far, &torus));
    }

    #[test]
    fn small_superset_count_matches_fixed_polyplets() {
        // fixed king-connected animals of sizes 1..4 number 1, 4, 20, 110;
        // each one contains a given block in `size` of its translates.
        let k = count_small_supersets(&t(4, 2), Block::origin()).unwrap();
        assert_eq!(k, 1 + 2 * 4 + 3 * 20 + 4 * 110);
    }

    #[test]
    fn closure_and_scale_up() {
        let torus = t(2, 2);
        let x = Polymer::single(&torus, Block::at(0, 0));
        assert_eq!(l_closure(&x, &torus).unwrap().size(), 1);
        let y = Polymer::single(&torus, Block::at(1, 1));
        assert_eq!(l_closure(&y, &torus).unwrap().size(), 1);
        let z = Polymer::new(&torus, [Block::at(1, 1), Block::at(2, 1)]).unwrap();
        assert_eq!(l_closure(&z, &torus).unwrap().size(), 2);
        assert_eq!(scale_up(&x, &torus).size(), 4);
        let round_trip = l_closure(&scale_up(&z, &torus), &torus.finer()).unwrap();
        assert_eq!(round_trip, z);
        assert!(l_closure(&x, &t(2, 0)).is_err());
    }

    #[test]
    fn gamma_values() {
        let torus = t(2, 3);
        let params = SetRegulatorParams::standard(&torus);
        let single = Polymer::single(&torus, Block::origin());
        assert_eq!(gamma_p(&single, &torus, &params), 32.0);
        let x = Polymer::new(&torus, [Block::at(0, 0), Block::at(1, 1), Block::at(2, 1)]).unwrap();
        for p in [-3, -1, 1, 2] {
            let r = gamma_p(&x, &torus, &params.with_shift(p)) / gamma_p(&x, &torus, &params);
            assert!((r - 2f64.powi(p * 3)).abs() < 1e-12 * r);
        }
        let (dist, theta) = block_metrics(&torus, Block::at(3, 3), Block::at(3, 3), 2.0);
        assert_eq!((dist, theta), (0.0, 1.0));
    }

    #[test]
    fn large_set_gamma_constant_is_finite() {
        let torus = t(2, 3);
        let params = SetRegulatorParams::standard(&torus);
        let all = enumerate_polymers(&torus, 6, Block::origin(), EnumerationCap::default()).unwrap();
        let worst = all
            .iter()
            .filter(|x| !is_small(x, &torus))
            .map(|x| large_set_gamma_ratio(x, &torus, &params, 3).unwrap())
            .fold(0.0f64, f64::max);
        assert!(worst.is_finite() && worst > 0.0);
    }

    #[test]
    fn mask_torus_agrees_with_polymers() {
        let torus = t(2, 2);
        let mt = MaskTorus::new(torus, EnumerationCap::default()).unwrap();
        for mask in 1..(1u64 << 16) {
            let p = mt.polymer_of(mask).unwrap();
            assert_eq!(mt.mask_of(&p), mask);
            assert_eq!(mt.is_connected(mask), p.is_connected());
            assert_eq!(mt.components(mask).len(), p.n_components());
        }
    }

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(2, 0, 0).len(), 1);
        assert_eq!(multi_indices(2, 1, 1).len(), 2);
        assert_eq!(multi_indices(2, 0, 4).len(), 15);
        assert_eq!(multi_indices(3, 2, 2).len(), 6);
        assert!(multi_indices(2, 1, 6).iter().all(|a| (1..=6).contains(&order(a))));
    }

    proptest! {
        #[test]
        fn components_idempotent_and_order_free(raw in proptest::collection::vec((0i64..8, 0i64..8), 1..12), seed in 0u64..1000) {
            let torus = t(2, 3);
            let blocks: Vec<Block> = raw.iter().map(|&(x, y)| Block::at(x, y)).collect();
            let a = connected_components(&blocks, &torus);
            let mut shuffled = blocks.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % n;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(&a, &connected_components(&shuffled, &torus));
            for c in &a {
                let again = connected_components(c.blocks(), &torus);
                prop_assert_eq!(again.len(), 1);
                prop_assert_eq!(&again[0], c);
            }
        }

        #[test]
        fn gamma_submultiplicative_with_slack(ax in 0i64..8, ay in 0i64..8, bx in 0i64..8, by in 0i64..8, cx in 0i64..8, cy in 0i64..8) {
            let torus = t(2, 3);
            let params = SetRegulatorParams::standard(&torus);
            let x = Polymer::new(&torus, [Block::at(ax, ay), Block::at(ax + 1, ay)]).unwrap();
            let y_blocks: Vec<Block> = [Block::at(bx, by), Block::at(cx, cy)].into_iter().filter(|b| !x.contains(&torus.reduce(*b))).collect();
            prop_assume!(!y_blocks.is_empty());
            let y = Polymer::new(&torus, y_blocks).unwrap();
            let z = Polymer::new(&torus, x.blocks().iter().chain(y.blocks()).copied()).unwrap();
            let gap = x.blocks().iter().flat_map(|a| y.blocks().iter().map(move |b| (a, b)))
                .map(|(a, b)| torus.distance(*a, *b)).fold(f64::INFINITY, f64::min);
            let slack = (1.0 + gap).powf(params.nu);
            prop_assert!(gamma_p(&z, &torus, &params) <= gamma_p(&x, &torus, &params) * gamma_p(&y, &torus, &params) * slack * (1.0 + 1e-12));
        }
    }
}
