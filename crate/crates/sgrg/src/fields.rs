//! Fields on the torus: grids with finite-difference derivatives, analytic trigonometric
//! fields, rescaling, field norms, large-field regulators and Gaussian sampling.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceKernel, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::lattice::{multi_indices, order, Block, MultiIndex, Point, Polymer, TorusSpec, MAX_DIM};

/// A real field that can be evaluated with derivatives at any point of its torus.
pub trait Field: Sync {
    fn torus(&self) -> &TorusSpec;
    fn value(&self, x: &Point) -> f64;
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64;
}

/// The zero field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub TorusSpec);

impl Field for ZeroField {
    fn torus(&self) -> &TorusSpec {
        &self.0
    }
    fn value(&self, _: &Point) -> f64 {
        0.0
    }
    fn deriv(&self, _: &Point, _: &MultiIndex) -> f64 {
        0.0
    }
}

/// Values on a periodic grid with `n_g` points per unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub torus: TorusSpec,
    pub n_g: usize,
    pub values: Vec<f64>,
}

impl FieldGrid {
    /// Zero field on the torus.
    pub fn zeros(torus: TorusSpec, n_g: usize) -> Result<Self> {
        if n_g < 4 {
            return Err(Error::param("n_g", "need at least 4 grid points per unit length"));
        }
        let n = (torus.side() as usize * n_g).pow(torus.d as u32);
        if n > 1 << 24 {
            return Err(Error::ResourceCap(format!("grid of {n} points exceeds 2^24")));
        }
        Ok(Self { torus, n_g, values: vec![0.0; n] })
    }

    /// Sample another field on the grid.
    pub fn from_field(f: &dyn Field, n_g: usize) -> Result<Self> {
        let mut g = Self::zeros(*f.torus(), n_g)?;
        for i in 0..g.values.len() {
            let x = g.point(i);
            g.values[i] = f.value(&x);
        }
        Ok(g)
    }

    /// Grid points per axis.
    pub fn per_axis(&self) -> usize {
        self.torus.side() as usize * self.n_g
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n_g as f64
    }

    fn index(&self, c: &[i64]) -> usize {
        let n = self.per_axis() as i64;
        let mut i = 0usize;
        for a in (0..self.torus.d).rev() {
            i = i * n as usize + c[a].rem_euclid(n) as usize;
        }
        i
    }

    /// Position of grid point `i`.
    pub fn point(&self, i: usize) -> Point {
        let n = self.per_axis();
        let mut p = [0.0; MAX_DIM];
        let mut r = i;
        for a in 0..self.torus.d {
            p[a] = (r % n) as f64 * self.spacing();
            r /= n;
        }
        p
    }

    fn at(&self, c: &[i64]) -> f64 {
        self.values[self.index(c)]
    }

    /// Reach of the central stencil for `α` along each axis.
    pub fn stencil_reach(alpha: &MultiIndex) -> u32 {
        alpha.iter().map(|a| a.div_ceil(2)).max().unwrap_or(0)
    }

    /// Second-order central difference `∂^α` at an integer grid coordinate.
    fn stencil(&self, c: &[i64], alpha: &MultiIndex) -> f64 {
        let d = self.torus.d;
        // expand the product of one-dimensional stencils into (offset, weight) lists
        let h = self.spacing();
        let mut terms: Vec<([i64; MAX_DIM], f64)> = vec![([0; MAX_DIM], 1.0)];
        for a in 0..d {
            let k = alpha[a];
            let mut axis: Vec<(i64, f64)> = vec![(0, 1.0)];
            for _ in 0..k / 2 {
                axis = convolve(&axis, &[(-1, 1.0 / (h * h)), (0, -2.0 / (h * h)), (1, 1.0 / (h * h))]);
            }
            if k % 2 == 1 {
                axis = convolve(&axis, &[(-1, -0.5 / h), (1, 0.5 / h)]);
            }
            let mut next = Vec::with_capacity(terms.len() * axis.len());
            for (off, w) in &terms {
                for (o, v) in &axis {
                    let mut n = *off;
                    n[a] += o;
                    next.push((n, w * v));
                }
            }
            terms = next;
        }
        let mut s = 0.0;
        for (off, w) in terms {
            let mut cc = [0i64; MAX_DIM];
            for a in 0..d {
                cc[a] = c[a] + off[a];
            }
            s += w * self.at(&cc[..d]);
        }
        s
    }

    /// Grid of `∂^α φ` by central differences.
    pub fn derivative(&self, alpha: &MultiIndex, s_max: u32) -> Result<FieldGrid> {
        if order(alpha) > s_max {
            return Err(Error::param("alpha", format!("order {} exceeds s = {s_max}", order(alpha))));
        }
        if Self::stencil_reach(alpha) as usize >= self.n_g {
            return Err(Error::param("n_g", "grid does not exceed the stencil reach"));
        }
        let mut out = self.clone();
        for i in 0..self.values.len() {
            let c = self.coords(i);
            out.values[i] = self.stencil(&c[..self.torus.d], alpha);
        }
        Ok(out)
    }

    fn coords(&self, i: usize) -> [i64; MAX_DIM] {
        let n = self.per_axis();
        let mut c = [0i64; MAX_DIM];
        let mut r = i;
        for a in 0..self.torus.d {
            c[a] = (r % n) as i64;
            r /= n;
        }
        c
    }

    /// Multilinear interpolation of a stencil-valued function at `x`.
    fn interp<F: Fn(&[i64]) -> f64>(&self, x: &Point, f: F) -> f64 {
        let d = self.torus.d;
        let mut base = [0i64; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..d {
            let u = x[a] * self.n_g as f64;
            let fl = u.floor();
            let fr = u - fl;
            // snap values within rounding of a grid line
            if fr < 1e-9 || fr > 1.0 - 1e-9 {
                base[a] = u.round() as i64;
                frac[a] = 0.0;
            } else {
                base[a] = fl as i64;
                frac[a] = fr;
            }
        }
        let mut s = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut c = base;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    c[a] += 1;
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                s += w * f(&c[..d]);
            }
        }
        s
    }

    /// Flat binary snapshot with a JSON header line.
    pub fn write_snapshot<W: Write>(&self, w: &mut W, seed: Option<u64>) -> std::io::Result<()> {
        let header = serde_json::json!({ "torus": self.torus, "n_g": self.n_g, "seed": seed, "len": self.values.len() });
        writeln!(w, "{header}")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a snapshot written by [`FieldGrid::write_snapshot`].
    pub fn read_snapshot<R: Read>(r: &mut R) -> std::io::Result<(Self, Option<u64>)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| std::io::Error::other("missing header"))?;
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).map_err(std::io::Error::other)?;
        let torus: TorusSpec = serde_json::from_value(header["torus"].clone()).map_err(std::io::Error::other)?;
        let n_g = header["n_g"].as_u64().ok_or_else(|| std::io::Error::other("bad n_g"))? as usize;
        let seed = header["seed"].as_u64();
        let values = bytes[nl + 1..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((Self { torus, n_g, values }, seed))
    }
}

fn convolve(a: &[(i64, f64)], b: &[(i64, f64)]) -> Vec<(i64, f64)> {
    let mut out: Vec<(i64, f64)> = Vec::new();
    for (oa, wa) in a {
        for (ob, wb) in b {
            let o = oa + ob;
            match out.iter_mut().find(|(k, _)| *k == o) {
                Some(e) => e.1 += wa * wb,
                None => out.push((o, wa * wb)),
            }
        }
    }
    out
}

impl Field for FieldGrid {
    fn torus(&self) -> &TorusSpec {
        &self.torus
    }
    fn value(&self, x: &Point) -> f64 {
        self.interp(x, |c| self.at(c))
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        if order(alpha) == 0 {
            return self.value(x);
        }
        self.interp(x, |c| self.stencil(c, alpha))
    }
}

/// `c + Σ_k a_k cos(p_k·x + ψ_k)` with `p_k` on the dual lattice; derivatives are exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticField {
    pub torus: TorusSpec,
    pub constant: f64,
    pub modes: Vec<TrigMode>,
}

/// One cosine mode of an [`AnalyticField`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrigMode {
    pub p: [f64; MAX_DIM],
    pub amplitude: f64,
    pub phase: f64,
}

impl AnalyticField {
    pub fn constant(torus: TorusSpec, c: f64) -> Self {
        Self { torus, constant: c, modes: Vec::new() }
    }

    /// Add a mode with integer wave numbers `n` (so `p = 2π n / side`).
    pub fn with_mode(mut self, n: &[i64], amplitude: f64, phase: f64) -> Self {
        let mut p = [0.0; MAX_DIM];
        let side = self.torus.side() as f64;
        for (a, k) in n.iter().enumerate() {
            p[a] = 2.0 * PI * *k as f64 / side;
        }
        self.modes.push(TrigMode { p, amplitude, phase });
        self
    }

    /// Random band-limited field with `n_modes` modes, `|p_a| ≤ p_cut`, and amplitudes
    /// uniform in `[-amp, amp]`, plus a random constant in `[-π, π]`.
    pub fn random<R: Rng + ?Sized>(torus: TorusSpec, n_modes: usize, p_cut: f64, amp: f64, rng: &mut R) -> Self {
        let side = torus.side() as f64;
        let kmax = ((p_cut * side / (2.0 * PI)).floor() as i64).max(1);
        let mut f = Self::constant(torus, rng.gen_range(-PI..PI));
        for _ in 0..n_modes {
            let n: Vec<i64> = (0..torus.d).map(|_| rng.gen_range(-kmax..=kmax)).collect();
            let a = rng.gen_range(-amp..=amp);
            let ph = rng.gen_range(0.0..2.0 * PI);
            f = f.with_mode(&n, a, ph);
        }
        f
    }

    /// Field plus a constant shift.
    pub fn shifted(&self, c: f64) -> Self {
        let mut f = self.clone();
        f.constant += c;
        f
    }

    /// Negated field.
    pub fn negated(&self) -> Self {
        let mut f = self.clone();
        f.constant = -f.constant;
        for m in &mut f.modes {
            m.amplitude = -m.amplitude;
        }
        f
    }
}

impl Field for AnalyticField {
    fn torus(&self) -> &TorusSpec {
        &self.torus
    }
    fn value(&self, x: &Point) -> f64 {
        self.deriv(x, &[0; MAX_DIM])
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        let ord = order(alpha);
        let mut s = if ord == 0 { self.constant } else { 0.0 };
        for m in &self.modes {
            let mut mono = 1.0;
            let mut phase = m.phase;
            for a in 0..self.torus.d {
                mono *= m.p[a].powi(alpha[a] as i32);
                phase += m.p[a] * x[a];
            }
            // ∂^α cos(θ) cycles cos, -sin, -cos, sin
            let t = match ord % 4 {
                0 => phase.cos(),
                1 => -phase.sin(),
                2 => -phase.cos(),
                _ => phase.sin(),
            };
            s += m.amplitude * mono * t;
        }
        s
    }
}

/// `φ_ℓ(x) = ℓ^{-(d-2)/2} φ(x/ℓ)` on the torus `ℓ` times finer.
pub struct ScaledField<'a> {
    inner: &'a dyn Field,
    torus: TorusSpec,
    ell: f64,
}

impl<'a> ScaledField<'a> {
    /// Rescale a field by the block scale of its torus.
    pub fn new(inner: &'a dyn Field) -> Self {
        let t = inner.torus().finer();
        Self { inner, torus: t, ell: f64::from(t.l) }
    }
}

impl Field for ScaledField<'_> {
    fn torus(&self) -> &TorusSpec {
        &self.torus
    }
    fn value(&self, x: &Point) -> f64 {
        self.deriv(x, &[0; MAX_DIM])
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        let d = self.torus.d;
        let mut y = [0.0; MAX_DIM];
        for a in 0..d {
            y[a] = x[a] / self.ell;
        }
        let amp = self.ell.powf(-(d as f64 - 2.0) / 2.0 - order(alpha) as f64);
        amp * self.inner.deriv(&y, alpha)
    }
}

/// Rescale a grid: `φ_ℓ` sampled on the finer torus with the same `n_g`.
pub fn scale_field(phi: &FieldGrid) -> Result<FieldGrid> {
    let s = ScaledField::new(phi);
    FieldGrid::from_field(&s, phi.n_g)
}

/// Pointwise sum of two fields on the same torus.
pub struct SumField<'a> {
    pub a: &'a dyn Field,
    pub b: &'a dyn Field,
}

impl Field for SumField<'_> {
    fn torus(&self) -> &TorusSpec {
        self.a.torus()
    }
    fn value(&self, x: &Point) -> f64 {
        self.a.value(x) + self.b.value(x)
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        self.a.deriv(x, alpha) + self.b.deriv(x, alpha)
    }
}

/// A field plus a constant.
pub struct ShiftField<'a> {
    pub inner: &'a dyn Field,
    pub shift: f64,
}

impl Field for ShiftField<'_> {
    fn torus(&self) -> &TorusSpec {
        self.inner.torus()
    }
    fn value(&self, x: &Point) -> f64 {
        self.inner.value(x) + self.shift
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        self.inner.deriv(x, alpha) + if order(alpha) == 0 { self.shift } else { 0.0 }
    }
}

/// Values at a finite set of points, for fields only ever read at those points.
#[derive(Debug, Clone)]
pub struct PointField {
    pub torus: TorusSpec,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

impl Field for PointField {
    fn torus(&self) -> &TorusSpec {
        &self.torus
    }
    fn value(&self, x: &Point) -> f64 {
        let d = self.torus.d;
        for (p, v) in self.points.iter().zip(&self.values) {
            let z = self.torus.point_delta(p, x);
            if z[..d].iter().all(|c| c.abs() < 1e-12) {
                return *v;
            }
        }
        panic!("point field read at an unsampled point {x:?}");
    }
    fn deriv(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        assert_eq!(order(alpha), 0, "point fields carry no derivatives");
        self.value(x)
    }
}

/// Trapezoid nodes and weights over one unit block.
pub fn block_nodes(b: &Block, d: usize, pts: usize) -> Vec<(Point, f64)> {
    assert!(pts >= 2);
    let h = 1.0 / (pts - 1) as f64;
    let mut out = Vec::with_capacity(pts.pow(d as u32));
    let mut idx = vec![0usize; d];
    loop {
        let mut p = [0.0; MAX_DIM];
        let mut w = 1.0;
        for a in 0..d {
            p[a] = b.0[a] as f64 + h * idx[a] as f64;
            w *= if idx[a] == 0 || idx[a] == pts - 1 { h / 2.0 } else { h };
        }
        out.push((p, w));
        let mut a = 0;
        loop {
            if a == d {
                return out;
            }
            idx[a] += 1;
            if idx[a] == pts {
                idx[a] = 0;
                a += 1;
            } else {
                break;
            }
        }
    }
}

/// A boundary face of a polymer: a block and an outward axis direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub block: Block,
    pub axis: usize,
    pub upper: bool,
}

/// Faces of blocks of `X` not shared with another block of `X`.
pub fn boundary_faces(x: &Polymer, torus: &TorusSpec) -> Vec<Face> {
    let d = torus.d;
    let mut out = Vec::new();
    for b in x.blocks() {
        for axis in 0..d {
            for upper in [false, true] {
                let mut o = [0i64; MAX_DIM];
                o[axis] = if upper { 1 } else { -1 };
                let nb = torus.reduce(b.offset(&o[..d]));
                if !x.contains(&nb) {
                    out.push(Face { block: *b, axis, upper });
                }
            }
        }
    }
    out
}

/// Trapezoid nodes and weights on a face.
pub fn face_nodes(f: &Face, d: usize, pts: usize) -> Vec<(Point, f64)> {
    let h = 1.0 / (pts - 1) as f64;
    let mut out = Vec::new();
    let free: Vec<usize> = (0..d).filter(|a| *a != f.axis).collect();
    let mut idx = vec![0usize; free.len()];
    loop {
        let mut p = [0.0; MAX_DIM];
        for a in 0..d {
            p[a] = f.block.0[a] as f64;
        }
        p[f.axis] += if f.upper { 1.0 } else { 0.0 };
        let mut w = 1.0;
        for (k, a) in free.iter().enumerate() {
            p[*a] += h * idx[k] as f64;
            w *= if idx[k] == 0 || idx[k] == pts - 1 { h / 2.0 } else { h };
        }
        out.push((p, w));
        if free.is_empty() {
            return out;
        }
        let mut k = 0;
        loop {
            if k == free.len() {
                return out;
            }
            idx[k] += 1;
            if idx[k] == pts {
                idx[k] = 0;
                k += 1;
            } else {
                break;
            }
        }
    }
}

/// Parameters of the large-field regulator and field norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatorParams {
    pub kappa: f64,
    pub c: f64,
    pub c_s: f64,
    pub r: u32,
    pub s: u32,
    pub h: f64,
    pub ell: f64,
    /// Quadrature points per unit side for regulator integrals.
    pub quad_pts: usize,
}

impl RegulatorParams {
    /// Infrared preset: `r = 4`, `s = 6`.
    pub fn ir(kappa: f64, c: f64, c_s: f64, h: f64) -> Self {
        Self { kappa, c, c_s, r: 4, s: 6, h, ell: 2.0, quad_pts: 9 }
    }

    /// Ultraviolet preset: `r = 2`, `s = 4`.
    pub fn uv(kappa: f64, c: f64, c_s: f64, h: f64) -> Self {
        Self { kappa, c, c_s, r: 2, s: 4, h, ell: 2.0, quad_pts: 9 }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if f64::from(self.s) <= d as f64 / 2.0 + f64::from(self.r) {
            return Err(Error::param("s", "need s > d/2 + r"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::param("kappa", "need 0 < kappa <= 1"));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::param("c", "need 0 < c <= 1"));
        }
        if !(self.h > 0.0) {
            return Err(Error::param("h", "must be positive"));
        }
        Ok(())
    }
}

/// `(‖φ‖_{∞,r,X}, ‖φ‖_{2,s,X})` with grid suprema and trapezoid integrals.
pub fn field_norms(phi: &dyn Field, x: &Polymer, r: u32, s: u32, pts: usize) -> (f64, f64) {
    let d = phi.torus().d;
    let sup_alphas = multi_indices(d, 0, r);
    let l2_alphas = multi_indices(d, 0, s);
    let mut sup = 0.0f64;
    let mut l2 = 0.0;
    for b in x.blocks() {
        for (p, w) in block_nodes(b, d, pts) {
            for a in &sup_alphas {
                sup = sup.max(phi.deriv(&p, a).abs());
            }
            for a in &l2_alphas {
                l2 += w * phi.deriv(&p, a).powi(2);
            }
        }
    }
    (sup, l2.sqrt())
}

/// Regulator weight multipliers: bulk `|α|` term and boundary term.
fn regulator_weights(scaled: Option<f64>, ord: u32) -> (f64, f64) {
    match scaled {
        None => (1.0, 1.0),
        Some(ell) => (ell.powi(2 * ord as i32 - 2), ell),
    }
}

/// `log G(κ, X, φ)`, or the scaled variant `log G_ℓ` when `scaled = Some(ℓ)`.
pub fn log_regulator(phi: &dyn Field, x: &Polymer, p: &RegulatorParams, scaled: Option<f64>) -> f64 {
    log_regulator_kappa(phi, x, p, p.kappa, scaled)
}

/// `log G` with an explicit `κ`.
pub fn log_regulator_kappa(phi: &dyn Field, x: &Polymer, p: &RegulatorParams, kappa: f64, scaled: Option<f64>) -> f64 {
    let torus = *phi.torus();
    let d = torus.d;
    let alphas = multi_indices(d, 1, p.s);
    let mut bulk = 0.0;
    for b in x.blocks() {
        for (pt, w) in block_nodes(b, d, p.quad_pts) {
            for a in &alphas {
                let (wb, _) = regulator_weights(scaled, order(a));
                bulk += wb * w * phi.deriv(&pt, a).powi(2);
            }
        }
    }
    let firsts = multi_indices(d, 1, 1);
    let mut bdry = 0.0;
    for f in boundary_faces(x, &torus) {
        for (pt, w) in face_nodes(&f, d, p.quad_pts) {
            for a in &firsts {
                bdry += w * phi.deriv(&pt, a).powi(2);
            }
        }
    }
    let (_, wbd) = regulator_weights(scaled, 1);
    kappa * bulk + kappa * p.c * wbd * bdry
}

/// `G(κ, X, φ)`.
pub fn regulator(phi: &dyn Field, x: &Polymer, p: &RegulatorParams, scaled: Option<f64>) -> f64 {
    log_regulator(phi, x, p, scaled).exp()
}

/// Measured discrete Sobolev constant:
/// `max |∂φ(x)|^2 / Σ_{1≤|α|≤s} ∫_Δ |∂^α φ|^2` over random band-limited fields, times `safety`.
pub fn measure_sobolev_constant(torus: &TorusSpec, s: u32, samples: usize, seed: u64, safety: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = torus.d;
    let b = Block::origin();
    let firsts = multi_indices(d, 1, 1);
    let alphas = multi_indices(d, 1, s);
    let nodes = block_nodes(&b, d, 9);
    let mut best = 0.0f64;
    for k in 0..samples {
        let p_cut = [0.8, 1.6, 3.2][k % 3];
        let f = AnalyticField::random(*torus, 1 + k % 4, p_cut, 1.0, &mut rng);
        let mut denom = 0.0;
        let mut num = 0.0f64;
        for (p, w) in &nodes {
            for a in &alphas {
                denom += w * f.deriv(p, a).powi(2);
            }
            let g2: f64 = firsts.iter().map(|a| f.deriv(p, a).powi(2)).sum();
            num = num.max(g2);
        }
        if denom > 1e-12 {
            best = best.max(num / denom);
        }
    }
    best * safety
}

/// Boundary strength `c = (8 L c_s)^{-1}`.
pub fn boundary_strength(l: u32, c_s: f64) -> f64 {
    1.0 / (8.0 * f64::from(l) * c_s)
}

/// A seeded Gaussian field ensemble on a point set.
#[derive(Debug, Clone)]
pub struct GaussianEnsemble {
    pub covariance: CovarianceMatrix,
    pub seed: u64,
    pub n_samples: usize,
}

impl GaussianEnsemble {
    /// Iterator of draws; each draw is the vector of values at the matrix points.
    pub fn samples(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_samples).map(move |_| self.covariance.sample(&mut rng))
    }

    /// Draws on an independent stream `stream`, for parallel chains.
    pub fn stream(&self, stream: u64) -> impl Iterator<Item = Vec<f64>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..self.n_samples).map(move |_| self.covariance.sample(&mut rng))
    }
}

/// Gaussian sample on every point of a grid.
pub fn gaussian_sample<R: Rng + ?Sized>(cov: &CovarianceMatrix, template: &FieldGrid, rng: &mut R) -> FieldGrid {
    let mut g = template.clone();
    g.values = cov.sample(rng);
    g
}

/// A Gaussian field with the covariance of a Fourier-mode kernel, drawn exactly in
/// momentum space: each pair `±p` carries `√(2ĉ(p)) (a cos p·x + b sin p·x)`.
pub fn spectral_sample<R: Rng + ?Sized>(c: &CovarianceKernel, rng: &mut R) -> Result<AnalyticField> {
    let torus = *c
        .torus()
        .ok_or_else(|| Error::param("kernel", "spectral sampling needs a torus kernel"))?;
    let modes = c
        .fourier_modes()
        .ok_or_else(|| Error::param("kernel", "spectral sampling needs a Fourier-mode kernel"))?;
    let mut f = AnalyticField::constant(torus, 0.0);
    for (p, w) in modes {
        // one representative per ±p pair: the first nonzero component is positive
        let lead = p[..torus.d].iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
        if lead <= 0.0 || w <= 0.0 {
            continue;
        }
        let a: f64 = rng.sample(rand_distr::StandardNormal);
        let b: f64 = rng.sample(rand_distr::StandardNormal);
        let amplitude = (2.0 * w).sqrt() * a.hypot(b);
        f.modes.push(TrigMode { p, amplitude, phase: -b.atan2(a) });
    }
    Ok(f)
}

/// `E[e^{i Σ q_a φ(x_a)}] = exp(-½ Σ_{a,b} q_a q_b C(x_a - x_b))`.
pub fn charge_cloud_expectation(charges: &[(i32, Point)], c: &CovarianceKernel, torus: &TorusSpec) -> Complex64 {
    Complex64::new((-0.5 * charge_quadratic_form(charges, c, torus)).exp(), 0.0)
}

/// `Σ_{a,b} q_a q_b C(x_a - x_b)`.
pub fn charge_quadratic_form(charges: &[(i32, Point)], c: &CovarianceKernel, torus: &TorusSpec) -> f64 {
    let mut s = 0.0;
    for (qa, xa) in charges {
        for (qb, xb) in charges {
            s += f64::from(qa * qb) * c.value(&torus.point_delta(xa, xb));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RunningStats;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn torus(m: u32) -> TorusSpec {
        TorusSpec::plane(2, m).unwrap()
    }

    #[test]
    fn spectral_sample_reproduces_covariance() {
        let t = torus(3);
        let c = CovarianceKernel::full(t, 0.0).unwrap().scaled(3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = ([0.3, 0.2, 0.0, 0.0], [1.7, 0.9, 0.0, 0.0]);
        let (mut xx, mut xy) = (RunningStats::default(), RunningStats::default());
        for _ in 0..20_000 {
            let f = spectral_sample(&c, &mut rng).unwrap();
            let (a, b) = (f.value(&x), f.value(&y));
            xx.push(a * a);
            xy.push(a * b);
        }
        let cxy = c.value(&t.point_delta(&x, &y));
        assert!((xx.mean() - c.at_zero()).abs() < 4.0 * xx.std_err());
        assert!((xy.mean() - cxy).abs() < 4.0 * xy.std_err());
    }

    #[test]
    fn constant_field_has_zero_derivatives() {
        let t = torus(1);
        let mut g = FieldGrid::zeros(t, 8).unwrap();
        g.values.iter_mut().for_each(|v| *v = 1.7);
        let dx = g.derivative(&[1, 0, 0, 0], 6).unwrap();
        assert!(dx.values.iter().all(|v| v.abs() < 1e-12));
        let x = Polymer::single(&t, Block::origin());
        let (sup, _) = field_norms(&g, &x, 2, 4, 5);
        assert_relative_eq!(sup, 1.7, epsilon = 1e-12);
    }

    #[test]
    fn central_difference_is_second_order() {
        let t = torus(1);
        let f = AnalyticField::constant(t, 0.0).with_mode(&[1, 0], 1.0, PI / 2.0);
        let mut errs = Vec::new();
        for n_g in [8, 16, 32] {
            let g = FieldGrid::from_field(&f, n_g).unwrap();
            let d = g.derivative(&[1, 0, 0, 0], 6).unwrap();
            let e = (0..g.values.len())
                .map(|i| (d.values[i] - f.deriv(&g.point(i), &[1, 0, 0, 0])).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn stencil_reach_enforced() {
        let g = FieldGrid::zeros(torus(1), 4).unwrap();
        assert!(g.derivative(&[8, 0, 0, 0], 8).is_err());
        assert!(g.derivative(&[3, 0, 0, 0], 2).is_err());
        assert!(FieldGrid::zeros(torus(1), 3).is_err());
    }

    #[test]
    fn scaling_preserves_amplitude_in_two_dimensions() {
        let t = torus(1);
        let f = AnalyticField::constant(t, 0.4).with_mode(&[1, 1], 0.5, 0.3);
        let s = ScaledField::new(&f);
        assert_eq!(s.torus().side(), 4);
        let x = [1.3, 2.1, 0.0, 0.0];
        assert_relative_eq!(s.value(&x), f.value(&[0.65, 1.05, 0.0, 0.0]), epsilon = 1e-14);
        assert_relative_eq!(s.deriv(&x, &[1, 0, 0, 0]), 0.5 * f.deriv(&[0.65, 1.05, 0.0, 0.0], &[1, 0, 0, 0]), epsilon = 1e-14);
        let c = AnalyticField::constant(t, 2.0);
        assert_eq!(ScaledField::new(&c).value(&x), 2.0);
    }

    #[test]
    fn scaling_halves_amplitude_in_four_dimensions() {
        let t = TorusSpec::new(4, 2, 1).unwrap();
        let c = AnalyticField::constant(t, 2.0);
        assert_relative_eq!(ScaledField::new(&c).value(&[0.1, 0.2, 0.3, 0.4]), 1.0);
    }

    #[test]
    fn regulator_trivial_and_scaled_weights() {
        let t = torus(2);
        let x = Polymer::single(&t, Block::origin());
        let p = RegulatorParams::uv(0.1, 0.2, 1.0, 1.0);
        assert_eq!(regulator(&ZeroField(t), &x, &p, None), 1.0);
        // a pure first-derivative-only functional: compare weights through linearity in κ
        let f = AnalyticField::constant(t, 0.0).with_mode(&[1, 0], 0.3, 0.0);
        let mut p1 = p;
        p1.s = 1;
        p1.r = 0;
        let base = log_regulator(&f, &x, &p1, None);
        let scaled = log_regulator(&f, &x, &p1, Some(2.0));
        // |α| = 1 bulk weight unchanged, boundary doubled
        let mut pb = p1;
        pb.c = 0.0;
        let bulk = log_regulator(&f, &x, &pb, None);
        assert_relative_eq!(scaled - bulk, 2.0 * (base - bulk), max_relative = 1e-12);
        // |α| = 2 bulk weight times four
        let mut p2 = pb;
        p2.s = 2;
        let with2 = log_regulator(&f, &x, &p2, None) - bulk;
        let with2s = log_regulator(&f, &x, &p2, Some(2.0)) - bulk;
        assert_relative_eq!(with2s, 4.0 * with2, max_relative = 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let t = torus(1);
        let f = AnalyticField::constant(t, 0.2).with_mode(&[1, 0], 1.0, 0.1);
        let g = FieldGrid::from_field(&f, 4).unwrap();
        let mut buf = Vec::new();
        g.write_snapshot(&mut buf, Some(9)).unwrap();
        let (h, seed) = FieldGrid::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(h, g);
        assert_eq!(seed, Some(9));
    }

    #[test]
    fn single_charge_expectation() {
        let t = torus(2);
        let c = CovarianceKernel::slice(t, 0.0).unwrap();
        let e = charge_cloud_expectation(&[(2, [0.5, 0.5, 0.0, 0.0])], &c, &t);
        assert_relative_eq!(e.re, (-2.0 * c.at_zero()).exp(), max_relative = 1e-14);
    }

    #[test]
    fn two_charge_second_derivative_gives_covariance() {
        // E[φ(x)φ(y)] = -∂_s∂_t log-free: d²/dsdt E[e^{i(sφ(x)+tφ(y))}] at 0 equals -C(x-y)
        let t = torus(2);
        let c = CovarianceKernel::slice(t, 0.0).unwrap();
        let x = [0.25, 0.5, 0.0, 0.0];
        let y = [1.5, 0.75, 0.0, 0.0];
        let ch = |s: f64, u: f64| {
            let q = s * s * c.at_zero() + u * u * c.at_zero() + 2.0 * s * u * c.value(&t.point_delta(&x, &y));
            (-0.5 * q).exp()
        };
        let h = 1e-3;
        let mixed = (ch(h, h) - ch(h, -h) - ch(-h, h) + ch(-h, -h)) / (4.0 * h * h);
        assert_relative_eq!(-mixed, c.value(&t.point_delta(&x, &y)), epsilon = 1e-6);
    }

    #[test]
    fn sample_covariance_matches_kernel() {
        let t = torus(2);
        let c = CovarianceKernel::slice(t, 0.0).unwrap();
        let pts = vec![[0.0, 0.0, 0.0, 0.0], [0.5, 0.25, 0.0, 0.0], [2.0, 1.0, 0.0, 0.0]];
        let m = CovarianceMatrix::new(&c, pts.clone()).unwrap();
        let ens = GaussianEnsemble { covariance: m, seed: 11, n_samples: 100_000 };
        let mut stats = vec![RunningStats::default(); 9];
        for s in ens.samples() {
            for i in 0..3 {
                for j in 0..3 {
                    stats[3 * i + j].push(s[i] * s[j]);
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let st = &stats[3 * i + j];
                let target = c.value(&t.point_delta(&pts[i], &pts[j]));
                assert!((st.mean() - target).abs() <= 3.0 * st.std_err() + 1e-12, "{i}{j}");
            }
        }
    }

    #[test]
    fn sobolev_constant_bounds_sup_by_l2() {
        let t = torus(2);
        let cs = measure_sobolev_constant(&t, 4, 200, 5, 2.0);
        assert!(cs.is_finite() && cs > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let f = AnalyticField::random(t, 3, 2.0, 1.0, &mut rng);
            let mut l2 = 0.0;
            for (p, w) in block_nodes(&Block::origin(), 2, 9) {
                for a in multi_indices(2, 1, 4) {
                    l2 += w * f.deriv(&p, &a).powi(2);
                }
            }
            let g2 = (0..2).map(|mu| {
                let a = crate::lattice::unit_index(mu);
                block_nodes(&Block::origin(), 2, 9).iter().map(|(p, _)| f.deriv(p, &a).powi(2)).fold(0.0, f64::max)
            });
            for g in g2 {
                assert!(g <= cs * l2 + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn regulator_multiplies_on_boundary_disjoint_unions(seed in 0u64..1000, dx in 2i64..3, dy in 2i64..3) {
            let t = torus(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = AnalyticField::random(t, 3, 2.0, 0.5, &mut rng);
            let p = RegulatorParams::uv(0.05, 0.1, 1.0, 1.0);
            let x = Polymer::single(&t, Block::origin());
            let y = Polymer::single(&t, Block::at(dx, dy));
            let z = Polymer::new(&t, [Block::origin(), Block::at(dx, dy)]).unwrap();
            let lhs = log_regulator(&f, &x, &p, None) + log_regulator(&f, &y, &p, None);
            let rhs = log_regulator(&f, &z, &p, None);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
