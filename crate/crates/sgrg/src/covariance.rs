//! Covariance kernels on the torus and in infinite volume, with derived scalars.
//!
//! Every kernel is a radial momentum symbol `ĝ(p)` times `p^{-2}`:
//!
//! * slice: `p^{-2}[(e^{p^4}+σ)^{-1} - (e^{L^4 p^4}+σ)^{-1}]`
//! * full: `p^{-2}(e^{p^4}+σ)^{-1}`
//! * cutoff at level `N`: `p^{-2} e^{-p^4 L^{-4N}}`
//!
//! Torus kernels are finite Fourier sums over `p ∈ 2π L^{-M} Z^d`, `p ≠ 0`, truncated at a
//! radius where the tail is certified below tolerance. The continuum slice kernel (d = 2)
//! is a polar quadrature of the same symbol.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{enumerate_polymers, is_small, multi_indices, order, Block, EnumerationCap, MultiIndex, Point, TorusSpec, MAX_DIM};
use crate::numerics::GaussLegendre;

/// Largest admissible `|σ|`.
pub const SIGMA_MAX: f64 = 0.1;
/// Absolute tolerance for the truncated Fourier tail.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;
/// Highest derivative order a kernel is certified for by default.
pub const DEFAULT_MAX_ORDER: u32 = 8;
/// Mode count above which a torus slice kernel falls back to the continuum kernel.
pub const MODE_CAP: usize = 200_000;

/// Which covariance a kernel represents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelKind {
    Slice,
    Full,
    Cutoff { n: u32 },
    Continuum,
}

/// `(e^{u}+σ)^{-1}` with `u = p^4`, safe for large `u`.
fn inv_exp_plus(u: f64, sigma: f64) -> f64 {
    if u > 700.0 {
        0.0
    } else {
        1.0 / (u.exp() + sigma)
    }
}

/// Radial symbol of the slice covariance, including the `p^{-2}` factor.
pub fn slice_symbol(p: f64, l: f64, sigma: f64) -> f64 {
    let u = p.powi(4);
    let ul = u * l.powi(4);
    if p == 0.0 {
        return 0.0;
    }
    if ul > 700.0 {
        return inv_exp_plus(u, sigma) / (p * p);
    }
    // (e^{ul} - e^{u}) / ((e^u+σ)(e^{ul}+σ)), with the difference via expm1.
    let num = u.exp() * (ul - u).exp_m1();
    num / ((u.exp() + sigma) * (ul.exp() + sigma)) / (p * p)
}

fn symbol(kind: KernelKind, p: f64, l: f64, sigma: f64) -> f64 {
    match kind {
        KernelKind::Slice | KernelKind::Continuum => slice_symbol(p, l, sigma),
        KernelKind::Full => inv_exp_plus(p.powi(4), sigma) / (p * p),
        KernelKind::Cutoff { n } => {
            let s = l.powi(-(n as i32));
            (-(p * s).powi(4)).exp() / (p * p)
        }
    }
}

/// Momentum scale beyond which a kernel's symbol is negligible.
fn decay_scale(kind: KernelKind, l: f64) -> f64 {
    match kind {
        KernelKind::Cutoff { n } => l.powi(n as i32),
        _ => 1.0,
    }
}

/// Bound on the Fourier tail `|Λ|^{-1} Σ_{|p|>R} |p|^{k} |ĝ(p)|` for a lattice of spacing
/// `2π/side`, by comparison with the radial integral outside `R - δ`.
fn tail_bound(d: usize, side: f64, r: f64, max_order: u32) -> f64 {
    let delta = 2.0 * PI * (d as f64).sqrt() / side;
    let lo = (r - delta).max(1e-9);
    let sphere = match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI * PI,
    };
    let gl = GaussLegendre::new(40);
    let k = max_order as i32;
    let integrand = |q: f64| -> f64 {
        // envelope of |ĝ| with |σ| ≤ 0.1 is 1.2 e^{-q^4} q^{-2}
        let env = 1.2 * (-q.powi(4)).exp() / (q * q);
        sphere * q.powi(d as i32 - 1) * q.powi(k).max(1.0) * env
    };
    let width = 4.0;
    gl.integrate(lo, lo + width, integrand) / (2.0 * PI).powi(d as i32)
}

/// Radius needed so the tail falls below `tol`.
fn required_p_max(kind: KernelKind, d: usize, l: f64, side: f64, max_order: u32, tol: f64) -> f64 {
    let s = decay_scale(kind, l);
    let mut r = 1.0;
    while tail_bound(d, side / s, r, max_order) > tol {
        r += 0.05;
    }
    r * s
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    p: [f64; MAX_DIM],
    weight: f64,
}

#[derive(Debug)]
enum Method {
    Modes(Vec<Mode>),
    Polar,
}

/// A covariance kernel with evaluation memo.
#[derive(Debug, Clone)]
pub struct CovarianceKernel {
    kind: KernelKind,
    sigma: f64,
    l: u32,
    d: usize,
    torus: Option<TorusSpec>,
    scale: f64,
    p_max: f64,
    max_order: u32,
    method: Arc<Method>,
    memo: Arc<RwLock<HashMap<([u64; MAX_DIM], MultiIndex), f64>>>,
}

/// Builder options for a kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    /// Explicit momentum radius; defaults to the certified radius.
    pub p_max: Option<f64>,
    pub max_order: u32,
    pub tail_tol: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { p_max: None, max_order: DEFAULT_MAX_ORDER, tail_tol: DEFAULT_TAIL_TOL }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.abs() <= SIGMA_MAX) {
        return Err(Error::param("sigma", format!("|sigma| = {sigma} exceeds {SIGMA_MAX}")));
    }
    Ok(())
}

impl CovarianceKernel {
    /// Slice covariance `C^M(σ)` on the torus.
    pub fn slice(torus: TorusSpec, sigma: f64) -> Result<Self> {
        Self::torus_kernel(KernelKind::Slice, torus, sigma, KernelOptions::default())
    }

    /// Full covariance `v^M_0(σ)` on the torus.
    pub fn full(torus: TorusSpec, sigma: f64) -> Result<Self> {
        Self::torus_kernel(KernelKind::Full, torus, sigma, KernelOptions::default())
    }

    /// Ultraviolet-cutoff covariance `v^M_{-N}` on the torus.
    pub fn cutoff(torus: TorusSpec, n: u32) -> Result<Self> {
        Self::torus_kernel(KernelKind::Cutoff { n }, torus, 0.0, KernelOptions::default())
    }

    /// Infinite-volume slice covariance `C_∞(σ)` in d = 2.
    pub fn continuum(l: u32, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if l < 2 {
            return Err(Error::param("L", "block scale must be at least 2"));
        }
        Ok(Self {
            kind: KernelKind::Continuum,
            sigma,
            l,
            d: 2,
            torus: None,
            scale: 1.0,
            p_max: continuum_r_max(DEFAULT_MAX_ORDER),
            max_order: DEFAULT_MAX_ORDER,
            method: Arc::new(Method::Polar),
            memo: Arc::default(),
        })
    }

    /// Torus kernel with explicit options.
    pub fn torus_kernel(kind: KernelKind, torus: TorusSpec, sigma: f64, opts: KernelOptions) -> Result<Self> {
        check_sigma(sigma)?;
        if kind == KernelKind::Continuum {
            return Err(Error::param("kind", "continuum kernels have no torus"));
        }
        let side = torus.side() as f64;
        let l = f64::from(torus.l);
        let required = required_p_max(kind, torus.d, l, side, opts.max_order, opts.tail_tol);
        let p_max = match opts.p_max {
            Some(p) if p + 1e-12 < required => {
                return Err(Error::Tolerance(format!(
                    "Fourier tail above {:e} at p_max = {p}; requires p_max >= {required:.4}",
                    opts.tail_tol
                )))
            }
            Some(p) => p,
            None => required,
        };
        let spacing = 2.0 * PI / side;
        let nmax = (p_max / spacing).floor() as i64;
        let per_axis = (2 * nmax + 1) as f64;
        let estimate = per_axis.powi(torus.d as i32) * PI / 4.0;
        let method = if estimate > 4.0 * MODE_CAP as f64 {
            if kind == KernelKind::Slice && torus.d == 2 {
                Method::Polar
            } else {
                return Err(Error::ResourceCap(format!(
                    "about {estimate:.0} Fourier modes exceed the cap of {MODE_CAP}"
                )));
            }
        } else {
            let modes = build_modes(kind, &torus, sigma, p_max, nmax);
            if modes.len() > MODE_CAP {
                if kind == KernelKind::Slice && torus.d == 2 {
                    Method::Polar
                } else {
                    return Err(Error::ResourceCap(format!(
                        "{} Fourier modes exceed the cap of {MODE_CAP}",
                        modes.len()
                    )));
                }
            } else {
                Method::Modes(modes)
            }
        };
        Ok(Self {
            kind,
            sigma,
            l: torus.l,
            d: torus.d,
            torus: Some(torus),
            scale: 1.0,
            p_max,
            max_order: opts.max_order,
            method: Arc::new(method),
            memo: Arc::default(),
        })
    }

    /// The same kernel multiplied by `beta`.
    pub fn scaled(&self, beta: f64) -> Self {
        let mut k = self.clone();
        k.scale = self.scale * beta;
        k.memo = Arc::default();
        k
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn l(&self) -> u32 {
        self.l
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn torus(&self) -> Option<&TorusSpec> {
        self.torus.as_ref()
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn p_max(&self) -> f64 {
        self.p_max
    }
    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Certified bound on the neglected Fourier tail of derivatives of order `k ≤ max_order`,
    /// in units of the kernel scale.
    pub fn tail_bound(&self, k: u32) -> f64 {
        let s = decay_scale(self.kind, f64::from(self.l));
        let side = self.torus.map_or(f64::INFINITY, |t| t.side() as f64);
        let r_max = if self.torus.is_some() { self.p_max } else { continuum_r_max(k) };
        self.scale.abs() * tail_bound(self.d, side / s, r_max / s, k) * s.powi(self.d as i32 - 2 + k as i32)
    }

    /// Number of Fourier modes, or `None` for quadrature-evaluated kernels.
    pub fn n_modes(&self) -> Option<usize> {
        match &*self.method {
            Method::Modes(m) => Some(m.len()),
            Method::Polar => None,
        }
    }

    /// Fourier modes `(p, ĉ(p))` with `C(x) = Σ_p ĉ(p) cos(p·x)`, scale included; `None` for
    /// quadrature-evaluated kernels.
    pub fn fourier_modes(&self) -> Option<Vec<([f64; MAX_DIM], f64)>> {
        match &*self.method {
            Method::Modes(m) => Some(m.iter().map(|m| (m.p, self.scale * m.weight)).collect()),
            Method::Polar => None,
        }
    }

    /// Whether the kernel is evaluated by continuum quadrature.
    pub fn uses_continuum(&self) -> bool {
        matches!(&*self.method, Method::Polar)
    }

    /// `∂^α C(x)`, checked against the certified derivative order.
    pub fn try_eval(&self, x: &Point, alpha: &MultiIndex) -> Result<f64> {
        if order(alpha) > self.max_order {
            return Err(Error::param("alpha", format!("order {} exceeds certified {}", order(alpha), self.max_order)));
        }
        Ok(self.eval(x, alpha))
    }

    /// `∂^α C(x)`.
    pub fn eval(&self, x: &Point, alpha: &MultiIndex) -> f64 {
        let mut y = [0.0; MAX_DIM];
        match &self.torus {
            Some(t) => {
                for k in 0..self.d {
                    y[k] = t.wrap(x[k]);
                }
            }
            None => y[..self.d].copy_from_slice(&x[..self.d]),
        }
        let key = (y.map(f64::to_bits), *alpha);
        if let Some(v) = self.memo.read().expect("memo lock").get(&key) {
            return *v;
        }
        let v = self.scale
            * match &*self.method {
                Method::Modes(modes) => mode_sum(modes, self.d, &y, alpha),
                Method::Polar => polar_eval(self.l as f64, self.sigma, &y, alpha),
            };
        self.memo.write().expect("memo lock").insert(key, v);
        v
    }

    /// `C(x)`.
    pub fn value(&self, x: &Point) -> f64 {
        self.eval(x, &[0; MAX_DIM])
    }

    /// `C(0)`.
    pub fn at_zero(&self) -> f64 {
        self.value(&[0.0; MAX_DIM])
    }
}

fn build_modes(kind: KernelKind, torus: &TorusSpec, sigma: f64, p_max: f64, nmax: i64) -> Vec<Mode> {
    let d = torus.d;
    let side = torus.side() as f64;
    let spacing = 2.0 * PI / side;
    let vol = torus.volume();
    let l = f64::from(torus.l);
    let mut out = Vec::new();
    let mut idx = vec![-nmax; d];
    loop {
        let mut p = [0.0; MAX_DIM];
        let mut r2 = 0.0;
        for k in 0..d {
            p[k] = spacing * idx[k] as f64;
            r2 += p[k] * p[k];
        }
        if r2 > 0.0 && r2 <= p_max * p_max {
            let w = symbol(kind, r2.sqrt(), l, sigma) / vol;
            if w != 0.0 {
                out.push(Mode { p, weight: w });
            }
        }
        let mut k = 0;
        loop {
            if k == d {
                return out;
            }
            idx[k] += 1;
            if idx[k] > nmax {
                idx[k] = -nmax;
                k += 1;
            } else {
                break;
            }
        }
    }
}

/// `Re[(ip)^α e^{i p·x}]` given `p^α` and the phase.
#[inline]
fn trig_factor(ord: u32, phase: f64) -> f64 {
    match ord % 4 {
        0 => phase.cos(),
        1 => -phase.sin(),
        2 => -phase.cos(),
        _ => phase.sin(),
    }
}

#[inline]
fn monomial(p: &[f64; MAX_DIM], alpha: &MultiIndex, d: usize) -> f64 {
    let mut m = 1.0;
    for k in 0..d {
        if alpha[k] > 0 {
            m *= p[k].powi(alpha[k] as i32);
        }
    }
    m
}

fn mode_sum(modes: &[Mode], d: usize, x: &Point, alpha: &MultiIndex) -> f64 {
    let ord = order(alpha);
    let mut s = 0.0;
    for m in modes {
        let mut phase = 0.0;
        for k in 0..d {
            phase += m.p[k] * x[k];
        }
        s += m.weight * monomial(&m.p, alpha, d) * trig_factor(ord, phase);
    }
    s
}

fn continuum_r_max(max_order: u32) -> f64 {
    (45.0 + 2.0 * max_order as f64).powf(0.25)
}

/// Polar quadrature of `(2π)^{-2} ∫ dp ĝ(p) (ip)^α e^{ip·x}` in d = 2.
fn polar_eval(l: f64, sigma: f64, x: &Point, alpha: &MultiIndex) -> f64 {
    let ord = order(alpha);
    let r_max = continuum_r_max(ord);
    let rx = (x[0] * x[0] + x[1] * x[1]).sqrt();
    // panel breaks: geometric refinement towards the inner scale 1/L, capped width for oscillation
    let mut breaks = vec![0.0];
    let inner = r_max / (4.0 * l);
    let mut b = inner;
    while b < r_max {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.push(r_max);
    let max_width = (PI / (rx + 1.0)).min(0.25);
    let mut fine = vec![0.0];
    for w in breaks.windows(2) {
        let n = ((w[1] - w[0]) / max_width).ceil().max(1.0) as usize;
        for k in 1..=n {
            fine.push(w[0] + (w[1] - w[0]) * k as f64 / n as f64);
        }
    }
    let n_theta = (r_max * rx).ceil() as usize + ord as usize + 32;
    let dtheta = 2.0 * PI / n_theta as f64;
    let dirs: Vec<(f64, f64, f64)> = (0..n_theta)
        .map(|k| {
            let t = dtheta * k as f64;
            let (s, c) = t.sin_cos();
            let ang = c.powi(alpha[0] as i32) * s.powi(alpha[1] as i32);
            (c, s, ang)
        })
        .collect();
    let gl = GaussLegendre::new(16);
    let mut total = 0.0;
    for w in fine.windows(2) {
        for (r, wr) in gl.mapped(w[0], w[1]) {
            let g = slice_symbol(r, l, sigma);
            if g == 0.0 {
                continue;
            }
            let mut ang_sum = 0.0;
            for &(c, s, ang) in &dirs {
                if ang != 0.0 {
                    ang_sum += ang * trig_factor(ord, r * (c * x[0] + s * x[1]));
                }
            }
            total += wr * r * r.powi(ord as i32) * g * ang_sum * dtheta;
        }
    }
    total / (4.0 * PI * PI)
}

/// Independent evaluation of `∂^α C_∞(σ, x)` in d = 2 through the scale integral
/// `4(2π)^{-2} ∫_1^L ds s^{-1-|α|} ∫ dp e^{i p·x/s} (ip)^α p^2 e^{p^4}(e^{p^4}+σ)^{-2}`.
pub fn continuum_scale_integral(l: u32, sigma: f64, x: &Point, alpha: &MultiIndex) -> f64 {
    let ord = order(alpha);
    let l = f64::from(l);
    let r_max = continuum_r_max(ord);
    let gl_r = GaussLegendre::new(24);
    let gl_s = GaussLegendre::new(16);
    let mut s_breaks = vec![1.0];
    let mut s = 1.0;
    while s * 1.5 < l {
        s *= 1.5;
        s_breaks.push(s);
    }
    s_breaks.push(l);
    let mut total = 0.0;
    for sw in s_breaks.windows(2) {
        for (sv, ws) in gl_s.mapped(sw[0], sw[1]) {
            let y = [x[0] / sv, x[1] / sv];
            let ry = (y[0] * y[0] + y[1] * y[1]).sqrt();
            let n_theta = (r_max * ry).ceil() as usize + ord as usize + 32;
            let dtheta = 2.0 * PI / n_theta as f64;
            let n_panels = ((r_max * (ry + 1.0)) / PI).ceil().max(4.0) as usize;
            let mut inner = 0.0;
            for k in 0..n_panels {
                let a = r_max * k as f64 / n_panels as f64;
                let b = r_max * (k + 1) as f64 / n_panels as f64;
                for (r, wr) in gl_r.mapped(a, b) {
                    let u = r.powi(4);
                    let w = if u > 700.0 { 0.0 } else { (-u).exp() / (1.0 + sigma * (-u).exp()).powi(2) };
                    let mut ang_sum = 0.0;
                    for t in 0..n_theta {
                        let th = dtheta * t as f64;
                        let (sn, cs) = th.sin_cos();
                        let ang = cs.powi(alpha[0] as i32) * sn.powi(alpha[1] as i32);
                        if ang != 0.0 {
                            ang_sum += ang * trig_factor(ord, r * (cs * y[0] + sn * y[1]));
                        }
                    }
                    inner += wr * r * r.powi(2 + ord as i32) * w * ang_sum * dtheta;
                }
            }
            total += ws * sv.powi(-1 - ord as i32) * inner;
        }
    }
    4.0 * total / (4.0 * PI * PI)
}

/// `log L / (2π(1+σ))`, the closed form of `C_∞(σ, 0)` in d = 2.
pub fn continuum_at_zero_closed_form(l: u32, sigma: f64) -> f64 {
    f64::from(l).ln() / (2.0 * PI * (1.0 + sigma))
}

/// `|C^M(σ,x) - Σ_{|n|_∞ ≤ n_max} C_∞(σ, x + n L^M)|` for a slice kernel in d = 2.
pub fn verify_periodization(k: &CovarianceKernel, x: &Point, n_max: u32) -> Result<f64> {
    let t = k.torus().ok_or_else(|| Error::param("kernel", "periodization needs a torus kernel"))?;
    if k.kind() != KernelKind::Slice || t.d != 2 {
        return Err(Error::param("kernel", "periodization is implemented for d = 2 slice kernels"));
    }
    let c = CovarianceKernel::continuum(t.l, k.sigma())?.scaled(k.scale());
    let side = t.side() as f64;
    let n = n_max as i64;
    let mut s = 0.0;
    for a in -n..=n {
        for b in -n..=n {
            s += c.value(&[x[0] + a as f64 * side, x[1] + b as f64 * side, 0.0, 0.0]);
        }
    }
    Ok((k.value(x) - s).abs())
}

/// Residual of `v^M_0(x) = Σ_{k<j} C^{M-k}(L^{-k}x) + v^{M-j}_0(L^{-j}x)` in d = 2.
pub fn verify_scale_decomposition(l: u32, m: u32, j: u32, sigma: f64, x: &Point) -> Result<f64> {
    if j > m {
        return Err(Error::param("j", "must satisfy 0 <= j <= M"));
    }
    let full = CovarianceKernel::full(TorusSpec::plane(l, m)?, sigma)?;
    let lhs = full.value(x);
    let lf = f64::from(l);
    let mut rhs = 0.0;
    for k in 0..j {
        let c = CovarianceKernel::slice(TorusSpec::plane(l, m - k)?, sigma)?;
        let s = lf.powi(-(k as i32));
        rhs += c.value(&[x[0] * s, x[1] * s, 0.0, 0.0]);
    }
    let rem = CovarianceKernel::full(TorusSpec::plane(l, m - j)?, sigma)?;
    let s = lf.powi(-(j as i32));
    rhs += rem.value(&[x[0] * s, x[1] * s, 0.0, 0.0]);
    Ok((lhs - rhs).abs())
}

/// Grid and order settings for block norms of a kernel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlockNormConfig {
    /// Derivative order per variable; block norms use all `|γ| ≤ 2r`.
    pub r: u32,
    /// Points per unit side of a block.
    pub pts: usize,
    /// Tree-decay exponent in `θ`.
    pub nu: f64,
}

impl Default for BlockNormConfig {
    fn default() -> Self {
        Self { r: 2, pts: 9, nu: 2.0 }
    }
}

/// A supremum estimated on a grid, with a first-order Lipschitz slack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSup {
    pub value: f64,
    pub slack: f64,
}

/// `sup_{x∈Δ, y∈Δ'} max_{|γ|≤2r} |∂^γ C(x-y)|` for blocks at integer offset `delta`.
pub fn block_pair_norm(k: &CovarianceKernel, delta: &[i64], cfg: &BlockNormConfig) -> GridSup {
    let d = k.dim();
    let n = 2 * (cfg.pts - 1) + 1;
    let h = 1.0 / (cfg.pts - 1) as f64;
    let gammas = multi_indices(d, 0, 2 * cfg.r);
    let mut sup = 0.0f64;
    let mut grad_sup = 0.0f64;
    let mut idx = vec![0usize; d];
    loop {
        let mut z = [0.0; MAX_DIM];
        for a in 0..d {
            z[a] = delta[a] as f64 - 1.0 + h * idx[a] as f64;
        }
        for g in &gammas {
            sup = sup.max(k.eval(&z, g).abs());
            let mut gs = 0.0;
            for mu in 0..d {
                let mut gm = *g;
                gm[mu] += 1;
                gs += k.eval(&z, &gm).powi(2);
            }
            grad_sup = grad_sup.max(gs.sqrt());
        }
        let mut a = 0;
        loop {
            if a == d {
                return GridSup { value: sup, slack: grad_sup * h * (d as f64).sqrt() / 2.0 };
            }
            idx[a] += 1;
            if idx[a] == n {
                idx[a] = 0;
                a += 1;
            } else {
                break;
            }
        }
    }
}

/// `‖C‖_* = sup_Δ Σ_{Δ'≠Δ} ‖C(Δ,Δ')‖ d(Δ,Δ')^{2d} θ(Δ,Δ')`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StarNorm {
    pub value: f64,
    pub slack: f64,
    pub n_terms: usize,
}

/// Star norm of a kernel; continuum kernels sum over blocks within `radius`.
pub fn star_norm(k: &CovarianceKernel, cfg: &BlockNormConfig, radius: i64) -> StarNorm {
    let d = k.dim();
    let offsets: Vec<Vec<i64>> = match k.torus() {
        Some(t) => t
            .all_blocks()
            .into_iter()
            .filter(|b| *b != Block::origin())
            .map(|b| (0..d).map(|a| t.wrap_int(b.0[a])).collect())
            .collect(),
        None => {
            let mut v = Vec::new();
            for a in -radius..=radius {
                for b in -radius..=radius {
                    if (a, b) != (0, 0) {
                        v.push(vec![a, b]);
                    }
                }
            }
            v
        }
    };
    let terms: Vec<(f64, f64)> = offsets
        .iter()
        .map(|off| {
            let dist = off.iter().map(|c| (*c as f64).powi(2)).sum::<f64>().sqrt();
            let w = dist.powi(2 * d as i32) * (1.0 + dist).powf(cfg.nu);
            let g = block_pair_norm(k, off, cfg);
            (g.value * w, g.slack * w)
        })
        .collect();
    StarNorm {
        value: terms.iter().map(|t| t.0).sum(),
        slack: terms.iter().map(|t| t.1).sum(),
        n_terms: terms.len(),
    }
}

/// `N_C = sup_{X small} inf_{x∈X} max_{|α|≤r, y∈X} |∂^α_y (C(y-x) - C(0))|` on grid points.
///
/// `x_pts` and `y_pts` are grid points per unit side used for the base point and the
/// supremum respectively.
pub fn n_c(k: &CovarianceKernel, torus: &TorusSpec, r: u32, x_pts: usize, y_pts: usize) -> Result<f64> {
    let d = torus.d;
    let cap = EnumerationCap { max_size: 1 << d, ..EnumerationCap::default() };
    let shapes = enumerate_polymers(torus, 1 << d, Block::origin(), cap)?;
    let alphas = multi_indices(d, 0, r);
    let c0 = k.at_zero();
    let grid = |x: &crate::lattice::Polymer, pts: usize| -> Vec<Point> {
        let mut out = Vec::new();
        let h = if pts > 1 { 1.0 / (pts - 1) as f64 } else { 0.0 };
        let off = if pts > 1 { 0.0 } else { 0.5 };
        for b in x.blocks() {
            let mut idx = vec![0usize; d];
            loop {
                let mut p = [0.0; MAX_DIM];
                for a in 0..d {
                    p[a] = b.0[a] as f64 + off + h * idx[a] as f64;
                }
                out.push(p);
                let mut a = 0;
                loop {
                    if a == d {
                        break;
                    }
                    idx[a] += 1;
                    if idx[a] == pts {
                        idx[a] = 0;
                        a += 1;
                    } else {
                        break;
                    }
                }
                if a == d {
                    break;
                }
            }
        }
        out
    };
    let mut sup = 0.0f64;
    for x in shapes.iter().filter(|x| is_small(x, torus)) {
        let xs = grid(x, x_pts);
        let ys = grid(x, y_pts);
        let mut inf = f64::INFINITY;
        for xp in &xs {
            let mut m = 0.0f64;
            for yp in &ys {
                let z = torus.point_delta(yp, xp);
                for a in &alphas {
                    let v = k.eval(&z, a);
                    let v = if order(a) == 0 { v - c0 } else { v };
                    m = m.max(v.abs());
                }
                if m >= inf {
                    break;
                }
            }
            inf = inf.min(m);
        }
        sup = sup.max(inf);
    }
    Ok(sup)
}

/// Kernel evaluations on a point set, with a square-root factor for sampling.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub points: Vec<Point>,
    pub entries: DMatrix<f64>,
    pub min_eigenvalue: f64,
    factor: DMatrix<f64>,
}

/// Relative tolerance for negative eigenvalues that are clipped to zero.
pub const PSD_CLIP: f64 = 1e-10;

impl CovarianceMatrix {
    /// Assemble and factor `[C(x_i - x_j)]`.
    pub fn new(k: &CovarianceKernel, points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        let torus = k.torus().copied();
        let mut entries = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let z = match &torus {
                    Some(t) => t.point_delta(&points[i], &points[j]),
                    None => {
                        let mut z = [0.0; MAX_DIM];
                        for a in 0..MAX_DIM {
                            z[a] = points[i][a] - points[j][a];
                        }
                        z
                    }
                };
                let v = k.value(&z);
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        Self::from_entries(points, entries)
    }

    /// Factor a given symmetric matrix.
    pub fn from_entries(points: Vec<Point>, entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 {
            return Ok(Self { points, entries, min_eigenvalue: 0.0, factor: DMatrix::zeros(0, 0) });
        }
        let eig = SymmetricEigen::new(entries.clone());
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -PSD_CLIP * scale {
            return Err(Error::Factorization(format!(
                "covariance matrix not positive semidefinite: eigenvalue {min:e} at scale {scale:e}"
            )));
        }
        let mut factor = eig.eigenvectors.clone();
        for (j, lam) in eig.eigenvalues.iter().enumerate() {
            let s = lam.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { points, entries, min_eigenvalue: min, factor })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One Gaussian draw with this covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.len();
        let z: nalgebra::DVector<f64> = nalgebra::DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        (&self.factor * z).iter().cloned().collect()
    }
}

/// `‖T‖ = max_{p≠0} (e^{p^4}+σ)^{-1}` on the torus.
pub fn t_operator_norm(torus: &TorusSpec, sigma: f64) -> f64 {
    let p = 2.0 * PI / torus.side() as f64;
    inv_exp_plus(p.powi(4), sigma)
}

/// `Σ_{p≠0} log(1 + δσ (e^{p^4}+σ)^{-1})` over the torus dual lattice.
///
/// Large tori use the continuum integral minus the excluded `p = 0` term; the summand is
/// analytic and periodic-smooth so the two agree to exponential accuracy.
pub fn trlog_t(torus: &TorusSpec, sigma: f64, dsigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if dsigma == 0.0 {
        return Ok(0.0);
    }
    let term = |p: f64| (dsigma * inv_exp_plus(p.powi(4), sigma)).ln_1p();
    let side = torus.side() as f64;
    let spacing = 2.0 * PI / side;
    let r_cut = 3.0f64;
    let nmax = (r_cut / spacing).floor() as i64;
    let count = ((2 * nmax + 1) as f64).powi(torus.d as i32);
    if count <= 4e6 {
        let d = torus.d;
        let mut idx = vec![-nmax; d];
        let mut s = 0.0;
        loop {
            let r2: f64 = idx.iter().map(|n| (spacing * *n as f64).powi(2)).sum();
            if r2 > 0.0 && r2 <= r_cut * r_cut {
                s += term(r2.sqrt());
            }
            let mut k = 0;
            loop {
                if k == d {
                    return Ok(s);
                }
                idx[k] += 1;
                if idx[k] > nmax {
                    idx[k] = -nmax;
                    k += 1;
                } else {
                    break;
                }
            }
        }
    }
    if torus.d != 2 {
        return Err(Error::ResourceCap("trace-log continuum path is implemented for d = 2".into()));
    }
    let gl = GaussLegendre::new(40);
    let radial = gl.integrate_panels(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0], |r| 2.0 * PI * r * term(r));
    Ok(torus.volume() / (4.0 * PI * PI) * radial - term(0.0))
}

/// Real-space path for the same trace: `log det(I + δσ D V)` with `V_{ij} = v(x_i - x_j) h^d` on a
/// grid of `n_g` points per unit and `D` the spectral Laplacian of that grid.
pub fn trlog_t_real_space(torus: &TorusSpec, sigma: f64, dsigma: f64, n_g: usize) -> Result<f64> {
    let v = CovarianceKernel::full(*torus, sigma)?;
    let d = torus.d;
    let per_axis = torus.side() as usize * n_g;
    let n = per_axis.pow(d as u32);
    if n > 1500 {
        return Err(Error::ResourceCap(format!("real-space trace-log grid of {n} points exceeds 1500")));
    }
    let h = 1.0 / n_g as f64;
    if PI / h < v.p_max() {
        return Err(Error::param("n_g", "grid does not resolve all kernel modes"));
    }
    let coords = |i: usize| -> Vec<usize> {
        let mut c = vec![0; d];
        let mut r = i;
        for a in 0..d {
            c[a] = r % per_axis;
            r /= per_axis;
        }
        c
    };
    let pts: Vec<Point> = (0..n)
        .map(|i| {
            let c = coords(i);
            let mut p = [0.0; MAX_DIM];
            for a in 0..d {
                p[a] = c[a] as f64 * h;
            }
            p
        })
        .collect();
    let side = torus.side() as f64;
    // grid momenta per axis, folded into (-N/2, N/2]
    let kmom: Vec<f64> = (0..per_axis)
        .map(|k| {
            let kk = if k > per_axis / 2 { k as i64 - per_axis as i64 } else { k as i64 };
            2.0 * PI * kk as f64 / side
        })
        .collect();
    let mut dmat = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let ci = coords(i);
            let cj = coords(j);
            // separable sum over grid momenta of |p|^2 e^{ip(x_i-x_j)} / n
            let mut s = 0.0;
            for a in 0..d {
                let mut axis_lap = 0.0;
                let mut axis_delta_other = 1.0;
                let diff = ci[a] as f64 - cj[a] as f64;
                for &p in &kmom {
                    axis_lap += p * p * (p * diff * h).cos();
                }
                axis_lap /= per_axis as f64;
                for b in 0..d {
                    if b != a && ci[b] != cj[b] {
                        axis_delta_other = 0.0;
                    }
                }
                s += axis_lap * axis_delta_other;
            }
            dmat[(i, j)] = s;
        }
    }
    let mut vmat = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let z = torus.point_delta(&pts[i], &pts[j]);
            vmat[(i, j)] = v.value(&z) * h.powi(d as i32);
        }
    }
    let m = DMatrix::<f64>::identity(n, n) + (dmat * vmat) * dsigma;
    let lu = m.lu();
    let det = lu.determinant();
    if det <= 0.0 {
        return Err(Error::Factorization(format!("determinant {det} is not positive")));
    }
    Ok(det.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> Point {
        [x, y, 0.0, 0.0]
    }

    #[test]
    fn continuum_origin_matches_closed_form() {
        for l in [2u32, 4, 8] {
            for sigma in [0.0, 0.05, 0.1] {
                let k = CovarianceKernel::continuum(l, sigma).unwrap();
                assert_relative_eq!(k.at_zero(), continuum_at_zero_closed_form(l, sigma), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn scale_integral_agrees_with_polar_symbol() {
        let k = CovarianceKernel::continuum(2, 0.05).unwrap();
        for (x, a) in [(pt(0.0, 0.0), [0, 0, 0, 0]), (pt(0.7, -0.4), [1, 0, 0, 0]), (pt(1.3, 0.2), [1, 1, 0, 0])] {
            let v = continuum_scale_integral(2, 0.05, &x, &a);
            assert_relative_eq!(k.eval(&x, &a), v, epsilon = 1e-10);
        }
    }

    #[test]
    fn slice_symbol_is_stable_near_zero() {
        // leading behaviour (L^4 - 1) p^2 / (1+σ)^2
        let p = 1e-4;
        let v = slice_symbol(p, 2.0, 0.0);
        assert_relative_eq!(v, 15.0 * p * p, max_relative = 1e-6);
        assert_eq!(slice_symbol(0.0, 2.0, 0.0), 0.0);
        assert!(slice_symbol(10.0, 8.0, 0.1) == 0.0);
    }

    #[test]
    fn torus_matches_continuum_on_large_torus() {
        let t = TorusSpec::plane(2, 5).unwrap();
        let k = CovarianceKernel::slice(t, 0.0).unwrap();
        assert!(verify_periodization(&k, &pt(0.0, 0.0), 0).unwrap() < 1e-6);
        assert!(verify_periodization(&k, &pt(1.5, 0.5), 0).unwrap() < 1e-6);
    }

    #[test]
    fn periodization_residual_decreases() {
        let t = TorusSpec::plane(2, 3).unwrap();
        let k = CovarianceKernel::slice(t, 0.0).unwrap();
        let r0 = verify_periodization(&k, &pt(0.0, 0.0), 0).unwrap();
        let r1 = verify_periodization(&k, &pt(0.0, 0.0), 1).unwrap();
        let r2 = verify_periodization(&k, &pt(0.0, 0.0), 2).unwrap();
        let r3 = verify_periodization(&k, &pt(0.0, 0.0), 3).unwrap();
        assert!(r1 < r0 && r2 < r1 && r3 < r2, "{r0} {r1} {r2} {r3}");
        assert!(r3 < 1e-5, "{r3}");
    }

    #[test]
    fn scale_decomposition_holds() {
        assert_eq!(verify_scale_decomposition(2, 2, 0, 0.0, &pt(0.3, 0.1)).unwrap(), 0.0);
        assert!(verify_scale_decomposition(2, 2, 1, 0.0, &pt(0.0, 0.0)).unwrap() < 1e-8);
        assert!(verify_scale_decomposition(2, 3, 2, 0.05, &pt(1.25, -0.5)).unwrap() < 1e-8);
        assert!(verify_scale_decomposition(2, 2, 2, 0.0, &pt(0.5, 0.5)).unwrap() < 1e-8);
    }

    #[test]
    fn tail_refusal_reports_required_radius() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let opts = KernelOptions { p_max: Some(1.0), ..KernelOptions::default() };
        match CovarianceKernel::torus_kernel(KernelKind::Slice, t, 0.0, opts) {
            Err(Error::Tolerance(msg)) => assert!(msg.contains("requires p_max")),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn certified_tail_is_below_tolerance() {
        let t = TorusSpec::plane(2, 3).unwrap();
        for k in [CovarianceKernel::slice(t, 0.0).unwrap(), CovarianceKernel::full(t, 0.05).unwrap()] {
            for order in 0..=k.max_order() {
                assert!(k.tail_bound(order) <= DEFAULT_TAIL_TOL, "order {order}: {}", k.tail_bound(order));
            }
        }
        assert!(CovarianceKernel::continuum(2, 0.0).unwrap().tail_bound(0) < 1e-12);
    }

    #[test]
    fn sigma_out_of_range_rejected() {
        assert!(CovarianceKernel::continuum(2, 0.2).is_err());
    }

    #[test]
    fn slice_row_has_zero_mean() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let k = CovarianceKernel::slice(t, 0.0).unwrap();
        // trapezoid on a fine grid integrates trigonometric polynomials exactly
        let n = 16;
        let mut s = 0.0;
        for i in 0..n * 4 {
            for j in 0..n * 4 {
                s += k.value(&pt(i as f64 / n as f64, j as f64 / n as f64));
            }
        }
        assert!(s.abs() / (16.0 * 16.0 * 16.0) < 1e-12);
    }

    #[test]
    fn t_norm_bounded() {
        for m in 1..5 {
            for sigma in [-0.1, 0.0, 0.1] {
                assert!(t_operator_norm(&TorusSpec::plane(2, m).unwrap(), sigma) <= 2.0);
            }
        }
    }

    #[test]
    fn trlog_paths_agree() {
        let t = TorusSpec::plane(2, 1).unwrap();
        assert_eq!(trlog_t(&t, 0.0, 0.0).unwrap(), 0.0);
        let t = TorusSpec::plane(2, 2).unwrap();
        let a = trlog_t(&t, 0.03, 0.02).unwrap();
        let b = trlog_t_real_space(&t, 0.03, 0.02, 2).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
        assert!(a.abs() <= 0.02 * t.volume());
    }

    #[test]
    fn trlog_continuum_path_matches_sum() {
        let t = TorusSpec::plane(2, 7).unwrap();
        let direct = trlog_t(&t, 0.02, 0.01).unwrap();
        let gl = GaussLegendre::new(40);
        let term = |p: f64| (0.01 * inv_exp_plus(p.powi(4), 0.02)).ln_1p();
        let radial = gl.integrate_panels(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0], |r| 2.0 * PI * r * term(r));
        let cont = t.volume() / (4.0 * PI * PI) * radial - term(0.0);
        assert_relative_eq!(direct, cont, max_relative = 1e-9);
    }

    #[test]
    fn covariance_matrix_is_psd_and_samples() {
        use rand::SeedableRng;
        let t = TorusSpec::plane(2, 2).unwrap();
        let k = CovarianceKernel::slice(t, 0.0).unwrap();
        let pts: Vec<Point> = (0..12).map(|i| pt(0.37 * i as f64, 0.21 * i as f64)).collect();
        let m = CovarianceMatrix::new(&k, pts).unwrap();
        assert!(m.min_eigenvalue > -1e-10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = m.sample(&mut rng);
        assert_eq!(s.len(), 12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(CovarianceMatrix::from_entries(vec![pt(0.0, 0.0); 2], bad).is_err());
    }

    #[test]
    fn star_norm_stable_under_refinement() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let cfg = BlockNormConfig { r: 1, pts: 5, nu: 2.0 };
        let a = star_norm(&CovarianceKernel::slice(t, 0.0).unwrap(), &cfg, 0);
        let base = CovarianceKernel::slice(t, 0.0).unwrap().p_max();
        let opts = KernelOptions { p_max: Some(1.3 * base), ..KernelOptions::default() };
        let b = star_norm(&CovarianceKernel::torus_kernel(KernelKind::Slice, t, 0.0, opts).unwrap(), &cfg, 0);
        assert!(a.value.is_finite() && a.value > 0.0);
        assert!((a.value - b.value).abs() <= 0.01 * a.value);
    }

    #[test]
    fn n_c_vanishing_base_and_finite() {
        let t = TorusSpec::plane(2, 2).unwrap();
        let k = CovarianceKernel::slice(t, 0.0).unwrap();
        assert_eq!(k.value(&pt(0.0, 0.0)) - k.at_zero(), 0.0);
        let v = n_c(&k, &t, 1, 2, 3).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn continuum_decay_constant_grows_like_log_l() {
        // sup_x |C_∞(x)| e^{|x|/L} sampled along a ray
        let mut c1 = Vec::new();
        for l in [2u32, 4, 8] {
            let k = CovarianceKernel::continuum(l, 0.0).unwrap();
            let m = (0..12)
                .map(|i| {
                    let r = 0.5 * i as f64 * f64::from(l) / 2.0;
                    k.value(&pt(r, 0.0)).abs() * (r / f64::from(l)).exp()
                })
                .fold(0.0, f64::max);
            c1.push(m / f64::from(l).ln());
        }
        // c_1 / log L stays bounded across L
        assert!(c1.iter().all(|c| *c < 0.5), "{c1:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn torus_kernel_is_even(x in -4.0f64..4.0, y in -4.0f64..4.0) {
            let t = TorusSpec::plane(2, 2).unwrap();
            let k = CovarianceKernel::slice(t, 0.07).unwrap();
            prop_assert!((k.value(&pt(x, y)) - k.value(&pt(-x, -y))).abs() < 1e-15);
        }
    }
}
