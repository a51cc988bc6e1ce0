//! Quadrature, exponential divided differences and small statistics helpers.

use nalgebra::DMatrix;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// `n`-point rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Integral of `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(mid + half * x);
        }
        s * half
    }

    /// Integral over consecutive panels `[b_k, b_{k+1}]`.
    pub fn integrate_panels<F: FnMut(f64) -> f64>(&self, breaks: &[f64], mut f: F) -> f64 {
        breaks.windows(2).map(|w| self.integrate(w[0], w[1], &mut f)).sum()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes.iter().zip(&self.weights).map(|(x, w)| (mid + half * x, w * half)).collect()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Adaptive Gauss–Legendre on `[a, b]`: bisect until two rules agree to `tol`.
pub fn adaptive_integrate<F: Fn(f64) -> f64>(a: f64, b: f64, tol: f64, f: &F) -> f64 {
    let lo = GaussLegendre::new(10);
    let hi = GaussLegendre::new(20);
    adaptive_rec(a, b, tol, f, &lo, &hi, 0)
}

fn adaptive_rec<F: Fn(f64) -> f64>(
    a: f64,
    b: f64,
    tol: f64,
    f: &F,
    lo: &GaussLegendre,
    hi: &GaussLegendre,
    depth: u32,
) -> f64 {
    let coarse = lo.integrate(a, b, f);
    let fine = hi.integrate(a, b, f);
    if (coarse - fine).abs() <= tol || depth >= 40 {
        return fine;
    }
    let m = 0.5 * (a + b);
    adaptive_rec(a, m, 0.5 * tol, f, lo, hi, depth + 1) + adaptive_rec(m, b, 0.5 * tol, f, lo, hi, depth + 1)
}

/// Divided difference `exp[x_0, ..., x_n]`, the upper-right entry of the exponential of
/// the bidiagonal matrix with the nodes on the diagonal. Stable for coincident nodes.
pub fn exp_divided_difference(nodes: &[f64]) -> f64 {
    match nodes.len() {
        0 => 0.0,
        1 => nodes[0].exp(),
        2 => {
            let (a, b) = (nodes[0], nodes[1]);
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            let d = hi - lo;
            if d < 1e-8 {
                hi.exp() * (1.0 - d / 2.0 + d * d / 6.0)
            } else {
                hi.exp() * (-(-d).exp_m1()) / d
            }
        }
        n => {
            let shift = nodes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut m = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = nodes[i] - shift;
                if i + 1 < n {
                    m[(i, i + 1)] = 1.0;
                }
            }
            m.exp()[(0, n - 1)] * shift.exp()
        }
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Merge another accumulator into this one.
    pub fn merge(&mut self, o: &RunningStats) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = (self.n + o.n) as f64;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n;
        self.n += o.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// `n!` as a float.
pub fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Binomial coefficient as a float.
pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let g = GaussLegendre::new(6);
        // degree 11 is the exactness limit
        let v = g.integrate(0.0, 2.0, |x| x.powi(11));
        assert_relative_eq!(v, 2f64.powi(12) / 12.0, max_relative = 1e-13);
        let w: f64 = g.weights.iter().sum();
        assert_relative_eq!(w, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let v = adaptive_integrate(-1.0, 1.0, 1e-12, &|x: f64| 1.0 / (1e-3 + x * x));
        let exact = 2.0 * (1.0 / 1e-3f64.sqrt()) * (1.0 / 1e-3f64.sqrt()).atan();
        assert_relative_eq!(v, exact, max_relative = 1e-10);
    }

    #[test]
    fn divided_difference_matches_recursive_formula() {
        let xs = [0.3, -1.2, 0.9, 2.0];
        // Newton recursion oracle
        let mut table: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        for level in 1..xs.len() {
            for i in (level..xs.len()).rev() {
                table[i] = (table[i] - table[i - 1]) / (xs[i] - xs[i - level]);
            }
        }
        assert_relative_eq!(exp_divided_difference(&xs), table[3], max_relative = 1e-12);
    }

    #[test]
    fn coincident_nodes_give_taylor_limit() {
        // exp[x, x, x] = e^x / 2
        assert_relative_eq!(exp_divided_difference(&[0.7, 0.7, 0.7]), 0.7f64.exp() / 2.0, max_relative = 1e-12);
        assert_relative_eq!(exp_divided_difference(&[0.7, 0.7]), 0.7f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn stats_merge_matches_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = RunningStats::default();
        xs.iter().for_each(|x| a.push(*x));
        let mut b = RunningStats::default();
        let mut c = RunningStats::default();
        xs[..40].iter().for_each(|x| b.push(*x));
        xs[40..].iter().for_each(|x| c.push(*x));
        b.merge(&c);
        assert_relative_eq!(a.mean(), b.mean(), epsilon = 1e-14);
        assert_relative_eq!(a.variance(), b.variance(), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn divided_difference_is_symmetric(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let x = exp_divided_difference(&[a, b, c]);
            let y = exp_divided_difference(&[c, a, b]);
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
