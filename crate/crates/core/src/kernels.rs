//! Random-walk kernels on the torus.
//!
//! Kernels are stored as dense matrices with the start site as the row and
//! the end site as the column, so `K(t) f` evaluates `x ↦ Σ_x̃ K(t;x,x̃) f(x̃)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::asep::ScalingParams;
use crate::environment::Environment;
use crate::error::{invalid, Error, Result};
use crate::linalg::{expm, inf_norm, periodic_laplacian, Mat, SymmetrizedSpectrum};
use crate::rng;
use crate::special::{bessel_ive, bessel_ive_all, dirichlet_integral, gauss_jacobi_unit};
use crate::torus::Torus;

/// Time normalisation of the walk generator `c · rtt(x) Δ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Normalization {
    /// `c = ½`: unit total jump rate, the normalisation of the kernel estimates.
    Half,
    /// `c = √(rℓ)`: the rate appearing in the Gärtner-field generator.
    Physical(f64),
}

impl Normalization {
    pub fn physical(scaling: &ScalingParams) -> Self {
        Normalization::Physical(scaling.sqrt_rl)
    }

    /// Jump rate to each neighbour for unit `rtt`.
    pub fn side_rate(&self) -> f64 {
        match self {
            Normalization::Half => 0.5,
            Normalization::Physical(c) => *c,
        }
    }
}

/// A kernel `K(t; x, x̃)` on `Z/NZ`.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub t: f64,
    pub values: Mat,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[(x, y)]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.row_iter().map(|r| r.sum()).collect()
    }

    /// `max_x |Σ_x̃ K(x,x̃) - 1|`.
    pub fn row_sum_gap(&self) -> f64 {
        self.row_sums().iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = &self.values * DVector::from_column_slice(f);
        v.iter().copied().collect()
    }

    pub fn compose(&self, other: &Kernel) -> Kernel {
        Kernel { t: self.t + other.t, values: &self.values * &other.values }
    }
}

/// `e^{-t} I_k(t)`: the walk on `Z` jumping to each neighbour at rate ½.
pub fn hk_fullline(t: f64, k: i64) -> Result<f64> {
    if !(t >= 0.0) {
        return invalid(format!("kernel time must be nonnegative, got {t}"));
    }
    Ok(bessel_ive(k, t))
}

/// Number of wraps needed on each side for the torus sum.
fn wrap_count(t: f64, n: usize) -> usize {
    (10.0 * t.sqrt() / n as f64).ceil() as usize + 2
}

/// Torus kernel of `½Δ` by wrapping the full-line kernel,
/// `hk(t;x,x̃) = Σ_i hk^Z(t; x - x̃ + iN)`.
pub fn hk_torus(t: f64, n: usize) -> Result<Kernel> {
    Torus::new(n)?;
    let profile = hk_torus_profile(t, n)?;
    let values = Mat::from_fn(n, n, |x, y| profile[(y + n - x) % n]);
    Ok(Kernel { t, values })
}

/// `d ↦ hk(t; 0, d)` on the torus.
pub fn hk_torus_profile(t: f64, n: usize) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return invalid(format!("kernel time must be nonnegative, got {t}"));
    }
    let wraps = wrap_count(t, n) as i64;
    let k_max = (wraps as usize + 1) * n;
    let full = bessel_ive_all(k_max, t);
    Ok((0..n as i64)
        .map(|d| (-wraps..=wraps).map(|i| full[(d + i * n as i64).unsigned_abs() as usize]).sum())
        .collect())
}

/// The same kernel as a matrix exponential of `½Δ`.
pub fn hk_torus_expm(t: f64, n: usize) -> Result<Kernel> {
    Torus::new(n)?;
    Ok(Kernel { t, values: expm(&(periodic_laplacian(n) * (0.5 * t))) })
}

/// Walk generator `c · diag(rtt) Δ` acting on the start variable.
pub fn walk_generator(env: &Environment, norm: Normalization) -> Mat {
    let n = env.size();
    let c = norm.side_rate();
    let l = periodic_laplacian(n);
    let rtt = env.rtt();
    Mat::from_fn(n, n, |i, j| c * rtt[i] * l[(i, j)])
}

/// The homogeneous generator `c Δ` and the perturbation `c diag(a) Δ`.
fn split_generator(env: &Environment, norm: Normalization) -> (Mat, Mat) {
    let n = env.size();
    let c = norm.side_rate();
    let l = periodic_laplacian(n);
    let a = env.a();
    (&l * c, Mat::from_fn(n, n, |i, j| c * a[i] * l[(i, j)]))
}

/// Weight `rtt^{-1/2}` symmetrising the walk generator.
pub fn symmetrizing_weight(env: &Environment) -> DVector<f64> {
    DVector::from_iterator(env.size(), env.rtt().iter().map(|r| r.sqrt().recip()))
}

/// `hka(t) = exp(t G)` with `G = c · diag(rtt) Δ`.
pub fn hka_oracle(env: &Environment, t: f64, norm: Normalization) -> Result<Kernel> {
    if !(t >= 0.0) {
        return invalid(format!("kernel time must be nonnegative, got {t}"));
    }
    let g = walk_generator(env, norm);
    Ok(Kernel { t, values: expm(&(g * t)) })
}

/// Eigen route for `hka` at many or large times.
pub fn hka_spectrum(env: &Environment, norm: Normalization) -> SymmetrizedSpectrum {
    SymmetrizedSpectrum::new(&walk_generator(env, norm), &symmetrizing_weight(env))
}

/// Order-by-order Dyson terms `T_n = ∫_{Σ_n(t)} e^{s_0 A} P e^{s_1 A} ⋯ P e^{s_n A}`
/// for `n = 0..=n_max`, from the exponential of the block upper-triangular
/// matrix with `A` on the diagonal and `P` on the superdiagonal.
pub fn dyson_terms(base: &Mat, pert: &Mat, t: f64, n_max: usize) -> Vec<Mat> {
    let n = base.nrows();
    let blocks = n_max + 1;
    let mut big = Mat::zeros(n * blocks, n * blocks);
    for b in 0..blocks {
        big.view_mut((b * n, b * n), (n, n)).copy_from(&(base * t));
        if b + 1 < blocks {
            big.view_mut((b * n, (b + 1) * n), (n, n)).copy_from(&(pert * t));
        }
    }
    let e = expm(&big);
    (0..blocks).map(|b| e.view((0, b * n), (n, n)).into_owned()).collect()
}

/// Truncated perturbation series with its per-order norms.
#[derive(Clone, Debug)]
pub struct SeriesExpansion {
    pub t: f64,
    /// Zeroth term followed by the order-`n` corrections.
    pub terms: Vec<Mat>,
    /// `‖T_n‖_∞` (largest absolute row sum) for `n ≥ 1`.
    pub norms: Vec<f64>,
}

impl SeriesExpansion {
    pub fn total(&self) -> Mat {
        self.terms.iter().fold(Mat::zeros(self.terms[0].nrows(), self.terms[0].ncols()), |acc, m| acc + m)
    }

    pub fn partial(&self, order: usize) -> Mat {
        self.terms.iter().take(order + 1).fold(Mat::zeros(self.terms[0].nrows(), self.terms[0].ncols()), |acc, m| acc + m)
    }

    /// Successive norm ratios `‖T_{n+1}‖/‖T_n‖`.
    pub fn ratios(&self) -> Vec<f64> {
        self.norms.windows(2).map(|w| w[1] / w[0]).collect()
    }

    pub(crate) fn from_terms(t: f64, terms: Vec<Mat>) -> Result<Self> {
        let norms: Vec<f64> = terms.iter().skip(1).map(inf_norm).collect();
        // A series that has started to decay and then grows again is diverging.
        let mut decayed = false;
        for k in 1..norms.len() {
            if norms[k] < norms[k - 1] {
                decayed = true;
            } else if decayed && norms[k] > norms[k - 1] && norms[k] > 1e-14 {
                return Err(Error::SeriesDivergence { order: k + 1, norm: norms[k], previous: norms[k - 1] });
            }
        }
        Ok(Self { t, terms, norms })
    }
}

/// `hka ≈ hk + Σ_{n≤n_max} hkr_n` with
/// `hkr_n = ∫_{Σ_n(t)} hk(s_0) Π (a/2)Δ hk(s_i)` (for the `Half` normalisation).
pub fn hka_series(env: &Environment, t: f64, norm: Normalization, n_max: usize) -> Result<SeriesExpansion> {
    if n_max == 0 {
        return invalid("series order must be at least 1");
    }
    let (base, pert) = split_generator(env, norm);
    SeriesExpansion::from_terms(t, dyson_terms(&base, &pert, t, n_max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SimplexScheme {
    ProductGauss,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct QuadratureResult {
    pub value: f64,
    /// Monte Carlo standard error; zero for the deterministic rule.
    pub se: f64,
    pub scheme: SimplexScheme,
}

/// `∫_{Σ_n(t)} Π s_i^{v_i-1} g(s) ds` over `s_0 + … + s_n = t`.
///
/// The simplex is parametrised by stick-breaking fractions `β_k`, which
/// turns the weight into a product of `β^{v_k-1}(1-β)^{w_k-1}` factors, each
/// handled exactly by a Gauss–Jacobi rule. Orders up to three use these product rules;
/// higher orders use Monte Carlo with exact Dirichlet sampling,
/// stratified in the first stick.
pub fn simplex_quadrature(
    t: f64,
    exponents: &[f64],
    integrand: impl Fn(&[f64]) -> f64,
    nodes: usize,
    seed: u64,
) -> Result<QuadratureResult> {
    if exponents.len() < 2 {
        return invalid("simplex integral needs at least two time variables");
    }
    if exponents.iter().any(|&v| !(v > 0.0)) {
        return invalid("simplex exponents must be positive");
    }
    if !(t > 0.0) {
        return invalid("simplex time must be positive");
    }
    let n = exponents.len() - 1;
    if n <= 3 {
        Ok(QuadratureResult { value: simplex_gauss(t, exponents, &integrand, nodes), se: 0.0, scheme: SimplexScheme::ProductGauss })
    } else {
        let (value, se) = simplex_monte_carlo(t, exponents, &integrand, nodes.max(1) * 1000, seed)?;
        Ok(QuadratureResult { value, se, scheme: SimplexScheme::MonteCarlo })
    }
}

fn simplex_gauss(t: f64, v: &[f64], g: &dyn Fn(&[f64]) -> f64, nodes: usize) -> f64 {
    let n = v.len() - 1;
    // Stick k carries the Beta weight β^{v_k-1}(1-β)^{w_k-1}, w_k = v_{k+1} + … + v_n,
    // which a Gauss–Jacobi rule integrates exactly against polynomials.
    let rules: Vec<(Vec<f64>, Vec<f64>)> =
        (0..n).map(|k| gauss_jacobi_unit(nodes, v[k], v[k + 1..].iter().sum())).collect();
    let total: f64 = v.iter().sum();
    let mut idx = vec![0usize; n];
    let mut sum = 0.0;
    let mut s = vec![0.0; n + 1];
    loop {
        let mut rem = 1.0;
        let mut w = 1.0;
        for k in 0..n {
            let beta = rules[k].0[idx[k]];
            w *= rules[k].1[idx[k]];
            s[k] = t * rem * beta;
            rem *= 1.0 - beta;
        }
        s[n] = t * rem;
        sum += w * g(&s);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < nodes {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == n {
                return sum * t.powf(total - 1.0);
            }
        }
    }
}

fn simplex_monte_carlo(t: f64, v: &[f64], g: &dyn Fn(&[f64]) -> f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let n = v.len() - 1;
    let mass = dirichlet_integral(t, v);
    let tail0: f64 = v[1..].iter().sum();
    let first = Beta::new(v[0], tail0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let gammas: Vec<Gamma<f64>> = v[1..].iter().map(|&a| Gamma::new(a, 1.0).expect("positive shape")).collect();
    let strata = (samples / 16).max(1);
    let per = samples.div_ceil(strata);
    let mut r = rng::stream2(seed, rng::label("simplex-mc"), n as u64);
    let mut stratum_means = Vec::with_capacity(strata);
    let mut within_var = 0.0;
    let mut s = vec![0.0; n + 1];
    for k in 0..strata {
        let mut acc = crate::stats::Running::default();
        for _ in 0..per {
            let u = (k as f64 + r.random::<f64>()) / strata as f64;
            let b0 = first.inverse_cdf(u);
            let rest: Vec<f64> = gammas.iter().map(|gm| gm.sample(&mut r)).collect();
            let rs: f64 = rest.iter().sum();
            s[0] = t * b0;
            for (i, x) in rest.iter().enumerate() {
                s[i + 1] = t * (1.0 - b0) * x / rs;
            }
            acc.push(g(&s));
        }
        stratum_means.push(acc.mean());
        within_var += acc.variance() / per as f64;
    }
    let mean = stratum_means.iter().sum::<f64>() / strata as f64;
    let se = (within_var).sqrt() / strata as f64;
    Ok((mass * mean, mass * se))
}

/// One row of the kernel-bound report.
#[derive(Clone, Debug, Serialize)]
pub struct BoundRow {
    pub bound_id: char,
    pub n: usize,
    pub measured_lambda: f64,
}

/// Grid on which the kernel bounds are scanned.
#[derive(Clone, Debug)]
pub struct BoundsGrid {
    /// Macroscopic times; kernels are evaluated at `t N²` in walk time.
    pub macro_times: Vec<f64>,
}

impl BoundsGrid {
    pub fn geometric(t_max: f64, count: usize) -> Self {
        let lo: f64 = 1e-4_f64.min(t_max);
        let mut macro_times = vec![0.0];
        for k in 0..count {
            macro_times.push(lo * (t_max / lo).powf(k as f64 / (count - 1).max(1) as f64));
        }
        Self { macro_times }
    }
}

/// Smallest constants making the eleven kernel estimates hold on the grid.
///
/// The kernels use the `Half` normalisation; `hkr = hka - hk`.
pub fn certify_kernel_bounds(env: &Environment, u: f64, v: f64, grid: &BoundsGrid) -> Result<Vec<BoundRow>> {
    if !(u > 0.0 && u <= 1.0 && v > 0.0 && v < 1.0) {
        return invalid("need u ∈ (0,1] and v ∈ (0,1)");
    }
    let n = env.size();
    let torus = env.torus();
    let nf = n as f64;
    let spec = hka_spectrum(env, Normalization::Half);
    let dist: Vec<Vec<f64>> = (0..n).map(|x| (0..n).map(|y| torus.dist(x, y) as f64).collect()).collect();
    let mut lam = [0.0f64; 11];
    let nv = nf.powf(v);
    for &tm in &grid.macro_times {
        let t = tm * nf * nf;
        let kh = hk_torus(t, n)?.values;
        let ka = if env.is_homogeneous() { kh.clone() } else { spec.exp(t) };
        let kr = &ka - &kh;
        let tp = t + 1.0;
        for x in 0..n {
            let mut sum_e = 0.0;
            let mut sum_f = 0.0;
            let mut sum_g = 0.0;
            let mut sum_i = 0.0;
            let xp = (x + 1) % n;
            for y in 0..n {
                let d = dist[x][y];
                let val = ka[(x, y)];
                lam[0] = lam[0].max(val.abs() * tp.sqrt());
                lam[3] = lam[3].max(val * d.powf(v) * tp.powf((1.0 - v) / 2.0));
                sum_e += val * d.powf(v);
                sum_f += (ka[(xp, y)] - val).abs() * (d / nf).powf(v);
                sum_g += (ka[(x, (y + 1) % n)] - val).abs() * (d / nf).powf(v);
                lam[7] = lam[7].max(kr[(x, y)].abs() * tp.sqrt() * nv);
                sum_i += kr[(x, y)].abs();
            }
            lam[4] = lam[4].max(sum_e / tp.powf(v / 2.0));
            lam[5] = lam[5].max(sum_f);
            lam[6] = lam[6].max(sum_g);
            lam[8] = lam[8].max(sum_i * nv);
            for xq in 0..n {
                if xq == x {
                    continue;
                }
                let du = dist[x][xq].powf(u);
                let mut sum_c = 0.0;
                let mut sum_j = 0.0;
                for y in 0..n {
                    let da = (ka[(x, y)] - ka[(xq, y)]).abs();
                    let dr = (kr[(x, y)] - kr[(xq, y)]).abs();
                    lam[1] = lam[1].max(da * tp.powf((1.0 + u) / 2.0) / du);
                    lam[10] = lam[10].max(dr * tp.powf((1.0 + u) / 2.0) / du * nv);
                    sum_c += da;
                    sum_j += dr;
                }
                lam[2] = lam[2].max(sum_c * tp.powf(u / 2.0) / du);
                lam[9] = lam[9].max(sum_j * tp.powf(u / 2.0) / du * nv);
            }
        }
    }
    Ok(lam
        .iter()
        .enumerate()
        .map(|(k, &l)| BoundRow { bound_id: (b'a' + k as u8) as char, n, measured_lambda: l })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;

    #[test]
    fn fullline_examples() {
        assert_eq!(hk_fullline(0.0, 0).unwrap(), 1.0);
        assert_eq!(hk_fullline(0.0, 2).unwrap(), 0.0);
        assert!((hk_fullline(1.0, 0).unwrap() - 0.46575960759364043).abs() < 1e-14);
        assert!(hk_fullline(-1.0, 0).is_err());
        let t = 10.0;
        let k_max = (10.0 * f64::sqrt(t)) as i64 + 50;
        let total: f64 = (-k_max..=k_max).map(|k| hk_fullline(t, k).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn torus_kernel_wrap_vs_expm() {
        for &t in &[0.5, 5.0, 50.0] {
            let a = hk_torus(t, 16).unwrap();
            let b = hk_torus_expm(t, 16).unwrap();
            assert!(max_abs_diff(&a.values, &b.values) < 1e-10, "t={t}");
        }
        let id = hk_torus(0.0, 8).unwrap();
        assert!(max_abs_diff(&id.values, &Mat::identity(8, 8)) == 0.0);
        let long = hk_torus(10.0 * 256.0, 16).unwrap();
        assert!(long.values.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-12));
    }

    #[test]
    fn torus_kernel_symmetry() {
        let k = hk_torus(3.7, 12).unwrap();
        for x in 0..12 {
            for y in 0..12 {
                assert!((k.get(x, y) - k.get(y, x)).abs() < 1e-16);
                assert!((k.get(x, y) - k.get((x + 1) % 12, (y + 1) % 12)).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn hka_reduces_to_hk() {
        let env = Environment::homogeneous(16).unwrap();
        let a = hka_oracle(&env, 7.0, Normalization::Half).unwrap();
        let b = hk_torus(7.0, 16).unwrap();
        assert!(max_abs_diff(&a.values, &b.values) < 1e-10);
    }

    #[test]
    fn homogeneous_series_terms_vanish() {
        let env = Environment::homogeneous(8).unwrap();
        let s = hka_series(&env, 3.0, Normalization::Half, 3).unwrap();
        assert!(s.norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dyson_first_order_matches_quadrature() {
        let env = Environment::iid(8, 1.0, 1.0, 4).unwrap();
        let (base, pert) = split_generator(&env, Normalization::Half);
        let t = 2.0;
        let terms = dyson_terms(&base, &pert, t, 2);
        let spec_h = SymmetrizedSpectrum::new(&base, &DVector::from_element(8, 1.0));
        // Entry (1, 5) of the order-1 and order-2 terms by product Gauss rules.
        let f1 = |s: &[f64]| (spec_h.exp(s[0]) * &pert * spec_h.exp(s[1]))[(1, 5)];
        let q1 = simplex_quadrature(t, &[1.0, 1.0], f1, 24, 0).unwrap();
        assert!((q1.value - terms[1][(1, 5)]).abs() < 1e-12);
        let f2 = |s: &[f64]| (spec_h.exp(s[0]) * &pert * spec_h.exp(s[1]) * &pert * spec_h.exp(s[2]))[(1, 5)];
        let q2 = simplex_quadrature(t, &[1.0, 1.0, 1.0], f2, 16, 0).unwrap();
        assert!((q2.value - terms[2][(1, 5)]).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_quadrature() {
        let pi = std::f64::consts::PI;
        let q = simplex_quadrature(1.0, &[0.5, 0.5], |_| 1.0, 20, 0).unwrap();
        assert!((q.value - pi).abs() < 1e-6);
        let q = simplex_quadrature(2.0, &[1.0, 1.0], |_| 1.0, 16, 0).unwrap();
        assert!((q.value - 2.0).abs() < 1e-12);
        let q = simplex_quadrature(1.0, &[0.5, 0.5, 0.5], |_| 1.0, 20, 0).unwrap();
        assert!((q.value - 2.0 * pi).abs() < 1e-6);
        assert!(simplex_quadrature(1.0, &[0.5, 0.0], |_| 1.0, 4, 0).is_err());
        let v = [0.5, 0.7, 1.0, 0.6, 0.8];
        let q = simplex_quadrature(1.5, &v, |_| 1.0, 8, 3).unwrap();
        assert_eq!(q.scheme, SimplexScheme::MonteCarlo);
        assert!((q.value - dirichlet_integral(1.5, &v)).abs() < 1e-12);
        let q = simplex_quadrature(1.5, &v, |s| s[0], 20, 3).unwrap();
        // E[s_0] = t v_0 / Σv under the Dirichlet law.
        let exact = dirichlet_integral(1.5, &v) * 1.5 * 0.5 / v.iter().sum::<f64>();
        assert!((q.value - exact).abs() < 4.0 * q.se + 1e-12, "{} vs {exact} ± {}", q.value, q.se);
    }

    #[test]
    fn homogeneous_remainder_bounds_vanish() {
        let env = Environment::homogeneous(8).unwrap();
        let rows = certify_kernel_bounds(&env, 0.5, 0.3, &BoundsGrid::geometric(0.1, 4)).unwrap();
        assert_eq!(rows.len(), 11);
        for r in &rows[7..] {
            assert!(r.measured_lambda < 1e-12, "{r:?}");
        }
    }
}
