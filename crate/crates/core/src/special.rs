//! Special functions: exponentially scaled modified Bessel functions of
//! integer order, Gauss quadrature rules and the Dirichlet simplex integral.

use std::num::NonZeroUsize;

use gauss_quad::{GaussJacobi, GaussLegendre};
use statrs::function::gamma::ln_gamma;

/// Below this argument `e^{-t} I_k(t)` is summed from its power series.
pub const SERIES_CUTOFF: f64 = 30.0;

/// `e^{-t} I_k(t)` from the power series `Σ_m (t/2)^{2m+k} / (m!(m+k)!)`,
/// with every term formed in log space.
pub fn bessel_ive_series(k: u64, t: f64) -> f64 {
    if t == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let lh = (0.5 * t).ln();
    let kf = k as f64;
    let mut sum = 0.0;
    let mut m = 0u64;
    loop {
        let mf = m as f64;
        let lt = (2.0 * mf + kf) * lh - ln_gamma(mf + 1.0) - ln_gamma(mf + kf + 1.0) - t;
        let term = lt.exp();
        sum += term;
        // Terms decrease once m exceeds the peak near t/2.
        if mf > 0.5 * t && term < 1e-18 * sum.max(f64::MIN_POSITIVE) {
            break;
        }
        if m > 10_000 {
            break;
        }
        m += 1;
    }
    sum
}

/// `e^{-t} I_k(t)` for `k = 0..=k_max` by Miller's backward recurrence,
/// normalised with `I_0 + 2 Σ_{k≥1} I_k = e^t`.
pub fn bessel_ive_all(k_max: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; k_max + 1];
    if t == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = k_max.max(t as usize) + (20.0 * t.sqrt()) as usize + 60;
    let two_over_t = 2.0 / t;
    let mut above = 0.0f64; // I_{k+1}
    let mut cur = 1e-300f64; // I_k
    let mut norm = 0.0f64;
    for k in (0..=start).rev() {
        if k <= k_max {
            out[k] = cur;
        }
        norm += if k == 0 { cur } else { 2.0 * cur };
        if k == 0 {
            break;
        }
        let below = above + (k as f64) * two_over_t * cur;
        above = cur;
        cur = below;
        if cur > 1e250 {
            let s = 1e-250;
            cur *= s;
            above *= s;
            norm *= s;
            for v in out.iter_mut() {
                *v *= s;
            }
        }
    }
    for v in out.iter_mut() {
        *v /= norm;
    }
    out
}

/// `e^{-t} I_k(t)` for a single order.
pub fn bessel_ive(k: i64, t: f64) -> f64 {
    let k = k.unsigned_abs();
    if t <= SERIES_CUTOFF {
        bessel_ive_series(k, t)
    } else {
        bessel_ive_all(k as usize, t)[k as usize]
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, `n ≥ 1`, in increasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("at least one node"));
    rule.iter().map(|(x, w)| (*x, *w)).unzip()
}

/// Nodes and weights on `[0, 1]` for the weight `β^{p-1} (1-β)^{q-1}`,
/// `p, q > 0`: exact for polynomials of degree `2n - 1` against that weight.
pub fn gauss_jacobi_unit(n: usize, p: f64, q: f64) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussJacobi::new(
        NonZeroUsize::new(n).expect("at least one node"),
        (q - 1.0).try_into().expect("exponent above zero"),
        (p - 1.0).try_into().expect("exponent above zero"),
    );
    // (1-x)^{q-1}(1+x)^{p-1} dx on [-1,1] is 2^{p+q-1} β^{p-1}(1-β)^{q-1} dβ.
    let scale = 2f64.powf(1.0 - p - q);
    rule.iter().map(|(x, w)| (0.5 * (1.0 + x), w * scale)).unzip()
}

/// `∫_{Σ_n(t)} Π s_i^{v_i - 1} = t^{Σv - 1} Π Γ(v_i) / Γ(Σv)`.
pub fn dirichlet_integral(t: f64, exponents: &[f64]) -> f64 {
    let total: f64 = exponents.iter().sum();
    let lg: f64 = exponents.iter().map(|&v| ln_gamma(v)).sum::<f64>() - ln_gamma(total);
    (lg + (total - 1.0) * t.ln()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_at_one() {
        // e^{-1} I_0(1) with I_0(1) = 1.2660658777520082.
        assert!((bessel_ive(0, 1.0) - (-1.0f64).exp() * 1.2660658777520082).abs() < 1e-15);
        assert_eq!(bessel_ive(0, 0.0), 1.0);
        assert_eq!(bessel_ive(3, 0.0), 0.0);
    }

    #[test]
    fn series_and_recurrence_agree() {
        for &t in &[0.3, 2.0, 11.0, 29.5] {
            let all = bessel_ive_all(60, t);
            for k in 0..=60u64 {
                let s = bessel_ive_series(k, t);
                assert!((s - all[k as usize]).abs() < 1e-14, "k={k} t={t}: {s} vs {}", all[k as usize]);
            }
        }
    }

    #[test]
    fn normalisation_large_t() {
        for &t in &[10.0, 200.0, 5000.0] {
            let kmax = (10.0 * f64::sqrt(t)) as usize + 50;
            let all = bessel_ive_all(kmax, t);
            let total = all[0] + 2.0 * all[1..].iter().sum::<f64>();
            assert!((total - 1.0).abs() < 1e-12, "t={t}: {total}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        for p in 0..14 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "p={p}");
        }
    }

    #[test]
    fn gauss_jacobi_beta_moments() {
        let (p, q) = (0.7, 1.6);
        let (x, w) = gauss_jacobi_unit(6, p, q);
        let beta = |a: f64, b: f64| (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp();
        for k in 0..12 {
            let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = beta(p + k as f64, q);
            assert!((v - exact).abs() < 1e-13 * exact, "k={k}: {v} vs {exact}");
        }
    }

    #[test]
    fn dirichlet_closed_forms() {
        assert!((dirichlet_integral(1.0, &[0.5, 0.5]) - std::f64::consts::PI).abs() < 1e-12);
        assert!((dirichlet_integral(2.0, &[1.0, 1.0]) - 2.0).abs() < 1e-12);
        assert!((dirichlet_integral(1.0, &[0.5; 3]) - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }
}
