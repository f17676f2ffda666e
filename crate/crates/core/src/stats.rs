//! Small statistics helpers used by the Monte Carlo gates.

use nalgebra::{DMatrix, DVector};

/// Streaming mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Running) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
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

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn summary(&self) -> MeanSe {
        MeanSe { mean: self.mean(), se: self.se(), n: self.n }
    }
}

impl FromIterator<f64> for Running {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut r = Running::default();
        for x in iter {
            r.push(x);
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl MeanSe {
    /// `|mean - target| ≤ k·SE`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }

    /// Deviation from `target` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.se
    }
}

/// Ratio of means `E[x]/E[y]` with a delta-method standard error.
pub fn ratio_of_means(x: &[f64], y: &[f64]) -> MeanSe {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let ratio = mx / my;
    // Linearised residuals (x - ratio·y)/my.
    let resid: Running = x.iter().zip(y).map(|(a, b)| (a - ratio * b) / my).collect();
    MeanSe { mean: ratio, se: resid.se(), n: x.len() as u64 }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if x.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinearFit { slope, intercept, slope_se, r2 }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct NnlsFit {
    pub coefficients: Vec<f64>,
    pub r2: f64,
}

/// Least squares with nonnegative coefficients, solved exactly by
/// enumerating active sets (intended for a handful of columns).
pub fn nonnegative_least_squares(columns: &[Vec<f64>], y: &[f64]) -> NnlsFit {
    let p = columns.len();
    assert!(p <= 12);
    let m = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << p) {
        let idx: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let a = DMatrix::from_fn(m, idx.len(), |i, j| columns[idx[j]][i]);
        let b = DVector::from_column_slice(y);
        let Ok(sol) = a.clone().svd(true, true).solve(&b, 1e-14) else { continue };
        if sol.iter().any(|&c| c < 0.0) {
            continue;
        }
        let sse = (&a * &sol - &b).norm_squared();
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            let mut coeffs = vec![0.0; p];
            for (k, &j) in idx.iter().enumerate() {
                coeffs[j] = sol[k];
            }
            best = Some((sse, coeffs));
        }
    }
    let (sse, coefficients) = best.unwrap_or((y.iter().map(|v| v * v).sum(), vec![0.0; p]));
    let my = y.iter().sum::<f64>() / m as f64;
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    NnlsFit { coefficients, r2: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 } }
}

/// Two-sample Kolmogorov–Smirnov sup distance between empirical CDFs.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 8.0, 0.5];
        let r: Running = xs.iter().copied().collect();
        let m = xs.iter().sum::<f64>() / 6.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
        assert!((r.mean() - m).abs() < 1e-14);
        assert!((r.variance() - v).abs() < 1e-12);
        let mut a: Running = xs[..2].iter().copied().collect();
        let b: Running = xs[2..].iter().copied().collect();
        a.merge(&b);
        assert!((a.variance() - v).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nnls_recovers_nonnegative_model() {
        let t: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let c0 = vec![1.0; 20];
        let c1: Vec<f64> = t.iter().map(|t| 1.0 / (t + 1.0).sqrt()).collect();
        let c2: Vec<f64> = t.iter().map(|t| 1.0 / (t + 1.0)).collect();
        let y: Vec<f64> = (0..20).map(|i| 0.1 + 2.0 * c1[i]).collect();
        let fit = nonnegative_least_squares(&[c0, c1, c2], &y);
        assert!((fit.coefficients[0] - 0.1).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
        assert!(fit.coefficients[2].abs() < 1e-10);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&a, &[10.0, 11.0]), 1.0);
    }
}
