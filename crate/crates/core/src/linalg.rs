//! Dense matrix helpers: the matrix exponential and symmetrisable spectra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &Mat) -> f64 {
    (0..a.ncols()).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `e^A` by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(a: &Mat) -> Mat {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let theta13 = 5.371920351148152;
    let norm = one_norm(a);
    let s = if norm > theta13 { (norm / theta13).log2().ceil() as i32 } else { 0 };
    let a = a * 2f64.powi(-s);
    let id = Mat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is nonsingular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Spectral form of a matrix `G = D^{-1} S D` with `S` symmetric and `D`
/// diagonal, so that `e^{tG} = D^{-1} V e^{tΛ} V^T D`.
#[derive(Clone, Debug)]
pub struct SymmetrizedSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: Mat,
    /// Diagonal of `D`.
    pub weight: DVector<f64>,
}

impl SymmetrizedSpectrum {
    /// `g` must satisfy `diag(w) g diag(w)^{-1}` symmetric.
    pub fn new(g: &Mat, w: &DVector<f64>) -> Self {
        let n = g.nrows();
        let mut s = Mat::from_fn(n, n, |i, j| w[i] * g[(i, j)] / w[j]);
        // Remove rounding asymmetry before the symmetric solver.
        let st = s.transpose();
        s = (s + st) * 0.5;
        let eig = SymmetricEigen::new(s);
        Self { eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors, weight: w.clone() }
    }

    pub fn size(&self) -> usize {
        self.weight.len()
    }

    /// `e^{tG}`.
    pub fn exp(&self, t: f64) -> Mat {
        let n = self.size();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= (t * self.eigenvalues[k]).exp();
        }
        let core = scaled * v.transpose();
        Mat::from_fn(n, n, |i, j| core[(i, j)] * self.weight[j] / self.weight[i])
    }

    /// Row `x` of `e^{tG}`.
    pub fn exp_row(&self, t: f64, x: usize) -> Vec<f64> {
        let n = self.size();
        let v = &self.eigenvectors;
        let coef: Vec<f64> = (0..n).map(|k| v[(x, k)] * (t * self.eigenvalues[k]).exp()).collect();
        (0..n)
            .map(|j| {
                let s: f64 = (0..n).map(|k| coef[k] * v[(j, k)]).sum();
                s * self.weight[j] / self.weight[x]
            })
            .collect()
    }

    /// `e^{tG} f`.
    pub fn apply(&self, t: f64, f: &[f64]) -> Vec<f64> {
        let n = self.size();
        let v = &self.eigenvectors;
        let g = DVector::from_fn(n, |j, _| f[j] * self.weight[j]);
        let mut c = v.transpose() * g;
        for k in 0..n {
            c[k] *= (t * self.eigenvalues[k]).exp();
        }
        let out = v * c;
        (0..n).map(|i| out[i] / self.weight[i]).collect()
    }
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest absolute row sum, the `∞`-norm.
pub fn inf_norm(a: &Mat) -> f64 {
    (0..a.nrows()).map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Periodic nearest-neighbour Laplacian `Δf(x) = f(x+1) - 2f(x) + f(x-1)`.
pub fn periodic_laplacian(n: usize) -> Mat {
    let mut l = Mat::zeros(n, n);
    for x in 0..n {
        l[(x, x)] -= 2.0;
        l[(x, (x + 1) % n)] += 1.0;
        l[(x, (x + n - 1) % n)] += 1.0;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal_and_nilpotent() {
        let d = Mat::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5, 12.0]));
        let e = expm(&d);
        for (i, v) in [-3.0f64, 0.5, 12.0].iter().enumerate() {
            assert!((e[(i, i)] / v.exp() - 1.0).abs() < 1e-13);
        }
        let mut n = Mat::zeros(3, 3);
        n[(0, 1)] = 2.0;
        n[(1, 2)] = 3.0;
        let e = expm(&n);
        assert!((e[(0, 2)] - 3.0).abs() < 1e-14);
        assert!((e[(0, 1)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn expm_matches_spectral_route() {
        let n = 12;
        let l = periodic_laplacian(n);
        let rates: Vec<f64> = (0..n).map(|k| 1.0 + 0.3 * ((k as f64) * 1.7).sin()).collect();
        let g = Mat::from_fn(n, n, |i, j| 0.5 * rates[i] * l[(i, j)]);
        let w = DVector::from_fn(n, |i, _| rates[i].sqrt().recip());
        let spec = SymmetrizedSpectrum::new(&g, &w);
        for &t in &[0.1, 3.0, 40.0] {
            let a = expm(&(&g * t));
            let b = spec.exp(t);
            assert!(max_abs_diff(&a, &b) < 1e-12, "t={t}");
            let row = spec.exp_row(t, 3);
            for j in 0..n {
                assert!((row[j] - b[(3, j)]).abs() < 1e-13);
            }
        }
    }
}
