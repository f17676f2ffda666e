//! Discrete PAM semigroup `sg(t) = e^{t·ham}` with
//! `ham = √(rℓ) rtt(x) Δ - ν a(x)`, and the continuum semigroup
//! `S(t) = e^{tH}`, `H = ½∂ₓₓ + R̄'`, on the unit torus.

use nalgebra::{DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::asep::ScalingParams;
use crate::environment::{ContinuumEnvironment, EnvKind, Environment, Provenance};
use crate::error::{invalid, Error, Result};
use crate::kernels::{dyson_terms, symmetrizing_weight, walk_generator, Kernel, Normalization, SeriesExpansion};
use crate::linalg::{expm, max_abs_diff, periodic_laplacian, Mat, SymmetrizedSpectrum};
use crate::rng;
use crate::stats::{MeanSe, Running};

/// `ham` as a dense matrix acting on the start variable.
pub fn build_ham(env: &Environment, scaling: &ScalingParams) -> Mat {
    let mut g = walk_generator(env, Normalization::physical(scaling));
    for (x, a) in env.a().iter().enumerate() {
        g[(x, x)] -= scaling.nu * a;
    }
    g
}

/// `(ham f)(x)` without forming the matrix.
pub fn apply_ham(env: &Environment, scaling: &ScalingParams, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let (rtt, a) = (env.rtt(), env.a());
    (0..n)
        .map(|x| {
            let lap = f[(x + 1) % n] - 2.0 * f[x] + f[(x + n - 1) % n];
            scaling.sqrt_rl * rtt[x] * lap - scaling.nu * a[x] * f[x]
        })
        .collect()
}

/// `sg(t) = e^{t·ham}` by the matrix exponential.
pub fn sg_oracle(env: &Environment, scaling: &ScalingParams, t: f64) -> Result<Kernel> {
    if !(t >= 0.0) {
        return invalid(format!("semigroup time must be nonnegative, got {t}"));
    }
    Ok(Kernel { t, values: expm(&(build_ham(env, scaling) * t)) })
}

/// `sg` for one environment, with a spectral decomposition for repeated use.
#[derive(Clone, Debug)]
pub struct DiscreteSemigroup {
    pub scaling: ScalingParams,
    pub ham: Mat,
    pub spectrum: SymmetrizedSpectrum,
}

impl DiscreteSemigroup {
    pub fn new(env: &Environment) -> Result<Self> {
        let scaling = ScalingParams::new(env.size())?;
        let ham = build_ham(env, &scaling);
        let spectrum = SymmetrizedSpectrum::new(&ham, &symmetrizing_weight(env));
        Ok(Self { scaling, ham, spectrum })
    }

    pub fn size(&self) -> usize {
        self.ham.nrows()
    }

    /// `sg(t)` by the matrix exponential.
    pub fn kernel(&self, t: f64) -> Kernel {
        Kernel { t, values: expm(&(&self.ham * t)) }
    }

    /// `sg(t)` from the eigen decomposition.
    pub fn kernel_spectral(&self, t: f64) -> Kernel {
        Kernel { t, values: self.spectrum.exp(t) }
    }

    /// `sg(t) f`.
    pub fn apply(&self, t: f64, f: &[f64]) -> Vec<f64> {
        self.spectrum.apply(t, f)
    }

    /// `x̃ ↦ sg(t; x, x̃)`.
    pub fn row(&self, t: f64, x: usize) -> Vec<f64> {
        self.spectrum.exp_row(t, x)
    }

    /// Largest real eigenvalue, which controls `Σ_x̃ sg(t;x,x̃)` for large `t`.
    pub fn top_eigenvalue(&self) -> f64 {
        self.spectrum.eigenvalues.max()
    }
}

/// Monte-Carlo estimate of `sg(t; x, x̃)` from walks jumping to each
/// neighbour at rate `√(rℓ) rtt(X)`, weighted by `exp(-ν ∫ a(X(s)) ds)`.
///
/// Also returns the largest weight seen, which is bounded by `e^{ν‖a‖t}`.
pub fn sg_feynman_kac(
    env: &Environment,
    scaling: &ScalingParams,
    t: f64,
    x: usize,
    x_end: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(MeanSe, f64)> {
    let n = env.size();
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    if x >= n || x_end >= n {
        return invalid("site outside the torus");
    }
    let (rtt, a) = (env.rtt(), env.a());
    let mut r = rng::stream2(seed, rng::label("feynman-kac"), x as u64);
    let mut acc = Running::default();
    let mut max_weight = 0.0f64;
    for _ in 0..n_paths {
        let mut pos = x;
        let mut s = 0.0;
        let mut exponent = 0.0;
        loop {
            let rate = 2.0 * scaling.sqrt_rl * rtt[pos];
            let hold = r.sample::<f64, _>(Exp1) / rate;
            if s + hold >= t {
                exponent -= scaling.nu * a[pos] * (t - s);
                break;
            }
            exponent -= scaling.nu * a[pos] * hold;
            s += hold;
            pos = if r.random::<bool>() { (pos + 1) % n } else { (pos + n - 1) % n };
        }
        let w = exponent.exp();
        max_weight = max_weight.max(w);
        acc.push(if pos == x_end { w } else { 0.0 });
    }
    Ok((acc.summary(), max_weight))
}

/// `sg = hka + Σ_{n ≤ n_max} sgr_n` with
/// `sgr_n = ∫_{Σ_n(t)} hka(s_0) Π (-ν diag(a)) hka(s_i)` (physical `hka`).
pub fn sgr_series(env: &Environment, scaling: &ScalingParams, t: f64, n_max: usize) -> Result<SeriesExpansion> {
    if n_max == 0 {
        return invalid("series order must be at least 1");
    }
    let base = walk_generator(env, Normalization::physical(scaling));
    let pert = Mat::from_diagonal(&DVector::from_iterator(env.size(), env.a().iter().map(|a| -scaling.nu * a)));
    SeriesExpansion::from_terms(t, dyson_terms(&base, &pert, t, n_max))
}

/// `Σ_y f(y) a(y)` rewritten by summation by parts over the two arcs of the
/// midpoint partition of `(y1, y2)`.
///
/// On each arc `[m, M)` a primitive `F` with `F(y) - F(y-1) = -a(y)/2` is
/// anchored at zero at the arc's own endpoint (`y1` or `y2`), and
/// `Σ f ∇F(·-1) = -Σ ∇f F + f(M) F(M-1) - f(m) F(m-1)`.
pub fn sum_by_parts(env: &Environment, y1: usize, y2: usize, f: &dyn Fn(usize) -> f64) -> f64 {
    let n = env.size();
    let torus = env.torus();
    let part = torus.midpoint_partition(y1, y2);
    let a = env.a();
    let mut total = 0.0;
    for (arc, anchor) in [(part.first(n), y1), (part.second(n), y2)] {
        if arc.is_empty() {
            continue;
        }
        let len = arc.len();
        // Position p holds F at site arc[0] - 1 + p, for p = 0..=len.
        let site = |p: usize| torus.add(arc[0], p as i64 - 1);
        let anchor_pos = (0..=len).find(|&p| site(p) == anchor).unwrap_or(0);
        let mut prim = vec![0.0; len + 1];
        for p in anchor_pos + 1..=len {
            prim[p] = prim[p - 1] - 0.5 * a[site(p)];
        }
        for p in (0..anchor_pos).rev() {
            prim[p] = prim[p + 1] + 0.5 * a[site(p + 1)];
        }
        let mut inner = 0.0;
        for p in 1..=len {
            let y = site(p);
            inner -= (f(torus.add(y, 1)) - f(y)) * prim[p];
        }
        inner += f(torus.add(site(len), 1)) * prim[len] - f(site(1)) * prim[0];
        total += -2.0 * inner;
    }
    total
}

/// Evaluate the order-`n` integrand of the discrete series,
/// `Σ_{x_1..x_n} hka(s_0;x,x_1) Π (-ν a(x_i)) hka(s_i;x_i,x_{i+1})`, at the
/// time tuple `times = (s_0, …, s_n)` both as a direct sum and with every
/// `a`-weighted sum rewritten by parts. Returns `(direct, by_parts)`.
pub fn sgr_integrand_two_way(
    env: &Environment,
    scaling: &ScalingParams,
    times: &[f64],
    x: usize,
    x_end: usize,
) -> Result<(f64, f64)> {
    let order = times.len().saturating_sub(1);
    if order == 0 || order > 2 {
        return invalid("the two-way check supports orders 1 and 2");
    }
    let norm = Normalization::physical(scaling);
    let kernels: Vec<Mat> = times.iter().map(|&s| expm(&(walk_generator(env, norm) * s))).collect();
    let a = env.a();
    let n = env.size();
    let coef = (-scaling.nu).powi(order as i32);
    let (direct, by_parts) = if order == 1 {
        let (k0, k1) = (&kernels[0], &kernels[1]);
        let direct: f64 = (0..n).map(|y| k0[(x, y)] * a[y] * k1[(y, x_end)]).sum();
        let bp = sum_by_parts(env, x, x_end, &|y| k0[(x, y)] * k1[(y, x_end)]);
        (direct, bp)
    } else {
        let (k0, k1, k2) = (&kernels[0], &kernels[1], &kernels[2]);
        let mut direct = 0.0;
        for y1 in 0..n {
            for y2 in 0..n {
                direct += k0[(x, y1)] * a[y1] * k1[(y1, y2)] * a[y2] * k2[(y2, x_end)];
            }
        }
        // Inner variable by parts with neighbours (x, y2), then the outer one
        // with neighbours (x, x̃).
        let inner = |y2: usize| sum_by_parts(env, x, y2, &|y1| k0[(x, y1)] * k1[(y1, y2)]);
        let bp = sum_by_parts(env, x, x_end, &|y2| inner(y2) * k2[(y2, x_end)]);
        (direct, bp)
    };
    Ok((coef * direct, coef * by_parts))
}

/// Largest `|direct - by_parts|` of [`sgr_integrand_two_way`] over all
/// endpoint pairs.
pub fn summation_by_parts_check(env: &Environment, scaling: &ScalingParams, times: &[f64]) -> Result<f64> {
    let n = env.size();
    let mut worst = 0.0f64;
    for x in 0..n {
        for y in 0..n {
            let (d, b) = sgr_integrand_two_way(env, scaling, times, x, y)?;
            worst = worst.max((d - b).abs());
        }
    }
    Ok(worst)
}

/// Wrapped Gaussian `Σ_i (2πt)^{-1/2} e^{-(x-x̃+i)²/(2t)}`. With
/// `wraps = None` enough images are taken for double precision.
pub fn continuum_heat_kernel(t: f64, x: f64, y: f64, wraps: Option<usize>) -> Result<f64> {
    if t == 0.0 {
        return Err(Error::InvalidParameter("the heat kernel at t = 0 is a delta mass".into()));
    }
    if !(t > 0.0) {
        return invalid(format!("heat kernel time must be positive, got {t}"));
    }
    let k = wraps.unwrap_or((9.0 * t.sqrt()).ceil() as usize + 2) as i64;
    let d = (x - y) - (x - y).round();
    let norm = (2.0 * std::f64::consts::PI * t).sqrt().recip();
    Ok((-k..=k).map(|i| norm * (-(d + i as f64).powi(2) / (2.0 * t)).exp()).sum())
}

/// Eigenpairs of the grid operator `½M²Δ_M + potential` on `M` sites,
/// ordered `λ_1 ≥ λ_2 ≥ …`.
///
/// `vectors` has unit Euclidean columns; `φ_n = √M · vectors[:, n]` are
/// orthonormal in `L²` of the unit torus.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub m: usize,
    pub eigenvalues: Vec<f64>,
    pub vectors: Mat,
    /// `‖H v_n - λ_n v_n‖_∞` per pair.
    pub residuals: Vec<f64>,
}

impl EigenSystem {
    /// `φ_n` sampled on the grid.
    pub fn eigenfunction(&self, k: usize) -> Vec<f64> {
        let s = (self.m as f64).sqrt();
        self.vectors.column(k).iter().map(|v| v * s).collect()
    }

    /// Grid propagator `e^{tH_M}`; multiply by `M` for the kernel density.
    pub fn propagator(&self, t: f64) -> Mat {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= (t * self.eigenvalues[k]).exp();
        }
        scaled * self.vectors.transpose()
    }

    /// `e^{tH_M} f`.
    pub fn apply(&self, t: f64, f: &[f64]) -> Vec<f64> {
        let mut c = self.vectors.transpose() * DVector::from_column_slice(f);
        for (k, v) in c.iter_mut().enumerate() {
            *v *= (t * self.eigenvalues[k]).exp();
        }
        (&self.vectors * c).iter().copied().collect()
    }

    /// `max |⟨φ_j, φ_k⟩ - δ_jk|`.
    pub fn orthonormality_gap(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        max_abs_diff(&g, &Mat::identity(self.m, self.m))
    }
}

/// The grid operator `½M²Δ_M + diag(potential)` of a continuum environment.
pub fn continuum_generator(cenv: &ContinuumEnvironment) -> Mat {
    let m = cenv.grid_size();
    let mut h = periodic_laplacian(m) * (0.5 * (m * m) as f64);
    for (j, p) in cenv.potential().iter().enumerate() {
        h[(j, j)] += p;
    }
    h
}

pub fn spectral_oracle(cenv: &ContinuumEnvironment) -> Result<EigenSystem> {
    let m = cenv.grid_size();
    if m < 16 {
        return invalid(format!("spectral oracle needs at least 16 grid cells, got {m}"));
    }
    let h = continuum_generator(cenv);
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Mat::from_fn(m, m, |i, k| eig.eigenvectors[(i, order[k])]);
    let hv = &h * &vectors;
    let residuals = (0..m)
        .map(|k| (0..m).map(|i| (hv[(i, k)] - eigenvalues[k] * vectors[(i, k)]).abs()).fold(0.0, f64::max))
        .collect();
    Ok(EigenSystem { m, eigenvalues, vectors, residuals })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Representation {
    Series,
    Spectral,
}

/// `S(t)` on the grid `j/M` for a continuum environment.
#[derive(Clone, Debug)]
pub struct ContinuumSemigroup {
    pub env: ContinuumEnvironment,
    pub n_max: usize,
    pub representation: Representation,
    pub eigen: EigenSystem,
}

impl ContinuumSemigroup {
    pub fn spectral(env: &ContinuumEnvironment) -> Result<Self> {
        Ok(Self { env: env.clone(), n_max: 0, representation: Representation::Spectral, eigen: spectral_oracle(env)? })
    }

    pub fn with_series(env: &ContinuumEnvironment, n_max: usize) -> Result<Self> {
        Ok(Self { n_max, representation: Representation::Series, ..Self::spectral(env)? })
    }

    pub fn grid_size(&self) -> usize {
        self.eigen.m
    }

    /// Kernel density `S(t; x_j, x_k)`.
    pub fn kernel(&self, t: f64) -> Result<Mat> {
        match self.representation {
            Representation::Spectral => Ok(self.eigen.propagator(t) * self.grid_size() as f64),
            Representation::Series => Ok(s_series(&self.env, t, self.n_max)?.total()),
        }
    }

    /// `(S(t) f)(x_j)` for `f` sampled on the grid.
    pub fn apply(&self, t: f64, f: &[f64]) -> Vec<f64> {
        self.eigen.apply(t, f)
    }
}

/// Heat kernel density `HK(t; j/M, k/M)` on the grid.
pub fn heat_kernel_grid(t: f64, m: usize) -> Result<Mat> {
    let mut out = Mat::zeros(m, m);
    for j in 0..m {
        for k in 0..m {
            out[(j, k)] = continuum_heat_kernel(t, j as f64 / m as f64, k as f64 / m as f64, None)?;
        }
    }
    Ok(out)
}

/// Series `S = S_0 + Σ_{n≤n_max} Sgr_n` as kernel densities on the grid.
///
/// The `n`-th term is the simplex integral of grid heat propagators
/// interleaved with the Stieltjes weights of `dR̄`; the simplex integrals are
/// evaluated exactly through a block-triangular exponential. The grid must
/// resolve the heat kernel: `M √t ≥ 4`.
pub fn s_series(cenv: &ContinuumEnvironment, t: f64, n_max: usize) -> Result<SeriesExpansion> {
    let m = cenv.grid_size();
    if n_max == 0 {
        return invalid("series order must be at least 1");
    }
    if !(t > 0.0) {
        return invalid(format!("series time must be positive, got {t}"));
    }
    if (m as f64) * t.sqrt() < 4.0 {
        return Err(Error::Resolution(format!("grid of {m} cells does not resolve the heat kernel at t = {t}")));
    }
    let base = periodic_laplacian(m) * (0.5 * (m * m) as f64);
    let pert = Mat::from_diagonal(&DVector::from_vec(cenv.potential()));
    let terms = dyson_terms(&base, &pert, t, n_max).into_iter().map(|k| k * m as f64).collect();
    SeriesExpansion::from_terms(t, terms)
}

/// `max |K(x,x̃) - K(x̃,x)|`.
pub fn symmetry_gap(k: &Mat) -> f64 {
    max_abs_diff(k, &k.transpose())
}

/// Gap between the scaled discrete semigroup and the continuum one for one `N`.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub gap: f64,
}

/// For each environment of a coupled ladder, the largest
/// `|(S(t)f)(x) - (sg_N(t)f)(x)|` over macroscopic `times` and the points
/// `x = j/points` where `sg_N(t)f(x) = Σ_x̃ sg(tN²; Nx, x̃) f(x̃/N)`.
pub fn scaled_convergence(
    ladder: &[Environment],
    cenv: &ContinuumEnvironment,
    f: impl Fn(f64) -> f64,
    times: &[f64],
    points: usize,
) -> Result<Vec<ConvergenceRow>> {
    check_coupled(ladder, cenv)?;
    let m = cenv.grid_size();
    if m % points != 0 {
        return invalid("evaluation points must lie on the continuum grid");
    }
    let cont = ContinuumSemigroup::spectral(cenv)?;
    let f_grid: Vec<f64> = (0..m).map(|j| f(j as f64 / m as f64)).collect();
    let mut rows = Vec::new();
    for env in ladder {
        let n = env.size();
        if n % points != 0 {
            return invalid(format!("N = {n} does not contain the {points} evaluation points"));
        }
        let sg = DiscreteSemigroup::new(env)?;
        let f_lat: Vec<f64> = (0..n).map(|x| f(x as f64 / n as f64)).collect();
        let mut gap = 0.0f64;
        for &t in times {
            let cont_val = cont.apply(t, &f_grid);
            let disc_val = sg.apply(t * (n * n) as f64, &f_lat);
            for j in 0..points {
                gap = gap.max((cont_val[j * m / points] - disc_val[j * n / points]).abs());
            }
        }
        rows.push(ConvergenceRow { n, gap });
    }
    Ok(rows)
}

fn check_coupled(ladder: &[Environment], cenv: &ContinuumEnvironment) -> Result<()> {
    let random = |e: &Environment| matches!(e.kind, EnvKind::Iid { .. } | EnvKind::Fbm { .. });
    let families: Vec<Option<u64>> = ladder.iter().map(|e| e.family).collect();
    if ladder.iter().any(|e| random(e) && e.family.is_none()) {
        return Err(Error::Uncoupled("random environments in the ladder were sampled independently".into()));
    }
    if families.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Uncoupled("ladder environments come from different families".into()));
    }
    if let (Some(fam), Provenance::Coupled { family, .. }) = (families.first().copied().flatten(), &cenv.provenance) {
        if *family != Some(fam) {
            return Err(Error::Uncoupled("continuum path is not built from the ladder's family".into()));
        }
    }
    if ladder.iter().any(random) && matches!(cenv.provenance, Provenance::Standalone) {
        return Err(Error::Uncoupled("continuum path is not coupled to the random ladder".into()));
    }
    Ok(())
}

/// Row-sum profile `max_x Σ_x̃ sg(t;x,x̃)` over a grid of times.
pub fn row_sum_scan(sg: &DiscreteSemigroup, times: &[f64]) -> Vec<f64> {
    times.iter().map(|&t| sg.kernel_spectral(t).row_sums().into_iter().fold(f64::MIN, f64::max)).collect()
}
