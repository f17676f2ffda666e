//! Mild solutions of `∂_t Z = HZ + ξZ` on the unit torus.
//!
//! The grid scheme is `Z_{k+1} = e^{Δt H_M} [Z_k (1 + M W_k)]` where
//! `W_{k,j} = ∫∫ ξ` over time step `k` and cell `j` (variance `Δt/M`), so the
//! noise is evaluated at the left endpoint of each step (Itô).

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::asep::FieldPath;
use crate::environment::ContinuumEnvironment;
use crate::error::{invalid, Error, Result};
use crate::linalg::{max_abs_diff, Mat};
use crate::rng;
use crate::semigroup::{spectral_oracle, EigenSystem};
use crate::stats::{MeanSe, Running};

/// Largest `Δt M²` accepted by the solver.
pub const MAX_DT_M2: f64 = 4.0;

/// Gaussian white noise integrated over cells of a native `M × Δt` grid,
/// generated from counter-keyed streams so any step can be regenerated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseField {
    pub m: usize,
    pub dt: f64,
    pub seed: u64,
}

impl NoiseField {
    pub fn new(m: usize, dt: f64, seed: u64) -> Result<Self> {
        if m == 0 || !(dt > 0.0) {
            return invalid("noise grid needs m ≥ 1 and Δt > 0");
        }
        Ok(Self { m, dt, seed })
    }

    /// Native integrals `W_{k,j}` for step `k`.
    pub fn native(&self, k: u64) -> Vec<f64> {
        let mut r = rng::stream2(self.seed, rng::label("white-noise"), k);
        let sd = (self.dt / self.m as f64).sqrt();
        (0..self.m).map(|_| { let g: f64 = StandardNormal.sample(&mut r); sd * g }).collect()
    }

    /// Integrals over `m` coarse cells and `time_block` native steps starting
    /// at native step `k * time_block`.
    pub fn coarse(&self, k: u64, m: usize, time_block: usize) -> Result<Vec<f64>> {
        if m == 0 || self.m % m != 0 || time_block == 0 {
            return invalid(format!("cannot coarsen {} cells into {m}", self.m));
        }
        let b = self.m / m;
        let mut out = vec![0.0; m];
        for s in 0..time_block as u64 {
            for (j, w) in self.native(k * time_block as u64 + s).iter().enumerate() {
                out[j / b] += w;
            }
        }
        Ok(out)
    }
}

/// Solution values on the grid at the recorded times.
#[derive(Clone, Debug, Serialize)]
pub struct MildSolution {
    pub m: usize,
    pub dt: f64,
    pub seed: Option<u64>,
    pub initial: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Fraction of recorded grid values that are negative.
    pub negative_fraction: f64,
}

impl MildSolution {
    pub fn last(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&self.initial)
    }

    pub fn to_field_path(&self, env_id: &str) -> FieldPath {
        FieldPath {
            n: self.m,
            seed: self.seed.unwrap_or(0),
            scaling: None,
            env_id: env_id.into(),
            times: self.times.clone(),
            z: self.values.clone(),
            h: Vec::new(),
            eta: Vec::new(),
        }
    }
}

/// Reusable one-step propagator for a fixed environment, grid and `Δt`.
#[derive(Clone, Debug)]
pub struct SheSolver {
    pub m: usize,
    pub dt: f64,
    pub eigen: EigenSystem,
    step: Mat,
}

impl SheSolver {
    pub fn new(cenv: &ContinuumEnvironment, dt: f64) -> Result<Self> {
        let m = cenv.grid_size();
        if !(dt > 0.0) {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        if dt * (m * m) as f64 > MAX_DT_M2 {
            return Err(Error::Resolution(format!("Δt = {dt} too coarse for M = {m}: need Δt M² ≤ {MAX_DT_M2}")));
        }
        let eigen = spectral_oracle(cenv)?;
        let step = eigen.propagator(dt);
        Ok(Self { m, dt, eigen, step })
    }

    /// Number of steps to reach `t`, which must be a multiple of `Δt`.
    pub fn steps_to(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * t.max(1.0) {
            return invalid(format!("t = {t} is not a multiple of Δt = {}", self.dt));
        }
        Ok(k as usize)
    }

    /// One step `e^{ΔtH}[z (1 + M w)]`; `w = None` switches the noise off.
    pub fn step(&self, z: &[f64], w: Option<&[f64]>) -> Vec<f64> {
        let mf = self.m as f64;
        let kicked = match w {
            Some(w) => DVector::from_iterator(self.m, z.iter().zip(w).map(|(z, w)| z * (1.0 + mf * w))),
            None => DVector::from_column_slice(z),
        };
        (&self.step * kicked).iter().copied().collect()
    }

    /// Run to `t_end`, recording every `record_every` steps. The noise is
    /// `noise` coarsened to this grid with `time_block` native steps per step.
    pub fn solve(
        &self,
        initial: &[f64],
        t_end: f64,
        noise: Option<(&NoiseField, usize)>,
        record_every: usize,
    ) -> Result<MildSolution> {
        if initial.len() != self.m {
            return invalid("initial data does not match the grid");
        }
        if let Some((nf, tb)) = noise {
            if (nf.dt * tb as f64 - self.dt).abs() > 1e-12 * self.dt {
                return invalid("noise time blocks do not match the solver step");
            }
        }
        let steps = self.steps_to(t_end)?;
        let every = record_every.max(1);
        let mut z = initial.to_vec();
        let mut out = MildSolution {
            m: self.m,
            dt: self.dt,
            seed: noise.map(|(nf, _)| nf.seed),
            initial: initial.to_vec(),
            times: Vec::new(),
            values: Vec::new(),
            negative_fraction: 0.0,
        };
        let mut negatives = 0usize;
        for k in 0..steps {
            let w = match noise {
                Some((nf, tb)) => Some(nf.coarse(k as u64, self.m, tb)?),
                None => None,
            };
            z = self.step(&z, w.as_deref());
            if (k + 1) % every == 0 || k + 1 == steps {
                negatives += z.iter().filter(|v| **v < 0.0).count();
                out.times.push((k + 1) as f64 * self.dt);
                out.values.push(z.clone());
            }
        }
        let recorded = (out.values.len() * self.m).max(1);
        out.negative_fraction = negatives as f64 / recorded as f64;
        Ok(out)
    }
}

/// Convenience wrapper: native noise at the solver resolution.
pub fn solve_mild(
    cenv: &ContinuumEnvironment,
    initial: &[f64],
    t_end: f64,
    dt: f64,
    seed: Option<u64>,
) -> Result<MildSolution> {
    let solver = SheSolver::new(cenv, dt)?;
    let noise = match seed {
        Some(s) => Some(NoiseField::new(cenv.grid_size(), dt, s)?),
        None => None,
    };
    solver.solve(initial, t_end, noise.as_ref().map(|n| (n, 1)), 1)
}

/// Sup-gaps between two Picard sequences for the discrete mild equation
/// `Z_k = P^k Z^ic + Σ_{j<k} P^{k-j} [M Z_j W_j]`, started from `Z ≡ 0` and
/// `Z ≡ 2 Z^ic` and driven by the same noise. Entry `i` is the gap after
/// `i + 1` applications.
pub fn picard_uniqueness_check(
    cenv: &ContinuumEnvironment,
    initial: &[f64],
    t_end: f64,
    dt: f64,
    seed: Option<u64>,
    iterates: usize,
) -> Result<Vec<f64>> {
    let solver = SheSolver::new(cenv, dt)?;
    let m = solver.m;
    let steps = solver.steps_to(t_end)?;
    let noise: Vec<Option<Vec<f64>>> = match seed {
        Some(s) => {
            let nf = NoiseField::new(m, dt, s)?;
            (0..steps as u64).map(|k| Some(nf.native(k))).collect()
        }
        None => vec![None; steps],
    };
    let picard = |path: &[Vec<f64>]| -> Vec<Vec<f64>> {
        // Z_{k+1} = P Z^free_k + P(M Z_k W_k) accumulated step by step.
        let mut out = Vec::with_capacity(steps + 1);
        out.push(initial.to_vec());
        let mut acc = initial.to_vec();
        let mf = m as f64;
        for k in 0..steps {
            let mut v = acc.clone();
            if let Some(w) = &noise[k] {
                for j in 0..m {
                    v[j] += mf * path[k][j] * w[j];
                }
            }
            acc = solver.step(&v, None);
            out.push(acc.clone());
        }
        out
    };
    let mut a: Vec<Vec<f64>> = vec![vec![0.0; m]; steps + 1];
    let mut b: Vec<Vec<f64>> = vec![initial.iter().map(|v| 2.0 * v).collect(); steps + 1];
    let mut gaps = Vec::with_capacity(iterates);
    for _ in 0..iterates {
        a = picard(&a);
        b = picard(&b);
        let gap = a.iter().zip(&b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max);
        gaps.push(gap);
    }
    Ok(gaps)
}

/// `E[(Σ f W)²] / ‖f‖²_{L²}` per test function, over independent noise
/// fields. Test functions are given on the `steps × m` grid.
pub fn ito_isometry_check(
    m: usize,
    dt: f64,
    tests: &[Vec<Vec<f64>>],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<MeanSe>> {
    if n_trials < 2 {
        return Err(Error::InsufficientTrials { have: n_trials, need: 2 });
    }
    let steps = tests.iter().map(|t| t.len()).max().unwrap_or(0);
    let norms: Vec<f64> =
        tests.iter().map(|f| f.iter().flatten().map(|v| v * v).sum::<f64>() * dt / m as f64).collect();
    if norms.iter().any(|&v| v == 0.0) {
        return invalid("test functions must be nonzero");
    }
    let per_trial: Vec<Vec<f64>> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let nf = NoiseField { m, dt, seed: rng::derive(seed, trial) };
            let mut sums = vec![0.0; tests.len()];
            for k in 0..steps {
                let w = nf.native(k as u64);
                for (i, f) in tests.iter().enumerate() {
                    if let Some(row) = f.get(k) {
                        sums[i] += row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            sums.iter().zip(&norms).map(|(s, n)| s * s / n).collect()
        })
        .collect();
    Ok((0..tests.len()).map(|i| per_trial.iter().map(|v| v[i]).collect::<Running>().summary()).collect())
}

/// Second moments `U(t)_{ij} = E[Z(t,x_i) Z(t,x_j)]` of the grid equation
/// in continuous time, `U' = HU + UH + M diag(U_ii)`, by Strang splitting
/// with `substeps` steps. Each particle moves by the exact grid flow and the
/// noise contributes only on the diagonal, where two particles meet.
pub fn second_moment_ode(cenv: &ContinuumEnvironment, initial: &[f64], t: f64, substeps: usize) -> Result<Mat> {
    if substeps == 0 {
        return invalid("substeps must be positive");
    }
    Ok(second_moments_at(cenv, initial, &[t], t / substeps as f64)?.remove(0))
}

/// [`second_moment_ode`] at each of the increasing `times`, with Strang
/// steps no longer than `max_step`.
pub fn second_moments_at(cenv: &ContinuumEnvironment, initial: &[f64], times: &[f64], max_step: f64) -> Result<Vec<Mat>> {
    let m = cenv.grid_size();
    if initial.len() != m {
        return invalid("initial data must match the grid");
    }
    if !(max_step > 0.0) || times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| t < 0.0) {
        return invalid("times must be increasing and nonnegative with a positive step");
    }
    let eigen = spectral_oracle(cenv)?;
    let v = DVector::from_column_slice(initial);
    let mut u = &v * v.transpose();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - now;
        let steps = (span / max_step).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        let p = eigen.propagator(h);
        let half = (0.5 * h * m as f64).exp();
        for _ in 0..steps {
            for i in 0..m {
                u[(i, i)] *= half;
            }
            u = &p * u * p.transpose();
            for i in 0..m {
                u[(i, i)] *= half;
            }
        }
        now = target;
        out.push(u.clone());
    }
    Ok(out)
}

/// For flat data and `R̄ ≡ 0` the second moment depends only on `x - x̃`;
/// `u' = M²Δ_M u + M δ_0 u` with `u(0) ≡ z0²`.
pub fn homogeneous_second_moment(m: usize, z0: f64, t: f64) -> Vec<f64> {
    let mut g = crate::linalg::periodic_laplacian(m) * (m * m) as f64;
    g[(0, 0)] += m as f64;
    let e = crate::linalg::expm(&(g * t));
    (0..m).map(|i| e.row(i).sum() * z0 * z0).collect()
}

/// Sup-gap between solutions on grids `M` and `2M` driven by the same noise
/// (native on `2M`, block-summed onto `M`) at the common grid points.
pub fn refinement_gap(
    fine: &ContinuumEnvironment,
    initial: impl Fn(f64) -> f64,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<f64> {
    let m2 = fine.grid_size();
    if m2 % 2 != 0 {
        return invalid("fine grid must have an even number of cells");
    }
    let coarse_env = fine.resample(m2 / 2);
    let nf = NoiseField::new(m2, dt, seed)?;
    let fine_sol = SheSolver::new(fine, dt)?.solve(
        &(0..m2).map(|j| initial(j as f64 / m2 as f64)).collect::<Vec<_>>(),
        t_end,
        Some((&nf, 1)),
        usize::MAX,
    )?;
    let coarse_sol = SheSolver::new(&coarse_env, dt)?.solve(
        &(0..m2 / 2).map(|j| initial(2.0 * j as f64 / m2 as f64)).collect::<Vec<_>>(),
        t_end,
        Some((&nf, 1)),
        usize::MAX,
    )?;
    Ok(coarse_sol.last().iter().enumerate().fold(0.0, |g, (j, v)| g.max((v - fine_sol.last()[2 * j]).abs())))
}

/// Noise-off run minus `S(t) Z^ic` from the spectral oracle.
pub fn noise_off_gap(cenv: &ContinuumEnvironment, initial: &[f64], t_end: f64, dt: f64) -> Result<f64> {
    let sol = solve_mild(cenv, initial, t_end, dt, None)?;
    let exact = spectral_oracle(cenv)?.apply(t_end, initial);
    Ok(sol.last().iter().zip(&exact).fold(0.0, |g, (a, b)| g.max((a - b).abs())))
}

/// `max |A - B|` for two second-moment matrices.
pub fn moment_gap(a: &Mat, b: &Mat) -> f64 {
    max_abs_diff(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(m: usize) -> ContinuumEnvironment {
        ContinuumEnvironment::from_fn(m, |x| 0.3 * (2.0 * std::f64::consts::PI * x).sin())
    }

    #[test]
    fn noise_off_matches_semigroup() {
        let cenv = smooth(64);
        let init: Vec<f64> = (0..64).map(|j| 1.0 + 0.5 * (j as f64 / 10.0).cos()).collect();
        assert!(noise_off_gap(&cenv, &init, 0.0625, 1.0 / 4096.0).unwrap() < 1e-10);
    }

    #[test]
    fn resolution_is_checked() {
        assert!(matches!(SheSolver::new(&smooth(64), 0.01), Err(Error::Resolution(_))));
    }

    #[test]
    fn coarse_noise_sums_native_cells() {
        let nf = NoiseField::new(8, 0.01, 3).unwrap();
        let fine = nf.native(4);
        let c = nf.coarse(2, 4, 2).unwrap();
        let f5 = nf.native(5);
        assert!((c[1] - (fine[2] + fine[3] + f5[2] + f5[3])).abs() < 1e-15);
        assert!(nf.coarse(0, 3, 1).is_err());
    }

    #[test]
    fn picard_without_noise_is_immediate() {
        let cenv = smooth(32);
        let gaps = picard_uniqueness_check(&cenv, &vec![1.0; 32], 0.0625, 1.0 / 1024.0, None, 3).unwrap();
        assert!(gaps.iter().all(|&g| g < 1e-14), "{gaps:?}");
    }

    #[test]
    fn picard_fixed_point_is_the_scheme() {
        let cenv = smooth(32);
        let dt = 1.0 / 1024.0;
        let init = vec![1.0; 32];
        let gaps = picard_uniqueness_check(&cenv, &init, 0.0625, dt, Some(7), 25).unwrap();
        assert!(*gaps.last().unwrap() < 1e-10, "{gaps:?}");
    }

    #[test]
    fn isometry_unit_and_half_mass() {
        let (m, dt, steps) = (16, 1.0 / 16.0, 16);
        let one = vec![vec![1.0; m]; steps];
        let half: Vec<Vec<f64>> = (0..steps).map(|_| (0..m).map(|j| (j < m / 2) as u8 as f64).collect()).collect();
        let res = ito_isometry_check(m, dt, &[one, half], 4000, 1).unwrap();
        for r in res {
            assert!(r.within(1.0, 4.0), "{r:?}");
        }
    }

    #[test]
    fn second_moment_routes_agree() {
        let m = 32;
        let t = 0.05;
        let u = second_moment_ode(&ContinuumEnvironment::zero(m), &vec![1.0; m], t, 400).unwrap();
        let rel = homogeneous_second_moment(m, 1.0, t);
        for i in 0..m {
            for j in 0..m {
                let d = (j + m - i) % m;
                assert!((u[(i, j)] - rel[d]).abs() < 1e-4 * rel[d], "{} {}", u[(i, j)], rel[d]);
            }
        }
        assert!(rel[0] > 1.0);
    }
}
