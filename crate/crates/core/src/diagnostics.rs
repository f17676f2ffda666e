//! Monte Carlo experiments on the scaled ASEP: quenched means, martingale
//! gates, moment regressions, W-field decorrelation, the gradient-kernel
//! integral, and convergence to the SHE along coupled ladders.
//!
//! Trials run in parallel with one counter-keyed random stream per trial, so
//! results do not depend on scheduling.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::asep::{w_field, AsepState, Dynamics, InitialCondition, Simulator};
use crate::environment::{ContinuumEnvironment, CoupledLadder, Environment};
use crate::error::{invalid, Error, Result};
use crate::kernels::hk_torus_profile;
use crate::linalg::Mat;
use crate::rng;
use crate::semigroup::{apply_ham, spectral_oracle, DiscreteSemigroup, EigenSystem};
use crate::she::{homogeneous_second_moment, second_moments_at, NoiseField, SheSolver};
use crate::special::gauss_legendre;
use crate::stats::{ks_distance, linear_fit, nonnegative_least_squares, ratio_of_means, LinearFit, MeanSe, NnlsFit, Running};

fn trial_rng(seed: u64, experiment: &str, trial: u64) -> rng::StreamRng {
    rng::stream2(seed, rng::label(experiment), trial)
}

/// Empirical mean of `Z(t,x)` against `(sg(t) Z^ic)(x)`.
#[derive(Clone, Debug, Serialize)]
pub struct QuenchedMeanRow {
    pub x: usize,
    pub mean: f64,
    pub se: f64,
    pub target: f64,
}

impl QuenchedMeanRow {
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.target).abs() <= k * self.se
    }
}

/// `E[Z(t,x)]` over independent runs from a fixed initial state, compared
/// with the semigroup applied to `Z^ic`. Time `t` is microscopic.
pub fn quenched_mean_check(
    env: &Environment,
    init: &AsepState,
    t: f64,
    sites: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<QuenchedMeanRow>> {
    if trials < 2 {
        return Err(Error::InsufficientTrials { have: trials, need: 2 });
    }
    let dynamics = Dynamics::new(env)?;
    let samples: Vec<Vec<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut sim = Simulator::new(&dynamics, init.clone(), trial_rng(seed, "quenched-mean", trial))?;
            sim.advance_to(t);
            let z = sim.z();
            Ok(sites.iter().map(|&x| z[x]).collect())
        })
        .collect::<Result<_>>()?;
    let sg = DiscreteSemigroup::new(env)?;
    let target = sg.apply(t, &init.gartner(&dynamics.scaling).z);
    Ok(sites
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = samples.iter().map(|v| v[i]).collect::<Running>().summary();
            QuenchedMeanRow { x, mean: s.mean, se: s.se, target: target[x] }
        })
        .collect())
}

/// Per-trial martingale data for a set of test functions.
#[derive(Clone, Debug)]
struct MartingaleTrial {
    /// `[time][mode]` values of `⟨φ_n, mg⟩_N`.
    mg: Vec<Vec<f64>>,
    /// `[time][n][n']` of `N^{-3} Σ φ_n φ_n' ∫Z²`.
    main: Vec<Mat>,
    /// `[time][n][n']` of `N^{-2} Σ φ_n φ_n' ∫q`, the exact compensator.
    compensator: Vec<Mat>,
    /// `[time][n][n']` of `N^{-2} Σ φ_n φ_n' (a/rtt) ∫q`.
    env_part: Vec<Mat>,
}

/// Linear and quadratic martingale statistics for test functions `φ_n`.
#[derive(Clone, Debug, Serialize)]
pub struct MartingaleReport {
    pub n: usize,
    pub modes: usize,
    pub macro_times: Vec<f64>,
    pub trials: usize,
    /// `[time][mode]` ensemble mean of `⟨φ_n, mg(t)⟩_N`.
    pub linear: Vec<Vec<MeanSe>>,
    /// `[time][n][n']` ratio `E[mg_n mg_n'] / E[main_nn']` (diagonal only).
    pub qv_ratio: Vec<Vec<MeanSe>>,
    /// `[time][pair]` mean of `mg_n mg_n'` for `n < n'`, with the pair indices.
    pub qv_cross: Vec<Vec<(usize, usize, MeanSe)>>,
    /// `[time][mode]` `E[mg_n²] / E[compensator_nn]`, which is exactly 1 in expectation.
    pub compensator_ratio: Vec<Vec<MeanSe>>,
    /// `[time][mode]` mean environment part `mgg₁` relative to `main`.
    pub env_part_rel: Vec<Vec<f64>>,
    /// `[time][mode]` mean remainder `mgg₂ = compensator - main - mgg₁` relative to `main`.
    pub remainder_rel: Vec<Vec<f64>>,
}

impl MartingaleReport {
    /// Every linear mean within `k` SE of zero.
    pub fn linear_pass(&self, k: f64) -> bool {
        self.linear.iter().flatten().all(|m| m.within(0.0, k))
    }
}

/// Test functions `φ_n(x/N)` for the first `modes` eigenpairs of the
/// continuum operator coupled to `env` at the lattice resolution.
pub fn lattice_eigenfunctions(env: &Environment, modes: usize) -> Result<(EigenSystem, Vec<Vec<f64>>)> {
    let eig = spectral_oracle(&env.couple_to_continuum(env.size())?)?;
    if modes > eig.m {
        return invalid("more modes requested than grid sites");
    }
    let phis = (0..modes).map(|k| eig.eigenfunction(k)).collect();
    Ok((eig, phis))
}

/// Run `trials` trajectories and evaluate the linear martingales
/// `⟨φ_n, Z(t)⟩_N - ⟨φ_n, Z(0)⟩_N - ∫⟨φ_n, ham Z⟩_N` and their brackets at
/// macroscopic `macro_times`. The time integrals are exact.
pub fn martingale_experiment(
    env: &Environment,
    phis: &[Vec<f64>],
    ic: &InitialCondition,
    macro_times: &[f64],
    trials: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let n = env.size();
    if phis.iter().any(|p| p.len() != n) {
        return invalid("test functions must be sampled on the lattice");
    }
    if trials < 2 {
        return Err(Error::InsufficientTrials { have: trials, need: 2 });
    }
    let dynamics = Dynamics::new(env)?;
    let modes = phis.len();
    let nf = n as f64;
    let env_weight: Vec<f64> = env.a().iter().zip(env.rtt()).map(|(a, r)| a / r).collect();
    let pair = |f: &dyn Fn(usize) -> f64, scale: f64| {
        Mat::from_fn(modes, modes, |i, j| scale * (0..n).map(|x| phis[i][x] * phis[j][x] * f(x)).sum::<f64>())
    };
    let runs: Vec<MartingaleTrial> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let init = ic.sample(n, seed, trial)?;
            let z0 = init.gartner(&dynamics.scaling).z;
            let mut sim = Simulator::new(&dynamics, init, trial_rng(seed, "martingale", trial))?;
            sim.track_integrals(false);
            let mut out = MartingaleTrial { mg: Vec::new(), main: Vec::new(), compensator: Vec::new(), env_part: Vec::new() };
            for &t in macro_times {
                sim.advance_to(t * nf * nf);
                sim.flush_all();
                let acc = sim.integrals.as_ref().expect("integrals are tracked");
                let z = sim.z();
                let drift = apply_ham(env, &dynamics.scaling, &acc.int_z);
                let mg_site: Vec<f64> = (0..n).map(|x| z[x] - z0[x] - drift[x]).collect();
                out.mg.push(phis.iter().map(|p| p.iter().zip(&mg_site).map(|(a, b)| a * b).sum::<f64>() / nf).collect());
                out.main.push(pair(&|x| acc.int_z2[x], nf.powi(-3)));
                out.compensator.push(pair(&|x| acc.int_q[x], nf.powi(-2)));
                out.env_part.push(pair(&|x| acc.int_q[x] * env_weight[x], nf.powi(-2)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut report = MartingaleReport {
        n,
        modes,
        macro_times: macro_times.to_vec(),
        trials,
        linear: Vec::new(),
        qv_ratio: Vec::new(),
        qv_cross: Vec::new(),
        compensator_ratio: Vec::new(),
        env_part_rel: Vec::new(),
        remainder_rel: Vec::new(),
    };
    for ti in 0..macro_times.len() {
        let col = |f: &dyn Fn(&MartingaleTrial) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
        report.linear.push((0..modes).map(|k| col(&|r| r.mg[ti][k]).into_iter().collect::<Running>().summary()).collect());
        let mut ratios = Vec::new();
        let mut comp = Vec::new();
        let mut envp = Vec::new();
        let mut rem = Vec::new();
        for k in 0..modes {
            let sq = col(&|r| r.mg[ti][k] * r.mg[ti][k]);
            let main = col(&|r| r.main[ti][(k, k)]);
            let c = col(&|r| r.compensator[ti][(k, k)]);
            let e = col(&|r| r.env_part[ti][(k, k)]);
            ratios.push(ratio_of_means(&sq, &main));
            comp.push(ratio_of_means(&sq, &c));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            envp.push(mean(&e) / mean(&main));
            rem.push((mean(&c) - mean(&main) - mean(&e)) / mean(&main));
        }
        report.qv_ratio.push(ratios);
        report.compensator_ratio.push(comp);
        report.env_part_rel.push(envp);
        report.remainder_rel.push(rem);
        let mut cross = Vec::new();
        for i in 0..modes {
            for j in i + 1..modes {
                // Normalise by the geometric mean of the diagonal brackets.
                let scale = (col(&|r| r.main[ti][(i, i)]).iter().sum::<f64>() * col(&|r| r.main[ti][(j, j)]).iter().sum::<f64>())
                    .sqrt()
                    / trials as f64;
                let prod = col(&|r| r.mg[ti][i] * r.mg[ti][j] / scale);
                cross.push((i, j, prod.into_iter().collect::<Running>().summary()));
            }
        }
        report.qv_cross.push(cross);
    }
    Ok(report)
}

/// `Σ_y |∇hk(s;y) ∇hk(s;y-1)|` for the unit-rate walk on `Z/NZ`.
pub fn beta_integrand(s: f64, n: usize) -> Result<f64> {
    let p = if s == 0.0 {
        let mut d = vec![0.0; n];
        d[0] = 1.0;
        d
    } else {
        hk_torus_profile(s, n)?
    };
    let grad = |y: usize| p[(y + 1) % n] - p[y];
    Ok((0..n).map(|y| (grad(y) * grad((y + n - 1) % n)).abs()).sum())
}

/// `∫_0^{N²T} Σ_y |∇hk(s;y) ∇hk(s;y-1)| ds` by Gauss–Legendre on dyadic panels.
pub fn beta_integral(n: usize, t_macro: f64) -> Result<f64> {
    if !(t_macro > 0.0) {
        return invalid("horizon must be positive");
    }
    let horizon = t_macro * (n * n) as f64;
    let (gx, gw) = gauss_legendre(24);
    let mut edges = vec![0.0];
    let mut e = 0.25;
    while e < horizon {
        edges.push(e);
        e *= 2.0;
    }
    edges.push(horizon);
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (x, wt) in gx.iter().zip(&gw) {
            total += 0.5 * (b - a) * wt * beta_integrand(a + 0.5 * (b - a) * (x + 1.0), n)?;
        }
    }
    Ok(total)
}

/// Floor exponents of `E|ΔZ|²` in space (`dist/N`) and time (`Δt/N²`) for
/// environment regularity `u`, initial regularity `u_ic` and target `v`.
pub fn holder_floors(u: f64, u_ic: f64, v: f64) -> (f64, f64) {
    let spatial = (u / 2.0).min(u_ic).min(v);
    let temporal = (u / 4.0).min(u_ic / 2.0).min(v / 2.0);
    (2.0 * spatial, 2.0 * temporal)
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderRegression {
    /// `(dist/N, E|Z(t,x+d) - Z(t,x)|²)`.
    pub spatial: Vec<(f64, f64)>,
    /// `(Δt/N², E|Z(t+Δt,x) - Z(t,x)|²)`.
    pub temporal: Vec<(f64, f64)>,
    pub spatial_fit: LinearFit,
    pub temporal_fit: LinearFit,
}

/// Second moments of spatial increments at microscopic time `t_spatial` and
/// of temporal increments from time 0 over microscopic `lags`; log-log fits.
pub fn moment_holder_regression(
    env: &Environment,
    ic: &InitialCondition,
    t_spatial: f64,
    dists: &[usize],
    lags: &[f64],
    trials: usize,
    seed: u64,
) -> Result<HolderRegression> {
    let n = env.size();
    let nf = n as f64;
    if trials < 2 {
        return Err(Error::InsufficientTrials { have: trials, need: 2 });
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) || dists.iter().any(|&d| d == 0 || d >= n) {
        return invalid("lags must increase and distances lie in 1..N");
    }
    let dynamics = Dynamics::new(env)?;
    let per_trial: Vec<(Vec<f64>, Vec<f64>)> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let init = ic.sample(n, seed, trial)?;
            let z0 = init.gartner(&dynamics.scaling).z;
            let mut sim = Simulator::new(&dynamics, init, trial_rng(seed, "holder", trial))?;
            let mut temporal = Vec::with_capacity(lags.len());
            let mut spatial = Vec::new();
            let mut checkpoints: Vec<f64> = lags.to_vec();
            checkpoints.push(t_spatial);
            checkpoints.sort_by(f64::total_cmp);
            checkpoints.dedup();
            for &c in &checkpoints {
                sim.advance_to(c);
                let z = sim.z();
                if lags.contains(&c) {
                    temporal.push((0..n).map(|x| (z[x] - z0[x]).powi(2)).sum::<f64>() / nf);
                }
                if c == t_spatial {
                    spatial = dists.iter().map(|&d| (0..n).map(|x| (z[(x + d) % n] - z[x]).powi(2)).sum::<f64>() / nf).collect();
                }
            }
            Ok((spatial, temporal))
        })
        .collect::<Result<_>>()?;
    let avg = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, k: usize| per_trial.iter().map(|r| f(r)[k]).sum::<f64>() / trials as f64;
    let spatial: Vec<(f64, f64)> = dists.iter().enumerate().map(|(k, &d)| (d as f64 / nf, avg(&|r| &r.0, k))).collect();
    let temporal: Vec<(f64, f64)> = lags.iter().enumerate().map(|(k, &l)| (l / (nf * nf), avg(&|r| &r.1, k))).collect();
    let fit = |pts: &[(f64, f64)]| {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().map(|(a, b)| (a.ln(), b.ln())).unzip();
        linear_fit(&x, &y)
    };
    Ok(HolderRegression { spatial_fit: fit(&spatial), temporal_fit: fit(&temporal), spatial, temporal })
}

/// Decay of the conditional mean of `W` after a common history.
#[derive(Clone, Debug, Serialize)]
pub struct DecorrelationCurve {
    pub n: usize,
    pub history_time: f64,
    pub lags: Vec<f64>,
    /// Unbiased estimates of `E[(E[W(s+t,x) | F_s] / L_s)²]`, averaged over `x`,
    /// where `L_s = Σ_x Z(s,x)²/N` is the level at the branching time.
    pub second_moment: Vec<f64>,
    /// Square roots of the (clipped) second moments.
    pub rms: Vec<f64>,
    /// Fit of `rms` to `A + B/√(t+1) + C N/(t+1)` with nonnegative constants.
    pub fit: NnlsFit,
    /// `max |W| / (c Z²)` over every sample, with `c` from the rates.
    pub bound_ratio: f64,
}

impl DecorrelationCurve {
    pub fn decreasing(&self) -> bool {
        self.rms.windows(2).all(|w| w[1] < w[0])
    }
}

/// Common-history branching: run `histories` stationary trajectories to
/// microscopic time `history_time`, continue each with `branches`
/// independent copies, and estimate `E[(E[W|F_s])²]` at each lag by the
/// off-diagonal branch products.
pub fn w_field_decorrelation(
    env: &Environment,
    history_time: f64,
    lags: &[f64],
    histories: usize,
    branches: usize,
    seed: u64,
) -> Result<DecorrelationCurve> {
    if branches < 2 || histories < 2 {
        return Err(Error::InsufficientTrials { have: histories.min(branches), need: 2 });
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) || lags.iter().any(|&l| l < 0.0) {
        return invalid("lags must be nonnegative and increasing");
    }
    let n = env.size();
    let dynamics = Dynamics::new(env)?;
    let c = crate::asep::w_bound_constant(&dynamics.scaling);
    let bf = branches as f64;
    let per_history: Vec<(Vec<f64>, f64)> = (0..histories as u64)
        .into_par_iter()
        .map(|h| {
            let init = AsepState::stationary(n, seed, h)?;
            let mut sim = Simulator::new(&dynamics, init, trial_rng(seed, "w-history", h))?;
            sim.advance_to(history_time);
            let base = sim.state.clone();
            // The F_s-measurable level Σ_x Z(s,x)²/N; W is reported relative to it.
            let level = sim.z().iter().map(|v| v * v).sum::<f64>() / n as f64;
            // sums[lag][x], squares[lag][x] over branches.
            let mut sums = vec![vec![0.0; n]; lags.len()];
            let mut squares = vec![vec![0.0; n]; lags.len()];
            let mut bound = 0.0f64;
            for b in 0..branches as u64 {
                let r = rng::stream2(seed, rng::label("w-branch"), h * branches as u64 + b);
                let mut branch = Simulator::new(&dynamics, base.clone(), r)?;
                for (k, &lag) in lags.iter().enumerate() {
                    branch.advance_to(history_time + lag);
                    let z = branch.z();
                    let w = w_field(&z);
                    for x in 0..n {
                        bound = bound.max(w[x].abs() / (c * z[x] * z[x]));
                        let w = w[x] / level;
                        sums[k][x] += w;
                        squares[k][x] += w * w;
                    }
                }
            }
            let est = (0..lags.len())
                .map(|k| (0..n).map(|x| (sums[k][x].powi(2) - squares[k][x]) / (bf * (bf - 1.0))).sum::<f64>() / n as f64)
                .collect();
            Ok((est, bound))
        })
        .collect::<Result<_>>()?;
    let second_moment: Vec<f64> =
        (0..lags.len()).map(|k| per_history.iter().map(|(e, _)| e[k]).sum::<f64>() / histories as f64).collect();
    let rms: Vec<f64> = second_moment.iter().map(|v| v.max(0.0).sqrt()).collect();
    let nf = n as f64;
    let columns = vec![
        vec![1.0; lags.len()],
        lags.iter().map(|t| (t + 1.0).sqrt().recip()).collect(),
        lags.iter().map(|t| nf / (t + 1.0)).collect(),
    ];
    let fit = nonnegative_least_squares(&columns, &rms);
    let bound_ratio = per_history.iter().map(|(_, b)| *b).fold(0.0, f64::max);
    Ok(DecorrelationCurve { n, history_time, lags: lags.to_vec(), second_moment, rms, fit, bound_ratio })
}

/// Environment family used along a convergence ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum LadderKind {
    Homogeneous,
    Alternating { delta: f64 },
    Iid { sigma: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceConfig {
    pub kind: LadderKind,
    pub ladder: Vec<usize>,
    /// Macroscopic horizon; covariances are compared at `T/2` and `T`.
    pub t_end: f64,
    /// ASEP trials per (replicate, N).
    pub trials: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Number of equally spaced comparison points.
    pub points: usize,
    /// Time slices of the covariance estimator.
    pub slices: usize,
    /// Finest grid of the SHE reference covariance (extrapolated from it and half of it).
    pub reference_grid: usize,
    /// Largest Strang step of the reference second-moment solve.
    pub reference_step: f64,
    /// SHE Monte Carlo trials per replicate for the one-point law.
    pub she_trials: usize,
    pub she_grid: usize,
}

impl ConvergenceConfig {
    pub fn covariance_times(&self) -> Vec<f64> {
        vec![0.5 * self.t_end, self.t_end]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub config: ConvergenceConfig,
    /// `[replicate][rung]` RMS covariance gap to the coupled SHE.
    pub gaps: Vec<Vec<f64>>,
    /// `[replicate][rung]` RMS covariance gap to the homogeneous SHE.
    pub gaps_homogeneous: Vec<Vec<f64>>,
    /// `[replicate][rung]` sup gap of the mean fields on the comparison points.
    pub mean_gaps: Vec<Vec<f64>>,
    /// `[rung]` KS distance of the pooled one-point samples at `(T, ½)`.
    pub ks: Vec<f64>,
    pub replicate_seeds: Vec<u64>,
}

impl ConvergenceReport {
    /// Fraction of replicates whose coupled gap strictly decreases along the ladder.
    pub fn decreasing_fraction(&self) -> f64 {
        let ok = self.gaps.iter().filter(|g| g.windows(2).all(|w| w[1] < w[0])).count();
        ok as f64 / self.gaps.len() as f64
    }

    /// Fraction of replicates that decrease and end below the homogeneous gap.
    pub fn separated_fraction(&self) -> f64 {
        let ok = self
            .gaps
            .iter()
            .zip(&self.gaps_homogeneous)
            .filter(|(g, h)| g.windows(2).all(|w| w[1] < w[0]) && g.last() < h.last())
            .count();
        ok as f64 / self.gaps.len() as f64
    }

    pub fn ks_decreasing(&self) -> bool {
        self.ks.windows(2).all(|w| w[1] < w[0])
    }
}

/// Slice boundaries on `[0, τ]`, refined quadratically towards `τ`.
fn graded_slices(tau: f64, slices: usize) -> Vec<f64> {
    (0..=slices)
        .map(|k| {
            let u = k as f64 / slices as f64;
            tau * (1.0 - (1.0 - u).powi(2))
        })
        .collect()
}

/// Covariances `Cov(Z(τ,x), Z(τ,y))` of the ASEP Gärtner field on the
/// comparison points, at each microscopic `taus`, estimated through the
/// compensator: `Cov = E Σ_z ∫_0^τ sg(τ-s;x,z) sg(τ-s;y,z) q(s,z) ds`.
///
/// The time integral uses per-site exact integrals of `q` over graded
/// slices, weighted by slice averages of the kernel products. Also returns
/// the one-point samples `Z(τ_last, x_probe)`.
pub fn compensator_covariance(
    env: &Environment,
    ic: &InitialCondition,
    taus: &[f64],
    sites: &[usize],
    probe: usize,
    slices: usize,
    trials: usize,
    seed: u64,
) -> Result<(Vec<Mat>, Vec<f64>)> {
    let n = env.size();
    if trials < 2 {
        return Err(Error::InsufficientTrials { have: trials, need: 2 });
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) || taus.is_empty() {
        return invalid("covariance times must be increasing");
    }
    let dynamics = Dynamics::new(env)?;
    let sg = DiscreteSemigroup::new(env)?;
    let p = sites.len();
    let (gx, gw) = gauss_legendre(4);
    let grids: Vec<Vec<f64>> = taus.iter().map(|&tau| graded_slices(tau, slices)).collect();
    let mut checkpoints: Vec<f64> = grids.iter().flatten().copied().collect();
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup();
    let index_of = |t: f64| checkpoints.iter().position(|&c| c == t).expect("boundary is a checkpoint");
    // weights[j][k][(a,b)] is the vector over z of the slice-averaged
    // sg(τ_j - s; x_a, z) sg(τ_j - s; x_b, z).
    let weights: Vec<Vec<Vec<Vec<f64>>>> = grids
        .iter()
        .zip(taus)
        .map(|(grid, &tau)| {
            grid.windows(2)
                .map(|w| {
                    let mut acc = vec![vec![0.0; n]; p * p];
                    for (x, wt) in gx.iter().zip(&gw) {
                        let s = w[0] + 0.5 * (w[1] - w[0]) * (x + 1.0);
                        let rows: Vec<Vec<f64>> = sites.iter().map(|&site| sg.row(tau - s, site)).collect();
                        for a in 0..p {
                            for b in a..p {
                                for z in 0..n {
                                    acc[a * p + b][z] += 0.5 * wt * rows[a][z] * rows[b][z];
                                }
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let per_trial: Vec<(Vec<Mat>, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let init = ic.sample(n, seed, trial)?;
            let mut sim = Simulator::new(&dynamics, init, trial_rng(seed, "covariance", trial))?;
            sim.track_integrals(false);
            let mut snaps: Vec<Vec<f64>> = Vec::with_capacity(checkpoints.len());
            for &c in &checkpoints {
                sim.advance_to(c);
                sim.flush_all();
                snaps.push(sim.integrals.as_ref().expect("integrals are tracked").int_q.clone());
            }
            let probe_value = sim.z()[probe];
            let covs = grids
                .iter()
                .enumerate()
                .map(|(j, grid)| {
                    let mut cov = Mat::zeros(p, p);
                    for (k, w) in grid.windows(2).enumerate() {
                        let (lo, hi) = (&snaps[index_of(w[0])], &snaps[index_of(w[1])]);
                        for a in 0..p {
                            for b in a..p {
                                let wv = &weights[j][k][a * p + b];
                                cov[(a, b)] += (0..n).map(|z| wv[z] * (hi[z] - lo[z])).sum::<f64>();
                            }
                        }
                    }
                    for a in 0..p {
                        for b in 0..a {
                            cov[(a, b)] = cov[(b, a)];
                        }
                    }
                    cov
                })
                .collect();
            Ok((covs, probe_value))
        })
        .collect::<Result<_>>()?;
    let covs = (0..taus.len())
        .map(|j| per_trial.iter().fold(Mat::zeros(p, p), |acc, (c, _)| acc + &c[j]) / trials as f64)
        .collect();
    Ok((covs, per_trial.iter().map(|(_, z)| *z).collect()))
}

/// Covariance of the SHE from flat data `Z̄^ic ≡ 1` on `points` equally
/// spaced points at each time, from the grid second-moment equation on
/// grids `M` and `M/2` combined by Richardson extrapolation.
pub fn she_reference_covariance(cenv: &ContinuumEnvironment, times: &[f64], points: usize, max_step: f64) -> Result<Vec<Mat>> {
    let m = cenv.grid_size();
    if m % (2 * points) != 0 {
        return invalid("reference grid must contain the comparison points at both resolutions");
    }
    let on_grid = |c: &ContinuumEnvironment| -> Result<Vec<Mat>> {
        let mm = c.grid_size();
        let stride = mm / points;
        let ones = vec![1.0; mm];
        if c.is_zero() {
            return Ok(times
                .iter()
                .map(|&t| {
                    let u = homogeneous_second_moment(mm, 1.0, t);
                    Mat::from_fn(points, points, |a, b| u[((b + points - a) % points) * stride] - 1.0)
                })
                .collect());
        }
        let eig = spectral_oracle(c)?;
        let moments = second_moments_at(c, &ones, times, max_step)?;
        Ok(times
            .iter()
            .zip(moments)
            .map(|(&t, u)| {
                let mean = eig.apply(t, &ones);
                Mat::from_fn(points, points, |a, b| u[(a * stride, b * stride)] - mean[a * stride] * mean[b * stride])
            })
            .collect())
    };
    let fine = on_grid(cenv)?;
    let coarse = on_grid(&cenv.resample(m / 2))?;
    Ok(fine.iter().zip(&coarse).map(|(f, c)| f * 2.0 - c).collect())
}

/// `Z̄(T, x_probe)` over independent SHE runs on grid `M` with `Δt = 1/M²`.
pub fn she_one_point_samples(cenv: &ContinuumEnvironment, t_end: f64, probe: f64, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let m = cenv.grid_size();
    let dt0 = 1.0 / (m * m) as f64;
    let steps = (t_end / dt0).ceil();
    let dt = t_end / steps;
    let solver = SheSolver::new(cenv, dt)?;
    let j = (probe * m as f64).round() as usize % m;
    (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let nf = NoiseField::new(m, dt, rng::derive(seed, trial))?;
            let mut z = vec![1.0; m];
            for k in 0..steps as u64 {
                z = solver.step(&z, Some(&nf.native(k)));
            }
            Ok(z[j])
        })
        .collect()
}

fn rms_gap(a: &[Mat], b: &[Mat]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y.iter()) {
            s += (p - q).powi(2);
            count += 1;
        }
    }
    (s / count as f64).sqrt()
}

/// Covariance-grid, mean-field and one-point-law gaps between the scaled
/// ASEP and the SHE along a coupled ladder, from flat initial data.
pub fn convergence_experiment(config: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let cfg = config;
    let points = cfg.points;
    if cfg.ladder.iter().any(|&n| n % points != 0) || cfg.replicates == 0 {
        return invalid("every rung must contain the comparison points and at least one replicate is needed");
    }
    let times = cfg.covariance_times();
    let homogeneous_ref = she_reference_covariance(&ContinuumEnvironment::zero(cfg.reference_grid), &times, points, cfg.reference_step)?;
    let probe = 0.5;
    let mut report = ConvergenceReport {
        config: cfg.clone(),
        gaps: Vec::new(),
        gaps_homogeneous: Vec::new(),
        mean_gaps: Vec::new(),
        ks: Vec::new(),
        replicate_seeds: Vec::new(),
    };
    let mut pooled_asep: Vec<Vec<f64>> = vec![Vec::new(); cfg.ladder.len()];
    let mut pooled_she: Vec<f64> = Vec::new();
    let mut homogeneous_she: Option<Vec<f64>> = None;
    for rep in 0..cfg.replicates as u64 {
        let rep_seed = rng::derive(cfg.seed, rep);
        report.replicate_seeds.push(rep_seed);
        let ladder = match cfg.kind {
            LadderKind::Homogeneous => {
                CoupledLadder::deterministic(cfg.ladder.iter().map(|&n| Environment::homogeneous(n)).collect::<Result<_>>()?)?
            }
            LadderKind::Alternating { delta } => CoupledLadder::deterministic(
                cfg.ladder.iter().map(|&n| Environment::alternating(n, delta)).collect::<Result<_>>()?,
            )?,
            LadderKind::Iid { sigma } => CoupledLadder::iid(&cfg.ladder, sigma, rep_seed)?,
        };
        let random_env = matches!(cfg.kind, LadderKind::Iid { .. });
        let cenv = ladder.continuum(cfg.reference_grid)?;
        let reference = if random_env {
            she_reference_covariance(&cenv, &times, points, cfg.reference_step)?
        } else {
            homogeneous_ref.clone()
        };
        let she_env = if random_env { ladder.continuum(cfg.she_grid)? } else { ContinuumEnvironment::zero(cfg.she_grid) };
        let she_mean = spectral_oracle(&she_env)?.apply(cfg.t_end, &vec![1.0; cfg.she_grid]);
        let she_samples = if random_env || homogeneous_she.is_none() {
            let trials = if random_env { cfg.she_trials } else { cfg.she_trials * cfg.replicates };
            let s = she_one_point_samples(&she_env, cfg.t_end, probe, trials, rng::derive(rep_seed, rng::label("she")))?;
            if !random_env {
                homogeneous_she = Some(s.clone());
            }
            s
        } else {
            Vec::new()
        };
        pooled_she.extend(she_samples);
        let mut gaps = Vec::new();
        let mut gaps_h = Vec::new();
        let mut mean_gaps = Vec::new();
        for (rung, env) in ladder.envs.iter().enumerate() {
            let n = env.size();
            let n2 = (n * n) as f64;
            let taus: Vec<f64> = times.iter().map(|t| t * n2).collect();
            let sites: Vec<usize> = (0..points).map(|j| j * n / points).collect();
            let (covs, samples) = compensator_covariance(
                env,
                &InitialCondition::Flat,
                &taus,
                &sites,
                n / 2,
                cfg.slices,
                cfg.trials,
                rng::derive(rep_seed, n as u64),
            )?;
            gaps.push(rms_gap(&covs, &reference));
            gaps_h.push(rms_gap(&covs, &homogeneous_ref));
            let scaling = crate::asep::ScalingParams::new(n)?;
            let mean_n = DiscreteSemigroup::new(env)?.apply(taus[1], &AsepState::flat(n)?.gartner(&scaling).z);
            let stride = cfg.she_grid / points;
            mean_gaps.push((0..points).map(|j| (mean_n[sites[j]] - she_mean[j * stride]).abs()).fold(0.0, f64::max));
            pooled_asep[rung].extend(samples);
        }
        report.gaps.push(gaps);
        report.gaps_homogeneous.push(gaps_h);
        report.mean_gaps.push(mean_gaps);
    }
    report.ks = pooled_asep.iter().map(|s| ks_distance(s, &pooled_she)).collect();
    Ok(report)
}

/// `E[Z]` on a lattice against `(S(t)Z̄^ic)` at a continuum point, for reports.
pub fn mean_field(env: &Environment, init: &AsepState, t_micro: f64) -> Result<Vec<f64>> {
    let scaling = crate::asep::ScalingParams::new(env.size())?;
    Ok(DiscreteSemigroup::new(env)?.apply(t_micro, &init.gartner(&scaling).z))
}

/// Dense vector helper for callers assembling reports.
pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
