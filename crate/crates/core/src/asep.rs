//! Inhomogeneous ASEP on `Z/NZ` under weak asymmetry, its height function
//! and the Gärtner field `Z = τ^{h/2} e^{νt}`.
//!
//! Across bond `x` (between `x` and `x+1`) particles jump right at rate
//! `r·rtt(x)` and left at rate `ℓ·rtt(x)`. Because `r + ℓ = 1` the total
//! clock rate is `Σ rtt`, so the next ring is exponential with that rate and
//! the ringing channel is drawn from an alias table. A ring on a blocked
//! channel is consumed without effect.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, StreamRng};
use crate::semigroup::apply_ham;
use crate::torus::Torus;

/// Weak-asymmetry rates `ℓ = ½(1+N^{-1/2})`, `r = ½(1-N^{-1/2})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub n: usize,
    pub ell: f64,
    pub r: f64,
    /// `τ = r/ℓ`.
    pub tau: f64,
    /// `ν = 1 - 2√(rℓ)`.
    pub nu: f64,
    pub sqrt_rl: f64,
    /// `½ log τ`.
    pub half_log_tau: f64,
}

impl ScalingParams {
    pub fn new(n: usize) -> Result<Self> {
        Torus::new(n)?;
        let eps = (n as f64).sqrt().recip();
        let ell = 0.5 * (1.0 + eps);
        let r = 0.5 * (1.0 - eps);
        // 2√(rℓ) = √(1 - 1/N); write ν without cancellation.
        let root = (1.0 - 1.0 / n as f64).sqrt();
        let nu = (1.0 / n as f64) / (1.0 + root);
        let half_log_tau = 0.5 * ((1.0 - eps).ln() - (1.0 + eps).ln());
        Ok(Self { n, ell, r, tau: r / ell, nu, sqrt_rl: 0.5 * root, half_log_tau })
    }

    /// `(r - ℓ)² = 1/N`.
    pub fn asym_sq(&self) -> f64 {
        (self.r - self.ell).powi(2)
    }
}

/// Occupations, heights and elapsed time.
///
/// Heights start from `h(0,x) = Σ_{0<y≤x} (2η(y) - 1)`. A jump across bond
/// `x` changes only `h(x)` (by `-2` rightwards, `+2` leftwards), which keeps
/// `h(x) - h(x-1) = 2η(x) - 1` at every site including the seam, so no
/// separate winding bookkeeping is needed. `net_current` counts rightward
/// minus leftward jumps across the seam bond `(N-1, 0)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsepState {
    pub eta: Vec<u8>,
    pub h: Vec<i64>,
    pub t: OrderedTime,
    pub net_current: i64,
}

/// Elapsed microscopic time (wrapped so the state stays `Eq`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderedTime(pub f64);

impl Eq for OrderedTime {}

impl AsepState {
    pub fn from_occupations(eta: Vec<u8>) -> Result<Self> {
        let n = eta.len();
        Torus::new(n)?;
        if eta.iter().any(|&e| e > 1) {
            return invalid("occupations must be 0 or 1");
        }
        let particles = eta.iter().map(|&e| e as usize).sum::<usize>();
        if particles * 2 != n {
            return Err(Error::NotHalfFilled { particles, sites: n });
        }
        let mut h = vec![0i64; n];
        for x in 1..n {
            h[x] = h[x - 1] + 2 * eta[x] as i64 - 1;
        }
        Ok(Self { eta, h, t: OrderedTime(0.0), net_current: 0 })
    }

    /// Alternating occupations `1,0,1,0,…`: heights in `{0,1}`.
    pub fn flat(n: usize) -> Result<Self> {
        Self::from_occupations((0..n).map(|x| (x % 2 == 0) as u8).collect())
    }

    /// Uniform half-filled configuration, the stationary law of the dynamics.
    pub fn stationary(n: usize, seed: u64, index: u64) -> Result<Self> {
        let mut eta: Vec<u8> = (0..n).map(|x| (x < n / 2) as u8).collect();
        let mut r = rng::stream2(seed, rng::label("stationary-init"), index);
        eta.shuffle(&mut r);
        Self::from_occupations(eta)
    }

    /// Occupations whose height tracks `⌊√N φ(x/N)⌋` for a periodic profile
    /// `φ` with `φ(0) = 0`, subject to half filling.
    pub fn from_height_profile(n: usize, profile: impl Fn(f64) -> f64) -> Result<Self> {
        Torus::new(n)?;
        let scale = (n as f64).sqrt();
        let mut eta = vec![0u8; n];
        let mut ups_left = n / 2;
        let mut downs_left = n / 2;
        let mut h = 0i64;
        // Site 0 is placed last so that h(0) = 0 and the seam closes.
        for x in 1..=n {
            let target = (scale * profile((x % n) as f64 / n as f64)).floor() as i64;
            let want_up = h < target;
            let up = if ups_left == 0 {
                false
            } else if downs_left == 0 {
                true
            } else {
                want_up
            };
            if up {
                ups_left -= 1;
                h += 1;
            } else {
                downs_left -= 1;
                h -= 1;
            }
            eta[x % n] = up as u8;
        }
        Self::from_occupations(eta)
    }

    pub fn size(&self) -> usize {
        self.eta.len()
    }

    pub fn time(&self) -> f64 {
        self.t.0
    }

    pub fn particles(&self) -> usize {
        self.eta.iter().map(|&e| e as usize).sum()
    }

    /// `h(x) - h(x-1) = 2η(x) - 1` for every `x`, and half filling.
    pub fn is_consistent(&self) -> bool {
        let n = self.size();
        self.particles() * 2 == n
            && (0..n).all(|x| self.h[x] - self.h[(x + n - 1) % n] == 2 * self.eta[x] as i64 - 1)
    }

    pub fn gartner(&self, scaling: &ScalingParams) -> GartnerField {
        let t = self.time();
        let log_z: Vec<f64> = self.h.iter().map(|&h| h as f64 * scaling.half_log_tau + scaling.nu * t).collect();
        GartnerField { z: log_z.iter().map(|l| l.exp()).collect(), log_z }
    }
}

/// Initial data for ensembles of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    Flat,
    /// A fresh uniform half-filled configuration per trial.
    Stationary,
    Occupations { eta: Vec<u8> },
}

impl InitialCondition {
    pub fn sample(&self, n: usize, seed: u64, trial: u64) -> Result<AsepState> {
        match self {
            Self::Flat => AsepState::flat(n),
            Self::Stationary => AsepState::stationary(n, seed, trial),
            Self::Occupations { eta } => {
                if eta.len() != n {
                    return invalid(format!("occupation vector has {} sites, expected {n}", eta.len()));
                }
                AsepState::from_occupations(eta.clone())
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Stationary)
    }
}

/// `(sup_x Z(x), sup_{x≠y} |Z(x)-Z(y)| / d(x/N, y/N)^u)` for a lattice field.
pub fn initial_profile_report(state: &AsepState, scaling: &ScalingParams, u: f64) -> (f64, f64) {
    let z = state.gartner(scaling).z;
    let n = z.len();
    let sup = z.iter().copied().fold(0.0, f64::max);
    let mut holder = 0.0f64;
    for x in 0..n {
        for y in x + 1..n {
            let d = (y - x).min(n - (y - x)) as f64 / n as f64;
            holder = holder.max((z[x] - z[y]).abs() / d.powf(u));
        }
    }
    (sup, holder)
}

/// `Z(t,x) = τ^{h(t,x)/2} e^{νt}` with its logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct GartnerField {
    pub z: Vec<f64>,
    pub log_z: Vec<f64>,
}

impl GartnerField {
    /// `-log Z`, the microscopic KPZ height.
    pub fn kpz_height(&self) -> Vec<f64> {
        self.log_z.iter().map(|l| -l).collect()
    }
}

/// `W(x) = N (Z(x+1) - Z(x)) (Z(x) - Z(x-1))`.
pub fn w_field(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    (0..n).map(|x| n as f64 * (z[(x + 1) % n] - z[x]) * (z[x] - z[(x + n - 1) % n])).collect()
}

/// Constant `c` in `|W(x)| ≤ c Z(x)²`: the largest of
/// `N |τ^{σ'/2} - 1| |1 - τ^{-σ/2}|` over `σ, σ' = ±1`.
pub fn w_bound_constant(scaling: &ScalingParams) -> f64 {
    let s = scaling.tau.sqrt();
    let mut c = 0.0f64;
    for sig in [-1.0f64, 1.0] {
        for sig2 in [-1.0f64, 1.0] {
            c = c.max(((s.powf(sig2) - 1.0) * (1.0 - s.powf(-sig))).abs());
        }
    }
    scaling.n as f64 * c
}

/// Residual of `(ℓ-r)(η(x)-η(x+1)) Z(x) = √(ℓr) ΔZ(x) - ν Z(x)` given the
/// occupations of `x, x+1` and the values `Z(x-1), Z(x), Z(x+1)`.
pub fn four_case_residual(eta: (u8, u8), z: [f64; 3], scaling: &ScalingParams) -> Result<f64> {
    let (e0, e1) = eta;
    if e0 > 1 || e1 > 1 {
        return invalid("occupations must be 0 or 1");
    }
    let s = scaling.tau.sqrt();
    let expect_prev = z[1] * if e0 == 1 { 1.0 / s } else { s };
    let expect_next = z[1] * if e1 == 1 { s } else { 1.0 / s };
    let tol = 1e-12 * z[1].abs().max(1.0);
    if (z[0] - expect_prev).abs() > tol || (z[2] - expect_next).abs() > tol {
        return Err(Error::Inconsistent("Z values do not match the height increments 2η-1".into()));
    }
    let lhs = (scaling.ell - scaling.r) * (e0 as f64 - e1 as f64) * z[1];
    let rhs = scaling.sqrt_rl * (z[2] - 2.0 * z[1] + z[0]) - scaling.nu * z[1];
    Ok(lhs - rhs)
}

/// Coefficients of `ηZ(x) = c_1 Z(x) + c_2 ∇Z(x-1)` and
/// `η(x+1) Z(x) = c_3 Z(x) + c_2 ∇Z(x)`.
pub fn taylor_coefficients(scaling: &ScalingParams) -> (f64, f64, f64) {
    let s = scaling.tau.sqrt();
    let den = s - 1.0 / s;
    ((s - 1.0) / den, 1.0 / den, (1.0 - 1.0 / s) / den)
}

/// Largest relative residual (divided by `Z(x)`) of both Taylor identities
/// over all sites of `state`.
pub fn taylor_residuals(state: &AsepState, scaling: &ScalingParams) -> (f64, f64) {
    let n = state.size();
    let g = state.gartner(scaling);
    let z = &g.z;
    let (c1, c2, c3) = taylor_coefficients(scaling);
    let mut r1 = 0.0f64;
    let mut r2 = 0.0f64;
    for x in 0..n {
        let prev = z[(x + n - 1) % n];
        let next = z[(x + 1) % n];
        let e0 = state.eta[x] as f64;
        let e1 = state.eta[(x + 1) % n] as f64;
        r1 = r1.max((e0 * z[x] - c1 * z[x] - c2 * (z[x] - prev)).abs() / z[x]);
        r2 = r2.max((e1 * z[x] - c3 * z[x] - c2 * (next - z[x])).abs() / z[x]);
    }
    (r1, r2)
}

/// Walker's alias table over `weights`.
#[derive(Clone, Debug)]
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Self {
        let k = weights.len();
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * k as f64 / total).collect();
        let mut prob = vec![1.0; k];
        let mut alias: Vec<u32> = (0..k as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..k).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        Self { prob, alias }
    }

    #[inline]
    fn sample(&self, bits: u64) -> usize {
        let k = self.prob.len() as u64;
        let col = (((bits >> 32) * k) >> 32) as usize;
        let frac = (bits & 0xFFFF_FFFF) as f64 * (1.0 / 4294967296.0);
        if frac < self.prob[col] {
            col
        } else {
            self.alias[col] as usize
        }
    }
}

/// Rates of the graphical construction for a fixed environment.
#[derive(Clone, Debug)]
pub struct Dynamics {
    pub scaling: ScalingParams,
    rtt: Vec<f64>,
    a: Vec<f64>,
    total_rate: f64,
    channels: AliasTable,
}

impl Dynamics {
    pub fn new(env: &Environment) -> Result<Self> {
        let scaling = ScalingParams::new(env.size())?;
        // Channel 2x is the right clock of bond x, 2x+1 the left clock.
        let weights: Vec<f64> = env.rtt().iter().flat_map(|&q| [scaling.r * q, scaling.ell * q]).collect();
        Ok(Self {
            scaling,
            rtt: env.rtt().to_vec(),
            a: env.a().to_vec(),
            total_rate: env.rtt().iter().sum(),
            channels: AliasTable::new(&weights),
        })
    }

    pub fn size(&self) -> usize {
        self.rtt.len()
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn rtt(&self) -> &[f64] {
        &self.rtt
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// Predictable bracket rate of the Gärtner martingale at site `z` per
    /// unit `Z²`: the squared jump sizes times the jump rates,
    /// `(r-ℓ)² rtt(z) (η(z)(1-η(z+1))/r + η(z+1)(1-η(z))/ℓ)`.
    #[inline]
    pub fn bracket_factor(&self, z: usize, e0: u8, e1: u8) -> f64 {
        let s = &self.scaling;
        let (e0, e1) = (e0 as f64, e1 as f64);
        s.asym_sq() * self.rtt[z] * (e0 * (1.0 - e1) / s.r + e1 * (1.0 - e0) / s.ell)
    }
}

/// One clock ring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub bond: u32,
    pub right: bool,
    pub executed: bool,
}

/// Exact per-site time integrals of `Z`, `Z²`, the bracket rate `q`, and
/// optionally `W`, accumulated lazily: a site is brought up to date only
/// when one of the quantities it depends on changes.
#[derive(Clone, Debug)]
pub struct SiteIntegrals {
    pub start: f64,
    pub int_z: Vec<f64>,
    pub int_z2: Vec<f64>,
    pub int_q: Vec<f64>,
    pub int_w: Option<Vec<f64>>,
    /// `G(s) = (e^{νs}-1)/ν` and `G₂(s) = (e^{2νs}-1)/(2ν)` at the last flush of each site.
    last_g: Vec<f64>,
    last_g2: Vec<f64>,
}

/// Event-driven simulator for one trajectory.
pub struct Simulator<'a> {
    pub dynamics: &'a Dynamics,
    pub state: AsepState,
    rng: StreamRng,
    /// `τ^{h(x)/2}` for every site.
    base: Vec<f64>,
    pub integrals: Option<SiteIntegrals>,
    pub log: Option<Vec<EventRecord>>,
    pub events: u64,
}

#[inline]
fn g_fn(nu: f64, s: f64) -> f64 {
    (nu * s).exp_m1() / nu
}

impl<'a> Simulator<'a> {
    pub fn new(dynamics: &'a Dynamics, state: AsepState, rng: StreamRng) -> Result<Self> {
        if state.size() != dynamics.size() {
            return invalid(format!("state has {} sites, environment {}", state.size(), dynamics.size()));
        }
        let base = state.h.iter().map(|&h| (h as f64 * dynamics.scaling.half_log_tau).exp()).collect();
        Ok(Self { dynamics, state, rng, base, integrals: None, log: None, events: 0 })
    }

    /// Start exact time integrals from the current time.
    pub fn track_integrals(&mut self, with_w: bool) {
        let n = self.state.size();
        let t = self.state.time();
        let nu = self.dynamics.scaling.nu;
        self.integrals = Some(SiteIntegrals {
            start: t,
            int_z: vec![0.0; n],
            int_z2: vec![0.0; n],
            int_q: vec![0.0; n],
            int_w: with_w.then(|| vec![0.0; n]),
            last_g: vec![g_fn(nu, t); n],
            last_g2: vec![g_fn(2.0 * nu, t); n],
        });
    }

    pub fn record_events(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn gartner(&self) -> GartnerField {
        self.state.gartner(&self.dynamics.scaling)
    }

    /// `Z(x)` at the current time.
    pub fn z(&self) -> Vec<f64> {
        let e = (self.dynamics.scaling.nu * self.state.time()).exp();
        self.base.iter().map(|b| b * e).collect()
    }

    #[inline]
    fn flush_site(&mut self, z: usize, g: f64, g2: f64) {
        let Some(acc) = self.integrals.as_mut() else { return };
        let n = self.base.len();
        let b = self.base[z];
        let dg = g - acc.last_g[z];
        let dg2 = g2 - acc.last_g2[z];
        acc.int_z[z] += b * dg;
        acc.int_z2[z] += b * b * dg2;
        let e0 = self.state.eta[z];
        let e1 = self.state.eta[(z + 1) % n];
        acc.int_q[z] += b * b * dg2 * self.dynamics.bracket_factor(z, e0, e1);
        if let Some(w) = acc.int_w.as_mut() {
            let bp = self.base[(z + 1) % n];
            let bm = self.base[(z + n - 1) % n];
            w[z] += n as f64 * (bp - b) * (b - bm) * dg2;
        }
        acc.last_g[z] = g;
        acc.last_g2[z] = g2;
    }

    /// Bring every accumulator up to the current time.
    pub fn flush_all(&mut self) {
        if self.integrals.is_none() {
            return;
        }
        let nu = self.dynamics.scaling.nu;
        let t = self.state.time();
        let (g, g2) = (g_fn(nu, t), g_fn(2.0 * nu, t));
        for z in 0..self.base.len() {
            self.flush_site(z, g, g2);
        }
    }

    /// Process every ring with time `≤ t_target`, then set the clock to
    /// `t_target` (the pending exponential is discarded, which is exact by
    /// memorylessness).
    pub fn advance_to(&mut self, t_target: f64) {
        let n = self.base.len();
        let dynamics = self.dynamics;
        let rate = dynamics.total_rate;
        let nu = dynamics.scaling.nu;
        let hl = dynamics.scaling.half_log_tau;
        loop {
            let dt: f64 = self.rng.sample::<f64, _>(Exp1) / rate;
            let t_next = self.state.t.0 + dt;
            if t_next > t_target {
                self.state.t.0 = t_target.max(self.state.t.0);
                return;
            }
            self.state.t.0 = t_next;
            self.events += 1;
            let ch = dynamics.channels.sample(self.rng.random::<u64>());
            let x = ch >> 1;
            let right = ch & 1 == 0;
            let x1 = if x + 1 == n { 0 } else { x + 1 };
            let executed = if right {
                self.state.eta[x] == 1 && self.state.eta[x1] == 0
            } else {
                self.state.eta[x1] == 1 && self.state.eta[x] == 0
            };
            if let Some(log) = self.log.as_mut() {
                log.push(EventRecord { t: t_next, bond: x as u32, right, executed });
            }
            if !executed {
                continue;
            }
            if self.integrals.is_some() {
                let (g, g2) = (g_fn(nu, t_next), g_fn(2.0 * nu, t_next));
                let xm = if x == 0 { n - 1 } else { x - 1 };
                self.flush_site(xm, g, g2);
                self.flush_site(x, g, g2);
                self.flush_site(x1, g, g2);
                if self.integrals.as_ref().is_some_and(|a| a.int_w.is_some()) {
                    let x2 = if x1 + 1 == n { 0 } else { x1 + 1 };
                    let xmm = if xm == 0 { n - 1 } else { xm - 1 };
                    // W at x+1 and x-1 read Z(x); bring them up to date too.
                    self.flush_site(x2, g, g2);
                    self.flush_site(xmm, g, g2);
                }
            }
            self.state.eta.swap(x, x1);
            if right {
                self.state.h[x] -= 2;
            } else {
                self.state.h[x] += 2;
            }
            if x == n - 1 {
                self.state.net_current += if right { 1 } else { -1 };
            }
            self.base[x] = (self.state.h[x] as f64 * hl).exp();
        }
    }

    /// Run to `t_end`, calling `observe` after all events up to each sample time.
    pub fn run_with(&mut self, sample_times: &[f64], mut observe: impl FnMut(&Simulator<'a>, usize)) {
        for (k, &t) in sample_times.iter().enumerate() {
            self.advance_to(t);
            observe(self, k);
        }
    }

    pub fn into_rng(self) -> StreamRng {
        self.rng
    }
}

/// `mg(t,x) = Z(t,x) - Z(0,x) - ∫_0^t (ham Z)(s,x) ds` from a recorded event
/// log, with the time integral taken exactly between events.
pub fn extract_martingale(
    initial: &AsepState,
    log: Option<&[EventRecord]>,
    env: &Environment,
    t_end: f64,
) -> Result<Vec<f64>> {
    let log = log.ok_or_else(|| Error::MissingEventLog("run was made without record_events()".into()))?;
    let dynamics = Dynamics::new(env)?;
    let s = dynamics.scaling;
    let n = initial.size();
    let t0 = initial.time();
    let mut state = initial.clone();
    let mut int_z = vec![0.0; n];
    let mut cur_t = t0;
    let integrate = |state: &AsepState, int_z: &mut [f64], from: f64, to: f64| {
        let span = (s.nu * from).exp() * (s.nu * (to - from)).exp_m1() / s.nu;
        for x in 0..n {
            int_z[x] += (state.h[x] as f64 * s.half_log_tau).exp() * span;
        }
    };
    for ev in log.iter().filter(|e| e.t <= t_end) {
        if !ev.executed {
            continue;
        }
        integrate(&state, &mut int_z, cur_t, ev.t);
        cur_t = ev.t;
        let x = ev.bond as usize;
        let x1 = (x + 1) % n;
        state.eta.swap(x, x1);
        state.h[x] += if ev.right { -2 } else { 2 };
    }
    integrate(&state, &mut int_z, cur_t, t_end);
    state.t = OrderedTime(t_end);
    let z_end = state.gartner(&s).z;
    let z_start = initial.gartner(&s).z;
    let drift = apply_ham(env, &s, &int_z);
    Ok((0..n).map(|x| z_end[x] - z_start[x] - drift[x]).collect())
}

/// Sampled trajectory of a scalar field on macroscopic coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldPath {
    pub n: usize,
    pub seed: u64,
    pub scaling: Option<ScalingParams>,
    pub env_id: String,
    /// Macroscopic sample times.
    pub times: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub h: Vec<Vec<i64>>,
    pub eta: Vec<Vec<u8>>,
}

/// Simulate from `state` and sample `Z`, `h`, `η` at macroscopic `times`
/// (microscopic time `t N²`).
pub fn run_until(
    env: &Environment,
    state: AsepState,
    macro_times: &[f64],
    seed: u64,
    trial: u64,
) -> Result<FieldPath> {
    let dynamics = Dynamics::new(env)?;
    let n = env.size();
    let n2 = (n * n) as f64;
    let t0 = state.time();
    if macro_times.iter().any(|&t| t * n2 < t0) {
        return invalid("sample times must not precede the current time");
    }
    let mut sim = Simulator::new(&dynamics, state, rng::stream2(seed, rng::label("asep"), trial))?;
    let mut path = FieldPath {
        n,
        seed,
        scaling: Some(dynamics.scaling),
        env_id: format!("{}:{}", env.kind.tag(), env.seed),
        times: Vec::new(),
        z: Vec::new(),
        h: Vec::new(),
        eta: Vec::new(),
    };
    let micro: Vec<f64> = macro_times.iter().map(|t| t * n2).collect();
    sim.run_with(&micro, |s, k| {
        path.times.push(macro_times[k]);
        path.z.push(s.z());
        path.h.push(s.state.h.clone());
        path.eta.push(s.state.eta.clone());
    });
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Running;

    #[test]
    fn scaling_at_hundred() {
        let s = ScalingParams::new(100).unwrap();
        assert!((s.r - 0.45).abs() < 1e-15 && (s.ell - 0.55).abs() < 1e-15);
        assert!((s.tau - 9.0 / 11.0).abs() < 1e-15);
        let nu_direct = 1.0 - 2.0 * (0.45f64 * 0.55).sqrt();
        assert!((s.nu - nu_direct).abs() < 1e-15);
        assert!((s.nu - 0.0050125628933800).abs() < 1e-12);
        for n in [64usize, 1024, 1 << 16] {
            let s = ScalingParams::new(n).unwrap();
            let nf = n as f64;
            assert!((s.nu - 0.5 / nf).abs() < 1.0 / (nf * nf));
            assert!((s.r + s.ell - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_initial_heights() {
        let s = AsepState::flat(4).unwrap();
        assert_eq!(s.h, vec![0, -1, 0, -1]);
        let s = AsepState::from_occupations(vec![0, 1, 0, 1]).unwrap();
        assert_eq!(s.h, vec![0, 1, 0, 1]);
        assert!(AsepState::from_occupations(vec![1, 1, 0, 1]).is_err());
        let g = AsepState::flat(8).unwrap().gartner(&ScalingParams::new(8).unwrap());
        assert!(g.z.iter().all(|&z| z > 0.0));
    }

    #[test]
    fn height_profile_is_half_filled() {
        let s = AsepState::from_height_profile(64, |x| (2.0 * std::f64::consts::PI * x).sin()).unwrap();
        assert!(s.is_consistent());
        assert!(s.h.iter().map(|h| h.abs()).max().unwrap() <= 10);
    }

    #[test]
    fn four_cases_vanish() {
        let s = ScalingParams::new(64).unwrap();
        let st = s.tau.sqrt();
        for (e0, e1) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
            let z = 1.7;
            let prev = z * if e0 == 1 { 1.0 / st } else { st };
            let next = z * if e1 == 1 { st } else { 1.0 / st };
            assert!(four_case_residual((e0, e1), [prev, z, next], &s).unwrap().abs() < 1e-15);
        }
        assert!(four_case_residual((1, 0), [1.0, 1.0, 1.0], &s).is_err());
    }

    #[test]
    fn taylor_identities_hold() {
        let s = ScalingParams::new(16).unwrap();
        let st = AsepState::stationary(16, 1, 0).unwrap();
        let (a, b) = taylor_residuals(&st, &s);
        assert!(a < 1e-14 && b < 1e-14);
    }

    #[test]
    fn events_conserve_and_track_heights() {
        let env = Environment::iid(16, 1.0, 1.0, 5).unwrap();
        let dynamics = Dynamics::new(&env).unwrap();
        let mut sim = Simulator::new(&dynamics, AsepState::flat(16).unwrap(), rng::stream(9, 0)).unwrap();
        for k in 1..200 {
            sim.advance_to(k as f64 * 0.5);
            assert!(sim.state.is_consistent());
        }
        assert!(sim.events > 0);
    }

    #[test]
    fn blocked_channel_is_suppressed() {
        let env = Environment::homogeneous(4).unwrap();
        let dynamics = Dynamics::new(&env).unwrap();
        let mut sim = Simulator::new(&dynamics, AsepState::from_occupations(vec![1, 1, 0, 0]).unwrap(), rng::stream(1, 0)).unwrap();
        sim.record_events();
        sim.advance_to(50.0);
        let log = sim.log.as_ref().unwrap();
        let mut state = AsepState::from_occupations(vec![1, 1, 0, 0]).unwrap();
        for ev in log {
            let x = ev.bond as usize;
            let x1 = (x + 1) % 4;
            let can = if ev.right { state.eta[x] == 1 && state.eta[x1] == 0 } else { state.eta[x1] == 1 && state.eta[x] == 0 };
            assert_eq!(can, ev.executed);
            if can {
                state.eta.swap(x, x1);
            }
        }
        assert_eq!(state.eta, sim.state.eta);
    }

    #[test]
    fn channel_frequencies_match_rates() {
        let env = Environment::homogeneous(4).unwrap();
        let dynamics = Dynamics::new(&env).unwrap();
        let s = dynamics.scaling;
        let mut sim = Simulator::new(&dynamics, AsepState::flat(4).unwrap(), rng::stream(2, 0)).unwrap();
        sim.record_events();
        sim.advance_to(30_000.0);
        let log = sim.log.as_ref().unwrap();
        let rights: Running = log.iter().map(|e| e.right as u8 as f64).collect();
        assert!(rights.summary().within(s.r, 3.0), "{:?} vs {}", rights.summary(), s.r);
        let rate = log.len() as f64 / 30_000.0;
        let se = (log.len() as f64).sqrt() / 30_000.0;
        assert!((rate - 4.0).abs() < 3.0 * se);
    }

    #[test]
    fn martingale_without_events_closed_form() {
        let env = Environment::iid(8, 1.0, 1.0, 2).unwrap();
        let s = ScalingParams::new(8).unwrap();
        let init = AsepState::flat(8).unwrap();
        let t = 3.0;
        let mg = extract_martingale(&init, Some(&[]), &env, t).unwrap();
        let z0 = init.gartner(&s).z;
        let span = (s.nu * t).exp_m1() / s.nu;
        let drift = apply_ham(&env, &s, &z0);
        for x in 0..8 {
            let expect = z0[x] * (s.nu * t).exp_m1() - drift[x] * span;
            assert!((mg[x] - expect).abs() < 1e-14);
        }
        assert!(matches!(extract_martingale(&init, None, &env, t), Err(Error::MissingEventLog(_))));
    }

    #[test]
    fn lazy_integrals_match_replay() {
        let env = Environment::iid(16, 1.0, 1.0, 8).unwrap();
        let dynamics = Dynamics::new(&env).unwrap();
        let init = AsepState::stationary(16, 3, 0).unwrap();
        let mut sim = Simulator::new(&dynamics, init.clone(), rng::stream(4, 0)).unwrap();
        sim.track_integrals(true);
        sim.record_events();
        sim.advance_to(40.0);
        sim.flush_all();
        let mg = extract_martingale(&init, sim.log.as_deref(), &env, 40.0).unwrap();
        let acc = sim.integrals.as_ref().unwrap();
        let z_end = sim.z();
        let z0 = init.gartner(&dynamics.scaling).z;
        let drift = apply_ham(&env, &dynamics.scaling, &acc.int_z);
        for x in 0..16 {
            let mg2 = z_end[x] - z0[x] - drift[x];
            assert!((mg[x] - mg2).abs() < 1e-10, "{} vs {}", mg[x], mg2);
        }
    }

    #[test]
    fn w_field_bounded_by_z_squared() {
        let s = ScalingParams::new(32).unwrap();
        let c = w_bound_constant(&s);
        let st = AsepState::stationary(32, 5, 1).unwrap();
        let z = st.gartner(&s).z;
        for (x, w) in w_field(&z).iter().enumerate() {
            assert!(w.abs() <= c * z[x] * z[x] * (1.0 + 1e-12));
        }
    }
}
