//! Bond inhomogeneities `rtt(x) = 1 + a(x)`, their partial sums
//! `R(x,x') = -½ Σ_{y∈(x,x']} a(y)`, and coupled continuum limits `R̄`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::torus::Torus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvKind {
    Homogeneous,
    Iid { sigma: f64, bound: f64 },
    Fbm { hurst: f64 },
    Alternating { delta: f64 },
    Custom,
}

impl EnvKind {
    pub fn tag(&self) -> &'static str {
        match self {
            EnvKind::Homogeneous => "homogeneous",
            EnvKind::Iid { .. } => "iid",
            EnvKind::Fbm { .. } => "fbm",
            EnvKind::Alternating { .. } => "alternating",
            EnvKind::Custom => "custom",
        }
    }
}

/// A realised environment on `Z/NZ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    n: usize,
    pub kind: EnvKind,
    pub seed: u64,
    a: Vec<f64>,
    rtt: Vec<f64>,
    /// `prefix[x] = R(0,x)` for `x = 0..=N`; `prefix[N]` includes `a(0)`.
    prefix: Vec<f64>,
    /// fBM path `B(x/N)`, `x = 0..=N`, kept for the continuum coupling.
    path: Option<Vec<f64>>,
    /// Number of fBM increments zeroed by the `|â| < 1/2` truncation.
    pub truncated: usize,
    /// Identifier shared by all members of a coupled family.
    pub family: Option<u64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AssumptionReport {
    pub min_rate: f64,
    pub max_rate: f64,
    pub bounded: bool,
    pub seminorm: f64,
    pub pass: bool,
}

impl Environment {
    pub fn from_increments(a: Vec<f64>, kind: EnvKind, seed: u64) -> Result<Self> {
        let n = a.len();
        Torus::new(n)?;
        let rtt: Vec<f64> = a.iter().map(|v| 1.0 + v).collect();
        let min_rate = rtt.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_rate > 0.0) {
            return Err(Error::RatePositivity { min_rate });
        }
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for x in 1..=n {
            prefix.push(prefix[x - 1] - 0.5 * a[x % n]);
        }
        Ok(Self { n, kind, seed, a, rtt, prefix, path: None, truncated: 0, family: None })
    }

    pub fn homogeneous(n: usize) -> Result<Self> {
        Self::from_increments(vec![0.0; n], EnvKind::Homogeneous, 0)
    }

    /// `a(x) = N^{-1/2} ι(x)` with `ι` symmetric on `{-bound, 0, bound}` and
    /// variance `σ²`; `bound = 0` gives the homogeneous environment.
    pub fn iid(n: usize, sigma: f64, bound: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && bound >= 0.0) {
            return invalid("iid environment needs sigma ≥ 0 and bound ≥ 0");
        }
        if sigma > bound {
            return invalid(format!("a variable bounded by {bound} cannot have standard deviation {sigma}"));
        }
        let scale = (n as f64).sqrt().recip();
        if bound * scale >= 1.0 {
            return Err(Error::RatePositivity { min_rate: 1.0 - bound * scale });
        }
        let p_jump = if bound > 0.0 { (sigma / bound).powi(2) } else { 0.0 };
        let mut r = rng::stream2(seed, rng::label("iid"), n as u64);
        let a = (0..n)
            .map(|_| {
                let u: f64 = r.random();
                if u < 0.5 * p_jump {
                    -bound * scale
                } else if u < p_jump {
                    bound * scale
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_increments(a, EnvKind::Iid { sigma, bound }, seed)
    }

    /// `a(x) = â(x) 1{|â(x)| < 1/2}` with `â(x) = B^α((x+1)/N) - B^α(x/N)`.
    pub fn fbm(n: usize, hurst: f64, seed: u64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return invalid(format!("Hurst exponent must lie in (0,1), got {hurst}"));
        }
        Torus::new(n)?;
        let mut r = rng::stream2(seed, rng::label("fbm"), n as u64);
        let scale = (n as f64).powf(-hurst);
        let incr: Vec<f64> = fractional_gaussian_noise(n, hurst, &mut r)?.into_iter().map(|v| v * scale).collect();
        Self::from_fbm_increments(&incr, hurst, seed)
    }

    fn from_fbm_increments(incr: &[f64], hurst: f64, seed: u64) -> Result<Self> {
        let mut path = Vec::with_capacity(incr.len() + 1);
        path.push(0.0);
        for v in incr {
            path.push(path.last().unwrap() + v);
        }
        let mut truncated = 0;
        let a: Vec<f64> = incr
            .iter()
            .map(|&v| {
                if v.abs() < 0.5 {
                    v
                } else {
                    truncated += 1;
                    0.0
                }
            })
            .collect();
        let mut env = Self::from_increments(a, EnvKind::Fbm { hurst }, seed)?;
        env.path = Some(path);
        env.truncated = truncated;
        Ok(env)
    }

    /// `a(x) = N^{-δ}` on even sites and `-N^{-δ}` on odd sites.
    pub fn alternating(n: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return invalid(format!("alternating amplitude exponent must be positive, got {delta}"));
        }
        let amp = (n as f64).powf(-delta);
        let a = (0..n).map(|x| if x % 2 == 0 { amp } else { -amp }).collect();
        Self::from_increments(a, EnvKind::Alternating { delta }, 0)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn torus(&self) -> Torus {
        Torus::new(self.n).expect("validated at construction")
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn rtt(&self) -> &[f64] {
        &self.rtt
    }

    pub fn is_homogeneous(&self) -> bool {
        self.a.iter().all(|&v| v == 0.0)
    }

    pub fn sup_a(&self) -> f64 {
        self.a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `R(x) = R(0,x)` for `x = 0..N`.
    pub fn r_values(&self) -> &[f64] {
        &self.prefix[..self.n]
    }

    /// `R(0,N)`, the sum over the whole torus.
    pub fn total(&self) -> f64 {
        self.prefix[self.n]
    }

    /// `R(x,x') = -½ Σ_{y∈(x,x']} a(y)` in O(1).
    pub fn partial_sum(&self, x: usize, y: usize) -> f64 {
        if x <= y {
            self.prefix[y] - self.prefix[x]
        } else {
            self.prefix[self.n] - self.prefix[x] + self.prefix[y]
        }
    }

    /// Partial sum anchored at `anchor` and evaluated at signed offset `d`:
    /// `-½ Σ_{k=1}^{d} a(anchor+k)` for `d ≥ 0`, `½ Σ_{k=d+1}^{0} a(anchor+k)` otherwise.
    pub fn anchored_sum(&self, anchor: usize, d: i64) -> f64 {
        let t = self.torus();
        let mut s = 0.0;
        if d >= 0 {
            for k in 1..=d {
                s -= 0.5 * self.a[t.add(anchor, k)];
            }
        } else {
            for k in (d + 1)..=0 {
                s += 0.5 * self.a[t.add(anchor, k)];
            }
        }
        s
    }

    /// Increments of `R`, i.e. `-a/2`, indexed by site.
    pub fn r_increments(&self) -> Vec<f64> {
        self.a.iter().map(|v| -0.5 * v).collect()
    }

    pub fn check_assumption(&self, u: f64, lambda: f64, rate_bound: f64) -> Result<AssumptionReport> {
        let seminorm = self.torus().holder_seminorm(&self.r_increments(), u)?;
        let min_rate = self.rtt.iter().copied().fold(f64::INFINITY, f64::min);
        let max_rate = self.rtt.iter().copied().fold(0.0, f64::max);
        let bounded = min_rate >= 1.0 / rate_bound && max_rate <= rate_bound;
        Ok(AssumptionReport { min_rate, max_rate, bounded, seminorm, pass: bounded && seminorm <= lambda })
    }

    /// Continuum path on the grid `j/M`, `j = 0..=M`.
    ///
    /// iid, custom and homogeneous environments are coupled to themselves
    /// through the linear interpolation of `x ↦ R(Nx)`; fBM environments to
    /// `-½ B^α` built from the same Gaussian path; alternating ones to `0`.
    pub fn couple_to_continuum(&self, m: usize) -> Result<ContinuumEnvironment> {
        if m < 2 {
            return invalid("continuum grid needs at least two cells");
        }
        let n = self.n;
        let knots: Vec<f64> = match (&self.kind, &self.path) {
            (EnvKind::Alternating { .. }, _) => vec![0.0; n + 1],
            (EnvKind::Fbm { .. }, Some(path)) => path.iter().map(|b| -0.5 * b).collect(),
            _ => self.prefix.clone(),
        };
        let values = interpolate_knots(&knots, m);
        let interpolated = m > n || n % m != 0;
        Ok(ContinuumEnvironment {
            values,
            provenance: Provenance::Coupled { from_n: n, kind: self.kind.tag().into(), family: self.family },
            interpolated,
        })
    }

    /// Write the `env.csv` format: a header line with kind, parameters and
    /// seed, then `site,a,rtt,R` rows with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let params = match &self.kind {
            EnvKind::Iid { sigma, bound } => format!(" sigma={sigma:?} bound={bound:?}"),
            EnvKind::Fbm { hurst } => format!(" hurst={hurst:?}"),
            EnvKind::Alternating { delta } => format!(" delta={delta:?}"),
            _ => String::new(),
        };
        writeln!(s, "# kind={} n={} seed={}{} truncated={}", self.kind.tag(), self.n, self.seed, params, self.truncated)
            .unwrap();
        s.push_str("site,a,rtt,R\n");
        for x in 0..self.n {
            writeln!(s, "{},{:?},{:?},{:?}", x, self.a[x], self.rtt[x], self.prefix[x]).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let header = header
            .strip_prefix('#')
            .ok_or(Error::Parse { line: 1, msg: "missing '#' header".into() })?;
        let mut fields = std::collections::HashMap::new();
        for tok in header.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or(Error::Parse { line: 1, msg: format!("missing {k}") })?
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: 1, msg: format!("{k}: {e}") })
        };
        let kind = match fields.get("kind").map(String::as_str) {
            Some("homogeneous") => EnvKind::Homogeneous,
            Some("iid") => EnvKind::Iid { sigma: get("sigma")?, bound: get("bound")? },
            Some("fbm") => EnvKind::Fbm { hurst: get("hurst")? },
            Some("alternating") => EnvKind::Alternating { delta: get("delta")? },
            Some("custom") | None => EnvKind::Custom,
            Some(other) => return Err(Error::Parse { line: 1, msg: format!("unknown kind {other}") }),
        };
        let seed = fields.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let truncated = fields.get("truncated").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut a = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with("site") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 4 columns, got {}", cols.len()) });
            }
            let site: usize = cols[0].parse().map_err(|e| Error::Parse { line: i + 1, msg: format!("{e}") })?;
            if site != a.len() {
                return Err(Error::Parse { line: i + 1, msg: format!("site {site} out of order") });
            }
            a.push(cols[1].parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("{e}") })?);
        }
        let mut env = Self::from_increments(a, kind, seed)?;
        env.truncated = truncated;
        Ok(env)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Environments at several sizes built from one underlying randomness, so
/// that `R_N` at coarse sizes agrees with the finest partial sums.
#[derive(Clone, Debug)]
pub struct CoupledLadder {
    pub envs: Vec<Environment>,
    pub finest: Environment,
}

impl CoupledLadder {
    /// iid ladder: the finest level has `ι = ±σ` fair signs, and coarser
    /// levels aggregate blocks of `k = N_max/N` fine sites as
    /// `ι_N(y) = k^{-1/2} Σ ι_fine`, so `R_N(x) = R_{N_max}(kx)`.
    pub fn iid(sizes: &[usize], sigma: f64, seed: u64) -> Result<Self> {
        let n_max = ladder_max(sizes)?;
        let fine = Environment::iid(n_max, sigma, sigma, seed)?;
        let family = rng::derive(seed, rng::label("iid-ladder"));
        let fine_iota: Vec<f64> = fine.a.iter().map(|v| v * (n_max as f64).sqrt()).collect();
        let envs = sizes
            .iter()
            .map(|&n| {
                let k = n_max / n;
                let scale = ((n * k) as f64).sqrt().recip();
                // Coarse site y collects fine sites k(y-1)+1 ..= ky (mod N_max).
                let a: Vec<f64> = (0..n)
                    .map(|y| {
                        let s: f64 = (0..k).map(|j| fine_iota[(k * y + n_max - j) % n_max]).sum();
                        s * scale
                    })
                    .collect();
                let mut env = Environment::from_increments(a, EnvKind::Iid { sigma, bound: sigma * (k as f64).sqrt() }, seed)?;
                env.family = Some(family);
                Ok(env)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut finest = fine;
        finest.family = Some(family);
        Ok(Self { envs, finest })
    }

    /// fBM ladder: one path on the finest grid; coarse increments are exact
    /// sums of fine ones before truncation.
    pub fn fbm(sizes: &[usize], hurst: f64, seed: u64) -> Result<Self> {
        let n_max = ladder_max(sizes)?;
        let fine = Environment::fbm(n_max, hurst, seed)?;
        let family = rng::derive(seed, rng::label("fbm-ladder"));
        let path = fine.path.clone().expect("fbm path");
        let envs = sizes
            .iter()
            .map(|&n| {
                let k = n_max / n;
                let incr: Vec<f64> = (0..n).map(|x| path[k * (x + 1)] - path[k * x]).collect();
                let mut env = Environment::from_fbm_increments(&incr, hurst, seed)?;
                env.family = Some(family);
                Ok(env)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut finest = fine;
        finest.family = Some(family);
        Ok(Self { envs, finest })
    }

    /// Deterministic ladders (homogeneous, alternating) share a family tag.
    pub fn deterministic(envs: Vec<Environment>) -> Result<Self> {
        let n_max = ladder_max(&envs.iter().map(|e| e.size()).collect::<Vec<_>>())?;
        let family = rng::label(envs[0].kind.tag());
        let mut envs = envs;
        for e in envs.iter_mut() {
            e.family = Some(family);
        }
        let finest = envs.iter().find(|e| e.size() == n_max).cloned().expect("max present");
        Ok(Self { envs, finest })
    }

    pub fn continuum(&self, m: usize) -> Result<ContinuumEnvironment> {
        self.finest.couple_to_continuum(m)
    }
}

fn ladder_max(sizes: &[usize]) -> Result<usize> {
    let n_max = *sizes.iter().max().ok_or(Error::InvalidParameter("empty ladder".into()))?;
    for &n in sizes {
        Torus::new(n)?;
        if n_max % n != 0 {
            return invalid(format!("ladder size {n} does not divide {n_max}"));
        }
    }
    Ok(n_max)
}

fn interpolate_knots(knots: &[f64], m: usize) -> Vec<f64> {
    let n = knots.len() - 1;
    (0..=m)
        .map(|j| {
            let pos = j as f64 * n as f64 / m as f64;
            let i = (pos.floor() as usize).min(n - 1);
            let w = pos - i as f64;
            knots[i] * (1.0 - w) + knots[i + 1] * w
        })
        .collect()
}

/// Fractional Gaussian noise with unit-spacing covariance
/// `½(|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H})`, by circulant embedding.
pub fn fractional_gaussian_noise<R: Rng>(n: usize, hurst: f64, rng: &mut R) -> Result<Vec<f64>> {
    let h2 = 2.0 * hurst;
    let gamma = |k: f64| 0.5 * ((k + 1.0).abs().powf(h2) - 2.0 * k.abs().powf(h2) + (k - 1.0).abs().powf(h2));
    let m = 2 * n;
    let mut c: Vec<Complex<f64>> = (0..m)
        .map(|j| {
            let k = if j <= n { j } else { m - j };
            Complex::new(gamma(k as f64), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut c);
    let lam_max = c.iter().fold(0.0f64, |acc, z| acc.max(z.re));
    let mut lam = Vec::with_capacity(m);
    for z in &c {
        if z.re < -1e-9 * lam_max {
            return Err(Error::Inconsistent(format!("circulant embedding not nonnegative: {}", z.re)));
        }
        lam.push(z.re.max(0.0));
    }
    let mf = m as f64;
    let mut w = vec![Complex::new(0.0, 0.0); m];
    w[0] = Complex::new((lam[0] / mf).sqrt() * rng.sample::<f64, _>(StandardNormal), 0.0);
    w[n] = Complex::new((lam[n] / mf).sqrt() * rng.sample::<f64, _>(StandardNormal), 0.0);
    for k in 1..n {
        let s = (lam[k] / (2.0 * mf)).sqrt();
        let z = Complex::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal));
        w[k] = z;
        w[m - k] = z.conj();
    }
    fft.process(&mut w);
    Ok(w[..n].iter().map(|z| z.re).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Coupled { from_n: usize, kind: String, family: Option<u64> },
    Standalone,
}

/// `R̄` sampled on the grid `j/M`, `j = 0..=M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuumEnvironment {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// The grid is finer than, or not aligned with, the source lattice.
    pub interpolated: bool,
}

impl ContinuumEnvironment {
    pub fn zero(m: usize) -> Self {
        Self { values: vec![0.0; m + 1], provenance: Provenance::Standalone, interpolated: false }
    }

    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=m).map(|j| f(j as f64 / m as f64)).collect();
        Self { values, provenance: Provenance::Standalone, interpolated: false }
    }

    pub fn grid_size(&self) -> usize {
        self.values.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    /// Cell increments `R̄((j+1)/M) - R̄(j/M)`, `j = 0..M`. Periodic use of
    /// these skips the possible jump of `R̄` at the seam.
    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Potential at grid sites: the centred increment quotient
    /// `M (R̄((j+1)/M) - R̄((j-1)/M)) / 2`, taken periodically.
    pub fn potential(&self) -> Vec<f64> {
        let m = self.grid_size();
        let d = self.increments();
        (0..m).map(|j| 0.5 * m as f64 * (d[j] + d[(j + m - 1) % m])).collect()
    }

    /// Linear resampling onto a grid of `m` cells.
    pub fn resample(&self, m: usize) -> Self {
        let interpolated = self.interpolated || m > self.grid_size() || self.grid_size() % m != 0;
        Self { values: interpolate_knots(&self.values, m), provenance: self.provenance.clone(), interpolated }
    }

    /// Hölder seminorm of `R̄` on its grid, seam increment excluded.
    pub fn holder_seminorm(&self, u: f64) -> Result<f64> {
        let m = self.grid_size();
        let mut d = self.increments();
        if m % 2 == 1 {
            d.push(0.0);
        }
        let mm = d.len();
        Torus::new(mm)?.holder_seminorm(&d, u)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_small_case() {
        let env = Environment::alternating(4, 1.0).unwrap();
        assert_eq!(env.a(), &[0.25, -0.25, 0.25, -0.25]);
        assert_eq!(env.r_values(), &[0.0, 0.125, 0.0, 0.125]);
        assert_eq!(env.partial_sum(0, 2), 0.0);
        for n in [64usize, 256] {
            let e = Environment::alternating(n, 0.75).unwrap();
            let amp = (n as f64).powf(-0.75);
            assert!(e.r_values().iter().all(|&r| r.abs() <= amp / 2.0 + 1e-15));
        }
    }

    #[test]
    fn alternating_seminorm_bounded_in_n() {
        let mut vals = Vec::new();
        for p in 6..=10 {
            let e = Environment::alternating(1 << p, 0.5).unwrap();
            vals.push(e.torus().holder_seminorm(&e.r_increments(), 0.5).unwrap());
        }
        let max = vals.iter().cloned().fold(0.0, f64::max);
        assert!(max <= 0.5 + 1e-12, "{vals:?}");
    }

    #[test]
    fn prefix_matches_direct_sum() {
        let env = Environment::iid(64, 1.0, 1.0, 3).unwrap();
        let t = env.torus();
        for x in 0..64 {
            assert_eq!(env.partial_sum(x, x), 0.0);
            for y in 0..64 {
                let len = t.interval_len(x, y);
                let direct: f64 = (1..=len).map(|k| -0.5 * env.a()[(x + k) % 64]).sum();
                assert!((env.partial_sum(x, y) - direct).abs() < 1e-13);
            }
        }
        for x in 0..64 {
            for d in -32i64..=32 {
                let y = t.add(x, d);
                let expect = if d >= 0 { env.partial_sum(x, y) } else { -env.partial_sum(y, x) };
                assert!((env.anchored_sum(x, d) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn iid_bound_checks() {
        assert!(matches!(Environment::iid(4, 1.0, 2.0, 0), Err(Error::RatePositivity { .. })));
        assert!(Environment::iid(16, 2.0, 1.0, 0).is_err());
        let e = Environment::iid(16, 1.0, 0.0, 0);
        assert!(e.is_err());
        let h = Environment::iid(16, 0.0, 0.0, 0).unwrap();
        assert!(h.is_homogeneous());
        let e = Environment::iid(4, 1.0, 1.0, 9).unwrap();
        assert!(e.rtt().iter().all(|&r| r == 0.5 || r == 1.5));
    }

    #[test]
    fn iid_reproducible() {
        let a = Environment::iid(128, 1.0, 1.0, 7).unwrap();
        let b = Environment::iid(128, 1.0, 1.0, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iid_ladder_partial_sums_agree() {
        let ladder = CoupledLadder::iid(&[16, 32, 64], 1.0, 11).unwrap();
        let fine = &ladder.finest;
        for env in &ladder.envs {
            let k = 64 / env.size();
            for x in 0..=env.size() {
                let coarse = if x == env.size() { env.total() } else { env.r_values()[x] };
                let f = if k * x == 64 { fine.total() } else { fine.r_values()[k * x] };
                assert!((coarse - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        for env in [
            Environment::iid(32, 0.7, 1.3, 5).unwrap(),
            Environment::fbm(32, 0.3, 5).unwrap(),
            Environment::alternating(32, 0.75).unwrap(),
        ] {
            let back = Environment::from_csv(&env.to_csv()).unwrap();
            assert_eq!(back.a(), env.a());
            assert_eq!(back.kind, env.kind);
            assert_eq!(back.to_csv(), env.to_csv());
        }
        assert!(Environment::from_csv("site,a\n").is_err());
    }

    #[test]
    fn fgn_half_is_white() {
        let mut r = rng::stream(1, 0);
        let mut acc = 0.0;
        let mut lag1 = 0.0;
        let reps = 400;
        for _ in 0..reps {
            let x = fractional_gaussian_noise(64, 0.5, &mut r).unwrap();
            acc += x.iter().map(|v| v * v).sum::<f64>() / 64.0;
            lag1 += x.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / 63.0;
        }
        assert!((acc / reps as f64 - 1.0).abs() < 0.03);
        assert!((lag1 / reps as f64).abs() < 0.03);
    }

    #[test]
    fn continuum_coupling_kinds() {
        let alt = Environment::alternating(64, 1.0).unwrap().couple_to_continuum(32).unwrap();
        assert!(alt.values.iter().all(|&v| v == 0.0));
        let iid = Environment::iid(64, 1.0, 1.0, 2).unwrap();
        let c = iid.couple_to_continuum(64).unwrap();
        for x in 0..64 {
            assert_eq!(c.values[x], iid.r_values()[x]);
        }
        assert!(!c.interpolated);
        assert!(iid.couple_to_continuum(128).unwrap().interpolated);
    }

    #[test]
    fn potential_of_linear_path_is_constant_inside() {
        let c = ContinuumEnvironment::from_fn(16, |x| 0.3 * x);
        let p = c.potential();
        for v in &p {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
