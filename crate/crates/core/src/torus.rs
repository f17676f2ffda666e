//! Geometry of the discrete torus `Z/NZ`.
//!
//! Sites are identified with `0..N`. Intervals are half-open and run
//! counterclockwise: the interval `(x, x']` contains `(x' - x) mod N` sites.

use crate::error::{invalid, Result};

/// The discrete torus with an even number of sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Torus {
    n: usize,
}

/// Split of the torus into the sites nearer `y1` and those nearer `y2`.
///
/// `first` is the arc `[m1, m2)` around `y1`, `second` the arc `[m2, m1)`
/// around `y2`. Ties go to `first`. When `y1 == y2` the first piece is the
/// whole torus and the second is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MidpointPartition {
    pub m1: usize,
    pub m2: usize,
    pub first_len: usize,
    pub second_len: usize,
}

impl MidpointPartition {
    /// Sites of the first piece, in counterclockwise order starting at `m1`.
    pub fn first(&self, n: usize) -> Vec<usize> {
        (0..self.first_len).map(|k| (self.m1 + k) % n).collect()
    }

    /// Sites of the second piece, in counterclockwise order starting at `m2`.
    pub fn second(&self, n: usize) -> Vec<usize> {
        (0..self.second_len).map(|k| (self.m2 + k) % n).collect()
    }
}

impl Torus {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return invalid(format!("torus size must be positive and even, got {n}"));
        }
        Ok(Self { n })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn wrap(&self, x: i64) -> usize {
        x.rem_euclid(self.n as i64) as usize
    }

    pub fn add(&self, x: usize, k: i64) -> usize {
        self.wrap(x as i64 + k)
    }

    /// Number of sites in the counterclockwise interval `(x, y]`.
    pub fn interval_len(&self, x: usize, y: usize) -> usize {
        (y + self.n - x % self.n) % self.n
    }

    /// Geodesic distance `min(|(x,y]|, |(y,x]|)`.
    pub fn dist(&self, x: usize, y: usize) -> usize {
        let d = self.interval_len(x, y);
        d.min(self.n - d)
    }

    /// Signed offset of `x` from `y` in `(-N/2, N/2]`.
    pub fn offset(&self, y: usize, x: usize) -> i64 {
        let d = self.interval_len(y, x) as i64;
        if d > (self.n / 2) as i64 {
            d - self.n as i64
        } else {
            d
        }
    }

    pub fn midpoint_partition(&self, y1: usize, y2: usize) -> MidpointPartition {
        let n = self.n;
        if y1 == y2 {
            let m1 = self.add(y1, -((n / 2) as i64) + 1);
            return MidpointPartition { m1, m2: m1, first_len: n, second_len: 0 };
        }
        let near_first: Vec<bool> = (0..n).map(|x| self.dist(y1, x) <= self.dist(y2, x)).collect();
        // The first piece is an arc containing y1; walk outwards to its ends.
        let mut back = 0usize;
        while back + 1 < n && near_first[self.add(y1, -(back as i64) - 1)] {
            back += 1;
        }
        let mut fwd = 0usize;
        while fwd + 1 < n && near_first[self.add(y1, fwd as i64 + 1)] {
            fwd += 1;
        }
        let first_len = back + fwd + 1;
        let m1 = self.add(y1, -(back as i64));
        let m2 = self.add(y1, fwd as i64 + 1);
        MidpointPartition { m1, m2, first_len, second_len: n - first_len }
    }

    /// Discrete Hölder seminorm of the interval function generated by `incr`:
    /// `f(x,x') = Σ_{y∈(x,x']} incr(y)`, normalised by `(|(x,x']|/N)^u`.
    pub fn holder_seminorm(&self, incr: &[f64], u: f64) -> Result<f64> {
        let n = self.n;
        if incr.len() != n {
            return invalid(format!("expected {n} increments, got {}", incr.len()));
        }
        if !(u > 0.0 && u <= 1.0) {
            return invalid(format!("Hölder exponent must lie in (0,1], got {u}"));
        }
        let weights: Vec<f64> = (0..n).map(|k| ((k as f64) / n as f64).powf(-u)).collect();
        let mut best = 0.0f64;
        for x in 0..n {
            let mut acc = 0.0;
            for len in 1..n {
                acc += incr[(x + len) % n];
                best = best.max(acc.abs() * weights[len]);
            }
        }
        Ok(best)
    }
}
