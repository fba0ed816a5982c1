//! Treatment assignments and their lexicographic (combinadic) enumeration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{par, Error, Result};

/// Default cap on `C(n, n1)` for full enumeration: `C(30, 15)`.
pub const DEFAULT_ENUMERATION_LIMIT: u128 = 155_117_520;

/// A completely randomized assignment: exactly `n1` of `n` units treated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment {
    w: Vec<bool>,
    n1: usize,
}

impl Assignment {
    pub fn new(w: Vec<bool>) -> Result<Self> {
        let n1 = w.iter().filter(|&&t| t).count();
        let n0 = w.len() - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::invalid(format!(
                "assignment needs at least one treated and one control unit (n1={n1}, n0={n0})"
            )));
        }
        Ok(Assignment { w, n1 })
    }

    pub fn from_treated(n: usize, treated: &[usize]) -> Result<Self> {
        let mut w = vec![false; n];
        for &i in treated {
            if i >= n {
                return Err(Error::invalid(format!("treated index {i} out of range for n={n}")));
            }
            if w[i] {
                return Err(Error::invalid(format!("treated index {i} listed twice")));
            }
            w[i] = true;
        }
        Assignment::new(w)
    }

    /// Uniform draw from all `C(n, n1)` assignments.
    pub fn random<R: Rng + ?Sized>(n: usize, n1: usize, rng: &mut R) -> Result<Self> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..n1.min(n) {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        Assignment::from_treated(n, &idx[..n1.min(n)])
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.w.len() - self.n1
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.w[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.w
    }

    pub fn treated(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.w[i]).collect()
    }

    pub fn controls(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.w[i]).collect()
    }

    /// Swaps the arms of every unit.
    pub fn mirror(&self) -> Result<Self> {
        Assignment::new(self.w.iter().map(|&t| !t).collect())
    }

    /// Moves treated unit `i` to control and control unit `j` to treatment.
    pub(crate) fn swap_pair(&mut self, i: usize, j: usize) {
        debug_assert!(self.w[i] && !self.w[j]);
        self.w[i] = false;
        self.w[j] = true;
    }

    /// Position of this assignment in the lexicographic enumeration.
    pub fn rank(&self) -> u128 {
        rank_subset(self.n(), &self.treated())
    }

    pub(crate) fn check_compatible(&self, other: &Assignment) -> Result<()> {
        if self.n() != other.n() || self.n1 != other.n1 {
            return Err(Error::invalid(format!(
                "assignments differ in shape: (n={}, n1={}) vs (n={}, n1={})",
                self.n(),
                self.n1,
                other.n(),
                other.n1
            )));
        }
        Ok(())
    }
}

/// `C(n, k)`, or `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Natural log of `C(n, k)`; finite for any `n`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `C(n, k)` as a float (may be `inf` for very large n).
pub fn binomial_f64(n: usize, k: usize) -> f64 {
    match binomial(n, k) {
        Some(c) => c as f64,
        None => ln_binomial(n, k).exp(),
    }
}

/// Checks that `C(n, n1)` is within `limit` and returns it.
pub fn guarded_count(n: usize, n1: usize, limit: u128) -> Result<u128> {
    if n1 == 0 || n1 >= n {
        return Err(Error::invalid(format!("need 0 < n1 < n (n={n}, n1={n1})")));
    }
    let count = binomial(n, n1).unwrap_or(u128::MAX);
    if count > limit {
        return Err(Error::EnumerationGuard { count, limit });
    }
    Ok(count)
}

/// Treated-index set at lexicographic position `rank` among the k-subsets of `0..n`.
pub fn unrank_subset(n: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0usize;
    for slot in 0..k {
        let remaining = k - slot;
        loop {
            // subsets whose current slot is `next`
            let c = binomial(n - next - 1, remaining - 1).unwrap_or(u128::MAX);
            if rank < c {
                break;
            }
            rank -= c;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    out
}

/// Inverse of [`unrank_subset`]. `subset` must be strictly increasing.
pub fn rank_subset(n: usize, subset: &[usize]) -> u128 {
    let k = subset.len();
    let mut rank = 0u128;
    let mut prev = 0usize;
    for (slot, &s) in subset.iter().enumerate() {
        for skipped in prev..s {
            rank += binomial(n - skipped - 1, k - slot - 1).unwrap_or(0);
        }
        prev = s + 1;
    }
    rank
}

/// Advances a strictly increasing k-subset to its lexicographic successor.
/// Returns `false` when `subset` was the last one.
pub fn next_subset(n: usize, subset: &mut [usize]) -> bool {
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in (i + 1)..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Iterator over all assignments of `n1` treated among `n`, in lexicographic
/// order of the treated-index set.
#[derive(Debug, Clone)]
pub struct Enumeration {
    n: usize,
    current: Option<Vec<usize>>,
    remaining: u128,
}

impl Iterator for Enumeration {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        let cur = self.current.as_mut()?;
        let out = Assignment::from_treated(self.n, cur).ok();
        if !next_subset(self.n, cur) {
            self.current = None;
        }
        self.remaining = self.remaining.saturating_sub(1);
        out
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (r, Some(r))
    }
}

/// Enumerates all `C(n, n1)` assignments, refusing beyond [`DEFAULT_ENUMERATION_LIMIT`].
pub fn enumerate_assignments(n: usize, n1: usize) -> Result<Enumeration> {
    enumerate_assignments_with_limit(n, n1, DEFAULT_ENUMERATION_LIMIT)
}

pub fn enumerate_assignments_with_limit(n: usize, n1: usize, limit: u128) -> Result<Enumeration> {
    let count = guarded_count(n, n1, limit)?;
    Ok(Enumeration {
        n,
        current: Some((0..n1).collect()),
        remaining: count,
    })
}

const CHUNK: u128 = 4096;

/// Evaluates `f(rank, treated_indices)` on every assignment, in parallel over
/// contiguous combinadic ranges, returning results in enumeration order.
pub fn map_enumerated<T, F>(n: usize, n1: usize, limit: u128, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u128, &[usize]) -> T + Sync + Send,
{
    let count = guarded_count(n, n1, limit)?;
    let chunks = count.div_ceil(CHUNK) as usize;
    let parts = par::map_range(chunks, |c| {
        let start = c as u128 * CHUNK;
        let end = (start + CHUNK).min(count);
        let mut subset = unrank_subset(n, n1, start);
        let mut out = Vec::with_capacity((end - start) as usize);
        for rank in start..end {
            out.push(f(rank, &subset));
            next_subset(n, &mut subset);
        }
        out
    });
    Ok(parts.into_iter().flatten().collect())
}
