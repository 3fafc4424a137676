//! Exact big-integer digit arithmetic and the parallel carry-handle
//! reference algorithms.
//!
//! All numbers are non-negative base-10 integers stored as little-endian
//! digit vectors (index 0 = least significant). Canonical form carries no
//! most-significant zero except for the value 0 itself.

use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Little-endian digit vector for a non-negative integer.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Digits(Vec<u8>);

impl Digits {
    /// Canonical zero.
    pub fn zero() -> Self {
        Digits(vec![0])
    }

    /// Build from little-endian digits, canonicalizing trailing zeros.
    pub fn from_le(digits: Vec<u8>) -> Result<Self> {
        if digits.is_empty() {
            return Err(Error::InvalidDigits("empty digit vector".into()));
        }
        if let Some(d) = digits.iter().find(|&&d| d > 9) {
            return Err(Error::InvalidDigits(format!("digit {d} out of [0,9]")));
        }
        Ok(Self::canonical(digits))
    }

    fn canonical(mut digits: Vec<u8>) -> Self {
        while digits.len() > 1 && *digits.last().unwrap() == 0 {
            digits.pop();
        }
        Digits(digits)
    }

    pub fn from_u64(mut v: u64) -> Self {
        let mut d = Vec::new();
        loop {
            d.push((v % 10) as u8);
            v /= 10;
            if v == 0 {
                break;
            }
        }
        Digits(d)
    }

    /// Parse a decimal string (leading zeros are accepted and dropped).
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Parse("empty number".into()));
        }
        let mut d = Vec::with_capacity(s.len());
        for c in s.chars().rev() {
            match c.to_digit(10) {
                Some(v) => d.push(v as u8),
                None => return Err(Error::Parse(format!("bad digit {c:?}"))),
            }
        }
        Ok(Self::canonical(d))
    }

    /// Uniform integer in `[0, 10^len)`.
    pub fn random_uniform<R: Rng>(len: usize, rng: &mut R) -> Self {
        let d: Vec<u8> = (0..len.max(1)).map(|_| rng.gen_range(0..10)).collect();
        Self::canonical(d)
    }

    /// Uniform integer with exactly `len` significant digits
    /// (for `len` = 1 this excludes 0).
    pub fn random_exact_len<R: Rng>(len: usize, rng: &mut R) -> Self {
        assert!(len >= 1);
        let mut d: Vec<u8> = (0..len).map(|_| rng.gen_range(0..10)).collect();
        d[len - 1] = rng.gen_range(1..10);
        Digits(d)
    }

    /// Little-endian digit slice.
    pub fn le(&self) -> &[u8] {
        &self.0
    }

    /// Number of significant digits (1 for zero).
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0]
    }

    /// Digit at little-endian index `i`, zero beyond the length.
    pub fn digit(&self, i: usize) -> u8 {
        self.0.get(i).copied().unwrap_or(0)
    }

    /// Value as u64; panics in debug if it does not fit (callers bound lengths).
    pub fn to_u64(&self) -> u64 {
        debug_assert!(self.len() <= 19);
        self.0
            .iter()
            .rev()
            .fold(0u64, |acc, &d| acc * 10 + d as u64)
    }

    /// Multiply by `10^shift` (prepend zeros at the little end).
    pub fn shifted(&self, shift: usize) -> Self {
        if self.is_zero() || shift == 0 {
            return self.clone();
        }
        let mut d = vec![0u8; shift];
        d.extend_from_slice(&self.0);
        Digits(d)
    }
}

impl fmt::Display for Digits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &d in self.0.iter().rev() {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Digits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digits({self})")
    }
}

/// Schoolbook addition; the reference oracle for `parallel_add`.
pub fn school_add(a: &Digits, b: &Digits) -> Digits {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n + 1);
    let mut carry = 0u8;
    for i in 0..n {
        let s = a.digit(i) + b.digit(i) + carry;
        out.push(s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(carry);
    }
    Digits::canonical(out)
}

/// Schoolbook long multiplication; the reference oracle for `parallel_mul`.
pub fn school_mul(a: &Digits, b: &Digits) -> Digits {
    if a.is_zero() || b.is_zero() {
        return Digits::zero();
    }
    let mut acc = vec![0u32; a.len() + b.len()];
    for (i, &da) in a.le().iter().enumerate() {
        for (j, &db) in b.le().iter().enumerate() {
            acc[i + j] += da as u32 * db as u32;
        }
    }
    let mut out = Vec::with_capacity(acc.len());
    let mut carry = 0u32;
    for v in acc {
        let s = v + carry;
        out.push((s % 10) as u8);
        carry = s / 10;
    }
    while carry > 0 {
        out.push((carry % 10) as u8);
        carry /= 10;
    }
    Digits::canonical(out)
}

/// Parallel carry-handle addition.
///
/// Digit-wise sums first, then repeated simultaneous carry-adjust passes
/// (each position keeps its remainder mod 10 and receives the carry of its
/// lower neighbor from the same snapshot) until every cell is a single
/// digit. Returns the canonical sum and the number of passes.
pub fn parallel_add(a: &Digits, b: &Digits, l: usize) -> Result<(Digits, usize)> {
    if a.len() > l {
        return Err(Error::OperandTooLong { len: a.len(), limit: l });
    }
    if b.len() > l {
        return Err(Error::OperandTooLong { len: b.len(), limit: l });
    }
    let mut s: Vec<u8> = (0..l + 1).map(|i| a.digit(i) + b.digit(i)).collect();
    let mut passes = 0usize;
    while s.iter().any(|&v| v >= 10) {
        let prev = s.clone();
        for j in 0..s.len() {
            let carry_in = if j > 0 { prev[j - 1] / 10 } else { 0 };
            s[j] = prev[j] % 10 + carry_in;
        }
        passes += 1;
    }
    Ok((Digits::canonical(s), passes))
}

/// Parallel carry-handle multiplication.
///
/// Each position of the multiplicand is first multiplied by the whole
/// multiplier, then carry-resolution passes run until every cell is a
/// single digit. A pass replaces each cell with its remainder mod 10 plus,
/// for every level `k` up to the multiplier length, the `k`-th decimal
/// digit of the cell `k` positions below (all from the same snapshot).
/// Returns the canonical product and the pass count.
pub fn parallel_mul(a: &Digits, b: &Digits) -> (Digits, usize) {
    let l1 = a.len();
    let l2 = b.len();
    let av = a.to_u64();
    let mut m: Vec<u64> = vec![0; l1 + l2];
    for j in 0..l2 {
        m[j] = av * b.digit(j) as u64;
    }
    let mut passes = 0usize;
    while m.iter().any(|&v| v >= 10) {
        let prev = m.clone();
        let mut pow = 1u64;
        for j in 0..m.len() {
            m[j] = prev[j] % 10;
        }
        for k in 1..=l1 {
            pow *= 10;
            for j in 0..m.len().saturating_sub(k) {
                m[j + k] += (prev[j] / pow) % 10;
            }
        }
        passes += 1;
    }
    let digits: Vec<u8> = m.iter().map(|&v| v as u8).collect();
    (Digits::canonical(digits), passes)
}
