//! Dependency-length complexity metrics and the position maps needed to
//! compute each output digit.

use crate::digits::{parallel_mul, Digits};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// How a carry-triggering position is counted in a cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CascadeConvention {
    /// The triggering position contributes 1 and every trailing 9-sum
    /// position adds 1. Default.
    CountTrigger,
    /// Only the run of 9-sum positions the carry propagates through is
    /// counted (one less per chain than `CountTrigger`).
    TailOnly,
}

/// Complexity measurements for an operand pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Maximum cascade length over all positions (addition).
    pub cascade_length: usize,
    /// Number of carry-resolution passes (multiplication); 0 when the
    /// report was built for an addition pair.
    pub dependency_levels: usize,
    /// Chain length rooted at each little-endian position (0 where the
    /// digit sum does not trigger a carry).
    pub per_position_chain: Vec<usize>,
}

/// Cascade complexity of an addition pair under the default convention.
pub fn cascade_complexity(a: &Digits, b: &Digits) -> ComplexityReport {
    cascade_complexity_with(a, b, CascadeConvention::CountTrigger)
}

/// Cascade complexity with an explicit counting convention.
///
/// Operands are zero-extended to a common length. A position whose digit
/// sum is >= 10 roots a chain that extends through every consecutive
/// following position whose digit sum is exactly 9.
pub fn cascade_complexity_with(
    a: &Digits,
    b: &Digits,
    convention: CascadeConvention,
) -> ComplexityReport {
    let n = a.len().max(b.len());
    let sums: Vec<u8> = (0..n).map(|i| a.digit(i) + b.digit(i)).collect();
    let mut chains = vec![0usize; n];
    // Scan high-to-low so the 9-run length after each position is known.
    let mut nine_run = 0usize;
    for i in (0..n).rev() {
        if sums[i] >= 10 {
            chains[i] = match convention {
                CascadeConvention::CountTrigger => 1 + nine_run,
                CascadeConvention::TailOnly => nine_run,
            };
        }
        if sums[i] == 9 {
            nine_run += 1;
        } else {
            nine_run = 0;
        }
    }
    ComplexityReport {
        cascade_length: chains.iter().copied().max().unwrap_or(0),
        dependency_levels: 0,
        per_position_chain: chains,
    }
}

/// Number of carry-resolution passes the parallel multiplication
/// algorithm needs; the multiplication analogue of cascade length.
pub fn mul_dependency_levels(multiplier: &Digits, multiplicand: &Digits) -> usize {
    parallel_mul(multiplier, multiplicand).1
}

/// Input positions (1-based) needed to compute output digit `i` of an
/// `l`-digit addition in the padded format: `(1..=i, l+2..=i+l+1)`.
pub fn sigma(i: usize, l: usize) -> Result<Vec<usize>> {
    if i < 1 || i > l {
        return Err(Error::PositionOutOfRange { pos: i, max: l });
    }
    let mut out: Vec<usize> = (1..=i).collect();
    out.extend(l + 2..=i + l + 1);
    Ok(out)
}

/// Relative offsets attended to under RPE when the maximum carry chain
/// seen in training is `d`: `(-d..=0, l-d+1..=l, l+1)`. Independent of the
/// output position `i` as long as `d <= i`.
pub fn sigma_rel(i: usize, d: usize, l: usize) -> Vec<i64> {
    debug_assert!(d <= i);
    let _ = i;
    let mut out: Vec<i64> = (-(d as i64)..=0).collect();
    out.extend((l - d + 1).max(1) as i64..=l as i64);
    out.push(l as i64 + 1);
    out
}
