//! Exact count-based fractions used for accuracy, loss, and influence.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A fraction `num / den` kept as raw counts so that equality and ordering
/// are exact. Ratios with different denominators compare by cross
/// multiplication; `3/10` and `6/20` are equal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    /// Panics if `den == 0` or `num > den`.
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "ratio denominator must be positive");
        assert!(num <= den, "ratio {num}/{den} exceeds one");
        Self { num, den }
    }

    pub fn zero(den: u64) -> Self {
        Self::new(0, den)
    }

    /// `1 - self`, keeping the denominator.
    pub fn complement(self) -> Self {
        Self::new(self.den - self.num, self.den)
    }

    /// `|self - other|`. The result uses the common denominator
    /// `self.den * other.den` unless both denominators agree.
    pub fn abs_diff(self, other: Self) -> Self {
        if self.den == other.den {
            return Self::new(self.num.abs_diff(other.num), self.den);
        }
        let a = self.num as u128 * other.den as u128;
        let b = other.num as u128 * self.den as u128;
        let den = self.den as u128 * other.den as u128;
        Self::new(a.abs_diff(b) as u64, den as u64)
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_valid(self) -> bool {
        self.den > 0 && self.num <= self.den
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = self.num as u128 * other.den as u128;
        let b = other.num as u128 * self.den as u128;
        a.cmp(&b)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({}/{})", self.value(), self.num, self.den)
    }
}
