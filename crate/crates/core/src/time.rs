//! Integer nanosecond time, the single time currency of the simulator.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Rem, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// A timestamp or duration in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeNs(pub i64);

impl TimeNs {
    pub const ZERO: TimeNs = TimeNs(0);
    pub const MAX: TimeNs = TimeNs(i64::MAX);

    pub const fn from_ns(ns: i64) -> Self {
        TimeNs(ns)
    }

    pub const fn from_us(us: i64) -> Self {
        TimeNs(us * 1_000)
    }

    pub const fn from_ms(ms: i64) -> Self {
        TimeNs(ms * 1_000_000)
    }

    pub const fn from_secs(s: i64) -> Self {
        TimeNs(s * 1_000_000_000)
    }

    pub const fn ns(self) -> i64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Floor modulo; the result is always in `[0, m)`.
    pub fn rem_euclid(self, m: TimeNs) -> TimeNs {
        TimeNs(self.0.rem_euclid(m.0))
    }

    /// Floor division.
    pub fn div_floor(self, m: TimeNs) -> i64 {
        self.0.div_euclid(m.0)
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl fmt::Display for TimeNs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl Add for TimeNs {
    type Output = TimeNs;
    fn add(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0 + rhs.0)
    }
}

impl AddAssign for TimeNs {
    fn add_assign(&mut self, rhs: TimeNs) {
        self.0 += rhs.0;
    }
}

impl Sub for TimeNs {
    type Output = TimeNs;
    fn sub(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0 - rhs.0)
    }
}

impl SubAssign for TimeNs {
    fn sub_assign(&mut self, rhs: TimeNs) {
        self.0 -= rhs.0;
    }
}

impl Mul<i64> for TimeNs {
    type Output = TimeNs;
    fn mul(self, rhs: i64) -> TimeNs {
        TimeNs(self.0 * rhs)
    }
}

impl Rem for TimeNs {
    type Output = TimeNs;
    fn rem(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0 % rhs.0)
    }
}

impl Sum for TimeNs {
    fn sum<I: Iterator<Item = TimeNs>>(iter: I) -> TimeNs {
        TimeNs(iter.map(|t| t.0).sum())
    }
}

/// Granularity of gate control list entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Macrotick(TimeNs);

impl Macrotick {
    /// 16 ns, the reference switch hardware granularity.
    pub const DEFAULT: Macrotick = Macrotick(TimeNs(16));

    pub fn new(m: TimeNs) -> Option<Self> {
        (m.0 > 0).then_some(Macrotick(m))
    }

    pub fn get(self) -> TimeNs {
        self.0
    }

    pub fn divides(self, t: TimeNs) -> bool {
        t.0 % self.0 .0 == 0
    }

    /// Rounds `t` up to the next multiple of the macrotick.
    pub fn ceil(self, t: TimeNs) -> TimeNs {
        let m = self.0 .0;
        TimeNs(t.0.div_euclid(m) * m + if t.0.rem_euclid(m) == 0 { 0 } else { m })
    }
}

impl Default for Macrotick {
    fn default() -> Self {
        Macrotick::DEFAULT
    }
}

impl TryFrom<i64> for Macrotick {
    type Error = String;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Macrotick::new(TimeNs(value)).ok_or_else(|| format!("macrotick must be > 0, got {value}"))
    }
}

impl From<Macrotick> for i64 {
    fn from(m: Macrotick) -> i64 {
        m.0 .0
    }
}

/// `ceil(a / b)` for non-negative numerators and positive denominators.
pub(crate) fn div_ceil_u128(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macrotick_ceil() {
        let m = Macrotick::DEFAULT;
        assert_eq!(m.ceil(TimeNs(46_500)), TimeNs(46_512));
        assert_eq!(m.ceil(TimeNs(32)), TimeNs(32));
        assert_eq!(m.ceil(TimeNs(0)), TimeNs(0));
        assert!(!m.divides(TimeNs(24)));
        assert!(Macrotick::new(TimeNs(0)).is_none());
    }

    #[test]
    fn floor_modulo_is_non_negative() {
        let c = TimeNs::from_ms(30);
        assert_eq!(TimeNs::from_ms(-20).rem_euclid(c), TimeNs::from_ms(10));
        assert_eq!(TimeNs::from_ms(-20).div_floor(c), -1);
    }
}
