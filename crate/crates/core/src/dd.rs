//! Double-double ("compensated") scalars.
//!
//! JST estimates carry raw clock-difference measurements, so the stored
//! time deviations are dominated by observation noise while the quantity of
//! interest (the weighted ensemble error) is orders of magnitude smaller.
//! Holding the estimate as an unevaluated sum `hi + lo` keeps the rounding
//! left behind by each weighting step from accumulating into the time scale.

use core::ops::{Add, AddAssign, Mul, Neg, Sub};

/// An unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Veltkamp split into two 26-bit halves.
#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = 134_217_729.0 * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// Dekker's exact product; `libm::fma` is a slow software routine.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    let err = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    (p, err)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(value: f64) -> Self {
        Dd { hi: value, lo: 0.0 }
    }

    /// Nearest `f64` to the represented value.
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }
}

impl From<f64> for Dd {
    fn from(value: f64) -> Self {
        Dd::new(value)
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, rhs: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, rhs.hi);
        let (t, f) = two_sum(self.lo, rhs.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Add<f64> for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, rhs: f64) -> Dd {
        let (s, e) = two_sum(self.hi, rhs);
        let (hi, lo) = quick_two_sum(s, e + self.lo);
        Dd { hi, lo }
    }
}

impl AddAssign for Dd {
    #[inline]
    fn add_assign(&mut self, rhs: Dd) {
        *self = *self + rhs;
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, rhs: Dd) -> Dd {
        self + (-rhs)
    }
}

impl Sub<f64> for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, rhs: f64) -> Dd {
        self + (-rhs)
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, rhs: f64) -> Dd {
        let (p, e) = two_prod(self.hi, rhs);
        let (hi, lo) = quick_two_sum(p, e + self.lo * rhs);
        Dd { hi, lo }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_bits_lost_by_plain_addition() {
        let big = 1.0e-6;
        let tiny = 1.0e-24;
        assert_eq!(big + tiny - big, 0.0);
        let s = Dd::new(big) + tiny - big;
        assert!((s.value() - tiny).abs() < 1e-38);
    }

    #[test]
    fn product_is_error_free_for_f64_inputs() {
        let a = 0.1_f64;
        let b = 3.0_f64;
        let p = Dd::new(a) * b;
        // 0.1 * 3 is not representable; hi + lo must carry the exact product.
        assert_eq!(p.hi(), a * b);
        assert_eq!(p.lo(), libm::fma(a, b, -(a * b)));
    }

    #[test]
    fn split_product_matches_fused_multiply_add() {
        let mut x = 0x9e37_79b9_7f4a_7c15_u64;
        for _ in 0..10_000 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            let a = f64::from_bits((x >> 12) | 0x3ff0_0000_0000_0000) * 1e-15;
            let b = f64::from_bits((x.rotate_left(29) >> 12) | 0x3fe0_0000_0000_0000) - 0.75;
            let (p, e) = two_prod(a, b);
            assert_eq!(e, libm::fma(a, b, -p));
        }
    }

    #[test]
    fn long_sums_do_not_drift() {
        let mut acc = Dd::ZERO;
        for _ in 0..100_000 {
            acc += Dd::new(0.1);
        }
        let exact = 100_000.0 * 0.1_f64;
        // f64 summation of the same series is off by ~1e-8.
        assert!((acc.value() - exact).abs() <= 2e-12);
    }
}
