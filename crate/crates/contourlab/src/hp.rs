//! High-precision real arithmetic for partition-function sums.
//!
//! Everything that leaves the exact rational world — logarithms of partition
//! sums, Boltzmann factors, truncated series — goes through this wrapper
//! around 192-bit floats (about 57 decimal digits). Keeping an order of
//! magnitude more precision than any acceptance tolerance makes rounding a
//! non-issue in comparisons; results are only squeezed down to f64 at the
//! reporting boundary.

use crate::{Error, Result};
use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use num::{BigInt, BigRational, ToPrimitive};
use std::collections::BTreeMap;

/// Working precision in bits.
pub const PRECISION: usize = 192;

/// Arithmetic context: precision, rounding mode, and the constants cache the
/// underlying library needs for transcendental functions.
pub struct Hp {
    p: usize,
    rm: RoundingMode,
    cc: Consts,
}

impl Hp {
    pub fn new() -> Self {
        Hp {
            p: PRECISION,
            rm: RoundingMode::ToEven,
            cc: Consts::new().expect("constants cache"),
        }
    }

    pub fn zero(&self) -> BigFloat {
        BigFloat::from_u8(0, self.p)
    }

    pub fn one(&self) -> BigFloat {
        BigFloat::from_u8(1, self.p)
    }

    pub fn from_u128(&self, n: u128) -> BigFloat {
        BigFloat::from_u128(n, self.p)
    }

    pub fn from_i64(&self, n: i64) -> BigFloat {
        BigFloat::from_i64(n, self.p)
    }

    pub fn from_f64(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, self.p)
    }

    pub fn from_bigint(&mut self, n: &BigInt) -> BigFloat {
        match n.to_i128() {
            Some(i) => BigFloat::from_i128(i, self.p),
            None => BigFloat::parse(&n.to_string(), Radix::Dec, self.p, self.rm, &mut self.cc),
        }
    }

    pub fn from_rational(&mut self, q: &BigRational) -> BigFloat {
        let n = self.from_bigint(q.numer());
        let d = self.from_bigint(q.denom());
        n.div(&d, self.p, self.rm)
    }

    pub fn add(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.add(b, self.p, self.rm)
    }

    pub fn sub(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.sub(b, self.p, self.rm)
    }

    pub fn mul(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.mul(b, self.p, self.rm)
    }

    pub fn div(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.div(b, self.p, self.rm)
    }

    pub fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(self.p, self.rm, &mut self.cc)
    }

    /// Natural log; fails on zero, negatives, NaN.
    pub fn ln(&mut self, x: &BigFloat) -> Result<BigFloat> {
        let l = x.ln(self.p, self.rm, &mut self.cc);
        if l.is_nan() || l.is_inf() {
            return Err(Error::Internal(format!(
                "logarithm of a non-positive quantity ({})",
                to_f64(x)
            )));
        }
        Ok(l)
    }

    /// x^k by binary exponentiation.
    pub fn pow_u64(&self, x: &BigFloat, mut k: u64) -> BigFloat {
        let mut base = x.clone();
        let mut acc = self.one();
        while k > 0 {
            if k & 1 == 1 {
                acc = self.mul(&acc, &base);
            }
            base = self.mul(&base, &base);
            k >>= 1;
        }
        acc
    }

    /// ln Σ_E n_E · exp(−β·E/denom) over an integer-scaled energy histogram.
    /// The minimum energy is factored out first so every exponent is ≤ 0 and
    /// the sum is dominated by a term of size ≥ 1.
    pub fn ln_sum_exp_histogram(
        &mut self,
        histogram: &BTreeMap<i64, u128>,
        beta: &BigRational,
        denom: &BigInt,
    ) -> Result<BigFloat> {
        let e0 = histogram
            .iter()
            .find(|(_, &n)| n > 0)
            .map(|(&e, _)| e)
            .ok_or_else(|| Error::Internal("empty energy histogram".into()))?;
        let mut sum = self.zero();
        for (&e, &n) in histogram {
            if n == 0 {
                continue;
            }
            let delta = BigRational::new(BigInt::from(e - e0), denom.clone());
            let x = -beta * delta;
            let xf = self.from_rational(&x);
            let w = self.exp(&xf);
            let term = self.mul(&self.from_u128(n), &w);
            sum = self.add(&sum, &term);
        }
        let ln_sum = self.ln(&sum)?;
        let shift = -beta * BigRational::new(BigInt::from(e0), denom.clone());
        let shift_f = self.from_rational(&shift);
        Ok(self.add(&shift_f, &ln_sum))
    }

    pub fn abs(&self, x: &BigFloat) -> BigFloat {
        x.abs()
    }

    pub fn neg(&self, x: &BigFloat) -> BigFloat {
        x.neg()
    }
}

impl Default for Hp {
    fn default() -> Self {
        Self::new()
    }
}

/// Round to f64 for reporting. The display form of these floats parses back
/// exactly within f64 resolution.
pub fn to_f64(x: &BigFloat) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_inf() {
        return if x.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
    }
    format!("{x}").parse().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::Zero;

    fn assert_close(a: &BigFloat, b: &BigFloat, tol_log10: i32) {
        let hp = Hp::new();
        let d = to_f64(&hp.abs(&hp.sub(a, b)));
        assert!(
            d < 10f64.powi(tol_log10),
            "difference {d} exceeds 1e{tol_log10}"
        );
    }

    #[test]
    fn ln_inverts_exp_to_many_digits() {
        let mut hp = Hp::new();
        let x = hp.from_rational(&BigRational::new(BigInt::from(5), BigInt::from(2)));
        let e = hp.exp(&x);
        let l = hp.ln(&e).unwrap();
        assert_close(&l, &x, -50);
    }

    #[test]
    fn rational_conversion_is_faithful() {
        let mut hp = Hp::new();
        let third = hp.from_rational(&BigRational::new(BigInt::from(1), BigInt::from(3)));
        assert!((to_f64(&third) - 1.0 / 3.0).abs() < 1e-16);
        let neg = hp.from_rational(&BigRational::new(BigInt::from(-7), BigInt::from(4)));
        assert_eq!(to_f64(&neg), -1.75);
        let zero = hp.from_rational(&BigRational::zero());
        assert_eq!(to_f64(&zero), 0.0);
    }

    #[test]
    fn histogram_log_sum_matches_direct_evaluation() {
        let mut hp = Hp::new();
        // Z = e^{2β} + 2 + e^{−2β} at β = 1, energies scaled by denom 1.
        let mut h = BTreeMap::new();
        h.insert(-2i64, 1u128);
        h.insert(0, 2);
        h.insert(2, 1);
        let beta = BigRational::new(BigInt::from(1), BigInt::from(1));
        let lnz = hp
            .ln_sum_exp_histogram(&h, &beta, &BigInt::from(1))
            .unwrap();
        let expect = (2f64.exp() + 2.0 + (-2f64).exp()).ln();
        assert!((to_f64(&lnz) - expect).abs() < 1e-14);
        // With a rational β and denominator scaling.
        let beta = BigRational::new(BigInt::from(1), BigInt::from(2));
        let lnz = hp
            .ln_sum_exp_histogram(&h, &beta, &BigInt::from(4))
            .unwrap();
        let expect = ((0.25f64).exp() + 2.0 + (-0.25f64).exp()).ln();
        assert!((to_f64(&lnz) - expect).abs() < 1e-14);
    }

    #[test]
    fn histogram_counts_beyond_u64() {
        let mut hp = Hp::new();
        let mut h = BTreeMap::new();
        h.insert(0i64, u128::MAX);
        let beta = BigRational::new(BigInt::from(1), BigInt::from(1));
        let lnz = hp
            .ln_sum_exp_histogram(&h, &beta, &BigInt::from(1))
            .unwrap();
        assert!((to_f64(&lnz) - 128.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn power_and_sign_helpers() {
        let mut hp = Hp::new();
        let two = hp.from_i64(2);
        let p10 = hp.pow_u64(&two, 10);
        assert_eq!(to_f64(&p10), 1024.0);
        assert_eq!(to_f64(&hp.pow_u64(&two, 0)), 1.0);
        let ln_err = hp.ln(&hp.zero());
        assert!(ln_err.is_err());
        let m = hp.neg(&two);
        assert_eq!(to_f64(&hp.abs(&m)), 2.0);
    }
}
