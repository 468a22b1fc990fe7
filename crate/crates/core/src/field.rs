//! Evaluation domains: exact integers, GF(2) and prime fields GF(p).

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use thiserror::Error;

/// Domain over which circuits are evaluated and polynomials expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldSpec {
    Gf2,
    /// Prime field of the given order, 2 <= p < 2^31.
    Gfp(u32),
    ExactInteger,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} out of range (need 2 <= p < 2^31)")]
    OutOfRange(u64),
}

pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3u64;
    while d.checked_mul(d).map(|sq| sq <= n).unwrap_or(false) {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

impl FieldSpec {
    /// Prime-field constructor with primality and range checks.
    pub fn gfp(p: u64) -> Result<FieldSpec, FieldError> {
        if p < 2 || p >= (1u64 << 31) {
            return Err(FieldError::OutOfRange(p));
        }
        if !is_prime(p) {
            return Err(FieldError::NotPrime(p));
        }
        Ok(FieldSpec::Gfp(p as u32))
    }

    pub fn modulus(&self) -> Option<u64> {
        match self {
            FieldSpec::Gf2 => Some(2),
            FieldSpec::Gfp(p) => Some(*p as u64),
            FieldSpec::ExactInteger => None,
        }
    }

    /// Canonical representative: for GF(p) the value in [0, p), exact otherwise.
    pub fn reduce(&self, v: &BigInt) -> BigInt {
        match self.modulus() {
            None => v.clone(),
            Some(m) => {
                let m = BigInt::from(m);
                let mut r = v % &m;
                if r.is_negative() {
                    r += &m;
                }
                r
            }
        }
    }

    pub fn reduce_i64(&self, v: i64) -> BigInt {
        self.reduce(&BigInt::from(v))
    }

    pub fn is_zero(&self, v: &BigInt) -> bool {
        self.reduce(v).is_zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primality() {
        assert!(is_prime(2));
        assert!(is_prime(3));
        assert!(is_prime(10007));
        assert!(is_prime((1 << 31) - 1));
        assert!(!is_prime(1));
        assert!(!is_prime(10005));
    }

    #[test]
    fn gfp_rejects_composite_and_oversized() {
        assert_eq!(FieldSpec::gfp(9), Err(FieldError::NotPrime(9)));
        assert!(matches!(FieldSpec::gfp(1u64 << 31), Err(FieldError::OutOfRange(_))));
        assert_eq!(FieldSpec::gfp(5), Ok(FieldSpec::Gfp(5)));
    }

    #[test]
    fn reduce_is_nonnegative() {
        let f = FieldSpec::Gfp(5);
        assert_eq!(f.reduce(&BigInt::from(-3)), BigInt::from(2));
        assert_eq!(f.reduce(&BigInt::from(12)), BigInt::from(2));
        assert_eq!(FieldSpec::ExactInteger.reduce(&BigInt::from(-3)), BigInt::from(-3));
    }
}
