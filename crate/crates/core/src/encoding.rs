//! Fixed-point encoding of reals into Paillier plaintext residues.
//!
//! A real `x` is encoded as `round(x · 2^(f·level))` reduced into `[0, n)`,
//! with negative values represented as `n - |v|` (two's-complement style
//! around the modulus). Scale level 1 is used for raw values; multiplying two
//! level-1 values — which is exactly what a homomorphic matrix-vector product
//! does — yields a level-2 value, so the codec only ever deals with levels
//! 1 and 2.
//!
//! Encoded magnitudes must stay below `n/2` or the signed interpretation is
//! ambiguous; construction enforces `2^(2f + 64) < n/2` so that level-2
//! products of in-range values keep 64 guard bits of headroom, and every
//! encode checks its input against the per-level bound.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, ToPrimitive};
use thiserror::Error;

/// Headroom bits demanded above the level-2 scale at construction.
pub const GUARD_BITS: u32 = 64;

/// Default fractional bits; `2^-40 ≈ 9.1e-13` quantization step.
pub const DEFAULT_FRAC_BITS: u32 = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error(
        "modulus ({modulus_bits} bits) leaves no headroom for {frac_bits} fractional bits \
         plus {GUARD_BITS} guard bits"
    )]
    ModulusTooSmall { modulus_bits: u64, frac_bits: u32 },
    #[error("frac_bits must be at least 1")]
    NoFracBits,
    #[error("value {value} exceeds representable magnitude {max:e} at {level:?}")]
    Overflow { value: f64, max: f64, level: ScaleLevel },
    #[error("cannot encode a non-finite value")]
    NonFinite,
}

/// How many times the fixed-point scale has been applied. Raw encodings are
/// level one; products of two raw encodings are level two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleLevel {
    One,
    Two,
}

impl ScaleLevel {
    fn scale_bits(self, frac_bits: u32) -> u64 {
        match self {
            ScaleLevel::One => frac_bits as u64,
            ScaleLevel::Two => 2 * frac_bits as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    modulus: BigUint,
    half_modulus: BigUint,
}

impl FixedPointCodec {
    /// Builds a codec over plaintext space `[0, modulus)`.
    ///
    /// Fails unless `2^(2·frac_bits + 64) < modulus/2`: level-2 values need
    /// signed headroom, and the 64 guard bits absorb accumulation across a
    /// matrix row.
    pub fn new(modulus: &BigUint, frac_bits: u32) -> Result<Self, CodecError> {
        if frac_bits == 0 {
            return Err(CodecError::NoFracBits);
        }
        let half_modulus: BigUint = modulus >> 1;
        let needed = BigUint::one() << (2 * frac_bits as u64 + GUARD_BITS as u64);
        if needed >= half_modulus {
            return Err(CodecError::ModulusTooSmall {
                modulus_bits: modulus.bits(),
                frac_bits,
            });
        }
        Ok(FixedPointCodec {
            frac_bits,
            modulus: modulus.clone(),
            half_modulus,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// Largest encodable magnitude at `level`: `floor(n/2) / 2^(f·level)`,
    /// rounded down. May be `f64::INFINITY` for large keys, which simply
    /// means f64 range, not the codec, is the binding constraint.
    pub fn max_magnitude(&self, level: ScaleLevel) -> f64 {
        let bound = &self.half_modulus >> level.scale_bits(self.frac_bits);
        bound.to_f64().unwrap_or(f64::INFINITY)
    }

    /// Encodes a real into a residue in `[0, n)`.
    pub fn encode(&self, x: f64, level: ScaleLevel) -> Result<BigUint, CodecError> {
        if !x.is_finite() {
            return Err(CodecError::NonFinite);
        }
        let scaled = x * (level.scale_bits(self.frac_bits) as f64).exp2();
        if !scaled.is_finite() {
            return Err(CodecError::Overflow {
                value: x,
                max: self.max_magnitude(level),
                level,
            });
        }
        let rounded = BigInt::from_f64(scaled.round()).expect("finite f64 converts exactly");
        if rounded.magnitude() > &self.half_modulus {
            return Err(CodecError::Overflow {
                value: x,
                max: self.max_magnitude(level),
                level,
            });
        }
        Ok(self.to_residue(&rounded))
    }

    /// Decodes a residue in `[0, n)` back to a real.
    pub fn decode(&self, v: &BigUint, level: ScaleLevel) -> f64 {
        debug_assert!(v < &self.modulus, "residue out of range");
        let signed = self.center(v);
        let scale = (level.scale_bits(self.frac_bits) as f64).exp2();
        signed.to_f64().unwrap_or(f64::INFINITY) / scale
    }

    /// Maps a residue to its signed representative in `[-n/2, n/2]`:
    /// values above `n/2` are negative.
    pub fn center(&self, v: &BigUint) -> BigInt {
        if v > &self.half_modulus {
            BigInt::from(v.clone()) - BigInt::from(self.modulus.clone())
        } else {
            BigInt::from(v.clone())
        }
    }

    /// Maps a signed integer to its residue in `[0, n)`. Inverse of
    /// [`center`](Self::center) for magnitudes at most `n/2`.
    pub fn to_residue(&self, w: &BigInt) -> BigUint {
        let n = BigInt::from(self.modulus.clone());
        w.mod_floor(&n)
            .to_biguint()
            .expect("mod_floor result is non-negative")
    }

    /// The signed fixed-point integer for `x` at `level`, without residue
    /// reduction. Used where exact integer arithmetic on encodings is needed.
    pub fn encode_int(&self, x: f64, level: ScaleLevel) -> Result<BigInt, CodecError> {
        let residue = self.encode(x, level)?;
        Ok(self.center(&residue))
    }

    /// Decodes a signed fixed-point integer (the counterpart of
    /// [`encode_int`](Self::encode_int)) back to a real.
    pub fn decode_int(&self, w: &BigInt, level: ScaleLevel) -> f64 {
        let scale = (level.scale_bits(self.frac_bits) as f64).exp2();
        w.to_f64().unwrap_or(f64::INFINITY) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Zero;

    fn codec(modulus_bits: u64, frac_bits: u32) -> FixedPointCodec {
        let modulus = (BigUint::one() << modulus_bits) - 1u32; // odd, like a real n
        FixedPointCodec::new(&modulus, frac_bits).unwrap()
    }

    #[test]
    fn construction_enforces_headroom() {
        // 2^(2·40+64) = 2^144 must be < n/2.
        assert!(FixedPointCodec::new(&((BigUint::one() << 146u32) - 1u32), 40).is_ok());
        assert!(matches!(
            FixedPointCodec::new(&((BigUint::one() << 145u32) - 1u32), 40),
            Err(CodecError::ModulusTooSmall { .. })
        ));
        assert!(matches!(
            FixedPointCodec::new(&(BigUint::one() << 80u32), 40),
            Err(CodecError::ModulusTooSmall { .. })
        ));
        assert_eq!(
            FixedPointCodec::new(&(BigUint::one() << 200u32), 0),
            Err(CodecError::NoFracBits)
        );
    }

    #[test]
    fn roundtrip_error_is_half_quantum() {
        let c = codec(256, 40);
        let quantum = (-40f64).exp2();
        for &x in &[
            0.0, 1.0, -1.0, 0.5, -0.25, 3.141592653589793, -2.718281828459045,
            1e-6, -1e-6, 12345.6789, -99999.00001,
        ] {
            let back = c.decode(&c.encode(x, ScaleLevel::One).unwrap(), ScaleLevel::One);
            assert!(
                (back - x).abs() <= quantum / 2.0 * (1.0 + 1e-9),
                "x={x}, back={back}"
            );
        }
    }

    #[test]
    fn exact_dyadic_values_roundtrip_exactly() {
        let c = codec(256, 40);
        for &x in &[0.0, 1.0, -1.0, 0.5, -0.5, 0.75, 1024.0, -4096.125] {
            for level in [ScaleLevel::One, ScaleLevel::Two] {
                let back = c.decode(&c.encode(x, level).unwrap(), level);
                assert_eq!(back, x, "x={x} at {level:?}");
            }
        }
    }

    #[test]
    fn negation_mirrors_around_modulus() {
        let c = codec(256, 40);
        for &x in &[1.0, 0.125, 7.25, 1e3] {
            let pos = c.encode(x, ScaleLevel::One).unwrap();
            let neg = c.encode(-x, ScaleLevel::One).unwrap();
            assert_eq!(pos + neg, c.modulus().clone(), "x={x}");
        }
    }

    #[test]
    fn level_two_decodes_products() {
        // 2.5 · 1.5 = 3.75, all exactly representable with 4 fractional bits.
        let c = codec(256, 4);
        let a = c.encode_int(2.5, ScaleLevel::One).unwrap();
        let b = c.encode_int(1.5, ScaleLevel::One).unwrap();
        assert_eq!(a, BigInt::from(40));
        assert_eq!(b, BigInt::from(24));
        let product = c.to_residue(&(a * b));
        assert_eq!(product, BigUint::from(960u32));
        assert_eq!(c.decode(&product, ScaleLevel::Two), 3.75);

        // Signs carry through: (-2.5)·1.5 = -3.75.
        let a_neg = c.encode_int(-2.5, ScaleLevel::One).unwrap();
        let product = c.to_residue(&(a_neg * c.encode_int(1.5, ScaleLevel::One).unwrap()));
        assert_eq!(c.decode(&product, ScaleLevel::Two), -3.75);
    }

    #[test]
    fn overflow_detected_per_level() {
        let c = codec(166, 40); // half = 2^165/2-ish; level-1 max ≈ 2^124, level-2 max ≈ 2^84
        let max1 = c.max_magnitude(ScaleLevel::One);
        let max2 = c.max_magnitude(ScaleLevel::Two);
        assert!(max2 < max1);
        assert!(c.encode(max2 * 0.99, ScaleLevel::Two).is_ok());
        assert!(matches!(
            c.encode(max2 * 2.0, ScaleLevel::Two),
            Err(CodecError::Overflow { level: ScaleLevel::Two, .. })
        ));
        // The same magnitude still fits at level one.
        assert!(c.encode(max2 * 2.0, ScaleLevel::One).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        let c = codec(256, 40);
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(c.encode(bad, ScaleLevel::One), Err(CodecError::NonFinite));
        }
    }

    #[test]
    fn center_and_residue_are_inverse() {
        let c = codec(200, 4);
        let half = BigInt::from(c.half_modulus.clone());
        for w in [
            BigInt::zero(),
            BigInt::one(),
            -BigInt::one(),
            half.clone(),
            -half.clone(),
            BigInt::from(123456789),
            BigInt::from(-987654321),
        ] {
            assert_eq!(c.center(&c.to_residue(&w)), w, "w={w}");
        }
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let c = codec(256, 1); // scale 2: units of 0.5
        let v = c.encode(0.25, ScaleLevel::One).unwrap(); // 0.5 scaled → rounds to 1
        assert_eq!(c.decode(&v, ScaleLevel::One), 0.5);
        let v = c.encode(-0.25, ScaleLevel::One).unwrap();
        assert_eq!(c.decode(&v, ScaleLevel::One), -0.5);
    }
}
