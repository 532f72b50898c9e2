//! Canonical hexadecimal encoding for protocol integers.
//!
//! Every big integer that crosses a serialization boundary (wire frames, key
//! files) travels as a lowercase big-endian hex string with no leading zeros;
//! zero itself is `"0"`. Parsing rejects anything non-canonical — uppercase
//! digits, leading zeros, empty strings — so a given integer has exactly one
//! wire form and serialized frames are byte-stable.

use num_bigint::BigUint;
use num_traits::Num;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HexIntError {
    #[error("empty hex string")]
    Empty,
    #[error("non-canonical hex: leading zero")]
    LeadingZero,
    #[error("invalid hex digit {0:?} (lowercase 0-9a-f only)")]
    BadDigit(char),
}

/// Encodes an integer in canonical form.
pub fn to_hex(v: &BigUint) -> String {
    v.to_str_radix(16)
}

/// Parses canonical hex, rejecting any other spelling of the same value.
pub fn from_hex(s: &str) -> Result<BigUint, HexIntError> {
    if s.is_empty() {
        return Err(HexIntError::Empty);
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(HexIntError::LeadingZero);
    }
    if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='9' | 'a'..='f')) {
        return Err(HexIntError::BadDigit(c));
    }
    Ok(BigUint::from_str_radix(s, 16).expect("digits already validated"))
}

/// Serde adapter for a [`BigUint`] field carried as canonical hex.
///
/// Use as `#[serde(with = "crate::hexint::serde_hex")]`.
pub mod serde_hex {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&to_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(de)?;
        from_hex(&s).map_err(de::Error::custom)
    }
}

/// Serde adapter for `Vec<BigUint>` fields.
pub mod serde_hex_vec {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigUint], ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(v.iter().map(to_hex))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<BigUint>, D::Error> {
        let strings = Vec::<String>::deserialize(de)?;
        strings
            .iter()
            .map(|s| from_hex(s).map_err(de::Error::custom))
            .collect()
    }
}

/// Serde adapter for `Vec<Vec<BigUint>>` fields (encrypted matrices).
pub mod serde_hex_grid {
    use super::*;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<BigUint>], ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(v.iter().map(|row| row.iter().map(to_hex).collect::<Vec<_>>()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Vec<BigUint>>, D::Error> {
        let rows = Vec::<Vec<String>>::deserialize(de)?;
        rows.iter()
            .map(|row| {
                row.iter()
                    .map(|s| from_hex(s).map_err(de::Error::custom))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_single_digit() {
        assert_eq!(to_hex(&BigUint::from(0u32)), "0");
        assert_eq!(from_hex("0").unwrap(), BigUint::from(0u32));
    }

    #[test]
    fn roundtrips_are_canonical() {
        for v in [1u64, 15, 16, 255, 256, u64::MAX] {
            let h = to_hex(&BigUint::from(v));
            assert_eq!(from_hex(&h).unwrap(), BigUint::from(v));
            assert!(!h.starts_with('0'));
            assert!(h.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
        }
    }

    #[test]
    fn rejects_non_canonical() {
        assert_eq!(from_hex(""), Err(HexIntError::Empty));
        assert_eq!(from_hex("0f"), Err(HexIntError::LeadingZero));
        assert_eq!(from_hex("00"), Err(HexIntError::LeadingZero));
        assert_eq!(from_hex("FF"), Err(HexIntError::BadDigit('F')));
        assert_eq!(from_hex("1g"), Err(HexIntError::BadDigit('g')));
        assert_eq!(from_hex("0x1f"), Err(HexIntError::LeadingZero));
    }

    #[test]
    fn large_values_roundtrip() {
        let v = BigUint::parse_bytes(b"deadbeefcafebabe0123456789abcdef", 16).unwrap();
        assert_eq!(from_hex(&to_hex(&v)).unwrap(), v);
    }
}
