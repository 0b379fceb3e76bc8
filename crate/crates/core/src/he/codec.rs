//! Fixed-point, offset-binary slot encoding.
//!
//! A value `v` with `|v| < 2^int_bits` becomes the unsigned slot
//! `round(v * 2^frac_bits) + bias` where `bias = 2^(int_bits + frac_bits)`,
//! so every encoded slot fits in `value_bits = int_bits + frac_bits + 1` bits.
//! Each slot reserves `guard_bits` more bits above that, which lets up to
//! `2^guard_bits` encoded vectors be summed slot-wise without a carry
//! reaching the neighbouring slot. A sum of `k` slots is decoded by removing
//! `k` biases.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointCodec {
    frac_bits: u32,
    int_bits: u32,
    guard_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            frac_bits: 30,
            int_bits: 16,
            guard_bits: 8,
        }
    }
}

impl FixedPointCodec {
    /// Slot widths above 120 bits are rejected so sums stay exact in `i128`.
    pub fn new(frac_bits: u32, int_bits: u32, guard_bits: u32) -> Result<Self> {
        if frac_bits > 62 {
            return Err(Error::Parameter(format!("frac_bits {frac_bits} exceeds 62")));
        }
        if guard_bits > 31 {
            return Err(Error::Parameter(format!("guard_bits {guard_bits} exceeds 31")));
        }
        let width = int_bits + frac_bits + 1 + guard_bits;
        if width > 120 {
            return Err(Error::Parameter(format!("slot width {width} bits exceeds 120")));
        }
        Ok(FixedPointCodec {
            frac_bits,
            int_bits,
            guard_bits,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn guard_bits(&self) -> u32 {
        self.guard_bits
    }

    pub fn value_bits(&self) -> u32 {
        self.int_bits + self.frac_bits + 1
    }

    /// Bits one slot occupies inside a packed plaintext.
    pub fn slot_bits(&self) -> u32 {
        self.value_bits() + self.guard_bits
    }

    pub fn bias(&self) -> u128 {
        1u128 << (self.int_bits + self.frac_bits)
    }

    /// Largest number of encoded vectors whose slot-wise sum stays exact.
    pub fn capacity(&self) -> u64 {
        1u64 << self.guard_bits
    }

    /// Worst-case absolute rounding error of one encoded value.
    pub fn quantum(&self) -> f64 {
        (-(self.frac_bits as f64) - 1.0).exp2()
    }

    fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Encodes `value`, reporting `index` on overflow.
    pub fn encode_value(&self, index: usize, value: f64) -> Result<u128> {
        let limit = (self.int_bits as f64).exp2();
        if !value.is_finite() || value.abs() >= limit {
            return Err(Error::Range { index, value });
        }
        let q = (value * self.scale()).round() as i128;
        let bias = self.bias() as i128;
        if q < -bias || q >= bias {
            return Err(Error::Range { index, value });
        }
        Ok((q + bias) as u128)
    }

    pub fn encode(&self, values: &[f64]) -> Result<Vec<u128>> {
        values.iter().enumerate().map(|(i, &v)| self.encode_value(i, v)).collect()
    }

    /// Decodes a slot holding the sum of `divisor` encoded values.
    pub fn decode_slot(&self, slot: u128, divisor: u64) -> f64 {
        let centered = slot as i128 - divisor as i128 * self.bias() as i128;
        centered as f64 / self.scale()
    }

    pub fn decode(&self, slots: &[u128], divisor: u64) -> Vec<f64> {
        slots.iter().map(|&s| self.decode_slot(s, divisor)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    #[test]
    fn zero_and_one_and_a_half() {
        let c = FixedPointCodec::default();
        assert_eq!(c.decode_slot(c.encode_value(0, 0.0).unwrap(), 1), 0.0);
        let e = (c.decode_slot(c.encode_value(0, 1.5).unwrap(), 1) - 1.5).abs();
        assert!(e <= 2f64.powi(-31));
    }

    #[test]
    fn range_errors_name_the_index() {
        let c = FixedPointCodec::default();
        let err = c.encode(&[0.0, 1.0, 65536.0]).unwrap_err();
        assert!(matches!(err, Error::Range { index: 2, .. }));
        assert!(matches!(c.encode_value(4, f64::NAN), Err(Error::Range { index: 4, .. })));
        assert!(c.encode_value(0, -65535.999).is_ok());
    }

    #[test]
    fn edge_of_range_fits_value_bits() {
        let c = FixedPointCodec::new(4, 3, 2).unwrap();
        let top = c.encode_value(0, 7.9375).unwrap();
        assert!(top < 1 << c.value_bits());
        assert_eq!(c.encode_value(0, -8.0 + 1.0 / 32.0).unwrap(), 0);
        // rounds up to +8, one past the largest representable value
        assert!(c.encode_value(0, 7.99).is_err());
    }

    #[test]
    fn integer_sum_of_twenty() {
        let c = FixedPointCodec::default();
        let mut rng = derive(1, Stream::Encrypt, 0, 0);
        let values: Vec<f64> = (0..20).map(|_| rng.random_range(-8.0..8.0)).collect();
        let slot_sum: u128 = values.iter().map(|&v| c.encode_value(0, v).unwrap()).sum();
        assert!(slot_sum < 1 << c.slot_bits());
        let decoded = c.decode_slot(slot_sum, 20);
        let truth: f64 = values.iter().sum();
        assert!((decoded - truth).abs() <= 20.0 * c.quantum());
    }

    #[test]
    fn parameter_limits() {
        assert!(FixedPointCodec::new(63, 1, 1).is_err());
        assert!(FixedPointCodec::new(60, 50, 20).is_err());
        assert_eq!(FixedPointCodec::default().slot_bits(), 55);
    }
}
