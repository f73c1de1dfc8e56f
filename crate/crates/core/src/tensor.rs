//! Dense and binary tensors.
//!
//! Spike tensors are stored bit-packed: row-major element order, MSB-first
//! within each byte, zero padding up to the byte boundary. The same layout is
//! what goes on the wire inside FEATURE messages.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("shape extent {0} at axis {1} is not positive")]
    ZeroExtent(usize, usize),
    #[error("shape element count {0} does not fit in 32 bits")]
    TooLarge(u64),
    #[error("data length {actual} does not match shape element count {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("packed length {actual} bytes, expected {expected} for {bits} bits")]
    PackedLength {
        bits: usize,
        expected: usize,
        actual: usize,
    },
    #[error("nonzero padding bits in final byte")]
    NonZeroPadding,
    #[error("firing rate of an empty tensor is undefined")]
    Empty,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
}

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let mut count: u64 = 1;
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(TensorError::ZeroExtent(d, axis));
            }
            count = count.saturating_mul(d as u64);
        }
        if count >= 1 << 32 {
            return Err(TensorError::TooLarge(count));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interpret as (C, H, W). Rank-1 shapes are treated as (N, 1, 1).
    pub fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.0.as_slice() {
            &[c, h, w] => Some((c, h, w)),
            &[n] => Some((n, 1, 1)),
            _ => None,
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Shorthand used all over tests and topology code. Panics on invalid extents.
pub fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).expect("valid shape")
}

/// Row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Construct without the finiteness scan. Callers guarantee the data is finite.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.shape.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bit-packed binary tensor.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    shape: Shape,
    bits: Vec<u8>,
}

impl fmt::Debug for SpikeTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpikeTensor")
            .field("shape", &self.shape)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl SpikeTensor {
    pub fn zeros(shape: Shape) -> Self {
        let bytes = packed_len(shape.numel());
        Self {
            shape,
            bits: vec![0; bytes],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        let n = shape.numel();
        let flags = vec![1u8; n];
        Self {
            shape,
            bits: pack_bits(&flags).expect("binary"),
        }
    }

    /// Build from one 0/1 byte per element.
    pub fn from_flags(shape: Shape, flags: &[u8]) -> Result<Self, TensorError> {
        if flags.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                actual: flags.len(),
            });
        }
        Ok(Self {
            shape,
            bits: pack_bits(flags)?,
        })
    }

    /// Build from already-packed bytes, validating length and padding.
    pub fn from_packed(shape: Shape, bytes: Vec<u8>) -> Result<Self, TensorError> {
        validate_packed(&bytes, shape.numel())?;
        Ok(Self { shape, bits: bytes })
    }

    /// Binarize a dense tensor holding 0.0/1.0 values.
    pub fn from_dense(x: &DenseTensor) -> Result<Self, TensorError> {
        let mut flags = Vec::with_capacity(x.data.len());
        for (index, &v) in x.data.iter().enumerate() {
            match v {
                v if v == 0.0 => flags.push(0),
                v if v == 1.0 => flags.push(1),
                v => {
                    return Err(TensorError::NonBinary {
                        index,
                        value: v as f64,
                    })
                }
            }
        }
        Ok(Self {
            shape: x.shape.clone(),
            bits: pack_bits(&flags)?,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_packed(self) -> Vec<u8> {
        self.bits
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.numel(), "spike index {i} out of range");
        self.bits[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn to_flags(&self) -> Vec<u8> {
        unpack_bits(&self.bits, self.numel()).expect("internally consistent")
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut data = Vec::with_capacity(self.numel());
        data.extend(self.to_flags().into_iter().map(f32::from));
        DenseTensor::from_parts(self.shape.clone(), data)
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                actual: self.numel(),
            });
        }
        Ok(Self {
            shape,
            bits: self.bits,
        })
    }
}

/// Bytes needed to pack `n` bits.
pub fn packed_len(n: usize) -> usize {
    n.div_ceil(8)
}

/// Pack a 0/1 sequence MSB-first.
pub fn pack_bits(spikes: &[u8]) -> Result<Vec<u8>, TensorError> {
    let mut out = vec![0u8; packed_len(spikes.len())];
    for (i, &s) in spikes.iter().enumerate() {
        match s {
            0 => {}
            1 => out[i / 8] |= 0x80 >> (i % 8),
            v => {
                return Err(TensorError::NonBinary {
                    index: i,
                    value: v as f64,
                })
            }
        }
    }
    Ok(out)
}

fn validate_packed(bytes: &[u8], n: usize) -> Result<(), TensorError> {
    let expected = packed_len(n);
    if bytes.len() != expected {
        return Err(TensorError::PackedLength {
            bits: n,
            expected,
            actual: bytes.len(),
        });
    }
    let used = n % 8;
    if used != 0 {
        let pad_mask = 0xFFu8 >> used;
        if bytes[expected - 1] & pad_mask != 0 {
            return Err(TensorError::NonZeroPadding);
        }
    }
    Ok(())
}

/// Inverse of [`pack_bits`] on the first `n` bits.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<u8>, TensorError> {
    validate_packed(bytes, n)?;
    Ok((0..n)
        .map(|i| (bytes[i / 8] >> (7 - (i % 8))) & 1)
        .collect())
}

/// Fraction of elements that are 1.
pub fn firing_rate(x: &SpikeTensor) -> Result<f64, TensorError> {
    // Shapes cannot be empty, but keep the check for the contract.
    if x.numel() == 0 {
        return Err(TensorError::Empty);
    }
    Ok(x.count_ones() as f64 / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_msb_first() {
        assert_eq!(
            pack_bits(&[1, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap(),
            vec![0x80, 0x80]
        );
        assert_eq!(pack_bits(&[]).unwrap(), Vec::<u8>::new());
        assert_eq!(pack_bits(&[1; 16]).unwrap(), vec![0xFF, 0xFF]);
    }

    #[test]
    fn pack_rejects_non_binary() {
        assert!(matches!(
            pack_bits(&[0, 2]),
            Err(TensorError::NonBinary { index: 1, .. })
        ));
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(unpack_bits(&[0x80], 1).unwrap(), vec![1]);
        assert_eq!(unpack_bits(&[0xA0], 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(unpack_bits(&[0x01], 1), Err(TensorError::NonZeroPadding));
        assert!(matches!(
            unpack_bits(&[0x00, 0x00], 3),
            Err(TensorError::PackedLength { .. })
        ));
    }

    #[test]
    fn firing_rate_examples() {
        let s = shape(&[2, 4, 4]);
        assert_eq!(firing_rate(&SpikeTensor::zeros(s.clone())).unwrap(), 0.0);
        assert_eq!(firing_rate(&SpikeTensor::ones(s.clone())).unwrap(), 1.0);
        let mut flags = vec![0u8; 32];
        for i in [0, 3, 5, 9, 14, 20, 27, 31] {
            flags[i] = 1;
        }
        let popcount = flags.iter().filter(|&&f| f == 1).count();
        let t = SpikeTensor::from_flags(s, &flags).unwrap();
        assert_eq!(firing_rate(&t).unwrap(), popcount as f64 / 32.0);
        assert_eq!(firing_rate(&t).unwrap(), 0.25);
    }

    #[test]
    fn shape_validation() {
        assert_eq!(Shape::new(vec![]), Err(TensorError::EmptyShape));
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(Shape::new(vec![1 << 16, 1 << 16]).is_err());
        assert_eq!(shape(&[2, 3, 4]).numel(), 24);
    }

    #[test]
    fn dense_rejects_nan() {
        assert_eq!(
            DenseTensor::new(shape(&[2]), vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite(1))
        );
    }

    proptest! {
        #[test]
        fn pack_roundtrip(bits in proptest::collection::vec(0u8..=1, 0..4096)) {
            let packed = pack_bits(&bits).unwrap();
            prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, bits.len()).unwrap(), bits);
        }

        #[test]
        fn firing_rate_reshape_invariant(bits in proptest::collection::vec(0u8..=1, 1..512)) {
            let n = bits.len();
            let flat = SpikeTensor::from_flags(shape(&[n]), &bits).unwrap();
            let r1 = firing_rate(&flat).unwrap();
            let r2 = firing_rate(&flat.reshape(shape(&[1, n, 1])).unwrap()).unwrap();
            prop_assert_eq!(r1, r2);
        }
    }

    #[test]
    fn roundtrip_large() {
        let mut rng = crate::rng::SeededRng::new(5);
        let bits: Vec<u8> = (0..100_000).map(|_| (rng.next_u64() & 1) as u8).collect();
        let packed = pack_bits(&bits).unwrap();
        assert_eq!(packed.len(), 12_500);
        assert_eq!(unpack_bits(&packed, bits.len()).unwrap(), bits);
    }
}
