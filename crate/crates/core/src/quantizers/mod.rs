//! Lossy codecs for image segments exchanged between nodes.

mod elbow;
mod jpeg;
mod kmeans;
mod message;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use elbow::{elbow_select, Elbow};
pub use jpeg::{jpeg_decode, jpeg_encode};
pub use kmeans::{cluster, code_bits, kmeans_dequantize, kmeans_quantize, Clustering};
pub use message::{CodecTag, QuantizedMessage, HEADER_BYTES};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid codec input: {0}")]
    InvalidInput(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("code {code} at position {position} outside codebook of {codebook}")]
    CorruptCode {
        position: usize,
        code: usize,
        codebook: usize,
    },
    #[error("expected {expected:?} message, found {found:?}")]
    WrongCodec { expected: CodecTag, found: CodecTag },
    #[error("jpeg: {0}")]
    Jpeg(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    #[default]
    Identity,
    Kmeans,
    Jpeg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    /// Cluster count for the K-means codec.
    pub k: usize,
    /// JPEG quality, 1–100.
    pub quality: u8,
    /// Seed for K-means initialisation.
    pub seed: u64,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec {
            kind: QuantizerKind::Identity,
            k: 3,
            quality: 30,
            seed: 0,
        }
    }
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn kmeans(k: usize, seed: u64) -> Self {
        QuantizerSpec {
            kind: QuantizerKind::Kmeans,
            k,
            seed,
            ..Self::default()
        }
    }

    pub fn jpeg(quality: u8) -> Self {
        QuantizerSpec {
            kind: QuantizerKind::Jpeg,
            quality,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.k < 1 {
            return Err(CodecError::InvalidInput("quantizer.k must be at least 1".into()));
        }
        if !(1..=100).contains(&self.quality) {
            return Err(CodecError::InvalidInput(format!(
                "quantizer.quality {} outside 1..=100",
                self.quality
            )));
        }
        Ok(())
    }

    /// Encodes one segment laid out as a `rows × cols` block.
    pub fn encode(
        &self,
        values: &[f64],
        block_shape: (usize, usize),
        segment_index: u16,
    ) -> Result<QuantizedMessage, CodecError> {
        match self.kind {
            QuantizerKind::Identity => identity_encode(values, segment_index),
            QuantizerKind::Kmeans => kmeans_quantize(values, self.k, self.seed, segment_index),
            QuantizerKind::Jpeg => jpeg_encode(values, block_shape, self.quality, segment_index),
        }
    }
}

/// Decodes any message by its codec tag.
pub fn decode(msg: &QuantizedMessage) -> Result<Vec<f64>, CodecError> {
    match msg.codec {
        CodecTag::Identity => identity_decode(msg),
        CodecTag::KMeans => kmeans_dequantize(msg),
        CodecTag::Jpeg => jpeg_decode(msg),
    }
}

/// Uncompressed 32-bit float samples.
pub fn identity_encode(values: &[f64], segment_index: u16) -> Result<QuantizedMessage, CodecError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::InvalidInput("non-finite value".into()));
    }
    let mut payload = Vec::with_capacity(4 * values.len());
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(QuantizedMessage {
        codec: CodecTag::Identity,
        segment_index,
        decoded_length: values.len() as u32,
        metadata: Vec::new(),
        payload,
    })
}

pub fn identity_decode(msg: &QuantizedMessage) -> Result<Vec<f64>, CodecError> {
    if msg.codec != CodecTag::Identity {
        return Err(CodecError::WrongCodec {
            expected: CodecTag::Identity,
            found: msg.codec,
        });
    }
    if !msg.metadata.is_empty() || msg.payload.len() != 4 * msg.decoded_length as usize {
        return Err(CodecError::Malformed(format!(
            "identity payload of {} bytes for {} values",
            msg.payload.len(),
            msg.decoded_length
        )));
    }
    Ok(msg
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_four_bytes_per_value() {
        let v = [1.5, -2.25, 0.0, 1e-3];
        let msg = identity_encode(&v, 0).unwrap();
        assert_eq!(msg.byte_size(), 16);
        let out = decode(&msg).unwrap();
        assert_eq!(&out[..3], &v[..3]);
        assert_eq!(out[3], 1e-3f32 as f64);
    }

    #[test]
    fn spec_validation() {
        assert!(QuantizerSpec::kmeans(0, 0).validate().is_err());
        assert!(QuantizerSpec::jpeg(0).validate().is_err());
        assert!(QuantizerSpec::jpeg(101).validate().is_err());
        assert!(QuantizerSpec::jpeg(100).validate().is_ok());
    }

    #[test]
    fn decode_dispatch_checks_tags() {
        let msg = identity_encode(&[1.0], 0).unwrap();
        assert!(kmeans_dequantize(&msg).is_err());
        assert!(jpeg_decode(&msg).is_err());
    }

    proptest! {
        #[test]
        fn decoded_length_equals_input(
            v in proptest::collection::vec(-50.0f64..50.0, 1..200),
            kind in 0u8..3,
        ) {
            let spec = match kind {
                0 => QuantizerSpec::identity(),
                1 => QuantizerSpec::kmeans(4, 1),
                _ => QuantizerSpec::jpeg(60),
            };
            let msg = spec.encode(&v, (1, v.len()), 3).unwrap();
            let wire = QuantizedMessage::from_bytes(&msg.to_bytes()).unwrap();
            prop_assert_eq!(decode(&wire).unwrap().len(), v.len());
        }
    }
}
