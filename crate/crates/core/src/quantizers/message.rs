//! Wire format for an encoded image segment.
//!
//! All integers are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       1     codec tag (0 identity, 1 kmeans, 2 jpeg)
//! 1       2     segment index
//! 3       4     decoded length (elements)
//! 7       4     metadata length (bytes)
//! 11      m     metadata
//! 11+m    ..    payload (runs to the end of the frame)
//! ```

use super::CodecError;

/// Bytes of the fixed frame header preceding metadata and payload.
pub const HEADER_BYTES: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CodecTag {
    Identity = 0,
    KMeans = 1,
    Jpeg = 2,
}

impl TryFrom<u8> for CodecTag {
    type Error = CodecError;

    fn try_from(v: u8) -> Result<Self, CodecError> {
        match v {
            0 => Ok(CodecTag::Identity),
            1 => Ok(CodecTag::KMeans),
            2 => Ok(CodecTag::Jpeg),
            other => Err(CodecError::Malformed(format!("unknown codec tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMessage {
    pub codec: CodecTag,
    pub segment_index: u16,
    pub decoded_length: u32,
    pub metadata: Vec<u8>,
    pub payload: Vec<u8>,
}

impl QuantizedMessage {
    /// Encoded size of metadata plus payload; the frame adds [`HEADER_BYTES`].
    pub fn byte_size(&self) -> usize {
        self.metadata.len() + self.payload.len()
    }

    pub fn wire_size(&self) -> usize {
        HEADER_BYTES + self.byte_size()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_size());
        out.push(self.codec as u8);
        out.extend_from_slice(&self.segment_index.to_le_bytes());
        out.extend_from_slice(&self.decoded_length.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.metadata);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_BYTES {
            return Err(CodecError::Malformed(format!(
                "frame of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let codec = CodecTag::try_from(bytes[0])?;
        let segment_index = u16::from_le_bytes([bytes[1], bytes[2]]);
        let decoded_length = u32::from_le_bytes(bytes[3..7].try_into().unwrap());
        let meta_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_BYTES..];
        if meta_len > body.len() {
            return Err(CodecError::Malformed(format!(
                "metadata length {meta_len} exceeds frame body of {} bytes",
                body.len()
            )));
        }
        Ok(QuantizedMessage {
            codec,
            segment_index,
            decoded_length,
            metadata: body[..meta_len].to_vec(),
            payload: body[meta_len..].to_vec(),
        })
    }
}

/// Little-endian cursor over metadata bytes.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CodecError::Malformed("metadata truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<(), CodecError> {
        if self.pos != self.bytes.len() {
            return Err(CodecError::Malformed(format!(
                "{} trailing metadata bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
