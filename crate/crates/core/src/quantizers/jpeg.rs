//! Lossy DCT codec for image segments.
//!
//! A segment is a `rows × cols` block of real values. It is mapped affinely
//! from `[min, max]` onto 8-bit samples, edge-padded to whole 8×8 blocks and
//! encoded as a baseline greyscale JPEG whose luminance quantisation table is
//! the standard one scaled by `quality` (libjpeg scaling). Metadata layout:
//! `rows u32 | cols u32 | quality u8 | min f64 | max f64`.

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};

use super::message::{CodecTag, QuantizedMessage, Reader};
use super::CodecError;

const METADATA_BYTES: usize = 25;

pub fn jpeg_encode(
    values: &[f64],
    block_shape: (usize, usize),
    quality: u8,
    segment_index: u16,
) -> Result<QuantizedMessage, CodecError> {
    let (rows, cols) = block_shape;
    if rows * cols != values.len() || values.is_empty() {
        return Err(CodecError::InvalidInput(format!(
            "block {rows}x{cols} does not hold {} values",
            values.len()
        )));
    }
    if !(1..=100).contains(&quality) {
        return Err(CodecError::InvalidInput(format!(
            "quality {quality} outside 1..=100"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::InvalidInput("non-finite value".into()));
    }

    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });

    let mut metadata = Vec::with_capacity(METADATA_BYTES);
    metadata.extend_from_slice(&(rows as u32).to_le_bytes());
    metadata.extend_from_slice(&(cols as u32).to_le_bytes());
    metadata.push(quality);
    metadata.extend_from_slice(&min.to_le_bytes());
    metadata.extend_from_slice(&max.to_le_bytes());

    let payload = if min == max {
        Vec::new()
    } else {
        let scale = 255.0 / (max - min);
        let (prow, pcol) = (rows.next_multiple_of(8), cols.next_multiple_of(8));
        let mut samples = Vec::with_capacity(prow * pcol);
        for r in 0..prow {
            let src = &values[r.min(rows - 1) * cols..][..cols];
            samples.extend(src.iter().map(|&v| ((v - min) * scale).round() as u8));
            let edge = *samples.last().unwrap();
            samples.extend(std::iter::repeat_n(edge, pcol - cols));
        }
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality)
            .encode(&samples, pcol as u32, prow as u32, ExtendedColorType::L8)
            .map_err(|e| CodecError::Jpeg(e.to_string()))?;
        out
    };

    Ok(QuantizedMessage {
        codec: CodecTag::Jpeg,
        segment_index,
        decoded_length: values.len() as u32,
        metadata,
        payload,
    })
}

pub fn jpeg_decode(msg: &QuantizedMessage) -> Result<Vec<f64>, CodecError> {
    if msg.codec != CodecTag::Jpeg {
        return Err(CodecError::WrongCodec {
            expected: CodecTag::Jpeg,
            found: msg.codec,
        });
    }
    let mut r = Reader::new(&msg.metadata);
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let _quality = r.u8()?;
    let min = r.f64()?;
    let max = r.f64()?;
    r.finish()?;
    if rows * cols != msg.decoded_length as usize {
        return Err(CodecError::Malformed(format!(
            "block {rows}x{cols} disagrees with decoded length {}",
            msg.decoded_length
        )));
    }
    if !(min.is_finite() && max.is_finite() && min <= max) {
        return Err(CodecError::Malformed(format!("invalid range [{min}, {max}]")));
    }

    if min == max {
        if !msg.payload.is_empty() {
            return Err(CodecError::Malformed("constant block carries a payload".into()));
        }
        return Ok(vec![min; rows * cols]);
    }

    let img = image::load_from_memory_with_format(&msg.payload, ImageFormat::Jpeg)
        .map_err(|e| CodecError::Jpeg(e.to_string()))?
        .into_luma8();
    let pcol = img.width() as usize;
    if pcol != cols.next_multiple_of(8) || img.height() as usize != rows.next_multiple_of(8) {
        return Err(CodecError::Malformed(format!(
            "decoded {}x{} image for a {rows}x{cols} block",
            img.height(),
            pcol
        )));
    }
    let step = (max - min) / 255.0;
    let samples = img.as_raw();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(
            samples[r * pcol..r * pcol + cols]
                .iter()
                .map(|&s| min + s as f64 * step),
        );
    }
    Ok(out)
}
