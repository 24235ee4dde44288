//! Scalar K-means quantizer.
//!
//! Clustering runs on the sorted copy of the input, where every cluster is a
//! contiguous run and Lloyd's assignment step reduces to locating the
//! midpoints between neighbouring centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::message::{CodecTag, QuantizedMessage, Reader};
use super::CodecError;

pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// Independent k-means++ seedings per call; the lowest-distortion one wins.
pub const RESTARTS: u64 = 64;

/// Result of clustering a scalar vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Strictly increasing centres.
    pub centers: Vec<f64>,
    pub sse: f64,
}

/// Clusters `values` into at most `k` groups.
///
/// When the input has no more than `k` distinct values the codebook is exactly
/// those values and the distortion is zero.
pub fn cluster(values: &[f64], k: usize, seed: u64) -> Clustering {
    assert!(k >= 1 && !values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= k {
        return Clustering {
            centers: distinct,
            sse: 0.0,
        };
    }

    let prefix = Prefix::new(&sorted);
    let mut best: Option<Clustering> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9)));
        let init = kmeanspp(&sorted, k, &mut rng);
        let run = refine(&sorted, &prefix, lloyd(&sorted, &prefix, init));
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    best.unwrap()
}

struct Prefix {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Prefix {
    fn new(sorted: &[f64]) -> Self {
        let mut sum = Vec::with_capacity(sorted.len() + 1);
        let mut sum_sq = Vec::with_capacity(sorted.len() + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &x in sorted {
            sum.push(sum.last().unwrap() + x);
            sum_sq.push(sum_sq.last().unwrap() + x * x);
        }
        Prefix { sum, sum_sq }
    }

    fn mean(&self, lo: usize, hi: usize) -> f64 {
        (self.sum[hi] - self.sum[lo]) / (hi - lo) as f64
    }

    fn sse(&self, lo: usize, hi: usize, c: f64) -> f64 {
        let n = (hi - lo) as f64;
        let s = self.sum[hi] - self.sum[lo];
        let s2 = self.sum_sq[hi] - self.sum_sq[lo];
        (s2 - 2.0 * c * s + n * c * c).max(0.0)
    }
}

fn kmeanspp(sorted: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k);
    centers.push(sorted[rng.random_range(0..sorted.len())]);
    let mut d2: Vec<f64> = sorted.iter().map(|&x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = sorted.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        let c = sorted[pick];
        centers.push(c);
        for (d, &x) in d2.iter_mut().zip(sorted) {
            *d = d.min((x - c).powi(2));
        }
    }
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    centers
}

/// Cluster boundaries in `sorted` for the given increasing centres.
fn assign(sorted: &[f64], centers: &[f64], bounds: &mut Vec<usize>) {
    bounds.clear();
    bounds.push(0);
    for pair in centers.windows(2) {
        let mid = 0.5 * (pair[0] + pair[1]);
        bounds.push(sorted.partition_point(|&x| x < mid));
    }
    bounds.push(sorted.len());
}

fn lloyd(sorted: &[f64], prefix: &Prefix, mut centers: Vec<f64>) -> Clustering {
    let mut bounds = Vec::with_capacity(centers.len() + 1);
    let mut previous = Vec::new();
    assign(sorted, &centers, &mut bounds);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        for (c, w) in centers.iter_mut().zip(bounds.windows(2)) {
            if w[1] > w[0] {
                *c = prefix.mean(w[0], w[1]);
            }
        }
        std::mem::swap(&mut previous, &mut bounds);
        assign(sorted, &centers, &mut bounds);
        if bounds == previous {
            break;
        }
    }
    // Drop centres that ended with no members.
    let mut kept = Vec::with_capacity(centers.len());
    let mut sse = 0.0;
    for w in bounds.windows(2) {
        if w[1] > w[0] {
            let mean = prefix.mean(w[0], w[1]);
            sse += prefix.sse(w[0], w[1], mean);
            kept.push(mean);
        }
    }
    kept.dedup();
    Clustering { centers: kept, sse }
}

/// Hartigan single-point transfers across cluster boundaries, applied to a
/// Lloyd fixed point. Each accepted move strictly lowers the distortion.
fn refine(sorted: &[f64], prefix: &Prefix, start: Clustering) -> Clustering {
    let mut bounds = Vec::with_capacity(start.centers.len() + 1);
    assign(sorted, &start.centers, &mut bounds);
    let k = bounds.len() - 1;
    loop {
        let mut moved = false;
        for i in 0..k.saturating_sub(1) {
            loop {
                let (lo, mid, hi) = (bounds[i], bounds[i + 1], bounds[i + 2]);
                let (na, nb) = (mid - lo, hi - mid);
                // Move the last element of the left cluster right.
                if na > 1 {
                    let x = sorted[mid - 1];
                    let (ma, mb) = (prefix.mean(lo, mid), if nb > 0 { prefix.mean(mid, hi) } else { x });
                    let gain = na as f64 / (na as f64 - 1.0) * (x - ma).powi(2)
                        - nb as f64 / (nb as f64 + 1.0) * (x - mb).powi(2);
                    if gain > 1e-12 * (1.0 + x * x) {
                        bounds[i + 1] -= 1;
                        moved = true;
                        continue;
                    }
                }
                // Move the first element of the right cluster left.
                if nb > 1 {
                    let x = sorted[mid];
                    let (ma, mb) = (if na > 0 { prefix.mean(lo, mid) } else { x }, prefix.mean(mid, hi));
                    let gain = nb as f64 / (nb as f64 - 1.0) * (x - mb).powi(2)
                        - na as f64 / (na as f64 + 1.0) * (x - ma).powi(2);
                    if gain > 1e-12 * (1.0 + x * x) {
                        bounds[i + 1] += 1;
                        moved = true;
                        continue;
                    }
                }
                break;
            }
        }
        if !moved {
            break;
        }
    }
    let mut centers = Vec::with_capacity(k);
    let mut sse = 0.0;
    for w in bounds.windows(2) {
        if w[1] > w[0] {
            let mean = prefix.mean(w[0], w[1]);
            sse += prefix.sse(w[0], w[1], mean);
            centers.push(mean);
        }
    }
    Clustering { centers, sse }
}

/// Bits needed to index `n` codebook entries.
pub fn code_bits(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

pub fn kmeans_quantize(
    values: &[f64],
    k: usize,
    seed: u64,
    segment_index: u16,
) -> Result<QuantizedMessage, CodecError> {
    if values.is_empty() {
        return Err(CodecError::InvalidInput("empty vector".into()));
    }
    if k == 0 {
        return Err(CodecError::InvalidInput("k must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::InvalidInput("non-finite value".into()));
    }

    let clustering = cluster(values, k, seed);
    let mut book: Vec<f32> = clustering.centers.iter().map(|&c| c as f32).collect();
    book.dedup();
    let book64: Vec<f64> = book.iter().map(|&c| c as f64).collect();
    let bits = code_bits(book.len());

    let mut metadata = Vec::with_capacity(5 + 4 * book.len());
    metadata.extend_from_slice(&(book.len() as u32).to_le_bytes());
    metadata.push(bits as u8);
    for c in &book {
        metadata.extend_from_slice(&c.to_le_bytes());
    }

    let mut packer = BitPacker::new(values.len(), bits);
    for &v in values {
        packer.push(nearest(&book64, v) as u32);
    }

    Ok(QuantizedMessage {
        codec: CodecTag::KMeans,
        segment_index,
        decoded_length: values.len() as u32,
        metadata,
        payload: packer.finish(),
    })
}

pub fn kmeans_dequantize(msg: &QuantizedMessage) -> Result<Vec<f64>, CodecError> {
    if msg.codec != CodecTag::KMeans {
        return Err(CodecError::WrongCodec {
            expected: CodecTag::KMeans,
            found: msg.codec,
        });
    }
    let mut r = Reader::new(&msg.metadata);
    let n_centers = r.u32()? as usize;
    let bits = r.u8()? as u32;
    if n_centers == 0 || bits != code_bits(n_centers) {
        return Err(CodecError::Malformed(format!(
            "codebook of {n_centers} centres with {bits}-bit codes"
        )));
    }
    let book = (0..n_centers)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>, _>>()?;
    r.finish()?;

    let len = msg.decoded_length as usize;
    let expected = (len * bits as usize).div_ceil(8);
    if msg.payload.len() != expected {
        return Err(CodecError::Malformed(format!(
            "payload of {} bytes, expected {expected}",
            msg.payload.len()
        )));
    }
    let mut out = Vec::with_capacity(len);
    for (i, code) in BitUnpacker::new(&msg.payload, bits).take(len).enumerate() {
        let code = code as usize;
        if code >= n_centers {
            return Err(CodecError::CorruptCode {
                position: i,
                code,
                codebook: n_centers,
            });
        }
        out.push(book[code]);
    }
    Ok(out)
}

fn nearest(book: &[f64], v: f64) -> usize {
    let i = book.partition_point(|&c| c < v);
    if i == 0 {
        0
    } else if i == book.len() {
        book.len() - 1
    } else if v - book[i - 1] <= book[i] - v {
        i - 1
    } else {
        i
    }
}

/// LSB-first fixed-width bit packing.
struct BitPacker {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
    bits: u32,
}

impl BitPacker {
    fn new(count: usize, bits: u32) -> Self {
        BitPacker {
            out: Vec::with_capacity((count * bits as usize).div_ceil(8)),
            acc: 0,
            filled: 0,
            bits,
        }
    }

    fn push(&mut self, code: u32) {
        if self.bits == 0 {
            return;
        }
        self.acc |= (code as u64) << self.filled;
        self.filled += self.bits;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitUnpacker<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
    bits: u32,
}

impl<'a> BitUnpacker<'a> {
    fn new(bytes: &'a [u8], bits: u32) -> Self {
        BitUnpacker {
            bytes,
            pos: 0,
            acc: 0,
            filled: 0,
            bits,
        }
    }
}

impl Iterator for BitUnpacker<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        if self.bits == 0 {
            return Some(0);
        }
        while self.filled < self.bits {
            let byte = *self.bytes.get(self.pos)?;
            self.acc |= (byte as u64) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let code = (self.acc & ((1u64 << self.bits) - 1)) as u32;
        self.acc >>= self.bits;
        self.filled -= self.bits;
        Some(code)
    }
}
