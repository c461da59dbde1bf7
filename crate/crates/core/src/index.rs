//! Packed binary codes and exhaustive Hamming-distance search.

use std::io::{self, Write};

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::net::{binarize, HashNet};
use crate::Modality;

/// Bit-packed codes, `ceil(bits / 8)` bytes per row. Bit `i` of a row lives
/// in byte `i / 8` at position `i % 8`; padding bits past `bits` are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    rows: usize,
    bits: usize,
    data: Vec<u8>,
}

impl PackedCodes {
    /// Packs rows of 0/1 values (any nonzero value counts as 1).
    pub fn pack(bit_rows: &[Vec<u8>]) -> Result<Self> {
        let bits = bit_rows.first().map_or(0, Vec::len);
        if bits == 0 {
            return Err(Error::invalid("cannot pack empty codes"));
        }
        let stride = bits.div_ceil(8);
        let mut data = vec![0u8; bit_rows.len() * stride];
        for (r, row) in bit_rows.iter().enumerate() {
            if row.len() != bits {
                return Err(Error::DimensionMismatch {
                    expected: bits,
                    actual: row.len(),
                    context: "ragged code rows",
                });
            }
            let out = &mut data[r * stride..(r + 1) * stride];
            for (i, &b) in row.iter().enumerate() {
                if b != 0 {
                    out[i / 8] |= 1 << (i % 8);
                }
            }
        }
        Ok(Self {
            rows: bit_rows.len(),
            bits,
            data,
        })
    }

    /// Wraps an already packed buffer, checking its length and padding.
    pub fn from_bytes(rows: usize, bits: usize, data: Vec<u8>) -> Result<Self> {
        let stride = bits.div_ceil(8);
        if bits == 0 || data.len() != rows * stride {
            return Err(Error::invalid(format!(
                "{} bytes do not hold {rows} rows of {bits} bits",
                data.len()
            )));
        }
        let pad_mask = last_byte_mask(bits);
        if let Some(r) = (0..rows).find(|r| data[r * stride + stride - 1] & !pad_mask != 0) {
            return Err(Error::invalid(format!("row {r} has nonzero padding bits")));
        }
        Ok(Self { rows, bits, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn bytes_per_row(&self) -> usize {
        self.bits.div_ceil(8)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let stride = self.bytes_per_row();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn unpack_row(&self, i: usize) -> Vec<u8> {
        let row = self.row(i);
        (0..self.bits).map(|b| (row[b / 8] >> (b % 8)) & 1).collect()
    }

    pub fn unpack(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|i| self.unpack_row(i)).collect()
    }
}

fn last_byte_mask(bits: usize) -> u8 {
    match bits % 8 {
        0 => 0xff,
        r => (1u8 << r) - 1,
    }
}

/// Number of differing bits among the first `bits` positions of two packed rows.
pub fn hamming_distance(a: &[u8], b: &[u8], bits: usize) -> Result<u32> {
    let stride = bits.div_ceil(8);
    if a.len() != stride || b.len() != stride {
        return Err(Error::DimensionMismatch {
            expected: stride,
            actual: if a.len() != stride { a.len() } else { b.len() },
            context: "packed row length",
        });
    }
    Ok(hamming_unchecked(a, b, bits))
}

#[inline]
fn hamming_unchecked(a: &[u8], b: &[u8], bits: usize) -> u32 {
    let mut a_words = a.chunks_exact(8);
    let mut b_words = b.chunks_exact(8);
    let mut dist = 0;
    for (x, y) in (&mut a_words).zip(&mut b_words) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        dist += (x ^ y).count_ones();
    }
    for (x, y) in a_words.remainder().iter().zip(b_words.remainder()) {
        dist += (x ^ y).count_ones();
    }
    // discount anything set past `bits` in the final byte
    if let (Some(x), Some(y)) = (a.last(), b.last()) {
        dist -= ((x ^ y) & !last_byte_mask(bits)).count_ones();
    }
    dist
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hit {
    pub index: usize,
    pub distance: u32,
}

/// Results ordered by `(distance, index)` ascending.
pub type RankedList = Vec<Hit>;

/// Binary codes of every row of `features` under the given pathway.
pub fn encode_corpus(net: &HashNet, features: &FeatureMatrix, modality: Modality) -> Result<PackedCodes> {
    let relaxed = net.encode(modality, features)?;
    let bit_rows: Vec<Vec<u8>> = relaxed
        .rows()
        .into_iter()
        .map(|h| binarize(h.as_slice().expect("standard layout")))
        .collect();
    PackedCodes::pack(&bit_rows)
}

/// Exhaustive scan of `corpus`, ranked by Hamming distance with ties broken
/// by ascending corpus index, truncated to `topk` if given.
pub fn search(corpus: &PackedCodes, query: &[u8], topk: Option<usize>) -> Result<RankedList> {
    if query.len() != corpus.bytes_per_row() {
        return Err(Error::DimensionMismatch {
            expected: corpus.bytes_per_row(),
            actual: query.len(),
            context: "query code bytes vs corpus",
        });
    }
    let bits = corpus.bits();
    // distances are bounded by `bits`, so a bucket pass gives the
    // (distance, index) order directly
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bits + 1];
    for i in 0..corpus.rows() {
        let d = hamming_unchecked(corpus.row(i), query, bits);
        buckets[d as usize].push(i);
    }
    let limit = topk.unwrap_or(corpus.rows()).min(corpus.rows());
    let mut out = Vec::with_capacity(limit);
    for (distance, bucket) in buckets.into_iter().enumerate() {
        for index in bucket {
            if out.len() == limit {
                return Ok(out);
            }
            out.push(Hit {
                index,
                distance: distance as u32,
            });
        }
    }
    Ok(out)
}

/// Writes `query_index,rank,db_index,distance` rows (1-based rank), with a header.
pub fn write_results_csv<W: Write>(mut out: W, results: &[(usize, RankedList)]) -> io::Result<()> {
    writeln!(out, "query_index,rank,db_index,distance")?;
    for (q, ranked) in results {
        for (rank, hit) in ranked.iter().enumerate() {
            writeln!(out, "{q},{},{},{}", rank + 1, hit.index, hit.distance)?;
        }
    }
    Ok(())
}
