//! CRC-32 engine and per-block CRC tables.
//!
//! The variant is CRC-32/MPEG-2: polynomial `0x04C11DB7`, initial value
//! `0xFFFFFFFF`, bytes fed most-significant bit first, no reflection and no
//! final XOR. This matches the STM32 hardware CRC unit when it is fed whole
//! words, but works byte-wise so partial trailing blocks need no padding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CRC32_POLY: u32 = 0x04C1_1DB7;
pub const CRC32_INIT: u32 = 0xFFFF_FFFF;

/// Logical block size used for delta comparison and the stored CRC table.
pub const DEFAULT_BLOCK_SIZE: usize = 1024;

const CRC_TABLE: [u32; 256] = build_table();

const fn build_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = (i as u32) << 24;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 0x8000_0000 != 0 { (c << 1) ^ CRC32_POLY } else { c << 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// Incremental CRC-32/MPEG-2 state.
#[derive(Debug, Clone, Copy)]
pub struct Crc32 {
    value: u32,
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc32 {
    pub fn new() -> Self {
        Crc32 { value: CRC32_INIT }
    }

    pub fn update(&mut self, data: &[u8]) {
        for &b in data {
            let idx = ((self.value >> 24) ^ b as u32) & 0xFF;
            self.value = (self.value << 8) ^ CRC_TABLE[idx as usize];
        }
    }

    pub fn finish(&self) -> u32 {
        self.value
    }
}

/// CRC-32/MPEG-2 of `data`. The empty input yields the initial value.
pub fn crc32(data: &[u8]) -> u32 {
    let mut c = Crc32::new();
    c.update(data);
    c.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrcOutcome {
    Succeeded,
    Failed,
}

pub fn crc_compare(calculated: u32, stored: u32) -> CrcOutcome {
    if calculated == stored {
        CrcOutcome::Succeeded
    } else {
        CrcOutcome::Failed
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("image is empty")]
    EmptyImage,
    #[error("block size must be positive")]
    ZeroBlockSize,
    #[error("block table truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("block table has {0} entries, more than a 16-bit count can hold")]
    TooManyBlocks(usize),
}

/// One CRC per fixed-size block of an image. The final block may be short
/// and is hashed at its actual length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCrcTable {
    pub block_size: usize,
    pub image_length: usize,
    pub entries: Vec<u32>,
}

impl BlockCrcTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serialized size: 16-bit count plus one 32-bit word per entry.
    pub fn encoded_len(&self) -> usize {
        2 + 4 * self.entries.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, IntegrityError> {
        let count = u16::try_from(self.entries.len()).map_err(|_| IntegrityError::TooManyBlocks(self.entries.len()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a table. The wire form carries only the entries, so the
    /// caller supplies the block size and image length it belongs to.
    /// Returns the table and the number of bytes consumed.
    pub fn decode(bytes: &[u8], block_size: usize, image_length: usize) -> Result<(Self, usize), IntegrityError> {
        if bytes.len() < 2 {
            return Err(IntegrityError::Truncated { needed: 2, available: bytes.len() });
        }
        let count = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let needed = 2 + 4 * count;
        if bytes.len() < needed {
            return Err(IntegrityError::Truncated { needed, available: bytes.len() });
        }
        let entries = bytes[2..needed].chunks_exact(4).map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect();
        Ok((BlockCrcTable { block_size, image_length, entries }, needed))
    }
}

/// Per-block CRCs of `image`.
pub fn block_crcs(image: &[u8], block_size: usize) -> Result<BlockCrcTable, IntegrityError> {
    if block_size == 0 {
        return Err(IntegrityError::ZeroBlockSize);
    }
    if image.is_empty() {
        return Err(IntegrityError::EmptyImage);
    }
    Ok(BlockCrcTable { block_size, image_length: image.len(), entries: image.chunks(block_size).map(crc32).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_initial_value() {
        assert_eq!(crc32(b""), 0xFFFF_FFFF);
    }

    #[test]
    fn check_value() {
        assert_eq!(crc32(b"123456789"), 0x0376_E6E7);
    }

    #[test]
    fn incremental_matches_one_shot() {
        let data: Vec<u8> = (0..=255u8).cycle().take(3000).collect();
        let mut c = Crc32::new();
        for chunk in data.chunks(97) {
            c.update(chunk);
        }
        assert_eq!(c.finish(), crc32(&data));
    }

    #[test]
    fn every_single_bit_flip_changes_crc() {
        let base = [0x12u8, 0x34, 0x56, 0x78];
        let reference = crc32(&base);
        assert_eq!(crc32(&base), reference);
        for bit in 0..32 {
            let mut flipped = base;
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(crc32(&flipped), reference, "bit {bit}");
        }
    }

    #[test]
    fn block_counts() {
        assert_eq!(block_crcs(&[0u8; 2048], 1024).unwrap().len(), 2);
        assert_eq!(block_crcs(&vec![0u8; 128 * 1024], 1024).unwrap().len(), 128);
        assert_eq!(block_crcs(&[], 1024), Err(IntegrityError::EmptyImage));
        assert_eq!(block_crcs(&[1], 0), Err(IntegrityError::ZeroBlockSize));
    }

    #[test]
    fn identical_blocks_share_a_crc() {
        let t = block_crcs(&[0u8; 2048], 1024).unwrap();
        assert_eq!(t.entries[0], t.entries[1]);
    }

    #[test]
    fn trailing_partial_block_hashed_at_its_length() {
        let image: Vec<u8> = (0..1500u32).map(|i| (i * 7 + 3) as u8).collect();
        let t = block_crcs(&image, 1024).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.entries[1], crc32(&image[1024..]));
        assert_eq!(image[1024..].len(), 476);
    }

    #[test]
    fn compare() {
        assert_eq!(crc_compare(5, 5), CrcOutcome::Succeeded);
        assert_eq!(crc_compare(5, 6), CrcOutcome::Failed);
    }

    #[test]
    fn table_wire_format() {
        let t = BlockCrcTable { block_size: 1024, image_length: 2048, entries: vec![0x0102_0304, 0xAABB_CCDD] };
        let bytes = t.encode().unwrap();
        assert_eq!(bytes, [2, 0, 4, 3, 2, 1, 0xDD, 0xCC, 0xBB, 0xAA]);
        let (back, used) = BlockCrcTable::decode(&bytes, 1024, 2048).unwrap();
        assert_eq!(used, 10);
        assert_eq!(back, t);
        assert!(matches!(BlockCrcTable::decode(&bytes[..7], 1024, 2048), Err(IntegrityError::Truncated { .. })));
    }
}
