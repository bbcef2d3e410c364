//! Block-granular delta packages: build, encode/decode, apply with CRC
//! verification, and sector-granular programming of the result.
//!
//! Package layout, all little-endian:
//!
//! ```text
//! "FDP1" | version u8 | block_size u32 | new_len u32 | new_crc u32 | entry_count u16
//! per entry: block_index u16 | tuple_count u16 | new_block_crc u32
//! per tuple: offset u16 | length u16 | data[length]
//! ```
//!
//! Transfer savings are per 1 KiB block, but flash can only be erased per
//! sector, so [`program_delta`] rewrites every sector that holds a changed
//! block from the fully staged new image.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{FlashDevice, FlashError, FlashStats, Region, ERASED};
use crate::integrity::{crc32, DEFAULT_BLOCK_SIZE};
use crate::nvstore::{AppMetadata, MetadataError, METADATA_SIZE};

pub const MAGIC: [u8; 4] = *b"FDP1";
pub const VERSION: u8 = 1;
pub const DEFAULT_GAP_MERGE: usize = 8;
pub const HEADER_LEN: usize = 19;
const ENTRY_HEADER_LEN: usize = 8;
const TUPLE_HEADER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeltaError {
    #[error("image is empty")]
    EmptyImage,
    #[error("block size {0} must be in 1..=65535")]
    InvalidBlockSize(usize),
    #[error("image of {0} bytes is too long for a package")]
    ImageTooLong(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported package version {0}")]
    UnsupportedVersion(u8),
    #[error("package truncated")]
    Truncated,
    #[error("{0} trailing bytes after package")]
    TrailingBytes(usize),
    #[error("invalid package: {0}")]
    InvalidPackage(String),
    #[error("block {0} CRC mismatch after patching")]
    BlockCrcMismatch(u16),
    #[error("image CRC mismatch: package {expected:#010x}, staged {actual:#010x}")]
    ImageCrcMismatch { expected: u32, actual: u32 },
    #[error("image of {len} bytes does not fit the {capacity}-byte region")]
    ImageTooLarge { len: usize, capacity: usize },
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaTuple {
    pub offset: u16,
    pub data: Vec<u8>,
}

impl DeltaTuple {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub block_index: u16,
    pub new_block_crc: u32,
    pub tuples: Vec<DeltaTuple>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaPackage {
    pub block_size: u32,
    pub new_image_length: u32,
    pub new_image_crc: u32,
    pub entries: Vec<DeltaEntry>,
}

/// Summary printed by the CLI and used by the campaign comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub blocks_changed: usize,
    pub tuples: usize,
    pub payload_bytes: usize,
    pub package_bytes: usize,
    pub full_image_bytes: usize,
    pub reduction_ratio: f64,
}

impl DeltaPackage {
    pub fn block_count(&self) -> usize {
        (self.new_image_length as usize).div_ceil(self.block_size as usize)
    }

    pub fn changed_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.block_index as usize)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|e| ENTRY_HEADER_LEN + e.tuples.iter().map(|t| TUPLE_HEADER_LEN + t.len()).sum::<usize>())
                .sum::<usize>()
    }

    pub fn stats(&self) -> DeltaStats {
        let package_bytes = self.encoded_len();
        let full = self.new_image_length as usize;
        DeltaStats {
            blocks_changed: self.entries.len(),
            tuples: self.entries.iter().map(|e| e.tuples.len()).sum(),
            payload_bytes: self.entries.iter().flat_map(|e| &e.tuples).map(DeltaTuple::len).sum(),
            package_bytes,
            full_image_bytes: full,
            reduction_ratio: if full == 0 { 0.0 } else { 1.0 - package_bytes as f64 / full as f64 },
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.block_size.to_le_bytes());
        out.extend_from_slice(&self.new_image_length.to_le_bytes());
        out.extend_from_slice(&self.new_image_crc.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.block_index.to_le_bytes());
            out.extend_from_slice(&(e.tuples.len() as u16).to_le_bytes());
            out.extend_from_slice(&e.new_block_crc.to_le_bytes());
            for t in &e.tuples {
                out.extend_from_slice(&t.offset.to_le_bytes());
                out.extend_from_slice(&(t.data.len() as u16).to_le_bytes());
                out.extend_from_slice(&t.data);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DeltaError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DeltaError::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(DeltaError::UnsupportedVersion(version));
        }
        let block_size = r.u32()?;
        let new_image_length = r.u32()?;
        let new_image_crc = r.u32()?;
        let entry_count = r.u16()?;
        let mut entries = Vec::with_capacity(entry_count as usize);
        for _ in 0..entry_count {
            let block_index = r.u16()?;
            let tuple_count = r.u16()?;
            let new_block_crc = r.u32()?;
            let mut tuples = Vec::with_capacity(tuple_count as usize);
            for _ in 0..tuple_count {
                let offset = r.u16()?;
                let len = r.u16()? as usize;
                tuples.push(DeltaTuple { offset, data: r.take(len)?.to_vec() });
            }
            entries.push(DeltaEntry { block_index, new_block_crc, tuples });
        }
        if r.pos != bytes.len() {
            return Err(DeltaError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(DeltaPackage { block_size, new_image_length, new_image_crc, entries })
    }

    /// Checks ordering, ranges and tuple shapes against the header.
    pub fn validate(&self) -> Result<(), DeltaError> {
        let bs = self.block_size as usize;
        if bs == 0 || bs > u16::MAX as usize {
            return Err(DeltaError::InvalidBlockSize(bs));
        }
        let blocks = self.block_count();
        let mut prev: Option<u16> = None;
        for e in &self.entries {
            if prev.is_some_and(|p| p >= e.block_index) {
                return Err(DeltaError::InvalidPackage("entries not strictly ascending".into()));
            }
            prev = Some(e.block_index);
            let idx = e.block_index as usize;
            if idx >= blocks {
                return Err(DeltaError::InvalidPackage(format!("block {idx} beyond image")));
            }
            let this_len = bs.min(self.new_image_length as usize - idx * bs);
            let mut end = 0usize;
            for t in &e.tuples {
                let off = t.offset as usize;
                if t.data.is_empty() || off < end || off + t.data.len() > this_len {
                    return Err(DeltaError::InvalidPackage(format!("bad tuple in block {idx}")));
                }
                end = off + t.data.len();
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DeltaError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(DeltaError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DeltaError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DeltaError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// `image` resized to `len`, padding with erased bytes.
pub fn pad_to(image: &[u8], len: usize) -> Vec<u8> {
    let mut v = image[..image.len().min(len)].to_vec();
    v.resize(len, ERASED);
    v
}

/// Differing byte runs between two equal-length slices, merging runs
/// separated by fewer than `gap_merge` equal bytes.
fn diff_runs(old: &[u8], new: &[u8], gap_merge: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < new.len() {
        if old[i] == new[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < new.len() && old[i] != new[i] {
            i += 1;
        }
        match runs.last_mut() {
            Some((s, e)) if start - *e < gap_merge => *e = i.max(*s),
            _ => runs.push((start, i)),
        }
    }
    runs
}

pub fn build_delta(old: &[u8], new: &[u8], block_size: usize, gap_merge: usize) -> Result<DeltaPackage, DeltaError> {
    if old.is_empty() || new.is_empty() {
        return Err(DeltaError::EmptyImage);
    }
    if block_size == 0 || block_size > u16::MAX as usize {
        return Err(DeltaError::InvalidBlockSize(block_size));
    }
    if new.len() > u32::MAX as usize || new.len().div_ceil(block_size) > u16::MAX as usize + 1 {
        return Err(DeltaError::ImageTooLong(new.len()));
    }
    let base = pad_to(old, new.len());
    let mut entries = Vec::new();
    for (idx, (ob, nb)) in base.chunks(block_size).zip(new.chunks(block_size)).enumerate() {
        let new_block_crc = crc32(nb);
        if crc32(ob) == new_block_crc {
            continue;
        }
        let tuples = diff_runs(ob, nb, gap_merge)
            .into_iter()
            .map(|(s, e)| DeltaTuple { offset: s as u16, data: nb[s..e].to_vec() })
            .collect();
        entries.push(DeltaEntry { block_index: idx as u16, new_block_crc, tuples });
    }
    Ok(DeltaPackage {
        block_size: block_size as u32,
        new_image_length: new.len() as u32,
        new_image_crc: crc32(new),
        entries,
    })
}

/// Default block size and gap merge.
pub fn build_delta_default(old: &[u8], new: &[u8]) -> Result<DeltaPackage, DeltaError> {
    build_delta(old, new, DEFAULT_BLOCK_SIZE, DEFAULT_GAP_MERGE)
}

/// Stages `base` at the new length, patches each changed block and
/// verifies block and image CRCs.
pub fn apply_delta(base: &[u8], pkg: &DeltaPackage) -> Result<Vec<u8>, DeltaError> {
    if base.is_empty() {
        return Err(DeltaError::EmptyImage);
    }
    pkg.validate()?;
    let bs = pkg.block_size as usize;
    let mut staged = pad_to(base, pkg.new_image_length as usize);
    for e in &pkg.entries {
        let start = e.block_index as usize * bs;
        let end = (start + bs).min(staged.len());
        let block = &mut staged[start..end];
        for t in &e.tuples {
            let off = t.offset as usize;
            block[off..off + t.data.len()].copy_from_slice(&t.data);
        }
        if crc32(block) != e.new_block_crc {
            return Err(DeltaError::BlockCrcMismatch(e.block_index));
        }
    }
    let actual = crc32(&staged);
    if actual != pkg.new_image_crc {
        return Err(DeltaError::ImageCrcMismatch { expected: pkg.new_image_crc, actual });
    }
    Ok(staged)
}

/// The trailing metadata area of an application region.
pub fn metadata_area(region: Region) -> Region {
    Region { start: region.end() - METADATA_SIZE, size: METADATA_SIZE }
}

/// Region sectors holding at least one changed block of `pkg`.
pub fn changed_sectors(device: &FlashDevice, region: Region, pkg: &DeltaPackage) -> Vec<u8> {
    let bs = pkg.block_size as usize;
    let len = pkg.new_image_length as usize;
    let mut set = BTreeSet::new();
    for idx in pkg.changed_blocks() {
        let start = idx * bs;
        let blen = bs.min(len - start);
        set.extend(device.layout().sectors_touching(region.start + start, blen));
    }
    set.into_iter().collect()
}

fn trimmed(bytes: &[u8]) -> Option<(usize, usize)> {
    let first = bytes.iter().position(|&b| b != ERASED)?;
    let last = bytes.iter().rposition(|&b| b != ERASED)?;
    Some((first, last + 1))
}

/// Erases and rewrites every sector in `sectors`: image bytes come from
/// `staged`, the rest of each sector keeps its prior contents, except the
/// metadata area which is left erased when `clear_metadata` is set.
pub fn rewrite_sectors(
    device: &mut FlashDevice,
    region: Region,
    staged: &[u8],
    sectors: &[u8],
    clear_metadata: bool,
) -> Result<FlashStats, DeltaError> {
    let capacity = region.size - METADATA_SIZE;
    if staged.len() > capacity {
        return Err(DeltaError::ImageTooLarge { len: staged.len(), capacity });
    }
    let meta = metadata_area(region);
    let mut stats = FlashStats::default();
    for &idx in sectors {
        let s = *device.layout().sector(idx).ok_or(FlashError::SectorOutOfRange { start: idx, count: 1 })?;
        let mut content = device.read_slice(s.start, s.size)?.to_vec();
        let img_lo = region.start.max(s.start);
        let img_hi = (region.start + staged.len()).min(s.end());
        if img_lo < img_hi {
            content[img_lo - s.start..img_hi - s.start]
                .copy_from_slice(&staged[img_lo - region.start..img_hi - region.start]);
        }
        if clear_metadata && s.contains(meta.start) {
            content[meta.start - s.start..meta.end() - s.start].fill(ERASED);
        }
        stats.simulated_duration += device.erase_sectors(idx, 1)?;
        stats.sectors_erased += 1;
        if let Some((lo, hi)) = trimmed(&content) {
            stats.simulated_duration += device.program(s.start + lo, &content[lo..hi])?;
            stats.bytes_programmed += (hi - lo) as u64;
        }
    }
    Ok(stats)
}

/// Rewrites the sectors that hold changed blocks. When the metadata for
/// the staged image differs from what is stored and the area is not blank,
/// the metadata sector is rewritten too with its metadata area left
/// erased, ready for [`commit_metadata`].
pub fn reprogram_changed_sectors(
    device: &mut FlashDevice,
    region: Region,
    staged: &[u8],
    pkg: &DeltaPackage,
) -> Result<FlashStats, DeltaError> {
    let mut sectors: BTreeSet<u8> = changed_sectors(device, region, pkg).into_iter().collect();
    let meta = metadata_area(region);
    let new_meta = AppMetadata::for_image(staged, pkg.block_size as usize).map_err(DeltaError::Metadata)?.encode()?;
    let current = device.read_slice(meta.start, meta.size)?;
    let meta_differs =
        current[..new_meta.len()] != new_meta[..] || current[new_meta.len()..].iter().any(|&b| b != ERASED);
    let meta_blank = current.iter().all(|&b| b == ERASED);
    if meta_differs && !meta_blank {
        if let Some(s) = device.layout().sector_containing(meta.start) {
            sectors.insert(s.index);
        }
    }
    let sectors: Vec<u8> = sectors.into_iter().collect();
    rewrite_sectors(device, region, staged, &sectors, meta_differs)
}

/// Programs metadata for `staged` into an erased metadata area. Does
/// nothing if the stored metadata already matches.
pub fn commit_metadata(
    device: &mut FlashDevice,
    region: Region,
    staged: &[u8],
    block_size: usize,
) -> Result<FlashStats, DeltaError> {
    let meta = metadata_area(region);
    let bytes = AppMetadata::for_image(staged, block_size)?.encode()?;
    if device.read_slice(meta.start, bytes.len())? == &bytes[..] {
        return Ok(FlashStats::default());
    }
    let cost = device.program(meta.start, &bytes)?;
    Ok(FlashStats { sectors_erased: 0, bytes_programmed: bytes.len() as u64, simulated_duration: cost })
}

/// Erases only the sectors with changed blocks, rewrites them from the
/// staged image, then refreshes the metadata.
pub fn program_delta(
    device: &mut FlashDevice,
    region: Region,
    staged: &[u8],
    pkg: &DeltaPackage,
) -> Result<FlashStats, DeltaError> {
    let mut stats = reprogram_changed_sectors(device, region, staged, pkg)?;
    stats += commit_metadata(device, region, staged, pkg.block_size as usize)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(len: usize, salt: u32) -> Vec<u8> {
        (0..len as u32).map(|i| (i.wrapping_mul(2_654_435_761).wrapping_add(salt) >> 13) as u8).collect()
    }

    #[test]
    fn identical_images_produce_no_entries() {
        let a = pattern(4096, 1);
        let p = build_delta_default(&a, &a).unwrap();
        assert!(p.entries.is_empty());
        assert_eq!(p.encode().len(), 19);
    }

    #[test]
    fn single_run_in_block_two() {
        let old = pattern(8192, 1);
        let mut new = old.clone();
        for b in &mut new[2048..2058] {
            *b = !*b;
        }
        let p = build_delta_default(&old, &new).unwrap();
        assert_eq!(p.entries.len(), 1);
        let e = &p.entries[0];
        assert_eq!(e.block_index, 2);
        assert_eq!(e.tuples.len(), 1);
        assert_eq!((e.tuples[0].offset, e.tuples[0].len()), (0, 10));
    }

    #[test]
    fn growth_pads_with_erased() {
        let old = pattern(1024, 3);
        let new = pattern(2048, 3);
        let p = build_delta_default(&old, &new).unwrap();
        assert_eq!(p.entries.len(), 1);
        assert_eq!(p.entries[0].block_index, 1);
        let covered: usize = p.entries[0].tuples.iter().map(DeltaTuple::len).sum();
        assert!(covered <= 1024);
        assert_eq!(apply_delta(&old, &p).unwrap(), new);
    }

    #[test]
    fn gap_merge_joins_close_runs() {
        let old = vec![0u8; 64];
        let mut new = old.clone();
        new[10] = 1;
        new[17] = 1; // 6 equal bytes between: merged
        new[40] = 1; // 22 equal bytes after: separate
        let p = build_delta(&old, &new, 64, 8).unwrap();
        let t: Vec<(u16, usize)> = p.entries[0].tuples.iter().map(|t| (t.offset, t.len())).collect();
        assert_eq!(t, vec![(10, 8), (40, 1)]);
        let p = build_delta(&old, &new, 64, 1).unwrap();
        assert_eq!(p.entries[0].tuples.len(), 3);
    }

    #[test]
    fn decode_errors() {
        let p = build_delta_default(&pattern(3000, 1), &pattern(3000, 2)).unwrap();
        let mut bytes = p.encode();
        assert_eq!(DeltaPackage::decode(&bytes[..bytes.len() - 1]), Err(DeltaError::Truncated));
        bytes.push(0);
        assert_eq!(DeltaPackage::decode(&bytes), Err(DeltaError::TrailingBytes(1)));
        bytes[0] = b'X';
        assert_eq!(DeltaPackage::decode(&bytes), Err(DeltaError::BadMagic));
        bytes[0] = b'F';
        bytes[4] = 2;
        assert_eq!(DeltaPackage::decode(&bytes), Err(DeltaError::UnsupportedVersion(2)));
    }

    #[test]
    fn corrupt_tuple_data_is_caught() {
        let old = pattern(4096, 1);
        let mut new = old.clone();
        new[3000] ^= 0xFF;
        let mut p = build_delta_default(&old, &new).unwrap();
        p.entries[0].tuples[0].data[0] ^= 1;
        assert_eq!(apply_delta(&old, &p), Err(DeltaError::BlockCrcMismatch(2)));
    }

    #[test]
    fn wrong_base_caught_by_image_crc() {
        let old = pattern(4096, 1);
        let new = old.clone();
        let p = build_delta_default(&old, &new).unwrap();
        let mut other = old.clone();
        other[0] ^= 1;
        assert!(matches!(apply_delta(&other, &p), Err(DeltaError::ImageCrcMismatch { .. })));
    }

    #[test]
    fn out_of_range_tuple_rejected() {
        let old = pattern(2048, 1);
        let mut p = build_delta_default(&old, &pattern(2048, 9)).unwrap();
        p.entries[0].tuples[0].offset = 1020;
        p.entries[0].tuples[0].data = vec![0; 10];
        assert!(matches!(apply_delta(&old, &p), Err(DeltaError::InvalidPackage(_))));
    }

    fn device_with(image: &[u8]) -> (FlashDevice, Region) {
        let mut d = FlashDevice::stm32f401();
        let region = d.layout().regions.application;
        d.unlock_default().unwrap();
        d.program(region.start, image).unwrap();
        let meta = AppMetadata::for_image(image, 1024).unwrap().encode().unwrap();
        d.program(metadata_area(region).start, &meta).unwrap();
        (d, region)
    }

    #[test]
    fn block_three_change_erases_its_sector_and_metadata_sector() {
        let old = pattern(128 * 1024, 1);
        let mut new = old.clone();
        new[3 * 1024 + 5] ^= 0x5A;
        let (mut d, region) = device_with(&old);
        let p = build_delta_default(&old, &new).unwrap();
        assert_eq!(changed_sectors(&d, region, &p), vec![5]);
        let staged = apply_delta(&old, &p).unwrap();
        let stats = program_delta(&mut d, region, &staged, &p).unwrap();
        assert_eq!(stats.sectors_erased, 2);
        assert_eq!(d.read_slice(region.start, new.len()).unwrap(), &new[..]);
        let meta = AppMetadata::decode(d.read_slice(metadata_area(region).start, METADATA_SIZE).unwrap()).unwrap();
        assert_eq!(meta.image_crc, crc32(&new));
    }

    #[test]
    fn first_and_last_block_share_a_sector() {
        let old = pattern(128 * 1024, 1);
        let mut new = old.clone();
        new[0] ^= 1;
        new[127 * 1024] ^= 1;
        let (d, region) = device_with(&old);
        let p = build_delta_default(&old, &new).unwrap();
        assert_eq!(changed_sectors(&d, region, &p), vec![5]);
    }

    #[test]
    fn zero_entries_on_blank_metadata_programs_metadata_only() {
        let img = pattern(4096, 1);
        let mut d = FlashDevice::stm32f401();
        let region = d.layout().regions.application;
        d.unlock_default().unwrap();
        d.program(region.start, &img).unwrap();
        let p = build_delta_default(&img, &img).unwrap();
        let stats = program_delta(&mut d, region, &img, &p).unwrap();
        assert_eq!(stats.sectors_erased, 0);
        let meta_len = AppMetadata::for_image(&img, 1024).unwrap().encode().unwrap().len();
        assert_eq!(stats.bytes_programmed, meta_len as u64);
        let again = program_delta(&mut d, region, &img, &p).unwrap();
        assert_eq!(again, FlashStats::default());
    }

    #[test]
    fn untouched_sectors_keep_contents() {
        let old = pattern(200 * 1024, 1);
        let mut new = old.clone();
        new[150 * 1024] ^= 0xFF; // sector 6
        let (mut d, region) = device_with(&old);
        let before_s5 = d.read_slice(region.start, 128 * 1024).unwrap().to_vec();
        let p = build_delta_default(&old, &new).unwrap();
        let staged = apply_delta(&old, &p).unwrap();
        let stats = program_delta(&mut d, region, &staged, &p).unwrap();
        assert_eq!(stats.sectors_erased, 2);
        assert_eq!(d.read_slice(region.start, 128 * 1024).unwrap(), &before_s5[..]);
        assert_eq!(d.read_slice(region.start, new.len()).unwrap(), &new[..]);
    }

    /// Brute-force oracle: indices of every differing byte in block `b`.
    fn oracle_diff(old: &[u8], new: &[u8], bs: usize, b: usize) -> Vec<usize> {
        let padded: Vec<u8> = (0..new.len()).map(|i| old.get(i).copied().unwrap_or(0xFF)).collect();
        (b * bs..((b + 1) * bs).min(new.len())).filter(|&i| padded[i] != new[i]).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_minimality(
            old in prop::collection::vec(any::<u8>(), 1..6000),
            edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..40),
            new_len in 1usize..6000,
            bs in prop::sample::select(vec![64usize, 256, 1024]),
            gap in 1usize..16,
        ) {
            let mut new = pad_to(&old, new_len);
            for (i, v) in &edits {
                let at = i.index(new.len());
                new[at] = *v;
            }
            let p = build_delta(&old, &new, bs, gap).unwrap();
            prop_assert_eq!(DeltaPackage::decode(&p.encode()).unwrap(), p.clone());
            prop_assert_eq!(p.encoded_len(), p.encode().len());
            prop_assert_eq!(apply_delta(&old, &p).unwrap(), new.clone());
            for b in 0..new.len().div_ceil(bs) {
                let diffs = oracle_diff(&old, &new, bs, b);
                let entry = p.entries.iter().find(|e| e.block_index as usize == b);
                match entry {
                    None => prop_assert!(diffs.is_empty()),
                    Some(e) => {
                        prop_assert!(!diffs.is_empty());
                        for d in diffs {
                            let off = d - b * bs;
                            prop_assert!(e.tuples.iter().any(|t| (t.offset as usize..t.offset as usize + t.len()).contains(&off)));
                        }
                    }
                }
            }
        }
    }
}
