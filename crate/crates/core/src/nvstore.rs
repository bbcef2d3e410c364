//! Boot-control flags in RTC backup registers, and the flash-resident
//! application metadata (size, image CRC, block CRC table).
//!
//! Metadata layout, at the last 1 KiB of the application region:
//!
//! | bytes      | content                                             |
//! |------------|-----------------------------------------------------|
//! | `[0, 16)`  | byte count, ASCII decimal, NUL padded               |
//! | `[16, 20)` | CRC-32 of the image, little-endian                  |
//! | `[20, ..)` | block table: `u16` count then `u32` entries, all LE |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{FlashLayout, Region};
use crate::integrity::{BlockCrcTable, DEFAULT_BLOCK_SIZE};

pub const BACKUP_REGISTER_COUNT: usize = 20;
pub const FLAG_ENTER: u32 = 0xAA;
pub const FLAG_NOT_ENTER: u32 = 0x55;

pub const METADATA_SIZE: usize = 1024;
const SIZE_FIELD_LEN: usize = 16;
const HEADER_LEN: usize = SIZE_FIELD_LEN + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootFlag {
    Enter,
    NotEnter,
}

impl BootFlag {
    pub fn register_value(self) -> u32 {
        match self {
            BootFlag::Enter => FLAG_ENTER,
            BootFlag::NotEnter => FLAG_NOT_ENTER,
        }
    }

    /// Anything but `0xAA` reads as not-enter, so zeroed registers are safe.
    pub fn decode(raw: u32) -> Self {
        if raw == FLAG_ENTER {
            BootFlag::Enter
        } else {
            BootFlag::NotEnter
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagSlot {
    ApplicationEnter,
    UpdaterEnter,
}

impl FlagSlot {
    pub fn register(self) -> usize {
        match self {
            FlagSlot::ApplicationEnter => 0,
            FlagSlot::UpdaterEnter => 1,
        }
    }
}

/// RTC backup register file. Survives software reset, cleared by power-cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackupRegisters {
    regs: [u32; BACKUP_REGISTER_COUNT],
}

impl BackupRegisters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, index: usize) -> Option<u32> {
        self.regs.get(index).copied()
    }

    pub fn set(&mut self, index: usize, value: u32) -> bool {
        match self.regs.get_mut(index) {
            Some(r) => {
                *r = value;
                true
            }
            None => false,
        }
    }

    pub fn read_flag(&self, which: FlagSlot) -> BootFlag {
        BootFlag::decode(self.regs[which.register()])
    }

    pub fn write_flag(&mut self, which: FlagSlot, value: BootFlag) {
        self.regs[which.register()] = value.register_value();
    }

    pub fn power_cycle(&mut self) {
        self.regs = [0; BACKUP_REGISTER_COUNT];
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetadataError {
    #[error("malformed metadata: {0}")]
    Malformed(String),
    #[error("byte count {0} does not fit in the size field")]
    SizeFieldOverflow(u64),
    #[error("metadata needs {0} bytes, area holds {METADATA_SIZE}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppMetadata {
    pub byte_count: u32,
    pub image_crc: u32,
    pub block_table: BlockCrcTable,
}

impl AppMetadata {
    /// Metadata describing `image` with the given block size.
    pub fn for_image(image: &[u8], block_size: usize) -> Result<Self, MetadataError> {
        let block_table =
            crate::integrity::block_crcs(image, block_size).map_err(|e| MetadataError::Malformed(e.to_string()))?;
        Ok(AppMetadata { byte_count: image.len() as u32, image_crc: crate::integrity::crc32(image), block_table })
    }

    pub fn encode(&self) -> Result<Vec<u8>, MetadataError> {
        let digits = self.byte_count.to_string();
        if digits.len() > 10 {
            return Err(MetadataError::SizeFieldOverflow(self.byte_count as u64));
        }
        let mut out = vec![0u8; SIZE_FIELD_LEN];
        out[..digits.len()].copy_from_slice(digits.as_bytes());
        out.extend_from_slice(&self.image_crc.to_le_bytes());
        let table = self.block_table.encode().map_err(|e| MetadataError::Malformed(e.to_string()))?;
        out.extend_from_slice(&table);
        if out.len() > METADATA_SIZE {
            return Err(MetadataError::TooLarge(out.len()));
        }
        Ok(out)
    }

    /// Decodes with the default 1 KiB block size.
    pub fn decode(bytes: &[u8]) -> Result<Self, MetadataError> {
        Self::decode_with_block_size(bytes, DEFAULT_BLOCK_SIZE)
    }

    pub fn decode_with_block_size(bytes: &[u8], block_size: usize) -> Result<Self, MetadataError> {
        if bytes.len() < HEADER_LEN {
            return Err(MetadataError::Malformed("truncated header".into()));
        }
        let field = &bytes[..SIZE_FIELD_LEN];
        let digits_len = field.iter().position(|&b| b == 0).unwrap_or(SIZE_FIELD_LEN);
        let digits = &field[..digits_len];
        if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
            return Err(MetadataError::Malformed("size field is not ASCII decimal".into()));
        }
        if field[digits_len..].iter().any(|&b| b != 0) {
            return Err(MetadataError::Malformed("size field padding is not NUL".into()));
        }
        let byte_count: u32 = std::str::from_utf8(digits)
            .expect("ascii digits")
            .parse()
            .map_err(|_| MetadataError::Malformed("size field overflows u32".into()))?;
        let image_crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let (block_table, _) = BlockCrcTable::decode(&bytes[HEADER_LEN..], block_size, byte_count as usize)
            .map_err(|e| MetadataError::Malformed(e.to_string()))?;
        Ok(AppMetadata { byte_count, image_crc, block_table })
    }
}

/// Where the metadata lives: the trailing 1 KiB of the application region.
pub fn metadata_region(layout: &FlashLayout) -> Region {
    let app = layout.regions.application;
    Region { start: app.end() - METADATA_SIZE, size: METADATA_SIZE }
}

/// Bytes of the application region available to the image itself.
pub fn app_capacity(layout: &FlashLayout) -> usize {
    layout.regions.application.size - METADATA_SIZE
}

/// Block-table entries that fit in the metadata record.
pub const MAX_TABLE_ENTRIES: usize = (METADATA_SIZE - HEADER_LEN - 2) / 4;

/// Largest image whose metadata fits: bounded by both the region and the
/// block table.
pub fn max_image_len(layout: &FlashLayout, block_size: usize) -> usize {
    app_capacity(layout).min(MAX_TABLE_ENTRIES * block_size)
}
