//! Single-bank sectored flash emulator.
//!
//! The device models the STM32F401 main memory block: eight sectors of
//! mixed size, an unlock key sequence, whole-sector erase to `0xFF` and
//! programming that is only accepted onto erased bytes. Every mutating
//! operation returns its simulated cost and marks the device busy for
//! that long. Operations complete instantly in memory but are journaled
//! until their busy window has passed, so an interruption (node reset or
//! power loss) can roll back the part that had not "happened" yet.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};

pub const KIB: usize = 1024;
pub const ERASED: u8 = 0xFF;
pub const WORD_SIZE: usize = 4;

/// Sector argument meaning "mass-erase the application region".
pub const MASS_ERASE_SECTOR: u8 = 0xFF;

pub const DEFAULT_UNLOCK_KEYS: (u32, u32) = (0x4567_0123, 0xCDEF_89AB);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlashError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("wrong unlock key sequence; device latched until reset")]
    BadKeySequence,
    #[error("device already unlocked")]
    AlreadyUnlocked,
    #[error("device is locked")]
    LockedDevice,
    #[error("sector range {start}+{count} out of range")]
    SectorOutOfRange { start: u8, count: u8 },
    #[error("program onto non-erased byte at offset {offset:#x}")]
    ProgramOnNonErased { offset: usize },
    #[error("address range {address:#x}+{len} outside device")]
    AddressOutOfRange { address: usize, len: usize },
    #[error("snapshot is {actual} bytes, device is {expected}")]
    SnapshotSize { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sector {
    pub index: u8,
    pub start: usize,
    pub size: usize,
}

impl Sector {
    pub fn end(&self) -> usize {
        self.start + self.size
    }

    pub fn contains(&self, offset: usize) -> bool {
        offset >= self.start && offset < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub size: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.start + self.size
    }

    pub fn contains_range(&self, start: usize, len: usize) -> bool {
        start >= self.start && start.checked_add(len).is_some_and(|e| e <= self.end())
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    BootManager,
    Bootloader,
    Application,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::BootManager => "boot_manager",
            RegionKind::Bootloader => "bootloader",
            RegionKind::Application => "application",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regions {
    pub boot_manager: Region,
    pub bootloader: Region,
    pub application: Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashLayout {
    pub sectors: Vec<Sector>,
    pub regions: Regions,
}

impl Default for FlashLayout {
    fn default() -> Self {
        Self::stm32f401()
    }
}

impl FlashLayout {
    /// 4×16K, 1×64K, 3×128K; boot manager in sectors 0-3, bootloader in
    /// sector 4, application (shared with the bootloader updater) in 5-7.
    pub fn stm32f401() -> Self {
        let sizes = [16, 16, 16, 16, 64, 128, 128, 128].map(|k| k * KIB);
        Self::from_sizes(
            &sizes,
            Regions {
                boot_manager: Region { start: 0, size: 64 * KIB },
                bootloader: Region { start: 64 * KIB, size: 64 * KIB },
                application: Region { start: 128 * KIB, size: 384 * KIB },
            },
        )
    }

    /// Builds contiguous sectors from a list of sizes.
    pub fn from_sizes(sizes: &[usize], regions: Regions) -> Self {
        let mut start = 0;
        let sectors = sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| {
                let s = Sector { index: i as u8, start, size };
                start += size;
                s
            })
            .collect();
        FlashLayout { sectors, regions }
    }

    pub fn total_size(&self) -> usize {
        self.sectors.last().map_or(0, Sector::end)
    }

    pub fn region(&self, kind: RegionKind) -> Region {
        match kind {
            RegionKind::BootManager => self.regions.boot_manager,
            RegionKind::Bootloader => self.regions.bootloader,
            RegionKind::Application => self.regions.application,
        }
    }

    pub fn sector(&self, index: u8) -> Option<&Sector> {
        self.sectors.get(index as usize)
    }

    pub fn sector_containing(&self, offset: usize) -> Option<&Sector> {
        self.sectors.iter().find(|s| s.contains(offset))
    }

    /// Sectors fully inside `region`, in ascending order.
    pub fn sectors_of(&self, region: Region) -> Vec<Sector> {
        self.sectors.iter().filter(|s| s.start >= region.start && s.end() <= region.end()).copied().collect()
    }

    /// Sector indices overlapping `[start, start+len)`.
    pub fn sectors_touching(&self, start: usize, len: usize) -> Vec<u8> {
        if len == 0 {
            return Vec::new();
        }
        let end = start + len;
        self.sectors.iter().filter(|s| s.start < end && start < s.end()).map(|s| s.index).collect()
    }

    pub fn validate(&self) -> Result<(), FlashError> {
        let bad = |m: String| Err(FlashError::InvalidLayout(m));
        if self.sectors.is_empty() {
            return bad("no sectors".into());
        }
        if self.sectors.len() > MASS_ERASE_SECTOR as usize {
            return bad("too many sectors".into());
        }
        let mut expected = 0;
        for (i, s) in self.sectors.iter().enumerate() {
            if s.index as usize != i {
                return bad(format!("sector {i} has index {}", s.index));
            }
            if s.size == 0 {
                return bad(format!("sector {i} is empty"));
            }
            if s.start != expected {
                return bad(format!("sector {i} starts at {:#x}, expected {expected:#x}", s.start));
            }
            expected = s.end();
        }
        let named = [
            (RegionKind::BootManager, self.regions.boot_manager),
            (RegionKind::Bootloader, self.regions.bootloader),
            (RegionKind::Application, self.regions.application),
        ];
        let boundary = |o: usize| o == self.total_size() || self.sectors.iter().any(|s| s.start == o);
        for (kind, r) in named {
            if r.size == 0 || r.end() > self.total_size() {
                return bad(format!("{kind} region out of device"));
            }
            if !boundary(r.start) || !boundary(r.end()) {
                return bad(format!("{kind} region not sector aligned"));
            }
        }
        for (i, (ka, a)) in named.iter().enumerate() {
            for (kb, b) in &named[i + 1..] {
                if a.overlaps(b) {
                    return bad(format!("{ka} overlaps {kb}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraseCost {
    pub sector_size: usize,
    pub cost: SimDuration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashTiming {
    pub erase_costs: Vec<EraseCost>,
    pub program_cost_per_word: SimDuration,
}

impl Default for FlashTiming {
    fn default() -> Self {
        FlashTiming {
            erase_costs: vec![
                EraseCost { sector_size: 16 * KIB, cost: SimDuration::from_millis(250) },
                EraseCost { sector_size: 64 * KIB, cost: SimDuration::from_millis(700) },
                EraseCost { sector_size: 128 * KIB, cost: SimDuration::from_millis(1000) },
            ],
            program_cost_per_word: SimDuration::from_micros(16),
        }
    }
}

impl FlashTiming {
    pub fn erase_cost(&self, sector_size: usize) -> Option<SimDuration> {
        self.erase_costs.iter().find(|c| c.sector_size == sector_size).map(|c| c.cost)
    }

    /// `ceil(len / 4)` words at the per-word cost.
    pub fn program_cost(&self, len: usize) -> SimDuration {
        let words = len.div_ceil(WORD_SIZE) as u64;
        SimDuration::from_micros(words * self.program_cost_per_word.as_micros())
    }

    fn validate(&self, layout: &FlashLayout) -> Result<(), FlashError> {
        if self.program_cost_per_word == SimDuration::ZERO {
            return Err(FlashError::InvalidTiming("program cost must be positive".into()));
        }
        if self.erase_costs.iter().any(|c| c.cost == SimDuration::ZERO) {
            return Err(FlashError::InvalidTiming("erase cost must be positive".into()));
        }
        for s in &layout.sectors {
            if self.erase_cost(s.size).is_none() {
                return Err(FlashError::InvalidTiming(format!("no erase cost for {}-byte sectors", s.size)));
            }
        }
        Ok(())
    }
}

/// Accounting for a batch of flash operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashStats {
    pub sectors_erased: u32,
    pub bytes_programmed: u64,
    pub simulated_duration: SimDuration,
}

impl std::ops::AddAssign for FlashStats {
    fn add_assign(&mut self, rhs: FlashStats) {
        self.sectors_erased += rhs.sectors_erased;
        self.bytes_programmed += rhs.bytes_programmed;
        self.simulated_duration += rhs.simulated_duration;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockState {
    Locked,
    Unlocked,
    /// A wrong key sequence was written; only a device reset clears it.
    Latched,
}

/// Result of a read: the bytes plus how long the bus stalled waiting for
/// an in-flight erase/program to finish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadOutcome {
    pub data: Vec<u8>,
    pub stall: SimDuration,
}

#[derive(Debug, Clone)]
enum Journal {
    Program {
        started: SimTime,
        address: usize,
        len: usize,
        word_cost: u64,
    },
    Erase {
        started: SimTime,
        /// (sector start, cost, prior contents) per sector, in erase order.
        sectors: Vec<(usize, SimDuration, Vec<u8>)>,
    },
}

impl Journal {
    fn ends(&self) -> SimTime {
        match self {
            Journal::Program { started, len, word_cost, .. } => {
                *started + SimDuration::from_micros(len.div_ceil(WORD_SIZE) as u64 * word_cost)
            }
            Journal::Erase { started, sectors } => *started + sectors.iter().map(|(_, c, _)| *c).sum::<SimDuration>(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlashDevice {
    layout: FlashLayout,
    timing: FlashTiming,
    cells: Vec<u8>,
    lock_state: LockState,
    keys: (u32, u32),
    now: SimTime,
    busy_until: SimTime,
    journal: Vec<Journal>,
}

impl FlashDevice {
    /// A fully erased, locked device.
    pub fn new(layout: FlashLayout, timing: FlashTiming) -> Result<Self, FlashError> {
        layout.validate()?;
        timing.validate(&layout)?;
        let size = layout.total_size();
        Ok(FlashDevice {
            layout,
            timing,
            cells: vec![ERASED; size],
            lock_state: LockState::Locked,
            keys: DEFAULT_UNLOCK_KEYS,
            now: SimTime::ZERO,
            busy_until: SimTime::ZERO,
            journal: Vec::new(),
        })
    }

    /// Default STM32F401 layout and timing.
    pub fn stm32f401() -> Self {
        Self::new(FlashLayout::stm32f401(), FlashTiming::default()).expect("default layout is valid")
    }

    /// Restores a raw device snapshot.
    pub fn from_snapshot(layout: FlashLayout, timing: FlashTiming, snapshot: &[u8]) -> Result<Self, FlashError> {
        let mut dev = Self::new(layout, timing)?;
        if snapshot.len() != dev.cells.len() {
            return Err(FlashError::SnapshotSize { expected: dev.cells.len(), actual: snapshot.len() });
        }
        dev.cells.copy_from_slice(snapshot);
        Ok(dev)
    }

    pub fn with_unlock_keys(mut self, key1: u32, key2: u32) -> Self {
        self.keys = (key1, key2);
        self
    }

    pub fn layout(&self) -> &FlashLayout {
        &self.layout
    }

    pub fn timing(&self) -> &FlashTiming {
        &self.timing
    }

    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn lock_state(&self) -> LockState {
        self.lock_state
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Raw view of the cells, for snapshots and assertions.
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.cells.clone()
    }

    pub fn unlock(&mut self, key1: u32, key2: u32) -> Result<(), FlashError> {
        match self.lock_state {
            LockState::Unlocked => Err(FlashError::AlreadyUnlocked),
            LockState::Latched => Err(FlashError::BadKeySequence),
            LockState::Locked if (key1, key2) == self.keys => {
                self.lock_state = LockState::Unlocked;
                Ok(())
            }
            LockState::Locked => {
                self.lock_state = LockState::Latched;
                Err(FlashError::BadKeySequence)
            }
        }
    }

    /// Unlocks with the configured keys, as the driver does before each
    /// erase or program.
    pub fn unlock_default(&mut self) -> Result<(), FlashError> {
        let (k1, k2) = self.keys;
        self.unlock(k1, k2)
    }

    /// Re-locks the controller. A latched device stays latched.
    pub fn lock(&mut self) {
        if self.lock_state == LockState::Unlocked {
            self.lock_state = LockState::Locked;
        }
    }

    /// Controller reset: clears the key latch and re-locks. Cell contents
    /// are untouched (see [`FlashDevice::interrupt`] for in-flight ops).
    pub fn reset_device(&mut self) {
        self.lock_state = LockState::Locked;
    }

    fn require_unlocked(&self) -> Result<(), FlashError> {
        match self.lock_state {
            LockState::Unlocked => Ok(()),
            _ => Err(FlashError::LockedDevice),
        }
    }

    fn schedule(&mut self, cost: SimDuration) -> SimTime {
        let start = self.now.max(self.busy_until);
        self.busy_until = start + cost;
        start
    }

    /// Erases `count` sectors from `start_sector`. [`MASS_ERASE_SECTOR`]
    /// erases the application region and ignores `count`.
    pub fn erase_sectors(&mut self, start_sector: u8, count: u8) -> Result<SimDuration, FlashError> {
        self.require_unlocked()?;
        let indices: Vec<u8> = if start_sector == MASS_ERASE_SECTOR {
            self.layout.sectors_of(self.layout.regions.application).iter().map(|s| s.index).collect()
        } else {
            let end = start_sector as usize + count as usize;
            if count == 0 || end > self.layout.sectors.len() {
                return Err(FlashError::SectorOutOfRange { start: start_sector, count });
            }
            (start_sector..end as u8).collect()
        };
        let mut entries = Vec::with_capacity(indices.len());
        let mut total = SimDuration::ZERO;
        for idx in indices {
            let s = self.layout.sectors[idx as usize];
            let cost = self.timing.erase_cost(s.size).expect("validated at construction");
            let prior = self.cells[s.start..s.end()].to_vec();
            self.cells[s.start..s.end()].fill(ERASED);
            entries.push((s.start, cost, prior));
            total += cost;
        }
        let started = self.schedule(total);
        self.journal.push(Journal::Erase { started, sectors: entries });
        Ok(total)
    }

    /// Programs `data` at `address`. Every target byte must be erased.
    pub fn program(&mut self, address: usize, data: &[u8]) -> Result<SimDuration, FlashError> {
        self.require_unlocked()?;
        self.check_range(address, data.len())?;
        if let Some(pos) = self.cells[address..address + data.len()].iter().position(|&b| b != ERASED) {
            return Err(FlashError::ProgramOnNonErased { offset: address + pos });
        }
        self.cells[address..address + data.len()].copy_from_slice(data);
        let cost = self.timing.program_cost(data.len());
        let started = self.schedule(cost);
        self.journal.push(Journal::Program {
            started,
            address,
            len: data.len(),
            word_cost: self.timing.program_cost_per_word.as_micros(),
        });
        Ok(cost)
    }

    /// Reads a range, reporting any stall behind an in-flight operation.
    pub fn read(&self, address: usize, len: usize) -> Result<ReadOutcome, FlashError> {
        Ok(ReadOutcome { data: self.read_slice(address, len)?.to_vec(), stall: self.busy_until.since(self.now) })
    }

    pub fn read_slice(&self, address: usize, len: usize) -> Result<&[u8], FlashError> {
        self.check_range(address, len)?;
        Ok(&self.cells[address..address + len])
    }

    fn check_range(&self, address: usize, len: usize) -> Result<(), FlashError> {
        match address.checked_add(len) {
            Some(end) if end <= self.cells.len() => Ok(()),
            _ => Err(FlashError::AddressOutOfRange { address, len }),
        }
    }

    /// Completes every in-flight operation at the current time, as factory
    /// programming would before the device is fitted.
    pub fn settle(&mut self) {
        self.busy_until = self.now;
        self.journal.clear();
    }

    pub fn is_busy(&self) -> bool {
        self.busy_until > self.now
    }

    /// Moves the device's notion of "now" forward; finished operations
    /// leave the journal.
    pub fn advance_to(&mut self, now: SimTime) {
        if now > self.now {
            self.now = now;
        }
        let now = self.now;
        self.journal.retain(|j| j.ends() > now);
    }

    /// Cuts power or resets mid-operation: everything that had not
    /// completed by `now` is undone. A partially written program keeps the
    /// words finished so far and the rest reads erased. A sector whose
    /// erase was in progress reads erased; sectors not yet reached keep
    /// their prior contents.
    pub fn interrupt(&mut self) {
        let now = self.now;
        for j in std::mem::take(&mut self.journal).into_iter().rev() {
            match j {
                Journal::Program { started, address, len, word_cost } => {
                    let words_done = now.since(started).as_micros() / word_cost;
                    let done = (words_done as usize * WORD_SIZE).min(len);
                    self.cells[address + done..address + len].fill(ERASED);
                }
                Journal::Erase { started, sectors } => {
                    let mut t = started;
                    for (start, cost, prior) in sectors {
                        if now < t {
                            self.cells[start..start + prior.len()].copy_from_slice(&prior);
                        }
                        t += cost;
                    }
                }
            }
        }
        self.busy_until = now;
        self.reset_device();
    }
}
