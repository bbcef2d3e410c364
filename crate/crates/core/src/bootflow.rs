//! The target ECU's boot chain: boot manager decision, bootloader command
//! server, communicative and silent bootloader updaters, and the
//! application-side command that hands control back to the boot chain.
//!
//! Wire conventions (request payloads carried by the segmented transport):
//!
//! | code | program     | payload                                   | reply                    |
//! |------|-------------|-------------------------------------------|--------------------------|
//! | 0x14 | bootloader  | `[app_flag, updater_flag]`                | ACK, then reset          |
//! | 0x15 | bootloader  | `[sector, count]`                         | ACK                      |
//! | 0x16 | bootloader  | `addr u32, len u16, data`                 | ACK                      |
//! | 0x17 | bootloader  | `offset u32, chunk` (delta staging)       | ACK                      |
//! | 0x18 | bootloader  | `len u32` (apply staged delta)            | `[0x79, 0x18, erased]`   |
//! | 0x20 | updater     | none                                      | `[0x79, maj, min, patch]`|
//! | 0x21 | updater     | `addr u32, len u16, data`                 | ACK                      |
//! | 0x22 | updater     | none                                      | ACK                      |
//! | 0x23 | updater     | none                                      | ACK, then reset          |
//! | 0x31 | application | `[0x00]` bootloader, `[0x01]` updater     | ACK, then reset          |
//! | 0x27 | app, bootloader | UDS security access                   | UDS response             |
//!
//! ACK is `[0x79, code]`; NACK is `[0x1F, code, reason]`. On entering a
//! program the target announces it with `[0x7E, program]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delta::{apply_delta, reprogram_changed_sectors, DeltaError, DeltaPackage};
use crate::flash::{FlashDevice, FlashError, FlashStats, Region, ERASED, MASS_ERASE_SECTOR};
use crate::integrity::{crc32, crc_compare, CrcOutcome, DEFAULT_BLOCK_SIZE};
use crate::nvstore::{app_capacity, max_image_len, metadata_region, AppMetadata, BackupRegisters, BootFlag, FlagSlot};
use crate::time::SimTime;
use crate::uds::{SecuritySession, SID_SECURITY_ACCESS};

pub const GO_TO_ADDR: u8 = 0x14;
pub const FLASH_ERASE: u8 = 0x15;
pub const MEM_WRITE: u8 = 0x16;
pub const DELTA_DATA: u8 = 0x17;
pub const DELTA_APPLY: u8 = 0x18;
pub const GET_VERSION: u8 = 0x20;
pub const MEM_WRITE_BOOTLOADER: u8 = 0x21;
pub const MEM_ERASE_BOOTLOADER: u8 = 0x22;
pub const LEAVE_TO_BOOT_MANAGER: u8 = 0x23;
pub const APP_ENTER_BOOT: u8 = 0x31;

pub const ACK: u8 = 0x79;
pub const NACK: u8 = 0x1F;
pub const ANNOUNCE: u8 = 0x7E;

pub const REASON_REGION: u8 = 0x01;
pub const REASON_SECURITY: u8 = 0x02;
pub const REASON_FLASH: u8 = 0x03;
pub const REASON_VERIFY: u8 = 0x04;
pub const REASON_MALFORMED: u8 = 0x05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootDecision {
    JumpApplication,
    JumpBootloader,
    JumpUpdater,
}

impl BootDecision {
    pub fn program(self) -> Program {
        match self {
            BootDecision::JumpApplication => Program::Application,
            BootDecision::JumpBootloader => Program::Bootloader,
            BootDecision::JumpUpdater => Program::Updater,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Program {
    BootManager,
    Bootloader,
    Updater,
    Application,
}

impl Program {
    pub fn code(self) -> u8 {
        match self {
            Program::BootManager => 0,
            Program::Bootloader => 1,
            Program::Updater => 2,
            Program::Application => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Program::BootManager,
            1 => Program::Bootloader,
            2 => Program::Updater,
            3 => Program::Application,
            _ => return None,
        })
    }

    pub fn announce(self) -> Vec<u8> {
        vec![ANNOUNCE, self.code()]
    }
}

/// Stored metadata read from the device, if it decodes.
pub fn read_metadata(flash: &FlashDevice) -> Option<AppMetadata> {
    let m = metadata_region(flash.layout());
    AppMetadata::decode(flash.read_slice(m.start, m.size).ok()?).ok()
}

/// CRC of the stored application against its metadata. Undecodable
/// metadata or an out-of-range size count as failure.
pub fn check_integrity(flash: &FlashDevice) -> CrcOutcome {
    let Some(meta) = read_metadata(flash) else {
        return CrcOutcome::Failed;
    };
    let len = meta.byte_count as usize;
    if len > app_capacity(flash.layout()) {
        return CrcOutcome::Failed;
    }
    let app = flash.layout().regions.application;
    match flash.read_slice(app.start, len) {
        Ok(bytes) => crc_compare(crc32(bytes), meta.image_crc),
        Err(_) => CrcOutcome::Failed,
    }
}

/// Decision from an already computed integrity result. Resets both flags
/// on the bootloader path.
pub fn decide(integrity: CrcOutcome, regs: &mut BackupRegisters) -> BootDecision {
    if integrity == CrcOutcome::Succeeded && regs.read_flag(FlagSlot::ApplicationEnter) == BootFlag::Enter {
        BootDecision::JumpApplication
    } else if regs.read_flag(FlagSlot::UpdaterEnter) == BootFlag::Enter {
        BootDecision::JumpUpdater
    } else {
        regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::NotEnter);
        regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
        BootDecision::JumpBootloader
    }
}

pub fn boot_decide(flash: &FlashDevice, regs: &mut BackupRegisters) -> BootDecision {
    decide(check_integrity(flash), regs)
}

fn with_unlocked<T>(
    flash: &mut FlashDevice,
    op: impl FnOnce(&mut FlashDevice) -> Result<T, DeltaError>,
) -> Result<T, DeltaError> {
    match flash.unlock_default() {
        Ok(()) | Err(FlashError::AlreadyUnlocked) => {}
        Err(e) => return Err(e.into()),
    }
    let r = op(flash);
    flash.lock();
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum ServeStatus {
    Ack,
    Nack(u8),
    Ignored,
}

/// What serving one request produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Served {
    pub code: u8,
    pub status: ServeStatus,
    pub reply: Option<Vec<u8>>,
    pub reset: bool,
}

impl Served {
    fn ack(code: u8) -> Self {
        Served { code, status: ServeStatus::Ack, reply: Some(vec![ACK, code]), reset: false }
    }

    fn ack_with(code: u8, extra: &[u8]) -> Self {
        let mut r = vec![ACK, code];
        r.extend_from_slice(extra);
        Served { code, status: ServeStatus::Ack, reply: Some(r), reset: false }
    }

    fn nack(code: u8, reason: u8) -> Self {
        Served { code, status: ServeStatus::Nack(reason), reply: Some(vec![NACK, code, reason]), reset: false }
    }

    fn ignored(code: u8) -> Self {
        Served { code, status: ServeStatus::Ignored, reply: None, reset: false }
    }

    fn then_reset(mut self) -> Self {
        self.reset = true;
        self
    }
}

fn parse_write(payload: &[u8]) -> Option<(usize, &[u8])> {
    if payload.len() < 7 {
        return None;
    }
    let addr = u32::from_le_bytes(payload[1..5].try_into().ok()?) as usize;
    let len = u16::from_le_bytes(payload[5..7].try_into().ok()?) as usize;
    let data = &payload[7..];
    (data.len() == len && len > 0).then_some((addr, data))
}

/// Builds a MEM_WRITE (or MEM_WRITE_BOOTLOADER) request.
pub fn mem_write_request(code: u8, address: usize, data: &[u8]) -> Vec<u8> {
    let mut r = Vec::with_capacity(7 + data.len());
    r.push(code);
    r.extend_from_slice(&(address as u32).to_le_bytes());
    r.extend_from_slice(&(data.len() as u16).to_le_bytes());
    r.extend_from_slice(data);
    r
}

pub fn delta_data_request(offset: usize, chunk: &[u8]) -> Vec<u8> {
    let mut r = Vec::with_capacity(5 + chunk.len());
    r.push(DELTA_DATA);
    r.extend_from_slice(&(offset as u32).to_le_bytes());
    r.extend_from_slice(chunk);
    r
}

pub fn delta_apply_request(total_len: usize) -> Vec<u8> {
    let mut r = vec![DELTA_APPLY];
    r.extend_from_slice(&(total_len as u32).to_le_bytes());
    r
}

/// Programs `data` at `address` unless the bytes are already there, so a
/// retried write after a lost acknowledgement succeeds.
fn program_idempotent(flash: &mut FlashDevice, address: usize, data: &[u8]) -> Result<FlashStats, DeltaError> {
    if flash.read_slice(address, data.len())? == data {
        return Ok(FlashStats::default());
    }
    let cost = flash.program(address, data)?;
    Ok(FlashStats { sectors_erased: 0, bytes_programmed: data.len() as u64, simulated_duration: cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdaterMode {
    Silent,
    Communicative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdaterConfig {
    pub mode: UpdaterMode,
    /// Bootloader image embedded in the updater (silent mode).
    pub image: Vec<u8>,
}

/// Boundaries between the silent updater's steps, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdaterStep {
    Backup,
    Erase,
    Program,
    Verify,
    Finalize,
}

impl UpdaterStep {
    pub const ALL: [UpdaterStep; 5] =
        [UpdaterStep::Backup, UpdaterStep::Erase, UpdaterStep::Program, UpdaterStep::Verify, UpdaterStep::Finalize];
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdaterError {
    #[error("image of {len} bytes exceeds the {capacity}-byte bootloader region")]
    ImageTooLarge { len: usize, capacity: usize },
    #[error("empty bootloader image")]
    EmptyImage,
    #[error("rolled back: {0}")]
    RollbackPerformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SilentState {
    Start,
    Backup,
    Erase { backup: Vec<u8> },
    Program { backup: Vec<u8> },
    Verify { backup: Vec<u8> },
    Finalize,
    RestoreErase { backup: Vec<u8>, cause: String },
    RestoreProgram { backup: Vec<u8>, cause: String },
    Done(Result<(), UpdaterError>),
}

/// Silent bootloader replacement, one flash step per [`advance`] call so a
/// scheduler can wait for each operation to finish between steps.
///
/// [`advance`]: SilentUpdater::advance
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilentUpdater {
    state: SilentState,
    inject_failure: Option<UpdaterStep>,
}

impl SilentUpdater {
    pub fn new(inject_failure: Option<UpdaterStep>) -> Self {
        SilentUpdater { state: SilentState::Start, inject_failure }
    }

    pub fn result(&self) -> Option<&Result<(), UpdaterError>> {
        match &self.state {
            SilentState::Done(r) => Some(r),
            _ => None,
        }
    }

    fn fails_at(&self, step: UpdaterStep) -> bool {
        self.inject_failure == Some(step)
    }

    /// Runs the next step. Flags are touched only when the run finishes.
    pub fn advance(
        &mut self,
        flash: &mut FlashDevice,
        regs: &mut BackupRegisters,
        image: &[u8],
    ) -> Result<FlashStats, DeltaError> {
        let bl = flash.layout().regions.bootloader;
        let mut stats = FlashStats::default();
        let state = std::mem::replace(&mut self.state, SilentState::Start);
        self.state = match state {
            SilentState::Start => {
                if image.is_empty() {
                    SilentState::Done(Err(UpdaterError::EmptyImage))
                } else if image.len() > bl.size {
                    SilentState::Done(Err(UpdaterError::ImageTooLarge { len: image.len(), capacity: bl.size }))
                } else {
                    SilentState::Backup
                }
            }
            SilentState::Backup => {
                if self.fails_at(UpdaterStep::Backup) {
                    {
                        regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                        SilentState::Done(Err(UpdaterError::RollbackPerformed("backup failed".into())))
                    }
                } else {
                    SilentState::Erase { backup: flash.read_slice(bl.start, bl.size)?.to_vec() }
                }
            }
            SilentState::Erase { backup } => {
                if self.fails_at(UpdaterStep::Erase) {
                    // Nothing has been modified yet.
                    {
                        regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                        SilentState::Done(Err(UpdaterError::RollbackPerformed("erase failed".into())))
                    }
                } else {
                    stats += erase_region(flash, bl)?;
                    SilentState::Program { backup }
                }
            }
            SilentState::Program { backup } => {
                if self.fails_at(UpdaterStep::Program) {
                    SilentState::RestoreErase { backup, cause: "program failed".into() }
                } else {
                    stats += with_unlocked(flash, |f| program_idempotent(f, bl.start, image))?;
                    SilentState::Verify { backup }
                }
            }
            SilentState::Verify { backup } => {
                let ok = crc32(flash.read_slice(bl.start, image.len())?) == crc32(image);
                if ok && !self.fails_at(UpdaterStep::Verify) {
                    SilentState::Finalize
                } else {
                    SilentState::RestoreErase { backup, cause: "verify failed".into() }
                }
            }
            SilentState::Finalize => {
                if self.fails_at(UpdaterStep::Finalize) {
                    // The new image is verified in place; keep it.
                    regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                    SilentState::Done(Ok(()))
                } else {
                    regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::NotEnter);
                    regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                    SilentState::Done(Ok(()))
                }
            }
            SilentState::RestoreErase { backup, cause } => {
                stats += erase_region(flash, bl)?;
                SilentState::RestoreProgram { backup, cause }
            }
            SilentState::RestoreProgram { backup, cause } => {
                let trimmed_end = backup.iter().rposition(|&b| b != ERASED).map_or(0, |p| p + 1);
                if trimmed_end > 0 {
                    stats += with_unlocked(flash, |f| program_idempotent(f, bl.start, &backup[..trimmed_end]))?;
                }
                regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                SilentState::Done(Err(UpdaterError::RollbackPerformed(cause)))
            }
            done @ SilentState::Done(_) => done,
        };
        Ok(stats)
    }
}

fn erase_region(flash: &mut FlashDevice, region: Region) -> Result<FlashStats, DeltaError> {
    let sectors = flash.layout().sectors_of(region);
    with_unlocked(flash, |f| {
        let mut stats = FlashStats::default();
        for s in sectors {
            stats.simulated_duration += f.erase_sectors(s.index, 1)?;
            stats.sectors_erased += 1;
        }
        Ok(stats)
    })
}

/// Runs the silent updater to completion, letting each flash operation
/// finish before the next step.
pub fn updater_silent(
    flash: &mut FlashDevice,
    regs: &mut BackupRegisters,
    image: &[u8],
    inject_failure: Option<UpdaterStep>,
) -> Result<FlashStats, UpdaterError> {
    let mut u = SilentUpdater::new(inject_failure);
    let mut stats = FlashStats::default();
    loop {
        if let Some(r) = u.result() {
            return r.clone().map(|()| stats);
        }
        match u.advance(flash, regs, image) {
            Ok(s) => stats += s,
            Err(e) => return Err(UpdaterError::RollbackPerformed(e.to_string())),
        }
        let t = flash.busy_until();
        flash.advance_to(t);
    }
}

/// Volatile target state, lost on any reset.
#[derive(Debug, Clone, Default)]
pub struct Ram {
    pub staging: Vec<u8>,
    pub silent: Option<SilentUpdater>,
    pub pending_reply: Option<Vec<u8>>,
    pub reset_after_reply: bool,
    pub gains: Option<crate::lka::PidGains>,
    pub lka: crate::lka::SteeringState,
    pub lka_target: Option<f64>,
    pub lka_last_run: Option<SimTime>,
    pub lka_commanded: bool,
}

/// A target ECU: flash, backup registers, security session, and which
/// boot-chain program is running.
#[derive(Debug, Clone)]
pub struct Ecu {
    pub flash: FlashDevice,
    pub regs: BackupRegisters,
    pub session: SecuritySession,
    pub program: Program,
    pub version: (u8, u8, u8),
    pub updater: Option<UpdaterConfig>,
    pub block_size: usize,
    pub ram: Ram,
    /// Accumulated flash work, for campaign accounting.
    pub flash_stats: FlashStats,
}

impl Ecu {
    pub fn new(flash: FlashDevice, session: SecuritySession) -> Self {
        Ecu {
            flash,
            regs: BackupRegisters::new(),
            session,
            program: Program::BootManager,
            version: (1, 0, 0),
            updater: None,
            block_size: DEFAULT_BLOCK_SIZE,
            ram: Ram::default(),
            flash_stats: FlashStats::default(),
        }
    }

    /// Writes an application image and its metadata directly, as a
    /// factory programmer would.
    pub fn install_application(&mut self, image: &[u8]) -> Result<(), DeltaError> {
        let app = self.flash.layout().regions.application;
        let cap = max_image_len(self.flash.layout(), self.block_size);
        if image.len() > cap {
            return Err(DeltaError::ImageTooLarge { len: image.len(), capacity: cap });
        }
        let meta = AppMetadata::for_image(image, self.block_size)?.encode()?;
        let mreg = metadata_region(self.flash.layout());
        with_unlocked(&mut self.flash, |f| {
            f.erase_sectors(MASS_ERASE_SECTOR, 0)?;
            f.program(app.start, image)?;
            f.program(mreg.start, &meta)?;
            Ok(())
        })?;
        self.flash.settle();
        Ok(())
    }

    pub fn install_bootloader(&mut self, image: &[u8]) -> Result<(), DeltaError> {
        let bl = self.flash.layout().regions.bootloader;
        if image.len() > bl.size {
            return Err(DeltaError::ImageTooLarge { len: image.len(), capacity: bl.size });
        }
        erase_region(&mut self.flash, bl)?;
        with_unlocked(&mut self.flash, |f| Ok(f.program(bl.start, image)?))?;
        self.flash.settle();
        Ok(())
    }

    /// Current application image as described by the stored metadata.
    pub fn application_image(&self) -> Option<Vec<u8>> {
        let meta = read_metadata(&self.flash)?;
        let app = self.flash.layout().regions.application;
        self.flash.read_slice(app.start, meta.byte_count as usize).ok().map(<[u8]>::to_vec)
    }

    /// Runs the boot manager and switches to the chosen program.
    pub fn boot(&mut self) -> BootDecision {
        let d = boot_decide(&self.flash, &mut self.regs);
        self.program = d.program();
        if self.program == Program::Updater {
            if let Some(UpdaterConfig { mode: UpdaterMode::Silent, .. }) = &self.updater {
                self.ram.silent = Some(SilentUpdater::new(None));
            }
        }
        d
    }

    /// Reset bookkeeping shared by software reset and power-cycle. Any
    /// in-flight flash operation is cut short.
    pub fn reset(&mut self, power_cycle: bool) {
        self.flash.interrupt();
        if power_cycle {
            self.regs.power_cycle();
        }
        self.session.reset();
        self.ram = Ram::default();
        self.program = Program::BootManager;
    }

    fn account(&mut self, r: Result<FlashStats, DeltaError>) -> Result<(), DeltaError> {
        r.map(|s| self.flash_stats += s)
    }

    /// Dispatches a request to whichever program is running.
    pub fn serve(&mut self, payload: &[u8], now: SimTime) -> Served {
        let Some(&code) = payload.first() else {
            return Served::ignored(0);
        };
        match self.program {
            Program::Bootloader => self.serve_bootloader(payload, now),
            Program::Updater => self.serve_updater(payload),
            Program::Application => self.serve_application(payload, now),
            Program::BootManager => Served::ignored(code),
        }
    }

    fn serve_uds(&mut self, payload: &[u8], now: SimTime) -> Served {
        let reply = self.session.handle(payload, now);
        let status =
            if reply[0] == crate::uds::NEGATIVE_RESPONSE { ServeStatus::Nack(reply[2]) } else { ServeStatus::Ack };
        Served { code: SID_SECURITY_ACCESS, status, reply: Some(reply), reset: false }
    }

    pub fn serve_application(&mut self, payload: &[u8], now: SimTime) -> Served {
        match payload {
            [SID_SECURITY_ACCESS, ..] => self.serve_uds(payload, now),
            [APP_ENTER_BOOT, target] => {
                if !self.session.is_unlocked() {
                    return Served::nack(APP_ENTER_BOOT, REASON_SECURITY);
                }
                let updater = match target {
                    0 => BootFlag::NotEnter,
                    1 => BootFlag::Enter,
                    _ => return Served::nack(APP_ENTER_BOOT, REASON_MALFORMED),
                };
                self.regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::NotEnter);
                self.regs.write_flag(FlagSlot::UpdaterEnter, updater);
                Served::ack(APP_ENTER_BOOT).then_reset()
            }
            [code, ..] => Served::ignored(*code),
            [] => Served::ignored(0),
        }
    }

    pub fn serve_bootloader(&mut self, payload: &[u8], now: SimTime) -> Served {
        let code = payload[0];
        if code == SID_SECURITY_ACCESS {
            return self.serve_uds(payload, now);
        }
        let gated = matches!(code, FLASH_ERASE | MEM_WRITE | DELTA_DATA | DELTA_APPLY);
        if gated && !self.session.is_unlocked() {
            return Served::nack(code, REASON_SECURITY);
        }
        let app = self.flash.layout().regions.application;
        match code {
            GO_TO_ADDR => {
                let [_, app_flag, upd_flag] = payload else {
                    return Served::nack(code, REASON_MALFORMED);
                };
                self.regs.set(FlagSlot::ApplicationEnter.register(), *app_flag as u32);
                self.regs.set(FlagSlot::UpdaterEnter.register(), *upd_flag as u32);
                Served::ack(code).then_reset()
            }
            FLASH_ERASE => {
                let [_, sector, count] = payload else {
                    return Served::nack(code, REASON_MALFORMED);
                };
                let allowed: Vec<u8> = self.flash.layout().sectors_of(app).iter().map(|s| s.index).collect();
                let in_app = *sector == MASS_ERASE_SECTOR
                    || (*count > 0 && (0..*count).all(|i| allowed.contains(&sector.wrapping_add(i))));
                if !in_app {
                    return Served::nack(code, REASON_REGION);
                }
                let (s, c) = (*sector, *count);
                let r = with_unlocked(&mut self.flash, |f| {
                    let cost = f.erase_sectors(s, c)?;
                    let n = if s == MASS_ERASE_SECTOR { allowed.len() as u32 } else { c as u32 };
                    Ok(FlashStats { sectors_erased: n, bytes_programmed: 0, simulated_duration: cost })
                });
                match self.account(r) {
                    Ok(()) => Served::ack(code),
                    Err(_) => Served::nack(code, REASON_FLASH),
                }
            }
            MEM_WRITE => {
                let Some((addr, data)) = parse_write(payload) else {
                    return Served::nack(code, REASON_MALFORMED);
                };
                if !app.contains_range(addr, data.len()) {
                    return Served::nack(code, REASON_REGION);
                }
                let r = with_unlocked(&mut self.flash, |f| program_idempotent(f, addr, data));
                match self.account(r) {
                    Ok(()) => Served::ack(code),
                    Err(_) => Served::nack(code, REASON_FLASH),
                }
            }
            DELTA_DATA => {
                if payload.len() < 6 {
                    return Served::nack(code, REASON_MALFORMED);
                }
                let off = u32::from_le_bytes(payload[1..5].try_into().expect("4 bytes")) as usize;
                let chunk = &payload[5..];
                if off + chunk.len() > app.size {
                    return Served::nack(code, REASON_REGION);
                }
                let staging = &mut self.ram.staging;
                if staging.len() < off + chunk.len() {
                    staging.resize(off + chunk.len(), 0);
                }
                staging[off..off + chunk.len()].copy_from_slice(chunk);
                Served::ack(code)
            }
            DELTA_APPLY => {
                let [_, a, b, c, d] = payload else {
                    return Served::nack(code, REASON_MALFORMED);
                };
                let total = u32::from_le_bytes([*a, *b, *c, *d]) as usize;
                if total > self.ram.staging.len() {
                    return Served::nack(code, REASON_MALFORMED);
                }
                match self.apply_staged_delta(total) {
                    Ok(stats) => {
                        self.ram.staging.clear();
                        Served::ack_with(code, &[stats.sectors_erased.min(255) as u8])
                    }
                    Err(DeltaError::Flash(_)) => Served::nack(code, REASON_FLASH),
                    Err(DeltaError::BlockCrcMismatch(_) | DeltaError::ImageCrcMismatch { .. }) => {
                        Served::nack(code, REASON_VERIFY)
                    }
                    Err(_) => Served::nack(code, REASON_MALFORMED),
                }
            }
            _ => Served { code, status: ServeStatus::Nack(0), reply: Some(vec![NACK, code]), reset: false },
        }
    }

    fn apply_staged_delta(&mut self, total: usize) -> Result<FlashStats, DeltaError> {
        let pkg = DeltaPackage::decode(&self.ram.staging[..total])?;
        let app = self.flash.layout().regions.application;
        let base_len = read_metadata(&self.flash)
            .map(|m| m.byte_count as usize)
            .filter(|&l| l > 0 && l <= app_capacity(self.flash.layout()))
            .unwrap_or(pkg.new_image_length as usize)
            .min(app_capacity(self.flash.layout()));
        let base = self.flash.read_slice(app.start, base_len.max(1))?.to_vec();
        let staged = apply_delta(&base, &pkg)?;
        let r = with_unlocked(&mut self.flash, |f| reprogram_changed_sectors(f, app, &staged, &pkg));
        let stats = r?;
        self.flash_stats += stats;
        Ok(stats)
    }

    pub fn serve_updater(&mut self, payload: &[u8]) -> Served {
        let code = payload[0];
        let bl = self.flash.layout().regions.bootloader;
        match code {
            GET_VERSION => {
                let (a, b, c) = self.version;
                Served { code, status: ServeStatus::Ack, reply: Some(vec![ACK, a, b, c]), reset: false }
            }
            MEM_ERASE_BOOTLOADER => {
                let r = erase_region(&mut self.flash, bl);
                match self.account(r) {
                    Ok(()) => Served::ack(code),
                    Err(_) => Served::nack(code, REASON_FLASH),
                }
            }
            MEM_WRITE_BOOTLOADER => {
                let Some((addr, data)) = parse_write(payload) else {
                    return Served::nack(code, REASON_MALFORMED);
                };
                if !bl.contains_range(addr, data.len()) {
                    return Served::nack(code, REASON_REGION);
                }
                let r = with_unlocked(&mut self.flash, |f| program_idempotent(f, addr, data));
                match self.account(r) {
                    Ok(()) => Served::ack(code),
                    Err(_) => Served::nack(code, REASON_FLASH),
                }
            }
            LEAVE_TO_BOOT_MANAGER => {
                self.regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::NotEnter);
                self.regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                Served::ack(code).then_reset()
            }
            _ => Served::ignored(code),
        }
    }

    /// One silent-updater step. Returns the finished result, if any.
    pub fn step_silent_updater(&mut self) -> Option<Result<(), UpdaterError>> {
        let image = match &self.updater {
            Some(UpdaterConfig { mode: UpdaterMode::Silent, image }) => image.clone(),
            _ => return None,
        };
        let mut u = self.ram.silent.take()?;
        match u.advance(&mut self.flash, &mut self.regs, &image) {
            Ok(s) => self.flash_stats += s,
            Err(e) => {
                self.regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::NotEnter);
                return Some(Err(UpdaterError::RollbackPerformed(e.to_string())));
            }
        }
        let done = u.result().cloned();
        if done.is_none() {
            self.ram.silent = Some(u);
        }
        done
    }
}
