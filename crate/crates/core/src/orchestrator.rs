//! Master-side update campaign: authenticate, send the target into its
//! bootloader, stream a full image or a delta package, commit metadata,
//! launch the new application, and account for what it cost.

use std::any::Any;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootflow::{
    delta_apply_request, delta_data_request, mem_write_request, Program, ACK, APP_ENTER_BOOT, FLASH_ERASE, GO_TO_ADDR,
    LEAVE_TO_BOOT_MANAGER, MEM_WRITE, NACK, REASON_SECURITY, REASON_VERIFY,
};
use crate::can::NodeId;
use crate::delta::{build_delta, DeltaError};
use crate::flash::{FlashLayout, MASS_ERASE_SECTOR};
use crate::integrity::{crc32, DEFAULT_BLOCK_SIZE};
use crate::nvstore::{max_image_len, metadata_region, AppMetadata, FLAG_ENTER, FLAG_NOT_ENTER};
use crate::sim::{EventKind, NodeCtx, Priority, RunOutcome, Task, TaskState, World};
use crate::time::{SimDuration, SimTime};
use crate::uds::{UdsClient, UnlockOutcome, DEFAULT_CLIENT_TIMEOUT};

pub const DEFAULT_RETRY_BUDGET: u32 = 3;
pub const DELTA_CHUNK: usize = 1024;
pub const DEFAULT_MAX_TICKS: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Full,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignStage {
    Probe,
    AuthenticateApplication,
    EnterBootloader,
    AwaitBootloader,
    AuthenticateBootloader,
    Erase,
    Transfer,
    Apply,
    CommitMetadata,
    Launch,
    AwaitApplication,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    SecurityDenied,
    Timeout,
    BlockCrcMismatch,
    FlashError,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignOutcome {
    Success,
    Failed(FailureReason),
}

impl CampaignOutcome {
    pub fn is_success(self) -> bool {
        self == CampaignOutcome::Success
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignPlan {
    pub mode: UpdateMode,
    pub old_image: Vec<u8>,
    pub new_image: Vec<u8>,
    pub target: NodeId,
    pub shared_secret: u32,
    pub retry_budget: u32,
    pub block_size: usize,
    pub gap_merge: usize,
    pub response_timeout: SimDuration,
    pub layout: FlashLayout,
    /// Stop right after this stage completes, leaving the target as is.
    pub abort_after: Option<CampaignStage>,
}

impl CampaignPlan {
    pub fn new(mode: UpdateMode, old_image: Vec<u8>, new_image: Vec<u8>, target: NodeId, shared_secret: u32) -> Self {
        CampaignPlan {
            mode,
            old_image,
            new_image,
            target,
            shared_secret,
            retry_budget: DEFAULT_RETRY_BUDGET,
            block_size: DEFAULT_BLOCK_SIZE,
            gap_merge: crate::delta::DEFAULT_GAP_MERGE,
            response_timeout: DEFAULT_CLIENT_TIMEOUT,
            layout: FlashLayout::stm32f401(),
            abort_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub mode: UpdateMode,
    pub old_image_crc: u32,
    pub new_image_crc: u32,
    pub new_image_length: usize,
    pub frames_sent: u64,
    pub bytes_on_bus: u64,
    pub retransmissions: u64,
    pub blocks_transferred: usize,
    pub blocks_skipped: usize,
    pub sectors_erased: u32,
    pub simulated_auth_duration: SimDuration,
    pub simulated_transfer_duration: SimDuration,
    pub simulated_flash_duration: SimDuration,
    pub total_simulated_duration: SimDuration,
    pub outcome: CampaignOutcome,
    pub last_stage: CampaignStage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CampaignError {
    #[error("no node {0} in the world")]
    UnknownTarget(NodeId),
    #[error("no master node in the world")]
    NoMaster,
    #[error("image of {len} bytes exceeds application capacity {capacity}")]
    ImageTooLarge { len: usize, capacity: usize },
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error("reports describe different updates")]
    IncomparableReports,
    #[error("both reports must be successful")]
    UnsuccessfulReport,
}

#[derive(Debug, Clone)]
struct Outstanding {
    payload: Vec<u8>,
    sent_at: SimTime,
    attempts: u32,
}

/// The campaign as a master-node task.
#[derive(Debug)]
pub struct CampaignTask {
    plan: CampaignPlan,
    blocks: Vec<(usize, Vec<u8>)>,
    package: Vec<u8>,
    metadata: Vec<u8>,
    blocks_changed: usize,
    total_blocks: usize,
    stage: CampaignStage,
    cursor: usize,
    outstanding: Option<Outstanding>,
    uds: Option<UdsClient>,
    announce_baseline: u64,
    stage_since: SimTime,
    started: Option<SimTime>,
    finished: Option<SimTime>,
    auth: SimDuration,
    blocks_transferred: usize,
    outcome: Option<CampaignOutcome>,
    paused: bool,
    abort_requested: bool,
}

impl CampaignTask {
    pub fn new(plan: CampaignPlan) -> Result<Self, CampaignError> {
        let capacity = max_image_len(&plan.layout, plan.block_size);
        if plan.new_image.len() > capacity {
            return Err(CampaignError::ImageTooLarge { len: plan.new_image.len(), capacity });
        }
        let app = plan.layout.regions.application;
        let bs = plan.block_size;
        let total_blocks = plan.new_image.len().div_ceil(bs);
        let metadata =
            AppMetadata::for_image(&plan.new_image, bs).and_then(|m| m.encode()).map_err(DeltaError::from)?;
        let (blocks, package, blocks_changed) = match plan.mode {
            UpdateMode::Full => {
                let blocks =
                    plan.new_image.chunks(bs).enumerate().map(|(i, b)| (app.start + i * bs, b.to_vec())).collect();
                (blocks, Vec::new(), total_blocks)
            }
            UpdateMode::Delta => {
                let pkg = build_delta(&plan.old_image, &plan.new_image, bs, plan.gap_merge)?;
                (Vec::new(), pkg.encode(), pkg.entries.len())
            }
        };
        Ok(CampaignTask {
            plan,
            blocks,
            package,
            metadata,
            blocks_changed,
            total_blocks,
            stage: CampaignStage::Probe,
            cursor: 0,
            outstanding: None,
            uds: None,
            announce_baseline: 0,
            stage_since: SimTime::ZERO,
            started: None,
            finished: None,
            auth: SimDuration::ZERO,
            blocks_transferred: 0,
            outcome: None,
            paused: false,
            abort_requested: false,
        })
    }

    pub fn outcome(&self) -> Option<CampaignOutcome> {
        self.outcome
    }

    pub fn stage(&self) -> CampaignStage {
        self.stage
    }

    pub fn pause(&mut self) {
        self.paused = true;
    }

    pub fn resume(&mut self) {
        self.paused = false;
    }

    pub fn abort(&mut self) {
        self.abort_requested = true;
    }

    pub fn package_len(&self) -> usize {
        self.package.len()
    }

    fn finish(&mut self, ctx: &mut NodeCtx<'_>, outcome: CampaignOutcome) {
        self.outcome = Some(outcome);
        self.finished = Some(ctx.now);
        self.outstanding = None;
        let text = match outcome {
            CampaignOutcome::Success => "success".to_string(),
            CampaignOutcome::Failed(r) => {
                format!("failed:{}", serde_json::to_string(&r).expect("serializes").trim_matches('"'))
            }
        };
        ctx.emit(EventKind::CampaignFinished { outcome: text });
    }

    fn enter(&mut self, ctx: &mut NodeCtx<'_>, stage: CampaignStage) {
        let completed = self.stage;
        if self.plan.abort_after == Some(completed) {
            self.finish(ctx, CampaignOutcome::Failed(FailureReason::Aborted));
            return;
        }
        self.stage = stage;
        self.stage_since = ctx.now;
        self.cursor = 0;
        let name = serde_json::to_string(&stage).expect("serializes").trim_matches('"').to_string();
        ctx.emit(EventKind::CampaignStage { stage: name });
    }

    fn request(&mut self, ctx: &mut NodeCtx<'_>, payload: Vec<u8>) {
        ctx.send(&payload);
        self.announce_baseline = ctx.io.announce_count;
        self.outstanding = Some(Outstanding { payload, sent_at: ctx.now, attempts: 1 });
    }

    fn start_uds(&mut self, ctx: &mut NodeCtx<'_>) {
        let mut c = UdsClient::with_timeout(self.plan.shared_secret, self.plan.response_timeout);
        let req = c.begin(ctx.now);
        ctx.send(&req);
        self.uds = Some(c);
    }

    fn next_after_auth(&self) -> CampaignStage {
        match self.plan.mode {
            UpdateMode::Full => CampaignStage::Erase,
            UpdateMode::Delta => CampaignStage::Transfer,
        }
    }

    fn on_uds_outcome(&mut self, ctx: &mut NodeCtx<'_>, outcome: UnlockOutcome) {
        if let Some(d) = self.uds.as_ref().and_then(UdsClient::duration) {
            self.auth += d;
        }
        self.uds = None;
        match outcome {
            UnlockOutcome::Granted => {
                let next = if self.stage == CampaignStage::AuthenticateApplication {
                    CampaignStage::EnterBootloader
                } else {
                    self.next_after_auth()
                };
                self.enter(ctx, next);
            }
            UnlockOutcome::Denied(_) => self.finish(ctx, CampaignOutcome::Failed(FailureReason::SecurityDenied)),
            UnlockOutcome::Timeout => self.finish(ctx, CampaignOutcome::Failed(FailureReason::Timeout)),
        }
    }

    /// Handles an ACK/NACK for the outstanding request.
    fn on_reply(&mut self, ctx: &mut NodeCtx<'_>, reply: &[u8]) {
        let Some(out) = &self.outstanding else {
            return;
        };
        let code = out.payload[0];
        match reply {
            [ACK, c, rest @ ..] if *c == code => {
                self.outstanding = None;
                self.on_ack(ctx, rest);
            }
            [NACK, c, reason] if *c == code => {
                let why = match *reason {
                    REASON_SECURITY => FailureReason::SecurityDenied,
                    REASON_VERIFY => FailureReason::BlockCrcMismatch,
                    _ => FailureReason::FlashError,
                };
                self.finish(ctx, CampaignOutcome::Failed(why));
            }
            _ => {}
        }
    }

    fn on_ack(&mut self, ctx: &mut NodeCtx<'_>, _rest: &[u8]) {
        match self.stage {
            CampaignStage::EnterBootloader => self.enter(ctx, CampaignStage::AwaitBootloader),
            CampaignStage::Erase => self.enter(ctx, CampaignStage::Transfer),
            CampaignStage::Transfer => {
                self.cursor += 1;
                let done = match self.plan.mode {
                    UpdateMode::Full => {
                        self.blocks_transferred += 1;
                        self.cursor >= self.blocks.len()
                    }
                    UpdateMode::Delta => self.cursor * DELTA_CHUNK >= self.package.len(),
                };
                if done {
                    let next = match self.plan.mode {
                        UpdateMode::Full => CampaignStage::CommitMetadata,
                        UpdateMode::Delta => CampaignStage::Apply,
                    };
                    self.enter(ctx, next);
                }
            }
            CampaignStage::Apply => {
                self.blocks_transferred = self.blocks_changed;
                self.enter(ctx, CampaignStage::CommitMetadata);
            }
            CampaignStage::CommitMetadata => self.enter(ctx, CampaignStage::Launch),
            CampaignStage::Launch => self.enter(ctx, CampaignStage::AwaitApplication),
            _ => {}
        }
    }

    fn announced_since_baseline(&self, ctx: &NodeCtx<'_>) -> Option<Program> {
        (ctx.io.announce_count > self.announce_baseline).then_some(ctx.io.last_announce).flatten()
    }

    fn issue(&mut self, ctx: &mut NodeCtx<'_>) {
        let app = self.plan.layout.regions.application;
        match self.stage {
            CampaignStage::Probe => match ctx.io.last_announce {
                Some(Program::Application) => self.enter(ctx, CampaignStage::AuthenticateApplication),
                Some(Program::Bootloader) => self.enter(ctx, CampaignStage::AuthenticateBootloader),
                Some(Program::Updater) => {
                    self.request(ctx, vec![LEAVE_TO_BOOT_MANAGER]);
                    self.stage = CampaignStage::AwaitBootloader;
                    self.stage_since = ctx.now;
                }
                Some(Program::BootManager) | None => {}
            },
            CampaignStage::AuthenticateApplication | CampaignStage::AuthenticateBootloader => self.start_uds(ctx),
            CampaignStage::EnterBootloader => self.request(ctx, vec![APP_ENTER_BOOT, 0x00]),
            CampaignStage::AwaitBootloader => match self.announced_since_baseline(ctx) {
                Some(Program::Bootloader) => self.enter(ctx, CampaignStage::AuthenticateBootloader),
                Some(_) => self.finish(ctx, CampaignOutcome::Failed(FailureReason::Timeout)),
                None => {}
            },
            CampaignStage::Erase => self.request(ctx, vec![FLASH_ERASE, MASS_ERASE_SECTOR, 0]),
            CampaignStage::Transfer => {
                let payload = match self.plan.mode {
                    UpdateMode::Full => {
                        let (addr, data) = &self.blocks[self.cursor];
                        mem_write_request(MEM_WRITE, *addr, data)
                    }
                    UpdateMode::Delta => {
                        let off = self.cursor * DELTA_CHUNK;
                        let end = (off + DELTA_CHUNK).min(self.package.len());
                        delta_data_request(off, &self.package[off..end])
                    }
                };
                self.request(ctx, payload);
            }
            CampaignStage::Apply => self.request(ctx, delta_apply_request(self.package.len())),
            CampaignStage::CommitMetadata => {
                let addr = metadata_region(&self.plan.layout).start;
                debug_assert!(addr >= app.start);
                let payload = mem_write_request(MEM_WRITE, addr, &self.metadata);
                self.request(ctx, payload);
            }
            CampaignStage::Launch => {
                self.request(ctx, vec![GO_TO_ADDR, FLAG_ENTER as u8, FLAG_NOT_ENTER as u8]);
            }
            CampaignStage::AwaitApplication => match self.announced_since_baseline(ctx) {
                Some(Program::Application) => {
                    self.stage = CampaignStage::Done;
                    self.finish(ctx, CampaignOutcome::Success);
                }
                Some(_) => self.finish(ctx, CampaignOutcome::Failed(FailureReason::BlockCrcMismatch)),
                None => {}
            },
            CampaignStage::Done => {}
        }
    }
}

impl Task for CampaignTask {
    fn name(&self) -> &str {
        "campaign"
    }

    fn priority(&self) -> Priority {
        Priority::App
    }

    fn state(&self, _ctx: &NodeCtx<'_>) -> TaskState {
        if self.outcome.is_some() {
            TaskState::Done
        } else {
            TaskState::Ready
        }
    }

    fn step(&mut self, ctx: &mut NodeCtx<'_>) {
        let now = ctx.now;
        if self.started.is_none() {
            self.started = Some(now);
            self.stage_since = now;
            let name = serde_json::to_string(&self.stage).expect("serializes").trim_matches('"').to_string();
            ctx.emit(EventKind::CampaignStage { stage: name });
        }
        if self.abort_requested {
            self.finish(ctx, CampaignOutcome::Failed(FailureReason::Aborted));
            return;
        }
        while let Some(msg) = ctx.io.inbox.pop_front() {
            if msg.first() == Some(&crate::bootflow::ANNOUNCE) {
                continue;
            }
            if let Some(client) = self.uds.as_mut() {
                if let Some(next) = client.on_response(&msg, now) {
                    ctx.send(&next);
                }
                if let Some(o) = client.outcome() {
                    self.on_uds_outcome(ctx, o);
                }
            } else {
                self.on_reply(ctx, &msg);
            }
            if self.outcome.is_some() {
                return;
            }
        }

        // A reset-inducing request counts as delivered once the target
        // announces its next program, even if the ACK was lost.
        if matches!(self.stage, CampaignStage::EnterBootloader | CampaignStage::Launch)
            && self.outstanding.is_some()
            && self.announced_since_baseline(ctx).is_some()
        {
            let baseline = self.announce_baseline;
            self.outstanding = None;
            self.on_ack(ctx, &[]);
            self.announce_baseline = baseline;
        }

        if let Some(client) = self.uds.as_mut() {
            if let Some(o) = client.poll_timeout(now) {
                self.on_uds_outcome(ctx, o);
            }
            return;
        }
        if let Some(out) = self.outstanding.as_mut() {
            if now.since(out.sent_at) >= self.plan.response_timeout {
                if out.attempts > self.plan.retry_budget {
                    self.finish(ctx, CampaignOutcome::Failed(FailureReason::Timeout));
                    return;
                }
                out.attempts += 1;
                out.sent_at = now;
                let p = out.payload.clone();
                ctx.send(&p);
            }
            return;
        }
        let waiting = matches!(
            self.stage,
            CampaignStage::Probe | CampaignStage::AwaitBootloader | CampaignStage::AwaitApplication
        );
        if waiting && now.since(self.stage_since) >= self.plan.response_timeout {
            self.finish(ctx, CampaignOutcome::Failed(FailureReason::Timeout));
            return;
        }
        if self.paused && !waiting {
            return;
        }
        if self.outcome.is_none() {
            self.issue(ctx);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counters {
    frames: u64,
    retransmissions: u64,
    bytes: u64,
    sectors: u32,
    flash: SimDuration,
}

fn counters(world: &World, target: NodeId) -> Counters {
    let mut c = Counters { bytes: world.bus.wire_stats().bytes, ..Default::default() };
    for n in &world.nodes {
        if let Some(e) = world.bus.endpoint(n.id) {
            c.frames += e.stats.frames_sent;
            c.retransmissions += e.stats.retransmissions;
        }
    }
    if let Some(ecu) = world.node_by_id(target).and_then(|n| n.ecu.as_ref()) {
        c.sectors = ecu.flash_stats.sectors_erased;
        c.flash = ecu.flash_stats.simulated_duration;
    }
    c
}

/// Installs a campaign on the world's master node, runs the world until
/// it finishes or `max_ticks` pass, and reports.
pub fn run_campaign(world: &mut World, plan: CampaignPlan, max_ticks: u64) -> Result<CampaignReport, CampaignError> {
    let target = plan.target;
    if world.node_by_id(target).and_then(|n| n.ecu.as_ref()).is_none() {
        return Err(CampaignError::UnknownTarget(target));
    }
    let master = world.nodes.iter().position(|n| n.ecu.is_none()).ok_or(CampaignError::NoMaster)?;
    let task = CampaignTask::new(plan)?;
    world.nodes[master].remove_task::<CampaignTask>();
    world.nodes[master].add_task(Box::new(task));
    let before = counters(world, target);
    let start = world.clock;
    let run =
        world.run_until(|w| w.nodes[master].task::<CampaignTask>().is_some_and(|t| t.outcome.is_some()), max_ticks);
    let after = counters(world, target);
    let boxed = world.nodes[master].remove_task::<CampaignTask>().expect("installed above");
    let task = boxed.as_any().downcast_ref::<CampaignTask>().expect("campaign task");
    let outcome = match run {
        RunOutcome::Met(_) => task.outcome.expect("predicate checked"),
        RunOutcome::Exhausted => CampaignOutcome::Failed(FailureReason::Timeout),
    };
    let started = task.started.unwrap_or(start);
    let total = task.finished.unwrap_or(world.clock).since(started);
    let flash = after.flash.saturating_sub(before.flash);
    let plan = &task.plan;
    Ok(CampaignReport {
        mode: plan.mode,
        old_image_crc: crc32(&plan.old_image),
        new_image_crc: crc32(&plan.new_image),
        new_image_length: plan.new_image.len(),
        frames_sent: after.frames - before.frames,
        bytes_on_bus: after.bytes - before.bytes,
        retransmissions: after.retransmissions - before.retransmissions,
        blocks_transferred: task.blocks_transferred,
        blocks_skipped: match plan.mode {
            UpdateMode::Full => 0,
            UpdateMode::Delta => task.total_blocks - task.blocks_changed,
        },
        sectors_erased: after.sectors - before.sectors,
        simulated_auth_duration: task.auth,
        simulated_transfer_duration: total.saturating_sub(task.auth).saturating_sub(flash),
        simulated_flash_duration: flash,
        total_simulated_duration: total,
        outcome,
        last_stage: task.stage,
    })
}

/// `1 − delta / full` over total simulated duration.
pub fn reduction_ratio(delta: &CampaignReport, full: &CampaignReport) -> Result<f64, CampaignError> {
    if delta.old_image_crc != full.old_image_crc
        || delta.new_image_crc != full.new_image_crc
        || delta.new_image_length != full.new_image_length
    {
        return Err(CampaignError::IncomparableReports);
    }
    if !delta.outcome.is_success() || !full.outcome.is_success() {
        return Err(CampaignError::UnsuccessfulReport);
    }
    let f = full.total_simulated_duration.as_micros() as f64;
    Ok(1.0 - delta.total_simulated_duration.as_micros() as f64 / f)
}
