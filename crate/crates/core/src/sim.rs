//! Deterministic discrete-time world: nodes on one CAN bus, prioritized
//! cooperative tasks, resets, a fault schedule and the node event log.
//!
//! One tick is one bus step followed by every node's Ready tasks in
//! priority order, each run to completion. The clock then advances by the
//! bus step's duration or 1 ms, whichever is longer.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bootflow::{BootDecision, Ecu, Program, ServeStatus, ANNOUNCE};
use crate::can::{send_segmented, CanBus, NodeId, SegmentedReceiver};
use crate::lka::{self, PidGains, TracePoint};
use crate::time::{SimDuration, SimTime};

pub const BASE_TICK: SimDuration = SimDuration::from_millis(1);
/// Master to target.
pub const REQUEST_ID: u16 = 0x7E0;
/// Target to master.
pub const RESPONSE_ID: u16 = 0x7E8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Comm = 0,
    Nvm = 1,
    App = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Ready,
    Blocked,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetKind {
    Software,
    PowerCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EventKind {
    Boot {
        program: Program,
    },
    Decision {
        decision: BootDecision,
    },
    CommandServed {
        program: Program,
        code: u8,
        #[serde(flatten)]
        status: ServeStatus,
    },
    Reset {
        reset: ResetKind,
    },
    Rollback {
        cause: String,
    },
    BootloaderUpdated,
    TransportError {
        error: String,
    },
    Deviation {
        deviation_m: f64,
        target_deg: f64,
        motor_order: u8,
    },
    MalformedDeviation {
        line: String,
    },
    FirstCommand {
        command: f64,
    },
    CampaignStage {
        stage: String,
    },
    CampaignFinished {
        outcome: String,
    },
    Fault {
        fault: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: u64,
    pub node: String,
    pub event: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, time: SimTime, node: &str, event: EventKind) {
        self.events.push(Event { time: time.as_micros(), node: node.to_string(), event });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("events serialize"));
            s.push('\n');
        }
        s
    }
}

/// Per-node transport and inbox state. Cleared by any reset.
#[derive(Debug, Clone, Default)]
pub struct NodeIo {
    pub tx_id: u16,
    pub receivers: BTreeMap<u16, SegmentedReceiver>,
    pub inbox: VecDeque<Vec<u8>>,
    /// Program announcements seen from peers, and how many.
    pub last_announce: Option<Program>,
    pub announce_count: u64,
}

impl NodeIo {
    fn clear(&mut self) {
        self.receivers.clear();
        self.inbox.clear();
    }
}

/// Scheduled deviation input for the application.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviationFeed {
    pub lines: Vec<(SimTime, String)>,
    pub cursor: usize,
}

/// Everything a task may touch while it runs.
pub struct NodeCtx<'a> {
    pub now: SimTime,
    pub node: NodeId,
    pub name: &'a str,
    pub bus: &'a mut CanBus,
    pub ecu: Option<&'a mut Ecu>,
    pub io: &'a mut NodeIo,
    pub log: &'a mut EventLog,
    pub reset_request: &'a mut Option<ResetKind>,
    pub feed: &'a mut DeviationFeed,
    pub lka_trace: &'a mut Vec<TracePoint>,
}

impl NodeCtx<'_> {
    pub fn emit(&mut self, event: EventKind) {
        self.log.push(self.now, self.name, event);
    }

    /// Queues a segmented message on this node's transmit id.
    pub fn send(&mut self, payload: &[u8]) {
        if let Err(e) = send_segmented(self.bus, self.node, self.io.tx_id, payload) {
            let error = e.to_string();
            self.emit(EventKind::TransportError { error });
        }
    }
}

pub trait Task: Send {
    fn name(&self) -> &str;
    fn priority(&self) -> Priority;
    fn state(&self, ctx: &NodeCtx<'_>) -> TaskState;
    fn step(&mut self, ctx: &mut NodeCtx<'_>);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub ecu: Option<Ecu>,
    pub io: NodeIo,
    pub tasks: Vec<Box<dyn Task>>,
    pub pending_reset: Option<ResetKind>,
    pub feed: DeviationFeed,
    pub lka_trace: Vec<TracePoint>,
}

impl Node {
    pub fn new(id: NodeId, name: &str, tx_id: u16) -> Self {
        Node {
            id,
            name: name.to_string(),
            ecu: None,
            io: NodeIo { tx_id, ..Default::default() },
            tasks: Vec::new(),
            pending_reset: None,
            feed: DeviationFeed::default(),
            lka_trace: Vec::new(),
        }
    }

    /// Adds a task, keeping the list in priority order; equal priorities
    /// keep insertion order.
    pub fn add_task(&mut self, task: Box<dyn Task>) {
        let pos = self.tasks.iter().position(|t| t.priority() > task.priority()).unwrap_or(self.tasks.len());
        self.tasks.insert(pos, task);
    }

    pub fn task<T: 'static>(&self) -> Option<&T> {
        self.tasks.iter().find_map(|t| t.as_any().downcast_ref::<T>())
    }

    pub fn task_mut<T: 'static>(&mut self) -> Option<&mut T> {
        self.tasks.iter_mut().find_map(|t| t.as_any_mut().downcast_mut::<T>())
    }

    pub fn remove_task<T: 'static>(&mut self) -> Option<Box<dyn Task>> {
        let pos = self.tasks.iter().position(|t| t.as_any().is::<T>())?;
        Some(self.tasks.remove(pos))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    PowerCycle { node: String },
    SoftwareReset { node: String },
    SetFaultRates { corruption_probability: f64, drop_probability: f64 },
    PauseCampaign,
    ResumeCampaign,
    AbortCampaign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub at: SimTime,
    pub action: FaultAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Met(SimTime),
    Exhausted,
}

pub struct World {
    pub clock: SimTime,
    pub bus: CanBus,
    pub nodes: Vec<Node>,
    pub seed: u64,
    pub log: EventLog,
    pub faults: Vec<ScheduledFault>,
    pub ticks: u64,
}

impl World {
    pub fn new(bus: CanBus, seed: u64) -> Self {
        World {
            clock: SimTime::ZERO,
            bus,
            nodes: Vec::new(),
            seed,
            log: EventLog::default(),
            faults: Vec::new(),
            ticks: 0,
        }
    }

    pub fn add_node(&mut self, node: Node) {
        self.nodes.push(node);
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn node_by_id(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_by_id_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn schedule(&mut self, fault: ScheduledFault) {
        let pos = self.faults.iter().position(|f| f.at > fault.at).unwrap_or(self.faults.len());
        self.faults.insert(pos, fault);
    }

    /// Restarts a node at the boot manager. Backup registers survive a
    /// software reset; a power-cycle clears them.
    pub fn reset_node(&mut self, idx: usize, kind: ResetKind) {
        let now = self.clock;
        let node = &mut self.nodes[idx];
        if let Some(ecu) = node.ecu.as_mut() {
            ecu.flash.advance_to(now);
            ecu.reset(kind == ResetKind::PowerCycle);
        }
        node.io.clear();
        node.pending_reset = None;
        self.bus.reset_endpoint(node.id);
        self.log.push(now, &node.name, EventKind::Reset { reset: kind });
    }

    pub fn software_reset(&mut self, name: &str) {
        if let Some(i) = self.nodes.iter().position(|n| n.name == name) {
            self.reset_node(i, ResetKind::Software);
        }
    }

    pub fn power_cycle(&mut self, name: &str) {
        if let Some(i) = self.nodes.iter().position(|n| n.name == name) {
            self.reset_node(i, ResetKind::PowerCycle);
        }
    }

    fn apply_due_faults(&mut self) {
        while self.faults.first().is_some_and(|f| f.at <= self.clock) {
            let f = self.faults.remove(0);
            let desc = serde_json::to_string(&f.action).expect("fault serializes");
            self.log.push(self.clock, "world", EventKind::Fault { fault: desc });
            match f.action {
                FaultAction::PowerCycle { node } => self.power_cycle(&node),
                FaultAction::SoftwareReset { node } => self.software_reset(&node),
                FaultAction::SetFaultRates { corruption_probability, drop_probability } => {
                    // Out-of-range rates were rejected when the scenario loaded.
                    let _ = self.bus.set_fault_rates(corruption_probability, drop_probability);
                }
                FaultAction::PauseCampaign => self.with_campaign(|c| c.pause()),
                FaultAction::ResumeCampaign => self.with_campaign(|c| c.resume()),
                FaultAction::AbortCampaign => self.with_campaign(|c| c.abort()),
            }
        }
    }

    fn with_campaign(&mut self, f: impl Fn(&mut crate::orchestrator::CampaignTask)) {
        for n in &mut self.nodes {
            if let Some(c) = n.task_mut::<crate::orchestrator::CampaignTask>() {
                f(c);
            }
        }
    }

    /// Advances the world by one tick and returns the events it produced.
    pub fn tick(&mut self) -> &[Event] {
        let first_event = self.log.len();
        self.apply_due_faults();
        let now = self.clock;
        let step = self.bus.step(now);
        for idx in 0..self.nodes.len() {
            let node = &mut self.nodes[idx];
            if let Some(ecu) = node.ecu.as_mut() {
                ecu.flash.advance_to(now);
            }
            let Node { id, name, ecu, io, tasks, pending_reset, feed, lka_trace } = node;
            for task in tasks.iter_mut() {
                let mut ctx = NodeCtx {
                    now,
                    node: *id,
                    name,
                    bus: &mut self.bus,
                    ecu: ecu.as_mut(),
                    io,
                    log: &mut self.log,
                    reset_request: pending_reset,
                    feed,
                    lka_trace,
                };
                if task.state(&ctx) == TaskState::Ready {
                    task.step(&mut ctx);
                }
            }
            // A requested reset waits until the reply frames have left.
            let node = &self.nodes[idx];
            if let Some(kind) = node.pending_reset {
                if self.bus.endpoint(node.id).is_none_or(|e| e.tx_pending() == 0) {
                    self.reset_node(idx, kind);
                }
            }
        }
        self.clock += step.elapsed.max(BASE_TICK);
        self.ticks += 1;
        &self.log.events()[first_event..]
    }

    /// Ticks until `predicate` holds or `max_ticks` have run. `Met` carries
    /// the start time of the tick after which the predicate first held.
    pub fn run_until(&mut self, mut predicate: impl FnMut(&World) -> bool, max_ticks: u64) -> RunOutcome {
        if predicate(self) {
            return RunOutcome::Met(self.clock);
        }
        for _ in 0..max_ticks {
            let start = self.clock;
            self.tick();
            if predicate(self) {
                return RunOutcome::Met(start);
            }
        }
        RunOutcome::Exhausted
    }
}

/// Reassembles incoming segmented messages into the node's inbox and
/// records program announcements.
#[derive(Debug, Default)]
pub struct CommTask;

impl Task for CommTask {
    fn name(&self) -> &str {
        "comm"
    }

    fn priority(&self) -> Priority {
        Priority::Comm
    }

    fn state(&self, ctx: &NodeCtx<'_>) -> TaskState {
        match ctx.bus.endpoint(ctx.node) {
            Some(e) if !e.rx_fifo.is_empty() => TaskState::Ready,
            _ => TaskState::Blocked,
        }
    }

    fn step(&mut self, ctx: &mut NodeCtx<'_>) {
        while let Some(frame) = ctx.bus.receive(ctx.node) {
            let rx = ctx.io.receivers.entry(frame.id).or_default();
            match rx.push(&frame) {
                Ok(Some(msg)) => {
                    if let [ANNOUNCE, code] = msg[..] {
                        if let Some(p) = Program::from_code(code) {
                            ctx.io.last_announce = Some(p);
                            ctx.io.announce_count += 1;
                        }
                    }
                    ctx.io.inbox.push_back(msg);
                }
                Ok(None) => {}
                Err(e) => ctx.emit(EventKind::TransportError { error: e.to_string() }),
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Target-side boot chain and command execution. Blocks while the flash
/// is busy; deferred replies go out once the operation has finished.
#[derive(Debug, Default)]
pub struct NvmTask;

impl Task for NvmTask {
    fn name(&self) -> &str {
        "nvm"
    }

    fn priority(&self) -> Priority {
        Priority::Nvm
    }

    fn state(&self, ctx: &NodeCtx<'_>) -> TaskState {
        let Some(ecu) = ctx.ecu.as_deref() else {
            return TaskState::Done;
        };
        if ctx.reset_request.is_some() || ecu.flash.is_busy() {
            return TaskState::Blocked;
        }
        let work = ecu.program == Program::BootManager
            || ecu.ram.pending_reply.is_some()
            || ecu.ram.silent.is_some()
            || !ctx.io.inbox.is_empty();
        if work {
            TaskState::Ready
        } else {
            TaskState::Blocked
        }
    }

    fn step(&mut self, ctx: &mut NodeCtx<'_>) {
        let now = ctx.now;
        let ecu = ctx.ecu.take().expect("state() checked for an ECU");
        if let Some(reply) = ecu.ram.pending_reply.take() {
            ctx.send(&reply);
            if ecu.ram.reset_after_reply {
                *ctx.reset_request = Some(ResetKind::Software);
            }
            return;
        }
        if ecu.program == Program::BootManager {
            let decision = ecu.boot();
            ctx.emit(EventKind::Decision { decision });
            ctx.emit(EventKind::Boot { program: ecu.program });
            ctx.send(&ecu.program.announce());
            return;
        }
        if ecu.ram.silent.is_some() {
            match ecu.step_silent_updater() {
                None => {}
                Some(Ok(())) => {
                    ctx.emit(EventKind::BootloaderUpdated);
                    *ctx.reset_request = Some(ResetKind::Software);
                }
                Some(Err(e)) => {
                    ctx.emit(EventKind::Rollback { cause: e.to_string() });
                    *ctx.reset_request = Some(ResetKind::Software);
                }
            }
            return;
        }
        let Some(msg) = ctx.io.inbox.pop_front() else {
            return;
        };
        let program = ecu.program;
        let served = ecu.serve(&msg, now);
        ctx.emit(EventKind::CommandServed { program, code: served.code, status: served.status });
        if let Some(reply) = served.reply {
            if ecu.flash.busy_until() > now {
                ecu.ram.pending_reply = Some(reply);
                ecu.ram.reset_after_reply = served.reset;
                return;
            }
            ctx.send(&reply);
        }
        if served.reset {
            *ctx.reset_request = Some(ResetKind::Software);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// The lane-keep-assist application. Runs every tick while the target is
/// in its application, consuming scheduled deviation lines.
#[derive(Debug, Default)]
pub struct AppTask;

impl Task for AppTask {
    fn name(&self) -> &str {
        "app"
    }

    fn priority(&self) -> Priority {
        Priority::App
    }

    fn state(&self, ctx: &NodeCtx<'_>) -> TaskState {
        match ctx.ecu.as_deref() {
            Some(e) if e.program == Program::Application => TaskState::Ready,
            Some(_) => TaskState::Blocked,
            None => TaskState::Done,
        }
    }

    fn step(&mut self, ctx: &mut NodeCtx<'_>) {
        let now = ctx.now;
        let ecu = ctx.ecu.take().expect("state() checked for an ECU");
        let ram = &mut ecu.ram;
        if ram.gains.is_none() {
            let app = ecu.flash.layout().regions.application;
            let head = ecu.flash.read_slice(app.start, 2 * lka::PARAM_BLOCK_SIZE).unwrap_or(&[]);
            ram.gains = Some(lka::read_gains(head).unwrap_or_default());
        }
        let gains: PidGains = ram.gains.expect("set above");
        while let Some((at, line)) = ctx.feed.lines.get(ctx.feed.cursor).cloned() {
            if at > now {
                break;
            }
            ctx.feed.cursor += 1;
            match lka::parse_deviation_line(&line) {
                Ok(dev) => {
                    let target = lka::deviation_to_target(dev).expect("parsed values are finite");
                    let order = lka::motor_order(dev, lka::DEFAULT_THRESHOLD_M).expect("finite");
                    ram.lka_target = Some(target);
                    ram.lka_commanded = false;
                    ctx.log.push(
                        now,
                        ctx.name,
                        EventKind::Deviation { deviation_m: dev, target_deg: target, motor_order: order },
                    );
                }
                Err(_) => ctx.log.push(now, ctx.name, EventKind::MalformedDeviation { line }),
            }
        }
        let last = ram.lka_last_run.replace(now);
        let (Some(target), Some(last)) = (ram.lka_target, last) else {
            return;
        };
        let dt = now.since(last).as_secs_f64();
        if dt <= 0.0 {
            return;
        }
        let error = target - ram.lka.position;
        if let Ok((cmd, next)) = lka::pid_step(&ram.lka, &gains, error, dt) {
            ram.lka = next;
            lka::plant_step(&mut ram.lka, cmd, dt);
            if !ram.lka_commanded && cmd != 0.0 {
                ram.lka_commanded = true;
                ctx.log.push(now, ctx.name, EventKind::FirstCommand { command: cmd });
            }
            ctx.lka_trace.push(TracePoint {
                time_s: now.as_micros() as f64 / 1e6,
                error_deg: (target - ram.lka.position).abs(),
            });
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// A target node running the standard ECU task set.
pub fn ecu_node(id: NodeId, name: &str, ecu: Ecu) -> Node {
    let mut n = Node::new(id, name, RESPONSE_ID);
    n.ecu = Some(ecu);
    n.add_task(Box::new(CommTask));
    n.add_task(Box::new(NvmTask));
    n.add_task(Box::new(AppTask));
    n
}

/// A master node with only its receive task; campaigns add their own.
pub fn master_node(id: NodeId, name: &str) -> Node {
    let mut n = Node::new(id, name, REQUEST_ID);
    n.add_task(Box::new(CommTask));
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::{AcceptanceFilter, BusConfig};
    use crate::flash::FlashDevice;
    use crate::nvstore::{BootFlag, FlagSlot};
    use crate::uds::SecuritySession;

    fn world_with_target(app: Option<&[u8]>) -> World {
        let mut bus = CanBus::new(BusConfig::default()).unwrap();
        bus.attach(NodeId(1), vec![AcceptanceFilter::exact(RESPONSE_ID)]).unwrap();
        bus.attach(NodeId(2), vec![AcceptanceFilter::exact(REQUEST_ID)]).unwrap();
        let mut w = World::new(bus, 1);
        let mut ecu = Ecu::new(FlashDevice::stm32f401(), SecuritySession::new(7, 7));
        if let Some(a) = app {
            ecu.install_application(a).unwrap();
            ecu.regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::Enter);
        }
        w.add_node(master_node(NodeId(1), "master"));
        w.add_node(ecu_node(NodeId(2), "target", ecu));
        w
    }

    #[test]
    fn empty_world_advances_one_base_tick() {
        let bus = CanBus::new(BusConfig::default()).unwrap();
        let mut w = World::new(bus, 0);
        assert!(w.tick().is_empty());
        assert_eq!(w.clock, SimTime::from_micros(1000));
    }

    #[test]
    fn target_boots_and_announces() {
        let mut w = world_with_target(Some(&[1u8; 4096]));
        let r = w.run_until(|w| w.node("master").unwrap().io.last_announce.is_some(), 100);
        assert!(matches!(r, RunOutcome::Met(_)));
        assert_eq!(w.node("master").unwrap().io.last_announce, Some(Program::Application));
        let e = &w.log.events()[0];
        assert_eq!(e.event, EventKind::Decision { decision: BootDecision::JumpApplication });
    }

    #[test]
    fn software_reset_keeps_flags_power_cycle_clears() {
        let mut w = world_with_target(Some(&[1u8; 4096]));
        w.run_until(|_| false, 5);
        w.software_reset("target");
        w.run_until(|_| false, 5);
        assert_eq!(w.node("target").unwrap().ecu.as_ref().unwrap().program, Program::Application);
        w.power_cycle("target");
        w.run_until(|_| false, 5);
        let ecu = w.node("target").unwrap().ecu.as_ref().unwrap();
        assert_eq!(ecu.program, Program::Bootloader);
        assert_eq!(ecu.regs.read_flag(FlagSlot::ApplicationEnter), BootFlag::NotEnter);
    }

    #[test]
    fn exhausted_when_never_met() {
        let mut w = world_with_target(None);
        assert_eq!(w.run_until(|_| false, 10), RunOutcome::Exhausted);
        assert_eq!(w.ticks, 10);
    }

    #[test]
    fn met_time_matches_event_time() {
        let mut w = world_with_target(None);
        let r = w.run_until(|w| w.log.events().iter().any(|e| matches!(e.event, EventKind::Boot { .. })), 10);
        let boot = w.log.events().iter().find(|e| matches!(e.event, EventKind::Boot { .. })).unwrap();
        assert_eq!(r, RunOutcome::Met(SimTime::from_micros(boot.time)));
    }

    struct Probe {
        prio: Priority,
        runs: u32,
        saw_inbox: bool,
    }

    impl Task for Probe {
        fn name(&self) -> &str {
            "probe"
        }
        fn priority(&self) -> Priority {
            self.prio
        }
        fn state(&self, _: &NodeCtx<'_>) -> TaskState {
            TaskState::Ready
        }
        fn step(&mut self, ctx: &mut NodeCtx<'_>) {
            self.runs += 1;
            self.saw_inbox |= !ctx.io.inbox.is_empty();
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    #[test]
    fn comm_effects_visible_to_app_same_tick_and_no_starvation() {
        let mut w = world_with_target(Some(&[1u8; 4096]));
        w.node_mut("master").unwrap().add_task(Box::new(Probe { prio: Priority::App, runs: 0, saw_inbox: false }));
        assert_eq!(w.node("master").unwrap().tasks[0].priority(), Priority::Comm);
        // Nothing drains the master inbox, so once the announce lands the
        // probe sees it in the very tick Comm delivered it.
        let ticks = 50;
        w.run_until(|_| false, ticks);
        let p = w.node("master").unwrap().task::<Probe>().unwrap();
        assert_eq!(p.runs as u64, ticks);
        assert!(p.saw_inbox);
    }

    #[test]
    fn first_nonzero_command_follows_deviation_within_a_tick() {
        let mut w = world_with_target(Some(&[1u8; 4096]));
        let at = SimTime::from_micros(100_500);
        w.node_mut("target").unwrap().feed.lines.push((at, "+0.25\n".into()));
        w.run_until(|_| false, 200);
        let time_of = |want: fn(&EventKind) -> bool| {
            w.log.events().iter().find(|e| e.node == "target" && want(&e.event)).map(|e| e.time)
        };
        let dev = time_of(|k| matches!(k, EventKind::Deviation { .. })).unwrap();
        let first = time_of(|k| matches!(k, EventKind::FirstCommand { .. })).unwrap();
        assert!(dev >= at.as_micros() && dev < at.as_micros() + 1000);
        assert_eq!(first, dev);
    }

    #[test]
    fn reset_mid_program_keeps_written_prefix() {
        let mut w = world_with_target(None);
        let t = w.node_mut("target").unwrap().ecu.as_mut().unwrap();
        t.flash.unlock_default().unwrap();
        let start = 200_000;
        t.flash.program(start, &[0u8; 4000]).unwrap();
        // 1000 words at 16 us; cut after 10 words.
        t.flash.advance_to(SimTime::from_micros(160));
        w.clock = SimTime::from_micros(160);
        w.power_cycle("target");
        let cells = w.node("target").unwrap().ecu.as_ref().unwrap().flash.read_slice(start, 4000).unwrap();
        assert!(cells[..40].iter().all(|&b| b == 0));
        assert!(cells[40..].iter().all(|&b| b == 0xFF));
    }
}
