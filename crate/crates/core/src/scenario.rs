//! JSON scenario files: one master, one target ECU, an optional campaign,
//! deviation input for the application and a fault schedule.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::bootflow::{boot_decide, BootDecision, Ecu, Program, UpdaterConfig, UpdaterMode};
use crate::can::{AcceptanceFilter, BusConfig, CanBus, CanError, NodeId};
use crate::delta::DeltaError;
use crate::flash::FlashDevice;
use crate::integrity::{crc32, DEFAULT_BLOCK_SIZE};
use crate::lka::{pack_image, read_gains, trace_csv, PidGains};
use crate::nvstore::{BootFlag, FlagSlot};
use crate::orchestrator::{run_campaign, CampaignError, CampaignPlan, CampaignReport, CampaignStage, UpdateMode};
use crate::sim::{ecu_node, master_node, ScheduledFault, World, REQUEST_ID, RESPONSE_ID};
use crate::time::{SimDuration, SimTime};
use crate::uds::SecuritySession;

pub const MASTER_ID: NodeId = NodeId(1);
pub const TARGET_ID: NodeId = NodeId(2);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Bus(#[from] CanError),
    #[error(transparent)]
    Firmware(#[from] DeltaError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
}

/// Where an image comes from. Paths resolve against the scenario's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path(String),
    Random { random: RandomImage },
    Mutate { mutate: Box<Mutation> },
    LkaApp { lka_app: LkaImage },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomImage {
    pub len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub base: ImageSource,
    /// Block indices whose bytes get rewritten.
    #[serde(default)]
    pub blocks: Vec<usize>,
    #[serde(default = "default_bytes_per_block")]
    pub bytes_per_block: usize,
    /// Replaces the LKA parameter block.
    #[serde(default)]
    pub gains: Option<[f64; 3]>,
    #[serde(default)]
    pub seed: u64,
}

fn default_bytes_per_block() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LkaImage {
    pub len: usize,
    pub seed: u64,
    #[serde(default = "default_gains")]
    pub gains: [f64; 3],
}

fn default_gains() -> [f64; 3] {
    let g = PidGains::default();
    [g.kp, g.ki, g.kd]
}

fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

impl ImageSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<Vec<u8>, ScenarioError> {
        match self {
            ImageSource::Path(p) => {
                let path = base_dir.join(p);
                fs::read(&path).map_err(|source| ScenarioError::Io { path, source })
            }
            ImageSource::Random { random } => Ok(random_bytes(random.len, random.seed)),
            ImageSource::LkaApp { lka_app } => {
                let [kp, ki, kd] = lka_app.gains;
                let gains = PidGains::new(kp, ki, kd).map_err(|e| ScenarioError::Image(e.to_string()))?;
                Ok(pack_image(&random_bytes(lka_app.len, lka_app.seed), &gains))
            }
            ImageSource::Mutate { mutate } => {
                let mut img = mutate.base.resolve(base_dir)?;
                let mut rng = ChaCha8Rng::seed_from_u64(mutate.seed);
                let bs = DEFAULT_BLOCK_SIZE;
                for &b in &mutate.blocks {
                    let start = b * bs;
                    let end = (start + bs).min(img.len());
                    if start >= end {
                        return Err(ScenarioError::Image(format!("block {b} is outside a {} byte image", img.len())));
                    }
                    for _ in 0..mutate.bytes_per_block {
                        let at = rng.gen_range(start..end);
                        img[at] ^= rng.gen_range(1..=255u8);
                    }
                }
                if let Some([kp, ki, kd]) = mutate.gains {
                    let gains = PidGains::new(kp, ki, kd).map_err(|e| ScenarioError::Image(e.to_string()))?;
                    img = pack_image(&img, &gains);
                }
                Ok(img)
            }
        }
    }
}

fn secret_value<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u32),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(n) => Ok(n),
        Raw::Text(s) => {
            let t = s.trim_start_matches("0x").trim_start_matches("0X");
            u32::from_str_radix(t, 16).map_err(serde::de::Error::custom)
        }
    }
}

fn opt_secret<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u32>, D::Error> {
    #[derive(Deserialize)]
    struct Wrapped(#[serde(deserialize_with = "secret_value")] u32);
    Ok(Option::<Wrapped>::deserialize(d)?.map(|w| w.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub app_enter: bool,
    pub updater_enter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdaterSpec {
    pub mode: UpdaterMode,
    pub image: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Deviations {
    pub start_ms: u64,
    pub interval_ms: u64,
    pub lines: Vec<String>,
}

impl Default for Deviations {
    fn default() -> Self {
        Deviations { start_ms: 0, interval_ms: 10, lines: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(default = "default_target_name")]
    pub name: String,
    #[serde(deserialize_with = "secret_value")]
    pub secret: u32,
    pub application: ImageSource,
    #[serde(default)]
    pub bootloader: Option<ImageSource>,
    #[serde(default)]
    pub updater: Option<UpdaterSpec>,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default = "default_version")]
    pub version: (u8, u8, u8),
    #[serde(default)]
    pub deviations: Deviations,
}

fn default_target_name() -> String {
    "target".into()
}

fn default_version() -> (u8, u8, u8) {
    (1, 0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub mode: UpdateMode,
    pub new_image: ImageSource,
    /// Defaults to the target's secret.
    #[serde(default, deserialize_with = "opt_secret")]
    pub secret: Option<u32>,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default)]
    pub abort_after: Option<CampaignStage>,
    /// Ticks to keep running once the campaign has finished.
    #[serde(default)]
    pub settle_ticks: u64,
}

fn default_retry_budget() -> u32 {
    crate::orchestrator::DEFAULT_RETRY_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bus: BusConfig,
    pub target: TargetSpec,
    #[serde(default)]
    pub campaign: Option<CampaignSpec>,
    #[serde(default)]
    pub faults: Vec<ScheduledFault>,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_max_ticks() -> u64 {
    crate::orchestrator::DEFAULT_MAX_TICKS
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub ticks: u64,
    pub final_time_us: u64,
    pub campaign: Option<CampaignReport>,
    pub target_program: Program,
    pub boot_decision: BootDecision,
    pub app_image_crc: Option<u32>,
    pub app_matches_new_image: Option<bool>,
    pub gains: Option<PidGains>,
    pub lka_final_error_deg: Option<f64>,
    pub events: usize,
    pub event_log_crc: u32,
    pub wire_frames: u64,
}

impl ScenarioReport {
    pub fn succeeded(&self) -> bool {
        self.campaign.as_ref().is_none_or(|c| c.outcome.is_success())
    }
}

/// A master on [`MASTER_ID`] and one target ECU on [`TARGET_ID`] sharing a
/// bus.
pub fn standard_world(bus: BusConfig, seed: u64, target_name: &str, ecu: Ecu) -> Result<World, CanError> {
    let mut bus = CanBus::new(bus)?;
    bus.attach(MASTER_ID, vec![AcceptanceFilter::exact(RESPONSE_ID)])?;
    bus.attach(TARGET_ID, vec![AcceptanceFilter::exact(REQUEST_ID)])?;
    let mut world = World::new(bus, seed);
    world.add_node(master_node(MASTER_ID, "master"));
    world.add_node(ecu_node(TARGET_ID, target_name, ecu));
    Ok(world)
}

/// Finished run: the report plus everything needed for trace export.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub world: World,
}

impl Scenario {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut s: Scenario = serde_json::from_str(text)?;
        s.base_dir = base_dir.to_path_buf();
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &dir)
    }

    /// Assembles the world without running it.
    pub fn build_world(&self) -> Result<World, ScenarioError> {
        let t = &self.target;
        let session = SecuritySession::new(t.secret, self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) as u32);
        let mut ecu = Ecu::new(FlashDevice::stm32f401(), session);
        ecu.version = t.version;
        let bootloader = match &t.bootloader {
            Some(src) => src.resolve(&self.base_dir)?,
            None => random_bytes(4096, self.seed ^ 0xB007),
        };
        ecu.install_bootloader(&bootloader)?;
        ecu.install_application(&t.application.resolve(&self.base_dir)?)?;
        if let Some(u) = &t.updater {
            ecu.updater = Some(UpdaterConfig { mode: u.mode, image: u.image.resolve(&self.base_dir)? });
        }
        let flag = |on: bool| if on { BootFlag::Enter } else { BootFlag::NotEnter };
        ecu.regs.write_flag(FlagSlot::ApplicationEnter, flag(t.flags.app_enter));
        ecu.regs.write_flag(FlagSlot::UpdaterEnter, flag(t.flags.updater_enter));

        let mut cfg = self.bus.clone();
        cfg.rng_seed = self.seed;
        let mut world = standard_world(cfg, self.seed, &t.name, ecu)?;
        let d = &t.deviations;
        let node = world.node_mut(&t.name).expect("just added");
        node.feed.lines = d
            .lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let at = SimTime::ZERO + SimDuration::from_millis(d.start_ms + i as u64 * d.interval_ms);
                (at, format!("{}\n", l.trim_end()))
            })
            .collect();
        for f in &self.faults {
            world.schedule(f.clone());
        }
        Ok(world)
    }

    pub fn run(&self, trace: bool) -> Result<ScenarioRun, ScenarioError> {
        let mut world = self.build_world()?;
        if trace {
            world.bus.enable_trace();
        }
        let old = self.target.application.resolve(&self.base_dir)?;
        let mut new_image = None;
        let campaign = match &self.campaign {
            Some(c) => {
                let new = c.new_image.resolve(&self.base_dir)?;
                let mut plan =
                    CampaignPlan::new(c.mode, old, new.clone(), TARGET_ID, c.secret.unwrap_or(self.target.secret));
                plan.retry_budget = c.retry_budget;
                plan.abort_after = c.abort_after;
                new_image = Some(new);
                let report = run_campaign(&mut world, plan, self.max_ticks)?;
                for _ in 0..c.settle_ticks {
                    world.tick();
                }
                Some(report)
            }
            None => {
                for _ in 0..self.max_ticks {
                    world.tick();
                }
                None
            }
        };
        let report = summarize(self, &world, campaign, new_image.as_deref());
        Ok(ScenarioRun { report, world })
    }
}

fn summarize(
    s: &Scenario,
    world: &World,
    campaign: Option<CampaignReport>,
    new_image: Option<&[u8]>,
) -> ScenarioReport {
    let node = world.node(&s.target.name).expect("target node is always present");
    let ecu = node.ecu.as_ref().expect("target has an ECU");
    let app = ecu.application_image();
    let mut regs = ecu.regs.clone();
    let log = world.log.to_jsonl();
    ScenarioReport {
        name: s.name.clone(),
        seed: s.seed,
        ticks: world.ticks,
        final_time_us: world.clock.as_micros(),
        campaign,
        target_program: ecu.program,
        boot_decision: boot_decide(&ecu.flash, &mut regs),
        app_image_crc: app.as_deref().map(crc32),
        app_matches_new_image: new_image.map(|n| app.as_deref() == Some(n)),
        gains: app.as_deref().and_then(read_gains),
        lka_final_error_deg: node.lka_trace.last().map(|p| p.error_deg),
        events: world.log.len(),
        event_log_crc: crc32(log.as_bytes()),
        wire_frames: world.bus.wire_stats().frames,
    }
}

/// Writes `events.jsonl`, `frames.csv` and `lka_trace.csv` into `dir`.
pub fn write_trace(run: &ScenarioRun, target: &str, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("events.jsonl"), run.world.log.to_jsonl())?;
    let mut frames = String::from("time_us,id_hex,dlc,data_hex,kind\n");
    for r in run.world.bus.trace() {
        frames.push_str(&r.csv_line());
        frames.push('\n');
    }
    fs::write(dir.join("frames.csv"), frames)?;
    let lka = run.world.node(target).map(|n| trace_csv(&n.lka_trace)).unwrap_or_default();
    fs::write(dir.join("lka_trace.csv"), lka)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(extra: &str) -> Scenario {
        let text = format!(
            r#"{{
                "name": "t", "seed": 3,
                "target": {{ "secret": "0xC0FFEE01", "application": {{ "lka_app": {{ "len": 8192, "seed": 1 }} }},
                             "flags": {{ "app_enter": true }} }}
                {extra}
            }}"#
        );
        Scenario::from_json(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn image_sources_are_deterministic() {
        let src: ImageSource = serde_json::from_str(
            r#"{"mutate": {"base": {"random": {"len": 4096, "seed": 9}}, "blocks": [2], "seed": 1}}"#,
        )
        .unwrap();
        let a = src.resolve(Path::new(".")).unwrap();
        let b = src.resolve(Path::new(".")).unwrap();
        assert_eq!(a, b);
        let base = random_bytes(4096, 9);
        let diff: Vec<usize> = (0..4096).filter(|&i| a[i] != base[i]).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|&i| (2048..3072).contains(&i)));
    }

    #[test]
    fn secret_accepts_hex_and_number() {
        let s = scenario("");
        assert_eq!(s.target.secret, 0xC0FF_EE01);
        let t: TargetSpec = serde_json::from_str(r#"{"secret": 17, "application": "x.bin"}"#).unwrap();
        assert_eq!(t.secret, 17);
        let campaign = |secret: &str| {
            let text = format!(r#"{{"mode": "full", "new_image": "x.bin", "secret": {secret}}}"#);
            serde_json::from_str::<CampaignSpec>(&text).unwrap().secret
        };
        assert_eq!(campaign("null"), None);
        assert_eq!(campaign(r#""0x10""#), Some(16));
    }

    #[test]
    fn gains_update_campaign() {
        let s = scenario(
            r#", "max_ticks": 100000,
               "campaign": { "mode": "delta",
                 "new_image": { "mutate": { "base": { "lka_app": { "len": 8192, "seed": 1 } }, "gains": [3.0, 0.2, 0.4] } } }"#,
        );
        let run = s.run(false).unwrap();
        let r = &run.report;
        assert!(r.succeeded(), "{r:?}");
        assert_eq!(r.campaign.as_ref().unwrap().blocks_transferred, 1);
        assert_eq!(r.app_matches_new_image, Some(true));
        assert_eq!(r.gains, Some(PidGains::new(3.0, 0.2, 0.4).unwrap()));
        assert_eq!(r.boot_decision, BootDecision::JumpApplication);
    }

    #[test]
    fn missing_image_file_is_io_error() {
        let text = r#"{"target": {"secret": 1, "application": "does-not-exist.bin"}}"#;
        let s = Scenario::from_json(text, Path::new("/nonexistent")).unwrap();
        assert!(matches!(s.build_world(), Err(ScenarioError::Io { .. })));
    }
}
