// The same update sent as a full image and as a delta, end to end over the
// simulated network, with the resulting statistics side by side.

use fotasim::bootflow::Ecu;
use fotasim::can::BusConfig;
use fotasim::flash::FlashDevice;
use fotasim::nvstore::{BootFlag, FlagSlot};
use fotasim::orchestrator::{reduction_ratio, run_campaign, CampaignPlan, CampaignReport, UpdateMode};
use fotasim::scenario::{standard_world, TARGET_ID};
use fotasim::uds::SecuritySession;

const SECRET: u32 = 0xA5A5_0001;

fn run(mode: UpdateMode, old: &[u8], new: &[u8]) -> CampaignReport {
    let mut ecu = Ecu::new(FlashDevice::stm32f401(), SecuritySession::new(SECRET, 3));
    ecu.install_application(old).unwrap();
    ecu.regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::Enter);
    let mut world = standard_world(BusConfig::default(), 3, "target", ecu).unwrap();
    let plan = CampaignPlan::new(mode, old.to_vec(), new.to_vec(), TARGET_ID, SECRET);
    run_campaign(&mut world, plan, 1_000_000).unwrap()
}

pub fn run_example() {
    let old: Vec<u8> = (0..128 * 1024u32).map(|i| (i.wrapping_mul(0x9E37_79B1) >> 11) as u8).collect();
    let mut new = old.clone();
    for block in (0..128).step_by(13) {
        new[block * 1024 + 100..block * 1024 + 140].fill(0xC3);
    }
    let full = run(UpdateMode::Full, &old, &new);
    let delta = run(UpdateMode::Delta, &old, &new);
    println!("{:<28} {:>12} {:>12}", "", "full", "delta");
    let row = |name: &str, f: String, d: String| println!("{name:<28} {f:>12} {d:>12}");
    row("outcome", format!("{:?}", full.outcome), format!("{:?}", delta.outcome));
    row("frames sent", full.frames_sent.to_string(), delta.frames_sent.to_string());
    row("bytes on bus", full.bytes_on_bus.to_string(), delta.bytes_on_bus.to_string());
    row("blocks transferred", full.blocks_transferred.to_string(), delta.blocks_transferred.to_string());
    row("sectors erased", full.sectors_erased.to_string(), delta.sectors_erased.to_string());
    let secs = |r: &CampaignReport| format!("{:.3} s", r.total_simulated_duration.as_secs_f64());
    row("total simulated time", secs(&full), secs(&delta));
    println!("reduction ratio {:.3}", reduction_ratio(&delta, &full).unwrap());
}

fn main() {
    run_example();
}
