//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time budget.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fotasim::bootflow::{decide, updater_silent, BootDecision, Ecu, UpdaterStep};
use fotasim::can::{AcceptanceFilter, BusConfig, CanBus, NodeId};
use fotasim::delta::{apply_delta, build_delta, DEFAULT_GAP_MERGE};
use fotasim::flash::{FlashDevice, FlashError, ERASED, MASS_ERASE_SECTOR};
use fotasim::integrity::{crc32, CrcOutcome, DEFAULT_BLOCK_SIZE};
use fotasim::lka::{simulate, PidGains, DEFAULT_DT_S};
use fotasim::nvstore::{BackupRegisters, BootFlag, FlagSlot};
use fotasim::orchestrator::{reduction_ratio, run_campaign, CampaignPlan, CampaignStage, UpdateMode};
use fotasim::scenario::{standard_world, Scenario, TARGET_ID};
use fotasim::sim::{REQUEST_ID, RESPONSE_ID};
use fotasim::time::SimTime;
use fotasim::uds::{
    client_unlock, derive_key, request_seed, send_key, Link, SecuritySession, UdsClient, UnlockOutcome,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SECRET: u32 = 0x5EC2_E701;
const MAX_TICKS: u64 = 2_000_000;

// Pinned tolerances.
const MIN_REDUCTION_RATIO: f64 = 0.5;
const MAX_BUS_BYTE_FRACTION: f64 = 0.35;
const ROUNDTRIP_PAIRS: usize = 1000;
const HANDSHAKES: usize = 100;
const FLASH_OPS: usize = 10_000;
const FAULT_CAMPAIGNS: u64 = 20;
const FAULT_CORRUPTION: f64 = 0.01;
const PID_ENDPOINTS: [(f64, f64); 2] = [(10.0, 0.5), (30.0, 1.0)];
const PID_HORIZON_S: f64 = 5.0;
const CRC_CHECK: u32 = 0x0376_E6E7;

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

fn target_ecu(app: &[u8], session_seed: u32) -> Ecu {
    let mut ecu = Ecu::new(FlashDevice::stm32f401(), SecuritySession::new(SECRET, session_seed));
    ecu.install_bootloader(&[0x42; 4096]).expect("bootloader fits");
    ecu.install_application(app).expect("app fits");
    ecu.regs.write_flag(FlagSlot::ApplicationEnter, BootFlag::Enter);
    ecu
}

fn campaign(
    mode: UpdateMode,
    old: &[u8],
    new: &[u8],
    bus: BusConfig,
    seed: u64,
) -> Result<(fotasim::orchestrator::CampaignReport, Ecu), String> {
    let mut world = standard_world(bus, seed, "target", target_ecu(old, seed as u32 | 1)).map_err(|e| e.to_string())?;
    let plan = CampaignPlan::new(mode, old.to_vec(), new.to_vec(), TARGET_ID, SECRET);
    let report = run_campaign(&mut world, plan, MAX_TICKS).map_err(|e| e.to_string())?;
    let ecu = world.node("target").and_then(|n| n.ecu.clone()).ok_or("target vanished")?;
    Ok((report, ecu))
}

/// 128 KiB pair differing in 40 of 128 blocks, all within the first sector.
fn c1_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let old = random_image(&mut rng, 128 * 1024);
    let mut new = old.clone();
    for b in 0..40 {
        let block = b * 3;
        for _ in 0..16 {
            let at = block * DEFAULT_BLOCK_SIZE + rng.gen_range(0..DEFAULT_BLOCK_SIZE);
            new[at] ^= rng.gen_range(1..=255u8);
        }
    }
    let diff_blocks = (0..128).filter(|b| old[b * 1024..(b + 1) * 1024] != new[b * 1024..(b + 1) * 1024]).count();
    ensure(diff_blocks <= 40, || format!("{diff_blocks} blocks differ"))?;
    let (full, _) = campaign(UpdateMode::Full, &old, &new, BusConfig::default(), 1)?;
    let (delta, ecu) = campaign(UpdateMode::Delta, &old, &new, BusConfig::default(), 1)?;
    ensure(ecu.application_image().as_deref() == Some(&new[..]), || "delta read-back differs".into())?;
    let ratio = reduction_ratio(&delta, &full).map_err(|e| e.to_string())?;
    let bytes = delta.bytes_on_bus as f64 / full.bytes_on_bus as f64;
    let detail = format!(
        "ratio {ratio:.3} (full {:.2} s, delta {:.2} s), bus bytes {bytes:.3} of full",
        full.total_simulated_duration.as_secs_f64(),
        delta.total_simulated_duration.as_secs_f64()
    );
    ensure(ratio >= MIN_REDUCTION_RATIO && bytes <= MAX_BUS_BYTE_FRACTION, || detail.clone())?;
    Ok(detail)
}

fn c2_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..ROUNDTRIP_PAIRS {
        let old_len = rng.gen_range(1024..=128 * 1024);
        let new_len = if rng.gen_bool(0.5) { old_len } else { rng.gen_range(1024..=128 * 1024) };
        let rate: f64 = rng.gen_range(0.0..=1.0);
        let old = random_image(&mut rng, old_len);
        let mut new: Vec<u8> = (0..new_len).map(|j| old.get(j).copied().unwrap_or(0xFF)).collect();
        for b in new.iter_mut() {
            if rng.gen_bool(rate) {
                *b = rng.gen();
            }
        }
        let pkg =
            build_delta(&old, &new, DEFAULT_BLOCK_SIZE, DEFAULT_GAP_MERGE).map_err(|e| format!("pair {i}: {e}"))?;
        let out = apply_delta(&old, &pkg).map_err(|e| format!("pair {i}: {e}"))?;
        ensure(out == new, || format!("pair {i} (rate {rate:.2}) differs"))?;
    }
    Ok(format!("{ROUNDTRIP_PAIRS} pairs bit-exact"))
}

fn c3_uds() -> Outcome {
    let mut granted = 0;
    let mut total_us = 0;
    for i in 0..HANDSHAKES {
        let mut bus = CanBus::new(BusConfig::default()).map_err(|e| e.to_string())?;
        bus.attach(NodeId(1), vec![AcceptanceFilter::exact(RESPONSE_ID)]).map_err(|e| e.to_string())?;
        bus.attach(NodeId(2), vec![AcceptanceFilter::exact(REQUEST_ID)]).map_err(|e| e.to_string())?;
        let link = Link { master: NodeId(1), target: NodeId(2), request_id: REQUEST_ID, response_id: RESPONSE_ID };
        let mut server = SecuritySession::new(SECRET, i as u32 + 1);
        let mut client = UdsClient::new(SECRET);
        let mut clock = SimTime::ZERO;
        let r = client_unlock(&mut bus, link, &mut server, &mut client, &mut clock);
        if r.outcome == UnlockOutcome::Granted {
            granted += 1;
        }
        total_us += r.duration.as_micros();
    }
    ensure(granted == HANDSHAKES, || format!("{granted}/{HANDSHAKES} granted"))?;

    let t = SimTime::ZERO;
    let mut s = SecuritySession::new(SECRET, 7);
    let key_first = s.handle(&send_key(&[0u8; 32]), t);
    ensure(key_first == [0x7F, 0x27, 0x24], || format!("key before seed: {key_first:02X?}"))?;
    let mut last = Vec::new();
    for attempt in 1..=3 {
        let resp = s.handle(&request_seed(), t);
        let seed: [u8; 4] = resp[2..6].try_into().map_err(|_| "short seed response")?;
        let mut key = derive_key(seed, SECRET);
        key[0] ^= 0xFF;
        last = s.handle(&send_key(&key), t);
        if attempt < 3 {
            ensure(last == [0x7F, 0x27, 0x35], || format!("wrong key attempt {attempt}: {last:02X?}"))?;
        }
    }
    ensure(last == [0x7F, 0x27, 0x36], || format!("third failure: {last:02X?}"))?;
    Ok(format!(
        "{granted}/{HANDSHAKES} granted, mean handshake {:.1} ms simulated; NRC 0x35/0x24/0x36 exact",
        total_us as f64 / HANDSHAKES as f64 / 1000.0
    ))
}

fn c4_boot_table() -> Outcome {
    for integrity_ok in [false, true] {
        for app in [false, true] {
            for upd in [false, true] {
                let flag = |b: bool| if b { BootFlag::Enter } else { BootFlag::NotEnter };
                let mut regs = BackupRegisters::default();
                regs.write_flag(FlagSlot::ApplicationEnter, flag(app));
                regs.write_flag(FlagSlot::UpdaterEnter, flag(upd));
                let integrity = if integrity_ok { CrcOutcome::Succeeded } else { CrcOutcome::Failed };
                let got = decide(integrity, &mut regs);
                // Independent restatement of the boot manager branches.
                let (want, flags_after) = if integrity_ok && app {
                    (BootDecision::JumpApplication, (flag(app), flag(upd)))
                } else if upd {
                    (BootDecision::JumpUpdater, (flag(app), flag(upd)))
                } else {
                    (BootDecision::JumpBootloader, (BootFlag::NotEnter, BootFlag::NotEnter))
                };
                let after = (regs.read_flag(FlagSlot::ApplicationEnter), regs.read_flag(FlagSlot::UpdaterEnter));
                ensure(got == want && after == flags_after, || {
                    format!("integrity={integrity_ok} app={app} upd={upd}: got {got:?} {after:?}")
                })?;
            }
        }
    }
    Ok("8/8 combinations".into())
}

fn c5_flash() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dev = FlashDevice::stm32f401();
    let layout = dev.layout().clone();
    let size = layout.total_size();
    let mut shadow = vec![ERASED; size];
    let mut unlocked = false;
    let mut latched = false;
    let app_sectors: Vec<u8> = layout.sectors_of(layout.regions.application).iter().map(|s| s.index).collect();
    let n_sectors = layout.sectors.len() as u8;
    let (mut rejected, mut erases, mut programs) = (0, 0, 0);
    for op in 0..FLASH_OPS {
        match rng.gen_range(0..100) {
            0..=9 => {
                let good = rng.gen_bool(0.8);
                let keys = if good { fotasim::flash::DEFAULT_UNLOCK_KEYS } else { (1, 2) };
                let r = dev.unlock(keys.0, keys.1);
                match (unlocked, latched, good) {
                    (true, _, _) => ensure(r == Err(FlashError::AlreadyUnlocked), || format!("op {op}: {r:?}"))?,
                    (false, true, _) => ensure(r.is_err(), || format!("op {op}: latched unlock succeeded"))?,
                    (false, false, true) => {
                        ensure(r.is_ok(), || format!("op {op}: {r:?}"))?;
                        unlocked = true;
                    }
                    (false, false, false) => {
                        ensure(r.is_err(), || format!("op {op}: bad key accepted"))?;
                        latched = true;
                    }
                }
            }
            10..=14 => {
                dev.lock();
                unlocked = false;
            }
            15..=16 => {
                dev.reset_device();
                unlocked = false;
                latched = false;
            }
            17..=24 => {
                let (start, count) = if rng.gen_bool(0.1) {
                    (MASS_ERASE_SECTOR, 0)
                } else {
                    let s = rng.gen_range(0..n_sectors);
                    (s, rng.gen_range(1..=(n_sectors - s).min(2)))
                };
                let before = dev.snapshot();
                let r = dev.erase_sectors(start, count);
                if unlocked {
                    ensure(r.is_ok(), || format!("op {op}: erase failed {r:?}"))?;
                    let targets: Vec<u8> =
                        if start == MASS_ERASE_SECTOR { app_sectors.clone() } else { (start..start + count).collect() };
                    for &t in &targets {
                        let s = layout.sectors[t as usize];
                        shadow[s.start..s.end()].fill(ERASED);
                    }
                    erases += 1;
                } else {
                    ensure(r == Err(FlashError::LockedDevice), || format!("op {op}: locked erase {r:?}"))?;
                    ensure(dev.cells() == &before[..], || format!("op {op}: locked erase mutated cells"))?;
                    rejected += 1;
                }
            }
            _ => {
                let len = rng.gen_range(1..=64);
                let addr = rng.gen_range(0..size - len);
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let r = dev.program(addr, &data);
                let blank = shadow[addr..addr + len].iter().all(|&b| b == ERASED);
                if !unlocked {
                    ensure(r == Err(FlashError::LockedDevice), || format!("op {op}: locked program {r:?}"))?;
                    rejected += 1;
                } else if !blank {
                    ensure(matches!(r, Err(FlashError::ProgramOnNonErased { .. })), || {
                        format!("op {op}: program on non-erased accepted")
                    })?;
                    rejected += 1;
                } else {
                    ensure(r.is_ok(), || format!("op {op}: program failed {r:?}"))?;
                    shadow[addr..addr + len].copy_from_slice(&data);
                    programs += 1;
                }
            }
        }
        ensure(dev.cells() == &shadow[..], || format!("op {op}: cells diverge from shadow model"))?;
    }
    Ok(format!("{FLASH_OPS} ops ({erases} erases, {programs} programs, {rejected} rejected) match the shadow model"))
}

fn c6_fault_tolerance() -> Outcome {
    let mut retransmissions = 0;
    for seed in 0..FAULT_CAMPAIGNS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let old = random_image(&mut rng, 128 * 1024);
        let mut new = old.clone();
        for _ in 0..8 {
            let at = rng.gen_range(0..new.len());
            new[at] ^= rng.gen_range(1..=255u8);
        }
        let bus = BusConfig { corruption_probability: FAULT_CORRUPTION, rng_seed: seed, ..BusConfig::default() };
        let (r, mut ecu) = campaign(UpdateMode::Delta, &old, &new, bus, seed)?;
        ensure(r.outcome.is_success(), || format!("seed {seed}: {:?} at {:?}", r.outcome, r.last_stage))?;
        ensure(ecu.application_image().as_deref() == Some(&new[..]), || format!("seed {seed}: read-back differs"))?;
        let d = fotasim::bootflow::boot_decide(&ecu.flash, &mut ecu.regs);
        ensure(d == BootDecision::JumpApplication, || format!("seed {seed}: boots {d:?}"))?;
        retransmissions += r.retransmissions;
    }
    Ok(format!("{FAULT_CAMPAIGNS}/{FAULT_CAMPAIGNS} succeeded, {retransmissions} retransmissions"))
}

fn c7_rollback() -> Outcome {
    let old: Vec<u8> = (0..24 * 1024).map(|i| (i % 251) as u8).collect();
    let new: Vec<u8> = (0..30 * 1024).map(|i| (i % 13) as u8 ^ 0x5A).collect();
    let mut checked = 0;
    for inject in UpdaterStep::ALL.iter().copied().map(Some).chain([None]) {
        let mut ecu = target_ecu(&[0u8; 1024], 1);
        ecu.install_bootloader(&old).map_err(|e| e.to_string())?;
        let bl = ecu.flash.layout().regions.bootloader;
        let padded = |img: &[u8]| {
            let mut v = img.to_vec();
            v.resize(bl.size, ERASED);
            v
        };
        let _ = updater_silent(&mut ecu.flash, &mut ecu.regs, &new, inject);
        let region = ecu.flash.read_slice(bl.start, bl.size).map_err(|e| e.to_string())?;
        let is_old = region == &padded(&old)[..];
        let is_new = region == &padded(&new)[..];
        ensure(is_old || is_new, || format!("failure at {inject:?} left a mixed bootloader"))?;
        if inject.is_none() {
            ensure(is_new, || "clean run did not install the new bootloader".into())?;
        }
        checked += 1;
    }
    Ok(format!("{checked} runs (every step plus clean) end in old or new, never mixed"))
}

fn c8_abort() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let old = random_image(&mut rng, 32 * 1024);
    let mut new = old.clone();
    new[5000] ^= 0x55;
    new[20000] ^= 0x55;
    let cases = [
        (UpdateMode::Full, CampaignStage::Erase),
        (UpdateMode::Full, CampaignStage::Transfer),
        (UpdateMode::Delta, CampaignStage::Transfer),
        (UpdateMode::Delta, CampaignStage::Apply),
    ];
    for (mode, after) in cases {
        let mut world =
            standard_world(BusConfig::default(), 8, "target", target_ecu(&old, 8)).map_err(|e| e.to_string())?;
        let mut plan = CampaignPlan::new(mode, old.clone(), new.clone(), TARGET_ID, SECRET);
        plan.abort_after = Some(after);
        run_campaign(&mut world, plan, MAX_TICKS).map_err(|e| e.to_string())?;
        world.software_reset("target");
        let ecu = world.node_mut("target").and_then(|n| n.ecu.as_mut()).ok_or("no target")?;
        let d = fotasim::bootflow::boot_decide(&ecu.flash, &mut ecu.regs.clone());
        ensure(d == BootDecision::JumpBootloader, || format!("{mode:?} aborted after {after:?}: boots {d:?}"))?;
    }
    Ok(format!("{} abort points boot JumpBootloader", cases.len()))
}

fn c9_pid() -> Outcome {
    let mut parts = Vec::new();
    for (target, bound) in PID_ENDPOINTS {
        let trace =
            simulate(&PidGains::default(), target, 0.0, PID_HORIZON_S, DEFAULT_DT_S).map_err(|e| e.to_string())?;
        let last = trace.last().ok_or("empty trace")?;
        ensure(last.error_deg <= bound, || format!("target {target}: final error {:.3}", last.error_deg))?;
        parts.push(format!("{target}° → {:.3}° (≤ {bound})", last.error_deg));
    }
    Ok(parts.join(", "))
}

/// Bit-at-a-time reference, independent of the table-driven crate code.
fn crc32_mpeg2_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        for bit in (0..8).rev() {
            let top = (crc >> 31) ^ ((byte as u32 >> bit) & 1);
            crc <<= 1;
            if top != 0 {
                crc ^= 0x04C1_1DB7;
            }
        }
    }
    crc
}

fn c10_crc() -> Outcome {
    let oracle = crc32_mpeg2_bitwise(b"123456789");
    let got = crc32(b"123456789");
    ensure(oracle == CRC_CHECK && got == oracle, || format!("crate {got:#010X}, oracle {oracle:#010X}"))?;
    Ok(format!("{got:#010X}"))
}

fn c11_determinism() -> Outcome {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    let mut names = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    ensure(!paths.is_empty(), || "no scenarios".into())?;
    for p in &paths {
        let s = Scenario::load(p).map_err(|e| e.to_string())?;
        let a = s.run(true).map_err(|e| e.to_string())?;
        let b = s.run(true).map_err(|e| e.to_string())?;
        let (la, lb) = (a.world.log.to_jsonl(), b.world.log.to_jsonl());
        ensure(la == lb && !la.is_empty(), || format!("{}: event logs differ", p.display()))?;
        let (ra, rb) = (serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        ensure(ra == rb, || format!("{}: reports differ", p.display()))?;
        names.push(p.file_stem().unwrap().to_string_lossy().into_owned());
    }
    Ok(format!("{} scenarios byte-identical: {}", names.len(), names.join(", ")))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "delta vs full reduction", budget: Duration::from_secs(10), run: c1_reduction },
        Criterion { id: 2, name: "delta round-trip oracle", budget: Duration::from_secs(30), run: c2_roundtrip },
        Criterion { id: 3, name: "UDS conformance", budget: Duration::from_secs(10), run: c3_uds },
        Criterion { id: 4, name: "boot decision table", budget: Duration::from_secs(1), run: c4_boot_table },
        Criterion { id: 5, name: "flash model invariants", budget: Duration::from_secs(5), run: c5_flash },
        Criterion {
            id: 6,
            name: "end-to-end fault tolerance",
            budget: Duration::from_secs(60),
            run: c6_fault_tolerance,
        },
        Criterion { id: 7, name: "rollback exactness", budget: Duration::from_secs(5), run: c7_rollback },
        Criterion { id: 8, name: "abort safety", budget: Duration::from_secs(5), run: c8_abort },
        Criterion { id: 9, name: "PID endpoints", budget: Duration::from_secs(1), run: c9_pid },
        Criterion { id: 10, name: "CRC check value", budget: Duration::from_secs(1), run: c10_crc },
        Criterion { id: 11, name: "determinism golden", budget: Duration::from_secs(10), run: c11_determinism },
    ];
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let t = Instant::now();
        let r = (c.run)();
        let elapsed = t.elapsed();
        let (ok, detail) = match r {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {:<28} {:>7.2}s / {:>2}s  {}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
