//! Command-line driver. Machine-readable JSON goes to stdout, a one-line
//! human summary to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::can::{AcceptanceFilter, BusConfig, CanBus, NodeId};
use crate::delta::{apply_delta, build_delta, DeltaPackage, DEFAULT_GAP_MERGE};
use crate::integrity::{crc32, DEFAULT_BLOCK_SIZE};
use crate::lka::{pack_image, PidGains};
use crate::scenario::{write_trace, Scenario, ScenarioError};
use crate::sim::{REQUEST_ID, RESPONSE_ID};
use crate::time::SimTime;
use crate::uds::{client_unlock, Link, SecuritySession, UdsClient};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fotasim", version, about = "Firmware-over-the-air update simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// CRC-32/MPEG-2 of a file.
    Crc { file: PathBuf },
    #[command(subcommand)]
    Image(ImageCmd),
    #[command(subcommand)]
    Delta(DeltaCmd),
    #[command(subcommand)]
    Uds(UdsCmd),
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Debug, Subcommand)]
enum ImageCmd {
    /// Embed PID gains into a raw application image.
    Pack {
        raw: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_gains)]
        gains: PidGains,
    },
}

#[derive(Debug, Subcommand)]
enum DeltaCmd {
    Build {
        old: PathBuf,
        new: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
        block_size: usize,
        #[arg(long, default_value_t = DEFAULT_GAP_MERGE)]
        gap_merge: usize,
    },
    Apply {
        base: PathBuf,
        package: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum UdsCmd {
    /// One seed/key handshake over a lossless simulated bus.
    Demo(UdsDemo),
}

#[derive(Debug, Args)]
struct UdsDemo {
    #[arg(long, value_parser = parse_hex_u32, default_value = "A5A50001")]
    secret: u32,
    /// Secret used by the client; defaults to the server's.
    #[arg(long, value_parser = parse_hex_u32)]
    client_secret: Option<u32>,
    #[arg(long, default_value_t = 1)]
    seed: u32,
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn parse_hex_u32(s: &str) -> Result<u32, String> {
    let t = s.trim_start_matches("0x").trim_start_matches("0X");
    u32::from_str_radix(t, 16).map_err(|e| format!("{s}: {e}"))
}

fn parse_gains(s: &str) -> Result<PidGains, String> {
    let parts: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}"))).collect::<Result<_, _>>()?;
    let [kp, ki, kd] = parts[..] else {
        return Err("expected kp,ki,kd".into());
    };
    PidGains::new(kp, ki, kd).map_err(|e| e.to_string())
}

/// Outcome of one command: exit status, JSON for stdout, summary for stderr.
struct Outcome {
    code: i32,
    json: Value,
    summary: String,
}

impl Outcome {
    fn ok(json: Value, summary: String) -> Self {
        Outcome { code: EXIT_OK, json, summary }
    }

    fn failed(msg: impl std::fmt::Display) -> Self {
        let msg = msg.to_string();
        Outcome { code: EXIT_FAILED, json: json!({ "error": msg }), summary: format!("error: {msg}") }
    }

    fn usage(msg: impl std::fmt::Display) -> Self {
        Outcome { code: EXIT_USAGE, ..Outcome::failed(msg) }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Outcome> {
    fs::read(path).map_err(|e| Outcome::failed(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: &[u8]) -> Result<(), Outcome> {
    fs::write(path, data).map_err(|e| Outcome::failed(format!("{}: {e}", path.display())))
}

fn hex32(v: u32) -> String {
    format!("0x{v:08X}")
}

fn crc_cmd(file: &Path) -> Result<Outcome, Outcome> {
    let data = read(file)?;
    let c = crc32(&data);
    Ok(Outcome::ok(
        json!({ "file": file.display().to_string(), "length": data.len(), "crc32": hex32(c) }),
        format!("{}  {}", hex32(c), file.display()),
    ))
}

fn image_cmd(cmd: ImageCmd) -> Result<Outcome, Outcome> {
    let ImageCmd::Pack { raw, output, gains } = cmd;
    let img = pack_image(&read(&raw)?, &gains);
    write(&output, &img)?;
    Ok(Outcome::ok(
        json!({ "output": output.display().to_string(), "length": img.len(), "crc32": hex32(crc32(&img)), "gains": gains }),
        format!("packed {} bytes into {}", img.len(), output.display()),
    ))
}

fn delta_cmd(cmd: DeltaCmd) -> Result<Outcome, Outcome> {
    match cmd {
        DeltaCmd::Build { old, new, output, block_size, gap_merge } => {
            let (o, n) = (read(&old)?, read(&new)?);
            let pkg = build_delta(&o, &n, block_size, gap_merge).map_err(Outcome::failed)?;
            let bytes = pkg.encode();
            write(&output, &bytes)?;
            let stats = pkg.stats();
            let summary = format!(
                "{} of {} blocks changed, package {} bytes",
                stats.blocks_changed,
                pkg.block_count(),
                stats.package_bytes
            );
            let mut v = serde_json::to_value(stats).expect("serializes");
            v["output"] = json!(output.display().to_string());
            v["new_image_crc"] = json!(hex32(pkg.new_image_crc));
            Ok(Outcome::ok(v, summary))
        }
        DeltaCmd::Apply { base, package, output } => {
            let b = read(&base)?;
            let pkg = DeltaPackage::decode(&read(&package)?).map_err(Outcome::failed)?;
            let out = apply_delta(&b, &pkg).map_err(Outcome::failed)?;
            write(&output, &out)?;
            Ok(Outcome::ok(
                json!({ "output": output.display().to_string(), "length": out.len(), "crc32": hex32(crc32(&out)) }),
                format!("wrote {} bytes to {}", out.len(), output.display()),
            ))
        }
    }
}

fn uds_cmd(cmd: UdsCmd) -> Result<Outcome, Outcome> {
    let UdsCmd::Demo(d) = cmd;
    let mut bus = CanBus::new(BusConfig::default()).map_err(Outcome::failed)?;
    let (master, target) = (NodeId(1), NodeId(2));
    bus.attach(master, vec![AcceptanceFilter::exact(RESPONSE_ID)]).map_err(Outcome::failed)?;
    bus.attach(target, vec![AcceptanceFilter::exact(REQUEST_ID)]).map_err(Outcome::failed)?;
    let link = Link { master, target, request_id: REQUEST_ID, response_id: RESPONSE_ID };
    let mut server = SecuritySession::new(d.secret, d.seed);
    let mut client = UdsClient::new(d.client_secret.unwrap_or(d.secret));
    let mut clock = SimTime::ZERO;
    let report = client_unlock(&mut bus, link, &mut server, &mut client, &mut clock);
    let granted = report.outcome == crate::uds::UnlockOutcome::Granted;
    let summary = format!("{:?} after {} us", report.outcome, report.duration.as_micros());
    let json = serde_json::to_value(&report).expect("serializes");
    Ok(Outcome { code: if granted { EXIT_OK } else { EXIT_FAILED }, json, summary })
}

fn sim_cmd(cmd: SimCmd) -> Result<Outcome, Outcome> {
    let SimCmd::Run { scenario, seed, trace } = cmd;
    let mut s = Scenario::load(&scenario).map_err(|e| match e {
        ScenarioError::Io { .. } | ScenarioError::Parse(_) => Outcome::usage(e),
        other => Outcome::failed(other),
    })?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let run = s.run(trace.is_some()).map_err(Outcome::failed)?;
    if let Some(dir) = &trace {
        write_trace(&run, &s.target.name, dir).map_err(|e| Outcome::failed(format!("{}: {e}", dir.display())))?;
    }
    let r = &run.report;
    let summary = match &r.campaign {
        Some(c) => format!(
            "{:?} campaign: {:?}, {} frames, {:.3} s simulated",
            c.mode,
            c.outcome,
            c.frames_sent,
            c.total_simulated_duration.as_secs_f64()
        ),
        None => format!("{} ticks, target in {:?}", r.ticks, r.target_program),
    };
    let code = if r.succeeded() { EXIT_OK } else { EXIT_FAILED };
    Ok(Outcome { code, json: serde_json::to_value(r).expect("serializes"), summary })
}

/// Runs the CLI against explicit streams and returns the exit status.
pub fn cli_run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Crc { file } => crc_cmd(&file),
        Command::Image(c) => image_cmd(c),
        Command::Delta(c) => delta_cmd(c),
        Command::Uds(c) => uds_cmd(c),
        Command::Sim(c) => sim_cmd(c),
    };
    let o = result.unwrap_or_else(|e| e);
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&o.json).expect("serializes"));
    let _ = writeln!(err, "{}", o.summary);
    o.code
}
