//! Lane-keep-assist application: PID steering controller, first-order
//! plant, deviation handling, and the gains parameter block carried inside
//! the application image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::ERASED;

pub const DEFAULT_THRESHOLD_M: f64 = 0.05;
pub const DEFAULT_DT_S: f64 = 0.01;
pub const INTEGRAL_LIMIT: f64 = 100.0;
pub const COMMAND_LIMIT: f64 = 100.0;
pub const POSITION_LIMIT_DEG: f64 = 540.0;
pub const PLANT_GAIN: f64 = 1.0;
pub const DEG_PER_METER: f64 = 60.0;
pub const TARGET_LIMIT_DEG: f64 = 30.0;

/// Image block that holds the gains.
pub const PARAM_BLOCK_INDEX: usize = 1;
pub const PARAM_BLOCK_SIZE: usize = 1024;
pub const PARAM_MAGIC: [u8; 4] = *b"LKAP";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LkaError {
    #[error("non-finite input {0}")]
    NonFiniteInput(f64),
    #[error("malformed deviation line {0:?}")]
    MalformedDeviation(String),
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("gains must be finite")]
    NonFiniteGains,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { kp: 2.0, ki: 0.1, kd: 0.5 }
    }
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self, LkaError> {
        let g = PidGains { kp, ki, kd };
        if [kp, ki, kd].iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(LkaError::NonFiniteGains)
        }
    }

    pub fn to_bytes(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[..8].copy_from_slice(&self.kp.to_le_bytes());
        out[8..16].copy_from_slice(&self.ki.to_le_bytes());
        out[16..].copy_from_slice(&self.kd.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 24]) -> Result<Self, LkaError> {
        let f = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        Self::new(f(0), f(8), f(16))
    }
}

/// Writes the gains block into `raw`, growing it with erased bytes to
/// cover the block if needed.
pub fn pack_image(raw: &[u8], gains: &PidGains) -> Vec<u8> {
    let start = PARAM_BLOCK_INDEX * PARAM_BLOCK_SIZE;
    let mut img = raw.to_vec();
    if img.len() < start + PARAM_BLOCK_SIZE {
        img.resize(start + PARAM_BLOCK_SIZE, ERASED);
    }
    let block = &mut img[start..start + PARAM_BLOCK_SIZE];
    block.fill(ERASED);
    block[..4].copy_from_slice(&PARAM_MAGIC);
    block[4..28].copy_from_slice(&gains.to_bytes());
    img
}

/// Gains from an image's parameter block, if it carries one.
pub fn read_gains(image: &[u8]) -> Option<PidGains> {
    let start = PARAM_BLOCK_INDEX * PARAM_BLOCK_SIZE;
    let block = image.get(start..start + 28)?;
    if block[..4] != PARAM_MAGIC {
        return None;
    }
    PidGains::from_bytes(block[4..28].try_into().expect("24 bytes")).ok()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SteeringState {
    pub position: f64,
    pub integral: f64,
    pub previous_error: f64,
}

/// 1 = turn right, 2 = turn left, 3 = straight. Positive deviation means
/// the vehicle sits left of the lane center.
pub fn motor_order(deviation: f64, threshold: f64) -> Result<u8, LkaError> {
    if !deviation.is_finite() {
        return Err(LkaError::NonFiniteInput(deviation));
    }
    if !threshold.is_finite() {
        return Err(LkaError::NonFiniteInput(threshold));
    }
    Ok(if deviation > threshold {
        1
    } else if deviation < -threshold {
        2
    } else {
        3
    })
}

/// Steering target for a lateral deviation, linear and clamped.
pub fn deviation_to_target(deviation: f64) -> Result<f64, LkaError> {
    if !deviation.is_finite() {
        return Err(LkaError::NonFiniteInput(deviation));
    }
    Ok((deviation * DEG_PER_METER).clamp(-TARGET_LIMIT_DEG, TARGET_LIMIT_DEG))
}

/// One controller update. The integral term in the command is the one
/// accumulated before this step; `e·dt` is added afterwards.
pub fn pid_step(
    state: &SteeringState,
    gains: &PidGains,
    error: f64,
    dt: f64,
) -> Result<(f64, SteeringState), LkaError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LkaError::InvalidTimeStep(dt));
    }
    if !error.is_finite() {
        return Err(LkaError::NonFiniteInput(error));
    }
    let derivative = (error - state.previous_error) / dt;
    let raw = gains.kp * error + gains.ki * state.integral + gains.kd * derivative;
    let command = raw.clamp(-COMMAND_LIMIT, COMMAND_LIMIT);
    let next = SteeringState {
        position: state.position,
        integral: (state.integral + error * dt).clamp(-INTEGRAL_LIMIT, INTEGRAL_LIMIT),
        previous_error: error,
    };
    Ok((command, next))
}

/// Advances the plant by one step under `command`.
pub fn plant_step(state: &mut SteeringState, command: f64, dt: f64) {
    state.position = (state.position + dt * PLANT_GAIN * command).clamp(-POSITION_LIMIT_DEG, POSITION_LIMIT_DEG);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time_s: f64,
    pub error_deg: f64,
}

/// Closed-loop run; one trace point per step with `|target − position|`.
pub fn simulate(
    gains: &PidGains,
    target: f64,
    initial_position: f64,
    duration: f64,
    dt: f64,
) -> Result<Vec<TracePoint>, LkaError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LkaError::InvalidTimeStep(dt));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(LkaError::NonFiniteInput(duration));
    }
    let steps = (duration / dt).round() as usize;
    let mut state = SteeringState { position: initial_position, ..Default::default() };
    let mut trace = Vec::with_capacity(steps);
    for k in 0..steps {
        let (cmd, next) = pid_step(&state, gains, target - state.position, dt)?;
        state = next;
        plant_step(&mut state, cmd, dt);
        trace.push(TracePoint { time_s: (k + 1) as f64 * dt, error_deg: (target - state.position).abs() });
    }
    Ok(trace)
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("time_s,error_deg\n");
    for p in trace {
        s.push_str(&format!("{:.3},{:.6}\n", p.time_s, p.error_deg));
    }
    s
}

/// Parses one `[+-]digits.dd\n` line.
pub fn parse_deviation_line(text: &str) -> Result<f64, LkaError> {
    let bad = || LkaError::MalformedDeviation(text.to_string());
    let body = text.strip_suffix('\n').ok_or_else(bad)?;
    let unsigned = body.strip_prefix(['+', '-']).unwrap_or(body);
    let (int, frac) = unsigned.split_once('.').ok_or_else(bad)?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.len() != 2 || !digits(frac) {
        return Err(bad());
    }
    body.parse().map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motor_orders() {
        assert_eq!(motor_order(0.0, DEFAULT_THRESHOLD_M), Ok(3));
        assert_eq!(motor_order(0.5, DEFAULT_THRESHOLD_M), Ok(1));
        assert_eq!(motor_order(-0.5, DEFAULT_THRESHOLD_M), Ok(2));
        assert_eq!(motor_order(0.05, DEFAULT_THRESHOLD_M), Ok(3));
        assert!(matches!(motor_order(f64::NAN, 0.05), Err(LkaError::NonFiniteInput(_))));
    }

    #[test]
    fn pid_basics() {
        let s = SteeringState::default();
        let (c, _) = pid_step(&s, &PidGains::default(), 0.0, 0.01).unwrap();
        assert_eq!(c, 0.0);
        let p = PidGains { kp: 1.0, ki: 0.0, kd: 0.0 };
        assert_eq!(pid_step(&s, &p, 7.0, 0.01).unwrap().0, 7.0);
        assert!(pid_step(&s, &p, 1.0, 0.0).is_err());
    }

    #[test]
    fn anti_windup_and_saturation() {
        let mut s = SteeringState::default();
        let g = PidGains { kp: 0.0, ki: 1.0, kd: 0.0 };
        for _ in 0..10_000 {
            s = pid_step(&s, &g, 1000.0, 0.1).unwrap().1;
        }
        assert_eq!(s.integral, INTEGRAL_LIMIT);
        let (c, _) = pid_step(&s, &PidGains { kp: 10.0, ..g }, 1000.0, 0.1).unwrap();
        assert_eq!(c, COMMAND_LIMIT);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let g = PidGains::default();
        let dt = 0.01;
        let s = SteeringState { position: 3.0, integral: 0.4, previous_error: 0.2 };
        let e = 0.25;
        let h = 1e-6;
        let f = |e: f64| pid_step(&s, &g, e, dt).unwrap().0;
        let numeric = (f(e + h) - f(e - h)) / (2.0 * h);
        let analytic = g.kp + g.kd / dt;
        assert!(((numeric - analytic) / analytic).abs() < 1e-6, "{numeric} vs {analytic}");
    }

    #[test]
    fn zero_gains_hold_error() {
        let t = simulate(&PidGains { kp: 0.0, ki: 0.0, kd: 0.0 }, 10.0, 0.0, 1.0, 0.01).unwrap();
        assert!(t.iter().all(|p| p.error_deg == 10.0));
    }

    #[test]
    fn tuned_defaults_meet_endpoints() {
        let t10 = simulate(&PidGains::default(), 10.0, 0.0, 5.0, DEFAULT_DT_S).unwrap();
        assert!(t10.last().unwrap().error_deg <= 0.5);
        let t30 = simulate(&PidGains::default(), 30.0, 0.0, 5.0, DEFAULT_DT_S).unwrap();
        assert!(t30.last().unwrap().error_deg <= 1.0);
    }

    #[test]
    fn convergence_envelope_sweep() {
        for target in [5.0, 7.5, 10.0, 15.0, 20.0, 25.0, 30.0] {
            let t = simulate(&PidGains::default(), target, 0.0, 5.0, DEFAULT_DT_S).unwrap();
            let last_second = &t[t.len() - 100..];
            let worst = last_second.iter().map(|p| p.error_deg).fold(0.0, f64::max);
            assert!(worst <= 1.0, "target {target}: {worst}");
        }
    }

    #[test]
    fn deviation_lines() {
        assert_eq!(parse_deviation_line("0.25\n"), Ok(0.25));
        assert_eq!(parse_deviation_line("-1.07\n"), Ok(-1.07));
        assert_eq!(parse_deviation_line("+3.00\n"), Ok(3.0));
        for bad in ["1.5\n", "1.50", ".50\n", "1.500\n", "a.bc\n", "--1.00\n", "1,00\n", ""] {
            assert!(matches!(parse_deviation_line(bad), Err(LkaError::MalformedDeviation(_))), "{bad:?}");
        }
    }

    #[test]
    fn deviation_mapping_clamps() {
        assert_eq!(deviation_to_target(0.1).unwrap(), 6.0);
        assert_eq!(deviation_to_target(-2.0).unwrap(), -30.0);
    }

    #[test]
    fn gains_block_round_trip() {
        let g = PidGains::new(1.5, 0.2, 0.75).unwrap();
        let img = pack_image(&[0x11; 100], &g);
        assert_eq!(img.len(), 2048);
        assert_eq!(&img[..100], &[0x11; 100]);
        assert_eq!(read_gains(&img), Some(g));
        assert_eq!(read_gains(&[0u8; 4096]), None);
    }
}
