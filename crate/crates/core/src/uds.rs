//! UDS Security Access (service 0x27): the target-side session state
//! machine, the key derivation shared by both sides, and the master-side
//! client procedure.

use serde::{Deserialize, Serialize};

use crate::can::{recv_segmented, send_segmented, CanBus, NodeId, SegmentedReceiver};
use crate::time::{SimDuration, SimTime};

pub const SID_SECURITY_ACCESS: u8 = 0x27;
pub const POSITIVE_RESPONSE_OFFSET: u8 = 0x40;
pub const NEGATIVE_RESPONSE: u8 = 0x7F;
pub const SUB_REQUEST_SEED: u8 = 0x01;
pub const SUB_SEND_KEY: u8 = 0x02;

pub const NRC_CONDITIONS_NOT_CORRECT: u8 = 0x22;
pub const NRC_REQUEST_SEQUENCE_ERROR: u8 = 0x24;
pub const NRC_INVALID_KEY: u8 = 0x35;
pub const NRC_EXCEEDED_ATTEMPTS: u8 = 0x36;

pub const SEED_LEN: usize = 4;
pub const KEY_LEN: usize = 32;
pub const MAX_ATTEMPTS: u32 = 3;
pub const LOCKOUT: SimDuration = SimDuration::from_secs(10);
pub const DEFAULT_CLIENT_TIMEOUT: SimDuration = SimDuration::from_secs(5);

const ZERO_KEY_SUBSTITUTE: u32 = 0xDEAD_BEEF;

pub fn xorshift32(mut x: u32) -> u32 {
    x ^= x << 13;
    x ^= x >> 17;
    x ^= x << 5;
    x
}

/// Eight xorshift32 states starting from `seed XOR secret`, big-endian.
pub fn derive_key(seed: [u8; SEED_LEN], shared_secret: u32) -> [u8; KEY_LEN] {
    let mut x = u32::from_be_bytes(seed) ^ shared_secret;
    if x == 0 {
        x = ZERO_KEY_SUBSTITUTE;
    }
    let mut key = [0u8; KEY_LEN];
    for chunk in key.chunks_exact_mut(4) {
        x = xorshift32(x);
        chunk.copy_from_slice(&x.to_be_bytes());
    }
    key
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityState {
    Locked,
    SeedIssued,
    Unlocked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecuritySession {
    state: SecurityState,
    active_seed: Option<[u8; SEED_LEN]>,
    failed_attempts: u32,
    shared_secret: u32,
    rng_state: u32,
    lockout_until: Option<SimTime>,
}

fn negative(nrc: u8) -> Vec<u8> {
    vec![NEGATIVE_RESPONSE, SID_SECURITY_ACCESS, nrc]
}

impl SecuritySession {
    /// `rng_seed` of zero would pin xorshift32 at zero, so it is replaced
    /// by a fixed non-zero value.
    pub fn new(shared_secret: u32, rng_seed: u32) -> Self {
        SecuritySession {
            state: SecurityState::Locked,
            active_seed: None,
            failed_attempts: 0,
            shared_secret,
            rng_state: if rng_seed == 0 { 0x1234_5678 } else { rng_seed },
            lockout_until: None,
        }
    }

    pub fn state(&self) -> SecurityState {
        self.state
    }

    pub fn is_unlocked(&self) -> bool {
        self.state == SecurityState::Unlocked
    }

    pub fn active_seed(&self) -> Option<[u8; SEED_LEN]> {
        self.active_seed
    }

    pub fn failed_attempts(&self) -> u32 {
        self.failed_attempts
    }

    pub fn locked_out(&self, now: SimTime) -> bool {
        self.lockout_until.is_some_and(|t| now < t)
    }

    /// Back to Locked, as after an ECU reset. The RNG keeps running so
    /// seeds are not replayed.
    pub fn reset(&mut self) {
        self.state = SecurityState::Locked;
        self.active_seed = None;
    }

    fn next_seed(&mut self) -> [u8; SEED_LEN] {
        self.rng_state = xorshift32(self.rng_state);
        self.rng_state.to_be_bytes()
    }

    /// Handles one request and returns the response bytes.
    pub fn handle(&mut self, request: &[u8], now: SimTime) -> Vec<u8> {
        if self.lockout_until.is_some_and(|t| now >= t) {
            self.lockout_until = None;
            self.failed_attempts = 0;
        }
        let (sid, sub) = match request {
            [sid, sub, ..] => (*sid, *sub),
            _ => return negative(NRC_CONDITIONS_NOT_CORRECT),
        };
        if sid != SID_SECURITY_ACCESS || !matches!(sub, SUB_REQUEST_SEED | SUB_SEND_KEY) {
            return negative(NRC_CONDITIONS_NOT_CORRECT);
        }
        if self.locked_out(now) {
            return negative(NRC_EXCEEDED_ATTEMPTS);
        }
        let positive = SID_SECURITY_ACCESS + POSITIVE_RESPONSE_OFFSET;
        match (sub, self.state) {
            (SUB_REQUEST_SEED, SecurityState::Unlocked) => {
                vec![positive, SUB_REQUEST_SEED, 0, 0, 0, 0]
            }
            (SUB_REQUEST_SEED, _) => {
                let seed = self.next_seed();
                self.active_seed = Some(seed);
                self.state = SecurityState::SeedIssued;
                let mut r = vec![positive, SUB_REQUEST_SEED];
                r.extend_from_slice(&seed);
                r
            }
            (_, SecurityState::SeedIssued) => {
                let seed = self.active_seed.take().expect("seed present while SeedIssued");
                if request[2..] == derive_key(seed, self.shared_secret) {
                    self.state = SecurityState::Unlocked;
                    self.failed_attempts = 0;
                    return vec![positive, SUB_SEND_KEY];
                }
                self.state = SecurityState::Locked;
                self.failed_attempts += 1;
                if self.failed_attempts >= MAX_ATTEMPTS {
                    self.failed_attempts = MAX_ATTEMPTS;
                    self.lockout_until = Some(now + LOCKOUT);
                    negative(NRC_EXCEEDED_ATTEMPTS)
                } else {
                    negative(NRC_INVALID_KEY)
                }
            }
            _ => negative(NRC_REQUEST_SEQUENCE_ERROR),
        }
    }
}

pub fn request_seed() -> Vec<u8> {
    vec![SID_SECURITY_ACCESS, SUB_REQUEST_SEED]
}

pub fn send_key(key: &[u8]) -> Vec<u8> {
    let mut r = vec![SID_SECURITY_ACCESS, SUB_SEND_KEY];
    r.extend_from_slice(key);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlockOutcome {
    Granted,
    Denied(u8),
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClientState {
    Idle,
    AwaitSeed,
    AwaitKeyReply,
    Done(UnlockOutcome),
}

/// Master-side handshake driven by responses as they arrive.
#[derive(Debug, Clone)]
pub struct UdsClient {
    shared_secret: u32,
    timeout: SimDuration,
    state: ClientState,
    started: SimTime,
    finished: Option<SimTime>,
}

impl UdsClient {
    pub fn new(shared_secret: u32) -> Self {
        Self::with_timeout(shared_secret, DEFAULT_CLIENT_TIMEOUT)
    }

    pub fn with_timeout(shared_secret: u32, timeout: SimDuration) -> Self {
        UdsClient { shared_secret, timeout, state: ClientState::Idle, started: SimTime::ZERO, finished: None }
    }

    /// Starts the handshake; returns the seed request to send.
    pub fn begin(&mut self, now: SimTime) -> Vec<u8> {
        self.state = ClientState::AwaitSeed;
        self.started = now;
        self.finished = None;
        request_seed()
    }

    /// Feeds a response. Returns the next request, if any.
    pub fn on_response(&mut self, response: &[u8], now: SimTime) -> Option<Vec<u8>> {
        let positive = SID_SECURITY_ACCESS + POSITIVE_RESPONSE_OFFSET;
        let next = match (self.state, response) {
            (ClientState::AwaitSeed, [p, SUB_REQUEST_SEED, s @ ..]) if *p == positive && s.len() == SEED_LEN => {
                let seed: [u8; SEED_LEN] = s.try_into().expect("length checked");
                if seed == [0; SEED_LEN] {
                    self.finish(UnlockOutcome::Granted, now);
                    return None;
                }
                self.state = ClientState::AwaitKeyReply;
                return Some(send_key(&derive_key(seed, self.shared_secret)));
            }
            (ClientState::AwaitKeyReply, [p, SUB_SEND_KEY]) if *p == positive => UnlockOutcome::Granted,
            (ClientState::AwaitSeed | ClientState::AwaitKeyReply, [NEGATIVE_RESPONSE, SID_SECURITY_ACCESS, nrc]) => {
                UnlockOutcome::Denied(*nrc)
            }
            _ => return None,
        };
        self.finish(next, now);
        None
    }

    /// Marks the handshake timed out once the deadline has passed.
    pub fn poll_timeout(&mut self, now: SimTime) -> Option<UnlockOutcome> {
        if matches!(self.state, ClientState::AwaitSeed | ClientState::AwaitKeyReply)
            && now.since(self.started) >= self.timeout
        {
            self.finish(UnlockOutcome::Timeout, now);
        }
        self.outcome()
    }

    fn finish(&mut self, outcome: UnlockOutcome, now: SimTime) {
        self.state = ClientState::Done(outcome);
        self.finished = Some(now);
    }

    pub fn outcome(&self) -> Option<UnlockOutcome> {
        match self.state {
            ClientState::Done(o) => Some(o),
            _ => None,
        }
    }

    /// Simulated time from `begin` to the outcome.
    pub fn duration(&self) -> Option<SimDuration> {
        self.finished.map(|f| f.since(self.started))
    }
}

/// One request or response observed during [`client_unlock`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exchange {
    pub time_us: u64,
    pub direction: &'static str,
    pub bytes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HandshakeReport {
    pub outcome: UnlockOutcome,
    pub duration: SimDuration,
    pub exchanges: Vec<Exchange>,
}

/// Addressing for a point-to-point handshake on a shared bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub master: NodeId,
    pub target: NodeId,
    pub request_id: u16,
    pub response_id: u16,
}

/// Runs a complete handshake between a client on `link.master` and
/// `server` on `link.target`, stepping the bus and advancing `clock`
/// until an outcome or the client's deadline.
pub fn client_unlock(
    bus: &mut CanBus,
    link: Link,
    server: &mut SecuritySession,
    client: &mut UdsClient,
    clock: &mut SimTime,
) -> HandshakeReport {
    let mut exchanges = Vec::new();
    let mut log = |t: SimTime, dir: &'static str, b: &[u8]| {
        exchanges.push(Exchange { time_us: t.as_micros(), direction: dir, bytes: hex::encode(b) })
    };
    let mut master_rx = SegmentedReceiver::new();
    let mut target_rx = SegmentedReceiver::new();
    let req = client.begin(*clock);
    log(*clock, "request", &req);
    // Payloads here are at most 34 bytes, well under the transport limit.
    send_segmented(bus, link.master, link.request_id, &req).expect("small payload");
    loop {
        if let Some(outcome) = client.poll_timeout(*clock) {
            return HandshakeReport { outcome, duration: client.duration().unwrap_or_default(), exchanges };
        }
        let step = bus.step(*clock);
        *clock += step.elapsed.max(SimDuration::from_micros(bus.config().frame_time_us));
        if let Ok(Some(request)) = recv_segmented(bus, link.target, &mut target_rx) {
            let response = server.handle(&request, *clock);
            log(*clock, "response", &response);
            send_segmented(bus, link.target, link.response_id, &response).expect("small payload");
        }
        if let Ok(Some(response)) = recv_segmented(bus, link.master, &mut master_rx) {
            if let Some(next) = client.on_response(&response, *clock) {
                log(*clock, "request", &next);
                send_segmented(bus, link.master, link.request_id, &next).expect("small payload");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::{AcceptanceFilter, BusConfig};

    const SECRET: u32 = 0x1357_9BDF;

    fn seed_of(resp: &[u8]) -> [u8; 4] {
        resp[2..6].try_into().unwrap()
    }

    #[test]
    fn xorshift_reference_values() {
        // x=1: 1 ^ (1<<13) = 0x2001; ^ (>>17) unchanged; ^ (<<5) = 0x42021
        assert_eq!(xorshift32(1), 0x0004_2021);
    }

    #[test]
    fn key_derivation_guard() {
        let seed = SECRET.to_be_bytes();
        let key = derive_key(seed, SECRET);
        assert_eq!(&key[..4], &xorshift32(0xDEAD_BEEF).to_be_bytes());
        assert_eq!(derive_key(seed, SECRET), key);
    }

    #[test]
    fn seed_then_key_unlocks() {
        let mut s = SecuritySession::new(SECRET, 42);
        let r = s.handle(&request_seed(), SimTime::ZERO);
        assert_eq!(&r[..2], &[0x67, 0x01]);
        assert_eq!(s.state(), SecurityState::SeedIssued);
        let key = derive_key(seed_of(&r), SECRET);
        assert_eq!(s.handle(&send_key(&key), SimTime::ZERO), vec![0x67, 0x02]);
        assert!(s.is_unlocked());
        assert_eq!(s.handle(&request_seed(), SimTime::ZERO), vec![0x67, 0x01, 0, 0, 0, 0]);
    }

    #[test]
    fn key_before_seed() {
        let mut s = SecuritySession::new(SECRET, 42);
        assert_eq!(s.handle(&send_key(&[0; 32]), SimTime::ZERO), vec![0x7F, 0x27, 0x24]);
    }

    #[test]
    fn unsupported_requests() {
        let mut s = SecuritySession::new(SECRET, 42);
        assert_eq!(s.handle(&[0x10, 0x01], SimTime::ZERO), vec![0x7F, 0x27, 0x22]);
        assert_eq!(s.handle(&[0x27, 0x05], SimTime::ZERO), vec![0x7F, 0x27, 0x22]);
        assert_eq!(s.handle(&[0x27], SimTime::ZERO), vec![0x7F, 0x27, 0x22]);
    }

    #[test]
    fn three_failures_lock_out_for_ten_seconds() {
        let mut s = SecuritySession::new(SECRET, 42);
        let t0 = SimTime::ZERO;
        let mut last = vec![];
        for _ in 0..3 {
            s.handle(&request_seed(), t0);
            last = s.handle(&send_key(&[0; 32]), t0);
        }
        assert_eq!(last, vec![0x7F, 0x27, 0x36]);
        assert_eq!(s.handle(&request_seed(), t0 + SimDuration::from_secs(9)), vec![0x7F, 0x27, 0x36]);
        let later = t0 + SimDuration::from_secs(10);
        let r = s.handle(&request_seed(), later);
        assert_eq!(&r[..2], &[0x67, 0x01]);
        assert_eq!(s.failed_attempts(), 0);
    }

    #[test]
    fn wrong_key_relocks() {
        let mut s = SecuritySession::new(SECRET, 42);
        s.handle(&request_seed(), SimTime::ZERO);
        assert_eq!(s.handle(&send_key(&[1; 32]), SimTime::ZERO), vec![0x7F, 0x27, 0x35]);
        assert_eq!(s.state(), SecurityState::Locked);
        assert_eq!(s.active_seed(), None);
    }

    #[test]
    fn seeds_do_not_repeat_early() {
        let mut s = SecuritySession::new(SECRET, 7);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..(1 << 16) {
            let r = s.handle(&request_seed(), SimTime::ZERO);
            assert!(seen.insert(seed_of(&r)));
        }
    }

    #[derive(Clone, Copy, Debug)]
    enum Step {
        Seed,
        GoodKey,
        BadKey,
        Junk,
    }

    #[test]
    fn unlocked_only_via_seed_then_good_key() {
        use Step::*;
        let all = [Seed, GoodKey, BadKey, Junk];
        let mut sequences: Vec<Vec<Step>> = Vec::new();
        for len in 1..=4u32 {
            for n in 0..4usize.pow(len) {
                sequences.push((0..len).map(|i| all[(n >> (2 * i)) & 3]).collect());
            }
        }
        assert_eq!(sequences.len(), 4 + 16 + 64 + 256);
        for seq in &sequences {
            let mut s = SecuritySession::new(SECRET, 99);
            let mut was_unlocked = false;
            let mut prev_effective: Option<Step> = None;
            for &step in seq {
                let before = s.state();
                let seed = s.active_seed();
                let req = match step {
                    Seed => request_seed(),
                    GoodKey => send_key(&seed.map(|sd| derive_key(sd, SECRET)).unwrap_or([0; 32])),
                    BadKey => send_key(&[0xEE; 32]),
                    Junk => vec![0x31, 0x01],
                };
                s.handle(&req, SimTime::ZERO);
                if s.is_unlocked() && !was_unlocked {
                    assert!(matches!(step, GoodKey), "{seq:?}");
                    assert!(matches!(prev_effective, Some(Seed)), "{seq:?}");
                    assert_eq!(before, SecurityState::SeedIssued);
                }
                was_unlocked = s.is_unlocked();
                if !matches!(step, Junk) {
                    prev_effective = Some(step);
                }
            }
        }
    }

    fn two_node_bus(cfg: BusConfig) -> (CanBus, Link) {
        let mut bus = CanBus::new(cfg).unwrap();
        let link = Link { master: NodeId(1), target: NodeId(2), request_id: 0x7E0, response_id: 0x7E8 };
        bus.attach(link.master, vec![AcceptanceFilter::exact(0x7E8)]).unwrap();
        bus.attach(link.target, vec![AcceptanceFilter::exact(0x7E0)]).unwrap();
        (bus, link)
    }

    #[test]
    fn handshake_over_bus() {
        let (mut bus, link) = two_node_bus(BusConfig::default());
        let mut server = SecuritySession::new(SECRET, 5);
        let mut client = UdsClient::new(SECRET);
        let mut clock = SimTime::ZERO;
        let r = client_unlock(&mut bus, link, &mut server, &mut client, &mut clock);
        assert_eq!(r.outcome, UnlockOutcome::Granted);
        assert_eq!(r.exchanges.len(), 4);
        assert!(r.duration > SimDuration::ZERO);
    }

    #[test]
    fn mismatched_secret_denied() {
        let (mut bus, link) = two_node_bus(BusConfig::default());
        let mut server = SecuritySession::new(SECRET, 5);
        let mut client = UdsClient::new(SECRET ^ 1);
        let mut clock = SimTime::ZERO;
        let r = client_unlock(&mut bus, link, &mut server, &mut client, &mut clock);
        assert_eq!(r.outcome, UnlockOutcome::Denied(0x35));
    }

    #[test]
    fn dead_bus_times_out() {
        let (mut bus, link) = two_node_bus(BusConfig { drop_probability: 1.0, ..BusConfig::default() });
        let mut server = SecuritySession::new(SECRET, 5);
        let mut client = UdsClient::new(SECRET);
        let mut clock = SimTime::ZERO;
        let r = client_unlock(&mut bus, link, &mut server, &mut client, &mut clock);
        assert_eq!(r.outcome, UnlockOutcome::Timeout);
        assert!(clock >= SimTime::ZERO + DEFAULT_CLIENT_TIMEOUT);
    }
}
