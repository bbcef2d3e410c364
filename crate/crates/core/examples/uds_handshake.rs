// Security access 0x27: a matched handshake over the bus, then the
// negative responses a misbehaving client provokes.

use fotasim::can::{AcceptanceFilter, BusConfig, CanBus, NodeId};
use fotasim::time::SimTime;
use fotasim::uds::{client_unlock, derive_key, request_seed, send_key, Link, SecuritySession, UdsClient};

const SECRET: u32 = 0xA5A5_0001;

pub fn run_example() {
    let mut bus = CanBus::new(BusConfig::default()).unwrap();
    bus.attach(NodeId(1), vec![AcceptanceFilter::exact(0x7E8)]).unwrap();
    bus.attach(NodeId(2), vec![AcceptanceFilter::exact(0x7E0)]).unwrap();
    let link = Link { master: NodeId(1), target: NodeId(2), request_id: 0x7E0, response_id: 0x7E8 };
    let mut server = SecuritySession::new(SECRET, 42);
    let mut clock = SimTime::ZERO;
    let report = client_unlock(&mut bus, link, &mut server, &mut UdsClient::new(SECRET), &mut clock);
    for x in &report.exchanges {
        println!("{:>6} us {:<8} {}", x.time_us, x.direction, x.bytes);
    }
    println!("{:?} in {} us", report.outcome, report.duration.as_micros());
    assert!(server.is_unlocked());

    let mut s = SecuritySession::new(SECRET, 7);
    let t = SimTime::ZERO;
    println!("key before seed  -> {:02X?}", s.handle(&send_key(&[0; 32]), t));
    for _ in 0..3 {
        let seed: [u8; 4] = s.handle(&request_seed(), t)[2..6].try_into().unwrap();
        let key = derive_key(seed, SECRET ^ 1);
        println!("wrong key        -> {:02X?}", s.handle(&send_key(&key), t));
    }
    println!("during lockout   -> {:02X?}", s.handle(&request_seed(), t));
}

fn main() {
    run_example();
}
