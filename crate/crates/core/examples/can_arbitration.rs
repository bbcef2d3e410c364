// Three nodes queue frames in the same instant; the lowest identifier
// always wins the bus.

use fotasim::can::{AcceptanceFilter, BusConfig, CanBus, CanFrame, NodeId};
use fotasim::time::SimTime;

pub fn run_example() {
    let mut bus = CanBus::new(BusConfig::default()).unwrap();
    bus.enable_trace();
    for n in 1..=4 {
        bus.attach(NodeId(n), vec![AcceptanceFilter::accept_all()]).unwrap();
    }
    bus.transmit(NodeId(1), CanFrame::new(0x300, b"body").unwrap()).unwrap();
    bus.transmit(NodeId(2), CanFrame::new(0x100, b"brake").unwrap()).unwrap();
    bus.transmit(NodeId(3), CanFrame::new(0x200, b"steer").unwrap()).unwrap();
    bus.transmit(NodeId(2), CanFrame::new(0x100, b"brake2").unwrap()).unwrap();

    let mut now = SimTime::ZERO;
    while !bus.idle() {
        let step = bus.step(now);
        now += step.elapsed;
    }
    let order: Vec<u16> = bus.trace().iter().map(|r| r.frame.id).collect();
    for r in bus.trace() {
        println!("{}", r.csv_line());
    }
    assert_eq!(order, [0x100, 0x100, 0x200, 0x300]);
    let got = bus.receive(NodeId(4)).unwrap();
    println!("node 4 first received {:#05x} {:?}", got.id, String::from_utf8_lossy(got.payload()));
}

fn main() {
    run_example();
}
