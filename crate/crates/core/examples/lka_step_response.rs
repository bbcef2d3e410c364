// Closed-loop steering response with the default gains, plus the
// deviation-to-motor-order mapping.

use fotasim::lka::{
    deviation_to_target, motor_order, parse_deviation_line, simulate, PidGains, DEFAULT_DT_S, DEFAULT_THRESHOLD_M,
};

pub fn run_example() {
    let gains = PidGains::default();
    for target in [10.0, 30.0] {
        let trace = simulate(&gains, target, 0.0, 5.0, DEFAULT_DT_S).unwrap();
        let at = |t: f64| trace.iter().find(|p| p.time_s >= t - 1e-9).map_or(f64::NAN, |p| p.error_deg);
        println!(
            "target {target:>4}°: error {:.2}° at 0.5 s, {:.2}° at 1 s, {:.3}° at 5 s",
            at(0.5),
            at(1.0),
            trace.last().unwrap().error_deg
        );
    }
    for line in ["0.25\n", "-1.07\n", "0.03\n", "1.5\n"] {
        match parse_deviation_line(line) {
            Ok(d) => println!(
                "{:>7} -> motor order {}, target {:+.1}°",
                line.trim(),
                motor_order(d, DEFAULT_THRESHOLD_M).unwrap(),
                deviation_to_target(d).unwrap()
            ),
            Err(e) => println!("{:>7} -> {e}", line.trim()),
        }
    }
}

fn main() {
    run_example();
}
