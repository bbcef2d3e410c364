// Load a scenario file, run it, and print the JSON report.

use std::path::Path;

use fotasim::scenario::Scenario;

pub fn run_example() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/delta_gains_update.json");
    let scenario = Scenario::load(&path).unwrap();
    let run = scenario.run(false).unwrap();
    println!("{}", serde_json::to_string_pretty(&run.report).unwrap());
    assert!(run.report.succeeded());
    println!("{} events; the last few:", run.world.log.len());
    for line in run.world.log.to_jsonl().lines().rev().take(4).collect::<Vec<_>>().into_iter().rev() {
        println!("  {line}");
    }
}

fn main() {
    run_example();
}
