//! Writes the planted-world fixture: dataset, pipeline graph, world and a run config.
//!
//! Usage: `cargo run -p failmass --example planted_fixture -- <dir> [n] [seed] [noise]`

use std::path::PathBuf;

use failmass::harness::write_dataset;
use failmass::scenario;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixtures/planted".into()));
    let n: usize = args.next().map_or(500, |s| s.parse().expect("n"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let noise: f64 = args.next().map_or(0.02, |s| s.parse().expect("noise"));

    std::fs::create_dir_all(&dir).expect("create fixture dir");
    write_dataset(&dir.join("dataset.jsonl"), &scenario::dataset(n, seed)).expect("write dataset");
    std::fs::write(dir.join("graph.json"), scenario::pipeline().to_json() + "\n").expect("write graph");
    let world = serde_json::to_string_pretty(&scenario::world(noise)).expect("world json");
    std::fs::write(dir.join("world.json"), world + "\n").expect("write world");
    let config = serde_json::json!({
        "dataset": "dataset.jsonl",
        "graph": "graph.json",
        "backend": {"type": "simulated", "world": "world.json"},
        "operators": ["base"],
        "diagnoser": "rule",
        "proposer": "rule",
        "split": [0.8, 0.1, 0.1],
        "out": "out",
        "seed": seed,
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).expect("json") + "\n")
        .expect("write config");
    println!("wrote fixture to {}", dir.display());
}
