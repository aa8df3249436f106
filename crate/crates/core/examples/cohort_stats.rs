use std::time::Instant;
use wba_core::synth::{generate, CohortConfig};

fn main() {
    let start = Instant::now();
    let cohort = generate(&CohortConfig::default()).expect("default config is valid");
    let elapsed = start.elapsed();
    println!("{}", serde_json::to_string_pretty(&cohort.stats()).unwrap());
    println!("generated in {elapsed:?}");
}
