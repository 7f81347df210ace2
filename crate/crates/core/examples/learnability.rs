//! Trains the exp1.1 preset on a synthetic cohort and prints held-out metrics.
//!
//! `cargo run --release -p ehrseq-core --example learnability -- [patients] [seed]`

use std::time::Instant;

use ehrseq_core::pipeline::{run, RunConfig};
use ehrseq_core::synth::{generate, SynthConfig};

fn main() -> ehrseq_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_patients = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let start = Instant::now();
    let raw = generate(&SynthConfig { n_patients, seed, ..Default::default() })?;
    let mut cfg = RunConfig::preset("exp1.1")?;
    cfg.seed = seed;
    let out = run(&raw, &cfg)?;
    for e in &out.history.epochs {
        println!("{}", serde_json::to_string(e).expect("plain record"));
    }
    print!("{}", out.report.to_json());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
