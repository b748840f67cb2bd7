//! Trains every mode on synthetic long-tail data for several seeds and
//! prints overall and tail accuracy.
//!
//! cargo run --release --example synthetic_sweep -- [epochs] [seeds] [selection_bias] [key=value ...]

use std::time::Instant;

use scd_core::eval::{evaluate, Buckets};
use scd_core::synth::{generate, SynthConfig};
use scd_core::train::{TrainConfig, TrainMode, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(Ok(50), |s| s.parse())?;
    let seeds: u64 = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let first: u64 = std::env::var("FIRST_SEED").map_or(Ok(0), |s| s.parse())?;
    let bias: f64 = args.get(2).map_or(Ok(0.0), |s| s.parse())?;
    let overrides = args.get(3..).unwrap_or(&[]);
    // [scd > supervised, scd >= random, scd acc >= 0.75]
    let mut tally = [0usize; 3];
    for seed in first..first + seeds {
        let data = generate(&SynthConfig { seed, selection_bias: bias, ..SynthConfig::default() })?;
        let split = scd_core::corpus::split_train_test(&data.responses, 0.8, seed)?;
        let mut line = format!("seed {seed}:");
        let mut acc50 = Vec::new();
        let mut acc = Vec::new();
        for mode in [TrainMode::Scd, TrainMode::ScdRandom, TrainMode::SupervisedOnly] {
            let mut cfg = TrainConfig { epochs, master_seed: seed, mode, ..TrainConfig::default() };
            cfg.apply_overrides(overrides)?;
            let t0 = Instant::now();
            let mut t = Trainer::new(cfg, split.train.clone(), data.q.clone())?;
            t.run()?;
            let r = evaluate(t.params(), t.graph(), t.q(), t.train_set(), split.test.records(), Buckets::default())?;
            acc50.push(r.acc50);
            acc.push(r.acc);
            line += &format!(
                "  {} acc {:.4} acc50 {:.4} ({:.1}s)",
                mode.label(),
                r.acc,
                r.acc50,
                t0.elapsed().as_secs_f64()
            );
        }
        println!("{line}");
        tally[0] += usize::from(acc50[0] > acc50[2]);
        tally[1] += usize::from(acc50[0] >= acc50[1]);
        tally[2] += usize::from(acc[0] >= 0.75);
    }
    println!(
        "of {seeds} seeds: scd tail > supervised {}, scd tail >= random {}, scd acc >= 0.75 {}",
        tally[0], tally[1], tally[2]
    );
    Ok(())
}
