//! Prints the benchmark table for the default synthetic suite.
//!
//! cargo run --release --example benchmark -- [size] [iterations]

use std::time::Instant;

use focaldepth::estimate::LossConfig;
use focaldepth::eval::{default_suite, run_benchmark, BenchmarkConfig};

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let size = args.next().unwrap_or(64);
    let iterations = args.next().unwrap_or(200);
    let cfg = BenchmarkConfig {
        loss: LossConfig {
            iterations,
            // sum-based smoothness, scaled to the image area
            smoothness: 0.4096 / (size * size) as f64,
            ..LossConfig::default()
        },
        ..BenchmarkConfig::default()
    };
    let t = Instant::now();
    let report = run_benchmark(&default_suite(size, size, 7), &cfg).expect("benchmark runs");
    print!("{}", report.to_table());
    eprintln!(
        "{size}x{size}, {iterations} iterations: {:.1}s",
        t.elapsed().as_secs_f64()
    );
}
