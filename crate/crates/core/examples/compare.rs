//! Run presets over a few seeds and print hard-tier coverage and collapse
//! indicators for each.
//!
//! cargo run --release -p ngrpo-lab --example compare -- presets/grpo.cfg presets/ngrpo.cfg

use ngrpo_lab::config::RunConfig;
use ngrpo_lab::trainer::run_training;
use ngrpo_lab::{make_suite, Tier};

fn main() {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    if paths.is_empty() {
        eprintln!("usage: compare PRESET...");
        std::process::exit(2);
    }
    for path in &paths {
        let cfg = RunConfig::load(path.as_ref()).expect("config");
        for seed in 0..3u64 {
            let mut run = cfg.resolve().expect("valid config");
            run.train.seed = seed;
            let suite = make_suite(&run.suite).expect("suite");
            let result = run_training(&run.train, &suite, run.suite.vocab, 0).expect("run");
            let last = result.trace.last().expect("non-empty trace");
            let max_incorrect = result
                .trace
                .iter()
                .map(|d| d.total_incorrect)
                .max()
                .unwrap_or(0);
            println!(
                "{path} seed {seed}: hard solved once {} entropy {:.3} fully_solved {} max_total_incorrect {}",
                result.ever_solved(Tier::Hard),
                last.mean_entropy,
                last.fully_solved,
                max_incorrect
            );
        }
    }
}
