//! A reduced basis-size sweep over two seeds, printed as CSV.
//!
//! Run with `cargo run --release --example sweep`.

use gsd_core::config::RunConfig;
use gsd_core::experiment::{self, SweepAxis};

fn main() -> gsd_core::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seeds = vec![1, 2];
    cfg.train.epochs = 4;
    cfg.train.pretrain_epochs = 4;
    cfg.data.n_identities = 10;
    let values: Vec<String> = ["2", "8"].iter().map(|s| s.to_string()).collect();
    let rows = experiment::sweep(&cfg, SweepAxis::K, &values, |r| {
        eprintln!("k={} seed {}: B group AUC {:.4}", r.value, r.seed, r.auc_group_b);
    })?;
    print!("{}", experiment::sweep_csv(&rows));
    Ok(())
}
