//! Baseline and decoupled detectors on one seed of the synthetic benchmark, scored in
//! both basis modes, with a checkpoint round trip.
//!
//! Run with `cargo run --release --example train_eval` (about two minutes).

use gsd_core::checkpoint::Checkpoint;
use gsd_core::config::RunConfig;
use gsd_core::experiment;
use gsd_core::gsd::EvalBasisMode;

fn main() -> gsd_core::Result<()> {
    let cfg = RunConfig::default();
    let splits = experiment::generate_splits(&cfg)?;
    let frozen = experiment::pretrain(&cfg, &splits)?;

    for enabled in [false, true] {
        let mut run = cfg.clone();
        run.gsd_enabled = enabled;
        run.train.eval_each_epoch = false;
        let outcome = experiment::train(&run, &splits, &frozen)?;
        let name = if enabled { "gsd" } else { "baseline" };
        for mode in [EvalBasisMode::PerBatch, EvalBasisMode::FrozenTrainBasis] {
            let r = experiment::report(&run, &frozen, &outcome, &splits, mode)?;
            println!(
                "{name:8} {mode:18}: A frame {:.4} group {:.4} | B frame {:.4} group {:.4}",
                r.test_a.auc_frame, r.test_a.auc_group, r.test_b.auc_frame, r.test_b.auc_group
            );
        }

        let path = std::env::temp_dir().join(format!("gsd_example_{name}.ckpt"));
        let ckpt = Checkpoint::new(outcome.detector.clone(), outcome.last_basis.clone());
        ckpt.save(&path)?;
        let back = Checkpoint::load(&path)?;
        let exact = back.model.params.flatten().iter().map(|v| v.to_bits())
            .eq(ckpt.model.params.flatten().iter().map(|v| v.to_bits()));
        println!("{name:8} checkpoint {} round trip bit-exact: {exact}", path.display());
    }
    Ok(())
}
