//! Dual-stream forward pass: the frozen stream supplies the batch basis, the detector
//! runs with its final blocks decoupled.
//!
//! Run with `cargo run --release --example dual_stream`.

use gsd_core::encoder::{dual_stream_forward, EncoderConfig, EncoderModel};
use gsd_core::gsd::GsdConfig;
use gsd_core::rng;
use gsd_core::synthgen::{generate_split, SynthConfig};

fn main() -> gsd_core::Result<()> {
    let config = EncoderConfig::default();
    let frozen = EncoderModel::init(config, &mut rng::stream(1, &[rng::label("frozen")]))?;
    let detector = frozen.clone();
    let data = generate_split(&SynthConfig::default())?;
    let images: Vec<&[f64]> = data.images().into_iter().step_by(25).collect();
    println!("batch of {} images, encoder {:?}", images.len(), config);

    for tail in 0..=config.depth {
        let gsd = GsdConfig {
            num_tail_layers: tail,
            requested_k: 8,
            ..GsdConfig::default()
        };
        let out = dual_stream_forward(&frozen, &detector, &images, &gsd)?;
        println!(
            "tail layers {tail}: effective k {}, residual {:.1e}, first logits {:.4?}",
            out.effective_k,
            out.residual_orthogonality,
            &out.logits[..3]
        );
    }
    Ok(())
}
