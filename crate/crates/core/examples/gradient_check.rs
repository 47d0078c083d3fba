//! Central finite differences against the hand-written backward pass, with and
//! without decoupling.
//!
//! Run with `cargo run --release --example gradient_check`.

use gsd_core::encoder::{self, EncoderConfig, EncoderModel};
use gsd_core::gsd::GsdConfig;
use gsd_core::rng;
use gsd_core::training::{self, dual_stream_backward, finite_difference_check};
use rand::Rng;

fn main() -> gsd_core::Result<()> {
    let config = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        depth: 2,
        mlp_ratio: 2.0,
    };
    let frozen = EncoderModel::init(config, &mut rng::stream(1, &[]))?;
    let detector = EncoderModel::init(config, &mut rng::stream(2, &[]))?;
    let mut r = rng::stream(3, &[]);
    let images: Vec<Vec<f64>> = (0..4).map(|_| (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let labels = [0u8, 1, 1, 0];
    let gsd = GsdConfig {
        num_tail_layers: 1,
        requested_k: 2,
        ..GsdConfig::default()
    };

    let dual = dual_stream_backward(&frozen, &detector, &refs, &labels, &gsd)?;
    println!("loss {:.6}, effective k {}", dual.loss, dual.basis.effective_k());
    println!("frozen gradient L1 norm: {}", dual.frozen.abs_sum());

    for (name, g, grads) in [
        ("with decoupling", Some(&gsd), dual.detector.flatten()),
        ("plain", None, training::backward(&detector, &refs, &labels, None, None)?.grads.flatten()),
    ] {
        let basis = g.map(|_| &dual.basis);
        let mut probe = detector.clone();
        let report = finite_difference_check(
            |x| {
                probe.params.assign_flat(x);
                let logits: Vec<f64> = refs
                    .iter()
                    .map(|im| encoder::forward(&probe, im, g, basis, false).map(|t| t.logit).unwrap_or(f64::NAN))
                    .collect();
                training::bce_loss(&logits, &labels).unwrap_or(f64::NAN)
            },
            &detector.params.flatten(),
            &grads,
            1e-6,
        )?;
        println!(
            "{name}: {} parameters, max relative error {:.2e} at coordinate {}",
            grads.len(),
            report.max_rel_error,
            report.worst_index
        );
    }
    Ok(())
}
