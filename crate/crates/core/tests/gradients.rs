use gsd_core::basis::basis_from_globals;
use gsd_core::encoder::{self, EncoderConfig, EncoderModel};
use gsd_core::gsd::{decouple, GsdConfig};
use gsd_core::linalg::{DenseMatrix, DEFAULT_RANK_TOL};
use gsd_core::rng;
use gsd_core::training::{self, backward, finite_difference_check};
use rand::Rng;

fn images(seed: u64, count: usize, pixels: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[]);
    (0..count)
        .map(|_| (0..pixels).map(|_| r.gen_range(0.0..1.0)).collect())
        .collect()
}

fn check_encoder(cfg: EncoderConfig, seed: u64, with_gsd: bool) -> f64 {
    let mut detector = EncoderModel::init(cfg, &mut rng::stream(seed, &[1])).unwrap();
    // exercise non-trivial norms and head
    let mut r = rng::stream(seed, &[2]);
    for t in detector.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let frozen = EncoderModel::init(cfg, &mut rng::stream(seed, &[3])).unwrap();
    let imgs = images(seed, 2, cfg.image_size * cfg.image_size);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let labels = [1u8, 0u8];
    let gsd = GsdConfig {
        num_tail_layers: cfg.depth,
        requested_k: 4,
        ..GsdConfig::default()
    };
    let basis = encoder::batch_basis(&frozen, &refs, &gsd).unwrap();
    if with_gsd {
        assert_eq!(basis.effective_k(), 1);
    }
    let (g_opt, b_opt) = if with_gsd {
        (Some(&gsd), Some(&basis))
    } else {
        (None, None)
    };
    let analytic = backward(&detector, &refs, &labels, g_opt, b_opt).unwrap();
    let point = detector.params.flatten();
    let grad = analytic.grads.flatten();
    let mut probe = detector.clone();
    let rep = finite_difference_check(
        |x| {
            probe.params.assign_flat(x);
            let logits: Vec<f64> = refs
                .iter()
                .map(|im| encoder::forward(&probe, im, g_opt, b_opt, false).unwrap().logit)
                .collect();
            training::bce_loss(&logits, &labels).unwrap()
        },
        &point,
        &grad,
        1e-6,
    )
    .unwrap();
    detector.params.assign_flat(&point);
    rep.max_rel_error
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        depth: 2,
        mlp_ratio: 2.0,
    };
    for seed in 0..3 {
        for gsd in [false, true] {
            let err = check_encoder(cfg, seed, gsd);
            eprintln!("seed {seed} gsd {gsd}: {err:e}");
            assert!(err <= 1e-5, "seed {seed} gsd {gsd}: {err:e}");
        }
    }
}

#[test]
fn decouple_gradient_is_projected_upstream() {
    let mut r = rng::stream(5, &[]);
    let globals = DenseMatrix::new(4, 6, (0..24).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let basis = basis_from_globals(&globals, 3, DEFAULT_RANK_TOL).unwrap();
    let f = DenseMatrix::new(3, 6, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    // loss = ‖decouple(F)‖² / 2  ⇒  ∂loss/∂F = F (I − U Uᵀ)
    let analytic = decouple(&f, &basis).unwrap();
    let rep = finite_difference_check(
        |x| {
            let m = DenseMatrix::new(3, 6, x.to_vec()).unwrap();
            let d = decouple(&m, &basis).unwrap();
            d.data().iter().map(|v| v * v).sum::<f64>() / 2.0
        },
        f.data(),
        analytic.data(),
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-8, "{rep:?}");
}
