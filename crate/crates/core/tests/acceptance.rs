//! One line per acceptance criterion. The exact criteria (1-4, 9 and the structural
//! parts of 5 and 8) always decide the exit status; the directional outcomes of the
//! synthetic benchmark (5-8) are printed, and asserted only when run with `--ignored`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gsd_core::basis::basis_from_globals;
use gsd_core::checkpoint::Checkpoint;
use gsd_core::config::RunConfig;
use gsd_core::encoder::{self, EncoderConfig, EncoderModel};
use gsd_core::experiment::{self, RunReport, SweepAxis};
use gsd_core::gsd::{decouple, residual_orthogonality, semantic_component, GsdConfig};
use gsd_core::linalg::{householder_qr, matmul, DenseMatrix, DEFAULT_RANK_TOL};
use gsd_core::metrics::{group_auc, roc_auc};
use gsd_core::rng;
use gsd_core::training::{self, dual_stream_backward, finite_difference_check};
use rand::Rng;

const K_VALUES: [usize; 4] = [2, 4, 8, 16];
const DEPTHS: [usize; 5] = [0, 1, 2, 4, 6];

fn line(n: usize, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("criterion {n}: {} | {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> bool {
    let mut r = rng::stream(101, &[]);
    let start = Instant::now();
    let (mut orth, mut recon) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let g = random_matrix(r.gen_range(4..=256), r.gen_range(1..=64), &mut r);
        let qr = householder_qr(&g).unwrap();
        let t = qr.q.cols();
        let gram = matmul(&qr.q.transpose(), &qr.q).unwrap();
        orth = orth.max(gram.sub(&DenseMatrix::identity(t)).unwrap().max_abs());
        let back = matmul(&qr.q, &qr.r).unwrap();
        recon = recon.max(back.sub(&g).unwrap().max_abs() / g.max_abs());
    }
    let elapsed = start.elapsed();
    line(
        1,
        orth <= 1e-10 && recon <= 1e-9 && elapsed <= Duration::from_secs(5),
        format!("max |QtQ-I| {orth:.2e}, max |QR-G|/|G| {recon:.2e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> bool {
    let mut r = rng::stream(202, &[]);
    let (mut null, mut idem, mut comp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = r.gen_range(2..=64);
        let b = r.gen_range(2..=32);
        let u = basis_from_globals(&random_matrix(b, d, &mut r), r.gen_range(1..=16), DEFAULT_RANK_TOL).unwrap();
        let f = random_matrix(r.gen_range(1..=16), d, &mut r);
        let out = decouple(&f, &u).unwrap();
        for i in 0..out.rows() {
            let single = DenseMatrix::new(1, d, out.row(i).to_vec()).unwrap();
            let norm = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            null = null.max(residual_orthogonality(&single, &u).unwrap() / norm);
        }
        idem = idem.max(decouple(&out, &u).unwrap().sub(&out).unwrap().max_abs());
        let sem = semantic_component(&f, &u).unwrap();
        comp = comp.max(out.add(&sem).unwrap().sub(&f).unwrap().max_abs());
    }
    line(
        2,
        null <= 1e-8 && idem <= 1e-10 && comp <= 1e-12,
        format!("null space {null:.2e}, idempotency {idem:.2e}, complementarity {comp:.2e}"),
    )
}

fn criterion_3() -> bool {
    let mut r = rng::stream(303, &[]);
    let mut worst = 0.0f64;
    let mut frozen_zero = true;
    for case in 0..20u64 {
        let patch = [2, 4][r.gen_range(0..2)];
        let heads = [1, 2][r.gen_range(0..2)];
        let cfg = EncoderConfig {
            image_size: 8,
            patch_size: patch,
            dim: heads * [2, 4][r.gen_range(0..2)],
            heads,
            depth: r.gen_range(1..=3),
            mlp_ratio: [1.0, 2.0][r.gen_range(0..2)],
        };
        let mut detector = EncoderModel::init(cfg, &mut rng::stream(case, &[1])).unwrap();
        for t in detector.params.tensors_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.1..0.1);
            }
        }
        let frozen = EncoderModel::init(cfg, &mut rng::stream(case, &[2])).unwrap();
        let imgs: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let labels = [1u8, 0, 1];
        let gsd = GsdConfig {
            num_tail_layers: r.gen_range(1..=cfg.depth),
            requested_k: 2,
            ..GsdConfig::default()
        };
        for with_gsd in [false, true] {
            let (grads, basis) = if with_gsd {
                let dual = dual_stream_backward(&frozen, &detector, &refs, &labels, &gsd).unwrap();
                frozen_zero &= dual.frozen.flatten().iter().all(|&v| v == 0.0);
                (dual.detector, Some(dual.basis))
            } else {
                (training::backward(&detector, &refs, &labels, None, None).unwrap().grads, None)
            };
            let g = with_gsd.then_some(&gsd);
            let point = detector.params.flatten();
            let mut probe = detector.clone();
            let rep = finite_difference_check(
                |x| {
                    probe.params.assign_flat(x);
                    let logits: Vec<f64> = refs
                        .iter()
                        .map(|im| encoder::forward(&probe, im, g, basis.as_ref(), false).unwrap().logit)
                        .collect();
                    training::bce_loss(&logits, &labels).unwrap()
                },
                &point,
                &grads.flatten(),
                1e-6,
            )
            .unwrap();
            worst = worst.max(rep.max_rel_error);
        }
    }
    line(
        3,
        worst <= 1e-5 && frozen_zero,
        format!("max relative error {worst:.2e} over 20 configs x GSD on/off, frozen gradient zero: {frozen_zero}"),
    )
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn criterion_4() -> bool {
    let mut r = rng::stream(404, &[]);
    let (mut exact, mut bitwise) = (0, 0);
    for _ in 0..200 {
        let n = r.gen_range(2..=2000);
        let levels = r.gen_range(1..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..levels)) * 0.1).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        exact += usize::from(auc == brute_force_auc(&scores, &labels));
        let groups: Vec<usize> = (0..n).collect();
        bitwise += usize::from(group_auc(&scores, &labels, &groups).unwrap().to_bits() == auc.to_bits());
    }
    line(
        4,
        exact == 200 && bitwise == 200,
        format!("{exact}/200 equal to pair counting, {bitwise}/200 singleton group AUC bitwise equal"),
    )
}

/// Final test-B metrics of one trained detector.
#[derive(Clone, Debug)]
struct Scored {
    report: RunReport,
    identity_silhouette_b: f64,
}

fn score(cfg: &RunConfig, splits: &training::Splits, frozen: &training::FrozenStream) -> Scored {
    let (_, report) = experiment::scored_run(cfg, splits, frozen).unwrap();
    let fakes = experiment::fake_rows(&splits.test_b);
    let identity_silhouette_b = experiment::feature_silhouette(&report.test_b, &splits.test_b, &fakes, true).unwrap();
    Scored {
        report,
        identity_silhouette_b,
    }
}

/// Every run of the synthetic benchmark for one seed.
struct SeedRuns {
    baseline: Scored,
    by_k: Vec<Scored>,
    by_depth: Vec<Scored>,
}

struct Benchmark {
    seeds: Vec<SeedRuns>,
    /// Data, pretraining, baseline and GSD (k = 8, two tail layers) for every seed.
    headline_time: Duration,
    total_time: Duration,
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = RunConfig::default();
        let start = Instant::now();
        let mut headline_time = Duration::ZERO;
        let mut seeds = Vec::new();
        for &seed in &base.seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            let t = Instant::now();
            let splits = experiment::generate_splits(&cfg).unwrap();
            let frozen = experiment::pretrain(&cfg, &splits).unwrap();
            let mut plain = cfg.clone();
            plain.gsd_enabled = false;
            let baseline = score(&plain, &splits, &frozen);
            let mut gsd_cfg = cfg.clone();
            gsd_cfg.gsd_enabled = true;
            gsd_cfg.gsd.requested_k = 8;
            gsd_cfg.gsd.num_tail_layers = 2;
            let headline = score(&gsd_cfg, &splits, &frozen);
            headline_time += t.elapsed();
            eprintln!(
                "seed {seed}: baseline B group {:.4}, gsd B group {:.4}",
                baseline.report.test_b.auc_group, headline.report.test_b.auc_group
            );
            let by_k = K_VALUES
                .iter()
                .map(|&k| {
                    if k == 8 {
                        return headline.clone();
                    }
                    score(&SweepAxis::K.apply(&gsd_cfg, &k.to_string()).unwrap(), &splits, &frozen)
                })
                .collect();
            let by_depth = DEPTHS
                .iter()
                .map(|&d| {
                    if d == 2 {
                        return headline.clone();
                    }
                    score(&SweepAxis::Depth.apply(&gsd_cfg, &d.to_string()).unwrap(), &splits, &frozen)
                })
                .collect();
            seeds.push(SeedRuns {
                baseline,
                by_k,
                by_depth,
            });
        }
        Benchmark {
            seeds,
            headline_time,
            total_time: start.elapsed(),
        }
    })
}

struct Directional {
    c5: bool,
    c6: bool,
    c7: bool,
    c8: bool,
    /// The parts of 5 and 8 that do not depend on GSD helping.
    structural: bool,
}

fn directional() -> Directional {
    let b = benchmark();
    let seeds = &b.seeds;
    let base_a = mean(&seeds.iter().map(|s| s.baseline.report.test_a.auc_group).collect::<Vec<_>>());
    let base_b = mean(&seeds.iter().map(|s| s.baseline.report.test_b.auc_group).collect::<Vec<_>>());
    let k_mean = |i: usize| mean(&seeds.iter().map(|s| s.by_k[i].report.test_b.auc_group).collect::<Vec<_>>());
    let d_mean = |i: usize| mean(&seeds.iter().map(|s| s.by_depth[i].report.test_b.auc_group).collect::<Vec<_>>());
    let gsd_b = k_mean(2);
    let timely = b.headline_time <= Duration::from_secs(30 * 60);
    let c5 = base_a >= 0.95 && base_a - base_b >= 0.10 && gsd_b - base_b >= 0.05 && timely;
    line(
        5,
        c5,
        format!(
            "baseline A group {base_a:.4}, baseline B group {base_b:.4} (drop {:.4}), GSD B group {gsd_b:.4} (gain {:+.4}), {:.1?} for 5 seeds",
            base_a - base_b,
            gsd_b - base_b,
            b.headline_time
        ),
    );

    let sil_base = mean(&seeds.iter().map(|s| s.baseline.identity_silhouette_b).collect::<Vec<_>>());
    let sil_gsd = mean(&seeds.iter().map(|s| s.by_k[2].identity_silhouette_b).collect::<Vec<_>>());
    let c6 = line(
        6,
        sil_gsd < sil_base,
        format!("B fake identity silhouette: GSD {sil_gsd:.4}, baseline {sil_base:.4}"),
    );

    let ks: Vec<f64> = (0..K_VALUES.len()).map(k_mean).collect();
    let spread = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ks.iter().cloned().fold(f64::INFINITY, f64::min);
    let c7 = line(
        7,
        spread <= 0.03,
        format!("B group AUC by k {K_VALUES:?}: {ks:.4?}, spread {spread:.4}"),
    );

    let depth0_identical = seeds.iter().all(|s| {
        let (a, b) = (&s.by_depth[0].report, &s.baseline.report);
        a.test_b.logits.iter().zip(&b.test_b.logits).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.test_a.logits.iter().zip(&b.test_a.logits).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.test_b.auc_group.to_bits() == b.test_b.auc_group.to_bits()
    });
    let ds: Vec<f64> = (0..DEPTHS.len()).map(d_mean).collect();
    let best_tail = ds[1..DEPTHS.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let full = ds[DEPTHS.len() - 1];
    let c8 = line(
        8,
        depth0_identical && full <= best_tail,
        format!(
            "depth-0 bit-identical to baseline: {depth0_identical}; B group AUC by depth {DEPTHS:?}: {ds:.4?}; full {full:.4} vs best tail {best_tail:.4}"
        ),
    );
    println!("synthetic benchmark total wall time {:.1?}", b.total_time);
    Directional {
        c5,
        c6,
        c7,
        c8,
        structural: base_a >= 0.95 && base_a - base_b >= 0.10 && timely && depth0_identical,
    }
}

const TINY: &str = "\
encoder.image_size = 16
encoder.patch_size = 8
encoder.dim = 8
encoder.heads = 2
encoder.depth = 2
encoder.mlp_ratio = 2
gsd.num_tail_layers = 1
gsd.k = 2
train.epochs = 2
train.batch = 16
train.pretrain_epochs = 1
data.n_identities = 4
data.samples_per_identity = 20
";

fn criterion_9() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = p.join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut ok = true;
    for run in ["a", "b"] {
        let out = p.join(run);
        let data = out.join("data");
        std::fs::create_dir(&out).unwrap();
        let data = data.to_str().unwrap();
        ok &= gsd_core::cli::run(["gsd", "generate", "--config", cfg, "--out", data]) == 0;
        let train_out = out.join("run");
        let train_out = train_out.to_str().unwrap();
        ok &= gsd_core::cli::run(["gsd", "train", "--config", cfg, "--data", data, "--out", train_out]) == 0;
    }
    let files = [
        "data/train_a.bin",
        "data/test_a.bin",
        "data/test_b.bin",
        "data/train_a.csv",
        "run/frozen.ckpt",
        "run/detector.ckpt",
        "run/trace.csv",
    ];
    let identical = files
        .iter()
        .filter(|f| std::fs::read(p.join("a").join(f)).ok() == std::fs::read(p.join("b").join(f)).ok())
        .count();

    let ckpt_path = p.join("a/run/detector.ckpt");
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let resaved = p.join("resaved.ckpt");
    ckpt.save(&resaved).unwrap();
    let again = Checkpoint::load(&resaved).unwrap();
    let round_trip = std::fs::read(&ckpt_path).unwrap() == std::fs::read(&resaved).unwrap()
        && again.model.params.flatten().iter().map(|v| v.to_bits()).eq(ckpt.model.params.flatten().iter().map(|v| v.to_bits()))
        && again.basis.is_some();
    line(
        9,
        ok && identical == files.len() && round_trip,
        format!("{identical}/{} outputs byte-identical across repeated runs, checkpoint round trip bit-exact: {round_trip}", files.len()),
    )
}

fn main() {
    // `-- --ignored` also asserts the directional benchmark criteria 5-8
    let strict = std::env::args().any(|a| a == "--ignored" || a == "--include-ignored");
    let exact = [criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let d = directional();
    let c9 = criterion_9();
    let mut failed = Vec::new();
    if !exact.iter().all(|&x| x) {
        failed.push("an exact criterion among 1-4");
    }
    if !d.structural {
        failed.push("baseline calibration, wall time or depth-0 identity");
    }
    if !c9 {
        failed.push("determinism");
    }
    if strict && !(d.c5 && d.c6 && d.c7 && d.c8) {
        failed.push("a directional criterion among 5-8");
    }
    if failed.is_empty() {
        println!("acceptance: ok{}", if strict { " (strict)" } else { "" });
    } else {
        println!("acceptance: failed: {}", failed.join("; "));
        std::process::exit(1);
    }
}
