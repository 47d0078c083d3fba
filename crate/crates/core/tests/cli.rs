use std::path::Path;
use std::process::Command;

const TINY: &str = "\
# small enough to train in a couple of seconds
encoder.image_size = 16
encoder.patch_size = 8
encoder.dim = 8
encoder.heads = 2
encoder.depth = 2
encoder.mlp_ratio = 2
gsd.enabled = true
gsd.num_tail_layers = 1
gsd.k = 2
train.epochs = 2
train.batch = 16
train.pretrain_epochs = 1
data.n_identities = 4
data.samples_per_identity = 20
";

fn gsd(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gsd"))
        .args(args)
        .current_dir(dir)
        .env_remove("GSD_SEED")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), format!("{TINY}{extra}")).unwrap();
    dir
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn generate_and_train(dir: &Path, out: &str) {
    let data = format!("{out}/data");
    std::fs::create_dir(dir.join(out)).unwrap();
    assert_eq!(gsd(&["generate", "--config", "run.cfg", "--out", &data], dir).0, 0);
    let run = format!("{out}/run");
    let (code, err) = gsd(&["train", "--config", "run.cfg", "--data", &data, "--out", &run], dir);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn generate_and_train_are_byte_deterministic() {
    let dir = setup("");
    let p = dir.path();
    generate_and_train(p, "one");
    generate_and_train(p, "two");
    for f in ["data/train_a.bin", "data/test_a.bin", "data/test_b.bin", "data/test_b.csv"] {
        assert_eq!(read(p.join("one").join(f)), read(p.join("two").join(f)), "{f}");
    }
    for f in ["run/frozen.ckpt", "run/detector.ckpt", "run/trace.csv"] {
        assert_eq!(read(p.join("one").join(f)), read(p.join("two").join(f)), "{f}");
    }

    // trace has one row per epoch and split
    let trace = String::from_utf8(read(p.join("one/run/trace.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 3);

    // eval reports both basis modes
    let (code, err) = gsd(&["eval", "--config", "run.cfg", "--data", "one/data", "--out", "one/run"], p);
    assert_eq!(code, 0, "{err}");
    let report = String::from_utf8(read(p.join("one/run/report.csv"))).unwrap();
    for needle in ["per_batch,test_b", "frozen_train_basis,test_b", "per_batch,test_a"] {
        assert!(report.contains(needle), "missing {needle} in\n{report}");
    }

    // analyze writes every diagnostic
    let (code, err) = gsd(&["analyze", "--config", "run.cfg", "--data", "one/data", "--out", "one/run"], p);
    assert_eq!(code, 0, "{err}");
    for f in ["cosine_hist.csv", "residual_orthogonality.csv", "silhouette.csv", "attention/image_0.csv"] {
        assert!(p.join("one/run").join(f).is_file(), "{f}");
    }
    let resid = String::from_utf8(read(p.join("one/run/residual_orthogonality.csv"))).unwrap();
    for line in resid.lines().skip(1) {
        let rel: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(rel <= 1e-8, "{line}");
    }
}

#[test]
fn seed_env_overrides_train_seed() {
    let dir = setup("");
    let p = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_gsd"))
        .args(["generate", "--config", "run.cfg", "--out", "env"])
        .current_dir(p)
        .env("GSD_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let resolved = String::from_utf8(read(p.join("env/config.resolved"))).unwrap();
    assert!(resolved.lines().any(|l| l == "train.seed = 7"), "{resolved}");
    assert_eq!(gsd(&["generate", "--config", "run.cfg", "--out", "plain"], p).0, 0);
    assert_ne!(read(p.join("env/test_b.bin")), read(p.join("plain/test_b.bin")));
}

#[test]
fn missing_output_parent_is_exit_2() {
    let dir = setup("");
    let (code, err) = gsd(&["generate", "--config", "run.cfg", "--out", "no/such/dir"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("no/such"), "{err}");
}

#[test]
fn bad_config_and_usage_errors() {
    let dir = setup("train.bogus = 1\n");
    assert_eq!(gsd(&["generate", "--config", "run.cfg", "--out", "x"], dir.path()).0, 2);
    assert_eq!(gsd(&["generate", "--config", "absent.cfg", "--out", "x"], dir.path()).0, 2);
    assert_eq!(gsd(&["frobnicate"], dir.path()).0, 1);
    assert_eq!(gsd(&["--help"], dir.path()).0, 0);
    let dir = setup("");
    let (code, _) = gsd(&["sweep", "--config", "run.cfg", "--out", "s", "--axis", "width", "--values", "1"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn diverging_training_is_exit_3_with_epoch() {
    let dir = setup("train.pretrain_epochs = 0\ntrain.lr = 1e300\n");
    let p = dir.path();
    assert_eq!(gsd(&["generate", "--config", "run.cfg", "--out", "data"], p).0, 0);
    let (code, err) = gsd(&["train", "--config", "run.cfg", "--data", "data", "--out", "run"], p);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_seed_and_value() {
    let dir = setup("train.seeds = 1,2\n");
    let p = dir.path();
    let (code, err) = gsd(
        &["sweep", "--config", "run.cfg", "--out", "s", "--axis", "depth", "--values", "0,1"],
        p,
    );
    assert_eq!(code, 0, "{err}");
    let csv = String::from_utf8(read(p.join("s/sweep.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "{csv}");
}
