use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = r#"
[model]
kind = "mlp"
hidden = [8]

[data.train]
source = "mixture"
centers = [[-0.5, 0.0], [0.5, 0.0]]
std = 0.15
n_per_class = 32
seed = 1
scale = 1.0

[data.ood]
source = "mixture"
centers = [[0.0, 0.8]]
std = 0.15
n_per_class = 32
seed = 2
scale = 1.0
num_classes = 2

[train]
epochs = 3
batch_size = 16
seed = 4

[train.adam]
lr = 3e-3

[attack]
epsilons = [0.0, 0.1]
n_steps = 3

[sample]
n = 8

[sample.sgld]
n_steps = 5
"#;

fn ngebm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngebm"))
        .args(args)
        .env_remove("NGEBM_OUT_DIR")
        .env_remove("NGEBM_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, cmd: &[&str]) -> Output {
    let mut args = vec![cmd[0], "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(&cmd[1..]);
    ngebm(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_every_analysis_command() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("run");
    ok(&run(&cfg, &out, &["train"]));
    for f in ["checkpoint.ckpt", "runlog.csv", "config.toml", "manifest_train.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(out.join("runlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let again = tmp.path().join("again");
    ok(&run(&cfg, &again, &["train"]));
    assert_eq!(log, fs::read_to_string(again.join("runlog.csv")).unwrap());
    assert_eq!(
        fs::read(out.join("checkpoint.ckpt")).unwrap(),
        fs::read(again.join("checkpoint.ckpt")).unwrap()
    );

    ok(&run(&cfg, &out, &["eval"]));
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert!(ev["accuracy"].as_f64().unwrap() > 0.5);

    ok(&run(&cfg, &out, &["calibrate"]));
    assert!(fs::read_to_string(out.join("ece.csv")).unwrap().lines().count() > 1);

    ok(&run(&cfg, &out, &["ood"]));
    let auroc = fs::read_to_string(out.join("auroc.csv")).unwrap();
    assert_eq!(auroc.lines().next().unwrap(), "score,auroc,n_in,n_out");
    assert_eq!(auroc.lines().count(), 4);
    assert!(out.join("hist_approximate_mass_in.csv").is_file());
    assert!(out.join("roc_max_softmax.csv").is_file());

    ok(&run(&cfg, &out, &["attack", "--norm", "linf"]));
    let attack = fs::read_to_string(out.join("attack_linf.csv")).unwrap();
    assert_eq!(attack.lines().next().unwrap(), "norm,epsilon,clean_accuracy,adversarial_accuracy,n_examples");
    assert_eq!(attack.lines().count(), 3);

    ok(&run(&cfg, &out, &["hist-egm"]));
    assert!(out.join("egm_hist.csv").is_file());

    ok(&run(&cfg, &out, &["sample", "--n", "4"]));
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sample_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["requested"], 4);
    for cmd in ["eval", "calibrate", "ood", "attack", "hist-egm", "sample"] {
        assert!(out.join(format!("manifest_{cmd}.json")).is_file(), "{cmd}");
    }
}

#[test]
fn ood_on_the_training_set_itself_is_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TOY.replace("centers = [[0.0, 0.8]]\nstd = 0.15\nn_per_class = 32\nseed = 2", "centers = [[-0.5, 0.0], [0.5, 0.0]]\nstd = 0.15\nn_per_class = 32\nseed = 1");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("run");
    ok(&run(&cfg, &out, &["train"]));
    ok(&run(&cfg, &out, &["ood"]));
    for line in fs::read_to_string(out.join("auroc.csv")).unwrap().lines().skip(1) {
        let auroc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(auroc, 0.5, "{line}");
    }
}

#[test]
fn repeats_write_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("repeats = 2\n{TOY}"));
    let out = tmp.path().join("run");
    ok(&run(&cfg, &out, &["train", "--seed", "10"]));
    assert!(out.join("seed_10/checkpoint.ckpt").is_file());
    assert!(out.join("seed_11/checkpoint.ckpt").is_file());
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for bad in [
        format!("[train.loss]\nmode = \"gan\"\n{TOY}"),
        format!("bogus = 1\n{TOY}"),
        TOY.replace("epochs = 3", "epochs = 3\ncheckpoint_dir = \"/abs\"\ncheckpoint_interval = 1"),
    ] {
        let cfg = write_config(tmp.path(), &bad);
        assert_eq!(run(&cfg, &out, &["train"]).status.code(), Some(1), "{bad}");
    }
    assert_eq!(ngebm(&["train"]).status.code(), Some(1));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(ngebm(&["eval", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(ngebm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ngebm(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("empty");
    assert_eq!(run(&cfg, &out, &["eval"]).status.code(), Some(2));
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&cfg, &out, &["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
