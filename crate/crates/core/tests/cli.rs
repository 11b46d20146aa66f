use std::fs;
use std::process::{Command, Output};

use cascade::arch::ArchSpec;
use cascade::train::TrainConfig;

fn cascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--arch",
        "toy4",
        "--dataset",
        "synthetic",
        "--samples",
        "300",
        "--batch-size",
        "50",
        "--keep-ratio",
        "0.5",
        "--pretrain-epochs",
        "1",
        "--joint-epochs",
        "1",
        "--finetune-epochs",
        "1",
        "--out",
        out,
    ];
    v.extend_from_slice(extra);
    v
}

/// `[default: X]` for `--flag` in a help listing.
fn help_default(help: &str, flag: &str) -> Option<String> {
    let start = help.find(&format!("{flag} <"))?;
    let rest = &help[start..];
    let end = rest[2..].find("\n      --").map_or(rest.len(), |e| e + 2);
    let block = &rest[..end];
    let d = block.find("[default: ")? + "[default: ".len();
    Some(block[d..].split(']').next()?.to_string())
}

#[test]
fn help_defaults_match_the_config_defaults() {
    let help = stdout(&cascade(&["train", "--help"]));
    let d = TrainConfig::default();
    let want = [
        ("--arch", d.arch.clone()),
        ("--lr", d.optim.lr.to_string()),
        ("--cycle-len", d.optim.cycle_len_epochs.to_string()),
        ("--cycle-decay", d.optim.cycle_decay.to_string()),
        ("--momentum", d.optim.momentum.to_string()),
        ("--weight-decay", d.optim.weight_decay.to_string()),
        ("--batch-size", d.data.batch_size.to_string()),
        ("--tau", d.distill.tau.to_string()),
        ("--lambda-kd", d.distill.lambda_kd.to_string()),
        ("--lambda-hint", d.distill.lambda_hint.to_string()),
        ("--score-lr", d.scores.lr.to_string()),
        ("--joint-epochs", d.stages.joint_epochs.to_string()),
        ("--finetune-epochs", d.stages.finetune_epochs.to_string()),
        ("--pretrain-epochs", d.stages.pretrain_epochs.to_string()),
        ("--min-filters", d.prune.min_filters_per_layer.to_string()),
        ("--seed", d.seed.to_string()),
        ("--samples", d.data.samples.to_string()),
        (
            "--ta-divisors",
            d.prune.ta_divisors.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        ),
    ];
    for (flag, value) in want {
        assert_eq!(help_default(&help, flag).as_deref(), Some(value.as_str()), "{flag}");
    }
    for cmd in ["train", "finetune", "analyze", "eval", "export"] {
        assert!(stdout(&cascade(&["--help"])).contains(cmd));
    }
}

#[test]
fn train_smoke_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cascade(&small_run(out.to_str().unwrap(), &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "metrics.csv", "eval.csv", "pretrained.ckpt", "checkpoints/epoch-0003.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,epoch,stage,slot,loss,task_loss,kd_loss,hint_loss,accuracy,lr,kept_filters_total,flops,params"
    );
    let stages: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert!(stages.contains(&"pretrain") && stages.contains(&"joint") && stages.contains(&"finetune"));

    // The written config reproduces the run.
    let again = dir.path().join("again");
    let o = cascade(&[
        "train",
        "--config",
        out.join("config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );

    let ckpt = out.join("checkpoints/epoch-0003.ckpt");
    let o = cascade(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", "synthetic", "--samples", "300"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("top-1"), "{}", stdout(&o));

    let exported = dir.path().join("export");
    let o = cascade(&["export", out.to_str().unwrap(), "--out", exported.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = fs::read_to_string(exported.join("layers.csv")).unwrap();
    let maskable = ArchSpec::builtin("toy4").unwrap().maskable_filters().len();
    // Default divisors give four slots.
    assert_eq!(layers.lines().count() - 1, maskable * 4);
    assert!(exported.join("summary.csv").exists());

    let o = cascade(&["finetune", "--checkpoint", ckpt.to_str().unwrap(), "--epochs", "1", "--out", dir.path().join("ft").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn conflicting_ratio_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = cascade(&small_run(out.to_str().unwrap(), &["--prune-ratio", "0.5"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("prune"), "{}", stderr(&o));
}

#[test]
fn prune_ratio_is_the_complement_of_keep_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args_a = small_run(a.to_str().unwrap(), &[]);
    let i = args_a.iter().position(|&s| s == "--keep-ratio").unwrap();
    args_a.drain(i..i + 2);
    let mut args_b = args_a.clone();
    *args_b.last_mut().unwrap() = b.to_str().unwrap();
    args_a.extend(["--keep-ratio", "0.7"]);
    args_b.extend(["--prune-ratio", "0.3"]);
    assert!(cascade(&args_a).status.success());
    assert!(cascade(&args_b).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn analyze_builtins() {
    let o = cascade(&["analyze", "vgg16-cifar10"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("14977728"));
    assert!(stdout(&o).contains("313463808"));
    let o = cascade(&["analyze", "resnet50"]);
    assert!(stdout(&o).contains("25502912"));
    assert!(stdout(&o).contains("3857973248"));
}

#[test]
fn analyze_csv_and_custom_file() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("net.arch");
    fs::write(
        &arch,
        "name tiny\ninput c=1 h=4 w=4\nconv k=3 in=1 out=2 stride=1 pad=same maskable=true\ngap\nclassifier\ndense in=2 out=3\n",
    )
    .unwrap();
    let csv = dir.path().join("stats.csv");
    let o = cascade(&["analyze", arch.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 18 + 6 params; 18 * 16 + 6 MACs.
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() >= 4, "{text}");
    assert!(stdout(&o).contains("24 params"), "{}", stdout(&o));
    assert!(stdout(&o).contains("294 FLOPs"), "{}", stdout(&o));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.arch");
    fs::write(&bad, "name bad\ninput c=1 h=4 w=4\nconv k=three in=1 out=2\n").unwrap();
    let o = cascade(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = cascade(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("g.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = cascade(&["eval", "--checkpoint", garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = cascade(&["train", "--dataset", "cifar10", "--data-path", "/nonexistent", "--keep-ratio", "0.5", "--pretrain-epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));

    let o = cascade(&["train", "--keep-ratio", "0.5", "--ta-divisors", "2.5,1.5", "--pretrain-epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = cascade(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let cifar = dir.path().join("cifar");
    fs::create_dir_all(&cifar).unwrap();
    fs::write(cifar.join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
    let o = cascade(&[
        "train",
        "--dataset",
        "cifar10",
        "--data-path",
        cifar.to_str().unwrap(),
        "--keep-ratio",
        "0.5",
        "--pretrain-epochs",
        "1",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data_batch_1.bin"), "{}", stderr(&o));

    let chain = dir.path().join("chain.arch");
    fs::write(&chain, "name c\ninput c=1 h=4 w=4\nconv k=3 in=2 out=2 stride=1 pad=same maskable=true\n").unwrap();
    let o = cascade(&["analyze", chain.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("layer 0"), "{}", stderr(&o));
}
