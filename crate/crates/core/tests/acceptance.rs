//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL` line; the test
//! fails if any gating criterion fails.
//!
//! Run with `cargo test --release -p cascade-core --test acceptance -- --nocapture`.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cascade::arch::{compression_report, ArchSpec, Totals};
use cascade::model::Network;
use cascade::train::{
    fresh_model, load_data, train_plain, DataConfig, DatasetKind, OptimSection, PruneSection, StageSection,
    TrainConfig, Trainer,
};
use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Written straight to the process stdout so the lines survive output capture.
fn report(id: u32, name: &str, elapsed: Duration, o: &Outcome) {
    let line = format!(
        "criterion {id} {:<28} {} ({:.1}s) {}\n",
        name,
        if o.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

/// A displayed table value: `value` in `unit`, shown with `decimals` digits.
#[derive(Clone, Copy)]
struct Shown {
    value: f64,
    decimals: i32,
}

const fn m(value: f64, decimals: i32) -> Shown {
    Shown { value, decimals }
}

impl Shown {
    /// Within half of the last displayed digit.
    fn matches(self, exact: u64, unit: f64) -> bool {
        (exact as f64 / unit - self.value).abs() <= 0.5 * 10f64.powi(-self.decimals) + 1e-12
    }

    fn round(self, exact: u64, unit: f64) -> f64 {
        let p = 10f64.powi(self.decimals);
        (exact as f64 / unit * p).round() / p
    }
}

const MEGA: f64 = 1e6;

/// ResNet50 rows (FLOPs, params), in millions: stem, blocks 0-15, dense.
fn resnet_rows() -> Vec<(Shown, Shown)> {
    let mut rows = vec![(m(118.0, 0), m(0.01, 2))];
    rows.push((m(231.0, 0), m(0.07, 2)));
    rows.extend([(m(218.0, 0), m(0.07, 2)); 2]);
    rows.push((m(295.0, 0), m(0.38, 2)));
    rows.extend([(m(218.0, 0), m(0.28, 2)); 3]);
    rows.push((m(295.0, 0), m(1.51, 2)));
    rows.extend([(m(218.0, 0), m(1.11, 2)); 5]);
    rows.push((m(295.0, 0), m(6.03, 2)));
    rows.extend([(m(218.0, 0), m(4.46, 2)); 2]);
    rows.push((m(2.05, 2), m(2.05, 2)));
    rows
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let arch = ArchSpec::builtin("resnet50").unwrap();
    let stats = arch.stats(None).unwrap();
    let elapsed = start.elapsed();
    let measured: Vec<_> = stats.layers.iter().filter(|l| l.params > 0).collect();
    let table = resnet_rows();
    let mut bad = Vec::new();
    if measured.len() != table.len() {
        bad.push(format!("{} weighted rows, table has {}", measured.len(), table.len()));
    }
    let mut rounded_flops = 0.0;
    for (i, (row, (f, p))) in measured.iter().zip(&table).enumerate() {
        if !f.matches(row.flops, MEGA) || !p.matches(row.params, MEGA) {
            bad.push(format!("row {i}: {} FLOPs {} params", row.flops, row.params));
        }
        rounded_flops += f.round(row.flops, MEGA);
    }
    // The table total is the sum of its displayed rows.
    let flops_total = m(3.85, 2).matches((rounded_flops * MEGA) as u64, 1e9);
    let params_total = m(25.5, 1).matches(stats.totals.params, MEGA);
    if !flops_total {
        bad.push(format!("rounded FLOPs total {rounded_flops}M"));
    }
    if !params_total {
        bad.push(format!("params total {}", stats.totals.params));
    }
    if elapsed >= Duration::from_secs(1) {
        bad.push(format!("took {elapsed:?}"));
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "rows={} row-sum={rounded_flops:.2}M exact={} FLOPs / {} params {}",
            measured.len(),
            stats.totals.flops,
            stats.totals.params,
            bad.join("; ")
        ),
    }
}

fn criterion_2() -> Outcome {
    let stats = ArchSpec::builtin("vgg16-cifar10").unwrap().stats(None).unwrap();
    let t = stats.totals;
    let totals_ok = m(14.98, 2).matches(t.params, MEGA) && m(313.0, 0).matches(t.flops, MEGA);
    let original = Totals {
        params: 14_980_000,
        flops: 313_000_000,
    };
    let ours = Totals {
        params: 7_760_000,
        flops: 134_000_000,
    };
    let r = compression_report(original, ours).unwrap();
    let shown = (format!("{:.1}", r.param_ratio), format!("{:.1}", r.flops_ratio));
    let ratios_ok = shown.0 == "1.9" && shown.1 == "2.3";
    Outcome {
        pass: totals_ok && ratios_ok,
        detail: format!(
            "{} params / {} FLOPs; ratios {}x params {}x FLOPs",
            t.params, t.flops, shown.0, shown.1
        ),
    }
}

fn criterion_3() -> Outcome {
    use cascade::kernels;
    use rand::Rng;

    let mut worst = Vec::new();
    let mut pass = true;
    for (i, op) in OPS.iter().enumerate() {
        let e = op_check(op, 50, 1000 + i as u64);
        pass &= e < 1e-4;
        worst.push(format!("{op}={e:.1e}"));
    }
    let mut r = rng(7);
    let mut conv_exact = 0;
    for _ in 0..100 {
        let (n, ci, co) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=5));
        let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
        let k = r.random_range(1..=h.min(w).min(5));
        let stride = r.random_range(1..=3);
        let padding = random_padding(&mut r);
        let x = randn(&[n, ci, h, w], &mut r);
        let wt = randn(&[k, k, ci, co], &mut r);
        let fast = kernels::conv2d_forward(&x, &wt, stride, padding).unwrap().0;
        let slow = conv_loop(&x, &wt, stride, padding);
        if fast.shape() == slow.shape() && fast.data().iter().zip(slow.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            conv_exact += 1;
        }
    }
    pass &= conv_exact == 100;
    Outcome {
        pass,
        detail: format!("conv exact {conv_exact}/100; worst rel err {}", worst.join(" ")),
    }
}

fn criterion_4() -> Outcome {
    let failures: Vec<String> = (0..1000u64)
        .filter_map(|seed| mask_trial(10_000 + seed).err().map(|e| format!("trial {seed}: {e}")))
        .collect();
    Outcome {
        pass: failures.is_empty(),
        detail: format!("{} of 1000 trials failed {}", failures.len(), failures.first().cloned().unwrap_or_default()),
    }
}

fn criterion_5() -> Outcome {
    let case = routing_case(42);
    let routed_ok = (0..2).all(|i| bitwise_eq(&case.routed[i], &surrogate_on(&case.contexts[i + 1])));
    let control_differs = !bitwise_eq(&case.routed[0], &surrogate_on(&case.contexts[2]));
    Outcome {
        pass: routed_ok && control_differs,
        detail: format!("routed bitwise={routed_ok} cross-wired differs={control_differs}"),
    }
}

const HALF_WIDTH_TOY: &str = "name toy4-half
input c=3 h=8 w=8
conv k=3 in=3 out=16 stride=1 pad=same maskable=false
bn
relu
conv k=3 in=16 out=8 stride=1 pad=same maskable=true
bn
relu
pool kind=max k=2 stride=2 pad=valid
conv k=3 in=8 out=16 stride=1 pad=same maskable=true
bn
relu
conv k=3 in=16 out=16 stride=1 pad=same maskable=true
bn
relu
gap
classifier
dense in=16 out=10
";

fn desk_config(seed: u64, out: &Path) -> TrainConfig {
    TrainConfig {
        arch: "toy4".into(),
        seed,
        out_dir: out.to_path_buf(),
        data: DataConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            ..DataConfig::default()
        },
        prune: PruneSection {
            keep_ratio: Some(0.5),
            ta_divisors: vec![1.5],
            ..PruneSection::default()
        },
        optim: OptimSection {
            lr: 0.05,
            cycle_len_epochs: 8,
            ..OptimSection::default()
        },
        stages: StageSection {
            pretrain_epochs: 10,
            joint_epochs: 8,
            finetune_epochs: 8,
            ..StageSection::default()
        },
        ..TrainConfig::default()
    }
}

/// Student mask changes per joint epoch, read back from `eval.csv`.
fn joint_mask_changes(dir: &Path) -> Vec<usize> {
    let text = fs::read_to_string(dir.join("eval.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == "joint" && f[2] == "0")
        .filter_map(|f| f[6].parse().ok())
        .collect()
}

fn criterion_6() -> Outcome {
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in 1..=3u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(seed, dir.path());
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let summary = trainer.run().unwrap();
        let student = summary.slots[0].test_accuracy;
        let changes = joint_mask_changes(dir.path());

        let half = Network::new(&ArchSpec::parse(HALF_WIDTH_TOY).unwrap()).unwrap();
        let (train, test) = load_data(&cfg.data, seed, half.arch.input).unwrap();
        let mut model = fresh_model(&half, seed);
        let epochs = cfg.stages.joint_epochs + cfg.stages.finetune_epochs;
        let accs = train_plain(&half, &mut model, &train, &test, &cfg.data, &cfg.optim, epochs, seed).unwrap();
        let baseline = *accs.last().unwrap();

        let converged = changes.last() == Some(&0);
        let ok = student >= baseline - 0.02 && converged;
        passes += ok as usize;
        details.push(format!(
            "seed {seed}: student {student:.4} baseline {baseline:.4} mask changes {changes:?} {}",
            if ok { "ok" } else { "miss" }
        ));
    }
    Outcome {
        pass: passes >= 2,
        detail: format!("{passes}/3 seeds; {}", details.join(" | ")),
    }
}

fn cascade(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cascade")).args(args).output().unwrap()
}

fn train_args<'a>(out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--arch",
        "toy4",
        "--dataset",
        "synthetic",
        "--samples",
        "1000",
        "--keep-ratio",
        "0.5",
        "--ta-divisors",
        "1.5",
        "--pretrain-epochs",
        "1",
        "--joint-epochs",
        "2",
        "--finetune-epochs",
        "2",
        "--lr",
        "0.05",
        "--batch-size",
        "64",
        "--seed",
        "9",
        "--out",
        out,
    ]
}

fn copy_csvs(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for f in ["metrics.csv", "eval.csv"] {
        fs::copy(from.join(f), to.join(f)).unwrap();
    }
}

fn criterion_7() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
    let ok_a = cascade(&train_args(a_s)).status.success();
    let ok_b = cascade(&train_args(b_s)).status.success();
    let read = |p: &Path, f: &str| fs::read(p.join(f)).unwrap_or_default();
    let identical = ok_a
        && ok_b
        && read(&a, "metrics.csv") == read(&b, "metrics.csv")
        && read(&a, "eval.csv") == read(&b, "eval.csv");

    // Resume from the end of joint training (two fine-tune epochs left) and from the
    // middle of joint training.
    let mut resumed = Vec::new();
    for epoch in [3, 2] {
        let dir = root.path().join(format!("resume{epoch}"));
        copy_csvs(&a, &dir);
        let ckpt = a.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt"));
        let out = cascade(&["train", "--resume", ckpt.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        resumed.push(
            out.status.success()
                && read(&dir, "metrics.csv") == read(&a, "metrics.csv")
                && read(&dir, "eval.csv") == read(&a, "eval.csv"),
        );
    }
    let rows = String::from_utf8(read(&a, "metrics.csv")).unwrap().lines().count() - 1;
    Outcome {
        pass: identical && resumed.iter().all(|&r| r),
        detail: format!("two runs identical={identical}; resumed bitwise {resumed:?}; {rows} metric rows"),
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Outcome, Duration); 7] = [
        (1, "resnet50 table", criterion_1, Duration::from_secs(1)),
        (2, "vgg16 totals and ratios", criterion_2, Duration::from_secs(5)),
        (3, "gradient oracles", criterion_3, Duration::from_secs(120)),
        (4, "mask properties", criterion_4, Duration::from_secs(30)),
        (5, "cascaded routing", criterion_5, Duration::from_secs(10)),
        (6, "desk-scale efficacy", criterion_6, Duration::from_secs(600)),
        (7, "determinism and resume", criterion_7, Duration::from_secs(300)),
    ];
    let mut failed = Vec::new();
    for (id, name, run, budget) in criteria {
        let start = Instant::now();
        let mut o = run();
        let elapsed = start.elapsed();
        if elapsed > budget {
            o.pass = false;
            o.detail = format!("over the {}s budget; {}", budget.as_secs(), o.detail);
        }
        report(id, name, elapsed, &o);
        if !o.pass {
            failed.push(id);
        }
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion 8 {:<28} SKIP (non-gating; needs the real dataset and days of CPU time)",
        "full-scale cifar10 run"
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
