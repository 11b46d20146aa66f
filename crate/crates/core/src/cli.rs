//! The `cascade` command-line tool.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{compression_report, human, ArchSpec, ArchStats};
use crate::data::CropMode;
use crate::error::{Error, Result};
use crate::mask::FilterMask;
use crate::train::{self, load_for_eval, DatasetKind, RunSummary, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cascade", version, about = "Cascaded filter pruning with weight-shared teaching assistants")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Joint training of the model hierarchy followed by student fine-tuning.
    Train(TrainArgs),
    /// Continue a run from a checkpoint directly in the fine-tuning stage.
    Finetune(FinetuneArgs),
    /// Per-layer parameter and FLOP counts of an architecture.
    Analyze(AnalyzeArgs),
    /// Top-1 test accuracy of one model in a checkpoint.
    Eval(EvalArgs),
    /// Consolidated metrics and per-layer pruning histogram of a run.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetArg {
    Synthetic,
    Cifar10,
    Mnist,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Synthetic => DatasetKind::Synthetic,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
            DatasetArg::Mnist => DatasetKind::Mnist,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CropArg {
    None,
    Random,
    Center,
}

impl From<CropArg> for CropMode {
    fn from(c: CropArg) -> Self {
        match c {
            CropArg::None => CropMode::None,
            CropArg::Random => CropMode::Random,
            CropArg::Center => CropMode::Center,
        }
    }
}

/// Dataset selection shared by `train` and `eval`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset kind [default: cifar10]
    #[arg(long)]
    pub dataset: Option<DatasetArg>,
    /// Dataset directory, relative paths resolve against $CASCADE_DATA_ROOT [default: cifar-10-batches-bin]
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// Synthetic sample count [default: 5000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Synthetic class count [default: 10]
    #[arg(long)]
    pub classes: Option<usize>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut train::DataConfig) {
        if let Some(d) = self.dataset {
            cfg.kind = d.into();
        }
        if let Some(p) = &self.data_path {
            cfg.path = Some(p.clone());
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(c) = self.classes {
            cfg.classes = c;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file; flags given here override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin architecture name or arch file [default: vgg16-cifar10]
    #[arg(long)]
    pub arch: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Crop of the zero-padded training images [default: random]
    #[arg(long)]
    pub crop: Option<CropArg>,
    /// Fraction of filters the student removes
    #[arg(long, conflicts_with = "keep_ratio")]
    pub prune_ratio: Option<f64>,
    /// Fraction of filters the student keeps
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    /// Divisors deriving the assistants' keep ratios [default: 1.5,2.5]
    #[arg(long, value_delimiter = ',')]
    pub ta_divisors: Option<Vec<f64>>,
    /// Explicit keep ratio of every slot, student first, ending at 1
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Smallest filter count any layer keeps [default: 1]
    #[arg(long)]
    pub min_filters: Option<usize>,
    /// Checkpoint of the pre-trained model
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Epochs training the pre-trained model from scratch when no checkpoint is given [default: 0]
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Joint training epochs [default: 80]
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    /// Epochs training all slots with frozen masks [default: 0]
    #[arg(long)]
    pub intermediate_epochs: Option<usize>,
    /// Student fine-tuning epochs [default: 80]
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Consecutive wins over its teacher before the student is promoted [default: 1]
    #[arg(long)]
    pub promotion_patience: Option<usize>,
    /// Base learning rate [default: 0.008]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs per cosine cycle [default: 5]
    #[arg(long)]
    pub cycle_len: Option<usize>,
    /// Peak decay between cycles [default: 0.9]
    #[arg(long)]
    pub cycle_decay: Option<f64>,
    /// Nesterov momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay [default: 0.0004]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Distillation temperature [default: 15]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the distillation term [default: 0.4]
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    /// Weight of the hint term [default: 0.001]
    #[arg(long)]
    pub lambda_hint: Option<f64>,
    /// Importance score step size [default: 0.5]
    #[arg(long)]
    pub score_lr: Option<f64>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: runs/default]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a training checkpoint; all other settings come from it
    #[arg(long, conflicts_with_all = ["config", "arch", "keep_ratio", "prune_ratio", "pretrained"])]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(a) = &self.arch {
            cfg.arch = a.clone();
        }
        self.data.apply(&mut cfg.data);
        if let Some(c) = self.crop {
            cfg.data.crop = c.into();
        }
        if let Some(p) = self.prune_ratio {
            cfg.prune.prune_ratio = Some(p);
            cfg.prune.keep_ratio = None;
        }
        if let Some(k) = self.keep_ratio {
            cfg.prune.keep_ratio = Some(k);
            cfg.prune.prune_ratio = None;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set! {
            ta_divisors => prune.ta_divisors;
            min_filters => prune.min_filters_per_layer;
            pretrain_epochs => stages.pretrain_epochs;
            joint_epochs => stages.joint_epochs;
            intermediate_epochs => stages.intermediate_epochs;
            finetune_epochs => stages.finetune_epochs;
            promotion_patience => stages.promotion_patience;
            lr => optim.lr;
            cycle_len => optim.cycle_len_epochs;
            cycle_decay => optim.cycle_decay;
            momentum => optim.momentum;
            weight_decay => optim.weight_decay;
            batch_size => data.batch_size;
            tau => distill.tau;
            lambda_kd => distill.lambda_kd;
            lambda_hint => distill.lambda_hint;
            score_lr => scores.lr;
            seed => seed;
            out => out_dir;
        }
        if self.ratios.is_some() {
            cfg.prune.ratios = self.ratios.clone();
        }
        if self.pretrained.is_some() {
            cfg.pretrained = self.pretrained.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Training checkpoint taken after the hierarchy was built
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fine-tuning epochs, replacing the checkpoint's setting
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory [default: the checkpoint's run directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Builtin architecture name or arch file
    pub arch: String,
    /// Apply the masks stored in this checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Slot whose mask is applied
    #[arg(long, default_value_t = 0)]
    pub slot: usize,
    /// Also write the table as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training or model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Slot to evaluate, 0 being the student
    #[arg(long, default_value_t = 0)]
    pub slot: usize,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed of the synthetic data and split [default: the checkpoint's]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory holding metrics.csv, eval.csv and checkpoints/
    pub run: PathBuf,
    /// Checkpoint providing the masks [default: the latest in the run]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory [default: the run directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(path, a.out.clone())?,
        None => Trainer::new(a.resolve()?)?,
    };
    let summary = trainer.run()?;
    print_summary(&summary);
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let out = a.out.clone().or_else(|| {
        a.checkpoint
            .parent()
            .filter(|d| d.file_name().is_some_and(|n| n == "checkpoints"))
            .and_then(Path::parent)
            .map(Path::to_path_buf)
    });
    let mut trainer = Trainer::resume(&a.checkpoint, out)?;
    if let Some(n) = a.epochs {
        trainer.config.stages.finetune_epochs = n;
    }
    trainer.enter_finetune()?;
    let summary = trainer.run()?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!(
        "pre-trained: {:.4} top-1, {} params, {} FLOPs",
        s.pretrained_accuracy,
        human(s.baseline.params),
        human(s.baseline.flops)
    );
    println!("slot  keep    top-1   kept/filters  params   FLOPs    params x  FLOPs x");
    for r in &s.slots {
        println!(
            "{:<5} {:<7.4} {:<7.4} {:>6}/{:<6} {:<8} {:<8} {:<9.2} {:.2}",
            r.slot,
            r.keep_ratio,
            r.test_accuracy,
            r.kept_filters,
            r.total_filters,
            human(r.params),
            human(r.flops),
            r.report.param_ratio,
            r.report.flops_ratio
        );
    }
}

/// The analyzer table as text.
pub fn format_stats(stats: &ArchStats) -> String {
    let mut out = format!("{:<6} {:<10} {:<14} {:>14} {:>9} {:>16} {:>9}\n", "layer", "kind", "output", "params", "", "flops", "");
    for l in &stats.layers {
        let (c, h, w) = l.out_shape;
        out.push_str(&format!(
            "{:<6} {:<10} {:<14} {:>14} {:>9} {:>16} {:>9}\n",
            l.id,
            l.kind,
            format!("{c}x{h}x{w}"),
            l.params,
            human(l.params),
            l.flops,
            human(l.flops)
        ));
    }
    out.push_str(&format!(
        "total: {} params ({}), {} FLOPs ({})\n",
        stats.totals.params,
        human(stats.totals.params),
        stats.totals.flops,
        human(stats.totals.flops)
    ));
    out
}

fn stats_csv(stats: &ArchStats, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "kind", "c", "h", "w", "params", "flops"]).map_err(csv_err)?;
    for l in &stats.layers {
        let (c, h, wd) = l.out_shape;
        w.serialize((l.id, l.kind, c, h, wd, l.params, l.flops)).map_err(csv_err)?;
    }
    w.serialize(("total", "", "", "", "", stats.totals.params, stats.totals.flops)).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path).map_err(csv_err)?)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Unsupported(format!("csv: {other:?}")),
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let arch = ArchSpec::load(&a.arch)?;
    let baseline = arch.stats(None)?;
    let stats = match &a.checkpoint {
        Some(path) => {
            let (_, masks) = train::checkpoint_masks(path)?;
            let (keep, mask) = masks
                .get(a.slot)
                .ok_or_else(|| Error::config("slot", format!("checkpoint has {} slots", masks.len())))?;
            if mask.layers.iter().map(Vec::len).collect::<Vec<_>>() != arch.maskable_filters() {
                return Err(Error::config("checkpoint", "masks do not fit this architecture"));
            }
            println!("slot {} (keep ratio {keep}), {}/{} filters kept", a.slot, mask.kept(), mask.total());
            arch.stats(Some(mask))?
        }
        None => baseline.clone(),
    };
    print!("{}", format_stats(&stats));
    if a.checkpoint.is_some() {
        let r = compression_report(baseline.totals, stats.totals)?;
        println!(
            "vs unmasked: {:.2}x params ({:.1}%), {:.2}x FLOPs ({:.1}%)",
            r.param_ratio, r.param_pct, r.flops_ratio, r.flops_pct
        );
    }
    if let Some(path) = &a.csv {
        stats_csv(&stats, path)?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let loaded = load_for_eval(&a.checkpoint, a.slot)?;
    let (mut data, mut seed) = match &loaded.config {
        Some(c) => (c.data.clone(), c.seed),
        None => (train::DataConfig::default(), 0),
    };
    a.data.apply(&mut data);
    if let Some(s) = a.seed {
        seed = s;
    }
    let (train_ds, test_ds) = train::load_data(&data, seed, loaded.net.arch.input)?;
    let (_, eval_aug) = train::augment_configs(&data, &train_ds);
    let acc = train::evaluate(&loaded.net, &loaded.params, &loaded.mask, &test_ds, data.eval_batch_size, &eval_aug)?;
    println!(
        "slot {} keep {}: top-1 {:.4} on {} test samples",
        a.slot,
        loaded.keep_ratio,
        acc,
        test_ds.len()
    );
    Ok(())
}

/// Latest `epoch-NNNN.ckpt` in a run directory.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join("checkpoints");
    let mut best = None;
    for e in fs::read_dir(&dir).map_err(|e| Error::data(&dir, e.to_string()))? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("epoch-") && name.ends_with(".ckpt") && best.as_ref().is_none_or(|b: &PathBuf| p > *b) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::data(dir, "no checkpoints"))
}

#[derive(Default)]
struct Group {
    batches: usize,
    sums: [f64; 5],
    last: [String; 3],
    test_accuracy: String,
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(path, e.to_string()))?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::data(path, format!("missing column `{name}`")))
}

/// Writes `summary.csv` (per epoch and slot) and `layers.csv` (per slot and maskable
/// layer); returns their paths.
pub fn export(run: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let metrics_path = run.join("metrics.csv");
    let (header, rows) = read_csv(&metrics_path)?;
    let col = |n: &str| column(&header, n, &metrics_path);
    let (epoch, stage, slot) = (col("epoch")?, col("stage")?, col("slot")?);
    let means = [col("loss")?, col("task_loss")?, col("kd_loss")?, col("hint_loss")?, col("accuracy")?];
    let lasts = [col("kept_filters_total")?, col("flops")?, col("params")?];
    let mut groups: BTreeMap<(u64, String, String), Group> = BTreeMap::new();
    for r in &rows {
        let e: u64 = r[epoch]
            .parse()
            .map_err(|_| Error::data(&metrics_path, format!("bad epoch `{}`", &r[epoch])))?;
        let g = groups.entry((e, r[stage].to_string(), r[slot].to_string())).or_default();
        g.batches += 1;
        for (s, &c) in g.sums.iter_mut().zip(&means) {
            *s += r[c]
                .parse::<f64>()
                .map_err(|_| Error::data(&metrics_path, format!("bad number `{}`", &r[c])))?;
        }
        for (l, &c) in g.last.iter_mut().zip(&lasts) {
            *l = r[c].to_string();
        }
    }
    let eval_path = run.join("eval.csv");
    if eval_path.exists() {
        let (h, rows) = read_csv(&eval_path)?;
        let (ep, st, sl, acc) = (
            column(&h, "epoch", &eval_path)?,
            column(&h, "stage", &eval_path)?,
            column(&h, "slot", &eval_path)?,
            column(&h, "test_accuracy", &eval_path)?,
        );
        for r in &rows {
            let Ok(e) = r[ep].parse::<u64>() else { continue };
            if let Some(g) = groups.get_mut(&(e, r[st].to_string(), r[sl].to_string())) {
                g.test_accuracy = r[acc].to_string();
            }
        }
    }

    fs::create_dir_all(out)?;
    let summary_path = out.join("summary.csv");
    let mut w = csv_writer(&summary_path)?;
    w.write_record([
        "epoch", "stage", "slot", "batches", "loss", "task_loss", "kd_loss", "hint_loss", "train_accuracy",
        "test_accuracy", "kept_filters_total", "flops", "params",
    ])
    .map_err(csv_err)?;
    for ((e, st, sl), g) in &groups {
        let n = g.batches as f64;
        let mut rec = vec![e.to_string(), st.clone(), sl.clone(), g.batches.to_string()];
        rec.extend(g.sums.iter().map(|s| (s / n).to_string()));
        rec.push(g.test_accuracy.clone());
        rec.extend(g.last.iter().cloned());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(run)?,
    };
    let (_, masks) = train::checkpoint_masks(&ckpt)?;
    let layers_path = out.join("layers.csv");
    write_histogram(&masks, &layers_path)?;
    Ok((summary_path, layers_path))
}

/// One row per slot and maskable layer with kept and pruned filter counts.
pub fn write_histogram(masks: &[(f64, FilterMask)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["slot", "keep_ratio", "layer", "filters", "kept", "pruned", "pruned_pct"])
        .map_err(csv_err)?;
    for (s, (keep, mask)) in masks.iter().enumerate() {
        for (l, layer) in mask.layers.iter().enumerate() {
            let kept = mask.kept_in(l);
            let pruned = layer.len() - kept;
            w.serialize((s, keep, l, layer.len(), kept, pruned, 100.0 * pruned as f64 / layer.len() as f64))
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let (summary, layers) = export(&a.run, a.checkpoint.as_deref(), &out)?;
    println!("wrote {} and {}", summary.display(), layers.display());
    Ok(())
}
