//! Command-line front end: `gen`, `split`, `train`, `eval`, `compare`, `plot`.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for runtime
//! failures. `TDET_THREADS` caps the rayon worker pool.

mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{self, DatasetConfig, Video};
use crate::detector::checkpoint::{self, Checkpoint};
use crate::detector::{transfer_weights, BaseParams, DetectorConfig, Mode};
use crate::eval::{self, EvalReport, Variant};
use crate::trainer::{self, LossRecord, PretrainConfig, TrainConfig};

pub use svg::{line_chart, Series};

pub const THREADS_ENV: &str = "TDET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tdet", version, about = "Temporal grid detector: data, training and occlusion-aware evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic occlusion dataset.
    Gen(GenArgs),
    /// Split every video 80/20 in time into `train/` and `test/`.
    Split(SplitArgs),
    /// Pretrain (or load) a base detector, then train the temporal model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report directory.
    Eval(EvalArgs),
    /// Print an AP table for several reports and overlay their curves.
    Compare(CompareArgs),
    /// Render the curves of one report as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset config (JSON); defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    /// Rescale occluder widths until the hidden-box fraction is within 0.01
    /// of this value.
    #[arg(long)]
    pub hidden_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    /// Whole videos.
    All,
    /// First 80% of every video.
    Train,
    /// Last 20% of every video.
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Plain,
    Sequenced,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Sequenced => Mode::Sequenced,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub segment: Segment,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequences drawn per video and epoch (default: one per annotated frame).
    #[arg(long)]
    pub samples_per_video: Option<usize>,
    /// Start from this base checkpoint instead of pretraining one.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Detector geometry (JSON) for a freshly pretrained base.
    #[arg(long, conflicts_with = "base")]
    pub detector: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub pretrain_lr: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Base or temporal checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub segment: Segment,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report directories written by `eval`.
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,
    /// Where the overlaid SVGs go.
    #[arg(long, default_value = "compare")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Defaults to the report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to repeat a run. Contains no timestamps, so equal
/// inputs give byte-equal manifests.
#[derive(Debug, Serialize)]
struct Manifest<T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    config: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest<T: Serialize>(dir: &Path, command: &'static str, seed: Option<u64>, config: T) -> anyhow::Result<()> {
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
        },
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_segment(dir: &Path, segment: Segment) -> anyhow::Result<Vec<Video>> {
    let videos = data::load_dataset(dir)?;
    Ok(match segment {
        Segment::All => videos,
        Segment::Train => data::split_train_test(&videos).0,
        Segment::Test => data::split_train_test(&videos).1,
    })
}

fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    s
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 1;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    // a pool built earlier in this process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.scene.seed = seed;
    }
    if let Some(n) = a.videos {
        cfg.videos = n;
    }
    if let Some(target) = a.hidden_fraction {
        cfg = data::tune_hidden_fraction(&cfg, target, 0.01)?;
    }
    let videos = data::generate_dataset(&cfg)?;
    data::save_dataset(&a.out, Some(&cfg), &videos)?;
    write_manifest(&a.out, "gen", Some(cfg.scene.seed), &cfg)?;
    println!(
        "wrote {} videos × {} frames to {} (hidden fraction {:.3})",
        videos.len(),
        cfg.scene.frames,
        a.out.display(),
        data::hidden_fraction(&videos)
    );
    Ok(())
}

fn split(a: SplitArgs) -> anyhow::Result<()> {
    let videos = data::load_dataset(&a.data)?;
    let (train, test) = data::split_train_test(&videos);
    let config = a.data.join("dataset.json");
    for (name, part) in [("train", &train), ("test", &test)] {
        let dir = a.out.join(name);
        data::save_dataset(&dir, None, part)?;
        if config.is_file() {
            fs::copy(&config, dir.join("dataset.json")).with_context(|| format!("copying {}", config.display()))?;
        }
    }
    write_manifest(&a.out, "split", None, serde_json::json!({ "data": a.data }))?;
    println!("split {} videos into {}/{{train,test}}", videos.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainRun {
    segment: Segment,
    train: TrainConfig,
    base: BaseSource,
    transfer_seed: u64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum BaseSource {
    Checkpoint(PathBuf),
    Pretrained {
        detector: DetectorConfig,
        init_seed: u64,
        pretrain: PretrainConfig,
    },
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let videos = load_segment(&a.data, a.segment)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train_cfg = TrainConfig {
        seq_len: a.seq_len,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        samples_per_video: a.samples_per_video,
    };
    train_cfg.validate()?;

    let (base, source) = match &a.base {
        Some(p) => match checkpoint::load(p)? {
            Checkpoint::Base(b) => (b, BaseSource::Checkpoint(p.clone())),
            Checkpoint::Temporal(_) => bail!("{} is a temporal checkpoint; --base needs a base one", p.display()),
        },
        None => {
            let detector = match &a.detector {
                Some(p) => read_json(p)?,
                None => DetectorConfig::default(),
            };
            let pretrain = PretrainConfig {
                epochs: a.pretrain_epochs,
                learning_rate: a.pretrain_lr,
                seed: a.seed.wrapping_add(1),
            };
            let init_seed = a.seed.wrapping_add(2);
            let base = BaseParams::init(detector.clone(), init_seed)?;
            let (base, report) = trainer::pretrain_base(&videos, &pretrain, base)?;
            let p = a.out.join("pretrain_loss.csv");
            fs::write(&p, loss_csv(&report.losses)).with_context(|| format!("writing {}", p.display()))?;
            (
                base,
                BaseSource::Pretrained {
                    detector,
                    init_seed,
                    pretrain,
                },
            )
        }
    };
    checkpoint::save(&a.out.join("base.ckpt"), &Checkpoint::Base(base.clone()))?;

    let run = TrainRun {
        segment: a.segment,
        train: train_cfg.clone(),
        base: source,
        transfer_seed: a.seed.wrapping_add(3),
    };
    write_json(&a.out.join("config.json"), &run)?;
    let model = transfer_weights(&base, run.transfer_seed)?;

    let mut best: Option<(usize, f64)> = None;
    let (_, report) = trainer::train_with(&videos, &train_cfg, model, |epoch, params, mean| {
        let p = a.out.join(format!("epoch_{epoch:02}.ckpt"));
        checkpoint::save(&p, &Checkpoint::Temporal(params.clone()))?;
        if best.is_none_or(|(_, l)| mean < l) {
            best = Some((epoch, mean));
        }
        println!("epoch {epoch}: mean loss {mean:.5}");
        Ok(())
    })?;
    if let Some((epoch, _)) = best {
        let from = a.out.join(format!("epoch_{epoch:02}.ckpt"));
        fs::copy(&from, a.out.join("best.ckpt")).with_context(|| format!("copying {}", from.display()))?;
    }
    fs::write(a.out.join("loss.csv"), loss_csv(&report.losses)).context("writing loss.csv")?;
    write_json(
        &a.out.join("train_summary.json"),
        &serde_json::json!({
            "epoch_loss": report.epoch_loss,
            "best_epoch": best.map(|b| b.0),
            "nonfinite_steps": report.nonfinite_steps,
            "skipped_gt": report.skipped_gt,
            "max_tape_nodes": report.max_tape_nodes,
        }),
    )?;
    write_manifest(
        &a.out,
        "train",
        Some(a.seed),
        serde_json::json!({ "data": a.data, "run": run }),
    )?;
    Ok(())
}

fn evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let model = match checkpoint::load(&a.model)? {
        Checkpoint::Temporal(m) => m,
        // zero history channels make the transferred model behave exactly like the base
        Checkpoint::Base(b) => transfer_weights(&b, 0)?,
    };
    let videos = load_segment(&a.data, a.segment)?;
    let mode = Mode::from(a.mode);
    let report = eval::evaluate(&model, &videos, mode)?;
    eval::write_report(&a.report, &report)?;
    write_manifest(
        &a.report,
        "eval",
        None,
        serde_json::json!({ "model": a.model, "data": a.data, "mode": mode, "segment": a.segment }),
    )?;
    println!(
        "{mode}: AP all {:.4}, hidden {:.4}, visible {:.4} ({} gt, {} hidden)",
        report.ap_all, report.ap_hidden, report.ap_visible, report.counts.gt, report.counts.gt_hidden
    );
    Ok(())
}

fn label(dir: &Path, r: &EvalReport) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    format!("{name} ({})", r.mode)
}

pub fn ap_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("report".len());
    let mut s = format!("{:<width$}  {:>8}  {:>9}  {:>10}\n", "report", "ap_all", "ap_hidden", "ap_visible");
    for (l, r) in rows {
        s.push_str(&format!(
            "{l:<width$}  {:>8.4}  {:>9.4}  {:>10.4}\n",
            r.ap_all, r.ap_hidden, r.ap_visible
        ));
    }
    s
}

/// PR charts for each variant plus the proneness chart, one series per
/// labelled report.
fn charts(reports: &[(String, &EvalReport)]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let series: Vec<Series> = reports
            .iter()
            .map(|(l, r)| Series {
                label: l,
                points: r.curve(v).iter().map(|p| (p.recall, p.precision)).collect(),
            })
            .collect();
        out.push((
            format!("pr_{}.svg", v.name()),
            line_chart(&format!("precision-recall ({})", v.name()), "recall", "precision", &series),
        ));
    }
    let series: Vec<Series> = reports
        .iter()
        .map(|(l, r)| Series {
            label: l,
            points: r.proneness.clone(),
        })
        .collect();
    out.push((
        "proneness.svg".to_string(),
        line_chart("proneness", "recall", "TP visible / TP", &series),
    ));
    out
}

fn write_charts(dir: &Path, reports: &[(String, &EvalReport)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, body) in charts(reports) {
        let p = dir.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let reports: Vec<EvalReport> = a
        .reports
        .iter()
        .map(|d| eval::read_report(d).with_context(|| format!("reading report {}", d.display())))
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<(String, &EvalReport)> = a.reports.iter().zip(&reports).map(|(d, r)| (label(d, r), r)).collect();
    let table = ap_table(&rows);
    print!("{table}");
    write_charts(&a.out, &rows)?;
    fs::write(a.out.join("ap_table.txt"), &table).context("writing ap_table.txt")?;
    write_manifest(&a.out, "compare", None, serde_json::json!({ "reports": a.reports }))?;
    Ok(())
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    let report = eval::read_report(&a.report).with_context(|| format!("reading report {}", a.report.display()))?;
    let out = a.out.unwrap_or_else(|| a.report.clone());
    write_charts(&out, &[(label(&a.report, &report), &report)])?;
    println!("wrote charts to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("tdet").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(argv("")), 1);
        assert_eq!(run(argv("frobnicate")), 1);
        assert_eq!(run(argv("gen --out x --bogus")), 1);
        assert_eq!(run(argv("eval --model m --data d --report r --mode sideways")), 1);
        assert_eq!(run(argv("--help")), 0);
    }

    #[test]
    fn runtime_failures_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let cmd = format!("split --data {} --out {}", missing.display(), dir.path().join("o").display());
        assert_eq!(run(argv(&cmd)), 2);
    }

    #[test]
    fn table_lists_every_report() {
        let r = EvalReport::from_matching(
            &eval::match_detections(&[], &[], eval::MATCH_IOU),
            &[],
            Mode::Plain,
            eval::MATCH_IOU,
        );
        let t = ap_table(&[("a (plain)".into(), &r), ("bb (sequenced)".into(), &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("bb (sequenced)"));
        assert!(lines[1].ends_with("0.0000"));
    }
}
