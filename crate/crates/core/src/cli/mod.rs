//! Command-line surface: `gen-data`, `train` and `eval`.
//!
//! A data directory holds `train.sclip`, `dev.sclip`, `test.sclip` and a
//! `teachers.toml` descriptor. A run directory holds the echoed effective
//! `config`, the `teachers` descriptor, `checkpoints/`, `logs/` and
//! `reports/`.

mod config;

pub use config::{read_toml, write_toml, EvalConfig, PathConfig, RunConfig, DEFAULT_EVAL_CHECKPOINT};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{
    eval_image_speech, eval_keywords, eval_zeroshot_speech_text, export_diagnostics, write_attention_maps,
};
use crate::model::{read_checkpoint, ModelKind};
use crate::teachers::{generate_dataset, read_dataset, write_dataset, Dataset, Split, TeacherBundle};
use crate::training::{train, Preset, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const TEACHERS_DESCRIPTOR: &str = "teachers.toml";
pub const DATASET_DESCRIPTOR: &str = "dataset.toml";
pub const RUN_CONFIG: &str = "config";
pub const RUN_TEACHERS: &str = "teachers";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Parser)]
#[command(name = "speechclip", version, about = "Speech-image contrastive alignment on simulated frozen teachers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the simulated teachers and write the train/dev/test corpus.
    GenData(GenDataArgs),
    /// Train a speech head and write checkpoints, logs and the effective config.
    Train(TrainArgs),
    /// Evaluate a trained run.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config; its `teachers` and `dataset` sections are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for both the teachers and the corpus.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    /// Standard deviation of the image-embedding noise.
    #[arg(long)]
    pub image_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Keyword slots of the cascaded head.
    #[arg(long)]
    pub keywords: Option<usize>,
    /// Cascaded head without batch-norm matching.
    #[arg(long)]
    pub no_batchnorm: bool,
    /// Schedule bundle: `desk` or `paper`.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Continue from `checkpoints/last.ckpt` with the run's echoed config.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps, leaving a resumable run.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub task: EvalTask,
}

#[derive(Debug, Subcommand)]
pub enum EvalTask {
    /// Speech-image retrieval recall@{1,5,10} in both directions.
    Retrieval(EvalTarget),
    /// Speech-text retrieval against the frozen text encoder.
    Zeroshot(EvalTarget),
    /// Keyword hit rates and attention maps of a cascaded head.
    Keywords(EvalTarget),
    /// Layer weights, temperature and batch-norm statistics.
    Inspect(EvalTarget),
}

#[derive(Debug, Args)]
pub struct EvalTarget {
    #[arg(long)]
    pub run: PathBuf,
    /// Data directory; defaults to the one recorded in the run config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    /// `best`, `last`, or a checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(a.task),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("report", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        c.teachers.seed = s;
        c.dataset.seed = s;
    }
    if let Some(n) = a.images {
        c.dataset.images = n;
    }
    if let Some(v) = a.vocab {
        c.teachers.vocab = v;
    }
    if let Some(g) = a.captions_per_image {
        c.dataset.captions_per_image = g;
    }
    if let Some(e) = a.image_noise {
        c.teachers.image_noise = e;
    }
    c.dataset.split_sizes()?;
    let teachers = TeacherBundle::build(c.teachers.clone())?;
    let splits = generate_dataset(&teachers, &c.dataset)?;
    create_dir(&a.out)?;
    for split in Split::ALL {
        write_dataset(a.out.join(split.file_name()), splits.get(split))?;
    }
    write_toml(&a.out.join(TEACHERS_DESCRIPTOR), &c.teachers)?;
    write_toml(&a.out.join(DATASET_DESCRIPTOR), &c.dataset)?;
    println!(
        "wrote {} train / {} dev / {} test captions to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Teachers rebuilt from a descriptor; the dataset must match their dims.
fn load_teachers(path: &Path) -> Result<TeacherBundle> {
    TeacherBundle::build(read_toml(path)?)
}

fn load_split(data: &Path, split: Split, teachers: &TeacherBundle) -> Result<Dataset> {
    let d = read_dataset(data.join(split.file_name()))?;
    d.check_compatible(teachers)?;
    Ok(d)
}

fn effective_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let stored = a.run.join(RUN_CONFIG);
    let mut c = match (&a.config, a.resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::load(&stored)?,
        (None, false) => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        c.train.apply_preset(p);
    }
    if let Some(d) = &a.data {
        c.paths.data = Some(d.clone());
    }
    if let Some(m) = a.model {
        c.train.model = m;
    }
    if let Some(k) = a.keywords {
        c.train.keywords = k;
    }
    if a.no_batchnorm {
        c.train.batchnorm = false;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(n) = a.steps {
        c.train.total_steps = n;
    }
    if let Some(w) = a.warmup {
        c.train.warmup_steps = w;
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    if let Some(e) = a.eval_every {
        c.train.eval_every = e;
    }
    c.train.validate()?;
    if c.train.model == ModelKind::Parallel && (a.keywords.is_some() || a.no_batchnorm) {
        return Err(Error::Configuration(
            "--keywords and --no-batchnorm apply to the cascaded model only".into(),
        ));
    }
    Ok(c)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut c = effective_train_config(a)?;
    let data = c
        .paths
        .data
        .clone()
        .ok_or_else(|| Error::Configuration("no data directory (pass --data or set paths.data)".into()))?;
    let teachers = if a.resume {
        load_teachers(&a.run.join(RUN_TEACHERS))?
    } else {
        load_teachers(&data.join(TEACHERS_DESCRIPTOR))?
    };
    c.teachers = teachers.config().clone();
    c.dataset = read_toml(&data.join(DATASET_DESCRIPTOR))?;
    let train_set = load_split(&data, Split::Train, &teachers)?;
    let dev_set = load_split(&data, Split::Dev, &teachers)?;

    let config_path = a.run.join(RUN_CONFIG);
    let echoed = c.to_toml()?;
    if a.resume {
        let stored = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if stored != echoed {
            return Err(Error::Configuration(format!(
                "effective config differs from {}; resume needs the original settings",
                config_path.display()
            )));
        }
    } else {
        create_dir(&a.run)?;
        fs::write(&config_path, &echoed).map_err(|e| Error::io(&config_path, e))?;
        write_toml(&a.run.join(RUN_TEACHERS), teachers.config())?;
    }

    let started = Instant::now();
    let outcome = train(
        &c.train,
        &train_set,
        &dev_set,
        &teachers,
        &TrainOptions {
            run_dir: Some(a.run.clone()),
            resume: a.resume,
            stop_after: a.stop_after,
        },
    )?;
    let reports = a.run.join(REPORTS_DIR);
    create_dir(&reports)?;
    let last = outcome.history.last();
    write_json(
        &reports.join("train.json"),
        &serde_json::json!({
            "model": c.train.model,
            "steps": last.map_or(0, |r| r.step + 1),
            "total_steps": c.train.total_steps,
            "initial_loss": outcome.history.first().map(|r| r.loss),
            "final_loss": last.map(|r| r.loss),
            "best_step": outcome.best_step,
            "best_dev_recall_at_1": outcome.best_dev_recall.is_finite().then_some(outcome.best_dev_recall),
        }),
    )?;
    eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "{} model: best dev speech->image recall@1 {:.3} at step {}",
        c.train.model, outcome.best_dev_recall, outcome.best_step
    );
    Ok(())
}

fn checkpoint_path(run: &Path, which: &str) -> PathBuf {
    match which {
        "best" => run.join("checkpoints").join(BEST_CHECKPOINT),
        "last" => run.join("checkpoints").join(LAST_CHECKPOINT),
        other => PathBuf::from(other),
    }
}

pub fn eval_cmd(task: EvalTask) -> Result<()> {
    let (name, t) = match &task {
        EvalTask::Retrieval(t) => ("retrieval", t),
        EvalTask::Zeroshot(t) => ("zeroshot", t),
        EvalTask::Keywords(t) => ("keywords", t),
        EvalTask::Inspect(t) => ("inspect", t),
    };
    let c = RunConfig::load(&t.run.join(RUN_CONFIG))?;
    let split = t.split.unwrap_or(c.eval.split);
    let which = t.checkpoint.clone().unwrap_or(c.eval.checkpoint.clone());
    let teachers = load_teachers(&t.run.join(RUN_TEACHERS))?;
    let model = read_checkpoint(checkpoint_path(&t.run, &which))?.model;
    model.check_teachers(&teachers)?;
    let reports = t.run.join(REPORTS_DIR);
    create_dir(&reports)?;

    if let EvalTask::Inspect(_) = task {
        let d = export_diagnostics(&model, Some(&teachers));
        write_json(&reports.join("inspect.json"), &d)?;
        println!(
            "layer weights {:?}; argmax layer {} (informative layer {})",
            d.layer_weights,
            d.argmax_layer,
            teachers.informative_layer()
        );
        return Ok(());
    }

    let data = t
        .data
        .clone()
        .or(c.paths.data.clone())
        .ok_or_else(|| Error::Configuration("no data directory (pass --data)".into()))?;
    let set = load_split(&data, split, &teachers)?;
    let stem = format!("{name}_{}", split.name());
    match task {
        EvalTask::Retrieval(_) | EvalTask::Zeroshot(_) => {
            let report = if name == "retrieval" {
                eval_image_speech(&model, &set, &teachers)?
            } else {
                eval_zeroshot_speech_text(&model, &set, &teachers)?
            };
            write_json(&reports.join(format!("{stem}.json")), &report)?;
            for d in &report.directions {
                println!(
                    "{:>14}  R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  (random {:.3} / {:.3} / {:.3})",
                    d.label,
                    d.recall[0],
                    d.recall[1],
                    d.recall[2],
                    d.random_baseline[0],
                    d.random_baseline[1],
                    d.random_baseline[2]
                );
            }
        }
        EvalTask::Keywords(_) => {
            let (report, maps) = eval_keywords(&model, &set, &teachers)?;
            write_json(&reports.join(format!("{stem}.json")), &report)?;
            write_attention_maps(reports.join(format!("attention_{}.tsv", split.name())), &report.records, &maps)?;
            println!(
                "average keyword hit rate {:.3} over {} slots (chance {:.3}, nominal {:.3})",
                report.average_hit_rate, report.keywords, report.chance_hit_rate, report.nominal_chance_level
            );
        }
        EvalTask::Inspect(_) => unreachable!("handled above"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("speechclip").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_parse() {
        let cli = parse(&[
            "train", "--data", "d", "--run", "r", "--model", "cascaded", "--keywords", "2", "--no-batchnorm",
            "--preset", "paper",
        ]);
        let Command::Train(a) = cli.command else { panic!("expected train") };
        assert_eq!(a.model, Some(ModelKind::Cascaded));
        assert_eq!((a.keywords, a.no_batchnorm, a.preset), (Some(2), true, Some(Preset::Paper)));
        let cli = parse(&["eval", "keywords", "--run", "r", "--split", "dev"]);
        let Command::Eval(EvalArgs { task: EvalTask::Keywords(t) }) = cli.command else {
            panic!("expected eval keywords")
        };
        assert_eq!(t.split, Some(Split::Dev));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, "[train]\nmodel = \"cascaded\"\nkeywords = 4\ntotal_steps = 50\nwarmup_steps = 5\n").unwrap();
        let cli = parse(&["train", "--run", "r", "--config", cfg.to_str().unwrap(), "--keywords", "2"]);
        let Command::Train(a) = cli.command else { panic!() };
        let c = effective_train_config(&a).unwrap();
        assert_eq!((c.train.keywords, c.train.total_steps), (2, 50));
        assert_eq!(c.train.model, ModelKind::Cascaded);
    }

    #[test]
    fn preset_then_flags() {
        let cli = parse(&["train", "--run", "r", "--preset", "paper", "--steps", "6000"]);
        let Command::Train(a) = cli.command else { panic!() };
        let c = effective_train_config(&a).unwrap();
        assert_eq!((c.train.batch_size, c.train.warmup_steps, c.train.total_steps), (256, 5_000, 6_000));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["speechclip", "train", "--run"]), 2);
        assert_eq!(run(["speechclip", "gen-data", "--out", "unused", "--images", "5"]), 2);
        assert_eq!(run(["speechclip", "train", "--run", "r", "--keywords", "3"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let code = run([
            "speechclip",
            "train",
            "--run",
            dir.path().join("run").to_str().unwrap(),
            "--data",
            missing.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }
}
