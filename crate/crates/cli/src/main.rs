use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use retseg::config::{ConfigError, PipelineConfig};
use retseg::dataset::{self, file_stem, pairing_key};
use retseg::eval::{self, ImageResult};
use retseg::imagio::{write_csv, BinaryImage, Image};
use retseg::mlp::{self, MlpParams};
use retseg::pipeline::{self, PipelineError, Stages};

#[derive(Parser)]
#[command(
    name = "retseg",
    version,
    about = "Supervised retinal vessel segmentation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both the classifier and the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image stages [default: number of processors].
    #[arg(long, global = true, env = "RETSEG_JOBS")]
    jobs: Option<usize>,
    /// Write every intermediate stage image.
    #[arg(long, global = true)]
    dump_stages: bool,
    /// FOV masks restricting evaluation.
    #[arg(long, global = true, value_name = "PATH")]
    mask_dir: Option<PathBuf>,
    /// Print the resolved configuration and planned action, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Print the resolved configuration in config-file form, then exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Index of the training image within the dataset.
    #[arg(long, global = true)]
    train_idx: Option<usize>,
    /// Images to score: `all` or `held-out`.
    #[arg(long, global = true)]
    eval_split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        /// Number of images; image `i` uses seed `synth.seed + i`.
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Enhance and binarize every fundus image in a directory.
    Preprocess {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the classifier on one preprocessed image and its truth.
    Train {
        /// Complemented binary image (a fundus PPM is preprocessed first).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Epoch history CSV [default: <model>.history.csv].
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Apply a trained model to every image in a directory.
    Segment {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score predictions against manual segmentations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report CSV [default: <pred>/report.csv].
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Preprocess, train on one image, segment all and evaluate.
    Pipeline {
        /// DRIVE-layout or flat dataset directory.
        dataset: Option<PathBuf>,
        /// Use generated images instead of a dataset directory.
        #[arg(long, conflicts_with = "dataset")]
        synth: bool,
        /// Number of synthetic images.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Directory for report, history, model, ROC and predictions.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Errors that exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Number of inputs that failed while the rest completed.
type Failures = usize;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} input(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<PipelineError>() {
        Some(
            PipelineError::NoInputs | PipelineError::Config(_) | PipelineError::TrainIndex { .. },
        ) => 2,
        _ => 1,
    }
}

fn resolve_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &g.config {
        let text =
            fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .with_context(|| path.display().to_string())?;
    }
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(i) = g.train_idx {
        cfg.train_index = i;
    }
    if let Some(split) = &g.eval_split {
        cfg.set("pipeline.eval_split", split)?;
    }
    if g.mask_dir.is_some() {
        cfg.use_mask = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn jobs(g: &Global) -> Result<usize> {
    match g.jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> Result<Failures> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    if g.dump_config {
        print!("{}", cfg.to_text());
        return Ok(0);
    }
    let jobs = jobs(g)?;
    if g.dry_run {
        print!("{}", cfg.to_text());
        println!("# jobs = {jobs}");
        println!("# action: {}", describe(&cli.command));
        return Ok(0);
    }
    match &cli.command {
        Command::Synth { out, count } => cmd_synth(&cfg, out, *count),
        Command::Preprocess { input, out } => cmd_preprocess(&cfg, g, jobs, input, out),
        Command::Train {
            input,
            truth,
            model,
            history,
        } => cmd_train(&cfg, input, truth, model, history.as_deref()),
        Command::Segment { input, model, out } => cmd_segment(&cfg, jobs, input, model, out),
        Command::Eval {
            pred,
            truth,
            report,
        } => cmd_eval(g, pred, truth, report.as_deref()),
        Command::Pipeline {
            dataset,
            synth,
            count,
            out,
        } => cmd_pipeline(
            &cfg,
            g,
            jobs,
            dataset.as_deref(),
            *synth,
            *count,
            out.as_deref(),
        ),
    }
}

fn describe(cmd: &Command) -> String {
    match cmd {
        Command::Synth { out, count } => format!("synth {count} image(s) into {}", out.display()),
        Command::Preprocess { input, out } => {
            format!("preprocess {} into {}", input.display(), out.display())
        }
        Command::Train { input, model, .. } => {
            format!("train on {} into {}", input.display(), model.display())
        }
        Command::Segment { input, out, .. } => {
            format!("segment {} into {}", input.display(), out.display())
        }
        Command::Eval { pred, truth, .. } => {
            format!("evaluate {} against {}", pred.display(), truth.display())
        }
        Command::Pipeline { dataset, count, .. } => match dataset {
            Some(d) => format!("pipeline over {}", d.display()),
            None => format!("pipeline over {count} synthetic image(s)"),
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| dir.display().to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| path.display().to_string())
}

fn stage_file_name(id: &str, stage: &str, img: &Image) -> String {
    let ext = if matches!(img, Image::Binary(_)) {
        "pbm"
    } else {
        "pgm"
    };
    format!("{id}_{stage}.{ext}")
}

fn write_stages(dir: &Path, id: &str, stages: &Stages, all: bool) -> Result<()> {
    for (name, img) in stages.named() {
        if all || name == "complemented" {
            dataset::write_image_file(&dir.join(stage_file_name(id, name, &img)), &img)?;
        }
    }
    Ok(())
}

fn cmd_synth(cfg: &PipelineConfig, out: &Path, count: usize) -> Result<Failures> {
    let written = dataset::write_synth_dataset(&cfg.synth, count, out)?;
    println!("wrote {} file(s) to {}", written.len(), out.display());
    Ok(0)
}

fn cmd_preprocess(
    cfg: &PipelineConfig,
    g: &Global,
    jobs: usize,
    input: &Path,
    out: &Path,
) -> Result<Failures> {
    if !input.is_dir() {
        return Err(usage(format!("{}: not a directory", input.display())));
    }
    let entries = dataset::discover(input, None)?;
    if entries.is_empty() {
        return Err(PipelineError::NoInputs.into());
    }
    create_dir(out)?;
    let pool = pipeline::thread_pool(jobs)?;
    let results: Vec<Result<Stages, PipelineError>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| pipeline::preprocess(&dataset::read_rgb(&e.image)?, cfg))
            .collect()
    });
    let mut failures = 0;
    for (entry, res) in entries.iter().zip(results) {
        match res {
            Ok(stages) => {
                write_stages(out, &entry.id, &stages, g.dump_stages)?;
                println!("{}: threshold {}", entry.id, stages.threshold);
            }
            Err(e) => {
                eprintln!("{}: {e}", entry.image.display());
                failures += 1;
            }
        }
    }
    Ok(failures)
}

/// Reads a classifier input: fundus colour images are preprocessed, anything
/// else is taken as a binary image.
fn load_input(path: &Path, cfg: &PipelineConfig) -> Result<BinaryImage, PipelineError> {
    match dataset::read_image_file(path)? {
        Image::Rgb(rgb) => Ok(pipeline::preprocess(&rgb, cfg)?.complemented),
        other => Ok(other.to_mask()),
    }
}

fn cmd_train(
    cfg: &PipelineConfig,
    input: &Path,
    truth: &Path,
    model: &Path,
    history: Option<&Path>,
) -> Result<Failures> {
    let x = load_input(input, cfg)?;
    let y = dataset::read_mask(truth)?;
    let (params, hist) = pipeline::train_on_image(&x, &y, cfg)?;
    write_file(model, params.to_text().as_bytes())?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = model.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    write_file(&history_path, &hist.to_csv())?;
    let s = &hist.split;
    println!(
        "split: train {} / val {} / test {}",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    let b = hist.best();
    println!(
        "best epoch {}: train ce {:.6} acc {:.4}, val ce {:.6} acc {:.4}, test ce {:.6} acc {:.4}",
        b.epoch,
        b.train_ce,
        1.0 - b.train_err,
        b.val_ce,
        1.0 - b.val_err,
        b.test_ce,
        1.0 - b.test_err
    );
    println!(
        "stopped: {} after {} epoch(s)",
        hist.stop,
        hist.epochs_run()
    );
    Ok(0)
}

fn pred_id(stem: &str) -> &str {
    stem.strip_suffix("_complemented").unwrap_or(stem)
}

fn cmd_segment(
    cfg: &PipelineConfig,
    jobs: usize,
    input: &Path,
    model: &Path,
    out: &Path,
) -> Result<Failures> {
    let text = fs::read_to_string(model).with_context(|| model.display().to_string())?;
    let params = MlpParams::from_text(&text).with_context(|| model.display().to_string())?;
    let mut inputs = dataset::list_images(input)?;
    if inputs
        .iter()
        .any(|p| file_stem(p).ends_with("_complemented"))
    {
        inputs.retain(|p| file_stem(p).ends_with("_complemented"));
    } else {
        inputs.retain(|p| {
            let stem = file_stem(p);
            !dataset::is_truth_stem(&stem) && !dataset::is_mask_stem(&stem)
        });
    }
    if inputs.is_empty() {
        return Err(PipelineError::NoInputs.into());
    }
    create_dir(out)?;
    let pool = pipeline::thread_pool(jobs)?;
    let results: Vec<Result<(BinaryImage, f64), PipelineError>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|path| {
                let start = Instant::now();
                let x = load_input(path, cfg)?;
                let pred = mlp::predict_image(&params, &x, cfg.mlp_window)?;
                Ok((pred.labels, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let mut failures = 0;
    let mut rows = vec![vec!["image".to_string(), "seconds".to_string()]];
    let mut total = 0.0;
    for (path, res) in inputs.iter().zip(results) {
        let stem = file_stem(path);
        let id = pred_id(&stem);
        match res {
            Ok((labels, secs)) => {
                dataset::write_image_file(&out.join(format!("{id}_pred.pbm")), &labels.into())?;
                rows.push(vec![id.to_string(), format!("{secs:.6}")]);
                total += secs;
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failures += 1;
            }
        }
    }
    rows.push(vec!["TOTAL".to_string(), format!("{total:.6}")]);
    write_file(&out.join("timing.csv"), &write_csv(&rows))?;
    println!("segmented {} image(s) in {total:.4} s", rows.len() - 2);
    Ok(failures)
}

fn read_timing(dir: &Path) -> BTreeMap<String, f64> {
    let Ok(text) = fs::read_to_string(dir.join("timing.csv")) else {
        return BTreeMap::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (id, secs) = l.rsplit_once(',')?;
            Some((id.to_string(), secs.trim().parse().ok()?))
        })
        .collect()
}

fn cmd_eval(g: &Global, pred: &Path, truth: &Path, report_path: Option<&Path>) -> Result<Failures> {
    let preds = dataset::list_images(pred)?;
    if preds.is_empty() {
        return Err(PipelineError::NoInputs.into());
    }
    let truths = dataset::index_truths(truth)?;
    let masks = g
        .mask_dir
        .as_deref()
        .map(dataset::index_masks)
        .transpose()?;
    let timing = read_timing(pred);
    let mut results = Vec::new();
    let mut failures = 0;
    let mut sorted: Vec<_> = preds.iter().map(|p| (file_stem(p), p)).collect();
    sorted.sort_by_key(|(stem, _)| {
        (
            pairing_key(stem).parse::<u64>().unwrap_or(u64::MAX),
            stem.clone(),
        )
    });
    for (stem, path) in sorted {
        let id = stem.strip_suffix("_pred").unwrap_or(&stem).to_string();
        let res = (|| -> Result<ImageResult> {
            let key = pairing_key(&stem);
            let truth_path = truths
                .get(&key)
                .ok_or_else(|| PipelineError::MissingCounterpart(stem.clone()))?;
            let p = dataset::read_mask(path)?;
            let t = dataset::read_mask(truth_path)?;
            let m = match &masks {
                Some(m) => {
                    let mp = m
                        .get(&key)
                        .ok_or_else(|| anyhow!("no mask found for `{stem}`"))?;
                    Some(dataset::read_mask(mp)?)
                }
                None => None,
            };
            let counts = eval::confusion(&p, &t, m.as_ref())?;
            Ok(ImageResult::new(
                id.clone(),
                counts,
                timing.get(&id).copied().unwrap_or(0.0),
            )?)
        })();
        match res {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("{id}: {e:#}");
                failures += 1;
            }
        }
    }
    if results.is_empty() {
        bail!("no prediction could be evaluated");
    }
    let report = eval::report(&results)?;
    let out = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| pred.join("report.csv"));
    write_file(&out, &report.csv)?;
    print!("{}", report.table);
    Ok(failures)
}

fn cmd_pipeline(
    cfg: &PipelineConfig,
    g: &Global,
    jobs: usize,
    data: Option<&Path>,
    synth: bool,
    count: usize,
    out: Option<&Path>,
) -> Result<Failures> {
    let mut failures = 0;
    let samples = match (data, synth) {
        (None, true) => dataset::synth_samples(&cfg.synth, count)?,
        (Some(dir), false) => {
            if !dir.is_dir() {
                return Err(usage(format!("{}: not a directory", dir.display())));
            }
            let mut samples = Vec::new();
            for entry in dataset::discover(dir, g.mask_dir.as_deref())? {
                match dataset::load_sample(&entry) {
                    Ok(s) => samples.push(s),
                    Err(e) => {
                        eprintln!("{}: {e}", entry.id);
                        failures += 1;
                    }
                }
            }
            samples
        }
        _ => return Err(usage("pipeline needs a dataset directory or --synth")),
    };
    if samples.is_empty() {
        return Err(PipelineError::NoInputs.into());
    }
    let exp = pipeline::run_experiment(&samples, cfg, jobs)?;

    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("report.csv"), &exp.report.csv)?;
        write_file(&dir.join("history.csv"), &exp.history.to_csv())?;
        write_file(&dir.join("model.txt"), exp.params.to_text().as_bytes())?;
        write_file(&dir.join("roc.csv"), &pipeline::roc_csv(&exp.diagnostics))?;
        write_file(
            &dir.join("confusion.csv"),
            &pipeline::confusion_csv(&exp.diagnostics),
        )?;
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        for img in &exp.images {
            let labels = Image::Binary(img.prediction.labels.clone());
            dataset::write_image_file(&pred_dir.join(format!("{}_pred.pbm", img.id)), &labels)?;
        }
        if g.dump_stages {
            let stage_dir = dir.join("stages");
            create_dir(&stage_dir)?;
            for img in &exp.images {
                write_stages(&stage_dir, &img.id, &img.stages, true)?;
            }
        }
    }

    print!("{}", exp.report.table);
    println!("trained on: {}", exp.train_id);
    println!("average accuracy: {:.4}", exp.report.average);
    println!("total segmentation seconds: {:.4}", exp.segmentation_s);
    Ok(failures)
}
