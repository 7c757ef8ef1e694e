//! The `dpaf` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error (including missing input files).

mod config;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{AblationConfig, DataConfig, RunConfig, EFFECTIVE_CONFIG};

use crate::error::{config_err, Error, Result};
use crate::gradsuite;
use crate::model::{load_checkpoint, Model, Variant};
use crate::rain::{generate_dataset, import_folders, Dataset, Image, MANIFEST_FILE};
use crate::train::{evaluate, evaluate_with, run_ablation, Arm, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dpaf", version, about = "Train and run a dual-path CNN/Transformer deraining network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic rainy/clean dataset, or index existing image folders.
    GenData(GenDataArgs),
    /// Train a model; writes trace.jsonl and checkpoints into --out.
    Train(TrainArgs),
    /// Score a checkpoint (or the identity) on a dataset with PSNR and SSIM.
    Eval(EvalArgs),
    /// Derain one PNG of any size.
    Derain(DerainArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Train several variants over several seeds and tabulate held-out metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command's primary random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for the images and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs (overrides data.pairs).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Index existing PNGs instead of rendering: folder of rainy inputs.
    #[arg(long, requires = "import_clean")]
    pub import_rainy: Option<PathBuf>,
    /// Folder of clean targets with the same file names as --import-rainy.
    #[arg(long, requires = "import_rainy")]
    pub import_clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset manifest (overrides data.manifest).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`. The
    /// checkpoint's own training settings are used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimization steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Suppress per-step progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Score the rainy inputs themselves (output = input).
    #[arg(long)]
    pub identity: bool,
    /// Dataset manifest (overrides data.manifest).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for report.json and the config snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// A block or model name, or `all`.
    #[arg(default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for gradcheck.json and the config snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// List the available scopes and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants (overrides ablation.variants).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Comma-separated seeds (overrides ablation.seeds).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

/// Parses `args` (program name first), runs the command and maps the result
/// to an exit code, printing diagnostics to stderr.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Derain(a) => derain(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_manifest(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.manifest.as_deref().ok_or_else(|| config_err!("no dataset given: pass --data or set data.manifest"))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = a.pairs {
        cfg.data.pairs = n;
    }
    let manifest_path = a.out.join(MANIFEST_FILE);
    let n = match (&a.import_rainy, &a.import_clean) {
        (Some(r), Some(c)) => {
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            import_folders(r, c, &manifest_path)?.pairs.len()
        }
        _ => {
            let [h, w] = cfg.data.image_size;
            generate_dataset(cfg.data.pairs, (h, w), &cfg.data.ranges, cfg.data.seed, &a.out)?.pairs.len()
        }
    };
    cfg.data.manifest = Some(manifest_path.clone());
    cfg.save_effective(&a.out)?;
    eprintln!("wrote {n} pairs");
    println!("{}", manifest_path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.manifest = Some(d);
    }
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    let data = Dataset::load(require_manifest(&cfg)?)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::<f32>::resume(ckpt, &data)?;
            cfg.model = t.model.config().clone();
            cfg.train = t.config().clone();
            t
        }
        None => Trainer::new(Model::<f32>::build(&cfg.model, cfg.train.seed)?, cfg.train.clone(), &data)?,
    };
    if a.max_steps.is_some() {
        trainer.set_max_steps(a.max_steps);
        cfg.train.max_steps = a.max_steps;
    }
    cfg.save_effective(&a.out)?;
    let total = trainer.total_steps();
    eprintln!(
        "training {} parameters on {} pairs: {} steps/epoch, {} steps from step {}",
        trainer.model.num_params(),
        data.len(),
        trainer.steps_per_epoch(),
        total,
        trainer.state().step
    );
    let every = (total / 20).max(1);
    let start = Instant::now();
    let quiet = a.quiet;
    let records = trainer.run(Some(&a.out), |r| {
        if !quiet && (r.step + 1) % every == 0 {
            eprintln!("step {:>7}/{total}  epoch {:>4}  lr {:.3e}  loss {:.6}", r.step + 1, r.epoch, r.lr, r.loss_total);
        }
    })?;
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(last) = records.last() {
        println!("final loss {:.6} after {} steps", last.loss_total, last.step + 1);
    }
    println!("{}", a.out.join("last.ckpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.manifest = Some(d);
    }
    let data = Dataset::load(require_manifest(&cfg)?)?;
    let report = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path)?;
            cfg.model = ckpt.model.config().clone();
            evaluate(&ckpt.model, &data)?
        }
        None => evaluate_with(&data, |x| Ok(x.clone()))?,
    };
    if let Some(out) = &a.out {
        cfg.save_effective(out)?;
        write_json(&out.join("report.json"), &report)?;
    }
    println!(
        "{} pairs  PSNR mean {:.3} dB median {:.3} dB  SSIM mean {:.4} median {:.4}",
        report.rows.len(),
        report.mean_psnr_db,
        report.median_psnr_db,
        report.mean_ssim,
        report.median_ssim
    );
    Ok(())
}

fn derain(a: DerainArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let input = Image::load_png(&a.input)?;
    let (ph, pw) = ckpt.model.padding_for(input.height(), input.width());
    let output = ckpt.model.derain(&input)?;
    output.save_png(&a.output)?;
    let cfg = RunConfig { model: ckpt.model.config().clone(), ..RunConfig::default() };
    let stem = a.output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let snapshot = a.output.with_file_name(format!("{stem}.config.toml"));
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    eprintln!("{}x{} input, reflect padding {ph}x{pw}", input.height(), input.width());
    println!("{}", a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct GradRowOut<'a> {
    scope: &'a str,
    target: &'a str,
    entries: usize,
    rel_err: f64,
    tolerance: f64,
    pass: bool,
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    if a.list {
        for s in gradsuite::scopes() {
            println!("{s}");
        }
        return Ok(());
    }
    let start = Instant::now();
    let reports = gradsuite::run(&a.scope, a.seed)?;
    let mut rows = Vec::new();
    for r in &reports {
        let tol = gradsuite::tolerance(&r.name);
        for row in &r.rows {
            rows.push(GradRowOut {
                scope: &r.name,
                target: &row.target,
                entries: row.entries,
                rel_err: row.rel_err,
                tolerance: tol,
                pass: row.rel_err < tol,
            });
        }
    }
    let w0 = rows.iter().map(|r| r.scope.len()).chain([5]).max().unwrap_or(5);
    let w1 = rows.iter().map(|r| r.target.len()).chain([6]).max().unwrap_or(6);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<w0$}  {:<w1$}  {:>7}  {:>10}  status", "scope", "target", "entries", "rel_err");
    for r in &rows {
        let status = if r.pass { "pass" } else { "FAIL" };
        let _ = writeln!(out, "{:<w0$}  {:<w1$}  {:>7}  {:>10.3e}  {status}", r.scope, r.target, r.entries, r.rel_err);
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    let _ = writeln!(out, "{} rows, {failed} failed, {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    if let Some(dir) = &a.out {
        RunConfig::default().save_effective(dir)?;
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    if failed > 0 {
        return Err(Error::Check(format!("{failed} gradient rows exceed tolerance")));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(vs) = &a.variants {
        cfg.ablation.variants = vs.iter().map(|v| v.parse::<Variant>()).collect::<Result<_>>()?;
    }
    if let Some(ss) = a.seeds {
        cfg.ablation.seeds = ss;
    }
    if let Some(s) = a.common.seed {
        cfg.data.seed = s;
    }
    let weight_sets = if cfg.ablation.weight_sets.is_empty() { vec![cfg.train.weights] } else { cfg.ablation.weight_sets.clone() };
    if cfg.ablation.variants.len() < 2 && weight_sets.len() < 2 {
        return Err(config_err!("an ablation compares at least two variants or two loss-weight sets"));
    }
    let data = match &cfg.data.manifest {
        Some(m) => Dataset::load(m)?,
        None => {
            let [h, w] = cfg.data.image_size;
            Dataset::synthetic(cfg.data.pairs, (h, w), &cfg.data.ranges, cfg.data.seed)?
        }
    };
    let (train_set, held_out) = data.split(cfg.data.held_out)?;
    cfg.save_effective(&a.out)?;
    let arms = Arm::grid(&cfg.ablation.variants, &weight_sets);
    eprintln!(
        "{} arms x {} seeds, {} training / {} held-out pairs",
        arms.len(),
        cfg.ablation.seeds.len(),
        train_set.len(),
        held_out.len()
    );
    let start = Instant::now();
    let table = run_ablation(&cfg.model, &cfg.train, &arms, &cfg.ablation.seeds, &train_set, &held_out, |r| {
        eprintln!("{} seed {}: {:.3} dB / {:.4} ({:.0}s)", r.arm, r.seed, r.psnr_db, r.ssim, start.elapsed().as_secs_f64());
    })?;
    let text = table.render();
    write_json(&a.out.join("ablation.json"), &table)?;
    let txt = a.out.join("ablation.txt");
    std::fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
    print!("{text}");
    Ok(())
}
