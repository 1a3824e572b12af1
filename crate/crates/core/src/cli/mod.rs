//! Command-line front end: `gen-data`, `train`, `adapt`, `reconstruct`, `baseline`,
//! `eval` and `selftest`.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

pub use config::{Config, KeySpec, KEYS};

use crate::baselines::{alpha_grid, fbp_reconstruct, sweep_alpha, tv_reconstruct, TvConfig};
use crate::error::{Error, Result};
use crate::formats::{metrics_csv_append, read_tensor_file, write_image_pgm, write_tensor_file, MetricsRow};
use crate::inference::{data_range_of, evaluate, normalize_minmax, psnr, reconstruct, ssim};
use crate::operators::{ProjectionOperator, Sinogram};
use crate::phantoms::{generate_dataset, read_dataset, Dataset};
use crate::seed::derive_seed;
use crate::training::{load_checkpoint, save_checkpoint, train_supervised, ukt_adapt, AdaptMode, TrainLog};

pub const DATASET_FILE: &str = "dataset.bds";
pub const CHECKPOINT_FILE: &str = "checkpoint.ck";
pub const TRAIN_LOG: &str = "train.log";
pub const ADAPT_LOG: &str = "adapt.log";
pub const METRICS_FILE: &str = "metrics.csv";

const STREAM_RECON: u64 = 11;

#[derive(Parser, Debug)]
#[command(
    name = "bdgd",
    version,
    about = "Bayesian unrolled CT reconstruction with unsupervised adaptation"
)]
struct Cli {
    /// Configuration file (key = value lines over the defaults).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides run.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads; 1 gives strictly sequential execution.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Record wall-clock times in the metrics CSV (otherwise 0, keeping files reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phantoms and noisy sinograms.
    GenData {
        /// Output file name inside --out.
        #[arg(long, default_value = DATASET_FILE)]
        file: String,
    },
    /// Supervised training on a labelled dataset.
    Train {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Unsupervised adaptation of a trained checkpoint to new measurements.
    Adapt {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Monte-Carlo reconstruction with uncertainty maps.
    Reconstruct(ReconArgs),
    /// FBP or TV reconstruction.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Labelled tuning set for tv.alpha = auto (default: the first tv.tune_count records of --data).
        #[arg(long, value_name = "PATH")]
        tune: Option<PathBuf>,
    },
    /// PSNR and SSIM of one tensor file against another.
    Eval {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
        /// Data range: auto (max - min of the reference) or a positive number.
        #[arg(long, default_value = "auto")]
        range: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Adjoint, gradient, KL, trace and uncertainty invariant suites.
    Selftest,
}

#[derive(Args, Debug)]
struct ReconArgs {
    /// One checkpoint for every record, or one per record in order.
    #[arg(long, value_name = "PATH", num_args = 1.., required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Method label in the metrics CSV.
    #[arg(long, default_value = "bdgd")]
    method: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineMethod {
    Fbp,
    Tv,
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    timing: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn operator(&self) -> Result<Arc<ProjectionOperator>> {
        Ok(Arc::new(self.cfg.operator()?))
    }

    fn row(&self, sample_id: String, method: &str, psnr_db: f64, ssim: f64, started: Instant) -> MetricsRow {
        MetricsRow {
            sample_id,
            method: method.to_string(),
            psnr_db,
            ssim,
            wall_ms: if self.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            seed: self.cfg.seed(),
            config_hash: self.cfg.hash(),
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_help(Config::help_table());
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return 1;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists (repeated in-process runs); the old one is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        timing: cli.timing,
    };
    match cli.command {
        Command::GenData { file } => gen_data(&ctx, &file),
        Command::Train { data, resume } => train(&ctx, &data, resume.as_deref()),
        Command::Adapt { checkpoint, data } => adapt(&ctx, &checkpoint, &data),
        Command::Reconstruct(a) => recon(&ctx, &a),
        Command::Baseline { method, data, tune } => baseline(&ctx, method, &data, tune.as_deref()),
        Command::Eval {
            pred,
            reference,
            range,
            id,
            method,
        } => eval(&ctx, &pred, &reference, &range, id, &method),
        Command::Selftest => selftest(),
    }
}

fn gen_data(ctx: &Ctx, file: &str) -> Result<i32> {
    let op = ctx.operator()?;
    let path = ctx.path(file);
    let ds = generate_dataset(
        ctx.cfg.dataset_kind(),
        ctx.cfg.data_count(),
        &op,
        &ctx.cfg.noise()?,
        ctx.cfg.seed(),
        &path,
    )?;
    println!(
        "wrote {} {} records to {}",
        ds.records.len(),
        ds.kind.name(),
        path.display()
    );
    Ok(0)
}

fn load_data(path: &Path, op: &ProjectionOperator) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    ds.check_operator(op)?;
    Ok(ds)
}

fn fresh_log(path: &Path) -> Result<TrainLog> {
    match std::fs::remove_file(path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(path, e)),
    }
    TrainLog::append_to(path)
}

fn train(ctx: &Ctx, data: &Path, resume: Option<&Path>) -> Result<i32> {
    let op = ctx.operator()?;
    let ds = load_data(data, &op)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let log_path = ctx.path(TRAIN_LOG);
    let mut log = if resume.is_some() {
        TrainLog::append_to(&log_path)?
    } else {
        fresh_log(&log_path)?
    };
    let ck = train_supervised(
        &ds,
        &op,
        &ctx.cfg.net()?,
        &ctx.cfg.train()?,
        &ctx.cfg.serialize(),
        &mut log,
        resume,
    )?;
    let path = ctx.path(CHECKPOINT_FILE);
    save_checkpoint(&ck, &path)?;
    println!("trained {} steps, checkpoint {}", ck.optim.step, path.display());
    Ok(0)
}

fn adapt(ctx: &Ctx, checkpoint: &Path, data: &Path) -> Result<i32> {
    let op = ctx.operator()?;
    let base = load_checkpoint(checkpoint)?;
    let ds = load_data(data, &op)?;
    let mut log = fresh_log(&ctx.path(ADAPT_LOG))?;
    let mode = ctx.cfg.adapt_mode();
    let cks = ukt_adapt(&base, &ds, &op, &ctx.cfg.train()?, mode, &ctx.cfg.serialize(), &mut log)?;
    for (i, ck) in cks.iter().enumerate() {
        let name = match mode {
            AdaptMode::PerMeasurement => format!("adapted_{i:04}.ck"),
            AdaptMode::Batch => "adapted.ck".to_string(),
        };
        save_checkpoint(ck, &ctx.path(&name))?;
    }
    println!("adapted {} checkpoint(s) in {}", cks.len(), ctx.out.display());
    Ok(0)
}

/// `(0, max of ground truth)`, falling back to the image itself.
fn display_window(image: &[f64], gt: Option<&[f64]>) -> (f64, f64) {
    let hi = gt.unwrap_or(image).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    (0.0, if hi > 0.0 { hi } else { 1.0 })
}

fn write_image(ctx: &Ctx, stem: &str, image: &[f64], window: (f64, f64)) -> Result<()> {
    let g = ctx.cfg.grid()?;
    write_tensor_file(&ctx.path(&format!("{stem}.tnsr")), &[g.ny, g.nx], image)?;
    write_image_pgm(image, g.nx, g.ny, &ctx.path(&format!("{stem}.pgm")), window)
}

fn score(ctx: &Ctx, id: String, method: &str, image: &[f64], gt: Option<&[f64]>, started: Instant) -> Result<()> {
    if let Some(gt) = gt {
        let g = ctx.cfg.grid()?;
        let m = evaluate(image, gt, g.ny, g.nx)?;
        metrics_csv_append(&ctx.path(METRICS_FILE), &ctx.row(id, method, m.psnr, m.ssim, started))?;
    }
    Ok(())
}

fn recon(ctx: &Ctx, a: &ReconArgs) -> Result<i32> {
    let op = ctx.operator()?;
    let cks = a
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(ck) = cks.iter().find(|c| c.geometry_hash != op.geometry_hash()) {
        return Err(Error::GeometryMismatch {
            expected_from: "checkpoint",
            expected: ck.geometry_hash,
            got_from: "configured",
            got: op.geometry_hash(),
        });
    }
    let ds = load_data(&a.data, &op)?;
    let n = ds.records.len();
    if cks.len() != 1 && cks.len() != n {
        return Err(Error::Config(format!(
            "got {} checkpoints for {n} records; pass one, or one per record",
            cks.len()
        )));
    }
    for (i, rec) in ds.records.iter().enumerate() {
        let started = Instant::now();
        let ck = &cks[if cks.len() == 1 { 0 } else { i }];
        let y = rec.sinogram(ds.n_angles, ds.n_detectors)?;
        let seed = derive_seed(ctx.cfg.seed(), &[STREAM_RECON, i as u64]);
        let r = reconstruct(ck, &y, &op, ctx.cfg.infer_samples(), seed)?;
        let gt = rec.ground_truth_f64();
        let stem = format!("{}_{i:04}", a.method);
        write_image(ctx, &stem, &r.mean, display_window(&r.mean, gt.as_deref()))?;
        for (name, map) in [
            ("aleatoric", &r.aleatoric),
            ("epistemic", &r.epistemic),
            ("total", &r.total),
        ] {
            let g = ctx.cfg.grid()?;
            write_tensor_file(&ctx.path(&format!("{stem}_{name}.tnsr")), &[g.ny, g.nx], map)?;
            write_image_pgm(
                &normalize_minmax(map),
                g.nx,
                g.ny,
                &ctx.path(&format!("{stem}_{name}.pgm")),
                (0.0, 1.0),
            )?;
        }
        score(ctx, format!("{i:04}"), &a.method, &r.mean, gt.as_deref(), started)?;
    }
    println!("reconstructed {n} record(s) into {}", ctx.out.display());
    Ok(0)
}

fn labelled(ds: &Dataset, limit: usize) -> Result<Vec<(Sinogram, Vec<f64>)>> {
    ds.records
        .iter()
        .take(limit)
        .map(|r| {
            let gt = r
                .ground_truth_f64()
                .ok_or_else(|| Error::Data("tv weight search needs ground truth in the tuning set".into()))?;
            Ok((r.sinogram(ds.n_angles, ds.n_detectors)?, gt))
        })
        .collect()
}

fn baseline(ctx: &Ctx, method: BaselineMethod, data: &Path, tune: Option<&Path>) -> Result<i32> {
    let op = ctx.operator()?;
    let ds = load_data(data, &op)?;
    let tv = match method {
        BaselineMethod::Fbp => None,
        BaselineMethod::Tv => {
            let alpha = match ctx.cfg.tv_alpha() {
                Some(a) => a,
                None => {
                    let tune_ds = match tune {
                        Some(p) => load_data(p, &op)?,
                        None => ds.clone(),
                    };
                    let items = labelled(&tune_ds, ctx.cfg.tv_tune_count())?;
                    let ys: Vec<&Sinogram> = items.iter().map(|(y, _)| y).collect();
                    let grid = alpha_grid(&op, &ys)?;
                    let sweep = sweep_alpha(&items, &op, &ctx.cfg.tv_base(), &grid)?;
                    println!("tv weight search: best alpha {:.6e}", sweep.best_alpha);
                    sweep.best_alpha
                }
            };
            Some(TvConfig {
                alpha,
                ..ctx.cfg.tv_base()
            })
        }
    };
    let name = match method {
        BaselineMethod::Fbp => "fbp",
        BaselineMethod::Tv => "tv",
    };
    let images = ds
        .records
        .par_iter()
        .map(|rec| {
            let started = Instant::now();
            let y = rec.sinogram(ds.n_angles, ds.n_detectors)?;
            let x = match &tv {
                None => fbp_reconstruct(&y, &op, ctx.cfg.fbp_cutoff())?,
                Some(c) => tv_reconstruct(&y, &op, c)?.image,
            };
            Ok((x, started))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, (rec, (x, started))) in ds.records.iter().zip(images).enumerate() {
        let gt = rec.ground_truth_f64();
        write_image(ctx, &format!("{name}_{i:04}"), &x, display_window(&x, gt.as_deref()))?;
        score(ctx, format!("{i:04}"), name, &x, gt.as_deref(), started)?;
    }
    println!(
        "{name}: reconstructed {} record(s) into {}",
        ds.records.len(),
        ctx.out.display()
    );
    Ok(0)
}

fn eval(ctx: &Ctx, pred: &Path, reference: &Path, range: &str, id: Option<String>, method: &str) -> Result<i32> {
    let started = Instant::now();
    let p = read_tensor_file(pred)?;
    let r = read_tensor_file(reference)?;
    if p.dims() != r.dims() {
        return Err(Error::Data(format!(
            "prediction dims {:?} differ from reference dims {:?}",
            p.dims(),
            r.dims()
        )));
    }
    let (h, w) = match p.dims() {
        [h, w] => (*h, *w),
        _ => {
            let g = ctx.cfg.grid()?;
            (g.ny, g.nx)
        }
    };
    let (x, gt) = (p.to_f64(), r.to_f64());
    let range = match range {
        "auto" => data_range_of(&gt),
        v => match v.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => x,
            _ => {
                return Err(Error::Config(format!(
                    "--range expects auto or a positive number, got {v}"
                )))
            }
        },
    };
    let id = id.unwrap_or_else(|| {
        pred.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let row = ctx.row(id, method, psnr(&x, &gt, range)?, ssim(&x, &gt, h, w, range)?, started);
    metrics_csv_append(&ctx.path(METRICS_FILE), &row)?;
    println!("{}", row.to_line());
    Ok(0)
}

fn selftest() -> Result<i32> {
    let reports = crate::selftest::run_all();
    for r in &reports {
        println!("{}", r.line());
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 3 })
}
