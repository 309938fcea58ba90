//! `xlrm`: dataset generation, training, reconstruction and evaluation.
//!
//! Exit status: 0 on success, 1 for bad usage or invalid input, 2 for
//! internal failures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlrm_core::config::{self, KvConfig};
use xlrm_core::dataset::{self, GenOptions, LoadedSample};
use xlrm_core::eval::{evaluate, robustness_sweep, standard_sweep, MetricReport, Reconstructor, Sart};
use xlrm_core::metrics::{psnr_3d, ssim_slices};
use xlrm_core::trainer::Trainer;
use xlrm_core::{io, selftest, Error};

#[derive(Parser, Debug)]
#[command(name = "xlrm", version, about = "Sparse-view cone-beam CT reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the configuration file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic phantom dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of phantoms (default 4).
        #[arg(long)]
        samples: Option<usize>,
        /// Projections stored per phantom (default 10).
        #[arg(long)]
        views: Option<usize>,
        /// Volume side length in voxels (default 32).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Stop after this many total steps (default: the configured schedule).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log; defaults to the checkpoint path with `.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reconstruct one sample and write the volume.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Sample id (default: the first).
        #[arg(long)]
        sample: Option<String>,
        /// Number of input views.
        #[arg(long, default_value_t = 6)]
        views: usize,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// View counts to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "6,8,10")]
        views: Vec<usize>,
    },
    /// Scanner-parameter noise sweep.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Number of input views.
        #[arg(long, default_value_t = 6)]
        views: usize,
        /// Perturbation draws averaged per setting.
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Evaluate the iterative SART baseline.
    Sart {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// View counts to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "6,8,10")]
        views: Vec<usize>,
        /// SART sweeps over all views.
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        /// SART relaxation factor in (0, 1].
        #[arg(long, default_value_t = 0.25)]
        relax: f64,
    },
    /// Adjoint, gradient and interpolation checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { common, samples, views, resolution } => gen_data(&common, samples, views, resolution),
        Command::Train { common, data, steps, resume, log } => train(&common, &data, steps, resume, log),
        Command::Reconstruct { common, checkpoint, data, sample, views } => {
            reconstruct(&common, checkpoint, &data, sample, views)
        }
        Command::Eval { common, checkpoint, data, views } => eval(&common, checkpoint, &data, &views),
        Command::Robustness { common, checkpoint, data, views, trials } => {
            robustness(&common, checkpoint, &data, views, trials)
        }
        Command::Sart { common, data, views, iterations, relax } => sart(&common, &data, &views, iterations, relax),
        Command::Selftest { common } => self_test(&common),
    }
}

/// Configuration file, then `--set` pairs, then `--seed`.
fn load_config(common: &Common) -> Result<KvConfig, Failure> {
    let mut kv = match &common.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        kv.set("seed", s.to_string());
    }
    Ok(kv)
}

fn require_checkpoint(checkpoint: Option<PathBuf>) -> Result<PathBuf, Failure> {
    checkpoint.ok_or_else(|| Failure::Usage("missing required flag --checkpoint <PATH>".into()))
}

fn load_data(data: &Path) -> Result<Vec<LoadedSample>, Failure> {
    let (m, root) = dataset::load_manifest(data)?;
    Ok(dataset::load_samples(&m, &root)?)
}

fn check_views(views: &[usize]) -> Outcome {
    if views.is_empty() || views.contains(&0) {
        return Err(Failure::Usage("view counts must be positive".into()));
    }
    Ok(())
}

fn write_report(report: &MetricReport, out: Option<&Path>) -> Outcome {
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
        let write = |name: &str, text: &str| -> Outcome {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        };
        write("report.json", &report.to_json()?)?;
        write("report.txt", &table)?;
        println!("wrote {}", dir.join("report.json").display());
    }
    Ok(())
}

fn gen_data(common: &Common, samples: Option<usize>, views: Option<usize>, resolution: Option<usize>) -> Outcome {
    let mut kv = load_config(common)?;
    let mut opts = GenOptions::desk(4, 0);
    kv.take_into("samples", &mut opts.n_samples)?;
    kv.take_into("views", &mut opts.views)?;
    kv.take_into("resolution", &mut opts.resolution)?;
    kv.take_into("seed", &mut opts.seed)?;
    opts.geometry = config::geometry_config(&mut kv)?;
    opts.noise = config::noise_config(&mut kv)?;
    kv.finish()?;
    if let Some(n) = samples {
        opts.n_samples = n;
    }
    if let Some(v) = views {
        opts.views = v;
    }
    if let Some(r) = resolution {
        opts.resolution = r;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let m = dataset::gen_dataset(&opts, &out)?;
    println!(
        "wrote {} samples ({}³, {} views of {}x{}) to {}",
        m.samples.len(),
        m.resolution,
        m.views,
        m.det_rows,
        m.det_cols,
        out.display()
    );
    Ok(())
}

fn train(common: &Common, data: &Path, steps: Option<u64>, resume: Option<PathBuf>, log: Option<PathBuf>) -> Outcome {
    let mut kv = load_config(common)?;
    let mut trainer = match &resume {
        Some(p) => {
            kv.finish()?;
            Trainer::load(p)?
        }
        None => {
            let model = config::model_config(&mut kv)?;
            let tc = config::train_config(&mut kv)?;
            kv.finish()?;
            Trainer::new(&model, tc)?
        }
    };
    let samples = load_data(data)?;
    let counts = trainer.config().view_counts.clone();
    let train_set = samples
        .iter()
        .map(|s| s.train_sample(&counts))
        .collect::<Result<Vec<_>, _>>()?;
    let until = steps.unwrap_or(trainer.config().total_steps);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("xlrm.ckpt"));
    let log_path = log.unwrap_or_else(|| out.with_extension("log"));
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", log_path.display())))?;
    let mut w = BufWriter::new(file);
    println!(
        "training {} ({} parameters) on {} samples, steps {} -> {until}",
        trainer.model.ablation(),
        xlrm_core::nn::Params::param_count(&trainer.model),
        train_set.len(),
        trainer.step()
    );
    let every = (until / 20).max(1);
    while trainer.step() < until {
        let s = trainer.train_step(&train_set)?;
        writeln!(w, "{}", s.log_line()).map_err(|e| Failure::Internal(e.to_string()))?;
        if s.step % every == 0 || s.step == until {
            println!("{}", s.log_line());
        }
    }
    w.flush().map_err(|e| Failure::Internal(e.to_string()))?;
    trainer.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn reconstruct(common: &Common, checkpoint: Option<PathBuf>, data: &Path, sample: Option<String>, views: usize) -> Outcome {
    let ckpt = require_checkpoint(checkpoint)?;
    check_views(&[views])?;
    load_config(common)?.finish()?;
    let model = Trainer::load(&ckpt)?.model;
    let samples = load_data(data)?;
    let s = match &sample {
        Some(id) => samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Failure::Usage(format!("no sample {id:?} in {}", data.display())))?,
        None => samples.first().ok_or_else(|| Failure::Usage("dataset is empty".into()))?,
    };
    let vol = model.reconstruct(&s.projections_for(views)?, s.volume.resolution())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}_recon.bin", s.id)));
    io::write_volume(&out, &vol)?;
    println!(
        "{} with {views} views: PSNR {:.2} dB, SSIM {:.4}; wrote {}",
        s.id,
        psnr_3d(&vol, &s.volume)?,
        ssim_slices(&vol, &s.volume)?,
        out.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, data: &Path, views: &[usize]) -> Outcome {
    let ckpt = require_checkpoint(checkpoint)?;
    check_views(views)?;
    load_config(common)?.finish()?;
    let model = Trainer::load(&ckpt)?.model;
    let report = evaluate(&model, &load_data(data)?, views)?;
    write_report(&report, common.out.as_deref())
}

fn robustness(common: &Common, checkpoint: Option<PathBuf>, data: &Path, views: usize, trials: usize) -> Outcome {
    let ckpt = require_checkpoint(checkpoint)?;
    check_views(&[views])?;
    let mut kv = load_config(common)?;
    let seed = kv.take::<u64>("seed")?.unwrap_or(0);
    kv.finish()?;
    let model = Trainer::load(&ckpt)?.model;
    let report = robustness_sweep(&model, &load_data(data)?, views, &standard_sweep(seed), trials)?;
    write_report(&report, common.out.as_deref())
}

fn sart(common: &Common, data: &Path, views: &[usize], iterations: usize, relax: f64) -> Outcome {
    check_views(views)?;
    load_config(common)?.finish()?;
    let rec = Sart { iterations, relax };
    let report = evaluate(&rec as &dyn Reconstructor, &load_data(data)?, views)?;
    write_report(&report, common.out.as_deref())
}

fn self_test(common: &Common) -> Outcome {
    let mut kv = load_config(common)?;
    let seed = kv.take::<u64>("seed")?.unwrap_or(0);
    kv.finish()?;
    let results = selftest::run_all(seed)?;
    let mut out: Box<dyn Write> = match &common.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::sink()),
    };
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        writeln!(out, "{}", r.line()).map_err(|e| Failure::Internal(e.to_string()))?;
        failed += usize::from(!r.passed());
    }
    out.flush().map_err(|e| Failure::Internal(e.to_string()))?;
    if failed > 0 {
        return Err(Failure::Internal(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
