//! `riner`: simulate corrupted scans, reconstruct them, evaluate results and
//! run the ablation matrix.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use riner_core::checkpoint::save_checkpoint;
use riner_core::fbp::{fbp_reconstruct, Window};
use riner_core::io;
use riner_core::simulator::simulate_scan;
use riner_core::trainer::{extract_image, train_with, TrainEvent};
use riner_core::{EncodingKind, EvalReport, ImageGrid, Sinogram, TrainConfig, TrainOutcome};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "riner", version, about = "Unsupervised CT ring-artifact reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for both simulation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct AblationFlags {
    #[arg(long)]
    disable_alpha: bool,
    #[arg(long)]
    disable_beta: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_encoding)]
    encoding: Option<EncodingKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Riner,
    Fbp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write phantom, clean and corrupted sinograms, and the detector profile.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct a sinogram file.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long, value_enum, default_value = "riner")]
        method: Method,
        /// Sinogram file; overrides `paths.input`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference image used to window the preview.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare a reconstruction with a reference image.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reconstruction: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Ground-truth detector profile; needs `--detectors` too.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Learned detector table written by `reconstruct`.
        #[arg(long)]
        detectors: Option<PathBuf>,
        #[arg(long, default_value = "riner")]
        method: String,
    },
    /// Simulate one instance and run every ablation cell on it.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
    },
}

fn parse_encoding(s: &str) -> Result<EncodingKind, String> {
    s.parse().map_err(|e: riner_core::Error| e.to_string())
}

fn overrides(common: &Common, ablation: Option<&AblationFlags>) -> Overrides {
    let a = ablation.cloned().unwrap_or_default();
    Overrides {
        seed: common.seed,
        output_dir: common.output_dir.clone(),
        disable_alpha: a.disable_alpha,
        disable_beta: a.disable_beta,
        lambda: a.lambda,
        encoding: a.encoding,
    }
}

fn load(common: &Common, ablation: Option<&AblationFlags>) -> anyhow::Result<RunConfig> {
    RunConfig::load(common.config.as_deref())?.resolve(&overrides(common, ablation))
}

/// Creates the output directory and records the resolved config and version.
fn prepare_output(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = config.output_dir()?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    fs::write(dir.join("VERSION"), format!("riner {}\n", env!("CARGO_PKG_VERSION")))?;
    Ok(dir)
}

fn write_image_with_preview(dir: &Path, stem: &str, image: &ImageGrid, window: Option<(f64, f64)>) -> anyhow::Result<()> {
    io::write_image(&dir.join(format!("{stem}.img")), image)?;
    io::write_preview(&dir.join(format!("{stem}.png")), image, window)?;
    Ok(())
}

fn simulate(config: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_output(config)?;
    let geometry = config.geometry.resolve()?;
    let scan = simulate_scan(&geometry, &config.simulation)?;
    write_image_with_preview(&dir, "phantom", &scan.phantom, None)?;
    io::write_sinogram(&dir.join("clean.sino"), &scan.clean)?;
    io::write_sinogram(&dir.join("corrupted.sino"), &scan.corrupted)?;
    io::write_profile(&dir.join("profile.csv"), &scan.profile)?;
    eprintln!(
        "simulated {} views x {} detectors, {} dead detector(s), into {}",
        geometry.n_views,
        geometry.detector_count(),
        scan.corrupted.invalid_detectors().len(),
        dir.display()
    );
    Ok(())
}

fn run_riner(sino: &Sinogram, training: &TrainConfig, dir: Option<&Path>) -> anyhow::Result<TrainOutcome> {
    let outcome = train_with::<f32, _>(sino, training, |event| {
        match event {
            TrainEvent::Progress { iteration, mean_loss, lr } => {
                eprintln!("iter {iteration:>6}  loss {mean_loss:.5}  lr {lr:.3e}");
            }
            TrainEvent::Checkpoint { iteration, trainer } => {
                if let Some(dir) = dir {
                    let path = dir.join(format!("checkpoint-{iteration:06}.ckpt"));
                    save_checkpoint(&path, iteration, &trainer.field, &trainer.detectors)?;
                }
            }
        }
        Ok(())
    })?;
    Ok(outcome)
}

fn reconstruct(config: &RunConfig, method: Method) -> anyhow::Result<()> {
    let input = match &config.paths.input {
        Some(p) => p.clone(),
        None => bail!("no input sinogram: pass --input or set paths.input"),
    };
    let sino = io::read_sinogram(&input).with_context(|| format!("reading {}", input.display()))?;
    let reference = config.paths.reference.as_deref().map(io::read_image).transpose()?;
    let window = reference.as_ref().map(|r| (r.min(), r.max()));
    let dir = prepare_output(config)?;
    let image = match method {
        Method::Fbp => fbp_reconstruct(&sino, Window::RamLak)?,
        Method::Riner => {
            let outcome = run_riner(&sino, &config.training, Some(&dir))?;
            io::write_loss_csv(&dir.join("loss.csv"), &outcome.history)?;
            io::write_detectors(&dir.join("detectors.csv"), &outcome.detectors)?;
            extract_image(&outcome.field, &sino.geometry)?
        }
    };
    write_image_with_preview(&dir, "reconstruction", &image, window)?;
    eprintln!("wrote reconstruction to {}", dir.display());
    Ok(())
}

fn evaluate(
    config: &RunConfig,
    reconstruction: &Path,
    reference: &Path,
    profile: Option<&Path>,
    detectors: Option<&Path>,
    method: &str,
) -> anyhow::Result<()> {
    let test = io::read_image(reconstruction).with_context(|| format!("reading {}", reconstruction.display()))?;
    let truth = io::read_image(reference).with_context(|| format!("reading {}", reference.display()))?;
    let mut report = EvalReport::evaluate(method, &test, &truth)?;
    if let (Some(p), Some(d)) = (profile, detectors) {
        let profile = io::read_profile(p)?;
        let table = io::read_detectors(d)?;
        report = report.with_recovery_from(&table.alpha, &table.beta, &profile)?;
    }
    if config.paths.output_dir.is_some() {
        let dir = prepare_output(config)?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn ablate(config: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_output(config)?;
    let geometry = config.geometry.resolve()?;
    let scan = simulate_scan(&geometry, &config.simulation)?;
    let base = &config.training;
    let cell = |disable_alpha: bool, disable_beta: bool, lambda: f64| TrainConfig {
        disable_alpha,
        disable_beta,
        lambda,
        ..base.clone()
    };
    let cells = [
        ("physical", "full", cell(false, false, base.lambda)),
        ("physical", "no-beta", cell(false, true, base.lambda)),
        ("physical", "no-alpha", cell(true, false, base.lambda)),
        ("physical", "neither", cell(true, true, base.lambda)),
        ("lambda", "0", cell(false, false, 0.0)),
        ("lambda", "0.01", cell(false, false, 0.01)),
        ("lambda", "1", cell(false, false, 1.0)),
    ];
    let mut csv = String::from("group,variant,psnr_db,ssim,alpha_mae,beta_accuracy\n");
    let mut done: Vec<(TrainConfig, EvalReport)> = Vec::new();
    for (group, variant, training) in cells {
        let report = match done.iter().find(|(c, _)| *c == training) {
            Some((_, r)) => r.clone(),
            None => {
                eprintln!("ablation cell {group}/{variant}");
                let outcome = run_riner(&scan.corrupted, &training, None)?;
                let image = extract_image(&outcome.field, &geometry)?;
                let r = EvalReport::evaluate(variant, &image, &scan.phantom)?
                    .with_recovery(&outcome.detectors, &scan.profile)?;
                done.push((training, r.clone()));
                r
            }
        };
        writeln!(
            csv,
            "{group},{variant},{:.6},{:.6},{:.6},{:.6}",
            report.psnr,
            report.ssim,
            report.alpha_mae.unwrap_or(f64::NAN),
            report.beta_accuracy.unwrap_or(f64::NAN)
        )?;
    }
    fs::write(dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { common } => simulate(&load(&common, None)?),
        Command::Reconstruct {
            common,
            ablation,
            method,
            input,
            reference,
        } => {
            let mut config = load(&common, Some(&ablation))?;
            if input.is_some() {
                config.paths.input = input;
            }
            if reference.is_some() {
                config.paths.reference = reference;
            }
            reconstruct(&config, method)
        }
        Command::Evaluate {
            common,
            reconstruction,
            reference,
            profile,
            detectors,
            method,
        } => {
            let config = load(&common, None)?;
            evaluate(
                &config,
                &reconstruction,
                &reference,
                profile.as_deref(),
                detectors.as_deref(),
                &method,
            )
        }
        Command::Ablate { common, ablation } => ablate(&load(&common, Some(&ablation))?),
    }
}

/// 2 for numerical failures during a run, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<riner_core::Error>(), Some(riner_core::Error::NonFinite { .. })));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
