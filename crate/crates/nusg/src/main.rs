//! `nusg` — nested U-structure eye segmentation toolkit.

use clap::{Parser, Subcommand};
use nusg::config::RunConfig;
use nusg::{bench, checkpoint, data, eval, infer, train, Error};
use nusg_core::gradcheck;
use nusg_core::model::{count_flops, Arch, Model};
use nusg_core::tensor::FLOP_CONVENTION;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nusg", version, about = "Nested U-structure eye segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint (or external predictions) over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture id (required with --checkpoint).
        #[arg(long)]
        arch: Option<String>,
        /// Dataset root (images/ + masks/).
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path; a .json mirror is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Bypass mode: score <stem>.png grayscale maps from this
        /// directory instead of running a model.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 320)]
        size: usize,
    },
    /// Segment one image and write the probability map as a PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Binarize the map at this threshold (output becomes 0/255).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 320)]
        size: usize,
    },
    /// Print parameter and flop accounting for an architecture.
    Summary {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 320)]
        size: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, hide = true, default_value_t = false)]
        include_negative_control: bool,
    },
    /// Measure single-image inference time (median of the timed runs).
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 320)]
        size: usize,
    },
}

fn check_size(size: usize) -> Result<(), Error> {
    if size < 64 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "--size {size} must be at least 64 and divisible by 32"
        )));
    }
    Ok(())
}

fn load_model(arch: &str, ckpt: &std::path::Path) -> Result<Model<f32>, Error> {
    let arch = Arch::parse(arch)?;
    let mut model = Model::<f32>::build(arch, 0)?;
    checkpoint::load_into(ckpt, model.store_mut())?;
    Ok(model)
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train::train(&cfg)?;
            println!(
                "trained {} for {} steps; checkpoint: {}; log: {}",
                cfg.arch.id(),
                summary.log.steps.len(),
                summary.checkpoint_path.display(),
                summary.log_path.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            arch,
            data: root,
            out,
            pred_dir,
            size,
        } => {
            check_size(size)?;
            let (records, _) = data::scan_dataset(&root)?;
            let (name, mut report) = match (&checkpoint, &pred_dir) {
                (Some(ckpt), None) => {
                    let arch = arch.ok_or_else(|| {
                        Error::Config("--arch is required with --checkpoint".into())
                    })?;
                    let model = load_model(&arch, ckpt)?;
                    let mut report = eval::evaluate_model(&model, &records, size)?;
                    report.params_mb = Some(model.param_megabytes());
                    (model.arch().id().to_string(), report)
                }
                (None, Some(dir)) => {
                    let report = eval::evaluate_bypass(dir, &records)?;
                    ("bypass".to_string(), report)
                }
                _ => {
                    return Err(Error::Config(
                        "pass exactly one of --checkpoint or --pred-dir".into(),
                    ))
                }
            };
            report.inference_s = None;
            eval::write_report(&out, &name, &report)?;
            println!(
                "{name}: recall {:.2}% precision {:.2}% miou {:.2}% mae {:.4} f1 {:.2}% -> {}",
                report.recall_pct,
                report.precision_pct,
                report.miou_pct,
                report.mae,
                report.f1_pct,
                out.display()
            );
            Ok(())
        }
        Cmd::Infer {
            checkpoint,
            arch,
            image,
            out,
            threshold,
            size,
        } => {
            check_size(size)?;
            let model = load_model(&arch, &checkpoint)?;
            infer::infer_to_png(&model, &image, &out, size, threshold)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Summary { arch, size } => {
            check_size(size)?;
            let arch = Arch::parse(&arch)?;
            let model = Model::<f32>::build(arch, 0)?;
            let flops = count_flops(&model, 1, size, size)?;
            println!("arch: {}", arch.id());
            println!(
                "parameters: {} ({:.2} MB at 32-bit, MB = count*4/2^20)",
                model.param_count(),
                model.param_megabytes()
            );
            println!(
                "cost @ 1x3x{size}x{size}: {:.3} GMac / {:.3} GFLOP",
                flops.gmacs(),
                flops.gflops()
            );
            println!("convention: {FLOP_CONVENTION}");
            Ok(())
        }
        Cmd::Gradcheck {
            include_negative_control,
        } => {
            let entries = gradcheck::run_suite(include_negative_control)?;
            let mut ok = true;
            for e in &entries {
                println!(
                    "{:<24} max rel err {:.3e}  {}",
                    e.name,
                    e.max_rel_err,
                    if e.passed() { "ok" } else { "FAIL" }
                );
                ok &= e.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Train("gradient check failed".into()))
            }
        }
        Cmd::Bench {
            checkpoint,
            arch,
            runs,
            warmup,
            size,
        } => {
            check_size(size)?;
            if runs < 5 {
                return Err(Error::Config(format!(
                    "--runs {runs} too small: need at least 5 timed runs"
                )));
            }
            let model = load_model(&arch, &checkpoint)?;
            let r = bench::bench_inference(&model, size, warmup, runs)?;
            println!(
                "{}: median {:.4} s/image over {} runs (warmup {}) at {size}x{size}",
                model.arch().id(),
                r.seconds_per_image,
                r.runs,
                r.warmup
            );
            println!("hardware: {}", r.hardware);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("NUSG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
