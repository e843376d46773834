use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scanet::ablate;
use scanet::arch::Checkpoint;
use scanet::config::FileConfig;
use scanet::data::{
    load_image, load_pair, save_image, scan_pair_dir, synthetic_dataset, ImagePair, NoiseSpec,
};
use scanet::error::Result;
use scanet::gradcheck::full_audit;
use scanet::loss::psnr;
use scanet::ops;
use scanet::profile::{benchmark_forward, count_costs};
use scanet::tensor::{Shape, Tensor};
use scanet::train::{
    denoise_image, evaluate, log_csv_line, resume, train, write_eval_csv, StepLog, LOG_HEADER,
};

#[derive(Parser)]
#[command(name = "scanet", about = "Dual-branch attention denoiser: train, run, profile")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file covering [network] and [train]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: "paper" or "desk"
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FileConfig> {
        match &self.config {
            Some(path) => FileConfig::load(path),
            None => FileConfig::preset(&self.preset),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a paired dataset or synthetic data
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root with noisy/ and clean/ PNG subdirectories
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Train on procedural patches with AWGN of this sigma (0..1 units)
        #[arg(long)]
        synthetic: Option<f64>,
        /// Number of synthetic patches
        #[arg(long, default_value_t = 64)]
        synthetic_count: usize,
        /// Synthetic patch side length
        #[arg(long, default_value_t = 64)]
        synthetic_hw: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        /// Hard cap on optimization steps (0 = epochs decide)
        #[arg(long, default_value_t = 0)]
        steps: u64,
        /// Directory for per-epoch checkpoints and the final one
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Training log CSV path (stdout when omitted)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing fresh
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Run a trained model on one PNG
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the normalized gradient magnitude map of a PNG
    Gradmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint on a paired dataset (PSNR/SSIM per image + mean)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic parameter/MAC/FLOP report for a configuration
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input size as HxW
        #[arg(long, default_value = "256x256")]
        hw: String,
    },
    /// Wall-clock forward benchmark (median ± MAD)
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "64x64")]
        hw: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Full finite-difference gradient audit; nonzero exit on any failure
    Gradcheck,
    /// Toggle-grid ablation at desk scale, CSV output
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training steps per grid row
        #[arg(long, default_value_t = 50)]
        steps: u64,
        /// Input size for the MAC count and runtime, as HxW
        #[arg(long, default_value = "64x64")]
        hw: String,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let err = || {
        scanet::error::Error::InvalidInput(format!("expected HxW like 256x256, got {s:?}"))
    };
    let (h, w) = s.split_once('x').ok_or_else(err)?;
    Ok((h.parse().map_err(|_| err())?, w.parse().map_err(|_| err())?))
}

fn load_dataset(root: &std::path::Path) -> Result<Vec<ImagePair>> {
    scan_pair_dir(root)?.iter().map(load_pair).collect()
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            cfg,
            data,
            synthetic,
            synthetic_count,
            synthetic_hw,
            seed,
            epochs,
            steps,
            out_dir,
            log,
            resume_from,
        } => {
            let mut file_cfg = cfg.resolve()?;
            if let Some(s) = seed {
                file_cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                file_cfg.train.epochs = e;
            }
            let dataset = match (&data, synthetic) {
                (Some(root), _) => load_dataset(root)?,
                (None, sigma) => {
                    let sigma = sigma.unwrap_or(25.0 / 255.0);
                    eprintln!(
                        "no --data given: using {synthetic_count} synthetic \
                         {synthetic_hw}x{synthetic_hw} patches, sigma {sigma:.4}"
                    );
                    synthetic_dataset(
                        synthetic_count,
                        synthetic_hw,
                        &NoiseSpec::gaussian(sigma, file_cfg.train.seed),
                        file_cfg.train.seed,
                    )
                }
            };
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir)?;
            }
            let mut log_sink = sink(&log)?;
            writeln!(log_sink, "{LOG_HEADER}")?;
            let mut on_step = |s: &StepLog| {
                let _ = writeln!(log_sink, "{}", log_csv_line(s));
            };
            let outcome = if let Some(ckpt_path) = &resume_from {
                let ckpt = Checkpoint::load(ckpt_path)?;
                resume(
                    &ckpt,
                    &file_cfg.train,
                    &dataset,
                    out_dir.as_deref(),
                    steps,
                    Some(&mut on_step),
                )?
            } else {
                train(
                    &file_cfg.network,
                    &file_cfg.train,
                    &dataset,
                    out_dir.as_deref(),
                    steps,
                    Some(&mut on_step),
                )?
            };
            if let Some(dir) = &out_dir {
                let path = dir.join("final.ckpt");
                outcome.final_checkpoint.save(&path)?;
                eprintln!("final checkpoint: {}", path.display());
            }
            if let Some(last) = outcome.log.last() {
                eprintln!(
                    "done: {} steps, last total loss {:.6}, last PSNR {:.2} dB",
                    last.step, last.report.total, last.psnr
                );
            }
        }
        Command::Denoise { checkpoint, input, output } => {
            let model = Checkpoint::load(&checkpoint)?.restore_model()?;
            let noisy = load_image(&input)?;
            let out = denoise_image(&model, &noisy)?;
            save_image(&out, &output)?;
            eprintln!("wrote {}", output.display());
        }
        Command::Gradmap { input, output } => {
            let img = load_image(&input)?;
            let g = ops::grad_map(&img);
            let gs = g.shape();
            let peak = g.data().iter().cloned().fold(0f32, f32::max);
            let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            // replicate the single channel into RGB for PNG output
            let out_shape = Shape::new(1, 3, gs.h, gs.w);
            let mut data = vec![0f32; out_shape.numel()];
            for c in 0..3 {
                for i in 0..gs.h {
                    for j in 0..gs.w {
                        data[out_shape.idx(0, c, i, j)] = g.data()[gs.idx(0, 0, i, j)] * scale;
                    }
                }
            }
            save_image(&Tensor::from_vec(out_shape, data), &output)?;
            eprintln!("wrote {}", output.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let model = Checkpoint::load(&checkpoint)?.restore_model()?;
            let dataset = load_dataset(&data)?;
            let rows = evaluate(&model, &dataset)?;
            write_eval_csv(&rows, sink(&out)?)?;
        }
        Command::Flops { cfg, hw } => {
            let file_cfg = cfg.resolve()?;
            let report = count_costs(&file_cfg.network, parse_hw(&hw)?)?;
            println!("{report}");
        }
        Command::Bench { cfg, hw, repeats } => {
            let file_cfg = cfg.resolve()?;
            let result = benchmark_forward(&file_cfg.network, parse_hw(&hw)?, repeats)?;
            println!("{result}");
        }
        Command::Gradcheck => {
            let reports = full_audit();
            let mut failed = false;
            for r in &reports {
                println!("{r}");
                failed |= !r.pass;
            }
            if failed {
                eprintln!("gradient audit FAILED");
                return Ok(ExitCode::from(1));
            }
            println!("all {} gradient audits passed", reports.len());
        }
        Command::Ablate { cfg, out, steps, hw } => {
            let file_cfg = cfg.resolve()?;
            let mut w = sink(&out)?;
            writeln!(w, "{}", ablate::ABLATE_HEADER)?;
            let mut progress = |row: &ablate::AblateRow| {
                let _ = writeln!(w, "{}", ablate::ablate_csv_line(row));
                eprintln!("{}", ablate::ablate_csv_line(row));
            };
            ablate::run(
                &file_cfg.network,
                &file_cfg.train,
                steps,
                parse_hw(&hw)?,
                32,
                Some(&mut progress),
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // baseline sanity for noisy-vs-clean framing in logs
    debug_assert!(psnr(&[0.5], &[0.5]).is_infinite());
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
