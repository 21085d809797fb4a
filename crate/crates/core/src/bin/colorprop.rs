use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use colorprop::global::extractor_from_spec;
use colorprop::io::{read_rgb, read_sequence_gray, read_sequence_rgb, write_sequence};
use colorprop::pipeline::{evaluate, propagate, Mode, Models};
use colorprop::synth::{generate, write_benchmark, BenchmarkSpec};
use colorprop::train::{load_dataset, precompute_intermediates, train_fusion_stage, train_warp_stage, Stage, TrainConfig};
use colorprop::{Error, Result};

#[derive(Parser)]
#[command(name = "colorprop", version, about = "Propagate the colors of a reference frame through a grayscale video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Color a gray frame sequence from the colors of its first frame.
    Propagate {
        /// Directory of gray frames.
        #[arg(long)]
        gray: PathBuf,
        /// Colored version of the first frame.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        warp_ckpt: Option<PathBuf>,
        #[arg(long)]
        fusion_ckpt: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// `builtin` or `import:DIR`.
        #[arg(long, default_value = "builtin")]
        extractor: String,
    },
    /// Train the warp or fusion network.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Directory of color frame sequences.
        #[arg(long)]
        data: PathBuf,
        /// Intermediate cache, needed by the fusion stage.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Warp checkpoint the cache was built with.
        #[arg(long)]
        warp_ckpt: Option<PathBuf>,
    },
    /// Fill the intermediate cache used by fusion training.
    Precompute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        warp_ckpt: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value = "builtin")]
        extractor: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Lab PSNR of predicted frames against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Per-frame CSV; the summary goes next to it as `<stem>.summary.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic benchmark.
    GenBenchmark {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Propagate {
            gray,
            reference,
            warp_ckpt,
            fusion_ckpt,
            mode,
            out,
            extractor,
        } => {
            let extractor = extractor_from_spec(&extractor)?;
            let models = Models::load(warp_ckpt.as_deref(), fusion_ckpt.as_deref(), extractor)?;
            let frames = read_sequence_gray(&gray)?;
            let i1 = read_rgb(&reference)?;
            let run = propagate(Arc::new(models), mode, &frames, &i1)?;
            for (k, t) in run.timings.iter().enumerate().skip(1) {
                log::info!(
                    "frame {}: warp {:.2} ms, match {:.2} ms, fuse {:.2} ms",
                    k + 1,
                    t.warp.as_secs_f64() * 1e3,
                    t.matching.as_secs_f64() * 1e3,
                    t.fusion.as_secs_f64() * 1e3
                );
            }
            write_sequence(&out, &run.frames)?;
            eprintln!("wrote {} frames to {}", run.frames.len(), out.display());
        }
        Command::Train {
            stage,
            data,
            cache,
            config,
            out,
            warp_ckpt,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::read(p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = stage;
            if warp_ckpt.is_some() {
                cfg.warp_checkpoint = warp_ckpt;
            }
            let ds = load_dataset(&data)?;
            match stage {
                Stage::Warp => {
                    let report = train_warp_stage(&ds, &cfg, &out)?;
                    eprintln!(
                        "warp training finished: final loss {:.6}, checkpoint {}",
                        report.losses().last().copied().unwrap_or(f64::NAN),
                        out.display()
                    );
                }
                Stage::Fusion => {
                    let cache = cache.ok_or_else(|| Error::Config("fusion training needs --cache".into()))?;
                    let report = train_fusion_stage(&ds, &cache, &cfg, &out)?;
                    eprintln!(
                        "fusion training finished: final loss {:.6}, neutral loss {:.6}, checkpoint {}",
                        report.losses().last().copied().unwrap_or(f64::NAN),
                        report.neutral_loss,
                        out.display()
                    );
                }
            }
        }
        Command::Precompute {
            data,
            warp_ckpt,
            cache,
            extractor,
            seed,
        } => {
            let ds = load_dataset(&data)?;
            let report = precompute_intermediates(&ds, &warp_ckpt, extractor_from_spec(&extractor)?, &cache, seed)?;
            eprintln!("computed {} frame pairs, reused {}", report.computed, report.reused);
        }
        Command::Evaluate { pred, gt, out } => {
            let report = evaluate(&read_sequence_rgb(&pred)?, &read_sequence_rgb(&gt)?, &label_of(&pred))?;
            let summary = report.write(&out)?;
            for (n, v) in &report.averages {
                println!("first {n}: {v:.3} dB");
            }
            eprintln!("wrote {} and {}", out.display(), summary.display());
        }
        Command::GenBenchmark { spec, seed, out } => {
            let spec = match &spec {
                Some(p) => BenchmarkSpec::read(p)?,
                None => BenchmarkSpec::default(),
            };
            let seqs = generate(&spec, seed);
            write_benchmark(&out, &seqs)?;
            eprintln!("wrote {} sequences to {}", seqs.len(), out.display());
        }
    }
    Ok(())
}

fn label_of(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
