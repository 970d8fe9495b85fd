use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dfpn::checkpoint::{load_checkpoint, Checkpoint};
use dfpn::config::resolve;
use dfpn::evaluate::{evaluate_sequence, thread_count, write_report};
use dfpn::frames::{load_sequence, read_frame, sequence_dirs, to_gray, write_pgm, write_synthetic, SyntheticFamily};
use dfpn::train::{run_training, TrainOptions};
use dfpn::{Error, Result};
use dfpn_core::data::{ClipSource, FrameSequence};
use dfpn_core::eval::DfpnPredictor;
use dfpn_core::gradcheck::{model_suite, suite_passed, unit_suite, CheckResult};
use dfpn_core::model::{count_parameters, init_parameters, layer_table, predict};
use dfpn_core::optim::TrainState;
use dfpn_core::{Shape, Tensor4};

#[derive(Parser)]
#[command(name = "dfpn", version, about = "Deformable frame prediction network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Unit,
    Model,
}

#[derive(Subcommand)]
enum Command {
    /// Train on frame directories or synthetic motion.
    Train {
        /// A sequence directory, or a directory of sequence directories.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data_dir: Option<PathBuf>,
        /// Synthetic family, e.g. `pattern=noise,vx=1,frames=30,size=64x64,count=16`.
        #[arg(long)]
        synthetic: Option<String>,
        /// Preset (default, small, tiny) or TOML file.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 1000)]
        iters: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Square crop size; defaults to 96 or the smallest frame side.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
        /// Loss log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint (its config wins over --config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the next frame from N frame files, oldest first.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame PSNR of a sequence against the copy-last baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seq_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "unit")]
        scale: Scale,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Parameter count and layer table of a configuration.
    Info {
        #[arg(long, default_value = "default")]
        config: String,
    },
    /// Write a synthetic corpus as PGM sequence directories.
    Synth {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn info(config: &str) -> Result<()> {
    let cfg = resolve(config)?;
    println!("{cfg:?}");
    println!("{:<40} {:>6} {:>6} {:>3} {:>10}", "layer", "c_out", "c_in", "k", "values");
    for l in layer_table(&cfg) {
        println!("{:<40} {:>6} {:>6} {:>3} {:>10}", l.name, l.c_out, l.c_in, l.kernel, l.num_values());
    }
    println!("total parameters: {}", count_parameters(&cfg));
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> bool {
    for r in results {
        println!(
            "{:<40} max_rel_err {:.3e}  checked {:>5}  skipped {:>3}  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let ok = suite_passed(results);
    println!("gradient check {}", if ok { "passed" } else { "FAILED" });
    ok
}

fn load_sequences(root: &Path) -> Result<Vec<FrameSequence<f32>>> {
    sequence_dirs(root)?.iter().map(|d| load_sequence(d)).collect()
}

#[allow(clippy::too_many_arguments)]
fn train(
    data_dir: Option<PathBuf>,
    synthetic: Option<String>,
    config: &str,
    iters: u64,
    batch: usize,
    crop: Option<usize>,
    seed: u64,
    lr: f64,
    out: Option<PathBuf>,
    checkpoint_every: u64,
    log: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let seqs = match (&data_dir, &synthetic) {
        (Some(d), _) => load_sequences(d)?,
        (None, Some(s)) => SyntheticFamily::parse(s)?.generate()?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let smallest = seqs
        .iter()
        .map(|s| s.height().min(s.width()))
        .min()
        .ok_or(dfpn_core::Error::EmptyDataset)?;
    let crop = crop.unwrap_or(smallest.min(96));
    let (cfg, mut params, mut state) = match &resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let state = match ck.state {
                Some(s) => s,
                None => TrainState::new(&ck.cfg, lr)?,
            };
            (ck.cfg, ck.params, state)
        }
        None => {
            let cfg = resolve(config)?;
            (cfg, init_parameters(&cfg, seed)?, TrainState::new(&cfg, lr)?)
        }
    };
    let opts = TrainOptions {
        iters,
        batch_size: batch,
        crop: (crop, crop),
        seed,
        checkpoint_every,
        out_dir: out,
        log,
    };
    let summary = run_training(&cfg, &ClipSource::Sequences(seqs), &mut params, &mut state, &opts)?;
    if let Some(last) = summary.rows.last() {
        println!("iteration {} loss {:.6}", last.iteration, last.loss);
    }
    for p in &summary.checkpoints {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn predict_cmd(checkpoint: &Path, frames: &[PathBuf], out: &Path) -> Result<()> {
    let Checkpoint { cfg, params, .. } = load_checkpoint(checkpoint)?;
    if frames.len() != cfg.n_inputs {
        return Err(dfpn_core::Error::FrameCount {
            expected: cfg.n_inputs,
            found: frames.len(),
        }
        .into());
    }
    let mut data = Vec::new();
    let mut size = None;
    for f in frames {
        let img = read_frame(f)?;
        if size.is_some_and(|s| s != (img.h, img.w)) {
            return Err(Error::Format {
                path: f.clone(),
                msg: "frame size differs from the first frame".into(),
            });
        }
        size = Some((img.h, img.w));
        data.extend(img.data.iter().map(|&v| v as f32 / 255.0));
    }
    let (h, w) = size.expect("at least one frame");
    let x = Tensor4::from_vec(Shape::new(1, frames.len(), h, w), data)?;
    let y = predict(&cfg, &params, &x)?;
    write_pgm(out, &to_gray(h, w, y.data()))
}

fn eval_cmd(checkpoint: &Path, seq_dir: &Path, report: &Path) -> Result<()> {
    let Checkpoint { cfg, params, .. } = load_checkpoint(checkpoint)?;
    let seq = load_sequence::<f32>(seq_dir)?;
    let predictor = DfpnPredictor { cfg, params };
    let r = evaluate_sequence(&seq, &predictor, thread_count())?;
    write_report(report, &r)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "frames {}  mean psnr {} dB  mean baseline {} dB  capped {}",
        r.rows.len(),
        fmt(r.mean_psnr_db),
        fmt(r.mean_baseline_psnr_db),
        r.capped.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            data_dir,
            synthetic,
            config,
            iters,
            batch,
            crop,
            seed,
            lr,
            out,
            checkpoint_every,
            log,
            resume,
        } => train(
            data_dir,
            synthetic,
            &config,
            iters,
            batch,
            crop,
            seed,
            lr,
            out,
            checkpoint_every,
            log,
            resume,
        )?,
        Command::Predict { checkpoint, frames, out } => predict_cmd(&checkpoint, &frames, &out)?,
        Command::Eval {
            checkpoint,
            seq_dir,
            report,
        } => eval_cmd(&checkpoint, &seq_dir, &report)?,
        Command::Gradcheck { scale, seed } => {
            let results = match scale {
                Scale::Unit => unit_suite(seed)?,
                Scale::Model => model_suite(seed, None)?,
            };
            return Ok(print_checks(&results));
        }
        Command::Info { config } => info(&config)?,
        Command::Synth { spec, out } => {
            for d in write_synthetic(&out, &SyntheticFamily::parse(&spec)?)? {
                println!("wrote {}", d.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("dfpn: {e}");
            ExitCode::FAILURE
        }
    }
}
