use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fadpnet_core::net::Fadpnet;
use fadpnet_core::nn::ParamStore;
use fadpnet_core::profile::params_by_prefix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fadpnet::checkpoint::Checkpoint;
use fadpnet::config::Config;
use fadpnet::data::{load_split, write_synthetic, Manifest, Sample, Split};
use fadpnet::harness::{self, RunOutputs, Trainer};
use fadpnet::latency::measure_latency;
use fadpnet::spectrum::write_band_csv;
use fadpnet::HarnessError;

/// Frequency-aware dual-path face super-resolution.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML configuration file.
    config: PathBuf,
    /// Override a config key, e.g. `--set model.base_channels=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the manifest's train split.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-image PSNR/SSIM of a checkpoint on one split.
    Eval {
        #[arg(long, required_unless_present = "bicubic")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score the upsampled degraded input itself.
        #[arg(long)]
        bicubic: bool,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve image files.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "sr_out")]
        out_dir: PathBuf,
        /// Apply the training degradation to each input first.
        #[arg(long)]
        degrade: bool,
        #[arg(long, default_value = "_sr")]
        suffix: String,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Parameters, FLOPs and forward latency.
    Profile {
        /// Use these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also print parameter counts per top-level component.
        #[arg(long)]
        breakdown: bool,
    },
    /// Band-energy shares of the low- and high-frequency stack outputs.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `spectrum.level`.
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the baseline and each ablation variant under one budget.
    Ablate {
        /// Comma-separated ablation flags.
        #[arg(long, value_delimiter = ',', required = true)]
        flags: Vec<String>,
        /// Split used for the score columns.
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write procedurally drawn faces and a manifest (for smoke tests).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
        /// Image side; defaults to `data.size`.
        #[arg(long)]
        size: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<HarnessError>()).map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn out_writer(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| HarnessError::io(p, e))?))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn samples(cfg: &Config, split: Split) -> anyhow::Result<Vec<Sample>> {
    let manifest = Manifest::load(&cfg.data.manifest_path(), &cfg.data.root, cfg.train.seed)?;
    let (s, skipped) = load_split(&manifest, split, cfg.data.size, cfg.data.scale)?;
    for why in &skipped {
        eprintln!("skipped {why}");
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(&cli.config, &cli.set)?;
    match cli.cmd {
        Cmd::Train { resume } => {
            let mut trainer = match resume {
                Some(p) => Trainer::from_checkpoint(Checkpoint::load(&p)?)
                    .with_context(|| format!("resuming from {}", p.display()))?,
                None => Trainer::new(&cfg.model, &cfg.train)?,
            };
            let train = samples(&cfg, Split::Train)?;
            let val = samples(&cfg, Split::Val)?;
            let dir = trainer.train.out_dir.clone();
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| HarnessError::io(&dir, e))?;
            let open = |name: &str| -> anyhow::Result<BufWriter<File>> {
                let p = dir.join(name);
                let f = std::fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| HarnessError::io(&p, e))?;
                Ok(BufWriter::new(f))
            };
            let mut log = Tee(open("train_log.csv")?, std::io::stdout());
            let mut val_log = open("val_log.csv")?;
            let ck_dir = dir.join("checkpoints");
            harness::run_training(
                &mut trainer,
                &train,
                &val,
                RunOutputs { log: &mut log, val_log: Some(&mut val_log), checkpoint_dir: Some(&ck_dir) },
            )?;
            val_log.flush()?;
        }
        Cmd::Eval { checkpoint, split, bicubic, out } => {
            let data = samples(&cfg, split)?;
            let (rows, summary) = if bicubic {
                harness::evaluate_with(&data, |x| Ok(x.clone()))?
            } else {
                let p = checkpoint.expect("clap requires a checkpoint without --bicubic");
                let ck = Checkpoint::load(&p)?;
                harness::evaluate(&ck.network()?, &ck.params, &data)?
            };
            harness::write_metrics_csv(out_writer(out.as_deref())?, &rows)?;
            eprint!("{}", summary.to_text());
        }
        Cmd::Infer { checkpoint, out_dir, degrade, suffix, inputs } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let degrade = degrade.then_some((cfg.data.size, cfg.data.scale));
            let outcome = harness::infer(&ck.network()?, &ck.params, &inputs, &out_dir, degrade, &suffix)?;
            for p in &outcome.written {
                println!("{}", p.display());
            }
            for (p, why) in &outcome.failed {
                eprintln!("failed {}: {why}", p.display());
            }
            if outcome.written.is_empty() {
                return Err(HarnessError::Data("no input could be processed".into()).into());
            }
        }
        Cmd::Profile { checkpoint, breakdown } => {
            let (net, params) = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    (ck.network()?, ck.params)
                }
                None => Fadpnet::init::<f32>(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?,
            };
            let p = &cfg.profile;
            let report = measure_latency(&net, &params, p.runs, p.batch, (p.size, p.size))?;
            print!("{}", report.to_text());
            if breakdown {
                print_breakdown(&params);
            }
        }
        Cmd::Spectrum { checkpoint, level, out } => {
            let split: Split = cfg.spectrum.split.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = samples(&cfg, split)?;
            let level = level.unwrap_or(cfg.spectrum.level);
            let rows = harness::spectrum_report(&ck.network()?, &ck.params, &data, level, &cfg.spectrum.bands)?;
            write_band_csv(out_writer(out.as_deref())?, &rows)?;
        }
        Cmd::Ablate { flags, split, out } => {
            // Reject bad flags before loading or training anything.
            harness::ablation_variants(&cfg.model, &flags)?;
            let train = samples(&cfg, Split::Train)?;
            let eval = if split == Split::Train { train.clone() } else { samples(&cfg, split)? };
            let hw = (cfg.data.size, cfg.data.size);
            let rows = harness::ablate(&cfg.model, &flags, &cfg.train, &train, &eval, hw, |name, r| {
                eprintln!("{name},{}", r.to_line());
            })?;
            harness::write_ablation_csv(out_writer(out.as_deref())?, &rows)?;
        }
        Cmd::Synth { out_dir, train, val, test, size } => {
            let size = size.unwrap_or(cfg.data.size);
            let m = write_synthetic(&out_dir, [(Split::Train, train), (Split::Val, val), (Split::Test, test)], size, cfg.train.seed)?;
            println!("wrote {} images and {}", m.records.len(), out_dir.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn print_breakdown(params: &ParamStore<f32>) {
    for (name, n) in params_by_prefix(params, 1) {
        println!("params.{name} = {n}");
    }
}

/// Writes every line to a file and to the console.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}
