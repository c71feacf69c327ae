//! `pairseg` command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pairseg::backbone::ArchConfig;
use pairseg::datamodel::{load_manifest, parse_config, DatasetSplit, RunConfig};
use pairseg::evalreport::{ablation_layers, evaluate, kde_report, render_report, sweep_alpha};
use pairseg::synthdata::{generate_dataset, RoleCounts, SynthSpec};
use pairseg::trainer::{
    arch_for, load_checkpoint, pretrain_csv, pretrain_with_log, resume_selftrain, run_selftrain,
    save_checkpoint, train, TrainState,
};

#[derive(Parser)]
#[command(name = "pairseg", version, about = "Semi-supervised segmentation with copy-paste mixing and graph alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file, or a directory containing `manifest.txt`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable: `--set alpha=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ellipse dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long, default_value_t = 1)]
        shapes_min: usize,
        #[arg(long, default_value_t = 2)]
        shapes_max: usize,
        /// Comma-separated mean intensity per class.
        #[arg(long, value_delimiter = ',')]
        means: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.1)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        shift_delta: f64,
        #[arg(long, default_value_t = 4)]
        labeled: usize,
        #[arg(long, default_value_t = 28)]
        unlabeled: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 8)]
        test: usize,
    },
    /// Supervised teacher pre-training.
    Pretrain(RunArgs),
    /// Self-training from a pre-trained checkpoint, or resume a run.
    Selftrain {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory holding the pre-trained teacher.
        #[arg(long, conflicts_with = "resume")]
        teacher: Option<PathBuf>,
        /// Checkpoint directory of an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pre-training followed by self-training, then test evaluation.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test pool.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `student` or `teacher`.
        #[arg(long, default_value = "student")]
        network: String,
    },
    /// KDE curves of predictions on labeled vs unlabeled pools.
    Kde {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "student")]
        network: String,
    },
    /// Train and test once per tap layer.
    AblateLayers(RunArgs),
    /// Train and test once per alpha.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1")]
        values: Vec<f64>,
    },
    /// Markdown summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Output file (default `<run>/report.md`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

fn load(args: &RunArgs) -> Result<(RunConfig, DatasetSplit, PathBuf)> {
    let mut overrides = Vec::new();
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override '{o}' is not KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &args.out {
        overrides.push(("out_dir".into(), o.display().to_string()));
    }
    let cfg = parse_config(args.config.as_deref(), &overrides)?;
    let split = load_manifest(manifest_path(&args.data))?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok((cfg, split, out))
}

fn network<'a>(state: &'a TrainState, which: &str) -> Result<&'a pairseg::backbone::NetParams> {
    match which {
        "student" => Ok(&state.student),
        "teacher" => Ok(&state.teacher),
        other => bail!("unknown network '{other}', expected student or teacher"),
    }
}

fn write_test_metrics(state: &TrainState, split: &DatasetSplit, arch: &ArchConfig, which: &str, tag: &str, out: &Path) -> Result<()> {
    if split.test.is_empty() {
        log::warn!("no test samples; skipping evaluation");
        return Ok(());
    }
    let r = evaluate(network(state, which)?, arch, &split.test, &state.cfg.digest(), tag)?;
    r.write_csv(out.join("test_metrics.csv"))?;
    println!(
        "test {which}: DICE {:.4}  Jaccard {:.4}  95HD {:.4}  ASD {:.4}",
        r.mean.dice, r.mean.jaccard, r.mean.hd95, r.mean.asd
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            out,
            seed,
            image_size,
            num_classes,
            shapes_min,
            shapes_max,
            means,
            noise_sigma,
            shift_delta,
            labeled,
            unlabeled,
            val,
            test,
        } => {
            let mut spec = SynthSpec::new(num_classes);
            spec.image_size = image_size;
            spec.shapes = (shapes_min, shapes_max);
            if let Some(m) = means {
                spec.intensity_means = m;
            }
            spec.noise_sigma = noise_sigma;
            spec.shift_delta = shift_delta;
            spec.counts = RoleCounts {
                labeled,
                unlabeled,
                val,
                test,
            };
            spec.seed = seed;
            let split = generate_dataset(&spec, &out)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} val, {} test samples to {}",
                split.labeled.len(),
                split.unlabeled.len(),
                split.validation.len(),
                split.test.len(),
                out.display()
            );
        }
        Cmd::Pretrain(args) => {
            let (cfg, split, out) = load(&args)?;
            let (teacher, log) = pretrain_with_log(&cfg, &split)?;
            fs::write(out.join("pretrain_losses.csv"), pretrain_csv(&log))?;
            let arch = arch_for(&cfg, &split)?;
            save_checkpoint(&TrainState::new(&cfg, arch, teacher), out.join("pretrained"))?;
            println!("pre-trained teacher saved to {}", out.join("pretrained").display());
        }
        Cmd::Selftrain { run, teacher, resume } => {
            let (cfg, split, out) = load(&run)?;
            let state = match (teacher, resume) {
                (_, Some(ck)) => resume_selftrain(&ck, &split, Some(&out))?,
                (Some(t), None) => {
                    let pre = load_checkpoint(&t)?;
                    run_selftrain(&cfg, &split, &pre.teacher, Some(&out))?
                }
                (None, None) => bail!("selftrain needs --teacher or --resume"),
            };
            let arch = state.arch.clone();
            write_test_metrics(&state, &split, &arch, "student", "final", &out)?;
        }
        Cmd::Train(args) => {
            let (cfg, split, out) = load(&args)?;
            let state = train(&cfg, &split, Some(&out))?;
            let arch = state.arch.clone();
            write_test_metrics(&state, &split, &arch, "student", "final", &out)?;
        }
        Cmd::Eval {
            run,
            checkpoint,
            network: which,
        } => {
            let (_, split, out) = load(&run)?;
            let state = load_checkpoint(&checkpoint)?;
            let arch = state.arch.clone();
            write_test_metrics(&state, &split, &arch, &which, &checkpoint.display().to_string(), &out)?;
        }
        Cmd::Kde {
            run,
            checkpoint,
            network: which,
        } => {
            let (cfg, split, out) = load(&run)?;
            let state = load_checkpoint(&checkpoint)?;
            let curves = kde_report(
                network(&state, &which)?,
                &state.arch,
                &split,
                cfg.kde_source,
                cfg.kde_bandwidth,
                Some(&out),
            )?;
            println!("wrote {} KDE curve(s) to {}", curves.len(), out.display());
        }
        Cmd::AblateLayers(args) => {
            let (cfg, split, out) = load(&args)?;
            for r in ablation_layers(&cfg, &split, Some(&out))? {
                println!("layer {}: DICE {:.4} Jaccard {:.4} 95HD {:.4} ASD {:.4}", r.setting, r.dice, r.jaccard, r.hd95, r.asd);
            }
        }
        Cmd::SweepAlpha { run, values } => {
            let (cfg, split, out) = load(&run)?;
            for r in sweep_alpha(&cfg, &split, &values, Some(&out))? {
                println!("alpha {}: DICE {:.4} Jaccard {:.4} 95HD {:.4} ASD {:.4}", r.setting, r.dice, r.jaccard, r.hd95, r.asd);
            }
        }
        Cmd::Report { run, out } => {
            let md = render_report(&run)?;
            let path = out.unwrap_or_else(|| run.join("report.md"));
            fs::write(&path, md)?;
            println!("report written to {}", path.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
