use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use rankuda::checkpoint::load_checkpoint;
use rankuda::dataset::{read_scores_for, write_scores, Manifest, OutputLock};
use rankuda::image::PnmLoader;
use rankuda::losses::LossWeights;
use rankuda::metrics::{evaluate, LogisticForm};
use rankuda::naturalness::{dnv_histogram, mscn_map};
use rankuda::pairing::{select_source_pairs, select_target_pairs, write_pairs_csv, ScoreKind};
use rankuda::synth::{generate, write_synthetic, Distortion, SyntheticSpec};
use rankuda::trainer::{predict_images, run_pipeline, PipelineData, TrainConfig};
use rankuda::{Error, Result};

#[derive(Parser)]
#[command(name = "rankuda", version, about = "Rank-transfer domain adaptation for no-reference image quality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the commands that read a training config.
#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale_factor: Option<f64>,
    /// Loss terms to keep, from rank,mmd,center,rec,cor,mse.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scale_factor {
            cfg.scale_factor = s;
        }
        if let Some(k) = self.iterations {
            cfg.pipeline_iterations = k;
        }
        if let Some(l) = &self.losses {
            cfg.weights = cfg.weights.restricted_to(&LossWeights::parse_terms(l)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        images: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        levels: usize,
        #[arg(long, default_value = "noise,blur,contrast")]
        distortions: String,
        #[arg(long, default_value_t = 0.15)]
        pseudo_noise: f64,
        #[arg(long, default_value_t = 0.7)]
        panel_fraction: f64,
    },
    /// Select discriminable pairs from a manifest.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat scores as pseudo-MOS and add SSIM-similar pairs.
        #[arg(long)]
        target: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full rank / aggregate / regress pipeline.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predictions with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// exponential or sigmoid
        #[arg(long, default_value = "exponential")]
        logistic: String,
    },
    /// Pooled MSCN histogram of a manifest's images.
    Naturalness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => std::fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            images,
            size,
            levels,
            distortions,
            pseudo_noise,
            panel_fraction,
        } => {
            let spec = SyntheticSpec {
                images_per_domain: images,
                size,
                levels,
                distortions: distortions
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<Vec<Distortion>>>()?,
                pseudo_noise,
                panel_fraction,
                seed,
            };
            let _lock = OutputLock::acquire(&out)?;
            write_synthetic(&generate(&spec)?, &out)?;
            info!("wrote {} images per domain to {}", images, out.display());
        }
        Command::Pairs {
            manifest,
            out,
            target,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let m = Manifest::read(&manifest)?;
            let pcfg = cfg.pair_config(cfg.seed);
            let (pairs, ids) = if target {
                let pseudo = m.scores(ScoreKind::Pseudo)?.normalized()?;
                let gray: Vec<_> = m.load_images(&PnmLoader)?.iter().map(|i| i.to_gray()).collect();
                (select_target_pairs(&pseudo, pseudo.ids(), &gray, &pcfg)?, pseudo.ids().to_vec())
            } else {
                let truth = m.scores(ScoreKind::GroundTruth)?.normalized()?;
                (select_source_pairs(&truth, &pcfg)?, truth.ids().to_vec())
            };
            parent_dir(&out)?;
            write_pairs_csv(&out, &pairs, &ids)?;
            info!("{} pairs written to {}", pairs.len(), out.display());
        }
        Command::Train {
            source,
            target,
            pseudo,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let _lock = OutputLock::acquire(&out)?;
            let echo = out.join("config.txt");
            let rendered = cfg.render();
            if let Ok(previous) = std::fs::read_to_string(&echo) {
                if previous != rendered {
                    return Err(Error::Config(format!(
                        "{} holds a run with a different config; use a fresh directory",
                        out.display()
                    )));
                }
            }
            std::fs::write(&echo, &rendered).map_err(|e| Error::Io { path: echo, source: e })?;

            let data = PipelineData::from_manifests(&source, &target, &pseudo)?;
            let result = run_pipeline(&data, &cfg, Some(&out))?;
            println!(
                "trained {} iteration(s); predictions in {}",
                result.iterations.len(),
                out.join("predictions.csv").display()
            );
        }
        Command::Predict {
            checkpoint,
            manifest,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let m = Manifest::read(&manifest)?;
            let scores = predict_images(&state, &m.load_images(&PnmLoader)?)?;
            parent_dir(&out)?;
            write_scores(&out, &m.ids(), &scores)?;
        }
        Command::Eval {
            pred,
            truth,
            out,
            logistic,
        } => {
            let form = match logistic.as_str() {
                "exponential" => LogisticForm::Exponential,
                "sigmoid" => LogisticForm::Sigmoid,
                other => return Err(Error::Config(format!("unknown logistic form {other:?}"))),
            };
            let p = Manifest::read(&pred)?.scores(ScoreKind::Pseudo)?;
            let t = read_scores_for(&truth, p.ids())?;
            let report = evaluate(p.scores(), &t, form)?;
            print!("{}", report.to_text());
            if let Some(o) = out {
                parent_dir(&o)?;
                report.write_csv(&o)?;
            }
        }
        Command::Naturalness { manifest, out } => {
            let m = Manifest::read(&manifest)?;
            let maps = m
                .load_images(&PnmLoader)?
                .iter()
                .map(|i| mscn_map(&i.to_gray()))
                .collect::<Result<Vec<_>>>()?;
            let hist = dnv_histogram(&maps)?;
            parent_dir(&out)?;
            hist.write_csv(&out)?;
            match hist.moments() {
                Ok(mo) => println!(
                    "mean={} variance={} skewness={} kurtosis={}",
                    mo.mean, mo.variance, mo.skewness, mo.kurtosis
                ),
                Err(e) => println!("moments unavailable: {e}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => format!(" stage={stage}"),
                _ => String::new(),
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={}{stage} msg={msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
