use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use vqct::server::{router, AppState};
use vqct_core::phantom::{generate_noisy_phantom, PhantomSpec};
use vqct_core::pipeline::{
    run_accuracy_study, run_pipeline, run_precision_study, AccuracyStudy, PipelineConfig, PrecisionStudy, ProgressEvent,
};
use vqct_core::volgrid::{load_volume, write_volume};

/// Vertebral body segmentation and BMD analysis of lumbar spine QCT.
#[derive(Parser)]
#[command(name = "vqct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment every seeded level and write the report.
    Run {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        /// Pipeline configuration (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Digital phantoms.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Accuracy and precision studies on phantoms.
    Study {
        #[command(subcommand)]
        command: StudyCommand,
    },
    /// Serve the operator HTTP API for one volume.
    Serve {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write volume.vqh, seeds.json and truth.json into `out`.
    Generate {
        /// Phantom description (JSON); the 3-level default otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the noise sigma of the spec.
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Override the noise seed of the spec.
        #[arg(long)]
        rng_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Accuracy error per level and quantity for each noise factor.
    Accuracy {
        #[command(flatten)]
        common: StudyArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 4.0])]
        noise_factors: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// %CV over repeated analyses with jittered seeds.
    Precision {
        #[command(flatten)]
        common: StudyArgs,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        analyses: usize,
        #[arg(long, default_value_t = 2.0)]
        jitter_mm: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_factor: f64,
    },
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn progress(e: ProgressEvent) {
    eprintln!("[{:5.1}%] {} {}", e.percent(), e.level.as_deref().unwrap_or("-"), e.stage.as_str());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            volume,
            seeds,
            config,
            out,
        } => {
            let cfg = PipelineConfig {
                volume: Some(volume),
                seeds: Some(seeds),
                out_dir: Some(out),
                ..read_json(config.as_deref())?
            };
            let output = run_pipeline(&cfg, Some(&progress))?;
            let failed = output.report.failed_levels();
            if failed.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            eprintln!("failed levels: {}", failed.join(", "));
            Ok(ExitCode::FAILURE)
        }
        Command::Phantom {
            command:
                PhantomCommand::Generate {
                    spec,
                    noise_sigma,
                    rng_seed,
                    out,
                },
        } => {
            let mut spec: PhantomSpec = read_json(spec.as_deref())?;
            if let Some(s) = noise_sigma {
                spec.noise_sigma = s;
            }
            if let Some(s) = rng_seed {
                spec.rng_seed = s;
            }
            let (vol, truth) = generate_noisy_phantom(&spec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_volume(out.join("volume.vqh"), &vol)?;
            write_file(&out.join("seeds.json"), serde_json::to_string_pretty(&truth.seeds())?)?;
            write_file(&out.join("truth.json"), serde_json::to_string_pretty(&truth.summary())?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Study { command } => {
            let common = match &command {
                StudyCommand::Accuracy { common, .. } | StudyCommand::Precision { common, .. } => common,
            };
            let spec: PhantomSpec = read_json(common.spec.as_deref())?;
            let cfg: PipelineConfig = read_json(common.config.as_deref())?;
            fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            match &command {
                StudyCommand::Accuracy {
                    noise_factors, repeats, ..
                } => {
                    let study = AccuracyStudy {
                        noise_factors: noise_factors.clone(),
                        repeats: *repeats,
                    };
                    let table = run_accuracy_study(&spec, &study, &cfg)?;
                    write_file(&common.out.join("accuracy.json"), serde_json::to_string_pretty(&table)?)?;
                    write_file(&common.out.join("accuracy.csv"), table.to_csv())?;
                    print!("{}", table.to_csv());
                }
                StudyCommand::Precision {
                    instances,
                    analyses,
                    jitter_mm,
                    noise_factor,
                    ..
                } => {
                    let study = PrecisionStudy {
                        instances: *instances,
                        analyses: *analyses,
                        jitter_mm: *jitter_mm,
                        noise_factor: *noise_factor,
                    };
                    let rep = run_precision_study(&spec, &study, &cfg)?;
                    let json = serde_json::to_string_pretty(&rep)?;
                    write_file(&common.out.join("precision.json"), &json)?;
                    println!("{json}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { volume, port, config } => {
            let cfg: PipelineConfig = read_json(config.as_deref())?;
            cfg.validate()?;
            let vol = load_volume(&volume)?;
            let app = router(AppState::new(vol, cfg));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
                eprintln!("serving {} on http://{}", volume.display(), listener.local_addr()?);
                axum::serve(listener, app).await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
