use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use scenetok::harness::{bench_tokenize, drop_agents, generate_scene, SceneSpec};
use scenetok::io::{
    read_checkpoint, read_config, read_scene_bundle, read_tokens, write_scene_bundle, write_tokens,
};
use scenetok::model::{ElementKind, PipelineConfig};
use scenetok::pipeline::{default_params, fuse, tokenize};
use scenetok::{Error, FormatError};

#[derive(Parser)]
#[command(name = "scenetok", version, about = "Scene tokenization for multi-modal driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize one or more scene bundles into per-element embeddings.
    Tokenize {
        /// Bundle directory; repeat to process several.
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Token file, or a directory when several scenes are given.
        #[arg(long)]
        out: PathBuf,
        /// Fusion checkpoint; seeded initialization when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a synthetic scene bundle.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Scene spec (TOML); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop a fraction of agent tracks, keeping their points.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long = "drop-agents")]
        drop_agents: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a token file.
    Inspect {
        #[arg(long)]
        tokens: PathBuf,
    },
    /// Time each pipeline stage.
    Bench {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the fusion forward pass.
        #[arg(long)]
        no_fuse: bool,
        /// Emit machine-readable rows instead of a table.
        #[arg(long)]
        csv: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Format(e) if e.is_io() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if let Error::Validation(v) = &e {
                for violation in &v.violations {
                    eprintln!("  {violation}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> scenetok::Result<()> {
    match command {
        Command::Tokenize {
            scene,
            config,
            out,
            params,
            jobs,
        } => {
            let config = read_config(&config)?;
            let params = match params {
                Some(path) => read_checkpoint::<f32>(&path)?,
                None => default_params(&config),
            };
            if scene.len() == 1 {
                return tokenize_one(&scene[0], &out, &config, &params);
            }
            std::fs::create_dir_all(&out).map_err(|e| FormatError::Io {
                path: out.clone(),
                source: e,
            })?;
            let jobs = jobs.clamp(1, scene.len());
            let targets: Vec<(PathBuf, PathBuf)> = scene
                .iter()
                .map(|s| {
                    let stem = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or("scene".into());
                    (s.clone(), out.join(format!("{stem}.tokens")))
                })
                .collect();
            let results: Vec<scenetok::Result<()>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..jobs)
                    .map(|w| {
                        let (targets, config, params) = (&targets, &config, &params);
                        scope.spawn(move || {
                            targets
                                .iter()
                                .skip(w)
                                .step_by(jobs)
                                .map(|(s, o)| tokenize_one(s, o, config, params))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            });
            results.into_iter().collect()
        }
        Command::Synth { seed, spec, out } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| FormatError::Io { path, source: e })?;
                    SceneSpec::from_toml(&text)?
                }
                None => SceneSpec::default(),
            };
            let scene = generate_scene(seed, &spec)?;
            write_scene_bundle(&out, &scene.bundle)?;
            info!(
                "wrote {} frames, {} points, {} agent tracks to {}",
                scene.bundle.frames.len(),
                scene.bundle.point_count(),
                scene.bundle.agent_track_ids().len(),
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            scene,
            drop_agents: ratio,
            seed,
            out,
        } => {
            let bundle = read_scene_bundle(&scene)?;
            let ablation = drop_agents(&bundle, ratio, seed)?;
            info!("removed tracks {:?}", ablation.dropped);
            write_scene_bundle(&out, &ablation.bundle)
        }
        Command::Inspect { tokens } => {
            let tokens = read_tokens(&tokens)?;
            println!("elements {}  frames {}  dim {}", tokens.len(), tokens.frames, tokens.dim);
            println!("{:<9} {:>6} {:>12} {:>12} {:>12} {:>12}", "kind", "count", "norm_min", "norm_mean", "norm_max", "valid_frac");
            for kind in ElementKind::ALL {
                let rows: Vec<usize> = (0..tokens.len()).filter(|&i| tokens.elements[i].kind == kind).collect();
                let norms: Vec<f64> = rows
                    .iter()
                    .map(|&i| tokens.embedding(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let valid: usize = rows.iter().map(|&i| tokens.elements[i].valid_frames()).sum();
                let slots = rows.len() * tokens.frames;
                let stat = |f: fn(f64, f64) -> f64, init: f64| norms.iter().copied().fold(init, f);
                let (lo, hi) = if norms.is_empty() {
                    (0.0, 0.0)
                } else {
                    (stat(f64::min, f64::INFINITY), stat(f64::max, 0.0))
                };
                let mean = if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 };
                let frac = if slots == 0 { 0.0 } else { valid as f64 / slots as f64 };
                println!(
                    "{:<9} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                    kind.name(),
                    rows.len(),
                    lo,
                    mean,
                    hi,
                    frac
                );
            }
            Ok(())
        }
        Command::Bench {
            scene,
            reps,
            config,
            no_fuse,
            csv,
        } => {
            let bundle = read_scene_bundle(&scene)?;
            let config = match config {
                Some(path) => read_config(&path)?,
                None => config_for_bundle(&bundle),
            };
            let params = (!no_fuse).then(|| default_params(&config));
            let report = bench_tokenize(&bundle, &config, reps, params.as_ref())?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{report}");
            }
            Ok(())
        }
    }
}

/// Defaults with the frame count and feature width taken from the bundle.
fn config_for_bundle(bundle: &scenetok::model::SceneBundle) -> PipelineConfig {
    let defaults = PipelineConfig::default();
    PipelineConfig {
        frames: bundle.frames.len(),
        feature_dim: bundle.cameras.first().map_or(defaults.feature_dim, |c| c.dim),
        ..defaults
    }
}

fn tokenize_one(
    scene: &Path,
    out: &Path,
    config: &PipelineConfig,
    params: &scenetok::fuse::FusionParams<f32>,
) -> scenetok::Result<()> {
    let bundle = read_scene_bundle(scene)?;
    let tokens = tokenize(&bundle, config)?;
    for w in &tokens.warnings {
        log::warn!("{}: {} budget {} exceeded by {} elements", scene.display(), w.kind.name(), w.budget, w.found - w.budget);
    }
    let fused = fuse(&tokens, params)?;
    write_tokens(out, &fused)?;
    info!("{}: {} tokens -> {}", scene.display(), fused.len(), out.display());
    Ok(())
}
