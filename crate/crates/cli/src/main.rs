use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sitecast::pipeline::{current_run_id, PipelineConfig};
use sitecast::raster::read_world_file;
use sitecast::synth::{generate_scenario, ScenarioSpec};
use sitecast::vision::{benchmark_with_recipe, select_backbone, ImageDataset, TrainRecipe};
use sitecast::{run_pipeline, BackboneSpec, RasterStore};
use sitecast_cli::{router, AppState};

#[derive(Parser)]
#[command(name = "sitecast", version, about = "Coverage-area profiling and cluster-level KPI forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a TOML config.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Print the metrics tables of a run (default: the current one).
    Report {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Serve the HTTP API for the current run.
    Serve {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Add a georeferenced RGB scene to a raster store.
    ImportRasters {
        /// Raster store directory.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// ESRI world file; defaults to the image path with a `.pgw` extension.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        resolution_m: f64,
        #[arg(long)]
        season: String,
    },
    /// Write a synthetic scenario with known archetypes plus a config to run it.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        cells_per_archetype: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Fine-tune and compare backbones on a directory-per-class image set.
    Benchmark {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "efficientnet_b0,resnet50,vit_b_16")]
        backbones: Vec<String>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let run = run_pipeline(&cfg)?;
            println!("run {} completed with k = {}", run.run_id, run.k.unwrap_or(0));
            println!("{}", cfg.output_dir.join(&run.run_id).display());
        }
        Command::Report { config, run_id } => {
            let cfg = PipelineConfig::load(&config)?;
            let id = match run_id {
                Some(id) => id,
                None => current_run_id(&cfg.output_dir)?,
            };
            let path = cfg.output_dir.join(&id).join("metrics").join("summary.txt");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{text}");
        }
        Command::Serve { config, addr } => {
            let cfg = PipelineConfig::load(&config)?;
            let state = AppState::watching(&cfg.output_dir);
            let app = router(state);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::ImportRasters {
            store,
            image,
            world,
            resolution_m,
            season,
        } => {
            let world = world.unwrap_or_else(|| image.with_extension("pgw"));
            let gt = read_world_file(&world)?;
            let record = RasterStore::import(&store, &image, gt, resolution_m, &season)?;
            println!("imported {} into {}", record.path, store.display());
        }
        Command::GenSynthetic {
            out,
            cells_per_archetype,
            days,
            noise,
            seed,
        } => {
            let scenario = generate_scenario(&ScenarioSpec::standard(cells_per_archetype, days, noise, seed))?;
            let paths = scenario.write(&out)?;
            let mut cfg = PipelineConfig::new("cells.csv", "rasters", "kpis.csv", "runs");
            cfg.backbone = "toy".into();
            cfg.seed = seed;
            let config_path = paths.root.join("config.toml");
            fs::write(&config_path, cfg.to_toml()?)?;
            println!("scenario written to {}", paths.root.display());
            println!("run it with: sitecast run --config {}", config_path.display());
        }
        Command::Benchmark {
            data,
            backbones,
            epochs,
            seed,
            out,
        } => {
            let dataset = ImageDataset::load_dir(&data)?;
            let specs = backbones
                .iter()
                .map(|b| BackboneSpec::lookup(b.trim()))
                .collect::<sitecast::Result<Vec<_>>>()?;
            if specs.is_empty() {
                bail!("no backbones given");
            }
            let recipe = TrainRecipe {
                epochs,
                ..TrainRecipe::default()
            };
            let report = benchmark_with_recipe(&dataset, &specs, &recipe, seed)?;
            println!("{:<18} {:>12} {:>9} {:>9} {:>9} {:>9}", "backbone", "params", "accuracy", "precision", "recall", "f1");
            for r in &report.results {
                println!(
                    "{:<18} {:>12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.name, r.param_count, r.accuracy, r.precision, r.recall, r.f1
                );
            }
            if let Some(best) = select_backbone(&report) {
                println!("selected: {}", best.name);
            }
            if let Some(out) = out {
                fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}
