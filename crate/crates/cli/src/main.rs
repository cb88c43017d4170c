//! `dispenseforge`: dataset generation, surrogate pretraining, label-free
//! process training, inference, evaluation, simulation and refinement.
//!
//! Exit codes: 0 ok, 2 usage or config error, 3 missing prerequisite
//! artifact, 4 degenerate inference, 5 simulation failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dispenseforge::datagen::{build_pretrain_set, Dataset, Split};
use dispenseforge::flow::{self, FlowConfig, FlowError};
use dispenseforge::geometry::{DispensePath, TargetArea};
use dispenseforge::models::{
    infer_path, load_process, load_quality, refine_path, save_model, Manifest, ModelError, ModelKind, RefineOptions,
};
use dispenseforge::quality::{self, QualityReport};
use dispenseforge::raster::Mask;
use dispenseforge::render::overlay_svg;
use dispenseforge::training::{
    evaluate_suite, pretrain_flow, pretrain_void, split_areas, train_process, SurrogateTraining, TrainingError,
};
use dispenseforge::{Config, ConfigError};

#[derive(Parser)]
#[command(
    name = "dispenseforge",
    version,
    about = "Amortized coverage-path planning for material dispensing"
)]
struct Cli {
    /// Configuration file (`key=value` lines); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data generation and oracle scoring; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a pretraining dataset of random areas and paths labelled by the oracle.
    Datagen {
        /// Number of records.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Dataset file to write; statistics go to `<out>.stats.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the flow surrogate on a dataset.
    PretrainFlow(SurrogateArgs),
    /// Pretrain the void surrogate on a dataset.
    PretrainVoid(SurrogateArgs),
    /// Train the process net label-free through the frozen quality model.
    TrainProcess {
        /// Dataset whose training areas are used (paths and labels are ignored).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        flow_weights: PathBuf,
        #[arg(long)]
        void_weights: PathBuf,
        /// Defaults to `epochs_process` from the config.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Plan a path for one target area.
    Infer {
        /// Process-net weights.
        #[arg(long)]
        weights: PathBuf,
        /// Target mask as PGM (P2 or P5).
        #[arg(long)]
        area: PathBuf,
        #[arg(long)]
        out_path: PathBuf,
        /// Optional SVG overlay with the simulated footprint.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Plan and score every test-split area of a dataset.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the flow oracle on a path file and print its quality row.
    Simulate {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        area: PathBuf,
        /// Optional CSV of compressed heights.
        #[arg(long)]
        heights: Option<PathBuf>,
    },
    /// Improve a path by gradient descent through the quality model.
    Refine {
        #[arg(long)]
        flow_weights: PathBuf,
        #[arg(long)]
        void_weights: PathBuf,
        #[arg(long)]
        area: PathBuf,
        /// Starting path file; when absent the path is inferred with `--weights`.
        #[arg(long, required_unless_present = "weights")]
        start: Option<PathBuf>,
        /// Process-net weights used to produce the starting path.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out_path: PathBuf,
    },
}

#[derive(clap::Args)]
struct SurrogateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `epochs_surrogate` from the config.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Weights file; the manifest and log are written next to it.
    #[arg(long)]
    out_weights: PathBuf,
}

/// An input file named on the command line does not exist.
#[derive(Debug)]
struct MissingInput(PathBuf, &'static str);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} `{}` does not exist", self.1, self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn model_code(e: &ModelError) -> Option<u8> {
    match e {
        ModelError::MissingArtifact { .. } => Some(3),
        ModelError::Degenerate { .. } => Some(4),
        ModelError::Flow(FlowError::NoConvergence { .. }) => Some(5),
        _ => None,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<MissingInput>() {
            return 3;
        }
        if let Some(FlowError::NoConvergence { .. }) = cause.downcast_ref::<FlowError>() {
            return 5;
        }
        if let Some(code) = cause.downcast_ref::<ModelError>().and_then(model_code) {
            return code;
        }
        match cause.downcast_ref::<TrainingError>() {
            Some(TrainingError::Model(m)) => {
                if let Some(code) = model_code(m) {
                    return code;
                }
            }
            Some(TrainingError::Flow(FlowError::NoConvergence { .. })) => return 5,
            _ => {}
        }
    }
    1
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, what: &'static str) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf(), what).into());
    }
    Ok(())
}

fn read_dataset(path: &Path, cfg: &Config) -> Result<Dataset> {
    require(path, "dataset")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Dataset::from_bytes(&bytes, &cfg.grid()?).with_context(|| format!("loading dataset {}", path.display()))
}

fn read_area(path: &Path, cfg: &Config) -> Result<TargetArea> {
    require(path, "area mask")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mask = Mask::from_pgm(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    TargetArea::new(mask, cfg.grid()?).with_context(|| format!("target area {}", path.display()))
}

fn read_path(path: &Path, cfg: &Config) -> Result<(DispensePath, Vec<u8>)> {
    require(path, "path file")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let p = DispensePath::parse_file(&text, &cfg.grid()?).with_context(|| format!("parsing {}", path.display()))?;
    Ok((p, bytes))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Datagen { n, seed, out } => {
            if n == 0 {
                bail!(ConfigError::Inconsistent("--n must be at least 1".into()));
            }
            let (ds, stats) = build_pretrain_set(n, seed, &cfg)?;
            write(&out, ds.to_bytes())?;
            write(&sidecar(&out, ".stats.txt"), stats.to_text())?;
            print!("{}", stats.to_text());
        }
        Command::PretrainFlow(a) => {
            let ds = read_dataset(&a.data, &cfg)?;
            let run = pretrain_flow(&ds, &cfg, a.epochs.unwrap_or(cfg.epochs_surrogate), a.seed)?;
            save_surrogate(&a, &cfg, ModelKind::Flow, "val_iou", &run)?;
        }
        Command::PretrainVoid(a) => {
            let ds = read_dataset(&a.data, &cfg)?;
            let run = pretrain_void(&ds, &cfg, a.epochs.unwrap_or(cfg.epochs_surrogate), a.seed)?;
            save_surrogate(&a, &cfg, ModelKind::Void, "val_accuracy", &run)?;
        }
        Command::TrainProcess {
            data,
            flow_weights,
            void_weights,
            epochs,
            seed,
            out_weights,
        } => {
            let quality = load_quality(&flow_weights, &void_weights, &cfg)?;
            let ds = read_dataset(&data, &cfg)?;
            let train: Vec<TargetArea> = split_areas(&ds, Split::Train)?.into_iter().map(|(_, a)| a).collect();
            let val: Vec<TargetArea> = split_areas(&ds, Split::Validation)?
                .into_iter()
                .map(|(_, a)| a)
                .take(cfg.validation_areas)
                .collect();
            let start = Instant::now();
            let run = train_process(&train, &val, &quality, &cfg, epochs.unwrap_or(cfg.epochs_process), seed)?;
            let b = &run.best;
            let manifest = Manifest::new(ModelKind::Process, &run.net.net, &cfg)?
                .with("seed", seed)
                .with("epochs_run", run.epochs_run)
                .with("best_epoch", run.best_epoch)
                .with("quality_hash", &run.quality_hash)
                .with("val_oracle_J", b.oracle_j)
                .with("val_surrogate_J", b.surrogate_j)
                .with("val_gap", b.gap)
                .with("val_coverage", b.coverage_mean)
                .with("val_overflow", b.overflow_mean)
                .with("val_void_rate", b.void_rate)
                .with("final_train_loss", run.final_train_loss);
            save_model(&out_weights, &run.net.net, &manifest)?;
            write(&sidecar(&out_weights, ".log.csv"), run.log.to_csv())?;
            println!(
                "best_epoch={} val_oracle_J={} val_coverage={} val_overflow={} val_void_rate={} gap={}",
                run.best_epoch, b.oracle_j, b.coverage_mean, b.overflow_mean, b.void_rate, b.gap
            );
            eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
        }
        Command::Infer {
            weights,
            area,
            out_path,
            render,
        } => {
            let (net, _) = load_process(&weights, &cfg)?;
            let area = read_area(&area, &cfg)?;
            let start = Instant::now();
            let inferred = infer_path(&area, &net, cfg.min_path_length_mm);
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let inferred = match inferred {
                Ok(i) => i,
                Err(e) => {
                    if let ModelError::Degenerate { raw, .. } = &e {
                        let dump = sidecar(&out_path, ".raw.txt");
                        let text: Vec<String> = raw.iter().map(|v| v.to_string()).collect();
                        write(&dump, text.join("\n") + "\n")?;
                        return Err(anyhow::Error::new(e).context(format!("raw outputs written to {}", dump.display())));
                    }
                    return Err(e.into());
                }
            };
            let grid = cfg.grid()?;
            write(&out_path, inferred.path.to_file_string(&grid))?;
            let state = flow::simulate(&inferred.path, &area, &FlowConfig::from(&cfg))?;
            let report = quality::assess(state.footprint(), &area, &cfg.objective_weights());
            if let Some(svg) = render {
                write(
                    &svg,
                    overlay_svg(&grid, area.mask(), Some(state.footprint()), Some(&inferred.path)),
                )?;
            }
            println!("{},{},{}", report.coverage, report.objective, ms);
        }
        Command::Evaluate {
            weights,
            testset,
            out_dir,
        } => {
            let (net, _) = load_process(&weights, &cfg)?;
            let ds = read_dataset(&testset, &cfg)?;
            let areas: Vec<(String, TargetArea)> = split_areas(&ds, Split::Test)?
                .into_iter()
                .map(|(i, a)| (format!("area{i:05}"), a))
                .collect();
            let suite = evaluate_suite(&net, &areas, &cfg)?;
            suite.write(&out_dir, &areas, cfg.log_wall_time)?;
            match suite.aggregate() {
                Some(a) => println!(
                    "areas={} coverage={} overflow={} void_free={} objective={} mean_infer_ms={:.3} max_infer_ms={:.3}",
                    areas.len(),
                    a.coverage,
                    a.overflow,
                    a.void_free_rate,
                    a.objective,
                    a.infer_ms,
                    a.max_infer_ms
                ),
                None => println!("areas=0"),
            }
        }
        Command::Simulate { path, area, heights } => {
            let area = read_area(&area, &cfg)?;
            let (path, _) = read_path(&path, &cfg)?;
            let state = flow::simulate(&path, &area, &FlowConfig::from(&cfg))?;
            if let Some(h) = heights {
                write(&h, state.heights_csv())?;
            }
            let report = quality::assess(state.footprint(), &area, &cfg.objective_weights());
            println!("{}\n{}", QualityReport::CSV_HEADER, report.to_csv_row());
        }
        Command::Refine {
            flow_weights,
            void_weights,
            area,
            start,
            weights,
            steps,
            out_path,
        } => {
            let quality = load_quality(&flow_weights, &void_weights, &cfg)?;
            let area = read_area(&area, &cfg)?;
            let grid = cfg.grid()?;
            let (start, original) = match (start, weights) {
                (Some(p), _) => {
                    let (path, bytes) = read_path(&p, &cfg)?;
                    (path, Some(bytes))
                }
                (None, Some(w)) => {
                    let (net, _) = load_process(&w, &cfg)?;
                    (infer_path(&area, &net, cfg.min_path_length_mm)?.path, None)
                }
                (None, None) => unreachable!("clap requires --start or --weights"),
            };
            let opts = RefineOptions {
                steps,
                learning_rate: cfg.refine_lr,
                oracle_every: cfg.refine_oracle_every,
                flow: FlowConfig::from(&cfg),
                weights: cfg.objective_weights(),
                penalty_max: cfg.penalty_max,
            };
            let r = refine_path(&area, &start, &quality, &opts)?;
            match original {
                // an unchanged start is copied verbatim
                Some(bytes) if r.best_step == 0 => write(&out_path, bytes)?,
                _ => write(&out_path, r.path.to_file_string(&grid))?,
            }
            println!(
                "{},{},{},{}",
                r.start_report.objective, r.report.objective, r.report.coverage, r.best_step
            );
        }
    }
    Ok(())
}

fn save_surrogate(
    a: &SurrogateArgs,
    cfg: &Config,
    kind: ModelKind,
    metric: &str,
    run: &SurrogateTraining,
) -> Result<()> {
    let manifest = Manifest::new(kind, &run.net, cfg)?
        .with("seed", a.seed)
        .with("best_epoch", run.best_epoch)
        .with("best_val_loss", run.best_val_loss)
        .with(metric, run.val_metric)
        .with("final_train_loss", run.final_train_loss);
    save_model(&a.out_weights, &run.net, &manifest)?;
    write(&sidecar(&a.out_weights, ".log.csv"), run.log.to_csv())?;
    println!(
        "best_epoch={} best_val_loss={} {metric}={} final_train_loss={}",
        run.best_epoch, run.best_val_loss, run.val_metric, run.final_train_loss
    );
    Ok(())
}
