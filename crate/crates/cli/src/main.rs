use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use heteroseg_core::data::{generate_synthetic_centers, load_manifest, write_manifest, CenterDataset, Corpus, Split, SyntheticCenterSpec};
use heteroseg_core::harness::{
    configure_threads, evaluate, flag_removal, load_corpus, removal_center, run_experiment, run_removal_suite,
    split_centers, DataSource, ExperimentConfig, Removal,
};
use heteroseg_core::latent::{
    cluster_score, collect_latents, embed_2d, mean_lung_bbox_area, read_external_embedding, rescaled_latents,
    scatter_svg, write_embedding_csv, write_latents_csv, EmbedMethod,
};
use heteroseg_core::models::{load_checkpoint, CheckpointHeader, Model};
use heteroseg_core::{MetricReport, Scalar};

/// Anatomical segmentation experiments under heterogeneous labels.
#[derive(Parser)]
#[command(name = "heteroseg", version)]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Removal experiment (Exp1..Exp4).
        #[arg(long)]
        removal: Option<String>,
    },
    /// Evaluate a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Train the four artificial label-removal experiments.
    RemovalSuite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Latent vectors, 2-D embedding and center-separability score.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pca")]
        reducer: Reducer,
        /// N x 2 CSV from an outside reducer, rows in latents.csv order.
        #[arg(long, required_if_eq("reducer", "external"))]
        external_embedding: Option<PathBuf>,
        /// Also score latents after rescaling every image to the mean lung box area.
        #[arg(long)]
        rescale: bool,
    },
    /// Dataset tools.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Merge metric CSVs and print them.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate synthetic centers and write them as a manifest.
    Synth {
        /// JSON list of center specs (or {"centers": [...]}); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Load a manifest and report what it contains.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Evaluate on this manifest instead of the training data.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Take the data source from this experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split seed; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Reducer {
    Pca,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    Trainval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Test => Split::Test,
            SplitArg::Trainval => Split::TrainVal,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<heteroseg_core::Error>()).map_or(3, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = configure_threads()? {
        log::info!("using {n} threads");
    }
    match cli.command {
        Command::Train { config, seed, output_dir, removal } => {
            let mut cfg = load_config(&config, seed, output_dir)?;
            if let Some(r) = removal {
                cfg.removal = Some(r.parse::<Removal>()?);
            }
            let run = run_experiment(&cfg)?;
            print!("{}", run.report.to_markdown());
            println!("run written to {}", run.output_dir.display());
        }
        Command::RemovalSuite { config, seed, output_dir } => {
            let cfg = load_config(&config, seed, output_dir)?;
            let suite = run_removal_suite(&cfg)?;
            print!("{}", suite.report.to_markdown());
            println!("combined report written to {}", suite.report_path.display());
        }
        Command::Eval { checkpoint, data, out, format } => {
            let report = match checkpoint_dtype(&checkpoint)? {
                Dt::F32 => eval_typed::<f32>(&checkpoint, &data)?,
                Dt::F64 => eval_typed::<f64>(&checkpoint, &data)?,
            };
            emit_report(&report, format, out.as_deref())?;
        }
        Command::Inspect { checkpoint, data, out, reducer, external_embedding, rescale } => {
            let opts = InspectOpts { out, reducer, external: external_embedding, rescale };
            match checkpoint_dtype(&checkpoint)? {
                Dt::F32 => inspect_typed::<f32>(&checkpoint, &data, &opts)?,
                Dt::F64 => inspect_typed::<f64>(&checkpoint, &data, &opts)?,
            }
        }
        Command::Data { command: DataCommand::Synth { spec, out, seed } } => {
            let specs = match spec {
                Some(p) => read_specs(&p)?,
                None => heteroseg_core::data::default_synthetic_specs(seed),
            };
            let topology = std::sync::Arc::new(heteroseg_core::anatomy::default_synthetic_topology());
            let centers = generate_synthetic_centers::<f64>(&specs, &topology)?;
            let path = write_manifest(&Corpus { topology, centers }, &out)?;
            println!("{}", path.display());
        }
        Command::Data { command: DataCommand::Validate { manifest } } => {
            let corpus = load_manifest::<f64>(&manifest)?;
            let (h, w) = corpus.image_size().unwrap_or((0, 0));
            println!("{}: {} centers, images {h}x{w}", manifest.display(), corpus.centers.len());
            for c in &corpus.centers {
                println!("  {:<16} {:>5} records  labels {:<4} ground truth {}", c.center_id, c.len(), c.availability.code(), c.ground_truth().code());
            }
        }
        Command::Report { inputs, format } => {
            let mut report = MetricReport::new();
            for p in &inputs {
                let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                report.extend(MetricReport::read_csv(f).with_context(|| format!("reading {}", p.display()))?);
            }
            emit_report(&report, format, None)?;
        }
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    Ok(cfg)
}

fn read_specs(path: &Path) -> Result<Vec<SyntheticCenterSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| heteroseg_core::Error::Config(format!("{}: {e}", path.display())))?;
    let list = value.get("centers").cloned().unwrap_or(value);
    serde_json::from_value(list).map_err(|e| heteroseg_core::Error::Config(format!("{}: {e}", path.display())).into())
}

fn emit_report(report: &MetricReport, format: Format, out: Option<&Path>) -> Result<()> {
    let text = match format {
        Format::Csv => report.to_csv_string(),
        Format::Markdown => report.to_markdown(),
    };
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

enum Dt {
    F32,
    F64,
}

fn checkpoint_dtype(path: &Path) -> Result<Dt> {
    let (_, header) = load_checkpoint::<f64>(path)?;
    Ok(if header.dtype == "f32" { Dt::F32 } else { Dt::F64 })
}

struct Loaded<T> {
    model: Model<T>,
    header: CheckpointHeader,
    centers: Vec<CenterDataset<T>>,
    topology: std::sync::Arc<heteroseg_core::ContourTopology>,
    split: Split,
}

/// Checkpoint plus the evaluation data: an explicit manifest, the data of an
/// explicit config, or the config recorded in the checkpoint.
fn load_with_data<T: Scalar>(checkpoint: &Path, args: &DataArgs) -> Result<Loaded<T>> {
    let (model, header) = load_checkpoint::<T>(checkpoint)?;
    let recorded: Option<ExperimentConfig> = header.metadata.get("config").and_then(|c| serde_json::from_value(c.clone()).ok());
    let explicit = args.config.as_deref().map(ExperimentConfig::load).transpose()?.map(|c| c.resolved()).transpose()?;
    let base = explicit.as_ref().or(recorded.as_ref());
    let source = match (&args.manifest, base) {
        (Some(p), _) => DataSource::Manifest { path: p.clone() },
        (None, Some(c)) => c.data.clone(),
        (None, None) => bail!(heteroseg_core::Error::Config("no data: pass --manifest or --config".into())),
    };
    let seed = args.seed.or(base.map(|c| c.seed())).unwrap_or(0);
    let fraction = args.split_fraction.or(base.map(|c| c.split_fraction)).unwrap_or(heteroseg_core::data::DEFAULT_SPLIT_FRACTION);
    let corpus = load_corpus::<T>(&source)?;
    let centers = split_centers(&corpus.centers, fraction, seed)?;
    Ok(Loaded { model, header, centers, topology: corpus.topology, split: args.split.into() })
}

fn eval_typed<T: Scalar>(checkpoint: &Path, args: &DataArgs) -> Result<MetricReport> {
    let l = load_with_data::<T>(checkpoint, args)?;
    let setting = l.header.metadata.get("setting").and_then(|s| s.as_str()).unwrap_or("-");
    let mut report = evaluate(&l.model, &l.centers, l.model.kind().name(), setting, l.split)?;
    let removal = l.header.metadata.get("removal").and_then(|r| r.as_str()).map(str::parse::<Removal>).transpose()?;
    if let Some(r) = removal {
        if let Ok(i) = removal_center(&l.centers, r) {
            flag_removal(&mut report, r, &l.centers[i].center_id);
        }
    }
    Ok(report)
}

struct InspectOpts {
    out: PathBuf,
    reducer: Reducer,
    external: Option<PathBuf>,
    rescale: bool,
}

fn inspect_typed<T: Scalar>(checkpoint: &Path, args: &DataArgs, opts: &InspectOpts) -> Result<()> {
    let l = load_with_data::<T>(checkpoint, args)?;
    let out = &opts.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records = collect_latents(&l.model, &l.centers, l.split)?;
    let emb = match opts.reducer {
        Reducer::Pca => embed_2d(&records, EmbedMethod::Pca)?,
        Reducer::External => {
            let p = opts.external.as_ref().expect("required by clap");
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_external_embedding(&records, f)?
        }
    };
    write_latents_csv(&records, fs::File::create(out.join("latents.csv"))?)?;
    write_embedding_csv(&records, &emb, fs::File::create(out.join("embedding.csv"))?)?;
    let title = format!("{} latents", l.model.kind());
    fs::write(out.join("scatter.svg"), scatter_svg(&emb, &title))?;
    let mut score = format!("silhouette {:.6}\n", emb.separability);
    if opts.rescale {
        let target = mean_lung_bbox_area(&l.centers)?;
        let rescaled = rescaled_latents(&l.model, &l.centers, &l.topology, target, l.split)?;
        write_latents_csv(&rescaled, fs::File::create(out.join("rescaled_latents.csv"))?)?;
        score.push_str(&format!("rescaled_silhouette {:.6}\n", cluster_score(&rescaled)?));
    }
    fs::write(out.join("score.txt"), &score)?;
    print!("{score}");
    println!("inspection written to {}", out.display());
    Ok(())
}
