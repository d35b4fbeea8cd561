use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{DataSource, Dtype, ExperimentConfig, Removal, RemovalTarget};
use super::eval::evaluate;
use super::overlay::emit_overlays;
use crate::anatomy::{default_synthetic_topology, LabelAvailability, Structure};
use crate::data::{generate_synthetic_centers, load_manifest, remove_labels, split, CenterDataset, Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::models::{save_checkpoint, train, Model};
use crate::Scalar;

/// Files produced by one run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: MetricReport,
    pub report_path: PathBuf,
    pub overlays: Vec<PathBuf>,
    pub step_log: PathBuf,
    pub epoch_log: PathBuf,
    pub snapshot: PathBuf,
    /// Center edited by the removal experiment, if any.
    pub removed_from: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RemovalSuite {
    pub runs: Vec<RunArtifact>,
    pub report: MetricReport,
    pub report_path: PathBuf,
}

pub const SNAPSHOT_FILE: &str = "config.toml";

pub fn load_corpus<T: Scalar>(data: &DataSource) -> Result<Corpus<T>> {
    match data {
        DataSource::Manifest { path } => load_manifest(path),
        DataSource::Synthetic { centers } => {
            let topology = Arc::new(default_synthetic_topology());
            let specs = if centers.is_empty() { crate::data::default_synthetic_specs(0) } else { centers.clone() };
            let centers = generate_synthetic_centers(&specs, &topology)?;
            Ok(Corpus { topology, centers })
        }
    }
}

/// Tags every record of every center as train/val or test.
pub fn split_centers<T: Scalar>(centers: &[CenterDataset<T>], fraction: f64, seed: u64) -> Result<Vec<CenterDataset<T>>> {
    centers
        .iter()
        .map(|c| {
            let (mut tv, test) = split(c, fraction, seed)?;
            tv.records.extend(test.records);
            Ok(tv)
        })
        .collect()
}

/// Index of the center a removal experiment edits: the first center
/// annotated with every structure, or the first with exactly lungs and heart.
pub fn removal_center<T>(centers: &[CenterDataset<T>], removal: Removal) -> Result<usize> {
    let want = match removal.target() {
        RemovalTarget::AllStructures => LabelAvailability::all(),
        RemovalTarget::LungsHeart => LabelAvailability::new(&[Structure::Lungs, Structure::Heart]),
    };
    centers
        .iter()
        .position(|c| c.availability == want)
        .ok_or_else(|| Error::Data(format!("{removal} needs a center annotated with exactly {}", want.code())))
}

pub fn apply_removal<T: Scalar>(centers: &mut [CenterDataset<T>], removal: Removal) -> Result<String> {
    let i = removal_center(centers, removal)?;
    centers[i] = remove_labels(&centers[i], removal.structure())?;
    Ok(centers[i].center_id.clone())
}

/// Marks every row with the experiment name and flags the removed cell.
pub fn flag_removal(report: &mut MetricReport, removal: Removal, center: &str) {
    for row in report.rows.iter_mut() {
        row.experiment = Some(removal.name().to_string());
        row.removed = row.center == center && row.structure == removal.structure();
    }
}

/// Trains, evaluates on each center's test split and writes the run
/// directory: `config.toml` snapshot, `model.ckpt`, `report.csv`,
/// `steps.csv`, `epochs.csv` and `overlays/`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifact> {
    let cfg = config.resolved()?;
    match cfg.dtype {
        Dtype::F32 => run_typed::<f32>(&cfg),
        Dtype::F64 => run_typed::<f64>(&cfg),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e.to_string()))
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::file(out, e.to_string()))?;
    let snapshot = out.join(SNAPSHOT_FILE);
    write_file(&snapshot, cfg.to_toml()?.as_bytes())?;

    let corpus = load_corpus::<T>(&cfg.data)?;
    let seed = cfg.seed();
    let mut centers = split_centers(&corpus.centers, cfg.split_fraction, seed)?;
    let removed_from = cfg.removal.map(|r| apply_removal(&mut centers, r)).transpose()?;

    let topology = Arc::new(corpus.topology.truncated(cfg.setting.structures())?);
    let mut model = Model::<T>::build(cfg.model, &cfg.arch, topology, seed)?;
    log::info!("training {} on {} ({} centers)", cfg.model, cfg.setting, centers.len());
    let log = train(&mut model, &centers, cfg.setting, &cfg.train)?;

    let mut report = evaluate(&model, &centers, cfg.model.name(), cfg.setting.name(), Split::Test)?;
    if let (Some(r), Some(c)) = (cfg.removal, &removed_from) {
        flag_removal(&mut report, r, c);
    }

    let checkpoint = out.join("model.ckpt");
    let metadata = serde_json::json!({
        "setting": cfg.setting.name(),
        "removal": cfg.removal.map(|r| r.name()),
        "seed": seed,
        "selected_epoch": log.selected_epoch,
        "config": cfg,
    });
    save_checkpoint(&model, metadata, &checkpoint)?;
    let report_path = out.join("report.csv");
    write_file(&report_path, report.to_csv_string().as_bytes())?;
    let step_log = out.join("steps.csv");
    let epoch_log = out.join("epochs.csv");
    let mut buf = Vec::new();
    log.write_steps_csv(&mut buf)?;
    write_file(&step_log, &buf)?;
    buf.clear();
    log.write_epochs_csv(&mut buf)?;
    write_file(&epoch_log, &buf)?;
    let overlays = if cfg.overlays { emit_overlays(&model, &centers, &out.join("overlays"))? } else { Vec::new() };

    Ok(RunArtifact { output_dir: out.clone(), checkpoint, report, report_path, overlays, step_log, epoch_log, snapshot, removed_from })
}

/// Runs Exp1..Exp4 from `base` into `<output_dir>/ExpN` and writes the
/// combined `removal_report.csv`.
pub fn run_removal_suite(base: &ExperimentConfig) -> Result<RemovalSuite> {
    if !base.setting.is_full() {
        return Err(Error::Config(format!("the removal suite needs a Full setting, got {}", base.setting)));
    }
    let mut runs = Vec::new();
    let mut report = MetricReport::new();
    for r in Removal::ALL {
        let mut cfg = base.clone();
        cfg.removal = Some(r);
        cfg.output_dir = base.output_dir.join(r.name());
        let run = run_experiment(&cfg)?;
        report.extend(run.report.clone());
        runs.push(run);
    }
    let report_path = base.output_dir.join("removal_report.csv");
    write_file(&report_path, report.to_csv_string().as_bytes())?;
    Ok(RemovalSuite { runs, report, report_path })
}

/// Re-runs the snapshot stored in a run directory.
pub fn rerun_snapshot(run_dir: &Path, output_dir: &Path) -> Result<RunArtifact> {
    let mut cfg = ExperimentConfig::load(run_dir.join(SNAPSHOT_FILE))?;
    cfg.output_dir = output_dir.to_path_buf();
    run_experiment(&cfg)
}

/// Caps rayon parallelism from `HETEROSEG_THREADS`. Returns the cap, if set.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var("HETEROSEG_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HETEROSEG_THREADS must be a positive integer, got {v:?}")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() && rayon::current_num_threads() != n {
        return Err(Error::Config("thread pool already initialized with a different size".into()));
    }
    Ok(Some(n))
}
