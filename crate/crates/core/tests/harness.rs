use heteroseg_core::anatomy::{LabelAvailability, Structure};
use heteroseg_core::data::SyntheticCenterSpec;
use heteroseg_core::harness::{rerun_snapshot, run_experiment, run_removal_suite, DataSource, ExperimentConfig, Removal};
use heteroseg_core::models::{load_checkpoint, ArchConfig, ModelKind, Setting, TrainConfig};

fn spec(id: &str, avail: &[Structure], b: f64, seed: u64) -> SyntheticCenterSpec {
    SyntheticCenterSpec {
        center_id: id.into(),
        n_samples: 10,
        availability: LabelAvailability::new(avail),
        brightness: b,
        contrast: 1.0,
        noise_sigma: 0.03,
        scale: (0.9, 1.05),
        shift: 0.03,
        axis_jitter: 0.07,
        image_size: 32,
        seed,
    }
}

fn tiny(model: ModelKind, out: &std::path::Path) -> ExperimentConfig {
    use Structure::*;
    ExperimentConfig {
        model,
        setting: Setting::LhcFull,
        removal: None,
        seed: Some(5),
        dtype: Default::default(),
        split_fraction: 0.8,
        overlays: true,
        output_dir: out.to_path_buf(),
        data: DataSource::Synthetic {
            centers: vec![
                spec("A", &[Lungs], 0.1, 1),
                spec("B", &[Lungs, Heart], -0.1, 2),
                spec("C", &[Lungs, Heart, Clavicles], 0.0, 3),
            ],
        },
        train: TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, ..TrainConfig::default() },
        arch: ArchConfig {
            input_size: 32,
            encoder_channels: vec![4, 4, 8, 8],
            latent_dim: 8,
            chebyshev_order: 3,
            decoder_channels: vec![8, 8],
            unet_channels: vec![4, 8],
        },
    }
}

#[test]
fn run_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let out = dir.path().join(kind.name());
        let run = run_experiment(&tiny(kind, &out)).unwrap();
        for p in [&run.checkpoint, &run.report_path, &run.step_log, &run.epoch_log, &run.snapshot] {
            assert!(p.is_file(), "{} missing", p.display());
        }
        // 2 test records per center.
        assert_eq!(run.overlays.len(), 6);
        let cells: Vec<(String, Structure)> = run.report.rows.iter().map(|r| (r.center.clone(), r.structure)).collect();
        assert_eq!(cells.len(), 9, "every center has full ground truth in synthetic data");
        let (model, header) = load_checkpoint::<f64>(&run.checkpoint).unwrap();
        assert_eq!(model.kind(), kind);
        assert_eq!(header.metadata["setting"], "LHC_full");

        let again = rerun_snapshot(&out, &dir.path().join(format!("{}-rerun", kind.name()))).unwrap();
        assert_eq!(again.report, run.report);
        assert_eq!(std::fs::read(&again.report_path).unwrap(), std::fs::read(&run.report_path).unwrap());
    }
}

#[test]
fn removal_suite_flags_one_cell_per_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny(ModelKind::HybridGNet, dir.path());
    base.overlays = false;
    let suite = run_removal_suite(&base).unwrap();
    assert_eq!(suite.runs.len(), 4);
    for (run, exp) in suite.runs.iter().zip(Removal::ALL) {
        let flagged: Vec<_> = run.report.rows.iter().filter(|r| r.removed).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].structure, exp.structure());
        let want = if matches!(exp, Removal::Exp1 | Removal::Exp2) { "C" } else { "B" };
        assert_eq!(flagged[0].center, want);
        assert!(run.report.rows.iter().all(|r| r.experiment.as_deref() == Some(exp.name())));
    }
    let text = std::fs::read_to_string(&suite.report_path).unwrap();
    assert!(text.lines().next().unwrap().ends_with("experiment,removed"));

    base.setting = Setting::LhcStrict;
    assert_eq!(run_removal_suite(&base).unwrap_err().exit_code(), 2);
}

#[test]
fn missing_multi_structure_center_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ModelKind::HybridGNet, dir.path());
    if let DataSource::Synthetic { centers } = &mut cfg.data {
        centers.truncate(2);
    }
    cfg.removal = Some(Removal::Exp1);
    assert_eq!(run_experiment(&cfg).unwrap_err().exit_code(), 3);
}
