use crate::dataset::{self, ResolvedData};
use crate::run_dir::{self, DirLock, Manifest};
use crate::{ConfigOverrides, DatasetArgs};
use pcnet_core::data::split_manifest;
use pcnet_core::scalar::{Dtype, Scalar};
use pcnet_core::training::{self, checkpoint, metrics_csv, TrainConfig, TrainState};
use pcnet_core::{Error, Result};
use std::path::PathBuf;

pub fn run(
    mut data: DatasetArgs,
    overrides: ConfigOverrides,
    out_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    from_manifest: Option<PathBuf>,
) -> Result<()> {
    let config = if let Some(path) = &from_manifest {
        let manifest = Manifest::read(path)?;
        data.dataset = manifest.dataset.clone();
        data.synth_classes = manifest.synth_classes;
        data.synth_per_class = manifest.synth_per_class;
        data.train_fraction = manifest.train_fraction;
        let mut config = manifest.config;
        apply_cli_epochs(&mut config, &overrides);
        config
    } else if let Some(path) = &resume {
        let (mut config, epoch) = checkpoint::peek(path)?;
        log::info!("resuming from {} at epoch {}", path.display(), epoch);
        apply_cli_epochs(&mut config, &overrides);
        config
    } else {
        super::resolve_config(&overrides)?
    };
    config.validate()?;

    let dir = run_dir::resolve("train", out_dir)?;
    let _lock = DirLock::acquire(&dir)?;
    match config.precision {
        Dtype::F32 => run_typed::<f32>(config, data, dir, resume),
        Dtype::F64 => run_typed::<f64>(config, data, dir, resume),
    }
}

/// On resume or manifest rerun the stored config wins except for the
/// explicitly requested target epoch count.
fn apply_cli_epochs(config: &mut TrainConfig, overrides: &ConfigOverrides) {
    if let Some(epochs) = overrides.epochs {
        config.epochs = epochs;
    }
}

fn run_typed<T: Scalar>(
    config: TrainConfig,
    data: DatasetArgs,
    dir: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let ResolvedData {
        train,
        test,
        fingerprint,
    } = dataset::resolve(&data, config.seed, config.input_hw)?;
    log::info!(
        "dataset: {} train / {} test items, {} classes, fingerprint {}",
        train.len(),
        test.len(),
        train.num_classes(),
        &fingerprint[..16]
    );

    let manifest = Manifest {
        command: "train".into(),
        dataset: data.dataset.clone(),
        synth_classes: data.synth_classes,
        synth_per_class: data.synth_per_class,
        train_fraction: data.train_fraction,
        dataset_fingerprint: fingerprint,
        artifacts: vec![
            "metrics.csv".into(),
            "final.ckpt".into(),
            "split_manifest.csv".into(),
        ],
        config: config.clone(),
    };
    manifest.write(&dir)?;
    let split_path = dir.join("split_manifest.csv");
    std::fs::write(&split_path, split_manifest(&train, &test))
        .map_err(|e| Error::io(split_path.display().to_string(), e))?;

    let mut state: TrainState<T> = match &resume {
        Some(path) => {
            let mut state = checkpoint::load::<T>(path, train.num_classes())?;
            state.config.epochs = config.epochs;
            state
        }
        None => TrainState::new(config, &train)?,
    };

    let rows = training::train(&mut state, &train, &test, Some(&dir))?;
    let metrics_path = dir.join("metrics.csv");
    // A resumed run appends its rows after the prefix it inherited.
    let mut csv = metrics_csv(&rows);
    if resume.is_some() {
        csv = format!("# resumed; rows cover epochs {}..{}\n{}",
            rows.first().map(|r| r.epoch).unwrap_or(0),
            rows.last().map(|r| r.epoch).unwrap_or(0),
            csv);
    }
    std::fs::write(&metrics_path, csv)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    if let Some(last) = rows.last() {
        println!(
            "trained to epoch {}: L={:.5} train_acc={:.4} test_OA={:.4}",
            last.epoch, last.total, last.train_acc, last.test_oa
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
