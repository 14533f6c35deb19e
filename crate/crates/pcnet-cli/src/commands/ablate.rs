use crate::dataset::{self, ResolvedData};
use crate::run_dir::{self, DirLock};
use crate::{ConfigOverrides, DatasetArgs};
use pcnet_core::evaluation::{ablation_csv, default_grid, run_ablation};
use pcnet_core::scalar::{Dtype, Scalar};
use pcnet_core::training::TrainConfig;
use pcnet_core::{Error, Result};
use std::path::PathBuf;

pub fn run(
    data: DatasetArgs,
    overrides: ConfigOverrides,
    out_dir: Option<PathBuf>,
    sections: Option<String>,
) -> Result<()> {
    let config = super::resolve_config(&overrides)?;
    match config.precision {
        Dtype::F32 => run_typed::<f32>(config, data, out_dir, sections),
        Dtype::F64 => run_typed::<f64>(config, data, out_dir, sections),
    }
}

fn run_typed<T: Scalar>(
    base: TrainConfig,
    data: DatasetArgs,
    out_dir: Option<PathBuf>,
    sections: Option<String>,
) -> Result<()> {
    let ResolvedData { train, test, .. } = dataset::resolve(&data, base.seed, base.input_hw)?;
    let mut rows = default_grid(&base);
    if let Some(filter) = sections {
        let wanted: Vec<&str> = filter.split(',').map(|s| s.trim()).collect();
        rows.retain(|r| wanted.contains(&r.section.as_str()));
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "no grid rows match sections '{}'",
                filter
            )));
        }
    }
    log::info!("running {} ablation rows with shared seed {}", rows.len(), base.seed);

    let dir = run_dir::resolve("ablate", out_dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let outcomes = run_ablation::<T>(&rows, &train, &test, &base, Some(&dir))?;
    print!("{}", ablation_csv(&outcomes));
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.error.is_some())
        .map(|o| o.row.id.as_str())
        .collect();
    if !failed.is_empty() {
        log::warn!("{} rows failed: {}", failed.len(), failed.join(", "));
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
