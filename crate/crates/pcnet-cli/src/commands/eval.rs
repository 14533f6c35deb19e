use crate::dataset::{self, ResolvedData};
use crate::run_dir::{self, DirLock};
use crate::DatasetArgs;
use pcnet_core::evaluation::{evaluate, prepare, EvalOptions};
use pcnet_core::scalar::{Dtype, Scalar};
use pcnet_core::training::checkpoint;
use pcnet_core::{Error, Result};
use std::path::PathBuf;

pub fn run(
    ckpt: PathBuf,
    data: DatasetArgs,
    out_dir: Option<PathBuf>,
    eval_time_eca: bool,
) -> Result<()> {
    let (config, _) = checkpoint::peek(&ckpt)?;
    match config.precision {
        Dtype::F32 => run_typed::<f32>(ckpt, data, out_dir, eval_time_eca),
        Dtype::F64 => run_typed::<f64>(ckpt, data, out_dir, eval_time_eca),
    }
}

fn run_typed<T: Scalar>(
    ckpt: PathBuf,
    data: DatasetArgs,
    out_dir: Option<PathBuf>,
    eval_time_eca: bool,
) -> Result<()> {
    let (config, _) = checkpoint::peek(&ckpt)?;
    let ResolvedData { test, .. } = dataset::resolve(&data, config.seed, config.input_hw)?;
    let state = checkpoint::load::<T>(&ckpt, test.num_classes())?;
    let prepared = prepare::<T>(&test, &state.stats)?;
    let report = evaluate(
        &state.model,
        &prepared,
        &EvalOptions {
            use_eca: eval_time_eca,
        },
    )?;
    println!("{}", report.summary());

    let dir = run_dir::resolve("eval", out_dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let path = dir.join("confusion.csv");
    std::fs::write(&path, report.confusion_csv())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, format!("{}\n", report.summary()))
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    println!("artifacts in {}", dir.display());
    Ok(())
}
