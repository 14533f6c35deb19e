use crate::dataset::{self, ResolvedData};
use crate::run_dir::{self, DirLock};
use crate::DatasetArgs;
use pcnet_core::evaluation::{export_attention_maps, prepare};
use pcnet_core::scalar::{Dtype, Scalar};
use pcnet_core::training::checkpoint;
use pcnet_core::{Error, Result};
use std::path::PathBuf;

pub fn run(
    ckpt: PathBuf,
    data: DatasetArgs,
    index_a: usize,
    index_b: usize,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let (config, _) = checkpoint::peek(&ckpt)?;
    match config.precision {
        Dtype::F32 => run_typed::<f32>(ckpt, data, index_a, index_b, out_dir),
        Dtype::F64 => run_typed::<f64>(ckpt, data, index_a, index_b, out_dir),
    }
}

fn run_typed<T: Scalar>(
    ckpt: PathBuf,
    data: DatasetArgs,
    index_a: usize,
    index_b: usize,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let (config, _) = checkpoint::peek(&ckpt)?;
    let ResolvedData { test, .. } = dataset::resolve(&data, config.seed, config.input_hw)?;
    let state = checkpoint::load::<T>(&ckpt, test.num_classes())?;
    let prepared = prepare::<T>(&test, &state.stats)?;
    for idx in [index_a, index_b] {
        if idx >= prepared.images.len() {
            return Err(Error::Config(format!(
                "test index {} out of range 0..{}",
                idx,
                prepared.images.len()
            )));
        }
    }

    let dir = run_dir::resolve("export-attn", out_dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let files = export_attention_maps(
        &state.model,
        &prepared.images[index_a],
        &prepared.images[index_b],
        &dir,
    )?;
    println!(
        "exported {} files for pair ({}, {}) to {}",
        files.len(),
        index_a,
        index_b,
        dir.display()
    );
    Ok(())
}
