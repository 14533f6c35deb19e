use crate::dataset::{self, ResolvedData};
use crate::run_dir::{self, DirLock};
use crate::{ConfigOverrides, DatasetArgs};
use pcnet_core::data::{batch_tensor, channel_stats};
use pcnet_core::model::Model;
use pcnet_core::pairing::{sample_batch, select_pairs};
use pcnet_core::rng::stream_rng;
use pcnet_core::scalar::{Dtype, Scalar};
use pcnet_core::training::{checkpoint, TrainConfig};
use pcnet_core::{Error, Result};
use std::path::PathBuf;

pub fn run(
    data: DatasetArgs,
    ckpt: Option<PathBuf>,
    overrides: ConfigOverrides,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let config = match &ckpt {
        Some(path) => {
            let (mut config, _) = checkpoint::peek(path)?;
            super::apply_overrides(&mut config, &overrides)?;
            config
        }
        None => super::resolve_config(&overrides)?,
    };
    match config.precision {
        Dtype::F32 => run_typed::<f32>(config, data, ckpt, out_dir),
        Dtype::F64 => run_typed::<f64>(config, data, ckpt, out_dir),
    }
}

fn run_typed<T: Scalar>(
    config: TrainConfig,
    data: DatasetArgs,
    ckpt: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let ResolvedData { train, .. } = dataset::resolve(&data, config.seed, config.input_hw)?;
    let (model, stats) = match &ckpt {
        Some(path) => {
            let state = checkpoint::load::<T>(path, train.num_classes())?;
            (state.model, state.stats)
        }
        None => {
            let mut init_rng = stream_rng(config.seed, "init");
            let model = Model::<T>::init(config.model_config(train.num_classes()), &mut init_rng)?;
            (model, channel_stats(&train)?)
        }
    };

    let labels = train.labels();
    let mut sampler = stream_rng(config.seed, "sampler");
    let batch = sample_batch(&labels, &config.batch_spec(), &mut sampler)?;
    let refs: Vec<&pcnet_core::data::Image> =
        batch.iter().map(|&(i, _)| &train.items[i].image).collect();
    let images = batch_tensor::<T>(&refs, &stats);
    let features = model.backbone.pooled_features(&images)?;
    let batch_labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();

    let mut pairing_rng = stream_rng(config.seed, "pairing");
    let assignment = select_pairs(
        &features,
        &batch_labels,
        config.metric,
        config.strategy,
        &mut pairing_rng,
    )?;

    let dir = run_dir::resolve("pairs", out_dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let path = dir.join("pairs.csv");
    std::fs::write(&path, assignment.to_csv())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    println!(
        "selected pairs for {} anchors ({} metric, {} strategy) -> {}",
        assignment.anchors.len(),
        config.metric,
        config.strategy,
        path.display()
    );
    Ok(())
}
