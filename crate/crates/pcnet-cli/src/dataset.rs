//! Dataset resolution shared by the subcommands: either the in-memory
//! synthetic texture set or a class-per-folder tree, followed by the
//! stratified train/test split.
//!
//! Generation and splitting draw from the `datagen` and `split` streams of
//! the run seed, so a dataset is fully determined by `(seed, args)`.

use crate::DatasetArgs;
use pcnet_core::data::{load_folder_dataset, split, synthetic::generate_synthetic, Dataset};
use pcnet_core::rng::stream_seed;
use pcnet_core::Result;
use std::path::Path;

pub struct ResolvedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Content hash of the full dataset before splitting.
    pub fingerprint: String,
}

pub fn resolve(args: &DatasetArgs, seed: u64, input_hw: (usize, usize)) -> Result<ResolvedData> {
    let full = if args.dataset == "synth" {
        generate_synthetic(
            args.synth_classes,
            args.synth_per_class,
            input_hw,
            stream_seed(seed, "datagen"),
        )?
    } else {
        load_folder_dataset(Path::new(&args.dataset), input_hw)?
    };
    let fingerprint = full.fingerprint();
    let (train, test) = split(&full, args.train_fraction, stream_seed(seed, "split"))?;
    Ok(ResolvedData {
        train,
        test,
        fingerprint,
    })
}
