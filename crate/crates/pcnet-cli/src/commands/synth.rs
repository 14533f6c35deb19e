use pcnet_core::data::{synthetic::generate_synthetic, write_dataset_tree};
use pcnet_core::Result;
use std::path::PathBuf;

pub fn run(classes: usize, per_class: usize, size: usize, seed: u64, out: PathBuf) -> Result<()> {
    let ds = generate_synthetic(classes, per_class, (size, size), seed)?;
    write_dataset_tree(&ds, &out)?;
    println!(
        "wrote {} images ({} classes x {}) at {}x{} to {} (fingerprint {})",
        ds.len(),
        classes,
        per_class,
        size,
        size,
        out.display(),
        &ds.fingerprint()[..16]
    );
    Ok(())
}
