use pcnet_core::gradcheck::{run_all, table};
use pcnet_core::{Error, Result};

pub fn run(instances: usize, seed: u64) -> Result<()> {
    let results = run_all(seed, instances)?;
    print!("{}", table(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "finite-difference check failed for: {}",
            failed.join(", ")
        )))
    }
}
