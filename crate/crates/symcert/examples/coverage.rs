//! Runs the default coverage study and prints the summary as JSON.

use symcert::experiments::{run_coverage, CoverageConfig};

fn main() -> symcert::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let summary = run_coverage(&CoverageConfig {
        trials,
        ..CoverageConfig::default()
    })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
