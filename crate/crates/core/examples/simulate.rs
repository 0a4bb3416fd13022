//! Simulate a confounded observational cohort and write it as CSV.
//!
//! `cargo run --example simulate -- [n] [seed] [out.csv]`

use trialforge::data::{validate_dataset, write_longitudinal_csv};
use trialforge::simgen::{simulate_dataset, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let out = args.next().unwrap_or_else(|| "simulated.csv".into());

    let ds = simulate_dataset(&SimConfig {
        n,
        seed,
        ..Default::default()
    })?;
    assert!(validate_dataset(&ds).is_clean());

    let recs = ds.records();
    let treated = recs.iter().filter(|r| r.treatment == 1).count();
    let events = recs.iter().filter(|r| r.outcome == 1).count();
    let censored = recs.iter().filter(|r| r.censored == 1).count();
    println!("{} individuals, {} person-periods", ds.n_individuals(), recs.len());
    println!("treated periods {treated}, outcome events {events}, censored {censored}");

    write_longitudinal_csv(&ds, &out)?;
    println!("wrote {out}");
    Ok(())
}
