//! Threshold sweep of one amplitude matrix: effective eigenvalues wander
//! inside the shrinking Voigt-Reuss envelope and jump at topology
//! transitions (flagged via periodic connected-component counts).
//!
//!     cargo run --release --example threshold_sweep

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vrnet::fftsolver::{threshold_sweep, SolverConfig};
use vrnet::mandel::IsotropicPhase;
use vrnet::microgen::AmplitudeGrid;

fn main() -> vrnet::Result<()> {
    let stiff = IsotropicPhase::new(1e9, 0.3)?;
    let soft = IsotropicPhase::new(1e6, 0.49)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = AmplitudeGrid::sample(&mut rng, 3, 3)?;

    let rows = threshold_sweep(&grid, (&stiff, &soft), 48, 40, &SolverConfig::default())?;
    println!(
        "{:>6} {:>7} {:>12} {:>12} {:>12} {:>6} {:>6} {:>10}",
        "tau", "c0", "eig_min", "eig_mid", "eig_max", "comp0", "comp1", "transition"
    );
    for row in &rows {
        let e = row.eigenvalues.unwrap_or([f64::NAN; 3]);
        println!(
            "{:>6.3} {:>7.3} {:>12.4e} {:>12.4e} {:>12.4e} {:>6} {:>6} {:>10}",
            row.tau,
            row.c0,
            e[0],
            e[1],
            e[2],
            row.components_phase0,
            row.components_phase1,
            if row.transition { "<-- here" } else { "" }
        );
    }
    let transitions = rows.iter().filter(|r| r.transition).count();
    println!("\n{transitions} topology transitions along 40 thresholds");
    Ok(())
}
