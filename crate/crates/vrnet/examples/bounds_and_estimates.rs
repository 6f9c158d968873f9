//! First-order bounds and mean-field estimates for the production phase
//! pair (stiff 1 GPa / nu 0.3 against soft 1 MPa / nu 0.49) across volume
//! fractions.
//!
//!     cargo run --release --example bounds_and_estimates

use vrnet::bounds::{
    hashin_shtrikman_scalar, hill_average, mori_tanaka_circular, reuss_bound, voigt_bound,
    PhasePair,
};
use vrnet::mandel::{plane_strain_stiffness, IsotropicPhase};

fn main() -> vrnet::Result<()> {
    let stiff = IsotropicPhase::new(1e9, 0.3)?;
    let soft = IsotropicPhase::new(1e6, 0.49)?;
    println!(
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "c0", "reuss_max", "hs_lower", "mori_tanaka", "hill", "hs_upper", "voigt_max"
    );
    for c0 in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let pair = PhasePair::new(
            plane_strain_stiffness(&stiff),
            plane_strain_stiffness(&soft),
            c0,
        )?;
        let max_eig = |c: &vrnet::mandel::MandelMatrix| c.eigenvalues()[2];
        let (lo, hi) = hashin_shtrikman_scalar(&pair, true)?;
        println!(
            "{:>5.2} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            c0,
            max_eig(&reuss_bound(&pair)?),
            max_eig(&lo),
            max_eig(&mori_tanaka_circular(&pair)?),
            max_eig(&hill_average(&pair)?),
            max_eig(&hi),
            max_eig(&voigt_bound(&pair))
        );
    }
    println!("\nlargest eigenvalue (Pa) of each estimate; every column nests inside the next.");
    Ok(())
}
