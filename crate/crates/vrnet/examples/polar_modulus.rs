//! Directional Young's modulus E(theta): constant for isotropic media,
//! two-lobed for an axis-aligned laminate, and diagonal-asymmetric once the
//! laminate is rotated by 45 degrees (the shear-normal coupling optimum).
//!
//!     cargo run --release --example polar_modulus

use vrnet::fftsolver::{analytic_laminate, Axis};
use vrnet::inverse::{coupling_ratio, diagonal_asymmetry};
use vrnet::mandel::{directional_young, plane_strain_stiffness, rotate_plane, IsotropicPhase};

fn main() -> vrnet::Result<()> {
    let stiff = IsotropicPhase::new(1e9, 0.3)?;
    let soft = IsotropicPhase::new(1e6, 0.49)?;

    let iso = plane_strain_stiffness(&stiff);
    let laminate = analytic_laminate((&stiff, &soft), 0.5, Axis::X1)?;
    let rotated = rotate_plane(&laminate, std::f64::consts::FRAC_PI_4)?;

    println!(
        "{:>8} {:>14} {:>14} {:>14}",
        "theta", "isotropic", "laminate", "laminate@45"
    );
    for k in 0..=8 {
        let theta = std::f64::consts::PI * k as f64 / 8.0;
        println!(
            "{:>7.0}d {:>14.4e} {:>14.4e} {:>14.4e}",
            theta.to_degrees(),
            directional_young(&iso, theta)?,
            directional_young(&laminate, theta)?,
            directional_young(&rotated, theta)?
        );
    }
    println!(
        "\ncoupling ratio:    laminate {:.4}, rotated {:.4}",
        coupling_ratio(&laminate),
        coupling_ratio(&rotated)
    );
    println!(
        "diagonal asymmetry: laminate {:.4}, rotated {:.4}",
        diagonal_asymmetry(&laminate)?,
        diagonal_asymmetry(&rotated)?
    );
    println!("rotating the laminate moves the anisotropy into the shear-normal entries");
    Ok(())
}
