//! Periodic unit cells from thresholded cosine fields: random amplitude
//! matrices, symmetry classes, threshold families. Prints ASCII previews and
//! writes PGM files next to the working directory.
//!
//!     cargo run --release --example generate_microstructures

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vrnet::microgen::{
    field, range_normalize, symmetrize, threshold_hard, AmplitudeGrid, MicroImage, MicroSpec,
    SymmetryClass, T_PRODUCTION,
};

fn preview(img: &MicroImage) {
    let step = img.height() / 24;
    for row in (0..img.height()).step_by(step.max(1)) {
        let line: String = (0..img.width())
            .step_by(step.max(1))
            .map(|col| if img.get(row, col) >= 0.5 { '#' } else { '.' })
            .collect();
        println!("  {line}");
    }
}

fn main() -> vrnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = AmplitudeGrid::sample(&mut rng, 5, 5)?;

    for (class, name) in [
        (SymmetryClass::None, "none"),
        (SymmetryClass::Diagonal, "diagonal"),
        (SymmetryClass::Orthotropic, "orthotropic"),
        (SymmetryClass::Square, "square"),
    ] {
        let sym = symmetrize(&grid, class)?;
        let spec = MicroSpec::new(&sym, 0.5, T_PRODUCTION)?;
        let f = range_normalize(&field(&spec, 96, 96)?);
        let img = threshold_hard(&f, 0.5)?;
        println!("symmetry {name}: c0 = {:.3}", img.c0());
        preview(&img);
        let path = format!("cell_{name}.pgm");
        vrnet::cli::pgm::write_pgm(&img, std::path::Path::new(&path))?;
        println!("  -> {path}\n");
    }

    // one amplitude matrix, sweeping the threshold
    println!("threshold family of one random cell (c0 grows with tau):");
    let spec = MicroSpec::new(&grid, 0.5, T_PRODUCTION)?;
    let f = range_normalize(&field(&spec, 96, 96)?);
    for tau in [0.2, 0.4, 0.6, 0.8] {
        let img = threshold_hard(&f, tau)?;
        println!("  tau = {tau:.1}: c0 = {:.3}", img.c0());
    }
    Ok(())
}
