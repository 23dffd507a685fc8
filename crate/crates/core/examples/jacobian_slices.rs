//! Renders a synthetic case as PGM panels: fixed, moving, and the
//! Jacobian determinant of the true field, all through the middle of the
//! volume along z.

use std::path::PathBuf;

use defreg::synth::{generate_case, SynthConfig};
use defreg::volume::{export_slice, Axis};
use defreg::warp::{folding_fraction, jacobian_determinant};

fn main() -> defreg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "slices_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| defreg::Error::io(&out, e))?;

    let case = generate_case(&SynthConfig { dims: [48, 48, 48], cavity: true, seed: 2, ..Default::default() })?;
    let jac = jacobian_determinant(&case.true_field)?;
    println!(
        "Jacobian in [{:.3}, {:.3}], folding fraction {}",
        jac.min(),
        jac.max(),
        folding_fraction(&jac)
    );

    let z = 24;
    export_slice(&case.fixed, Axis::Z, z, out.join("fixed.pgm"))?;
    export_slice(&case.moving, Axis::Z, z, out.join("moving.pgm"))?;
    export_slice(&jac.to_volume(), Axis::Z, z, out.join("jacobian.pgm"))?;
    println!("wrote fixed.pgm, moving.pgm, jacobian.pgm to {}", out.display());
    Ok(())
}
