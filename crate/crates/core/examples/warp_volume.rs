//! Pull-back warping with trilinear interpolation: a constant displacement
//! field shifts the sampled image, and local NCC measures the match.

use defreg::loss::{ncc, LossConfig};
use defreg::volume::{Grid, Volume};
use defreg::warp::{warp_volume, DisplacementField};

fn main() -> defreg::Result<()> {
    let grid = Grid::new([32, 32, 32], [1.0; 3])?;
    let pattern = |shift: [f64; 3]| {
        Volume::from_fn(grid, move |i, j, k| {
            let (x, y, z) = (i as f64 - shift[0], j as f64 - shift[1], k as f64 - shift[2]);
            (x / 3.0).sin() * (y / 4.0).cos() + 0.5 * (z / 2.5).sin() + 0.3 * ((x + y) / 2.0).cos()
        })
    };
    let fixed = pattern([0.0; 3]);
    let moving = pattern([2.5, -1.0, 0.0]);
    let cfg = LossConfig::default();

    // Pull-back: warped(x) = moving(x + u), so u points from fixed to moving.
    for u in [[0.0, 0.0, 0.0], [1.0, -0.5, 0.0], [2.5, -1.0, 0.0]] {
        let warped = warp_volume(&moving, &DisplacementField::constant(grid, u));
        println!("u = {u:?}  NCC {:.4}", ncc(&fixed, &warped, &cfg)?);
    }
    Ok(())
}
