//! Preprocessing chain applied before registration: centre crop, z-score
//! intensity normalization, and the 2x2x2 block-mean pyramid.

use defreg::register::downsample_volume;
use defreg::volume::{center_crop, zscore_normalize, Grid, Volume};

fn main() -> defreg::Result<()> {
    let grid = Grid::new([70, 80, 66], [1.0, 1.0, 1.2])?;
    let raw = Volume::from_fn(grid, |i, j, k| {
        let (x, y, z) = (i as f64 - 35.0, j as f64 - 40.0, k as f64 - 33.0);
        400.0 + 250.0 * (-(x * x + y * y + z * z) / 600.0).exp() + 30.0 * (i as f64 / 3.0).sin()
    });

    let cropped = center_crop(&raw, [64, 64, 64])?;
    let normalized = zscore_normalize(&cropped);
    let (mean, std) = normalized.moments();
    println!("raw {:?} -> cropped {:?}, origin {:?}", raw.dims(), cropped.dims(), cropped.origin());
    println!("after z-score: mean {mean:.2e}, std {std:.6}");

    let mut level = normalized;
    for n in 1..=3 {
        level = downsample_volume(&level)?;
        println!("level {n}: dims {:?} spacing {:?} origin {:?}", level.dims(), level.spacing(), level.origin());
    }
    Ok(())
}
