//! Compares the analytic gradient of the registration loss with central
//! finite differences on a small random pair.

use defreg::loss::{overall_loss, overall_value, LossConfig};
use defreg::rng::SplitMix64;
use defreg::volume::{Grid, Volume};
use defreg::warp::DisplacementField;

fn main() -> defreg::Result<()> {
    let grid = Grid::new([8, 8, 8], [1.0; 3])?;
    let mut rng = SplitMix64::new(1);
    let fixed = Volume::from_fn(grid, |_, _, _| rng.normal());
    let moving = Volume::from_fn(grid, |_, _, _| rng.normal());
    // Keep sample points off grid planes, where trilinear interpolation has kinks.
    let field = DisplacementField::from_fn(grid, |_| {
        let mut u = [0.0; 3];
        for c in &mut u {
            *c = 0.3 + 0.4 * rng.next_f64();
        }
        u
    });
    let cfg = LossConfig { ncc_window: 5, reg_weight: 0.5, ..Default::default() };

    let (value, grad) = overall_loss(&fixed, &moving, &field, &cfg)?;
    println!("loss {:.6}  (similarity {:.6}, smoothness {:.6})", value.total, value.similarity, value.smoothness);

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut probe = field.clone();
    for idx in (0..field.as_flat().len()).step_by(37) {
        let x = field.as_flat()[idx];
        probe.as_flat_mut()[idx] = x + h;
        let up = overall_value(&fixed, &moving, &probe, &cfg)?.total;
        probe.as_flat_mut()[idx] = x - h;
        let dn = overall_value(&fixed, &moving, &probe, &cfg)?.total;
        probe.as_flat_mut()[idx] = x;
        let numeric = (up - dn) / (2.0 * h);
        let analytic = grad.as_flat()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("max relative error over sampled components: {worst:.2e}");
    Ok(())
}
