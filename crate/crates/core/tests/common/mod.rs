//! Independent oracles shared by the integration suites: finite
//! differences, brute-force reductions and small synthetic inputs.

#![allow(dead_code)]

use defreg::loss::{overall_loss, overall_value, similarity_loss, smoothness_loss, smoothness_value, LossConfig};
use defreg::model::{convnet_backward, convnet_forward, ConvNetConfig, ConvNetParameters, Mode};
use defreg::rng::SplitMix64;
use defreg::volume::{Grid, Volume};
use defreg::warp::DisplacementField;

/// Relative error against `max(|a|, |n|, 1e-8)`, maximized over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Per-voxel noise level of the random test volumes. Strong texture keeps
/// gradient components well above the rounding floor of a finite
/// difference.
const NOISE: f64 = 0.5;

/// Sum of Gaussian blobs plus per-voxel noise.
pub fn smooth_volume(dims: [usize; 3], seed: u64) -> Volume {
    let g = Grid::new(dims, [1.0; 3]).unwrap();
    let mut rng = SplitMix64::new(seed);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..6)
        .map(|_| {
            (
                [
                    rng.uniform(0.0, dims[0] as f64 - 1.0),
                    rng.uniform(0.0, dims[1] as f64 - 1.0),
                    rng.uniform(0.0, dims[2] as f64 - 1.0),
                ],
                rng.uniform(-1.0, 1.0),
                rng.uniform(2.0, 6.0),
            )
        })
        .collect();
    let mut noise = rng.split();
    Volume::from_fn(g, |i, j, k| {
        blobs
            .iter()
            .map(|(c, a, s)| {
                let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                a * (-d2 / s).exp()
            })
            .sum::<f64>()
            + NOISE * noise.normal()
    })
}

pub fn random_field(grid: Grid, seed: u64, scale: f64) -> DisplacementField {
    let mut rng = SplitMix64::new(seed);
    DisplacementField::from_fn(grid, |_| {
        [rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)]
    })
}

/// Random field on a unit-spacing grid whose warped sample positions all
/// sit at least `gap` voxels away from a grid plane, so every component
/// lies inside one smooth piece of the trilinear interpolant.
pub fn generic_field(grid: Grid, seed: u64, scale: f64, gap: f64) -> DisplacementField {
    let mut rng = SplitMix64::new(seed);
    let mut draw = || loop {
        let v = rng.uniform(-scale, scale);
        let frac = v - v.round();
        if frac.abs() > gap {
            return v;
        }
    };
    DisplacementField::from_fn(grid, |_| [draw(), draw(), draw()])
}

/// Central differences of `f` over every field component.
pub fn fd_field(field: &DisplacementField, h: f64, f: impl Fn(&DisplacementField) -> f64) -> Vec<f64> {
    let mut work = field.clone();
    (0..field.as_flat().len())
        .map(|i| {
            let x = work.as_flat()[i];
            work.as_flat_mut()[i] = x + h;
            let up = f(&work);
            work.as_flat_mut()[i] = x - h;
            let dn = f(&work);
            work.as_flat_mut()[i] = x;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Gradient errors of (similarity, smoothness, overall) on one random 8^3
/// instance at step 1e-4.
pub fn loss_gradient_errors(seed: u64) -> (f64, f64, f64) {
    let fixed = smooth_volume([8, 8, 8], 2 * seed + 1);
    let moving = smooth_volume([8, 8, 8], 2 * seed + 2);
    let u = generic_field(*fixed.grid(), seed + 100, 0.75, 1e-2);
    let cfg = LossConfig { ncc_window: 5, reg_weight: 0.5, ..Default::default() };
    let h = 1e-4;

    let (_, g_sim) = similarity_loss(&fixed, &moving, &u, &cfg).unwrap();
    let n_sim = fd_field(&u, h, |w| similarity_loss(&fixed, &moving, w, &cfg).unwrap().0);

    // The smoothness term is quadratic, so central differences are exact up
    // to rounding; a small-amplitude field keeps that rounding negligible.
    let us = random_field(*fixed.grid(), seed + 200, 0.01);
    let (_, g_sm) = smoothness_loss(&us).unwrap();
    let n_sm = fd_field(&us, h, |w| smoothness_value(w).unwrap());

    let (_, g_all) = overall_loss(&fixed, &moving, &u, &cfg).unwrap();
    let n_all = fd_field(&u, h, |w| overall_value(&fixed, &moving, w, &cfg).unwrap().total);

    (
        max_rel_err(g_sim.as_flat(), &n_sim),
        max_rel_err(g_sm.as_flat(), &n_sm),
        max_rel_err(g_all.as_flat(), &n_all),
    )
}

/// Which trilinear cell every warped sample falls in; equal signatures mean
/// the warp is linear between two fields.
fn warp_cell_signature(moving: &Volume, field: &DisplacementField) -> Vec<i64> {
    let g = *field.grid();
    let mg = moving.grid();
    let mut out = Vec::with_capacity(3 * g.len());
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let x = g.world(i, j, k);
                let u = field.data()[g.index(i, j, k)];
                let c = mg.to_voxel([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
                for a in 0..3 {
                    let max = (mg.dims[a] - 1) as f64;
                    out.push(if c[a] < 0.0 { -1 } else if c[a] > max { i64::MAX } else { c[a].floor() as i64 });
                }
            }
        }
    }
    out
}

/// Finite-difference check of every trainable network parameter through
/// the full loss. The step starts at 1e-3 and is halved until both probes
/// stay on the same smooth piece (same ReLU masks, pool winners and warp
/// cells) as the base point.
pub fn network_gradient_error(seed: u64, use_batchnorm: bool) -> f64 {
    let fixed = smooth_volume([8, 8, 8], 1000 + seed);
    let moving = smooth_volume([8, 8, 8], 2000 + seed);
    let cfg = ConvNetConfig { levels: 1, base_filters: 2, use_batchnorm, ..Default::default() };
    let mut params = ConvNetParameters::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0xabc);
    // The zero head would block every upstream gradient; randomize it and
    // the zero biases so each layer is exercised.
    for t in params.trainable_mut() {
        if t.data.iter().all(|&v| v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.uniform(-0.3, 0.3));
        }
    }
    let loss_cfg = LossConfig { ncc_window: 5, reg_weight: 0.5, ..Default::default() };
    let probe = |p: &ConvNetParameters| {
        let (u, cache) = convnet_forward(p, &fixed, &moving, Mode::Train).unwrap();
        let v = overall_value(&fixed, &moving, &u, &loss_cfg).unwrap().total;
        (v, cache.pattern_signature(), warp_cell_signature(&moving, &u))
    };

    let (u, cache) = convnet_forward(&params, &fixed, &moving, Mode::Train).unwrap();
    let (_, gfield) = overall_loss(&fixed, &moving, &u, &loss_cfg).unwrap();
    let grads = convnet_backward(&params, &cache, &gfield).unwrap();
    let analytic: Vec<f64> = grads.trainable().iter().flat_map(|t| t.data.clone()).collect();
    let base_pattern = cache.pattern_signature();
    let base_cells = warp_cell_signature(&moving, &u);

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = params.trainable().len();
    for ti in 0..n_tensors {
        for i in 0..params.trainable()[ti].data.len() {
            let x = params.trainable()[ti].data[i];
            let mut h = 1e-3 * x.abs().max(0.1);
            let estimate = loop {
                params.trainable_mut()[ti].data[i] = x + h;
                let (up, pu, cu) = probe(&params);
                params.trainable_mut()[ti].data[i] = x - h;
                let (dn, pd, cd) = probe(&params);
                params.trainable_mut()[ti].data[i] = x;
                let same = pu == base_pattern && pd == base_pattern && cu == base_cells && cd == base_cells;
                if same || h < 1e-7 {
                    break (up - dn) / (2.0 * h);
                }
                h *= 0.5;
            };
            numeric.push(estimate);
        }
    }
    max_rel_err(&analytic, &numeric)
}

/// Per-case initial MAE (mm) of the 20 validation cases reported for the
/// challenge, in case order.
pub const VALIDATION_INITIAL_MAE: [f64; 20] = [
    13.50, 14.00, 16.00, 15.00, 17.00, 17.00, 1.50, 3.50, 9.00, 4.00, 3.00, 5.00, 2.00, 2.00, 2.00,
    7.00, 10.00, 4.50, 6.00, 4.00,
];

/// Affine baseline MAE for the same cases.
pub const VALIDATION_AFFINE_MAE: [f64; 20] = [
    3.64, 5.98, 8.85, 9.44, 5.36, 7.13, 2.50, 3.06, 2.18, 4.00, 2.00, 2.00, 2.00, 2.10, 2.63, 3.30,
    6.52, 3.75, 8.00, 2.50,
];

/// MAE after the learned registration for the same cases.
pub const VALIDATION_METHOD_MAE: [f64; 20] = [
    2.18, 7.18, 4.89, 5.64, 4.71, 2.62, 2.53, 2.61, 1.38, 2.20, 1.47, 1.61, 1.68, 1.83, 2.10, 1.62,
    4.58, 1.65, 3.58, 2.47,
];
