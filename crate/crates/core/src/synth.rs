//! Synthetic cases with known answers: a blob phantom, a smooth invertible
//! displacement field, the moving image it implies, and landmarks that
//! correspond exactly.
//!
//! Everything is generated from analytic functions, so the moving image is
//! not an interpolation of the fixed one: `moving(y) = f(x)` where `x` solves
//! `x + u(x) = y` by fixed-point iteration on the analytic field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{save_landmarks, Landmark, LandmarkSet};
use crate::rng::SplitMix64;
use crate::volume::{save_volume, Grid, Volume};
use crate::warp::{folding_fraction, jacobian_determinant, norm, save_field, DisplacementField};

/// Fixed-point iterations used to invert the field.
pub const INVERSION_ITERATIONS: usize = 20;
/// Largest accepted inversion residual, in voxels.
pub const INVERSION_TOLERANCE: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Large Gaussian intensity blobs.
    pub num_blobs: usize,
    /// Small Gaussian texture blobs (sigma 1 to 2.5 voxels) per 1000 voxels.
    pub texture_density: f64,
    pub field_bumps: usize,
    /// Largest displacement magnitude in mm.
    pub max_displacement: f64,
    pub num_landmarks: usize,
    pub noise_sigma: f64,
    pub cavity: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            spacing: [1.0; 3],
            seed: 0,
            num_blobs: 12,
            texture_density: 8.0,
            field_bumps: 4,
            max_displacement: 5.0,
            num_landmarks: 20,
            noise_sigma: 0.02,
            cavity: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config("synthetic dims must be at least 4 per axis".into()));
        }
        if self.num_blobs == 0 || self.field_bumps == 0 || self.num_landmarks == 0 {
            return Err(Error::Config("num_blobs, field_bumps and num_landmarks must be positive".into()));
        }
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return Err(Error::Config("max_displacement must be finite and non-negative".into()));
        }
        if !(self.texture_density >= 0.0) || !self.texture_density.is_finite() {
            return Err(Error::Config("texture_density must be finite and non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        let m = self.landmark_margin();
        let room: usize = self.dims.iter().map(|&d| d.saturating_sub(2 * m)).product();
        if room < self.num_landmarks {
            return Err(Error::Config(format!(
                "{} landmarks do not fit inside a {m}-voxel margin of {:?}",
                self.num_landmarks, self.dims
            )));
        }
        Ok(())
    }

    /// Interior margin in voxels: the largest displacement rounded up.
    pub fn margin(&self) -> usize {
        let s = self.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        (self.max_displacement / s).ceil() as usize
    }

    fn landmark_margin(&self) -> usize {
        self.margin() + 1
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub fixed: Volume,
    pub moving: Volume,
    pub true_field: DisplacementField,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
    pub info: SynthInfo,
}

/// Generation diagnostics stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthInfo {
    pub attempts: usize,
    pub radius_scale: f64,
    pub min_jacobian: f64,
    pub max_displacement: f64,
    /// Largest `|x + u(x) - y|` of the inversion, in voxels.
    pub inversion_residual: f64,
}

struct Blob {
    centre: [f64; 3],
    amplitude: f64,
    inv_two_sigma2: f64,
}

struct Bump {
    centre: [f64; 3],
    direction: [f64; 3],
    radius: f64,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn intensity(blobs: &[Blob], p: [f64; 3]) -> f64 {
    blobs
        .iter()
        .map(|b| b.amplitude * (-dist2(p, b.centre) * b.inv_two_sigma2).exp())
        .sum()
}

/// Unscaled bump field: `sum d_b (1 - r^2/R^2)^3` inside each ball.
fn bump_field(bumps: &[Bump], p: [f64; 3]) -> [f64; 3] {
    let mut u = [0.0; 3];
    for b in bumps {
        let q = dist2(p, b.centre) / (b.radius * b.radius);
        if q < 1.0 {
            let w = (1.0 - q).powi(3);
            for a in 0..3 {
                u[a] += w * b.direction[a];
            }
        }
    }
    u
}

fn unit_vector(rng: &mut SplitMix64) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = norm(v);
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn uniform_point(rng: &mut SplitMix64, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| rng.uniform(lo[a], hi[a]))
}

/// Deterministic synthetic case for `cfg`.
pub fn generate_case(cfg: &SynthConfig) -> Result<SynthCase> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing)?;
    let lo = grid.origin;
    let hi = grid.world(cfg.dims[0] - 1, cfg.dims[1] - 1, cfg.dims[2] - 1);
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(f64::INFINITY, f64::min);

    let mut root = SplitMix64::new(cfg.seed);
    let mut blob_rng = root.split();
    let mut field_rng = root.split();
    let mut lm_rng = root.split();
    let mut noise_rng = root.split();
    let mut cavity_rng = root.split();

    let mut blobs: Vec<Blob> = (0..cfg.num_blobs)
        .map(|_| {
            let sigma = blob_rng.uniform(0.05, 0.12) * extent;
            Blob {
                centre: uniform_point(&mut blob_rng, lo, hi),
                amplitude: blob_rng.uniform(0.5, 1.5) * if blob_rng.below(4) == 0 { -1.0 } else { 1.0 },
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
            }
        })
        .collect();
    let smin = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    // Local NCC only sees structure at the scale of its window, so large
    // blobs alone leave the field unidentifiable over most of the volume.
    let n_tex = (cfg.texture_density * grid.len() as f64 / 1000.0).round() as usize;
    for _ in 0..n_tex {
        let sigma = blob_rng.uniform(1.0, 2.5) * smin;
        blobs.push(Blob {
            centre: uniform_point(&mut blob_rng, lo, hi),
            amplitude: blob_rng.uniform(-1.0, 1.0),
            inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
        });
    }
    let raw: Vec<f64> = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            intensity(&blobs, grid.world(x, y, z))
        })
        .collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::Synth("phantom has no contrast".into()));
    }
    let normalize = |v: f64| (v - mean) / std;

    // Field shape; radii are enlarged on retry until the field is a
    // contraction-friendly, fold-free deformation.
    let inner_lo: [f64; 3] = std::array::from_fn(|a| lo[a] + 0.2 * (hi[a] - lo[a]));
    let inner_hi: [f64; 3] = std::array::from_fn(|a| lo[a] + 0.8 * (hi[a] - lo[a]));
    let shapes: Vec<([f64; 3], [f64; 3], f64)> = (0..cfg.field_bumps)
        .map(|_| {
            let c = uniform_point(&mut field_rng, inner_lo, inner_hi);
            let d = unit_vector(&mut field_rng);
            let a = field_rng.uniform(0.5, 1.0);
            let r = field_rng.uniform(0.8, 1.2) * extent;
            (c, [a * d[0], a * d[1], a * d[2]], r)
        })
        .collect();

    let mut radius_scale = 1.0;
    let mut accepted = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let bumps: Vec<Bump> = shapes
            .iter()
            .map(|&(centre, direction, r)| Bump {
                centre,
                direction,
                radius: r * radius_scale,
            })
            .collect();
        let unscaled = DisplacementField::from_fn(grid, |p| bump_field(&bumps, p));
        let peak = unscaled.max_magnitude();
        let scale = if cfg.max_displacement == 0.0 || peak == 0.0 {
            0.0
        } else {
            cfg.max_displacement / peak
        };
        let u_at = |p: [f64; 3]| {
            let u = bump_field(&bumps, p);
            [scale * u[0], scale * u[1], scale * u[2]]
        };
        let field = DisplacementField::from_fn(grid, u_at);
        let jac = jacobian_determinant(&field)?;
        let min_jac = jac.min();
        if folding_fraction(&jac) > 0.0 || min_jac < 0.2 {
            radius_scale *= 1.25;
            continue;
        }
        match invert(&grid, &u_at) {
            Some((points, residual)) => {
                accepted = Some((field, points, residual, min_jac, attempt));
                break;
            }
            None => radius_scale *= 1.25,
        }
    }
    let Some((true_field, sources, residual, min_jacobian, attempts)) = accepted else {
        return Err(Error::Synth(format!(
            "no fold-free invertible field after {MAX_ATTEMPTS} rescalings"
        )));
    };

    let fixed = Volume::from_grid(grid, raw.iter().map(|&v| normalize(v)).collect())?;
    let mut moving = Volume::from_grid(
        grid,
        sources.iter().map(|&x| normalize(intensity(&blobs, x))).collect(),
    )?;

    if cfg.cavity {
        let c = uniform_point(&mut cavity_rng, inner_lo, inner_hi);
        let r = 0.12 * extent;
        let rim = 2.0 * grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        for (idx, v) in moving.data_mut().iter_mut().enumerate() {
            let [x, y, z] = grid.coords(idx);
            let d = dist2(grid.world(x, y, z), c).sqrt();
            if d < r {
                *v = 0.0;
            } else if d < r + rim {
                *v += 1.0;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in moving.data_mut() {
            *v += cfg.noise_sigma * noise_rng.normal();
        }
    }

    let (fixed_landmarks, moving_landmarks) = landmarks(cfg, &grid, &true_field, &mut lm_rng)?;
    Ok(SynthCase {
        fixed,
        moving,
        true_field: true_field.clone(),
        fixed_landmarks,
        moving_landmarks,
        info: SynthInfo {
            attempts,
            radius_scale,
            min_jacobian,
            max_displacement: true_field.max_magnitude(),
            inversion_residual: residual,
        },
    })
}

/// Solves `x + u(x) = y` for every grid node `y`. Returns `None` if the
/// iteration does not reach the tolerance.
fn invert(grid: &Grid, u: &impl Fn([f64; 3]) -> [f64; 3]) -> Option<(Vec<[f64; 3]>, f64)> {
    let smin = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut worst = 0.0f64;
    let mut out = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let [i, j, k] = grid.coords(idx);
        let y = grid.world(i, j, k);
        let mut x = y;
        for _ in 0..INVERSION_ITERATIONS {
            let d = u(x);
            x = [y[0] - d[0], y[1] - d[1], y[2] - d[2]];
        }
        let d = u(x);
        let r = norm([x[0] + d[0] - y[0], x[1] + d[1] - y[1], x[2] + d[2] - y[2]]) / smin;
        worst = worst.max(r);
        out.push(x);
    }
    (worst <= INVERSION_TOLERANCE).then_some((out, worst))
}

fn landmarks(
    cfg: &SynthConfig,
    grid: &Grid,
    field: &DisplacementField,
    rng: &mut SplitMix64,
) -> Result<(LandmarkSet, LandmarkSet)> {
    let m = cfg.landmark_margin();
    let mut picked: Vec<[usize; 3]> = Vec::new();
    while picked.len() < cfg.num_landmarks {
        let v: [usize; 3] = std::array::from_fn(|a| m + rng.below((cfg.dims[a] - 2 * m) as u64) as usize);
        if !picked.contains(&v) {
            picked.push(v);
        }
    }
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    for (n, v) in picked.iter().enumerate() {
        let id = n as i64 + 1;
        let p = grid.world(v[0], v[1], v[2]);
        let u = field.data()[grid.index(v[0], v[1], v[2])];
        fixed.push(Landmark::new(id, p));
        moving.push(Landmark::new(id, [p[0] + u[0], p[1] + u[1], p[2] + u[2]]));
    }
    Ok((LandmarkSet::new(fixed)?, LandmarkSet::new(moving)?))
}

/// Mean distance between two fields over voxels at least `margin` voxels
/// away from every face.
pub fn oracle_error(field: &DisplacementField, true_field: &DisplacementField, margin: usize) -> Result<f64> {
    if field.dims() != true_field.dims() {
        return Err(Error::DimsMismatch {
            left: field.dims(),
            right: true_field.dims(),
        });
    }
    let d = field.dims();
    if d.iter().any(|&n| n <= 2 * margin) {
        return Err(Error::InvalidDims {
            dims: d,
            reason: format!("margin {margin} leaves no interior"),
        });
    }
    let g = field.grid();
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in margin..d[2] - margin {
        for j in margin..d[1] - margin {
            for i in margin..d[0] - margin {
                let idx = g.index(i, j, k);
                let (a, b) = (field.data()[idx], true_field.data()[idx]);
                sum += norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

pub const FIXED_FILE: &str = "fixed.vol";
pub const MOVING_FILE: &str = "moving.vol";
pub const FIELD_FILE: &str = "true.dfield";
pub const FIXED_LANDMARKS_FILE: &str = "fixed_landmarks.csv";
pub const MOVING_LANDMARKS_FILE: &str = "moving_landmarks.csv";
pub const MANIFEST_FILE: &str = "case.json";

/// Ties the five case files to the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub config: SynthConfig,
    pub info: SynthInfo,
    pub fixed: String,
    pub moving: String,
    pub true_field: String,
    pub fixed_landmarks: String,
    pub moving_landmarks: String,
}

/// Writes the five case files into `dir` (created if needed) and returns
/// their paths.
pub fn write_case_files(case: &SynthCase, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_volume(&case.fixed, dir.join(FIXED_FILE))?;
    save_volume(&case.moving, dir.join(MOVING_FILE))?;
    save_field(&case.true_field, dir.join(FIELD_FILE))?;
    save_landmarks(&case.fixed_landmarks, dir.join(FIXED_LANDMARKS_FILE))?;
    save_landmarks(&case.moving_landmarks, dir.join(MOVING_LANDMARKS_FILE))?;
    Ok([FIXED_FILE, MOVING_FILE, FIELD_FILE, FIXED_LANDMARKS_FILE, MOVING_LANDMARKS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect())
}

/// Writes the case files plus a `case.json` manifest tying them to the
/// configuration; returns the paths written, manifest last.
pub fn write_case(case: &SynthCase, cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = write_case_files(case, dir)?;
    let manifest = CaseManifest {
        config: cfg.clone(),
        info: case.info.clone(),
        fixed: FIXED_FILE.into(),
        moving: MOVING_FILE.into(),
        true_field: FIELD_FILE.into(),
        fixed_landmarks: FIXED_LANDMARKS_FILE.into(),
        moving_landmarks: MOVING_LANDMARKS_FILE.into(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::transform_landmarks;
    use crate::loss::{ncc, LossConfig};
    use crate::warp::warp_volume;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            dims: [24, 24, 24],
            seed,
            max_displacement: 3.0,
            num_landmarks: 10,
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_displacement_reproduces_fixed() {
        let cfg = SynthConfig { max_displacement: 0.0, ..small(3) };
        let c = generate_case(&cfg).unwrap();
        assert_eq!(c.fixed, c.moving);
        assert_eq!(c.fixed_landmarks, c.moving_landmarks);
    }

    #[test]
    fn fields_do_not_fold_and_hit_the_target_magnitude() {
        for seed in 0..4 {
            let c = generate_case(&small(seed)).unwrap();
            let j = jacobian_determinant(&c.true_field).unwrap();
            assert!(j.min() > 0.0);
            assert!((c.true_field.max_magnitude() - 3.0).abs() < 1e-9);
            assert!(c.info.inversion_residual <= INVERSION_TOLERANCE);
        }
    }

    #[test]
    fn same_seed_same_case() {
        let a = generate_case(&small(5)).unwrap();
        let b = generate_case(&small(5)).unwrap();
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.true_field, b.true_field);
        assert_eq!(a.moving_landmarks, b.moving_landmarks);
    }

    #[test]
    fn warping_moving_recovers_fixed() {
        let c = generate_case(&small(1)).unwrap();
        let w = warp_volume(&c.moving, &c.true_field);
        let cfg = LossConfig::default();
        assert!(ncc(&c.fixed, &w, &cfg).unwrap() > 0.98);
        assert!(ncc(&c.fixed, &c.moving, &cfg).unwrap() < ncc(&c.fixed, &w, &cfg).unwrap());
    }

    #[test]
    fn landmarks_follow_the_field() {
        let c = generate_case(&small(2)).unwrap();
        let t = transform_landmarks(&c.fixed_landmarks, &c.true_field);
        for (a, b) in t.landmarks.entries().iter().zip(c.moving_landmarks.entries()) {
            for k in 0..3 {
                assert!((a.position()[k] - b.position()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cavity_and_noise_touch_moving_only() {
        let base = generate_case(&small(4)).unwrap();
        let c = generate_case(&SynthConfig { cavity: true, noise_sigma: 0.1, ..small(4) }).unwrap();
        assert_eq!(base.fixed, c.fixed);
        assert_eq!(base.true_field, c.true_field);
        assert_ne!(base.moving, c.moving);
    }

    #[test]
    fn oracle_error_examples() {
        let g = Grid::new([8, 8, 8], [1.0; 3]).unwrap();
        let t = DisplacementField::constant(g, [3.0, 0.0, 0.0]);
        assert_eq!(oracle_error(&t, &t, 2).unwrap(), 0.0);
        assert_eq!(oracle_error(&DisplacementField::zeros(g), &t, 2).unwrap(), 3.0);
        assert!(oracle_error(&t, &t, 4).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_case(&SynthConfig { num_landmarks: 0, ..small(0) }).is_err());
        assert!(generate_case(&SynthConfig { max_displacement: f64::NAN, ..small(0) }).is_err());
        assert!(generate_case(&SynthConfig { dims: [2, 24, 24], ..small(0) }).is_err());
    }
}
