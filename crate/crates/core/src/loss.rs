//! Registration objective: local normalized cross-correlation, a
//! displacement-gradient smoothness penalty, and their weighted sum, each
//! with an analytic gradient with respect to the displacement field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};
use crate::warp::{warp_volume_with_grad, DisplacementField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Side of the cubic NCC window in voxels (odd).
    pub ncc_window: usize,
    /// Weight of the smoothness term.
    pub reg_weight: f64,
    /// Floor applied to the product of windowed standard deviations.
    pub variance_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            reg_weight: 1.0,
            variance_floor: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ncc_window must be odd and >= 1, got {}",
                self.ncc_window
            )));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "reg_weight must be finite and >= 0, got {}",
                self.reg_weight
            )));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(format!(
                "variance_floor must be positive, got {}",
                self.variance_floor
            )));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        self.ncc_window / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
}

/// Sum along one axis over the clipped window `[i-r, i+r]`. Each window is
/// summed directly rather than by a running add/subtract, which would let
/// rounding drift along the line and make the loss value noisy.
fn box_pass(dims: [usize; 3], src: &[f64], r: usize, axis: usize) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let plane = nx * ny;
    let n = dims[axis];
    let stride = [1, nx, plane][axis];
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, o)| {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k][axis];
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(n - 1);
                let first = i + nx * j + plane * k - (pos - lo) * stride;
                let mut acc = 0.0;
                for t in 0..=hi - lo {
                    acc += src[first + t * stride];
                }
                o[i + nx * j] = acc;
            }
        }
    });
    out
}

/// Compensated (Neumaier) sum.
pub(crate) fn accurate_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in values {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Sum over the clipped cubic window of radius `r` around every voxel.
pub(crate) fn box_sum(dims: [usize; 3], src: &[f64], r: usize) -> Vec<f64> {
    let a = box_pass(dims, src, r, 0);
    let b = box_pass(dims, &a, r, 1);
    box_pass(dims, &b, r, 2)
}

/// Number of voxels in the clipped window along one axis.
#[inline]
fn clipped(i: usize, n: usize, r: usize) -> usize {
    let lo = i.saturating_sub(r);
    let hi = (i + r).min(n - 1);
    hi - lo + 1
}

fn window_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let cx: Vec<usize> = (0..dims[0]).map(|i| clipped(i, dims[0], r)).collect();
    let cy: Vec<usize> = (0..dims[1]).map(|i| clipped(i, dims[1], r)).collect();
    let cz: Vec<usize> = (0..dims[2]).map(|i| clipped(i, dims[2], r)).collect();
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &cz {
        for &y in &cy {
            for &x in &cx {
                out.push((x * y * z) as f64);
            }
        }
    }
    out
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = accurate_sum(v.iter().copied()) / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Local NCC and, optionally, its derivative with respect to each voxel of
/// `warped`.
fn ncc_impl(fixed: &[f64], warped: &[f64], dims: [usize; 3], cfg: &LossConfig, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let r = cfg.radius();
    let eps = cfg.variance_floor;
    let n_vox = fixed.len();
    // NCC ignores global offsets; removing them first limits cancellation in
    // the windowed second moments.
    let i_c = centered(fixed);
    let j_c = centered(warped);
    let ii: Vec<f64> = i_c.iter().map(|x| x * x).collect();
    let jj: Vec<f64> = j_c.iter().map(|x| x * x).collect();
    let ij: Vec<f64> = i_c.iter().zip(&j_c).map(|(a, b)| a * b).collect();
    let si = box_sum(dims, &i_c, r);
    let sj = box_sum(dims, &j_c, r);
    let sii = box_sum(dims, &ii, r);
    let sjj = box_sum(dims, &jj, r);
    let sij = box_sum(dims, &ij, r);
    let counts = window_counts(dims, r);

    let mut cc = vec![0.0; n_vox];
    let mut coef = if want_grad { vec![[0.0; 3]; n_vox] } else { Vec::new() };
    for p in 0..n_vox {
        let n = counts[p];
        let mu_i = si[p] / n;
        let mu_j = sj[p] / n;
        let cov = (sij[p] - si[p] * mu_j) / n;
        let var_i = ((sii[p] - si[p] * mu_i) / n).max(0.0);
        let var_j = ((sjj[p] - sj[p] * mu_j) / n).max(0.0);
        let prod = (var_i * var_j).sqrt();
        let (denom, floored) = if prod < eps { (eps, true) } else { (prod, false) };
        cc[p] = cov / denom;
        if want_grad {
            let alpha = 1.0 / (n * denom);
            let beta = if floored {
                0.0
            } else {
                -cov * var_i / (n * denom * denom * denom)
            };
            let gamma = -mu_i * alpha - mu_j * beta;
            coef[p] = [alpha, beta, gamma];
        }
    }
    let value = accurate_sum(cc.iter().copied()) / n_vox as f64;
    if !want_grad {
        return (value, None);
    }
    let split = |c: usize| -> Vec<f64> { coef.iter().map(|v| v[c]).collect() };
    let sa = box_sum(dims, &split(0), r);
    let sb = box_sum(dims, &split(1), r);
    let sg = box_sum(dims, &split(2), r);
    let inv_n = 1.0 / n_vox as f64;
    let grad = (0..n_vox)
        .map(|q| (i_c[q] * sa[q] + j_c[q] * sb[q] + sg[q]) * inv_n)
        .collect();
    (value, Some(grad))
}

fn check_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch { left: a, right: b });
    }
    Ok(())
}

/// Mean local normalized cross-correlation over voxel-centred windows
/// (clipped at the borders). Lies in [-1, 1].
pub fn ncc(fixed: &Volume, warped: &Volume, cfg: &LossConfig) -> Result<f64> {
    check_dims(fixed.dims(), warped.dims())?;
    cfg.validate()?;
    Ok(ncc_impl(fixed.data(), warped.data(), fixed.dims(), cfg, false).0)
}

/// NCC together with its gradient with respect to the `warped` intensities.
pub fn ncc_with_grad(fixed: &Volume, warped: &Volume, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_dims(fixed.dims(), warped.dims())?;
    cfg.validate()?;
    let (v, g) = ncc_impl(fixed.data(), warped.data(), fixed.dims(), cfg, true);
    Ok((v, g.expect("gradient requested")))
}

/// `-NCC(fixed, moving∘field)` and its gradient with respect to the field.
pub fn similarity_loss(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<(f64, DisplacementField)> {
    check_dims(fixed.dims(), field.dims())?;
    cfg.validate()?;
    let (warped, dwarp) = warp_volume_with_grad(moving, field);
    let (value, dncc) = ncc_impl(fixed.data(), warped.data(), fixed.dims(), cfg, true);
    let dncc = dncc.expect("gradient requested");
    let grad = dncc
        .iter()
        .zip(&dwarp)
        .map(|(&d, g)| [-d * g[0], -d * g[1], -d * g[2]])
        .collect();
    Ok((-value, DisplacementField::from_grid(*field.grid(), grad)?))
}

fn check_smoothness_grid(grid: &Grid) -> Result<()> {
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidDims {
            dims: grid.dims,
            reason: "smoothness needs at least 2 voxels per axis".into(),
        });
    }
    Ok(())
}

/// Mean squared Frobenius norm of the forward-difference displacement
/// gradient (mm/mm), with a zero difference past the last voxel.
pub fn smoothness_value(field: &DisplacementField) -> Result<f64> {
    Ok(smoothness_impl(field, false)?.0)
}

/// Smoothness value and its exact gradient.
pub fn smoothness_loss(field: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let (v, g) = smoothness_impl(field, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn smoothness_impl(field: &DisplacementField, want_grad: bool) -> Result<(f64, Option<DisplacementField>)> {
    let grid = *field.grid();
    check_smoothness_grid(&grid)?;
    let d = field.data();
    let n = grid.len() as f64;
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut grad = if want_grad { vec![[0.0; 3]; grid.len()] } else { Vec::new() };
    let mut total = 0.0;
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let pos = [i, j, k];
                let idx = grid.index(i, j, k);
                for a in 0..3 {
                    if pos[a] + 1 >= grid.dims[a] {
                        continue;
                    }
                    let nb = idx + strides[a];
                    let h = grid.spacing[a];
                    for c in 0..3 {
                        let diff = (d[nb][c] - d[idx][c]) / h;
                        total += diff * diff;
                        if want_grad {
                            let g = 2.0 * diff / (h * n);
                            grad[nb][c] += g;
                            grad[idx][c] -= g;
                        }
                    }
                }
            }
        }
    }
    let grad = if want_grad {
        Some(DisplacementField::from_grid(grid, grad)?)
    } else {
        None
    };
    Ok((total / n, grad))
}

/// Loss value only, without gradients.
pub fn overall_value(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_dims(fixed.dims(), field.dims())?;
    cfg.validate()?;
    let warped = crate::warp::warp_volume(moving, field);
    let similarity = -ncc_impl(fixed.data(), warped.data(), fixed.dims(), cfg, false).0;
    let smoothness = smoothness_value(field)?;
    Ok(LossValue {
        total: similarity + cfg.reg_weight * smoothness,
        similarity,
        smoothness,
    })
}

/// `similarity + reg_weight * smoothness` and its gradient.
pub fn overall_loss(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<(LossValue, DisplacementField)> {
    let (similarity, mut grad) = similarity_loss(fixed, moving, field, cfg)?;
    let (smoothness, gsmooth) = smoothness_loss(field)?;
    let lambda = cfg.reg_weight;
    if lambda != 0.0 {
        for (g, s) in grad.as_flat_mut().iter_mut().zip(gsmooth.as_flat()) {
            *g += lambda * s;
        }
    }
    Ok((
        LossValue {
            total: similarity + lambda * smoothness,
            similarity,
            smoothness,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn grid(n: usize) -> Grid {
        Grid::new([n, n, n], [1.0; 3]).unwrap()
    }

    fn noise(g: Grid, seed: u64) -> Volume {
        let mut rng = SplitMix64::new(seed);
        Volume::from_fn(g, |_, _, _| rng.normal())
    }

    fn smooth_image(g: Grid, seed: u64) -> Volume {
        let mut rng = SplitMix64::new(seed);
        let c: Vec<([f64; 3], f64)> = (0..6)
            .map(|_| {
                (
                    [rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0)],
                    rng.uniform(-1.0, 1.0),
                )
            })
            .collect();
        Volume::from_fn(g, |i, j, k| {
            c.iter()
                .map(|(p, a)| {
                    let d2 = (i as f64 - p[0]).powi(2) + (j as f64 - p[1]).powi(2) + (k as f64 - p[2]).powi(2);
                    a * (-d2 / 6.0).exp()
                })
                .sum()
        })
    }

    fn random_field(g: Grid, seed: u64, scale: f64) -> DisplacementField {
        let mut rng = SplitMix64::new(seed);
        DisplacementField::from_fn(g, |_| {
            [rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)]
        })
    }

    /// Brute-force per-window NCC, independent of the box-filter path.
    fn ncc_brute(f: &Volume, w: &Volume, win: usize, eps: f64) -> f64 {
        let g = *f.grid();
        let r = (win / 2) as isize;
        let mut total = 0.0;
        for k in 0..g.dims[2] as isize {
            for j in 0..g.dims[1] as isize {
                for i in 0..g.dims[0] as isize {
                    let mut idx = Vec::new();
                    for dk in -r..=r {
                        for dj in -r..=r {
                            for di in -r..=r {
                                let (a, b, c) = (i + di, j + dj, k + dk);
                                if a >= 0 && b >= 0 && c >= 0
                                    && (a as usize) < g.dims[0]
                                    && (b as usize) < g.dims[1]
                                    && (c as usize) < g.dims[2]
                                {
                                    idx.push(g.index(a as usize, b as usize, c as usize));
                                }
                            }
                        }
                    }
                    let n = idx.len() as f64;
                    let mf = idx.iter().map(|&q| f.data()[q]).sum::<f64>() / n;
                    let mw = idx.iter().map(|&q| w.data()[q]).sum::<f64>() / n;
                    let cov = idx.iter().map(|&q| (f.data()[q] - mf) * (w.data()[q] - mw)).sum::<f64>() / n;
                    let vf = idx.iter().map(|&q| (f.data()[q] - mf).powi(2)).sum::<f64>() / n;
                    let vw = idx.iter().map(|&q| (w.data()[q] - mw).powi(2)).sum::<f64>() / n;
                    total += cov / (vf * vw).sqrt().max(eps);
                }
            }
        }
        total / g.len() as f64
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let g = Grid::new([5, 4, 7], [1.0; 3]).unwrap();
        let v = noise(g, 3);
        for r in [0, 1, 2, 4] {
            let fast = box_sum(g.dims, v.data(), r);
            for k in 0..7usize {
                for j in 0..4usize {
                    for i in 0..5usize {
                        let mut s = 0.0;
                        for c in k.saturating_sub(r)..=(k + r).min(6) {
                            for b in j.saturating_sub(r)..=(j + r).min(3) {
                                for a in i.saturating_sub(r)..=(i + r).min(4) {
                                    s += v.get(a, b, c);
                                }
                            }
                        }
                        assert!((fast[g.index(i, j, k)] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ncc_matches_brute_force() {
        let g = Grid::new([7, 6, 5], [1.0; 3]).unwrap();
        let f = noise(g, 1);
        let w = noise(g, 2).map(|x| 0.5 * x + 0.3);
        for win in [1, 3, 5] {
            let cfg = LossConfig { ncc_window: win, ..Default::default() };
            let fast = ncc(&f, &w, &cfg).unwrap();
            let slow = ncc_brute(&f, &w, win, cfg.variance_floor);
            assert!((fast - slow).abs() < 1e-10, "{win}: {fast} {slow}");
        }
    }

    #[test]
    fn ncc_reference_cases() {
        let g = grid(8);
        let f = noise(g, 4);
        let cfg = LossConfig::default();
        assert!((ncc(&f, &f, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let aff = f.map(|x| 3.5 * x - 7.0);
        assert!((ncc(&f, &aff, &cfg).unwrap() - 1.0).abs() < 1e-6);
        let neg = f.map(|x| -x);
        assert!((ncc(&f, &neg, &cfg).unwrap() + 1.0).abs() < 1e-6);
        let other = Volume::zeros(Grid::new([8, 8, 7], [1.0; 3]).unwrap());
        assert!(matches!(ncc(&f, &other, &cfg), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = LossConfig { ncc_window: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { reg_weight: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { variance_floor: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn similarity_identity_is_stationary() {
        let g = grid(8);
        let f = smooth_image(g, 5);
        let (v, grad) = similarity_loss(&f, &f, &DisplacementField::zeros(g), &LossConfig::default()).unwrap();
        assert!((v + 1.0).abs() < 1e-9);
        let norm = grad.as_flat().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "{norm}");
    }

    #[test]
    fn constant_moving_hits_floor() {
        let g = grid(8);
        let f = noise(g, 6);
        let m = Volume::from_fn(g, |_, _, _| 2.5);
        let (v, _) = similarity_loss(&f, &m, &random_field(g, 1, 1.0), &LossConfig::default()).unwrap();
        assert!(v.abs() <= 1e-2, "{v}");
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn fd_grad(field: &DisplacementField, h: f64, f: impl Fn(&DisplacementField) -> f64) -> Vec<f64> {
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

    #[test]
    fn similarity_gradient_matches_finite_differences() {
        let g = grid(8);
        let f = smooth_image(g, 7);
        let m = smooth_image(g, 8);
        let u = random_field(g, 9, 0.8);
        let cfg = LossConfig { ncc_window: 5, ..Default::default() };
        let (_, grad) = similarity_loss(&f, &m, &u, &cfg).unwrap();
        let num = fd_grad(&u, 1e-4, |w| similarity_loss(&f, &m, w, &cfg).unwrap().0);
        let err = max_rel_err(grad.as_flat(), &num);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn smoothness_cases() {
        let g = grid(6);
        let (v, gr) = smoothness_loss(&DisplacementField::zeros(g)).unwrap();
        assert_eq!(v, 0.0);
        assert!(gr.as_flat().iter().all(|&x| x == 0.0));
        let (v, gr) = smoothness_loss(&DisplacementField::constant(g, [3.0, -2.0, 7.0])).unwrap();
        assert_eq!(v, 0.0);
        assert!(gr.as_flat().iter().all(|&x| x == 0.0));
        assert!(smoothness_loss(&DisplacementField::zeros(Grid::new([1, 4, 4], [1.0; 3]).unwrap())).is_err());

        // Small amplitude keeps the value's rounding far below the
        // gradient entries; the loss is quadratic so there is no truncation.
        let u = random_field(Grid::new([6, 6, 6], [1.0, 0.5, 2.0]).unwrap(), 3, 0.01);
        let (_, grad) = smoothness_loss(&u).unwrap();
        let num = fd_grad(&u, 1e-4, |w| smoothness_value(w).unwrap());
        let err = max_rel_err(grad.as_flat(), &num);
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn smoothness_is_quadratic() {
        let u = random_field(grid(5), 11, 2.0);
        let v1 = smoothness_value(&u).unwrap();
        let v3 = smoothness_value(&u.scaled(3.0)).unwrap();
        assert!((v3 - 9.0 * v1).abs() < 1e-9 * v3.max(1.0));
    }

    #[test]
    fn overall_combines_terms() {
        let g = grid(8);
        let f = smooth_image(g, 1);
        let m = smooth_image(g, 2);
        let (lv, _) = overall_loss(&f, &f, &DisplacementField::zeros(g), &LossConfig::default()).unwrap();
        assert!((lv.total + 1.0).abs() < 1e-6);

        let u = random_field(g, 4, 0.5);
        let cfg0 = LossConfig { reg_weight: 0.0, ..Default::default() };
        let (lv, _) = overall_loss(&f, &m, &u, &cfg0).unwrap();
        assert_eq!(lv.total, lv.similarity);

        let cfg = LossConfig { reg_weight: 0.7, ..Default::default() };
        let (lv, grad) = overall_loss(&f, &m, &u, &cfg).unwrap();
        assert!((lv.total - (lv.similarity + 0.7 * lv.smoothness)).abs() < 1e-12);
        assert_eq!(overall_value(&f, &m, &u, &cfg).unwrap(), lv);
        let num = fd_grad(&u, 1e-4, |w| overall_value(&f, &m, w, &cfg).unwrap().total);
        let err = max_rel_err(grad.as_flat(), &num);
        assert!(err < 1e-5, "max relative error {err}");
    }
}
