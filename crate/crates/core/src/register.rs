//! Per-pair registration: coarse-to-fine Adam optimization of the overall
//! loss, with either the field itself or the network weights as parameters.
//!
//! Inputs are assumed to be affinely pre-aligned; only the deformable part
//! is estimated here.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{overall_loss, overall_value, LossConfig, LossValue};
use crate::model::{
    adam_for, adam_step, convnet_backward, convnet_forward, update_running_stats, AdamConfig, AdamState,
    ConvNetConfig, ConvNetParameters, FreeFormModel, Mode,
};
use crate::volume::{zscore_normalize, Grid, Volume};
use crate::warp::{resample_field_to, DisplacementField};

/// Number of iterations the convergence test looks back over.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    Freeform,
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    /// Per-level iteration counts, coarsest first. Overrides
    /// `iterations_per_level` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_iterations: Option<Vec<usize>>,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub convergence_tol: f64,
    #[serde(default)]
    pub max_seconds: Option<f64>,
    pub seed: u64,
    pub convnet: ConvNetConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self::for_mode(RegistrationMode::Freeform)
    }
}

impl RegistrationConfig {
    /// Defaults for a mode. The free-form learning rate is in mm per step;
    /// the network rate applies to weights.
    pub fn for_mode(mode: RegistrationMode) -> Self {
        let (pyramid_levels, iterations_per_level, learning_rate) = match mode {
            RegistrationMode::Freeform => (3, 200, 1.0),
            RegistrationMode::Convnet => (1, 100, 1e-4),
        };
        Self {
            mode,
            pyramid_levels,
            iterations_per_level,
            level_iterations: None,
            loss: LossConfig::default(),
            learning_rate,
            convergence_tol: 1e-6,
            max_seconds: None,
            seed: 0,
            convnet: ConvNetConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be at least 1".into()));
        }
        if let Some(its) = &self.level_iterations {
            if its.len() != self.pyramid_levels {
                return Err(Error::Config(format!(
                    "level_iterations has {} entries for {} pyramid levels",
                    its.len(),
                    self.pyramid_levels
                )));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be non-negative".into()));
        }
        if let Some(s) = self.max_seconds {
            if !(s >= 0.0) {
                return Err(Error::Config("max_seconds must be non-negative".into()));
            }
        }
        self.loss.validate()?;
        if self.mode == RegistrationMode::Convnet {
            self.convnet.validate()?;
        }
        Ok(())
    }

    /// Iterations for pyramid level `level` (0 = finest).
    pub fn iterations_at(&self, level: usize) -> usize {
        match &self.level_iterations {
            Some(its) => its[self.pyramid_levels - 1 - level],
            None => self.iterations_per_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    /// 0 is the finest level.
    pub level: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Loss of every evaluated iterate, starting with the initial one.
    pub trace: Vec<LossValue>,
    pub best_iteration: usize,
    pub best: LossValue,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationReport {
    pub mode: RegistrationMode,
    pub config: RegistrationConfig,
    /// Levels in the order they ran, coarsest first.
    pub levels: Vec<LevelReport>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
    /// Voxels appended on the high side of each axis so the network's
    /// pooling divides evenly; the returned field is cropped back.
    pub padding: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
    #[serde(skip)]
    pub field: DisplacementField,
    #[serde(skip)]
    pub network: Option<ConvNetParameters>,
}

impl RegistrationReport {
    /// Best loss at the last level that ran.
    pub fn final_loss(&self) -> Option<LossValue> {
        self.levels.last().map(|l| l.best)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// 2x2x2 block mean. A trailing odd voxel forms a truncated block averaged
/// over the voxels it has; spacing doubles and the origin moves to the
/// centre of the first block.
pub fn downsample_volume(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    if dims.iter().all(|&d| d < 2) {
        return Err(Error::InvalidDims {
            dims,
            reason: "nothing to downsample".into(),
        });
    }
    let g = v.grid();
    let nd: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(2));
    let spacing: [f64; 3] = std::array::from_fn(|a| 2.0 * g.spacing[a]);
    let origin: [f64; 3] = std::array::from_fn(|a| g.origin[a] + 0.5 * g.spacing[a]);
    let grid = Grid::with_origin(nd, spacing, origin)?;
    Ok(Volume::from_fn(grid, |i, j, k| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for z in 2 * k..(2 * k + 2).min(dims[2]) {
            for y in 2 * j..(2 * j + 2).min(dims[1]) {
                for x in 2 * i..(2 * i + 2).min(dims[0]) {
                    sum += v.get(x, y, z);
                    n += 1;
                }
            }
        }
        sum / n as f64
    }))
}

/// Fixed/moving pairs from finest (index 0) to coarsest.
fn build_pyramid(fixed: &Volume, moving: &Volume, levels: usize) -> Result<Vec<(Volume, Volume)>> {
    let mut out = vec![(fixed.clone(), moving.clone())];
    for _ in 1..levels {
        let (f, m) = out.last().expect("non-empty");
        let next = (downsample_volume(f)?, downsample_volume(m)?);
        if next.0.dims().iter().any(|&d| d < 2) {
            return Err(Error::Config(format!(
                "{levels} pyramid levels reduce dims {:?} below 2 voxels per axis",
                fixed.dims()
            )));
        }
        out.push(next);
    }
    Ok(out)
}

/// Tracks one level's loss trace, best iterate and stopping tests.
struct LevelRun {
    trace: Vec<LossValue>,
    best: Option<(usize, LossValue)>,
}

impl LevelRun {
    fn new() -> Self {
        Self { trace: Vec::new(), best: None }
    }

    /// Records a value; returns true if it is the best so far.
    fn record(&mut self, v: LossValue) -> bool {
        self.trace.push(v);
        let it = self.trace.len() - 1;
        match self.best {
            Some((_, b)) if !(v.total < b.total) => false,
            _ => {
                self.best = Some((it, v));
                true
            }
        }
    }

    fn converged(&self, tol: f64) -> bool {
        let n = self.trace.len();
        if n <= CONVERGENCE_WINDOW {
            return false;
        }
        let now = self.trace[n - 1].total;
        let then = self.trace[n - 1 - CONVERGENCE_WINDOW].total;
        (now - then).abs() / then.abs().max(1e-12) < tol
    }

    fn finish(self, level: usize, grid: &Grid, stop: StopReason) -> LevelReport {
        let (best_iteration, best) = self.best.expect("at least the initial value is recorded");
        LevelReport {
            level,
            dims: grid.dims,
            spacing: grid.spacing,
            iterations: self.trace.len() - 1,
            stop_reason: stop,
            trace: self.trace,
            best_iteration,
            best,
        }
    }
}

struct Clock {
    start: Instant,
    budget: Option<f64>,
}

impl Clock {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.elapsed() >= b)
    }
}

/// Registers `moving` onto `fixed`. The returned field lives on the fixed
/// grid and maps fixed-space points into moving space.
pub fn register(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    if fixed.dims() != moving.dims() {
        return Err(Error::DimsMismatch {
            left: fixed.dims(),
            right: moving.dims(),
        });
    }
    fixed.check_finite()?;
    moving.check_finite()?;
    let clock = Clock {
        start: Instant::now(),
        budget: cfg.max_seconds,
    };
    let fixed = zscore_normalize(fixed);
    let moving = zscore_normalize(moving);
    match cfg.mode {
        RegistrationMode::Freeform => register_freeform(&fixed, &moving, cfg, &clock),
        RegistrationMode::Convnet => register_convnet(&fixed, &moving, cfg, &clock),
    }
}

fn register_freeform(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig, clock: &Clock) -> Result<RegistrationReport> {
    let pyramid = build_pyramid(fixed, moving, cfg.pyramid_levels)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut levels = Vec::new();
    let mut field = DisplacementField::zeros(*pyramid[pyramid.len() - 1].0.grid());
    let mut budget_hit = false;

    for level in (0..pyramid.len()).rev() {
        let (f, m) = &pyramid[level];
        if field.grid() != f.grid() {
            field = resample_field_to(&field, *f.grid());
        }
        let mut model = FreeFormModel::from_field(field);
        let mut state = AdamState::new(adam, &[model.num_parameters()]);
        let mut run = LevelRun::new();
        let mut best_field = model.field.clone();
        let iters = cfg.iterations_at(level);
        let stop = loop {
            let done = run.trace.len() >= iters;
            if done {
                let v = overall_value(f, m, &model.field, &cfg.loss)?;
                if run.record(v) {
                    best_field = model.field.clone();
                }
                break StopReason::MaxIters;
            }
            let (v, grad) = overall_loss(f, m, &model.field, &cfg.loss)?;
            if run.record(v) {
                best_field = model.field.clone();
            }
            if run.converged(cfg.convergence_tol) {
                break StopReason::Converged;
            }
            if clock.exhausted() {
                break StopReason::Budget;
            }
            model.adam_step(&grad, &mut state)?;
        };
        levels.push(run.finish(level, f.grid(), stop));
        field = best_field;
        if stop == StopReason::Budget {
            budget_hit = true;
            break;
        }
    }
    if field.grid() != fixed.grid() {
        field = resample_field_to(&field, *fixed.grid());
    }
    Ok(finish_report(cfg, levels, budget_hit, clock, [0; 3], field, None))
}

fn finish_report(
    cfg: &RegistrationConfig,
    levels: Vec<LevelReport>,
    budget_hit: bool,
    clock: &Clock,
    padding: [usize; 3],
    field: DisplacementField,
    network: Option<ConvNetParameters>,
) -> RegistrationReport {
    let stop_reason = if budget_hit {
        StopReason::Budget
    } else {
        levels.last().map_or(StopReason::MaxIters, |l| l.stop_reason)
    };
    RegistrationReport {
        mode: cfg.mode,
        config: cfg.clone(),
        iterations: levels.iter().map(|l| l.iterations).sum(),
        levels,
        stop_reason,
        wall_seconds: clock.elapsed(),
        padding,
        field_path: None,
        checkpoint_path: None,
        field,
        network,
    }
}

/// Replicates the last voxel along each axis up to `dims`.
fn pad_edge(v: &Volume, dims: [usize; 3]) -> Result<Volume> {
    let g = v.grid();
    let grid = Grid::with_origin(dims, g.spacing, g.origin)?;
    let d = v.dims();
    Ok(Volume::from_fn(grid, |i, j, k| {
        v.get(i.min(d[0] - 1), j.min(d[1] - 1), k.min(d[2] - 1))
    }))
}

fn crop_field(field: &DisplacementField, grid: Grid) -> DisplacementField {
    let src = field.grid();
    let data = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            field.data()[src.index(i, j, k)]
        })
        .collect();
    DisplacementField::from_grid(grid, data).expect("cropped size matches")
}

fn pad_field_zero(field: &DisplacementField, grid: Grid) -> DisplacementField {
    let mut out = DisplacementField::zeros(grid);
    for idx in 0..field.len() {
        let [i, j, k] = field.grid().coords(idx);
        out.data_mut()[grid.index(i, j, k)] = field.data()[idx];
    }
    out
}

fn register_convnet(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig, clock: &Clock) -> Result<RegistrationReport> {
    let net_cfg = cfg.convnet;
    let div = net_cfg.divisor();
    let dims = fixed.dims();
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(div) * div);
    let padding: [usize; 3] = std::array::from_fn(|a| padded[a] - dims[a]);
    let (pf, pm) = if padding == [0; 3] {
        (fixed.clone(), moving.clone())
    } else {
        (pad_edge(fixed, padded)?, pad_edge(moving, padded)?)
    };
    let grid = *fixed.grid();
    let pgrid = *pf.grid();

    let mut params = ConvNetParameters::init(net_cfg, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut best_field = DisplacementField::zeros(grid);
    let mut best_params = params.clone();
    let mut best_total = f64::INFINITY;
    let mut levels = Vec::new();
    let mut budget_hit = false;

    for level in (0..cfg.pyramid_levels).rev() {
        let mut state = adam_for(&params, adam);
        let mut run = LevelRun::new();
        let iters = cfg.iterations_at(level);
        let stop = loop {
            let (pfield, cache) = convnet_forward(&params, &pf, &pm, Mode::Train)?;
            let field = if padding == [0; 3] { pfield } else { crop_field(&pfield, grid) };
            let done = run.trace.len() >= iters;
            let (v, grad) = if done {
                (overall_value(fixed, moving, &field, &cfg.loss)?, None)
            } else {
                let (v, g) = overall_loss(fixed, moving, &field, &cfg.loss)?;
                (v, Some(g))
            };
            run.record(v);
            // Best across levels: the network is shared, so a later level
            // must beat earlier ones to replace the returned field.
            if v.total < best_total {
                best_total = v.total;
                best_field = field;
                best_params = params.clone();
            }
            let Some(grad) = grad else {
                break StopReason::MaxIters;
            };
            if run.converged(cfg.convergence_tol) {
                break StopReason::Converged;
            }
            if clock.exhausted() {
                break StopReason::Budget;
            }
            let grad = if padding == [0; 3] { grad } else { pad_field_zero(&grad, pgrid) };
            let grads = convnet_backward(&params, &cache, &grad)?;
            adam_step(&mut params, &grads, &mut state)?;
            update_running_stats(&mut params, &cache);
        };
        levels.push(run.finish(level, &grid, stop));
        if stop == StopReason::Budget {
            budget_hit = true;
            break;
        }
    }
    Ok(finish_report(cfg, levels, budget_hit, clock, padding, best_field, Some(best_params)))
}
