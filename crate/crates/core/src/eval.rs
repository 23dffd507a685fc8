//! Landmark evaluation: per-case error statistics and cohort summaries.
//!
//! Per-landmark error is the Euclidean distance in mm. A case's MAE is the
//! median of those distances, mTRE their mean, and robustness the share of
//! landmarks that strictly improved over the initial alignment.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{folding_fraction, norm, DisplacementField, JacobianMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Landmark {
    pub fn new(id: i64, p: [f64; 3]) -> Self {
        Self { id, x: p[0], y: p[1], z: p[2] }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Labelled points in world coordinates (mm). Ids are unique.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &entries {
            if !seen.insert(l.id) {
                return Err(Error::Landmarks(format!("duplicate id {}", l.id)));
            }
            if !l.position().iter().all(|v| v.is_finite()) {
                return Err(Error::Landmarks(format!("non-finite coordinate for id {}", l.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<i64> {
        self.entries.iter().map(|l| l.id).collect()
    }

    /// Applies `f` to every position, keeping ids and order.
    pub fn map(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|l| Landmark::new(l.id, f(l.position())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedLandmarks {
    pub landmarks: LandmarkSet,
    /// Ids of points outside the field's extent, sampled at the clamped
    /// border position.
    pub clamped: Vec<i64>,
}

/// Maps fixed-space landmarks into moving space: `x -> x + u(x)` with `u`
/// trilinearly interpolated.
pub fn transform_landmarks(lms: &LandmarkSet, field: &DisplacementField) -> TransformedLandmarks {
    let g = field.grid();
    let mut clamped = Vec::new();
    let landmarks = LandmarkSet {
        entries: lms
            .entries
            .iter()
            .map(|l| {
                let p = l.position();
                let c = g.to_voxel(p);
                if (0..3).any(|a| c[a] < 0.0 || c[a] > (g.dims[a] - 1) as f64) {
                    clamped.push(l.id);
                }
                let u = field.sample(p);
                Landmark::new(l.id, [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
            })
            .collect(),
    };
    TransformedLandmarks { landmarks, clamped }
}

/// Euclidean distance per id, ordered by id. Both sets must carry the same
/// ids.
pub fn landmark_errors(predicted: &LandmarkSet, reference: &LandmarkSet) -> Result<Vec<f64>> {
    let a: BTreeMap<i64, [f64; 3]> = predicted.entries.iter().map(|l| (l.id, l.position())).collect();
    let b: BTreeMap<i64, [f64; 3]> = reference.entries.iter().map(|l| (l.id, l.position())).collect();
    if !a.keys().eq(b.keys()) {
        let only_a: Vec<_> = a.keys().filter(|k| !b.contains_key(k)).collect();
        let only_b: Vec<_> = b.keys().filter(|k| !a.contains_key(k)).collect();
        return Err(Error::Landmarks(format!(
            "id sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    Ok(a.iter()
        .map(|(id, p)| {
            let q = b[id];
            norm([p[0] - q[0], p[1] - q[1], p[2] - q[2]])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub mae_median: f64,
    pub mae_mean: f64,
    pub mtre: f64,
    pub robustness: f64,
    /// Median of the errors before registration.
    pub initial_mae_median: f64,
    pub folding_fraction: Option<f64>,
    pub errors: Vec<f64>,
}

pub fn case_metrics(after: &[f64], before: &[f64], jmap: Option<&JacobianMap>) -> Result<CaseMetrics> {
    if after.len() != before.len() {
        return Err(Error::Landmarks(format!(
            "{} errors after registration but {} before",
            after.len(),
            before.len()
        )));
    }
    if after.is_empty() {
        return Err(Error::Empty("landmark errors"));
    }
    let mean = mean(after);
    let improved = after.iter().zip(before).filter(|(a, b)| a < b).count();
    Ok(CaseMetrics {
        mae_median: quantile(after, 0.5),
        mae_mean: mean,
        mtre: mean,
        robustness: improved as f64 / after.len() as f64,
        initial_mae_median: quantile(before, 0.5),
        folding_fraction: jmap.map(folding_fraction),
        errors: after.to_vec(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear interpolation between order statistics at zero-based rank
/// `(n-1)p`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (s.len() - 1) as f64 * p;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single value.
    pub stddev: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

pub fn cohort_summary(values: &[f64]) -> Result<CohortSummary> {
    if values.is_empty() {
        return Err(Error::Empty("cohort values"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let n = values.len();
    let m = mean(values);
    let stddev = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(CohortSummary {
        n,
        mean: m,
        stddev,
        median: quantile(values, 0.5),
        q25: quantile(values, 0.25),
        q75: quantile(values, 0.75),
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Landmarks(format!("{}: {other:?}", path.display())),
    }
}

/// Parses landmark CSV text with header `id,x,y,z`.
pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Landmarks(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y", "z"] {
        return Err(Error::Landmarks(format!(
            "header must be id,x,y,z, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.deserialize::<Landmark>().enumerate() {
        let l = rec.map_err(|e| Error::Landmarks(format!("row {}: {e}", row + 1)))?;
        out.push(l);
    }
    LandmarkSet::new(out)
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text)
}

/// Writes `id,x,y,z` with shortest round-trip decimal formatting, so the
/// file parses back to identical values.
pub fn save_landmarks(lms: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for l in &lms.entries {
        w.serialize(l).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of the per-case metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: String,
    pub metrics: CaseMetrics,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    case: &'a str,
    initial_mae_median: f64,
    method_mae_median: f64,
    robustness: f64,
    mtre: f64,
    folding_fraction: Option<f64>,
}

/// Writes the metrics table as CSV at `path` and the full records (with
/// per-landmark errors) as JSON next to it.
pub fn save_metrics(records: &[CaseRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(MetricsRow {
            case: &r.case,
            initial_mae_median: r.metrics.initial_mae_median,
            method_mae_median: r.metrics.mae_median,
            robustness: r.metrics.robustness,
            mtre: r.metrics.mtre,
            folding_fraction: r.metrics.folding_fraction,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let json = path.with_extension("json");
    let text = serde_json::to_string_pretty(records).expect("metrics serialize");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

/// Long-format errors, one row per landmark: `case,method,error`.
pub fn save_error_table(rows: &[(String, String, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["case", "method", "error"]).map_err(|e| csv_err(path, e))?;
    for (case, method, err) in rows {
        w.serialize((case, method, err)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one column of numbers: either a bare list (one value per line) or
/// a CSV whose first numeric column is used. A non-numeric first line is
/// treated as a header.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match cells.iter().find_map(|c| c.parse::<f64>().ok()) {
            Some(v) => out.push(v),
            None if n == 0 => continue,
            None => return Err(Error::Landmarks(format!("line {}: no numeric value", n + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("value list"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn set(points: &[(i64, [f64; 3])]) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(id, p)| Landmark::new(id, p)).collect()).unwrap()
    }

    #[test]
    fn transform_examples() {
        let g = Grid::new([10, 10, 10], [1.0; 3]).unwrap();
        let lms = set(&[(1, [1.0, 2.0, 3.0]), (2, [4.5, 4.25, 0.0])]);
        let t = transform_landmarks(&lms, &DisplacementField::zeros(g));
        assert_eq!(t.landmarks, lms);
        assert!(t.clamped.is_empty());

        let t = transform_landmarks(&lms, &DisplacementField::constant(g, [2.0, 0.0, 0.0]));
        assert_eq!(t.landmarks.entries()[1].position(), [6.5, 4.25, 0.0]);

        let lin = DisplacementField::from_fn(g, |p| [0.5 * p[0], 0.0, 0.0]);
        let t = transform_landmarks(&set(&[(7, [4.0, 3.3, 2.7])]), &lin);
        assert_eq!(t.landmarks.entries()[0].x, 6.0);

        let t = transform_landmarks(&set(&[(3, [-1.0, 0.0, 0.0])]), &DisplacementField::zeros(g));
        assert_eq!(t.clamped, vec![3]);
    }

    #[test]
    fn error_examples() {
        let a = set(&[(1, [0.0; 3])]);
        let b = set(&[(1, [3.0, 4.0, 0.0])]);
        assert_eq!(landmark_errors(&a, &b).unwrap(), vec![5.0]);
        assert_eq!(landmark_errors(&a, &a).unwrap(), vec![0.0]);

        let p = set(&[(2, [0.0; 3]), (1, [0.0; 3])]);
        let q = set(&[(1, [3.0, 0.0, 0.0]), (2, [0.0, 4.0, 0.0])]);
        let e = landmark_errors(&p, &q).unwrap();
        assert_eq!(e, vec![3.0, 4.0]);
        assert_eq!(case_metrics(&e, &e, None).unwrap().mtre, 3.5);

        let r = set(&[(1, [0.0; 3]), (3, [0.0; 3])]);
        assert!(landmark_errors(&p, &r).is_err());
    }

    #[test]
    fn case_metric_examples() {
        let m = case_metrics(&[4.0, 6.0, 3.0, 5.0], &[5.0; 4], None).unwrap();
        assert_eq!(m.robustness, 0.5);
        let m = case_metrics(&[1.0, 2.0, 9.0], &[1.0, 2.0, 9.0], None).unwrap();
        assert_eq!((m.mae_median, m.mae_mean, m.mtre), (2.0, 4.0, 4.0));
        assert_eq!(m.robustness, 0.0);
        assert!(case_metrics(&[1.0], &[1.0, 2.0], None).is_err());
        assert!(case_metrics(&[], &[], None).is_err());
    }

    #[test]
    fn cohort_examples() {
        let s = cohort_summary(&[7.0]).unwrap();
        assert_eq!((s.mean, s.median, s.q25, s.q75, s.stddev), (7.0, 7.0, 7.0, 7.0, 0.0));
        let s = cohort_summary(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.median, s.q25, s.q75), (2.5, 1.75, 3.25));
        assert!(cohort_summary(&[]).is_err());
    }

    #[test]
    fn landmark_csv() {
        let s = parse_landmarks("id,x,y,z\n1,0,0,0\n").unwrap();
        assert_eq!(s.entries(), &[Landmark::new(1, [0.0; 3])]);
        assert!(parse_landmarks("id,x,y,z\n1,0,0,0\n1,2,3,4\n").is_err());
        assert!(parse_landmarks("id,x,y\n1,0,0\n").is_err());
        assert!(parse_landmarks("id,x,y,z\n1,0,zero,0\n").is_err());
    }

    #[test]
    fn value_lists() {
        assert_eq!(parse_values("value\n1.5\n2\n").unwrap(), vec![1.5, 2.0]);
        assert_eq!(parse_values("case,mae\nA,3\nB,4.5\n").unwrap(), vec![3.0, 4.5]);
        assert!(parse_values("x\n").is_err());
    }
}
