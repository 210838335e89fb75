//! Keypoint evaluation: end-point error, PCK/PCKh curves, AUC, record
//! ingestion, and the random-shift robustness protocol.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::KEYPOINTS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 21 `(x, y)` pixel positions, optionally with visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f64; 2]>,
    visible: Option<Vec<bool>>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != KEYPOINTS {
            return Err(Error::shape(format!("{} keypoints, expected {KEYPOINTS}", points.len())));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NonFinite {
                context: "keypoint".into(),
                index: i,
            });
        }
        Ok(KeypointSet { points, visible: None })
    }

    /// From `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * KEYPOINTS {
            return Err(Error::shape(format!(
                "{} coordinates, expected {}",
                values.len(),
                2 * KEYPOINTS
            )));
        }
        KeypointSet::new(values.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn with_visibility(mut self, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != KEYPOINTS {
            return Err(Error::shape("visibility needs one flag per keypoint"));
        }
        self.visible = Some(visible);
        Ok(self)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.visible.as_ref().is_none_or(|v| v[i])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> KeypointSet {
        KeypointSet {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            visible: self.visible.clone(),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> KeypointSet {
        KeypointSet {
            points: self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect(),
            visible: self.visible.clone(),
        }
    }

    /// Every point inside `[0, width) x [0, height)`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.points
            .iter()
            .all(|p| p[0] >= 0.0 && p[0] < width && p[1] >= 0.0 && p[1] < height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: KeypointSet,
    pub ground_truth: KeypointSet,
    /// Per-sample reference length for PCKh.
    pub norm_scale: Option<f64>,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, prediction: KeypointSet, ground_truth: KeypointSet) -> Self {
        EvalRecord {
            id: id.into(),
            prediction,
            ground_truth,
            norm_scale: None,
        }
    }

    pub fn with_norm_scale(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::arg(format!("norm_scale must be positive, got {s}")));
        }
        self.norm_scale = Some(s);
        Ok(self)
    }

    /// Euclidean error of each keypoint visible in the ground truth.
    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        let p = self.prediction.points();
        let g = self.ground_truth.points();
        (0..KEYPOINTS)
            .filter(|&i| self.ground_truth.is_visible(i))
            .map(move |i| (p[i][0] - g[i][0]).hypot(p[i][1] - g[i][1]))
    }
}

fn pooled_errors(records: &[EvalRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::arg("no records to evaluate"));
    }
    let errs: Vec<f64> = records.iter().flat_map(|r| r.errors()).collect();
    if errs.is_empty() {
        return Err(Error::arg("no visible keypoints to evaluate"));
    }
    Ok(errs)
}

/// Mean and median per-keypoint error; the median of an even count is the
/// lower-middle element.
pub fn epe(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let mut errs = pooled_errors(records)?;
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    Ok((mean, errs[(errs.len() - 1) / 2]))
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::arg("empty threshold list"));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::arg("thresholds must be sorted ascending"));
    }
    Ok(())
}

fn fraction_within(errs: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let total = errs.len() as f64;
    thresholds
        .iter()
        .map(|&t| errs.iter().filter(|&&e| e <= t).count() as f64 / total)
        .collect()
}

/// Fraction of keypoints with error `<= sigma` pixels, per threshold.
pub fn pck_curve(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_thresholds(thresholds)?;
    Ok(fraction_within(&pooled_errors(records)?, thresholds))
}

/// As [`pck_curve`] with each error divided by its record's `norm_scale`.
pub fn pckh_curve(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_thresholds(thresholds)?;
    if records.is_empty() {
        return Err(Error::arg("no records to evaluate"));
    }
    let mut errs = Vec::new();
    for r in records {
        let s = r
            .norm_scale
            .ok_or_else(|| Error::arg(format!("record `{}` has no norm_scale", r.id)))?;
        errs.extend(r.errors().map(|e| e / s));
    }
    if errs.is_empty() {
        return Err(Error::arg("no visible keypoints to evaluate"));
    }
    Ok(fraction_within(&errs, thresholds))
}

/// Trapezoidal area under `curve`, divided by the threshold range.
pub fn auc(curve: &[f64], thresholds: &[f64]) -> Result<f64> {
    if curve.len() != thresholds.len() {
        return Err(Error::arg(format!(
            "{} curve values for {} thresholds",
            curve.len(),
            thresholds.len()
        )));
    }
    if curve.len() < 2 {
        return Err(Error::arg("AUC needs at least two points"));
    }
    check_thresholds(thresholds)?;
    let range = thresholds[thresholds.len() - 1] - thresholds[0];
    if range <= 0.0 {
        return Err(Error::arg("threshold range is empty"));
    }
    let area: f64 = (1..curve.len())
        .map(|i| 0.5 * (curve[i] + curve[i - 1]) * (thresholds[i] - thresholds[i - 1]))
        .sum();
    Ok(area / range)
}

fn grid(max: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|i| i as f64 * max / (steps - 1) as f64).collect()
}

/// 0 to 30 px in 61 steps.
pub fn pck_thresholds() -> Vec<f64> {
    grid(30.0, 61)
}

/// 0 to 1 in 51 steps.
pub fn pckh_thresholds() -> Vec<f64> {
    grid(1.0, 51)
}

/// `threshold,value` lines with a header.
pub fn curve_csv(thresholds: &[f64], curve: &[f64]) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in thresholds.iter().zip(curve) {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

/// Summary of one evaluation pass on the default grids.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub epe_mean: f64,
    pub epe_median: f64,
    pub auc: f64,
    pub pck: Vec<f64>,
    pub pckh: Option<Vec<f64>>,
    pub pckh_auc: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Result<MetricSummary> {
    let (epe_mean, epe_median) = epe(records)?;
    let th = pck_thresholds();
    let pck = pck_curve(records, &th)?;
    let auc_pck = auc(&pck, &th)?;
    let (pckh, pckh_auc) = if records.iter().all(|r| r.norm_scale.is_some()) {
        let th = pckh_thresholds();
        let c = pckh_curve(records, &th)?;
        let a = auc(&c, &th)?;
        (Some(c), Some(a))
    } else {
        (None, None)
    };
    Ok(MetricSummary {
        count: records.len(),
        epe_mean,
        epe_median,
        auc: auc_pck,
        pck,
        pckh,
        pckh_auc,
    })
}

impl std::fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "records={} AUC(0-30px)={:.4} EPE mean={:.4}px median={:.4}px",
            self.count, self.auc, self.epe_mean, self.epe_median
        )?;
        if let Some(a) = self.pckh_auc {
            write!(f, " PCKh-AUC={a:.4}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ingestion
//
// Combined file, one record per line, fields separated by whitespace or commas:
//   id  px0 py0 .. px20 py20  gx0 gy0 .. gx20 gy20  [norm_scale]
// Split files: each line is `id x0 y0 .. x20 y20 [norm_scale]`; records pair
// up by id, and norm_scale is read from the ground-truth file.
// Blank lines and lines starting with `#` are skipped.

const FLAT: usize = 2 * KEYPOINTS;

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_numbers(fs: &[&str], line: usize) -> Result<Vec<f64>> {
    fs.iter()
        .map(|f| {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                detail: format!("`{f}` is not a number"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line,
                    detail: format!("non-finite value `{f}`"),
                })
            }
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn keypoints_at(values: &[f64], line: usize) -> Result<KeypointSet> {
    KeypointSet::from_flat(values).map_err(|e| Error::Parse {
        line,
        detail: e.to_string(),
    })
}

fn attach_scale(r: EvalRecord, scale: Option<f64>, line: usize) -> Result<EvalRecord> {
    match scale {
        None => Ok(r),
        Some(s) => r.with_norm_scale(s).map_err(|e| Error::Parse {
            line,
            detail: e.to_string(),
        }),
    }
}

/// Parses the combined record format.
pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fs = fields(l);
        let n = fs.len() - 1;
        if n != 2 * FLAT && n != 2 * FLAT + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected id + {} or {} values, found {n}", 2 * FLAT, 2 * FLAT + 1),
            });
        }
        let v = parse_numbers(&fs[1..], line)?;
        let r = EvalRecord::new(fs[0], keypoints_at(&v[..FLAT], line)?, keypoints_at(&v[FLAT..2 * FLAT], line)?);
        out.push(attach_scale(r, v.get(2 * FLAT).copied(), line)?);
    }
    Ok(out)
}

/// Line number, id, keypoints and optional normalization scale.
type Keyed = (usize, String, KeypointSet, Option<f64>);

fn parse_keyed(text: &str) -> Result<Vec<Keyed>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fs = fields(l);
        let n = fs.len() - 1;
        if n != FLAT && n != FLAT + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected id + {FLAT} or {} values, found {n}", FLAT + 1),
            });
        }
        let v = parse_numbers(&fs[1..], line)?;
        out.push((line, fs[0].to_string(), keypoints_at(&v[..FLAT], line)?, v.get(FLAT).copied()));
    }
    Ok(out)
}

/// Pairs a prediction file with a ground-truth file by record id.
pub fn parse_split_records(pred: &str, gt: &str) -> Result<Vec<EvalRecord>> {
    let mut truth: HashMap<String, (usize, KeypointSet, Option<f64>)> = HashMap::new();
    for (line, id, k, s) in parse_keyed(gt)? {
        if truth.insert(id.clone(), (line, k, s)).is_some() {
            return Err(Error::Parse {
                line,
                detail: format!("duplicate ground-truth id `{id}`"),
            });
        }
    }
    let mut out = Vec::new();
    for (line, id, k, _) in parse_keyed(pred)? {
        let (gline, g, s) = truth.remove(&id).ok_or_else(|| Error::Parse {
            line,
            detail: format!("no ground truth for id `{id}`"),
        })?;
        out.push(attach_scale(EvalRecord::new(id, k, g), s, gline)?);
    }
    if let Some((id, (line, ..))) = truth.into_iter().min_by_key(|(_, v)| v.0) {
        return Err(Error::Parse {
            line,
            detail: format!("ground truth `{id}` has no prediction"),
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    parse_records(&std::fs::read_to_string(path)?)
}

/// One combined-format line for `r`.
pub fn format_record(r: &EvalRecord) -> String {
    let mut s = r.id.clone();
    for v in r.prediction.flat().iter().chain(&r.ground_truth.flat()) {
        let _ = write!(s, " {v}");
    }
    if let Some(n) = r.norm_scale {
        let _ = write!(s, " {n}");
    }
    s
}

// ---------------------------------------------------------------------------
// Shift robustness

/// Anything that maps a batch of images to pixel keypoints.
pub trait KeypointPredictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<KeypointSet>>;
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub keypoints: KeypointSet,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Translates every batch item by `(dx, dy)` pixels (content moves right
/// and down for positive values); uncovered pixels are filled by reflection.
pub fn shift_reflect(x: &Tensor, dx: isize, dy: isize) -> Tensor {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for h in 0..s.h {
            let sh = reflect(h as isize - dy, s.h);
            for w in 0..s.w {
                let sw = reflect(w as isize - dx, s.w);
                y.pixel_mut(n, h, w).copy_from_slice(x.pixel(n, sh, sw));
            }
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub baseline: MetricSummary,
    pub shifted: MetricSummary,
    /// Samples dropped because a shifted keypoint left the frame.
    pub skipped: usize,
}

impl ShiftReport {
    pub fn epe_degradation(&self) -> f64 {
        self.shifted.epe_mean - self.baseline.epe_mean
    }

    pub fn auc_degradation(&self) -> f64 {
        self.baseline.auc - self.shifted.auc
    }
}

fn predict_one<P: KeypointPredictor + ?Sized>(model: &P, image: &Tensor) -> Result<KeypointSet> {
    model
        .predict(image)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::arg("predictor returned no keypoints"))
}

/// Evaluates `model` on the samples as-is and under a per-sample integer
/// shift drawn uniformly from `[-max_shift, max_shift]` on both axes.
///
/// A sample whose shifted keypoints leave the frame is dropped from both
/// passes, so the two summaries cover the same samples.
pub fn shift_robustness<P: KeypointPredictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    max_shift: usize,
    seed: u64,
) -> Result<ShiftReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as i64;
    let mut base = Vec::new();
    let mut shifted = Vec::new();
    let mut skipped = 0;
    for (i, s) in samples.iter().enumerate() {
        let dx = rng.random_range(-m..=m) as isize;
        let dy = rng.random_range(-m..=m) as isize;
        let shape = s.image.shape();
        let gt = s.keypoints.translated(dx as f64, dy as f64);
        if !gt.inside(shape.w as f64, shape.h as f64) {
            skipped += 1;
            continue;
        }
        let id = format!("sample{i}");
        base.push(EvalRecord::new(id.clone(), predict_one(model, &s.image)?, s.keypoints.clone()));
        let moved = if dx == 0 && dy == 0 {
            s.image.clone()
        } else {
            shift_reflect(&s.image, dx, dy)
        };
        shifted.push(EvalRecord::new(id, predict_one(model, &moved)?, gt));
    }
    if base.is_empty() {
        return Err(Error::arg(format!("all {} samples were shifted out of frame", samples.len())));
    }
    Ok(ShiftReport {
        baseline: summarize(&base)?,
        shifted: summarize(&shifted)?,
        skipped,
    })
}
