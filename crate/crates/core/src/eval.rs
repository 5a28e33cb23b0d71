//! Point-matching metrics: greedy radius matching, F1 (pooled and per-image),
//! the combined detection/classification F1 used for PanNuke, and FROC.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Centroid, Detection};

/// A prediction for matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl From<&Detection> for ScoredPoint {
    fn from(d: &Detection) -> Self {
        Self {
            x: d.x,
            y: d.y,
            confidence: d.confidence,
        }
    }
}

/// Greedy matching outcome. `pairs` holds `(pred index, gt index, distance)`
/// in matching order; indices refer to the caller's slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    /// Count-only result, for pooling.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            fn_,
            pairs: Vec::new(),
        }
    }
}

/// Prediction order: confidence descending, then `(y, x)` ascending, then
/// input index.
pub fn prediction_order(preds: &[ScoredPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.confidence
            .total_cmp(&pa.confidence)
            .then(pa.y.total_cmp(&pb.y))
            .then(pa.x.total_cmp(&pb.x))
            .then(a.cmp(&b))
    });
    order
}

struct GtIndex<'a> {
    gts: &'a [(f64, f64)],
    cell: f64,
    grid: HashMap<(i64, i64), Vec<usize>>,
    taken: Vec<bool>,
}

impl<'a> GtIndex<'a> {
    fn new(gts: &'a [(f64, f64)], radius: f64) -> Self {
        let cell = radius.max(1e-9);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(x, y)) in gts.iter().enumerate() {
            grid.entry(((x / cell).floor() as i64, (y / cell).floor() as i64))
                .or_default()
                .push(i);
        }
        Self {
            gts,
            cell,
            grid,
            taken: vec![false; gts.len()],
        }
    }

    /// Nearest untaken gt within `radius` (inclusive); ties go to the
    /// smaller `(y, x)`, then the smaller index.
    fn claim(&mut self, x: f64, y: f64, radius: f64) -> Option<(usize, f64)> {
        let cx = (x / self.cell).floor() as i64;
        let cy = (y / self.cell).floor() as i64;
        let mut best: Option<(usize, f64)> = None;
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                let Some(ids) = self.grid.get(&(gx, gy)) else { continue };
                for &i in ids {
                    if self.taken[i] {
                        continue;
                    }
                    let (tx, ty) = self.gts[i];
                    let d = (tx - x).hypot(ty - y);
                    if d > radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((j, bd)) => {
                            let (jx, jy) = self.gts[j];
                            d.total_cmp(&bd)
                                .then(ty.total_cmp(&jy))
                                .then(tx.total_cmp(&jx))
                                .then(i.cmp(&j))
                                .is_lt()
                        }
                    };
                    if better {
                        best = Some((i, d));
                    }
                }
            }
        }
        if let Some((i, _)) = best {
            self.taken[i] = true;
        }
        best
    }
}

/// Greedy one-to-one matching: in prediction order, each prediction claims
/// its nearest unmatched ground-truth point within `radius`. Also returns,
/// for every prediction in that order, whether it was a hit.
fn greedy(preds: &[ScoredPoint], gts: &[(f64, f64)], radius: f64) -> (MatchResult, Vec<(usize, bool)>) {
    let mut index = GtIndex::new(gts, radius);
    let mut pairs = Vec::new();
    let mut trace = Vec::with_capacity(preds.len());
    for i in prediction_order(preds) {
        let p = preds[i];
        let hit = index.claim(p.x, p.y, radius);
        if let Some((g, d)) = hit {
            pairs.push((i, g, d));
        }
        trace.push((i, hit.is_some()));
    }
    let tp = pairs.len();
    (
        MatchResult {
            tp,
            fp: preds.len() - tp,
            fn_: gts.len() - tp,
            pairs,
        },
        trace,
    )
}

pub fn match_points(preds: &[ScoredPoint], gts: &[(f64, f64)], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "matching radius must be positive, got {radius}"
        )));
    }
    Ok(greedy(preds, gts, radius).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `F1 = 2TP / (2TP + FP + FN)`; every 0/0 is 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> F1Score {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    F1Score {
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    }
}

/// Counts pooled over images, then one F1.
pub fn f1_global(per_image: &[MatchResult]) -> F1Score {
    let (tp, fp, fn_) = per_image
        .iter()
        .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
    f1_from_counts(tp, fp, fn_)
}

/// What an image with no prediction and no ground truth of a class
/// contributes to the per-image mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyImages {
    /// Left out of the mean.
    #[default]
    Skip,
    /// Counted as F1 = 0.
    Zero,
}

/// Mean of per-image scores. Images with no prediction and no ground truth
/// are skipped; with nothing left the result is 0.
pub fn f1_per_image_avg(per_image: &[MatchResult]) -> F1Score {
    f1_per_image_avg_with(per_image, EmptyImages::Skip)
}

pub fn f1_per_image_avg_with(per_image: &[MatchResult], empty: EmptyImages) -> F1Score {
    let scored: Vec<F1Score> = per_image
        .iter()
        .filter(|m| empty == EmptyImages::Zero || m.tp + m.fp + m.fn_ > 0)
        .map(|m| f1_from_counts(m.tp, m.fp, m.fn_))
        .collect();
    if scored.is_empty() {
        return F1Score {
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
        };
    }
    let n = scored.len() as f64;
    F1Score {
        f1: scored.iter().map(|s| s.f1).sum::<f64>() / n,
        precision: scored.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scored.iter().map(|s| s.recall).sum::<f64>() / n,
    }
}

/// Classification counts for one class over detection-matched pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanNukeScore {
    pub detection: F1Score,
    pub tp_d: usize,
    pub fp_d: usize,
    pub fn_d: usize,
    pub per_class: Vec<F1Score>,
    pub confusion: Vec<ConfusionCounts>,
}

/// Per-class confusion over matched `(pred class, gt class)` pairs.
pub fn confusion_from_pairs(pairs: &[(usize, usize)], n_classes: usize) -> Vec<ConfusionCounts> {
    (0..n_classes)
        .map(|c| {
            let mut k = ConfusionCounts::default();
            for &(p, g) in pairs {
                match (p == c, g == c) {
                    (true, true) => k.tp += 1,
                    (false, false) => k.tn += 1,
                    (true, false) => k.fp += 1,
                    (false, true) => k.fn_ += 1,
                }
            }
            k
        })
        .collect()
}

/// Combined detection/classification score from pooled detection counts and
/// per-class confusion counts, with the TN_c terms and the FP_d/FN_d leakage
/// into the class denominators.
pub fn pannuke_f1(tp_d: usize, fp_d: usize, fn_d: usize, confusion: &[ConfusionCounts]) -> PanNukeScore {
    let (fpd, fnd) = (fp_d as f64, fn_d as f64);
    let per_class = confusion
        .iter()
        .map(|k| {
            let good = (k.tp + k.tn) as f64;
            let (fp, fn_) = (k.fp as f64, k.fn_ as f64);
            F1Score {
                f1: ratio(2.0 * good, 2.0 * good + 2.0 * fp + 2.0 * fn_ + fpd + fnd),
                precision: ratio(good, good + 2.0 * fp + fpd),
                recall: ratio(good, good + 2.0 * fn_ + fnd),
            }
        })
        .collect();
    PanNukeScore {
        detection: f1_from_counts(tp_d, fp_d, fn_d),
        tp_d,
        fp_d,
        fn_d,
        per_class,
        confusion: confusion.to_vec(),
    }
}

/// Class-agnostic matching per image, classification counts over the
/// matched pairs, everything pooled across images.
pub fn pannuke_evaluate(
    images: &[(Vec<Detection>, Vec<Centroid>)],
    n_classes: usize,
    radius: f64,
) -> Result<PanNukeScore> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut class_pairs = Vec::new();
    for (preds, gts) in images {
        let p: Vec<ScoredPoint> = preds.iter().map(ScoredPoint::from).collect();
        let g: Vec<(f64, f64)> = gts.iter().map(|c| (c.x, c.y)).collect();
        let m = match_points(&p, &g, radius)?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        for &(pi, gi, _) in &m.pairs {
            class_pairs.push((preds[pi].class_index, gts[gi].class_index));
        }
    }
    Ok(pannuke_f1(tp, fp, fn_, &confusion_from_pairs(&class_pairs, n_classes)))
}

/// Per-class match results for every image, with a per-class radius.
pub fn per_class_matches(images: &[(Vec<Detection>, Vec<Centroid>)], radii: &[f64]) -> Result<Vec<Vec<MatchResult>>> {
    radii
        .iter()
        .enumerate()
        .map(|(c, &r)| {
            images
                .iter()
                .map(|(preds, gts)| {
                    let p: Vec<ScoredPoint> = preds
                        .iter()
                        .filter(|d| d.class_index == c)
                        .map(ScoredPoint::from)
                        .collect();
                    let g: Vec<(f64, f64)> = gts.iter().filter(|t| t.class_index == c).map(|t| (t.x, t.y)).collect();
                    match_points(&p, &g, r)
                })
                .collect()
        })
        .collect()
}

/// Default false-positive rates (per mm²) at which sensitivity is averaged.
pub const DEFAULT_FP_RATES: [f64; 5] = [10.0, 20.0, 50.0, 100.0, 200.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_mm2: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// One point per unique confidence, thresholds descending.
    pub points: Vec<FrocPoint>,
    pub area_mm2: f64,
    pub n_gt: usize,
    pub fp_rates: Vec<f64>,
    pub sensitivities_at_rates: Vec<f64>,
    pub score: f64,
}

/// Sensitivity at `rate`: linear interpolation between sweep points,
/// clamped to the first and last point. Where several points share an FP
/// rate the last of them (lowest threshold) is used.
pub fn interpolate_sensitivity(points: &[FrocPoint], rate: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let Some(i) = points.iter().rposition(|p| p.fp_per_mm2 <= rate) else {
        return points[0].sensitivity;
    };
    if i + 1 == points.len() {
        return points[i].sensitivity;
    }
    let (a, b) = (&points[i], &points[i + 1]);
    let t = (rate - a.fp_per_mm2) / (b.fp_per_mm2 - a.fp_per_mm2);
    a.sensitivity + t * (b.sensitivity - a.sensitivity)
}

/// Predictions and ground-truth points of one image.
pub type ImagePoints = (Vec<ScoredPoint>, Vec<(f64, f64)>);

/// FROC over several images of one class stream. `radius_px` is the
/// matching margin in pixels (`margin_µm / mpp`); `area_mm2` is the total
/// annotated area.
///
/// Greedy matching in confidence order makes the matches at any threshold a
/// prefix of the full run, so a single pass per image yields every point.
pub fn froc(images: &[ImagePoints], radius_px: f64, area_mm2: f64, fp_rates: &[f64]) -> Result<FrocCurve> {
    if !(area_mm2 > 0.0) {
        return Err(Error::InvalidInput(format!("area must be positive, got {area_mm2}")));
    }
    if !(radius_px > 0.0) {
        return Err(Error::InvalidInput(format!(
            "matching radius must be positive, got {radius_px}"
        )));
    }
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut events: Vec<(f64, bool)> = Vec::new();
    for (preds, gts) in images {
        let (_, trace) = greedy(preds, gts, radius_px);
        events.extend(trace.into_iter().map(|(i, hit)| (preds[i].confidence, hit)));
    }
    // Stable sort keeps each image's internal order inside a tie group; a
    // tie group is always taken whole.
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(conf, hit)) in events.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if events.get(k + 1).is_none_or(|next| next.0 != conf) {
            points.push(FrocPoint {
                threshold: conf,
                fp_per_mm2: fp as f64 / area_mm2,
                sensitivity: ratio(tp as f64, n_gt as f64),
            });
        }
    }
    let sensitivities_at_rates: Vec<f64> = fp_rates.iter().map(|&r| interpolate_sensitivity(&points, r)).collect();
    let score = if sensitivities_at_rates.is_empty() {
        0.0
    } else {
        sensitivities_at_rates.iter().sum::<f64>() / sensitivities_at_rates.len() as f64
    };
    Ok(FrocCurve {
        points,
        area_mm2,
        n_gt,
        fp_rates: fp_rates.to_vec(),
        sensitivities_at_rates,
        score,
    })
}
