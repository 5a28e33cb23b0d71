//! Probability maps to point detections: map combination, peak detection and
//! box NMS.
//!
//! Ordering everywhere is score descending, then `(y, x)` ascending.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Detection, PredictionMaps};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Weight of the centroid map; the segmentation map gets `1 - w`.
    pub centroid_weight: f32,
    pub threshold: f32,
    /// Peaks closer than or exactly at this Euclidean distance are suppressed.
    pub min_distance: f64,
    pub nms_box: f64,
    pub nms_iou: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self::monkey()
    }
}

impl PostprocessConfig {
    /// Centroid/segmentation blend used for lymphocyte/monocyte data.
    pub fn monkey() -> Self {
        Self {
            centroid_weight: 0.6,
            threshold: 0.5,
            min_distance: 11.0,
            nms_box: 11.0,
            nms_iou: 0.5,
        }
    }

    pub fn puma() -> Self {
        Self::monkey()
    }

    pub fn pannuke() -> Self {
        Self {
            centroid_weight: 1.0,
            min_distance: 9.0,
            nms_box: 9.0,
            ..Self::monkey()
        }
    }

    pub fn conic() -> Self {
        Self {
            centroid_weight: 1.0,
            min_distance: 3.0,
            nms_box: 3.0,
            ..Self::monkey()
        }
    }

    pub fn midog() -> Self {
        Self {
            centroid_weight: 1.0,
            threshold: 0.99,
            min_distance: 21.0,
            nms_box: 21.0,
            ..Self::monkey()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.centroid_weight as f64) || !unit(self.threshold as f64) || !unit(self.nms_iou) {
            return Err(Error::InvalidConfig(
                "centroid_weight, threshold and nms_iou must lie in [0, 1]".into(),
            ));
        }
        if !(self.min_distance > 0.0) || !(self.nms_box > 0.0) {
            return Err(Error::InvalidConfig("min_distance and nms_box must be positive".into()));
        }
        Ok(())
    }
}

/// A scored point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Score descending, then `(y, x)` ascending.
pub fn rank(a: &Peak, b: &Peak) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

/// `w · centroid + (1 − w) · seg`; the centroid map alone when `seg` is absent.
pub fn combine_maps(centroid: &Array2<f32>, seg: Option<&Array2<f32>>, w: f32) -> Result<Array2<f32>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidInput(format!("centroid weight {w} outside [0, 1]")));
    }
    match seg {
        None => Ok(centroid.clone()),
        Some(_) if w == 1.0 => Ok(centroid.clone()),
        Some(s) => {
            if s.dim() != centroid.dim() {
                return Err(Error::Shape(format!(
                    "centroid {:?} vs seg {:?}",
                    centroid.dim(),
                    s.dim()
                )));
            }
            Ok(ndarray::Zip::from(centroid)
                .and(s)
                .map_collect(|&c, &s| w * c + (1.0 - w) * s))
        }
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS.iter().filter_map(move |&(dy, dx)| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then_some((ny as usize, nx as usize))
    })
}

/// Local maxima of the 8-neighbourhood with value ≥ `threshold`. A connected
/// plateau of equal values counts once if no pixel of it has a strictly
/// greater neighbour, and is reported at its member pixel closest to the
/// plateau's mean position. Output is in rank order.
pub fn local_maxima(map: &Array2<f32>, threshold: f32) -> Vec<Peak> {
    let (h, w) = map.dim();
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[[y, x]];
            if visited[[y, x]] || !(v >= threshold) {
                continue;
            }
            if neighbours(y, x, h, w).any(|(ny, nx)| map[[ny, nx]] > v) {
                continue;
            }
            // flood the equal-valued component
            members.clear();
            stack.push((y, x));
            visited[[y, x]] = true;
            let mut is_max = true;
            while let Some((cy, cx)) = stack.pop() {
                members.push((cy, cx));
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    let nv = map[[ny, nx]];
                    if nv > v {
                        is_max = false;
                    } else if nv == v && !visited[[ny, nx]] {
                        visited[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if !is_max {
                continue;
            }
            let (py, px) = if members.len() == 1 {
                members[0]
            } else {
                let n = members.len() as f64;
                let my = members.iter().map(|m| m.0 as f64).sum::<f64>() / n;
                let mx = members.iter().map(|m| m.1 as f64).sum::<f64>() / n;
                *members
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 as f64 - my).powi(2) + (a.1 as f64 - mx).powi(2);
                        let db = (b.0 as f64 - my).powi(2) + (b.1 as f64 - mx).powi(2);
                        da.total_cmp(&db).then(a.cmp(b))
                    })
                    .expect("non-empty plateau")
            };
            peaks.push(Peak {
                x: px as f64,
                y: py as f64,
                score: v as f64,
            });
        }
    }
    peaks.sort_by(rank);
    peaks
}

/// Greedy distance suppression over ranked points: a point is dropped when a
/// kept point lies within `min_distance` (inclusive). Uses a uniform grid so
/// each point is compared only with nearby kept points.
pub fn suppress_by_distance(mut points: Vec<Peak>, min_distance: f64) -> Vec<Peak> {
    points.sort_by(rank);
    let cell = min_distance.max(1e-9);
    let key = |p: &Peak| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<Peak> = Vec::new();
    let r2 = min_distance * min_distance;
    for p in points {
        let (cx, cy) = key(&p);
        let mut clash = false;
        'outer: for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(ids) = grid.get(&(gx, gy)) {
                    if ids
                        .iter()
                        .any(|&i| (kept[i].x - p.x).powi(2) + (kept[i].y - p.y).powi(2) <= r2)
                    {
                        clash = true;
                        break 'outer;
                    }
                }
            }
        }
        if !clash {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(p);
        }
    }
    kept
}

/// Local maxima ≥ `threshold`, thinned so no two survivors are within
/// `min_distance` of each other.
pub fn peak_local_max(map: &Array2<f32>, threshold: f32, min_distance: f64) -> Vec<Peak> {
    suppress_by_distance(local_maxima(map, threshold), min_distance)
}

/// IoU of two axis-aligned `size × size` boxes centred on `a` and `b`.
pub fn box_iou(a: &Peak, b: &Peak, size: f64) -> f64 {
    let ix = (size - (a.x - b.x).abs()).max(0.0);
    let iy = (size - (a.y - b.y).abs()).max(0.0);
    let inter = ix * iy;
    inter / (2.0 * size * size - inter)
}

/// Greedy box NMS: keep the best-ranked point, drop every remaining point
/// whose box IoU with a kept one exceeds `iou_threshold`.
pub fn nms(mut points: Vec<Peak>, box_size: f64, iou_threshold: f64) -> Vec<Peak> {
    points.sort_by(rank);
    // Boxes only overlap when both offsets are below the box size.
    let cell = box_size.max(1e-9);
    let key = |p: &Peak| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<Peak> = Vec::new();
    for p in points {
        let (cx, cy) = key(&p);
        let mut clash = false;
        'outer: for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(ids) = grid.get(&(gx, gy)) {
                    if ids.iter().any(|&i| box_iou(&kept[i], &p, box_size) > iou_threshold) {
                        clash = true;
                        break 'outer;
                    }
                }
            }
        }
        if !clash {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(p);
        }
    }
    kept
}

/// Box NMS applied per class over detections. `params` holds `(box size,
/// IoU threshold)` per class, or one pair for all classes.
pub fn nms_detections(dets: &[Detection], params: &[(f64, f64)]) -> Result<Vec<Detection>> {
    let mut by_class: HashMap<usize, Vec<Peak>> = HashMap::new();
    for d in dets {
        by_class.entry(d.class_index).or_default().push(Peak {
            x: d.x,
            y: d.y,
            score: d.confidence,
        });
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.sort_unstable();
    let mut out = Vec::with_capacity(dets.len());
    for c in classes {
        let &(size, iou) = if params.len() == 1 {
            params.first()
        } else {
            params.get(c)
        }
        .ok_or_else(|| Error::InvalidInput(format!("no NMS parameters for class {c}")))?;
        for p in nms(by_class.remove(&c).expect("class present"), size, iou) {
            out.push(Detection::new(p.x, p.y, c, p.score)?);
        }
    }
    Ok(out)
}

/// Per class: combine → peaks → NMS. `configs` holds one entry per class or
/// a single entry shared by all classes. Output is grouped by class, each
/// group in rank order.
pub fn extract_detections(maps: &PredictionMaps, configs: &[PostprocessConfig]) -> Result<Vec<Detection>> {
    let n = maps.classes.len();
    if configs.len() != n && configs.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "{} postprocess configs for {n} classes",
            configs.len()
        )));
    }
    let mut out = Vec::new();
    for (k, cm) in maps.classes.iter().enumerate() {
        let cfg = if configs.len() == 1 { &configs[0] } else { &configs[k] };
        cfg.validate()?;
        let combined = combine_maps(&cm.centroid, cm.seg.as_ref(), cfg.centroid_weight)?;
        let peaks = peak_local_max(&combined, cfg.threshold, cfg.min_distance);
        for p in nms(peaks, cfg.nms_box, cfg.nms_iou) {
            out.push(Detection::new(p.x, p.y, k, p.score.clamp(0.0, 1.0))?);
        }
    }
    Ok(out)
}
