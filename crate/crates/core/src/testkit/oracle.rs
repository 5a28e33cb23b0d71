//! Slow reference implementations. None of these call into the main-path
//! modules; they only share the plain data types.

use ndarray::Array2;

/// Largest number of one-to-one pairs within `radius` (inclusive), by
/// exhaustive search. Intended for at most 8 points per side.
pub fn oracle_match(preds: &[(f64, f64)], gts: &[(f64, f64)], radius: f64) -> usize {
    assert!(
        preds.len() <= 8 && gts.len() <= 8,
        "oracle_match is exhaustive; keep inputs small"
    );
    fn go(i: usize, preds: &[(f64, f64)], gts: &[(f64, f64)], used: &mut Vec<bool>, radius: f64) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, used, radius);
        for j in 0..gts.len() {
            let d = ((preds[i].0 - gts[j].0).powi(2) + (preds[i].1 - gts[j].1).powi(2)).sqrt();
            if !used[j] && d <= radius {
                used[j] = true;
                best = best.max(1 + go(i + 1, preds, gts, used, radius));
                used[j] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], radius)
}

/// Scalar loss components computed with plain loops in f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleLosses {
    pub bce: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub focal: f64,
    pub centroid: f64,
    pub bce_dice: f64,
}

pub fn oracle_scalar_losses(p: &[f64], g: &[f64], eps: f64, alpha: f64, gamma: f64, clamp: f64) -> OracleLosses {
    assert_eq!(p.len(), g.len());
    let n = p.len() as f64;
    let mut bce = 0.0;
    let mut focal = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    let mut spg = 0.0;
    let mut sp2 = 0.0;
    let mut sg2 = 0.0;
    for i in 0..p.len() {
        let pi = p[i];
        let gi = g[i];
        let pc = if pi < clamp {
            clamp
        } else if pi > 1.0 - clamp {
            1.0 - clamp
        } else {
            pi
        };
        bce -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
        focal -= alpha * gi * (1.0 - pc).powf(gamma) * pc.ln()
            + (1.0 - alpha) * (1.0 - gi) * pc.powf(gamma) * (1.0 - pc).ln();
        sp += pi;
        sg += gi;
        spg += pi * gi;
        sp2 += pi * pi;
        sg2 += gi * gi;
    }
    let bce = bce / n;
    let focal = focal / n;
    let dice = 1.0 - (2.0 * spg + eps) / (sp + sg + eps);
    let jaccard = 1.0 - (spg + eps) / (sp2 + sg2 - spg + eps);
    OracleLosses {
        bce,
        dice,
        jaccard,
        focal,
        centroid: jaccard + dice + focal,
        bce_dice: bce + dice,
    }
}

/// Pixels having at least one in-image 8-neighbour with a different label.
pub fn oracle_boundary(labels: &Array2<u32>) -> Array2<u8> {
    let (h, w) = labels.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut differs = false;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if labels[[ny as usize, nx as usize]] != labels[[y, x]] {
                        differs = true;
                    }
                }
            }
            out[[y, x]] = differs as u8;
        }
    }
    out
}

/// 3×3 binary dilation.
pub fn oracle_dilate1(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut hit = 0;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                hit |= mask[[ny, nx]];
            }
        }
        hit
    })
}

/// Rasterises disks of `diameter` around rounded points by testing every
/// pixel of the image against every point.
pub fn oracle_disks(points: &[(f64, f64)], diameter: usize, h: usize, w: usize) -> Array2<u8> {
    let r = diameter as f64 / 2.0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        points.iter().any(|&(px, py)| {
            let dx = x as f64 - px.round();
            let dy = y as f64 - py.round();
            dx * dx + dy * dy <= r * r
        }) as u8
    })
}

/// Greedy suppression by score desc, `(y, x)` asc over all pairs: a point is
/// dropped when a kept point is within `min_distance`, then a point is
/// dropped when a kept point's `box_size` box overlaps its own with IoU
/// above `iou`.
pub fn oracle_suppress(points: &[(f64, f64, f64)], min_distance: f64, box_size: f64, iou: f64) -> Vec<(f64, f64, f64)> {
    let mut order = points.to_vec();
    order.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.0.partial_cmp(&b.0).unwrap())
    });
    let mut by_distance: Vec<(f64, f64, f64)> = Vec::new();
    for p in order {
        if by_distance
            .iter()
            .all(|k| ((k.0 - p.0).powi(2) + (k.1 - p.1).powi(2)).sqrt() > min_distance)
        {
            by_distance.push(p);
        }
    }
    let mut kept: Vec<(f64, f64, f64)> = Vec::new();
    for p in by_distance {
        let overlaps = kept.iter().any(|k| {
            let ix = (box_size - (k.0 - p.0).abs()).max(0.0);
            let iy = (box_size - (k.1 - p.1).abs()).max(0.0);
            let inter = ix * iy;
            inter / (2.0 * box_size * box_size - inter) > iou
        });
        if !overlaps {
            kept.push(p);
        }
    }
    kept
}

/// FROC sensitivity/FP pairs by re-running an independent greedy matcher at
/// every unique confidence threshold. Returns `(threshold, fp, tp)`.
pub fn oracle_froc_sweep(preds: &[(f64, f64, f64)], gts: &[(f64, f64)], radius: f64) -> Vec<(f64, usize, usize)> {
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.2).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let mut active: Vec<(f64, f64, f64)> = preds.iter().copied().filter(|p| p.2 >= t).collect();
            active.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then(a.1.partial_cmp(&b.1).unwrap())
                    .then(a.0.partial_cmp(&b.0).unwrap())
            });
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for p in &active {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let d = ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
                    if !used[j] && d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((j, d));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
            (t, active.len() - tp, tp)
        })
        .collect()
}
