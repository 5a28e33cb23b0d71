//! Evaluation of point CSVs against ground-truth CSVs.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::config::EvalFile;
use crate::error::{Error, Result};
use crate::eval::{
    f1_global, f1_per_image_avg_with, froc, pannuke_evaluate, per_class_matches, F1Score, FrocCurve, ImagePoints,
    PanNukeScore, ScoredPoint,
};
use crate::io::{group_by_id, rows_to_detections, PointRow};
use crate::types::{Centroid, ClassSpec, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Froc,
    PanNuke,
    GlobalF1,
    PerImageF1,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "froc" => Ok(Protocol::Froc),
            "pannuke" => Ok(Protocol::PanNuke),
            "global_f1" => Ok(Protocol::GlobalF1),
            "per_image_f1" => Ok(Protocol::PerImageF1),
            other => Err(Error::InvalidInput(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Report {
    Froc {
        classes: Vec<String>,
        radius_px: f64,
        curves: Vec<FrocCurve>,
        mean_score: f64,
    },
    Pannuke {
        classes: Vec<String>,
        radius_px: f64,
        #[serde(flatten)]
        score: PanNukeScore,
    },
    GlobalF1 {
        classes: Vec<String>,
        radius_px: f64,
        per_class: Vec<F1Score>,
        mean_f1: f64,
    },
    PerImageF1 {
        classes: Vec<String>,
        radius_px: f64,
        per_class: Vec<F1Score>,
        mean_f1: f64,
    },
}

impl Report {
    /// `class,threshold,fp_per_mm2,sensitivity` rows for FROC reports.
    pub fn froc_csv(&self) -> Option<String> {
        let Report::Froc { classes, curves, .. } = self else {
            return None;
        };
        let mut out = String::from("class,threshold,fp_per_mm2,sensitivity\n");
        for (name, c) in classes.iter().zip(curves) {
            for p in &c.points {
                out.push_str(&format!("{name},{},{},{}\n", p.threshold, p.fp_per_mm2, p.sensitivity));
            }
        }
        Some(out)
    }
}

fn class_names(cfg: &EvalFile, pred: &[PointRow], gt: &[PointRow]) -> Vec<String> {
    if let Some(c) = &cfg.classes {
        return c.clone();
    }
    let set: BTreeSet<&str> = pred.iter().chain(gt).map(|r| r.class_name.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

/// Pairs predictions and ground truth per image id. Ids present in only one
/// file get an empty list on the other side.
pub fn pair_images(
    pred: Vec<PointRow>,
    gt: Vec<PointRow>,
    classes: &ClassSpec,
) -> Result<Vec<(Vec<Detection>, Vec<Centroid>)>> {
    let mut p = group_by_id(pred);
    let mut g = group_by_id(gt);
    let ids: BTreeSet<String> = p.keys().chain(g.keys()).cloned().collect();
    ids.into_iter()
        .map(|id| {
            let dets = rows_to_detections(&p.remove(&id).unwrap_or_default(), classes)?;
            let gts = rows_to_detections(&g.remove(&id).unwrap_or_default(), classes)?
                .into_iter()
                .map(|d| Centroid {
                    x: d.x,
                    y: d.y,
                    class_index: d.class_index,
                })
                .collect();
            Ok((dets, gts))
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate(protocol: Protocol, pred: Vec<PointRow>, gt: Vec<PointRow>, cfg: &EvalFile) -> Result<Report> {
    let names = class_names(cfg, &pred, &gt);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    // Dilation size is irrelevant here; only names and radii are used.
    let radius = match (protocol, cfg.margin_um, cfg.radius) {
        (Protocol::Froc, Some(m), _) => m / cfg.mpp,
        (_, _, Some(r)) => r,
        _ => {
            return Err(Error::InvalidConfig(
                "evaluation needs `radius` (or `margin_um` for froc)".into(),
            ))
        }
    };
    let classes = ClassSpec::uniform(&refs, 1, radius)?;
    let images = pair_images(pred, gt, &classes)?;
    Ok(match protocol {
        Protocol::Froc => {
            let per_image_area = match (cfg.area_mm2_per_image, cfg.image_size) {
                (Some(a), _) => a,
                (None, Some((h, w))) => (h * w) as f64 * cfg.mpp * cfg.mpp * 1e-6,
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "froc needs `area_mm2_per_image` or `image_size`".into(),
                    ))
                }
            };
            let area = per_image_area * images.len() as f64;
            let curves = (0..classes.len())
                .map(|k| {
                    let per: Vec<ImagePoints> = images
                        .iter()
                        .map(|(p, g)| {
                            (
                                p.iter().filter(|d| d.class_index == k).map(ScoredPoint::from).collect(),
                                g.iter().filter(|c| c.class_index == k).map(|c| (c.x, c.y)).collect(),
                            )
                        })
                        .collect();
                    froc(&per, radius, area, &cfg.fp_rates)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_score = mean(curves.iter().map(|c| c.score));
            Report::Froc {
                classes: names,
                radius_px: radius,
                curves,
                mean_score,
            }
        }
        Protocol::PanNuke => Report::Pannuke {
            score: pannuke_evaluate(&images, classes.len(), radius)?,
            classes: names,
            radius_px: radius,
        },
        Protocol::GlobalF1 | Protocol::PerImageF1 => {
            let radii = vec![radius; classes.len()];
            let matches = per_class_matches(&images, &radii)?;
            let per_class: Vec<F1Score> = matches
                .iter()
                .map(|m| {
                    if protocol == Protocol::GlobalF1 {
                        f1_global(m)
                    } else {
                        f1_per_image_avg_with(m, cfg.empty_images)
                    }
                })
                .collect();
            let mean_f1 = mean(per_class.iter().map(|s| s.f1));
            if protocol == Protocol::GlobalF1 {
                Report::GlobalF1 {
                    classes: names,
                    radius_px: radius,
                    per_class,
                    mean_f1,
                }
            } else {
                Report::PerImageF1 {
                    classes: names,
                    radius_px: radius,
                    per_class,
                    mean_f1,
                }
            }
        }
    })
}

/// Per-class detection counts, for logging.
pub fn class_counts(rows: &[PointRow]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in rows {
        *out.entry(r.class_name.clone()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, x: f64, y: f64, c: &str, conf: Option<f64>) -> PointRow {
        PointRow {
            id: id.into(),
            x,
            y,
            class_name: c.into(),
            confidence: conf,
        }
    }

    #[test]
    fn global_f1_report() {
        let gt = vec![row("a", 10.0, 10.0, "t", None), row("b", 5.0, 5.0, "t", None)];
        let pred = vec![
            row("a", 11.0, 10.0, "t", Some(0.9)),
            row("b", 40.0, 40.0, "t", Some(0.8)),
        ];
        let cfg = EvalFile {
            radius: Some(3.0),
            ..Default::default()
        };
        let Report::GlobalF1 { per_class, .. } = evaluate(Protocol::GlobalF1, pred, gt, &cfg).unwrap() else {
            panic!()
        };
        assert_eq!(per_class[0].f1, 0.5);
    }

    #[test]
    fn froc_needs_area() {
        let cfg = EvalFile {
            radius: Some(3.0),
            ..Default::default()
        };
        assert!(evaluate(Protocol::Froc, vec![], vec![row("a", 1.0, 1.0, "t", None)], &cfg).is_err());
        let cfg = EvalFile {
            margin_um: Some(3.0),
            image_size: Some((1000, 1000)),
            ..Default::default()
        };
        let r = evaluate(Protocol::Froc, vec![], vec![row("a", 1.0, 1.0, "t", None)], &cfg).unwrap();
        assert!(r.froc_csv().is_some());
        let Report::Froc { radius_px, curves, .. } = r else {
            panic!()
        };
        assert_eq!(radius_px, 6.0);
        assert_eq!(curves[0].area_mm2, 0.25);
    }
}
