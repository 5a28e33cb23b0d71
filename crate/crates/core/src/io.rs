//! File formats: point CSVs, lossless mask PNGs and target manifests.
//!
//! Point CSV: header `id,x,y,class_name,confidence`; `confidence` may be empty
//! (ground truth) and the `id` column may be omitted (single image, id `""`).
//! Instance masks are 16-bit grayscale PNGs holding the raw labels; binary
//! masks are 8-bit PNGs with 0 / 255.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Centroid, ClassSpec, Detection, ImagePatch, TargetMaskSet};

/// One row of a point CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub class_name: String,
    pub confidence: Option<f64>,
}

pub fn write_points(path: &Path, rows: &[PointRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["id", "x", "y", "class_name", "confidence"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<PointRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (xi, yi, ci) = match (col("x"), col("y"), col("class_name")) {
        (Some(x), Some(y), Some(c)) => (x, y, c),
        _ => {
            return Err(Error::InvalidInput(format!(
                "{}: point CSV needs x, y and class_name columns",
                path.display()
            )))
        }
    };
    let id_col = col("id");
    let conf_col = col("confidence");
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!(
                    "{}: row {}: cannot parse `{}`",
                    path.display(),
                    line + 2,
                    field(i)
                ))
            })
        };
        let confidence = match conf_col {
            Some(c) if !field(c).is_empty() => Some(num(c)?),
            _ => None,
        };
        out.push(PointRow {
            id: id_col.map(|c| field(c).to_string()).unwrap_or_default(),
            x: num(xi)?,
            y: num(yi)?,
            class_name: field(ci).to_string(),
            confidence,
        });
    }
    Ok(out)
}

/// Groups rows by image id, keeping first-seen order inside each image.
pub fn group_by_id(rows: Vec<PointRow>) -> BTreeMap<String, Vec<PointRow>> {
    let mut out: BTreeMap<String, Vec<PointRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.id.clone()).or_default().push(r);
    }
    out
}

/// Converts point rows to detections, resolving class names. Missing
/// confidences become 1.
pub fn rows_to_detections(rows: &[PointRow], classes: &ClassSpec) -> Result<Vec<Detection>> {
    rows.iter()
        .map(|r| {
            let k = classes
                .index_of(&r.class_name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class name `{}`", r.class_name)))?;
            Detection::new(r.x, r.y, k, r.confidence.unwrap_or(1.0))
        })
        .collect()
}

/// Writes detections as `x,y,class_name,confidence`.
pub fn write_detections(path: &Path, detections: &[Detection], classes: &ClassSpec) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        x: f64,
        y: f64,
        class_name: &'a str,
        confidence: f64,
    }
    let mut w = csv::Writer::from_path(path)?;
    if detections.is_empty() {
        w.write_record(["x", "y", "class_name", "confidence"])?;
    }
    for d in detections {
        let class_name = classes
            .name(d.class_index)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class {}", d.class_index)))?;
        w.serialize(Row {
            x: d.x,
            y: d.y,
            class_name,
            confidence: d.confidence,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_label_png(path: &Path, labels: &Array2<u32>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut buf = Vec::with_capacity(h * w);
    for &l in labels.iter() {
        let v = u16::try_from(l).map_err(|_| Error::InvalidInput(format!("label {l} does not fit a 16-bit mask")))?;
        buf.push(v);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims");
    img.save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(u32::from).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("dims match"))
}

pub fn write_binary_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims");
    img.save(path)?;
    Ok(())
}

pub fn read_binary_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("dims match"))
}

pub fn write_rgb_png(path: &Path, patch: &ImagePatch) -> Result<()> {
    let (h, w, _) = patch.pixels().dim();
    let raw = patch.to_rgb8().iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path, mpp: f64) -> Result<ImagePatch> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let arr = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("dims match");
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImagePatch::from_rgb8(id, &arr, mpp)
}

/// Writes an annotation as `<id>.csv`, plus `<id>_instances.png` and
/// `<id>_instance_classes.csv` when an instance mask is present.
pub fn write_annotation(dir: &Path, id: &str, a: &AnnotationSet, classes: &ClassSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows = a
        .centroids
        .iter()
        .map(|c| {
            Ok(PointRow {
                id: id.to_string(),
                x: c.x,
                y: c.y,
                class_name: class_name(classes, c.class_index)?,
                confidence: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_points(&dir.join(format!("{id}.csv")), &rows)?;
    if let Some(mask) = &a.instance_mask {
        write_label_png(&dir.join(format!("{id}_instances.png")), mask)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{id}_instance_classes.csv")))?;
        w.write_record(["label", "class_name"])?;
        for (i, &k) in a.instance_classes.iter().flatten().enumerate() {
            w.write_record([(i + 1).to_string(), class_name(classes, k)?])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_annotation(dir: &Path, id: &str, classes: &ClassSpec) -> Result<AnnotationSet> {
    let rows = read_points(&dir.join(format!("{id}.csv")))?;
    let centroids = rows
        .iter()
        .map(|r| {
            Ok(Centroid {
                x: r.x,
                y: r.y,
                class_index: class_index(classes, &r.class_name)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask_path = dir.join(format!("{id}_instances.png"));
    let (instance_mask, instance_classes) = if mask_path.exists() {
        let mask = read_label_png(&mask_path)?;
        let mut r = csv::Reader::from_path(dir.join(format!("{id}_instance_classes.csv")))?;
        let mut ks = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            ks.push(class_index(classes, rec.get(1).unwrap_or(""))?);
        }
        (Some(mask), Some(ks))
    } else {
        (None, None)
    };
    Ok(AnnotationSet {
        centroids,
        instance_mask,
        instance_classes,
    })
}

/// Writes every target mask as a PNG and returns manifest rows
/// `(patch_id, class_name, kind, path)`.
pub fn write_targets(
    dir: &Path,
    patch_id: &str,
    targets: &TargetMaskSet,
    classes: &ClassSpec,
) -> Result<Vec<[String; 4]>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for (k, t) in targets.classes.iter().enumerate() {
        let name = class_name(classes, k)?;
        let kinds = [
            ("centroid", Some(&t.centroid)),
            ("nucleus", t.nucleus.as_ref()),
            ("contour", t.contour.as_ref()),
        ];
        for (kind, mask) in kinds {
            if let Some(mask) = mask {
                let path: PathBuf = dir.join(format!("{patch_id}_{name}_{kind}.png"));
                write_binary_png(&path, mask)?;
                rows.push([
                    patch_id.to_string(),
                    name.clone(),
                    kind.to_string(),
                    path.display().to_string(),
                ]);
            }
        }
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[[String; 4]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patch_id", "class_name", "kind", "path"])?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn class_name(classes: &ClassSpec, k: usize) -> Result<String> {
    classes
        .name(k)
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidInput(format!("unknown class index {k}")))
}

fn class_index(classes: &ClassSpec, name: &str) -> Result<usize> {
    classes
        .index_of(name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown class name `{name}`")))
}
