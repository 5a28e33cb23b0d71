//! Patch directories on disk: `<id>.png` images next to the annotation files
//! written by [`crate::io::write_annotation`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_annotation, read_rgb_png, write_annotation, write_rgb_png};
use crate::preprocess::{build_target_set, with_overall_class, TargetMode};
use crate::types::{validate_annotation, AnnotationSet, ClassSpec, ImagePatch};

use super::train::TrainSample;

/// Ids of every `<id>.png` with a matching `<id>.csv`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(id) = name.strip_suffix(".png") else { continue };
        if id.ends_with("_instances") {
            continue;
        }
        if dir.join(format!("{id}.csv")).exists() {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_patches(dir: &Path, classes: &ClassSpec, mpp: f64) -> Result<Vec<(ImagePatch, AnnotationSet)>> {
    let ids = list_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no annotated patches in {}",
            dir.display()
        )));
    }
    ids.iter()
        .map(|id| {
            let patch = read_rgb_png(&dir.join(format!("{id}.png")), mpp)?;
            let ann = read_annotation(dir, id, classes)?;
            let violations = validate_annotation(&ann, patch.height(), patch.width(), classes);
            if let Some(v) = violations.first() {
                return Err(Error::InvalidInput(format!("patch `{id}`: {v}")));
            }
            Ok((patch, ann))
        })
        .collect()
}

pub fn save_patches(dir: &Path, items: &[(ImagePatch, AnnotationSet)], classes: &ClassSpec) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (patch, ann) in items {
        write_rgb_png(&dir.join(format!("{}.png", patch.id())), patch)?;
        write_annotation(dir, patch.id(), ann, classes)?;
    }
    Ok(())
}

/// Builds training samples. With `overall_class` an extra union target is
/// appended after the proper classes.
pub fn prepare_samples(
    items: &[(ImagePatch, AnnotationSet)],
    classes: &ClassSpec,
    mode: TargetMode,
    overall_class: bool,
) -> Result<Vec<TrainSample>> {
    items
        .iter()
        .map(|(patch, ann)| {
            let t = build_target_set(ann, classes, patch.height(), patch.width(), mode)?;
            Ok(TrainSample {
                id: patch.id().to_string(),
                image: patch.pixels().clone(),
                targets: if overall_class { with_overall_class(&t) } else { t },
            })
        })
        .collect()
}
