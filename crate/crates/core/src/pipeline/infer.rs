use ndarray::Array3;

use super::tiling::{crop_padded, tile_image};
use super::tta::{tta_forward, TtaMode};
use crate::error::{Error, Result};
use crate::model::KongNet;
use crate::postprocess::{extract_detections, nms_detections, PostprocessConfig};
use crate::types::{Detection, PredictionMaps};

/// Default overlap between neighbouring tiles, in pixels.
pub const DEFAULT_OVERLAP: usize = 64;

/// Tiled inference: per tile TTA forward, peak extraction, translation to
/// image coordinates, then per-class NMS over everything. Detections in the
/// padded area of border tiles are dropped.
pub fn infer_large(
    model: &KongNet,
    image: &Array3<f32>,
    configs: &[PostprocessConfig],
    tile: usize,
    stride: usize,
    tta: TtaMode,
) -> Result<Vec<Detection>> {
    let n = model.config().n_classes;
    if configs.len() != n && configs.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "{} postprocess configs for {n} classes",
            configs.len()
        )));
    }
    infer_tiled(image, configs, tile, stride, |crop| tta_forward(model, crop, tta))
}

/// The stitching half of [`infer_large`], with the per-tile predictor
/// supplied by the caller.
pub fn infer_tiled(
    image: &Array3<f32>,
    configs: &[PostprocessConfig],
    tile: usize,
    stride: usize,
    mut predict: impl FnMut(&Array3<f32>) -> Result<PredictionMaps>,
) -> Result<Vec<Detection>> {
    let (h, w, _) = image.dim();
    let grid = tile_image(h, w, tile, stride)?;
    if grid.origins.len() > 1 && stride >= tile {
        return Err(Error::InvalidInput(
            "tiles must overlap for stitching (stride < tile)".into(),
        ));
    }
    let mut all = Vec::new();
    for &(x0, y0) in &grid.origins {
        let crop = crop_padded(image, x0, y0, tile);
        let maps = predict(&crop)?;
        for d in extract_detections(&maps, configs)? {
            let (x, y) = (d.x + x0 as f64, d.y + y0 as f64);
            if x < w as f64 && y < h as f64 {
                all.push(Detection { x, y, ..d });
            }
        }
    }
    if grid.origins.len() == 1 {
        return Ok(all);
    }
    let params: Vec<(f64, f64)> = configs.iter().map(|c| (c.nms_box, c.nms_iou)).collect();
    nms_detections(&all, &params)
}
