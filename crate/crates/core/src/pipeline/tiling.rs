use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tile origins `(x0, y0)` covering an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub origins: Vec<(usize, usize)>,
}

/// Origins along one axis: multiples of `stride`, the last one clamped so
/// the tile ends at the border. An axis shorter than the tile gets one origin
/// at 0 (the caller pads).
pub fn axis_origins(size: usize, tile: usize, stride: usize) -> Vec<usize> {
    if size <= tile {
        return vec![0];
    }
    let n = (size - tile).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(size - tile)).collect()
}

pub fn tile_image(height: usize, width: usize, tile: usize, stride: usize) -> Result<TileGrid> {
    if stride == 0 || tile == 0 {
        return Err(Error::InvalidInput("tile and stride must be positive".into()));
    }
    if stride > tile {
        return Err(Error::InvalidInput(format!(
            "stride {stride} exceeds tile {tile}; pixels would be skipped"
        )));
    }
    let ys = axis_origins(height, tile, stride);
    let xs = axis_origins(width, tile, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TileGrid {
        tile,
        stride,
        height,
        width,
        origins,
    })
}

/// `tile × tile` crop at `(x0, y0)`; parts outside the image are filled by
/// edge replication.
pub fn crop_padded(image: &Array3<f32>, x0: usize, y0: usize, tile: usize) -> Array3<f32> {
    let (h, w, c) = image.dim();
    if y0 + tile <= h && x0 + tile <= w {
        return image.slice(s![y0..y0 + tile, x0..x0 + tile, ..]).to_owned();
    }
    Array3::from_shape_fn((tile, tile, c), |(y, x, ch)| {
        image[[(y0 + y).min(h - 1), (x0 + x).min(w - 1), ch]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        assert_eq!(tile_image(256, 256, 256, 192).unwrap().origins, vec![(0, 0)]);
        let g = tile_image(512, 512, 256, 192).unwrap();
        assert_eq!(g.origins.len(), 9);
        assert_eq!(axis_origins(512, 256, 192), vec![0, 192, 256]);
        assert!(tile_image(64, 64, 32, 0).is_err());
    }

    #[test]
    fn padded_crop_replicates_edges() {
        let img = Array3::from_shape_fn((3, 2, 1), |(y, x, _)| (y * 2 + x) as f32);
        let c = crop_padded(&img, 0, 0, 4);
        assert_eq!(c[[3, 3, 0]], 5.0);
        assert_eq!(c[[0, 3, 0]], 1.0);
    }

    proptest! {
        #[test]
        fn every_pixel_is_covered(h in 1usize..300, w in 1usize..300, tile in 8usize..128, frac in 0.1f64..1.0) {
            let stride = ((tile as f64 * frac) as usize).max(1);
            let g = tile_image(h, w, tile, stride).unwrap();
            let mut covered = vec![false; h * w];
            for &(x0, y0) in &g.origins {
                prop_assert!(x0 % stride == 0 || x0 + tile == w);
                prop_assert!(y0 % stride == 0 || y0 + tile == h);
                for y in y0..(y0 + tile).min(h) {
                    for x in x0..(x0 + tile).min(w) {
                        covered[y * w + x] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
