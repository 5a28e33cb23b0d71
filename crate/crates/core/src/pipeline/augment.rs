//! Training-time augmentations. Photometric ops touch only the image;
//! geometric ops move the image and every target mask together.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageDecoder, ImageEncoder};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tta::Transform;
use crate::error::Result;
use crate::types::{ClassTargets, TargetMaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// Independent additive shift per channel in `[-limit, limit]`.
    RgbShift { limit: f32 },
    /// Shifts of hue (fraction of a turn), saturation and value.
    HsvShift { hue: f32, saturation: f32, value: f32 },
    /// Gaussian blur with sigma drawn from `[0, sigma_max]`.
    GaussianBlur { sigma_max: f32 },
    /// Unsharp masking with strength drawn from `[0, alpha_max]`.
    Sharpen { alpha_max: f32 },
    /// JPEG round trip at a quality drawn from `[quality_min, quality_max]`.
    JpegCompression { quality_min: u8, quality_max: u8 },
    /// `contrast · x + brightness` with both drawn symmetric around identity.
    BrightnessContrast { brightness: f32, contrast: f32 },
    /// Random element of the rotation/flip group.
    Dihedral,
    /// Affine shift (fraction of size), scale and rotation (degrees);
    /// nearest-neighbour for masks, bilinear for the image, reflected borders.
    ShiftScaleRotate { shift: f32, scale: f32, rotate: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentStep {
    #[serde(flatten)]
    pub op: Augmentation,
    /// Probability of applying `op`.
    pub p: f64,
}

/// The full named set.
pub fn default_set() -> Vec<AugmentStep> {
    vec![
        AugmentStep {
            op: Augmentation::Dihedral,
            p: 1.0,
        },
        AugmentStep {
            op: Augmentation::ShiftScaleRotate {
                shift: 0.05,
                scale: 0.1,
                rotate: 45.0,
            },
            p: 0.5,
        },
        AugmentStep {
            op: Augmentation::RgbShift { limit: 0.05 },
            p: 0.3,
        },
        AugmentStep {
            op: Augmentation::HsvShift {
                hue: 0.03,
                saturation: 0.1,
                value: 0.1,
            },
            p: 0.3,
        },
        AugmentStep {
            op: Augmentation::BrightnessContrast {
                brightness: 0.1,
                contrast: 0.1,
            },
            p: 0.3,
        },
        AugmentStep {
            op: Augmentation::GaussianBlur { sigma_max: 1.0 },
            p: 0.2,
        },
        AugmentStep {
            op: Augmentation::Sharpen { alpha_max: 0.5 },
            p: 0.2,
        },
        AugmentStep {
            op: Augmentation::JpegCompression {
                quality_min: 60,
                quality_max: 95,
            },
            p: 0.2,
        },
    ]
}

/// Flips/rotations plus mild colour jitter.
pub fn light_set() -> Vec<AugmentStep> {
    vec![
        AugmentStep {
            op: Augmentation::Dihedral,
            p: 1.0,
        },
        AugmentStep {
            op: Augmentation::RgbShift { limit: 0.03 },
            p: 0.3,
        },
        AugmentStep {
            op: Augmentation::BrightnessContrast {
                brightness: 0.05,
                contrast: 0.05,
            },
            p: 0.3,
        },
    ]
}

pub fn apply_all(
    steps: &[AugmentStep],
    image: &Array3<f32>,
    targets: &TargetMaskSet,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, TargetMaskSet)> {
    let mut img = image.clone();
    let mut tg = targets.clone();
    for step in steps {
        if rng.random_bool(step.p.clamp(0.0, 1.0)) {
            (img, tg) = apply(step.op, img, tg, rng)?;
        }
    }
    Ok((img, tg))
}

fn map_targets(t: &TargetMaskSet, f: impl Fn(&Array2<u8>) -> Array2<u8>) -> TargetMaskSet {
    let classes: Vec<ClassTargets> = t
        .classes
        .iter()
        .map(|c| ClassTargets {
            centroid: f(&c.centroid),
            nucleus: c.nucleus.as_ref().map(&f),
            contour: c.contour.as_ref().map(&f),
        })
        .collect();
    let (height, width) = classes.first().map(|c| c.centroid.dim()).unwrap_or((t.height, t.width));
    TargetMaskSet { height, width, classes }
}

fn sym(rng: &mut ChaCha8Rng, limit: f32) -> f32 {
    if limit > 0.0 {
        rng.random_range(-limit..=limit)
    } else {
        0.0
    }
}

pub fn apply(
    op: Augmentation,
    mut img: Array3<f32>,
    targets: TargetMaskSet,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, TargetMaskSet)> {
    match op {
        Augmentation::RgbShift { limit } => {
            let shifts = [sym(rng, limit), sym(rng, limit), sym(rng, limit)];
            for ((_, _, c), v) in img.indexed_iter_mut() {
                *v = (*v + shifts[c]).clamp(0.0, 1.0);
            }
        }
        Augmentation::HsvShift { hue, saturation, value } => {
            let (dh, ds, dv) = (sym(rng, hue), sym(rng, saturation), sym(rng, value));
            let (h, w, _) = img.dim();
            for y in 0..h {
                for x in 0..w {
                    let (hh, s, v) = rgb_to_hsv(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
                    let (r, g, b) = hsv_to_rgb(
                        (hh + dh).rem_euclid(1.0),
                        (s + ds).clamp(0.0, 1.0),
                        (v + dv).clamp(0.0, 1.0),
                    );
                    img[[y, x, 0]] = r;
                    img[[y, x, 1]] = g;
                    img[[y, x, 2]] = b;
                }
            }
        }
        Augmentation::GaussianBlur { sigma_max } => {
            let sigma = rng.random_range(0.0..=sigma_max.max(0.0));
            if sigma > 0.05 {
                img = gaussian_blur(&img, sigma);
            }
        }
        Augmentation::Sharpen { alpha_max } => {
            let alpha = rng.random_range(0.0..=alpha_max.max(0.0));
            let blurred = gaussian_blur(&img, 1.0);
            img.zip_mut_with(&blurred, |v, &b| *v = (*v + alpha * (*v - b)).clamp(0.0, 1.0));
        }
        Augmentation::JpegCompression {
            quality_min,
            quality_max,
        } => {
            let q = rng.random_range(quality_min.min(quality_max)..=quality_max.max(quality_min));
            img = jpeg_round_trip(&img, q.clamp(1, 100))?;
        }
        Augmentation::BrightnessContrast { brightness, contrast } => {
            let b = sym(rng, brightness);
            let c = 1.0 + sym(rng, contrast);
            img.mapv_inplace(|v| (c * v + b).clamp(0.0, 1.0));
        }
        Augmentation::Dihedral => {
            let t = Transform {
                rot: rng.random_range(0..4),
                hflip: rng.random_bool(0.5),
                vflip: false,
            };
            let out = t.apply(&img);
            return Ok((out, map_targets(&targets, |m| t.apply(m))));
        }
        Augmentation::ShiftScaleRotate { shift, scale, rotate } => {
            let (h, w, _) = img.dim();
            let tx = sym(rng, shift) * w as f32;
            let ty = sym(rng, shift) * h as f32;
            let s = 1.0 + sym(rng, scale);
            let a = sym(rng, rotate).to_radians();
            let warp = Affine::new(h, w, tx, ty, s, a);
            let out = warp.image(&img);
            return Ok((out, map_targets(&targets, |m| warp.mask(m))));
        }
    }
    Ok((img, targets))
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

pub fn gaussian_blur(img: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let (h, w, c) = img.dim();
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * img[[y, reflect(x as isize + k as isize - radius, w), ch]];
                }
                tmp[[y, x, ch]] = acc / norm;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[[reflect(y as isize + k as isize - radius, h), x, ch]];
                }
                out[[y, x, ch]] = acc / norm;
            }
        }
    }
    out
}

fn jpeg_round_trip(img: &Array3<f32>, quality: u8) -> Result<Array3<f32>> {
    let (h, w, _) = img.dim();
    let bytes: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).write_image(
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    let decoder = image::codecs::jpeg::JpegDecoder::new(Cursor::new(buf))?;
    let mut out = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut out)?;
    Ok(
        Array3::from_shape_vec((h, w, 3), out.into_iter().map(|v| v as f32 / 255.0).collect())
            .expect("decoded size matches"),
    )
}

/// Inverse-mapped affine warp about the image centre.
struct Affine {
    h: usize,
    w: usize,
    // output → input: p_in = A · (p_out − c − t) + c
    a: [[f32; 2]; 2],
    t: (f32, f32),
    c: (f32, f32),
}

impl Affine {
    fn new(h: usize, w: usize, tx: f32, ty: f32, scale: f32, angle: f32) -> Self {
        let (sin, cos) = angle.sin_cos();
        // inverse of scale·R(angle)
        let a = [[cos / scale, sin / scale], [-sin / scale, cos / scale]];
        Self {
            h,
            w,
            a,
            t: (tx, ty),
            c: ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0),
        }
    }

    fn source(&self, x: usize, y: usize) -> (f32, f32) {
        let dx = x as f32 - self.c.0 - self.t.0;
        let dy = y as f32 - self.c.1 - self.t.1;
        (
            self.a[0][0] * dx + self.a[0][1] * dy + self.c.0,
            self.a[1][0] * dx + self.a[1][1] * dy + self.c.1,
        )
    }

    fn image(&self, img: &Array3<f32>) -> Array3<f32> {
        let (_, _, c) = img.dim();
        let mut out = Array3::<f32>::zeros((self.h, self.w, c));
        for y in 0..self.h {
            for x in 0..self.w {
                let (sx, sy) = self.source(x, y);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let px = |xx: isize| reflect(xx, self.w);
                let py = |yy: isize| reflect(yy, self.h);
                for ch in 0..c {
                    let v00 = img[[py(y0), px(x0), ch]];
                    let v01 = img[[py(y0), px(x0 + 1), ch]];
                    let v10 = img[[py(y0 + 1), px(x0), ch]];
                    let v11 = img[[py(y0 + 1), px(x0 + 1), ch]];
                    out[[y, x, ch]] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        out
    }

    fn mask(&self, m: &Array2<u8>) -> Array2<u8> {
        Array2::from_shape_fn((self.h, self.w), |(y, x)| {
            let (sx, sy) = self.source(x, y);
            m[[
                reflect(sy.round() as isize, self.h),
                reflect(sx.round() as isize, self.w),
            ]]
        })
    }
}
