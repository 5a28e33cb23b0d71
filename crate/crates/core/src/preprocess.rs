//! Conversion of annotations into per-class training targets: dilated
//! centroid disks, nucleus footprints and contour masks.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, ClassSpec, ClassTargets, TargetMaskSet};

/// Circular structuring element, rasterised on pixel centres: offset
/// `(dx, dy)` is included iff `dx² + dy² ≤ (diameter / 2)²`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationKernel {
    diameter: usize,
    offsets: Vec<(i64, i64)>,
}

impl DilationKernel {
    pub fn new(diameter: usize) -> Result<Self> {
        if diameter == 0 || diameter.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "dilation diameter must be odd and positive, got {diameter}"
            )));
        }
        let half = (diameter / 2) as i64;
        // (d/2)² with d odd, scaled by 4 to stay in integers: 4(dx²+dy²) ≤ d².
        let limit = (diameter * diameter) as i64;
        let mut offsets = Vec::new();
        for dy in -half..=half {
            for dx in -half..=half {
                if 4 * (dx * dx + dy * dy) <= limit {
                    offsets.push((dx, dy));
                }
            }
        }
        Ok(Self { diameter, offsets })
    }

    /// Default diameter for a scan resolution: 5 px around 0.5 mpp and 11 px
    /// around 0.25 mpp. Other resolutions have no default.
    pub fn default_diameter_for_mpp(mpp: f64) -> Option<usize> {
        if (0.4..=0.6).contains(&mpp) {
            Some(5)
        } else if (0.2..=0.3).contains(&mpp) {
            Some(11)
        } else {
            None
        }
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    /// Number of pixels in the kernel.
    pub fn area(&self) -> usize {
        self.offsets.len()
    }
}

/// A centroid recovered from an instance mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceCentroid {
    pub x: usize,
    pub y: usize,
    pub label: u32,
}

/// Centre of mass of every positive label, rounded half away from zero.
/// Results are ordered by label.
pub fn centroid_from_instance(mask: &Array2<u32>) -> Vec<InstanceCentroid> {
    let max = mask.iter().copied().max().unwrap_or(0) as usize;
    if max == 0 {
        return Vec::new();
    }
    let mut acc = vec![(0u64, 0u64, 0u64); max + 1];
    for ((y, x), &l) in mask.indexed_iter() {
        if l > 0 {
            let a = &mut acc[l as usize];
            a.0 += x as u64;
            a.1 += y as u64;
            a.2 += 1;
        }
    }
    acc.iter()
        .enumerate()
        .skip(1)
        .filter(|(_, a)| a.2 > 0)
        .map(|(l, &(sx, sy, n))| InstanceCentroid {
            x: (sx as f64 / n as f64).round() as usize,
            y: (sy as f64 / n as f64).round() as usize,
            label: l as u32,
        })
        .collect()
}

/// Contour mask of a label map: Sobel X and Y over the labels (replicated
/// borders), squared and summed into an edge map, binarised at `> 0`.
pub fn contour_from_instance(mask: &Array2<u32>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    if h == 0 || w == 0 {
        return out;
    }
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        mask[[yy, xx]] as f64
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            if gx * gx + gy * gy > 0.0 {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

/// Union of kernel disks centred on each point (rounded to the nearest
/// pixel), clipped to the image.
pub fn dilate_centroids(points: &[(f64, f64)], kernel: &DilationKernel, height: usize, width: usize) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros((height, width));
    for &(px, py) in points {
        let cx = px.round() as i64;
        let cy = py.round() as i64;
        for &(dx, dy) in kernel.offsets() {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

/// Which targets to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Centroid masks only.
    DetectionOnly,
    /// Centroid, nucleus and contour masks; needs an instance mask.
    Full,
}

/// Builds the per-class training targets for one annotated patch.
///
/// Contours for class `k` are computed on the label map restricted to class-k
/// instances, so touching same-class nuclei keep a separating contour, and
/// never mark pixels owned by another class's instance.
pub fn build_target_set(
    annotation: &AnnotationSet,
    classes: &ClassSpec,
    height: usize,
    width: usize,
    mode: TargetMode,
) -> Result<TargetMaskSet> {
    let mut out = Vec::with_capacity(classes.len());
    let instances = match mode {
        TargetMode::DetectionOnly => None,
        TargetMode::Full => {
            let mask = annotation.instance_mask.as_ref().ok_or_else(|| {
                Error::MissingTargets(
                    "segmentation/contour targets requested but the annotation has no instance \
                     mask; generate masks externally first"
                        .into(),
                )
            })?;
            let ks = annotation
                .instance_classes
                .as_ref()
                .ok_or_else(|| Error::MissingTargets("instance mask present without instance classes".into()))?;
            if mask.dim() != (height, width) {
                return Err(Error::Shape(format!(
                    "instance mask {:?} vs patch {:?}",
                    mask.dim(),
                    (height, width)
                )));
            }
            Some((mask, ks))
        }
    };

    for (k, info) in classes.classes.iter().enumerate() {
        let kernel = DilationKernel::new(info.dilation_diameter)?;
        let points: Vec<(f64, f64)> = annotation
            .centroids
            .iter()
            .filter(|c| c.class_index == k)
            .map(|c| (c.x, c.y))
            .collect();
        let centroid = dilate_centroids(&points, &kernel, height, width);
        let (nucleus, contour) = match instances {
            None => (None, None),
            Some((mask, ks)) => {
                let class_of = |l: u32| -> Option<usize> {
                    if l == 0 {
                        None
                    } else {
                        ks.get(l as usize - 1).copied()
                    }
                };
                let restricted = mask.mapv(|l| if class_of(l) == Some(k) { l } else { 0 });
                let nucleus = restricted.mapv(|l| u8::from(l > 0));
                let mut contour = contour_from_instance(&restricted);
                ndarray::Zip::from(&mut contour).and(mask).for_each(|c, &l| {
                    if l > 0 && class_of(l) != Some(k) {
                        *c = 0;
                    }
                });
                (Some(nucleus), Some(contour))
            }
        };
        out.push(ClassTargets {
            centroid,
            nucleus,
            contour,
        });
    }
    Ok(TargetMaskSet {
        height,
        width,
        classes: out,
    })
}

/// Appends an extra class whose targets are the union over all classes
/// (used by the optional overall-detection decoder).
pub fn with_overall_class(targets: &TargetMaskSet) -> TargetMaskSet {
    let union = |get: &dyn Fn(&ClassTargets) -> Option<&Array2<u8>>| -> Option<Array2<u8>> {
        let mut acc = Array2::<u8>::zeros((targets.height, targets.width));
        for c in &targets.classes {
            let m = get(c)?;
            ndarray::Zip::from(&mut acc).and(m).for_each(|a, &v| *a |= v);
        }
        Some(acc)
    };
    let mut out = targets.clone();
    out.classes.push(ClassTargets {
        centroid: union(&|c| Some(&c.centroid)).expect("centroid always present"),
        nucleus: union(&|c| c.nucleus.as_ref()),
        contour: union(&|c| c.contour.as_ref()),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Centroid;
    use proptest::prelude::*;

    /// Pixels whose 3×3 in-image neighbourhood holds a different label.
    fn boundary_oracle(mask: &Array2<u32>) -> Array2<u8> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let l = mask[[y, x]];
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if mask[[yy, xx]] != l {
                        return 1;
                    }
                }
            }
            0
        })
    }

    /// Disk pixel count by direct distance test on pixel centres.
    fn disk_count_oracle(diameter: usize, h: usize, w: usize, cx: f64, cy: f64) -> usize {
        let r = diameter as f64 / 2.0;
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= r {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn centroid_of_single_pixel() {
        let mut m = Array2::<u32>::zeros((10, 10));
        m[[7, 4]] = 1;
        assert_eq!(
            centroid_from_instance(&m),
            vec![InstanceCentroid { x: 4, y: 7, label: 1 }]
        );
    }

    #[test]
    fn centroid_of_square() {
        let mut m = Array2::<u32>::zeros((8, 8));
        for y in 2..=4 {
            for x in 2..=4 {
                m[[y, x]] = 1;
            }
        }
        let c = centroid_from_instance(&m);
        assert_eq!((c[0].x, c[0].y), (3, 3));
    }

    #[test]
    fn centroid_of_l_shape_rounds_mean() {
        // mean (1/3, 1/3) rounds to (0, 0)
        let mut m = Array2::<u32>::zeros((4, 4));
        m[[0, 0]] = 1;
        m[[1, 0]] = 1;
        m[[0, 1]] = 1;
        let c = centroid_from_instance(&m);
        assert_eq!((c[0].x, c[0].y), (0, 0));
    }

    #[test]
    fn empty_mask_has_no_centroids() {
        assert!(centroid_from_instance(&Array2::zeros((5, 5))).is_empty());
    }

    #[test]
    fn zero_mask_has_no_contour() {
        let m = Array2::<u32>::zeros((16, 16));
        assert_eq!(contour_from_instance(&m).sum(), 0);
    }

    #[test]
    fn square_contour_matches_boundary_oracle() {
        let mut m = Array2::<u32>::zeros((15, 15));
        for y in 5..10 {
            for x in 5..10 {
                m[[y, x]] = 1;
            }
        }
        let c = contour_from_instance(&m);
        assert_eq!(c, boundary_oracle(&m));
        // 7x7 ring minus the 3x3 interior
        assert_eq!(c.iter().map(|&v| v as usize).sum::<usize>(), 49 - 9);
    }

    #[test]
    fn adjacent_instances_share_a_contour() {
        let mut m = Array2::<u32>::zeros((12, 12));
        for y in 2..10 {
            for x in 2..6 {
                m[[y, x]] = 1;
            }
            for x in 6..10 {
                m[[y, x]] = 2;
            }
        }
        let c = contour_from_instance(&m);
        assert_eq!(c, boundary_oracle(&m));
        for y in 2..10 {
            assert_eq!(c[[y, 5]], 1);
            assert_eq!(c[[y, 6]], 1);
        }
    }

    #[test]
    fn dilation_degenerate_and_empty() {
        let k1 = DilationKernel::new(1).unwrap();
        let m = dilate_centroids(&[(3.0, 4.0)], &k1, 8, 8);
        assert_eq!(m.sum(), 1);
        assert_eq!(m[[4, 3]], 1);
        assert_eq!(dilate_centroids(&[], &k1, 8, 8).sum(), 0);
    }

    #[test]
    fn dilation_count_matches_raster_oracle() {
        for d in [3usize, 5, 9, 11, 21] {
            let k = DilationKernel::new(d).unwrap();
            let side = d + 10;
            let c = (side / 2) as f64;
            let m = dilate_centroids(&[(c, c)], &k, side, side);
            let n = m.iter().map(|&v| v as usize).sum::<usize>();
            assert_eq!(n, disk_count_oracle(d, side, side, c, c), "diameter {d}");
            assert_eq!(n, k.area());
        }
        let k5 = DilationKernel::new(5).unwrap();
        let m = dilate_centroids(&[(7.0, 7.0)], &k5, 15, 15);
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), 21);
    }

    #[test]
    fn dilation_clips_at_border() {
        let k = DilationKernel::new(5).unwrap();
        let m = dilate_centroids(&[(0.0, 0.0)], &k, 10, 10);
        let n = m.iter().map(|&v| v as usize).sum::<usize>();
        assert_eq!(n, disk_count_oracle(5, 10, 10, 0.0, 0.0));
    }

    #[test]
    fn kernel_is_rotation_symmetric() {
        for d in [1usize, 3, 5, 9, 11, 21] {
            let k = DilationKernel::new(d).unwrap();
            let set: std::collections::HashSet<_> = k.offsets().iter().copied().collect();
            for &(dx, dy) in k.offsets() {
                assert!(set.contains(&(-dy, dx)));
            }
        }
        assert!(DilationKernel::new(4).is_err());
    }

    #[test]
    fn diameter_defaults_by_resolution() {
        assert_eq!(DilationKernel::default_diameter_for_mpp(0.5), Some(5));
        assert_eq!(DilationKernel::default_diameter_for_mpp(0.25), Some(11));
        assert_eq!(DilationKernel::default_diameter_for_mpp(0.24), Some(11));
        assert_eq!(DilationKernel::default_diameter_for_mpp(1.0), None);
    }

    fn two_class_annotation() -> AnnotationSet {
        let mut mask = Array2::<u32>::zeros((32, 32));
        for y in 4..9 {
            for x in 4..9 {
                mask[[y, x]] = 1;
            }
        }
        for y in 20..26 {
            for x in 18..24 {
                mask[[y, x]] = 2;
            }
        }
        AnnotationSet {
            centroids: vec![
                Centroid {
                    x: 6.0,
                    y: 6.0,
                    class_index: 0,
                },
                Centroid {
                    x: 20.0,
                    y: 22.0,
                    class_index: 1,
                },
            ],
            instance_mask: Some(mask),
            instance_classes: Some(vec![0, 1]),
        }
    }

    #[test]
    fn detection_only_targets_for_centroid_dataset() {
        let spec = ClassSpec::uniform(&["a"], 5, 6.0).unwrap();
        let a = AnnotationSet::from_centroids(vec![Centroid {
            x: 10.0,
            y: 10.0,
            class_index: 0,
        }]);
        let t = build_target_set(&a, &spec, 32, 32, TargetMode::DetectionOnly).unwrap();
        assert!(t.classes[0].nucleus.is_none() && t.classes[0].contour.is_none());
        assert_eq!(t.classes[0].centroid.iter().map(|&v| v as usize).sum::<usize>(), 21);
        assert!(matches!(
            build_target_set(&a, &spec, 32, 32, TargetMode::Full),
            Err(Error::MissingTargets(_))
        ));
    }

    #[test]
    fn single_instance_nucleus_footprint() {
        let spec = ClassSpec::uniform(&["a"], 5, 6.0).unwrap();
        let mut mask = Array2::<u32>::zeros((32, 32));
        for y in 10..15 {
            for x in 12..16 {
                mask[[y, x]] = 1;
            }
        }
        let a = AnnotationSet {
            centroids: vec![Centroid {
                x: 13.0,
                y: 12.0,
                class_index: 0,
            }],
            instance_mask: Some(mask.clone()),
            instance_classes: Some(vec![0]),
        };
        let t = build_target_set(&a, &spec, 32, 32, TargetMode::Full).unwrap();
        assert_eq!(t.classes[0].nucleus.as_ref().unwrap(), &mask.mapv(|l| l as u8));
    }

    #[test]
    fn class_targets_are_partitioned() {
        let spec = ClassSpec::uniform(&["a", "b"], 5, 6.0).unwrap();
        let a = two_class_annotation();
        let t = build_target_set(&a, &spec, 32, 32, TargetMode::Full).unwrap();
        let mask = a.instance_mask.unwrap();
        for (k, other) in [(0usize, 2u32), (1, 1)] {
            let c = &t.classes[k];
            for ((y, x), &l) in mask.indexed_iter() {
                if l == other {
                    assert_eq!(c.centroid[[y, x]], 0);
                    assert_eq!(c.nucleus.as_ref().unwrap()[[y, x]], 0);
                    assert_eq!(c.contour.as_ref().unwrap()[[y, x]], 0);
                }
            }
        }
    }

    #[test]
    fn overall_class_is_union() {
        let spec = ClassSpec::uniform(&["a", "b"], 5, 6.0).unwrap();
        let t = build_target_set(&two_class_annotation(), &spec, 32, 32, TargetMode::Full).unwrap();
        let o = with_overall_class(&t);
        assert_eq!(o.classes.len(), 3);
        let expect = &t.classes[0].centroid | &t.classes[1].centroid;
        assert_eq!(o.classes[2].centroid, expect);
    }

    fn blob_label_map() -> impl Strategy<Value = Array2<u32>> {
        (
            8usize..=64,
            8usize..=64,
            prop::collection::vec((0usize..64, 0usize..64, 2usize..10, 2usize..10), 0..12),
        )
            .prop_map(|(h, w, rects)| {
                let mut m = Array2::<u32>::zeros((h, w));
                for (i, (y0, x0, rh, rw)) in rects.into_iter().enumerate() {
                    for y in y0..(y0 + rh).min(h) {
                        for x in x0..(x0 + rw).min(w) {
                            m[[y, x]] = i as u32 + 1;
                        }
                    }
                }
                m
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn contour_within_boundary_and_covers_shared_borders(m in blob_label_map()) {
            let c = contour_from_instance(&m);
            let oracle = boundary_oracle(&m);
            let (h, w) = m.dim();
            for y in 0..h {
                for x in 0..w {
                    if c[[y, x]] == 1 {
                        prop_assert_eq!(oracle[[y, x]], 1);
                    }
                    // every pair of 4-adjacent differing labels is marked on some side
                    if x + 1 < w && m[[y, x]] != m[[y, x + 1]] {
                        prop_assert!(c[[y, x]] == 1 || c[[y, x + 1]] == 1);
                    }
                    if y + 1 < h && m[[y, x]] != m[[y + 1, x]] {
                        prop_assert!(c[[y, x]] == 1 || c[[y + 1, x]] == 1);
                    }
                }
            }
        }

        #[test]
        fn dilation_count_bounded_by_disk_area(
            pts in prop::collection::vec((0usize..40, 0usize..40), 0..10),
            d in prop::sample::select(vec![3usize, 5, 9, 11]),
        ) {
            let k = DilationKernel::new(d).unwrap();
            let points: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
            let m = dilate_centroids(&points, &k, 40, 40);
            let n = m.iter().map(|&v| v as usize).sum::<usize>();
            prop_assert!(n <= points.len() * k.area());
            let half = d / 2;
            let interior = pts.iter().all(|&(x, y)| x >= half && y >= half && x + half < 40 && y + half < 40);
            let disjoint = pts.iter().enumerate().all(|(i, a)| pts.iter().skip(i + 1).all(|b| {
                let dx = a.0 as f64 - b.0 as f64;
                let dy = a.1 as f64 - b.1 as f64;
                (dx * dx + dy * dy).sqrt() > d as f64
            }));
            if interior && disjoint {
                prop_assert_eq!(n, points.len() * k.area());
            }
        }
    }
}
