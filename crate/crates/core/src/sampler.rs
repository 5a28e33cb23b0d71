//! Class-imbalance-aware patch sampling.
//!
//! Class weights are log inverse frequencies over the whole dataset and a
//! patch's weight is the area-proportion-weighted sum of its class weights.
//! Background is class 0 of the sampler's class axis (it has no index
//! elsewhere in the crate).

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::DilationKernel;
use crate::types::{AnnotationSet, TargetMaskSet};

/// Area of `n_nuclei` nuclei of `avg_nucleus_area` pixels each.
pub fn estimate_area_mask_free(n_nuclei: usize, avg_nucleus_area: f64) -> f64 {
    n_nuclei as f64 * avg_nucleus_area
}

/// Patch area not covered by foreground, floored at zero.
pub fn background_area(patch_area: f64, foreground: &[f64]) -> f64 {
    (patch_area - foreground.iter().sum::<f64>()).max(0.0)
}

/// Default average nucleus area for a dilation diameter: the pixel count of
/// the rasterised disk.
pub fn default_nucleus_area(diameter: usize) -> Result<f64> {
    Ok(DilationKernel::new(diameter)?.area() as f64)
}

/// Per-patch, per-class areas. Column 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    areas: Vec<Vec<f64>>,
    patch_area: f64,
}

impl SamplerState {
    /// `areas[p][c]` with background at `c = 0`.
    pub fn new(areas: Vec<Vec<f64>>, patch_area: f64) -> Result<Self> {
        if !(patch_area > 0.0) {
            return Err(Error::InvalidInput("patch area must be positive".into()));
        }
        let width = areas.first().map(Vec::len).unwrap_or(0);
        for row in &areas {
            if row.len() != width {
                return Err(Error::Shape("ragged area table".into()));
            }
            if row.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return Err(Error::InvalidInput("areas must be finite and nonnegative".into()));
            }
        }
        Ok(Self { areas, patch_area })
    }

    /// Mask-free areas: nucleus count × average area per foreground class,
    /// background is the remainder.
    pub fn from_counts(
        annotations: &[AnnotationSet],
        n_classes: usize,
        avg_nucleus_area: &[f64],
        patch_area: f64,
    ) -> Result<Self> {
        if avg_nucleus_area.len() != n_classes {
            return Err(Error::Shape("one average area per class required".into()));
        }
        let areas = annotations
            .iter()
            .map(|a| {
                let fg: Vec<f64> = a
                    .count_per_class(n_classes)
                    .into_iter()
                    .zip(avg_nucleus_area)
                    .map(|(n, &avg)| estimate_area_mask_free(n, avg))
                    .collect();
                let mut row = vec![background_area(patch_area, &fg)];
                row.extend(fg);
                row
            })
            .collect();
        Self::new(areas, patch_area)
    }

    /// Areas from nucleus masks when present, centroid masks otherwise.
    pub fn from_targets(targets: &[TargetMaskSet]) -> Result<Self> {
        let first = targets
            .first()
            .ok_or_else(|| Error::InvalidInput("no targets".into()))?;
        let patch_area = (first.height * first.width) as f64;
        let areas = targets
            .iter()
            .map(|t| {
                let fg: Vec<f64> = t
                    .classes
                    .iter()
                    .map(|c| {
                        let m = c.nucleus.as_ref().unwrap_or(&c.centroid);
                        m.iter().filter(|&&v| v > 0).count() as f64
                    })
                    .collect();
                let mut row = vec![background_area(patch_area, &fg)];
                row.extend(fg);
                row
            })
            .collect();
        Self::new(areas, patch_area)
    }

    pub fn areas(&self) -> &[Vec<f64>] {
        &self.areas
    }

    pub fn patch_area(&self) -> f64 {
        self.patch_area
    }

    /// `W_c = ln(Σ_c' Σ_p A(p,c') / Σ_p A(p,c))`.
    pub fn class_weights(&self) -> Result<Vec<f64>> {
        let n_classes = self.areas.first().map(Vec::len).unwrap_or(0);
        let per_class: Vec<f64> = (0..n_classes)
            .map(|c| self.areas.iter().map(|row| row[c]).sum())
            .collect();
        let total: f64 = per_class.iter().sum();
        per_class
            .iter()
            .enumerate()
            .map(|(c, &a)| {
                if a > 0.0 {
                    Ok((total / a).ln())
                } else {
                    Err(Error::DegenerateClass { class: c })
                }
            })
            .collect()
    }

    pub fn patch_weights(&self) -> Result<Vec<f64>> {
        let wc = self.class_weights()?;
        Ok(self
            .areas
            .iter()
            .map(|row| patch_weight(row, &wc, self.patch_area))
            .collect())
    }
}

/// `W_p = Σ_c (A(p,c) / A_patch) · W_c`.
pub fn patch_weight(areas: &[f64], class_weights: &[f64], patch_area: f64) -> f64 {
    areas
        .iter()
        .zip(class_weights)
        .map(|(&a, &w)| (a / patch_area) * w)
        .sum()
}

/// Draws `n` indices with replacement, `P(p) ∝ weights[p]`, deterministic
/// for a given seed. All-zero weights fall back to uniform sampling.
pub fn sample_indices(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("no weights to sample from".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "sampling weights must be finite and nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if weights.iter().all(|&w| w == 0.0) {
        log::warn!("all patch weights are zero; sampling uniformly");
        let dist = Uniform::new(0, weights.len()).expect("nonempty range");
        return Ok((0..n).map(|_| dist.sample(&mut rng)).collect());
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidInput(format!("bad weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// Writes `patch_id,weight` rows.
pub fn write_weights_csv(path: &Path, ids: &[String], weights: &[f64]) -> Result<()> {
    if ids.len() != weights.len() {
        return Err(Error::Shape("one id per weight required".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patch_id", "weight"])?;
    for (id, wp) in ids.iter().zip(weights) {
        w.write_record([id.as_str(), &wp.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mask_free_area() {
        assert_eq!(estimate_area_mask_free(0, 95.0), 0.0);
        assert_eq!(estimate_area_mask_free(10, 95.0), 950.0);
        assert_eq!(background_area(100.0, &[80.0, 70.0]), 0.0);
        assert_eq!(background_area(100.0, &[30.0, 20.0]), 50.0);
    }

    #[test]
    fn class_weights_fixtures() {
        let s = SamplerState::new(vec![vec![5.0, 0.0], vec![0.0, 5.0]], 5.0).unwrap();
        let w = s.class_weights().unwrap();
        assert_relative_eq!(w[0], 2f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(w[1], std::f64::consts::LN_2, epsilon = 1e-12);

        let s = SamplerState::new(vec![vec![9.0, 1.0]], 10.0).unwrap();
        let w = s.class_weights().unwrap();
        assert_relative_eq!(w[1], 10f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(w[1], std::f64::consts::LN_10, epsilon = 1e-12);

        let s = SamplerState::new(vec![vec![4.0], vec![6.0]], 10.0).unwrap();
        assert_eq!(s.class_weights().unwrap(), vec![0.0]);
    }

    #[test]
    fn degenerate_class_is_an_error() {
        let s = SamplerState::new(vec![vec![4.0, 0.0]], 4.0).unwrap();
        assert!(matches!(s.class_weights(), Err(Error::DegenerateClass { class: 1 })));
    }

    #[test]
    fn patch_weight_fixtures() {
        assert_eq!(patch_weight(&[0.0, 10.0], &[0.3, 1.7], 10.0), 1.7);
        assert_eq!(patch_weight(&[3.0, 7.0], &[0.0, 0.0], 10.0), 0.0);
        let w = patch_weight(&[5.0, 5.0], &[0.0, 2f64.ln()], 10.0);
        assert_relative_eq!(w, 0.5 * 2f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn degenerate_weights_sampling() {
        assert!(sample_indices(&[1.0, 0.0, 0.0], 1000, 3)
            .unwrap()
            .iter()
            .all(|&i| i == 0));
        assert!(sample_indices(&[1.0, -1.0], 10, 0).is_err());
        let u = sample_indices(&[0.0, 0.0], 1000, 1).unwrap();
        assert!(u.contains(&0) && u.contains(&1));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let w = [0.2, 0.5, 1.3];
        assert_eq!(sample_indices(&w, 50, 9).unwrap(), sample_indices(&w, 50, 9).unwrap());
        assert_ne!(sample_indices(&w, 50, 9).unwrap(), sample_indices(&w, 50, 10).unwrap());
    }

    #[test]
    fn empirical_frequencies() {
        let n = 100_000;
        let d = sample_indices(&[1.0, 1.0], n, 11).unwrap();
        let f1 = d.iter().filter(|&&i| i == 1).count() as f64 / n as f64;
        assert!((f1 - 0.5).abs() <= 0.02);
        let d = sample_indices(&[1.0, 3.0], n, 12).unwrap();
        let f1 = d.iter().filter(|&&i| i == 1).count() as f64 / n as f64;
        assert!((f1 - 0.75).abs() <= 0.02);
    }

    #[test]
    fn counts_state_from_annotations() {
        use crate::types::Centroid;
        let a = AnnotationSet::from_centroids(vec![
            Centroid {
                x: 1.0,
                y: 1.0,
                class_index: 0,
            },
            Centroid {
                x: 2.0,
                y: 2.0,
                class_index: 1,
            },
            Centroid {
                x: 3.0,
                y: 3.0,
                class_index: 1,
            },
        ]);
        let s = SamplerState::from_counts(&[a], 2, &[10.0, 20.0], 100.0).unwrap();
        assert_eq!(s.areas()[0], vec![50.0, 10.0, 40.0]);
    }

    fn table() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(1u32..1000, 3), 1..12).prop_map(|rows| {
            rows.into_iter()
                .map(|r| r.into_iter().map(f64::from).collect())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn scale_invariance_bitwise(areas in table(), k in -8i32..8) {
            let s = 2f64.powi(k);
            let patch = 4096.0;
            let base = SamplerState::new(areas.clone(), patch).unwrap();
            let scaled = SamplerState::new(
                areas.iter().map(|r| r.iter().map(|a| a * s).collect()).collect(),
                patch * s,
            ).unwrap();
            prop_assert_eq!(base.class_weights().unwrap(), scaled.class_weights().unwrap());
            prop_assert_eq!(base.patch_weights().unwrap(), scaled.patch_weights().unwrap());
        }

        #[test]
        fn rare_class_area_is_monotone(areas in table(), p in 0usize..12, extra in 1u32..500) {
            // Class 2 is rare when W_c ≥ 1 (share ≤ 1/e); its share only grows along
            // the path, so checking the end point covers every intermediate area.
            let mut rows: Vec<Vec<f64>> = areas.iter().map(|r| vec![r[0] * 50.0, r[1] * 50.0, r[2]]).collect();
            let p = p % rows.len();
            let before = SamplerState::new(rows.clone(), 1e9).unwrap();
            rows[p][2] += f64::from(extra);
            let after = SamplerState::new(rows, 1e9).unwrap();
            if after.class_weights().unwrap()[2] >= 1.0 {
                let wb = before.patch_weights().unwrap()[p];
                let wa = after.patch_weights().unwrap()[p];
                prop_assert!(wa >= wb - 1e-12 * wb.abs(), "{} < {}", wa, wb);
            }
        }
    }
}
