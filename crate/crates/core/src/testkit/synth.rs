//! Synthetic patches of non-overlapping disk nuclei with class-specific
//! colour and size.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Centroid, ClassSpec, ImagePatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub name: String,
    /// Mean RGB in `[0, 1]`.
    pub color: [f32; 3],
    /// Inclusive radius range in pixels.
    pub radius: (f64, f64),
    /// Inclusive per-patch instance count range.
    pub count: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub mpp: f64,
    pub classes: Vec<ClassAppearance>,
    pub background: [f32; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Minimum free space between two disks, in pixels.
    pub gap: f64,
    /// Placement attempts per nucleus before giving up.
    pub max_attempts: usize,
}

impl SynthSpec {
    /// Three easily separable classes on 64×64 patches.
    pub fn three_class() -> Self {
        Self {
            size: 64,
            mpp: 0.5,
            classes: vec![
                ClassAppearance {
                    name: "lymphocyte".into(),
                    color: [0.25, 0.15, 0.55],
                    radius: (3.0, 4.0),
                    count: (2, 5),
                },
                ClassAppearance {
                    name: "tumour".into(),
                    color: [0.6, 0.2, 0.25],
                    radius: (5.0, 6.0),
                    count: (1, 4),
                },
                ClassAppearance {
                    name: "stroma".into(),
                    color: [0.2, 0.5, 0.3],
                    radius: (3.0, 5.0),
                    count: (1, 4),
                },
            ],
            background: [0.92, 0.85, 0.88],
            noise: 0.03,
            gap: 3.0,
            max_attempts: 500,
        }
    }

    /// Same layout as [`three_class`](Self::three_class) with class colours
    /// and sizes pulled close together.
    pub fn confusable() -> Self {
        let mut spec = Self::three_class();
        let colors = [[0.42, 0.22, 0.45], [0.48, 0.22, 0.40], [0.42, 0.28, 0.40]];
        for (c, color) in spec.classes.iter_mut().zip(colors) {
            c.color = color;
            c.radius = (3.5, 5.0);
        }
        spec.noise = 0.05;
        spec
    }

    pub fn class_spec(&self, dilation_diameter: usize, match_radius: f64) -> Result<ClassSpec> {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        ClassSpec::uniform(&names, dilation_diameter, match_radius)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < crate::types::MIN_PATCH_SIDE || !(self.mpp > 0.0) {
            return Err(Error::InvalidConfig("patch size too small or mpp not positive".into()));
        }
        for c in &self.classes {
            if !(c.radius.0 > 0.0 && c.radius.0 <= c.radius.1) || c.count.0 > c.count.1 {
                return Err(Error::InvalidConfig(format!("bad ranges for class `{}`", c.name)));
            }
        }
        if self.noise < 0.0 || self.gap < 0.0 {
            return Err(Error::InvalidConfig("noise and gap must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A generated patch with exact ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub patch: ImagePatch,
    pub annotation: AnnotationSet,
}

struct Disk {
    x: i64,
    y: i64,
    r: f64,
    class: usize,
}

/// Draws counts from `spec`, then places disks by rejection sampling.
pub fn synth_patch(spec: &SynthSpec, id: &str, seed: u64) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<usize> = spec
        .classes
        .iter()
        .map(|c| rng.random_range(c.count.0..=c.count.1))
        .collect();
    synth_with_counts(spec, id, &counts, &mut rng)
}

/// Like [`synth_patch`] with explicit per-class counts.
pub fn synth_patch_with_counts(spec: &SynthSpec, id: &str, counts: &[usize], seed: u64) -> Result<SynthSample> {
    spec.validate()?;
    if counts.len() != spec.classes.len() {
        return Err(Error::InvalidInput(format!(
            "{} counts for {} classes",
            counts.len(),
            spec.classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_with_counts(spec, id, counts, &mut rng)
}

fn synth_with_counts(spec: &SynthSpec, id: &str, counts: &[usize], rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let s = spec.size as i64;
    // Larger nuclei first: they are the hardest to place.
    let mut todo: Vec<(usize, f64)> = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        let (lo, hi) = spec.classes[k].radius;
        for _ in 0..n {
            todo.push((k, rng.random_range(lo..=hi)));
        }
    }
    todo.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut disks: Vec<Disk> = Vec::with_capacity(todo.len());
    for (class, r) in todo {
        let margin = r.ceil() as i64;
        if 2 * margin >= s {
            return Err(Error::Infeasible(format!("radius {r} does not fit a {s}px patch")));
        }
        let mut placed = false;
        for _ in 0..spec.max_attempts {
            let x = rng.random_range(margin..s - margin);
            let y = rng.random_range(margin..s - margin);
            let free = disks.iter().all(|d| {
                let dist = (((d.x - x).pow(2) + (d.y - y).pow(2)) as f64).sqrt();
                dist >= d.r + r + spec.gap
            });
            if free {
                disks.push(Disk { x, y, r, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place {} nuclei after {} attempts each",
                counts.iter().sum::<usize>(),
                spec.max_attempts
            )));
        }
    }
    // Row-major order of centres gives stable labels.
    disks.sort_by_key(|d| (d.y, d.x));

    let n = spec.size;
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let mut pixels = Array3::<f32>::zeros((n, n, 3));
    let mut labels = Array2::<u32>::zeros((n, n));
    for (i, d) in disks.iter().enumerate() {
        let r = d.r.ceil() as i64;
        for y in (d.y - r).max(0)..=(d.y + r).min(s - 1) {
            for x in (d.x - r).max(0)..=(d.x + r).min(s - 1) {
                if (((x - d.x).pow(2) + (y - d.y).pow(2)) as f64) <= d.r * d.r {
                    labels[[y as usize, x as usize]] = i as u32 + 1;
                }
            }
        }
    }
    for y in 0..n {
        for x in 0..n {
            let base = match labels[[y, x]] {
                0 => spec.background,
                l => spec.classes[disks[l as usize - 1].class].color,
            };
            for c in 0..3 {
                let v = base[c] + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                pixels[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    let centroids = disks
        .iter()
        .map(|d| Centroid {
            x: d.x as f64,
            y: d.y as f64,
            class_index: d.class,
        })
        .collect();
    let instance_classes = disks.iter().map(|d| d.class).collect();
    Ok(SynthSample {
        patch: ImagePatch::new(id, pixels, spec.mpp)?,
        annotation: AnnotationSet {
            centroids,
            instance_mask: Some(labels),
            instance_classes: Some(instance_classes),
        },
    })
}

/// `n` patches with ids `<prefix><index>` and seeds derived from `seed`.
pub fn synth_dataset(spec: &SynthSpec, prefix: &str, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    (0..n)
        .map(|i| synth_patch(spec, &format!("{prefix}{i:04}"), crate::mix_seed(seed, i as u64)))
        .collect()
}
