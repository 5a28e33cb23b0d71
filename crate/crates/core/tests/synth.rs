use kongnet::preprocess::centroid_from_instance;
use kongnet::testkit::{synth_patch, SynthSpec};

/// Over 100 seeds: per-class counts stay within their ranges and every value
/// in the range shows up; layouts differ between seeds; the mean count sits
/// near the centre of its range.
#[test]
fn statistics_envelope_over_seeds() {
    let spec = SynthSpec::three_class();
    let n_classes = spec.classes.len();
    let mut seen = vec![std::collections::BTreeSet::new(); n_classes];
    let mut sums = vec![0usize; n_classes];
    let mut layouts = std::collections::BTreeSet::new();
    for seed in 0..100 {
        let s = synth_patch(&spec, "p", seed).unwrap();
        let counts = s.annotation.count_per_class(n_classes);
        for (k, c) in spec.classes.iter().enumerate() {
            assert!((c.count.0..=c.count.1).contains(&counts[k]));
            seen[k].insert(counts[k]);
            sums[k] += counts[k];
        }
        // Centroids agree with the instance mask they were rendered from.
        let mask = s.annotation.instance_mask.as_ref().unwrap();
        let from_mask = centroid_from_instance(mask);
        assert_eq!(from_mask.len(), s.annotation.centroids.len());
        let key: Vec<(i64, i64)> = s
            .annotation
            .centroids
            .iter()
            .map(|c| (c.x as i64, c.y as i64))
            .collect();
        layouts.insert(key);
    }
    assert!(layouts.len() >= 99, "only {} distinct layouts", layouts.len());
    for (k, c) in spec.classes.iter().enumerate() {
        assert_eq!(seen[k].len(), c.count.1 - c.count.0 + 1, "class {k} misses some counts");
        let mean = sums[k] as f64 / 100.0;
        let centre = (c.count.0 + c.count.1) as f64 / 2.0;
        let half_width = (c.count.1 - c.count.0) as f64 / 2.0;
        assert!(
            (mean - centre).abs() < 0.35 * half_width.max(1.0),
            "class {k}: mean {mean}"
        );
    }
}

#[test]
fn class_colours_separate_the_classes() {
    let spec = SynthSpec::three_class();
    let s = synth_patch(&spec, "p", 3).unwrap();
    let mask = s.annotation.instance_mask.as_ref().unwrap();
    let classes = s.annotation.instance_classes.as_ref().unwrap();
    let px = s.patch.pixels();
    for (label, &k) in classes.iter().enumerate() {
        let (mut sum, mut n) = ([0f64; 3], 0.0);
        for ((y, x), &l) in mask.indexed_iter() {
            if l as usize == label + 1 {
                for c in 0..3 {
                    sum[c] += px[[y, x, c]] as f64;
                }
                n += 1.0;
            }
        }
        for (s, &want) in sum.iter().zip(&spec.classes[k].color) {
            assert!((s / n - want as f64).abs() < 0.05);
        }
    }
}
