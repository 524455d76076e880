use cfa_core::grid::BinaryMask;
use cfa_core::synth::{generate_dataset, generate_sample, DatasetManifest, Label, Split, SynthConfig};
use proptest::prelude::*;

/// 8-connected component count by flood fill.
fn components(m: &BinaryMask) -> usize {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for start in 0..h * w {
        if !m.data()[start] || seen[start] {
            continue;
        }
        n += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if m.data()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    n
}

fn mean_over(pixels: &[f64], m: &BinaryMask) -> f64 {
    let vals: Vec<f64> = pixels.iter().zip(m.data()).filter(|(_, &b)| b).map(|(v, _)| *v).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn lesion_area_matches_radius_range() {
    let cfg = SynthConfig {
        lesion_radius: [4, 6],
        ..SynthConfig::default()
    };
    let s = generate_sample(7, Label::Pathological, &cfg).unwrap();
    let area = s.gt_mask.area() as f64;
    // discretized disks of radius r contain between pi (r-1)^2 and pi (r+1)^2 pixels
    let pi = std::f64::consts::PI;
    assert!(area >= pi * 9.0 && area <= pi * 49.0, "area {area}");
    assert_eq!(components(&s.gt_mask), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lesions_are_visible(seed in 0u64..u64::MAX >> 1, count in 1usize..=3) {
        let cfg = SynthConfig { lesion_count: [count, count], ..SynthConfig::default() };
        let s = generate_sample(seed, Label::Pathological, &cfg).unwrap();
        let ring = s.gt_mask.dilate(3).intersection(&s.gt_mask.complement());
        let inside = mean_over(s.pixels.data(), &s.gt_mask);
        let outside = mean_over(s.pixels.data(), &ring);
        prop_assert!(inside - outside >= cfg.contrast / 2.0, "{} vs {}", inside, outside);
        prop_assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(components(&s.gt_mask) >= 1 && components(&s.gt_mask) <= count);
    }

    #[test]
    fn healthy_images_have_empty_masks(seed in 0u64..1_000_000) {
        let s = generate_sample(seed, Label::Healthy, &SynthConfig::default()).unwrap();
        prop_assert!(s.gt_mask.is_empty());
    }
}

fn small(n_h: usize, n_p: usize) -> SynthConfig {
    SynthConfig {
        n_healthy: n_h,
        n_pathological: n_p,
        split: [0.6, 0.2, 0.2],
        ..SynthConfig::default()
    }
}

#[test]
fn dataset_round_trips_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(10, 10);
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 20);
    assert_eq!(
        (m.count(Split::Train, None), m.count(Split::Val, None), m.count(Split::Test, None)),
        (12, 4, 4)
    );
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    loaded.verify().unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, dir2.path()).unwrap();
    for r in &m.samples {
        let a = std::fs::read(dir.path().join(&r.image)).unwrap();
        let b = std::fs::read(dir2.path().join(&r.image)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(
        std::fs::read(dir.path().join("manifest.toml")).unwrap(),
        std::fs::read(dir2.path().join("manifest.toml")).unwrap()
    );
}

#[test]
fn zero_pathological_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(10, 0), dir.path()).unwrap();
    assert!(m.samples.iter().all(|r| r.label == Label::Healthy));
    assert_eq!(m.samples.len(), 10);
}

#[test]
fn tampered_file_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(3, 3), dir.path()).unwrap();
    let rec = &m.samples[0];
    let other = &m.samples[1];
    std::fs::copy(dir.path().join(&other.image), dir.path().join(&rec.image)).unwrap();
    assert!(m.verify().is_err());
}
