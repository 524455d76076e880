//! Brute-force oracles for the evaluation metrics. Each `check_*` draws
//! `instances` random 8×8 cases and reports the first disagreement.

use cfa_core::eval::metrics::mask_iou;
use cfa_core::eval::{
    connected_component_boxes, hausdorff, percentile_threshold, roc_auc, weak_localization, wilcoxon_signed_rank,
    BoundingBox, IouRule,
};
use cfa_core::grid::{BinaryMask, Grid, SoftMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 8;

pub fn random_mask(r: &mut ChaCha8Rng) -> BinaryMask {
    let p = r.random_range(0.0..0.6);
    BinaryMask::from_fn(N, N, |_, _| r.random_bool(p))
}

pub fn hausdorff_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pa: Vec<(usize, usize)> = a.points().collect();
    let pb: Vec<(usize, usize)> = b.points().collect();
    let (h, w) = a.dims();
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let d = |p: (usize, usize), q: (usize, usize)| {
        let (dr, dc) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
        (dr * dr + dc * dc).sqrt()
    };
    let directed = |x: &[(usize, usize)], y: &[(usize, usize)]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Components by repeated min-label propagation over 8-neighbours, ordered
/// by their first pixel.
pub fn component_oracle(m: &BinaryMask) -> Vec<BoundingBox> {
    let (h, w) = m.dims();
    let mut label: Vec<Option<usize>> = (0..h * w).map(|i| m.data()[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for i in 0..h * w {
            let Some(li) = label[i] else { continue };
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    if let Some(lj) = label[rr as usize * w + cc as usize] {
                        if lj < li {
                            label[i] = Some(lj);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = label.iter().flatten().copied().collect();
    roots.sort();
    roots.dedup();
    roots
        .iter()
        .map(|&root| {
            let px: Vec<usize> = (0..h * w).filter(|&i| label[i] == Some(root)).collect();
            BoundingBox::new(
                px.iter().map(|i| i / w).min().unwrap(),
                px.iter().map(|i| i % w).min().unwrap(),
                px.iter().map(|i| i / w).max().unwrap(),
                px.iter().map(|i| i % w).max().unwrap(),
            )
        })
        .collect()
}

fn box_pixels(b: &BoundingBox) -> BinaryMask {
    BinaryMask::from_fn(N, N, |r, c| (b.row_min..=b.row_max).contains(&r) && (b.col_min..=b.col_max).contains(&c))
}

fn median_oracle(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Two-sided signed-rank p by enumerating all sign assignments.
pub fn wilcoxon_oracle(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let rank = |x: f64| {
        let less = d.iter().filter(|v| v.abs() < x).count() as f64;
        let eq = d.iter().filter(|v| v.abs() == x).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let ranks: Vec<f64> = d.iter().map(|v| rank(v.abs())).collect();
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0.0, 0.0);
    for bits in 0u32..1 << n {
        let s: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            le += 1.0;
        }
        if s >= w - 1e-9 {
            ge += 1.0;
        }
    }
    let all = (1u64 << n) as f64;
    (2.0 * (le / all).min(ge / all)).min(1.0)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

pub fn check_hausdorff(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (a, b) = (random_mask(&mut r), random_mask(&mut r));
        let (got, want) = (hausdorff(&a, &b), hausdorff_oracle(&a, &b));
        ensure!((got - want).abs() < 1e-12, "hausdorff {got} vs {want}");
    }
    Ok(())
}

pub fn check_components(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let m = random_mask(&mut r);
        ensure!(connected_component_boxes(&m) == component_oracle(&m), "components differ on {m:?}");
    }
    Ok(())
}

pub fn check_weak_localization(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (g, p) = (random_mask(&mut r), random_mask(&mut r));
        let (gb, pb) = (component_oracle(&g), component_oracle(&p));
        let tau = [0.125, 0.3, 0.5][r.random_range(0..3)];
        for rule in [IouRule::AtLeast, IouRule::AtMost] {
            let got = weak_localization(&gb, &pb, tau, rule);
            if gb.is_empty() {
                ensure!(got.is_none(), "no gt boxes must give None");
                continue;
            }
            let hits: Vec<f64> = gb
                .iter()
                .map(|a| {
                    let hit = pb.iter().any(|b| {
                        let v = mask_iou(&box_pixels(a), &box_pixels(b));
                        match rule {
                            IouRule::AtLeast => v >= tau,
                            IouRule::AtMost => v <= tau,
                        }
                    });
                    f64::from(u8::from(hit))
                })
                .collect();
            let got = got.ok_or("missing localization")?;
            let found = hits.iter().filter(|&&h| h > 0.0).count();
            ensure!(got.found == found && got.total == gb.len(), "found {} vs {found}", got.found);
            ensure!(got.per_image == median_oracle(&hits), "per-image median differs");
        }
    }
    Ok(())
}

pub fn check_percentile_threshold(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        // coarse values so ties are common
        let levels = r.random_range(2..20);
        let g = Grid::from_fn(N, N, |_, _| r.random_range(0..levels) as f64 / levels as f64);
        let p = [50.0, 75.0, 90.0, r.random_range(1.0..99.0)][r.random_range(0..4)];
        let mut v = g.data().to_vec();
        v.sort_by(f64::total_cmp);
        let pos = p / 100.0 * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let t = v[lo] + (v[hi] - v[lo]) * (pos - lo as f64);
        let want = BinaryMask::from_fn(N, N, |i, j| g.get(i, j) > t);
        let got = percentile_threshold(&SoftMask(g), p).map_err(|e| e.to_string())?;
        ensure!(got == want, "percentile {p} threshold differs");
    }
    Ok(())
}

pub fn check_roc_auc(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < instances {
        let n = r.random_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..10) as f64).collect();
        let l: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
            ensure!(roc_auc(&s, &l).is_err(), "single-class AUC must fail");
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let got = roc_auc(&s, &l).map_err(|e| e.to_string())?;
        ensure!((got - num / den).abs() < 1e-12, "auc {got} vs {}", num / den);
        done += 1;
    }
    Ok(())
}

pub fn check_wilcoxon(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = r.random_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-4..=4) as f64).collect();
        let got = wilcoxon_signed_rank(&x, &vec![0.0; n]).map_err(|e| e.to_string())?;
        let want = wilcoxon_oracle(&x);
        ensure!((got - want).abs() < 1e-12, "wilcoxon {x:?}: {got} vs {want}");
    }
    let p = wilcoxon_signed_rank(&[3.1, 2.0, 5.5, 4.2, 1.7, 6.0], &[1.0, 1.5, 2.0, 2.2, 1.0, 3.0])
        .map_err(|e| e.to_string())?;
    ensure!((p - 0.03125).abs() < 1e-15, "n = 6 all positive gives {p}");
    Ok(())
}
