//! Localization and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::grid::{BinaryMask, SoftMask};
use crate::{Error, Result};

/// Linear-interpolation percentile of `values` (0 <= p <= 100), the usual
/// "type 7" definition.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Foreground = pixels strictly above the `p`-th percentile of the map.
/// A constant map therefore yields an empty mask.
pub fn percentile_threshold(map: &SoftMask, p: f64) -> Result<BinaryMask> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::contract(format!("percentile {p} outside (0, 100)")));
    }
    let g = map.grid();
    let t = percentile(g.data(), p);
    let (h, w) = g.dims();
    Ok(BinaryMask::new(h, w, g.data().iter().map(|&v| v > t).collect()))
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        assert!(row_min <= row_max && col_min <= col_max);
        BoundingBox {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn intersection_area(&self, o: &BoundingBox) -> usize {
        let r0 = self.row_min.max(o.row_min);
        let r1 = self.row_max.min(o.row_max);
        let c0 = self.col_min.max(o.col_min);
        let c1 = self.col_max.min(o.col_max);
        if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        }
    }

    pub fn iou(&self, o: &BoundingBox) -> f64 {
        let i = self.intersection_area(o);
        i as f64 / (self.area() + o.area() - i) as f64
    }
}

/// One box per 8-connected component, ordered by each component's first
/// pixel in row-major order.
pub fn connected_component_boxes(mask: &BinaryMask) -> Vec<BoundingBox> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut b = BoundingBox::new(start / w, start % w, start / w, start % w);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let j = rr * w + cc;
                    if mask.data()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground pixel.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut g: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = g[r * w + c];
        }
        edt_1d(&col, &mut tmp);
        for r in 0..h {
            g[r * w + c] = tmp[r];
        }
    }
    let mut row = vec![0.0; w];
    for r in 0..h {
        edt_1d(&g[r * w..(r + 1) * w], &mut row);
        g[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    g
}

fn directed_hausdorff(a: &BinaryMask, dt_b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(dt_b)
        .filter(|(&x, _)| x)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between foreground point sets, pixels.
/// Empty vs empty is 0; empty vs nonempty is the image diagonal.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    assert_eq!(a.dims(), b.dims());
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => {
            let (h, w) = a.dims();
            ((h * h + w * w) as f64).sqrt()
        }
        (false, false) => {
            let ab = directed_hausdorff(a, &squared_distance_transform(b));
            let ba = directed_hausdorff(b, &squared_distance_transform(a));
            ab.max(ba)
        }
    }
}

/// How a GT box counts as found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouRule {
    /// Max IOU over predicted boxes is at least the threshold.
    AtLeast,
    /// Literal reading: some predicted box has IOU at most the threshold.
    AtMost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub found: usize,
    pub total: usize,
    /// Median over GT boxes of the found indicator.
    pub per_image: f64,
}

/// `None` when there are no GT boxes (excluded from aggregates).
pub fn weak_localization(
    gt: &[BoundingBox],
    pred: &[BoundingBox],
    tau: f64,
    rule: IouRule,
) -> Option<Localization> {
    if gt.is_empty() {
        return None;
    }
    let hits: Vec<f64> = gt
        .iter()
        .map(|g| {
            let ok = match rule {
                IouRule::AtLeast => pred.iter().any(|p| g.iou(p) >= tau),
                IouRule::AtMost => pred.iter().any(|p| g.iou(p) <= tau),
            };
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let found = hits.iter().filter(|&&x| x > 0.0).count();
    Some(Localization {
        found,
        total: gt.len(),
        per_image: median(&hits),
    })
}

pub fn median(v: &[f64]) -> f64 {
    percentile(v, 50.0)
}

/// `|mask ∩ reference| / |reference|`.
pub fn area_ratio(mask: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    let r = reference.area();
    if r == 0 {
        return Err(Error::contract("area_ratio reference is empty"));
    }
    Ok(mask.intersection(reference).area() as f64 / r as f64)
}

fn check_binary_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("ROC needs both classes"));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank statistic, ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_labels(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC points `(fpr, tpr)` from (0,0) to (1,1), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary_labels(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Threshold maximizing Youden's J = TPR - FPR for the rule `score > θ`,
/// placed midway between adjacent distinct scores.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary_labels(scores, labels)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(distinct[0]);
    }
    let (pos, neg) = check_binary_labels(scores, labels)?;
    let mut best = (f64::NEG_INFINITY, distinct[0]);
    for pair in distinct.windows(2) {
        let theta = 0.5 * (pair[0] + pair[1]);
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s > theta).count();
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s > theta).count();
        let j = tp as f64 / pos as f64 - fp as f64 / neg as f64;
        if j > best.0 {
            best = (j, theta);
        }
    }
    Ok(best.1)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with midranks; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// IOU of two binary masks (pixel sets); 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let i = a.intersection(b).area();
    let u = a.union(b).area();
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}
