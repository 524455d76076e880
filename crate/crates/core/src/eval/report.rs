//! Per-image metric records, the method comparison table and ROC artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiments::{PerturbationReport, Variant};
use super::metrics::{
    area_ratio, connected_component_boxes, hausdorff, median, percentile_threshold, weak_localization, IouRule,
};
use super::stats::wilcoxon_signed_rank;
use crate::grid::{BinaryMask, SoftMask};
use crate::synth::LabeledImage;
use crate::{imageio, Error, Result};

pub const PERCENTILES: [u32; 3] = [50, 75, 90];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Cam,
    Saliency,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::Cam, Method::Saliency];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Cam => "cam",
            Method::Saliency => "saliency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    pub tau: f64,
    pub rule: IouRule,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            tau: 0.125,
            rule: IouRule::AtLeast,
        }
    }
}

/// Metrics of one map on one image. `percentile` is empty for our maps,
/// which are thresholded at their native level and reused in every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub method: Method,
    pub percentile: Option<u32>,
    pub hausdorff: f64,
    /// Per-image weak localization (median over gt boxes); empty without gt boxes.
    pub localization: Option<f64>,
    pub area_ratio: f64,
    pub area: usize,
}

fn record(id: &str, method: Method, percentile: Option<u32>, pred: &BinaryMask, gt: &BinaryMask, loc: &LocalizationConfig) -> Result<ImageRecord> {
    let full = BinaryMask::full(pred.dims().0, pred.dims().1);
    let l = weak_localization(
        &connected_component_boxes(gt),
        &connected_component_boxes(pred),
        loc.tau,
        loc.rule,
    );
    Ok(ImageRecord {
        image_id: id.to_string(),
        method,
        percentile,
        hausdorff: hausdorff(pred, gt),
        localization: l.map(|l| l.per_image),
        area_ratio: area_ratio(pred, &full)?,
        area: pred.area(),
    })
}

/// Records for our binary masks and percentile-thresholded CAM and
/// saliency maps, one entry per image (and percentile for baselines).
pub fn image_records(
    ids: &[String],
    gts: &[&BinaryMask],
    ours: &[BinaryMask],
    cam: &[SoftMask],
    saliency: &[SoftMask],
    percentiles: &[u32],
    loc: &LocalizationConfig,
) -> Result<Vec<ImageRecord>> {
    let n = ids.len();
    if [gts.len(), ours.len(), cam.len(), saliency.len()].iter().any(|&k| k != n) {
        return Err(Error::contract("per-image inputs differ in count"));
    }
    let mut out = Vec::new();
    for i in 0..n {
        out.push(record(&ids[i], Method::Ours, None, &ours[i], gts[i], loc)?);
        for &p in percentiles {
            for (m, map) in [(Method::Cam, &cam[i]), (Method::Saliency, &saliency[i])] {
                let bin = percentile_threshold(map, p as f64)?;
                out.push(record(&ids[i], m, Some(p), &bin, gts[i], loc)?);
            }
        }
    }
    Ok(out)
}

/// Convenience wrapper pulling ids and gt masks from labeled images.
pub fn records_for_images(
    images: &[LabeledImage],
    ids: &[String],
    ours: &[BinaryMask],
    cam: &[SoftMask],
    saliency: &[SoftMask],
    percentiles: &[u32],
    loc: &LocalizationConfig,
) -> Result<Vec<ImageRecord>> {
    let gts: Vec<&BinaryMask> = images.iter().map(|s| &s.gt_mask).collect();
    image_records(ids, &gts, ours, cam, saliency, percentiles, loc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub percentile: u32,
    pub n: usize,
    pub h_mean: f64,
    pub h_std: f64,
    pub h_median: f64,
    pub l: f64,
    pub a_mean: f64,
    pub a_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonEntry {
    pub percentile: u32,
    pub baseline: Method,
    /// Paired test on per-image Hausdorff distances, ours vs baseline.
    pub p_hausdorff: f64,
    pub p_area: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub baseline: f64,
    pub healthy: f64,
    pub pathological: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub percentiles: Vec<u32>,
    pub samples: usize,
    pub cells: Vec<Cell>,
    pub wilcoxon: Vec<WilcoxonEntry>,
    pub roc: Option<RocSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl MetricsReport {
    pub fn cell(&self, method: Method, percentile: u32) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.percentile == percentile)
    }

    pub fn wilcoxon_for(&self, baseline: Method, percentile: u32) -> Option<&WilcoxonEntry> {
        self.wilcoxon
            .iter()
            .find(|w| w.baseline == baseline && w.percentile == percentile)
    }

    /// Plain-text table: one row per percentile, H / L / A for each method.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "attribution comparison on {} lesion images", self.samples);
        let _ = writeln!(s, "ours uses its native threshold in every row\n");
        let mut header = format!("{:<5}", "P");
        for metric in ["H", "L", "A"] {
            for m in Method::ALL {
                header.push_str(&format!(" {:>16}", format!("{metric}_{}", m.name())));
            }
        }
        let _ = writeln!(s, "{header}");
        for &p in &self.percentiles {
            let mut line = format!("{:<5}", format!("P{p}"));
            for m in Method::ALL {
                let c = self.cell(m, p);
                line.push_str(&format!(" {:>16}", c.map_or("-".into(), |c| format!("{:.2}±{:.2}", c.h_mean, c.h_std))));
            }
            for m in Method::ALL {
                let c = self.cell(m, p);
                line.push_str(&format!(" {:>16}", c.map_or("-".into(), |c| format!("{:.3}", c.l))));
            }
            for m in Method::ALL {
                let c = self.cell(m, p);
                line.push_str(&format!(" {:>16}", c.map_or("-".into(), |c| format!("{:.3}±{:.3}", c.a_mean, c.a_std))));
            }
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s, "\nWilcoxon signed-rank p-values, ours vs baseline (paired per image)");
        let _ = writeln!(s, "{:<5} {:>10} {:>12} {:>12}", "P", "baseline", "p(H)", "p(A)");
        for w in &self.wilcoxon {
            let _ = writeln!(
                s,
                "{:<5} {:>10} {:>12.3e} {:>12.3e}",
                format!("P{}", w.percentile),
                w.baseline.name(),
                w.p_hausdorff,
                w.p_area
            );
        }
        if let Some(r) = &self.roc {
            let _ = writeln!(
                s,
                "\nROC AUC: baseline {:.4}, healthy-region inpainting {:.4}, lesion inpainting {:.4}",
                r.baseline, r.healthy, r.pathological
            );
        }
        s
    }
}

/// Assembles the comparison table from per-image records alone.
pub fn build_comparison_report(records: &[ImageRecord], percentiles: &[u32], roc: Option<RocSummary>) -> Result<MetricsReport> {
    let ours: Vec<&ImageRecord> = records.iter().filter(|r| r.method == Method::Ours).collect();
    if ours.is_empty() {
        return Err(Error::contract("no records for our method"));
    }
    let cell = |method: Method, p: u32, rs: &[&ImageRecord]| {
        let h: Vec<f64> = rs.iter().map(|r| r.hausdorff).collect();
        let a: Vec<f64> = rs.iter().map(|r| r.area_ratio).collect();
        let l: Vec<f64> = rs.iter().filter_map(|r| r.localization).collect();
        let (h_mean, h_std) = mean_std(&h);
        let (a_mean, a_std) = mean_std(&a);
        Cell {
            method,
            percentile: p,
            n: rs.len(),
            h_mean,
            h_std,
            h_median: if h.is_empty() { f64::NAN } else { median(&h) },
            l: mean_std(&l).0,
            a_mean,
            a_std,
        }
    };
    let mut cells = Vec::new();
    let mut wilcoxon = Vec::new();
    for &p in percentiles {
        cells.push(cell(Method::Ours, p, &ours));
        for m in [Method::Cam, Method::Saliency] {
            let rs: Vec<&ImageRecord> = records
                .iter()
                .filter(|r| r.method == m && r.percentile == Some(p))
                .collect();
            if rs.is_empty() {
                continue;
            }
            // pair by image id
            let mut xh = Vec::new();
            let mut yh = Vec::new();
            let mut xa = Vec::new();
            let mut ya = Vec::new();
            for r in &rs {
                if let Some(o) = ours.iter().find(|o| o.image_id == r.image_id) {
                    xh.push(o.hausdorff);
                    yh.push(r.hausdorff);
                    xa.push(o.area_ratio);
                    ya.push(r.area_ratio);
                }
            }
            wilcoxon.push(WilcoxonEntry {
                percentile: p,
                baseline: m,
                p_hausdorff: wilcoxon_signed_rank(&xh, &yh)?,
                p_area: wilcoxon_signed_rank(&xa, &ya)?,
            });
            cells.push(cell(m, p, &rs));
        }
    }
    Ok(MetricsReport {
        percentiles: percentiles.to_vec(),
        samples: ours.len(),
        cells,
        wilcoxon,
        roc,
    })
}

pub fn write_records_csv(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::persistence(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::persistence(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::persistence(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ImageRecord>, _>>()
        .map_err(|e| Error::persistence(path, e))
}

#[derive(Serialize)]
struct RocPoint<'a> {
    variant: &'a str,
    run: usize,
    fpr: f64,
    tpr: f64,
}

/// Every run's curve as `variant,run,fpr,tpr` rows.
pub fn write_roc_csv(path: &Path, report: &PerturbationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::persistence(path, e))?;
    for run in &report.runs {
        for &(fpr, tpr) in &run.curve {
            w.serialize(RocPoint {
                variant: run.variant.name(),
                run: run.run,
                fpr,
                tpr,
            })
            .map_err(|e| Error::persistence(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PLOT: usize = 320;
const MARGIN: usize = 20;

fn draw_line(px: &mut [[u8; 3]], a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let side = (PLOT - 2 * MARGIN) as f64;
    let to_px = |p: (f64, f64)| {
        (
            MARGIN as f64 + p.0.clamp(0.0, 1.0) * side,
            (PLOT - MARGIN) as f64 - p.1.clamp(0.0, 1.0) * side,
        )
    };
    let (x0, y0) = to_px(a);
    let (x1, y1) = to_px(b);
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as usize;
        let y = (y0 + t * (y1 - y0)).round() as usize;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            if x + dx < PLOT && y + dy < PLOT {
                px[(y + dy) * PLOT + x + dx] = color;
            }
        }
    }
}

/// Renders the baseline and the run-averaged inpainting curves.
pub fn plot_roc_png(path: &Path, report: &PerturbationReport) -> Result<()> {
    let mut px = vec![[255u8; 3]; PLOT * PLOT];
    let grey = [190, 190, 190];
    draw_line(&mut px, (0.0, 0.0), (1.0, 1.0), grey);
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))] {
        draw_line(&mut px, a, b, [0, 0, 0]);
    }
    for (variant, color) in [
        (Variant::Healthy, [30, 160, 60]),
        (Variant::Pathological, [210, 40, 40]),
        (Variant::Baseline, [30, 60, 200]),
    ] {
        let curve = report.mean_curve(variant);
        for seg in curve.windows(2) {
            draw_line(&mut px, seg[0], seg[1], color);
        }
    }
    imageio::write_rgb(path, PLOT, PLOT, px.concat())
}
