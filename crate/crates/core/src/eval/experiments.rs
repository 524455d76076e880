//! Perturbation ROC experiment and weight-randomization sanity check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mask_iou, roc_auc, roc_curve, spearman};
use crate::attributor::AttributorModel;
use crate::classifier::ScorerModel;
use crate::grid::{BinaryMask, Grid};
use crate::inpainter::{generate_irregular_mask, InpainterModel, IrregularMaskConfig};
use crate::synth::{splitmix64, LabeledImage};
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub runs: usize,
    /// Healthy-variant masks avoid the lesion dilated by this radius.
    pub gt_margin: usize,
    /// Pathological-variant masks add random strokes within this radius of the lesion.
    pub neighborhood: usize,
    pub masks: IrregularMaskConfig,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            runs: 10,
            gt_margin: 2,
            neighborhood: 6,
            masks: IrregularMaskConfig::default(),
            seed: 404,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Healthy,
    Pathological,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Healthy => "healthy",
            Variant::Pathological => "pathological",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocRun {
    pub variant: Variant,
    pub run: usize,
    pub auc: f64,
    /// `(fpr, tpr)` points from (0, 0) to (1, 1).
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub runs: Vec<RocRun>,
    pub baseline_auc: f64,
    pub healthy_auc: f64,
    pub pathological_auc: f64,
    /// Per-run `baseline - pathological` AUC drops: mean and std.
    pub drop_mean: f64,
    pub drop_std: f64,
    /// Per-run `|baseline - healthy|` AUC shifts: mean and max.
    pub shift_mean: f64,
    pub shift_max: f64,
}

impl PerturbationReport {
    pub fn mean_curve(&self, variant: Variant) -> Vec<(f64, f64)> {
        // vertical averaging on a fixed fpr grid
        let runs: Vec<&RocRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        (0..=100)
            .map(|i| {
                let f = i as f64 / 100.0;
                let t = runs.iter().map(|r| tpr_at(&r.curve, f)).sum::<f64>() / runs.len().max(1) as f64;
                (f, t)
            })
            .collect()
    }
}

/// Highest tpr reached at false-positive rate `f` on a step curve.
fn tpr_at(curve: &[(f64, f64)], f: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.0 <= f + 1e-12)
        .map(|p| p.1)
        .fold(0.0, f64::max)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Masks of one run: healthy variant everywhere, and pathological variant
/// (dilated lesion plus nearby random strokes) on lesion images.
pub fn perturbation_masks(
    images: &[LabeledImage],
    cfg: &PerturbationConfig,
    run: usize,
) -> Result<(Vec<BinaryMask>, Vec<BinaryMask>)> {
    let mut healthy = Vec::with_capacity(images.len());
    let mut patho = Vec::with_capacity(images.len());
    for (i, s) in images.iter().enumerate() {
        let (h, w) = s.pixels.dims();
        let seed = splitmix64(cfg.seed ^ splitmix64((run as u64) << 32 | i as u64));
        let r = generate_irregular_mask(seed, &cfg.masks, h, w)?;
        let hm = r.intersection(&s.gt_mask.dilate(cfg.gt_margin).complement());
        patho.push(if s.label.is_pathological() {
            s.gt_mask
                .dilate(cfg.gt_margin)
                .union(&r.intersection(&s.gt_mask.dilate(cfg.neighborhood)))
        } else {
            hm.clone()
        });
        healthy.push(hm);
    }
    Ok((healthy, patho))
}

/// Scorer ROC on the unmodified test set and after inpainting healthy
/// respectively pathological regions, averaged over `cfg.runs` mask seeds.
pub fn perturbation_roc_experiment(
    scorer: &ScorerModel,
    inpainter: &InpainterModel,
    images: &[LabeledImage],
    cfg: &PerturbationConfig,
) -> Result<PerturbationReport> {
    if cfg.runs == 0 {
        return Err(Error::config("perturbation experiment needs at least one run"));
    }
    let labels: Vec<bool> = images.iter().map(|s| s.label.is_pathological()).collect();
    let grids: Vec<&Grid> = images.iter().map(|s| &s.pixels).collect();
    let base = scorer.scores(&grids)?;
    let baseline_auc = roc_auc(&base, &labels)?;
    let mut runs = vec![RocRun {
        variant: Variant::Baseline,
        run: 0,
        auc: baseline_auc,
        curve: roc_curve(&base, &labels)?,
    }];
    for run in 0..cfg.runs {
        let (hm, pm) = perturbation_masks(images, cfg, run)?;
        for (variant, masks) in [(Variant::Healthy, hm), (Variant::Pathological, pm)] {
            let refs: Vec<&BinaryMask> = masks.iter().collect();
            let inpainted = inpainter.inpaint_batch(&grids, &refs)?;
            let s = scorer.scores(&inpainted.iter().collect::<Vec<_>>())?;
            runs.push(RocRun {
                variant,
                run,
                auc: roc_auc(&s, &labels)?,
                curve: roc_curve(&s, &labels)?,
            });
        }
    }
    let aucs = |v: Variant| runs.iter().filter(|r| r.variant == v).map(|r| r.auc).collect::<Vec<_>>();
    let (h, p) = (aucs(Variant::Healthy), aucs(Variant::Pathological));
    let drops: Vec<f64> = p.iter().map(|a| baseline_auc - a).collect();
    let shifts: Vec<f64> = h.iter().map(|a| (baseline_auc - a).abs()).collect();
    let (drop_mean, drop_std) = mean_std(&drops);
    Ok(PerturbationReport {
        baseline_auc,
        healthy_auc: mean_std(&h).0,
        pathological_auc: mean_std(&p).0,
        drop_mean,
        drop_std,
        shift_mean: mean_std(&shifts).0,
        shift_max: shifts.iter().copied().fold(0.0, f64::max),
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub draws: usize,
    /// Area-matched random masks per draw for the chance baseline.
    pub chance_draws: usize,
    pub max_abs_correlation: f64,
    pub seed: u64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            draws: 10,
            chance_draws: 100,
            max_abs_correlation: 0.1,
            seed: 505,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRow {
    /// `None` for the trained-model control row.
    pub draw: Option<usize>,
    pub mean_iou: f64,
    pub chance_mean: f64,
    pub chance_std: f64,
    pub mean_abs_correlation: f64,
    pub at_chance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationReport {
    pub control: RandomizationRow,
    pub rows: Vec<RandomizationRow>,
    pub pass: bool,
}

/// IOU with the gt of circularly shifted copies of each mask (same shape
/// and area, random position): mean and std over `draws` dataset means.
fn chance_iou(masks: &[BinaryMask], gts: &[BinaryMask], draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let means: Vec<f64> = (0..draws)
        .map(|_| {
            masks
                .iter()
                .zip(gts)
                .map(|(m, g)| {
                    let (h, w) = m.dims();
                    let dy = rng.random_range(0..h);
                    let dx = rng.random_range(0..w);
                    mask_iou(&m.roll(dy, dx), g)
                })
                .sum::<f64>()
                / masks.len().max(1) as f64
        })
        .collect();
    mean_std(&means)
}

/// Re-draws gate, decoder and head weights `cfg.draws` times and compares
/// the resulting maps with the gt and with the trained model's maps.
pub fn randomization_sanity_check(
    model: &AttributorModel,
    images: &[LabeledImage],
    cfg: &RandomizationConfig,
) -> Result<RandomizationReport> {
    let lesions: Vec<&LabeledImage> = images.iter().filter(|s| !s.gt_mask.is_empty()).collect();
    if lesions.is_empty() {
        return Err(Error::config("randomization check needs images with lesions"));
    }
    let grids: Vec<&Grid> = lesions.iter().map(|s| &s.pixels).collect();
    let gts: Vec<BinaryMask> = lesions.iter().map(|s| s.gt_mask.clone()).collect();
    let t = model.arch.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (trained, _) = model.forward_batch(&grids)?;
    let row = |draw: Option<usize>, m: &AttributorModel, rng: &mut ChaCha8Rng| -> Result<RandomizationRow> {
        let (maps, _) = m.forward_batch(&grids)?;
        let bins: Vec<BinaryMask> = maps.iter().map(|s| s.threshold(t)).collect();
        let mean_iou = bins.iter().zip(&gts).map(|(b, g)| mask_iou(b, g)).sum::<f64>() / gts.len() as f64;
        let corr = par::map_range(maps.len(), |i| spearman(maps[i].grid().data(), trained[i].grid().data()).abs());
        let mean_abs_correlation = corr.iter().sum::<f64>() / corr.len() as f64;
        let (chance_mean, chance_std) = chance_iou(&bins, &gts, cfg.chance_draws, rng);
        let at_chance = (mean_iou - chance_mean).abs() <= 2.0 * chance_std + 1e-12;
        Ok(RandomizationRow {
            draw,
            mean_iou,
            chance_mean,
            chance_std,
            mean_abs_correlation,
            at_chance,
        })
    };
    let control = row(None, model, &mut rng)?;
    let mut rows = Vec::with_capacity(cfg.draws);
    for d in 0..cfg.draws {
        let randomized = model.randomized(&mut rng);
        rows.push(row(Some(d), &randomized, &mut rng)?);
    }
    let pass = rows
        .iter()
        .all(|r| r.at_chance && r.mean_abs_correlation < cfg.max_abs_correlation);
    Ok(RandomizationReport { control, rows, pass })
}
