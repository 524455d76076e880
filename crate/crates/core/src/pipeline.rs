//! Stage orchestration over one run directory.
//!
//! Layout: `config.toml`, `ledger.toml`, `data/`, `scorer/`, `inpainter/`,
//! `attributor/`, `eval/`, and `attributions/` for ad-hoc images.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attributor::{self, AttributionResult, AttributorLog, AttributorModel};
use crate::classifier::{self, ClassifierLog, ScorerModel};
use crate::config::{RunConfig, Stage};
use crate::eval::experiments::{
    perturbation_roc_experiment, randomization_sanity_check, PerturbationReport, RandomizationReport,
};
use crate::eval::metrics::roc_auc;
use crate::eval::report::{
    build_comparison_report, image_records, plot_roc_png, write_records_csv, write_roc_csv, ImageRecord,
    MetricsReport, RocSummary,
};
use crate::grid::{BinaryMask, Grid, SoftMask};
use crate::inpainter::{self, InpainterLog, InpainterModel};
use crate::ledger::{LedgerEntry, RunLedger};
use crate::synth::{generate_dataset, DatasetManifest, LabeledImage, Split};
use crate::{archive, imageio, Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    /// Config-hash mismatches between stages are errors instead of warnings.
    pub strict: bool,
}

/// Per-image attribution outcome as written to `attribution.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub image_id: String,
    pub score_original: f64,
    pub score_marginalized: f64,
    pub area: usize,
    pub score_ok: bool,
    pub area_ok: bool,
    pub below_threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub images: usize,
    pub satisfaction: f64,
    pub area_ok: f64,
    pub score_ok: f64,
    pub mean_area: f64,
    pub delta: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub classifier_auc: f64,
    pub attribution: AttributionSummary,
    pub perturbation: PerturbationReport,
    pub randomization: RandomizationReport,
    pub report: MetricsReport,
}

#[derive(Serialize)]
struct SidecarOut<'a> {
    source: String,
    threshold: f64,
    theta: f64,
    delta: f64,
    note: Option<&'static str>,
    result: &'a AttributionResult,
}

const BELOW_THRESHOLD_NOTE: &str = "below threshold; attribution not meaningful";

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::persistence(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Pipeline {
    /// Validates the config and writes the resolved snapshot into `dir`.
    pub fn new(cfg: RunConfig, dir: &Path, strict: bool) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        mkdir(dir)?;
        std::fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml()).map_err(|e| Error::io(dir, e))?;
        Ok(Pipeline {
            cfg,
            dir: dir.to_path_buf(),
            strict,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn scorer_dir(&self) -> PathBuf {
        self.dir.join("scorer")
    }

    pub fn inpainter_dir(&self) -> PathBuf {
        self.dir.join("inpainter")
    }

    pub fn attributor_dir(&self) -> PathBuf {
        self.dir.join("attributor")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.dir.join("eval")
    }

    pub fn ledger(&self) -> RunLedger {
        RunLedger::open(&self.dir)
    }

    fn check_hash(&self, what: &str, found: &str, stage: Stage) -> Result<()> {
        let expected = self.cfg.stage_hash(stage);
        if found != expected {
            let msg = format!("{what} archive was produced by a different configuration");
            if self.strict {
                return Err(Error::config(msg));
            }
            warn!("{msg}");
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<DatasetManifest> {
        let t = Instant::now();
        let m = generate_dataset(&self.cfg.synth, &self.data_dir())?;
        self.ledger().append(
            &LedgerEntry::new("generate", &m.config_hash)
                .metric("samples", m.samples.len() as f64)
                .finish(t.elapsed().as_secs_f64()),
        )?;
        Ok(m)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let dir = self.data_dir();
        if !dir.join(crate::synth::MANIFEST_FILE).is_file() {
            return Err(Error::Dependency(format!(
                "no dataset at {}; run generate first",
                dir.display()
            )));
        }
        let m = DatasetManifest::load(&dir)?;
        if m.config_hash != self.cfg.stage_hash(Stage::Synth) {
            let msg = "dataset was generated from a different configuration";
            if self.strict {
                return Err(Error::config(msg));
            }
            warn!("{msg}");
        }
        Ok(m)
    }

    pub fn train_classifier(&self) -> Result<(ScorerModel, ClassifierLog)> {
        let m = self.manifest()?;
        let t = Instant::now();
        let (mut model, log) = classifier::train_classifier(&m, &self.cfg.classifier)?;
        model.config_hash = self.cfg.stage_hash(Stage::Classifier);
        model.save(&self.scorer_dir())?;
        write_toml(&self.scorer_dir().join("training_log.toml"), &log)?;
        let test = m.load_split(Split::Test, None)?;
        let auc = test_auc(&model, &test)?;
        self.ledger().append(
            &LedgerEntry::new("train-classifier", &model.config_hash)
                .model(classifier::ARCHIVE_KIND, &model.param_hash())
                .metric("theta", model.theta)
                .metric("test_auc", auc)
                .metric("best_epoch", log.best_epoch as f64)
                .finish(t.elapsed().as_secs_f64()),
        )?;
        info!("classifier test AUC {auc:.4}");
        Ok((model, log))
    }

    pub fn load_scorer(&self) -> Result<ScorerModel> {
        let m = ScorerModel::load(&self.scorer_dir())?;
        self.check_hash("scorer", &m.config_hash, Stage::Classifier)?;
        Ok(m)
    }

    pub fn train_inpainter(&self) -> Result<(InpainterModel, InpainterLog)> {
        let m = self.manifest()?;
        let scorer = self.load_scorer()?;
        let t = Instant::now();
        let (mut model, log) = inpainter::train_inpainter(&m, &scorer, &self.cfg.inpainter)?;
        model.config_hash = self.cfg.stage_hash(Stage::Inpainter);
        model.save(&self.inpainter_dir())?;
        self.ledger().append(
            &LedgerEntry::new("train-inpainter", &model.config_hash)
                .model(inpainter::ARCHIVE_KIND, &model.param_hash())
                .metric("final_loss", log.epochs.last().map_or(f64::NAN, |e| e.1))
                .finish(t.elapsed().as_secs_f64()),
        )?;
        Ok((model, log))
    }

    pub fn load_inpainter(&self) -> Result<InpainterModel> {
        let m = InpainterModel::load(&self.inpainter_dir())?;
        self.check_hash("inpainter", &m.config_hash, Stage::Inpainter)?;
        Ok(m)
    }

    pub fn train_attributor(&self) -> Result<(AttributorModel, AttributorLog)> {
        let m = self.manifest()?;
        let scorer = Arc::new(self.load_scorer()?);
        let inp = self.load_inpainter()?;
        let t = Instant::now();
        let (mut model, log) = attributor::train_attributor(&m, scorer, &inp, &self.cfg.attributor)?;
        model.config_hash = self.cfg.stage_hash(Stage::Attributor);
        model.save(&self.attributor_dir())?;
        write_toml(&self.attributor_dir().join("training_log.toml"), &log)?;
        let last = log.epochs.get(log.best_epoch);
        self.ledger().append(
            &LedgerEntry::new("train-attributor", &model.config_hash)
                .model(attributor::ARCHIVE_KIND, &model.store().content_hash())
                .metric("best_epoch", log.best_epoch as f64)
                .metric("val_satisfaction", last.map_or(f64::NAN, |e| e.val_satisfaction))
                .metric("delta", model.constraint.delta)
                .finish(t.elapsed().as_secs_f64()),
        )?;
        Ok((model, log))
    }

    pub fn load_attributor(&self) -> Result<AttributorModel> {
        let scorer = Arc::new(self.load_scorer()?);
        let m = AttributorModel::load(&self.attributor_dir(), Arc::clone(&scorer))?;
        self.check_hash("attributor", &m.config_hash, Stage::Attributor)?;
        if m.scorer_hash != scorer.param_hash() {
            let msg = "attributor was trained against a different scorer";
            if self.strict {
                return Err(Error::config(msg));
            }
            warn!("{msg}");
        }
        Ok(m)
    }

    /// Whether the stage's artifact exists and was produced by the current config.
    pub fn is_current(&self, stage: Stage) -> bool {
        let expected = self.cfg.stage_hash(stage);
        let found = match stage {
            Stage::Synth => DatasetManifest::load(&self.data_dir()).map(|m| m.config_hash),
            Stage::Classifier => ScorerModel::load(&self.scorer_dir()).map(|m| m.config_hash),
            Stage::Inpainter => InpainterModel::load(&self.inpainter_dir()).map(|m| m.config_hash),
            Stage::Attributor => self.load_scorer().and_then(|s| {
                AttributorModel::load(&self.attributor_dir(), Arc::new(s)).map(|m| m.config_hash)
            }),
        };
        found.is_ok_and(|h| h == expected)
    }

    fn require(&self, dir: &Path, kind: &str) -> Result<()> {
        if archive::exists(dir) {
            Ok(())
        } else {
            Err(Error::Dependency(format!(
                "no {kind} archive at {}; train {kind} first",
                dir.display()
            )))
        }
    }

    /// The full evaluation protocol on the test split.
    pub fn evaluate(&self) -> Result<EvaluationSummary> {
        self.require(&self.scorer_dir(), classifier::ARCHIVE_KIND)?;
        self.require(&self.inpainter_dir(), inpainter::ARCHIVE_KIND)?;
        self.require(&self.attributor_dir(), attributor::ARCHIVE_KIND)?;
        let t = Instant::now();
        let m = self.manifest()?;
        let model = self.load_attributor()?;
        let inp = self.load_inpainter()?;
        let scorer = Arc::clone(&model.scorer);
        let out = self.eval_dir();
        mkdir(&out)?;

        let recs: Vec<_> = m.records(Split::Test).cloned().collect();
        let test: Vec<LabeledImage> = recs.iter().map(|r| m.read(r)).collect::<Result<_>>()?;
        let classifier_auc = test_auc(&scorer, &test)?;

        let perturbation = perturbation_roc_experiment(&scorer, &inp, &test, &self.cfg.eval.perturbation)?;
        write_roc_csv(&out.join("roc.csv"), &perturbation)?;
        plot_roc_png(&out.join("roc.png"), &perturbation)?;
        write_toml(&out.join("perturbation.toml"), &PerturbationSummary::from(&perturbation))?;

        let (lesion_recs, lesions): (Vec<_>, Vec<_>) = recs
            .iter()
            .zip(&test)
            .filter(|(_, s)| s.label.is_pathological())
            .map(|(r, s)| (r.id.clone(), s.clone()))
            .unzip();
        let grids: Vec<&Grid> = lesions.iter().map(|s| &s.pixels).collect();
        let results = model.attribute_batch(&inp, &grids)?;
        let attribution = summarize(&results, &model);
        let rows: Vec<AttributionRecord> = lesion_recs
            .iter()
            .zip(&results)
            .map(|(id, r)| AttributionRecord {
                image_id: id.clone(),
                score_original: r.score_original,
                score_marginalized: r.score_marginalized,
                area: r.area,
                score_ok: r.score_ok,
                area_ok: r.area_ok,
                below_threshold: r.below_threshold,
            })
            .collect();
        write_csv(&out.join("attribution.csv"), &rows)?;

        let cam: Vec<SoftMask> = grids.iter().map(|g| scorer.cam(g)).collect::<Result<_>>()?;
        let sal: Vec<SoftMask> = grids.iter().map(|g| scorer.saliency(g)).collect::<Result<_>>()?;
        let ours: Vec<BinaryMask> = results.iter().map(|r| r.binary().clone()).collect();
        let gts: Vec<&BinaryMask> = lesions.iter().map(|s| &s.gt_mask).collect();
        let records: Vec<ImageRecord> = image_records(
            &lesion_recs,
            &gts,
            &ours,
            &cam,
            &sal,
            &self.cfg.eval.percentiles,
            &self.cfg.eval.localization,
        )?;
        write_records_csv(&out.join("records.csv"), &records)?;
        let roc = RocSummary {
            baseline: perturbation.baseline_auc,
            healthy: perturbation.healthy_auc,
            pathological: perturbation.pathological_auc,
        };
        let report = build_comparison_report(&records, &self.cfg.eval.percentiles, Some(roc))?;
        std::fs::write(out.join("report.txt"), report.to_text()).map_err(|e| Error::io(&out, e))?;
        write_toml(&out.join("report.toml"), &report)?;

        let randomization = randomization_sanity_check(&model, &lesions, &self.cfg.eval.randomization)?;
        write_toml(&out.join("randomization.toml"), &randomization)?;

        let summary = EvaluationSummary {
            classifier_auc,
            attribution,
            perturbation,
            randomization,
            report,
        };
        let ours50 = summary.report.cell(crate::eval::Method::Ours, self.cfg.eval.percentiles[0]);
        self.ledger().append(
            &LedgerEntry::new("evaluate", &model.config_hash)
                .model(attributor::ARCHIVE_KIND, &model.store().content_hash())
                .metric("classifier_auc", classifier_auc)
                .metric("auc_drop_lesion_inpainting", summary.perturbation.drop_mean)
                .metric("auc_shift_healthy_inpainting", summary.perturbation.shift_mean)
                .metric("constraint_satisfaction", summary.attribution.satisfaction)
                .metric("localization_ours", ours50.map_or(f64::NAN, |c| c.l))
                .metric("randomization_pass", f64::from(u8::from(summary.randomization.pass)))
                .finish(t.elapsed().as_secs_f64()),
        )?;
        Ok(summary)
    }

    /// Maps per second of wall time over repeated sweeps of the test split.
    pub fn benchmark(&self) -> Result<LedgerEntry> {
        self.require(&self.attributor_dir(), attributor::ARCHIVE_KIND)?;
        let m = self.manifest()?;
        let model = self.load_attributor()?;
        let test = m.load_split(Split::Test, None)?;
        let grids: Vec<&Grid> = test.iter().map(|s| &s.pixels).collect();
        let reps = self.cfg.eval.benchmark_repetitions;
        model.forward_batch(&grids[..grids.len().min(8)])?;
        let t = Instant::now();
        for _ in 0..reps {
            model.forward_batch(&grids)?;
        }
        let wall = t.elapsed().as_secs_f64();
        let maps = (reps * grids.len()) as f64;
        let mut e = LedgerEntry::new("benchmark", &model.config_hash)
            .metric("maps", maps)
            .metric("parallel", f64::from(u8::from(crate::par::is_parallel())))
            .finish(wall);
        e.maps_per_second = Some(maps / wall);
        e.repetitions = Some(reps);
        self.ledger().append(&e)?;
        Ok(e)
    }

    /// Attributes image files, writing soft mask, binary mask, overlay and
    /// a sidecar record per image into `out`.
    pub fn attribute_files(&self, images: &[PathBuf], out: &Path) -> Result<Vec<AttributionResult>> {
        self.require(&self.attributor_dir(), attributor::ARCHIVE_KIND)?;
        self.require(&self.inpainter_dir(), inpainter::ARCHIVE_KIND)?;
        let model = self.load_attributor()?;
        let inp = self.load_inpainter()?;
        mkdir(out)?;
        let mut results = Vec::with_capacity(images.len());
        for path in images {
            let img = imageio::read_gray16(path)?;
            let r = model.attribute(&inp, &img)?;
            let stem = path
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            imageio::write_gray16(&out.join(format!("{stem}_soft.png")), r.soft().grid())?;
            imageio::write_mask(&out.join(format!("{stem}_mask.png")), r.binary())?;
            imageio::write_overlay(&out.join(format!("{stem}_overlay.png")), &img, r.soft().grid(), 0.5)?;
            write_toml(
                &out.join(format!("{stem}.toml")),
                &SidecarOut {
                    source: path.display().to_string(),
                    threshold: model.arch.threshold,
                    theta: model.constraint.theta,
                    delta: model.constraint.delta,
                    note: r.below_threshold.then_some(BELOW_THRESHOLD_NOTE),
                    result: &r,
                },
            )?;
            if r.below_threshold {
                info!("{}: {BELOW_THRESHOLD_NOTE}", path.display());
            }
            results.push(r);
        }
        Ok(results)
    }
}

fn test_auc(scorer: &ScorerModel, test: &[LabeledImage]) -> Result<f64> {
    let grids: Vec<&Grid> = test.iter().map(|s| &s.pixels).collect();
    let labels: Vec<bool> = test.iter().map(|s| s.label.is_pathological()).collect();
    roc_auc(&scorer.scores(&grids)?, &labels)
}

fn summarize(results: &[AttributionResult], model: &AttributorModel) -> AttributionSummary {
    let n = results.len().max(1) as f64;
    let frac = |f: &dyn Fn(&AttributionResult) -> bool| results.iter().filter(|r| f(r)).count() as f64 / n;
    AttributionSummary {
        images: results.len(),
        satisfaction: frac(&|r| r.constraint_satisfied()),
        area_ok: frac(&|r| r.area_ok),
        score_ok: frac(&|r| r.score_ok),
        mean_area: results.iter().map(|r| r.area as f64).sum::<f64>() / n,
        delta: model.constraint.delta,
        theta: model.constraint.theta,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::persistence(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::persistence(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Perturbation report without the curves (those go to `roc.csv`).
#[derive(Serialize)]
struct PerturbationSummary {
    baseline_auc: f64,
    healthy_auc: f64,
    pathological_auc: f64,
    drop_mean: f64,
    drop_std: f64,
    shift_mean: f64,
    shift_max: f64,
    healthy_runs: Vec<f64>,
    pathological_runs: Vec<f64>,
}

impl From<&PerturbationReport> for PerturbationSummary {
    fn from(r: &PerturbationReport) -> Self {
        use crate::eval::experiments::Variant;
        let runs = |v: Variant| r.runs.iter().filter(|x| x.variant == v).map(|x| x.auc).collect();
        PerturbationSummary {
            baseline_auc: r.baseline_auc,
            healthy_auc: r.healthy_auc,
            pathological_auc: r.pathological_auc,
            drop_mean: r.drop_mean,
            drop_std: r.drop_std,
            shift_mean: r.shift_mean,
            shift_max: r.shift_max,
            healthy_runs: runs(Variant::Healthy),
            pathological_runs: runs(Variant::Pathological),
        }
    }
}
