//! Acceptance run: A1–A8 at their stated tolerances, one line per criterion.
//!
//! The pipeline stages run under `$CFA_ACCEPTANCE_DIR` (default
//! `target/acceptance`) with `configs/acceptance.toml`; artifacts whose
//! config hash matches are reused. The process exits non-zero on a failed
//! criterion only when `CFA_ACCEPTANCE_STRICT=1`; otherwise the lines are
//! the result.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cfa_core::attributor::{attribution_loss, attribution_loss_grad, AttributorModel};
use cfa_core::config::{RunConfig, Stage};
use cfa_core::eval::report::read_records_csv;
use cfa_core::eval::{build_comparison_report, Method};
use cfa_core::grid::{Grid, SoftMask};
use cfa_core::inpainter::{InpainterArch, InpainterConfig, InpainterModel, PartialConv};
use cfa_core::nn::ParamStore;
use cfa_core::pipeline::{EvaluationSummary, Pipeline};
use cfa_core::synth::Split;
use cfa_core::Tensor;
use common::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        id,
        pass,
        detail: detail.into(),
    }
}

fn failed(id: &'static str, e: impl std::fmt::Display) -> Line {
    line(id, false, format!("error: {e}"))
}

/// Direct partial convolution (zero padding valid), one sample.
fn brute_pconv(layer: &PartialConv, store: &ParamStore, x: &[f64], mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = &layer.conv;
    let (k, s, p, cin) = (c.kernel, c.stride, c.pad, c.in_channels);
    let wt = store.get(c.weight).data();
    let b = store.get(c.bias.unwrap()).data();
    let (ho, wo) = layer.out_size(h, w);
    let mut out = vec![0.0; c.out_channels * ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let at = |ky: usize, kx: usize| {
                let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                (iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize).then(|| iy as usize * w + ix as usize)
            };
            let mut valid = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    valid += at(ky, kx).map_or(1.0, |i| mask[i]);
                }
            }
            if valid == 0.0 {
                continue;
            }
            let ratio = (k * k) as f64 / valid;
            for o in 0..c.out_channels {
                let mut acc = 0.0;
                for ch in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some(i) = at(ky, kx) {
                                acc += wt[((o * cin + ch) * k + ky) * k + kx] * x[ch * h * w + i] * mask[i];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc * ratio + b[o];
            }
        }
    }
    out
}

fn a1() -> Line {
    let d = InpainterConfig::default();
    let model = InpainterModel::new(
        InpainterArch {
            height: 64,
            width: 64,
            depths: d.depths,
            kernels: d.kernels,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .expect("default inpainter");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for layer in model.layers() {
        let (h, w) = (16, 16);
        let x = Tensor::randn(vec![1, layer.conv.in_channels, h, w], 1.0, &mut rng);
        let (y, m) = layer.apply(model.store(), &x, &Tensor::ones(vec![1, 1, h, w]));
        let want = brute_pconv(layer, model.store(), x.data(), &vec![1.0; h * w], h, w);
        let d = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        if m.data().iter().any(|&v| v != 1.0) {
            return line("A1", false, "all-ones mask did not stay all ones");
        }
    }
    // 3x3 ones kernel, 5x5 ones input with the center 3x3 missing: exact
    let mut store = ParamStore::new();
    let layer = PartialConv::new(&mut store, "p", 1, 1, 3, 1, &mut rng);
    store.set(layer.conv.weight, Tensor::ones(vec![1, 1, 3, 3]));
    store.set(layer.conv.bias.unwrap(), Tensor::zeros(vec![1]));
    let mask: Vec<f64> = (0..25)
        .map(|i| if (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)) { 0.0 } else { 1.0 })
        .collect();
    let (y, _) = layer.apply(&store, &Tensor::ones(vec![1, 1, 5, 5]), &Tensor::new(vec![1, 1, 5, 5], mask.clone()));
    let exact = y.data() == &brute_pconv(&layer, &store, &[1.0; 25], &mask, 5, 5)[..];
    line(
        "A1",
        worst < 1e-5 && exact,
        format!("max |pconv - conv| = {worst:.2e} over {} layers; 5x5 oracle exact: {exact}", model.layers().len()),
    )
}

fn a7() -> Line {
    let checks: [(&str, fn(usize, u64) -> Result<(), String>); 6] = [
        ("hausdorff", oracles::check_hausdorff),
        ("weak_localization", oracles::check_weak_localization),
        ("percentile_threshold", oracles::check_percentile_threshold),
        ("components", oracles::check_components),
        ("roc_auc", oracles::check_roc_auc),
        ("wilcoxon", oracles::check_wilcoxon),
    ];
    let mut bad = Vec::new();
    for (i, (name, f)) in checks.iter().enumerate() {
        if let Err(e) = f(1000, 700 + i as u64) {
            bad.push(format!("{name}: {e}"));
        }
    }
    if bad.is_empty() {
        line("A7", true, "6 metrics match brute-force oracles on 1000 random 8x8 instances; n=6 p = 0.03125")
    } else {
        line("A7", false, bad.join("; "))
    }
}

fn a2(pipe: &Pipeline) -> Line {
    let run = || -> cfa_core::Result<Line> {
        let model: AttributorModel = pipe.load_attributor()?;
        let inp = pipe.load_inpainter()?;
        let m = pipe.manifest()?;
        let test = m.load_split(Split::Test, Some(cfa_core::synth::Label::Pathological))?;
        let cfg = &model.constraint;
        let (h, t) = (1e-3, cfg.mask_threshold);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (k, s) in test.iter().take(4).enumerate() {
            // the trained map, and a random mask that exercises every regime
            let soft = if k % 2 == 0 {
                model.forward(&s.pixels)?
            } else {
                SoftMask(Grid::from_fn(64, 64, |_, _| rng.random_range(0.0..1.0)))
            };
            let rho = 64.0;
            let (_, grad) = attribution_loss_grad(&s.pixels, &soft, &model.scorer, &inp, cfg, rho)?;
            let mut n = 0;
            while n < 25 {
                let (i, j) = (rng.random_range(0..64), rng.random_range(0..64));
                let v = soft.grid().get(i, j);
                if (v - t).abs() <= h {
                    continue;
                }
                let at = |d: f64| -> cfa_core::Result<f64> {
                    let mut g = soft.grid().clone();
                    g.set(i, j, v + d);
                    Ok(attribution_loss(&s.pixels, &SoftMask(g), &model.scorer, &inp, cfg, rho)?.total)
                };
                let fd = (at(h)? - at(-h)?) / (2.0 * h);
                let an = grad.get(i, j);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                n += 1;
                checked += 1;
            }
        }
        Ok(line(
            "A2",
            worst < 1e-3,
            format!("max relative error {worst:.2e} at {checked} coordinates (step 1e-3)"),
        ))
    };
    run().unwrap_or_else(|e| failed("A2", e))
}

fn a3(s: &EvaluationSummary, minutes: f64) -> Line {
    let p = &s.perturbation;
    let drop = p.baseline_auc - p.pathological_auc;
    let shift = (p.baseline_auc - p.healthy_auc).abs();
    line(
        "A3",
        s.classifier_auc >= 0.95 && drop >= 0.10 && shift <= 0.02,
        format!(
            "test AUC {:.4} (>= 0.95); lesion inpainting drop {drop:.4} (>= 0.10); healthy inpainting shift {shift:.4} \
             (<= 0.02, per-run mean |shift| {:.4}); classifier + experiment {minutes:.1} min",
            s.classifier_auc, p.shift_mean
        ),
    )
}

fn a4(s: &EvaluationSummary, percentiles: &[u32]) -> Line {
    let r = &s.report;
    let sat = s.attribution.satisfaction;
    let ours = r.cell(Method::Ours, percentiles[0]);
    let l = ours.map_or(f64::NAN, |c| c.l);
    let mut ok = sat >= 0.8 && l >= 0.6;
    let mut parts = vec![format!("satisfaction {sat:.3} (>= 0.8)"), format!("L {l:.3} (>= 0.6)")];
    for &p in percentiles {
        let (o, sal, w) = (r.cell(Method::Ours, p), r.cell(Method::Saliency, p), r.wilcoxon_for(Method::Saliency, p));
        match (o, sal, w) {
            (Some(o), Some(sal), Some(w)) => {
                let good = o.h_median < sal.h_median && w.p_hausdorff < 0.05;
                ok &= good;
                parts.push(format!(
                    "P{p} median H {:.2} vs {:.2} p={:.1e}",
                    o.h_median, sal.h_median, w.p_hausdorff
                ));
            }
            _ => {
                ok = false;
                parts.push(format!("P{p} missing"));
            }
        }
    }
    let a = (r.cell(Method::Ours, 50), r.cell(Method::Saliency, 50));
    if let (Some(o), Some(sal)) = a {
        ok &= o.a_mean < sal.a_mean;
        parts.push(format!("P50 A {:.4} vs {:.4}", o.a_mean, sal.a_mean));
    } else {
        ok = false;
    }
    line("A4", ok, parts.join("; "))
}

fn a5(s: &EvaluationSummary) -> Line {
    let rows = &s.randomization.rows;
    let worst_corr = rows.iter().map(|r| r.mean_abs_correlation).fold(0.0, f64::max);
    let at_chance = rows.iter().filter(|r| r.at_chance).count();
    line(
        "A5",
        s.randomization.pass && rows.len() >= 10,
        format!(
            "{at_chance}/{} draws at chance IOU; max |rank corr| {worst_corr:.3} (< 0.1); trained IOU {:.3} vs chance {:.3}",
            rows.len(),
            s.randomization.control.mean_iou,
            s.randomization.control.chance_mean
        ),
    )
}

fn a6(pipe: &Pipeline) -> Line {
    let run = || -> cfa_core::Result<Line> {
        let model = pipe.load_attributor()?;
        let inp = pipe.load_inpainter()?;
        let img = pipe.manifest()?.load_split(Split::Test, None)?.remove(0).pixels;
        model.scorer.reset_feature_extractions();
        model.forward(&img)?;
        let forward = model.scorer.feature_extractions();
        model.scorer.reset_feature_extractions();
        model.attribute(&inp, &img)?;
        let attribute = model.scorer.feature_extractions();
        let e = pipe.benchmark()?;
        let reps = e.repetitions.unwrap_or(0);
        let mps = e.maps_per_second.unwrap_or(f64::NAN);
        Ok(line(
            "A6",
            forward == 1 && attribute == 2 && reps >= 10 && mps.is_finite(),
            format!(
                "{forward} encoder pass per map (attribute adds {} for scoring the counterfactual); {mps:.1} maps/s over {reps} sweeps",
                attribute - forward
            ),
        ))
    };
    run().unwrap_or_else(|e| failed("A6", e))
}

fn a8(pipe: &Pipeline, s: &EvaluationSummary, percentiles: &[u32]) -> Line {
    let run = || -> cfa_core::Result<Line> {
        let r = &s.report;
        let rows_ok = r.percentiles == [50, 75, 90];
        let cells_ok = percentiles
            .iter()
            .all(|&p| Method::ALL.iter().all(|&m| r.cell(m, p).is_some()));
        let wil_ok = percentiles
            .iter()
            .all(|&p| r.wilcoxon_for(Method::Cam, p).is_some() && r.wilcoxon_for(Method::Saliency, p).is_some());
        let recs = read_records_csv(&pipe.eval_dir().join("records.csv"))?;
        let rebuilt = build_comparison_report(&recs, percentiles, r.roc.clone())?;
        let same = format!("{rebuilt:?}") == format!("{r:?}");
        Ok(line(
            "A8",
            rows_ok && cells_ok && wil_ok && same,
            format!("rows {:?}; all method cells {cells_ok}; Wilcoxon entries {wil_ok}; recomputed from records.csv identical: {same}", r.percentiles),
        ))
    };
    run().unwrap_or_else(|e| failed("A8", e))
}

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml")
}

fn run_dir() -> PathBuf {
    std::env::var_os("CFA_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn stages(pipe: &Pipeline) -> cfa_core::Result<f64> {
    let mut classifier_secs = 0.0;
    if !pipe.is_current(Stage::Synth) {
        eprintln!("acceptance: generating dataset");
        pipe.generate()?;
    }
    if !pipe.is_current(Stage::Classifier) {
        eprintln!("acceptance: training classifier");
        let t = Instant::now();
        pipe.train_classifier()?;
        classifier_secs = t.elapsed().as_secs_f64();
    }
    if !pipe.is_current(Stage::Inpainter) {
        eprintln!("acceptance: training inpainter");
        pipe.train_inpainter()?;
    }
    if !pipe.is_current(Stage::Attributor) {
        eprintln!("acceptance: training attributor");
        pipe.train_attributor()?;
    }
    Ok(classifier_secs)
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // nothing to list for libtest-style discovery
        return ExitCode::SUCCESS;
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut lines = vec![a1(), a7()];

    let cfg = RunConfig::load(&config_path()).expect("acceptance config");
    let percentiles = cfg.eval.percentiles.clone();
    let pipe = Pipeline::new(cfg, &run_dir(), false).expect("acceptance run directory");
    match stages(&pipe) {
        Err(e) => {
            for id in ["A2", "A3", "A4", "A5", "A6", "A8"] {
                lines.push(failed(id, &e));
            }
        }
        Ok(classifier_secs) => {
            lines.push(a2(&pipe));
            let t = Instant::now();
            match pipe.evaluate() {
                Ok(s) => {
                    let minutes = (classifier_secs + t.elapsed().as_secs_f64()) / 60.0;
                    lines.push(a3(&s, minutes));
                    lines.push(a4(&s, &percentiles));
                    lines.push(a5(&s));
                    lines.push(a6(&pipe));
                    lines.push(a8(&pipe, &s, &percentiles));
                }
                Err(e) => {
                    for id in ["A3", "A4", "A5", "A6", "A8"] {
                        lines.push(failed(id, &e));
                    }
                }
            }
        }
    }
    lines.sort_by_key(|l| l.id);
    let mut all = true;
    for l in &lines {
        all &= l.pass;
        println!("{} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let strict = std::env::var("CFA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria FAIL" });
    if all || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
