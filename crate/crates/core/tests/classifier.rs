mod common;

use cfa_core::classifier::{train_classifier, ClassifierConfig, ScorerArch, ScorerModel};
use cfa_core::eval::roc_auc;
use cfa_core::grid::Grid;
use cfa_core::synth::{generate_dataset, Split, SynthConfig};
use common::{random_image, random_scorer, rng};
use rand::Rng;

fn zero_head_scorer(size: usize) -> ScorerModel {
    ScorerModel::new(
        ScorerArch {
            height: size,
            width: size,
            widths: [4, 6, 8, 8],
        },
        &mut rng(1),
    )
    .unwrap()
}

#[test]
fn zero_head_scores_one_half() {
    let s = zero_head_scorer(16);
    for seed in 0..5 {
        assert_eq!(s.score(&random_image(16, seed)).unwrap(), 0.5);
    }
    let sal = s.saliency(&random_image(16, 9)).unwrap();
    assert!(sal.grid().data().iter().all(|&v| v == 0.0));
}

#[test]
fn pyramid_shapes_and_head_consistency() {
    let s = random_scorer(64, 2);
    let img = random_image(64, 3);
    let p = s.features(&img).unwrap();
    let sizes: Vec<(usize, usize)> = p.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
    assert_eq!(sizes, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
    let via_head = s.head(&p.levels[3])[0];
    assert_eq!(via_head, s.score(&img).unwrap());
    assert_eq!(s.score(&img).unwrap(), s.score(&img).unwrap());
    let zero = s.features(&Grid::filled(64, 64, 0.0)).unwrap();
    assert!(zero.levels.iter().all(|t| t.max_abs() == 0.0));
    assert!(s.score(&random_image(32, 3)).is_err());
}

#[test]
fn saliency_matches_finite_differences() {
    let s = random_scorer(16, 4);
    let img = random_image(16, 5);
    let grad = s.input_gradient(&img).unwrap();
    let mut r = rng(6);
    let h = 1e-3;
    for _ in 0..20 {
        let (i, j) = (r.random_range(0..16), r.random_range(0..16));
        let at = |d: f64| {
            let mut g = img.clone();
            g.set(i, j, g.get(i, j) + d);
            s.score(&g).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an = grad.get(i, j);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
        assert!(rel < 1e-3, "({i},{j}) {fd} vs {an}");
    }
    let sal = s.saliency(&img).unwrap();
    assert!(sal.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((sal.grid().max() - 1.0).abs() < 1e-15);
}

#[test]
fn cam_shape_and_range() {
    let s = random_scorer(32, 7);
    let cam = s.cam(&random_image(32, 8)).unwrap();
    assert_eq!(cam.grid().dims(), (32, 32));
    assert!(cam.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn feature_counter_counts_images() {
    let s = random_scorer(16, 10);
    let imgs: Vec<Grid> = (0..5).map(|i| random_image(16, i)).collect();
    let refs: Vec<&Grid> = imgs.iter().collect();
    s.reset_feature_extractions();
    s.scores(&refs).unwrap();
    assert_eq!(s.feature_extractions(), 5);
}

fn tiny_data(dir: &std::path::Path) -> cfa_core::synth::DatasetManifest {
    let cfg = SynthConfig {
        height: 32,
        width: 32,
        n_healthy: 100,
        n_pathological: 100,
        lesion_radius: [3, 4],
        split: [0.5, 0.1, 0.4],
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap()
}

fn small_cfg() -> ClassifierConfig {
    ClassifierConfig {
        widths: [8, 16, 16, 16],
        epochs: 4,
        batch_size: 16,
        ..ClassifierConfig::default()
    }
}

fn test_auc(m: &cfa_core::synth::DatasetManifest, s: &ScorerModel) -> f64 {
    let test = m.load_split(Split::Test, None).unwrap();
    let grids: Vec<&Grid> = test.iter().map(|x| &x.pixels).collect();
    let labels: Vec<bool> = test.iter().map(|x| x.label.is_pathological()).collect();
    roc_auc(&s.scores(&grids).unwrap(), &labels).unwrap()
}

#[test]
fn training_controls() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_data(dir.path());

    let (untrained, log) = train_classifier(&m, &ClassifierConfig { epochs: 0, ..small_cfg() }).unwrap();
    assert!(log.epochs.is_empty());
    assert!((test_auc(&m, &untrained) - 0.5).abs() <= 0.1);

    let (a, la) = train_classifier(&m, &small_cfg()).unwrap();
    let (b, _) = train_classifier(&m, &small_cfg()).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    assert!(la.theta > 0.0 && la.theta < 1.0);
    assert_eq!(test_auc(&m, &a), test_auc(&m, &b));

    let (shuffled, _) = train_classifier(
        &m,
        &ClassifierConfig {
            shuffle_labels: true,
            ..small_cfg()
        },
    )
    .unwrap();
    assert!(test_auc(&m, &shuffled) <= 0.6);

    let archive = tempfile::tempdir().unwrap();
    a.save(archive.path()).unwrap();
    let back = ScorerModel::load(archive.path()).unwrap();
    assert_eq!(back.param_hash(), a.param_hash());
    assert_eq!(back.theta, a.theta);
}
