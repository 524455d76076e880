mod common;

use cfa_core::grid::{BinaryMask, Grid};
use cfa_core::inpainter::{
    generate_irregular_mask, pci_loss, IrregularMaskConfig, PartialConv, PixelFeatures, W_HOLE, W_PERC, W_STYLE,
    W_TV,
};
use cfa_core::nn::ParamStore;
use cfa_core::Tensor;
use common::{random_image, random_inpainter, random_scorer, rng};
use proptest::prelude::*;

/// Direct sliding-window partial convolution of one sample: `x` is
/// `[c, h, w]`, `mask` is `[h, w]` (shared by all channels).
fn oracle(layer: &PartialConv, store: &ParamStore, x: &[f64], mask: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let conv = &layer.conv;
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let (cin, cout) = (conv.in_channels, conv.out_channels);
    let wt = store.get(conv.weight).data();
    let b = store.get(conv.bias.unwrap()).data();
    let (ho, wo) = layer.out_size(h, w);
    let mut out = vec![0.0; cout * ho * wo];
    let mut new_mask = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            // padding counts as valid input with value 0
            let mut valid = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                    let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize;
                    valid += if inside { mask[iy as usize * w + ix as usize] } else { 1.0 };
                }
            }
            let valid = valid * cin as f64;
            if valid == 0.0 {
                continue;
            }
            new_mask[oy * wo + ox] = 1.0;
            let ratio = (k * k * cin) as f64 / valid;
            for o in 0..cout {
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                let i = iy as usize * w + ix as usize;
                                acc += wt[((o * cin + c) * k + ky) * k + kx] * x[c * h * w + i] * mask[i];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc * ratio + b[o];
            }
        }
    }
    (out, new_mask)
}

fn plain_conv(layer: &PartialConv, store: &ParamStore, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    oracle(layer, store, x, &vec![1.0; h * w], h, w).0
}

#[test]
fn all_ones_mask_reduces_to_convolution_in_every_layer() {
    let model = random_inpainter(16, 1);
    let mut r = rng(2);
    for layer in model.layers() {
        let c = layer.conv.in_channels;
        let (h, w) = (8, 8);
        let x = Tensor::randn(vec![1, c, h, w], 1.0, &mut r);
        let (y, m) = layer.apply(model.store(), &x, &Tensor::ones(vec![1, 1, h, w]));
        let want = plain_conv(layer, model.store(), x.data(), h, w);
        let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "max abs diff {diff}");
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}

fn ones_layer(stride: usize) -> (ParamStore, PartialConv) {
    let mut store = ParamStore::new();
    let layer = PartialConv::new(&mut store, "p", 1, 1, 3, stride, &mut rng(3));
    store.set(layer.conv.weight, Tensor::ones(vec![1, 1, 3, 3]));
    store.set(layer.conv.bias.unwrap(), Tensor::zeros(vec![1]));
    (store, layer)
}

#[test]
fn ones_kernel_with_masked_center_matches_oracle_exactly() {
    let (store, layer) = ones_layer(1);
    let x = vec![1.0; 25];
    let mask: Vec<f64> = (0..25).map(|i| if (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)) { 0.0 } else { 1.0 }).collect();
    let (y, m) = layer.apply(&store, &Tensor::new(vec![1, 1, 5, 5], x.clone()), &Tensor::new(vec![1, 1, 5, 5], mask.clone()));
    let (want, want_m) = oracle(&layer, &store, &x, &mask, 5, 5);
    assert_eq!(y.data(), &want[..]);
    assert_eq!(m.data(), &want_m[..]);
    // the center window covers only holes
    assert_eq!(want_m[12], 0.0);
    // corners see 5 padding + 3 valid of 9 → 3 * 9/8
    assert_eq!(want[0], 3.0 * 9.0 / 8.0);
}

#[test]
fn all_zero_mask_gives_zero_output() {
    let (store, layer) = ones_layer(1);
    let mut store = store;
    store.set(layer.conv.bias.unwrap(), Tensor::full(vec![1], 0.7));
    // border windows still see valid padding; fully masked windows must be zero
    let x = Tensor::randn(vec![1, 1, 5, 5], 1.0, &mut rng(4));
    let zeros = Tensor::zeros(vec![1, 1, 5, 5]);
    let (y, m) = layer.apply(&store, &x, &zeros);
    let (want, want_m) = oracle(&layer, &store, x.data(), zeros.data(), 5, 5);
    assert_eq!(m.data(), &want_m[..]);
    for ((a, b), mv) in y.data().iter().zip(&want).zip(&want_m) {
        assert!((a - b).abs() < 1e-12);
        if *mv == 0.0 {
            assert_eq!(*a, 0.0);
        }
    }
    assert_eq!(want_m[12], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partial_conv_matches_brute_force(
        seed in 0u64..10_000,
        holes in prop::collection::vec(any::<bool>(), 25),
        stride in 1usize..=2,
    ) {
        let mut store = ParamStore::new();
        let layer = PartialConv::new(&mut store, "p", 2, 3, 3, stride, &mut rng(seed));
        let x = Tensor::randn(vec![1, 2, 5, 5], 1.0, &mut rng(seed + 1));
        let mask: Vec<f64> = holes.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect();
        let (y, m) = layer.apply(&store, &x, &Tensor::new(vec![1, 1, 5, 5], mask.clone()));
        let (want, want_m) = oracle(&layer, &store, x.data(), &mask, 5, 5);
        prop_assert_eq!(m.data(), &want_m[..]);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn valid_region_never_shrinks(holes in prop::collection::vec(prop::bool::weighted(0.3), 256)) {
        // once a position is valid at the input of a stride-1 layer its output stays valid
        let (store, layer) = ones_layer(1);
        let mask: Vec<f64> = holes.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect();
        let (_, m) = layer.apply(&store, &Tensor::zeros(vec![1, 1, 16, 16]), &Tensor::new(vec![1, 1, 16, 16], mask.clone()));
        for (a, b) in mask.iter().zip(m.data()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn inpaint_is_identity_outside_hole(seed in 0u64..1000) {
        let model = random_inpainter(16, 5);
        let img = random_image(16, seed);
        let hole = generate_irregular_mask(seed, &IrregularMaskConfig::default(), 16, 16).unwrap();
        let out = model.inpaint(&img, &hole).unwrap().image;
        for i in 0..img.len() {
            if hole.data()[i] {
                prop_assert!((0.0..=1.0).contains(&out.data()[i]));
            } else {
                prop_assert_eq!(out.data()[i], img.data()[i]);
            }
        }
    }

    #[test]
    fn pci_total_is_weighted_sum(seed in 0u64..1000) {
        let scorer = random_scorer(16, 6);
        let (p, t) = (random_image(16, seed), random_image(16, seed + 7));
        let hole = generate_irregular_mask(seed, &IrregularMaskConfig::default(), 16, 16).unwrap();
        let b = pci_loss(&p, &t, &hole, scorer.as_ref()).unwrap();
        let sum = b.l_valid + W_HOLE * b.l_hole + W_PERC * b.l_perc + W_STYLE * b.l_style + W_TV * b.l_tv;
        prop_assert!((b.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn empty_hole_is_exact_identity() {
    let model = random_inpainter(16, 8);
    let img = random_image(16, 9);
    assert_eq!(model.inpaint(&img, &BinaryMask::empty(16, 16)).unwrap().image, img);
    assert!(model.inpaint(&img, &BinaryMask::empty(8, 8)).is_err());
}

#[test]
fn pci_of_identical_images_leaves_only_tv() {
    let img = random_image(8, 10);
    let hole = BinaryMask::from_fn(8, 8, |r, c| r < 3 && c < 4);
    let b = pci_loss(&img, &img, &hole, &PixelFeatures).unwrap();
    assert_eq!((b.l_valid, b.l_hole, b.l_perc, b.l_style), (0.0, 0.0, 0.0, 0.0));
    assert!(b.l_tv > 0.0);
    assert!((b.total - W_TV * b.l_tv).abs() < 1e-12);
}

#[test]
fn pci_with_empty_hole_is_plain_mae() {
    let (p, t) = (random_image(8, 11), random_image(8, 12));
    let b = pci_loss(&p, &t, &BinaryMask::empty(8, 8), &PixelFeatures).unwrap();
    let mae = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
    assert_eq!(b.l_hole, 0.0);
    assert!((b.l_valid - mae).abs() < 1e-15);
}

#[test]
fn pci_toy_case() {
    // 2x2 grids, hole at (1, 1); values worked out by hand with the pixels as features
    let p = Grid::new(2, 2, vec![0.5, 0.2, 0.1, 0.9]);
    let t = Grid::new(2, 2, vec![0.4, 0.2, 0.3, 0.6]);
    let hole = BinaryMask::from_fn(2, 2, |r, c| r == 1 && c == 1);
    let b = pci_loss(&p, &t, &hole, &PixelFeatures).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(b.l_valid, 0.1), "{b:?}");
    assert!(close(b.l_hole, 0.3));
    assert!(close(b.l_perc, 0.225));
    assert!(close(b.l_style, 0.2275));
    assert!(close(b.l_tv, 0.4));
    assert!(close(b.total, 29.25125));
}

#[test]
fn irregular_masks_are_deterministic_and_in_range() {
    let cfg = IrregularMaskConfig {
        fraction: [0.05, 0.25],
        ..IrregularMaskConfig::default()
    };
    for seed in 0..50 {
        let a = generate_irregular_mask(seed, &cfg, 64, 64).unwrap();
        assert_eq!(a, generate_irregular_mask(seed, &cfg, 64, 64).unwrap());
        assert!((0.05..=0.25).contains(&a.fraction()));
    }
    let degenerate = IrregularMaskConfig {
        strokes: [0, 0],
        blobs: [0, 0],
        max_tries: 5,
        ..IrregularMaskConfig::default()
    };
    assert!(generate_irregular_mask(1, &degenerate, 32, 32).is_err());
}

#[test]
fn archive_round_trip() {
    let model = random_inpainter(16, 13);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = cfa_core::inpainter::InpainterModel::load(dir.path()).unwrap();
    assert_eq!(back.param_hash(), model.param_hash());
    let img = random_image(16, 14);
    let hole = BinaryMask::from_fn(16, 16, |r, _| r > 10);
    assert_eq!(model.inpaint(&img, &hole).unwrap().image, back.inpaint(&img, &hole).unwrap().image);
}
