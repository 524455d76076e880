#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use cfa_core::classifier::{ScorerArch, ScorerModel};
use cfa_core::grid::Grid;
use cfa_core::inpainter::{InpainterArch, InpainterModel};
use cfa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Untrained scorer with a random (non-zero) head so scores depend on the input.
pub fn random_scorer(size: usize, seed: u64) -> Arc<ScorerModel> {
    let mut r = rng(seed);
    let mut s = ScorerModel::new(
        ScorerArch {
            height: size,
            width: size,
            widths: [4, 6, 8, 8],
        },
        &mut r,
    )
    .unwrap();
    let id = s.store().find("head.weight").unwrap();
    let shape = s.store().get(id).shape().to_vec();
    s.store_mut().set(id, Tensor::randn(shape, 1.0, &mut r));
    Arc::new(s)
}

pub fn random_inpainter(size: usize, seed: u64) -> InpainterModel {
    InpainterModel::new(
        InpainterArch {
            height: size,
            width: size,
            depths: vec![4, 8],
            kernels: vec![3, 3],
        },
        &mut rng(seed),
    )
    .unwrap()
}

pub fn random_image(size: usize, seed: u64) -> Grid {
    let mut r = rng(seed);
    Grid::from_fn(size, size, |_, _| r.random_range(0.0..1.0))
}
