//! Small convolutional scorer `p(c|I)` with a four-level feature pyramid and
//! the two baseline explanations (gradient saliency, Grad-CAM).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::eval::metrics::{roc_auc, youden_threshold};
use crate::grid::{Grid, SoftMask};
use crate::nn::{apply_bn_updates, he_std, BatchNorm2d, Conv2d, Ctx, Linear, ParamStore};
use crate::optim::Optimizer;
use crate::synth::{DatasetManifest, Label, LabeledImage, Split};
use crate::tensor::Tensor;
use crate::{archive, par, Error, Result};

pub const ARCHIVE_KIND: &str = "scorer";
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerArch {
    pub height: usize,
    pub width: usize,
    pub widths: [usize; LEVELS],
}

impl ScorerArch {
    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("classifier input size must be a positive multiple of 16"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("classifier widths must be positive"));
        }
        Ok(())
    }

    /// `(channels, height, width)` of pyramid level `l` (0 = finest).
    pub fn level_shape(&self, l: usize) -> (usize, usize, usize) {
        (self.widths[l], self.height >> (l + 1), self.width >> (l + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub widths: [usize; LEVELS],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub bn_momentum: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    /// Control experiment: permute training labels.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: [16, 32, 64, 128],
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            patience: 6,
            bn_momentum: 0.1,
            augment: true,
            shuffle_labels: false,
            seed: 11,
        }
    }
}

/// Post-activation features of the four stages, each `[n, c, h, w]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerMeta {
    pub arch: ScorerArch,
    pub theta: f64,
    pub config_hash: String,
    pub epochs_trained: usize,
}

/// Graph outputs of one scorer pass.
pub struct ScorerPass<'g> {
    pub features: Vec<Var<'g>>,
    pub logit: Var<'g>,
}

#[derive(Debug)]
pub struct ScorerModel {
    pub arch: ScorerArch,
    /// `score > theta` classifies as pathological.
    pub theta: f64,
    pub config_hash: String,
    pub epochs_trained: usize,
    store: ParamStore,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    head: Linear,
    extractions: AtomicUsize,
}

impl Clone for ScorerModel {
    fn clone(&self) -> Self {
        ScorerModel {
            arch: self.arch.clone(),
            theta: self.theta,
            config_hash: self.config_hash.clone(),
            epochs_trained: self.epochs_trained,
            store: self.store.clone(),
            convs: self.convs.clone(),
            bns: self.bns.clone(),
            head: self.head.clone(),
            extractions: AtomicUsize::new(0),
        }
    }
}

const EVAL_CHUNK: usize = 32;

impl ScorerModel {
    /// He-normal convolutions, zero-initialized head (every image scores 0.5).
    pub fn new<R: Rng + ?Sized>(arch: ScorerArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 1;
        for (l, &c) in arch.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("enc{l}.conv"), cin, c, 3, 2, false, he_std(cin * 9), rng));
            bns.push(BatchNorm2d::new(&mut store, &format!("enc{l}.bn"), c));
            cin = c;
        }
        let head = Linear::new(&mut store, "head", cin, 1, 0.0, rng);
        Ok(ScorerModel {
            arch,
            theta: 0.5,
            config_hash: String::new(),
            epochs_trained: 0,
            store,
            convs,
            bns,
            head,
            extractions: AtomicUsize::new(0),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// SHA-256 of every parameter and buffer.
    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Images that have passed through the encoder since construction (or
    /// the last reset).
    pub fn feature_extractions(&self) -> usize {
        self.extractions.load(Ordering::SeqCst)
    }

    pub fn reset_feature_extractions(&self) {
        self.extractions.store(0, Ordering::SeqCst);
    }

    fn check_input(&self, image: &Grid) -> Result<()> {
        image.ensure_dims(self.arch.height, self.arch.width)
    }

    /// Records the encoder and head on `ctx`. `x` is `[n, 1, H, W]`.
    pub fn pass<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>, train: bool) -> ScorerPass<'g> {
        self.extractions.fetch_add(x.shape()[0], Ordering::SeqCst);
        let mut h = x;
        let mut features = Vec::with_capacity(LEVELS);
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = bn.forward(ctx, conv.forward(ctx, h), train).silu();
            features.push(h);
        }
        let logit = self.head_graph(ctx, h);
        ScorerPass { features, logit }
    }

    /// Global pooling and affine head on the deepest features; `[n, 1]` logits.
    pub fn head_graph<'g>(&self, ctx: &Ctx<'g, '_>, deepest: Var<'g>) -> Var<'g> {
        self.head.forward(ctx, deepest.global_avg_pool())
    }

    /// Evaluation-mode logits for a `[n, 1, H, W]` batch.
    pub fn logits_tensor(&self, x: &Tensor) -> Vec<f64> {
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let out = self.pass(&ctx, g.constant(x.clone()), false);
        out.logit.value().data().to_vec()
    }

    pub fn score(&self, image: &Grid) -> Result<f64> {
        self.check_input(image)?;
        Ok(sigmoid(self.logits_tensor(&image.to_tensor())[0]))
    }

    /// Logits of many images, evaluated in parallel chunks.
    pub fn logits(&self, images: &[&Grid]) -> Result<Vec<f64>> {
        for im in images {
            self.check_input(im)?;
        }
        let chunks: Vec<&[&Grid]> = images.chunks(EVAL_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| self.logits_tensor(&Grid::batch(c)));
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn scores(&self, images: &[&Grid]) -> Result<Vec<f64>> {
        Ok(self.logits(images)?.into_iter().map(sigmoid).collect())
    }

    pub fn features(&self, image: &Grid) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let out = self.pass(&ctx, g.constant(image.to_tensor()), false);
        Ok(FeaturePyramid {
            levels: out.features.iter().map(|v| (*v.value()).clone()).collect(),
        })
    }

    /// Probability from a deepest-level feature tensor `[n, c, h, w]`.
    pub fn head(&self, deepest: &Tensor) -> Vec<f64> {
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let z = self.head_graph(&ctx, g.constant(deepest.clone()));
        z.value().data().iter().map(|&v| sigmoid(v)).collect()
    }

    /// Raw `∂ score / ∂ pixel`.
    pub fn input_gradient(&self, image: &Grid) -> Result<Grid> {
        self.check_input(image)?;
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let x = g.param(image.to_tensor());
        let s = self.pass(&ctx, x, false).logit.sigmoid().sum();
        let grads = g.backward(s);
        Ok(Grid::from_tensor(&grads.wrt(x), 0, 0))
    }

    /// Gradient saliency: `|∂ score / ∂ pixel|`, max-normalized.
    pub fn saliency(&self, image: &Grid) -> Result<SoftMask> {
        Ok(SoftMask::max_normalized(self.input_gradient(image)?.map(f64::abs)))
    }

    /// Grad-CAM on the deepest feature level, upsampled bilinearly.
    pub fn cam(&self, image: &Grid) -> Result<SoftMask> {
        let pyramid = self.features(image)?;
        let deepest = pyramid.levels[LEVELS - 1].clone();
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let a = g.param(deepest.clone());
        let z = self.head_graph(&ctx, a).sum();
        let grads = g.backward(z).wrt(a);
        let (_, c, h, w) = deepest.dims4();
        let weights: Vec<f64> = (0..c)
            .map(|k| grads.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let map = Grid::from_fn(h, w, |r, col| {
            let v: f64 = (0..c).map(|k| weights[k] * deepest.data()[k * h * w + r * w + col]).sum();
            v.max(0.0)
        });
        Ok(SoftMask::max_normalized(map.resize_bilinear(self.arch.height, self.arch.width)))
    }

    pub fn meta(&self) -> ScorerMeta {
        ScorerMeta {
            arch: self.arch.clone(),
            theta: self.theta,
            config_hash: self.config_hash.clone(),
            epochs_trained: self.epochs_trained,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::save(dir, ARCHIVE_KIND, &self.meta(), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors): (ScorerMeta, _) = archive::load(dir, ARCHIVE_KIND)?;
        let mut m = ScorerModel::new(meta.arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        m.store.load_from(tensors)?;
        m.theta = meta.theta;
        m.config_hash = meta.config_hash;
        m.epochs_trained = meta.epochs_trained;
        Ok(m)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    crate::autograd::sigmoid(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub epochs: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub theta: f64,
}

fn flip(g: &Grid, horizontal: bool, vertical: bool) -> Grid {
    let (h, w) = g.dims();
    Grid::from_fn(h, w, |r, c| {
        let rr = if vertical { h - 1 - r } else { r };
        let cc = if horizontal { w - 1 - c } else { c };
        g.get(rr, cc)
    })
}

/// Mean binary cross-entropy from logits.
fn bce(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| crate::autograd::softplus(z) - y * z)
        .sum::<f64>()
        / logits.len() as f64
}

pub(crate) fn both_classes(images: &[LabeledImage], what: &str) -> Result<()> {
    let pos = images.iter().filter(|i| i.label.is_pathological()).count();
    if pos == 0 || pos == images.len() {
        return Err(Error::config(format!("{what} needs both classes")));
    }
    Ok(())
}

/// Adam on mean BCE with early stopping on validation loss; θ by Youden's J
/// on validation scores.
pub fn train_classifier(manifest: &DatasetManifest, cfg: &ClassifierConfig) -> Result<(ScorerModel, ClassifierLog)> {
    let train = manifest.load_split(Split::Train, None)?;
    let val = manifest.load_split(Split::Val, None)?;
    both_classes(&train, "classifier training split")?;
    both_classes(&val, "classifier validation split")?;
    let arch = ScorerArch {
        height: manifest.config.height,
        width: manifest.config.width,
        widths: cfg.widths,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ScorerModel::new(arch, &mut rng)?;
    let mut labels: Vec<f64> = train.iter().map(|s| s.label.as_f64()).collect();
    if cfg.shuffle_labels {
        labels.shuffle(&mut rng);
    }
    let val_grids: Vec<&Grid> = val.iter().map(|s| &s.pixels).collect();
    let val_bool: Vec<bool> = val.iter().map(|s| s.label == Label::Pathological).collect();
    let val_y: Vec<f64> = val.iter().map(|s| s.label.as_f64()).collect();

    let mut opt = Optimizer::adam().with_weight_decay(cfg.weight_decay);
    let mut log = ClassifierLog::default();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let grids: Vec<Grid> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        flip(&train[i].pixels, rng.random(), rng.random())
                    } else {
                        train[i].pixels.clone()
                    }
                })
                .collect();
            let refs: Vec<&Grid> = grids.iter().collect();
            let y = Tensor::new(vec![batch.len(), 1], batch.iter().map(|&i| labels[i]).collect());
            let g = Graph::new();
            let ctx = Ctx::trainable(&g, &model.store);
            let z = model.pass(&ctx, g.constant(Grid::batch(&refs)), true).logit;
            let loss = z.softplus().sub(z.mul(g.constant(y))).mean();
            loss_sum += loss.value().item() * batch.len() as f64;
            let grads = ctx.param_grads(&g.backward(loss));
            let updates = ctx.take_bn_updates();
            drop(ctx);
            opt.step(&mut model.store, &grads, cfg.learning_rate);
            apply_bn_updates(&mut model.store, updates, cfg.bn_momentum);
        }
        model.reset_feature_extractions();
        let val_logits = model.logits(&val_grids)?;
        let val_loss = bce(&val_logits, &val_y);
        let val_auc = roc_auc(&val_logits, &val_bool)?;
        let rec = ClassifierEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_auc,
        };
        info!(
            "classifier epoch {epoch}: train {:.4} val {:.4} auc {:.4}",
            rec.train_loss, val_loss, val_auc
        );
        log.epochs.push(rec);
        let improved = best.as_ref().is_none_or(|(l, _, _)| val_loss < *l);
        if improved {
            best = Some((val_loss, model.store.clone(), epoch));
        } else if epoch - best.as_ref().map_or(0, |b| b.2) >= cfg.patience {
            break;
        }
    }
    if let Some((_, store, epoch)) = best {
        model.store = store;
        model.epochs_trained = epoch + 1;
        log.best_epoch = epoch;
    }
    let val_scores = model.scores(&val_grids)?;
    model.theta = youden_threshold(&val_scores, &val_bool)?;
    model.reset_feature_extractions();
    log.theta = model.theta;
    Ok((model, log))
}
