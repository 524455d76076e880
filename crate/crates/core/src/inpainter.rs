//! Partial-convolution U-Net used as the marginalization function.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::window_sum;
use crate::autograd::{Graph, Var};
use crate::classifier::ScorerModel;
use crate::grid::{BinaryMask, Grid};
use crate::nn::{apply_bn_updates, he_std, BatchNorm2d, Conv2d, Ctx, ParamStore};
use crate::optim::Optimizer;
use crate::synth::{splitmix64, DatasetManifest, Label, Split};
use crate::tensor::Tensor;
use crate::{archive, par, Error, Result};

pub const ARCHIVE_KIND: &str = "inpainter";

/// Partial convolution: a convolution renormalized over valid inputs, with
/// the mask-update rule `mask' = [ΣM > 0]`.
///
/// Zero padding counts as valid input, so an all-ones mask reproduces the
/// plain convolution everywhere, borders included.
#[derive(Clone, Debug)]
pub struct PartialConv {
    pub conv: Conv2d,
}

impl PartialConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = he_std(in_channels * kernel * kernel);
        PartialConv {
            conv: Conv2d::new(store, name, in_channels, out_channels, kernel, stride, true, std, rng),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.conv.kernel;
        let (s, p) = (self.conv.stride, self.conv.pad);
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    /// `ΣM` per output position and sample, `[n, 1, ho, wo]`, for channel
    /// groups that each share one `[n, 1, h, w]` validity mask.
    pub fn valid_count(&self, masks: &[(usize, &Tensor)]) -> Tensor {
        let (n, _, h, w) = masks[0].1.dims4();
        let (ho, wo) = self.out_size(h, w);
        let k = self.conv.kernel;
        let total_c: usize = masks.iter().map(|(c, _)| c).sum();
        let mut out = vec![(k * k * total_c) as f64; n * ho * wo];
        for &(c, m) in masks {
            for s in 0..n {
                let hole: Vec<f64> = m.data()[s * h * w..(s + 1) * h * w].iter().map(|v| 1.0 - v).collect();
                let holes = window_sum(&hole, h, w, k, self.conv.stride, self.conv.pad);
                for (o, hc) in out[s * ho * wo..(s + 1) * ho * wo].iter_mut().zip(holes) {
                    *o -= c as f64 * hc;
                }
            }
        }
        Tensor::new(vec![n, 1, ho, wo], out)
    }

    /// Applies the layer to channel groups `(features, mask)`; returns the
    /// output and the updated mask.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, groups: &[(Var<'g>, &Tensor)]) -> (Var<'g>, Tensor) {
        let g = ctx.graph();
        let total_c: usize = groups.iter().map(|(v, _)| v.shape()[1]).sum();
        assert_eq!(total_c, self.conv.in_channels, "partial conv channel mismatch");
        let masked: Vec<Var<'g>> = groups
            .iter()
            .map(|(v, m)| v.mul_channel(g.constant((*m).clone())))
            .collect();
        let x = if masked.len() == 1 { masked[0] } else { Var::concat(&masked) };
        let counts = self.valid_count(&groups.iter().map(|(v, m)| (v.shape()[1], *m)).collect::<Vec<_>>());
        let k = self.conv.kernel;
        let full = (k * k * total_c) as f64;
        let ratio = counts.map(|s| if s > 0.5 { full / s } else { 0.0 });
        let new_mask = counts.map(|s| if s > 0.5 { 1.0 } else { 0.0 });
        let y = x
            .conv2d(ctx.p(self.conv.weight), self.conv.stride, self.conv.pad)
            .mul_channel(g.constant(ratio))
            .add_bias(ctx.p(self.conv.bias.expect("partial conv has a bias")))
            .mul_channel(g.constant(new_mask.clone()));
        (y, new_mask)
    }

    /// Convenience evaluation on plain tensors: `x` is `[n, c, h, w]`, `mask`
    /// is `[n, 1, h, w]`.
    pub fn apply(&self, store: &ParamStore, x: &Tensor, mask: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, store);
        let (y, m) = self.forward(&ctx, &[(g.constant(x.clone()), mask)]);
        ((*y.value()).clone(), m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Identity,
}

#[derive(Clone, Debug)]
struct Block {
    pconv: PartialConv,
    bn: Option<BatchNorm2d>,
    act: Activation,
}

/// Batch-norm behaviour of one inpainter pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Batch statistics everywhere.
    Phase1,
    /// Frozen running statistics in the contraction path only.
    Phase2,
    Eval,
}

impl Block {
    fn forward<'g>(&self, ctx: &Ctx<'g, '_>, groups: &[(Var<'g>, &Tensor)], batch_stats: bool) -> (Var<'g>, Tensor) {
        let (mut y, m) = self.pconv.forward(ctx, groups);
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, y, batch_stats);
        }
        y = match self.act {
            Activation::Relu => y.relu(),
            Activation::LeakyRelu => y.leaky_relu(0.2),
            Activation::Identity => y,
        };
        (y, m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpainterArch {
    pub height: usize,
    pub width: usize,
    pub depths: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl InpainterArch {
    pub fn validate(&self) -> Result<()> {
        let n = self.depths.len();
        if n == 0 || self.kernels.len() != n {
            return Err(Error::config("inpainter depths and kernels must be nonempty and equally long"));
        }
        let f = 1usize << n;
        if self.height % f != 0 || self.width % f != 0 || self.height / f < 1 {
            return Err(Error::config(format!(
                "inpainter input must be a multiple of {f} for {n} stride-2 blocks"
            )));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) || self.depths.contains(&0) {
            return Err(Error::config("inpainter kernels must be odd and depths positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpainterMeta {
    pub arch: InpainterArch,
    /// Last completed training phase (0 = untrained).
    pub phase: u32,
    pub config_hash: String,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InpainterModel {
    pub arch: InpainterArch,
    pub phase: u32,
    pub config_hash: String,
    pub loss_history: Vec<f64>,
    store: ParamStore,
    enc: Vec<Block>,
    dec: Vec<Block>,
}

/// Nearest-neighbour ×2 upsampling of a mask tensor.
fn upsample_mask(m: &Tensor) -> Tensor {
    let (n, c, h, w) = m.dims4();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        for r in 0..2 * h {
            for col in 0..2 * w {
                out[(p * 2 * h + r) * 2 * w + col] = m.data()[(p * h + r / 2) * w + col / 2];
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

/// Result of [`InpainterModel::inpaint`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inpainted {
    pub image: Grid,
    /// The hole covered the whole image; the output is unconditioned.
    pub full_hole: bool,
}

const INPAINT_CHUNK: usize = 8;

impl InpainterModel {
    pub fn new<R: Rng + ?Sized>(arch: InpainterArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut enc = Vec::new();
        let mut cin = 1;
        for (i, (&d, &k)) in arch.depths.iter().zip(&arch.kernels).enumerate() {
            let name = format!("enc{i}");
            enc.push(Block {
                pconv: PartialConv::new(&mut store, &format!("{name}.pconv"), cin, d, k, 2, rng),
                bn: Some(BatchNorm2d::new(&mut store, &format!("{name}.bn"), d)),
                act: Activation::Relu,
            });
            cin = d;
        }
        // Decoder level i upsamples to the resolution of encoder output i-1
        // (or the input for i = 0) and merges that skip.
        let n = arch.depths.len();
        let mut dec = Vec::new();
        let mut below = arch.depths[n - 1];
        for i in (0..n).rev() {
            let (skip, out) = if i == 0 { (1, 1) } else { (arch.depths[i - 1], arch.depths[i - 1]) };
            let last = i == 0;
            let name = format!("dec{i}");
            dec.push(Block {
                pconv: PartialConv::new(&mut store, &format!("{name}.pconv"), below + skip, out, 3, 1, rng),
                bn: (!last).then(|| BatchNorm2d::new(&mut store, &format!("{name}.bn"), out)),
                act: if last {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu
                },
            });
            below = out;
        }
        Ok(InpainterModel {
            arch,
            phase: 0,
            config_hash: String::new(),
            loss_history: Vec::new(),
            store,
            enc,
            dec,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Every partial-conv layer in contraction-then-expansion order.
    pub fn layers(&self) -> Vec<&PartialConv> {
        self.enc.iter().chain(&self.dec).map(|b| &b.pconv).collect()
    }

    /// Raw network prediction for `image` `[n, 1, H, W]` with validity mask
    /// `valid` (1 = known pixel). Also returns the encoder masks.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, image: Var<'g>, valid: &Tensor, mode: RunMode) -> (Var<'g>, Vec<Tensor>) {
        let enc_stats = mode == RunMode::Phase1;
        let dec_stats = mode != RunMode::Eval;
        let mut skips: Vec<(Var<'g>, Tensor)> = vec![(image, valid.clone())];
        for b in &self.enc {
            let (x, m) = skips.last().unwrap();
            let out = b.forward(ctx, &[(*x, m)], enc_stats);
            skips.push(out);
        }
        let masks: Vec<Tensor> = skips.iter().map(|(_, m)| m.clone()).collect();
        let (mut x, mut m) = skips.pop().unwrap();
        for b in &self.dec {
            let (sx, sm) = skips.pop().unwrap();
            let up = x.upsample2x();
            let upm = upsample_mask(&m);
            let out = b.forward(ctx, &[(up, &upm), (sx, &sm)], dec_stats);
            x = out.0;
            m = out.1;
        }
        (x, masks)
    }

    /// Evaluation-mode raw prediction.
    pub fn predict(&self, images: &Tensor, valid: &Tensor) -> Tensor {
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let (y, _) = self.forward(&ctx, g.constant(images.clone()), valid, RunMode::Eval);
        (*y.value()).clone()
    }

    /// Valid pixels copied verbatim, hole pixels from the prediction clamped
    /// to `[0, 1]`.
    fn composite(image: &Grid, hole: &BinaryMask, prediction: &[f64]) -> Grid {
        let mut out = image.clone();
        for (i, (o, &h)) in out.data_mut().iter_mut().zip(hole.data()).enumerate() {
            if h {
                *o = prediction[i].clamp(0.0, 1.0);
            }
        }
        out
    }

    fn check(&self, image: &Grid, hole: &BinaryMask) -> Result<()> {
        image.ensure_dims(self.arch.height, self.arch.width)?;
        if hole.dims() != image.dims() {
            return Err(Error::contract("hole mask and image differ in size"));
        }
        Ok(())
    }

    pub fn inpaint(&self, image: &Grid, hole: &BinaryMask) -> Result<Inpainted> {
        Ok(Inpainted {
            image: self.inpaint_batch(&[image], &[hole])?.remove(0),
            full_hole: hole.area() == hole.data().len(),
        })
    }

    /// Composites for many `(image, hole)` pairs; empty holes skip the network.
    pub fn inpaint_batch(&self, images: &[&Grid], holes: &[&BinaryMask]) -> Result<Vec<Grid>> {
        if images.len() != holes.len() {
            return Err(Error::contract("images and holes differ in count"));
        }
        for (im, h) in images.iter().zip(holes) {
            self.check(im, h)?;
        }
        let todo: Vec<usize> = (0..images.len()).filter(|&i| !holes[i].is_empty()).collect();
        let chunks: Vec<&[usize]> = todo.chunks(INPAINT_CHUNK).collect();
        let preds = par::map_slice(&chunks, |idx| {
            let imgs: Vec<&Grid> = idx.iter().map(|&i| images[i]).collect();
            let valid: Vec<Grid> = idx.iter().map(|&i| holes[i].complement().to_grid()).collect();
            let valid_refs: Vec<&Grid> = valid.iter().collect();
            let p = self.predict(&Grid::batch(&imgs), &Grid::batch(&valid_refs));
            idx.iter()
                .enumerate()
                .map(|(k, &i)| Self::composite(images[i], holes[i], &p.data()[k * images[i].len()..(k + 1) * images[i].len()]))
                .collect::<Vec<_>>()
        });
        let mut out: Vec<Grid> = images.iter().map(|g| (*g).clone()).collect();
        for (i, g) in todo.into_iter().zip(preds.into_iter().flatten()) {
            out[i] = g;
        }
        Ok(out)
    }

    pub fn meta(&self) -> InpainterMeta {
        InpainterMeta {
            arch: self.arch.clone(),
            phase: self.phase,
            config_hash: self.config_hash.clone(),
            loss_history: self.loss_history.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::save(dir, ARCHIVE_KIND, &self.meta(), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors): (InpainterMeta, _) = archive::load(dir, ARCHIVE_KIND)?;
        let mut m = InpainterModel::new(meta.arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        m.store.load_from(tensors)?;
        m.phase = meta.phase;
        m.config_hash = meta.config_hash;
        m.loss_history = meta.loss_history;
        Ok(m)
    }
}

/// Source of the feature levels compared by the perceptual and style terms.
pub trait FeatureExtractor: Sync {
    fn extract<'g>(&self, g: &'g Graph, x: Var<'g>) -> Vec<Var<'g>>;
}

impl FeatureExtractor for ScorerModel {
    fn extract<'g>(&self, g: &'g Graph, x: Var<'g>) -> Vec<Var<'g>> {
        let ctx = Ctx::frozen(g, self.store());
        self.pass(&ctx, x, false).features
    }
}

/// The image itself as the single feature level.
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn extract<'g>(&self, _g: &'g Graph, x: Var<'g>) -> Vec<Var<'g>> {
        vec![x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PciLossBreakdown {
    pub l_valid: f64,
    pub l_hole: f64,
    pub l_perc: f64,
    pub l_style: f64,
    pub l_tv: f64,
    pub total: f64,
}

pub const W_HOLE: f64 = 6.0;
pub const W_PERC: f64 = 0.05;
pub const W_STYLE: f64 = 120.0;
pub const W_TV: f64 = 0.1;

pub struct PciTerms<'g> {
    pub l_valid: Var<'g>,
    pub l_hole: Var<'g>,
    pub l_perc: Var<'g>,
    pub l_style: Var<'g>,
    pub l_tv: Var<'g>,
    pub total: Var<'g>,
}

impl PciTerms<'_> {
    pub fn breakdown(&self) -> PciLossBreakdown {
        PciLossBreakdown {
            l_valid: self.l_valid.value().item(),
            l_hole: self.l_hole.value().item(),
            l_perc: self.l_perc.value().item(),
            l_style: self.l_style.value().item(),
            l_tv: self.l_tv.value().item(),
            total: self.total.value().item(),
        }
    }
}

/// Pixels of `[n, 1, h, w]` pair masks where both neighbours lie in the
/// 3×3 dilation of the hole. Returns (width pairs, height pairs, |P|).
fn tv_pairs(valid: &Tensor) -> (Tensor, Tensor, f64) {
    let (n, _, h, w) = valid.dims4();
    let mut region = vec![false; n * h * w];
    let mut count = 0usize;
    for s in 0..n {
        let hole = BinaryMask::new(
            h,
            w,
            valid.data()[s * h * w..(s + 1) * h * w].iter().map(|&v| v < 0.5).collect(),
        );
        let p = hole.dilate(1);
        count += p.area();
        region[s * h * w..(s + 1) * h * w].copy_from_slice(p.data());
    }
    let at = |s: usize, r: usize, c: usize| region[(s * h + r) * w + c];
    let mut pw = vec![0.0; n * h * (w - 1)];
    let mut ph = vec![0.0; n * (h - 1) * w];
    for s in 0..n {
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w && at(s, r, c) && at(s, r, c + 1) {
                    pw[(s * h + r) * (w - 1) + c] = 1.0;
                }
                if r + 1 < h && at(s, r, c) && at(s, r + 1, c) {
                    ph[(s * (h - 1) + r) * w + c] = 1.0;
                }
            }
        }
    }
    (
        Tensor::new(vec![n, 1, h, w - 1], pw),
        Tensor::new(vec![n, 1, h - 1, w], ph),
        count as f64,
    )
}

/// Records the PCI loss for `pred` against `target` (both `[n, 1, h, w]`).
pub fn pci_loss_graph<'g>(
    g: &'g Graph,
    pred: Var<'g>,
    target: &Tensor,
    valid: &Tensor,
    fx: &dyn FeatureExtractor,
) -> PciTerms<'g> {
    let t = g.constant(target.clone());
    let m = g.constant(valid.clone());
    let hole_t = valid.map(|v| 1.0 - v);
    let n_valid = valid.sum();
    let n_hole = hole_t.sum();
    let hm = g.constant(hole_t);
    let diff = pred.sub(t).abs();
    let zero = || g.constant(Tensor::scalar(0.0));
    let l_valid = if n_valid > 0.0 { diff.mul(m).sum().scale(1.0 / n_valid) } else { zero() };
    let l_hole = if n_hole > 0.0 { diff.mul(hm).sum().scale(1.0 / n_hole) } else { zero() };
    let comp = t.mul(m).add(pred.mul(hm));

    let ft = fx.extract(g, t);
    let fp = fx.extract(g, pred);
    let fc = fx.extract(g, comp);
    let levels = ft.len() as f64;
    let mut perc = zero();
    let mut style = zero();
    for ((a, b), c) in ft.iter().zip(&fp).zip(&fc) {
        let a = g.constant((*a.value()).clone());
        perc = perc.add(b.sub(a).abs().mean()).add(c.sub(a).abs().mean());
        let ga = g.constant((*a.gram().value()).clone());
        style = style
            .add(b.gram().sub(ga).abs().mean())
            .add(c.gram().sub(ga).abs().mean());
    }
    let l_perc = perc.scale(1.0 / levels);
    let l_style = style.scale(1.0 / levels);

    let (pw, ph, region) = tv_pairs(valid);
    let l_tv = if region > 0.0 && n_hole > 0.0 {
        comp.diff_w()
            .abs()
            .mul(g.constant(pw))
            .sum()
            .add(comp.diff_h().abs().mul(g.constant(ph)).sum())
            .scale(1.0 / region)
    } else {
        zero()
    };
    let total = l_valid
        .add(l_hole.scale(W_HOLE))
        .add(l_perc.scale(W_PERC))
        .add(l_style.scale(W_STYLE))
        .add(l_tv.scale(W_TV));
    PciTerms {
        l_valid,
        l_hole,
        l_perc,
        l_style,
        l_tv,
        total,
    }
}

/// PCI loss of a single prediction; an empty hole gives `l_hole = 0`.
pub fn pci_loss(prediction: &Grid, target: &Grid, hole: &BinaryMask, fx: &dyn FeatureExtractor) -> Result<PciLossBreakdown> {
    if prediction.dims() != target.dims() || hole.dims() != target.dims() {
        return Err(Error::contract("pci_loss inputs differ in size"));
    }
    let g = Graph::new();
    let pred = g.constant(prediction.to_tensor());
    let valid = hole.complement().to_grid().to_tensor();
    Ok(pci_loss_graph(&g, pred, &target.to_tensor(), &valid, fx).breakdown())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrregularMaskConfig {
    /// Inclusive ranges.
    pub strokes: [usize; 2],
    pub stroke_vertices: [usize; 2],
    pub stroke_width: [usize; 2],
    pub stroke_step: [usize; 2],
    pub blobs: [usize; 2],
    pub blob_radius: [usize; 2],
    /// Accepted hole fraction of the image area.
    pub fraction: [f64; 2],
    /// Resampling attempts before giving up.
    pub max_tries: usize,
}

impl Default for IrregularMaskConfig {
    fn default() -> Self {
        IrregularMaskConfig {
            strokes: [0, 3],
            stroke_vertices: [2, 5],
            stroke_width: [2, 6],
            stroke_step: [4, 14],
            blobs: [1, 3],
            blob_radius: [3, 10],
            fraction: [0.02, 0.30],
            max_tries: 200,
        }
    }
}

impl IrregularMaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.strokes,
            self.stroke_vertices,
            self.stroke_width,
            self.stroke_step,
            self.blobs,
            self.blob_radius,
        ];
        if ranges.iter().any(|r| r[0] > r[1]) {
            return Err(Error::config("irregular mask: empty integer range"));
        }
        let [lo, hi] = self.fraction;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi || hi == 0.0 {
            return Err(Error::config("irregular mask: infeasible fraction range"));
        }
        if self.max_tries == 0 {
            return Err(Error::config("irregular mask: max_tries must be positive"));
        }
        Ok(())
    }
}

fn stamp_disk(m: &mut BinaryMask, row: f64, col: f64, radius: f64) {
    let (h, w) = m.dims();
    let r = radius.ceil() as isize;
    let (cr, cc) = (row.round() as isize, col.round() as isize);
    for dr in -r..=r {
        for dc in -r..=r {
            let (rr, c2) = (cr + dr, cc + dc);
            if rr < 0 || c2 < 0 || rr >= h as isize || c2 >= w as isize {
                continue;
            }
            if ((dr * dr + dc * dc) as f64) <= radius * radius {
                m.set(rr as usize, c2 as usize, true);
            }
        }
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, cfg: &IrregularMaskConfig, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    let pick = |rng: &mut ChaCha8Rng, r: [usize; 2]| rng.random_range(r[0]..=r[1]);
    for _ in 0..pick(rng, cfg.strokes) {
        let width = pick(rng, cfg.stroke_width) as f64;
        let mut row = rng.random_range(0.0..h as f64);
        let mut col = rng.random_range(0.0..w as f64);
        for _ in 0..pick(rng, cfg.stroke_vertices) {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = pick(rng, cfg.stroke_step) as f64;
            let (nr, nc) = (
                (row + len * angle.sin()).clamp(0.0, (h - 1) as f64),
                (col + len * angle.cos()).clamp(0.0, (w - 1) as f64),
            );
            let steps = (len.ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                stamp_disk(&mut m, row + t * (nr - row), col + t * (nc - col), width / 2.0);
            }
            row = nr;
            col = nc;
        }
    }
    for _ in 0..pick(rng, cfg.blobs) {
        let radius = pick(rng, cfg.blob_radius) as f64;
        let row = rng.random_range(0.0..h as f64);
        let col = rng.random_range(0.0..w as f64);
        // a few overlapping disks give lobed, irregular blobs
        for _ in 0..3 {
            let jr = rng.random_range(-0.5..0.5) * radius;
            let jc = rng.random_range(-0.5..0.5) * radius;
            let rr = radius * rng.random_range(0.5..1.0);
            stamp_disk(&mut m, row + jr, col + jc, rr);
        }
    }
    m
}

/// Union of thick random polylines and lobed blobs whose hole fraction lies
/// in the configured range; deterministic in `seed`.
pub fn generate_irregular_mask(seed: u64, cfg: &IrregularMaskConfig, height: usize, width: usize) -> Result<BinaryMask> {
    cfg.validate()?;
    for attempt in 0..cfg.max_tries {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (attempt as u64).wrapping_mul(0x9e37_79b9)));
        let m = draw_mask(&mut rng, cfg, height, width);
        let f = m.fraction();
        if !m.is_empty() && f >= cfg.fraction[0] && f <= cfg.fraction[1] {
            return Ok(m);
        }
    }
    Err(Error::config(format!(
        "irregular mask: no mask within fraction {:?} after {} tries",
        cfg.fraction, cfg.max_tries
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpainterConfig {
    pub depths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub bn_momentum: f64,
    pub masks: IrregularMaskConfig,
    pub seed: u64,
}

impl Default for InpainterConfig {
    fn default() -> Self {
        InpainterConfig {
            depths: vec![32, 64, 128, 256, 256],
            kernels: vec![7, 5, 5, 3, 3],
            phase1_epochs: 14,
            phase2_epochs: 6,
            phase1_lr: 1e-3,
            phase2_lr: 2e-4,
            batch_size: 8,
            bn_momentum: 0.1,
            masks: IrregularMaskConfig::default(),
            seed: 23,
        }
    }
}

/// Per-epoch mean PCI loss, tagged with its phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InpainterLog {
    pub epochs: Vec<(u32, f64)>,
    pub steps: Vec<f64>,
}

/// Two-phase training on healthy training images with irregular holes.
/// Phase 2 freezes the contraction-path batch norms (statistics and affine
/// parameters).
pub fn train_inpainter(
    manifest: &DatasetManifest,
    scorer: &ScorerModel,
    cfg: &InpainterConfig,
) -> Result<(InpainterModel, InpainterLog)> {
    let healthy = manifest.load_split(Split::Train, Some(Label::Healthy))?;
    if healthy.is_empty() {
        return Err(Error::config("inpainter needs healthy training images"));
    }
    cfg.masks.validate()?;
    let (h, w) = (manifest.config.height, manifest.config.width);
    let arch = InpainterArch {
        height: h,
        width: w,
        depths: cfg.depths.clone(),
        kernels: cfg.kernels.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = InpainterModel::new(arch, &mut rng)?;
    let frozen_in_phase2: Vec<bool> = model
        .store
        .entries()
        .iter()
        .map(|e| e.name.starts_with("enc") && e.name.contains(".bn."))
        .collect();
    let mut log = InpainterLog::default();
    let mut opt = Optimizer::adam();
    let mut order: Vec<usize> = (0..healthy.len()).collect();
    let mut mask_counter = 0u64;
    let schedule = std::iter::repeat_n((1u32, cfg.phase1_lr), cfg.phase1_epochs)
        .chain(std::iter::repeat_n((2u32, cfg.phase2_lr), cfg.phase2_epochs));
    for (epoch, (phase, lr)) in schedule.enumerate() {
        if phase == 2 && model.phase < 2 {
            // fresh moments for the new phase
            opt = Optimizer::adam();
        }
        model.phase = phase;
        let mode = if phase == 1 { RunMode::Phase1 } else { RunMode::Phase2 };
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut valid = Vec::with_capacity(batch.len());
            for &i in batch {
                let flip: bool = rng.random();
                let src = &healthy[i].pixels;
                imgs.push(if flip {
                    Grid::from_fn(h, w, |r, c| src.get(r, w - 1 - c))
                } else {
                    src.clone()
                });
                let hole = generate_irregular_mask(splitmix64(cfg.seed ^ mask_counter), &cfg.masks, h, w)?;
                mask_counter += 1;
                valid.push(hole.complement().to_grid());
            }
            let img_t = Grid::batch(&imgs.iter().collect::<Vec<_>>());
            let valid_t = Grid::batch(&valid.iter().collect::<Vec<_>>());
            let g = Graph::new();
            let ctx = Ctx::trainable(&g, &model.store);
            let (pred, _) = model.forward(&ctx, g.constant(img_t.clone()), &valid_t, mode);
            let terms = pci_loss_graph(&g, pred, &img_t, &valid_t, scorer);
            let loss = terms.total.value().item();
            let mut grads = ctx.param_grads(&g.backward(terms.total));
            if phase == 2 {
                for (gr, frozen) in grads.iter_mut().zip(&frozen_in_phase2) {
                    if *frozen {
                        *gr = None;
                    }
                }
            }
            let updates = ctx.take_bn_updates();
            drop(ctx);
            opt.step(&mut model.store, &grads, lr);
            apply_bn_updates(&mut model.store, updates, cfg.bn_momentum);
            log.steps.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        let mean = epoch_sum / batches as f64;
        info!("inpainter epoch {epoch} (phase {phase}): loss {mean:.4}");
        log.epochs.push((phase, mean));
        model.loss_history.push(mean);
    }
    scorer.reset_feature_extractions();
    Ok((model, log))
}
