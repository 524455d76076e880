//! Attention-gated decoder over the frozen scorer's feature pyramid that
//! emits an attribution mask in one forward pass, and its constrained
//! counterfactual training objective.

use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::classifier::{sigmoid, ScorerModel, LEVELS};
use crate::grid::{BinaryMask, Grid, SoftMask};
use crate::inpainter::InpainterModel;
use crate::nn::{he_std, Conv2d, Ctx, ParamStore};
use crate::optim::{CyclicLr, Optimizer, OptimizerKind};
use crate::synth::{DatasetManifest, Label, Split};
use crate::tensor::Tensor;
use crate::{archive, par, Error, Result};

pub const ARCHIVE_KIND: &str = "attributor";

/// How gated skip features join the upsampled decoder path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributorArch {
    /// Output depths of the four decoder blocks, coarse to fine.
    pub widths: [usize; LEVELS],
    pub merge: Merge,
    /// Binary-mask threshold t.
    pub threshold: f64,
    /// Gaussian length scale of the projection, fraction of min(H, W).
    pub sigma_rbf: f64,
    /// Log-sum-exp sharpness of the projection.
    pub a_smooth: f64,
    /// Stabilizer in (|c1| + eps) / (|c1| + |c2| + 2 eps).
    pub ratio_eps: f64,
    /// Initial bias of head channel c1. Positive values start training from
    /// a mask covering most of the image, which the area penalty then shrinks.
    pub head_bias: f64,
}

impl Default for AttributorArch {
    fn default() -> Self {
        AttributorArch {
            widths: [64, 32, 16, 16],
            merge: Merge::Concat,
            threshold: 0.55,
            sigma_rbf: 0.05,
            a_smooth: 30.0,
            ratio_eps: 1e-8,
            head_bias: 3.0,
        }
    }
}

/// Generalized logistic `1 / (1 + exp(-k (x - x0)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Logistic {
    pub k: f64,
    pub x0: f64,
}

impl Default for Logistic {
    fn default() -> Self {
        Logistic { k: 1.0, x0: 0.0 }
    }
}

impl Logistic {
    pub fn apply(&self, x: f64) -> f64 {
        sigmoid(self.k * (x - self.x0))
    }

    fn graph<'g>(&self, x: Var<'g>) -> Var<'g> {
        x.affine(self.k, -self.k * self.x0).sigmoid()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    /// Classification threshold of the scorer.
    pub theta: f64,
    /// Area budget, pixels.
    pub delta: f64,
    /// Weight of the total-variation term.
    pub lambda: f64,
    pub phi: Logistic,
    pub psi: Logistic,
    pub tv: Logistic,
    /// Probabilities are kept within [eps, 1 - eps] (applied on the logit).
    pub prob_eps: f64,
    /// Smoothing of |x| in the TV term: sqrt(x² + e²) - e.
    pub tv_eps: f64,
    /// Threshold t turning the soft mask into the inpainting hole.
    pub mask_threshold: f64,
    /// Temperature τ of the blend weight σ((M − t − o) / τ).
    pub blend_temperature: f64,
    /// Offset o of the blend midpoint above the threshold.
    pub blend_offset: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            theta: 0.5,
            delta: 160.0,
            lambda: 0.5,
            phi: Logistic::default(),
            psi: Logistic::default(),
            tv: Logistic::default(),
            prob_eps: 1e-12,
            tv_eps: 0.05,
            mask_threshold: 0.55,
            blend_temperature: 0.05,
            blend_offset: 0.0,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config("theta must lie in (0, 1)"));
        }
        if !(self.delta > 0.0 && self.delta < (height * width) as f64) {
            return Err(Error::config("delta must lie in (0, H*W)"));
        }
        if self.lambda < 0.0
            || self.prob_eps <= 0.0
            || self.prob_eps >= 0.5
            || self.tv_eps <= 0.0
            || self.blend_temperature <= 0.0
        {
            return Err(Error::config("lambda, prob_eps, tv_eps or blend_temperature out of range"));
        }
        Ok(())
    }

    /// `σ((M − t − o) / τ)` rescaled so that β(0) = 0 and β(1) = 1.
    pub fn blend_weight<'g>(&self, soft: Var<'g>) -> Var<'g> {
        let (t, tau) = (self.mask_threshold + self.blend_offset, self.blend_temperature);
        let b0 = sigmoid(-t / tau);
        let b1 = sigmoid((1.0 - t) / tau);
        soft.affine(1.0 / tau, -t / tau)
            .sigmoid()
            .affine(1.0 / (b1 - b0), -b0 / (b1 - b0))
    }

    fn logit_bound(&self) -> f64 {
        ((1.0 - self.prob_eps) / self.prob_eps).ln()
    }
}

/// `x ⊙ σ(W_m ρ(W_l x + b_l) + b_m)` with 1×1 maps.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub reduce: Conv2d,
    pub score: Conv2d,
}

impl AttentionGate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let mid = (channels / 2).max(1);
        AttentionGate {
            reduce: Conv2d::new(store, &format!("{name}.wl"), channels, mid, 1, 1, true, he_std(channels), rng),
            score: Conv2d::new(store, &format!("{name}.wm"), mid, 1, 1, 1, true, he_std(mid), rng),
        }
    }

    pub fn gate<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.score.forward(ctx, self.reduce.forward(ctx, x).relu()).sigmoid()
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.mul_channel(self.gate(ctx, x))
    }
}

/// Applies `gate` to a plain `[n, c, h, w]` tensor.
pub fn attention_gate(store: &ParamStore, gate: &AttentionGate, features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 4 || features.shape()[1] != gate.reduce.in_channels {
        return Err(Error::contract(format!(
            "attention gate expects {} channels, got shape {:?}",
            gate.reduce.in_channels,
            features.shape()
        )));
    }
    let g = Graph::new();
    let ctx = Ctx::frozen(&g, store);
    Ok((*gate.forward(&ctx, g.constant(features.clone())).value()).clone())
}

/// Numerically stable `S(M) = (1/a) log(ŵ_σ * exp(a M))` with a
/// border-renormalized separable Gaussian of `sigma_px` pixels, clamped to
/// `[0, 1]`. Exact for any `a > 0` (log-domain evaluation).
pub fn project_to_s(mask: &SoftMask, sigma_px: f64, a: f64) -> SoftMask {
    let g = mask.grid();
    let (h, w) = g.dims();
    let taps = crate::autograd::kernels::gaussian_taps(sigma_px);
    let rad = (taps.len() / 2) as isize;
    // separable log-sum-exp with per-position renormalized weights;
    // element j of line o sits at `at(o, j)`
    let pass = |src: &[f64], count: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for o in 0..lines {
            for i in 0..count {
                let lo = (i as isize - rad).max(0) as usize;
                let hi = ((i as isize + rad) as usize).min(count - 1);
                let mut wsum = 0.0;
                let mut m = f64::NEG_INFINITY;
                for j in lo..=hi {
                    wsum += taps[(j as isize - i as isize + rad) as usize];
                    m = m.max(src[at(o, j)]);
                }
                let acc: f64 = (lo..=hi)
                    .map(|j| taps[(j as isize - i as isize + rad) as usize] / wsum * (src[at(o, j)] - m).exp())
                    .sum();
                out[at(o, i)] = m + acc.ln();
            }
        }
        out
    };
    let scaled: Vec<f64> = g.data().iter().map(|v| a * v).collect();
    let rows = pass(&scaled, w, h, &|o, j| o * w + j);
    let both = pass(&rows, h, w, &|o, j| j * w + o);
    SoftMask(Grid::new(h, w, both.into_iter().map(|v| (v / a).clamp(0.0, 1.0)).collect()))
}

/// Graph form of [`project_to_s`] for masks with values in `[0, 1]`.
pub fn project_graph<'g>(r: Var<'g>, sigma_px: f64, a: f64) -> Var<'g> {
    // shifting by the upper bound 1 keeps exp in [e^-a, 1]
    r.affine(a, -a)
        .exp()
        .gaussian_blur(sigma_px)
        .ln()
        .affine(1.0 / a, 1.0)
        .clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributorMeta {
    pub arch: AttributorArch,
    pub constraint: ConstraintConfig,
    pub channels: [usize; LEVELS],
    pub height: usize,
    pub width: usize,
    pub scorer_hash: String,
    pub inpainter_hash: String,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
struct DecoderLayers {
    gates: Vec<AttentionGate>,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct AttributorModel {
    pub arch: AttributorArch,
    pub constraint: ConstraintConfig,
    pub scorer: Arc<ScorerModel>,
    pub scorer_hash: String,
    pub inpainter_hash: String,
    pub config_hash: String,
    store: ParamStore,
    layers: DecoderLayers,
}

/// Graph outputs of one attributor pass.
pub struct AttributorPass<'g> {
    pub soft: Var<'g>,
    pub raw: Var<'g>,
    pub logit: Var<'g>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    #[serde(skip)]
    pub soft_mask: Option<SoftMask>,
    #[serde(skip)]
    pub binary_mask: Option<BinaryMask>,
    pub score_original: f64,
    pub score_marginalized: f64,
    /// Foreground pixels of the binary mask.
    pub area: usize,
    pub score_ok: bool,
    pub area_ok: bool,
    /// The input already scores at or below θ; the map carries no
    /// counterfactual meaning.
    pub below_threshold: bool,
}

impl AttributionResult {
    pub fn constraint_satisfied(&self) -> bool {
        self.score_ok && self.area_ok
    }

    pub fn soft(&self) -> &SoftMask {
        self.soft_mask.as_ref().expect("soft mask present")
    }

    pub fn binary(&self) -> &BinaryMask {
        self.binary_mask.as_ref().expect("binary mask present")
    }
}

const ATTR_CHUNK: usize = 16;

fn build_layers<R: Rng + ?Sized>(
    store: &mut ParamStore,
    arch: &AttributorArch,
    channels: [usize; LEVELS],
    rng: &mut R,
) -> DecoderLayers {
    let gates = (0..LEVELS)
        .map(|l| AttentionGate::new(store, &format!("gate{l}"), channels[l], rng))
        .collect();
    let mut blocks = Vec::new();
    let mut cin = channels[LEVELS - 1];
    for (b, &out) in arch.widths.iter().enumerate() {
        blocks.push(Conv2d::new(store, &format!("dec{b}"), cin, out, 1, 1, true, he_std(cin), rng));
        // blocks 0..2 merge pyramid levels 2, 1, 0
        cin = if b + 1 < LEVELS {
            let skip = channels[LEVELS - 2 - b];
            match arch.merge {
                Merge::Concat => out + skip,
                Merge::Add => out,
            }
        } else {
            out
        };
    }
    let head = Conv2d::new(store, "head", cin, 2, 1, 1, true, he_std(cin), rng);
    store.get_mut(head.bias.expect("head bias")).data_mut()[0] = arch.head_bias;
    DecoderLayers { gates, blocks, head }
}

impl AttributorModel {
    /// Random-normal (He-scaled) initialization of gates, decoder and head.
    pub fn new<R: Rng + ?Sized>(
        arch: AttributorArch,
        constraint: ConstraintConfig,
        scorer: Arc<ScorerModel>,
        rng: &mut R,
    ) -> Result<Self> {
        let channels = scorer.arch.widths;
        if arch.merge == Merge::Add {
            for b in 0..LEVELS - 1 {
                if arch.widths[b] != channels[LEVELS - 2 - b] {
                    return Err(Error::config("additive merge needs decoder widths equal to encoder widths"));
                }
            }
        }
        constraint.validate(scorer.arch.height, scorer.arch.width)?;
        let mut store = ParamStore::new();
        let layers = build_layers(&mut store, &arch, channels, rng);
        Ok(AttributorModel {
            arch,
            constraint,
            scorer_hash: scorer.param_hash(),
            scorer,
            inpainter_hash: String::new(),
            config_hash: String::new(),
            store,
            layers,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gates(&self) -> &[AttentionGate] {
        &self.layers.gates
    }

    /// Re-draws every gate, decoder and head weight (randomization check).
    pub fn randomized<R: Rng + ?Sized>(&self, rng: &mut R) -> AttributorModel {
        let mut store = ParamStore::new();
        let layers = build_layers(&mut store, &self.arch, self.scorer.arch.widths, rng);
        AttributorModel {
            store,
            layers,
            ..self.clone()
        }
    }

    /// Zeroes both head channels (degenerate start: r ≡ 0.5).
    pub fn zero_head(&mut self) {
        for id in [self.layers.head.weight, self.layers.head.bias.expect("head bias")] {
            let t = self.store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn sigma_px(&self) -> f64 {
        self.arch.sigma_rbf * self.scorer.arch.height.min(self.scorer.arch.width) as f64
    }

    /// One scorer pass, gated decoder, ratio map and projection.
    pub fn pass<'g>(&self, ctx: &Ctx<'g, '_>, image: Var<'g>) -> AttributorPass<'g> {
        let g = ctx.graph();
        let scorer_ctx = Ctx::frozen(g, self.scorer.store());
        let enc = self.scorer.pass(&scorer_ctx, image, false);
        let f = &enc.features;
        let l = &self.layers;
        let mut h = l.gates[LEVELS - 1].forward(ctx, f[LEVELS - 1]);
        for (b, conv) in l.blocks.iter().enumerate() {
            h = conv.forward(ctx, h.upsample2x()).relu();
            if b + 1 < LEVELS {
                let level = LEVELS - 2 - b;
                let skip = l.gates[level].forward(ctx, f[level]);
                h = match self.arch.merge {
                    Merge::Concat => Var::concat(&[h, skip]),
                    Merge::Add => h.add(skip),
                };
            }
        }
        let c = l.head.forward(ctx, h);
        let c1 = c.slice_channels(0, 1).abs();
        let c2 = c.slice_channels(1, 1).abs();
        let eps = self.arch.ratio_eps;
        let raw = c1.add_scalar(eps).div(c1.add(c2).add_scalar(2.0 * eps));
        let soft = project_graph(raw, self.sigma_px(), self.arch.a_smooth);
        AttributorPass {
            soft,
            raw,
            logit: enc.logit,
        }
    }

    fn check(&self, image: &Grid) -> Result<()> {
        image.ensure_dims(self.scorer.arch.height, self.scorer.arch.width)
    }

    /// Soft masks and original scores of a batch.
    fn forward_tensor(&self, x: &Tensor) -> (Vec<SoftMask>, Vec<f64>) {
        let g = Graph::new();
        let ctx = Ctx::frozen(&g, &self.store);
        let out = self.pass(&ctx, g.constant(x.clone()));
        let soft = out.soft.value();
        let n = x.shape()[0];
        let masks = (0..n).map(|i| SoftMask(Grid::from_tensor(&soft, i, 0))).collect();
        let scores = out.logit.value().data().iter().map(|&z| sigmoid(z)).collect();
        (masks, scores)
    }

    /// The projected attribution map of one image (one scorer pass).
    pub fn forward(&self, image: &Grid) -> Result<SoftMask> {
        self.check(image)?;
        Ok(self.forward_tensor(&image.to_tensor()).0.remove(0))
    }

    /// Maps and original scores for many images, in parallel chunks.
    pub fn forward_batch(&self, images: &[&Grid]) -> Result<(Vec<SoftMask>, Vec<f64>)> {
        for im in images {
            self.check(im)?;
        }
        let chunks: Vec<&[&Grid]> = images.chunks(ATTR_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| self.forward_tensor(&Grid::batch(c)));
        let mut masks = Vec::with_capacity(images.len());
        let mut scores = Vec::with_capacity(images.len());
        for (m, s) in parts {
            masks.extend(m);
            scores.extend(s);
        }
        Ok((masks, scores))
    }

    pub fn attribute(&self, inpainter: &InpainterModel, image: &Grid) -> Result<AttributionResult> {
        Ok(self.attribute_batch(inpainter, &[image])?.remove(0))
    }

    /// One attributor pass per image plus one scorer call on each
    /// marginalized image.
    pub fn attribute_batch(&self, inpainter: &InpainterModel, images: &[&Grid]) -> Result<Vec<AttributionResult>> {
        let (masks, s0) = self.forward_batch(images)?;
        let holes: Vec<BinaryMask> = masks.iter().map(|m| m.threshold(self.arch.threshold)).collect();
        let hole_refs: Vec<&BinaryMask> = holes.iter().collect();
        let marginalized = inpainter.inpaint_batch(images, &hole_refs)?;
        let s1 = self.scorer.scores(&marginalized.iter().collect::<Vec<_>>())?;
        let theta = self.constraint.theta;
        Ok(masks
            .into_iter()
            .zip(holes)
            .zip(s0.into_iter().zip(s1))
            .map(|((soft, bin), (s0, s1))| {
                let area = bin.area();
                AttributionResult {
                    soft_mask: Some(soft),
                    binary_mask: Some(bin),
                    score_original: s0,
                    score_marginalized: s1,
                    area,
                    score_ok: s1 <= theta,
                    area_ok: area as f64 <= self.constraint.delta,
                    below_threshold: s0 <= theta,
                }
            })
            .collect())
    }

    pub fn meta(&self) -> AttributorMeta {
        AttributorMeta {
            arch: self.arch.clone(),
            constraint: self.constraint.clone(),
            channels: self.scorer.arch.widths,
            height: self.scorer.arch.height,
            width: self.scorer.arch.width,
            scorer_hash: self.scorer_hash.clone(),
            inpainter_hash: self.inpainter_hash.clone(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::save(dir, ARCHIVE_KIND, &self.meta(), &self.store)
    }

    /// Loads an archive; the scorer must be the one it was trained against.
    pub fn load(dir: &Path, scorer: Arc<ScorerModel>) -> Result<Self> {
        let (meta, tensors): (AttributorMeta, _) = archive::load(dir, ARCHIVE_KIND)?;
        if meta.channels != scorer.arch.widths || (meta.height, meta.width) != (scorer.arch.height, scorer.arch.width) {
            return Err(Error::contract("attributor archive does not fit the scorer architecture"));
        }
        let mut m = AttributorModel::new(meta.arch, meta.constraint, scorer, &mut ChaCha8Rng::seed_from_u64(0))?;
        m.store.load_from(tensors)?;
        m.scorer_hash = meta.scorer_hash;
        m.inpainter_hash = meta.inpainter_hash;
        m.config_hash = meta.config_hash;
        Ok(m)
    }
}

/// Hard marginalization: inpaint where `soft_mask >= t`.
pub fn marginalize(image: &Grid, soft_mask: &SoftMask, inpainter: &InpainterModel, t: f64) -> Result<Grid> {
    Ok(inpainter.inpaint(image, &soft_mask.threshold(t))?.image)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub s0: f64,
    pub s1: f64,
    pub phi_raw: f64,
    /// Descent form −ψ = logit(s1) − logit(s0).
    pub neg_psi_raw: f64,
    pub tv_raw: f64,
    /// d(M) = Σ β(M), pixels.
    pub area: f64,
    pub phi: f64,
    pub neg_psi: f64,
    pub tv: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Batch of loss terms recorded on a graph; every entry is `[n]`.
pub struct LossTerms<'g> {
    pub z1: Var<'g>,
    pub phi_raw: Var<'g>,
    pub neg_psi_raw: Var<'g>,
    pub tv_raw: Var<'g>,
    pub area: Var<'g>,
    pub phi: Var<'g>,
    pub neg_psi: Var<'g>,
    pub tv: Var<'g>,
    pub penalty: Var<'g>,
    pub per_sample: Var<'g>,
    /// Batch mean of `per_sample`.
    pub total: Var<'g>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self, i: usize, s0: f64) -> LossBreakdown {
        let at = |v: &Var<'_>| v.value().data()[i];
        LossBreakdown {
            s0,
            s1: sigmoid(at(&self.z1)),
            phi_raw: at(&self.phi_raw),
            neg_psi_raw: at(&self.neg_psi_raw),
            tv_raw: at(&self.tv_raw),
            area: at(&self.area),
            phi: at(&self.phi),
            neg_psi: at(&self.neg_psi),
            tv: at(&self.tv),
            penalty: at(&self.penalty),
            total: at(&self.per_sample),
        }
    }
}

/// Edge weights `exp(-|ΔI| / mean|ΔI|)` along width and height.
fn tv_weights(image: &Tensor) -> (Tensor, Tensor) {
    let (n, _, h, w) = image.dims4();
    let d = image.data();
    let mut ww = vec![0.0; n * h * (w - 1)];
    let mut wh = vec![0.0; n * (h - 1) * w];
    for s in 0..n {
        let px = |r: usize, c: usize| d[(s * h + r) * w + c];
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    let v = (px(r, c + 1) - px(r, c)).abs();
                    ww[(s * h + r) * (w - 1) + c] = v;
                    sum += v;
                }
                if r + 1 < h {
                    let v = (px(r + 1, c) - px(r, c)).abs();
                    wh[(s * (h - 1) + r) * w + c] = v;
                    sum += v;
                }
            }
        }
        let edges = (h * (w - 1) + (h - 1) * w) as f64;
        let mean = sum / edges;
        let f = |v: &mut f64| *v = if mean > 0.0 { (-*v / mean).exp() } else { 1.0 };
        ww[s * h * (w - 1)..(s + 1) * h * (w - 1)].iter_mut().for_each(f);
        wh[s * (h - 1) * w..(s + 1) * (h - 1) * w].iter_mut().for_each(f);
    }
    (
        Tensor::new(vec![n, 1, h, w - 1], ww),
        Tensor::new(vec![n, 1, h - 1, w], wh),
    )
}

/// Records the constrained counterfactual loss of `soft` (`[n, 1, H, W]`).
///
/// `proposal` is the hard composite for the hole `soft >= t` inside the
/// hole and the inpainter's healthy fill elsewhere (see [`proposal`]); the
/// counterfactual seen by the scorer is the blend `I + β(M) ⊙ (proposal − I)`
/// with β from [`ConstraintConfig::blend_weight`]. It approaches the hard
/// composite as `M` saturates and passes gradients to pixels on either side
/// of the threshold. The area d(M) is measured on β as well, a smooth
/// stand-in for the foreground count of the binary mask.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<'g>(
    g: &'g Graph,
    scorer: &ScorerModel,
    image: &Tensor,
    proposal: &Tensor,
    z0: &[f64],
    soft: Var<'g>,
    cfg: &ConstraintConfig,
    rho: f64,
) -> LossTerms<'g> {
    let (n, _, h, w) = image.dims4();
    let delta_img = proposal.zip_map(image, |a, b| a - b);
    let beta = cfg.blend_weight(soft);
    let pi = g.constant(image.clone()).add(beta.mul(g.constant(delta_img)));
    let ctx = Ctx::frozen(g, scorer.store());
    let bound = cfg.logit_bound();
    let z1 = scorer.pass(&ctx, pi, false).logit.reshape(vec![n]).clamp(-bound, bound);
    let z0c: Vec<f64> = z0.iter().map(|z| z.clamp(-bound, bound)).collect();
    let phi_raw = z1.softplus();
    let neg_psi_raw = z1.sub(g.constant(Tensor::new(vec![n], z0c)));
    let (ww, wh) = tv_weights(image);
    let edges = (h * (w - 1) + (h - 1) * w) as f64;
    let tv_raw = soft
        .diff_w()
        .smooth_abs(cfg.tv_eps)
        .mul(g.constant(ww))
        .sum_per_sample()
        .add(soft.diff_h().smooth_abs(cfg.tv_eps).mul(g.constant(wh)).sum_per_sample())
        .scale(1.0 / edges);
    let area = beta.sum_per_sample();
    let hw = (h * w) as f64;
    let penalty = area.affine(1.0 / hw, -cfg.delta / hw).relu().square().scale(rho);
    let phi = cfg.phi.graph(phi_raw);
    let neg_psi = cfg.psi.graph(neg_psi_raw);
    let tv = cfg.tv.graph(tv_raw);
    let per_sample = phi.add(neg_psi).add(tv.scale(cfg.lambda)).add(penalty);
    let total = per_sample.mean();
    LossTerms {
        z1,
        phi_raw,
        neg_psi_raw,
        tv_raw,
        area,
        phi,
        neg_psi,
        tv,
        penalty,
        per_sample,
        total,
    }
}

/// The inpainter's prediction with every pixel missing. No input pixel is
/// valid, so it depends on the weights only.
pub fn healthy_fill(inpainter: &InpainterModel, image: &Grid) -> Result<Grid> {
    let (h, w) = image.dims();
    Ok(inpainter.inpaint(image, &BinaryMask::full(h, w))?.image)
}

/// Counterfactual proposal: the hard composite inside `hole`, the healthy
/// fill outside it. Outside the hole the blend weight `M` is below the
/// threshold, so this part only steers gradients toward pixels that are
/// not yet marginalized.
pub fn proposal(image: &Grid, composite: &Grid, fill: &Grid, hole: &BinaryMask) -> Grid {
    let (h, w) = image.dims();
    Grid::from_fn(h, w, |r, c| if hole.get(r, c) { composite.get(r, c) } else { fill.get(r, c) })
}

fn loss_inputs(
    image: &Grid,
    soft: &SoftMask,
    scorer: &ScorerModel,
    inpainter: &InpainterModel,
    cfg: &ConstraintConfig,
) -> Result<(Tensor, f64)> {
    if soft.grid().dims() != image.dims() {
        return Err(Error::contract("soft mask and image differ in size"));
    }
    let hole = soft.threshold(cfg.mask_threshold);
    let composite = inpainter.inpaint(image, &hole)?.image;
    let fill = healthy_fill(inpainter, image)?;
    let z0 = scorer.logits_tensor(&image.to_tensor())[0];
    Ok((proposal(image, &composite, &fill, &hole).to_tensor(), z0))
}

/// Loss of one soft mask (π uses the hole `soft >= t`).
pub fn attribution_loss(
    image: &Grid,
    soft: &SoftMask,
    scorer: &ScorerModel,
    inpainter: &InpainterModel,
    cfg: &ConstraintConfig,
    rho: f64,
) -> Result<LossBreakdown> {
    Ok(attribution_loss_grad(image, soft, scorer, inpainter, cfg, rho)?.0)
}

/// Loss and its gradient with respect to the soft mask.
pub fn attribution_loss_grad(
    image: &Grid,
    soft: &SoftMask,
    scorer: &ScorerModel,
    inpainter: &InpainterModel,
    cfg: &ConstraintConfig,
    rho: f64,
) -> Result<(LossBreakdown, Grid)> {
    let (prop, z0) = loss_inputs(image, soft, scorer, inpainter, cfg)?;
    let g = Graph::new();
    let m = g.param(soft.grid().to_tensor());
    let terms = loss_graph(&g, scorer, &image.to_tensor(), &prop, &[z0], m, cfg, rho);
    let b = terms.breakdown(0, sigmoid(z0));
    let grads = g.backward(terms.total);
    Ok((b, Grid::from_tensor(&grads.wrt(m), 0, 0)))
}

/// Penalty weight that starts at `rho0` and doubles every `double_every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySchedule {
    pub rho0: f64,
    pub double_every: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            rho0: 1.0,
            double_every: 200,
        }
    }
}

impl PenaltySchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.rho0 * 2f64.powi((epoch / self.double_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributorTrainConfig {
    pub arch: AttributorArch,
    pub lambda: f64,
    /// δ = delta_factor × mean lesion area of the training split.
    pub delta_factor: f64,
    pub phi: Logistic,
    pub psi: Logistic,
    pub tv: Logistic,
    pub penalty: PenaltySchedule,
    pub blend_temperature: f64,
    /// Temperature reached at the last epoch; τ decays geometrically
    /// from `blend_temperature`.
    pub blend_temperature_final: f64,
    pub blend_offset: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: CyclicLr,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a better validation satisfaction rate before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for AttributorTrainConfig {
    fn default() -> Self {
        AttributorTrainConfig {
            arch: AttributorArch::default(),
            lambda: 0.5,
            delta_factor: 2.0,
            phi: Logistic::default(),
            psi: Logistic::default(),
            tv: Logistic::default(),
            penalty: PenaltySchedule::default(),
            blend_temperature: 0.05,
            blend_temperature_final: 0.05,
            blend_offset: 0.0,
            optimizer: OptimizerKind::Sgd,
            learning_rate: CyclicLr {
                low: 1e-6,
                high: 1e-4,
                half_period: 200,
            },
            epochs: 5000,
            batch_size: 8,
            patience: 50,
            seed: 31,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributorEpoch {
    pub epoch: usize,
    pub rho: f64,
    pub loss: f64,
    pub phi: f64,
    pub neg_psi: f64,
    pub tv: f64,
    pub area: f64,
    pub val_satisfaction: f64,
    pub val_score_ok: f64,
    pub val_mean_area: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributorLog {
    pub epochs: Vec<AttributorEpoch>,
    pub steps: Vec<f64>,
    pub best_epoch: usize,
}

/// Fraction of results meeting both constraints, and their mean area.
pub fn satisfaction(results: &[AttributionResult]) -> (f64, f64) {
    let n = results.len().max(1) as f64;
    let ok = results.iter().filter(|r| r.constraint_satisfied()).count() as f64;
    let area = results.iter().map(|r| r.area as f64).sum::<f64>();
    (ok / n, area / n)
}

/// Trains gates, decoder and head on pathological training images with the
/// scorer and inpainter frozen; early stopping on the validation
/// constraint-satisfaction rate.
pub fn train_attributor(
    manifest: &DatasetManifest,
    scorer: Arc<ScorerModel>,
    inpainter: &InpainterModel,
    cfg: &AttributorTrainConfig,
) -> Result<(AttributorModel, AttributorLog)> {
    if (inpainter.arch.height, inpainter.arch.width) != (scorer.arch.height, scorer.arch.width) {
        return Err(Error::config("scorer and inpainter were trained on different image sizes"));
    }
    let scorer_hash = scorer.param_hash();
    let inpainter_hash = inpainter.param_hash();
    let train = manifest.load_split(Split::Train, Some(Label::Pathological))?;
    let val = manifest.load_split(Split::Val, Some(Label::Pathological))?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("attributor needs pathological training and validation images"));
    }
    if !(cfg.blend_temperature_final > 0.0) {
        return Err(Error::config("blend_temperature_final must be positive"));
    }
    let delta = cfg.delta_factor * manifest.mean_lesion_area()?;
    let constraint = ConstraintConfig {
        theta: scorer.theta,
        delta,
        lambda: cfg.lambda,
        phi: cfg.phi,
        psi: cfg.psi,
        tv: cfg.tv,
        mask_threshold: cfg.arch.threshold,
        blend_temperature: cfg.blend_temperature,
        blend_offset: cfg.blend_offset,
        ..ConstraintConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AttributorModel::new(cfg.arch.clone(), constraint, Arc::clone(&scorer), &mut rng)?;
    model.inpainter_hash = inpainter_hash.clone();
    let train_grids: Vec<&Grid> = train.iter().map(|s| &s.pixels).collect();
    let z0_all = scorer.logits(&train_grids)?;
    let val_grids: Vec<&Grid> = val.iter().map(|s| &s.pixels).collect();
    let fill = healthy_fill(inpainter, train_grids[0])?;

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = AttributorLog::default();
    let mut best: Option<((f64, f64), ParamStore, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let rho = cfg.penalty.at(epoch);
        let progress = epoch as f64 / (cfg.epochs.max(2) - 1) as f64;
        model.constraint.blend_temperature =
            cfg.blend_temperature * (cfg.blend_temperature_final / cfg.blend_temperature).powf(progress);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<&Grid> = batch.iter().map(|&i| train_grids[i]).collect();
            let x = Grid::batch(&imgs);
            let z0: Vec<f64> = batch.iter().map(|&i| z0_all[i]).collect();
            let g = Graph::new();
            let ctx = Ctx::trainable(&g, &model.store);
            let out = model.pass(&ctx, g.constant(x.clone()));
            let soft_v = out.soft.value();
            let holes: Vec<BinaryMask> = (0..batch.len())
                .map(|i| SoftMask(Grid::from_tensor(&soft_v, i, 0)).threshold(model.arch.threshold))
                .collect();
            let composites = inpainter.inpaint_batch(&imgs, &holes.iter().collect::<Vec<_>>())?;
            let props: Vec<Grid> = (0..batch.len())
                .map(|i| proposal(imgs[i], &composites[i], &fill, &holes[i]))
                .collect();
            let inp_t = Grid::batch(&props.iter().collect::<Vec<_>>());
            let terms = loss_graph(&g, &scorer, &x, &inp_t, &z0, out.soft, &model.constraint, rho);
            for i in 0..batch.len() {
                let b = terms.breakdown(i, 0.0);
                sums[0] += b.total;
                sums[1] += b.phi;
                sums[2] += b.neg_psi;
                sums[3] += b.tv;
                sums[4] += b.area;
            }
            count += batch.len();
            log.steps.push(terms.total.value().item());
            let grads = ctx.param_grads(&g.backward(terms.total));
            drop(ctx);
            opt.step(&mut model.store, &grads, cfg.learning_rate.at(step));
            step += 1;
        }
        let results = model.attribute_batch(inpainter, &val_grids)?;
        let (rate, val_area) = satisfaction(&results);
        let c = count as f64;
        let rec = AttributorEpoch {
            epoch,
            rho,
            loss: sums[0] / c,
            phi: sums[1] / c,
            neg_psi: sums[2] / c,
            tv: sums[3] / c,
            area: sums[4] / c,
            val_satisfaction: rate,
            val_score_ok: results.iter().filter(|r| r.score_ok).count() as f64 / results.len() as f64,
            val_mean_area: val_area,
        };
        info!(
            "attributor epoch {epoch}: loss {:.4} area {:.1} val rate {:.3} score ok {:.3} val area {:.1}",
            rec.loss, rec.area, rate, rec.val_score_ok, val_area
        );
        log.epochs.push(rec);
        let key = (rate, -val_area);
        let better = best.as_ref().is_none_or(|(k, _, _)| key > *k);
        if better {
            best = Some((key, model.store.clone(), epoch));
        } else if epoch - best.as_ref().map_or(0, |b| b.2) >= cfg.patience {
            break;
        }
    }
    if let Some((_, store, epoch)) = best {
        model.store = store;
        log.best_epoch = epoch;
    }
    if scorer.param_hash() != scorer_hash || inpainter.param_hash() != inpainter_hash {
        return Err(Error::contract("frozen scorer or inpainter changed during attributor training"));
    }
    scorer.reset_feature_extractions();
    Ok((model, log))
}
