//! Synthetic lesion phantoms: textured backgrounds with compact bright blobs
//! and exact ground-truth masks.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels;
use crate::config::fingerprint;
use crate::grid::{BinaryMask, Grid};
use crate::imageio;
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Pathological,
}

impl Label {
    pub fn is_pathological(self) -> bool {
        self == Label::Pathological
    }

    pub fn as_f64(self) -> f64 {
        if self.is_pathological() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Grid,
    pub label: Label,
    pub gt_mask: BinaryMask,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_healthy: usize,
    pub n_pathological: usize,
    /// Inclusive range of lesions per pathological image.
    pub lesion_count: [usize; 2],
    /// Inclusive range of half-peak lesion radii in pixels.
    pub lesion_radius: [usize; 2],
    /// Gaussian length scale of the background texture, pixels.
    pub smoothness: f64,
    /// Standard deviation of the smooth background component.
    pub texture_amplitude: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise: f64,
    pub base_level: f64,
    /// Peak lesion intensity above background.
    pub contrast: f64,
    /// Train/val/test fractions, applied per class.
    pub split: [f64; 3],
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            n_healthy: 450,
            n_pathological: 450,
            lesion_count: [1, 1],
            lesion_radius: [4, 6],
            smoothness: 5.0,
            texture_amplitude: 0.07,
            noise: 0.03,
            base_level: 0.35,
            contrast: 0.35,
            split: [2.0 / 3.0, 1.0 / 9.0, 2.0 / 9.0],
            master_seed: 20201,
        }
    }
}

/// Four-pixel margin kept between lesion half-peak disks and the border.
const MARGIN: usize = 4;
/// Flat-topped lesion profile exp(-ln2 (d/r)^P); half peak at d = r.
const PROFILE_POWER: i32 = 8;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("image must be at least 8x8");
        }
        if self.lesion_count[0] > self.lesion_count[1] || self.lesion_count[1] == 0 {
            return bad("lesion_count range is empty");
        }
        if self.lesion_radius[0] > self.lesion_radius[1] || self.lesion_radius[0] == 0 {
            return bad("lesion_radius range is empty or zero");
        }
        if 2 * (self.lesion_radius[1] + MARGIN) > self.height.min(self.width) {
            return bad("largest lesion does not fit the image");
        }
        if !(self.contrast > self.noise) || self.contrast > 1.0 {
            return bad("contrast must exceed the noise amplitude and be at most 1");
        }
        if self.smoothness <= 0.0 || self.texture_amplitude < 0.0 || self.noise < 0.0 {
            return bad("texture parameters must be nonnegative with positive smoothness");
        }
        if !(0.0..=1.0).contains(&self.base_level) {
            return bad("base_level must lie in [0, 1]");
        }
        let s: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f < 0.0) || (s - 1.0).abs() > 1e-6 {
            return bad("split fractions must be nonnegative and sum to 1");
        }
        Ok(())
    }

    /// Expected half-peak area range, pixels, of a single lesion.
    pub fn lesion_area_range(&self) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let (lo, hi) = (self.lesion_radius[0] as f64, self.lesion_radius[1] as f64);
        (pi * lo * lo, pi * hi * hi)
    }
}

/// Splitmix64 finalizer, used to derive per-sample seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, label: Label) -> ChaCha8Rng {
    let tag = match label {
        Label::Healthy => 0x4845_414c,
        Label::Pathological => 0x5041_5448,
    };
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ tag))
}

struct Lesion {
    row: f64,
    col: f64,
    radius: f64,
}

fn place_lesions(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<Lesion> {
    let count = rng.random_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 1000 {
        tries += 1;
        let radius = rng.random_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]) as f64;
        let lo = radius + MARGIN as f64;
        let row = rng.random_range(lo..=cfg.height as f64 - 1.0 - lo);
        let col = rng.random_range(lo..=cfg.width as f64 - 1.0 - lo);
        // keep dilation rings of distinct lesions apart
        let apart = out.iter().all(|l| {
            let d = ((l.row - row).powi(2) + (l.col - col).powi(2)).sqrt();
            d > 2.0 * (l.radius + radius) + 2.0 * MARGIN as f64
        });
        if apart {
            out.push(Lesion { row, col, radius });
        }
    }
    if out.is_empty() {
        let r = cfg.lesion_radius[0] as f64;
        out.push(Lesion {
            row: cfg.height as f64 / 2.0,
            col: cfg.width as f64 / 2.0,
            radius: r,
        });
    }
    out
}

/// Deterministic sample for `(seed, label, config)`.
pub fn generate_sample(seed: u64, label: Label, cfg: &SynthConfig) -> Result<LabeledImage> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(seed, label);
    let white: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let taps = kernels::gaussian_taps(cfg.smoothness);
    let smooth = kernels::blur_forward(&white, 1, h, w, &taps);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut pixels: Vec<f64> = smooth
        .iter()
        .map(|v| {
            let iid: f64 = rng.sample(StandardNormal);
            cfg.base_level + cfg.texture_amplitude * (v - mean) / std + cfg.noise * iid
        })
        .collect();
    let mut gt = BinaryMask::empty(h, w);
    if label.is_pathological() {
        for lesion in place_lesions(&mut rng, cfg) {
            for r in 0..h {
                for c in 0..w {
                    let d = ((r as f64 - lesion.row).powi(2) + (c as f64 - lesion.col).powi(2)).sqrt();
                    let u = (d / lesion.radius).powi(PROFILE_POWER);
                    pixels[r * w + c] += cfg.contrast * (-std::f64::consts::LN_2 * u).exp();
                    if d < lesion.radius {
                        gt.set(r, c, true);
                    }
                }
            }
        }
    }
    let pixels = Grid::new(h, w, pixels.into_iter().map(imageio::quantize16).collect());
    Ok(LabeledImage {
        pixels,
        label,
        gt_mask: gt,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub seed: u64,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// On-disk dataset description; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub config: SynthConfig,
    #[serde(rename = "sample")]
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Per-class stratified split sizes `(train, val, test)`.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Builds the manifest records without touching the filesystem.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut index = 0u64;
    for (label, n, prefix) in [
        (Label::Healthy, cfg.n_healthy, "h"),
        (Label::Pathological, cfg.n_pathological, "p"),
    ] {
        let (tr, va, _) = split_sizes(n, cfg.split);
        for i in 0..n {
            let seed = loop {
                // 63 bits so the seed survives TOML's signed integers
                let s = splitmix64(cfg.master_seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(index)) >> 1;
                index += 1;
                if seen.insert(s) {
                    break s;
                }
            };
            let split = if i < tr {
                Split::Train
            } else if i < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            let id = format!("{prefix}{i:04}");
            records.push(SampleRecord {
                image: PathBuf::from(format!("images/{id}.png")),
                mask: PathBuf::from(format!("masks/{id}.png")),
                id,
                split,
                label,
                seed,
            });
        }
    }
    Ok(records)
}

/// Generates every sample, writes PNGs and `manifest.toml` under `out`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let records = plan_dataset(cfg)?;
    std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("masks")).map_err(|e| Error::io(out, e))?;
    let results = par::map_slice(&records, |rec| -> Result<()> {
        let s = generate_sample(rec.seed, rec.label, cfg)?;
        imageio::write_gray16(&out.join(&rec.image), &s.pixels)?;
        imageio::write_mask(&out.join(&rec.mask), &s.gt_mask)
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        config_hash: fingerprint(cfg),
        config: cfg.clone(),
        samples: records,
        root: out.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::persistence(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads `dir/manifest.toml`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::persistence(&path, e))?;
        m.root = dir.to_path_buf();
        if m.config_hash != fingerprint(&m.config) {
            return Err(Error::persistence(&path, "config hash does not match embedded config"));
        }
        let mut ids = HashSet::new();
        let mut seeds = HashSet::new();
        for r in &m.samples {
            if !ids.insert(&r.id) || !seeds.insert(r.seed) {
                return Err(Error::persistence(&path, format!("duplicate sample {}", r.id)));
            }
        }
        Ok(m)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, label: Option<Label>) -> usize {
        self.records(split)
            .filter(|r| label.is_none_or(|l| r.label == l))
            .count()
    }

    pub fn read(&self, rec: &SampleRecord) -> Result<LabeledImage> {
        let pixels = imageio::read_gray16(&self.root.join(&rec.image))?;
        let gt_mask = imageio::read_mask(&self.root.join(&rec.mask))?;
        pixels.ensure_dims(self.config.height, self.config.width)?;
        Ok(LabeledImage {
            pixels,
            label: rec.label,
            gt_mask,
            seed: rec.seed,
        })
    }

    /// Reads every sample of `split` (optionally one class only).
    pub fn load_split(&self, split: Split, label: Option<Label>) -> Result<Vec<LabeledImage>> {
        let recs: Vec<&SampleRecord> = self
            .records(split)
            .filter(|r| label.is_none_or(|l| r.label == l))
            .collect();
        par::map_slice(&recs, |r| self.read(r)).into_iter().collect()
    }

    /// Regenerates every sample from its seed and compares with the stored files.
    pub fn verify(&self) -> Result<()> {
        let checks = par::map_slice(&self.samples, |r| -> Result<bool> {
            let stored = self.read(r)?;
            Ok(stored == generate_sample(r.seed, r.label, &self.config)?)
        });
        for (r, ok) in self.samples.iter().zip(checks) {
            if !ok? {
                return Err(Error::persistence(self.root.join(&r.image), "does not match its seed"));
            }
        }
        Ok(())
    }

    /// Mean ground-truth area of the pathological training images, pixels.
    pub fn mean_lesion_area(&self) -> Result<f64> {
        let imgs = self.load_split(Split::Train, Some(Label::Pathological))?;
        if imgs.is_empty() {
            return Err(Error::config("no pathological training images"));
        }
        Ok(imgs.iter().map(|i| i.gt_mask.area() as f64).sum::<f64>() / imgs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_healthy: 10,
            n_pathological: 10,
            split: [0.6, 0.2, 0.2],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn healthy_has_no_lesion_and_generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert!(generate_sample(7, Label::Healthy, &cfg).unwrap().gt_mask.is_empty());
        let a = generate_sample(7, Label::Pathological, &cfg).unwrap();
        let b = generate_sample(7, Label::Pathological, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10, [0.6, 0.2, 0.2]), (6, 2, 2));
        let d = SynthConfig::default();
        assert_eq!(split_sizes(450, d.split), (300, 50, 100));
        let recs = plan_dataset(&small()).unwrap();
        let count = |s| recs.iter().filter(|r| r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (12, 4, 4));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SynthConfig::default();
        c.contrast = 0.01;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = SynthConfig::default();
        c.lesion_radius = [6, 4];
        assert!(c.validate().is_err());
    }
}
