//! Seeded synthetic two-domain benchmark.
//!
//! Each class owns a spectral prototype: one smooth field per band, built
//! from a band mean and a few low-frequency cosines. Natural samples show a
//! single prototype; satellite samples tile one to three prototypes over a
//! Voronoi partition of the image. Pixel noise is added on top and the RGB
//! view is always recomputed from the stored bands.
//!
//! In the satellite domain, sibling classes `c` and `c ^ 1` look almost the
//! same in the three composite bands and differ fully in the remaining ones.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{TextTokenizer, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::head::PromptSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const MS_FILE: &str = "ms.mpc";
pub const RGB_FILE: &str = "rgb.mpc";
pub const LABELS_FILE: &str = "labels.mpc";
pub const CAPTIONS_FILE: &str = "captions.mpc";

pub const CLASS_NAMES: [&str; 8] = ["forest", "river", "highway", "pasture", "industry", "village", "lake", "cropland"];

pub const NATURAL_TEMPLATES: [&str; 4] = [
    "a photo of a {}",
    "a blurry photo of a {}",
    "a close-up photo of the {}",
    "a picture of the {}",
];

pub const SATELLITE_TEMPLATES: [&str; 4] = [
    "a satellite image of {}",
    "an aerial view of {}",
    "a remote sensing image of {}",
    "satellite imagery showing {}",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Natural,
    Satellite,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Natural => "natural",
            Domain::Satellite => "satellite",
        }
    }

    pub fn templates(self) -> Vec<String> {
        let t: &[&str] = match self {
            Domain::Natural => &NATURAL_TEMPLATES,
            Domain::Satellite => &SATELLITE_TEMPLATES,
        };
        t.iter().map(|s| s.to_string()).collect()
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(s) => s.to_string(),
            None => format!("class{i}"),
        })
        .collect()
}

/// Tokenizer shared by every dataset and text encoder: the vocabulary of
/// both template sets filled with `n_classes` class names.
pub fn shared_tokenizer(n_classes: usize) -> Result<TextTokenizer> {
    let names = class_names(n_classes);
    let mut corpus = Vec::new();
    for d in [Domain::Natural, Domain::Satellite] {
        for t in d.templates() {
            for c in &names {
                corpus.push(PromptSet::fill(&t, c));
            }
        }
    }
    TextTokenizer::from_corpus(corpus.iter().map(String::as_str), DEFAULT_MAX_LEN)
}

/// Band selection, gain and saturation clamp producing a 3-channel view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub bands: [usize; 3],
    pub gain: f32,
    pub lo: f32,
    pub hi: f32,
}

impl CompositeSpec {
    pub fn identity() -> Self {
        CompositeSpec { bands: [0, 1, 2], gain: 1.0, lo: 0.0, hi: 1.0 }
    }

    pub fn satellite() -> Self {
        CompositeSpec { bands: [3, 2, 1], gain: 2.5, lo: 0.0, hi: 1.0 }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let [r, g, b] = self.bands;
        if r == g || g == b || r == b {
            return Err(Error::InvalidArgument(format!("composite bands {:?} must be distinct", self.bands)));
        }
        if let Some(&bad) = self.bands.iter().find(|&&i| i >= channels) {
            return Err(Error::InvalidArgument(format!("composite band {bad} out of range for {channels} channels")));
        }
        if !(self.lo < self.hi) || !self.gain.is_finite() {
            return Err(Error::InvalidArgument(format!("composite clamp [{}, {}] invalid", self.lo, self.hi)));
        }
        Ok(())
    }

    #[inline]
    pub fn map(&self, v: f32) -> f32 {
        ((self.gain * v).clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    /// `[C, P]` bands of one image flattened to `[3, P]`.
    fn apply_flat(&self, ms: &[f32], pixels: usize, out: &mut Vec<f32>) {
        for &b in &self.bands {
            out.extend(ms[b * pixels..(b + 1) * pixels].iter().map(|&v| self.map(v)));
        }
    }
}

/// `out[k] = rescale(clamp(gain * ms[band_k], lo, hi))` for one `[C, H, W]` image.
pub fn rgb_composite(ms: &Tensor, spec: &CompositeSpec) -> Result<Tensor> {
    let s = ms.shape();
    if s.len() != 3 {
        return Err(Error::shape("rgb_composite", format!("expected [C, H, W], got {s:?}")));
    }
    spec.validate(s[0])?;
    let mut out = Vec::with_capacity(3 * s[1] * s[2]);
    spec.apply_flat(ms.data(), s[1] * s[2], &mut out);
    Tensor::new(vec![3, s[1], s[2]], out)
}

/// Batched form over `[N, C, H, W]`.
pub fn rgb_composite_batch(ms: &Tensor, spec: &CompositeSpec) -> Result<Tensor> {
    let s = ms.shape();
    if s.len() != 4 {
        return Err(Error::shape("rgb_composite", format!("expected [N, C, H, W], got {s:?}")));
    }
    spec.validate(s[1])?;
    let pixels = s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * 3 * pixels);
    for img in ms.data().chunks(s[1] * pixels) {
        spec.apply_flat(img, pixels, &mut out);
    }
    Tensor::new(vec![s[0], 3, s[2], s[3]], out)
}

/// Keeps only the listed bands of `[N, C, H, W]`, in the given order.
pub fn select_bands(ms: &Tensor, bands: &[usize]) -> Result<Tensor> {
    let s = ms.shape();
    if s.len() != 4 || bands.iter().any(|&b| b >= s[1]) || bands.is_empty() {
        return Err(Error::shape("select_bands", format!("bands {bands:?} of {s:?}")));
    }
    let pixels = s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * bands.len() * pixels);
    for img in ms.data().chunks(s[1] * pixels) {
        for &b in bands {
            out.extend_from_slice(&img[b * pixels..(b + 1) * pixels]);
        }
    }
    Tensor::new(vec![s[0], bands.len(), s[2], s[3]], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub domain: Domain,
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub size: usize,
    pub multilabel: bool,
    /// Largest number of classes mixed into one multi-label sample.
    pub max_labels: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Range each band's prototype means are drawn from. One entry applies
    /// to every band.
    pub levels: Vec<[f64; 2]>,
    /// Peak deviation of a prototype field around its mean.
    pub amplitude: f64,
    /// Highest spatial frequency (cycles per image) of prototype fields.
    pub max_frequency: usize,
    /// How far apart sibling classes sit in the composite bands, in `[0, 1]`.
    pub sibling_separation: f64,
    pub composite: CompositeSpec,
    /// Train, val, test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl DataConfig {
    pub fn natural(seed: u64) -> Self {
        DataConfig {
            domain: Domain::Natural,
            classes: 8,
            samples: 4096,
            channels: 3,
            size: 16,
            multilabel: false,
            max_labels: 1,
            noise: 0.15,
            levels: vec![[0.15, 0.85]],
            amplitude: 0.15,
            max_frequency: 2,
            sibling_separation: 1.0,
            composite: CompositeSpec::identity(),
            split: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn satellite(seed: u64) -> Self {
        DataConfig {
            domain: Domain::Satellite,
            channels: 8,
            multilabel: true,
            max_labels: 3,
            levels: vec![[0.04, 0.36]],
            amplitude: 0.06,
            sibling_separation: 0.35,
            composite: CompositeSpec::satellite(),
            ..DataConfig::natural(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.samples < self.classes {
            return Err(Error::InvalidArgument(format!("{} samples for {} classes", self.samples, self.classes)));
        }
        if self.channels == 0 || self.size == 0 {
            return Err(Error::InvalidArgument("channels and size must be positive".into()));
        }
        if self.multilabel && (self.max_labels == 0 || self.max_labels > self.classes) {
            return Err(Error::InvalidArgument(format!("max_labels {} invalid", self.max_labels)));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.sibling_separation) {
            return Err(Error::InvalidArgument("noise must be >= 0 and separation in [0, 1]".into()));
        }
        if self.levels.len() != 1 && self.levels.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "{} level ranges for {} channels",
                self.levels.len(),
                self.channels
            )));
        }
        if self.levels.iter().any(|l| !(l[0] <= l[1])) || !(self.amplitude >= 0.0) {
            return Err(Error::InvalidArgument(format!("levels {:?} / amplitude {} invalid", self.levels, self.amplitude)));
        }
        self.composite.validate(self.channels)?;
        validate_ratios(&self.split)
    }

    /// Expected fraction of samples carrying any given class.
    pub fn expected_positive_rate(&self) -> f64 {
        if self.multilabel {
            (1 + self.max_labels) as f64 / 2.0 / self.classes as f64
        } else {
            1.0 / self.classes as f64
        }
    }

    pub fn prompts(&self) -> PromptSet {
        PromptSet { classes: class_names(self.classes), templates: self.domain.templates() }
    }
}

fn validate_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {r:?} must be positive and sum to 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::InvalidArgument(format!("unknown split {name:?}"))),
        }
    }
}

/// Seeded shuffle of `0..n`, then consecutive train/val/test blocks.
/// Train and val sizes are rounded; test takes the remainder.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    validate_ratios(&ratios)?;
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = (ratios[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!("ratios {ratios:?} leave an empty split of {n} samples")));
    }
    let perm = Rng::derive(seed, "split").permutation(n);
    Ok(Splits {
        train: perm[..n_train].to_vec(),
        val: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub classes: Vec<String>,
    pub templates: Vec<String>,
    pub captions: Vec<String>,
    pub splits: Splits,
}

/// Paired multi-spectral images, RGB composites, labels and captions.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalDataset {
    pub manifest: Manifest,
    /// `[N, C_ms, H, W]`
    pub ms: Tensor,
    /// `[N, 3, H, W]`
    pub rgb: Tensor,
    /// `[N, C]` in `{0, 1}`
    pub labels: Tensor,
    /// `[N, L]` token ids
    pub captions: Tensor,
}

/// Rows of a dataset restricted to one split.
#[derive(Clone, Debug)]
pub struct SplitView {
    pub ids: Vec<usize>,
    pub ms: Tensor,
    pub rgb: Tensor,
    pub labels: Tensor,
    pub captions: Tensor,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// First positive label per row.
    pub fn class_ids(&self) -> Vec<usize> {
        (0..self.labels.rows())
            .map(|r| self.labels.row(r).iter().position(|&v| v > 0.5).unwrap_or(0))
            .collect()
    }
}

struct Prototypes {
    /// `[C][band][pixel]`
    fields: Vec<Vec<Vec<f64>>>,
}

fn smooth_field(rng: &mut Rng, size: usize, mean: f64, amp: f64, max_freq: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = rng.below(max_freq + 1) as f64;
            let fy = rng.below(max_freq + 1) as f64;
            (fx, fy, rng.range(0.0, TAU), rng.range(0.5, 1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(fx, fy, ph, a) in &waves {
                v += a * (TAU * (fx * x as f64 + fy * y as f64) / size as f64 + ph).cos();
            }
            out.push(mean + amp * v / norm);
        }
    }
    out
}

fn prototypes(cfg: &DataConfig) -> Prototypes {
    let mut rng = Rng::derive(cfg.seed, &format!("prototypes/{}", cfg.domain.as_str()));
    let (amp, f) = (cfg.amplitude, cfg.max_frequency);
    let level = |b: usize| cfg.levels[if cfg.levels.len() == 1 { 0 } else { b }];
    let rgb: Vec<usize> = cfg.composite.bands.to_vec();
    let is_sibling_band = |b: usize| cfg.domain == Domain::Satellite && rgb.contains(&b);
    let mut fields = vec![vec![Vec::new(); cfg.channels]; cfg.classes];
    // Shared bases for sibling pairs in the composite bands.
    let pair_base: Vec<Vec<Vec<f64>>> = (0..cfg.classes.div_ceil(2))
        .map(|_| {
            (0..cfg.channels)
                .map(|b| {
                    let [lo, hi] = level(b);
                    let mean = rng.range(lo, hi);
                    smooth_field(&mut rng, cfg.size, mean, amp, f)
                })
                .collect()
        })
        .collect();
    for (c, class_fields) in fields.iter_mut().enumerate() {
        for (b, slot) in class_fields.iter_mut().enumerate() {
            let [lo, hi] = level(b);
            let mean = rng.range(lo, hi);
            let own = smooth_field(&mut rng, cfg.size, mean, amp, f);
            *slot = if is_sibling_band(b) {
                let s = cfg.sibling_separation;
                pair_base[c / 2][b].iter().zip(&own).map(|(p, o)| (1.0 - s) * p + s * o).collect()
            } else {
                own
            };
        }
    }
    Prototypes { fields }
}

/// Builds the full dataset in memory. Identical configs give identical bytes.
pub fn generate(cfg: &DataConfig) -> Result<MultiModalDataset> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let tokenizer = shared_tokenizer(cfg.classes)?;
    let names = class_names(cfg.classes);
    let caption_templates: Vec<String> = match cfg.domain {
        // Captions of the natural domain cover both phrasings, so the text
        // side knows every template word.
        Domain::Natural => [Domain::Natural.templates(), Domain::Satellite.templates()].concat(),
        Domain::Satellite => Domain::Satellite.templates(),
    };
    let mut rng = Rng::derive(cfg.seed, &format!("samples/{}", cfg.domain.as_str()));
    let (n, ch, s) = (cfg.samples, cfg.channels, cfg.size);
    let pixels = s * s;
    let mut ms = Vec::with_capacity(n * ch * pixels);
    let mut labels = vec![0.0f32; n * cfg.classes];
    let mut captions_text = Vec::with_capacity(n);
    let mut caption_ids = Vec::with_capacity(n * tokenizer.max_len());
    for i in 0..n {
        let k = if cfg.multilabel { 1 + rng.below(cfg.max_labels) } else { 1 };
        let present = rng.choose_distinct(cfg.classes, k);
        let sites: Vec<(f64, f64)> = rng
            .choose_distinct(pixels, k)
            .into_iter()
            .map(|p| ((p % s) as f64, (p / s) as f64))
            .collect();
        let owner: Vec<usize> = (0..pixels)
            .map(|p| {
                let (x, y) = ((p % s) as f64, (p / s) as f64);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, &(sx, sy)) in sites.iter().enumerate() {
                    let d = (x - sx).powi(2) + (y - sy).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                present[best]
            })
            .collect();
        for b in 0..ch {
            for (p, &c) in owner.iter().enumerate() {
                let v = protos.fields[c][b][p] + cfg.noise * rng.normal();
                ms.push(v as f32);
            }
        }
        for &c in &present {
            labels[i * cfg.classes + c] = 1.0;
        }
        let c = present[rng.below(k)];
        let t = &caption_templates[rng.below(caption_templates.len())];
        let text = PromptSet::fill(t, &names[c]);
        caption_ids.extend(tokenizer.encode(&text).into_iter().map(|id| id as f32));
        captions_text.push(text);
    }
    let ms = Tensor::new(vec![n, ch, s, s], ms)?;
    let rgb = rgb_composite_batch(&ms, &cfg.composite)?;
    let splits = split(n, cfg.split, cfg.seed)?;
    Ok(MultiModalDataset {
        manifest: Manifest {
            config: cfg.clone(),
            classes: names,
            templates: cfg.domain.templates(),
            captions: captions_text,
            splits,
        },
        ms,
        rgb,
        labels: Tensor::new(vec![n, cfg.classes], labels)?,
        captions: Tensor::new(vec![n, tokenizer.max_len()], caption_ids)?,
    })
}

impl MultiModalDataset {
    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.ms.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn multilabel(&self) -> bool {
        self.manifest.config.multilabel
    }

    pub fn prompts(&self) -> PromptSet {
        PromptSet { classes: self.manifest.classes.clone(), templates: self.manifest.templates.clone() }
    }

    pub fn view(&self, split: &str) -> Result<SplitView> {
        self.view_ids(self.manifest.splits.get(split)?.to_vec())
    }

    pub fn view_ids(&self, ids: Vec<usize>) -> Result<SplitView> {
        Ok(SplitView {
            ms: self.ms.select_rows(&ids)?,
            rgb: self.rgb.select_rows(&ids)?,
            labels: self.labels.select_rows(&ids)?,
            captions: self.captions.select_rows(&ids)?,
            ids,
        })
    }

    /// Re-splits in place with a new seed and ratios.
    pub fn resplit(&mut self, ratios: [f64; 3], seed: u64) -> Result<()> {
        self.manifest.splits = split(self.len(), ratios, seed)?;
        self.manifest.config.split = ratios;
        Ok(())
    }

    /// Whether the stored RGB view equals the composite of the stored bands.
    pub fn composites_consistent(&self) -> Result<bool> {
        Ok(rgb_composite_batch(&self.ms, &self.manifest.config.composite)?.bit_eq(&self.rgb))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        for (file, name, t) in self.parts() {
            let mut ck = Checkpoint::new(&format!("dataset/{}", self.config().domain.as_str()), 0);
            ck.insert(name, t.clone())?;
            ck.save(dir.join(file))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        let read = |file: &str, name: &str| -> Result<Tensor> { Ok(Checkpoint::load(dir.join(file))?.require(name)?.clone()) };
        let ds = MultiModalDataset {
            ms: read(MS_FILE, "ms")?,
            rgb: read(RGB_FILE, "rgb")?,
            labels: read(LABELS_FILE, "labels")?,
            captions: read(CAPTIONS_FILE, "captions")?,
            manifest,
        };
        let n = ds.len();
        if [ds.rgb.rows(), ds.labels.rows(), ds.captions.rows()].iter().any(|&r| r != n) {
            return Err(Error::Header(format!("dataset parts in {dir:?} disagree on sample count")));
        }
        Ok(ds)
    }

    fn parts(&self) -> [(&'static str, &'static str, &Tensor); 4] {
        [
            (MS_FILE, "ms", &self.ms),
            (RGB_FILE, "rgb", &self.rgb),
            (LABELS_FILE, "labels", &self.labels),
            (CAPTIONS_FILE, "captions", &self.captions),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        let spec = CompositeSpec { bands: [0, 1, 2], gain: 2.0, lo: 0.0, hi: 1.0 };
        assert_eq!(spec.map(0.5), 1.0);
        assert!((spec.map(0.2) - 0.4).abs() < 1e-7);
        assert_eq!(spec.map(-0.3), 0.0);
    }

    #[test]
    fn composite_rejects_bad_bands() {
        let spec = CompositeSpec { bands: [0, 1, 9], gain: 1.0, lo: 0.0, hi: 1.0 };
        assert!(rgb_composite(&Tensor::zeros(&[3, 2, 2]), &spec).is_err());
        let dup = CompositeSpec { bands: [0, 0, 1], ..spec };
        assert!(dup.validate(3).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split(100, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split(100, [0.8, 0.1, 0.1], 1).unwrap());
        let mut all: Vec<usize> = [s.train, s.val, s.test].concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split(100, [0.8, 0.1, 0.2], 1).is_err());
        assert!(split(5, [0.98, 0.01, 0.01], 1).is_err());
    }

    #[test]
    fn labels_have_a_positive() {
        let mut cfg = DataConfig::satellite(3);
        cfg.samples = 64;
        let ds = generate(&cfg).unwrap();
        for r in 0..ds.len() {
            let k = ds.labels.row(r).iter().filter(|&&v| v == 1.0).count();
            assert!((1..=3).contains(&k));
        }
    }
}
