//! Synthetic two-domain datasets with exact ground truth, plus the disk
//! format that carries them between commands.
//!
//! Images are random elliptical blobs on a flat background. The analytic
//! ellipse supports become the masks, so labels are exact by construction.
//! Two domain presets differ in brightness, noise and blur — a controlled
//! stand-in for a real acquisition shift: models trained on one transfer
//! imperfectly to the other, and that gap is what adaptation closes.

pub mod pgm;

use crate::error::{Error, Result};
use crate::image::{ImagePatch, LabelMask};
use crate::rng::{derive_rng, Stream};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Recipe for one synthetic domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub image_size: (usize, usize),
    /// Blobs per image, inclusive range.
    pub blob_count_range: (usize, usize),
    /// Ellipse semi-axis lengths in pixels, sampled per axis.
    pub blob_radius_range: (f64, f64),
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    /// Additive pixel noise applied after blur.
    pub texture_noise_sigma: f64,
    /// Gaussian blur of the rendered image; 0 disables it.
    pub blur_sigma: f64,
    /// Final `image = 1 - image`; masks are unaffected.
    pub invert: bool,
    pub seed: u64,
}

impl DomainSpec {
    /// Bright, crisp blobs: the labeled source domain.
    pub fn source(image_size: (usize, usize), seed: u64) -> Self {
        Self {
            name: "source".into(),
            image_size,
            blob_count_range: (2, 5),
            blob_radius_range: (5.0, 12.0),
            foreground_intensity: 0.8,
            background_intensity: 0.2,
            texture_noise_sigma: 0.05,
            blur_sigma: 0.0,
            invert: false,
            seed,
        }
    }

    /// Dimmer, noisier, blurred blobs: the unlabeled target domain. The
    /// contrast drop and blur are chosen so that a source-only model still
    /// finds every blob core with high confidence but under-segments dim
    /// rims and small blobs, leaving a recall deficit that self-training can
    /// close; the noise level keeps the background well clear of the
    /// decision threshold so pseudo-label filtering has little false
    /// foreground to amplify.
    pub fn target(image_size: (usize, usize), seed: u64) -> Self {
        Self {
            name: "target".into(),
            image_size,
            blob_count_range: (2, 5),
            blob_radius_range: (5.0, 12.0),
            foreground_intensity: 0.5,
            background_intensity: 0.25,
            texture_noise_sigma: 0.06,
            blur_sigma: 1.5,
            invert: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        for (label, v) in [
            ("foreground_intensity", self.foreground_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{label} must lie in [0, 1], got {v}")));
            }
        }
        if self.texture_noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Config("noise/blur sigmas must be nonnegative".into()));
        }
        if self.blob_count_range.0 > self.blob_count_range.1 || self.blob_count_range.0 == 0 {
            return Err(Error::Config("blob count range must be ordered and positive".into()));
        }
        if self.blob_radius_range.0 > self.blob_radius_range.1 || self.blob_radius_range.0 <= 0.0 {
            return Err(Error::Config("blob radius range must be ordered and positive".into()));
        }
        Ok(())
    }
}

/// One dataset element. The mask is present only for labeled splits.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImagePatch,
    pub mask: Option<LabelMask>,
    pub domain: String,
    pub index: usize,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

fn render_one(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> (ImagePatch, LabelMask) {
    let (h, w) = spec.image_size;
    let count = rng.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    let (rlo, rhi) = spec.blob_radius_range;
    let blobs: Vec<Ellipse> = (0..count)
        .map(|_| {
            let phi = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                a: rng.random_range(rlo..=rhi),
                b: rng.random_range(rlo..=rhi),
                cos: phi.cos(),
                sin: phi.sin(),
            }
        })
        .collect();
    // each mask pixel is set iff its center lies inside some analytic support
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        u8::from(blobs.iter().any(|e| e.contains(i as f64, j as f64)))
    });
    let mut img = mask.map(|&m| {
        if m == 1 {
            spec.foreground_intensity
        } else {
            spec.background_intensity
        }
    });
    if spec.blur_sigma > 0.0 {
        img = crate::augment::gaussian_blur(&img, spec.blur_sigma);
    }
    if spec.texture_noise_sigma > 0.0 {
        img.map_inplace(|v| {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.texture_noise_sigma * n;
        });
    }
    if spec.invert {
        img.map_inplace(|v| *v = 1.0 - *v);
    }
    (
        ImagePatch::clamped(img).expect("rendered values are finite"),
        LabelMask::new(mask).expect("mask is binary"),
    )
}

/// Generates `n` samples. Each image draws from its own generator keyed by
/// `(spec.seed, index)`, so the dataset is identical no matter how or in
/// what order it is produced.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..n)
        .map(|index| {
            let mut rng = derive_rng(spec.seed, Stream::Generator, index as u64, 0);
            let (image, mask) = render_one(spec, &mut rng);
            Ok(Sample {
                image,
                mask: Some(mask),
                domain: spec.name.clone(),
                index,
            })
        })
        .collect()
}

/// Deterministic 80/10/10 split by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index range of a split within a dataset of `n` elements:
/// `[0, 0.8n)`, `[0.8n, 0.9n)`, `[0.9n, n)`.
pub fn split_range(n: usize, split: Split) -> std::ops::Range<usize> {
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    match split {
        Split::Train => 0..a,
        Split::Val => a..b,
        Split::Test => b..n,
    }
}

pub fn take_split(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples[split_range(samples.len(), split)].to_vec()
}

/// Infinite, seeded stream of uniform random crops.
pub struct PatchSampler {
    samples: Vec<Sample>,
    patch: (usize, usize),
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(
        samples: Vec<Sample>,
        patch: (usize, usize),
        batch_size: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("patch sampler needs samples".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be >= 1".into()));
        }
        for s in &samples {
            let (h, w) = s.image.shape();
            if patch.0 > h || patch.1 > w {
                return Err(Error::shape_mismatch(
                    format!("patch within {}/{}", s.domain, s.index),
                    (h, w),
                    patch,
                ));
            }
        }
        Ok(Self {
            samples,
            patch,
            batch_size,
            rng,
        })
    }

    /// Draws the next batch: for each slot, a uniform sample index and a
    /// uniform top-left offset.
    pub fn next_batch(&mut self) -> Vec<Sample> {
        (0..self.batch_size)
            .map(|_| {
                let which = self.rng.random_range(0..self.samples.len());
                let s = &self.samples[which];
                let (h, w) = s.image.shape();
                let oy = self.rng.random_range(0..=h - self.patch.0);
                let ox = self.rng.random_range(0..=w - self.patch.1);
                crop(s, oy, ox, self.patch)
            })
            .collect()
    }
}

fn crop(s: &Sample, oy: usize, ox: usize, patch: (usize, usize)) -> Sample {
    let slice = ndarray::s![oy..oy + patch.0, ox..ox + patch.1];
    Sample {
        image: ImagePatch::new(s.image.pixels().slice(slice).to_owned())
            .expect("crop of a valid image is valid"),
        mask: s.mask.as_ref().map(|m| {
            LabelMask::new(m.pixels().slice(slice).to_owned()).expect("crop of a valid mask")
        }),
        domain: s.domain.clone(),
        index: s.index,
    }
}

/// Foreground plus boundary channels for the two-class instance variant.
/// The boundary is every mask pixel with a 4-neighbour outside the mask
/// (image borders do not count as outside).
pub fn two_channel_target(mask: &LabelMask) -> Array3<f64> {
    let (h, w) = mask.pixels().dim();
    let m = mask.pixels();
    let mut out = Array3::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] == 0 {
                continue;
            }
            out[[0, i, j]] = 1.0;
            let mut boundary = false;
            if i > 0 && m[[i - 1, j]] == 0 {
                boundary = true;
            }
            if i + 1 < h && m[[i + 1, j]] == 0 {
                boundary = true;
            }
            if j > 0 && m[[i, j - 1]] == 0 {
                boundary = true;
            }
            if j + 1 < w && m[[i, j + 1]] == 0 {
                boundary = true;
            }
            if boundary {
                out[[1, i, j]] = 1.0;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// disk layout: <root>/<domain>/{images,labels}/NNNN.pgm + dataset.json

/// What `generate` writes next to the PGM trees so later commands can
/// reconstruct splits and provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub domains: Vec<DomainEntry>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub count: usize,
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl DomainEntry {
    fn new(spec: DomainSpec, count: usize) -> Self {
        let r = |s| {
            let range = split_range(count, s);
            (range.start, range.end)
        };
        Self {
            spec,
            count,
            train: r(Split::Train),
            val: r(Split::Val),
            test: r(Split::Test),
        }
    }
}

fn image_path(root: &Path, domain: &str, index: usize) -> std::path::PathBuf {
    root.join(domain).join("images").join(format!("{index:04}.pgm"))
}

fn label_path(root: &Path, domain: &str, index: usize) -> std::path::PathBuf {
    root.join(domain).join("labels").join(format!("{index:04}.pgm"))
}

/// Writes one domain's samples under `root` and returns its manifest entry.
pub fn export_domain(root: &Path, spec: &DomainSpec, samples: &[Sample]) -> Result<DomainEntry> {
    for s in samples {
        pgm::write_image(&image_path(root, &s.domain, s.index), s.image.pixels())?;
        if let Some(mask) = &s.mask {
            pgm::write_mask(&label_path(root, &s.domain, s.index), mask.pixels())?;
        }
    }
    Ok(DomainEntry::new(spec.clone(), samples.len()))
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(root.join("dataset.json"), json)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("dataset.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad dataset manifest: {e}")))
}

/// Loads one image/mask pair; `mask_path = None` yields an unlabeled sample.
pub fn load_pgm_pair(
    image_path: &Path,
    mask_path: Option<&Path>,
    domain: &str,
    index: usize,
) -> Result<Sample> {
    let pixels = pgm::read_image(image_path)?;
    let image = ImagePatch::new(pixels)?;
    let mask = match mask_path {
        Some(p) => {
            let m = pgm::read_mask(p)?;
            if m.dim() != image.shape() {
                return Err(Error::shape_mismatch(
                    format!("mask {}", p.display()),
                    image.shape(),
                    m.dim(),
                ));
            }
            Some(LabelMask::new(m)?)
        }
        None => None,
    };
    Ok(Sample {
        image,
        mask,
        domain: domain.into(),
        index,
    })
}

/// Loads a full domain from disk. `labeled = false` skips mask files even
/// if present, producing the unlabeled view of the target domain.
pub fn load_domain(root: &Path, domain: &str, count: usize, labeled: bool) -> Result<Vec<Sample>> {
    (0..count)
        .map(|index| {
            let img = image_path(root, domain, index);
            let lbl = label_path(root, domain, index);
            let mask = if labeled && lbl.exists() {
                Some(lbl)
            } else {
                None
            };
            load_pgm_pair(&img, mask.as_deref(), domain, index)
        })
        .collect()
}
