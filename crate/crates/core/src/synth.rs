//! Synthetic identity images.
//!
//! An identity is a handful of Gaussian blobs. Views of an identity are small
//! random rigid motions of those blobs plus clamped pixel noise. The training
//! split can be polluted with label mess (wrong label, real identity) and
//! distractors (images of identities outside the catalog).

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};
use crate::generator::ImageShape;
use crate::pgm;
use crate::rng;

/// Spreads below this are raised to it when rendering.
pub const MIN_SPREAD: f64 = 0.25;

/// `true_id` values of distractors start here; no catalog identity reaches it.
pub const DISTRACTOR_ID_BASE: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center_x: f64,
    pub center_y: f64,
    pub spread: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub blobs: Vec<Blob>,
    pub seed: u64,
}

impl IdentitySpec {
    /// Random blobs drawn from `seed`, kept away from the border.
    pub fn random(id: usize, seed: u64, shape: ImageShape, blob_count: usize) -> Self {
        let mut r = rng::rng(seed);
        let margin_x = shape.width as f64 * 0.2;
        let margin_y = shape.height as f64 * 0.2;
        let blobs = (0..blob_count)
            .map(|_| Blob {
                center_x: r.gen_range(margin_x..shape.width as f64 - margin_x),
                center_y: r.gen_range(margin_y..shape.height as f64 - margin_y),
                spread: r.gen_range(1.5..3.5),
                amplitude: r.gen_range(0.4..1.0),
            })
            .collect();
        Self { id, blobs, seed }
    }
}

fn blob_value(blobs: &[Blob], x: f64, y: f64) -> f64 {
    let v: f64 = blobs
        .iter()
        .map(|b| {
            let s = b.spread.max(MIN_SPREAD);
            let dx = x - b.center_x;
            let dy = y - b.center_y;
            b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
        })
        .sum();
    v.clamp(0.0, 1.0)
}

/// Base image of an identity, flattened row-major.
pub fn render_identity(spec: &IdentitySpec, shape: ImageShape) -> Array1<f64> {
    let mut img = Array1::zeros(shape.pixels());
    for y in 0..shape.height {
        for x in 0..shape.width {
            img[y * shape.width + x] = blob_value(&spec.blobs, x as f64, y as f64);
        }
    }
    img
}

/// Rigid motion of a view: rotation about the image center, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewPose {
    pub dx: f64,
    pub dy: f64,
    pub rotation: f64,
}

impl ViewPose {
    pub fn draw<R: Rng>(r: &mut R, jitter: f64) -> Self {
        if jitter <= 0.0 {
            return Self {
                dx: 0.0,
                dy: 0.0,
                rotation: 0.0,
            };
        }
        let rot = 0.1 * jitter;
        Self {
            dx: r.gen_range(-jitter..=jitter),
            dy: r.gen_range(-jitter..=jitter),
            rotation: r.gen_range(-rot..=rot),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.rotation == 0.0
    }
}

/// Renders the identity seen through `pose` (inverse-mapped, so the blobs
/// are evaluated exactly rather than resampled).
pub fn render_view(spec: &IdentitySpec, shape: ImageShape, pose: &ViewPose) -> Array1<f64> {
    if pose.is_identity() {
        return render_identity(spec, shape);
    }
    let cx = (shape.width as f64 - 1.0) / 2.0;
    let cy = (shape.height as f64 - 1.0) / 2.0;
    let (sin, cos) = pose.rotation.sin_cos();
    let mut img = Array1::zeros(shape.pixels());
    for y in 0..shape.height {
        for x in 0..shape.width {
            let px = x as f64 - cx - pose.dx;
            let py = y as f64 - cy - pose.dy;
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            img[y * shape.width + x] = blob_value(&spec.blobs, sx, sy);
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseFlag {
    Clean,
    LabelMess,
    Distractor,
}

impl NoiseFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseFlag::Clean => "clean",
            NoiseFlag::LabelMess => "label_mess",
            NoiseFlag::Distractor => "distractor",
        }
    }

    pub fn is_noisy(self) -> bool {
        self != NoiseFlag::Clean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array1<f64>,
    pub label: usize,
    pub true_id: usize,
    pub noise: NoiseFlag,
}

/// View parameters shared by every rendered sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    /// Max translation in pixels; rotation is bounded by `0.1·jitter` rad.
    pub jitter: f64,
    pub pixel_noise: f64,
}

fn render_sample(spec: &IdentitySpec, shape: ImageShape, view: &ViewParams, seed: u64) -> Array1<f64> {
    let mut r = rng::rng(seed);
    let pose = ViewPose::draw(&mut r, view.jitter);
    let mut img = render_view(spec, shape, &pose);
    if view.pixel_noise > 0.0 {
        let normal = Normal::new(0.0, view.pixel_noise).expect("positive sigma");
        img.mapv_inplace(|v| (v + normal.sample(&mut r)).clamp(0.0, 1.0));
    }
    img
}

/// `count` clean views of one identity. View `v` uses its own derived seed,
/// so the pose of a view does not depend on the noise level.
pub fn sample_views(
    spec: &IdentitySpec,
    shape: ImageShape,
    count: usize,
    view: &ViewParams,
    seed: u64,
) -> Vec<Sample> {
    (0..count)
        .map(|v| Sample {
            image: render_sample(spec, shape, view, rng::mix(seed, v as u64)),
            label: spec.id,
            true_id: spec.id,
            noise: NoiseFlag::Clean,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    pub mess_rate: f64,
    pub distractor_rate: f64,
}

impl NoiseRates {
    pub fn clean() -> Self {
        Self {
            mess_rate: 0.0,
            distractor_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r, d) = (self.mess_rate, self.distractor_rate);
        if !(0.0..1.0).contains(&r) || !(0.0..1.0).contains(&d) || r + d >= 1.0 {
            return Err(LatseError::Config(format!(
                "noise rates need 0 <= mess, distractor < 1 and mess + distractor < 1, got {r}, {d}"
            )));
        }
        Ok(())
    }
}

/// Source of out-of-catalog images used as distractors.
#[derive(Debug, Clone)]
pub struct DistractorPool {
    pub identities: Vec<IdentitySpec>,
    pub shape: ImageShape,
    pub view: ViewParams,
}

fn exact_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Pollutes `samples` with exactly `⌊ρN⌋` label-mess and `⌊δN⌋` distractor
/// samples, chosen by a seeded shuffle.
pub fn inject_noise(
    mut samples: Vec<Sample>,
    num_classes: usize,
    rates: &NoiseRates,
    pool: &DistractorPool,
    seed: u64,
) -> Result<Vec<Sample>> {
    rates.validate()?;
    let n = samples.len();
    let mess = exact_count(rates.mess_rate, n);
    let distract = exact_count(rates.distractor_rate, n);
    if mess == 0 && distract == 0 {
        return Ok(samples);
    }
    if mess > 0 && num_classes < 2 {
        return Err(LatseError::Config("label mess needs at least two classes".into()));
    }
    if distract > 0 && pool.identities.is_empty() {
        return Err(LatseError::Config("distractors requested but pool is empty".into()));
    }
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);

    for &i in &order[..mess] {
        let s = &mut samples[i];
        // uniform over the other identities
        let mut label = r.gen_range(0..num_classes - 1);
        if label >= s.true_id {
            label += 1;
        }
        s.label = label;
        s.noise = NoiseFlag::LabelMess;
    }
    for (j, &i) in order[mess..mess + distract].iter().enumerate() {
        let which = r.gen_range(0..pool.identities.len());
        let spec = &pool.identities[which];
        let image = render_sample(spec, pool.shape, &pool.view, rng::mix(seed ^ 0xD157, j as u64));
        samples[i] = Sample {
            image,
            label: r.gen_range(0..num_classes),
            true_id: DISTRACTOR_ID_BASE + which,
            noise: NoiseFlag::Distractor,
        };
    }
    Ok(samples)
}

/// Sizes and rendering parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub train_views: usize,
    pub heldout_identities: usize,
    pub heldout_views: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    pub jitter: f64,
    pub pixel_noise: f64,
    pub mess_rate: f64,
    pub distractor_rate: f64,
    pub distractor_pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_identities: 200,
            train_views: 30,
            heldout_identities: 50,
            heldout_views: 10,
            height: 32,
            width: 32,
            blobs: 6,
            jitter: 3.0,
            pixel_noise: 0.1,
            mess_rate: 0.0,
            distractor_rate: 0.0,
            distractor_pool: 50,
        }
    }
}

impl DataConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width)
    }

    pub fn view(&self) -> ViewParams {
        ViewParams {
            jitter: self.jitter,
            pixel_noise: self.pixel_noise,
        }
    }

    pub fn rates(&self) -> NoiseRates {
        NoiseRates {
            mess_rate: self.mess_rate,
            distractor_rate: self.distractor_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_identities == 0 || self.train_views == 0 {
            return Err(LatseError::Config("training split must be non-empty".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(LatseError::Config("image dims must be positive".into()));
        }
        self.rates().validate()
    }
}

/// Identity catalogs of the three disjoint populations.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub train: Vec<IdentitySpec>,
    pub heldout: Vec<IdentitySpec>,
    pub distractors: Vec<IdentitySpec>,
}

impl Catalog {
    pub fn new(cfg: &DataConfig) -> Self {
        let shape = cfg.shape();
        let population = |tag: &str, count: usize| {
            let base = rng::mix_tag(cfg.seed, tag);
            (0..count)
                .map(|i| IdentitySpec::random(i, rng::mix(base, i as u64), shape, cfg.blobs))
                .collect::<Vec<_>>()
        };
        Self {
            train: population("train-identities", cfg.train_identities),
            heldout: population("heldout-identities", cfg.heldout_identities),
            distractors: population("distractor-identities", cfg.distractor_pool),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    /// Held-out identities; `label` and `true_id` are indices into
    /// [`Catalog::heldout`].
    pub heldout: Vec<Sample>,
    pub catalog: Catalog,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape();
        let view = cfg.view();
        let catalog = Catalog::new(cfg);
        let views = |specs: &[IdentitySpec], count: usize, tag: &str| {
            let base = rng::mix_tag(cfg.seed, tag);
            specs
                .iter()
                .flat_map(|s| sample_views(s, shape, count, &view, rng::mix(base, s.id as u64)))
                .collect::<Vec<_>>()
        };
        let clean = views(&catalog.train, cfg.train_views, "train-views");
        let heldout = views(&catalog.heldout, cfg.heldout_views, "heldout-views");
        let pool = DistractorPool {
            identities: catalog.distractors.clone(),
            shape,
            view,
        };
        let train = inject_noise(
            clean,
            cfg.train_identities,
            &cfg.rates(),
            &pool,
            rng::mix_tag(cfg.seed, "noise"),
        )?;
        Ok(Self {
            shape,
            num_classes: cfg.train_identities,
            train,
            heldout,
            catalog,
        })
    }

    pub fn base_image(&self, heldout_id: usize) -> Array1<f64> {
        render_identity(&self.catalog.heldout[heldout_id], self.shape)
    }

    /// Writes every image as PGM plus `manifest.csv`.
    pub fn export(&self, dir: &Path, config_hash: &str) -> Result<()> {
        for split in ["train", "heldout"] {
            fs::create_dir_all(dir.join(split))?;
        }
        let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
        manifest.write_record(["path", "label", "true_id", "noise_flag", "split", "config_hash"])?;
        for (split, samples) in [("train", &self.train), ("heldout", &self.heldout)] {
            for (i, s) in samples.iter().enumerate() {
                let rel = format!("{split}/{i:06}.pgm");
                pgm::write_pgm(
                    &dir.join(&rel),
                    self.shape.width,
                    self.shape.height,
                    s.image.as_slice().expect("contiguous"),
                    config_hash,
                )?;
                manifest.write_record([
                    rel,
                    s.label.to_string(),
                    s.true_id.to_string(),
                    s.noise.as_str().to_string(),
                    split.to_string(),
                    config_hash.to_string(),
                ])?;
            }
        }
        manifest.flush()?;
        Ok(())
    }
}
