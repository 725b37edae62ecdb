//! Synthetic scenes with a known placement rule, and a benchmark that checks
//! whether context-driven placement follows the rule while random placement
//! does not.
//!
//! Each category owns a horizontal region of the image (its rule) and, inside
//! it, a narrow colored stripe where its instances sit side by side. Held-out
//! scenes show the stripes without objects.

use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_image, AugmentMode, AugmentationConfig, Resources};
use crate::bank::InstanceBank;
use crate::context::{build_context_dataset, dataset_histogram, ContextGenParams};
use crate::dataset_io::{AnnotatedObject, ImageAnnotation, LabeledImage};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::par;
use crate::raster::Mask;
use crate::scorer::{accuracy_on, train_builtin, FeatureSet, TrainParams};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthShape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCategory {
    pub name: String,
    /// Rule: box centers belong in rows `[region.0·H, region.1·H)`.
    pub region: (f64, f64),
    /// Rows where instances are drawn, as fractions of the height.
    pub stripe: (f64, f64),
    pub stripe_color: [u8; 3],
    pub object_color: [u8; 3],
    pub shape: SynthShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: u32,
    pub n_images: usize,
    /// Object-free scenes used for placement.
    pub n_heldout: usize,
    pub categories: Vec<SynthCategory>,
    pub background_color: [u8; 3],
    /// Per-pixel uniform noise amplitude on background and stripes.
    pub noise: u8,
    pub instances_per_category: usize,
    /// Object side range in pixels.
    pub object_size: (u32, u32),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            n_images: 40,
            n_heldout: 40,
            categories: vec![
                SynthCategory {
                    name: "disc".into(),
                    region: (0.0, 0.5),
                    stripe: (0.125, 0.3125),
                    stripe_color: [60, 170, 70],
                    object_color: [220, 40, 40],
                    shape: SynthShape::Ellipse,
                },
                SynthCategory {
                    name: "block".into(),
                    region: (0.5, 1.0),
                    stripe: (0.6875, 0.875),
                    stripe_color: [60, 80, 190],
                    object_color: [230, 210, 40],
                    shape: SynthShape::Rectangle,
                },
            ],
            background_color: [150, 140, 120],
            noise: 12,
            instances_per_category: 5,
            object_size: (14, 20),
            seed: 0,
        }
    }
}

/// Seeds the benchmark is judged on.
pub const BENCH_SEEDS: [u64; 3] = [0, 1, 2];

/// Horizontal gap reserved next to each object slot.
const SLOT_MARGIN: u32 = 4;

impl SynthSpec {
    fn rows(&self, span: (f64, f64)) -> (u32, u32) {
        let h = self.image_size as f64;
        ((span.0 * h).round() as u32, (span.1 * h).round() as u32)
    }

    pub fn slots(&self) -> u32 {
        self.image_size / (self.object_size.1 + SLOT_MARGIN)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::validation("synthetic spec has no categories"));
        }
        let (lo, hi) = self.object_size;
        if lo == 0 || lo > hi {
            return Err(Error::validation(format!("bad object size range [{lo}, {hi}]")));
        }
        let mut regions: Vec<(f64, f64)> = self.categories.iter().map(|c| c.region).collect();
        regions.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut edge = 0.0;
        for (a, b) in &regions {
            if (a - edge).abs() > 1e-12 || b <= a {
                return Err(Error::validation("category regions must partition the image height"));
            }
            edge = *b;
        }
        if (edge - 1.0).abs() > 1e-12 {
            return Err(Error::validation("category regions must cover the image height"));
        }
        for c in &self.categories {
            let inside = c.region.0 <= c.stripe.0 && c.stripe.0 < c.stripe.1 && c.stripe.1 <= c.region.1;
            let (s0, s1) = self.rows(c.stripe);
            if !inside || s1 - s0 < hi + 2 {
                return Err(Error::validation(format!(
                    "stripe of {} cannot hold {hi}px objects inside its region",
                    c.name
                )));
            }
        }
        if self.instances_per_category as u32 > self.slots() {
            return Err(Error::validation(format!(
                "{} instances per category but only {} slots fit",
                self.instances_per_category,
                self.slots()
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn category(&self, name: &str) -> Result<&SynthCategory> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }
}

fn noisy<R: Rng + ?Sized>(base: [u8; 3], noise: u8, rng: &mut R) -> Rgb<u8> {
    let n = noise as i16;
    Rgb(base.map(|c| {
        let d = if n > 0 { rng.random_range(-n..=n) } else { 0 };
        (c as i16 + d).clamp(0, 255) as u8
    }))
}

fn render_scene<R: Rng + ?Sized>(spec: &SynthSpec, image_id: String, with_objects: bool, rng: &mut R) -> LabeledImage {
    let size = spec.image_size;
    let stripes: Vec<(u32, u32, [u8; 3])> = spec
        .categories
        .iter()
        .map(|c| {
            let (a, b) = spec.rows(c.stripe);
            (a, b, c.stripe_color)
        })
        .collect();
    let mut image = RgbImage::from_fn(size, size, |_, y| {
        let base = stripes
            .iter()
            .find(|(a, b, _)| (*a..*b).contains(&y))
            .map_or(spec.background_color, |s| s.2);
        noisy(base, spec.noise, rng)
    });
    let mut objects = Vec::new();
    let mut masks = Vec::new();
    if with_objects {
        let slot_w = spec.object_size.1 + SLOT_MARGIN;
        for c in &spec.categories {
            let (s0, s1) = spec.rows(c.stripe);
            let chosen = index::sample(rng, spec.slots() as usize, spec.instances_per_category);
            let mut slots: Vec<usize> = chosen.into_iter().collect();
            slots.sort_unstable();
            for slot in slots {
                let (lo, hi) = spec.object_size;
                let w = rng.random_range(lo..=hi);
                let h = rng.random_range(lo..=hi);
                let x0 = slot as u32 * slot_w + rng.random_range(0..=slot_w - w);
                let y0 = s0 + rng.random_range(0..=(s1 - s0 - h));
                let mask = shape_mask(c.shape, size, x0, y0, w, h);
                for (x, y, p) in image.enumerate_pixels_mut() {
                    if *mask.get(x, y) {
                        *p = Rgb(c.object_color);
                    }
                }
                objects.push(AnnotatedObject {
                    category: c.name.clone(),
                    bbox: mask.tight_box().expect("objects are at least one pixel"),
                    difficult: false,
                });
                masks.push(mask);
            }
        }
    }
    LabeledImage {
        annotation: ImageAnnotation {
            image_id,
            width: size,
            height: size,
            objects,
        },
        image,
        masks: Some(masks),
    }
}

fn shape_mask(shape: SynthShape, size: u32, x0: u32, y0: u32, w: u32, h: u32) -> Mask {
    let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    Mask::from_fn(size, size, |x, y| {
        let inside_box = (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y);
        match shape {
            SynthShape::Rectangle => inside_box,
            SynthShape::Ellipse => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                inside_box && dx * dx + dy * dy <= 1.0
            }
        }
    })
}

/// `n_images` annotated scenes with exact instance masks.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    Ok(par::map_range(spec.n_images, |i| {
        let id = format!("synth_{i:04}");
        let mut rng = seeding::stream(spec.seed, &id);
        render_scene(spec, id, true, &mut rng)
    }))
}

/// `n_heldout` scenes with stripes but no objects.
pub fn generate_heldout_scenes(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    Ok(par::map_range(spec.n_heldout, |i| {
        let id = format!("heldout_{i:04}");
        let mut rng = seeding::stream(spec.seed, &id);
        render_scene(spec, id, false, &mut rng)
    }))
}

/// Whether a box center satisfies its category's rule.
pub fn conforms(spec: &SynthSpec, category: &str, bbox: &BoundingBox) -> Result<bool> {
    let c = spec.category(category)?;
    let y = bbox.center().1 / spec.image_size as f64;
    Ok(c.region.0 <= y && y < c.region.1)
}

/// Fraction of placements whose center lies in its category's region; 0
/// for no placements.
pub fn rule_consistency(placements: &[(String, BoundingBox)], spec: &SynthSpec) -> Result<f64> {
    if placements.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (category, bbox) in placements {
        hits += conforms(spec, category, bbox)? as usize;
    }
    Ok(hits as f64 / placements.len() as f64)
}

/// Probability that a uniformly placed box of height `h` lands its center
/// in `category`'s region.
pub fn uniform_chance(spec: &SynthSpec, category: &str, h: f64) -> Result<f64> {
    let c = spec.category(category)?;
    let size = spec.image_size as f64;
    let (lo, hi) = (h / 2.0, size - h / 2.0);
    if hi <= lo {
        return Ok(if (c.region.0..c.region.1).contains(&0.5) { 1.0 } else { 0.0 });
    }
    let (r0, r1) = (c.region.0 * size, c.region.1 * size);
    Ok(((r1.min(hi) - r0.max(lo)).max(0.0)) / (hi - lo))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub context: ContextGenParams,
    pub train: TrainParams,
    pub augment: AugmentationConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let context = ContextGenParams {
            out_size: 64,
            ..Default::default()
        };
        Self {
            context: context.clone(),
            train: TrainParams::default(),
            augment: AugmentationConfig {
                paste_probability: 1.0,
                context,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub context_consistency: f64,
    pub random_consistency: f64,
    /// Expected random consistency given the pasted box heights.
    pub random_chance: f64,
    pub scorer_val_accuracy: f64,
    pub context_pastes: usize,
    pub random_pastes: usize,
    pub seed: u64,
    pub spec_hash: String,
}

/// Generates data, trains the builtin scorer on its contexts, and compares
/// context and random placement on held-out scenes. Everything derives
/// from `spec.seed`.
pub fn run_benchmark(spec: &SynthSpec, cfg: &BenchConfig) -> Result<BenchReport> {
    let seed = spec.seed;
    let train_images = generate_synthetic_dataset(spec)?;
    let heldout = generate_heldout_scenes(spec)?;
    let classes = spec.class_names();
    let bank = InstanceBank::build(&train_images)?;
    let hist = dataset_histogram(train_images.iter().map(|r| &r.annotation))?;

    let samples = build_context_dataset(&train_images, &classes, &hist, &cfg.context, seed)?;
    log::info!("training on {} contexts", samples.len());
    let train = TrainParams {
        seed,
        ..cfg.train.clone()
    };
    let outcome = train_builtin(&samples, classes.clone(), &train)?;
    let features = FeatureSet::from_samples(&samples, outcome.scorer.feature_size);
    drop(samples);
    let eval_idx = if outcome.val_indices.is_empty() {
        &outcome.train_indices
    } else {
        &outcome.val_indices
    };
    let scorer_val_accuracy = accuracy_on(&outcome.scorer, &features, eval_idx);
    log::info!("scorer validation accuracy {scorer_val_accuracy:.3}");

    let aug = AugmentationConfig {
        seed,
        context: ContextGenParams {
            out_size: outcome.scorer.input_size,
            ..cfg.augment.context.clone()
        },
        ..cfg.augment.clone()
    };
    let res = Resources {
        bank: &bank,
        scorer: Some(&outcome.scorer),
        histogram: Some(&hist),
    };
    let mut report = BenchReport {
        context_consistency: 0.0,
        random_consistency: 0.0,
        random_chance: 0.0,
        scorer_val_accuracy,
        context_pastes: 0,
        random_pastes: 0,
        seed,
        spec_hash: spec.hash(),
    };
    for mode in [AugmentMode::Context, AugmentMode::Random] {
        let key = if mode == AugmentMode::Context { "context" } else { "random" };
        let records = par::map(&heldout, |rec| {
            let mut rng = seeding::stream(seed, &format!("{key}/{}", rec.annotation.image_id));
            augment_image(rec, &res, &aug, mode, &mut rng)
        });
        let mut placements = Vec::new();
        for r in records {
            for p in r?.provenance.pasted {
                placements.push((p.category, p.bbox));
            }
        }
        let consistency = rule_consistency(&placements, spec)?;
        if mode == AugmentMode::Context {
            report.context_consistency = consistency;
            report.context_pastes = placements.len();
        } else {
            report.random_consistency = consistency;
            report.random_pastes = placements.len();
            let mut chance = 0.0;
            for (c, b) in &placements {
                chance += uniform_chance(spec, c, b.height())?;
            }
            report.random_chance = chance / placements.len().max(1) as f64;
        }
    }
    log::info!(
        "context {:.3} over {} pastes, random {:.3} over {} (chance {:.3})",
        report.context_consistency,
        report.context_pastes,
        report.random_consistency,
        report.random_pastes,
        report.random_chance
    );
    Ok(report)
}
