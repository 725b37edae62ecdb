//! Augmentation policies: context-driven placement, random placement,
//! enlarge-and-reblend, and removing an object category's context.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{extract_instance, InstanceBank, MatchQuery};
use crate::blend::{blend, BlendMethod};
use crate::context::{candidate_context, ContextGenParams, ContextualSample};
use crate::dataset_io::{write_augmented, AnnotatedObject, ImageAnnotation, LabeledImage, VocDataset};
use crate::error::{Error, Result};
use crate::geometry::{box_from_shape, BoundingBox, ShapeHistogram, MIN_BOX_SIDE};
use crate::par;
use crate::scorer::ContextScorer;
use crate::seeding::{self, StreamRng};

/// Random placements retry this often to keep clear of ground truth.
pub const RANDOM_PLACEMENT_TRIES: usize = 50;
/// Give up drawing candidates after this many degenerate boxes per request.
const MAX_DEGENERATE_PER_CANDIDATE: usize = 1000;
/// Images loaded per batch when augmenting a dataset on disk.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    Context,
    Random,
    Enlarge,
    RemoveContext,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Self::Context),
            "random" => Ok(Self::Random),
            "enlarge" => Ok(Self::Enlarge),
            "remove-context" => Ok(Self::RemoveContext),
            _ => Err(Error::validation(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub paste_probability: f64,
    pub max_instances: usize,
    pub candidates_per_image: usize,
    pub score_threshold: f64,
    pub match_scale_range: (f64, f64),
    pub min_area_fraction: f64,
    pub random_scale_range: (f64, f64),
    pub enlarge_range: (f64, f64),
    pub gt_overlap_max: f64,
    pub blend: BlendMethod,
    /// Single-category mode: paste only this category, and only into
    /// images that do not already contain it.
    pub target_category: Option<String>,
    /// Neighborhood sampling for candidate contexts; `out_size` must match
    /// the scorer input.
    pub context: ContextGenParams,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            paste_probability: 0.5,
            max_instances: 2,
            candidates_per_image: 200,
            score_threshold: 0.8,
            match_scale_range: MatchQuery::DEFAULT_SCALE_RANGE,
            min_area_fraction: MatchQuery::DEFAULT_MIN_AREA_FRACTION,
            random_scale_range: (0.5, 2.0),
            enlarge_range: (1.2, 1.5),
            gt_overlap_max: 0.3,
            blend: BlendMethod::Random,
            target_category: None,
            context: ContextGenParams::default(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.paste_probability) || !unit(self.score_threshold) || !unit(self.gt_overlap_max) {
            return Err(Error::validation("probabilities and thresholds must lie in [0, 1]"));
        }
        if self.max_instances == 0 || self.candidates_per_image == 0 {
            return Err(Error::validation("max instances and candidates must be at least 1"));
        }
        for (name, (lo, hi)) in [
            ("random scale", self.random_scale_range),
            ("enlarge", self.enlarge_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::validation(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        self.match_query(BoundingBox::from_pixels(0, 0, 1, 1)).validate()?;
        self.blend.validate()?;
        self.context.validate()
    }

    fn match_query(&self, candidate: BoundingBox) -> MatchQuery {
        MatchQuery {
            candidate,
            scale_range: self.match_scale_range,
            min_area_fraction: self.min_area_fraction,
        }
    }
}

/// One pasted object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub category: String,
    /// Tight box of the pasted pixels, as written to the annotation.
    pub bbox: BoundingBox,
    /// Box the cutout was scaled into.
    pub dest_box: BoundingBox,
    /// Candidate box that was scored (context mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<BoundingBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub scale: f64,
    pub bank_index: Option<usize>,
    pub instance_source_image_id: String,
    pub instance_source_object_index: usize,
    pub blend: BlendMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_image_id: String,
    pub mode: AugmentMode,
    pub seed: u64,
    /// False when the image was passed through unchanged.
    pub augmented: bool,
    pub pasted: Vec<PasteRecord>,
}

#[derive(Clone, Debug)]
pub struct AugmentedRecord {
    pub image: RgbImage,
    pub annotation: ImageAnnotation,
    pub provenance: Provenance,
}

impl AugmentedRecord {
    fn unchanged(rec: &LabeledImage, mode: AugmentMode, seed: u64) -> Self {
        Self {
            image: rec.image.clone(),
            annotation: rec.annotation.clone(),
            provenance: Provenance {
                source_image_id: rec.annotation.image_id.clone(),
                mode,
                seed,
                augmented: false,
                pasted: Vec::new(),
            },
        }
    }
}

/// Exactly `n` boxes with histogram shapes and uniform centers, clipped to
/// the image; boxes below the minimum side are redrawn.
pub fn propose_candidates<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    hist: &ShapeHistogram,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BoundingBox>> {
    if (width as f64) < MIN_BOX_SIDE || (height as f64) < MIN_BOX_SIDE {
        return Err(Error::validation(format!("{width}x{height} image is too small for candidates")));
    }
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        let shape = hist.sample(rng);
        let center = (
            rng.random::<f64>() * width as f64,
            rng.random::<f64>() * height as f64,
        );
        match box_from_shape(shape, center, width, height) {
            Some(b) => out.push(b),
            None => {
                misses += 1;
                if misses > MAX_DEGENERATE_PER_CANDIDATE * n {
                    return Err(Error::validation("shape histogram yields only degenerate boxes"));
                }
            }
        }
    }
    Ok(out)
}

/// A scored candidate that passed the threshold.
#[derive(Clone, Debug)]
pub struct Placement {
    pub bbox: BoundingBox,
    pub category: String,
    pub class_index: usize,
    pub score: f64,
    /// The masked context that was scored.
    pub sample: ContextualSample,
}

fn overlaps(b: &BoundingBox, others: impl IntoIterator<Item = BoundingBox>, max: f64) -> bool {
    others.into_iter().any(|o| o.iou(b) > max)
}

/// Candidates scoring strictly above the threshold, best first, excluding
/// those overlapping ground truth.
pub fn ranked_placements<R: Rng + ?Sized>(
    image: &RgbImage,
    gt: &[BoundingBox],
    hist: &ShapeHistogram,
    scorer: &dyn ContextScorer,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Vec<BoundingBox>, Vec<Placement>)> {
    let (w, h) = image.dimensions();
    let candidates = propose_candidates(w, h, hist, cfg.candidates_per_image, rng)?;
    let seeds = seeding::child_seeds(rng, candidates.len());
    let target = match &cfg.target_category {
        Some(t) => Some(
            scorer
                .class_names()
                .iter()
                .position(|c| c == t)
                .ok_or_else(|| Error::UnknownCategory(t.clone()))?,
        ),
        None => None,
    };
    let keep: Vec<usize> = (0..candidates.len())
        .filter(|&i| !overlaps(&candidates[i], gt.iter().copied(), cfg.gt_overlap_max))
        .collect();
    let samples = par::map(&keep, |&i| {
        let mut r = <StreamRng as rand::SeedableRng>::seed_from_u64(seeds[i]);
        candidate_context(image, &candidates[i], &cfg.context, &mut r)
    });
    let scores = scorer.score_batch(&samples)?;
    let mut ranked: Vec<Placement> = keep
        .iter()
        .zip(samples)
        .zip(scores)
        .filter_map(|((&i, sample), v)| {
            if v.len() != scorer.num_outputs() {
                return None;
            }
            let (class_index, score) = match target {
                Some(t) => (t, v.probs()[t]),
                None => v.best_object(),
            };
            (score > cfg.score_threshold).then(|| Placement {
                bbox: candidates[i],
                category: scorer.class_names()[class_index].clone(),
                class_index,
                score,
                sample,
            })
        })
        .collect();
    // stable: equal scores keep draw order
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok((candidates, ranked))
}

/// Greedy top-score selection of at most `max_instances` placements with
/// pairwise IoU ≤ `gt_overlap_max`, also kept clear of ground truth.
pub fn select_placements<R: Rng + ?Sized>(
    image: &RgbImage,
    gt: &[BoundingBox],
    hist: &ShapeHistogram,
    scorer: &dyn ContextScorer,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<Placement>> {
    let (_, ranked) = ranked_placements(image, gt, hist, scorer, cfg, rng)?;
    Ok(greedy_select(ranked, cfg.max_instances, cfg.gt_overlap_max))
}

pub fn greedy_select(ranked: Vec<Placement>, limit: usize, max_iou: f64) -> Vec<Placement> {
    let mut chosen: Vec<Placement> = Vec::new();
    for p in ranked {
        if chosen.len() == limit {
            break;
        }
        if !overlaps(&p.bbox, chosen.iter().map(|c| c.bbox), max_iou) {
            chosen.push(p);
        }
    }
    chosen
}

/// What the augmentation of one image needs besides the image itself.
pub struct Resources<'a> {
    pub bank: &'a InstanceBank,
    pub scorer: Option<&'a dyn ContextScorer>,
    /// Candidate shapes for context mode.
    pub histogram: Option<&'a ShapeHistogram>,
}

struct Canvas {
    image: RgbImage,
    annotation: ImageAnnotation,
    pasted: Vec<PasteRecord>,
}

impl Canvas {
    fn new(rec: &LabeledImage) -> Self {
        Self {
            image: rec.image.clone(),
            annotation: rec.annotation.clone(),
            pasted: Vec::new(),
        }
    }

    fn paste<R: Rng + ?Sized>(
        &mut self,
        bank: &InstanceBank,
        index: usize,
        dest: BoundingBox,
        scale: f64,
        method: BlendMethod,
        rng: &mut R,
    ) -> Result<&mut PasteRecord> {
        let inst = bank.get(index);
        let out = blend(&self.image, inst, &dest, method, rng)?;
        self.image = out.image;
        self.annotation.objects.push(AnnotatedObject {
            category: inst.category.clone(),
            bbox: out.placed_box,
            difficult: false,
        });
        self.pasted.push(PasteRecord {
            category: inst.category.clone(),
            bbox: out.placed_box,
            dest_box: dest,
            candidate: None,
            score: None,
            scale,
            bank_index: Some(index),
            instance_source_image_id: inst.source_image_id.clone(),
            instance_source_object_index: inst.source_object_index,
            blend: out.method,
        });
        Ok(self.pasted.last_mut().expect("just pushed"))
    }

    fn finish(self, mode: AugmentMode, seed: u64) -> AugmentedRecord {
        let source_image_id = self.annotation.image_id.clone();
        AugmentedRecord {
            image: self.image,
            annotation: self.annotation,
            provenance: Provenance {
                source_image_id,
                mode,
                seed,
                augmented: true,
                pasted: self.pasted,
            },
        }
    }
}

/// Context or random augmentation of one image.
pub fn augment_image<R: Rng + ?Sized>(
    rec: &LabeledImage,
    res: &Resources<'_>,
    cfg: &AugmentationConfig,
    mode: AugmentMode,
    rng: &mut R,
) -> Result<AugmentedRecord> {
    if let Some(t) = &cfg.target_category {
        if res.bank.indices_of(t)?.is_empty() {
            return Err(Error::UnknownCategory(t.clone()));
        }
        if rec.annotation.has_category(t) {
            return Ok(AugmentedRecord::unchanged(rec, mode, cfg.seed));
        }
    }
    if res.bank.is_empty() {
        return Err(Error::validation("instance bank is empty"));
    }
    if rng.random::<f64>() >= cfg.paste_probability {
        return Ok(AugmentedRecord::unchanged(rec, mode, cfg.seed));
    }
    let mut canvas = Canvas::new(rec);
    match mode {
        AugmentMode::Context => context_pastes(rec, res, cfg, &mut canvas, rng)?,
        AugmentMode::Random => random_pastes(rec, res.bank, cfg, &mut canvas, rng)?,
        _ => {
            return Err(Error::validation(format!(
                "{mode:?} is a dataset-level mode, not a per-image one"
            )))
        }
    }
    Ok(canvas.finish(mode, cfg.seed))
}

fn context_pastes<R: Rng + ?Sized>(
    rec: &LabeledImage,
    res: &Resources<'_>,
    cfg: &AugmentationConfig,
    canvas: &mut Canvas,
    rng: &mut R,
) -> Result<()> {
    let scorer = res
        .scorer
        .ok_or_else(|| Error::validation("context mode needs a scorer"))?;
    let hist = res
        .histogram
        .ok_or_else(|| Error::validation("context mode needs a shape histogram"))?;
    let gt: Vec<BoundingBox> = rec.annotation.boxes().copied().collect();
    let (_, ranked) = ranked_placements(&rec.image, &gt, hist, scorer, cfg, rng)?;
    let mut used: Vec<BoundingBox> = Vec::new();
    let mut attempts = 0;
    for p in ranked {
        if used.len() == cfg.max_instances || attempts == cfg.max_instances * 3 {
            break;
        }
        if overlaps(&p.bbox, used.iter().copied(), cfg.gt_overlap_max) {
            continue;
        }
        attempts += 1;
        let Some(m) = res.bank.match_instance(&cfg.match_query(p.bbox), &p.category, rng)? else {
            log::debug!("{}: no instance of {} fits {:?}", rec.annotation.image_id, p.category, p.bbox);
            continue;
        };
        let (cx, cy) = p.bbox.center();
        let dest = BoundingBox::centered(
            cx,
            cy,
            m.instance.width() as f64 * m.scale,
            m.instance.height() as f64 * m.scale,
        )?;
        let (index, scale) = (m.index, m.scale);
        let record = canvas.paste(res.bank, index, dest, scale, cfg.blend, rng)?;
        record.candidate = Some(p.bbox);
        record.score = Some(p.score);
        used.push(p.bbox);
    }
    Ok(())
}

/// Uniform top-left corner for a `w × h` box inside the image.
fn uniform_box<R: Rng + ?Sized>(w: f64, h: f64, width: u32, height: u32, rng: &mut R) -> BoundingBox {
    let x0 = rng.random::<f64>() * (width as f64 - w).max(0.0);
    let y0 = rng.random::<f64>() * (height as f64 - h).max(0.0);
    BoundingBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

/// Largest scale not above `scale` at which a `w × h` cutout fits.
fn fit_scale(w: f64, h: f64, scale: f64, width: u32, height: u32) -> f64 {
    scale.min(width as f64 / w).min(height as f64 / h)
}

fn random_pastes<R: Rng + ?Sized>(
    rec: &LabeledImage,
    bank: &InstanceBank,
    cfg: &AugmentationConfig,
    canvas: &mut Canvas,
    rng: &mut R,
) -> Result<()> {
    let (width, height) = rec.image.dimensions();
    let categories: Vec<&str> = bank.categories().collect();
    let count = rng.random_range(1..=cfg.max_instances);
    let mut avoid: Vec<BoundingBox> = rec.annotation.boxes().copied().collect();
    for _ in 0..count {
        let category = match &cfg.target_category {
            Some(t) => t.as_str(),
            None => categories[rng.random_range(0..categories.len())],
        };
        let pool = bank.indices_of(category)?;
        let index = pool[rng.random_range(0..pool.len())];
        let inst = bank.get(index);
        let (lo, hi) = cfg.random_scale_range;
        let drawn = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let (w, h) = (inst.width() as f64, inst.height() as f64);
        let scale = fit_scale(w, h, drawn, width, height);
        let mut dest = uniform_box(w * scale, h * scale, width, height, rng);
        for _ in 1..RANDOM_PLACEMENT_TRIES {
            if !overlaps(&dest, avoid.iter().copied(), cfg.gt_overlap_max) {
                break;
            }
            dest = uniform_box(w * scale, h * scale, width, height, rng);
        }
        let record = canvas.paste(bank, index, dest, scale, cfg.blend, rng)?;
        avoid.push(record.bbox);
    }
    Ok(())
}

/// Re-pastes every masked object scaled by a factor from `enlarge_range`
/// around its own center, so it covers the original instance.
pub fn enlarge_reblend<R: Rng + ?Sized>(
    rec: &LabeledImage,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedRecord> {
    let masks = rec.masks.as_ref().ok_or_else(|| {
        Error::validation(format!("{}: enlarge-reblend needs instance masks", rec.annotation.image_id))
    })?;
    let ann = &rec.annotation;
    let (width, height) = rec.image.dimensions();
    let mut canvas = Canvas::new(rec);
    for (i, (obj, mask)) in ann.objects.iter().zip(masks).enumerate() {
        if mask.count() == 0 {
            continue;
        }
        let cut = extract_instance(&rec.image, mask, &obj.category, &ann.image_id, i)?;
        let (lo, hi) = cfg.enlarge_range;
        let factor = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let (cx, cy) = cut.tight_box.center();
        let dest = BoundingBox::centered(
            cx,
            cy,
            cut.tight_box.width() * factor,
            cut.tight_box.height() * factor,
        )?;
        let out = blend(&canvas.image, &cut, &dest, cfg.blend, rng)?;
        canvas.image = out.image;
        let enlarged = enlarged_box(&obj.bbox, factor, width, height);
        canvas.annotation.objects[i].bbox = enlarged;
        canvas.pasted.push(PasteRecord {
            category: obj.category.clone(),
            bbox: enlarged,
            dest_box: dest,
            candidate: None,
            score: None,
            scale: factor,
            bank_index: None,
            instance_source_image_id: ann.image_id.clone(),
            instance_source_object_index: i,
            blend: out.method,
        });
    }
    Ok(canvas.finish(AugmentMode::Enlarge, cfg.seed))
}

/// `b` scaled by `factor` about its center, rounded outward and clipped.
pub fn enlarged_box(b: &BoundingBox, factor: f64, width: u32, height: u32) -> BoundingBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.width() * factor, b.height() * factor);
    let e = BoundingBox {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
    };
    e.round_outward().clip(width, height).expect("contains the original box")
}

/// Drops every image containing `category` and pastes each of the
/// category's bank instances onto its own background image, at a uniform
/// location. Background images are all kept.
pub fn remove_context(
    images: &[LabeledImage],
    category: &str,
    bank: &InstanceBank,
    cfg: &AugmentationConfig,
) -> Result<Vec<AugmentedRecord>> {
    let instances = bank.indices_of(category)?;
    let negatives: Vec<&LabeledImage> = images
        .iter()
        .filter(|r| !r.annotation.has_category(category))
        .collect();
    if negatives.len() < instances.len() {
        return Err(Error::validation(format!(
            "{} instances of {category} but only {} background images",
            instances.len(),
            negatives.len()
        )));
    }
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.shuffle(&mut seeding::stream(cfg.seed, "remove-context"));
    let mut assigned = vec![None; negatives.len()];
    for (&inst, &slot) in instances.iter().zip(&order) {
        assigned[slot] = Some(inst);
    }
    let jobs: Vec<(&LabeledImage, Option<usize>)> = negatives.into_iter().zip(assigned).collect();
    par::map(&jobs, |&(rec, inst)| {
        let Some(index) = inst else {
            return Ok(AugmentedRecord::unchanged(rec, AugmentMode::RemoveContext, cfg.seed));
        };
        let mut rng = seeding::stream(cfg.seed, &rec.annotation.image_id);
        let (width, height) = rec.image.dimensions();
        let cut = bank.get(index);
        let (w, h) = (cut.width() as f64, cut.height() as f64);
        let scale = fit_scale(w, h, 1.0, width, height);
        let dest = uniform_box(w * scale, h * scale, width, height, &mut rng);
        let mut canvas = Canvas::new(rec);
        canvas.paste(bank, index, dest, scale, cfg.blend, &mut rng)?;
        Ok(canvas.finish(AugmentMode::RemoveContext, cfg.seed))
    })
    .into_iter()
    .collect()
}

/// Augments each image with its own stream derived from (seed, image id).
pub fn augment_images(
    images: &[LabeledImage],
    res: &Resources<'_>,
    cfg: &AugmentationConfig,
    mode: AugmentMode,
) -> Result<Vec<AugmentedRecord>> {
    cfg.validate()?;
    match mode {
        AugmentMode::RemoveContext => {
            let category = cfg
                .target_category
                .as_deref()
                .ok_or_else(|| Error::validation("remove-context needs a category"))?;
            remove_context(images, category, res.bank, cfg)
        }
        AugmentMode::Enlarge => par::map(images, |rec| {
            enlarge_reblend(rec, cfg, &mut seeding::stream(cfg.seed, &rec.annotation.image_id))
        })
        .into_iter()
        .collect(),
        AugmentMode::Context | AugmentMode::Random => par::map(images, |rec| {
            let mut rng = seeding::stream(cfg.seed, &rec.annotation.image_id);
            augment_image(rec, res, cfg, mode, &mut rng)
        })
        .into_iter()
        .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub images_written: usize,
    pub images_augmented: usize,
    pub objects_pasted: usize,
}

/// Augments a dataset on disk and writes the result in VOC layout with
/// provenance sidecars.
pub fn augment_dataset(
    dataset: &VocDataset,
    res: &Resources<'_>,
    cfg: &AugmentationConfig,
    mode: AugmentMode,
    out_dir: &Path,
) -> Result<AugmentSummary> {
    cfg.validate()?;
    let mut summary = AugmentSummary::default();
    let mut write = |records: Vec<AugmentedRecord>| -> Result<()> {
        for r in &records {
            write_augmented(r, out_dir)?;
            summary.images_written += 1;
            summary.images_augmented += r.provenance.augmented as usize;
            summary.objects_pasted += r.provenance.pasted.len();
        }
        Ok(())
    };
    if mode == AugmentMode::RemoveContext {
        // needs the whole dataset to pair instances with backgrounds
        let images = dataset.load_all()?;
        write(augment_images(&images, res, cfg, mode)?)?;
        return Ok(summary);
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let images = par::map(chunk, |&i| dataset.load(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        write(augment_images(&images, res, cfg, mode)?)?;
    }
    Ok(summary)
}
