//! Contextual samples: neighborhoods of a box with the box itself masked out,
//! resized to the scorer's input size.
//!
//! Positives come from ground-truth boxes. Backgrounds come from random boxes
//! whose shape follows the positive-box histogram and whose IoU with every
//! ground-truth box stays at or below a threshold; they are produced
//! `bg_ratio` times as often as positives.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{encode_png, ImageAnnotation, LabeledImage};
use crate::error::{Error, IoContext, Result};
use crate::geometry::{box_from_shape, build_shape_histogram, shape_of, BoundingBox, ShapeHistogram};
use crate::par;
use crate::raster::resample_region;
use crate::seeding::{self, StreamRng};

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.json";
pub const HISTOGRAM_FILE: &str = "histogram.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextGenParams {
    pub dilation_range: (f64, f64),
    pub contexts_per_box: usize,
    pub bg_ratio: usize,
    pub bg_iou_max: f64,
    pub out_size: u32,
    pub fill: [u8; 3],
    pub max_rejections: usize,
}

impl Default for ContextGenParams {
    fn default() -> Self {
        Self {
            dilation_range: (1.2, 2.0),
            contexts_per_box: 3,
            bg_ratio: 3,
            bg_iou_max: 0.3,
            out_size: 300,
            fill: [128, 128, 128],
            max_rejections: 1000,
        }
    }
}

impl ContextGenParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dilation_range;
        if !(lo > 1.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::validation(format!("bad dilation range [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.bg_iou_max) {
            return Err(Error::validation("bg_iou_max must lie in [0, 1)"));
        }
        if self.out_size == 0 || self.contexts_per_box == 0 || self.max_rejections == 0 {
            return Err(Error::validation(
                "out_size, contexts_per_box and max_rejections must be positive",
            ));
        }
        Ok(())
    }
}

/// A masked, resized neighborhood plus its class label (`K` = background).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualSample {
    pub pixels: RgbImage,
    /// Filled pixels, as an integer pixel rectangle in sample coordinates.
    pub masked_region: BoundingBox,
    pub label: usize,
    /// The masked box in source-image coordinates.
    pub source_box: BoundingBox,
}

/// Geometry of one neighborhood draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighborhood {
    pub dilation: (f64, f64),
    /// Where the box sits inside the enlarged window along each axis:
    /// 0 = flush left/top, 0.5 = centered, 1 = flush right/bottom.
    pub jitter: (f64, f64),
}

impl Neighborhood {
    pub fn draw<R: Rng + ?Sized>(params: &ContextGenParams, rng: &mut R) -> Self {
        let (lo, hi) = params.dilation_range;
        let mut d = || if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let dilation = (d(), d());
        let jitter = (rng.random::<f64>(), rng.random::<f64>());
        Self { dilation, jitter }
    }

    /// The (unclipped) window around `b`.
    pub fn window(&self, b: &BoundingBox) -> BoundingBox {
        let nw = b.width() * self.dilation.0;
        let nh = b.height() * self.dilation.1;
        let x0 = b.x0 - self.jitter.0 * (nw - b.width());
        let y0 = b.y0 - self.jitter.1 * (nh - b.height());
        BoundingBox {
            x0,
            y0,
            x1: x0 + nw,
            y1: y0 + nh,
        }
    }
}

/// Crops the neighborhood of `b`, fills `b`, and resizes to `out_size`.
pub fn masked_context(
    image: &RgbImage,
    b: &BoundingBox,
    hood: &Neighborhood,
    params: &ContextGenParams,
    label: usize,
) -> ContextualSample {
    let (w, h) = image.dimensions();
    let region = hood
        .window(b)
        .clip(w, h)
        .expect("window contains a box that lies inside the image");
    let out = params.out_size;
    let mut pixels = resample_region(image, &region, out, out);

    let sx = out as f64 / region.width();
    let sy = out as f64 / region.height();
    let inner = BoundingBox {
        x0: (b.x0 - region.x0) * sx,
        y0: (b.y0 - region.y0) * sy,
        x1: (b.x1 - region.x0) * sx,
        y1: (b.y1 - region.y0) * sy,
    };
    let (mut px0, mut py0, mut px1, mut py1) = inner.pixel_span(out, out);
    // keep at least one filled pixel for very thin boxes
    if px1 <= px0 {
        px0 = px0.min(out - 1);
        px1 = px0 + 1;
    }
    if py1 <= py0 {
        py0 = py0.min(out - 1);
        py1 = py0 + 1;
    }
    let fill = Rgb(params.fill);
    for y in py0..py1 {
        for x in px0..px1 {
            pixels.put_pixel(x, y, fill);
        }
    }
    ContextualSample {
        pixels,
        masked_region: BoundingBox::from_pixels(px0, py0, px1, py1),
        label,
        source_box: *b,
    }
}

pub fn positive_context<R: Rng + ?Sized>(
    image: &RgbImage,
    gt_box: &BoundingBox,
    label: usize,
    params: &ContextGenParams,
    rng: &mut R,
) -> Result<ContextualSample> {
    let (w, h) = image.dimensions();
    if !gt_box.within_image(w, h) {
        return Err(Error::validation(format!(
            "box {gt_box:?} lies outside the {w}x{h} image"
        )));
    }
    let hood = Neighborhood::draw(params, rng);
    Ok(masked_context(image, gt_box, &hood, params, label))
}

/// Rejection-samples a box with histogram shape, uniform center and IoU at
/// most `bg_iou_max` against every ground-truth box.
pub fn sample_background_box<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    gt: &[BoundingBox],
    hist: &ShapeHistogram,
    params: &ContextGenParams,
    rng: &mut R,
) -> Result<BoundingBox> {
    for _ in 0..params.max_rejections {
        let shape = hist.sample(rng);
        let center = (
            rng.random::<f64>() * width as f64,
            rng.random::<f64>() * height as f64,
        );
        let Some(b) = box_from_shape(shape, center, width, height) else {
            continue;
        };
        if gt.iter().all(|g| g.iou(&b) <= params.bg_iou_max) {
            return Ok(b);
        }
    }
    Err(Error::TooCrowded(params.max_rejections))
}

pub fn background_context<R: Rng + ?Sized>(
    image: &RgbImage,
    gt: &[BoundingBox],
    hist: &ShapeHistogram,
    background_label: usize,
    params: &ContextGenParams,
    rng: &mut R,
) -> Result<ContextualSample> {
    let (w, h) = image.dimensions();
    let b = sample_background_box(w, h, gt, hist, params, rng)?;
    let hood = Neighborhood::draw(params, rng);
    Ok(masked_context(image, &b, &hood, params, background_label))
}

fn class_index(classes: &[String], category: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == category)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))
}

/// Contexts generated from one image.
struct ImageContexts {
    samples: Vec<ContextualSample>,
    /// Backgrounds this image owed but could not produce.
    bg_deficit: usize,
}

fn image_contexts(
    rec: &LabeledImage,
    classes: &[String],
    hist: &ShapeHistogram,
    params: &ContextGenParams,
    seed: u64,
) -> Result<ImageContexts> {
    let ann = &rec.annotation;
    let mut rng = seeding::stream(seed, &ann.image_id);
    let gt: Vec<BoundingBox> = ann.boxes().copied().collect();
    let mut samples = Vec::new();
    for obj in ann.objects.iter().filter(|o| !o.difficult) {
        let label = class_index(classes, &obj.category)?;
        for _ in 0..params.contexts_per_box {
            samples.push(positive_context(&rec.image, &obj.bbox, label, params, &mut rng)?);
        }
    }
    let quota = samples.len() * params.bg_ratio;
    let background = classes.len();
    for produced in 0..quota {
        match background_context(&rec.image, &gt, hist, background, params, &mut rng) {
            Ok(s) => samples.push(s),
            Err(Error::TooCrowded(_)) => {
                log::debug!("{}: too crowded for backgrounds", ann.image_id);
                return Ok(ImageContexts {
                    samples,
                    bg_deficit: quota - produced,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ImageContexts {
        samples,
        bg_deficit: 0,
    })
}

/// Backgrounds owed by crowded images, drawn round-robin from the others.
fn fill_deficit(
    images: &[LabeledImage],
    mut deficit: usize,
    classes: &[String],
    hist: &ShapeHistogram,
    params: &ContextGenParams,
    seed: u64,
    mut emit: impl FnMut(ContextualSample) -> Result<()>,
) -> Result<()> {
    if deficit == 0 {
        return Ok(());
    }
    let mut rng = seeding::stream(seed, "background-deficit");
    let mut usable = vec![true; images.len()];
    while deficit > 0 {
        let mut progressed = false;
        for (i, rec) in images.iter().enumerate() {
            if deficit == 0 {
                break;
            }
            if !usable[i] {
                continue;
            }
            let gt: Vec<BoundingBox> = rec.annotation.boxes().copied().collect();
            match background_context(&rec.image, &gt, hist, classes.len(), params, &mut rng) {
                Ok(s) => {
                    emit(s)?;
                    deficit -= 1;
                    progressed = true;
                }
                Err(Error::TooCrowded(_)) => usable[i] = false,
                Err(e) => return Err(e),
            }
        }
        if !progressed {
            return Err(Error::TooCrowded(params.max_rejections));
        }
    }
    Ok(())
}

/// Shape histogram of every non-difficult ground-truth box.
pub fn dataset_histogram<'a>(anns: impl IntoIterator<Item = &'a ImageAnnotation>) -> Result<ShapeHistogram> {
    let shapes: Vec<_> = anns
        .into_iter()
        .flat_map(|a| {
            a.objects
                .iter()
                .filter(|o| !o.difficult)
                .map(move |o| shape_of(&o.bbox, a.width, a.height))
        })
        .collect();
    build_shape_histogram(&shapes)
}

fn count_positives(images: &[LabeledImage]) -> usize {
    images
        .iter()
        .map(|r| r.annotation.objects.iter().filter(|o| !o.difficult).count())
        .sum()
}

/// All contexts for a dataset, shuffled by `seed`.
///
/// Positives: `contexts_per_box` per non-difficult box. Backgrounds:
/// exactly `bg_ratio` times the positive count.
pub fn build_context_dataset(
    images: &[LabeledImage],
    classes: &[String],
    hist: &ShapeHistogram,
    params: &ContextGenParams,
    seed: u64,
) -> Result<Vec<ContextualSample>> {
    params.validate()?;
    if count_positives(images) == 0 {
        return Err(Error::validation("dataset has no ground-truth boxes"));
    }
    let per_image = par::map(images, |rec| image_contexts(rec, classes, hist, params, seed));
    let mut samples = Vec::new();
    let mut deficit = 0;
    for r in per_image {
        let r = r?;
        samples.extend(r.samples);
        deficit += r.bg_deficit;
    }
    fill_deficit(images, deficit, classes, hist, params, seed, |s| {
        samples.push(s);
        Ok(())
    })?;
    samples.shuffle(&mut seeding::stream(seed, "shuffle"));
    Ok(samples)
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub file: String,
    pub label: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl LabelRow {
    fn new(file: String, s: &ContextualSample) -> Self {
        let r = &s.masked_region;
        Self {
            file,
            label: s.label,
            x0: r.x0 as u32,
            y0: r.y0 as u32,
            x1: r.x1 as u32,
            y1: r.y1 as u32,
        }
    }

    pub fn masked_region(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}

/// Streams contexts to `out_dir` as PNGs plus `labels.csv`, `classes.json`
/// and `histogram.json`. Images are loaded and processed in chunks so memory
/// stays bounded for large datasets.
pub fn write_context_dataset(
    load: &(dyn Fn(usize) -> Result<LabeledImage> + Sync),
    n_images: usize,
    classes: &[String],
    hist: &ShapeHistogram,
    params: &ContextGenParams,
    seed: u64,
    out_dir: &Path,
) -> Result<usize> {
    params.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let chunk = (par::current_num_threads() * 4).max(1);
    let mut rows: Vec<LabelRow> = Vec::new();
    let mut deficit = 0usize;
    let mut positives = 0usize;
    let mut donors: Vec<usize> = Vec::new();

    let write_sample = |name: String, s: &ContextualSample| -> Result<LabelRow> {
        let path = out_dir.join(&name);
        fs::write(&path, encode_png(&s.pixels)?).at(&path)?;
        Ok(LabelRow::new(name, s))
    };

    for start in (0..n_images).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n_images)).collect();
        let results = par::map(&idx, |&i| -> Result<(usize, Vec<LabelRow>, usize, usize)> {
            let rec = load(i)?;
            let pos = rec.annotation.objects.iter().filter(|o| !o.difficult).count();
            let ctx = image_contexts(&rec, classes, hist, params, seed)?;
            let id = &rec.annotation.image_id;
            let rows = ctx
                .samples
                .iter()
                .enumerate()
                .map(|(k, s)| write_sample(format!("{id}_{k:04}.png"), s))
                .collect::<Result<Vec<_>>>()?;
            Ok((i, rows, ctx.bg_deficit, pos))
        });
        for r in results {
            let (i, r, d, pos) = r?;
            rows.extend(r);
            deficit += d;
            positives += pos * params.contexts_per_box;
            if d == 0 {
                donors.push(i);
            }
        }
    }
    if positives == 0 {
        return Err(Error::validation("dataset has no ground-truth boxes"));
    }
    if deficit > 0 {
        let donor_images = donors.iter().map(|&i| load(i)).collect::<Result<Vec<_>>>()?;
        let mut k = 0usize;
        fill_deficit(&donor_images, deficit, classes, hist, params, seed, |s| {
            rows.push(write_sample(format!("deficit_{k:06}.png"), &s)?);
            k += 1;
            Ok(())
        })?;
    }
    rows.shuffle(&mut seeding::stream(seed, "shuffle"));

    let path = out_dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().at(&path)?;
    let path = out_dir.join(CLASSES_FILE);
    fs::write(&path, serde_json::to_vec_pretty(classes)?).at(&path)?;
    let path = out_dir.join(HISTOGRAM_FILE);
    fs::write(&path, serde_json::to_vec(hist)?).at(&path)?;
    Ok(rows.len())
}

/// A context dataset on disk.
#[derive(Clone, Debug)]
pub struct ContextDatasetDir {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub rows: Vec<LabelRow>,
}

impl ContextDatasetDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(CLASSES_FILE);
        let classes: Vec<String> = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        let path = root.join(LABELS_FILE);
        let mut rdr = csv::Reader::from_path(&path)?;
        let rows = rdr.deserialize().collect::<Result<Vec<LabelRow>, _>>()?;
        if let Some(bad) = rows.iter().find(|r| r.label > classes.len()) {
            return Err(Error::validation(format!(
                "{}: label {} exceeds {} classes",
                bad.file,
                bad.label,
                classes.len()
            )));
        }
        Ok(Self {
            root,
            classes,
            rows,
        })
    }

    pub fn load_sample(&self, row: &LabelRow) -> Result<ContextualSample> {
        let path = self.root.join(&row.file);
        let pixels = image::load_from_memory(&fs::read(&path).at(&path)?)?.to_rgb8();
        let region = row.masked_region()?;
        Ok(ContextualSample {
            pixels,
            masked_region: region,
            label: row.label,
            source_box: region,
        })
    }

    pub fn histogram(&self) -> Result<Option<ShapeHistogram>> {
        let path = self.root.join(HISTOGRAM_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let h: ShapeHistogram = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        h.validate()?;
        Ok(Some(h))
    }
}

/// Draws a neighborhood with the given geometry, used by tests and by the
/// candidate scorer to mirror training-time inputs.
pub fn candidate_context(
    image: &RgbImage,
    candidate: &BoundingBox,
    params: &ContextGenParams,
    rng: &mut StreamRng,
) -> ContextualSample {
    let hood = Neighborhood::draw(params, rng);
    masked_context(image, candidate, &hood, params, usize::MAX)
}
