//! The database of segmented object cutouts and the rule matching them to
//! candidate boxes.
//!
//! An instance of size `w × h` matches a candidate of size `cw × ch` at scale
//! `s` when all of
//!
//! ```text
//! s·w ≤ cw,   s·h ≤ ch,   s²·w·h ≥ f·cw·ch,   lo ≤ s ≤ hi
//! ```
//!
//! hold, with `f` the minimum covered area fraction and `[lo, hi]` the allowed
//! rescaling range. The feasible set is an interval; its endpoints are
//! refined to the last floating-point value satisfying the constraints so
//! that interval membership and direct evaluation never disagree.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgba, RgbImage, RgbaImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::LabeledImage;
use crate::error::{Error, IoContext, Result};
use crate::geometry::BoundingBox;
use crate::par;
use crate::raster::Mask;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCutout {
    pub category: String,
    /// Tight crop of the source image; alpha is 255 on the mask, 0 elsewhere.
    pub rgba: RgbaImage,
    /// Crop location in source-image coordinates.
    pub tight_box: BoundingBox,
    pub source_image_id: String,
    pub source_object_index: usize,
}

impl InstanceCutout {
    pub fn width(&self) -> u32 {
        self.rgba.width()
    }

    pub fn height(&self) -> u32 {
        self.rgba.height()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_fn(self.width(), self.height(), |x, y| {
            self.rgba.get_pixel(x, y).0[3] > 0
        })
    }

    pub fn opaque_pixels(&self) -> usize {
        self.rgba.pixels().filter(|p| p.0[3] > 0).count()
    }
}

pub fn extract_instance(
    image: &RgbImage,
    mask: &Mask,
    category: &str,
    source_image_id: &str,
    source_object_index: usize,
) -> Result<InstanceCutout> {
    if mask.dimensions() != image.dimensions() {
        return Err(Error::validation("mask and image sizes differ"));
    }
    let tight = mask.tight_box().ok_or_else(|| {
        Error::validation(format!(
            "{source_image_id}: object {source_object_index} has an empty mask"
        ))
    })?;
    let (x0, y0) = (tight.x0 as u32, tight.y0 as u32);
    let (w, h) = (tight.width() as u32, tight.height() as u32);
    let rgba = RgbaImage::from_fn(w, h, |x, y| {
        let [r, g, b] = image.get_pixel(x0 + x, y0 + y).0;
        let a = if *mask.get(x0 + x, y0 + y) { 255 } else { 0 };
        Rgba([r, g, b, a])
    });
    Ok(InstanceCutout {
        category: category.to_string(),
        rgba,
        tight_box: tight,
        source_image_id: source_image_id.to_string(),
        source_object_index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchQuery {
    pub candidate: BoundingBox,
    pub scale_range: (f64, f64),
    pub min_area_fraction: f64,
}

impl MatchQuery {
    pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.5, 1.5);
    pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.8;

    pub fn new(candidate: BoundingBox) -> Self {
        Self {
            candidate,
            scale_range: Self::DEFAULT_SCALE_RANGE,
            min_area_fraction: Self::DEFAULT_MIN_AREA_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::validation(format!("bad scale range [{lo}, {hi}]")));
        }
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "min area fraction {} outside (0, 1]",
                self.min_area_fraction
            )));
        }
        Ok(())
    }
}

/// Scales at which a `w × h` instance fits the query's candidate, or `None`.
pub fn feasible_scale_interval(w: f64, h: f64, q: &MatchQuery) -> Option<(f64, f64)> {
    let (cw, ch) = (q.candidate.width(), q.candidate.height());
    let (range_lo, range_hi) = q.scale_range;
    let target = q.min_area_fraction * cw * ch;
    let fits = |s: f64| s * w <= cw && s * h <= ch && s <= range_hi;
    let covers = |s: f64| s * s * w * h >= target && s >= range_lo;

    let mut hi = (cw / w).min(ch / h).min(range_hi);
    let mut lo = (target / (w * h)).sqrt().max(range_lo);
    if !(hi.is_finite() && lo.is_finite()) {
        return None;
    }
    while hi > 0.0 && !fits(hi) {
        hi = hi.next_down();
    }
    while fits(hi.next_up()) {
        hi = hi.next_up();
    }
    while !covers(lo) {
        lo = lo.next_up();
    }
    while covers(lo.next_down()) {
        lo = lo.next_down();
    }
    (lo <= hi).then_some((lo, hi))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    category: String,
    w: u32,
    h: u32,
    source_image_id: String,
    source_object_index: usize,
    #[serde(default)]
    x0: f64,
    #[serde(default)]
    y0: f64,
}

/// Immutable collection of cutouts grouped by category.
#[derive(Clone, Debug, Default)]
pub struct InstanceBank {
    instances: Vec<InstanceCutout>,
    by_category: BTreeMap<String, Vec<usize>>,
}

/// A matched instance together with the sampled scale.
#[derive(Clone, Copy, Debug)]
pub struct Match<'a> {
    pub index: usize,
    pub instance: &'a InstanceCutout,
    pub scale: f64,
    pub interval: (f64, f64),
}

impl InstanceBank {
    pub fn from_instances(instances: Vec<InstanceCutout>) -> Self {
        let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            by_category.entry(inst.category.clone()).or_default().push(i);
        }
        Self {
            instances,
            by_category,
        }
    }

    /// Cuts every non-difficult object that has a mask.
    pub fn build(images: &[LabeledImage]) -> Result<Self> {
        let mut instances = Vec::new();
        for rec in images {
            let Some(masks) = &rec.masks else { continue };
            let ann = &rec.annotation;
            for (i, (obj, mask)) in ann.objects.iter().zip(masks).enumerate() {
                if obj.difficult {
                    continue;
                }
                instances.push(extract_instance(
                    &rec.image,
                    mask,
                    &obj.category,
                    &ann.image_id,
                    i,
                )?);
            }
        }
        Ok(Self::from_instances(instances))
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[InstanceCutout] {
        &self.instances
    }

    pub fn get(&self, index: usize) -> &InstanceCutout {
        &self.instances[index]
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.by_category.keys().map(String::as_str)
    }

    pub fn indices_of(&self, category: &str) -> Result<&[usize]> {
        self.by_category
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))
    }

    /// Picks uniformly among feasible instances of `category`, then a scale
    /// uniformly inside that instance's feasible interval.
    pub fn match_instance<R: Rng + ?Sized>(
        &self,
        q: &MatchQuery,
        category: &str,
        rng: &mut R,
    ) -> Result<Option<Match<'_>>> {
        q.validate()?;
        let feasible: Vec<(usize, (f64, f64))> = self
            .indices_of(category)?
            .iter()
            .filter_map(|&i| {
                let inst = &self.instances[i];
                feasible_scale_interval(inst.width() as f64, inst.height() as f64, q)
                    .map(|iv| (i, iv))
            })
            .collect();
        if feasible.is_empty() {
            return Ok(None);
        }
        let (index, interval) = feasible[rng.random_range(0..feasible.len())];
        let scale = if interval.0 < interval.1 {
            rng.random_range(interval.0..=interval.1)
        } else {
            interval.0
        };
        Ok(Some(Match {
            index,
            instance: &self.instances[index],
            scale,
            interval,
        }))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut entries = Vec::with_capacity(self.instances.len());
        for (n, inst) in self.instances.iter().enumerate() {
            let file = format!(
                "{:06}_{}_{}.png",
                n, inst.source_image_id, inst.source_object_index
            );
            let path = dir.join(&file);
            let mut buf = std::io::Cursor::new(Vec::new());
            inst.rgba.write_to(&mut buf, image::ImageFormat::Png)?;
            fs::write(&path, buf.get_ref()).at(&path)?;
            entries.push(IndexEntry {
                file,
                category: inst.category.clone(),
                w: inst.width(),
                h: inst.height(),
                source_image_id: inst.source_image_id.clone(),
                source_object_index: inst.source_object_index,
                x0: inst.tight_box.x0,
                y0: inst.tight_box.y0,
            });
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&entries)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let entries: Vec<IndexEntry> = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        let instances = par::map(&entries, |e| -> Result<InstanceCutout> {
            let p = dir.join(&e.file);
            let rgba = image::load_from_memory(&fs::read(&p).at(&p)?)?.to_rgba8();
            if rgba.dimensions() != (e.w, e.h) {
                return Err(Error::validation(format!(
                    "{}: expected {}x{}, found {:?}",
                    p.display(),
                    e.w,
                    e.h,
                    rgba.dimensions()
                )));
            }
            Ok(InstanceCutout {
                category: e.category.clone(),
                tight_box: BoundingBox::new(e.x0, e.y0, e.x0 + e.w as f64, e.y0 + e.h as f64)?,
                rgba,
                source_image_id: e.source_image_id.clone(),
                source_object_index: e.source_object_index,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_instances(instances))
    }
}
