//! Box arithmetic, IoU and the (aspect, relative scale) shape histogram.
//!
//! Boxes are half-open pixel rectangles `[x0, x1) × [y0, y1)` with real-valued
//! corners. A box's *shape* is the pair `(a, s)` with `a = width / height` and
//! `s = sqrt(area / image_area)`, so `s` is a linear size fraction.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate boxes whose clipped width or height is below this are rejected.
pub const MIN_BOX_SIDE: f64 = 8.0;

pub const HISTOGRAM_BINS: usize = 30;

const EDGE_PADDING: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::validation(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Integer pixel rectangle. Panics if empty.
    pub fn from_pixels(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        assert!(x1 > x0 && y1 > y0, "empty pixel rectangle");
        Self {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        }
    }

    /// Box of the given size centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Intersection over union with continuous areas.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn within_image(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }

    /// Intersection with `[0, width) × [0, height)`, `None` if empty.
    pub fn clip(&self, width: u32, height: u32) -> Option<Self> {
        Self::new(
            self.x0.max(0.0),
            self.y0.max(0.0),
            self.x1.min(width as f64),
            self.y1.min(height as f64),
        )
        .ok()
    }

    /// Smallest integer-cornered box containing this one.
    pub fn round_outward(&self) -> Self {
        Self {
            x0: self.x0.floor(),
            y0: self.y0.floor(),
            x1: self.x1.ceil(),
            y1: self.y1.ceil(),
        }
    }

    /// Pixel range `[x0, x1) × [y0, y1)` of pixels whose centers lie inside
    /// the box, clamped to the given raster size.
    pub fn pixel_span(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let lo = |v: f64, max: u32| ((v - 0.5).ceil().max(0.0) as u32).min(max);
        (
            lo(self.x0, width),
            lo(self.y0, height),
            lo(self.x1, width),
            lo(self.y1, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Debug for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Aspect ratio and relative scale of a box inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub aspect: f64,
    pub scale: f64,
}

pub fn shape_of(b: &BoundingBox, image_w: u32, image_h: u32) -> Shape {
    let image_area = image_w as f64 * image_h as f64;
    Shape {
        aspect: b.width() / b.height(),
        scale: (b.area() / image_area).sqrt(),
    }
}

/// Inverse of [`shape_of`]: a box of shape `(a, s)` centered at `center`,
/// clipped to the image. `None` when the clipped box has a side shorter than
/// [`MIN_BOX_SIDE`].
pub fn box_from_shape(
    shape: Shape,
    center: (f64, f64),
    image_w: u32,
    image_h: u32,
) -> Option<BoundingBox> {
    debug_assert!(shape.aspect > 0.0 && shape.scale > 0.0);
    let image_area = image_w as f64 * image_h as f64;
    let w = shape.scale * (image_area * shape.aspect).sqrt();
    let h = shape.scale * (image_area / shape.aspect).sqrt();
    let b = BoundingBox::centered(center.0, center.1, w, h).ok()?;
    let clipped = b.clip(image_w, image_h)?;
    (clipped.width() >= MIN_BOX_SIDE && clipped.height() >= MIN_BOX_SIDE).then_some(clipped)
}

/// How histogram edges are spaced along each axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binning {
    #[default]
    Linear,
    Log,
}

/// Normalized 30×30 joint histogram over (aspect, scale).
///
/// `bins` is row-major with the aspect index selecting the row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeHistogram {
    pub a_edges: Vec<f64>,
    pub s_edges: Vec<f64>,
    pub bins: Vec<f64>,
}

fn edges(values: impl Iterator<Item = f64>, binning: Binning) -> Vec<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = match binning {
        Binning::Linear => (lo - EDGE_PADDING, hi + EDGE_PADDING),
        Binning::Log => (lo.ln() - EDGE_PADDING, hi.ln() + EDGE_PADDING),
    };
    (0..=HISTOGRAM_BINS)
        .map(|i| {
            let t = lo + (hi - lo) * i as f64 / HISTOGRAM_BINS as f64;
            match binning {
                Binning::Linear => t,
                Binning::Log => t.exp(),
            }
        })
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    // edges are monotone; partition_point gives the first edge > v
    let i = edges.partition_point(|&e| e <= v);
    i.saturating_sub(1).min(HISTOGRAM_BINS - 1)
}

pub fn build_shape_histogram(shapes: &[Shape]) -> Result<ShapeHistogram> {
    build_shape_histogram_with(shapes, Binning::Linear)
}

pub fn build_shape_histogram_with(shapes: &[Shape], binning: Binning) -> Result<ShapeHistogram> {
    if shapes.is_empty() {
        return Err(Error::validation("cannot build a shape histogram from no boxes"));
    }
    if shapes
        .iter()
        .any(|s| !(s.aspect > 0.0 && s.scale > 0.0 && s.aspect.is_finite() && s.scale.is_finite()))
    {
        return Err(Error::validation("shapes must be positive and finite"));
    }
    let a_edges = edges(shapes.iter().map(|s| s.aspect), binning);
    let s_edges = edges(shapes.iter().map(|s| s.scale), binning);
    let mut bins = vec![0.0; HISTOGRAM_BINS * HISTOGRAM_BINS];
    for s in shapes {
        let ai = bin_of(&a_edges, s.aspect);
        let si = bin_of(&s_edges, s.scale);
        bins[ai * HISTOGRAM_BINS + si] += 1.0;
    }
    let n = shapes.len() as f64;
    bins.iter_mut().for_each(|w| *w /= n);
    Ok(ShapeHistogram {
        a_edges,
        s_edges,
        bins,
    })
}

impl ShapeHistogram {
    pub fn validate(&self) -> Result<()> {
        let n = HISTOGRAM_BINS;
        if self.a_edges.len() != n + 1 || self.s_edges.len() != n + 1 || self.bins.len() != n * n {
            return Err(Error::validation("shape histogram has wrong dimensions"));
        }
        let monotone = |e: &[f64]| e.windows(2).all(|w| w[1] > w[0]);
        if !monotone(&self.a_edges) || !monotone(&self.s_edges) {
            return Err(Error::validation("shape histogram edges must increase"));
        }
        if self.a_edges[0] <= 0.0 || self.s_edges[0] <= 0.0 {
            return Err(Error::validation("shape histogram edges must be positive"));
        }
        if self.bins.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::validation("negative histogram weight"));
        }
        let total: f64 = self.bins.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("histogram weights sum to {total}")));
        }
        Ok(())
    }

    pub fn weight(&self, a_bin: usize, s_bin: usize) -> f64 {
        self.bins[a_bin * HISTOGRAM_BINS + s_bin]
    }

    /// Draws a bin with probability equal to its weight, then a point
    /// uniformly inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Shape {
        let dist = WeightedIndex::new(&self.bins).expect("histogram has positive mass");
        let k = dist.sample(rng);
        let (ai, si) = (k / HISTOGRAM_BINS, k % HISTOGRAM_BINS);
        let aspect = rng.random_range(self.a_edges[ai]..self.a_edges[ai + 1]);
        let scale = rng.random_range(self.s_edges[si]..self.s_edges[si + 1]);
        Shape { aspect, scale }
    }
}

pub fn sample_shape<R: Rng + ?Sized>(hist: &ShapeHistogram, rng: &mut R) -> Shape {
    hist.sample(rng)
}
