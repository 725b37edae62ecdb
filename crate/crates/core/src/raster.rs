//! Small raster helpers shared by the sampling, blending and scoring code.

use image::{Rgb, RgbImage};

use crate::geometry::BoundingBox;

/// Dense row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Binary object mask.
pub type Mask = Grid<bool>;

/// Per-pixel opacity in `[0, 1]`.
pub type AlphaMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> T) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    /// Value at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> Option<&T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.get(x as u32, y as u32))
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Minimal half-open box containing every set pixel.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..self.height {
            for x in 0..self.width {
                if *self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > 0).then(|| BoundingBox::from_pixels(x0, y0, x1, y1))
    }
}

/// Rounds half-up and saturates to 8 bits.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous pixel coordinates (pixel centers sit on
/// integers), clamping at the image edges.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let xa = x.floor() as u32;
    let ya = y.floor() as u32;
    let xb = (xa + 1).min(w - 1);
    let yb = (ya + 1).min(h - 1);
    let fx = x - xa as f64;
    let fy = y - ya as f64;
    let p = |px: u32, py: u32| img.get_pixel(px, py).0;
    let (a, b, c, d) = (p(xa, ya), p(xb, ya), p(xa, yb), p(xb, yb));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Resamples the continuous region `region` of `img` into an
/// `out_w × out_h` image with bilinear interpolation.
pub fn resample_region(img: &RgbImage, region: &BoundingBox, out_w: u32, out_h: u32) -> RgbImage {
    let sx = region.width() / out_w as f64;
    let sy = region.height() / out_h as f64;
    RgbImage::from_fn(out_w, out_h, |i, j| {
        let x = region.x0 + (i as f64 + 0.5) * sx - 0.5;
        let y = region.y0 + (j as f64 + 0.5) * sy - 0.5;
        let v = sample_bilinear(img, x, y);
        Rgb([to_u8(v[0]), to_u8(v[1]), to_u8(v[2])])
    })
}
