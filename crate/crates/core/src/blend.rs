//! Compositing a cutout into a scene: hard paste, feathered alpha (linear
//! ramp or Gaussian), motion blur of the whole result, or Poisson blending.

use std::f64::consts::PI;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::InstanceCutout;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{sample_bilinear, to_u8, AlphaMap, Grid, Mask};

pub const DEFAULT_RAMP_WIDTH: f64 = 5.0;
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const MOTION_LENGTHS: std::ops::RangeInclusive<u32> = 3..=9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BlendMethod {
    None,
    LinearRamp { width: f64 },
    GaussianAlpha { sigma: f64 },
    MotionBlur { length: u32, angle: f64 },
    Poisson { tol: f64, max_iter: usize },
    /// One of the first four, drawn per paste.
    Random,
}

impl BlendMethod {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BlendMethod::LinearRamp { width } => width >= 1.0,
            BlendMethod::GaussianAlpha { sigma } => sigma > 0.0 && sigma.is_finite(),
            BlendMethod::MotionBlur { length, angle } => length >= 1 && angle.is_finite(),
            BlendMethod::Poisson { tol, .. } => tol > 0.0,
            BlendMethod::None | BlendMethod::Random => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid blend method {self:?}")))
        }
    }

    /// Resolves `Random` to a concrete method; other methods pass through.
    pub fn resolve<R: Rng + ?Sized>(self, rng: &mut R) -> Self {
        if self != BlendMethod::Random {
            return self;
        }
        match rng.random_range(0..4) {
            0 => BlendMethod::None,
            1 => BlendMethod::LinearRamp {
                width: DEFAULT_RAMP_WIDTH,
            },
            2 => BlendMethod::GaussianAlpha {
                sigma: DEFAULT_SIGMA,
            },
            _ => BlendMethod::MotionBlur {
                length: rng.random_range(MOTION_LENGTHS),
                angle: rng.random_range(0.0..PI),
            },
        }
    }

    /// Parses the CLI spelling: `none`, `linear[:w]`, `gaussian[:sigma]`,
    /// `motion[:len[:angle]]`, `poisson[:tol[:max_iter]]`, `random`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            args.get(i).map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::validation(format!("bad number {a:?} in blend {s:?}")))
            })
        };
        let method = match name {
            "none" => BlendMethod::None,
            "linear" => BlendMethod::LinearRamp {
                width: num(0, DEFAULT_RAMP_WIDTH)?,
            },
            "gaussian" => BlendMethod::GaussianAlpha {
                sigma: num(0, DEFAULT_SIGMA)?,
            },
            "motion" => BlendMethod::MotionBlur {
                length: num(0, 5.0)? as u32,
                angle: num(1, 0.0)?,
            },
            "poisson" => BlendMethod::Poisson {
                tol: num(0, 0.5)?,
                max_iter: num(1, 2000.0)? as usize,
            },
            "random" => BlendMethod::Random,
            _ => return Err(Error::validation(format!("unknown blend method {s:?}"))),
        };
        method.validate()?;
        Ok(method)
    }
}

/// Euclidean distance from each mask pixel to the nearest non-mask pixel
/// center; 0 outside the mask. Pixels beyond the image count as outside.
pub fn distance_transform(mask: &Mask) -> Grid<f64> {
    let (w, h) = mask.dimensions();
    let (pw, ph) = (w as usize + 2, h as usize + 2);
    const INF: f64 = 1e20;
    let mut f = vec![0.0; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if *mask.get(x, y) {
                f[(y as usize + 1) * pw + x as usize + 1] = INF;
            }
        }
    }
    let mut line = Vec::new();
    for y in 0..ph {
        line.clear();
        line.extend_from_slice(&f[y * pw..(y + 1) * pw]);
        let d = edt_1d(&line);
        f[y * pw..(y + 1) * pw].copy_from_slice(&d);
    }
    for x in 0..pw {
        line.clear();
        line.extend((0..ph).map(|y| f[y * pw + x]));
        for (y, v) in edt_1d(&line).into_iter().enumerate() {
            f[y * pw + x] = v;
        }
    }
    Grid::from_fn(w, h, |x, y| f[(y as usize + 1) * pw + x as usize + 1].sqrt())
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// `clamp(distance / width, 0, 1)`.
pub fn ramp(distance: f64, width: f64) -> f64 {
    (distance / width).clamp(0.0, 1.0)
}

pub fn linear_alpha(mask: &Mask, width: f64) -> AlphaMap {
    distance_transform(mask).map(|&d| ramp(d, width))
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// The {0,1} mask convolved with a normalized Gaussian; zero beyond the grid.
pub fn gaussian_alpha(mask: &Mask, sigma: f64) -> AlphaMap {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = mask.dimensions();
    let rows = Grid::from_fn(w, h, |x, y| {
        (-r..=r)
            .filter(|&o| matches!(mask.get_signed(x as i64 + o, y as i64), Some(true)))
            .map(|o| k[(o + r) as usize])
            .sum::<f64>()
    });
    Grid::from_fn(w, h, |x, y| {
        let v: f64 = (-r..=r)
            .filter_map(|o| rows.get_signed(x as i64, y as i64 + o).map(|v| v * k[(o + r) as usize]))
            .sum();
        v.clamp(0.0, 1.0)
    })
}

/// `out = α·src + (1−α)·bg` over the patch placed at `origin`, rounded
/// half-up. Pixels with α = 0 are left untouched.
pub fn alpha_composite(
    background: &mut RgbImage,
    source: &RgbImage,
    origin: (u32, u32),
    alpha: &AlphaMap,
) -> Result<()> {
    let (sw, sh) = source.dimensions();
    if alpha.dimensions() != (sw, sh) {
        return Err(Error::validation("alpha map and source differ in size"));
    }
    let (bw, bh) = background.dimensions();
    if origin.0 as u64 + sw as u64 > bw as u64 || origin.1 as u64 + sh as u64 > bh as u64 {
        return Err(Error::validation(format!(
            "{sw}x{sh} patch at {origin:?} does not fit a {bw}x{bh} image"
        )));
    }
    for y in 0..sh {
        for x in 0..sw {
            let a = *alpha.get(x, y);
            if a <= 0.0 {
                continue;
            }
            let s = source.get_pixel(x, y).0;
            let b = background.get_pixel_mut(origin.0 + x, origin.1 + y);
            for c in 0..3 {
                b.0[c] = to_u8(a * s[c] as f64 + (1.0 - a) * b.0[c] as f64);
            }
        }
    }
    Ok(())
}

/// Integer taps of a box kernel of `length` rasterized along `angle`.
pub fn motion_offsets(length: u32, angle: f64) -> Vec<(i64, i64)> {
    let (s, c) = angle.sin_cos();
    (0..length)
        .map(|i| {
            let t = i as f64 - (length as f64 - 1.0) / 2.0;
            ((t * c + 0.5).floor() as i64, (t * s + 0.5).floor() as i64)
        })
        .collect()
}

/// Mean over the kernel taps with edge clamping.
pub fn motion_blur(img: &RgbImage, length: u32, angle: f64) -> RgbImage {
    if length <= 1 {
        return img.clone();
    }
    let taps = motion_offsets(length, angle);
    let (w, h) = img.dimensions();
    let n = taps.len() as f64;
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        for &(dx, dy) in &taps {
            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
            let p = img.get_pixel(sx, sy).0;
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        image::Rgb(acc.map(|v| to_u8(v / n)))
    })
}

/// The 5-point Poisson system for one channel on the pixels of `mask`.
///
/// Unknowns are the mask pixels in row-major order. Neighbors outside the
/// mask take the background value; neighbors outside the image replicate
/// the border, which keeps the problem well posed when the mask touches it.
#[derive(Clone, Debug)]
pub struct PoissonSystem {
    pub domain: Vec<(u32, u32)>,
    /// Index into `domain` for each neighbor (left, right, up, down), or
    /// `None` when the neighbor is fixed.
    neighbors: Vec<[Option<usize>; 4]>,
    /// Right-hand side: guidance Laplacian plus fixed neighbor values.
    pub rhs: Vec<f64>,
}

impl PoissonSystem {
    pub fn new(background: &RgbImage, source: &RgbImage, mask: &Mask, channel: usize) -> Result<Self> {
        let (w, h) = background.dimensions();
        if source.dimensions() != (w, h) || mask.dimensions() != (w, h) {
            return Err(Error::validation("Poisson inputs differ in size"));
        }
        let mut index = Grid::filled(w, h, usize::MAX);
        let mut domain = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if *mask.get(x, y) {
                    index.set(x, y, domain.len());
                    domain.push((x, y));
                }
            }
        }
        if domain.is_empty() {
            return Err(Error::validation("Poisson mask is empty"));
        }
        let g = |x: u32, y: u32| source.get_pixel(x, y).0[channel] as f64;
        let bg = |x: u32, y: u32| background.get_pixel(x, y).0[channel] as f64;
        let mut neighbors = Vec::with_capacity(domain.len());
        let mut rhs = Vec::with_capacity(domain.len());
        for &(x, y) in &domain {
            let mut nb = [None; 4];
            let mut b = 0.0;
            let steps = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
            for (slot, (dx, dy)) in steps.into_iter().enumerate() {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                let inside = nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64;
                let (qx, qy) = if inside { (nx as u32, ny as u32) } else { (x, y) };
                b += g(x, y) - g(qx, qy);
                match index.get(qx, qy) {
                    &i if inside && i != usize::MAX => nb[slot] = Some(i),
                    _ => b += bg(qx, qy),
                }
            }
            neighbors.push(nb);
            rhs.push(b);
        }
        Ok(Self {
            domain,
            neighbors,
            rhs,
        })
    }

    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    /// `A·f` with `A = 4I − adjacency`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| 4.0 * f[i] - nb.iter().flatten().map(|&j| f[j]).sum::<f64>())
            .collect()
    }

    pub fn residual(&self, f: &[f64]) -> Vec<f64> {
        self.apply(f)
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| b - a)
            .collect()
    }

    pub fn max_residual(&self, f: &[f64]) -> f64 {
        self.residual(f).iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `½ fᵀAf − fᵀb`, minimized by the solution.
    pub fn energy(&self, f: &[f64]) -> f64 {
        let af = self.apply(f);
        (0..f.len())
            .map(|i| 0.5 * f[i] * af[i] - f[i] * self.rhs[i])
            .sum()
    }

    pub fn gauss_seidel_sweep(&self, f: &mut [f64]) {
        for i in 0..f.len() {
            let s: f64 = self.neighbors[i].iter().flatten().map(|&j| f[j]).sum();
            f[i] = (self.rhs[i] + s) / 4.0;
        }
    }

    /// Returns (iterations, converged).
    pub fn solve_gauss_seidel(&self, f: &mut [f64], tol: f64, max_iter: usize) -> (usize, bool) {
        for it in 0..max_iter {
            if self.max_residual(f) <= tol {
                return (it, true);
            }
            self.gauss_seidel_sweep(f);
        }
        (max_iter, self.max_residual(f) <= tol)
    }

    /// Conjugate gradients; the stopping test uses the recomputed residual.
    pub fn solve_cg(&self, f: &mut [f64], tol: f64, max_iter: usize) -> (usize, bool) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut r = self.residual(f);
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        for it in 0..max_iter {
            if r.iter().all(|v| v.abs() <= tol) {
                return (it, true);
            }
            let ap = self.apply(&p);
            let alpha = rr / dot(&p, &ap);
            for i in 0..f.len() {
                f[i] += alpha * p[i];
            }
            // recompute periodically to avoid drift in the stopping test
            if it % 50 == 49 {
                r = self.residual(f);
            } else {
                for i in 0..r.len() {
                    r[i] -= alpha * ap[i];
                }
            }
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            rr = rr_next;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
        }
        let ok = self.max_residual(f) <= tol;
        (max_iter, ok)
    }
}

#[derive(Clone, Debug)]
pub struct PoissonResult {
    pub image: RgbImage,
    /// Per channel, the unclamped solution over `domain`.
    pub solution: [Vec<f64>; 3],
    pub domain: Vec<(u32, u32)>,
    pub converged: bool,
    pub iterations: usize,
    pub max_residual: f64,
}

/// Seamless cloning of `source` into `background` on `mask` (all three in
/// the same frame). Non-convergence is reported on the result.
pub fn poisson_blend(
    background: &RgbImage,
    source: &RgbImage,
    mask: &Mask,
    tol: f64,
    max_iter: usize,
) -> Result<PoissonResult> {
    if tol <= 0.0 {
        return Err(Error::validation("Poisson tolerance must be positive"));
    }
    let mut out = background.clone();
    let mut solution: [Vec<f64>; 3] = Default::default();
    let mut domain = Vec::new();
    let (mut converged, mut iterations, mut max_residual) = (true, 0, 0.0f64);
    for c in 0..3 {
        let sys = PoissonSystem::new(background, source, mask, c)?;
        // start from the source so a few iterations already look right
        let mut f: Vec<f64> = sys
            .domain
            .iter()
            .map(|&(x, y)| source.get_pixel(x, y).0[c] as f64)
            .collect();
        let (it, ok) = sys.solve_cg(&mut f, tol, max_iter);
        converged &= ok;
        iterations = iterations.max(it);
        max_residual = max_residual.max(sys.max_residual(&f));
        for (&(x, y), v) in sys.domain.iter().zip(&f) {
            out.get_pixel_mut(x, y).0[c] = to_u8(*v);
        }
        solution[c] = f;
        domain = sys.domain;
    }
    if !converged {
        log::warn!("Poisson blend stopped at {iterations} iterations, residual {max_residual:.3e}");
    }
    Ok(PoissonResult {
        image: out,
        solution,
        domain,
        converged,
        iterations,
        max_residual,
    })
}

/// A cutout resampled onto the pixels of a destination box.
#[derive(Clone, Debug)]
pub struct Placement {
    /// Top-left pixel of the patch in the image.
    pub origin: (u32, u32),
    pub patch: RgbImage,
    pub mask: Mask,
}

impl Placement {
    /// Tight box of the placed mask in image coordinates.
    pub fn placed_box(&self) -> Option<BoundingBox> {
        let b = self.mask.tight_box()?;
        let (ox, oy) = (self.origin.0 as f64, self.origin.1 as f64);
        Some(BoundingBox {
            x0: b.x0 + ox,
            y0: b.y0 + oy,
            x1: b.x1 + ox,
            y1: b.y1 + oy,
        })
    }
}

/// Scales `cutout` so its crop spans `dest`. Covers the image pixels whose
/// centers fall inside `dest` (a box reaching past the border is cut off);
/// colors are bilinear, the mask is nearest.
pub fn place_cutout(cutout: &InstanceCutout, dest: &BoundingBox, width: u32, height: u32) -> Result<Placement> {
    let (x0, y0, x1, y1) = dest.pixel_span(width, height);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::validation(format!(
            "placement {dest:?} covers no pixel of the {width}x{height} image"
        )));
    }
    let (cw, ch) = (cutout.width(), cutout.height());
    let sx = cw as f64 / dest.width();
    let sy = ch as f64 / dest.height();
    let rgb = image::DynamicImage::ImageRgba8(cutout.rgba.clone()).to_rgb8();
    let (pw, ph) = (x1 - x0, y1 - y0);
    let src = |x: u32, y: u32| {
        (
            ((x0 + x) as f64 + 0.5 - dest.x0) * sx - 0.5,
            ((y0 + y) as f64 + 0.5 - dest.y0) * sy - 0.5,
        )
    };
    let patch = RgbImage::from_fn(pw, ph, |x, y| {
        let (u, v) = src(x, y);
        image::Rgb(sample_bilinear(&rgb, u, v).map(to_u8))
    });
    let mask = Mask::from_fn(pw, ph, |x, y| {
        let (u, v) = src(x, y);
        let ui = ((u + 0.5).floor() as i64).clamp(0, cw as i64 - 1) as u32;
        let vi = ((v + 0.5).floor() as i64).clamp(0, ch as i64 - 1) as u32;
        cutout.rgba.get_pixel(ui, vi).0[3] > 0
    });
    Ok(Placement {
        origin: (x0, y0),
        patch,
        mask,
    })
}

#[derive(Clone, Debug)]
pub struct BlendOutcome {
    pub image: RgbImage,
    /// The concrete method applied (never `Random`).
    pub method: BlendMethod,
    /// Tight box of the pasted pixels.
    pub placed_box: BoundingBox,
}

/// Pastes `cutout` scaled into `dest` of `background`.
pub fn blend<R: Rng + ?Sized>(
    background: &RgbImage,
    cutout: &InstanceCutout,
    dest: &BoundingBox,
    method: BlendMethod,
    rng: &mut R,
) -> Result<BlendOutcome> {
    method.validate()?;
    let (w, h) = background.dimensions();
    let placement = place_cutout(cutout, dest, w, h)?;
    let placed_box = placement
        .placed_box()
        .ok_or_else(|| Error::validation("placed instance has no visible pixel"))?;
    let method = method.resolve(rng);
    let mut image = background.clone();
    let hard = || placement.mask.map(|&m| if m { 1.0 } else { 0.0 });
    match method {
        BlendMethod::None => alpha_composite(&mut image, &placement.patch, placement.origin, &hard())?,
        BlendMethod::LinearRamp { width } => alpha_composite(
            &mut image,
            &placement.patch,
            placement.origin,
            &linear_alpha(&placement.mask, width),
        )?,
        BlendMethod::GaussianAlpha { sigma } => alpha_composite(
            &mut image,
            &placement.patch,
            placement.origin,
            &gaussian_alpha(&placement.mask, sigma),
        )?,
        BlendMethod::MotionBlur { length, angle } => {
            alpha_composite(&mut image, &placement.patch, placement.origin, &hard())?;
            image = motion_blur(&image, length, angle);
        }
        BlendMethod::Poisson { tol, max_iter } => {
            let mut source = background.clone();
            let mut full = Mask::filled(w, h, false);
            let (ox, oy) = placement.origin;
            for (x, y, p) in placement.patch.enumerate_pixels() {
                source.put_pixel(ox + x, oy + y, *p);
                full.set(ox + x, oy + y, *placement.mask.get(x, y));
            }
            image = poisson_blend(background, &source, &full, tol, max_iter)?.image;
        }
        BlendMethod::Random => unreachable!("resolved above"),
    }
    Ok(BlendOutcome {
        image,
        method,
        placed_box,
    })
}
