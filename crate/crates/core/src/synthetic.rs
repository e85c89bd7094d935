//! Geometrically mutated squares and the independence / continuity
//! measurement protocols.
//!
//! Coordinates are relative to the image center: `x = col − (W − 1)/2`,
//! `y = row − (H − 1)/2`. The seed image holds one axis-aligned square at the
//! center; every sample is the seed pushed through
//! scale → shear → rotate → translate.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::directions::DirectionBasis;
use crate::error::{Error, Result};
use crate::network::{Layer, Network};

pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_SIDE: f64 = 10.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Bilinear sub-samples per pixel side when rendering.
pub const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomParams {
    pub tx: f64,
    pub ty: f64,
    /// Degrees.
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
    pub shx: f64,
    pub shy: f64,
}

impl Default for GeomParams {
    fn default() -> Self {
        GeomParams {
            tx: 0.0,
            ty: 0.0,
            theta: 0.0,
            sx: 1.0,
            sy: 1.0,
            shx: 0.0,
            shy: 0.0,
        }
    }
}

impl GeomParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tx, self.ty, self.theta, self.sx, self.sy, self.shx, self.shy];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite geometric parameter".into()));
        }
        if self.sx <= 0.0 || self.sy <= 0.0 {
            return Err(Error::Domain(format!("scale factors must be positive, got ({}, {})", self.sx, self.sy)));
        }
        Ok(())
    }

    /// Linear part `R · Sh · S`.
    pub fn linear(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.to_radians().sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let shear = Matrix2::new(1.0, self.shx, self.shy, 1.0);
        let scale = Matrix2::new(self.sx, 0.0, 0.0, self.sy);
        rot * shear * scale
    }
}

/// Scale, shear, rotate, then translate `(i, j)`.
pub fn affine_map(p: &GeomParams, i: f64, j: f64) -> (f64, f64) {
    let (x, y) = (p.sx * i, p.sy * j);
    let (x, y) = (x + p.shx * y, p.shy * x + y);
    let (s, c) = p.theta.to_radians().sin_cos();
    let (x, y) = (x * c - y * s, x * s + y * c);
    (x + p.tx, y + p.ty)
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape("image pixels", height * width, pixels.len()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn from_vector(height: usize, width: usize, v: &DVector<f64>) -> Result<Self> {
        Image::new(height, width, v.iter().copied().collect())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.pixels)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Center-relative coordinates of pixel `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 - (self.width as f64 - 1.0) / 2.0,
            row as f64 - (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Bilinear sample at center-relative `(x, y)`; zero outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fc = x + (self.width as f64 - 1.0) / 2.0;
        let fr = y + (self.height as f64 - 1.0) / 2.0;
        let (c0, r0) = (fc.floor(), fr.floor());
        let (ac, ar) = (fc - c0, fr - r0);
        let at = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                0.0
            } else {
                self.get(r as usize, c as usize)
            }
        };
        (1.0 - ar) * ((1.0 - ac) * at(r0, c0) + ac * at(r0, c0 + 1.0))
            + ar * ((1.0 - ac) * at(r0 + 1.0, c0) + ac * at(r0 + 1.0, c0 + 1.0))
    }
}

/// The untransformed seed: a `side`-pixel square at the center.
pub fn seed_image(height: usize, width: usize, side: f64) -> Image {
    let mut img = Image::new(height, width, vec![0.0; height * width]).unwrap();
    for r in 0..height {
        for c in 0..width {
            let (x, y) = img.coords(r, c);
            if x.abs() < side / 2.0 && y.abs() < side / 2.0 {
                img.pixels[r * width + c] = 1.0;
            }
        }
    }
    img
}

/// Renders the seed square under `p` by inverse mapping with bilinear
/// interpolation of the seed raster, averaging a `SUPERSAMPLE`² grid of
/// samples inside each pixel.
pub fn render(p: &GeomParams, height: usize, width: usize) -> Result<Image> {
    render_with_side(p, height, width, DEFAULT_SIDE)
}

pub fn render_with_side(p: &GeomParams, height: usize, width: usize, side: f64) -> Result<Image> {
    if height < 8 || width < 8 {
        return Err(Error::Domain(format!("image must be at least 8x8, got {height}x{width}")));
    }
    p.validate()?;
    let inv = p
        .linear()
        .try_inverse()
        .ok_or_else(|| Error::Domain("geometric transform is singular".into()))?;
    let seed = seed_image(height, width, side);
    let mut out = Image::new(height, width, vec![0.0; height * width])?;
    let k = SUPERSAMPLE as f64;
    for r in 0..height {
        for c in 0..width {
            let (x, y) = out.coords(r, c);
            let mut acc = 0.0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let dx = (b as f64 + 0.5) / k - 0.5;
                    let dy = (a as f64 + 0.5) / k - 0.5;
                    let q = inv * Vector2::new(x + dx - p.tx, y + dy - p.ty);
                    acc += seed.sample(q.x, q.y);
                }
            }
            out.pixels[r * width + c] = (acc / (k * k)).clamp(0.0, 1.0);
        }
    }
    if out.pixels.iter().all(|&v| v < 1e-9) {
        return Err(Error::OutOfFrame);
    }
    Ok(out)
}

/// Whether all four corners of the transformed square stay inside the frame.
pub fn fully_inside(p: &GeomParams, height: usize, width: usize, side: f64) -> bool {
    let h = side / 2.0;
    [(-h, -h), (-h, h), (h, -h), (h, h)].iter().all(|&(i, j)| {
        let (x, y) = affine_map(p, i, j);
        x.abs() <= width as f64 / 2.0 - 0.5 && y.abs() <= height as f64 / 2.0 - 0.5
    })
}

// ---------------------------------------------------------------------------
// Parameter ranges and the latent code

/// Sampling intervals. Scale is uniform (`sx = sy`) and shear is horizontal,
/// given as an angle in degrees (`shx = tan(angle)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub tx: (f64, f64),
    pub ty: (f64, f64),
    pub theta: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            tx: (-5.5, 5.5),
            ty: (-5.5, 5.5),
            theta: (-25.0, 25.0),
            scale: (0.7, 1.3),
            shear: (-10.0, 10.0),
        }
    }
}

/// Coded parameters in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coded {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
    /// Degrees.
    pub shear: f64,
}

impl Coded {
    pub fn to_params(self) -> GeomParams {
        GeomParams {
            tx: self.tx,
            ty: self.ty,
            theta: self.theta,
            sx: self.scale,
            sy: self.scale,
            shx: self.shear.to_radians().tan(),
            shy: 0.0,
        }
    }

    fn as_array(self) -> [f64; 5] {
        [self.tx, self.ty, self.theta, self.scale, self.shear]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Coded {
            tx: a[0],
            ty: a[1],
            theta: a[2],
            scale: a[3],
            shear: a[4],
        }
    }
}

impl ParamRanges {
    fn intervals(&self) -> [(f64, f64); 5] {
        [self.tx, self.ty, self.theta, self.scale, self.shear]
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in self.intervals() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Domain(format!("invalid range ({lo}, {hi})")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Domain("scale range must be positive".into()));
        }
        if self.shear.0 <= -90.0 || self.shear.1 >= 90.0 {
            return Err(Error::Domain("shear angle must lie in (-90, 90)".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Coded {
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let mut a = [0.0; 5];
        for (slot, iv) in a.iter_mut().zip(self.intervals()) {
            *slot = draw(rng, iv);
        }
        Coded::from_array(a)
    }

    pub fn contains(&self, c: &Coded) -> bool {
        c.as_array()
            .iter()
            .zip(self.intervals())
            .all(|(&v, (lo, hi))| v >= lo - 1e-9 && v <= hi + 1e-9)
    }
}

/// Maps coded parameters linearly onto `[-1, 1]^5`, followed by
/// `nuisance` latent coordinates the images do not depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub ranges: ParamRanges,
    #[serde(default)]
    pub nuisance: usize,
}

pub const CODED_DIMS: usize = 5;

impl LatentCodec {
    pub fn new(ranges: ParamRanges, nuisance: usize) -> Result<Self> {
        ranges.validate()?;
        Ok(LatentCodec { ranges, nuisance })
    }

    pub fn latent_dim(&self) -> usize {
        CODED_DIMS + self.nuisance
    }

    /// Nuisance coordinates are zero.
    pub fn encode(&self, c: &Coded) -> DVector<f64> {
        let mut z = DVector::zeros(self.latent_dim());
        for (k, (&v, (lo, hi))) in c.as_array().iter().zip(self.ranges.intervals()).enumerate() {
            z[k] = if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        }
        z
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<Coded> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape("latent code", self.latent_dim(), z.len()));
        }
        let mut a = [0.0; 5];
        for (k, (lo, hi)) in self.ranges.intervals().iter().enumerate() {
            a[k] = lo + (z[k] + 1.0) / 2.0 * (hi - lo);
        }
        Ok(Coded::from_array(a))
    }
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// One image per column.
    pub images: DMatrix<f64>,
    pub coded: Vec<Coded>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    height: usize,
    width: usize,
    count: usize,
    data_file: String,
    dtype: String,
    params: Vec<GeomParams>,
    coded: Vec<[f64; 5]>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.coded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coded.is_empty()
    }

    pub fn image(&self, idx: usize) -> Image {
        Image::new(self.height, self.width, self.images.column(idx).iter().copied().collect()).unwrap()
    }

    pub fn params(&self) -> Vec<GeomParams> {
        self.coded.iter().map(|c| c.to_params()).collect()
    }

    /// Latent codes under `codec`, nuisance coordinates drawn uniformly from
    /// `[-1, 1]` with `seed`.
    pub fn latents(&self, codec: &LatentCodec, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = DMatrix::zeros(codec.latent_dim(), self.len());
        for (k, c) in self.coded.iter().enumerate() {
            let mut col = codec.encode(c);
            for i in CODED_DIMS..codec.latent_dim() {
                col[i] = rng.gen_range(-1.0..=1.0);
            }
            z.set_column(k, &col);
        }
        z
    }

    /// Writes `<stem>.bin` (f32 little-endian, image after image) and the
    /// JSON manifest at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        let data_file = format!("{stem}.bin");
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut bytes = Vec::with_capacity(self.images.len() * 4);
        for v in self.images.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(dir.join(&data_file), bytes)?;
        let manifest = Manifest {
            height: self.height,
            width: self.width,
            count: self.len(),
            data_file,
            dtype: "f32le".into(),
            params: self.params(),
            coded: self.coded.iter().map(|c| c.as_array()).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if manifest.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let bytes = std::fs::read(dir.join(&manifest.data_file))?;
        let pixels = manifest.height * manifest.width;
        if bytes.len() != pixels * manifest.count * 4 || manifest.coded.len() != manifest.count {
            return Err(Error::Format(format!("{} does not match its manifest", manifest.data_file)));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Dataset {
            height: manifest.height,
            width: manifest.width,
            images: DMatrix::from_vec(pixels, manifest.count, values),
            coded: manifest.coded.into_iter().map(Coded::from_array).collect(),
        })
    }
}

const MAX_RESAMPLES: usize = 1000;

/// `n` renders with parameters drawn uniformly from `ranges`. Samples whose
/// square leaves the frame are redrawn.
pub fn gen_dataset(n: usize, ranges: &ParamRanges, seed: u64, height: usize, width: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("dataset size must be at least 1".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coded = Vec::with_capacity(n);
    let mut images = DMatrix::zeros(height * width, n);
    for k in 0..n {
        let mut tries = 0;
        let (c, img) = loop {
            let c = ranges.sample(&mut rng);
            let p = c.to_params();
            if fully_inside(&p, height, width, DEFAULT_SIDE) {
                if let Ok(img) = render(&p, height, width) {
                    break (c, img);
                }
            }
            tries += 1;
            if tries >= MAX_RESAMPLES {
                return Err(Error::OutOfFrame);
            }
        };
        images.set_column(k, &img.to_vector());
        coded.push(c);
    }
    Ok(Dataset {
        height,
        width,
        images,
        coded,
    })
}

// ---------------------------------------------------------------------------
// Measurement

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectMeasure {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Degrees in `(-45, 45]`; `width` runs along this angle.
    pub angle: f64,
}

impl RectMeasure {
    pub fn size(&self) -> f64 {
        (self.width * self.height).sqrt()
    }
}

fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Foreground pixel centers plus sub-pixel threshold crossings between
/// neighboring pixels.
fn boundary_points(img: &Image, threshold: f64) -> Vec<Vector2<f64>> {
    let mut pts = Vec::new();
    let fg = |r: usize, c: usize| img.get(r, c) > threshold;
    for r in 0..img.height {
        for c in 0..img.width {
            if !fg(r, c) {
                continue;
            }
            let (x, y) = img.coords(r, c);
            pts.push(Vector2::new(x, y));
            let v = img.get(r, c);
            let mut crossing = |r2: usize, c2: usize| {
                let v2 = img.get(r2, c2);
                if v2 <= threshold {
                    let f = (v - threshold) / (v - v2);
                    let (x2, y2) = img.coords(r2, c2);
                    pts.push(Vector2::new(x + f * (x2 - x), y + f * (y2 - y)));
                }
            };
            if c > 0 {
                crossing(r, c - 1);
            }
            if c + 1 < img.width {
                crossing(r, c + 1);
            }
            if r > 0 {
                crossing(r - 1, c);
            }
            if r + 1 < img.height {
                crossing(r + 1, c);
            }
        }
    }
    pts
}

/// Minimum-area enclosing rectangle of the thresholded object by rotating
/// calipers over its convex hull.
pub fn min_enclosing_rect(img: &Image, threshold: f64) -> Result<RectMeasure> {
    let pts = boundary_points(img, threshold);
    if pts.is_empty() {
        return Err(Error::EmptyObject);
    }
    let hull = convex_hull(&pts);
    if hull.len() < 3 {
        let (lo, hi) = hull.iter().fold(
            (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        return Ok(RectMeasure {
            cx: (lo.x + hi.x) / 2.0,
            cy: (lo.y + hi.y) / 2.0,
            width: hi.x - lo.x,
            height: hi.y - lo.y,
            angle: 0.0,
        });
    }
    let mut best: Option<(f64, RectMeasure)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()] - hull[i];
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let u = e / len;
        let n = Vector2::new(-u.y, u.x);
        let (mut umin, mut umax, mut nmin, mut nmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let (a, b) = (p.dot(&u), p.dot(&n));
            umin = umin.min(a);
            umax = umax.max(a);
            nmin = nmin.min(b);
            nmax = nmax.max(b);
        }
        let area = (umax - umin) * (nmax - nmin);
        if best.as_ref().is_none_or(|(a, _)| area < *a - 1e-12) {
            let center = u * (umin + umax) / 2.0 + n * (nmin + nmax) / 2.0;
            let (mut w, mut h) = (umax - umin, nmax - nmin);
            let mut angle = u.y.atan2(u.x).to_degrees();
            while angle > 45.0 {
                angle -= 90.0;
                std::mem::swap(&mut w, &mut h);
            }
            while angle <= -45.0 {
                angle += 90.0;
                std::mem::swap(&mut w, &mut h);
            }
            best = Some((
                area,
                RectMeasure {
                    cx: center.x,
                    cy: center.y,
                    width: w,
                    height: h,
                    angle,
                },
            ));
        }
    }
    Ok(best.expect("hull has a non-degenerate edge").1)
}

/// Horizontal shear angle in degrees from intensity-weighted second
/// moments, `atan(μ11 / μ02)`; exact for an unrotated sheared square.
pub fn shear_angle(img: &Image) -> Result<f64> {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..img.height {
        for c in 0..img.width {
            let v = img.get(r, c);
            let (x, y) = img.coords(r, c);
            m += v;
            sx += v * x;
            sy += v * y;
        }
    }
    if m < 1e-9 {
        return Err(Error::EmptyObject);
    }
    let (cx, cy) = (sx / m, sy / m);
    let (mut m11, mut m02) = (0.0, 0.0);
    for r in 0..img.height {
        for c in 0..img.width {
            let v = img.get(r, c);
            let (x, y) = img.coords(r, c);
            m11 += v * (x - cx) * (y - cy);
            m02 += v * (y - cy) * (y - cy);
        }
    }
    Ok((m11 / m02).atan().to_degrees())
}

/// Geometric properties observed on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rect: RectMeasure,
    pub shear: f64,
}

pub fn observe(img: &Image, threshold: f64) -> Result<Observation> {
    Ok(Observation {
        rect: min_enclosing_rect(img, threshold)?,
        shear: shear_angle(img)?,
    })
}

/// Difference of two angles modulo 90°, in `(-45, 45]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % 90.0;
    if d > 45.0 {
        d -= 90.0;
    } else if d <= -45.0 {
        d += 90.0;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Translation,
    Rotation,
    Scaling,
    Shearing,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Translation, Family::Rotation, Family::Scaling, Family::Shearing];

    pub fn name(self) -> &'static str {
        match self {
            Family::Translation => "translation",
            Family::Rotation => "rotation",
            Family::Scaling => "scaling",
            Family::Shearing => "shearing",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Magnitude of the change of this property from `reference` to `other`.
    /// Scaling is relative to the reference size.
    pub fn difference(self, reference: &Observation, other: &Observation) -> f64 {
        let (a, b) = (&reference.rect, &other.rect);
        match self {
            Family::Translation => ((b.cx - a.cx).powi(2) + (b.cy - a.cy).powi(2)).sqrt(),
            Family::Rotation => angle_diff(b.angle, a.angle).abs(),
            Family::Scaling => (b.size() / a.size() - 1.0).abs(),
            Family::Shearing => (other.shear - reference.shear).abs(),
        }
    }

    /// The property cannot be observed independently of the mutation
    /// through an enclosing rectangle.
    pub fn not_applicable(row: Family, col: Family) -> bool {
        use Family::*;
        row == col || matches!((row, col), (Rotation, Shearing) | (Scaling, Shearing) | (Shearing, Rotation) | (Shearing, Scaling))
    }
}

/// Per-family magnitudes: pixels, degrees, relative size, shear degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerFamily {
    pub translation: f64,
    pub rotation: f64,
    pub scaling: f64,
    pub shearing: f64,
}

impl PerFamily {
    pub fn get(&self, f: Family) -> f64 {
        match f {
            Family::Translation => self.translation,
            Family::Rotation => self.rotation,
            Family::Scaling => self.scaling,
            Family::Shearing => self.shearing,
        }
    }

    pub fn measurement_tolerance() -> Self {
        PerFamily {
            translation: 1.0,
            rotation: 3.0,
            scaling: 0.05,
            shearing: 2.0,
        }
    }

    pub fn delta_1() -> Self {
        PerFamily {
            translation: 10.0,
            rotation: 30.0,
            scaling: 0.5,
            shearing: 10.0,
        }
    }

    pub fn delta_2() -> Self {
        PerFamily {
            translation: 4.0,
            rotation: 10.0,
            scaling: 0.2,
            shearing: 4.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Generators under test

/// Anything mapping a latent code to an image.
pub trait ImageGenerator: Sync {
    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> (usize, usize);
    fn generate(&self, z: &DVector<f64>) -> Result<Image>;

    fn generate_batch(&self, zs: &DMatrix<f64>) -> Result<Vec<Image>> {
        zs.column_iter().map(|c| self.generate(&c.into_owned())).collect()
    }
}

/// A trained network whose output is a flattened image.
pub struct NetworkGenerator<'a> {
    pub net: &'a Network,
    pub height: usize,
    pub width: usize,
}

impl<'a> NetworkGenerator<'a> {
    pub fn new(net: &'a Network, height: usize, width: usize) -> Result<Self> {
        if net.output_dim != height * width {
            return Err(Error::shape("generator output", height * width, net.output_dim));
        }
        Ok(NetworkGenerator { net, height, width })
    }
}

impl ImageGenerator for NetworkGenerator<'_> {
    fn latent_dim(&self) -> usize {
        self.net.input_dim
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn generate(&self, z: &DVector<f64>) -> Result<Image> {
        Image::from_vector(self.height, self.width, &self.net.forward(z)?)
    }

    fn generate_batch(&self, zs: &DMatrix<f64>) -> Result<Vec<Image>> {
        let out = self.net.forward_batch(zs)?;
        out.column_iter()
            .map(|c| Image::new(self.height, self.width, c.iter().copied().collect()))
            .collect()
    }
}

/// Renders the decoded parameters exactly; the reference generator.
pub struct RenderGenerator {
    pub codec: LatentCodec,
    pub height: usize,
    pub width: usize,
}

impl ImageGenerator for RenderGenerator {
    fn latent_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn generate(&self, z: &DVector<f64>) -> Result<Image> {
        render(&self.codec.decode(z)?.to_params(), self.height, self.width)
    }
}

/// Fully connected generator `latent → hidden… → pixels` ending in a clamp
/// to `[0, 1]`. The output layer starts near the middle of the clamp so no
/// pixel begins saturated.
pub fn generator_network(latent_dim: usize, hidden: &[usize], pixels: usize, seed: u64) -> Network {
    let mut widths = vec![latent_dim];
    widths.extend_from_slice(hidden);
    widths.push(pixels);
    let mut net = Network::random("generator", &widths, seed);
    if let Some(Layer::Affine(last)) = net.layers.last_mut() {
        last.weights *= 0.1;
        last.bias.fill(0.5);
    }
    net.layers.push(Layer::Clamp01);
    net
}

// ---------------------------------------------------------------------------
// Direction labeling and the independence protocol

/// Spearman rank correlation (average ranks for ties); 0 if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub threshold: f64,
    pub tolerance: PerFamily,
    /// Latent extent swept on each side of a base point.
    pub sweep: f64,
    pub sweep_steps: usize,
    pub base_points: usize,
    /// Half-width of the coded region base points are drawn from, in latent units.
    pub base_spread: f64,
    pub seed: u64,
    pub pairs: usize,
    pub samples_per_pair: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            threshold: DEFAULT_THRESHOLD,
            tolerance: PerFamily::measurement_tolerance(),
            sweep: 0.5,
            sweep_steps: 21,
            base_points: 10,
            base_spread: 0.5,
            seed: 0,
            pairs: 100,
            samples_per_pair: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDirection {
    pub direction: Vec<f64>,
    pub label: Option<Family>,
    /// `|ρ|` of each family's property against the sweep parameter.
    pub correlations: [f64; 4],
}

/// Per-family property values along a sweep, relative to the sweep center.
fn sweep_observations<G: ImageGenerator>(
    g: &G,
    base: &DVector<f64>,
    direction: &DVector<f64>,
    cfg: &ProtocolConfig,
) -> Result<(Vec<f64>, Vec<Observation>, Observation)> {
    let steps = cfg.sweep_steps.max(2);
    let deltas: Vec<f64> = (0..steps)
        .map(|i| -cfg.sweep + 2.0 * cfg.sweep * i as f64 / (steps - 1) as f64)
        .collect();
    let zs = DMatrix::from_fn(base.len(), steps + 1, |r, c| {
        if c == steps {
            base[r]
        } else {
            base[r] + deltas[c] * direction[r]
        }
    });
    let imgs = g.generate_batch(&zs)?;
    let obs: Vec<Observation> = imgs.iter().map(|im| observe(im, cfg.threshold)).collect::<Result<_>>()?;
    let center = obs[steps];
    Ok((deltas, obs[..steps].to_vec(), center))
}

fn property_series(f: Family, obs: &[Observation], center: &Observation) -> Vec<Vec<f64>> {
    match f {
        Family::Translation => vec![
            obs.iter().map(|o| o.rect.cx).collect(),
            obs.iter().map(|o| o.rect.cy).collect(),
        ],
        Family::Rotation => vec![obs.iter().map(|o| angle_diff(o.rect.angle, center.rect.angle)).collect()],
        Family::Scaling => vec![obs.iter().map(|o| o.rect.size()).collect()],
        Family::Shearing => vec![obs.iter().map(|o| o.shear).collect()],
    }
}

/// Labels one direction at `base` with the family whose property has the
/// highest absolute rank correlation with the sweep, among properties that
/// change by more than their tolerance. Ties go to the larger change
/// relative to tolerance.
pub fn label_direction<G: ImageGenerator>(
    g: &G,
    base: &DVector<f64>,
    direction: &DVector<f64>,
    cfg: &ProtocolConfig,
) -> Result<LabeledDirection> {
    let (deltas, obs, center) = sweep_observations(g, base, direction, cfg)?;
    let mut correlations = [0.0; 4];
    let mut best: Option<(f64, f64, Family)> = None;
    for f in Family::ALL {
        let spread = obs.iter().map(|o| f.difference(&center, o)).fold(0.0, f64::max);
        let rho = property_series(f, &obs, &center)
            .iter()
            .map(|s| spearman(&deltas, s).abs())
            .fold(0.0, f64::max);
        correlations[f.index()] = rho;
        if spread <= cfg.tolerance.get(f) {
            continue;
        }
        let magnitude = spread / cfg.tolerance.get(f);
        let better = match best {
            None => true,
            Some((r, m, _)) => rho > r + 1e-9 || ((rho - r).abs() <= 1e-9 && magnitude > m),
        };
        if better {
            best = Some((rho, magnitude, f));
        }
    }
    Ok(LabeledDirection {
        direction: direction.iter().copied().collect(),
        label: best.map(|b| b.2),
        correlations,
    })
}

/// Labels the mutating directions of `basis` at `base`.
pub fn label_directions<G: ImageGenerator>(
    g: &G,
    basis: &DirectionBasis,
    base: &DVector<f64>,
    cfg: &ProtocolConfig,
) -> Result<Vec<LabeledDirection>> {
    (0..basis.rank)
        .map(|k| label_direction(g, base, &basis.direction(k), cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pass,
    Fail,
    #[serde(rename = "n/a")]
    NotApplicable,
    /// No direction carries the row's label.
    Unchecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub status: CellStatus,
    /// Fraction of sweeps that kept the column property within tolerance.
    pub pass_fraction: f64,
    /// Largest observed change of the column property.
    pub max_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceTable {
    /// `cells[row][col]`: mutating the row family, observing the column family.
    pub cells: [[Cell; 4]; 4],
}

impl IndependenceTable {
    pub fn cell(&self, row: Family, col: Family) -> Cell {
        self.cells[row.index()][col.index()]
    }

    /// Every checkable cell passes.
    pub fn all_checkable_pass(&self) -> bool {
        Family::ALL.iter().all(|&r| {
            Family::ALL
                .iter()
                .all(|&c| Family::not_applicable(r, c) || self.cell(r, c).status == CellStatus::Pass)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mutated,translation,rotation,scaling,shearing\n");
        for r in Family::ALL {
            out.push_str(r.name());
            for c in Family::ALL {
                let cell = self.cell(r, c);
                let s = match cell.status {
                    CellStatus::Pass => "pass",
                    CellStatus::Fail => "fail",
                    CellStatus::NotApplicable => "n/a",
                    CellStatus::Unchecked => "unchecked",
                };
                out.push(',');
                out.push_str(s);
            }
            out.push('\n');
        }
        out
    }
}

/// Base latent points: coded coordinates uniform in `±base_spread`, with
/// the shear coordinate set to the code of zero shear so rectangle angles
/// stay well defined.
pub fn base_points(codec: &LatentCodec, cfg: &ProtocolConfig) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zero_shear = codec.encode(&Coded {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
        scale: 1.0,
        shear: 0.0,
    })[4];
    (0..cfg.base_points)
        .map(|_| {
            let mut z = DVector::from_fn(codec.latent_dim(), |_, _| {
                if cfg.base_spread > 0.0 {
                    rng.gen_range(-cfg.base_spread..=cfg.base_spread)
                } else {
                    0.0
                }
            });
            z[4] = zero_shear;
            z
        })
        .collect()
}

/// Sweeps every labeled direction from every base point and records, per
/// (mutated, observed) family, whether the observed property stayed within
/// tolerance of its value at the base point.
pub fn check_independence<G: ImageGenerator>(
    g: &G,
    directions: &[LabeledDirection],
    bases: &[DVector<f64>],
    cfg: &ProtocolConfig,
) -> Result<IndependenceTable> {
    if let Some(k) = directions.iter().position(|d| d.label.is_none()) {
        return Err(Error::Protocol(format!("direction {k} has no label")));
    }
    let empty = Cell {
        status: CellStatus::Unchecked,
        pass_fraction: 0.0,
        max_change: 0.0,
    };
    let mut cells = [[empty; 4]; 4];
    // (sweeps, passes, max change) per cell.
    let mut acc = [[(0usize, 0usize, 0.0f64); 4]; 4];
    let results: Vec<(Family, Vec<Observation>, Observation)> = directions
        .par_iter()
        .flat_map_iter(|d| bases.iter().map(move |b| (d, b)))
        .map(|(d, base)| {
            let dir = DVector::from_column_slice(&d.direction);
            let (_, obs, center) = sweep_observations(g, base, &dir, cfg)?;
            Ok((d.label.unwrap(), obs, center))
        })
        .collect::<Result<_>>()?;
    for (row, obs, center) in &results {
        for col in Family::ALL {
            let change = obs.iter().map(|o| col.difference(center, o)).fold(0.0, f64::max);
            let a = &mut acc[row.index()][col.index()];
            a.0 += 1;
            a.1 += (change <= cfg.tolerance.get(col)) as usize;
            a.2 = a.2.max(change);
        }
    }
    for row in Family::ALL {
        for col in Family::ALL {
            let (n, pass, max_change) = acc[row.index()][col.index()];
            cells[row.index()][col.index()] = if Family::not_applicable(row, col) {
                Cell {
                    status: CellStatus::NotApplicable,
                    pass_fraction: if n > 0 { pass as f64 / n as f64 } else { 0.0 },
                    max_change,
                }
            } else if n == 0 {
                empty
            } else {
                Cell {
                    status: if pass == n { CellStatus::Pass } else { CellStatus::Fail },
                    pass_fraction: pass as f64 / n as f64,
                    max_change,
                }
            };
        }
    }
    Ok(IndependenceTable { cells })
}

// ---------------------------------------------------------------------------
// Continuity protocol

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityResult {
    pub family: Family,
    pub delta: f64,
    pub checks: usize,
    pub passed: usize,
}

impl ContinuityResult {
    pub fn pass_ratio(&self) -> f64 {
        if self.checks == 0 {
            1.0
        } else {
            self.passed as f64 / self.checks as f64
        }
    }
}

/// Draws coded parameters `c1` and a copy `c2` mutated by exactly `delta`
/// in `family`, both within `ranges`. Other properties are random except
/// that shear is zero outside shear pairs and rotation is zero inside them.
pub fn sample_pair<R: Rng + ?Sized>(
    family: Family,
    delta: f64,
    ranges: &ParamRanges,
    rng: &mut R,
) -> Result<(Coded, Coded)> {
    for _ in 0..MAX_RESAMPLES {
        let mut c1 = ranges.sample(rng);
        if family == Family::Shearing {
            c1.theta = 0.0;
        } else {
            c1.shear = 0.0;
        }
        let mut c2 = c1;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match family {
            Family::Translation => {
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                c2.tx += delta * phi.cos();
                c2.ty += delta * phi.sin();
            }
            Family::Rotation => c2.theta += sign * delta,
            Family::Scaling => c2.scale *= 1.0 + sign * delta,
            Family::Shearing => c2.shear += sign * delta,
        }
        if ranges.contains(&c1) && ranges.contains(&c2) && c2.scale > 0.0 {
            return Ok((c1, c2));
        }
    }
    Err(Error::Protocol(format!(
        "no {} pair with extent {delta} fits the parameter ranges",
        family.name()
    )))
}

/// For `pairs` latent pairs `(z1, z2)` whose images differ by `delta` in
/// `family`, samples points on the segment and checks that the property of
/// each sample stays within `delta` (plus measurement tolerance) of both
/// endpoint images.
pub fn check_continuity<G: ImageGenerator>(
    g: &G,
    codec: &LatentCodec,
    family: Family,
    delta: f64,
    cfg: &ProtocolConfig,
) -> Result<ContinuityResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9 * (family.index() as u64 + 1)));
    let tol = cfg.tolerance.get(family);
    let mut jobs = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let (c1, c2) = sample_pair(family, delta, &codec.ranges, &mut rng)?;
        let (mut z1, mut z2) = (codec.encode(&c1), codec.encode(&c2));
        for i in CODED_DIMS..codec.latent_dim() {
            let v = rng.gen_range(-1.0..=1.0);
            z1[i] = v;
            z2[i] = v;
        }
        let lambdas: Vec<f64> = (0..cfg.samples_per_pair).map(|_| rng.gen_range(0.0..=1.0)).collect();
        jobs.push((z1, z2, lambdas));
    }
    let passed: Vec<usize> = jobs
        .par_iter()
        .map(|(z1, z2, lambdas)| -> Result<usize> {
            let n = lambdas.len();
            let zs = DMatrix::from_fn(z1.len(), n + 2, |r, c| match c {
                0 => z1[r],
                1 => z2[r],
                _ => z1[r] + lambdas[c - 2] * (z2[r] - z1[r]),
            });
            let imgs = g.generate_batch(&zs)?;
            let (Ok(m1), Ok(m2)) = (observe(&imgs[0], cfg.threshold), observe(&imgs[1], cfg.threshold)) else {
                return Ok(0);
            };
            let ok = imgs[2..]
                .iter()
                .filter(|im| match observe(im, cfg.threshold) {
                    Ok(m) => {
                        let d1 = family.difference(&m1, &m);
                        let d2 = match family {
                            Family::Scaling => (m.rect.size() - m2.rect.size()).abs() / m1.rect.size(),
                            _ => family.difference(&m2, &m),
                        };
                        d1 <= delta + tol && d2 <= delta + tol
                    }
                    Err(_) => false,
                })
                .count();
            Ok(ok)
        })
        .collect::<Result<_>>()?;
    Ok(ContinuityResult {
        family,
        delta,
        checks: cfg.pairs * cfg.samples_per_pair,
        passed: passed.iter().sum(),
    })
}

/// Continuity results for all four families at one delta scale.
pub fn continuity_row<G: ImageGenerator>(
    g: &G,
    codec: &LatentCodec,
    deltas: &PerFamily,
    cfg: &ProtocolConfig,
) -> Result<Vec<ContinuityResult>> {
    Family::ALL
        .iter()
        .map(|&f| check_continuity(g, codec, f, deltas.get(f), cfg))
        .collect()
}
