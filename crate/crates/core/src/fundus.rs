//! Fundus photograph preprocessing: circular mask detection, normalization
//! to a fixed fundus diameter, and photometric augmentation.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center sits at
//! `(i + 0.5, j + 0.5)`. All geometry uses these continuous coordinates.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target fundus diameter in pixels; also the output side length.
pub const TARGET_DIAMETER: u32 = 587;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    /// Row-major interleaved RGB.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.repeat(width as usize * height as usize);
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let row = self.width as usize * 3;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for chunk in self.pixels.chunks_exact(row).rev() {
            pixels.extend_from_slice(chunk);
        }
        RasterImage { pixels, ..*self }
    }

    fn luminance(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundusMask {
    pub center: (f64, f64),
    pub diameter: f64,
    /// Fraction of boundary points within 2% of the fitted radius.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub min_area_fraction: f64,
    pub min_confidence: f64,
    pub radius_tolerance: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            min_area_fraction: 0.10,
            min_confidence: 0.8,
            radius_tolerance: 0.02,
        }
    }
}

/// Otsu threshold over 256 luminance bins; the split is `bin <= t`.
fn otsu_bin(lum: &[f32]) -> usize {
    let mut hist = [0u64; 256];
    for &l in lum {
        hist[(l.round() as usize).min(255)] += 1;
    }
    let total = lum.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = t;
        }
    }
    best
}

/// Otsu split refined to the midpoint of the two class means, so the
/// boundary sits at half coverage on anti-aliased edges.
fn foreground_threshold(lum: &[f32]) -> Option<f32> {
    let (lo, hi) = lum
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1.0 {
        return None;
    }
    let bin = otsu_bin(lum) as f32;
    let (mut s0, mut n0, mut s1, mut n1) = (0.0f64, 0u64, 0.0f64, 0u64);
    for &l in lum {
        if l.round() <= bin {
            s0 += f64::from(l);
            n0 += 1;
        } else {
            s1 += f64::from(l);
            n1 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        return None;
    }
    Some(((s0 / n0 as f64 + s1 / n1 as f64) / 2.0) as f32)
}

/// Pixel indices of the largest 4-connected above-threshold component.
fn largest_component(above: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![0u32; above.len()];
    let mut next = 0u32;
    let (mut best_label, mut best_size) = (0u32, 0usize);
    let mut queue = VecDeque::new();
    for start in 0..above.len() {
        if !above[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if above[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = next;
        }
    }
    label.iter().map(|&l| l != 0 && l == best_label).collect()
}

/// Algebraic least-squares circle through `points`: center and radius.
fn fit_circle(points: &[(f64, f64)]) -> Option<((f64, f64), f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    // centered normal equations for u^2 + v^2 + D u + E v + F = 0
    let (mut suu, mut suv, mut svv, mut suz, mut svz, mut sz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        let z = u * u + v * v;
        suu += u * u;
        suv += u * v;
        svv += v * v;
        suz += u * z;
        svz += v * z;
        sz += z;
    }
    let det = suu * svv - suv * suv;
    if !(det.abs() > 1e-12 * (suu * svv).max(1e-300)) {
        return None;
    }
    let d = -(suz * svv - svz * suv) / det;
    let e = -(svz * suu - suz * suv) / det;
    let f = -sz / n;
    let (cu, cv) = (-d / 2.0, -e / 2.0);
    let r2 = cu * cu + cv * cv - f;
    (r2 > 0.0).then(|| ((cu + mx, cv + my), r2.sqrt()))
}

pub fn detect_mask(img: &RasterImage) -> Result<FundusMask> {
    detect_mask_with(img, &MaskOptions::default())
}

/// Otsu foreground, largest connected component, subpixel boundary points
/// from threshold crossings, least-squares circle.
pub fn detect_mask_with(img: &RasterImage, opts: &MaskOptions) -> Result<FundusMask> {
    let (w, h) = (img.width as usize, img.height as usize);
    let lum = img.luminance();
    let t = foreground_threshold(&lum).ok_or_else(|| Error::MaskNotFound("no foreground contrast".into()))?;
    let above: Vec<bool> = lum.iter().map(|&l| l > t).collect();
    let comp = largest_component(&above, w, h);
    let area = comp.iter().filter(|&&c| c).count();
    if (area as f64) < opts.min_area_fraction * (w * h) as f64 {
        return Err(Error::MaskNotFound(format!(
            "largest bright region covers {:.1}% of the image",
            100.0 * area as f64 / (w * h) as f64
        )));
    }

    let mut points = Vec::new();
    for i in 0..comp.len() {
        if !comp[i] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let neighbours = [
            (x > 0).then(|| (i - 1, -1.0, 0.0)),
            (x + 1 < w).then(|| (i + 1, 1.0, 0.0)),
            (y > 0).then(|| (i - w, 0.0, -1.0)),
            (y + 1 < h).then(|| (i + w, 0.0, 1.0)),
        ];
        for (j, dx, dy) in neighbours.into_iter().flatten() {
            if above[j] {
                continue;
            }
            let frac = f64::from((lum[i] - t) / (lum[i] - lum[j]));
            points.push((x as f64 + 0.5 + frac * dx, y as f64 + 0.5 + frac * dy));
        }
    }
    let (center, radius) =
        fit_circle(&points).ok_or_else(|| Error::MaskNotFound("boundary does not determine a circle".into()))?;
    let within = points
        .iter()
        .filter(|&&(x, y)| (((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt() - radius).abs() <= opts.radius_tolerance * radius)
        .count();
    let confidence = within as f64 / points.len() as f64;
    if confidence < opts.min_confidence {
        return Err(Error::MaskNotFound(format!(
            "boundary is not circular (confidence {confidence:.3})"
        )));
    }
    let intersects = center.0 + radius > 0.0
        && center.0 - radius < w as f64
        && center.1 + radius > 0.0
        && center.1 - radius < h as f64;
    if !intersects {
        return Err(Error::MaskNotFound("fitted circle lies outside the image".into()));
    }
    Ok(FundusMask {
        center,
        diameter: 2.0 * radius,
        confidence,
    })
}

/// Bilinear sample at continuous coordinates; pixels outside the image are
/// black.
fn sample_bilinear(img: &RasterImage, x: f64, y: f64) -> [f64; 3] {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut out = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            let (px, py) = (x0 + dx, y0 + dy);
            let wgt = wx * wy;
            if wgt == 0.0 || px < 0 || py < 0 || px >= i64::from(img.width) || py >= i64::from(img.height) {
                continue;
            }
            let p = img.get(px as u32, py as u32);
            for c in 0..3 {
                out[c] += wgt * f64::from(p[c]);
            }
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Uniform rescale so the fundus is 587 px across, then crop or pad to
/// 587 x 587 about the mask center. Downscaling averages a grid of
/// bilinear samples per output pixel.
pub fn normalize_scale(img: &RasterImage, mask: &FundusMask) -> Result<RasterImage> {
    if !(mask.diameter.is_finite() && mask.diameter > 0.0) {
        return Err(Error::MaskNotFound(format!("invalid mask diameter {}", mask.diameter)));
    }
    let side = TARGET_DIAMETER;
    let scale = f64::from(side) / mask.diameter;
    let k = (1.0 / scale).ceil().max(1.0) as u32;
    let half = f64::from(side) / 2.0;
    let mut pixels = Vec::with_capacity(side as usize * side as usize * 3);
    for v in 0..side {
        for u in 0..side {
            let mut acc = [0.0; 3];
            for sy in 0..k {
                for sx in 0..k {
                    let ou = f64::from(u) + (f64::from(sx) + 0.5) / f64::from(k);
                    let ov = f64::from(v) + (f64::from(sy) + 0.5) / f64::from(k);
                    let x = mask.center.0 + (ou - half) / scale;
                    let y = mask.center.1 + (ov - half) / scale;
                    let s = sample_bilinear(img, x, y);
                    for c in 0..3 {
                        acc[c] += s[c];
                    }
                }
            }
            let n = f64::from(k * k);
            pixels.extend(acc.map(|a| to_u8(a / n)));
        }
    }
    RasterImage::new(side, side, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlipMode {
    /// Horizontal and vertical reflections each with probability 1/2.
    #[default]
    Random,
    Disabled,
}

/// Photometric parameters. Brightness is a delta on the `[0, 1]` channel
/// scale and hue a fraction of a full turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness_delta: f64,
    pub saturation_factor: f64,
    pub hue_delta: f64,
    pub contrast_factor: f64,
    pub flips: FlipMode,
}

pub const BRIGHTNESS_MAX_DELTA: f64 = 0.1147528;
pub const SATURATION_RANGE: (f64, f64) = (0.5597273, 1.2748845);
pub const HUE_MAX_DELTA: f64 = 0.0251488;
pub const CONTRAST_RANGE: (f64, f64) = (0.9996807, 1.7704824);

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            brightness_delta: 0.0,
            saturation_factor: 1.0,
            hue_delta: 0.0,
            contrast_factor: 1.0,
            flips: FlipMode::Disabled,
        }
    }

    /// Uniform draw over the allowed ranges, flips random.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentParams {
            brightness_delta: rng.random_range(-BRIGHTNESS_MAX_DELTA..=BRIGHTNESS_MAX_DELTA),
            saturation_factor: rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1),
            hue_delta: rng.random_range(-HUE_MAX_DELTA..=HUE_MAX_DELTA),
            contrast_factor: rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            flips: FlipMode::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, value: f64, min: f64, max: f64| {
            if value.is_finite() && (min..=max).contains(&value) {
                Ok(())
            } else {
                Err(Error::ParamOutOfRange { name, value, min, max })
            }
        };
        check("brightness_delta", self.brightness_delta, -BRIGHTNESS_MAX_DELTA, BRIGHTNESS_MAX_DELTA)?;
        check("saturation_factor", self.saturation_factor, SATURATION_RANGE.0, SATURATION_RANGE.1)?;
        check("hue_delta", self.hue_delta, -HUE_MAX_DELTA, HUE_MAX_DELTA)?;
        check("contrast_factor", self.contrast_factor, CONTRAST_RANGE.0, CONTRAST_RANGE.1)
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, saturation, hue and contrast in that order on a float copy,
/// then optional reflections drawn from `seed`; rounded and clamped to 8 bits.
pub fn augment(img: &RasterImage, params: &AugmentParams, seed: u64) -> Result<RasterImage> {
    params.validate()?;
    let mut data: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    if params.brightness_delta != 0.0 {
        let d = params.brightness_delta * 255.0;
        data.iter_mut().for_each(|v| *v += d);
    }
    if params.saturation_factor != 1.0 || params.hue_delta != 0.0 {
        for px in data.chunks_exact_mut(3) {
            let rgb = [0, 1, 2].map(|c| (px[c] / 255.0).clamp(0.0, 1.0));
            let [h, s, v] = rgb_to_hsv(rgb);
            let out = hsv_to_rgb([h + params.hue_delta, (s * params.saturation_factor).clamp(0.0, 1.0), v]);
            for c in 0..3 {
                px[c] = out[c] * 255.0;
            }
        }
    }
    if params.contrast_factor != 1.0 {
        let n = (data.len() / 3) as f64;
        let mut means = [0.0; 3];
        for px in data.chunks_exact(3) {
            for c in 0..3 {
                means[c] += px[c];
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        for px in data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = means[c] + params.contrast_factor * (px[c] - means[c]);
            }
        }
    }
    let mut out = RasterImage {
        width: img.width,
        height: img.height,
        pixels: data.into_iter().map(to_u8).collect(),
    };
    if params.flips == FlipMode::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.random_bool(0.5) {
            out = out.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            out = out.flip_vertical();
        }
    }
    Ok(out)
}

/// Anti-aliased disc of colour `fg` on `bg`; edge pixels take their area
/// coverage from a 16 x 16 subsample grid.
pub fn synthetic_disc(width: u32, height: u32, center: (f64, f64), diameter: f64, fg: [u8; 3], bg: [u8; 3]) -> RasterImage {
    const SUB: u32 = 16;
    let r = diameter / 2.0;
    let mut img = RasterImage::filled(width, height, bg);
    let y_lo = ((center.1 - r - 1.0).floor().max(0.0)) as u32;
    let y_hi = ((center.1 + r + 1.0).ceil().min(f64::from(height))) as u32;
    let x_lo = ((center.0 - r - 1.0).floor().max(0.0)) as u32;
    let x_hi = ((center.0 + r + 1.0).ceil().min(f64::from(width))) as u32;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = f64::from(x) + 0.5 - center.0;
            let dy = f64::from(y) + 0.5 - center.1;
            let d = (dx * dx + dy * dy).sqrt();
            let cover = if d <= r - 0.75 {
                1.0
            } else if d >= r + 0.75 {
                0.0
            } else {
                let mut inside = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = f64::from(x) + (f64::from(sx) + 0.5) / f64::from(SUB) - center.0;
                        let py = f64::from(y) + (f64::from(sy) + 0.5) / f64::from(SUB) - center.1;
                        if px * px + py * py <= r * r {
                            inside += 1;
                        }
                    }
                }
                f64::from(inside) / f64::from(SUB * SUB)
            };
            if cover > 0.0 {
                let rgb = [0, 1, 2].map(|c| to_u8(f64::from(bg[c]) + cover * (f64::from(fg[c]) - f64::from(bg[c]))));
                img.set(x, y, rgb);
            }
        }
    }
    img
}

pub fn read_image(path: &Path) -> Result<RasterImage> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    RasterImage::new(rgb.width(), rgb.height(), rgb.into_raw())
}

/// Writes PNG or binary PPM according to the extension, atomically.
pub fn write_image(img: &RasterImage, path: &Path) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("unsupported output extension {other:?}"),
            })
        }
    };
    let buffer = image::RgbImage::from_raw(img.width, img.height, img.pixels.clone()).expect("validated shape");
    let mut encoded = Vec::new();
    buffer
        .write_to(&mut std::io::Cursor::new(&mut encoded), format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    crate::io::write_atomic(path, &encoded)
}
