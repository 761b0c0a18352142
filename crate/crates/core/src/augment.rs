//! RGB images, PPM I/O, and the two-view augmentation pipeline.

use crate::config::{self, ConfigSection};
use crate::error::{Error, Result};
use crate::geometry::{inverse_transform, Point, Region, ViewTransform};
use rand::Rng;
use std::path::Path;

/// Planar RGB image with values in `[0, 1]`; pixel `(i, j)` covers `[j, j+1] x [i, i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Image(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Channel-major values (`3 x H x W`).
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// Bilinear sample at a continuous point; samples outside the pixel
    /// centers clamp to the border.
    pub fn sample(&self, c: usize, p: Point) -> f32 {
        let fx = (p.x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (p.y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (j0, i0) = (fx.floor() as usize, fy.floor() as usize);
        let (j1, i1) = ((j0 + 1).min(self.width - 1), (i0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - j0 as f64, fy - i0 as f64);
        let top = self.get(c, i0, j0) as f64 * (1.0 - ax) + self.get(c, i0, j1) as f64 * ax;
        let bot = self.get(c, i1, j0) as f64 * (1.0 - ax) + self.get(c, i1, j1) as f64 * ax;
        (top * (1.0 - ay) + bot * ay) as f32
    }

    /// Renders the view described by `v`: every output pixel center is mapped
    /// back to the source and sampled bilinearly.
    pub fn warp(&self, v: &ViewTransform) -> Image {
        let inv = inverse_transform(v);
        let mut out = Image::filled(v.out_w, v.out_h, [0.0; 3]);
        for i in 0..v.out_h {
            for j in 0..v.out_w {
                let src = inv.apply(Point::new(j as f64 + 0.5, i as f64 + 0.5));
                for c in 0..3 {
                    out.set(c, i, j, self.sample(c, src));
                }
            }
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        for p in 0..plane {
            for c in 0..3 {
                out.push(to_u8(self.data[c * plane + p]));
            }
        }
        out
    }

    /// Parses binary PPM (`P6`, maxval 255).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Image(format!("expected P6, got {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PPM field '{s}'")));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Image(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        if w == 0 || h == 0 {
            return Err(Error::Image("empty image".into()));
        }
        let body = bytes
            .get(pos..pos + 3 * w * h)
            .ok_or_else(|| Error::Image("truncated PPM data".into()))?;
        let mut img = Image::filled(w, h, [0.0; 3]);
        for (p, px) in body.chunks_exact(3).enumerate() {
            for c in 0..3 {
                img.data[c * w * h + p] = px[c] as f32 / 255.0;
            }
        }
        Ok(img)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image area.
    pub scale_range: (f64, f64),
    /// Crop width / height.
    pub aspect_range: (f64, f64),
    /// Probability that both views are flipped.
    pub flip_prob: f64,
    pub color_jitter: bool,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            color_jitter: true,
            grayscale_prob: 0.2,
        }
    }
}

/// Probability of applying brightness/contrast jitter when enabled.
const JITTER_PROB: f64 = 0.8;
const BRIGHTNESS: f64 = 0.4;
const CONTRAST: f64 = 0.4;
const RRC_TRIES: usize = 10;

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale_range;
        let (a0, a1) = self.aspect_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < min <= max <= 1, got {s0},{s1}")));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::Config(format!("aspect_range must satisfy 0 < min <= max, got {a0},{a1}")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

impl ConfigSection for AugmentConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "scale_range" => self.scale_range = config::pair(key, v)?,
            "aspect_range" => self.aspect_range = config::pair(key, v)?,
            "flip_prob" => self.flip_prob = config::value(key, v)?,
            "color_jitter" => self.color_jitter = config::value(key, v)?,
            "grayscale_prob" => self.grayscale_prob = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("scale_range", format!("{},{}", self.scale_range.0, self.scale_range.1)),
            ("aspect_range", format!("{},{}", self.aspect_range.0, self.aspect_range.1)),
            ("flip_prob", self.flip_prob.to_string()),
            ("color_jitter", self.color_jitter.to_string()),
            ("grayscale_prob", self.grayscale_prob.to_string()),
        ]
    }
}

/// Integer crop box from random resized crop sampling, or the center-crop
/// fallback after [`RRC_TRIES`] rejected draws. The flag reports the fallback.
pub fn random_resized_crop(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Region, bool)> {
    if width == 0 || height == 0 {
        return Err(Error::DegenerateCrop(format!("image is {width}x{height}")));
    }
    let area = (width * height) as f64;
    let (la, lb) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    for _ in 0..RRC_TRIES {
        let target = area * uniform(rng, cfg.scale_range.0, cfg.scale_range.1);
        let aspect = uniform(rng, la, lb).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            let r = Region::new(top as f64, left as f64, (top + h) as f64, (left + w) as f64)?;
            return Ok((r, false));
        }
    }
    let ratio = width as f64 / height as f64;
    let (w, h) = if ratio < cfg.aspect_range.0 {
        (width, ((width as f64 / cfg.aspect_range.0).round() as usize).clamp(1, height))
    } else if ratio > cfg.aspect_range.1 {
        (((height as f64 * cfg.aspect_range.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    let top = (height - h) / 2;
    let left = (width - w) / 2;
    Ok((Region::new(top as f64, left as f64, (top + h) as f64, (left + w) as f64)?, true))
}

fn uniform(rng: &mut impl Rng, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

/// Brightness/contrast jitter and random grayscale, in place.
pub fn photometric(img: &mut Image, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if cfg.color_jitter && rng.gen_bool(JITTER_PROB) {
        let b = rng.gen_range(1.0 - BRIGHTNESS..1.0 + BRIGHTNESS) as f32;
        let c = rng.gen_range(1.0 - CONTRAST..1.0 + CONTRAST) as f32;
        for v in &mut img.data {
            *v = (*v * b).clamp(0.0, 1.0);
        }
        let plane = img.width * img.height;
        let mean = (0..plane).map(|p| luma(img, p)).sum::<f32>() / plane as f32;
        for v in &mut img.data {
            *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
        let plane = img.width * img.height;
        for p in 0..plane {
            let y = luma(img, p);
            for c in 0..3 {
                img.data[c * plane + p] = y;
            }
        }
    }
}

fn luma(img: &Image, p: usize) -> f32 {
    let plane = img.width * img.height;
    0.299 * img.data[p] + 0.587 * img.data[plane + p] + 0.114 * img.data[2 * plane + p]
}

/// One augmented view and the exact spatial map that produced it.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Image,
    pub transform: ViewTransform,
}

/// Two independent crops resized to `size x size` with one shared flip decision;
/// photometric jitter is drawn independently per view.
pub fn sample_view_pair(image: &Image, cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Result<(View, View)> {
    let flip = rng.gen_bool(cfg.flip_prob);
    let make = |rng: &mut _| -> Result<View> {
        let (crop, _) = random_resized_crop(image.width, image.height, cfg, rng)?;
        let transform = ViewTransform::new(crop, size, size, flip)?;
        let mut img = image.warp(&transform);
        photometric(&mut img, cfg, rng);
        Ok(View { image: img, transform })
    };
    let q = make(rng)?;
    let k = make(rng)?;
    Ok((q, k))
}

/// Mean absolute difference between view-q pixels inside the overlap and the
/// key view sampled at the corresponding mapped point, over `pairs` random
/// view pairs. Values are on a `[0, 1]` scale.
pub fn mean_warp_error(image: &Image, cfg: &AugmentConfig, size: usize, pairs: usize, rng: &mut impl Rng) -> f64 {
    use crate::geometry::{apply_transform, overlap_in_query};
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..pairs {
        let Ok((q, k)) = sample_view_pair(image, cfg, size, rng) else {
            continue;
        };
        let Ok(Some(ov)) = overlap_in_query(&q.transform, &k.transform) else {
            continue;
        };
        let to_src = inverse_transform(&q.transform);
        let (i0, i1) = (ov.t.ceil() as usize, ov.b.floor() as usize);
        let (j0, j1) = (ov.l.ceil() as usize, ov.r.floor() as usize);
        for i in i0..i1 {
            for j in j0..j1 {
                let p = Point::new(j as f64 + 0.5, i as f64 + 0.5);
                let pk = apply_transform(to_src.apply(p), &k.transform);
                for c in 0..3 {
                    total += (q.image.get(c, i, j) - k.image.sample(c, pk)).abs() as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
