//! Continuous-coordinate algebra for views and regions.
//!
//! Coordinates put the origin at the top-left corner of the top-left pixel,
//! so pixel `(row i, col j)` covers `[i, i+1] x [j, j+1]`. Every map in here
//! is an exact affine function; nothing is snapped to the pixel grid.

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(t, l, b, r)` in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub t: f64,
    pub l: f64,
    pub b: f64,
    pub r: f64,
}

impl Region {
    /// Builds a region, rejecting non-finite or non-positive-area boxes.
    pub fn new(t: f64, l: f64, b: f64, r: f64) -> Result<Self> {
        let all_finite = t.is_finite() && l.is_finite() && b.is_finite() && r.is_finite();
        if !all_finite || b <= t || r <= l {
            return Err(Error::InvalidRegion { t, l, b, r });
        }
        Ok(Region { t, l, b, r })
    }

    /// Builds a region from two arbitrary corners, ordering the coordinates.
    pub fn from_corners(a: Point, c: Point) -> Result<Self> {
        Region::new(a.y.min(c.y), a.x.min(c.x), a.y.max(c.y), a.x.max(c.x))
    }

    pub fn height(&self) -> f64 {
        self.b - self.t
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.t >= self.t && other.l >= self.l && other.b <= self.b && other.r <= self.r
    }

    /// Intersection with another region, `None` when it has zero area.
    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let t = self.t.max(other.t);
        let l = self.l.max(other.l);
        let b = self.b.min(other.b);
        let r = self.r.min(other.r);
        (b > t && r > l).then_some(Region { t, l, b, r })
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Region) -> f64 {
        (self.t - other.t)
            .abs()
            .max((self.l - other.l).abs())
            .max((self.b - other.b).abs())
            .max((self.r - other.r).abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Spatial part of an augmentation: crop in source pixels, resize to
/// `out_w x out_h`, then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub crop: Region,
    pub out_w: usize,
    pub out_h: usize,
    pub hflip: bool,
}

impl ViewTransform {
    pub fn new(crop: Region, out_w: usize, out_h: usize, hflip: bool) -> Result<Self> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::shape("view_transform", "output size must be positive"));
        }
        Ok(ViewTransform {
            crop,
            out_w,
            out_h,
            hflip,
        })
    }

    /// Identity view of a `width x height` image.
    pub fn identity(width: usize, height: usize) -> Self {
        ViewTransform {
            crop: Region {
                t: 0.0,
                l: 0.0,
                b: height as f64,
                r: width as f64,
            },
            out_w: width,
            out_h: height,
            hflip: false,
        }
    }

    /// Full view rectangle `(0, 0, out_h, out_w)` in view pixels.
    pub fn view_region(&self) -> Region {
        Region {
            t: 0.0,
            l: 0.0,
            b: self.out_h as f64,
            r: self.out_w as f64,
        }
    }

    /// Forward affine map from source pixels to view pixels.
    pub fn forward_map(&self) -> AffineMap {
        let sx = self.out_w as f64 / self.crop.width();
        let sy = self.out_h as f64 / self.crop.height();
        let (sx, tx) = if self.hflip {
            (-sx, self.out_w as f64 + sx * self.crop.l)
        } else {
            (sx, -sx * self.crop.l)
        };
        AffineMap {
            sx,
            tx,
            sy,
            ty: -sy * self.crop.t,
        }
    }
}

/// Axis-separable affine map `x' = sx*x + tx`, `y' = sy*y + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl AffineMap {
    pub fn apply(&self, p: Point) -> Point {
        Point {
            x: self.sx * p.x + self.tx,
            y: self.sy * p.y + self.ty,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sx == 1.0 && self.tx == 0.0 && self.sy == 1.0 && self.ty == 0.0
    }
}

/// Maps a source-image point into view pixels.
pub fn apply_transform(p: Point, v: &ViewTransform) -> Point {
    let x = (p.x - v.crop.l) * (v.out_w as f64 / v.crop.width());
    let y = (p.y - v.crop.t) * (v.out_h as f64 / v.crop.height());
    let x = if v.hflip { v.out_w as f64 - x } else { x };
    Point { x, y }
}

/// Closed-form inverse of [`apply_transform`]: view pixels to source pixels.
pub fn inverse_transform(v: &ViewTransform) -> AffineMap {
    let kx = v.crop.width() / v.out_w as f64;
    let ky = v.crop.height() / v.out_h as f64;
    let (sx, tx) = if v.hflip {
        (-kx, v.crop.l + v.out_w as f64 * kx)
    } else {
        (kx, v.crop.l)
    };
    AffineMap {
        sx,
        tx,
        sy: ky,
        ty: v.crop.t,
    }
}

fn map_region_unchecked(u: &Region, from: &ViewTransform, to: &ViewTransform) -> Region {
    let inv = inverse_transform(from);
    let a = apply_transform(inv.apply(Point::new(u.l, u.t)), to);
    let c = apply_transform(inv.apply(Point::new(u.r, u.b)), to);
    Region {
        t: a.y.min(c.y),
        l: a.x.min(c.x),
        b: a.y.max(c.y),
        r: a.x.max(c.x),
    }
}

/// Maps a query-view region into the key view: `R_k(R_q^-1(u))`.
pub fn map_region(u_q: &Region, v_q: &ViewTransform, v_k: &ViewTransform) -> Result<Region> {
    if v_q.hflip != v_k.hflip {
        return Err(Error::FlipMismatch);
    }
    Ok(map_region_unchecked(u_q, v_q, v_k))
}

/// Intersection of the two source crops, expressed in query-view pixels.
pub fn overlap_in_query(v_q: &ViewTransform, v_k: &ViewTransform) -> Result<Option<Region>> {
    if v_q.hflip != v_k.hflip {
        return Err(Error::FlipMismatch);
    }
    let Some(src) = v_q.crop.intersect(&v_k.crop) else {
        return Ok(None);
    };
    let a = apply_transform(Point::new(src.l, src.t), v_q);
    let c = apply_transform(Point::new(src.r, src.b), v_q);
    Ok(Region::from_corners(a, c).ok())
}

/// Square sliding window of side `window` moved by `stride`, both in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub window: f64,
    pub stride: f64,
}

impl WindowSpec {
    pub fn new(window: f64, stride: f64) -> Result<Self> {
        if !(window > 0.0 && stride > 0.0 && window.is_finite() && stride.is_finite()) {
            return Err(Error::Config(format!(
                "window spec needs positive window and stride, got W{window}-S{stride}"
            )));
        }
        Ok(WindowSpec { window, stride })
    }

    /// Rescales a spec given at 224 px input to `input_size`, rounding up to whole pixels.
    pub fn scaled_from_224(window: u32, stride: u32, input_size: u32) -> Self {
        let scale = |v: u32| ((v as u64 * input_size as u64).div_ceil(224)) as f64;
        WindowSpec {
            window: scale(window),
            stride: scale(stride),
        }
    }

    /// Number of window positions along an axis of length `extent`.
    pub fn count_along(&self, extent: f64) -> usize {
        if extent < self.window {
            0
        } else {
            ((extent - self.window) / self.stride).floor() as usize + 1
        }
    }
}

impl std::fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "W{}-S{}", self.window, self.stride)
    }
}

impl std::str::FromStr for WindowSpec {
    type Err = Error;

    /// Parses the `W48-S32` notation.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad window spec '{s}', expected W<size>-S<stride>"));
        let (w, st) = s.trim().split_once('-').ok_or_else(bad)?;
        let w = w.strip_prefix('W').ok_or_else(bad)?;
        let st = st.strip_prefix('S').ok_or_else(bad)?;
        WindowSpec::new(w.parse().map_err(|_| bad())?, st.parse().map_err(|_| bad())?)
    }
}

/// All windows fully inside `area`, anchored at its top-left corner, in row-major order.
pub fn sliding_windows(area: &Region, spec: &WindowSpec) -> Vec<Region> {
    let rows = spec.count_along(area.height());
    let cols = spec.count_along(area.width());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let t = area.t + i as f64 * spec.stride;
        for j in 0..cols {
            let l = area.l + j as f64 * spec.stride;
            out.push(Region {
                t,
                l,
                b: t + spec.window,
                r: l + spec.window,
            });
        }
    }
    out
}

/// Aligned windows `(u_q, u_k)` for one view pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionPair {
    pub u_q: Region,
    pub u_k: Region,
}

/// Slides `spec` over the overlap of two views and maps every window to the key view.
///
/// Returns an empty list when the views do not overlap or the overlap is
/// smaller than the window.
pub fn region_pairs(
    v_q: &ViewTransform,
    v_k: &ViewTransform,
    spec: &WindowSpec,
) -> Result<Vec<RegionPair>> {
    let Some(area) = overlap_in_query(v_q, v_k)? else {
        return Ok(Vec::new());
    };
    sliding_windows(&area, spec)
        .into_iter()
        .map(|u_q| {
            Ok(RegionPair {
                u_q,
                u_k: map_region(&u_q, v_q, v_k)?,
            })
        })
        .collect()
}

/// View pixels to feature-map coordinates for a map downsampled by `rate`.
pub fn to_feature_coords(u: &Region, downsample_rate: f64) -> Region {
    debug_assert!(downsample_rate > 0.0);
    Region {
        t: u.t / downsample_rate,
        l: u.l / downsample_rate,
        b: u.b / downsample_rate,
        r: u.r / downsample_rate,
    }
}
