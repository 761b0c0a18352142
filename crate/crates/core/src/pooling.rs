//! Region feature extraction on feature maps.
//!
//! A channel is treated as the bilinear interpolant of its pixels, with pixel
//! `(i, j)` sitting at `(x = j + 0.5, y = i + 0.5)` and zeros beyond the
//! border. The interpolant is a sum of separable tent functions,
//! `f(x, y) = sum_ij F[i,j] * tent(x - j - 0.5) * tent(y - i - 0.5)`, so the
//! exact region integral factors into per-row and per-column tent integrals.
//! Both Precise RoI Pooling and single-bin RoI Align reduce to such
//! separable weights and share one differentiable graph op.

use crate::encoder::Level;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::tensor::RegionWeights;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// A pooled `C`-vector together with the region it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature<T> {
    pub vector: Vec<T>,
    /// Region in feature-map coordinates.
    pub source_region: Region,
    pub level: Level,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMethod {
    /// Exact mean of the bilinear interpolant over the region.
    Precise,
    /// Mean of `samples x samples` bilinear samples on a regular grid.
    Align { samples: usize },
}

impl std::str::FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prroi" | "precise" => Ok(PoolMethod::Precise),
            "align" | "roi_align" => Ok(PoolMethod::Align { samples: 2 }),
            _ => Err(Error::Config(format!("unknown pooling method '{s}'"))),
        }
    }
}

/// Region `region` (feature-map coordinates) on image `batch` of a batched map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub region: Region,
}

#[inline]
fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Antiderivative of the unit tent, zero at minus infinity.
#[inline]
fn tent_integral(d: f64) -> f64 {
    if d <= -1.0 {
        0.0
    } else if d <= 0.0 {
        0.5 * (d + 1.0) * (d + 1.0)
    } else if d < 1.0 {
        1.0 - 0.5 * (1.0 - d) * (1.0 - d)
    } else {
        1.0
    }
}

fn check_region(u: &Region) -> Result<()> {
    let ok = [u.t, u.l, u.b, u.r].iter().all(|v| v.is_finite()) && u.b > u.t && u.r > u.l;
    if ok {
        Ok(())
    } else {
        Err(Error::EmptyRegion)
    }
}

/// Pixel indices whose tent overlaps `(lo, hi)`, clipped to `[0, size)`.
fn support(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let first = (lo - 1.5).floor().max(0.0);
    let last = (hi + 0.5).ceil().min(size as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize + 1))
}

/// Normalized tent integrals of one axis: `(1/len) * int_lo^hi tent(s - i - 0.5) ds`.
fn precise_axis(lo: f64, hi: f64, size: usize) -> (usize, Vec<f64>) {
    let Some((a, b)) = support(lo, hi, size) else {
        return (0, Vec::new());
    };
    let len = hi - lo;
    let w = (a..b)
        .map(|i| {
            let c = i as f64 + 0.5;
            (tent_integral(hi - c) - tent_integral(lo - c)) / len
        })
        .collect();
    (a, w)
}

/// Averaged tent values at `samples` regularly spaced points of one axis.
fn align_axis(lo: f64, hi: f64, size: usize, samples: usize) -> (usize, Vec<f64>) {
    let Some((a, b)) = support(lo, hi, size) else {
        return (0, Vec::new());
    };
    let step = (hi - lo) / samples as f64;
    let w = (a..b)
        .map(|i| {
            let c = i as f64 + 0.5;
            (0..samples)
                .map(|s| tent(lo + (s as f64 + 0.5) * step - c))
                .sum::<f64>()
                / samples as f64
        })
        .collect();
    (a, w)
}

pub(crate) fn region_weights(
    roi: &Roi,
    h: usize,
    w: usize,
    method: PoolMethod,
) -> Result<RegionWeights> {
    let u = &roi.region;
    check_region(u)?;
    let ((r0, wy), (c0, wx)) = match method {
        PoolMethod::Precise => (precise_axis(u.t, u.b, h), precise_axis(u.l, u.r, w)),
        PoolMethod::Align { samples } => {
            if samples == 0 {
                return Err(Error::Config("roi_align needs at least one sample".into()));
            }
            (
                align_axis(u.t, u.b, h, samples),
                align_axis(u.l, u.r, w, samples),
            )
        }
    };
    Ok(RegionWeights {
        batch: roi.batch,
        r0,
        wy,
        c0,
        wx,
    })
}

/// Differentiable pooling of many regions from an N x C x H x W map; output R x C.
pub fn pool_regions<T: Scalar>(
    g: &Graph<T>,
    fm: Var,
    rois: &[Roi],
    method: PoolMethod,
) -> Result<Var> {
    let shape = g.shape(fm);
    let [_, _, h, w] = shape[..] else {
        return Err(Error::shape("pool_regions", format!("expected NCHW, got {shape:?}")));
    };
    let weights = rois
        .iter()
        .map(|r| region_weights(r, h, w, method))
        .collect::<Result<Vec<_>>>()?;
    g.region_pool(fm, weights)
}

fn pool_single<T: Scalar>(
    fm: &Tensor<T>,
    u: &Region,
    level: Level,
    method: PoolMethod,
) -> Result<PooledFeature<T>> {
    let [n, c, h, w] = fm.dims4("prroi_pool")?;
    if n != 1 {
        return Err(Error::shape("prroi_pool", format!("expected 1 x C x H x W, got {:?}", fm.shape())));
    }
    let rw = region_weights(&Roi { batch: 0, region: *u }, h, w, method)?;
    let vector = (0..c)
        .map(|ch| {
            let plane = &fm.data()[ch * h * w..(ch + 1) * h * w];
            let mut acc = 0.0;
            for (a, &wy) in rw.wy.iter().enumerate() {
                for (t, &wx) in rw.wx.iter().enumerate() {
                    acc += wy * wx * plane[(rw.r0 + a) * w + rw.c0 + t].f64();
                }
            }
            T::of(acc)
        })
        .collect();
    Ok(PooledFeature {
        vector,
        source_region: *u,
        level,
    })
}

/// Precise RoI Pooling of one region (feature-map coordinates) on a 1 x C x H x W map.
pub fn prroi_pool<T: Scalar>(fm: &Tensor<T>, u: &Region, level: Level) -> Result<PooledFeature<T>> {
    pool_single(fm, u, level, PoolMethod::Precise)
}

/// Single-bin RoI Align with `samples_per_axis^2` bilinear samples.
pub fn roi_align<T: Scalar>(
    fm: &Tensor<T>,
    u: &Region,
    samples_per_axis: usize,
    level: Level,
) -> Result<PooledFeature<T>> {
    pool_single(
        fm,
        u,
        level,
        PoolMethod::Align {
            samples: samples_per_axis,
        },
    )
}

/// Output shape of [`negative_grid`] for an N x C x H x W map.
pub fn negative_grid_shape(shape: &[usize], kernel: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape("negative_grid", format!("expected NCHW, got {shape:?}")));
    };
    if kernel == 0 || kernel > h.min(w) {
        return Err(Error::KernelTooLarge { kernel, h, w });
    }
    Ok([n, c, h - kernel + 1, w - kernel + 1])
}

/// Stride-1 `kernel x kernel` average pooling; every output cell is one negative region.
pub fn negative_grid<T: Scalar>(g: &Graph<T>, fm: Var, kernel: usize) -> Result<Var> {
    let expect = negative_grid_shape(&g.shape(fm), kernel)?;
    let out = g.avg_pool(fm, kernel, 1)?;
    debug_assert_eq!(g.shape(out), expect);
    Ok(out)
}

/// Negative grid flattened to `(N * H' * W') x C` rows.
pub fn negative_features<T: Scalar>(g: &Graph<T>, fm: Var, kernel: usize) -> Result<Var> {
    let grid = negative_grid(g, fm, kernel)?;
    g.flatten_spatial(grid)
}

/// Number of region negatives seen by one query image: grid cells over a shard of
/// `batch / shards` images, or over the whole batch when features are synchronized.
pub fn negative_count(
    batch: usize,
    map_h: usize,
    map_w: usize,
    kernel: usize,
    shards: usize,
    synchronized: bool,
) -> Result<usize> {
    if shards == 0 || !batch.is_multiple_of(shards) {
        return Err(Error::Config(format!("batch {batch} does not split into {shards} shards")));
    }
    let images = if synchronized { batch } else { batch / shards };
    let [n, _, gh, gw] = negative_grid_shape(&[images, 1, map_h, map_w], kernel)?;
    Ok(n * gh * gw)
}
