//! Toy convolutional encoder with C3/C4/C5 stages, an optional FPN top-down
//! path, region projection heads, image heads and the momentum (key) copy.
//!
//! Backbone layout, for input `S x S`:
//!
//! | stage | ops                                             | rate |
//! |-------|-------------------------------------------------|------|
//! | C1    | conv3x3/2-BN-ReLU, avg-pool 2                   | 4    |
//! | C2    | conv3x3-BN-ReLU x2                              | 4    |
//! | C3-C5 | conv3x3/2-BN-ReLU, conv3x3-BN-ReLU              | 8, 16, 32 |

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{BnUpdate, Forward, ParamId, ParamKind, ParamSet};

use crate::config::{self, ConfigSection};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::tensor::{Scalar, Tensor, Var};
use params::kaiming_uniform;
use rand::Rng;

const BN_EPS: f64 = 1e-5;

/// Feature-map level; C* come from the backbone, P* from the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    C3,
    C4,
    C5,
    P3,
    P4,
    P5,
}

impl Level {
    pub fn downsample_rate(self) -> f64 {
        match self {
            Level::C3 | Level::P3 => 8.0,
            Level::C4 | Level::P4 => 16.0,
            Level::C5 | Level::P5 => 32.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::C3 => "C3",
            Level::C4 => "C4",
            Level::C5 => "C5",
            Level::P3 => "P3",
            Level::P4 => "P4",
            Level::P5 => "P5",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "C3" => Level::C3,
            "C4" => Level::C4,
            "C5" => Level::C5,
            "P3" => Level::P3,
            "P4" => Level::P4,
            "P5" => Level::P5,
            other => return Err(Error::Config(format!("unknown level '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Region learning on C4, no pyramid.
    C4,
    /// Region learning on P3 and P4.
    Fpn,
}

impl Variant {
    /// Levels that carry a region head.
    pub fn region_levels(self) -> &'static [Level] {
        match self {
            Variant::C4 => &[Level::C4],
            Variant::Fpn => &[Level::P3, Level::P4],
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c4" => Ok(Variant::C4),
            "fpn" => Ok(Variant::Fpn),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::C4 => "C4",
            Variant::Fpn => "FPN",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of C1..C5.
    pub stage_channels: [usize; 5],
    pub input_size: usize,
    pub fpn_channels: usize,
    pub region_head_channels: usize,
    pub image_embed_dim: usize,
    pub variant: Variant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [8, 16, 32, 64, 128],
            input_size: 64,
            fpn_channels: 32,
            region_head_channels: 32,
            image_embed_dim: 32,
            variant: Variant::C4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let counts = self
            .stage_channels
            .iter()
            .chain([&self.fpn_channels, &self.region_head_channels, &self.image_embed_dim]);
        if counts.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial side of a level's map.
    pub fn map_size(&self, level: Level) -> usize {
        self.input_size / level.downsample_rate() as usize
    }

    fn level_channels(&self, level: Level) -> usize {
        match level {
            Level::C3 => self.stage_channels[2],
            Level::C4 => self.stage_channels[3],
            Level::C5 => self.stage_channels[4],
            Level::P3 | Level::P4 | Level::P5 => self.fpn_channels,
        }
    }
}

impl ConfigSection for EncoderConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "stage_channels" => {
                let c = config::list::<usize>(key, v)?;
                self.stage_channels = c
                    .try_into()
                    .map_err(|_| Error::Config("stage_channels needs 5 values".into()))?;
            }
            "input_size" => self.input_size = config::value(key, v)?,
            "fpn_channels" => self.fpn_channels = config::value(key, v)?,
            "region_head_channels" => self.region_head_channels = config::value(key, v)?,
            "image_embed_dim" => self.image_embed_dim = config::value(key, v)?,
            "variant" => self.variant = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let sc = self.stage_channels.map(|c| c.to_string()).join(",");
        vec![
            ("stage_channels", sc),
            ("input_size", self.input_size.to_string()),
            ("fpn_channels", self.fpn_channels.to_string()),
            ("region_head_channels", self.region_head_channels.to_string()),
            ("image_embed_dim", self.image_embed_dim.to_string()),
            ("variant", self.variant.to_string().to_ascii_lowercase()),
        ]
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Bn {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, c: usize) -> Self {
        Bn {
            gamma: ps.add(format!("{prefix}.gamma"), Tensor::ones(&[c]), ParamKind::Weight),
            beta: ps.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), ParamKind::Weight),
            mean: ps.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            var: ps.add(format!("{prefix}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let ps = f.params();
        let running = (ps.get(self.mean), ps.get(self.var));
        let (y, stats) = f
            .g
            .batch_norm(x, f.var(self.gamma), f.var(self.beta), f.mode, running, BN_EPS)?;
        if let Some(stats) = stats {
            f.record(BnUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng);
        Conv {
            w: ps.add(format!("{prefix}.weight"), w, ParamKind::Weight),
            b: bias.then(|| ps.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight)),
            stride,
            pad: k / 2,
        }
    }

    fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let y = f.g.conv2d(x, f.var(self.w), self.stride, self.pad)?;
        match self.b {
            Some(b) => f.g.bias_add(y, f.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: Bn,
}

impl ConvBnRelu {
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv::new(ps, &format!("{prefix}.conv"), cin, cout, 3, stride, false, rng),
            bn: Bn::new(ps, &format!("{prefix}.bn"), cout),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            w: ps.add(format!("{prefix}.weight"), kaiming_uniform(&[dout, din], din, rng), ParamKind::Weight),
            b: bias.then(|| ps.add(format!("{prefix}.bias"), Tensor::zeros(&[dout]), ParamKind::Weight)),
        }
    }
}

/// Stack of linear layers, each optionally followed by BN and ReLU.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<(Dense, Option<Bn>, bool)>,
}

impl Mlp {
    /// `dims = [d0, d1, ..., dk]`; `bn_relu[i]` is the post-linear (bn, relu) of layer i.
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        dims: &[usize],
        post: &[(bool, bool)],
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .zip(post)
            .enumerate()
            .map(|(i, (d, &(bn, relu)))| {
                let p = format!("{prefix}.fc{}", i + 1);
                let dense = Dense::new(ps, &p, d[0], d[1], !bn, rng);
                let bn = bn.then(|| Bn::new(ps, &format!("{prefix}.bn{}", i + 1), d[1]));
                (dense, bn, relu)
            })
            .collect();
        Mlp { layers }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, mut x: Var) -> Result<Var> {
        for (dense, bn, relu) in &self.layers {
            x = f.g.linear(x, f.var(dense.w), dense.b.map(|b| f.var(b)))?;
            if let Some(bn) = bn {
                x = bn.forward(f, x)?;
            }
            if *relu {
                x = f.g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Clone, Debug)]
struct RegionHead {
    level: Level,
    first: ConvBnRelu,
    second: Conv,
    predictor: Option<Mlp>,
}

#[derive(Clone, Debug)]
struct Pyramid {
    lateral3: Conv,
    lateral4: Conv,
    lateral5: Conv,
}

/// Backbone outputs.
#[derive(Clone, Copy, Debug)]
pub struct BackboneMaps {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

/// Pyramid outputs, all at `fpn_channels`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidMaps {
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

/// Image-level head outputs.
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbedding {
    /// Projection (the embedding compared across views).
    pub z: Var,
    /// Prediction, cosine mode only.
    pub p: Option<Var>,
}

/// Everything one forward pass of the encoder produces.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub backbone: BackboneMaps,
    pub pyramid: Option<PyramidMaps>,
    /// Region-head maps, one per region level in variant order.
    pub region_maps: Vec<(Level, Var)>,
    pub image: ImageEmbedding,
}

/// Architecture description; parameters live in a [`ParamSet`] built alongside it.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    mode: LossMode,
    stem: ConvBnRelu,
    stages: Vec<[ConvBnRelu; 2]>,
    pyramid: Option<Pyramid>,
    heads: Vec<RegionHead>,
    image_proj: Mlp,
    image_pred: Option<Mlp>,
}

impl Encoder {
    /// Builds the architecture and a freshly initialized parameter set.
    pub fn new<T: Scalar>(config: &EncoderConfig, mode: LossMode, rng: &mut impl Rng) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let ch = config.stage_channels;
        let stem = ConvBnRelu::new(&mut ps, "backbone.c1", 3, ch[0], 2, rng);
        let stages = (1..5)
            .map(|s| {
                let stride = if s == 1 { 1 } else { 2 };
                let p = format!("backbone.c{}", s + 1);
                [
                    ConvBnRelu::new(&mut ps, &format!("{p}.0"), ch[s - 1], ch[s], stride, rng),
                    ConvBnRelu::new(&mut ps, &format!("{p}.1"), ch[s], ch[s], 1, rng),
                ]
            })
            .collect();
        let pyramid = (config.variant == Variant::Fpn).then(|| {
            let f = config.fpn_channels;
            Pyramid {
                lateral3: Conv::new(&mut ps, "fpn.lateral3", ch[2], f, 1, 1, true, rng),
                lateral4: Conv::new(&mut ps, "fpn.lateral4", ch[3], f, 1, 1, true, rng),
                lateral5: Conv::new(&mut ps, "fpn.lateral5", ch[4], f, 1, 1, true, rng),
            }
        });
        let hc = config.region_head_channels;
        let heads = config
            .variant
            .region_levels()
            .iter()
            .map(|&level| {
                let p = format!("head.{}", level.name().to_ascii_lowercase());
                let cin = config.level_channels(level);
                RegionHead {
                    level,
                    first: ConvBnRelu::new(&mut ps, &format!("{p}.conv1"), cin, hc, 1, rng),
                    second: Conv::new(&mut ps, &format!("{p}.conv2"), hc, hc, 3, 1, true, rng),
                    predictor: (mode == LossMode::Cosine).then(|| {
                        let hid = (hc / 4).max(1);
                        Mlp::new(&mut ps, &format!("{p}.pred"), &[hc, hid, hc], &[(true, true), (false, false)], rng)
                    }),
                }
            })
            .collect();
        let d = config.image_embed_dim;
        let (image_proj, image_pred) = match mode {
            LossMode::Contrastive => (
                Mlp::new(&mut ps, "image.proj", &[ch[4], d], &[(false, false)], rng),
                None,
            ),
            LossMode::Cosine => {
                let proj = Mlp::new(
                    &mut ps,
                    "image.proj",
                    &[ch[4], d, d, d],
                    &[(true, true), (true, true), (true, false)],
                    rng,
                );
                let hid = (d / 4).max(1);
                let pred = Mlp::new(&mut ps, "image.pred", &[d, hid, d], &[(true, true), (false, false)], rng);
                (proj, Some(pred))
            }
        };
        let enc = Encoder {
            config: config.clone(),
            mode,
            stem,
            stages,
            pyramid,
            heads,
            image_proj,
            image_pred,
        };
        Ok((enc, ps))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> LossMode {
        self.mode
    }

    /// Linear layers in the image projection and prediction heads.
    pub fn image_head_depths(&self) -> (usize, usize) {
        (self.image_proj.depth(), self.image_pred.as_ref().map_or(0, Mlp::depth))
    }

    /// C3, C4 and C5 for an `N x 3 x S x S` input.
    pub fn forward_backbone<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<BackboneMaps> {
        let shape = f.g.shape(x);
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "forward_backbone",
                format!("expected N x 3 x {s} x {s}, got {shape:?}"),
            ));
        }
        let y = self.stem.forward(f, x)?;
        let mut y = f.g.avg_pool(y, 2, 2)?;
        let mut outs = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            y = a.forward(f, y)?;
            y = b.forward(f, y)?;
            outs.push(y);
        }
        Ok(BackboneMaps {
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }

    /// `P5 = L5(C5)`, `P4 = L4(C4) + up(P5)`, `P3 = L3(C3) + up(P4)`.
    pub fn build_fpn<T: Scalar>(&self, f: &mut Forward<'_, T>, c: &BackboneMaps) -> Result<PyramidMaps> {
        let py = self.pyramid.as_ref().ok_or(Error::VariantMismatch("FPN"))?;
        let p5 = py.lateral5.forward(f, c.c5)?;
        let up5 = f.g.upsample_nearest2x(p5)?;
        let p4 = f.g.add(py.lateral4.forward(f, c.c4)?, up5)?;
        let up4 = f.g.upsample_nearest2x(p4)?;
        let p3 = f.g.add(py.lateral3.forward(f, c.c3)?, up4)?;
        Ok(PyramidMaps { p3, p4, p5 })
    }

    fn head(&self, level: Level) -> Result<&RegionHead> {
        self.heads
            .iter()
            .find(|h| h.level == level)
            .ok_or_else(|| Error::shape("region_head", format!("no region head on {level}")))
    }

    /// conv3x3 - BN - ReLU - conv3x3 projection of one level's map.
    pub fn region_head<T: Scalar>(&self, f: &mut Forward<'_, T>, fm: Var, level: Level) -> Result<Var> {
        let head = self.head(level)?;
        let y = head.first.forward(f, fm)?;
        head.second.forward(f, y)
    }

    /// Prediction MLP applied to pooled region vectors (cosine mode).
    pub fn region_predict<T: Scalar>(&self, f: &mut Forward<'_, T>, pooled: Var, level: Level) -> Result<Var> {
        let pred = self
            .head(level)?
            .predictor
            .as_ref()
            .ok_or(Error::VariantMismatch("cosine-mode"))?;
        pred.forward(f, pooled)
    }

    /// Global average pooling of C5 followed by the projection (and prediction) MLPs.
    pub fn image_head<T: Scalar>(&self, f: &mut Forward<'_, T>, c5: Var) -> Result<ImageEmbedding> {
        let pooled = f.g.global_avg_pool(c5)?;
        let z = self.image_proj.forward(f, pooled)?;
        let p = match &self.image_pred {
            Some(pred) => Some(pred.forward(f, z)?),
            None => None,
        };
        Ok(ImageEmbedding { z, p })
    }

    /// Full pass: backbone, pyramid (FPN variant), region heads and image head.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<EncoderOutput> {
        let backbone = self.forward_backbone(f, x)?;
        let pyramid = match self.config.variant {
            Variant::Fpn => Some(self.build_fpn(f, &backbone)?),
            Variant::C4 => None,
        };
        let mut region_maps = Vec::new();
        for &level in self.config.variant.region_levels() {
            let fm = match (level, &pyramid) {
                (Level::C4, _) => backbone.c4,
                (Level::P3, Some(p)) => p.p3,
                (Level::P4, Some(p)) => p.p4,
                _ => return Err(Error::VariantMismatch("FPN")),
            };
            region_maps.push((level, self.region_head(f, fm, level)?));
        }
        let image = self.image_head(f, backbone.c5)?;
        Ok(EncoderOutput {
            backbone,
            pyramid,
            region_maps,
            image,
        })
    }
}

/// Query parameters, their momentum copy, and the EMA coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub query: ParamSet<T>,
    pub key: ParamSet<T>,
    pub ema_momentum: f64,
}

impl<T: Scalar> EncoderState<T> {
    pub fn new(query: ParamSet<T>, ema_momentum: f64) -> Self {
        EncoderState {
            key: query.clone(),
            query,
            ema_momentum,
        }
    }

    /// `key <- m * key + (1 - m) * query` for every entry, running statistics included.
    pub fn momentum_update(&mut self) -> Result<()> {
        if !self.query.same_layout(&self.key) {
            return Err(Error::shape("momentum_update", "query and key layouts differ"));
        }
        let m = T::of(self.ema_momentum);
        let q = T::one() - m;
        for id in self.key.ids().collect::<Vec<_>>() {
            let src = self.query.get(id).data();
            let dst = self.key.get_mut(id).data_mut();
            for (k, &v) in dst.iter_mut().zip(src) {
                *k = m * *k + q * v;
            }
        }
        Ok(())
    }
}
