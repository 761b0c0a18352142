//! Pretraining loop: view sampling, both encoders, region and image losses,
//! SGD with a cosine schedule, and the momentum update.

use crate::augment::{sample_view_pair, AugmentConfig, View};
use crate::config::{self, ConfigSection};
use crate::data::{Dataset, FolderDataset, SyntheticDataset};
use crate::encoder::{Checkpoint, Encoder, EncoderConfig, EncoderOutput, EncoderState, Forward, Level, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::geometry::{region_pairs, RegionPair, WindowSpec};
use crate::losses::{
    assemble_region_batch, batch_region_loss, combined_loss, cosine_loss, image_loss, LossConfig, LossMode,
    MomentumQueue,
};
use crate::tensor::{BnMode, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Momentum of BN running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Base learning rate; `None` selects 0.03 (contrastive) or 0.1 (cosine) times batch/256.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Explicit window specs per level; levels not listed use the scaled defaults.
    pub window_specs: Vec<(Level, WindowSpec)>,
    pub ema_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 2,
            batch_size: 8,
            schedule: Schedule::Cosine,
            seed: 0,
            window_specs: Vec::new(),
            ema_momentum: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!("ema_momentum must lie in (0, 1), got {}", self.ema_momentum)));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self, mode: LossMode) -> f64 {
        self.lr.unwrap_or_else(|| {
            let per_256 = match mode {
                LossMode::Contrastive => 0.03,
                LossMode::Cosine => 0.1,
            };
            per_256 * self.batch_size as f64 / 256.0
        })
    }

    /// Window spec of `level`: the explicit entry, or the 224-px default scaled to `input_size`.
    pub fn window_spec(&self, level: Level, input_size: usize) -> WindowSpec {
        if let Some((_, s)) = self.window_specs.iter().find(|(l, _)| *l == level) {
            return *s;
        }
        let (w, s) = match level {
            Level::C3 | Level::P3 => (32, 24),
            _ => (48, 32),
        };
        WindowSpec::scaled_from_224(w, s, input_size as u32)
    }
}

impl ConfigSection for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = if v == "auto" { None } else { Some(config::value(key, v)?) },
            "momentum" => self.momentum = config::value(key, v)?,
            "weight_decay" => self.weight_decay = config::value(key, v)?,
            "epochs" => self.epochs = config::value(key, v)?,
            "batch_size" => self.batch_size = config::value(key, v)?,
            "schedule" => {
                if v != "cosine" {
                    return Err(Error::Config(format!("unsupported schedule '{v}'")));
                }
                self.schedule = Schedule::Cosine;
            }
            "seed" => self.seed = config::value(key, v)?,
            "window_specs" => {
                self.window_specs = if v == "auto" || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|item| {
                            let (l, s) = item
                                .split_once(':')
                                .ok_or_else(|| Error::Config(format!("window_specs entry '{item}' needs LEVEL:WxxSyy")))?;
                            Ok((l.parse()?, s.trim().parse()?))
                        })
                        .collect::<Result<_>>()?
                };
            }
            "ema_momentum" => self.ema_momentum = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let specs = if self.window_specs.is_empty() {
            "auto".to_string()
        } else {
            self.window_specs
                .iter()
                .map(|(l, s)| format!("{l}:{s}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("lr", self.lr.map_or("auto".into(), |v| v.to_string())),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("schedule", "cosine".into()),
            ("seed", self.seed.to_string()),
            ("window_specs", specs),
            ("ema_momentum", self.ema_momentum.to_string()),
        ]
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// `synthetic` or a directory of PPM files.
    pub data: String,
    /// Synthetic image count.
    pub num_images: usize,
    /// Synthetic canvas side in pixels.
    pub canvas_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data: "synthetic".into(),
            num_images: 64,
            canvas_size: 96,
        }
    }
}

impl DataConfig {
    /// Opens the configured dataset; synthetic images are drawn from `seed`.
    pub fn open(&self, seed: u64) -> Result<Box<dyn Dataset>> {
        if self.data == "synthetic" {
            Ok(Box::new(SyntheticDataset::new(self.num_images, self.canvas_size, seed)))
        } else {
            Ok(Box::new(FolderDataset::open(Path::new(&self.data))?))
        }
    }
}

impl ConfigSection for DataConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data" => self.data = v.to_string(),
            "num_images" => self.num_images = config::value(key, v)?,
            "canvas_size" => self.canvas_size = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", self.data.clone()),
            ("num_images", self.num_images.to_string()),
            ("canvas_size", self.canvas_size.to_string()),
        ]
    }
}

/// Every setting of a pretraining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let pairs = config::parse_lines(text)?;
        config::apply_all(
            &pairs,
            &mut [&mut c.train, &mut c.augment, &mut c.loss, &mut c.encoder, &mut c.data],
        )?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn render(&self) -> String {
        config::render(&[&self.train, &self.augment, &self.loss, &self.encoder, &self.data])
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        if !self.train.batch_size.is_multiple_of(self.loss.shards) {
            return Err(Error::Config(format!(
                "batch_size {} does not split into {} shards",
                self.train.batch_size, self.loss.shards
            )));
        }
        for &level in self.encoder.variant.region_levels() {
            let side = self.encoder.map_size(level);
            if self.loss.neg_kernel > side {
                return Err(Error::KernelTooLarge {
                    kernel: self.loss.neg_kernel,
                    h: side,
                    w: side,
                });
            }
        }
        Ok(())
    }
}

/// `0.5 * (1 + cos(pi * step / total)) * lr0`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) * lr0
}

/// Stacks views into a normalized `N x 3 x S x S` tensor.
pub fn views_to_tensor(views: &[&View]) -> Result<Tensor<f32>> {
    let first = views.first().ok_or_else(|| Error::shape("views_to_tensor", "no views"))?;
    let (w, h) = (first.image.width(), first.image.height());
    let mut data = Vec::with_capacity(views.len() * 3 * w * h);
    for v in views {
        if v.image.width() != w || v.image.height() != h {
            return Err(Error::shape("views_to_tensor", "views differ in size"));
        }
        data.extend(v.image.data().iter().map(|&x| (x - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::from_vec(&[views.len(), 3, h, w], data)
}

/// Momentum SGD with coupled weight decay: `v = mu*v + g + wd*theta; theta -= lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|_| None).collect(),
        }
    }

    /// Updates every weight entry; `grads[i]` is `None` when no gradient reached entry `i`.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for id in params.ids().collect::<Vec<_>>() {
            if params.kind(id) != ParamKind::Weight {
                continue;
            }
            let i = id.0;
            let theta = params.get_mut(id);
            let vel = self.velocity[i].get_or_insert_with(|| Tensor::zeros(theta.shape()));
            let g = grads[i].as_ref();
            for (k, (t, v)) in theta.data_mut().iter_mut().zip(vel.data_mut()).enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]) + wd * *t;
                *v = mu * *v + gk;
                *t -= lr * *v;
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_rs: f64,
    pub loss_is: f64,
    pub loss_total: f64,
    /// Region InfoNCE of the current batch (equals `loss_rs` in contrastive mode).
    pub rs_infonce: f64,
    /// Uniform-logit reference for `rs_infonce`.
    pub rs_baseline: f64,
    /// Mean region negatives per image with pairs.
    pub mean_negatives: f64,
    pub num_pairs: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.lr, self.loss_rs, self.loss_is, self.loss_total
        )
    }
}

pub const METRICS_HEADER: &str = "step,lr,loss_rs,loss_is,loss_total";

/// Training state that persists across steps.
pub struct Trainer {
    pub config: RunConfig,
    pub encoder: Encoder,
    pub state: EncoderState<f32>,
    pub queue: MomentumQueue<f32>,
    sgd: Sgd,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
    /// Check every step that no gradient reaches the key encoder.
    pub audit_key_grads: bool,
}

struct LevelLoss {
    loss: Option<Var>,
    infonce: f64,
    baseline: f64,
    mean_negatives: f64,
    num_pairs: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let (encoder, params) = Encoder::new::<f32>(&config.encoder, config.loss.mode, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let sgd = Sgd::new(&params, config.train.momentum, config.train.weight_decay);
        let queue = MomentumQueue::new(config.loss.queue_size, config.encoder.image_embed_dim);
        Ok(Trainer {
            state: EncoderState::new(params, config.train.ema_momentum),
            encoder,
            queue,
            sgd,
            rng,
            step: 0,
            total_steps,
            audit_key_grads: cfg!(debug_assertions),
            config,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.render(),
            query: self.state.query.clone(),
            key: self.state.key.clone(),
        }
    }

    fn pairs_for(&self, level: Level, views: &[(View, View)]) -> Result<Vec<Vec<RegionPair>>> {
        let spec = self.config.train.window_spec(level, self.config.encoder.input_size);
        views
            .iter()
            .map(|(q, k)| region_pairs(&q.transform, &k.transform, &spec))
            .collect()
    }

    /// Samples views for `indices`, runs one optimization step and returns its metrics.
    pub fn step(&mut self, dataset: &dyn Dataset, indices: &[usize]) -> Result<StepMetrics> {
        let size = self.config.encoder.input_size;
        let views = indices
            .iter()
            .map(|&i| sample_view_pair(&dataset.get(i)?, &self.config.augment, size, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let xq = views_to_tensor(&views.iter().map(|v| &v.0).collect::<Vec<_>>())?;
        let xk = views_to_tensor(&views.iter().map(|v| &v.1).collect::<Vec<_>>())?;
        let levels = self.config.encoder.variant.region_levels();
        let pairs = levels
            .iter()
            .map(|&l| self.pairs_for(l, &views))
            .collect::<Result<Vec<_>>>()?;
        let lr = cosine_lr(self.config.train.base_lr(self.config.loss.mode), self.step, self.total_steps);
        let g = Graph::new().tolerate_degenerate_norms();
        let query = &self.state.query;
        let mut fq = Forward::bind(&g, query, true, BnMode::Train);
        let xqv = g.constant(xq);
        let xkv = g.constant(xk);
        let out_q = self.encoder.forward(&mut fq, xqv)?;
        let cfg = &self.config.loss;

        let (level_losses, l_is, key_vars) = match cfg.mode {
            LossMode::Contrastive => {
                let mut fk = Forward::bind(&g, &self.state.key, false, BnMode::Train);
                let out_k = self.encoder.forward(&mut fk, xkv)?;
                let mut per_level = Vec::new();
                for (li, &level) in levels.iter().enumerate() {
                    let rb = assemble_region_batch(
                        &g,
                        region_map(&out_q, level)?,
                        region_map(&out_k, level)?,
                        &pairs[li],
                        level,
                        cfg,
                        true,
                        true,
                    )?;
                    let o = batch_region_loss(&g, &rb, cfg.tau)?;
                    per_level.push(LevelLoss {
                        infonce: o.loss.map_or(0.0, |l| g.value(l).item() as f64),
                        loss: o.loss,
                        baseline: o.uniform_baseline,
                        mean_negatives: o.mean_negatives,
                        num_pairs: o.num_pairs,
                    });
                }
                let zq = g.l2_normalize(out_q.image.z)?;
                let zk = g.l2_normalize(out_k.image.z)?;
                let l_is = image_loss(&g, zq, zk, &mut self.queue, cfg.tau)?;
                // key running statistics follow the query through the momentum update
                let kv = fk.vars().to_vec();
                (per_level, l_is, kv)
            }
            LossMode::Cosine => {
                let out_k = self.encoder.forward(&mut fq, xkv)?;
                let mut per_level = Vec::new();
                for (li, &level) in levels.iter().enumerate() {
                    let (mq, mk) = (region_map(&out_q, level)?, region_map(&out_k, level)?);
                    let rb = assemble_region_batch(&g, mq, mk, &pairs[li], level, cfg, false, false)?;
                    let probe = region_probe(&g, &pairs[li], mq, mk, level, cfg)?;
                    let rows = g.shape(rb.q_feats)[0];
                    let loss = if rows >= 2 {
                        let p_q = self.encoder.region_predict(&mut fq, rb.q_feats, level)?;
                        let p_k = self.encoder.region_predict(&mut fq, rb.k_pos, level)?;
                        Some(cosine_loss(&g, p_q, rb.k_pos, p_k, rb.q_feats)?)
                    } else {
                        None
                    };
                    per_level.push(LevelLoss {
                        loss,
                        infonce: probe.0,
                        baseline: probe.1,
                        mean_negatives: probe.2,
                        num_pairs: rows,
                    });
                }
                let (pq, pk) = (out_q.image.p, out_k.image.p);
                let (pq, pk) = pq.zip(pk).ok_or(Error::VariantMismatch("cosine-mode"))?;
                let l_is = cosine_loss(&g, pq, out_k.image.z, pk, out_q.image.z)?;
                (per_level, l_is, Vec::new())
            }
        };

        let n_levels = level_losses.len() as f64;
        let present: Vec<Var> = level_losses.iter().filter_map(|l| l.loss).collect();
        let l_rs = match present.split_first() {
            Some((&first, rest)) => {
                let mut acc = first;
                for &l in rest {
                    acc = g.add(acc, l)?;
                }
                g.scale(acc, 1.0 / n_levels)?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        let total = combined_loss(&g, l_rs, l_is, cfg.lambda)?;
        let metrics = StepMetrics {
            step: self.step,
            lr,
            loss_rs: g.value(l_rs).item() as f64,
            loss_is: g.value(l_is).item() as f64,
            loss_total: g.value(total).item() as f64,
            rs_infonce: level_losses.iter().map(|l| l.infonce).sum::<f64>() / n_levels,
            rs_baseline: level_losses.iter().map(|l| l.baseline).sum::<f64>() / n_levels,
            mean_negatives: level_losses.iter().map(|l| l.mean_negatives).sum::<f64>() / n_levels,
            num_pairs: level_losses.iter().map(|l| l.num_pairs).sum(),
        };
        if !(metrics.loss_total.is_finite() && metrics.loss_rs.is_finite() && metrics.loss_is.is_finite()) {
            let crops: Vec<String> = indices
                .iter()
                .zip(&views)
                .map(|(i, (q, k))| format!("#{i} q={:?} k={:?} flip={}", q.transform.crop, k.transform.crop, q.transform.hflip))
                .collect();
            return Err(Error::NonFiniteLoss {
                step: self.step,
                dump: format!(
                    "loss_rs={} loss_is={} loss_total={} lr={} batch=[{}]",
                    metrics.loss_rs,
                    metrics.loss_is,
                    metrics.loss_total,
                    lr,
                    crops.join("; ")
                ),
            });
        }

        let grads = g.backward(total)?;
        if self.audit_key_grads {
            for &v in &key_vars {
                if grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) {
                    return Err(Error::shape("key_gradient_audit", "gradient reached the key encoder"));
                }
            }
        }
        let grad_list: Vec<Option<Tensor<f32>>> = fq.vars().iter().map(|&v| grads.get(v).cloned()).collect();
        let updates = fq.take_updates();
        drop(fq);
        self.sgd.step(&mut self.state.query, &grad_list, lr);
        self.state.query.apply_bn_updates(&updates, BN_MOMENTUM);
        self.state.momentum_update()?;
        self.step += 1;
        Ok(metrics)
    }
}

fn region_map(out: &EncoderOutput, level: Level) -> Result<Var> {
    out.region_maps
        .iter()
        .find(|(l, _)| *l == level)
        .map(|(_, v)| *v)
        .ok_or(Error::VariantMismatch("region level"))
}

/// Gradient-free region InfoNCE on detached maps: (loss, uniform baseline, mean negatives).
fn region_probe(
    g: &Graph<f32>,
    pairs: &[Vec<RegionPair>],
    mq: Var,
    mk: Var,
    level: Level,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let (dq, dk) = (g.detach(mq), g.detach(mk));
    let rb = assemble_region_batch(g, dq, dk, pairs, level, cfg, true, true)?;
    let o = batch_region_loss(g, &rb, cfg.tau)?;
    Ok((
        o.loss.map_or(0.0, |l| g.value(l).item() as f64),
        o.uniform_baseline,
        o.mean_negatives,
    ))
}

/// Outcome of a full run.
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    pub trainer: Trainer,
}

/// Steps per epoch (incomplete final batches are dropped).
pub fn steps_per_epoch(dataset_len: usize, batch: usize) -> usize {
    dataset_len / batch
}

/// Runs `epochs` passes over `dataset`. When `out` is given, writes
/// `metrics.csv` (one row per step) and `checkpoint.bin` there.
pub fn train(config: &RunConfig, dataset: &dyn Dataset, out: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    let batch = config.train.batch_size;
    let spe = steps_per_epoch(dataset.len(), batch);
    if spe == 0 {
        return Err(Error::Config(format!("dataset of {} images is smaller than one batch", dataset.len())));
    }
    let total = spe * config.train.epochs;
    let mut trainer = Trainer::new(config.clone(), total)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    order_rng.set_stream(2);
    let mut csv = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((f, p))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(total);
    for _ in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks_exact(batch) {
            let m = trainer.step(dataset, chunk)?;
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            history.push(m);
        }
    }
    if let Some((mut f, p)) = csv {
        f.flush().map_err(|e| Error::io(&p, e))?;
        let dir = out.expect("csv implies out");
        crate::encoder::save_checkpoint(&dir.join("checkpoint.bin"), &trainer.checkpoint())?;
    }
    Ok(TrainReport { history, trainer })
}

/// Rebuilds the run config and architecture recorded in a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Encoder)> {
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let (enc, fresh) = Encoder::new::<f32>(&cfg.encoder, cfg.loss.mode, &mut ChaCha8Rng::seed_from_u64(0))?;
    if !fresh.same_layout(&ckpt.query) || !fresh.same_layout(&ckpt.key) {
        return Err(Error::Checkpoint("parameter layout does not match the recorded config".into()));
    }
    Ok((cfg, enc))
}

/// Mean of `values` over trailing windows of `window` entries.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values
        .windows(w.min(values.len().max(1)))
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Variant;

    fn tiny(mode: LossMode, variant: Variant) -> RunConfig {
        let mut c = RunConfig::default();
        c.encoder.stage_channels = [4, 4, 8, 8, 8];
        c.encoder.fpn_channels = 8;
        c.encoder.region_head_channels = 8;
        c.encoder.image_embed_dim = 8;
        c.encoder.variant = variant;
        c.loss.mode = mode;
        c.loss.queue_size = 16;
        c.train.batch_size = 4;
        c.train.epochs = 1;
        c.data.num_images = 8;
        c.data.canvas_size = 80;
        c
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0.2, 0, 100), 0.2);
        assert!((cosine_lr(0.2, 50, 100) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(0.2, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn default_lr_and_windows() {
        let t = TrainConfig::default();
        assert!((t.base_lr(LossMode::Contrastive) - 0.03 * 8.0 / 256.0).abs() < 1e-15);
        assert!((t.base_lr(LossMode::Cosine) - 0.1 * 8.0 / 256.0).abs() < 1e-15);
        assert_eq!(t.window_spec(Level::C4, 64), WindowSpec::new(14., 10.).unwrap());
        assert_eq!(t.window_spec(Level::P4, 64), WindowSpec::new(14., 10.).unwrap());
        assert_eq!(t.window_spec(Level::P3, 64), WindowSpec::new(10., 7.).unwrap());
        assert_eq!(t.window_spec(Level::C4, 224), WindowSpec::new(48., 32.).unwrap());
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let mut c = tiny(LossMode::Cosine, Variant::Fpn);
        c.train.window_specs = vec![(Level::P3, WindowSpec::new(12., 6.).unwrap())];
        c.train.lr = Some(0.05);
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("batch_size=1").is_err());
        assert!(RunConfig::parse("input_size=48").is_err());
        assert!(RunConfig::parse("neg_kernel=5").is_err());
        assert!(RunConfig::parse("schedule=step").is_err());
    }

    #[test]
    fn sgd_matches_reference_update() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap(), ParamKind::Weight);
        ps.add("b", Tensor::from_vec(&[1], vec![5.0f32]).unwrap(), ParamKind::Buffer);
        let mut sgd = Sgd::new(&ps, 0.9, 0.1);
        let g = vec![Some(Tensor::from_vec(&[2], vec![0.5f32, 0.5]).unwrap()), None];
        sgd.step(&mut ps, &g, 0.1);
        // v = 0.5 + 0.1 * theta
        let w = ps.iter().next().unwrap().2.data().to_vec();
        assert!((w[0] - (1.0 - 0.1 * 0.6)).abs() < 1e-7);
        assert!((w[1] - (-2.0 - 0.1 * 0.3)).abs() < 1e-7);
        sgd.step(&mut ps, &g, 0.1);
        let v0 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((ps.iter().next().unwrap().2.data()[0] - (0.94 - 0.1 * v0 as f32)).abs() < 1e-6);
        assert_eq!(ps.iter().nth(1).unwrap().2.data(), &[5.0]);
    }

    #[test]
    fn steps_run_in_every_mode_and_variant() {
        for mode in [LossMode::Contrastive, LossMode::Cosine] {
            for variant in [Variant::C4, Variant::Fpn] {
                let cfg = tiny(mode, variant);
                let data = cfg.data.open(1).unwrap();
                let report = train(&cfg, data.as_ref(), None).unwrap_or_else(|e| panic!("{mode:?} {variant:?}: {e}"));
                assert_eq!(report.history.len(), 2);
                for m in &report.history {
                    assert!(m.loss_total.is_finite(), "{mode:?} {variant:?}");
                    assert!(m.rs_baseline >= 0.0);
                }
                let t = &report.trainer;
                assert!(t.state.query.distance(&t.state.key) > 0.0);
            }
        }
    }

    #[test]
    fn queue_fills_in_contrastive_mode() {
        let cfg = tiny(LossMode::Contrastive, Variant::C4);
        let data = cfg.data.open(1).unwrap();
        let report = train(&cfg, data.as_ref(), None).unwrap();
        assert_eq!(report.trainer.queue.len(), 8);
    }

    #[test]
    fn deterministic_metrics_and_checkpoint() {
        let cfg = tiny(LossMode::Contrastive, Variant::Fpn);
        let data = cfg.data.open(2).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&cfg, data.as_ref(), Some(a.path())).unwrap();
        train(&cfg, data.as_ref(), Some(b.path())).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
        assert_eq!(read(a.path(), "checkpoint.bin"), read(b.path(), "checkpoint.bin"));
        let text = String::from_utf8(read(a.path(), "metrics.csv")).unwrap();
        assert!(text.starts_with("step,lr,loss_rs,loss_is,loss_total\n0,"));
        let ck = crate::encoder::load_checkpoint(&a.path().join("checkpoint.bin")).unwrap();
        let (rc, _) = restore(&ck).unwrap();
        assert_eq!(rc, cfg);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert_eq!(smooth(&[1.0], 5), vec![1.0]);
    }
}
