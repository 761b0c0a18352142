//! Region-level and image-level objectives.
//!
//! Contrastive mode: InfoNCE over aligned region pairs with average-pooled
//! grid negatives, plus InfoNCE over image embeddings with a momentum queue.
//! Cosine mode: symmetric negative cosine with stop-gradient on the target.

use crate::config::{self, ConfigSection};
use crate::encoder::Level;
use crate::error::{Error, Result};
use crate::geometry::{to_feature_coords, RegionPair};
use crate::pooling::{negative_features, pool_regions, PoolMethod, Roi};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use std::ops::Range;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// InfoNCE with negatives.
    Contrastive,
    /// Negative cosine with prediction heads and stop-gradient.
    Cosine,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "contrastive" => Ok(LossMode::Contrastive),
            "cosine" => Ok(LossMode::Cosine),
            _ => Err(Error::Config(format!("unknown loss mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Contrastive => "contrastive",
            LossMode::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub mode: LossMode,
    pub queue_size: usize,
    /// Share grid negatives across all shards of the batch.
    pub negatives_sync: bool,
    /// Maximum region pairs per view pair; `None` keeps every window.
    pub cap_pairs: Option<usize>,
    /// Number of simulated devices the batch is split across.
    pub shards: usize,
    /// Average-pooling kernel of the negative grid.
    pub neg_kernel: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            lambda: 1.0,
            mode: LossMode::Contrastive,
            queue_size: 4096,
            negatives_sync: false,
            cap_pairs: None,
            shards: 1,
            neg_kernel: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.mode == LossMode::Contrastive && self.queue_size == 0 {
            return Err(Error::Config("queue_size must be >= 1 in contrastive mode".into()));
        }
        if self.shards == 0 || self.neg_kernel == 0 {
            return Err(Error::Config("shards and neg_kernel must be >= 1".into()));
        }
        if self.cap_pairs == Some(0) {
            return Err(Error::Config("cap_pairs must be >= 1 when set".into()));
        }
        Ok(())
    }
}

impl ConfigSection for LossConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "tau" => self.tau = config::value(key, v)?,
            "lambda" => self.lambda = config::value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "queue_size" => self.queue_size = config::value(key, v)?,
            "negatives_sync" => self.negatives_sync = config::value(key, v)?,
            "cap_pairs" => {
                self.cap_pairs = match v {
                    "" | "all" | "none" => None,
                    _ => Some(config::value(key, v)?),
                }
            }
            "shards" => self.shards = config::value(key, v)?,
            "neg_kernel" => self.neg_kernel = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tau", self.tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("mode", self.mode.to_string()),
            ("queue_size", self.queue_size.to_string()),
            ("negatives_sync", self.negatives_sync.to_string()),
            ("cap_pairs", self.cap_pairs.map_or("all".into(), |c| c.to_string())),
            ("shards", self.shards.to_string()),
            ("neg_kernel", self.neg_kernel.to_string()),
        ]
    }
}

/// FIFO ring buffer of unit-norm image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumQueue<T> {
    dim: usize,
    capacity: usize,
    data: Vec<T>,
    len: usize,
    cursor: usize,
}

impl<T: Scalar> MomentumQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MomentumQueue {
            dim,
            capacity,
            data: vec![T::zero(); capacity * dim],
            len: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends one vector, evicting the oldest when full. The vector must be unit
    /// norm up to the precision of `T`; it is renormalized before storage.
    pub fn push(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("queue_push", format!("expected {} values, got {}", self.dim, v.len())));
        }
        let norm = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        let tol = if T::NAME == "f32" { 1e-4 } else { UNIT_TOL };
        if !((norm - 1.0).abs() <= tol) {
            return Err(Error::NonUnitNorm(norm));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let slot = &mut self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim];
        for (s, &x) in slot.iter_mut().zip(v) {
            *s = T::of(x.f64() / norm);
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Enqueues every row of an `N x dim` tensor.
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        let [n, d] = keys.dims2("queue_enqueue")?;
        if d != self.dim {
            return Err(Error::shape("queue_enqueue", format!("dim {d}, queue holds {}", self.dim)));
        }
        for i in 0..n {
            self.push(keys.row(i))?;
        }
        Ok(())
    }

    /// Stored vectors, oldest first, as `len x dim`.
    pub fn snapshot(&self) -> Tensor<T> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let s = (start + i) % self.capacity.max(1);
            out.extend_from_slice(&self.data[s * self.dim..(s + 1) * self.dim]);
        }
        Tensor::from_vec(&[self.len, self.dim], out).expect("queue layout")
    }
}

fn check_unit<T: Scalar>(v: &[T]) -> Result<()> {
    let n = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    let tol = if T::NAME == "f32" { 1e-5 } else { UNIT_TOL };
    if (n - 1.0).abs() > tol {
        return Err(Error::NonUnitNorm(n));
    }
    Ok(())
}

/// Logit `q . k / tau` of two unit vectors.
pub fn region_similarity<T: Scalar>(q: &[T], k: &[T], tau: f64) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::shape("region_similarity", format!("{} vs {}", q.len(), k.len())));
    }
    if cfg!(debug_assertions) {
        check_unit(q)?;
        check_unit(k)?;
    }
    Ok(q.iter().zip(k).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / tau)
}

/// InfoNCE over `n` aligned pairs: row `i` of `q` against every key positive
/// (its own is the target, the others act as negatives) and every grid negative.
pub fn region_loss<T: Scalar>(g: &Graph<T>, q: Var, k_pos: Var, k_neg: Option<Var>, tau: f64) -> Result<Var> {
    let n = match g.shape(q)[..] {
        [0, _] => return Err(Error::EmptyPairs),
        [n, _] => n,
        ref s => return Err(Error::shape("region_loss", format!("q must be n x c, got {s:?}"))),
    };
    if g.shape(k_pos)[0] != n {
        return Err(Error::shape("region_loss", format!("{n} queries, {:?} positives", g.shape(k_pos))));
    }
    let keys = match k_neg {
        Some(neg) if g.shape(neg)[0] > 0 => g.concat(&[k_pos, neg], 0)?,
        _ => k_pos,
    };
    let logits = g.scale(g.matmul_t(q, keys)?, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// InfoNCE of `q` against its matching key with the queue as negatives. Keys are
/// detached; they are enqueued after the loss is formed.
pub fn image_loss<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    queue: &mut MomentumQueue<T>,
    tau: f64,
) -> Result<Var> {
    let k = g.detach(k);
    let loss = image_loss_logits(g, q, k, &queue.snapshot(), tau)?;
    queue.enqueue(&g.value(k))?;
    Ok(loss)
}

/// [`image_loss`] against an explicit negative set, without touching any queue.
pub fn image_loss_logits<T: Scalar>(g: &Graph<T>, q: Var, k: Var, negatives: &Tensor<T>, tau: f64) -> Result<Var> {
    let k = g.detach(k);
    let pos = g.rowdot(q, k)?;
    let logits = if negatives.shape()[0] > 0 {
        let neg = g.constant(negatives.clone());
        g.concat(&[pos, g.matmul_t(q, neg)?], 1)?
    } else {
        pos
    };
    let logits = g.scale(logits, 1.0 / tau)?;
    let n = g.shape(q)[0];
    g.softmax_cross_entropy(logits, &vec![0; n])
}

/// `l_rs + lambda * l_is`.
pub fn combined_loss<T: Scalar>(g: &Graph<T>, l_rs: Var, l_is: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(l_is, lambda)?;
    g.add(l_rs, weighted)
}

/// `-mean(cos(p, stopgrad(z)))` over rows.
pub fn negative_cosine<T: Scalar>(g: &Graph<T>, p: Var, z: Var) -> Result<Var> {
    let z = g.detach(z);
    let cos = g.rowdot(g.l2_normalize(p)?, g.l2_normalize(z)?)?;
    g.scale(g.mean(cos)?, -1.0)
}

/// Symmetric loss `0.5 * D(p_q, z_k) + 0.5 * D(p_k, z_q)`.
pub fn cosine_loss<T: Scalar>(g: &Graph<T>, p_q: Var, z_k: Var, p_k: Var, z_q: Var) -> Result<Var> {
    let a = negative_cosine(g, p_q, z_k)?;
    let b = negative_cosine(g, p_k, z_q)?;
    g.scale(g.add(a, b)?, 0.5)
}

/// Pooled region features of one level for a whole batch.
#[derive(Clone, Debug)]
pub struct RegionBatch {
    pub level: Level,
    /// Query-side pooled features, one row per pair, grouped by image.
    pub q_feats: Var,
    /// Key-side pooled features at the mapped windows (detached).
    pub k_pos: Var,
    /// Flattened negative grid of every key map in the batch (detached).
    pub k_neg: Var,
    /// Rows of `q_feats`/`k_pos` belonging to each image.
    pub pair_rows: Vec<Range<usize>>,
    /// Rows of `k_neg` visible to each image (its shard, or all when synchronized).
    pub neg_rows: Vec<Range<usize>>,
}

/// Which images' grid cells each image sees as negatives.
pub fn shard_ranges(batch: usize, shards: usize, synchronized: bool, cells: usize) -> Result<Vec<Range<usize>>> {
    if shards == 0 || !batch.is_multiple_of(shards) {
        return Err(Error::Config(format!("batch {batch} does not split into {shards} shards")));
    }
    let per = batch / shards;
    Ok((0..batch)
        .map(|i| {
            if synchronized {
                0..batch * cells
            } else {
                let s = i / per;
                s * per * cells..(s + 1) * per * cells
            }
        })
        .collect())
}

/// Pools query windows from `q_map` and mapped windows plus the negative grid
/// from `k_map`. When `normalize` is set every row is L2-normalized. Key-side
/// outputs are detached.
#[allow(clippy::too_many_arguments)]
pub fn assemble_region_batch<T: Scalar>(
    g: &Graph<T>,
    q_map: Var,
    k_map: Var,
    pairs: &[Vec<RegionPair>],
    level: Level,
    cfg: &LossConfig,
    normalize: bool,
    detach_keys: bool,
) -> Result<RegionBatch> {
    let [n, _, h, w] = g.value(k_map).dims4("assemble_region_batch")?;
    if pairs.len() != n || g.shape(q_map) != g.shape(k_map) {
        return Err(Error::shape(
            "assemble_region_batch",
            format!("{} pair lists for maps {:?} / {:?}", pairs.len(), g.shape(q_map), g.shape(k_map)),
        ));
    }
    let rate = level.downsample_rate();
    let mut q_rois = Vec::new();
    let mut k_rois = Vec::new();
    let mut pair_rows = Vec::with_capacity(n);
    for (b, list) in pairs.iter().enumerate() {
        let take = cfg.cap_pairs.unwrap_or(usize::MAX).min(list.len());
        let start = q_rois.len();
        for p in &list[..take] {
            q_rois.push(Roi { batch: b, region: to_feature_coords(&p.u_q, rate) });
            k_rois.push(Roi { batch: b, region: to_feature_coords(&p.u_k, rate) });
        }
        pair_rows.push(start..q_rois.len());
    }
    let k_src = if detach_keys { g.detach(k_map) } else { k_map };
    let q_feats = pool_regions(g, q_map, &q_rois, PoolMethod::Precise)?;
    let k_pos = pool_regions(g, k_src, &k_rois, PoolMethod::Precise)?;
    let k_neg = negative_features(g, g.detach(k_map), cfg.neg_kernel)?;
    let (q_feats, k_pos, k_neg) = if normalize {
        let norm = |v: Var| -> Result<Var> {
            if g.shape(v)[0] == 0 {
                Ok(v)
            } else {
                g.l2_normalize(v)
            }
        };
        (norm(q_feats)?, norm(k_pos)?, g.l2_normalize(k_neg)?)
    } else {
        (q_feats, k_pos, k_neg)
    };
    let k = cfg.neg_kernel;
    let cells = (h - k + 1) * (w - k + 1);
    let neg_rows = shard_ranges(n, cfg.shards, cfg.negatives_sync, cells)?;
    Ok(RegionBatch {
        level,
        q_feats,
        k_pos,
        k_neg,
        pair_rows,
        neg_rows,
    })
}

/// Batch region loss and its uniform-softmax reference.
#[derive(Clone, Debug)]
pub struct RegionLossOutput {
    /// `(1/N) * sum_i L_i`, with `L_i = 0` for images without pairs; `None` when no image had pairs.
    pub loss: Option<Var>,
    /// `(1/N) * sum_i ln(K_i + 1)`: the same weighting applied to uniform logits.
    pub uniform_baseline: f64,
    /// Mean candidate count minus one over images with pairs.
    pub mean_negatives: f64,
    pub num_pairs: usize,
}

/// Applies [`region_loss`] image by image, each against its own shard's negatives.
pub fn batch_region_loss<T: Scalar>(g: &Graph<T>, rb: &RegionBatch, tau: f64) -> Result<RegionLossOutput> {
    let n = rb.pair_rows.len();
    let mut total: Option<Var> = None;
    let mut baseline = 0.0;
    let mut neg_sum = 0.0;
    let mut with_pairs = 0usize;
    let mut num_pairs = 0usize;
    for (rows, negs) in rb.pair_rows.iter().zip(&rb.neg_rows) {
        if rows.is_empty() {
            continue;
        }
        let q = g.slice_rows(rb.q_feats, rows.start, rows.end)?;
        let kp = g.slice_rows(rb.k_pos, rows.start, rows.end)?;
        let kn = g.slice_rows(rb.k_neg, negs.start, negs.end)?;
        let l = region_loss(g, q, kp, Some(kn), tau)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        let k = (rows.len() - 1 + negs.len()) as f64;
        baseline += (k + 1.0).ln();
        neg_sum += k;
        with_pairs += 1;
        num_pairs += rows.len();
    }
    let loss = match total {
        Some(t) => Some(g.scale(t, 1.0 / n as f64)?),
        None => None,
    };
    Ok(RegionLossOutput {
        loss,
        uniform_baseline: baseline / n.max(1) as f64,
        mean_negatives: if with_pairs > 0 { neg_sum / with_pairs as f64 } else { 0.0 },
        num_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, c: usize) -> Tensor<f64> {
        let mut d: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in d.chunks_mut(c) {
            let s = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::from_vec(&[n, c], d).unwrap()
    }

    fn unit2(a: f64) -> [f64; 2] {
        [a.cos(), a.sin()]
    }

    /// `-log(exp(a_t) / sum exp(a_j))` by direct evaluation.
    fn naive_nll(logits: &[f64], t: usize) -> f64 {
        let s: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[t].exp() / s).ln()
    }

    #[test]
    fn similarity_examples() {
        let a = unit2(0.3);
        assert!((region_similarity(&a, &a, 0.2).unwrap() - 5.0).abs() < 1e-12);
        let b = unit2(0.3 + std::f64::consts::FRAC_PI_2);
        assert!(region_similarity(&a, &b, 0.2).unwrap().abs() < 1e-12);
        let c = unit2(0.3 + 0.8f64.acos());
        assert!((region_similarity(&a, &c, 0.2).unwrap() - 4.0).abs() < 1e-12);
        if cfg!(debug_assertions) {
            assert!(matches!(region_similarity(&[2.0, 0.0], &a, 0.2), Err(Error::NonUnitNorm(_))));
        }
    }

    #[test]
    fn single_pair_without_negatives_is_zero() {
        let g = Graph::<f64>::new();
        let q = g.param(Tensor::from_vec(&[1, 2], unit2(0.1).to_vec()).unwrap());
        let k = g.constant(Tensor::from_vec(&[1, 2], unit2(1.1).to_vec()).unwrap());
        let l = region_loss(&g, q, k, None, 0.2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn scalar_example() {
        let g = Graph::<f64>::new();
        let q = g.param(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_vec(&[1, 2], vec![0.8, 0.6]).unwrap());
        let neg = [unit2(0.2f64.acos()), unit2(0.1f64.acos())].concat();
        let kn = g.constant(Tensor::from_vec(&[2, 2], neg).unwrap());
        let l = g.value(region_loss(&g, q, k, Some(kn), 0.2).unwrap()).item();
        let e = (4f64.exp() / (4f64.exp() + 1f64.exp() + 0.5f64.exp())).ln();
        assert!((l + e).abs() < 1e-12);
        assert!((l - 0.076947).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        let g = Graph::<f64>::new();
        let v = Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap();
        let q = g.param(v.clone());
        let kp = g.constant(v.clone());
        let kn = g.constant(Tensor::from_vec(&[7, 2], v.data().repeat(7)).unwrap());
        let l = g.value(region_loss(&g, q, kp, Some(kn), 0.2).unwrap()).item();
        assert!((l - 8f64.ln()).abs() < 1e-12);

        let mut queue = MomentumQueue::new(16, 2);
        for _ in 0..5 {
            queue.push(v.data()).unwrap();
        }
        let l = g.value(image_loss(&g, q, kp, &mut queue, 0.2).unwrap()).item();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert_eq!(queue.len(), 6);
    }

    #[test]
    fn empty_pairs_error() {
        let g = Graph::<f64>::new();
        let e = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(region_loss(&g, e, e, None, 0.2), Err(Error::EmptyPairs)));
    }

    #[test]
    fn region_loss_matches_naive_softmax_with_same_view_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (n, m, c) = (rng.gen_range(1..5), rng.gen_range(0..6), rng.gen_range(2..6));
            let (qv, kv, nv) = (unit_rows(&mut rng, n, c), unit_rows(&mut rng, n, c), unit_rows(&mut rng, m, c));
            let g = Graph::<f64>::new();
            let q = g.param(qv.clone());
            let kp = g.constant(kv.clone());
            let kn = g.constant(nv.clone());
            let got = g.value(region_loss(&g, q, kp, Some(kn), 0.2).unwrap()).item();
            let mut want = 0.0;
            for i in 0..n {
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 0.2;
                let mut logits: Vec<f64> = (0..n).map(|j| dot(qv.row(i), kv.row(j))).collect();
                logits.extend((0..m).map(|j| dot(qv.row(i), nv.row(j))));
                want += naive_nll(&logits, i);
            }
            want /= n as f64;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn image_loss_brute_force_and_enqueue_after() {
        let g = Graph::<f64>::new();
        let qv = Tensor::from_vec(&[2, 2], [unit2(0.0), unit2(1.0)].concat()).unwrap();
        let kv = Tensor::from_vec(&[2, 2], [unit2(0.3), unit2(1.4)].concat()).unwrap();
        let queue_rows = [unit2(2.0), unit2(-0.5), unit2(3.0)];
        let mut queue = MomentumQueue::new(3, 2);
        for r in &queue_rows {
            queue.push(r).unwrap();
        }
        let q = g.param(qv.clone());
        let k = g.constant(kv.clone());
        let got = g.value(image_loss(&g, q, k, &mut queue, 0.2).unwrap()).item();
        let mut want = 0.0;
        for i in 0..2 {
            let d = |b: &[f64]| (qv.row(i)[0] * b[0] + qv.row(i)[1] * b[1]) / 0.2;
            let mut logits = vec![d(kv.row(i))];
            logits.extend(queue_rows.iter().map(|r| d(r)));
            want += naive_nll(&logits, 0);
        }
        assert!((got - want / 2.0).abs() < 1e-10);
        // FIFO: capacity 3 now holds the last queue row and both keys
        let snap = queue.snapshot();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(snap.row(0), &queue_rows[2]));
        assert!(close(snap.row(1), kv.row(0)));
        assert!(close(snap.row(2), kv.row(1)));
    }

    #[test]
    fn image_loss_perfect_alignment_empty_queue() {
        let g = Graph::<f64>::new();
        let v = Tensor::from_vec(&[2, 2], [unit2(0.0), unit2(1.0)].concat()).unwrap();
        let mut queue = MomentumQueue::new(8, 2);
        let l = image_loss(&g, g.param(v.clone()), g.constant(v), &mut queue, 0.2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn queue_rejects_non_unit() {
        let mut q = MomentumQueue::<f64>::new(2, 2);
        assert!(matches!(q.push(&[1.0, 1.0]), Err(Error::NonUnitNorm(_))));
        assert!(q.push(&[1.0]).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.3));
        assert!((g.value(combined_loss(&g, a, b, 1.0).unwrap()).item() - 0.8).abs() < 1e-15);
        assert_eq!(g.value(combined_loss(&g, a, b, 0.0).unwrap()).item(), 0.5);
    }

    #[test]
    fn combined_gradient_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (qv, kv, nv) = (unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 5, 4));
        let lambda = 0.7;
        let grad = |which: u8| {
            let g = Graph::<f64>::new();
            let x = g.param(qv.clone());
            let q = g.l2_normalize(x).unwrap();
            let rs = region_loss(&g, q, g.constant(kv.clone()), Some(g.constant(nv.clone())), 0.2).unwrap();
            let is = image_loss_logits(&g, q, g.constant(kv.clone()), &nv, 0.2).unwrap();
            let l = match which {
                0 => combined_loss(&g, rs, is, lambda).unwrap(),
                1 => rs,
                _ => is,
            };
            g.backward(l).unwrap().get(x).unwrap().clone()
        };
        let (all, rs, is) = (grad(0), grad(1), grad(2));
        for i in 0..all.numel() {
            let lin = rs.data()[i] + lambda * is.data()[i];
            assert!((all.data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples_and_stop_gradient() {
        let g = Graph::<f64>::new();
        let v = Tensor::from_vec(&[2, 2], [unit2(0.0), unit2(1.0)].concat()).unwrap();
        let o = Tensor::from_vec(&[2, 2], [unit2(FRAC), unit2(1.0 + FRAC)].concat()).unwrap();
        let (p1, z1) = (g.param(v.clone()), g.param(v.clone()));
        let l = cosine_loss(&g, p1, z1, p1, z1).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-15);
        let (pq, zk) = (g.param(v.clone()), g.param(o.clone()));
        let (pk, zq) = (g.param(o), g.param(v));
        let l = cosine_loss(&g, pq, zk, pk, zq).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        for z in [zk, zq] {
            assert!(grads.get(z).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        assert!(grads.get(pq).is_some());
    }

    const FRAC: f64 = std::f64::consts::FRAC_PI_2;

    fn fm(rng: &mut impl Rng, n: usize, c: usize, s: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, c, s, s], (0..n * c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn assembled_batch_counts_and_detachment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::<f64>::new();
        let qm = g.param(fm(&mut rng, 2, 4, 4));
        let km = g.param(fm(&mut rng, 2, 4, 4));
        let r = Region::new(4.0, 8.0, 40.0, 50.0).unwrap();
        let pairs = vec![vec![RegionPair { u_q: r, u_k: r }; 3], vec![]];
        let cfg = LossConfig::default();
        let rb = assemble_region_batch(&g, qm, km, &pairs, Level::C4, &cfg, true, true).unwrap();
        assert_eq!(g.shape(rb.k_neg), [8, 4]);
        assert_eq!(rb.pair_rows, vec![0..3, 3..3]);
        assert_eq!(rb.neg_rows, vec![0..8, 0..8]);
        let out = batch_region_loss(&g, &rb, 0.2).unwrap();
        assert!((out.uniform_baseline - 0.5 * 11f64.ln()).abs() < 1e-12);
        let grads = g.backward(out.loss.unwrap()).unwrap();
        assert!(grads.get(km).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(grads.get(qm).unwrap().norm() > 0.0);
    }

    #[test]
    fn shard_ranges_split_and_sync() {
        assert_eq!(shard_ranges(4, 2, false, 3).unwrap(), vec![0..6, 0..6, 6..12, 6..12]);
        assert_eq!(shard_ranges(4, 2, true, 3).unwrap(), vec![0..12; 4]);
        assert!(shard_ranges(3, 2, false, 1).is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut c = LossConfig::default();
        for (k, v) in [("tau", "0.1"), ("mode", "cosine"), ("cap_pairs", "5"), ("shards", "2")] {
            assert!(c.set(k, v).unwrap());
        }
        let mut d = LossConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(!c.set("nope", "1").unwrap());
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    fn loss_with(qv: &Tensor<f64>, kv: &Tensor<f64>, nv: &Tensor<f64>) -> (f64, f64) {
        let g = Graph::<f64>::new();
        let q = g.param(qv.clone());
        let rs = region_loss(&g, q, g.constant(kv.clone()), Some(g.constant(nv.clone())), 0.2).unwrap();
        let is = image_loss_logits(&g, q, g.constant(kv.clone()), nv, 0.2).unwrap();
        (g.value(rs).item(), g.value(is).item())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariant_to_negative_order(seed in any::<u64>(), n in 1usize..4, m in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (qv, kv, nv) = (unit_rows(&mut rng, n, 3), unit_rows(&mut rng, n, 3), unit_rows(&mut rng, m, 3));
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<f64> = perm.iter().flat_map(|&i| nv.row(i).to_vec()).collect();
            let sv = Tensor::from_vec(&[m, 3], shuffled).unwrap();
            let (a, b) = (loss_with(&qv, &kv, &nv), loss_with(&qv, &kv, &sv));
            prop_assert!((a.0 - b.0).abs() < 1e-12);
            prop_assert!((a.1 - b.1).abs() < 1e-12);
            prop_assert!(a.0 >= 0.0 && a.1 >= 0.0);
        }

        #[test]
        fn decreases_as_positive_logit_grows(a in 0.05f64..1.5, step in 0.01f64..0.5) {
            // positive at angle `a`, shrinking the angle raises the positive logit
            let g = Graph::<f64>::new();
            let eval = |ang: f64| {
                let q = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
                let k = g.constant(Tensor::from_vec(&[1, 2], unit2(ang).to_vec()).unwrap());
                let n = g.constant(Tensor::from_vec(&[2, 2], [unit2(2.0), unit2(-2.5)].concat()).unwrap());
                g.value(region_loss(&g, q, k, Some(n), 0.2).unwrap()).item()
            };
            prop_assert!(eval((a - step).max(0.0)) < eval(a));
        }

        #[test]
        fn cosine_loss_bounds(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::<f64>::new();
            let v: Vec<Var> = (0..4).map(|_| g.constant(unit_rows(&mut rng, n, 3))).collect();
            let l = g.value(cosine_loss(&g, v[0], v[1], v[2], v[3]).unwrap()).item();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        }
    }
}
