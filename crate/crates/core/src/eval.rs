//! Region retrieval probe: does a query window find its aligned key window
//! among the key-side grid negatives of the batch?

use crate::augment::sample_view_pair;
use crate::data::Dataset;
use crate::encoder::{Encoder, Forward, ParamSet};
use crate::error::{Error, Result};
use crate::geometry::region_pairs;
use crate::losses::assemble_region_batch;
use crate::tensor::{BnMode, Graph};
use crate::trainer::{views_to_tensor, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Images per evaluation batch; grid negatives come from all of them.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// Query regions scored.
    pub queries: usize,
    pub top1_acc: f64,
    pub pos_mean_cos: f64,
    pub neg_mean_cos: f64,
    /// Mean of `1 / (K + 1)` over queries.
    pub chance: f64,
    pub mean_candidates: f64,
}

impl std::fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "queries={} top1_acc={:.4} chance={:.4} pos_mean_cos={:.4} neg_mean_cos={:.4} mean_candidates={:.1}",
            self.queries, self.top1_acc, self.chance, self.pos_mean_cos, self.neg_mean_cos, self.mean_candidates
        )
    }
}

/// Scores `num_pairs` view pairs drawn from `dataset` (cycling through it) with
/// eval-mode query parameters on every region level of the variant.
pub fn eval_retrieval(
    encoder: &Encoder,
    params: &ParamSet<f32>,
    cfg: &RunConfig,
    dataset: &dyn Dataset,
    num_pairs: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if dataset.is_empty() || num_pairs == 0 {
        return Err(Error::Config("retrieval needs at least one image and one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.encoder.input_size;
    let (mut queries, mut hits) = (0usize, 0usize);
    let (mut pos_sum, mut neg_sum, mut neg_n, mut chance, mut cand) = (0.0, 0.0, 0usize, 0.0, 0.0);
    let mut start = 0;
    while start < num_pairs {
        let end = (start + EVAL_BATCH).min(num_pairs);
        let views = (start..end)
            .map(|i| sample_view_pair(&dataset.get(i % dataset.len())?, &cfg.augment, size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        start = end;
        let g = Graph::<f32>::with_checks(false);
        let mut f = Forward::bind(&g, params, false, BnMode::Eval);
        let xq = g.constant(views_to_tensor(&views.iter().map(|v| &v.0).collect::<Vec<_>>())?);
        let xk = g.constant(views_to_tensor(&views.iter().map(|v| &v.1).collect::<Vec<_>>())?);
        let oq = encoder.forward(&mut f, xq)?;
        let ok = encoder.forward(&mut f, xk)?;
        for (&(level, mq), &(_, mk)) in oq.region_maps.iter().zip(&ok.region_maps) {
            let spec = cfg.train.window_spec(level, size);
            let pairs = views
                .iter()
                .map(|(q, k)| region_pairs(&q.transform, &k.transform, &spec))
                .collect::<Result<Vec<_>>>()?;
            let mut lc = cfg.loss.clone();
            lc.shards = 1;
            lc.negatives_sync = true;
            let rb = assemble_region_batch(&g, mq, mk, &pairs, level, &lc, true, true)?;
            let (qv, kv, nv) = (g.value(rb.q_feats), g.value(rb.k_pos), g.value(rb.k_neg));
            let rows = qv.shape()[0];
            let m = nv.shape()[0];
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
            for r in 0..rows {
                let q = qv.row(r);
                let pos = dot(q, kv.row(r));
                let mut best = f64::NEG_INFINITY;
                for j in 0..m {
                    let c = dot(q, nv.row(j));
                    best = best.max(c);
                    neg_sum += c;
                }
                neg_n += m;
                pos_sum += pos;
                hits += (pos > best) as usize;
                queries += 1;
                chance += 1.0 / (m as f64 + 1.0);
                cand += m as f64 + 1.0;
            }
        }
    }
    let q = queries.max(1) as f64;
    Ok(RetrievalReport {
        queries,
        top1_acc: hits as f64 / q,
        pos_mean_cos: pos_sum / q,
        neg_mean_cos: neg_sum / neg_n.max(1) as f64,
        chance: chance / q,
        mean_candidates: cand / q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticDataset;
    use crate::losses::LossMode;

    #[test]
    fn report_fields_are_consistent() {
        let mut cfg = RunConfig::default();
        cfg.encoder.stage_channels = [4, 4, 8, 8, 8];
        cfg.encoder.region_head_channels = 8;
        let (enc, ps) = Encoder::new::<f32>(&cfg.encoder, LossMode::Contrastive, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = SyntheticDataset::new(10, 96, 5);
        let r = eval_retrieval(&enc, &ps, &cfg, &data, 10, 1).unwrap();
        assert!(r.queries > 0);
        assert!((0.0..=1.0).contains(&r.top1_acc));
        // B = 8 with a 2x2 grid per image gives 32 negatives in the first batch
        assert!(r.mean_candidates > 1.0 && r.mean_candidates <= 33.0);
        assert!(r.chance >= 1.0 / 33.0 - 1e-12);
        assert!(r.pos_mean_cos.abs() <= 1.0 + 1e-6 && r.neg_mean_cos.abs() <= 1.0 + 1e-6);
        assert_eq!(r, eval_retrieval(&enc, &ps, &cfg, &data, 10, 1).unwrap());
    }
}
