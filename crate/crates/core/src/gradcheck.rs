//! Central finite-difference checks of every differentiable op, the encoder
//! heads and the full objective, all in f64.

use crate::encoder::{Encoder, EncoderConfig, Forward, ParamKind, ParamSet, Variant};
use crate::error::{Error, Result};
use crate::geometry::{Region, RegionPair};
use crate::losses::{
    assemble_region_batch, batch_region_loss, combined_loss, cosine_loss, image_loss_logits, region_loss,
    LossConfig, LossMode,
};
use crate::pooling::{negative_features, pool_regions, PoolMethod, Roi};
use crate::tensor::{BnMode, Graph, Tensor, Var};
use crate::Level;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Pooling,
    Encoder,
    Losses,
}

impl std::str::FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckModule::All),
            "pooling" => Ok(CheckModule::Pooling),
            "encoder" => Ok(CheckModule::Encoder),
            "losses" => Ok(CheckModule::Losses),
            _ => Err(Error::Config(format!("unknown gradient-check module '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces any output to a scalar with fixed, position-dependent weights.
fn project(g: &Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return g.sum(out);
    }
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    let w = g.constant(Tensor::from_vec(&shape, w)?);
    g.sum(g.mul(out, w)?)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Checks `f` against finite differences with respect to every input flagged in `diff`.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], diff: &[bool], f: F) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::with_checks(false);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = project(&g, f(&g, &vars)?)?;
        Ok(g.value(out).item())
    };
    let g = Graph::with_checks(false);
    let vars: Vec<Var> = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| if d { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = project(&g, f(&g, &vars)?)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut vals = inputs.to_vec();
    for (i, &d) in diff.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[i], inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let x = inputs[i].data()[k];
            vals[i].data_mut()[k] = x + STEP;
            let up = eval(&vals)?;
            vals[i].data_mut()[k] = x - STEP;
            let down = eval(&vals)?;
            vals[i].data_mut()[k] = x;
            worst = worst.max(rel_err(analytic.data()[k], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.into(),
        max_rel_err: worst,
        checked,
        tolerance: OP_TOLERANCE,
    })
}

/// Checks a loss built from a bound parameter set, on up to `samples` weight coordinates.
pub fn check_params<F>(name: &str, params: &ParamSet<f64>, samples: usize, tolerance: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Forward<'_, f64>) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let g = Graph::with_checks(false);
        let mut fw = Forward::bind(&g, ps, true, BnMode::Train);
        let out = project(&g, f(&mut fw)?)?;
        Ok(g.value(out).item())
    };
    let g = Graph::with_checks(false);
    let mut fw = Forward::bind(&g, params, true, BnMode::Train);
    let out = project(&g, f(&mut fw)?)?;
    let grads = g.backward(out)?;
    let coords: Vec<(usize, usize)> = params
        .ids()
        .filter(|&id| params.kind(id) == ParamKind::Weight)
        .flat_map(|id| (0..params.get(id).numel()).map(move |k| (id.0, k)))
        .collect();
    let picked: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(coords.len() as u64);
        rand::seq::index::sample(&mut rng, coords.len(), samples)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };
    let mut ps = params.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for &(e, k) in &picked {
        let id = ids[e];
        let analytic = grads.get(fw.var(id)).map_or(0.0, |t| t.data()[k]);
        let x = params.get(id).data()[k];
        ps.get_mut(id).data_mut()[k] = x + STEP;
        let up = eval(&ps)?;
        ps.get_mut(id).data_mut()[k] = x - STEP;
        let down = eval(&ps)?;
        ps.get_mut(id).data_mut()[k] = x;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));
    }
    Ok(GradReport {
        name: name.into(),
        max_rel_err: worst,
        checked: picked.len(),
        tolerance,
    })
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut t = random(rng, &[n, c]);
    for row in t.data_mut().chunks_mut(c) {
        let s = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn pooling_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let fm = random(rng, &[2, 3, 5, 6]);
    let rois = vec![
        Roi { batch: 0, region: Region::new(0.3, 0.7, 3.9, 4.2)? },
        Roi { batch: 1, region: Region::new(-0.5, 2.2, 2.1, 6.6)? },
        Roi { batch: 1, region: Region::new(1.25, 1.5, 4.75, 3.0)? },
    ];
    let r2 = rois.clone();
    Ok(vec![
        check_op("prroi_pool", std::slice::from_ref(&fm), &[true], move |g, v| pool_regions(g, v[0], &rois, PoolMethod::Precise))?,
        check_op("roi_align", std::slice::from_ref(&fm), &[true], move |g, v| {
            pool_regions(g, v[0], &r2, PoolMethod::Align { samples: 2 })
        })?,
        check_op("avg_pool_k3_s1", std::slice::from_ref(&fm), &[true], |g, v| g.avg_pool(v[0], 3, 1))?,
        check_op("avg_pool_k2_s2", std::slice::from_ref(&fm), &[true], |g, v| g.avg_pool(v[0], 2, 2))?,
        check_op("negative_grid", &[fm], &[true], |g, v| negative_features(g, v[0], 3))?,
    ])
}

fn tiny_encoder(variant: Variant, mode: LossMode) -> Result<(Encoder, ParamSet<f64>)> {
    let cfg = EncoderConfig {
        stage_channels: [2, 2, 3, 3, 4],
        input_size: 64,
        fpn_channels: 3,
        region_head_channels: 4,
        image_embed_dim: 4,
        variant,
    };
    let mut ps_rng = ChaCha8Rng::seed_from_u64(17);
    Encoder::new(&cfg, mode, &mut ps_rng)
}

fn encoder_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let x = random(rng, &[2, 2, 5, 5]);
    let w3 = random(rng, &[3, 2, 3, 3]);
    let w1 = random(rng, &[3, 2, 1, 1]);
    let b = random(rng, &[3]);
    let gamma = random(rng, &[2]);
    let beta = random(rng, &[2]);
    let rm = Tensor::from_vec(&[2], vec![0.1, -0.2])?;
    let rv = Tensor::from_vec(&[2], vec![0.7, 1.3])?;
    let (rm2, rv2) = (rm.clone(), rv.clone());
    let a2 = random(rng, &[4, 5]);
    let b2 = random(rng, &[4, 5]);
    let lw = random(rng, &[3, 5]);
    let lb = random(rng, &[3]);
    let small = random(rng, &[2, 3, 2, 3]);
    let mut out = vec![
        check_op("conv2d_s1_p1", &[x.clone(), w3.clone()], &[true, true], |g, v| g.conv2d(v[0], v[1], 1, 1))?,
        check_op("conv2d_s2_p1", &[x.clone(), w3], &[true, true], |g, v| g.conv2d(v[0], v[1], 2, 1))?,
        check_op("conv2d_1x1", &[x.clone(), w1], &[true, true], |g, v| g.conv2d(v[0], v[1], 1, 0))?,
        check_op("bias_add", &[random(rng, &[2, 3, 2, 2]), b], &[true, true], |g, v| g.bias_add(v[0], v[1]))?,
        check_op("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], &[true; 3], move |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, (&rm, &rv), 1e-5)?.0)
        })?,
        check_op("batch_norm_eval", &[x.clone(), gamma, beta], &[true; 3], move |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval, (&rm2, &rv2), 1e-5)?.0)
        })?,
        check_op("batch_norm_train_2d", &[random(rng, &[4, 3]), random(rng, &[3]), random(rng, &[3])], &[true; 3], |g, v| {
            let (m, var) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, (&m, &var), 1e-5)?.0)
        })?,
        check_op("relu", std::slice::from_ref(&x), &[true], |g, v| g.relu(v[0]))?,
        check_op("add", &[a2.clone(), b2.clone()], &[true, true], |g, v| g.add(v[0], v[1]))?,
        check_op("mul", &[a2.clone(), b2], &[true, true], |g, v| g.mul(v[0], v[1]))?,
        check_op("scale", std::slice::from_ref(&a2), &[true], |g, v| g.scale(v[0], -1.7))?,
        check_op("global_avg_pool", std::slice::from_ref(&x), &[true], |g, v| g.global_avg_pool(v[0]))?,
        check_op("upsample_nearest2x", &[small], &[true], |g, v| g.upsample_nearest2x(v[0]))?,
        check_op("linear", &[a2.clone(), lw.clone(), lb], &[true; 3], |g, v| g.linear(v[0], v[1], Some(v[2])))?,
        check_op("linear_no_bias", &[a2, lw], &[true, true], |g, v| g.linear(v[0], v[1], None))?,
    ];
    let (enc, ps) = tiny_encoder(Variant::C4, LossMode::Cosine)?;
    let fm = random(rng, &[2, 3, 4, 4]);
    let e1 = enc.clone();
    out.push(check_params("region_head", &ps, 200, OP_TOLERANCE, move |f| {
        let x = f.g.constant(fm.clone());
        e1.region_head(f, x, Level::C4)
    })?);
    let pooled = random(rng, &[5, 4]);
    let e2 = enc.clone();
    out.push(check_params("region_predictor", &ps, 200, OP_TOLERANCE, move |f| {
        let x = f.g.constant(pooled.clone());
        e2.region_predict(f, x, Level::C4)
    })?);
    let c5 = random(rng, &[3, 4, 2, 2]);
    out.push(check_params("image_head", &ps, 200, OP_TOLERANCE, move |f| {
        let x = f.g.constant(c5.clone());
        let e = enc.image_head(f, x)?;
        f.g.concat(&[e.z, e.p.expect("cosine mode")], 1)
    })?);
    let (fpn, fps) = tiny_encoder(Variant::Fpn, LossMode::Contrastive)?;
    let img = random(rng, &[2, 3, 64, 64]);
    out.push(check_params("encoder_forward_fpn", &fps, 60, OP_TOLERANCE, move |f| {
        let x = f.g.constant(img.clone());
        let o = fpn.forward(f, x)?;
        let parts: Vec<Var> = o
            .region_maps
            .iter()
            .map(|&(_, m)| f.g.global_avg_pool(m))
            .collect::<Result<_>>()?;
        let mut all = parts;
        all.push(o.image.z);
        f.g.concat(&all, 1)
    })?);
    Ok(out)
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let a = random(rng, &[3, 4]);
    let b = random(rng, &[5, 4]);
    let fm = random(rng, &[2, 3, 2, 3]);
    let q = unit_rows(rng, 3, 4);
    let kp = unit_rows(rng, 3, 4);
    let kn = unit_rows(rng, 6, 4);
    let kn2 = kn.clone();
    Ok(vec![
        check_op("l2_normalize", std::slice::from_ref(&a), &[true], |g, v| g.l2_normalize(v[0]))?,
        check_op("softmax_cross_entropy", &[random(rng, &[4, 6])], &[true], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 5, 2, 2])
        })?,
        check_op("matmul_t", &[a.clone(), b.clone()], &[true, true], |g, v| g.matmul_t(v[0], v[1]))?,
        check_op("concat_rows", &[a.clone(), b.clone()], &[true, true], |g, v| g.concat(&[v[0], v[1]], 0))?,
        check_op("concat_cols", &[a.clone(), random(rng, &[3, 2])], &[true, true], |g, v| g.concat(&[v[0], v[1]], 1))?,
        check_op("slice_rows", std::slice::from_ref(&b), &[true], |g, v| g.slice_rows(v[0], 1, 4))?,
        check_op("rowdot", &[a.clone(), random(rng, &[3, 4])], &[true, true], |g, v| g.rowdot(v[0], v[1]))?,
        check_op("sum", std::slice::from_ref(&a), &[true], |g, v| g.sum(v[0]))?,
        check_op("mean", std::slice::from_ref(&a), &[true], |g, v| g.mean(v[0]))?,
        check_op("reshape", std::slice::from_ref(&a), &[true], |g, v| g.reshape(v[0], &[2, 6]))?,
        check_op("flatten_spatial", &[fm], &[true], |g, v| g.flatten_spatial(v[0]))?,
        check_op("region_loss", &[q.clone(), kp.clone(), kn], &[true, false, false], |g, v| {
            let qn = g.l2_normalize(v[0])?;
            region_loss(g, qn, v[1], Some(v[2]), 0.2)
        })?,
        check_op("image_loss", &[q.clone(), kp.clone()], &[true, false], move |g, v| {
            let qn = g.l2_normalize(v[0])?;
            image_loss_logits(g, qn, v[1], &kn2, 0.2)
        })?,
        check_op("cosine_loss", &[a.clone(), random(rng, &[3, 4]), random(rng, &[3, 4]), random(rng, &[3, 4])], &[true, false, true, false], |g, v| {
            cosine_loss(g, v[0], v[1], v[2], v[3])
        })?,
        check_op("combined_loss", &[q, kp], &[true, true], |g, v| {
            let rs = region_loss(g, g.l2_normalize(v[0])?, g.l2_normalize(v[1])?, None, 0.2)?;
            let is = g.mean(g.rowdot(v[0], v[1])?)?;
            combined_loss(g, rs, is, 0.6)
        })?,
    ])
}

/// Fixed full-overlap pairs so every image contributes windows.
fn fixed_pairs(level: Level, n: usize) -> Result<Vec<Vec<RegionPair>>> {
    let (w, s) = if level == Level::P3 { (10.0, 7.0) } else { (14.0, 10.0) };
    let mut out = Vec::new();
    for b in 0..n {
        let shift = 3.0 * b as f64;
        let mut list = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let (t, l) = (2.0 + s * i as f64, 1.5 + s * j as f64);
                let u_q = Region::new(t, l, t + w, l + w)?;
                let u_k = Region::new(t * 0.8 + shift, l * 0.9 + 1.0, (t + w) * 0.8 + shift, (l + w) * 0.9 + 1.0)?;
                list.push(RegionPair { u_q, u_k });
            }
        }
        out.push(list);
    }
    Ok(out)
}

/// Whole objective for a tiny encoder: both views, region and image terms.
pub fn end_to_end_loss(
    f: &mut Forward<'_, f64>,
    enc: &Encoder,
    key: &ParamSet<f64>,
    xq: &Tensor<f64>,
    xk: &Tensor<f64>,
    queue: &Tensor<f64>,
    cfg: &LossConfig,
) -> Result<Var> {
    let g = f.g;
    let n = xq.shape()[0];
    let oq = enc.forward(f, g.constant(xq.clone()))?;
    let levels = enc.config().variant.region_levels();
    let mut terms = Vec::new();
    let l_is = match cfg.mode {
        LossMode::Contrastive => {
            let mut fk = Forward::bind(g, key, false, BnMode::Train);
            let ok = enc.forward(&mut fk, g.constant(xk.clone()))?;
            for (&(level, mq), &(_, mk)) in oq.region_maps.iter().zip(&ok.region_maps) {
                let rb = assemble_region_batch(g, mq, mk, &fixed_pairs(level, n)?, level, cfg, true, true)?;
                if let Some(l) = batch_region_loss(g, &rb, cfg.tau)?.loss {
                    terms.push(l);
                }
            }
            let zq = g.l2_normalize(oq.image.z)?;
            let zk = g.l2_normalize(ok.image.z)?;
            image_loss_logits(g, zq, zk, queue, cfg.tau)?
        }
        LossMode::Cosine => {
            // `key` holds the unperturbed parameters; the stop-gradient targets
            // come from it so finite differences see them as constants
            let ok = enc.forward(f, g.constant(xk.clone()))?;
            let mut ft = Forward::bind(g, key, false, BnMode::Train);
            let tq = enc.forward(&mut ft, g.constant(xq.clone()))?;
            let tk = enc.forward(&mut ft, g.constant(xk.clone()))?;
            for (i, (&(level, mq), &(_, mk))) in oq.region_maps.iter().zip(&ok.region_maps).enumerate() {
                let pairs = fixed_pairs(level, n)?;
                let rb = assemble_region_batch(g, mq, mk, &pairs, level, cfg, false, false)?;
                let tb = assemble_region_batch(g, tq.region_maps[i].1, tk.region_maps[i].1, &pairs, level, cfg, false, true)?;
                let pq = enc.region_predict(f, rb.q_feats, level)?;
                let pk = enc.region_predict(f, rb.k_pos, level)?;
                terms.push(cosine_loss(g, pq, tb.k_pos, pk, tb.q_feats)?);
            }
            let (pq, pk) = (oq.image.p.expect("cosine head"), ok.image.p.expect("cosine head"));
            cosine_loss(g, pq, tk.image.z, pk, tq.image.z)?
        }
    };
    let mut l_rs = terms[0];
    for &t in &terms[1..] {
        l_rs = g.add(l_rs, t)?;
    }
    let l_rs = g.scale(l_rs, 1.0 / levels.len() as f64)?;
    combined_loss(g, l_rs, l_is, cfg.lambda)
}

fn end_to_end_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (name, variant, mode) in [
        ("end_to_end_c4_contrastive", Variant::C4, LossMode::Contrastive),
        ("end_to_end_fpn_contrastive", Variant::Fpn, LossMode::Contrastive),
        ("end_to_end_c4_cosine", Variant::C4, LossMode::Cosine),
    ] {
        let (enc, ps) = tiny_encoder(variant, mode)?;
        let mut key = ps.clone();
        let perturb = mode == LossMode::Contrastive;
        for id in key.ids().filter(|_| perturb).collect::<Vec<_>>() {
            for v in key.get_mut(id).data_mut() {
                *v += 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
        let xq = random(rng, &[2, 3, 64, 64]);
        let xk = random(rng, &[2, 3, 64, 64]);
        let queue = unit_rows(rng, 5, 4);
        let cfg = LossConfig {
            mode,
            lambda: 0.8,
            ..LossConfig::default()
        };
        out.push(check_params(name, &ps, 40, END_TO_END_TOLERANCE, |f| {
            end_to_end_loss(f, &enc, &key, &xq, &xk, &queue, &cfg)
        })?);
    }
    Ok(out)
}

/// Runs the checks of `module`; `All` includes the end-to-end objectives.
pub fn run(module: CheckModule, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Pooling) {
        out.extend(pooling_checks(&mut rng)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Encoder) {
        out.extend(encoder_checks(&mut rng)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Losses) {
        out.extend(loss_checks(&mut rng)?);
    }
    if module == CheckModule::All {
        out.extend(end_to_end_checks(&mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from backward; finite differences still see it
        let r = check_op("detach_probe", &[Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()], &[true], |g, v| {
            let d = g.detach(v[0]);
            g.add(d, d)
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pooling_and_loss_ops_pass() {
        for r in run(CheckModule::Pooling, 1).unwrap().into_iter().chain(run(CheckModule::Losses, 1).unwrap()) {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_err);
            assert!(r.checked > 0);
        }
    }
}
