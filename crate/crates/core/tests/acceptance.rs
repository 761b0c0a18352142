//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resim_core::augment::{mean_warp_error, sample_view_pair};
use resim_core::encoder::{load_checkpoint, save_checkpoint, Forward};
use resim_core::geometry::{apply_transform, inverse_transform, map_region, sliding_windows};
use resim_core::gradcheck::{self, CheckModule};
use resim_core::losses::{cosine_loss, image_loss, region_loss};
use resim_core::pooling::{negative_count, negative_grid, negative_grid_shape, prroi_pool, roi_align};
use resim_core::tensor::BnMode;
use resim_core::trainer::{restore, smooth};
use resim_core::*;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    format!("error kind={} message={e}", e.kind())
}

// 1. negative counts ---------------------------------------------------------

fn negative_counts() -> Outcome {
    let c4 = EncoderConfig {
        input_size: 224,
        variant: Variant::C4,
        ..EncoderConfig::default()
    };
    let s4 = c4.map_size(Level::C4);
    let s3 = c4.map_size(Level::P3);
    let n4 = negative_count(256, s4, s4, 3, 8, true).map_err(err)?;
    let n3 = negative_count(256, s3, s3, 3, 8, false).map_err(err)?;
    ensure(s4 == 14 && s3 == 28, || format!("map sizes {s4} and {s3}"))?;
    ensure(n4 == 36_864, || format!("C4 negatives {n4}"))?;
    ensure(n3 == 21_632, || format!("P3 negatives per shard {n3}"))?;
    // the real op agrees with the shape arithmetic
    let g = Graph::<f64>::new();
    let fm = g.constant(Tensor::full(&[2, 3, 14, 14], 1.5));
    let grid = negative_grid(&g, fm, 3).map_err(err)?;
    ensure(g.shape(grid) == negative_grid_shape(&[2, 3, 14, 14], 3).map_err(err)?.to_vec(), || {
        format!("grid shape {:?}", g.shape(grid))
    })?;
    ensure(g.value(grid).data().iter().all(|&v| (v - 1.5).abs() < 1e-15), || "constant grid".into())?;
    Ok(format!("C4={n4} P3/shard={n3}"))
}

// 2. pooling oracles ---------------------------------------------------------

fn pixel(data: &[f64], h: usize, w: usize, i: i64, j: i64) -> f64 {
    if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
        0.0
    } else {
        data[i as usize * w + j as usize]
    }
}

fn bilinear(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (gx, gy) = (x - 0.5, y - 0.5);
    let (j0, i0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - j0, gy - i0);
    let (j0, i0) = (j0 as i64, i0 as i64);
    pixel(data, h, w, i0, j0) * (1.0 - fx) * (1.0 - fy)
        + pixel(data, h, w, i0, j0 + 1) * fx * (1.0 - fy)
        + pixel(data, h, w, i0 + 1, j0) * (1.0 - fx) * fy
        + pixel(data, h, w, i0 + 1, j0 + 1) * fx * fy
}

fn supersample(data: &[f64], h: usize, w: usize, u: &Region, n: usize) -> f64 {
    let (dy, dx) = (u.height() / n as f64, u.width() / n as f64);
    let mut acc = 0.0;
    for a in 0..n {
        let y = u.t + (a as f64 + 0.5) * dy;
        let mut row = 0.0;
        for b in 0..n {
            row += bilinear(data, h, w, u.l + (b as f64 + 0.5) * dx, y);
        }
        acc += row;
    }
    acc / (n * n) as f64
}

/// Sums the exact integral of each bilinear patch between four neighboring
/// pixel centers, clipped to the region.
fn symbolic(data: &[f64], h: usize, w: usize, u: &Region) -> f64 {
    let mut total = 0.0;
    for i in -1..h as i64 {
        let (y0, y1) = (i as f64 + 0.5, i as f64 + 1.5);
        let (ya, yb) = (u.t.max(y0), u.b.min(y1));
        if yb <= ya {
            continue;
        }
        for j in -1..w as i64 {
            let (x0, x1) = (j as f64 + 0.5, j as f64 + 1.5);
            let (xa, xb) = (u.l.max(x0), u.r.min(x1));
            if xb <= xa {
                continue;
            }
            let (f00, f01) = (pixel(data, h, w, i, j), pixel(data, h, w, i, j + 1));
            let (f10, f11) = (pixel(data, h, w, i + 1, j), pixel(data, h, w, i + 1, j + 1));
            // f = a + b s + c t + d s t with local s = x - x0, t = y - y0
            let (a, b, c, d) = (f00, f01 - f00, f10 - f00, f11 - f01 - f10 + f00);
            let (s0, s1) = (xa - x0, xb - x0);
            let (t0, t1) = (ya - y0, yb - y0);
            let (is0, is1) = (s1 - s0, (s1 * s1 - s0 * s0) / 2.0);
            let (it0, it1) = (t1 - t0, (t1 * t1 - t0 * t0) / 2.0);
            total += a * is0 * it0 + b * is1 * it0 + c * is0 * it1 + d * is1 * it1;
        }
    }
    total / u.area()
}

fn pooling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut e_ss, mut e_sym, mut e_align) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(2..=10), rng.gen_range(2..=10));
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fm = Tensor::from_f64(&[1, 1, h, w], &data).map_err(err)?;
        let t = rng.gen_range(-1.0..h as f64);
        let l = rng.gen_range(-1.0..w as f64);
        let b = rng.gen_range(t + 0.05..=h as f64 + 1.0);
        let r = rng.gen_range(l + 0.05..=w as f64 + 1.0);
        let u = Region::new(t, l, b, r).map_err(err)?;
        let p: f64 = prroi_pool(&fm, &u, Level::C4).map_err(err)?.vector[0];
        e_ss = e_ss.max((p - supersample(&data, h, w, &u, 1024)).abs());
        e_sym = e_sym.max((p - symbolic(&data, h, w, &u)).abs());
        let a = roi_align(&fm, &u, 64, Level::C4).map_err(err)?.vector[0];
        e_align = e_align.max((p - a).abs());
    }
    let detail = format!("supersample={e_ss:.2e} symbolic={e_sym:.2e} align64={e_align:.2e}");
    ensure(e_ss < 1e-3 && e_sym < 1e-9 && e_align < 1e-4, || detail.clone())?;
    Ok(detail)
}

// 3. gradients ---------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let reports = gradcheck::run(CheckModule::All, 7).map_err(err)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}={:.2e}", r.name, r.max_rel_err))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(" ")))?;
    let worst = |e2e: bool| {
        reports
            .iter()
            .filter(|r| r.name.starts_with("end_to_end") == e2e)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    };
    Ok(format!("{} checks, worst per-op={:.2e} end-to-end={:.2e}", reports.len(), worst(false), worst(true)))
}

// 4. geometry ----------------------------------------------------------------

fn random_view(rng: &mut ChaCha8Rng, flip: bool) -> ViewTransform {
    let (iw, ih) = (rng.gen_range(40.0..400.0), rng.gen_range(40.0..400.0));
    let t = rng.gen_range(0.0..ih * 0.5);
    let l = rng.gen_range(0.0..iw * 0.5);
    let crop = Region::new(t, l, rng.gen_range(t + 4.0..ih), rng.gen_range(l + 4.0..iw)).unwrap();
    ViewTransform::new(crop, rng.gen_range(16..256), rng.gen_range(16..256), flip).unwrap()
}

fn geometry_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let flip = rng.gen_bool(0.5);
        let (vq, vk) = (random_view(&mut rng, flip), random_view(&mut rng, flip));
        let vr = vq.view_region();
        let t = rng.gen_range(vr.t..vr.b - 1.0);
        let l = rng.gen_range(vr.l..vr.r - 1.0);
        let u = Region::new(t, l, rng.gen_range(t + 0.5..vr.b), rng.gen_range(l + 0.5..vr.r)).unwrap();
        let there = map_region(&u, &vq, &vk).map_err(err)?;
        let back = map_region(&there, &vk, &vq).map_err(err)?;
        worst = worst.max(back.max_abs_diff(&u));
        let p = Point::new(rng.gen_range(vr.l..vr.r), rng.gen_range(vr.t..vr.b));
        let q = apply_transform(inverse_transform(&vq).apply(p), &vq);
        worst = worst.max((q.x - p.x).abs().max((q.y - p.y).abs()));
    }
    ensure(worst < 1e-9, || format!("round trip error {worst:.2e}"))?;

    for _ in 0..2_000 {
        let spec = WindowSpec::new(rng.gen_range(1.0..20.0), rng.gen_range(0.5..15.0)).unwrap();
        let (hgt, wid) = (rng.gen_range(0.1..80.0), rng.gen_range(0.1..80.0));
        let (t, l) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let area = Region::new(t, l, t + hgt, l + wid).unwrap();
        let expect = |len: f64| {
            if len < spec.window {
                0
            } else {
                ((len - spec.window) / spec.stride).floor() as usize + 1
            }
        };
        let wins = sliding_windows(&area, &spec);
        ensure(wins.len() == expect(hgt) * expect(wid), || {
            format!("{} windows for {hgt}x{wid} with {spec}", wins.len())
        })?;
        ensure(wins.iter().all(|x| area.contains(x)), || "window outside its area".into())?;
    }

    let data = SyntheticDataset::new(8, 96, 11);
    let cfg = AugmentConfig {
        color_jitter: false,
        grayscale_prob: 0.0,
        ..AugmentConfig::default()
    };
    let mut warp = 0.0f64;
    let mut parity = 0;
    for i in 0..data.len() {
        let img = data.get(i).map_err(err)?;
        warp = warp.max(mean_warp_error(&img, &cfg, 64, 25, &mut rng));
        for _ in 0..1250 {
            let (q, k) = sample_view_pair(&img, &AugmentConfig::default(), 64, &mut rng).map_err(err)?;
            parity += (q.transform.hflip == k.transform.hflip) as usize;
        }
    }
    ensure(warp < 0.02, || format!("warp error {warp:.4}"))?;
    ensure(parity == 10_000, || format!("flip parity {parity}/10000"))?;
    Ok(format!("round trip={worst:.2e} warp error={warp:.4} flip parity=10000/10000"))
}

// 5. loss oracles ------------------------------------------------------------

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(c) {
        let s = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::from_vec(&[n, c], v).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(pos) / sum(exp(all)))` by direct summation with a shift.
fn brute_nll(pos: f64, all: &[f64]) -> f64 {
    let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = all.iter().map(|&x| (x - m).exp()).sum();
    -(pos - m) + s.ln()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, m, c) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(2..7));
        let tau = rng.gen_range(0.05..1.0);
        let (q, kp, kn) = (unit_rows(&mut rng, n, c), unit_rows(&mut rng, n, c), unit_rows(&mut rng, m, c));
        let g = Graph::<f64>::new();
        let (qv, kpv, knv) = (g.constant(q.clone()), g.constant(kp.clone()), g.constant(kn.clone()));
        let got = g.value(region_loss(&g, qv, kpv, Some(knv), tau).map_err(err)?).item();
        let mut want = 0.0;
        for i in 0..n {
            let mut all: Vec<f64> = (0..n).map(|j| dot(q.row(i), kp.row(j)) / tau).collect();
            all.extend((0..m).map(|j| dot(q.row(i), kn.row(j)) / tau));
            want += brute_nll(all[i], &all);
        }
        worst = worst.max((got - want / n as f64).abs());

        let mut queue = MomentumQueue::<f64>::new(m + 2, c);
        queue.enqueue(&kn).map_err(err)?;
        let negs = queue.snapshot();
        let got = g.value(image_loss(&g, qv, kpv, &mut queue, tau).map_err(err)?).item();
        let mut want = 0.0;
        for i in 0..n {
            let mut all = vec![dot(q.row(i), kp.row(i)) / tau];
            all.extend((0..negs.shape()[0]).map(|j| dot(q.row(i), negs.row(j)) / tau));
            want += brute_nll(all[0], &all);
        }
        worst = worst.max((got - want / n as f64).abs());
    }
    ensure(worst < 1e-10, || format!("oracle error {worst:.2e}"))?;

    let mut uni = 0.0f64;
    for k in [1usize, 3, 10, 127, 4096] {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::full(&[2, k + 1], 0.7));
        let l = g.value(g.softmax_cross_entropy(logits, &[0, k]).map_err(err)?).item();
        uni = uni.max((l - ((k + 1) as f64).ln()).abs());
        // identical unit features: every logit equals 1 / tau
        let e = unit_rows(&mut rng, 1, 4);
        let rows = Tensor::from_vec(&[k, 4], e.data().repeat(k)).unwrap();
        let l = region_loss(&g, g.constant(e.clone()), g.constant(e.clone()), Some(g.constant(rows)), 0.2).map_err(err)?;
        uni = uni.max((g.value(l).item() - ((k + 1) as f64).ln()).abs());
    }
    ensure(uni < 1e-12, || format!("uniform error {uni:.2e}"))?;

    // stop-gradient: the z arguments of the cosine loss get exactly zero gradient
    let g = Graph::<f64>::new();
    let v: Vec<Var> = (0..4).map(|_| g.param(unit_rows(&mut rng, 3, 5))).collect();
    let l = cosine_loss(&g, v[0], v[1], v[2], v[3]).map_err(err)?;
    let grads = g.backward(l).map_err(err)?;
    let zero = |x: Var| grads.get(x).is_none_or(|t| t.data().iter().all(|&d| d == 0.0));
    let nonzero = |x: Var| grads.get(x).is_some_and(|t| t.data().iter().any(|&d| d != 0.0));
    ensure(zero(v[1]) && zero(v[3]) && nonzero(v[0]) && nonzero(v[2]), || "cosine stop-gradient".into())?;

    // key detachment: key parameters bound as trainable still receive nothing
    let enc_cfg = EncoderConfig {
        stage_channels: [2, 2, 3, 3, 4],
        fpn_channels: 3,
        region_head_channels: 3,
        image_embed_dim: 4,
        variant: Variant::Fpn,
        ..EncoderConfig::default()
    };
    let (enc, qp) = Encoder::new::<f64>(&enc_cfg, LossMode::Contrastive, &mut rng).map_err(err)?;
    let kp = qp.clone();
    let g = Graph::<f64>::with_checks(false);
    let mut fq = Forward::bind(&g, &qp, true, BnMode::Train);
    let mut fk = Forward::bind(&g, &kp, true, BnMode::Train);
    let img = |rng: &mut ChaCha8Rng| {
        Tensor::from_vec(&[2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let oq = enc.forward(&mut fq, g.constant(img(&mut rng))).map_err(err)?;
    let ok = enc.forward(&mut fk, g.constant(img(&mut rng))).map_err(err)?;
    let loss_cfg = LossConfig::default();
    let mut terms = Vec::new();
    for (&(level, mq), &(_, mk)) in oq.region_maps.iter().zip(&ok.region_maps) {
        let u = Region::new(1.0, 1.0, 40.0, 40.0).unwrap();
        let pairs = vec![vec![RegionPair { u_q: u, u_k: u }]; 2];
        let rb = resim_core::losses::assemble_region_batch(&g, mq, mk, &pairs, level, &loss_cfg, true, true)
            .map_err(err)?;
        terms.push(resim_core::losses::batch_region_loss(&g, &rb, 0.2).map_err(err)?.loss.unwrap());
    }
    let zq = g.l2_normalize(oq.image.z).map_err(err)?;
    let zk = g.l2_normalize(ok.image.z).map_err(err)?;
    let mut queue = MomentumQueue::<f64>::new(8, 4);
    queue.enqueue(&unit_rows(&mut rng, 4, 4)).map_err(err)?;
    terms.push(image_loss(&g, zq, zk, &mut queue, 0.2).map_err(err)?);
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).map_err(err)?;
    }
    let grads = g.backward(total).map_err(err)?;
    let leaked = fk.vars().iter().filter(|&&v| grads.get(v).is_some_and(|t| t.data().iter().any(|&d| d != 0.0))).count();
    let reached = fq.vars().iter().filter(|&&v| grads.get(v).is_some_and(|t| t.data().iter().any(|&d| d != 0.0))).count();
    ensure(leaked == 0, || format!("{leaked} key tensors received gradient"))?;
    ensure(reached > 0, || "no gradient reached the query encoder".into())?;
    Ok(format!("oracle={worst:.2e} uniform={uni:.2e} key tensors with gradient=0"))
}

// 6. trainability ------------------------------------------------------------

const SMOOTH: usize = 64;

fn trainability() -> Outcome {
    let data = SyntheticDataset::new(512, 96, 0);
    let held_out = SyntheticDataset::new(128, 96, 0x5EED);
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for variant in [Variant::C4, Variant::Fpn] {
        for mode in [LossMode::Contrastive, LossMode::Cosine] {
            let started = Instant::now();
            let mut cfg = RunConfig::default();
            cfg.encoder.variant = variant;
            cfg.loss.mode = mode;
            cfg.train.epochs = 16;
            cfg.train.batch_size = 8;
            cfg.train.lr = Some(match mode {
                LossMode::Contrastive => 0.03,
                LossMode::Cosine => 0.1,
            });
            let report = train(&cfg, &data, None).map_err(err)?;
            let h = &report.history;
            let finite = h.iter().all(|m| m.loss_total.is_finite() && m.rs_infonce.is_finite());
            let s = smooth(&h.iter().map(|m| m.rs_infonce).collect::<Vec<_>>(), SMOOTH);
            let (first, last) = (s[0], s[s.len() - 1]);
            let tail = &h[h.len() - SMOOTH..];
            let baseline = tail.iter().map(|m| m.rs_baseline).sum::<f64>() / tail.len() as f64;
            let tr = &report.trainer;
            let r = eval_retrieval(&tr.encoder, &tr.state.query, &cfg, &held_out, 128, 3).map_err(err)?;
            let ok_a = finite && last < first && last <= 0.8 * baseline;
            let ok_b = r.top1_acc >= 3.0 * r.chance && r.pos_mean_cos - r.neg_mean_cos > 0.1;
            let line = format!(
                "{variant}/{mode} steps={} rs {first:.3}->{last:.3} baseline={baseline:.3} ratio={:.3} (a {}) top1={:.3} chance={:.4} gap={:.3} (b {}) [{:.0}s]",
                h.len(),
                last / baseline,
                if ok_a { "ok" } else { "FAIL" },
                r.top1_acc,
                r.chance,
                r.pos_mean_cos - r.neg_mean_cos,
                if ok_b { "ok" } else { "FAIL" },
                started.elapsed().as_secs_f64()
            );
            println!("    {line}");
            if !(ok_a && ok_b) {
                failures.push(line.clone());
            }
            lines.push(format!("{variant}/{mode} ratio={:.2} top1/chance={:.1}", last / baseline, r.top1_acc / r.chance));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(lines.join(", "))
}

// 7. EMA ---------------------------------------------------------------------

fn ema_contraction() -> Outcome {
    let cfg = EncoderConfig {
        stage_channels: [4, 4, 8, 8, 8],
        region_head_channels: 8,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (_, query) = Encoder::new::<f64>(&cfg, LossMode::Contrastive, &mut rng).map_err(err)?;
    let (_, key) = Encoder::new::<f64>(&cfg, LossMode::Contrastive, &mut rng).map_err(err)?;
    let mut state = EncoderState::new(query, 0.999);
    state.key = key;
    let d0 = state.key.distance(&state.query);
    let mut worst = 0.0f64;
    for t in 1..=2000 {
        state.momentum_update().map_err(err)?;
        if t % 250 == 0 {
            let want = 0.999f64.powi(t) * d0;
            worst = worst.max((state.key.distance(&state.query) - want).abs() / want);
        }
    }
    ensure(d0 > 0.0 && worst < 1e-9, || format!("relative error {worst:.2e}"))?;
    Ok(format!("relative error {worst:.2e} over 2000 steps"))
}

// 8. determinism and persistence ---------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = SyntheticDataset::new(32, 80, 9);
    for (i, mode) in [LossMode::Contrastive, LossMode::Cosine].into_iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.loss.mode = mode;
        cfg.encoder.variant = Variant::Fpn;
        cfg.encoder.stage_channels = [4, 8, 8, 16, 16];
        cfg.train.epochs = 2;
        cfg.train.seed = 21;
        let (a, b) = (dir.path().join(format!("a{i}")), dir.path().join(format!("b{i}")));
        train(&cfg, &data, Some(&a)).map_err(err)?;
        train(&cfg, &data, Some(&b)).map_err(err)?;
        let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        ensure(read(a.join("metrics.csv"))? == read(b.join("metrics.csv"))?, || format!("{mode}: metrics differ"))?;
        ensure(read(a.join("checkpoint.bin"))? == read(b.join("checkpoint.bin"))?, || {
            format!("{mode}: checkpoints differ")
        })?;
        let ck = load_checkpoint(&a.join("checkpoint.bin")).map_err(err)?;
        restore(&ck).map_err(err)?;
        let again = a.join("again.bin");
        save_checkpoint(&again, &ck).map_err(err)?;
        ensure(read(again)? == read(a.join("checkpoint.bin"))?, || "re-saved checkpoint differs".into())?;
        let bits = |p: &resim_core::encoder::ParamSet<f32>| {
            p.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        let report = train(&cfg, &data, None).map_err(err)?;
        ensure(bits(&report.trainer.state.query) == bits(&ck.query), || "query params differ".into())?;
        ensure(bits(&report.trainer.state.key) == bits(&ck.key), || "key params differ".into())?;
    }
    Ok("metrics.csv and checkpoints identical; load/save bit-exact".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 negative counts", negative_counts),
        ("2 pooling oracles", pooling_oracles),
        ("3 gradient suite", gradient_suite),
        ("4 geometry exactness", geometry_exactness),
        ("5 loss oracles", loss_oracles),
        ("6 trainability", trainability),
        ("7 EMA contraction", ema_contraction),
        ("8 determinism and persistence", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
