//! Deterministic inputs shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resim_core::{Region, RunConfig, Tensor, Variant};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// `n` unit rows of width `c`.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f32> {
    let mut t = uniform(rng, &[n, c]);
    for row in t.data_mut().chunks_mut(c) {
        let s = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Random regions inside an `h x w` feature map.
pub fn regions(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<Region> {
    (0..count)
        .map(|_| {
            let t = rng.gen_range(0.0..h as f64 - 1.0);
            let l = rng.gen_range(0.0..w as f64 - 1.0);
            Region::new(t, l, rng.gen_range(t + 0.5..h as f64), rng.gen_range(l + 0.5..w as f64)).expect("region")
        })
        .collect()
}

/// The default run at batch 8 for the given variant.
pub fn run_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.variant = variant;
    cfg.train.batch_size = 8;
    cfg
}
