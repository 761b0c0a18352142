//! Image sources: a procedural shapes dataset and a directory of PPM files.

use crate::augment::Image;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<Image>;
}

/// Procedural images: a smooth low-frequency background plus a few solid or
/// striped shapes. Image `i` depends only on `(seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub count: usize,
    pub canvas: usize,
    pub seed: u64,
    /// Inclusive range of shapes per image.
    pub shapes: (usize, usize),
}

impl SyntheticDataset {
    pub fn new(count: usize, canvas: usize, seed: u64) -> Self {
        SyntheticDataset {
            count,
            canvas,
            seed,
            shapes: (2, 4),
        }
    }

    /// Writes every image as `img_00000.ppm`, ... into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        (0..self.count)
            .map(|i| {
                let p = dir.join(format!("img_{i:05}.ppm"));
                self.get(i)?.save(&p)?;
                Ok(p)
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<Image> {
        if index >= self.count {
            return Err(Error::Config(format!("image {index} out of range 0..{}", self.count)));
        }
        let s = self.canvas;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut img = Image::filled(s, s, [0.0; 3]);
        let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
        let waves: Vec<[f32; 4]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                    rng.gen_range(0.05..0.15),
                ]
            })
            .collect();
        for c in 0..3 {
            for i in 0..s {
                for j in 0..s {
                    let (x, y) = (j as f32 + 0.5, i as f32 + 0.5);
                    let tex: f32 = waves
                        .iter()
                        .enumerate()
                        .map(|(w, &[fx, fy, ph, amp])| amp * (fx * x + fy * y + ph + (w * c) as f32).sin())
                        .sum();
                    img.set(c, i, j, base[c] + tex);
                }
            }
        }
        let n = rng.gen_range(self.shapes.0..=self.shapes.1.max(self.shapes.0));
        for _ in 0..n {
            let kind = [Shape::Rect, Shape::Ellipse, Shape::Triangle][rng.gen_range(0..3)];
            let sz = s as f32;
            let (hw, hh) = (rng.gen_range(0.1..0.25) * sz, rng.gen_range(0.1..0.25) * sz);
            let (cx, cy) = (rng.gen_range(hw..sz - hw), rng.gen_range(hh..sz - hh));
            let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let alt: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let stripe = rng.gen_bool(0.5).then(|| (rng.gen_range(3.0..7.0f32), rng.gen_bool(0.5)));
            for i in 0..s {
                for j in 0..s {
                    let (dx, dy) = ((j as f32 + 0.5 - cx) / hw, (i as f32 + 0.5 - cy) / hh);
                    let inside = match kind {
                        Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                        Shape::Triangle => dy <= 1.0 && dx.abs() <= (dy + 1.0) / 2.0,
                    };
                    if !inside {
                        continue;
                    }
                    let use_alt = stripe.is_some_and(|(period, vertical)| {
                        let t = if vertical { j } else { i } as f32;
                        (t / period).floor() as i64 % 2 == 0
                    });
                    let col = if use_alt { alt } else { color };
                    for (c, &v) in col.iter().enumerate() {
                        img.set(c, i, j, v);
                    }
                }
            }
        }
        img.quantize();
        Ok(img)
    }
}

/// Every `*.ppm` file of a directory, in file-name order.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    files: Vec<PathBuf>,
}

impl FolderDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Image(format!("no .ppm files in {}", dir.display())));
        }
        Ok(FolderDataset { files })
    }
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn get(&self, index: usize) -> Result<Image> {
        Image::load(&self.files[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let d = SyntheticDataset::new(4, 48, 7);
        assert_eq!(d.get(2).unwrap(), d.get(2).unwrap());
        assert_ne!(d.get(1).unwrap(), d.get(2).unwrap());
        assert_ne!(d.get(1).unwrap(), SyntheticDataset::new(4, 48, 8).get(1).unwrap());
        assert!(d.get(4).is_err());
        let img = d.get(0).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn images_contain_localized_objects() {
        // a shape makes some pixels depart from the smooth background
        let d = SyntheticDataset::new(20, 64, 3);
        for i in 0..d.len() {
            let img = d.get(i).unwrap();
            let mut jumps = 0;
            for c in 0..3 {
                for r in 0..64 {
                    for col in 1..64 {
                        if (img.get(c, r, col) - img.get(c, r, col - 1)).abs() > 0.05 {
                            jumps += 1;
                        }
                    }
                }
            }
            assert!(jumps > 0, "image {i} has no edges");
        }
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = SyntheticDataset::new(3, 16, 1);
        d.write_to(dir.path()).unwrap();
        let f = FolderDataset::open(dir.path()).unwrap();
        assert_eq!(f.len(), 3);
        for i in 0..3 {
            assert_eq!(f.get(i).unwrap(), d.get(i).unwrap());
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(FolderDataset::open(empty.path()).is_err());
    }
}
