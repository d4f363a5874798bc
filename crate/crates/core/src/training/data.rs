//! Procedural clean scenes and their degraded counterparts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::degrade::{degrade, DegradationParams};
use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub name: String,
    pub degraded: Tensor,
    pub clean: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Seeded split into `(train, validation)`; validation gets
    /// `round(len * fraction)` pairs but never all of them.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(FusionError::invalid(format!("validation fraction must be in [0,1), got {fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * fraction).round() as usize).min(self.len().saturating_sub(1));
        let pick = |ids: &[usize]| Dataset::new(ids.iter().map(|&i| self.pairs[i].clone()).collect());
        Ok((pick(&idx[n_val..]), pick(&idx[..n_val])))
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Fractal value noise in `[0,1]`, three octaves on random lattices.
fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 0.5;
    let mut total = 0.0;
    for cells in [4usize, 8, 16] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
                let top = lerp(at(iy, ix), at(iy, ix + 1), tx);
                let bottom = lerp(at(iy + 1, ix), at(iy + 1, ix + 1), tx);
                out[y * w + x] += amp * lerp(top, bottom, ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// A random scene: colour gradient, textured noise and a few flat shapes.
pub fn clean_scene<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let (h, w) = (size, size);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let noise = value_noise(h, w, rng);
    let texture: f64 = rng.gen_range(0.1..0.4);
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy + 0.5;
            let n = noise[y * w + x] - 0.5;
            for c in 0..3 {
                img[c * h * w + y * w + x] = lerp(c0[c], c1[c], u.clamp(0.0, 1.0)) + texture * n;
            }
        }
    }
    for _ in 0..rng.gen_range(1..=3) {
        let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.08..0.25) * size as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    ry * ry + rx * rx <= r * r
                } else {
                    ry.abs() <= r && rx.abs() <= r * 0.7
                };
                if inside {
                    for c in 0..3 {
                        img[c * h * w + y * w + x] = colour[c];
                    }
                }
            }
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(&[3, h, w], data).expect("scene is finite")
}

/// `count` seeded `(degraded, clean)` pairs of `size x size` pixels, each
/// with its own random water.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(FusionError::invalid("synthetic dataset needs at least one image"));
    }
    if size < 8 {
        return Err(FusionError::invalid(format!("synthetic images must be at least 8x8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let clean = clean_scene(size, &mut rng);
        let water = DegradationParams::sample(&mut rng);
        pairs.push(Pair {
            name: format!("synthetic_{i:04}"),
            degraded: degrade(&clean, &water)?,
            clean,
        });
    }
    Ok(Dataset::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_in_range_and_seeded() {
        let a = synthetic_dataset(4, 16, 3).unwrap();
        let b = synthetic_dataset(4, 16, 3).unwrap();
        assert_eq!(a, b);
        for p in &a.pairs {
            assert_eq!(p.clean.shape(), &[3, 16, 16]);
            assert!(p.clean.data().iter().chain(p.degraded.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(p.clean, p.degraded);
        }
        assert_ne!(a, synthetic_dataset(4, 16, 4).unwrap());
    }

    #[test]
    fn split_partitions() {
        let d = synthetic_dataset(10, 8, 0).unwrap();
        let (train, val) = d.split(0.2, 1).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut names: Vec<_> = train.pairs.iter().chain(&val.pairs).map(|p| p.name.clone()).collect();
        names.sort();
        assert_eq!(names, d.pairs.iter().map(|p| p.name.clone()).collect::<Vec<_>>());
        let one = synthetic_dataset(1, 8, 0).unwrap();
        assert_eq!(one.split(0.5, 0).unwrap().0.len(), 1);
    }

    #[test]
    fn empty_or_tiny_rejected() {
        assert!(synthetic_dataset(0, 16, 0).is_err());
        assert!(synthetic_dataset(1, 4, 0).is_err());
    }
}
